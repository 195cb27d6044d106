//! The two-layer regularizer network `N(u) = gamma * C^T sigma(xi * A u + b)`
//! in dense and convolutional variants, with hand-derived vector-Jacobian
//! products for the input and for every parameter.
//!
//! In tied mode `C` is structurally the same storage as `A`, which makes the
//! network the exact gradient of a Moreau-envelope regularizer composed with
//! the affine layer; the untied variant is the free two-layer map.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linops::{spectral_norm_conv, spectral_norm_dense, ConvKernelBank, DenseMatrix};
use crate::proxmap::Activation;
use crate::signal::ImageSignal;

/// Trainable layers; `c: None` means tied weights (C aliases A).
#[derive(Debug, Clone, PartialEq)]
pub enum ParamLayers {
    Dense {
        a: DenseMatrix,
        c: Option<DenseMatrix>,
        b: Array1<f64>,
    },
    /// Convolutional variant; no bias, pre-activation scaled by `xi`.
    Conv {
        a: ConvKernelBank,
        c: Option<ConvKernelBank>,
    },
}

/// Parameters of the regularizer network.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerParams {
    layers: ParamLayers,
    gamma: f64,
    xi: f64,
}

impl RegularizerParams {
    pub fn new(layers: ParamLayers, gamma: f64, xi: f64) -> Result<Self> {
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        if xi <= 0.0 || !xi.is_finite() {
            return Err(Error::InvalidArgument(format!("xi must be positive, got {xi}")));
        }
        match &layers {
            ParamLayers::Dense { a, c, b } => {
                if let Some(c) = c {
                    if c.rows() != a.rows() || c.cols() != a.cols() {
                        return Err(Error::shape(
                            "RegularizerParams dense C",
                            format!("{}x{}", a.rows(), a.cols()),
                            format!("{}x{}", c.rows(), c.cols()),
                        ));
                    }
                }
                if b.len() != a.rows() {
                    return Err(Error::shape("RegularizerParams bias", a.rows(), b.len()));
                }
            }
            ParamLayers::Conv { a, c } => {
                if let Some(c) = c {
                    if c.channels() != a.channels() || c.kernel_shape() != a.kernel_shape() {
                        return Err(Error::shape(
                            "RegularizerParams conv C",
                            format!("{}ch {:?}", a.channels(), a.kernel_shape()),
                            format!("{}ch {:?}", c.channels(), c.kernel_shape()),
                        ));
                    }
                }
            }
        }
        Ok(Self { layers, gamma, xi })
    }

    /// Dense layers with entries i.i.d. uniform on `[-1/sqrt(n), 1/sqrt(n)]`
    /// and zero bias; in untied mode C starts equal to A.
    pub fn init_dense(s: usize, n: usize, gamma: f64, tied: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (n as f64).sqrt();
        let a = DenseMatrix::new(Array2::from_shape_fn((s, n), |_| rng.gen_range(-bound..bound)))?;
        let c = if tied { None } else { Some(a.clone()) };
        let b = Array1::zeros(s);
        Self::new(ParamLayers::Dense { a, c, b }, gamma, 1.0)
    }

    /// Random convolutional kernels with fan-in scaling; C starts equal to A
    /// in untied mode.
    pub fn init_conv_random(
        channels: usize,
        kh: usize,
        kw: usize,
        gamma: f64,
        xi: f64,
        tied: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / ((kh * kw) as f64).sqrt();
        let a = ConvKernelBank::new(Array3::from_shape_fn((channels, kh, kw), |_| {
            rng.gen_range(-bound..bound)
        }))?;
        let c = if tied { None } else { Some(a.clone()) };
        Self::new(ParamLayers::Conv { a, c }, gamma, xi)
    }

    /// Two-channel finite-difference kernels (horizontal and vertical image
    /// gradients) centered in a `kh x kw` window; the total-variation-style
    /// starting point for the convolutional denoiser.
    pub fn init_conv_tv(kh: usize, kw: usize, gamma: f64, xi: f64, tied: bool) -> Result<Self> {
        if kh < 3 || kw < 3 {
            return Err(Error::InvalidArgument(
                "finite-difference kernels need at least a 3x3 window".into(),
            ));
        }
        let (ch, cw) = (kh / 2, kw / 2);
        let mut kernels = Array3::zeros((2, kh, kw));
        // Difference along columns: u[h,k] - u[h,k-1].
        kernels[[0, ch, cw]] = 1.0;
        kernels[[0, ch, cw + 1]] = -1.0;
        // Difference along rows: u[h,k] - u[h-1,k].
        kernels[[1, ch, cw]] = 1.0;
        kernels[[1, ch + 1, cw]] = -1.0;
        let a = ConvKernelBank::new(kernels)?;
        let c = if tied { None } else { Some(a.clone()) };
        Self::new(ParamLayers::Conv { a, c }, gamma, xi)
    }

    pub fn layers(&self) -> &ParamLayers {
        &self.layers
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn tied(&self) -> bool {
        match &self.layers {
            ParamLayers::Dense { c, .. } => c.is_none(),
            ParamLayers::Conv { c, .. } => c.is_none(),
        }
    }

    /// Spectral-norm estimates of A and C (equal in tied mode). Convolutional
    /// norms depend on the image shape the bank acts on.
    pub fn layer_norms(&self, image_shape: (usize, usize), iters: usize, tol: f64) -> (f64, f64) {
        match &self.layers {
            ParamLayers::Dense { a, c, .. } => {
                let na = spectral_norm_dense(a, iters, tol).value;
                let nc = c.as_ref().map_or(na, |c| spectral_norm_dense(c, iters, tol).value);
                (na, nc)
            }
            ParamLayers::Conv { a, c } => {
                let (rows, cols) = image_shape;
                let na = spectral_norm_conv(a, rows, cols, iters, tol).value;
                let nc = c
                    .as_ref()
                    .map_or(na, |c| spectral_norm_conv(c, rows, cols, iters, tol).value);
                (na, nc)
            }
        }
    }

    /// Divides A (and C when untied) by the given norm estimates.
    pub fn normalize_layers(&mut self, norm_a: f64, norm_c: f64) {
        match &mut self.layers {
            ParamLayers::Dense { a, c, .. } => {
                if norm_a > 0.0 {
                    a.scale_in_place(1.0 / norm_a);
                }
                if let Some(c) = c {
                    if norm_c > 0.0 {
                        c.scale_in_place(1.0 / norm_c);
                    }
                }
            }
            ParamLayers::Conv { a, c } => {
                if norm_a > 0.0 {
                    a.scale_in_place(1.0 / norm_a);
                }
                if let Some(c) = c {
                    if norm_c > 0.0 {
                        c.scale_in_place(1.0 / norm_c);
                    }
                }
            }
        }
    }

    /// Mutable slices of every trainable array, in a fixed order:
    /// A, then C (untied only), then b (dense only).
    pub fn components_mut(&mut self) -> Vec<&mut [f64]> {
        match &mut self.layers {
            ParamLayers::Dense { a, c, b } => {
                let mut out = vec![a.entries_mut().as_slice_mut().expect("standard layout")];
                if let Some(c) = c {
                    out.push(c.entries_mut().as_slice_mut().expect("standard layout"));
                }
                out.push(b.as_slice_mut().expect("standard layout"));
                out
            }
            ParamLayers::Conv { a, c } => {
                let mut out = vec![a.kernels_mut().as_slice_mut().expect("standard layout")];
                if let Some(c) = c {
                    out.push(c.kernels_mut().as_slice_mut().expect("standard layout"));
                }
                out
            }
        }
    }
}

/// Backward-pass cache from [`regnet_forward`].
#[derive(Debug, Clone)]
pub enum RegNetTape {
    Dense {
        input: Array1<f64>,
        pre: Array1<f64>,
        mask: Array1<f64>,
        activated: Array1<f64>,
    },
    Conv {
        input: ImageSignal,
        pre: Array3<f64>,
        mask: Array3<f64>,
        activated: Array3<f64>,
    },
}

impl RegNetTape {
    /// The pre-activation vector (flattened for the conv variant).
    pub fn pre_activation(&self) -> Array1<f64> {
        match self {
            RegNetTape::Dense { pre, .. } => pre.clone(),
            RegNetTape::Conv { pre, .. } => crate::linops::flatten_field(pre.view()),
        }
    }
}

/// Parameter-shaped gradients, mirroring [`ParamLayers`]; tied mode carries
/// the combined contribution of both occurrences of A.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrads {
    Dense {
        a: Array2<f64>,
        c: Option<Array2<f64>>,
        b: Array1<f64>,
    },
    Conv {
        a: Array3<f64>,
        c: Option<Array3<f64>>,
    },
}

impl ParamGrads {
    pub fn zeros_like(params: &RegularizerParams) -> Self {
        match params.layers() {
            ParamLayers::Dense { a, c, b } => ParamGrads::Dense {
                a: Array2::zeros((a.rows(), a.cols())),
                c: c.as_ref().map(|c| Array2::zeros((c.rows(), c.cols()))),
                b: Array1::zeros(b.len()),
            },
            ParamLayers::Conv { a, c } => {
                let (kh, kw) = a.kernel_shape();
                ParamGrads::Conv {
                    a: Array3::zeros((a.channels(), kh, kw)),
                    c: c.as_ref().map(|c| {
                        let (kh, kw) = c.kernel_shape();
                        Array3::zeros((c.channels(), kh, kw))
                    }),
                }
            }
        }
    }

    pub fn components(&self) -> Vec<&[f64]> {
        match self {
            ParamGrads::Dense { a, c, b } => {
                let mut out = vec![a.as_slice().expect("standard layout")];
                if let Some(c) = c {
                    out.push(c.as_slice().expect("standard layout"));
                }
                out.push(b.as_slice().expect("standard layout"));
                out
            }
            ParamGrads::Conv { a, c } => {
                let mut out = vec![a.as_slice().expect("standard layout")];
                if let Some(c) = c {
                    out.push(c.as_slice().expect("standard layout"));
                }
                out
            }
        }
    }

    pub fn components_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            ParamGrads::Dense { a, c, b } => {
                let mut out = vec![a.as_slice_mut().expect("standard layout")];
                if let Some(c) = c {
                    out.push(c.as_slice_mut().expect("standard layout"));
                }
                out.push(b.as_slice_mut().expect("standard layout"));
                out
            }
            ParamGrads::Conv { a, c } => {
                let mut out = vec![a.as_slice_mut().expect("standard layout")];
                if let Some(c) = c {
                    out.push(c.as_slice_mut().expect("standard layout"));
                }
                out
            }
        }
    }

    /// `self += alpha * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &ParamGrads, alpha: f64) {
        let others = other.components();
        for (mine, theirs) in self.components_mut().into_iter().zip(others) {
            for (m, t) in mine.iter_mut().zip(theirs.iter()) {
                *m += alpha * t;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for comp in self.components_mut() {
            for v in comp.iter_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.components().iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.components()
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// `g = gamma * C^T sigma(xi * A u + b)` plus the backward cache.
pub fn regnet_forward(
    params: &RegularizerParams,
    sigma: Activation,
    u: &ImageSignal,
) -> Result<(Array1<f64>, RegNetTape)> {
    match params.layers() {
        ParamLayers::Dense { a, c, b } => {
            if a.cols() != u.len() {
                return Err(Error::shape("regnet_forward input", a.cols(), u.len()));
            }
            let mut pre = a.matvec(u.view())?;
            pre.mapv_inplace(|v| params.xi() * v);
            pre += b;
            let activated = sigma.apply(&pre);
            let mask = sigma.apply_derivative(&pre);
            let c_ref = c.as_ref().unwrap_or(a);
            let mut g = c_ref.matvec_t(activated.view())?;
            g.mapv_inplace(|v| params.gamma() * v);
            Ok((
                g,
                RegNetTape::Dense {
                    input: u.data().clone(),
                    pre,
                    mask,
                    activated,
                },
            ))
        }
        ParamLayers::Conv { a, c } => {
            let mut pre = a.apply(u);
            pre.mapv_inplace(|v| params.xi() * v);
            let activated = pre.mapv(|v| sigma.eval(v));
            let mask = pre.mapv(|v| sigma.eval_derivative(v));
            let c_ref = c.as_ref().unwrap_or(a);
            let g = c_ref.adjoint(activated.view())?;
            let mut g = g.into_data();
            g.mapv_inplace(|v| params.gamma() * v);
            Ok((
                g,
                RegNetTape::Conv {
                    input: u.clone(),
                    pre,
                    mask,
                    activated,
                },
            ))
        }
    }
}

/// Transpose of the forward linearization applied to `w`:
/// `gamma * xi * A^T (mask .* (C w))`.
pub fn regnet_vjp_input(
    params: &RegularizerParams,
    tape: &RegNetTape,
    w: &Array1<f64>,
) -> Result<Array1<f64>> {
    match (params.layers(), tape) {
        (ParamLayers::Dense { a, c, .. }, RegNetTape::Dense { mask, .. }) => {
            if w.len() != a.cols() {
                return Err(Error::shape("regnet_vjp_input", a.cols(), w.len()));
            }
            let c_ref = c.as_ref().unwrap_or(a);
            let mut t = c_ref.matvec(w.view())?;
            t *= mask;
            let mut out = a.matvec_t(t.view())?;
            out.mapv_inplace(|v| params.gamma() * params.xi() * v);
            Ok(out)
        }
        (ParamLayers::Conv { a, c }, RegNetTape::Conv { input, mask, .. }) => {
            let w_img = input.with_data(w.clone())?;
            let c_ref = c.as_ref().unwrap_or(a);
            let mut t = c_ref.apply(&w_img);
            t *= mask;
            let out = a.adjoint(t.view())?;
            let mut out = out.into_data();
            out.mapv_inplace(|v| params.gamma() * params.xi() * v);
            Ok(out)
        }
        _ => Err(Error::Unsupported("tape does not match parameter variant")),
    }
}

/// Gradients of `<regnet_forward(u), w>` with respect to the parameters.
///
/// Dense: `dC = gamma * sigma(pre) w^T`, `dA = xi * (gamma * mask .* (C w)) u^T`,
/// `db = gamma * mask .* (C w)`. Tied mode returns the combined `dA + dC`
/// through both occurrences of A.
pub fn regnet_vjp_params(
    params: &RegularizerParams,
    tape: &RegNetTape,
    w: &Array1<f64>,
) -> Result<ParamGrads> {
    let gamma = params.gamma();
    let xi = params.xi();
    match (params.layers(), tape) {
        (
            ParamLayers::Dense { a, c, .. },
            RegNetTape::Dense {
                input,
                mask,
                activated,
                ..
            },
        ) => {
            if w.len() != a.cols() {
                return Err(Error::shape("regnet_vjp_params", a.cols(), w.len()));
            }
            let c_ref = c.as_ref().unwrap_or(a);
            // r = gamma * mask .* (C w): cotangent at the pre-activation.
            let mut r = c_ref.matvec(w.view())?;
            r *= mask;
            r.mapv_inplace(|v| gamma * v);

            let outer = |col: &Array1<f64>, row: &Array1<f64>| {
                let mut m = Array2::zeros((col.len(), row.len()));
                for i in 0..col.len() {
                    for j in 0..row.len() {
                        m[[i, j]] = col[i] * row[j];
                    }
                }
                m
            };
            let grad_c = {
                let mut m = outer(activated, w);
                m.mapv_inplace(|v| gamma * v);
                m
            };
            let mut grad_a = outer(&r, input);
            grad_a.mapv_inplace(|v| xi * v);
            let grad_b = r;

            if params.tied() {
                Ok(ParamGrads::Dense {
                    a: grad_a + &grad_c,
                    c: None,
                    b: grad_b,
                })
            } else {
                Ok(ParamGrads::Dense {
                    a: grad_a,
                    c: Some(grad_c),
                    b: grad_b,
                })
            }
        }
        (
            ParamLayers::Conv { a, c },
            RegNetTape::Conv {
                input,
                mask,
                activated,
                ..
            },
        ) => {
            let w_img = input.with_data(w.clone())?;
            let c_ref = c.as_ref().unwrap_or(a);
            // <gamma * C^T s, w> = gamma * <s, C w>.
            let mut grad_c = c_ref.kernel_grad(&w_img, activated.view())?;
            grad_c.mapv_inplace(|v| gamma * v);

            let mut r = c_ref.apply(&w_img);
            r *= mask;
            r.mapv_inplace(|v| gamma * v);
            let mut grad_a = a.kernel_grad(input, r.view())?;
            grad_a.mapv_inplace(|v| xi * v);

            if params.tied() {
                Ok(ParamGrads::Conv {
                    a: grad_a + &grad_c,
                    c: None,
                })
            } else {
                Ok(ParamGrads::Conv {
                    a: grad_a,
                    c: Some(grad_c),
                })
            }
        }
        _ => Err(Error::Unsupported("tape does not match parameter variant")),
    }
}
