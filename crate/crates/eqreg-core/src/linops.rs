//! Dense and convolutional linear operators with exact adjoints.
//!
//! The 2-D convolution follows the true convolution convention
//! `F[h,k] = sum_{i,j} W[i,j] * U[h-i, k-j]` with zero padding and unchanged
//! spatial size; its adjoint is correlation with the same kernel (equivalently
//! convolution with the flipped kernel). Deep-learning layers usually
//! implement correlation instead, so kernels visualized from this module
//! appear flipped relative to such frameworks.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::ImageSignal;

/// Dense `q x r` matrix, row-major, finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    entries: Array2<f64>,
}

impl DenseMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::new"));
        }
        Ok(Self { entries })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: Array2::eye(n),
        }
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Array2<f64> {
        &mut self.entries
    }

    /// `y = M x`.
    pub fn matvec(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if self.cols() != x.len() {
            return Err(Error::shape("matvec", self.cols(), x.len()));
        }
        Ok(self.entries.dot(&x))
    }

    /// `y = M^T x`.
    pub fn matvec_t(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if self.rows() != x.len() {
            return Err(Error::shape("matvec_t", self.rows(), x.len()));
        }
        Ok(self.entries.t().dot(&x))
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.entries.mapv_inplace(|v| v * factor);
    }
}

/// Stack of `c_out` convolution kernels acting on a single-channel image.
///
/// Kernels are odd-sized and centered; boundary handling is zero padding, so
/// output fields keep the input's spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernelBank {
    // (c_out, k_h, k_w)
    kernels: Array3<f64>,
}

impl ConvKernelBank {
    pub fn new(kernels: Array3<f64>) -> Result<Self> {
        let (c, kh, kw) = kernels.dim();
        if c == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidArgument("empty kernel bank".into()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernels must be odd-sized to be centered, got {kh}x{kw}"
            )));
        }
        if !kernels.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ConvKernelBank::new"));
        }
        Ok(Self { kernels })
    }

    pub fn single(kernel: Array2<f64>) -> Result<Self> {
        let (kh, kw) = kernel.dim();
        let mut stack = Array3::zeros((1, kh, kw));
        stack.index_axis_mut(ndarray::Axis(0), 0).assign(&kernel);
        Self::new(stack)
    }

    pub fn channels(&self) -> usize {
        self.kernels.dim().0
    }

    pub fn kernel_shape(&self) -> (usize, usize) {
        let (_, kh, kw) = self.kernels.dim();
        (kh, kw)
    }

    pub fn kernels(&self) -> &Array3<f64> {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.kernels
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.kernels.mapv_inplace(|v| v * factor);
    }

    /// Per-channel 2-D convolution of `u`, zero padded, same spatial size.
    ///
    /// `F[h,k] = sum_{i,j} W[i,j] * U[h-i, k-j]`, accumulated one kernel
    /// offset at a time over its valid output rectangle so the inner loops
    /// stay branch-free.
    pub fn apply(&self, u: &ImageSignal) -> Array3<f64> {
        let (rows, cols) = (u.rows(), u.cols());
        let um = u.to_matrix();
        let src = um.as_slice().expect("standard layout");
        let (c_out, kh, kw) = self.kernels.dim();
        let (a, b) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut out = Array3::zeros((c_out, rows, cols));
        let dst = out.as_slice_mut().expect("standard layout");
        for c in 0..c_out {
            for i in -a..=a {
                let (h_lo, h_hi) = shifted_span(rows, i);
                for j in -b..=b {
                    let w = self.kernels[[c, (i + a) as usize, (j + b) as usize]];
                    if w == 0.0 {
                        continue;
                    }
                    let (k_lo, k_hi) = shifted_span(cols, j);
                    if k_lo >= k_hi {
                        continue;
                    }
                    let width = k_hi - k_lo;
                    for h in h_lo..h_hi {
                        let o_base = (c * rows + h) * cols + k_lo;
                        let s_base = (h as isize - i) as usize * cols + (k_lo as isize - j) as usize;
                        let d = &mut dst[o_base..o_base + width];
                        let s = &src[s_base..s_base + width];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += w * sv;
                        }
                    }
                }
            }
        }
        out
    }

    /// Exact adjoint of [`apply`](Self::apply) under the Euclidean inner
    /// product: correlate each channel with its kernel and sum channels.
    pub fn adjoint(&self, v: ArrayView3<'_, f64>) -> Result<ImageSignal> {
        let (c_in, rows, cols) = v.dim();
        let (c_out, kh, kw) = self.kernels.dim();
        if c_in != c_out {
            return Err(Error::shape("conv adjoint channels", c_out, c_in));
        }
        let (a, b) = ((kh / 2) as isize, (kw / 2) as isize);
        let field = v.to_owned();
        let src = field.as_slice().expect("standard layout");
        // (K^T V)[h,k] = sum_{c,i,j} W[c,i,j] * V[c, h+i, k+j].
        let mut out = Array2::zeros((rows, cols));
        let dst = out.as_slice_mut().expect("standard layout");
        for c in 0..c_out {
            for i in -a..=a {
                let (h_lo, h_hi) = shifted_span(rows, -i);
                for j in -b..=b {
                    let w = self.kernels[[c, (i + a) as usize, (j + b) as usize]];
                    if w == 0.0 {
                        continue;
                    }
                    let (k_lo, k_hi) = shifted_span(cols, -j);
                    if k_lo >= k_hi {
                        continue;
                    }
                    let width = k_hi - k_lo;
                    for h in h_lo..h_hi {
                        let o_base = h * cols + k_lo;
                        let s_base =
                            (c * rows + (h as isize + i) as usize) * cols + (k_lo as isize + j) as usize;
                        let d = &mut dst[o_base..o_base + width];
                        let s = &src[s_base..s_base + width];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += w * sv;
                        }
                    }
                }
            }
        }
        Ok(ImageSignal::from_matrix(&out))
    }

    /// Gradient of `<apply(u), v>` with respect to the kernel entries.
    ///
    /// `grad[c][i,j] = sum_{h,k} v[c,h,k] * u[h-i, k-j]`, zero padded.
    pub fn kernel_grad(&self, u: &ImageSignal, v: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let (c_in, rows, cols) = v.dim();
        let (c_out, kh, kw) = self.kernels.dim();
        if c_in != c_out {
            return Err(Error::shape("conv kernel_grad channels", c_out, c_in));
        }
        if rows != u.rows() || cols != u.cols() {
            return Err(Error::shape(
                "conv kernel_grad field",
                format!("{}x{}", u.rows(), u.cols()),
                format!("{rows}x{cols}"),
            ));
        }
        let um = u.to_matrix();
        let usrc = um.as_slice().expect("standard layout");
        let field = v.to_owned();
        let vsrc = field.as_slice().expect("standard layout");
        let (a, b) = ((kh / 2) as isize, (kw / 2) as isize);
        let mut grad = Array3::zeros((c_out, kh, kw));
        for c in 0..c_out {
            for i in -a..=a {
                let (h_lo, h_hi) = shifted_span(rows, i);
                for j in -b..=b {
                    let (k_lo, k_hi) = shifted_span(cols, j);
                    if k_lo >= k_hi {
                        continue;
                    }
                    let width = k_hi - k_lo;
                    let mut acc = 0.0;
                    for h in h_lo..h_hi {
                        let v_base = (c * rows + h) * cols + k_lo;
                        let u_base = (h as isize - i) as usize * cols + (k_lo as isize - j) as usize;
                        let vr = &vsrc[v_base..v_base + width];
                        let ur = &usrc[u_base..u_base + width];
                        for (a_, b_) in vr.iter().zip(ur) {
                            acc += a_ * b_;
                        }
                    }
                    grad[[c, (i + a) as usize, (j + b) as usize]] = acc;
                }
            }
        }
        Ok(grad)
    }
}

/// Output indices `h` with `h - shift` still inside `[0, n)`.
fn shifted_span(n: usize, shift: isize) -> (usize, usize) {
    let lo = shift.max(0) as usize;
    let hi = (n as isize + shift).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

/// Forward operator `K` of an inverse problem, with its exact adjoint.
///
/// All variants map image space to a measurement space of the same dimension
/// (`m = n`); the image shape is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearOperator {
    Identity {
        rows: usize,
        cols: usize,
    },
    /// Zeroes every pixel whose image row is masked; `masked[h]` flags row `h`.
    RowMask {
        rows: usize,
        cols: usize,
        masked: Vec<bool>,
    },
    Conv2D {
        kernel: ConvKernelBank,
        rows: usize,
        cols: usize,
    },
}

impl LinearOperator {
    pub fn image_shape(&self) -> (usize, usize) {
        match self {
            LinearOperator::Identity { rows, cols }
            | LinearOperator::RowMask { rows, cols, .. }
            | LinearOperator::Conv2D { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn dim(&self) -> usize {
        let (r, c) = self.image_shape();
        r * c
    }

    fn check_shape(&self, u: &ImageSignal, context: &'static str) -> Result<()> {
        let (rows, cols) = self.image_shape();
        if u.rows() != rows || u.cols() != cols {
            return Err(Error::shape(
                context,
                format!("{rows}x{cols}"),
                format!("{}x{}", u.rows(), u.cols()),
            ));
        }
        Ok(())
    }

    /// `K u`.
    pub fn apply(&self, u: &ImageSignal) -> Result<Array1<f64>> {
        self.check_shape(u, "LinearOperator::apply")?;
        match self {
            LinearOperator::Identity { .. } => Ok(u.data().clone()),
            LinearOperator::RowMask { rows, cols, masked } => {
                let mut out = u.data().clone();
                for (h, is_masked) in masked.iter().enumerate() {
                    if *is_masked {
                        for k in 0..*cols {
                            out[k * rows + h] = 0.0;
                        }
                    }
                }
                Ok(out)
            }
            LinearOperator::Conv2D { kernel, .. } => {
                let field = kernel.apply(u);
                Ok(ImageSignal::from_matrix(
                    &field.index_axis(ndarray::Axis(0), 0).to_owned(),
                )
                .into_data())
            }
        }
    }

    /// `K^T v`.
    pub fn adjoint(&self, v: ArrayView1<'_, f64>) -> Result<ImageSignal> {
        let (rows, cols) = self.image_shape();
        if v.len() != rows * cols {
            return Err(Error::shape("LinearOperator::adjoint", rows * cols, v.len()));
        }
        match self {
            LinearOperator::Identity { .. } => ImageSignal::new(v.to_owned(), rows, cols),
            LinearOperator::RowMask { masked, .. } => {
                let mut out = v.to_owned();
                for (h, is_masked) in masked.iter().enumerate() {
                    if *is_masked {
                        for k in 0..cols {
                            out[k * rows + h] = 0.0;
                        }
                    }
                }
                ImageSignal::new(out, rows, cols)
            }
            LinearOperator::Conv2D { kernel, .. } => {
                let img = ImageSignal::new(v.to_owned(), rows, cols)?;
                let field = img.to_matrix();
                let mut stacked = Array3::zeros((1, rows, cols));
                stacked.index_axis_mut(ndarray::Axis(0), 0).assign(&field);
                kernel.adjoint(stacked.view())
            }
        }
    }

    /// `K^T K u` in one call.
    pub fn normal_apply(&self, u: &ImageSignal) -> Result<ImageSignal> {
        let v = self.apply(u)?;
        self.adjoint(v.view())
    }

    /// Largest singular value; analytic where possible, power iteration for
    /// the convolution variant.
    pub fn operator_norm(&self) -> f64 {
        match self {
            LinearOperator::Identity { .. } => 1.0,
            LinearOperator::RowMask { masked, .. } => {
                if masked.iter().all(|m| *m) {
                    0.0
                } else {
                    1.0
                }
            }
            LinearOperator::Conv2D { kernel, rows, cols } => {
                spectral_norm_conv(kernel, *rows, *cols, 500, 1e-10).value
            }
        }
    }
}

/// Result of a power-iteration spectral-norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    /// False when the Rayleigh quotient had not settled within the iteration
    /// budget; `value` then holds the last estimate.
    pub converged: bool,
    pub iters: usize,
}

fn power_iteration<F, G>(apply: &F, adjoint: &G, start: Array1<f64>, iters: usize, tol: f64) -> SpectralEstimate
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
    G: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
{
    let mut v = start;
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv == 0.0 {
        return SpectralEstimate { value: 0.0, converged: true, iters: 0 };
    }
    v.mapv_inplace(|x| x / nv);

    let mut estimate = 0.0;
    for it in 1..=iters {
        let w = apply(v.view());
        let sigma = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let z = adjoint(w.view());
        let nz = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nz == 0.0 {
            // v is in the kernel of A^T A; the estimate is exact for this
            // starting direction.
            return SpectralEstimate { value: sigma, converged: true, iters: it };
        }
        v = z.mapv(|x| x / nz);
        if (sigma - estimate).abs() <= tol * sigma.max(1.0) {
            return SpectralEstimate { value: sigma, converged: true, iters: it };
        }
        estimate = sigma;
    }
    SpectralEstimate { value: estimate, converged: false, iters }
}

/// Power iteration on `op^T op` for a generic apply/adjoint pair.
///
/// Starts from the normalized all-ones vector for reproducibility, then
/// repeats from a seeded random vector; the two estimates agree in the
/// generic case, and the second run recovers the top singular value when the
/// all-ones start happens to be orthogonal to it (an otherwise undetectable
/// stall of the Rayleigh quotient).
pub fn spectral_norm_pair<F, G>(apply: F, adjoint: G, dim: usize, iters: usize, tol: f64) -> SpectralEstimate
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
    G: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
{
    assert!(iters >= 1, "power iteration needs at least one iteration");
    let ones = Array1::ones(dim);
    let first = power_iteration(&apply, &adjoint, ones, iters, tol);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5EC7_0901);
    let random = Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
    let second = power_iteration(&apply, &adjoint, random, iters, tol);

    if second.value > first.value {
        second
    } else {
        first
    }
}

pub fn spectral_norm_dense(m: &DenseMatrix, iters: usize, tol: f64) -> SpectralEstimate {
    let mt = m.entries().t();
    spectral_norm_pair(
        |x| m.entries().dot(&x),
        |x| mt.dot(&x),
        m.cols(),
        iters,
        tol,
    )
}

pub fn spectral_norm_conv(bank: &ConvKernelBank, rows: usize, cols: usize, iters: usize, tol: f64) -> SpectralEstimate {
    let channels = bank.channels();
    spectral_norm_pair(
        |x| {
            let img = ImageSignal::new(x.to_owned(), rows, cols).expect("shape fixed");
            let field = bank.apply(&img);
            flatten_field(field.view())
        },
        |x| {
            let field = unflatten_field(x, channels, rows, cols);
            bank.adjoint(field.view()).expect("shape fixed").into_data()
        },
        rows * cols,
        iters,
        tol,
    )
}

/// Stacks a `(c, rows, cols)` field into one vector, channel by channel, each
/// channel column-stacked.
pub fn flatten_field(field: ArrayView3<'_, f64>) -> Array1<f64> {
    let (c, rows, cols) = field.dim();
    let mut out = Array1::zeros(c * rows * cols);
    for ch in 0..c {
        for k in 0..cols {
            for h in 0..rows {
                out[ch * rows * cols + k * rows + h] = field[[ch, h, k]];
            }
        }
    }
    out
}

pub fn unflatten_field(v: ArrayView1<'_, f64>, c: usize, rows: usize, cols: usize) -> Array3<f64> {
    assert_eq!(v.len(), c * rows * cols);
    let mut out = Array3::zeros((c, rows, cols));
    for ch in 0..c {
        for k in 0..cols {
            for h in 0..rows {
                out[[ch, h, k]] = v[ch * rows * cols + k * rows + h];
            }
        }
    }
    out
}

/// Solves `A x = b` for small dense systems by LU with partial pivoting.
pub fn solve_dense(a: &Array2<f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("solve_dense", format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
    }
    if b.len() != n {
        return Err(Error::shape("solve_dense rhs", n, b.len()));
    }
    let mut lu = a.clone();
    let mut x = b.to_owned();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[[col, col]].abs();
        for row in col + 1..n {
            let cand = lu[[row, col]].abs();
            if cand > best {
                best = cand;
                pivot = row;
            }
        }
        if best == 0.0 {
            return Err(Error::SingularSystem(col));
        }
        if pivot != col {
            for j in 0..n {
                lu.swap([col, j], [pivot, j]);
            }
            x.swap(col, pivot);
            perm.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = lu[[row, col]] / lu[[col, col]];
            lu[[row, col]] = factor;
            for j in col + 1..n {
                lu[[row, j]] -= factor * lu[[col, j]];
            }
            x[row] -= factor * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for j in row + 1..n {
            acc -= lu[[row, j]] * x[j];
        }
        x[row] = acc / lu[[row, row]];
    }
    Ok(x)
}

/// Materializes a linear map as a dense matrix by probing basis vectors.
/// Intended for oracles and small-system assembly.
pub fn dense_from_apply<F>(dim_in: usize, dim_out: usize, apply: F) -> Array2<f64>
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
{
    let mut m = Array2::zeros((dim_out, dim_in));
    let mut e = Array1::zeros(dim_in);
    for j in 0..dim_in {
        e[j] = 1.0;
        let col = apply(e.view());
        for i in 0..dim_out {
            m[[i, j]] = col[i];
        }
        e[j] = 0.0;
    }
    m
}

pub fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

pub fn norm2(a: ArrayView1<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
