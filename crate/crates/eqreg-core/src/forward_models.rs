//! The three inverse problems: denoising (`K = I`), inpainting (row mask),
//! deblurring (normalized convolution), plus Gaussian noise injection.
//!
//! Noise streams are counter-based: the generator is keyed by
//! `(seed, sample id, epoch)` rather than drawn from one sequential stream,
//! so per-epoch regeneration replays bit-identically regardless of batch
//! order or parallelism.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{ConvKernelBank, LinearOperator};
use crate::signal::ImageSignal;

/// Which forward operator degrades the data.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemKind {
    Denoise,
    /// Mask the given image rows (every pixel in them reads zero).
    Inpaint { mask_rows: Vec<usize> },
    /// Blur with a normalized kernel (entries summing to one).
    Deblur { kernel: ConvKernelBank },
}

impl ProblemKind {
    /// Inpainting with the default top-third mask for the given height.
    pub fn inpaint_top_third(rows: usize) -> Self {
        ProblemKind::Inpaint {
            mask_rows: default_mask(rows),
        }
    }

    /// Deblurring with the default diagonal motion-blur kernel.
    pub fn deblur_default() -> Self {
        ProblemKind::Deblur {
            kernel: default_blur_kernel(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Denoise => "denoise",
            ProblemKind::Inpaint { .. } => "inpaint",
            ProblemKind::Deblur { .. } => "deblur",
        }
    }
}

/// Row indices `0 .. ceil(rows / 3)`: one third of the image rows, from the
/// top, rounded up.
pub fn default_mask(rows: usize) -> Vec<usize> {
    let count = rows.div_ceil(3);
    (0..count).collect()
}

/// The 5x5 diagonal motion-blur kernel with 1/5 on the main diagonal.
pub fn default_blur_kernel() -> ConvKernelBank {
    let mut k = Array2::zeros((5, 5));
    for i in 0..5 {
        k[[i, i]] = 0.2;
    }
    ConvKernelBank::single(k).expect("static kernel is valid")
}

/// Builds the forward operator for `rows x cols` images.
pub fn build_operator(kind: &ProblemKind, rows: usize, cols: usize) -> Result<LinearOperator> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "image shape must be positive, got {rows}x{cols}"
        )));
    }
    match kind {
        ProblemKind::Denoise => Ok(LinearOperator::Identity { rows, cols }),
        ProblemKind::Inpaint { mask_rows } => {
            let mut masked = vec![false; rows];
            for &r in mask_rows {
                if r >= rows {
                    return Err(Error::InvalidArgument(format!(
                        "mask row {r} out of range for height {rows}"
                    )));
                }
                masked[r] = true;
            }
            Ok(LinearOperator::RowMask { rows, cols, masked })
        }
        ProblemKind::Deblur { kernel } => {
            if kernel.channels() != 1 {
                return Err(Error::InvalidArgument(
                    "deblur kernel must be single-channel".into(),
                ));
            }
            let sum: f64 = kernel.kernels().iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "blur kernel entries must sum to 1, got {sum}"
                )));
            }
            Ok(LinearOperator::Conv2D {
                kernel: kernel.clone(),
                rows,
                cols,
            })
        }
    }
}

/// Additive Gaussian noise specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the per-component noise.
    pub alpha: f64,
    pub seed: u64,
    /// Draw fresh noise every epoch instead of freezing it per sample.
    pub regenerate_per_epoch: bool,
}

impl NoiseSpec {
    pub fn new(alpha: f64, seed: u64, regenerate_per_epoch: bool) -> Result<Self> {
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise level must be nonnegative, got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            seed,
            regenerate_per_epoch,
        })
    }

    pub fn noiseless(seed: u64) -> Self {
        Self {
            alpha: 0.0,
            seed,
            regenerate_per_epoch: false,
        }
    }

    fn rng_for(&self, sample_id: u64, epoch: u64) -> ChaCha8Rng {
        let effective_epoch = if self.regenerate_per_epoch { epoch } else { 0 };
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&sample_id.to_le_bytes());
        key[16..24].copy_from_slice(&effective_epoch.to_le_bytes());
        key[24..32].copy_from_slice(&0x4e4f_4953_455f_4b45u64.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    /// `m` independent `N(0, alpha^2)` draws for the given key.
    pub fn draw(&self, sample_id: u64, epoch: u64, m: usize) -> Array1<f64> {
        if self.alpha == 0.0 {
            return Array1::zeros(m);
        }
        let mut rng = self.rng_for(sample_id, epoch);
        Array1::from_iter((0..m).map(|_| self.alpha * standard_normal(&mut rng)))
    }
}

/// One standard-normal draw by the Box-Muller transform, kept in-crate so the
/// replay contract does not depend on a distribution crate's internals.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Open interval avoids ln(0).
    let u1: f64 = loop {
        let v = rng.gen::<f64>();
        if v > 0.0 {
            break v;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `f_delta = K u + delta`, with `delta` drawn from the stream keyed by
/// `(seed, sample_id, epoch)`.
///
/// Noise lands on every measurement component, including fully masked rows in
/// the inpainting setup, whose measurements are therefore pure noise. Set
/// `zero_noise_on_masked_rows` to suppress that for sensitivity checks.
pub fn measure(
    operator: &LinearOperator,
    u: &ImageSignal,
    noise: &NoiseSpec,
    sample_id: u64,
    epoch: u64,
) -> Result<Array1<f64>> {
    let mut f = operator.apply(u)?;
    if noise.alpha > 0.0 {
        f += &noise.draw(sample_id, epoch, f.len());
    }
    Ok(f)
}

/// [`measure`] with the noise zeroed on masked rows, the alternative reading
/// of the inpainting measurement model.
pub fn measure_masked_noise_free(
    operator: &LinearOperator,
    u: &ImageSignal,
    noise: &NoiseSpec,
    sample_id: u64,
    epoch: u64,
) -> Result<Array1<f64>> {
    let mut f = measure(operator, u, noise, sample_id, epoch)?;
    if let LinearOperator::RowMask { rows, cols, masked } = operator {
        for (h, is_masked) in masked.iter().enumerate() {
            if *is_masked {
                for k in 0..*cols {
                    f[k * rows + h] = 0.0;
                }
            }
        }
    }
    Ok(f)
}
