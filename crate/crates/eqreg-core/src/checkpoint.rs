//! Parameter checkpoints: a versioned JSON container with named arrays.
//!
//! Layout (stable across runs, suitable for warm starts):
//!
//! ```json
//! {
//!   "format": "eqreg-checkpoint-v1",
//!   "seed": 42, "gamma": 0.1, "xi": 1.0, "tied": true,
//!   "activation": {"kind": "softshrink", "eps": 0.5},
//!   "layers": {"kind": "dense", "s": 256, "n": 256,
//!              "a": [..], "c": null, "b": [..]}
//! }
//! ```
//!
//! Matrices are flattened row-major; convolutional banks use
//! `{"kind": "conv", "channels", "kh", "kw", "a", "c"}` with kernels
//! concatenated channel by channel. `"c": null` means tied weights.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{ConvKernelBank, DenseMatrix};
use crate::proxmap::Activation;
use crate::regnet::{ParamLayers, RegularizerParams};

const FORMAT_TAG: &str = "eqreg-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayersSchema {
    Dense {
        s: usize,
        n: usize,
        a: Vec<f64>,
        c: Option<Vec<f64>>,
        b: Vec<f64>,
    },
    Conv {
        channels: usize,
        kh: usize,
        kw: usize,
        a: Vec<f64>,
        c: Option<Vec<f64>>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    pub seed: u64,
    pub gamma: f64,
    pub xi: f64,
    pub tied: bool,
    pub activation: Activation,
    layers: LayersSchema,
}

impl Checkpoint {
    pub fn from_params(params: &RegularizerParams, activation: Activation, seed: u64) -> Self {
        let layers = match params.layers() {
            ParamLayers::Dense { a, c, b } => LayersSchema::Dense {
                s: a.rows(),
                n: a.cols(),
                a: a.entries().iter().copied().collect(),
                c: c.as_ref().map(|c| c.entries().iter().copied().collect()),
                b: b.to_vec(),
            },
            ParamLayers::Conv { a, c } => {
                let (kh, kw) = a.kernel_shape();
                LayersSchema::Conv {
                    channels: a.channels(),
                    kh,
                    kw,
                    a: a.kernels().iter().copied().collect(),
                    c: c.as_ref().map(|c| c.kernels().iter().copied().collect()),
                }
            }
        };
        Checkpoint {
            format: FORMAT_TAG.to_string(),
            seed,
            gamma: params.gamma(),
            xi: params.xi(),
            tied: params.tied(),
            activation,
            layers,
        }
    }

    pub fn into_params(self) -> Result<(RegularizerParams, Activation, u64)> {
        if self.format != FORMAT_TAG {
            return Err(Error::InvalidArgument(format!(
                "unknown checkpoint format {:?}, expected {FORMAT_TAG:?}",
                self.format
            )));
        }
        let layers = match self.layers {
            LayersSchema::Dense { s, n, a, c, b } => {
                let expect = s * n;
                if a.len() != expect || b.len() != s || c.as_ref().is_some_and(|c| c.len() != expect) {
                    return Err(Error::shape("checkpoint dense arrays", expect, a.len()));
                }
                if self.tied != c.is_none() {
                    return Err(Error::InvalidArgument(
                        "checkpoint tied flag disagrees with presence of C".into(),
                    ));
                }
                ParamLayers::Dense {
                    a: DenseMatrix::new(Array2::from_shape_vec((s, n), a).expect("length checked"))?,
                    c: c.map(|c| DenseMatrix::new(Array2::from_shape_vec((s, n), c).expect("length checked")))
                        .transpose()?,
                    b: Array1::from_vec(b),
                }
            }
            LayersSchema::Conv { channels, kh, kw, a, c } => {
                let expect = channels * kh * kw;
                if a.len() != expect || c.as_ref().is_some_and(|c| c.len() != expect) {
                    return Err(Error::shape("checkpoint conv arrays", expect, a.len()));
                }
                if self.tied != c.is_none() {
                    return Err(Error::InvalidArgument(
                        "checkpoint tied flag disagrees with presence of C".into(),
                    ));
                }
                ParamLayers::Conv {
                    a: ConvKernelBank::new(
                        Array3::from_shape_vec((channels, kh, kw), a).expect("length checked"),
                    )?,
                    c: c
                        .map(|c| {
                            ConvKernelBank::new(
                                Array3::from_shape_vec((channels, kh, kw), c).expect("length checked"),
                            )
                        })
                        .transpose()?,
                }
            }
        };
        let params = RegularizerParams::new(layers, self.gamma, self.xi)?;
        Ok((params, self.activation, self.seed))
    }
}

pub fn save_checkpoint(
    path: &Path,
    params: &RegularizerParams,
    activation: Activation,
    seed: u64,
) -> Result<()> {
    let ckpt = Checkpoint::from_params(params, activation, seed);
    let json = serde_json::to_string(&ckpt)
        .map_err(|e| Error::InvalidArgument(format!("checkpoint serialization failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RegularizerParams, Activation, u64)> {
    let json = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| Error::InvalidArgument(format!("checkpoint parse failed: {e}")))?;
    ckpt.into_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_dense_and_conv() {
        let dir = tempfile::tempdir().unwrap();

        let dense = RegularizerParams::init_dense(6, 4, 0.5, true, 99).unwrap();
        let p1 = dir.path().join("dense.json");
        save_checkpoint(&p1, &dense, Activation::Softshrink { eps: 0.5 }, 99).unwrap();
        let (loaded, act, seed) = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, dense);
        assert_eq!(act, Activation::Softshrink { eps: 0.5 });
        assert_eq!(seed, 99);

        let conv = RegularizerParams::init_conv_random(3, 3, 3, 1.0, 100.0, false, 7).unwrap();
        let p2 = dir.path().join("conv.json");
        save_checkpoint(&p2, &conv, Activation::Tanh, 7).unwrap();
        let (loaded, act, _) = load_checkpoint(&p2).unwrap();
        assert_eq!(loaded, conv);
        assert_eq!(act, Activation::Tanh);
    }

    #[test]
    fn rejects_unknown_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"format":"something-else","seed":0,"gamma":1.0,"xi":1.0,"tied":true,
               "activation":{"kind":"identity"},
               "layers":{"kind":"dense","s":1,"n":1,"a":[0.0],"c":null,"b":[0.0]}}"#,
        )
        .unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
