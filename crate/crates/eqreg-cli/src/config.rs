//! Experiment configuration: TOML files with presets and CLI overrides.
//!
//! Unknown keys are rejected. Resolution order: preset defaults, then the
//! config file, then command-line flags. The resolved configuration is echoed
//! into every run directory so runs are self-describing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use eqreg_core::equilibrium::{MapKind, StoppingRule};
use eqreg_core::forward_models::{NoiseSpec, ProblemKind};
use eqreg_core::proxmap::Activation;
use eqreg_core::training::{ArchSpec, ConvInit, Schedule, SigmaChoice, TrainConfig, TrainMode};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Seeded rectangles-and-blobs images.
    Synthetic {
        seed: u64,
        rows: usize,
        cols: usize,
        train: usize,
        test: usize,
    },
    /// MNIST-style IDX image file.
    MnistIdx {
        path: PathBuf,
        train: usize,
        test: usize,
    },
    /// Directory of raster images (converted to grayscale).
    ImageDir {
        path: PathBuf,
        train: usize,
        test: usize,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> anyhow::Result<(eqreg_core::data_io::Dataset, eqreg_core::data_io::Dataset)> {
        let (full, train, test) = match self {
            DatasetSpec::Synthetic { seed, rows, cols, train, test } => (
                eqreg_core::data_io::synth_dataset(*seed, train + test, *rows, *cols)?,
                *train,
                *test,
            ),
            DatasetSpec::MnistIdx { path, train, test } => (
                eqreg_core::data_io::load_mnist_idx(path, Some(train + test))?,
                *train,
                *test,
            ),
            DatasetSpec::ImageDir { path, train, test } => {
                (eqreg_core::data_io::load_image_dir(path)?, *train, *test)
            }
        };
        Ok(full.split(train, test)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct LrSpec {
    pub kind: String,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub lr_start: Option<f64>,
    #[serde(default)]
    pub lr_end: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct ArchSpecFile {
    pub kind: String,
    #[serde(default)]
    pub s: Option<usize>,
    #[serde(default)]
    pub channels: Option<usize>,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub init: Option<String>,
}

/// The `[train]` table; every field optional so presets and flags can fill
/// the gaps.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct TrainSpecFile {
    pub mode: Option<String>,
    pub task: Option<String>,
    pub sigma: Option<String>,
    pub sigma_eps: Option<f64>,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub xi: Option<f64>,
    pub alpha: Option<f64>,
    pub noise_seed: Option<u64>,
    pub regenerate_noise: Option<bool>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub spectral_norm: Option<bool>,
    pub tau_backoff: Option<bool>,
    pub rel_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub map: Option<String>,
    pub lr: Option<LrSpec>,
    pub arch: Option<ArchSpecFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct GridSpecFile {
    pub taus: Vec<f64>,
    pub gammas: Vec<f64>,
    pub sigmas: Vec<String>,
    pub alphas: Vec<f64>,
    pub modes: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub dataset: Option<DatasetSpec>,
    pub train: Option<TrainSpecFile>,
    pub grid: Option<GridSpecFile>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: FileConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }
}

/// Flag-level overrides collected by the CLI.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
    pub sigma: Option<String>,
    pub alpha: Option<f64>,
    pub mode: Option<String>,
    pub lambda: Option<f64>,
    pub xi: Option<f64>,
    pub spectral_norm: bool,
}

/// Fully resolved experiment: dataset, training configuration, output
/// directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: String,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub grid: Option<eqreg_core::training::GridSpec>,
    pub out: PathBuf,
}

fn parse_mode(s: &str) -> anyhow::Result<TrainMode> {
    Ok(match s {
        "deq" => TrainMode::Deq,
        "bilevel" => TrainMode::Bilevel,
        "naive" => TrainMode::NaiveDegrad,
        other => bail!("unknown mode {other:?} (expected deq, bilevel or naive)"),
    })
}

fn parse_sigma_choice(s: &str) -> anyhow::Result<SigmaChoice> {
    Ok(match s {
        "identity" => SigmaChoice::Identity,
        "relu" => SigmaChoice::Relu,
        "softshrink" => SigmaChoice::Softshrink,
        "tanh" => SigmaChoice::Tanh,
        other => bail!("unknown sigma {other:?} (expected identity, relu, softshrink or tanh)"),
    })
}

fn parse_task(s: &str, rows: usize) -> anyhow::Result<ProblemKind> {
    Ok(match s {
        "denoise" => ProblemKind::Denoise,
        "inpaint" => ProblemKind::inpaint_top_third(rows),
        "deblur" => ProblemKind::deblur_default(),
        other => bail!("unknown task {other:?} (expected denoise, inpaint or deblur)"),
    })
}

fn parse_map(s: &str) -> anyhow::Result<MapKind> {
    Ok(match s {
        "degrad" => MapKind::DeGrad,
        "deprox" => MapKind::DeProx,
        other => bail!("unknown update map {other:?} (expected degrad or deprox)"),
    })
}

/// Preset experiment settings, desk-scale versions of the reported runs.
fn preset_file(name: &str) -> anyhow::Result<FileConfig> {
    let toml_text = match name {
        // Dense regularizer on 16x16 synthetic stand-ins for the 28x28 runs;
        // point `dataset` at an IDX file to use real digits.
        "mnist-denoise" => {
            r#"
            [dataset]
            kind = "synthetic"
            seed = 0
            rows = 16
            cols = 16
            train = 32
            test = 8
            [train]
            mode = "bilevel"
            task = "denoise"
            sigma = "relu"
            tau = 0.5
            gamma = 0.1
            alpha = 0.05
            epochs = 60
            "#
        }
        "mnist-inpaint" => {
            r#"
            [dataset]
            kind = "synthetic"
            seed = 0
            rows = 16
            cols = 16
            train = 32
            test = 8
            [train]
            mode = "bilevel"
            task = "inpaint"
            sigma = "softshrink"
            tau = 0.5
            gamma = 1.0
            alpha = 0.05
            epochs = 150
            "#
        }
        "mnist-deblur" => {
            r#"
            [dataset]
            kind = "synthetic"
            seed = 0
            rows = 16
            cols = 16
            train = 32
            test = 8
            [train]
            mode = "bilevel"
            task = "deblur"
            sigma = "softshrink"
            tau = 0.5
            gamma = 0.5
            alpha = 0.05
            epochs = 80
            "#
        }
        // Convolutional regularizer with the ROF-style setup: tanh with a
        // large pre-activation scale, spectral normalization, decaying rate.
        "celeb-denoise" => {
            r#"
            [dataset]
            kind = "synthetic"
            seed = 1
            rows = 64
            cols = 64
            train = 1
            test = 1
            [train]
            mode = "bilevel"
            task = "denoise"
            sigma = "tanh"
            tau = 0.015
            gamma = 1.0
            lambda = 18.156
            xi = 100.0
            alpha = 0.1
            epochs = 50
            spectral_norm = true
            rel_tol = 1e-14
            max_iter = 1000
            [train.lr]
            kind = "linear_decay"
            lr_start = 3.2e-3
            lr_end = 3.2e-5
            [train.arch]
            kind = "conv"
            channels = 2
            kernel = 11
            init = "tv_like"
            "#
        }
        "celeb-deblur" => {
            r#"
            [dataset]
            kind = "synthetic"
            seed = 1
            rows = 64
            cols = 64
            train = 1
            test = 1
            [train]
            mode = "bilevel"
            task = "deblur"
            sigma = "tanh"
            tau = 0.015
            gamma = 1.0
            lambda = 18.156
            xi = 100.0
            alpha = 0.1
            epochs = 50
            spectral_norm = true
            rel_tol = 1e-14
            max_iter = 1000
            [train.lr]
            kind = "linear_decay"
            lr_start = 3.2e-3
            lr_end = 3.2e-5
            [train.arch]
            kind = "conv"
            channels = 2
            kernel = 11
            init = "tv_like"
            "#
        }
        "naive-inpaint" => {
            r#"
            [dataset]
            kind = "synthetic"
            seed = 0
            rows = 16
            cols = 16
            train = 32
            test = 8
            [train]
            mode = "naive"
            task = "inpaint"
            sigma = "softshrink"
            tau = 0.5
            gamma = 1.0
            alpha = 0.05
            epochs = 150
            "#
        }
        other => bail!(
            "unknown preset {other:?} (expected mnist-denoise, mnist-inpaint, mnist-deblur, celeb-denoise, celeb-deblur or naive-inpaint)"
        ),
    };
    Ok(toml::from_str(toml_text).expect("presets are valid"))
}

fn merge_train(base: &mut TrainSpecFile, over: TrainSpecFile) {
    macro_rules! take {
        ($($field:ident),*) => {
            $(if over.$field.is_some() { base.$field = over.$field; })*
        };
    }
    take!(
        mode, task, sigma, sigma_eps, tau, gamma, lambda, xi, alpha, noise_seed,
        regenerate_noise, epochs, batch_size, seed, spectral_norm, tau_backoff,
        rel_tol, max_iter, map, lr, arch
    );
}

/// Applies preset -> file -> flags and materializes the experiment.
pub fn resolve(file: Option<FileConfig>, flags: &Overrides) -> anyhow::Result<Experiment> {
    let preset_name = flags
        .preset
        .clone()
        .or_else(|| file.as_ref().and_then(|f| f.preset.clone()));
    let mut merged = match &preset_name {
        Some(name) => preset_file(name)?,
        None => FileConfig::default(),
    };
    if let Some(file) = file {
        if let Some(ds) = file.dataset {
            merged.dataset = Some(ds);
        }
        if let Some(train) = file.train {
            let mut base = merged.train.take().unwrap_or_default();
            merge_train(&mut base, train);
            merged.train = Some(base);
        }
        if file.grid.is_some() {
            merged.grid = file.grid;
        }
        if file.out.is_some() {
            merged.out = file.out;
        }
    }
    let mut train = merged.train.unwrap_or_default();

    // Flag overrides.
    if let Some(v) = flags.seed {
        train.seed = Some(v);
    }
    if let Some(v) = flags.epochs {
        train.epochs = Some(v);
    }
    if let Some(v) = flags.tau {
        train.tau = Some(v);
    }
    if let Some(v) = flags.gamma {
        train.gamma = Some(v);
    }
    if let Some(v) = &flags.sigma {
        train.sigma = Some(v.clone());
    }
    if let Some(v) = flags.alpha {
        train.alpha = Some(v);
    }
    if let Some(v) = &flags.mode {
        train.mode = Some(v.clone());
    }
    if let Some(v) = flags.lambda {
        train.lambda = Some(v);
    }
    if let Some(v) = flags.xi {
        train.xi = Some(v);
    }
    if flags.spectral_norm {
        train.spectral_norm = Some(true);
    }

    let dataset = merged.dataset.unwrap_or(DatasetSpec::Synthetic {
        seed: 0,
        rows: 16,
        cols: 16,
        train: 32,
        test: 8,
    });
    let rows = match &dataset {
        DatasetSpec::Synthetic { rows, .. } => *rows,
        // Shape known after loading; the default mask resolves against the
        // paper resolution for IDX files.
        DatasetSpec::MnistIdx { .. } => 28,
        DatasetSpec::ImageDir { .. } => 0,
    };

    let tau = train.tau.unwrap_or(0.5);
    let sigma_name = train.sigma.as_deref().unwrap_or("relu");
    let sigma_choice = parse_sigma_choice(sigma_name)?;
    // The softshrink threshold defaults to tau, the coupling the experiments
    // use; sigma_eps decouples them.
    let sigma = match (sigma_choice, train.sigma_eps) {
        (SigmaChoice::Softshrink, Some(eps)) => Activation::softshrink(eps)?,
        (choice, _) => choice.to_activation(tau)?,
    };

    let mode = parse_mode(train.mode.as_deref().unwrap_or("bilevel"))?;
    let task_name = train.task.as_deref().unwrap_or("denoise");
    let task = parse_task(task_name, rows.max(1))?;
    let schedule = match &train.lr {
        None => Schedule::Constant { lr: 1e-3 },
        Some(spec) => match spec.kind.as_str() {
            "constant" => Schedule::Constant {
                lr: spec.lr.unwrap_or(1e-3),
            },
            "linear_decay" => {
                let lr_start = spec.lr_start.context("linear_decay needs lr_start")?;
                Schedule::LinearDecay {
                    lr_start,
                    lr_end: spec.lr_end.unwrap_or(lr_start / 100.0),
                    epochs: train.epochs.unwrap_or(200),
                }
            }
            other => bail!("unknown lr schedule kind {other:?}"),
        },
    };
    let arch = match &train.arch {
        None => ArchSpec::Dense { s: None },
        Some(a) => match a.kind.as_str() {
            "dense" => ArchSpec::Dense { s: a.s },
            "conv" => {
                let k = a.kernel.unwrap_or(3);
                ArchSpec::Conv {
                    channels: a.channels.unwrap_or(2),
                    kh: k,
                    kw: k,
                    init: match a.init.as_deref().unwrap_or("random") {
                        "tv_like" => ConvInit::TvLike,
                        "random" => ConvInit::Random,
                        other => bail!("unknown conv init {other:?}"),
                    },
                }
            }
            other => bail!("unknown arch kind {other:?}"),
        },
    };

    let epochs = train.epochs.unwrap_or(200);
    let schedule = match schedule {
        Schedule::LinearDecay { lr_start, lr_end, .. } => Schedule::LinearDecay {
            lr_start,
            lr_end,
            epochs,
        },
        s => s,
    };

    let config = TrainConfig {
        mode,
        task,
        sigma,
        tau,
        gamma: train.gamma.unwrap_or(0.1),
        lambda: train.lambda.unwrap_or(1.0),
        xi: train.xi.unwrap_or(1.0),
        noise: NoiseSpec::new(
            train.alpha.unwrap_or(0.05),
            train.noise_seed.unwrap_or(7),
            train.regenerate_noise.unwrap_or(true),
        )?,
        epochs,
        batch_size: train.batch_size.filter(|&b| b > 0),
        seed: train.seed.unwrap_or(42),
        spectral_normalize: train.spectral_norm.unwrap_or(false),
        tau_backoff: train.tau_backoff.unwrap_or(true),
        stop: StoppingRule::new(train.rel_tol.unwrap_or(1e-3), train.max_iter.unwrap_or(500))?,
        map_kind: parse_map(train.map.as_deref().unwrap_or("degrad"))?,
        schedule,
        arch,
    };

    let grid = match merged.grid {
        None => None,
        Some(g) => {
            let mut sigmas = Vec::new();
            for s in &g.sigmas {
                sigmas.push(parse_sigma_choice(s)?);
            }
            let mut modes = Vec::new();
            for m in &g.modes {
                modes.push(parse_mode(m)?);
            }
            Some(eqreg_core::training::GridSpec {
                taus: g.taus,
                gammas: g.gammas,
                sigmas,
                alphas: g.alphas,
                modes,
            })
        }
    };

    let out = flags
        .out
        .clone()
        .or(merged.out)
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}", preset_name.as_deref().unwrap_or("run"))));

    Ok(Experiment {
        name: preset_name.unwrap_or_else(|| format!("{}-{}", mode.name(), task_name)),
        dataset,
        train: config,
        grid,
        out,
    })
}

/// Echo of a resolved experiment, written into the run directory.
pub fn echo_toml(exp: &Experiment, deterministic: bool) -> String {
    #[derive(Serialize)]
    struct Echo<'a> {
        name: &'a str,
        deterministic: bool,
        dataset: &'a DatasetSpec,
        mode: &'a str,
        task: &'a str,
        sigma: String,
        tau: f64,
        gamma: f64,
        lambda: f64,
        xi: f64,
        alpha: f64,
        noise_seed: u64,
        regenerate_noise: bool,
        epochs: usize,
        seed: u64,
        spectral_norm: bool,
        tau_backoff: bool,
        rel_tol: f64,
        max_iter: usize,
        map: String,
        schedule: &'a Schedule,
        arch: &'a ArchSpec,
    }
    let e = Echo {
        name: &exp.name,
        deterministic,
        dataset: &exp.dataset,
        mode: exp.train.mode.name(),
        task: exp.train.task.name(),
        sigma: format!("{:?}", exp.train.sigma),
        tau: exp.train.tau,
        gamma: exp.train.gamma,
        lambda: exp.train.lambda,
        xi: exp.train.xi,
        alpha: exp.train.noise.alpha,
        noise_seed: exp.train.noise.seed,
        regenerate_noise: exp.train.noise.regenerate_per_epoch,
        epochs: exp.train.epochs,
        seed: exp.train.seed,
        spectral_norm: exp.train.spectral_normalize,
        tau_backoff: exp.train.tau_backoff,
        rel_tol: exp.train.stop.rel_tol,
        max_iter: exp.train.stop.max_iter,
        map: format!("{:?}", exp.train.map_kind),
        schedule: &exp.train.schedule,
        arch: &exp.train.arch,
    };
    toml::to_string_pretty(&e).expect("echo serializes")
}
