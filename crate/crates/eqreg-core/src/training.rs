//! Upper-level optimization: MSE loss, Adam with an optional linear
//! learning-rate schedule, spectral normalization, tau backoff, the naive
//! fixed-point baseline, and hyperparameter grid runs.

use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::equilibrium::{
    param_gradient, solve_adjoint, solve_forward, EquilibriumProblem, MapKind, StoppingRule,
};
use crate::error::{Error, Result};
use crate::forward_models::{build_operator, measure, NoiseSpec, ProblemKind};
use crate::linops::LinearOperator;
use crate::proxmap::Activation;
use crate::regnet::{regnet_forward, regnet_vjp_params, ParamGrads, RegularizerParams};
use crate::signal::ImageSignal;

/// Sample ids for the test split live in a disjoint range from the training
/// ids so their noise streams never collide.
const TEST_SAMPLE_OFFSET: u64 = 1 << 32;

/// Per-pixel mean squared error with the 1/2 factor:
/// `loss = ||u - t||^2 / (2n)`, `grad = (u - t)/n`.
///
/// The unnormalized sum convention is `2n * loss`.
pub fn mse_loss(u_star: &ImageSignal, u_truth: &ImageSignal) -> Result<(f64, Array1<f64>)> {
    if !u_star.same_shape(u_truth) {
        return Err(Error::shape(
            "mse_loss",
            format!("{}x{}", u_truth.rows(), u_truth.cols()),
            format!("{}x{}", u_star.rows(), u_star.cols()),
        ));
    }
    let n = u_star.len() as f64;
    let diff = u_star.data() - u_truth.data();
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / (2.0 * n);
    Ok((loss, diff.mapv(|v| v / n)))
}

/// Plain per-pixel mean squared error (no 1/2), for evaluation reports.
pub fn per_pixel_mse(a: &ImageSignal, b: &ImageSignal) -> f64 {
    let n = a.len() as f64;
    (a.data() - b.data()).iter().map(|v| v * v).sum::<f64>() / n
}

/// Mean squared error restricted to pixels in masked rows.
pub fn masked_region_mse(a: &ImageSignal, b: &ImageSignal, masked_rows: &[usize]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for &h in masked_rows {
        for k in 0..a.cols() {
            let d = a.get(h, k) - b.get(h, k);
            acc += d * d;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Adam optimizer state (beta1 = 0.9, beta2 = 0.999, eps = 1e-8), with
/// bias-corrected moments shaped like the trainable parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamGrads,
    v: ParamGrads,
    step_count: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &RegularizerParams) -> Self {
        Self {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// One bias-corrected update; in tied mode the combined gradient drives
    /// the single shared copy of A.
    pub fn step(&mut self, params: &mut RegularizerParams, grads: &ParamGrads, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let g_comps = grads.components();
        let mut m_state = self.m.components_mut();
        let mut v_state = self.v.components_mut();
        for (idx, p) in params.components_mut().into_iter().enumerate() {
            let g = g_comps[idx];
            let m = &mut m_state[idx];
            let v = &mut v_state[idx];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant { lr: f64 },
    /// Linear interpolation from `lr_start` at epoch 0 to `lr_end` at the
    /// final epoch.
    LinearDecay { lr_start: f64, lr_end: f64, epochs: usize },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant { lr } => {
                if lr <= 0.0 || !lr.is_finite() {
                    return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
                }
            }
            Schedule::LinearDecay { lr_start, lr_end, epochs } => {
                if lr_start <= 0.0 || lr_end <= 0.0 || lr_end > lr_start || epochs == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "linear decay needs 0 < lr_end <= lr_start over >= 1 epochs, got [{lr_start}, {lr_end}] / {epochs}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::LinearDecay { lr_start, lr_end, epochs } => {
                if epochs <= 1 {
                    return lr_end;
                }
                let t = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
                lr_start + (lr_end - lr_start) * t
            }
        }
    }
}

/// How the regularizer is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Untied weights, equilibrium training.
    Deq,
    /// Tied weights `C = A`, equilibrium training.
    Bilevel,
    /// Tied weights trained on the fixed-point residual at the ground truth,
    /// without any equilibrium solve in the loop.
    NaiveDegrad,
}

impl TrainMode {
    pub fn tied(&self) -> bool {
        matches!(self, TrainMode::Bilevel | TrainMode::NaiveDegrad)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Deq => "deq",
            TrainMode::Bilevel => "bilevel",
            TrainMode::NaiveDegrad => "naive",
        }
    }
}

/// Regularizer architecture selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    /// Dense layers `s x n`; `s = n` (square) when absent.
    Dense { s: Option<usize> },
    Conv { channels: usize, kh: usize, kw: usize, init: ConvInit },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvInit {
    TvLike,
    Random,
}

/// Full configuration of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub task: ProblemKind,
    pub sigma: Activation,
    pub tau: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub xi: f64,
    pub noise: NoiseSpec,
    pub epochs: usize,
    /// Full-batch when absent.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub spectral_normalize: bool,
    pub tau_backoff: bool,
    pub stop: StoppingRule,
    pub map_kind: MapKind,
    pub schedule: Schedule,
    pub arch: ArchSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.tau <= 0.0 || self.gamma <= 0.0 || self.lambda <= 0.0 || self.xi <= 0.0 {
            return Err(Error::InvalidArgument(
                "tau, gamma, lambda and xi must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub mean_iters: f64,
    pub wall_ms: u128,
}

/// Why a run stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Gradient stayed non-finite after the tau backoff retry; the epoch was
    /// aborted and training stopped.
    AbortedDiverged { epoch: usize },
}

/// Outcome of [`TrainRun::train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub status: RunStatus,
}

impl TrainOutcome {
    pub fn final_test_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_loss)
    }
}

/// Mutable training state: parameters, optimizer, and the current tau /
/// iteration cap (both move when backoff triggers).
pub struct TrainRun {
    pub config: TrainConfig,
    pub params: RegularizerParams,
    pub operator: LinearOperator,
    adam: AdamState,
    pub tau_current: f64,
    pub max_iter_current: usize,
    /// Solve batches sequentially even when a parallel pool is available.
    pub deterministic: bool,
}

impl TrainRun {
    pub fn new(config: TrainConfig, rows: usize, cols: usize) -> Result<Self> {
        config.validate()?;
        let n = rows * cols;
        let tied = config.mode.tied();
        let params = match &config.arch {
            ArchSpec::Dense { s } => {
                RegularizerParams::init_dense(s.unwrap_or(n), n, config.gamma, tied, config.seed)?
            }
            ArchSpec::Conv { channels, kh, kw, init } => match init {
                ConvInit::TvLike => {
                    if *channels != 2 {
                        return Err(Error::InvalidArgument(
                            "TV-like initialization defines exactly 2 channels".into(),
                        ));
                    }
                    RegularizerParams::init_conv_tv(*kh, *kw, config.gamma, config.xi, tied)?
                }
                ConvInit::Random => RegularizerParams::init_conv_random(
                    *channels,
                    *kh,
                    *kw,
                    config.gamma,
                    config.xi,
                    tied,
                    config.seed,
                )?,
            },
        };
        let mut params = params;
        if config.spectral_normalize {
            // Start on the unit-norm manifold the per-step normalization
            // maintains, so the untrained model already sits at the operating
            // point the data weight was tuned for.
            let (na, nc) = params.layer_norms((rows, cols), 300, 1e-10);
            params.normalize_layers(na, nc);
        }
        let operator = build_operator(&config.task, rows, cols)?;
        let adam = AdamState::new(&params);
        let tau = config.tau;
        let max_iter = config.stop.max_iter;
        Ok(Self {
            config,
            params,
            operator,
            adam,
            tau_current: tau,
            max_iter_current: max_iter,
            deterministic: false,
        })
    }

    fn problem_for(&self, f_delta: Array1<f64>) -> Result<EquilibriumProblem> {
        EquilibriumProblem::new(
            self.operator.clone(),
            f_delta,
            self.config.lambda,
            self.tau_current,
            self.config.map_kind,
            StoppingRule::new(self.config.stop.rel_tol, self.max_iter_current)?,
        )
    }

    /// Decrease tau by a factor of 10 and raise the iteration cap by the same
    /// factor, the reaction to a non-finite gradient.
    fn backoff(&mut self) {
        self.tau_current /= 10.0;
        self.max_iter_current = self.max_iter_current.saturating_mul(10);
    }

    /// Forward-solve every image of `dataset` at the current parameters and
    /// average the training loss against the ground truth.
    pub fn evaluate(&self, dataset: &Dataset, sample_offset: u64, epoch: u64) -> Result<(f64, f64)> {
        let jobs: Vec<(usize, &ImageSignal)> = dataset.images.iter().enumerate().collect();
        let eval_one = |&(i, truth): &(usize, &ImageSignal)| -> Result<(f64, f64)> {
            let f = measure(&self.operator, truth, &self.config.noise, sample_offset + i as u64, epoch)?;
            let prob = self.problem_for(f)?;
            let res = solve_forward(&prob, &self.params, self.config.sigma, None)?;
            let (loss, _) = mse_loss(&res.u_star, truth)?;
            Ok((loss, res.iters as f64))
        };
        let results: Vec<Result<(f64, f64)>> = if self.deterministic {
            jobs.iter().map(eval_one).collect()
        } else {
            jobs.par_iter().map(eval_one).collect()
        };
        let mut loss_acc = 0.0;
        let mut iters_acc = 0.0;
        for r in results {
            let (l, it) = r?;
            loss_acc += l;
            iters_acc += it;
        }
        let n = dataset.len() as f64;
        Ok((loss_acc / n, iters_acc / n))
    }

    /// Gradient and loss over one batch of (sample id, image) pairs; `None`
    /// when any per-sample gradient came back non-finite.
    fn batch_gradient(
        &self,
        batch: &[(u64, &ImageSignal)],
        epoch: u64,
    ) -> Result<Option<(ParamGrads, f64, f64)>> {
        let solve_one = |&(sample_id, truth): &(u64, &ImageSignal)| -> Result<Option<(ParamGrads, f64, f64)>> {
            let f = measure(&self.operator, truth, &self.config.noise, sample_id, epoch)?;
            let prob = self.problem_for(f)?;
            match self.config.mode {
                TrainMode::Deq | TrainMode::Bilevel => {
                    let res = solve_forward(&prob, &self.params, self.config.sigma, None)?;
                    if res.diverged || !res.u_star.is_finite() {
                        return Ok(None);
                    }
                    let (loss, grad_j) = mse_loss(&res.u_star, truth)?;
                    let adj = solve_adjoint(&prob, &self.params, self.config.sigma, &res.u_star, &grad_j)?;
                    if adj.diverged {
                        return Ok(None);
                    }
                    // A non-converged but finite adjoint iterate is still
                    // consumed; Adam's per-parameter normalization absorbs
                    // the inflated scale.
                    let grads =
                        param_gradient(&prob, &self.params, self.config.sigma, &res.u_star, &adj.mu)?;
                    if !grads.all_finite() {
                        return Ok(None);
                    }
                    Ok(Some((grads, loss, res.iters as f64)))
                }
                TrainMode::NaiveDegrad => {
                    let (grads, loss) = naive_sample_gradient(&prob, &self.params, self.config.sigma, truth)?;
                    if !grads.all_finite() {
                        return Ok(None);
                    }
                    Ok(Some((grads, loss, 0.0)))
                }
            }
        };

        let results: Vec<Result<Option<(ParamGrads, f64, f64)>>> = if self.deterministic {
            batch.iter().map(solve_one).collect()
        } else {
            batch.par_iter().map(solve_one).collect()
        };

        let mut total = ParamGrads::zeros_like(&self.params);
        let mut loss_acc = 0.0;
        let mut iters_acc = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for r in results {
            match r? {
                Some((g, loss, iters)) => {
                    total.add_scaled(&g, scale);
                    loss_acc += loss * scale;
                    iters_acc += iters * scale;
                }
                None => return Ok(None),
            }
        }
        if !total.all_finite() {
            return Ok(None);
        }
        Ok(Some((total, loss_acc, iters_acc)))
    }

    /// One pass over the training set: per batch solve forward from zero,
    /// backpropagate through the equilibrium, take an Adam step, then
    /// renormalize the layers when configured. A non-finite gradient triggers
    /// one tau backoff and a retry of the same batch.
    pub fn train_epoch(&mut self, train: &Dataset, test: &Dataset, epoch: usize) -> Result<EpochRecord> {
        let started = Instant::now();
        let lr = self.config.schedule.lr_at(epoch);
        let batch_size = self.config.batch_size.unwrap_or(train.len()).max(1);
        let indexed: Vec<(u64, &ImageSignal)> = train
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| (i as u64, img))
            .collect();

        let mut train_loss_acc = 0.0;
        let mut iters_acc = 0.0;
        let mut batches = 0.0;
        for batch in indexed.chunks(batch_size) {
            let mut attempt = self.batch_gradient(batch, epoch as u64)?;
            if attempt.is_none() && self.config.tau_backoff {
                self.backoff();
                attempt = self.batch_gradient(batch, epoch as u64)?;
            }
            let Some((grads, loss, iters)) = attempt else {
                return Err(Error::NonFinite("batch gradient after tau backoff"));
            };
            self.adam.step(&mut self.params, &grads, lr);
            if self.config.spectral_normalize {
                let (rows, cols) = self.operator.image_shape();
                let (na, nc) = self.params.layer_norms((rows, cols), 300, 1e-10);
                self.params.normalize_layers(na, nc);
            }
            train_loss_acc += loss;
            iters_acc += iters;
            batches += 1.0;
        }

        let (test_loss, _) = self.evaluate(test, TEST_SAMPLE_OFFSET, 0)?;
        Ok(EpochRecord {
            epoch,
            train_loss: train_loss_acc / batches,
            test_loss,
            mean_iters: iters_acc / batches,
            wall_ms: started.elapsed().as_millis(),
        })
    }

    /// Runs the configured number of epochs; a divergence that survives
    /// backoff aborts the run with the records gathered so far.
    pub fn train(&mut self, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
        let mut records = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            match self.train_epoch(train, test, epoch) {
                Ok(record) => records.push(record),
                Err(Error::NonFinite(_)) => {
                    return Ok(TrainOutcome {
                        records,
                        status: RunStatus::AbortedDiverged { epoch },
                    })
                }
                Err(other) => return Err(other),
            }
        }
        Ok(TrainOutcome {
            records,
            status: RunStatus::Completed,
        })
    }
}

/// Gradient and loss of the naive objective
/// `1/(2n) || lambda K^T (K u_truth - f) + N(u_truth) ||^2`
/// for one sample: no fixed-point solve, the network is fit to the residual
/// at the ground truth.
fn naive_sample_gradient(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    truth: &ImageSignal,
) -> Result<(ParamGrads, f64)> {
    let mut r = prob.operator.apply(truth)?;
    r -= &prob.f_delta;
    let data_grad = prob.operator.adjoint(r.view())?.into_data().mapv(|v| prob.lambda * v);
    let (net, tape) = regnet_forward(params, sigma, truth)?;
    let residual = data_grad + net;
    let n = truth.len() as f64;
    let loss = residual.iter().map(|v| v * v).sum::<f64>() / (2.0 * n);
    let grads = regnet_vjp_params(params, &tape, &residual.mapv(|v| v / n))?;
    Ok((grads, loss))
}

/// Runs `iters` fixed-point iterations from zero, returning the snapshots at
/// the requested iteration counts along with the final iterate.
pub fn fixed_point_rollout(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    iters: usize,
    snapshots: &[usize],
) -> Result<(Vec<(usize, ImageSignal)>, ImageSignal)> {
    let mut u = prob.zero_init();
    let mut taken = Vec::new();
    for k in 1..=iters {
        u = crate::equilibrium::degrad_step(prob, params, sigma, &u)?;
        if snapshots.contains(&k) {
            taken.push((k, u.clone()));
        }
    }
    Ok((taken, u))
}

/// One grid cell: hyperparameters, outcome, and the per-epoch records.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub label: String,
    pub mode: TrainMode,
    pub task: String,
    pub tau: f64,
    pub gamma: f64,
    pub sigma: String,
    pub alpha: f64,
    pub final_test_loss: f64,
    pub success: bool,
    pub epochs_completed: usize,
    pub aborted: bool,
    pub records: Vec<EpochRecord>,
}

/// Activation choice in a grid; softshrink couples its threshold to the
/// cell's tau, the coupling the experiments default to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaChoice {
    Identity,
    Relu,
    Softshrink,
    Tanh,
}

impl SigmaChoice {
    pub fn to_activation(self, tau: f64) -> Result<Activation> {
        Ok(match self {
            SigmaChoice::Identity => Activation::Identity,
            SigmaChoice::Relu => Activation::Relu,
            SigmaChoice::Softshrink => Activation::softshrink(tau)?,
            SigmaChoice::Tanh => Activation::Tanh,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SigmaChoice::Identity => "identity",
            SigmaChoice::Relu => "relu",
            SigmaChoice::Softshrink => "softshrink",
            SigmaChoice::Tanh => "tanh",
        }
    }
}

/// Cartesian hyperparameter grid.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub taus: Vec<f64>,
    pub gammas: Vec<f64>,
    pub sigmas: Vec<SigmaChoice>,
    pub alphas: Vec<f64>,
    pub modes: Vec<TrainMode>,
}

/// Final test loss below this threshold counts a configuration as a success.
pub const GRID_SUCCESS_THRESHOLD: f64 = 0.5;

/// Trains every configuration in the grid; individual failures are recorded
/// as unsuccessful outcomes and never abort the sweep. Cells run in parallel
/// unless `deterministic` forces a sequential sweep.
pub fn grid_run(
    base: &TrainConfig,
    grid: &GridSpec,
    train: &Dataset,
    test: &Dataset,
    deterministic: bool,
) -> Result<Vec<GridOutcome>> {
    if grid.taus.is_empty() || grid.gammas.is_empty() || grid.sigmas.is_empty() || grid.alphas.is_empty() || grid.modes.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let mut cells = Vec::new();
    for &mode in &grid.modes {
        for &tau in &grid.taus {
            for &gamma in &grid.gammas {
                for &sigma in &grid.sigmas {
                    for &alpha in &grid.alphas {
                        cells.push((mode, tau, gamma, sigma, alpha));
                    }
                }
            }
        }
    }
    let (rows, cols) = train.shape();
    let run_cell = |&(mode, tau, gamma, sigma, alpha): &(TrainMode, f64, f64, SigmaChoice, f64)| -> Result<GridOutcome> {
        let mut config = base.clone();
        config.mode = mode;
        config.tau = tau;
        config.gamma = gamma;
        config.sigma = sigma.to_activation(tau)?;
        config.noise = NoiseSpec::new(alpha, base.noise.seed, base.noise.regenerate_per_epoch)?;
        let label = format!(
            "{}-{}-tau{tau}-gamma{gamma}-{}-alpha{alpha}",
            mode.name(),
            base.task.name(),
            sigma.name()
        );
        let mut run = TrainRun::new(config, rows, cols)?;
        run.deterministic = true; // cells already run in parallel
        let outcome = run.train(train, test)?;
        let final_test_loss = outcome.final_test_loss();
        let aborted = outcome.status != RunStatus::Completed;
        Ok(GridOutcome {
            label,
            mode,
            task: base.task.name().to_string(),
            tau,
            gamma,
            sigma: sigma.name().to_string(),
            alpha,
            final_test_loss,
            success: final_test_loss.is_finite() && final_test_loss < GRID_SUCCESS_THRESHOLD && !aborted,
            epochs_completed: outcome.records.len(),
            aborted,
            records: outcome.records,
        })
    };
    if deterministic {
        cells.iter().map(run_cell).collect()
    } else {
        cells.par_iter().map(run_cell).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn desk_config(mode: TrainMode, task: ProblemKind, sigma: Activation) -> TrainConfig {
        TrainConfig {
            mode,
            task,
            sigma,
            tau: 0.5,
            gamma: 0.1,
            lambda: 1.0,
            xi: 1.0,
            noise: NoiseSpec::new(0.05, 7, true).unwrap(),
            epochs: 3,
            batch_size: None,
            seed: 42,
            spectral_normalize: false,
            tau_backoff: true,
            stop: StoppingRule::new(1e-3, 500).unwrap(),
            map_kind: MapKind::DeGrad,
            schedule: Schedule::Constant { lr: 1e-3 },
            arch: ArchSpec::Dense { s: None },
        }
    }

    #[test]
    fn mse_loss_conventions() {
        let z = ImageSignal::new(array![2.0], 1, 1).unwrap();
        let t = ImageSignal::new(array![0.0], 1, 1).unwrap();
        let (loss, grad) = mse_loss(&z, &t).unwrap();
        assert_abs_diff_eq!(loss, 2.0);
        assert_abs_diff_eq!(grad[0], 2.0);

        let (loss, grad) = mse_loss(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, array![0.0]);

        // Random pair against a scalar loop.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand::{Rng, SeedableRng};
        let a = Array1::from_iter((0..12).map(|_| rng.gen_range(-1.0..1.0)));
        let b = Array1::from_iter((0..12).map(|_| rng.gen_range(-1.0..1.0)));
        let ia = ImageSignal::new(a.clone(), 3, 4).unwrap();
        let ib = ImageSignal::new(b.clone(), 3, 4).unwrap();
        let (loss, grad) = mse_loss(&ia, &ib).unwrap();
        let mut acc = 0.0;
        for i in 0..12 {
            acc += (a[i] - b[i]) * (a[i] - b[i]);
            assert_abs_diff_eq!(grad[i], (a[i] - b[i]) / 12.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(loss, acc / 24.0, epsilon = 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = RegularizerParams::init_dense(4, 4, 0.5, false, 1).unwrap();
        let before = params.clone();
        let mut adam = AdamState::new(&params);
        let zero = ParamGrads::zeros_like(&params);
        adam.step(&mut params, &zero, 1e-3);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_matches_hand_trace() {
        // Scalar first step: m = 0.1 g, v = 0.001 g^2, with bias correction
        // m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps).
        let mut params = RegularizerParams::init_dense(1, 1, 1.0, false, 5).unwrap();
        let start: Vec<f64> = params.components_mut().iter().map(|s| s[0]).collect();
        let mut adam = AdamState::new(&params);
        let mut grads = ParamGrads::zeros_like(&params);
        let gvals = [0.4, -0.3, 0.2];
        for (slice, g) in grads.components_mut().into_iter().zip(gvals) {
            slice[0] = g;
        }
        adam.step(&mut params, &grads, 1e-3);
        for ((slice, g), s0) in params.components_mut().into_iter().zip(gvals).zip(start) {
            let expect = s0 - 1e-3 * g / (g.abs() + 1e-8);
            assert_abs_diff_eq!(slice[0], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn tied_mode_keeps_layers_identical() {
        let mut params = RegularizerParams::init_dense(4, 4, 0.5, true, 9).unwrap();
        assert!(params.tied());
        let mut adam = AdamState::new(&params);
        let u = ImageSignal::new(array![0.4, -0.2, 0.6, 0.1], 4, 1).unwrap();
        for step in 0..5 {
            let (_, tape) = regnet_forward(&params, Activation::Relu, &u).unwrap();
            let w = Array1::from_elem(4, 0.3 + step as f64 * 0.1);
            let grads = regnet_vjp_params(&params, &tape, &w).unwrap();
            adam.step(&mut params, &grads, 1e-2);
            // Tied storage is structural: exactly one copy of A exists.
            assert!(params.tied());
            let ckpt = crate::checkpoint::Checkpoint::from_params(&params, Activation::Relu, 0);
            let (restored, _, _) = ckpt.into_params().unwrap();
            assert_eq!(restored, params);
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::LinearDecay {
            lr_start: 1e-2,
            lr_end: 1e-4,
            epochs: 5,
        };
        assert_abs_diff_eq!(s.lr_at(0), 1e-2);
        assert_abs_diff_eq!(s.lr_at(4), 1e-4);
        assert_abs_diff_eq!(s.lr_at(2), (1e-2 + 1e-4) / 2.0);
        // Beyond the last epoch the rate stays at the end value.
        assert_abs_diff_eq!(s.lr_at(40), 1e-4);
        assert!(Schedule::LinearDecay { lr_start: 1e-4, lr_end: 1e-2, epochs: 5 }.validate().is_err());
    }

    #[test]
    fn noiseless_identity_denoising_is_already_optimal() {
        // gamma small, alpha = 0: the fixed point is essentially f = truth,
        // so the loss starts near zero and stays there.
        let ds = crate::data_io::synth_dataset(4, 3, 8, 8).unwrap();
        let (train, test) = ds.split(2, 1).unwrap();
        let mut config = desk_config(TrainMode::Bilevel, ProblemKind::Denoise, Activation::Relu);
        config.noise = NoiseSpec::noiseless(1);
        config.gamma = 1e-6;
        config.epochs = 1;
        config.stop = StoppingRule::new(1e-8, 2000).unwrap();
        let mut run = TrainRun::new(config, 8, 8).unwrap();
        run.deterministic = true;
        let outcome = run.train(&train, &test).unwrap();
        assert_eq!(outcome.status, RunStatus::Completed);
        assert!(outcome.final_test_loss() <= 1e-10, "loss {}", outcome.final_test_loss());
    }

    #[test]
    fn training_reduces_denoising_loss() {
        let ds = crate::data_io::synth_dataset(11, 6, 8, 8).unwrap();
        let (train, test) = ds.split(4, 2).unwrap();
        let mut config = desk_config(TrainMode::Bilevel, ProblemKind::Denoise, Activation::Relu);
        config.epochs = 25;
        config.noise = NoiseSpec::new(0.1, 3, true).unwrap();
        let mut run = TrainRun::new(config, 8, 8).unwrap();
        run.deterministic = true;
        let outcome = run.train(&train, &test).unwrap();
        assert_eq!(outcome.status, RunStatus::Completed);
        let first = outcome.records.first().unwrap().test_loss;
        let last = outcome.final_test_loss();
        assert!(last < first, "no improvement: {first} -> {last}");
    }

    #[test]
    fn tau_backoff_factors_are_exact() {
        let config = desk_config(TrainMode::Bilevel, ProblemKind::Denoise, Activation::Relu);
        let mut run = TrainRun::new(config, 8, 8).unwrap();
        let (tau0, cap0) = (run.tau_current, run.max_iter_current);
        run.backoff();
        assert_abs_diff_eq!(run.tau_current, tau0 / 10.0);
        assert_eq!(run.max_iter_current, cap0 * 10);
    }

    #[test]
    fn divergent_tau_aborts_through_backoff_path() {
        // tau far beyond the stability bound with backoff disabled: the run
        // reports the aborted status instead of erroring out.
        let ds = crate::data_io::synth_dataset(2, 3, 6, 6).unwrap();
        let (train, test) = ds.split(2, 1).unwrap();
        let mut config = desk_config(TrainMode::Bilevel, ProblemKind::Denoise, Activation::Identity);
        config.tau = 25.0;
        config.gamma = 1.0;
        config.tau_backoff = false;
        let mut run = TrainRun::new(config, 6, 6).unwrap();
        run.deterministic = true;
        let outcome = run.train(&train, &test).unwrap();
        assert_eq!(outcome.status, RunStatus::AbortedDiverged { epoch: 0 });
        assert!(outcome.records.is_empty());
    }

    #[test]
    fn tau_backoff_rescues_divergent_start() {
        // tau = 4 diverges; one backoff to 0.4 lands inside the stability
        // region and the epoch completes.
        let ds = crate::data_io::synth_dataset(2, 3, 6, 6).unwrap();
        let (train, test) = ds.split(2, 1).unwrap();
        let mut config = desk_config(TrainMode::Bilevel, ProblemKind::Denoise, Activation::Identity);
        config.tau = 4.0;
        config.gamma = 1.0;
        config.epochs = 1;
        let mut run = TrainRun::new(config, 6, 6).unwrap();
        run.deterministic = true;
        let outcome = run.train(&train, &test).unwrap();
        assert_eq!(outcome.status, RunStatus::Completed);
        assert_abs_diff_eq!(run.tau_current, 0.4);
        assert_eq!(run.max_iter_current, 5000);
    }

    #[test]
    fn spectral_normalization_pins_layer_norms() {
        let ds = crate::data_io::synth_dataset(13, 3, 6, 6).unwrap();
        let (train, test) = ds.split(2, 1).unwrap();
        let mut config = desk_config(TrainMode::Deq, ProblemKind::Denoise, Activation::Tanh);
        config.spectral_normalize = true;
        config.epochs = 2;
        let mut run = TrainRun::new(config, 6, 6).unwrap();
        run.deterministic = true;
        run.train(&train, &test).unwrap();
        let (na, nc) = run.params.layer_norms((6, 6), 500, 1e-11);
        assert!((na - 1.0).abs() <= 1e-2, "|A| = {na}");
        assert!((nc - 1.0).abs() <= 1e-2, "|C| = {nc}");
    }

    #[test]
    fn naive_gradient_matches_finite_differences() {
        let ds = crate::data_io::synth_dataset(17, 1, 5, 5).unwrap();
        let truth = &ds.images[0];
        let op = build_operator(&ProblemKind::Denoise, 5, 5).unwrap();
        let noise = NoiseSpec::noiseless(3);
        let f = measure(&op, truth, &noise, 0, 0).unwrap();
        let prob = EquilibriumProblem::new(
            op,
            f,
            1.0,
            0.5,
            MapKind::DeGrad,
            StoppingRule::new(1e-3, 100).unwrap(),
        )
        .unwrap();
        let params = RegularizerParams::init_dense(10, 25, 0.8, true, 23).unwrap();
        let sigma = Activation::Tanh;
        let (grads, loss) = naive_sample_gradient(&prob, &params, sigma, truth).unwrap();
        assert!(loss > 0.0);

        let h = 1e-6;
        let loss_at = |p: &RegularizerParams| naive_sample_gradient(&prob, p, sigma, truth).unwrap().1;
        let ga = match &grads {
            ParamGrads::Dense { a, .. } => a.clone(),
            _ => unreachable!(),
        };
        for (i, j) in [(0usize, 0usize), (3, 7), (9, 24)] {
            let mut pp = params.clone();
            pp.components_mut()[0][i * 25 + j] += h;
            let mut pm = params.clone();
            pm.components_mut()[0][i * 25 + j] -= h;
            let fd = (loss_at(&pp) - loss_at(&pm)) / (2.0 * h);
            assert_abs_diff_eq!(ga[[i, j]], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn naive_with_zero_lambda_path_drives_net_to_zero() {
        // lambda ~ 0, alpha = 0: the optimum sends N(u_truth) toward 0.
        let ds = crate::data_io::synth_dataset(19, 2, 5, 5).unwrap();
        let (train, test) = ds.split(1, 1).unwrap();
        let mut config = desk_config(TrainMode::NaiveDegrad, ProblemKind::Denoise, Activation::Tanh);
        config.lambda = 1e-9;
        config.noise = NoiseSpec::noiseless(5);
        config.epochs = 200;
        config.schedule = Schedule::Constant { lr: 1e-2 };
        let mut run = TrainRun::new(config, 5, 5).unwrap();
        run.deterministic = true;
        run.train(&train, &test).unwrap();
        let (net, _) = regnet_forward(&run.params, Activation::Tanh, &train.images[0]).unwrap();
        let norm = net.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 5e-3, "residual network output {norm}");
    }

    #[test]
    fn determinism_across_reruns_and_parallel_eval() {
        let ds = crate::data_io::synth_dataset(29, 5, 8, 8).unwrap();
        let (train, test) = ds.split(4, 1).unwrap();
        let config = desk_config(TrainMode::Deq, ProblemKind::Denoise, Activation::Relu);

        let run_once = |deterministic: bool| {
            let mut run = TrainRun::new(config.clone(), 8, 8).unwrap();
            run.deterministic = deterministic;
            run.train(&train, &test).unwrap()
        };
        let a = run_once(true);
        let b = run_once(true);
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.test_loss.to_bits(), rb.test_loss.to_bits());
            assert_eq!(ra.mean_iters.to_bits(), rb.mean_iters.to_bits());
        }
        // Index-ordered reduction makes the parallel path bit-identical too.
        let c = run_once(false);
        for (ra, rc) in a.records.iter().zip(c.records.iter()) {
            assert_eq!(ra.train_loss.to_bits(), rc.train_loss.to_bits());
            assert_eq!(ra.test_loss.to_bits(), rc.test_loss.to_bits());
        }
    }

    #[test]
    fn grid_of_size_one_produces_one_record() {
        let ds = crate::data_io::synth_dataset(31, 3, 6, 6).unwrap();
        let (train, test) = ds.split(2, 1).unwrap();
        let mut base = desk_config(TrainMode::Bilevel, ProblemKind::Denoise, Activation::Relu);
        base.epochs = 2;
        let grid = GridSpec {
            taus: vec![0.5],
            gammas: vec![0.1],
            sigmas: vec![SigmaChoice::Relu],
            alphas: vec![0.0],
            modes: vec![TrainMode::Bilevel],
        };
        let outcomes = grid_run(&base, &grid, &train, &test, true).unwrap();
        assert_eq!(outcomes.len(), 1);
        assert_eq!(outcomes[0].epochs_completed, 2);
        assert!(outcomes[0].success, "loss {}", outcomes[0].final_test_loss);
    }

    #[test]
    fn masked_mse_counts_only_masked_rows() {
        let a = ImageSignal::new(array![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], 3, 2).unwrap();
        let b = ImageSignal::zeros(3, 2);
        // Row 0 holds entries (0,0) = 1 and (0,1) = 1 under column stacking.
        assert_abs_diff_eq!(masked_region_mse(&a, &b, &[0]), 1.0);
        assert_abs_diff_eq!(masked_region_mse(&a, &b, &[1, 2]), 0.0);
        assert_abs_diff_eq!(per_pixel_mse(&a, &b), 2.0 / 6.0, epsilon = 1e-15);
    }
}
