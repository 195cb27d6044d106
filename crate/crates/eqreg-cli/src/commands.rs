//! Implementations of the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ndarray::{Array1, Array2};

use eqreg_core::checkpoint::{load_checkpoint, save_checkpoint};
use eqreg_core::data_io::{save_image_grid, save_kernel_grid, Dataset};
use eqreg_core::equilibrium::{
    contraction_bound, ift_gradient, param_gradient, solve_adjoint, solve_forward,
    unrolled_gradient, EquilibriumProblem, MapKind, StoppingRule,
};
use eqreg_core::forward_models::{build_operator, measure, ProblemKind};
use eqreg_core::linops::{dot, ConvKernelBank, DenseMatrix, LinearOperator};
use eqreg_core::proxmap::Activation;
use eqreg_core::regnet::{regnet_forward, regnet_vjp_input, ParamLayers, RegularizerParams};
use eqreg_core::report::{
    write_boxplot_csv, write_epoch_csv, write_epochs_histogram_csv, write_grid_summary_csv,
};
use eqreg_core::signal::ImageSignal;
use eqreg_core::training::{
    fixed_point_rollout, grid_run, masked_region_mse, per_pixel_mse, GridSpec,
    SigmaChoice, TrainMode, TrainRun,
};

use crate::config::{echo_toml, Experiment};

/// Sample ids used for test measurements, disjoint from training ids.
const TEST_SAMPLE_OFFSET: u64 = 1 << 32;

fn prepare_out_dir(exp: &Experiment, deterministic: bool) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(&exp.out)
        .with_context(|| format!("creating output directory {}", exp.out.display()))?;
    fs::write(exp.out.join("config-echo.toml"), echo_toml(exp, deterministic))?;
    Ok(exp.out.clone())
}

fn conv_banks(params: &RegularizerParams) -> Option<Vec<&ConvKernelBank>> {
    match params.layers() {
        ParamLayers::Conv { a, c } => {
            let mut banks = vec![a];
            if let Some(c) = c {
                banks.push(c);
            }
            Some(banks)
        }
        ParamLayers::Dense { .. } => None,
    }
}

/// Reconstruction grid in the report layout: originals, degraded inputs,
/// re-degraded outputs (inpaint/deblur only), reconstructions.
fn write_recon_grid(
    path: &Path,
    run: &TrainRun,
    test: &Dataset,
    max_images: usize,
) -> anyhow::Result<()> {
    let count = test.len().min(max_images);
    let (rows, cols) = test.shape();
    let mut originals = Vec::new();
    let mut degraded = Vec::new();
    let mut redegraded = Vec::new();
    let mut reconstructions = Vec::new();
    for (i, truth) in test.images.iter().take(count).enumerate() {
        let f = measure(
            &run.operator,
            truth,
            &run.config.noise,
            TEST_SAMPLE_OFFSET + i as u64,
            0,
        )?;
        let prob = EquilibriumProblem::new(
            run.operator.clone(),
            f.clone(),
            run.config.lambda,
            run.tau_current,
            run.config.map_kind,
            run.config.stop,
        )?;
        let res = solve_forward(&prob, &run.params, run.config.sigma, None)?;
        let rec = res.u_star;
        let re_deg = run.operator.apply(&rec)?;
        originals.push(truth.clone());
        degraded.push(ImageSignal::new(f, rows, cols)?);
        redegraded.push(ImageSignal::new(re_deg, rows, cols)?);
        reconstructions.push(rec);
    }
    let grid = match run.config.task {
        ProblemKind::Denoise => vec![originals, degraded, reconstructions],
        _ => vec![originals, degraded, redegraded, reconstructions],
    };
    save_image_grid(&grid, path)?;
    Ok(())
}

pub fn run_train(
    exp: &Experiment,
    deterministic: bool,
    warm_start: Option<&Path>,
) -> anyhow::Result<()> {
    let out = prepare_out_dir(exp, deterministic)?;
    let (train, test) = exp.dataset.load()?;
    let (rows, cols) = train.shape();
    let mut run = TrainRun::new(exp.train.clone(), rows, cols)?;
    run.deterministic = deterministic;

    if let Some(ckpt) = warm_start {
        let (params, activation, _) = load_checkpoint(ckpt)?;
        if params.tied() != run.params.tied() {
            bail!(
                "warm-start checkpoint tied={} does not match mode {}",
                params.tied(),
                run.config.mode.name()
            );
        }
        run.params = params;
        run.config.sigma = activation;
        println!("warm start from {}", ckpt.display());
    }

    if let Some(banks) = conv_banks(&run.params) {
        save_kernel_grid(&banks, &out.join("kernels_before.pgm"))?;
    }

    let bound = contraction_bound(
        &EquilibriumProblem::new(
            run.operator.clone(),
            Array1::zeros(rows * cols),
            run.config.lambda,
            run.config.tau,
            run.config.map_kind,
            run.config.stop,
        )?,
        &run.params,
    );
    if run.config.tau >= bound {
        eprintln!(
            "warning: tau = {} is at or above the contraction bound {bound:.4}; \
             expect divergence and tau backoff",
            run.config.tau
        );
    }

    let outcome = run.train(&train, &test)?;
    write_epoch_csv(&out.join("epochs.csv"), &outcome.records, deterministic)?;
    save_checkpoint(
        &out.join("checkpoint.json"),
        &run.params,
        run.config.sigma,
        run.config.seed,
    )?;
    write_recon_grid(&out.join("reconstructions.pgm"), &run, &test, 8)?;
    if let Some(banks) = conv_banks(&run.params) {
        save_kernel_grid(&banks, &out.join("kernels_after.pgm"))?;
    }

    match outcome.records.last() {
        Some(last) => println!(
            "{}: {} epochs, train loss {:.6}, test loss {:.6} ({:?})",
            exp.name,
            outcome.records.len(),
            last.train_loss,
            last.test_loss,
            outcome.status
        ),
        None => println!("{}: no epochs completed ({:?})", exp.name, outcome.status),
    }
    if outcome.status != eqreg_core::training::RunStatus::Completed {
        bail!("training aborted: {:?}", outcome.status);
    }
    Ok(())
}

/// The reduced sweep used when the config does not specify one.
fn default_grid() -> GridSpec {
    GridSpec {
        taus: vec![0.1, 0.5, 1.1],
        gammas: vec![0.1, 0.5, 1.0],
        sigmas: vec![SigmaChoice::Relu, SigmaChoice::Softshrink, SigmaChoice::Identity],
        alphas: vec![0.0, 0.05],
        modes: vec![TrainMode::Bilevel, TrainMode::Deq],
    }
}

pub fn run_grid(exp: &Experiment, deterministic: bool) -> anyhow::Result<()> {
    let out = prepare_out_dir(exp, deterministic)?;
    let (train, test) = exp.dataset.load()?;
    let grid = exp.grid.clone().unwrap_or_else(default_grid);
    let outcomes = grid_run(&exp.train, &grid, &train, &test, deterministic)?;

    write_grid_summary_csv(&out.join("grid_summary.csv"), &outcomes)?;
    write_boxplot_csv(&out.join("boxplot.csv"), &outcomes)?;
    write_epochs_histogram_csv(&out.join("epochs_hist.csv"), &outcomes)?;

    for mode in &grid.modes {
        let total = outcomes.iter().filter(|o| o.mode == *mode).count();
        let good = outcomes.iter().filter(|o| o.mode == *mode && o.success).count();
        println!("{}: {good}/{total} configurations reached test loss < 0.5", mode.name());
    }
    Ok(())
}

pub fn run_eval(exp: &Experiment, checkpoint: &Path, deterministic: bool) -> anyhow::Result<()> {
    let out = prepare_out_dir(exp, deterministic)?;
    let (_, test) = exp.dataset.load()?;
    let (rows, cols) = test.shape();
    let (params, activation, _) = load_checkpoint(checkpoint)?;
    let operator = build_operator(&exp.train.task, rows, cols)?;

    let masked_rows: Vec<usize> = match &exp.train.task {
        ProblemKind::Inpaint { mask_rows } => mask_rows.clone(),
        _ => Vec::new(),
    };

    let mut csv = String::from("image,mse,masked_mse,input_mse,input_masked_mse\n");
    let mut total_mse = 0.0;
    let mut total_masked = 0.0;
    let mut total_input_mse = 0.0;
    let mut total_input_masked = 0.0;
    for (i, truth) in test.images.iter().enumerate() {
        let f = measure(&operator, truth, &exp.train.noise, TEST_SAMPLE_OFFSET + i as u64, 0)?;
        let (rows, cols) = (truth.rows(), truth.cols());
        let input = ImageSignal::new(f.clone(), rows, cols)?;
        let prob = EquilibriumProblem::new(
            operator.clone(),
            f,
            exp.train.lambda,
            exp.train.tau,
            exp.train.map_kind,
            exp.train.stop,
        )?;
        let res = solve_forward(&prob, &params, activation, None)?;
        if i == 0 {
            // Convergence trace of the first test solve, for residual plots.
            eqreg_core::report::write_trace_csv(&out.join("trace_image0.csv"), &res.residuals)?;
        }
        let mse = per_pixel_mse(&res.u_star, truth);
        let input_mse = per_pixel_mse(&input, truth);
        let (masked, input_masked) = if masked_rows.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                masked_region_mse(&res.u_star, truth, &masked_rows),
                masked_region_mse(&input, truth, &masked_rows),
            )
        };
        csv.push_str(&format!("{i},{mse},{masked},{input_mse},{input_masked}\n"));
        total_mse += mse;
        total_input_mse += input_mse;
        if !masked_rows.is_empty() {
            total_masked += masked;
            total_input_masked += input_masked;
        }
        println!("image {i}: mse {mse:.6} (input {input_mse:.6}), masked {masked:.6} (input {input_masked:.6})");
    }
    fs::write(out.join("eval.csv"), csv)?;
    let n = test.len() as f64;
    println!("mean mse {:.6} (input {:.6})", total_mse / n, total_input_mse / n);
    if !masked_rows.is_empty() {
        println!(
            "mean masked mse {:.6} (input {:.6}, improvement {:.2}x)",
            total_masked / n,
            total_input_masked / n,
            total_input_masked / total_masked.max(1e-300)
        );
    }
    Ok(())
}

/// Trains with the naive fixed-point objective, then rolls 100 fixed-point
/// iterations and snapshots the reconstruction at k = 1, 25, 50, 75, 100.
pub fn run_naive_demo(exp: &Experiment, deterministic: bool) -> anyhow::Result<()> {
    let mut exp = exp.clone();
    exp.train.mode = TrainMode::NaiveDegrad;
    let out = prepare_out_dir(&exp, deterministic)?;
    let (train, test) = exp.dataset.load()?;
    let (rows, cols) = train.shape();
    let mut run = TrainRun::new(exp.train.clone(), rows, cols)?;
    run.deterministic = deterministic;
    let outcome = run.train(&train, &test)?;
    write_epoch_csv(&out.join("epochs.csv"), &outcome.records, deterministic)?;
    save_checkpoint(&out.join("checkpoint.json"), &run.params, run.config.sigma, run.config.seed)?;

    let masked_rows: Vec<usize> = match &exp.train.task {
        ProblemKind::Inpaint { mask_rows } => mask_rows.clone(),
        _ => Vec::new(),
    };
    let snapshots = [1usize, 25, 50, 75, 100];
    let mut csv = String::from("image,k,masked_mse,mse\n");
    let mut snap_rows: Vec<Vec<ImageSignal>> = Vec::new();
    for (i, truth) in test.images.iter().take(4).enumerate() {
        let f = measure(&run.operator, truth, &run.config.noise, TEST_SAMPLE_OFFSET + i as u64, 0)?;
        let prob = EquilibriumProblem::new(
            run.operator.clone(),
            f.clone(),
            run.config.lambda,
            run.config.tau,
            run.config.map_kind,
            run.config.stop,
        )?;
        let (snaps, _) = fixed_point_rollout(&prob, &run.params, run.config.sigma, 100, &snapshots)?;
        let mut row = vec![truth.clone(), ImageSignal::new(f, rows, cols)?];
        for (k, u) in &snaps {
            let masked = if masked_rows.is_empty() {
                f64::NAN
            } else {
                masked_region_mse(u, truth, &masked_rows)
            };
            csv.push_str(&format!("{i},{k},{masked},{}\n", per_pixel_mse(u, truth)));
            row.push(u.clone());
        }
        snap_rows.push(row);
    }
    fs::write(out.join("naive_trajectory.csv"), csv)?;
    // Each row: original, input, then the five snapshots.
    save_image_grid(&snap_rows, &out.join("naive_snapshots.pgm"))?;
    println!(
        "naive demo: trained {} epochs, snapshots at {:?} written to {}",
        outcome.records.len(),
        snapshots,
        out.display()
    );
    Ok(())
}

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// The oracle suite: adjointness, Moreau decomposition, Tikhonov closed form
/// and three-way gradient agreement, printed as a pass/fail table.
pub fn run_selftest() -> anyhow::Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut checks = Vec::new();

    // Adjointness over the three operator variants.
    {
        let kernel = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let ops = vec![
            LinearOperator::Identity { rows: 6, cols: 5 },
            LinearOperator::RowMask {
                rows: 6,
                cols: 5,
                masked: vec![true, true, false, false, false, false],
            },
            LinearOperator::Conv2D {
                kernel: ConvKernelBank::single(kernel).unwrap(),
                rows: 6,
                cols: 5,
            },
        ];
        let mut worst = 0.0f64;
        for op in &ops {
            for _ in 0..100 {
                let u = ImageSignal::new(
                    Array1::from_iter((0..30).map(|_| rng.gen_range(-1.0..1.0))),
                    6,
                    5,
                )?;
                let v = Array1::from_iter((0..30).map(|_| rng.gen_range(-1.0..1.0)));
                let lhs = dot(op.apply(&u)?.view(), v.view());
                let rhs = dot(u.view(), op.adjoint(v.view())?.view());
                worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
            }
        }
        checks.push(check(
            "operator adjointness (300 random instances)",
            worst <= 1e-10,
            format!("worst relative defect {worst:.3e}"),
        ));
    }

    // Regularizer linearization adjointness: <J u, w> = <u, J^T w>.
    {
        let params = RegularizerParams::init_dense(8, 6, 0.7, false, 11).unwrap();
        let sigma = Activation::Tanh;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let u = ImageSignal::new(Array1::from_iter((0..6).map(|_| rng.gen_range(-1.0..1.0))), 6, 1)?;
            let (_, tape) = regnet_forward(&params, sigma, &u)?;
            // J^T via the vjp; J via finite differences of the forward map.
            let w = Array1::from_iter((0..6).map(|_| rng.gen_range(-1.0..1.0)));
            let d = Array1::from_iter((0..6).map(|_| rng.gen_range(-1.0..1.0)));
            let h = 1e-7;
            let up = ImageSignal::new(u.data() + &d.mapv(|v| h * v), 6, 1)?;
            let um = ImageSignal::new(u.data() - &d.mapv(|v| h * v), 6, 1)?;
            let (gp, _) = regnet_forward(&params, sigma, &up)?;
            let (gm, _) = regnet_forward(&params, sigma, &um)?;
            let jd = (gp - gm).mapv(|v| v / (2.0 * h));
            let lhs = jd.dot(&w);
            let rhs = regnet_vjp_input(&params, &tape, &w)?.dot(&d);
            worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
        }
        checks.push(check(
            "regularizer linearization adjointness",
            worst <= 1e-6,
            format!("worst relative defect {worst:.3e} (finite-difference jvp)"),
        ));
    }

    // Moreau decomposition.
    {
        let mut worst = 0.0f64;
        for act in [
            Activation::Identity,
            Activation::Relu,
            Activation::softshrink(0.4).unwrap(),
            Activation::clamp(0.4).unwrap(),
        ] {
            let partner = act.moreau_partner().unwrap();
            for _ in 0..200 {
                let x: f64 = rng.gen_range(-10.0..10.0);
                worst = worst.max((act.eval(x) + partner.eval(x) - x).abs());
            }
        }
        checks.push(check(
            "Moreau decomposition prox_R + prox_R* = id",
            worst <= 1e-12,
            format!("worst defect {worst:.3e}"),
        ));
    }

    // Tikhonov closed form.
    {
        let n = 8;
        let lambda = 1.7;
        let params = RegularizerParams::new(
            ParamLayers::Dense {
                a: DenseMatrix::identity(n),
                c: None,
                b: Array1::zeros(n),
            },
            1.0,
            1.0,
        )?;
        let f = Array1::from_iter((0..n).map(|_| rng.gen_range(-1.0..1.0)));
        let prob = EquilibriumProblem::new(
            LinearOperator::Identity { rows: n, cols: 1 },
            f.clone(),
            lambda,
            0.5,
            MapKind::DeGrad,
            StoppingRule::new(1e-13, 100_000)?,
        )?;
        let res = solve_forward(&prob, &params, Activation::Identity, None)?;
        // (lambda K^T K + I) u = lambda K^T f.
        let expect = f.mapv(|v| lambda * v / (lambda + 1.0));
        let err = (res.u_star.data() - &expect)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        checks.push(check(
            "Tikhonov closed form vs fixed point",
            res.converged && err <= 1e-6,
            format!("l2 error {err:.3e} after {} iterations", res.iters),
        ));
    }

    // Three-way gradient agreement on a 4x4 tied instance.
    {
        let params = RegularizerParams::init_dense(10, 16, 0.8, true, 17)?;
        let sigma = Activation::Tanh;
        let truth = Array1::from_iter((0..16).map(|_| rng.gen_range(-1.0..1.0)));
        let f = Array1::from_iter((0..16).map(|_| rng.gen_range(-1.0..1.0)));
        let mut prob = EquilibriumProblem::new(
            LinearOperator::Identity { rows: 4, cols: 4 },
            f,
            1.0,
            0.1,
            MapKind::DeGrad,
            StoppingRule::new(1e-12, 100_000)?,
        )?;
        prob.tau = 0.7 * contraction_bound(&prob, &params);
        let res = solve_forward(&prob, &params, sigma, None)?;
        let n = 16.0;
        let grad_j = (res.u_star.data() - &truth).mapv(|v| v / n);
        let adj = solve_adjoint(&prob, &params, sigma, &res.u_star, &grad_j)?;
        let g_adj = param_gradient(&prob, &params, sigma, &res.u_star, &adj.mu)?;
        let g_ift = ift_gradient(&prob, &params, sigma, &res.u_star, &grad_j)?;
        let g_unr = unrolled_gradient(&prob, &params, sigma, None, |u| {
            (u.data() - &truth).mapv(|v| v / n)
        })?
        .grads;
        let rel = |a: &eqreg_core::regnet::ParamGrads, b: &eqreg_core::regnet::ParamGrads| {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for (ca, cb) in a.components().iter().zip(b.components().iter()) {
                for (x, y) in ca.iter().zip(cb.iter()) {
                    num += (x - y) * (x - y);
                    den += x * x;
                }
            }
            (num / den.max(1e-300)).sqrt()
        };
        let worst = rel(&g_adj, &g_ift).max(rel(&g_adj, &g_unr)).max(rel(&g_ift, &g_unr));
        checks.push(check(
            "three-way gradient agreement (adjoint/IFT/unrolled)",
            res.converged && adj.converged && worst <= 1e-4,
            format!("worst pairwise relative gap {worst:.3e}"),
        ));
    }

    let mut all_ok = true;
    println!("{:<55} {:<6} detail", "check", "result");
    for c in &checks {
        all_ok &= c.passed;
        println!(
            "{:<55} {:<6} {}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    if !all_ok {
        bail!("selftest failed");
    }
    Ok(())
}
