//! Fixed-point solvers for the DeGrad and DeProx update maps and three
//! interchangeable backward passes.
//!
//! The forward pass iterates `u <- G(u, params)` to a fixed point `u*`. The
//! backward pass solves the adjoint equation `mu = (d_u G)^T mu - grad_J` and
//! turns `mu*` into parameter gradients; an implicit-function-theorem dense
//! solve and an unrolled reverse sweep over the stored iterates provide two
//! independent routes to the same gradient.
//!
//! All three routes return the gradient of the loss `J(u*)` with respect to
//! the parameters, the direction a descent method subtracts. Cross-checks
//! against end-to-end finite differences pin the sign and scale.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::linops::{dense_from_apply, norm2, solve_dense, LinearOperator};
use crate::proxmap::Activation;
use crate::regnet::{regnet_forward, regnet_vjp_input, regnet_vjp_params, ParamGrads, RegNetTape, RegularizerParams};
use crate::signal::ImageSignal;

/// Which update map defines the equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// `u - tau * (lambda K^T (K u - f) + N(u))`: the network acts as the
    /// gradient of a regularizer inside a gradient-descent step.
    DeGrad,
    /// `N(u - tau * lambda K^T (K u - f))`: the network post-composes a
    /// Landweber step.
    DeProx,
}

/// Relative-tolerance / iteration-cap stopping rule shared by the forward and
/// adjoint solves: stop when `||u_k - u_{k-1}|| / ||u_k||` drops below
/// `rel_tol` or after `max_iter` steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StoppingRule {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl StoppingRule {
    pub fn new(rel_tol: f64, max_iter: usize) -> Result<Self> {
        if rel_tol <= 0.0 || !rel_tol.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rel_tol must be positive, got {rel_tol}"
            )));
        }
        if max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(Self { rel_tol, max_iter })
    }
}

/// One inverse problem instance `u = G(u, params)`.
#[derive(Debug, Clone)]
pub struct EquilibriumProblem {
    pub operator: LinearOperator,
    pub f_delta: Array1<f64>,
    pub lambda: f64,
    pub tau: f64,
    pub map_kind: MapKind,
    pub stop: StoppingRule,
}

impl EquilibriumProblem {
    pub fn new(
        operator: LinearOperator,
        f_delta: Array1<f64>,
        lambda: f64,
        tau: f64,
        map_kind: MapKind,
        stop: StoppingRule,
    ) -> Result<Self> {
        if lambda <= 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        if tau < 0.0 || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau must be nonnegative, got {tau}")));
        }
        if f_delta.len() != operator.dim() {
            return Err(Error::shape("EquilibriumProblem data", operator.dim(), f_delta.len()));
        }
        Ok(Self {
            operator,
            f_delta,
            lambda,
            tau,
            map_kind,
            stop,
        })
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.operator.image_shape()
    }

    pub fn zero_init(&self) -> ImageSignal {
        let (rows, cols) = self.image_shape();
        ImageSignal::zeros(rows, cols)
    }

    /// `lambda * K^T (K u - f_delta)`, the data-fidelity gradient.
    fn data_gradient(&self, u: &ImageSignal) -> Result<Array1<f64>> {
        let mut r = self.operator.apply(u)?;
        r -= &self.f_delta;
        let mut g = self.operator.adjoint(r.view())?.into_data();
        g.mapv_inplace(|v| self.lambda * v);
        Ok(g)
    }

    /// `lambda * K^T K v` for a plain vector (used by the adjoint passes).
    fn normal_matvec(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        let (rows, cols) = self.image_shape();
        let img = ImageSignal::new(v.clone(), rows, cols)?;
        let kv = self.operator.apply(&img)?;
        let mut out = self.operator.adjoint(kv.view())?.into_data();
        out.mapv_inplace(|x| self.lambda * x);
        Ok(out)
    }
}

/// One DeGrad update: `u - tau * (lambda K^T (K u - f) + N(u))`.
pub fn degrad_step(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u: &ImageSignal,
) -> Result<ImageSignal> {
    let data_grad = prob.data_gradient(u)?;
    let (net, _) = regnet_forward(params, sigma, u)?;
    let next = u.data() - &(data_grad + net).mapv(|v| prob.tau * v);
    u.with_data(next)
}

/// One DeProx update: `N(u - tau * lambda K^T (K u - f))`.
pub fn deprox_step(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u: &ImageSignal,
) -> Result<ImageSignal> {
    let z = deprox_inner(prob, u)?;
    let (net, _) = regnet_forward(params, sigma, &z)?;
    u.with_data(net)
}

/// The Landweber half-step `z = u - tau * lambda K^T (K u - f)` feeding the
/// DeProx network.
fn deprox_inner(prob: &EquilibriumProblem, u: &ImageSignal) -> Result<ImageSignal> {
    let data_grad = prob.data_gradient(u)?;
    u.with_data(u.data() - &data_grad.mapv(|v| prob.tau * v))
}

fn apply_step(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u: &ImageSignal,
) -> Result<ImageSignal> {
    match prob.map_kind {
        MapKind::DeGrad => degrad_step(prob, params, sigma, u),
        MapKind::DeProx => deprox_step(prob, params, sigma, u),
    }
}

/// Outcome of a forward fixed-point solve.
#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub u_star: ImageSignal,
    pub iters: usize,
    pub final_residual: f64,
    pub converged: bool,
    /// Set when the solve blew up (non-finite iterate or runaway norm);
    /// consumed by the training loop's tau backoff.
    pub diverged: bool,
    /// Relative residual after each iteration, for convergence traces.
    pub residuals: Vec<f64>,
}

fn relative_residual(diff: f64, norm_next: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if norm_next == 0.0 {
        f64::INFINITY
    } else {
        diff / norm_next
    }
}

/// Iterates the selected update map from `u0` (zero vector when absent) until
/// the stopping rule fires or divergence is detected.
pub fn solve_forward(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u0: Option<&ImageSignal>,
) -> Result<FixedPointResult> {
    let mut u = match u0 {
        Some(u0) => u0.clone(),
        None => prob.zero_init(),
    };
    // Geometric blowup keeps the relative residual bounded, so a runaway
    // iterate norm is flagged directly alongside the non-finite check.
    let blowup = 1e8 * (1.0 + norm2(prob.f_delta.view()) + u.norm());
    let mut residuals = Vec::new();
    let mut residual = f64::INFINITY;

    for it in 1..=prob.stop.max_iter {
        let next = apply_step(prob, params, sigma, &u)?;
        let diff = norm2((next.data() - u.data()).view());
        let norm_next = next.norm();
        residual = relative_residual(diff, norm_next);
        residuals.push(residual);

        if !next.is_finite() || norm_next > blowup || residual > 1e6 {
            return Ok(FixedPointResult {
                u_star: next,
                iters: it,
                final_residual: residual,
                converged: false,
                diverged: true,
                residuals,
            });
        }
        u = next;
        if residual <= prob.stop.rel_tol {
            return Ok(FixedPointResult {
                u_star: u,
                iters: it,
                final_residual: residual,
                converged: true,
                diverged: false,
                residuals,
            });
        }
    }
    Ok(FixedPointResult {
        u_star: u,
        iters: prob.stop.max_iter,
        final_residual: residual,
        converged: false,
        diverged: false,
        residuals,
    })
}

/// Step-size bound `2 / (lambda ||K||^2 + gamma xi ||A|| ||C||)` under which
/// the DeGrad map is a contraction (1-Lipschitz activations). Informative:
/// used for warnings and to set up well-conditioned tests.
pub fn contraction_bound(prob: &EquilibriumProblem, params: &RegularizerParams) -> f64 {
    let k_norm = prob.operator.operator_norm();
    let (na, nc) = params.layer_norms(prob.image_shape(), 500, 1e-10);
    let denom = prob.lambda * k_norm * k_norm + params.gamma() * params.xi() * na * nc;
    if denom == 0.0 {
        f64::INFINITY
    } else {
        2.0 / denom
    }
}

/// The tape/linearization point for the backward pass of the current map:
/// `u*` itself for DeGrad, the Landweber half-step `z*` for DeProx.
fn backward_tape(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u_star: &ImageSignal,
) -> Result<RegNetTape> {
    let point = match prob.map_kind {
        MapKind::DeGrad => u_star.clone(),
        MapKind::DeProx => deprox_inner(prob, u_star)?,
    };
    let (_, tape) = regnet_forward(params, sigma, &point)?;
    Ok(tape)
}

/// `(d_u G)^T w` at the tape's linearization point.
fn jacobian_transpose_apply(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    tape: &RegNetTape,
    w: &Array1<f64>,
) -> Result<Array1<f64>> {
    match prob.map_kind {
        MapKind::DeGrad => {
            // (I - tau (lambda K^T K + J_N^T)) w
            let kk = prob.normal_matvec(w)?;
            let jn = regnet_vjp_input(params, tape, w)?;
            Ok(w - &(kk + jn).mapv(|v| prob.tau * v))
        }
        MapKind::DeProx => {
            // (I - tau lambda K^T K) J_N(z)^T w
            let y = regnet_vjp_input(params, tape, w)?;
            let kk = prob.normal_matvec(&y)?;
            Ok(&y - &kk.mapv(|v| prob.tau * v))
        }
    }
}

/// Outcome of the adjoint fixed-point solve.
#[derive(Debug, Clone)]
pub struct AdjointResult {
    pub mu: Array1<f64>,
    pub iters: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub diverged: bool,
}

/// Solves `mu = (d_u G(u*, params))^T mu - grad_J` by fixed-point iteration
/// from `mu_0 = -grad_J`, under the same stopping rule as the forward solve.
///
/// A non-converged result still carries the last iterate; callers may consume
/// it (with its flag) rather than abort.
pub fn solve_adjoint(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u_star: &ImageSignal,
    grad_j: &Array1<f64>,
) -> Result<AdjointResult> {
    if grad_j.len() != u_star.len() {
        return Err(Error::shape("solve_adjoint grad_J", u_star.len(), grad_j.len()));
    }
    let tape = backward_tape(prob, params, sigma, u_star)?;
    let mut mu = grad_j.mapv(|v| -v);
    let blowup = 1e8 * (1.0 + norm2(grad_j.view()));
    let mut residual = f64::INFINITY;
    for it in 1..=prob.stop.max_iter {
        let mut next = jacobian_transpose_apply(prob, params, &tape, &mu)?;
        next -= grad_j;
        let diff = norm2((&next - &mu).view());
        let norm_next = norm2(next.view());
        residual = relative_residual(diff, norm_next);
        if !next.iter().all(|v| v.is_finite()) || norm_next > blowup || residual > 1e6 {
            return Ok(AdjointResult {
                mu: next,
                iters: it,
                final_residual: residual,
                converged: false,
                diverged: true,
            });
        }
        mu = next;
        if residual <= prob.stop.rel_tol {
            return Ok(AdjointResult {
                mu,
                iters: it,
                final_residual: residual,
                converged: true,
                diverged: false,
            });
        }
    }
    Ok(AdjointResult {
        mu,
        iters: prob.stop.max_iter,
        final_residual: residual,
        converged: false,
        diverged: false,
    })
}

/// Parameter gradient of `J(u*)` assembled from the adjoint variable:
/// `-(d_params G(u*, .))^T mu*`.
///
/// For DeGrad the map's parameter Jacobian is `-tau * d_params N(u*)`, so the
/// gradient is `tau * vjp_params(u*, mu*)`; for DeProx it is
/// `-vjp_params(z*, mu*)`.
pub fn param_gradient(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u_star: &ImageSignal,
    mu_star: &Array1<f64>,
) -> Result<ParamGrads> {
    let tape = backward_tape(prob, params, sigma, u_star)?;
    let mut grads = regnet_vjp_params(params, &tape, mu_star)?;
    match prob.map_kind {
        MapKind::DeGrad => grads.scale(prob.tau),
        MapKind::DeProx => grads.scale(-1.0),
    }
    Ok(grads)
}

/// Parameter gradient via the implicit function theorem on the lower-level
/// stationarity condition `S(u, params) = lambda K^T (K u - f) + N(u) = 0`.
///
/// Requires tied weights (so `S` is the gradient of the strongly convex
/// lower-level objective and `d_u S` is symmetric) and assembles the dense
/// `n x n` system, so it is meant for small instances and verification.
pub fn ift_gradient(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u_star: &ImageSignal,
    grad_j: &Array1<f64>,
) -> Result<ParamGrads> {
    if !params.tied() {
        return Err(Error::Unsupported("ift_gradient on untied parameters"));
    }
    let n = u_star.len();
    if grad_j.len() != n {
        return Err(Error::shape("ift_gradient grad_J", n, grad_j.len()));
    }
    let (_, tape) = regnet_forward(params, sigma, u_star)?;
    // d_u S = lambda K^T K + J_N(u*); tied J_N is symmetric so the vjp doubles
    // as the jvp for column assembly.
    let h = dense_from_apply(n, n, |e| {
        let kk = prob.normal_matvec(&e.to_owned()).expect("shape fixed");
        let jn = regnet_vjp_input(params, &tape, &e.to_owned()).expect("shape fixed");
        kk + jn
    });
    let y = solve_dense(&h, grad_j.view())?;
    // dJ/dparams = -(d_params S)^T H^{-1} grad_J.
    let mut grads = regnet_vjp_params(params, &tape, &y)?;
    grads.scale(-1.0);
    Ok(grads)
}

/// Outcome of the unrolled reverse sweep.
#[derive(Debug, Clone)]
pub struct UnrolledResult {
    pub grads: ParamGrads,
    pub u_final: ImageSignal,
    pub steps: usize,
}

/// Exact gradient of `J(u^K)` for the finite iterate produced by the forward
/// solve, by reverse-mode recurrence through the stored iterates. The oracle
/// the adjoint and IFT routes are checked against.
pub fn unrolled_gradient<F>(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u0: Option<&ImageSignal>,
    grad_j_fn: F,
) -> Result<UnrolledResult>
where
    F: FnOnce(&ImageSignal) -> Array1<f64>,
{
    let mut iterates = vec![match u0 {
        Some(u0) => u0.clone(),
        None => prob.zero_init(),
    }];
    for _ in 0..prob.stop.max_iter {
        let u = iterates.last().expect("nonempty");
        let next = apply_step(prob, params, sigma, u)?;
        if !next.is_finite() {
            return Err(Error::NonFinite("unrolled forward iterate"));
        }
        let diff = norm2((next.data() - u.data()).view());
        let residual = relative_residual(diff, next.norm());
        iterates.push(next);
        if residual <= prob.stop.rel_tol {
            break;
        }
    }
    let steps = iterates.len() - 1;
    let u_final = iterates.last().expect("nonempty").clone();
    let mut w = grad_j_fn(&u_final);
    let mut grads = ParamGrads::zeros_like(params);

    // Reverse sweep; the tape at each iterate is recomputed from the stored
    // input, which is cheaper than caching every field at this scale.
    for u_k in iterates[..steps].iter().rev() {
        match prob.map_kind {
            MapKind::DeGrad => {
                let (_, tape) = regnet_forward(params, sigma, u_k)?;
                let step_grads = regnet_vjp_params(params, &tape, &w)?;
                grads.add_scaled(&step_grads, -prob.tau);
                let kk = prob.normal_matvec(&w)?;
                let jn = regnet_vjp_input(params, &tape, &w)?;
                w = &w - &(kk + jn).mapv(|v| prob.tau * v);
            }
            MapKind::DeProx => {
                let z = deprox_inner(prob, u_k)?;
                let (_, tape) = regnet_forward(params, sigma, &z)?;
                let step_grads = regnet_vjp_params(params, &tape, &w)?;
                grads.add_scaled(&step_grads, 1.0);
                let y = regnet_vjp_input(params, &tape, &w)?;
                let kk = prob.normal_matvec(&y)?;
                w = &y - &kk.mapv(|v| prob.tau * v);
            }
        }
    }
    Ok(UnrolledResult {
        grads,
        u_final,
        steps,
    })
}

/// Lower-level objective `lambda/2 ||K u - f||^2 + (gamma/xi) env_R(xi A u + b)`
/// for tied parameters, with the Moreau envelope evaluated through the
/// partner prox. Available for every activation with a closed-form partner.
pub fn lower_level_objective(
    prob: &EquilibriumProblem,
    params: &RegularizerParams,
    sigma: Activation,
    u: &ImageSignal,
) -> Result<f64> {
    if !params.tied() {
        return Err(Error::Unsupported("lower-level objective on untied parameters"));
    }
    let mut r = prob.operator.apply(u)?;
    r -= &prob.f_delta;
    let data_term = 0.5 * prob.lambda * r.iter().map(|v| v * v).sum::<f64>();
    let (_, tape) = regnet_forward(params, sigma, u)?;
    let pre = tape.pre_activation();
    let reg_term = params.gamma() / params.xi() * sigma.envelope_value(&pre)?;
    Ok(data_term + reg_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{ConvKernelBank, DenseMatrix};
    use crate::regnet::ParamLayers;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_op(rows: usize, cols: usize) -> LinearOperator {
        LinearOperator::Identity { rows, cols }
    }

    fn zero_net(n: usize) -> RegularizerParams {
        RegularizerParams::new(
            ParamLayers::Dense {
                a: DenseMatrix::new(Array2::zeros((n, n))).unwrap(),
                c: None,
                b: Array1::zeros(n),
            },
            1.0,
            1.0,
        )
        .unwrap()
    }

    fn identity_net(n: usize) -> RegularizerParams {
        RegularizerParams::new(
            ParamLayers::Dense {
                a: DenseMatrix::identity(n),
                c: Some(DenseMatrix::identity(n)),
                b: Array1::zeros(n),
            },
            1.0,
            1.0,
        )
        .unwrap()
    }

    fn random_tied(seed: u64, s: usize, n: usize, gamma: f64) -> RegularizerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.5 / (n as f64).sqrt();
        RegularizerParams::new(
            ParamLayers::Dense {
                a: DenseMatrix::new(Array2::from_shape_fn((s, n), |_| rng.gen_range(-scale..scale))).unwrap(),
                c: None,
                b: Array1::from_iter((0..s).map(|_| rng.gen_range(-0.05..0.05))),
            },
            gamma,
            1.0,
        )
        .unwrap()
    }

    fn problem(
        op: LinearOperator,
        f: Array1<f64>,
        lambda: f64,
        tau: f64,
        kind: MapKind,
        tol: f64,
        max_iter: usize,
    ) -> EquilibriumProblem {
        EquilibriumProblem::new(op, f, lambda, tau, kind, StoppingRule::new(tol, max_iter).unwrap()).unwrap()
    }

    #[test]
    fn degrad_step_reduces_to_landweber_with_zero_net() {
        let prob = problem(
            identity_op(2, 1),
            array![1.0, -1.0],
            1.0,
            0.3,
            MapKind::DeGrad,
            1e-6,
            10,
        );
        let u = ImageSignal::new(array![0.5, 0.5], 2, 1).unwrap();
        let next = degrad_step(&prob, &zero_net(2), Activation::Relu, &u).unwrap();
        // u - tau * (u - f)
        assert_abs_diff_eq!(next.data()[0], 0.5 - 0.3 * (0.5 - 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(next.data()[1], 0.5 - 0.3 * (0.5 + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn zero_tau_steps_are_transparent() {
        let prob = problem(
            identity_op(2, 1),
            array![1.0, 2.0],
            1.0,
            0.0,
            MapKind::DeGrad,
            1e-6,
            10,
        );
        let u = ImageSignal::new(array![0.7, -0.2], 2, 1).unwrap();
        let next = degrad_step(&prob, &random_tied(3, 3, 2, 0.5), Activation::Tanh, &u).unwrap();
        assert_eq!(next.data(), u.data());

        // DeProx with tau = 0 applies the network to u itself.
        let p2 = problem(
            identity_op(2, 1),
            array![1.0, 2.0],
            1.0,
            0.0,
            MapKind::DeProx,
            1e-6,
            10,
        );
        let params = random_tied(3, 3, 2, 0.5);
        let next = deprox_step(&p2, &params, Activation::Tanh, &u).unwrap();
        let (expect, _) = regnet_forward(&params, Activation::Tanh, &u).unwrap();
        assert_eq!(next.data(), &expect);
    }

    #[test]
    fn steps_match_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let params = random_tied(11, 5, 4, 0.8);
        let sigma = Activation::Softshrink { eps: 0.2 };
        let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let mask = vec![true, false, false, false];
        let op = LinearOperator::RowMask {
            rows: 4,
            cols: 1,
            masked: mask,
        };
        let prob = problem(op.clone(), f.clone(), 1.4, 0.25, MapKind::DeGrad, 1e-9, 10);
        let u = ImageSignal::new(
            Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0))),
            4,
            1,
        )
        .unwrap();

        let got = degrad_step(&prob, &params, sigma, &u).unwrap();
        // Hand-composed: u - tau*(lambda K^T(K u - f) + N(u)).
        let mut r = op.apply(&u).unwrap();
        r -= &f;
        let ktr = op.adjoint(r.view()).unwrap().into_data().mapv(|v| 1.4 * v);
        let (net, _) = regnet_forward(&params, sigma, &u).unwrap();
        let expect = u.data() - &(ktr + net).mapv(|v| 0.25 * v);
        for (a, b) in got.data().iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }

        let prob_px = problem(op.clone(), f.clone(), 1.4, 0.25, MapKind::DeProx, 1e-9, 10);
        let got = deprox_step(&prob_px, &params, sigma, &u).unwrap();
        let mut r = op.apply(&u).unwrap();
        r -= &f;
        let z = u.data() - &op.adjoint(r.view()).unwrap().into_data().mapv(|v| 1.4 * 0.25 * v);
        let (expect, _) = regnet_forward(&params, sigma, &ImageSignal::new(z, 4, 1).unwrap()).unwrap();
        for (a, b) in got.data().iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn forward_solve_finds_unique_fixed_point() {
        let prob = problem(
            identity_op(2, 1),
            array![1.0, 1.0],
            1.0,
            0.5,
            MapKind::DeGrad,
            1e-10,
            200,
        );
        let res = solve_forward(&prob, &zero_net(2), Activation::Relu, None).unwrap();
        assert!(res.converged);
        assert!(res.final_residual <= 1e-10);
        assert_abs_diff_eq!(res.u_star.data()[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(res.u_star.data()[1], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn converged_result_is_a_fixed_point_at_tolerance() {
        // ||u* - G(u*)|| / ||u*|| stays within rel_tol whenever the solver
        // reports convergence.
        let params = random_tied(97, 6, 4, 0.8);
        let sigma = Activation::Softshrink { eps: 0.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(199);
        for tol in [1e-3, 1e-6, 1e-10] {
            let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
            let mut prob = problem(identity_op(4, 1), f, 1.0, 0.0, MapKind::DeGrad, tol, 50_000);
            prob.tau = 0.8 * contraction_bound(&prob, &params);
            let res = solve_forward(&prob, &params, sigma, None).unwrap();
            assert!(res.converged);
            let next = degrad_step(&prob, &params, sigma, &res.u_star).unwrap();
            let defect = norm2((next.data() - res.u_star.data()).view()) / res.u_star.norm();
            assert!(defect <= tol, "fixed-point defect {defect} above {tol}");
        }
    }

    #[test]
    fn tied_identity_solution_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let n = 6;
        let params = random_tied(31, n, n, 0.9);
        let f = Array1::from_iter((0..n).map(|_| rng.gen_range(-1.0..1.0)));
        let prob = problem(
            identity_op(n, 1),
            f.clone(),
            1.3,
            0.4,
            MapKind::DeGrad,
            1e-13,
            20_000,
        );
        let res = solve_forward(&prob, &params, Activation::Identity, None).unwrap();
        assert!(res.converged);

        // Stationarity: (lambda K^T K + gamma A^T A) u = lambda K^T f - gamma A^T b.
        let (a, b) = match params.layers() {
            ParamLayers::Dense { a, b, .. } => (a.entries().clone(), b.clone()),
            _ => unreachable!(),
        };
        let mut h = a.t().dot(&a).mapv(|v| 0.9 * v);
        for i in 0..n {
            h[[i, i]] += 1.3;
        }
        let rhs = f.mapv(|v| 1.3 * v) - a.t().dot(&b).mapv(|v| 0.9 * v);
        let expect = solve_dense(&h, rhs.view()).unwrap();
        for (got, want) in res.u_star.data().iter().zip(expect.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn contraction_bound_trivial_cases() {
        let f = array![0.0, 0.0];
        let prob = problem(identity_op(2, 1), f.clone(), 1.0, 0.1, MapKind::DeGrad, 1e-6, 10);
        assert_abs_diff_eq!(contraction_bound(&prob, &zero_net(2)), 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(contraction_bound(&prob, &identity_net(2)), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn contraction_bound_implies_empirical_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let params = random_tied(41, 6, 4, 1.0);
        let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let mut prob = problem(identity_op(4, 1), f, 1.0, 0.0, MapKind::DeGrad, 1e-6, 10);
        prob.tau = 0.9 * contraction_bound(&prob, &params);
        let sigma = Activation::Tanh;
        for _ in 0..30 {
            let u = ImageSignal::new(Array1::from_iter((0..4).map(|_| rng.gen_range(-2.0..2.0))), 4, 1).unwrap();
            let v = ImageSignal::new(Array1::from_iter((0..4).map(|_| rng.gen_range(-2.0..2.0))), 4, 1).unwrap();
            let gu = degrad_step(&prob, &params, sigma, &u).unwrap();
            let gv = degrad_step(&prob, &params, sigma, &v).unwrap();
            let num = norm2((gu.data() - gv.data()).view());
            let den = norm2((u.data() - v.data()).view());
            assert!(num <= den, "step expanded a pair: {num} > {den}");
        }
    }

    #[test]
    fn deprox_identity_net_equals_degrad_zero_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let deprox = problem(identity_op(4, 1), f.clone(), 0.8, 0.6, MapKind::DeProx, 1e-12, 40);
        let degrad = problem(identity_op(4, 1), f, 0.8, 0.6, MapKind::DeGrad, 1e-12, 40);
        let mut u1 = ImageSignal::zeros(4, 1);
        let mut u2 = ImageSignal::zeros(4, 1);
        for _ in 0..12 {
            u1 = deprox_step(&deprox, &identity_net(4), Activation::Identity, &u1).unwrap();
            u2 = degrad_step(&degrad, &zero_net(4), Activation::Identity, &u2).unwrap();
            assert_eq!(u1.data(), u2.data());
        }
    }

    #[test]
    fn divergence_is_detected_for_oversized_tau() {
        // K = I, lambda = 1, zero net: stability demands tau < 2; 5.0 blows up
        // geometrically and must be flagged well before the iteration cap.
        let prob = problem(
            identity_op(2, 1),
            array![1.0, 1.0],
            1.0,
            5.0,
            MapKind::DeGrad,
            1e-6,
            500,
        );
        let res = solve_forward(&prob, &zero_net(2), Activation::Identity, None).unwrap();
        assert!(res.diverged);
        assert!(!res.converged);
        assert!(res.iters < 500);
    }

    #[test]
    fn residuals_decrease_monotonically_in_contraction_regime() {
        let params = random_tied(43, 8, 6, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(139);
        let f = Array1::from_iter((0..6).map(|_| rng.gen_range(-1.0..1.0)));
        let mut prob = problem(identity_op(6, 1), f, 1.0, 0.0, MapKind::DeGrad, 1e-12, 400);
        prob.tau = 0.9 * contraction_bound(&prob, &params);
        let res = solve_forward(&prob, &params, Activation::Tanh, None).unwrap();
        assert!(res.converged);
        for pair in res.residuals.windows(2).skip(5) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-9),
                "residual rose: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn lower_level_objective_decreases_along_iterates() {
        let params = random_tied(47, 8, 6, 0.8);
        let sigma = Activation::Softshrink { eps: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(149);
        let f = Array1::from_iter((0..6).map(|_| rng.gen_range(-1.0..1.0)));
        let mut prob = problem(identity_op(6, 1), f, 1.0, 0.0, MapKind::DeGrad, 1e-12, 300);
        prob.tau = 0.9 * contraction_bound(&prob, &params);

        let mut u = prob.zero_init();
        let mut prev = lower_level_objective(&prob, &params, sigma, &u).unwrap();
        for _ in 0..60 {
            u = degrad_step(&prob, &params, sigma, &u).unwrap();
            let now = lower_level_objective(&prob, &params, sigma, &u).unwrap();
            assert!(now <= prev + 1e-12, "objective rose: {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn adjoint_trivial_cases() {
        let params = random_tied(53, 5, 4, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(151);
        let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let mut prob = problem(identity_op(4, 1), f, 1.0, 0.0, MapKind::DeGrad, 1e-12, 2000);
        prob.tau = 0.8 * contraction_bound(&prob, &params);
        let res = solve_forward(&prob, &params, Activation::Tanh, None).unwrap();

        // grad_J = 0 -> mu = 0.
        let adj = solve_adjoint(&prob, &params, Activation::Tanh, &res.u_star, &Array1::zeros(4)).unwrap();
        assert!(adj.converged);
        assert_eq!(adj.mu, Array1::<f64>::zeros(4));
    }

    #[test]
    fn adjoint_matches_dense_linear_solve() {
        let params = random_tied(59, 6, 4, 0.9);
        let sigma = Activation::Tanh;
        let mut rng = ChaCha8Rng::seed_from_u64(157);
        let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let mut prob = problem(identity_op(4, 1), f, 1.2, 0.0, MapKind::DeGrad, 1e-13, 20_000);
        prob.tau = 0.7 * contraction_bound(&prob, &params);
        let res = solve_forward(&prob, &params, sigma, None).unwrap();
        assert!(res.converged);
        let grad_j = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));

        let adj = solve_adjoint(&prob, &params, sigma, &res.u_star, &grad_j).unwrap();
        assert!(adj.converged);

        // Direct solve of (I - (dG)^T) mu = -grad_J.
        let tape = backward_tape(&prob, &params, sigma, &res.u_star).unwrap();
        let m = dense_from_apply(4, 4, |e| {
            let je = jacobian_transpose_apply(&prob, &params, &tape, &e.to_owned()).unwrap();
            e.to_owned() - je
        });
        let expect = solve_dense(&m, grad_j.mapv(|v| -v).view()).unwrap();
        for (got, want) in adj.mu.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-8);
        }
    }

    fn mse_grad(u: &ImageSignal, target: &Array1<f64>) -> Array1<f64> {
        let n = u.len() as f64;
        (u.data() - target).mapv(|v| v / n)
    }

    fn mse_value(u: &ImageSignal, target: &Array1<f64>) -> f64 {
        let n = u.len() as f64;
        (u.data() - target).iter().map(|v| v * v).sum::<f64>() / (2.0 * n)
    }

    #[test]
    fn three_gradient_routes_agree_and_match_finite_differences() {
        for kind in [MapKind::DeGrad, MapKind::DeProx] {
            let params = random_tied(61, 6, 4, 0.8);
            let sigma = Activation::Tanh;
            let mut rng = ChaCha8Rng::seed_from_u64(163);
            let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
            let target = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
            let mut prob = problem(identity_op(4, 1), f, 1.0, 0.0, kind, 1e-13, 50_000);
            prob.tau = 0.5 * contraction_bound(&prob, &params);

            let res = solve_forward(&prob, &params, sigma, None).unwrap();
            assert!(res.converged);
            let grad_j = mse_grad(&res.u_star, &target);

            let adj = solve_adjoint(&prob, &params, sigma, &res.u_star, &grad_j).unwrap();
            assert!(adj.converged);
            let g_adjoint = param_gradient(&prob, &params, sigma, &res.u_star, &adj.mu).unwrap();
            let g_unrolled = unrolled_gradient(&prob, &params, sigma, None, |u| mse_grad(u, &target))
                .unwrap()
                .grads;

            let rel = |a: &ParamGrads, b: &ParamGrads| {
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for (ca, cb) in a.components().iter().zip(b.components().iter()) {
                    for (x, y) in ca.iter().zip(cb.iter()) {
                        num += (x - y) * (x - y);
                        den += x * x;
                    }
                }
                (num / den.max(1e-300)).sqrt()
            };
            assert!(
                rel(&g_adjoint, &g_unrolled) < 1e-4,
                "{kind:?}: adjoint vs unrolled {}",
                rel(&g_adjoint, &g_unrolled)
            );
            if kind == MapKind::DeGrad {
                let g_ift = ift_gradient(&prob, &params, sigma, &res.u_star, &grad_j).unwrap();
                assert!(rel(&g_adjoint, &g_ift) < 1e-4, "adjoint vs ift {}", rel(&g_adjoint, &g_ift));
            }

            // Spot-check three entries of A against end-to-end central
            // differences that re-solve the fixed point.
            let h = 1e-5;
            for (i, j) in [(0usize, 0usize), (2, 1), (5, 3)] {
                let solve_loss = |delta: f64| {
                    let mut p = params.clone();
                    // Perturb a single entry of A.
                    {
                        let comps = p.components_mut();
                        let a = comps.into_iter().next().unwrap();
                        a[i * 4 + j] += delta;
                    }
                    let r = solve_forward(&prob, &p, sigma, None).unwrap();
                    assert!(r.converged);
                    mse_value(&r.u_star, &target)
                };
                let fd = (solve_loss(h) - solve_loss(-h)) / (2.0 * h);
                let got = match &g_adjoint {
                    ParamGrads::Dense { a, .. } => a[[i, j]],
                    _ => unreachable!(),
                };
                assert!(
                    (got - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "{kind:?} A[{i},{j}]: adjoint {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn unrolled_single_step_matches_hand_chain_rule() {
        // One DeGrad step from u0: u1 = u0 - tau*(lambda(u0 - f) + N(u0)),
        // J = <u1, w0>; dJ/dA via the vjp directly.
        let params = random_tied(67, 3, 3, 1.1);
        let sigma = Activation::Identity;
        let f = array![0.3, -0.8, 0.5];
        let prob = problem(identity_op(3, 1), f, 1.0, 0.35, MapKind::DeGrad, 1e-30, 1);
        let u0 = ImageSignal::new(array![0.2, 0.1, -0.4], 3, 1).unwrap();
        let w0 = array![1.0, -2.0, 0.5];

        let got = unrolled_gradient(&prob, &params, sigma, Some(&u0), |_| w0.clone()).unwrap();
        assert_eq!(got.steps, 1);

        let (_, tape) = regnet_forward(&params, sigma, &u0).unwrap();
        let mut expect = regnet_vjp_params(&params, &tape, &w0).unwrap();
        expect.scale(-0.35);
        for (a, b) in got.grads.components().iter().zip(expect.components().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn unrolled_matches_finite_differences_on_fixed_step_count() {
        let params = random_tied(71, 4, 4, 0.9);
        let sigma = Activation::Tanh;
        let mut rng = ChaCha8Rng::seed_from_u64(173);
        let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let target = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        // rel_tol tiny and 10 iterations: a fixed-depth unroll.
        let prob = problem(identity_op(4, 1), f, 1.0, 0.3, MapKind::DeGrad, 1e-30, 10);

        let got = unrolled_gradient(&prob, &params, sigma, None, |u| mse_grad(u, &target)).unwrap();
        assert_eq!(got.steps, 10);

        let h = 1e-6;
        let loss_at = |p: &RegularizerParams| {
            let mut u = prob.zero_init();
            for _ in 0..10 {
                u = degrad_step(&prob, p, sigma, &u).unwrap();
            }
            mse_value(&u, &target)
        };
        let ga = match &got.grads {
            ParamGrads::Dense { a, .. } => a.clone(),
            _ => unreachable!(),
        };
        for (i, j) in [(0usize, 0usize), (1, 2), (3, 3)] {
            let mut pp = params.clone();
            pp.components_mut()[0][i * 4 + j] += h;
            let mut pm = params.clone();
            pm.components_mut()[0][i * 4 + j] -= h;
            let fd = (loss_at(&pp) - loss_at(&pm)) / (2.0 * h);
            assert_abs_diff_eq!(ga[[i, j]], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn unrolled_approaches_adjoint_as_solves_tighten() {
        let params = random_tied(73, 5, 4, 0.7);
        let sigma = Activation::Tanh;
        let mut rng = ChaCha8Rng::seed_from_u64(179);
        let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let target = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));

        let gap_at = |tol: f64| {
            let mut prob = problem(identity_op(4, 1), f.clone(), 1.0, 0.0, MapKind::DeGrad, tol, 100_000);
            prob.tau = 0.5 * contraction_bound(&prob, &params);
            let res = solve_forward(&prob, &params, sigma, None).unwrap();
            let grad_j = mse_grad(&res.u_star, &target);
            let adj = solve_adjoint(&prob, &params, sigma, &res.u_star, &grad_j).unwrap();
            let ga = param_gradient(&prob, &params, sigma, &res.u_star, &adj.mu).unwrap();
            let gu = unrolled_gradient(&prob, &params, sigma, None, |u| mse_grad(u, &target))
                .unwrap()
                .grads;
            let mut num = 0.0f64;
            for (ca, cb) in ga.components().iter().zip(gu.components().iter()) {
                for (x, y) in ca.iter().zip(cb.iter()) {
                    num += (x - y) * (x - y);
                }
            }
            num.sqrt()
        };
        let coarse = gap_at(1e-4);
        let fine = gap_at(1e-10);
        assert!(fine < coarse, "gap did not shrink: {coarse} -> {fine}");
        assert!(fine < 1e-8);
    }

    #[test]
    fn ift_identity_activation_matches_param_gradient_tightly() {
        let params = random_tied(79, 6, 4, 1.0);
        let sigma = Activation::Identity;
        let mut rng = ChaCha8Rng::seed_from_u64(181);
        let f = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let target = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
        let mut prob = problem(identity_op(4, 1), f, 1.0, 0.0, MapKind::DeGrad, 1e-14, 100_000);
        prob.tau = 0.6 * contraction_bound(&prob, &params);

        let res = solve_forward(&prob, &params, sigma, None).unwrap();
        let grad_j = mse_grad(&res.u_star, &target);
        let adj = solve_adjoint(&prob, &params, sigma, &res.u_star, &grad_j).unwrap();
        let g_adj = param_gradient(&prob, &params, sigma, &res.u_star, &adj.mu).unwrap();
        let g_ift = ift_gradient(&prob, &params, sigma, &res.u_star, &grad_j).unwrap();

        // grad_J = 0 gives a zero gradient.
        let g_zero = ift_gradient(&prob, &params, sigma, &res.u_star, &Array1::zeros(4)).unwrap();
        assert_eq!(g_zero.max_abs(), 0.0);

        for (ca, cb) in g_adj.components().iter().zip(g_ift.components().iter()) {
            for (x, y) in ca.iter().zip(cb.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn ift_rejects_untied_parameters() {
        let params = identity_net(3);
        let prob = problem(identity_op(3, 1), array![0.0, 0.0, 0.0], 1.0, 0.1, MapKind::DeGrad, 1e-6, 10);
        let u = ImageSignal::zeros(3, 1);
        assert!(matches!(
            ift_gradient(&prob, &params, Activation::Identity, &u, &array![0.0, 0.0, 0.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn conv_problem_round_trip() {
        // DeGrad with a convolutional operator and a conv regularizer: the
        // adjoint gradient agrees with the unrolled oracle.
        let mut k = Array2::zeros((3, 3));
        k[[1, 1]] = 0.5;
        k[[0, 1]] = 0.25;
        k[[2, 1]] = 0.25;
        let op = LinearOperator::Conv2D {
            kernel: ConvKernelBank::single(k).unwrap(),
            rows: 4,
            cols: 4,
        };
        let params = RegularizerParams::init_conv_random(2, 3, 3, 0.6, 1.0, true, 83).unwrap();
        let sigma = Activation::Tanh;
        let mut rng = ChaCha8Rng::seed_from_u64(191);
        let truth = Array1::from_iter((0..16).map(|_| rng.gen_range(-1.0..1.0)));
        let f = op
            .apply(&ImageSignal::new(truth.clone(), 4, 4).unwrap())
            .unwrap();
        let mut prob = problem(op, f, 1.0, 0.0, MapKind::DeGrad, 1e-12, 30_000);
        prob.tau = 0.6 * contraction_bound(&prob, &params);

        let res = solve_forward(&prob, &params, sigma, None).unwrap();
        assert!(res.converged);
        let grad_j = mse_grad(&res.u_star, &truth);
        let adj = solve_adjoint(&prob, &params, sigma, &res.u_star, &grad_j).unwrap();
        assert!(adj.converged);
        let ga = param_gradient(&prob, &params, sigma, &res.u_star, &adj.mu).unwrap();
        let gu = unrolled_gradient(&prob, &params, sigma, None, |u| mse_grad(u, &truth))
            .unwrap()
            .grads;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (ca, cb) in ga.components().iter().zip(gu.components().iter()) {
            for (x, y) in ca.iter().zip(cb.iter()) {
                num += (x - y) * (x - y);
                den += x * x;
            }
        }
        assert!((num / den.max(1e-300)).sqrt() < 1e-4);
    }
}
