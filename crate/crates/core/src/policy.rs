//! Learning a linear rule by minimizing the weighted classification risk with
//! the smoothed ramp loss.
//!
//! The ramp loss splits as `l(u) = l_1(u) - l_0(u)` with both pieces convex and
//! continuously differentiable, so the empirical risk is a difference of
//! convex functions of `eta`. Each outer iteration linearizes the concave part
//! at the current iterate and minimizes the resulting smooth convex majorant
//! with L-BFGS, warm-started from the previous solution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ExperimentalSample, LinearRule, TransferWeights};
use crate::error::{Error, Result};
use crate::nuisance::{pivoted_least_squares, ContrastEstimates};
use crate::optim::{self, LbfgsOptions, LbfgsStatus};

/// `l^zeta(u) = l(zeta1 * u) / zeta2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampLossParams {
    pub zeta1: f64,
    pub zeta2: f64,
}

impl Default for RampLossParams {
    fn default() -> Self {
        Self {
            zeta1: 1.0,
            zeta2: 1.0,
        }
    }
}

impl RampLossParams {
    pub fn new(zeta1: f64, zeta2: f64) -> Result<Self> {
        if !(zeta1 > 0.0 && zeta2 > 0.0 && zeta1.is_finite() && zeta2.is_finite()) {
            return Err(Error::InvalidConfig(
                "ramp loss parameters must be positive and finite".into(),
            ));
        }
        Ok(Self { zeta1, zeta2 })
    }
}

/// Smoothed ramp loss.
pub fn ramp_loss(u: f64, params: RampLossParams) -> f64 {
    let v = params.zeta1 * u;
    let l = if v >= 1.0 {
        0.0
    } else if v >= 0.0 {
        (1.0 - v).powi(2)
    } else if v >= -1.0 {
        2.0 - (1.0 + v).powi(2)
    } else {
        2.0
    };
    l / params.zeta2
}

/// Which convex piece of the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    /// `l_1`, the convex part.
    One,
    /// `l_0`, the subtracted part.
    Zero,
}

impl Piece {
    fn shift(self) -> f64 {
        match self {
            Piece::One => 1.0,
            Piece::Zero => 0.0,
        }
    }
}

/// `l_s(u)`: 0 for `u >= s`, `(s - u)^2` on `[s - 1, s)`, `2s - 2u - 1` below.
pub fn ramp_component(u: f64, piece: Piece) -> f64 {
    let s = piece.shift();
    if u >= s {
        0.0
    } else if u >= s - 1.0 {
        (s - u).powi(2)
    } else {
        2.0 * s - 2.0 * u - 1.0
    }
}

/// `d l_s / du`.
pub fn ramp_component_derivative(u: f64, piece: Piece) -> f64 {
    let s = piece.shift();
    if u >= s {
        0.0
    } else if u >= s - 1.0 {
        -2.0 * (s - u)
    } else {
        -2.0
    }
}

/// `1{u <= 0}`.
pub fn zero_one_loss(u: f64) -> f64 {
    if u <= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskLoss {
    /// Misclassification of the label `1{tau > 0}` by the rule.
    ZeroOne,
    Ramp(RampLossParams),
}

/// Factor in front of the weighted sum: `1/n` for raw weights, `1` for
/// weights that already sum to one.
pub fn risk_scale(w: &TransferWeights) -> f64 {
    if w.is_sum_to_one() {
        1.0
    } else {
        1.0 / w.len() as f64
    }
}

fn check_inputs(
    exp: &ExperimentalSample,
    w: &TransferWeights,
    tau: &ContrastEstimates,
) -> Result<()> {
    w.check_len(exp.n())?;
    if tau.len() != exp.n() {
        return Err(Error::DimensionMismatch {
            expected: exp.n(),
            got: tau.len(),
        });
    }
    Ok(())
}

#[inline]
fn label(tau: f64) -> f64 {
    if tau > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Weighted classification risk
/// `scale * sum w_i |tau_i| loss({2 * 1(tau_i > 0) - 1} f(X_i; eta))`.
///
/// The zero-one form counts rows where the rule's decision differs from
/// `1{tau_i > 0}`, which also settles rows with `f = 0` the way the rule does.
pub fn empirical_risk(
    rule: &LinearRule,
    exp: &ExperimentalSample,
    w: &TransferWeights,
    tau: &ContrastEstimates,
    loss: RiskLoss,
) -> Result<f64> {
    check_inputs(exp, w, tau)?;
    if rule.p() != exp.p() {
        return Err(Error::DimensionMismatch {
            expected: exp.p(),
            got: rule.p(),
        });
    }
    let scale = risk_scale(w);
    let total: f64 = (0..exp.n())
        .map(|i| {
            let t = tau.tau[i];
            let c = w.as_slice()[i] * t.abs();
            if c == 0.0 {
                return 0.0;
            }
            let x = exp.x(i);
            let l = match loss {
                RiskLoss::ZeroOne => f64::from(rule.decide(x) != u8::from(t > 0.0)),
                RiskLoss::Ramp(p) => ramp_loss(label(t) * rule.score(x), p),
            };
            c * l
        })
        .sum();
    Ok(scale * total)
}

/// Where the first linearization of the concave part is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlopeInit {
    /// At the starting rule, so the first majorizer touches the objective there.
    #[default]
    AtStart,
    /// `xi_i = 2 w_i |tau_i|`, the slope on the linear branch. The first
    /// subproblem is then minimized by any rule misclassifying every row, so a
    /// good starting rule can be lost.
    LinearBranch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcOptions {
    /// Stop when the sup-norm change of the linearization slopes is at most this.
    pub tol: f64,
    pub max_outer: usize,
    pub inner: LbfgsOptions,
    pub slope_init: SlopeInit,
}

impl Default for DcOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_outer: 200,
            inner: LbfgsOptions::default(),
            slope_init: SlopeInit::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcFitReport {
    /// Canonical (max-abs = 1) rule.
    pub eta: LinearRule,
    /// Minimizer on the scale it was found at.
    pub raw_eta: Vec<f64>,
    /// Ramp-loss risk at each outer iterate.
    pub objective_trace: Vec<f64>,
    pub inner_iterations: Vec<usize>,
    /// Outer iterations whose inner solve stopped before the gradient tolerance.
    pub inner_unconverged: usize,
    pub converged: bool,
    pub xi_change: f64,
    /// Every `w_i |tau_i|` is zero; the initial rule is returned untouched.
    pub degenerate: bool,
    pub params: RampLossParams,
}

impl DcFitReport {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }

    /// Objective trace as CSV text (`iteration,objective`).
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,objective\n");
        for (i, v) in self.objective_trace.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, crate::fmt_num(*v)));
        }
        s
    }
}

struct DcProblem {
    /// `(1, x_i)` times the label.
    rows: Vec<Vec<f64>>,
    /// `scale * w_i |tau_i|`.
    cost: Vec<f64>,
    params: RampLossParams,
}

impl DcProblem {
    fn new(
        exp: &ExperimentalSample,
        w: &TransferWeights,
        tau: &ContrastEstimates,
        params: RampLossParams,
    ) -> Self {
        let scale = risk_scale(w);
        let rows = (0..exp.n())
            .map(|i| {
                let y = label(tau.tau[i]);
                std::iter::once(y)
                    .chain(exp.x(i).iter().map(|v| y * v))
                    .collect()
            })
            .collect();
        let cost = w
            .as_slice()
            .iter()
            .zip(&tau.tau)
            .map(|(wi, t)| scale * wi * t.abs())
            .collect();
        Self { rows, cost, params }
    }

    fn margins(&self, eta: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| crate::dot(r, eta)).collect()
    }

    /// `sum c_i [l_1(z u_i) - l_0(z u_i)] / zeta2`.
    fn objective(&self, eta: &[f64]) -> f64 {
        let RampLossParams { zeta1, zeta2 } = self.params;
        self.margins(eta)
            .iter()
            .zip(&self.cost)
            .map(|(u, c)| {
                let v = zeta1 * u;
                c * (ramp_component(v, Piece::One) - ramp_component(v, Piece::Zero)) / zeta2
            })
            .sum()
    }

    /// `xi_i = -c_i d/du [l_0(zeta1 u) / zeta2]`.
    fn slopes(&self, eta: &[f64]) -> Vec<f64> {
        let RampLossParams { zeta1, zeta2 } = self.params;
        self.margins(eta)
            .iter()
            .zip(&self.cost)
            .map(|(u, c)| -c * zeta1 * ramp_component_derivative(zeta1 * u, Piece::Zero) / zeta2)
            .collect()
    }

    /// Convex majorant `sum c_i l_1(zeta1 u_i)/zeta2 + sum xi_i u_i` and gradient.
    fn subproblem(&self, eta: &[f64], xi: &[f64], grad: &mut [f64]) -> f64 {
        let RampLossParams { zeta1, zeta2 } = self.params;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for ((r, c), s) in self.rows.iter().zip(&self.cost).zip(xi) {
            let u = crate::dot(r, eta);
            let v = zeta1 * u;
            value += c * ramp_component(v, Piece::One) / zeta2 + s * u;
            let du = c * zeta1 * ramp_component_derivative(v, Piece::One) / zeta2 + s;
            grad.iter_mut().zip(r).for_each(|(g, rj)| *g += du * rj);
        }
        value
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Difference-of-convex minimization of the ramp-loss risk from one starting rule.
pub fn dc_fit(
    exp: &ExperimentalSample,
    w: &TransferWeights,
    tau: &ContrastEstimates,
    params: RampLossParams,
    init: &LinearRule,
) -> Result<DcFitReport> {
    dc_fit_with(exp, w, tau, params, init, &DcOptions::default())
}

pub fn dc_fit_with(
    exp: &ExperimentalSample,
    w: &TransferWeights,
    tau: &ContrastEstimates,
    params: RampLossParams,
    init: &LinearRule,
    opts: &DcOptions,
) -> Result<DcFitReport> {
    check_inputs(exp, w, tau)?;
    if init.p() != exp.p() {
        return Err(Error::DimensionMismatch {
            expected: exp.p(),
            got: init.p(),
        });
    }
    let problem = DcProblem::new(exp, w, tau, params);
    if problem.cost.iter().all(|&c| c == 0.0) {
        return Ok(DcFitReport {
            eta: init.clone(),
            raw_eta: init.eta().to_vec(),
            objective_trace: vec![0.0],
            inner_iterations: Vec::new(),
            inner_unconverged: 0,
            converged: true,
            xi_change: 0.0,
            degenerate: true,
            params,
        });
    }

    let mut eta = init.eta().to_vec();
    let mut xi: Vec<f64> = match opts.slope_init {
        SlopeInit::AtStart => problem.slopes(&eta),
        SlopeInit::LinearBranch => problem
            .cost
            .iter()
            .map(|c| 2.0 * c * params.zeta1 / params.zeta2)
            .collect(),
    };
    let mut trace = Vec::new();
    let mut inner_iterations = Vec::new();
    let mut inner_unconverged = 0;
    let mut change = f64::INFINITY;
    let mut converged = false;

    for outer in 0..opts.max_outer {
        let slopes = xi.clone();
        let res = optim::minimize(
            |e, g| problem.subproblem(e, &slopes, g),
            eta.clone(),
            &opts.inner,
        );
        if !res.value.is_finite() || res.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InnerSolver {
                outer_iteration: outer + 1,
                reason: "non-finite iterate".into(),
            });
        }
        if res.status != LbfgsStatus::Converged {
            inner_unconverged += 1;
            log::debug!(
                "inner solve at outer iteration {} stopped with {:?} (gradient {:.2e})",
                outer + 1,
                res.status,
                res.grad_norm
            );
        }
        inner_iterations.push(res.iterations);
        eta = res.x;
        trace.push(problem.objective(&eta));
        let next = problem.slopes(&eta);
        change = sup_diff(&next, &xi);
        xi = next;
        if change <= opts.tol {
            converged = true;
            break;
        }
    }

    let raw = LinearRule::new(eta.clone())?;
    Ok(DcFitReport {
        eta: raw.canonical(),
        raw_eta: eta,
        objective_trace: trace,
        inner_iterations,
        inner_unconverged,
        converged,
        xi_change: change,
        degenerate: false,
        params,
    })
}

/// Settings for [`learn_rule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnOptions {
    pub params: RampLossParams,
    /// Random starting rules in addition to the least-squares heuristic.
    pub random_starts: usize,
    pub seed: u64,
    /// Refit with `zeta1` doubled twice, warm-starting each stage.
    pub anneal: bool,
    pub dc: DcOptions,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self {
            params: RampLossParams::default(),
            random_starts: 5,
            seed: 0,
            anneal: false,
            dc: DcOptions::default(),
        }
    }
}

/// Weighted least-squares fit of `tau` on `(1, x)`: its sign pattern is a
/// natural first guess for the rule.
pub fn least_squares_start(
    exp: &ExperimentalSample,
    w: &TransferWeights,
    tau: &ContrastEstimates,
) -> Option<LinearRule> {
    let n = exp.n();
    let k = exp.p() + 1;
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, k);
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    for i in 0..n {
        let sw = w.as_slice()[i].sqrt();
        a[(i, 0)] = sw;
        for (j, v) in exp.x(i).iter().enumerate() {
            a[(i, j + 1)] = sw * v;
        }
        b[i] = sw * tau.tau[i];
    }
    let beta = pivoted_least_squares(a, b).ok()?;
    LinearRule::new(beta.as_slice().to_vec()).ok()
}

/// Multi-start difference-of-convex fit. Starts are the least-squares
/// heuristic followed by `random_starts` standard-normal rules; the lowest
/// final objective wins, ties going to the smaller coefficient norm.
pub fn learn_rule(
    exp: &ExperimentalSample,
    w: &TransferWeights,
    tau: &ContrastEstimates,
    opts: &LearnOptions,
) -> Result<DcFitReport> {
    check_inputs(exp, w, tau)?;
    let p = exp.p();
    let mut starts = Vec::with_capacity(opts.random_starts + 1);
    starts.push(least_squares_start(exp, w, tau).unwrap_or_else(|| LinearRule::zeros(p)));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_starts {
        let eta = (0..=p)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        starts.push(LinearRule::new(eta)?);
    }

    let stages: Vec<RampLossParams> = if opts.anneal {
        [1.0, 2.0, 4.0]
            .iter()
            .map(|m| RampLossParams {
                zeta1: opts.params.zeta1 * m,
                zeta2: opts.params.zeta2,
            })
            .collect()
    } else {
        vec![opts.params]
    };

    let mut best: Option<DcFitReport> = None;
    for start in &starts {
        let mut current = start.clone();
        let mut report = None;
        for &params in &stages {
            let r = dc_fit_with(exp, w, tau, params, &current, &opts.dc)?;
            current = LinearRule::new(r.raw_eta.clone())?;
            report = Some(r);
        }
        let report = report.expect("at least one stage");
        if report.degenerate {
            return Ok(report);
        }
        let better = match &best {
            None => true,
            Some(b) => {
                let (fa, fb) = (report.final_objective(), b.final_objective());
                fa < fb - 1e-12 * fb.abs().max(1e-300)
                    || ((fa - fb).abs() <= 1e-12 * fb.abs().max(1e-300)
                        && norm(&report.raw_eta) < norm(&b.raw_eta))
            }
        };
        if better {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one start"))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Matrix, WeightMethod};
    use crate::nuisance::ContrastEstimator;

    #[test]
    fn ramp_branches() {
        let p = RampLossParams::default();
        assert_eq!(ramp_loss(2.0, p), 0.0);
        assert_eq!(ramp_loss(-3.0, p), 2.0);
        assert!((ramp_loss(-0.5, p) - 1.75).abs() < 1e-15);
        assert!((ramp_loss(0.5, p) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn component_values() {
        assert_eq!(ramp_component(1.0, Piece::One), 0.0);
        assert_eq!(ramp_component(0.0, Piece::Zero), 0.0);
        assert_eq!(ramp_component(-1.0, Piece::Zero), 1.0);
        let u = -0.5;
        let diff = ramp_component(u, Piece::One) - ramp_component(u, Piece::Zero);
        assert!((diff - 1.75).abs() < 1e-15);
        assert!((diff - ramp_loss(u, RampLossParams::default())).abs() < 1e-15);
    }

    #[test]
    fn component_derivatives_match_differences() {
        let h = 1e-6;
        for piece in [Piece::One, Piece::Zero] {
            let s = piece.shift();
            let mut u = -3.0;
            while u <= 3.0 {
                // skip points whose stencil straddles a kink
                if (u - s).abs() > 2.0 * h && (u - (s - 1.0)).abs() > 2.0 * h {
                    let fd =
                        (ramp_component(u + h, piece) - ramp_component(u - h, piece)) / (2.0 * h);
                    assert!(
                        (fd - ramp_component_derivative(u, piece)).abs() < 1e-6,
                        "{u}"
                    );
                }
                u += 0.0137;
            }
        }
    }

    #[test]
    fn zero_one_tie() {
        assert_eq!(zero_one_loss(0.0), 1.0);
        assert_eq!(zero_one_loss(1e-12), 0.0);
    }

    fn one_d(xs: &[f64], tau: &[f64]) -> (ExperimentalSample, TransferWeights, ContrastEstimates) {
        let n = xs.len();
        let rows: Vec<Vec<f64>> = xs.iter().map(|v| vec![*v]).collect();
        let exp = ExperimentalSample::new(
            Matrix::from_rows(&rows).unwrap(),
            (0..n).map(|i| (i % 2) as u8).collect(),
            vec![0.0; n],
        )
        .unwrap();
        let t = ContrastEstimates::new(tau.to_vec(), ContrastEstimator::Aipw, false).unwrap();
        (exp, TransferWeights::uniform(n), t)
    }

    #[test]
    fn degenerate_contrast_returns_init() {
        let (exp, w, tau) = one_d(&[-1.0, 0.0, 1.0], &[0.0, 0.0, 0.0]);
        let init = LinearRule::new(vec![0.3, -0.2]).unwrap();
        let r = dc_fit(&exp, &w, &tau, RampLossParams::default(), &init).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.eta, init);
        assert_eq!(r.final_objective(), 0.0);
    }

    #[test]
    fn separable_one_dimensional_instance() {
        let xs = [-2.0, -1.5, -1.0, -0.5, -0.2, 0.3, 0.6, 1.0, 1.4, 2.0];
        let tau: Vec<f64> = xs.iter().map(|x: &f64| x.signum()).collect();
        let (exp, w, t) = one_d(&xs, &tau);
        let report = learn_rule(&exp, &w, &t, &LearnOptions::default()).unwrap();
        let risk = empirical_risk(&report.eta, &exp, &w, &t, RiskLoss::ZeroOne).unwrap();
        assert_eq!(risk, 0.0);
        for (x, tv) in xs.iter().zip(&tau) {
            assert_eq!(report.eta.decide(&[*x]), u8::from(*tv > 0.0));
        }
    }

    #[test]
    fn risk_examples() {
        let xs = [-1.0, 1.0, 2.0];
        let (exp, _, t) = one_d(&xs, &[-1.0, 2.0, 3.0]);
        let w = TransferWeights::normalized(&[0.2, 0.5, 0.3], WeightMethod::Nonparametric).unwrap();
        // rule x > 0: margins |x| >= 1, agrees everywhere
        let good = LinearRule::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(
            empirical_risk(
                &good,
                &exp,
                &w,
                &t,
                RiskLoss::Ramp(RampLossParams::default())
            )
            .unwrap(),
            0.0
        );
        // rule x > 1.5 flips the middle row; w|tau| there is 0.5 * 2 = 1.0
        let (exp2, _, t2) = one_d(&xs, &[-1.0, 0.6, 3.0]);
        let flip = LinearRule::new(vec![-1.5, 1.0]).unwrap();
        let r = empirical_risk(&flip, &exp2, &w, &t2, RiskLoss::ZeroOne).unwrap();
        assert!((r - 0.3).abs() < 1e-15);
        let (exp3, _, t3) = one_d(&xs, &[0.0, 0.0, 0.0]);
        assert_eq!(
            empirical_risk(&flip, &exp3, &w, &t3, RiskLoss::ZeroOne).unwrap(),
            0.0
        );
    }

    #[test]
    fn descent_on_small_instance() {
        let xs: Vec<f64> = (0..15).map(|i| (i as f64 * 0.91).sin() * 2.0).collect();
        let tau: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| x - 0.3 + (i as f64 * 2.3).cos())
            .collect();
        let (exp, w, t) = one_d(&xs, &tau);
        let r = dc_fit(
            &exp,
            &w,
            &t,
            RampLossParams::default(),
            &LinearRule::new(vec![0.5, -1.0]).unwrap(),
        )
        .unwrap();
        assert!(r.converged);
        for pair in r.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-10);
        }
    }

    #[test]
    fn prediction_scale_invariance() {
        let r = LinearRule::new(vec![0.3, -1.2, 0.7]).unwrap();
        for c in [0.01, 1.0, 37.0] {
            let s = LinearRule::new(r.eta().iter().map(|v| v * c).collect()).unwrap();
            for x in [[0.0, 0.0], [1.0, 0.5], [-2.0, 3.0]] {
                assert_eq!(r.decide(&x), s.decide(&x));
            }
        }
    }
}
