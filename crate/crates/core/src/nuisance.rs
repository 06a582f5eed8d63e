//! Weighted nuisance models and per-row treatment contrasts.
//!
//! The outcome regression is linear in the basis `L = (1, x, a, a*x)` and is
//! fitted by weighted least squares through a column-pivoted QR factorization.
//! The propensity is either a weighted treated fraction or a weighted
//! logistic regression.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::data::{ExperimentalSample, TransferWeights, WeightMethod};
use crate::error::{Error, Result};
use crate::{dot, logistic};

/// Propensity estimates are clipped into `[PROPENSITY_CLIP, 1 - PROPENSITY_CLIP]`.
pub const PROPENSITY_CLIP: f64 = 1e-6;

/// Basis `(1, x, a, a*x)` of the outcome regression.
pub fn q_basis(x: &[f64], a: f64) -> Vec<f64> {
    let mut l = Vec::with_capacity(2 * (x.len() + 1));
    l.push(1.0);
    l.extend_from_slice(x);
    l.push(a);
    l.extend(x.iter().map(|v| a * v));
    l
}

fn basis_names(names: &[String]) -> Vec<String> {
    let mut out = vec!["intercept".to_string()];
    out.extend(names.iter().cloned());
    out.push("A".into());
    out.extend(names.iter().map(|n| format!("A*{n}")));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityMode {
    #[default]
    Constant,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propensity {
    Constant(f64),
    /// Coefficients on `(1, x)`.
    Logistic(Vec<f64>),
}

impl Propensity {
    /// Clipped propensity at `x`.
    pub fn at(&self, x: &[f64]) -> f64 {
        let raw = match self {
            Propensity::Constant(p) => *p,
            Propensity::Logistic(g) => logistic(g[0] + dot(&g[1..], x)),
        };
        raw.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)
    }

    fn raw(&self, x: &[f64]) -> f64 {
        match self {
            Propensity::Constant(p) => *p,
            Propensity::Logistic(g) => logistic(g[0] + dot(&g[1..], x)),
        }
    }
}

/// Fitted outcome regression and propensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    /// Coefficients over `(1, x, a, a*x)`.
    pub beta: Vec<f64>,
    pub propensity: Propensity,
    /// Method tag of the weights the nuisances were fitted with.
    pub weights: WeightMethod,
    /// Rows whose propensity had to be clipped.
    pub clipped: usize,
}

impl NuisanceFit {
    #[inline]
    pub fn q(&self, x: &[f64], a: f64) -> f64 {
        let p = x.len();
        let b = &self.beta;
        b[0] + dot(&b[1..=p], x) + a * (b[p + 1] + dot(&b[p + 2..], x))
    }

    pub fn propensity_at(&self, x: &[f64]) -> f64 {
        self.propensity.at(x)
    }

    pub(crate) fn check(&self, p: usize) -> Result<()> {
        if self.beta.len() != 2 * (p + 1) {
            return Err(Error::DimensionMismatch {
                expected: 2 * (p + 1),
                got: self.beta.len(),
            });
        }
        if let Propensity::Logistic(g) = &self.propensity {
            if g.len() != p + 1 {
                return Err(Error::DimensionMismatch {
                    expected: p + 1,
                    got: g.len(),
                });
            }
        }
        Ok(())
    }
}

/// Least-squares solution of `a x ≈ b` by column-pivoted QR, reporting
/// numerically dependent columns by index.
pub(crate) fn pivoted_least_squares(
    a: DMatrix<f64>,
    b: DVector<f64>,
) -> std::result::Result<DVector<f64>, Vec<usize>> {
    let k = a.ncols();
    let qr = a.col_piv_qr();
    let r = qr.r();
    let q = qr.q();
    let mut order = RowDVector::from_iterator(k, (0..k).map(|j| j as f64));
    qr.p().permute_columns(&mut order);
    let order: Vec<usize> = order.iter().map(|v| *v as usize).collect();

    let r00 = r[(0, 0)].abs();
    let dependent: Vec<usize> = (0..k)
        .filter(|&j| r00 == 0.0 || r[(j, j)].abs() <= 1e-10 * r00)
        .map(|j| order[j])
        .collect();
    if !dependent.is_empty() {
        return Err(dependent);
    }
    let qtb = q.transpose() * b;
    let r_sq = r.view((0, 0), (k, k)).into_owned();
    let y = r_sq
        .solve_upper_triangular(&qtb.rows(0, k).into_owned())
        .ok_or_else(|| (0..k).collect::<Vec<_>>())?;
    let mut x = DVector::zeros(k);
    for (j, &orig) in order.iter().enumerate() {
        x[orig] = y[j];
    }
    Ok(x)
}

/// Weighted least squares `argmin sum w_i (Y_i - beta' L_i)^2`.
pub fn fit_q_weighted(exp: &ExperimentalSample, w: &TransferWeights) -> Result<Vec<f64>> {
    w.check_len(exp.n())?;
    let n = exp.n();
    let k = 2 * (exp.p() + 1);
    if n < k {
        return Err(Error::RankDeficient {
            columns: basis_names(exp.names()),
        });
    }
    let mut a = DMatrix::<f64>::zeros(n, k);
    let mut b = DVector::<f64>::zeros(n);
    for i in 0..n {
        let sw = w.as_slice()[i].sqrt();
        for (j, v) in q_basis(exp.x(i), exp.a(i)).into_iter().enumerate() {
            a[(i, j)] = sw * v;
        }
        b[i] = sw * exp.outcome()[i];
    }
    let names = basis_names(exp.names());
    pivoted_least_squares(a, b)
        .map(|x| x.as_slice().to_vec())
        .map_err(|cols| Error::RankDeficient {
            columns: cols.into_iter().map(|j| names[j].clone()).collect(),
        })
}

const LOGISTIC_MAX_ITER: usize = 100;
const LOGISTIC_TOL: f64 = 1e-8;

/// Weighted propensity: treated fraction `sum w A / sum w`, or weighted
/// logistic maximum likelihood on `(1, x)`.
pub fn fit_propensity(
    exp: &ExperimentalSample,
    w: &TransferWeights,
    mode: PropensityMode,
) -> Result<Propensity> {
    w.check_len(exp.n())?;
    let total: f64 = w.as_slice().iter().sum();
    match mode {
        PropensityMode::Constant => {
            let treated: f64 = w
                .as_slice()
                .iter()
                .zip(exp.treatment())
                .map(|(wi, &a)| wi * f64::from(a))
                .sum();
            Ok(Propensity::Constant(treated / total))
        }
        PropensityMode::Logistic => fit_logistic_propensity(exp, w, total),
    }
}

fn fit_logistic_propensity(
    exp: &ExperimentalSample,
    w: &TransferWeights,
    total: f64,
) -> Result<Propensity> {
    let k = exp.p() + 1;
    let z: Vec<Vec<f64>> = exp
        .covariates()
        .rows()
        .map(|x| std::iter::once(1.0).chain(x.iter().copied()).collect())
        .collect();
    let wt: Vec<f64> = w.as_slice().iter().map(|v| v / total).collect();
    let loglik = |g: &[f64]| -> f64 {
        z.iter()
            .zip(&wt)
            .zip(exp.treatment())
            .map(|((zi, wi), &a)| {
                let t = dot(g, zi);
                wi * (f64::from(a) * t - crate::log1pexp(t))
            })
            .sum()
    };
    let mut gamma = vec![0.0; k];
    let treated: f64 = wt
        .iter()
        .zip(exp.treatment())
        .map(|(v, &a)| v * f64::from(a))
        .sum();
    gamma[0] = (treated / (1.0 - treated)).ln();
    let mut ll = loglik(&gamma);
    for _ in 0..LOGISTIC_MAX_ITER {
        let mut grad = DVector::<f64>::zeros(k);
        let mut info = DMatrix::<f64>::zeros(k, k);
        for ((zi, wi), &a) in z.iter().zip(&wt).zip(exp.treatment()) {
            let p = logistic(dot(&gamma, zi));
            for r in 0..k {
                grad[r] += wi * (f64::from(a) - p) * zi[r];
                for c in 0..k {
                    info[(r, c)] += wi * p * (1.0 - p) * zi[r] * zi[c];
                }
            }
        }
        if grad.norm() <= LOGISTIC_TOL {
            return Ok(Propensity::Logistic(gamma));
        }
        let step = info
            .clone()
            .cholesky()
            .map(|c| c.solve(&grad))
            .or_else(|| info.lu().solve(&grad))
            .ok_or_else(|| Error::Separation {
                what: "logistic propensity",
                detail: "information matrix is singular".into(),
            })?;
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = gamma
                .iter()
                .zip(step.iter())
                .map(|(g, s)| g + t * s)
                .collect();
            let v = loglik(&trial);
            if v.is_finite() && v >= ll + 1e-4 * t * slope {
                gamma = trial;
                ll = v;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            if grad.norm() <= 1e3 * LOGISTIC_TOL {
                return Ok(Propensity::Logistic(gamma));
            }
            break;
        }
        if gamma.iter().any(|g| g.abs() > 50.0) {
            return Err(Error::Separation {
                what: "logistic propensity",
                detail: "treatment is (quasi-)separated by the covariates; use the constant mode"
                    .into(),
            });
        }
    }
    Err(Error::NoConvergence {
        what: "logistic propensity",
        iterations: LOGISTIC_MAX_ITER,
        norm: f64::NAN,
    })
}

/// Outcome regression and propensity fitted with the same weights.
pub fn fit_nuisance(
    exp: &ExperimentalSample,
    w: &TransferWeights,
    mode: PropensityMode,
) -> Result<NuisanceFit> {
    let beta = fit_q_weighted(exp, w)?;
    let propensity = fit_propensity(exp, w, mode)?;
    let clipped = exp
        .covariates()
        .rows()
        .filter(|x| {
            let p = propensity.raw(x);
            !(PROPENSITY_CLIP..=1.0 - PROPENSITY_CLIP).contains(&p)
        })
        .count();
    if clipped > 0 {
        log::warn!("{clipped} propensity estimates clipped");
    }
    Ok(NuisanceFit {
        beta,
        propensity,
        weights: w.method(),
        clipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastEstimator {
    Aipw,
    Regression,
    Ipw,
}

/// Per-row estimates of `tau(X_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastEstimates {
    pub tau: Vec<f64>,
    pub estimator: ContrastEstimator,
    pub weighted: bool,
}

impl ContrastEstimates {
    pub fn new(tau: Vec<f64>, estimator: ContrastEstimator, weighted: bool) -> Result<Self> {
        if !tau.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidConfig(
                "contrast estimates must be finite".into(),
            ));
        }
        Ok(Self {
            tau,
            estimator,
            weighted,
        })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// Per-row contrast by the chosen estimator.
pub fn contrast(
    exp: &ExperimentalSample,
    fit: &NuisanceFit,
    estimator: ContrastEstimator,
) -> Result<ContrastEstimates> {
    fit.check(exp.p())?;
    let tau = (0..exp.n())
        .map(|i| {
            let x = exp.x(i);
            let (a, y) = (exp.a(i), exp.outcome()[i]);
            let pi = fit.propensity_at(x);
            let (q1, q0) = (fit.q(x, 1.0), fit.q(x, 0.0));
            match estimator {
                ContrastEstimator::Aipw => {
                    (a * (y - q1) / pi + q1) - ((1.0 - a) * (y - q0) / (1.0 - pi) + q0)
                }
                ContrastEstimator::Regression => q1 - q0,
                ContrastEstimator::Ipw => a * y / pi - (1.0 - a) * y / (1.0 - pi),
            }
        })
        .collect();
    ContrastEstimates::new(tau, estimator, fit.weights != WeightMethod::Uniform)
}

/// Augmented inverse-probability-weighted contrast
/// `[A(Y - Q1)/pi + Q1] - [(1 - A)(Y - Q0)/(1 - pi) + Q0]`.
pub fn contrast_aipw(exp: &ExperimentalSample, fit: &NuisanceFit) -> Result<ContrastEstimates> {
    contrast(exp, fit, ContrastEstimator::Aipw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Matrix, WeightNormalization};

    fn sample(x: &[f64], a: &[u8], y: &[f64]) -> ExperimentalSample {
        let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
        ExperimentalSample::new(Matrix::from_rows(&rows).unwrap(), a.to_vec(), y.to_vec()).unwrap()
    }

    fn weights(w: &[f64]) -> TransferWeights {
        TransferWeights::normalized(w, WeightMethod::Nonparametric).unwrap()
    }

    #[test]
    fn exact_linear_recovery() {
        let beta = [1.0, -2.0, 0.5, 3.0];
        let x = [0.1, 0.7, -1.2, 2.0, 0.3, -0.4, 1.1];
        let a = [0, 1, 0, 1, 1, 0, 1];
        let y: Vec<f64> = x
            .iter()
            .zip(&a)
            .map(|(&xi, &ai)| dot(&beta, &q_basis(&[xi], f64::from(ai))))
            .collect();
        let exp = sample(&x, &a, &y);
        let w = weights(&[0.3, 0.1, 0.05, 0.2, 0.15, 0.1, 0.1]);
        let b = fit_q_weighted(&exp, &w).unwrap();
        for (u, v) in b.iter().zip(&beta) {
            assert!((u - v).abs() < 1e-10, "{b:?}");
        }
    }

    #[test]
    fn weighted_normal_equations_by_hand() {
        // y on (1, x) with w = (0.5, 0.25, 0.25), x = (0, 1, 2), y = (1, 2, 4):
        //   sum w = 1, sum wx = 0.25 + 0.5 = 0.75, sum wx^2 = 0.25 + 1 = 1.25
        //   sum wy = 0.5 + 0.5 + 1 = 2, sum wxy = 0.5 + 2 = 2.5
        //   b1 = (2.5 - 0.75*2) / (1.25 - 0.75^2) = 1 / 0.6875
        //   b0 = 2 - 0.75 b1
        let a = DMatrix::from_row_slice(
            3,
            2,
            &[
                0.5f64.sqrt(),
                0.0,
                0.25f64.sqrt(),
                0.25f64.sqrt(),
                0.25f64.sqrt(),
                2.0 * 0.25f64.sqrt(),
            ],
        );
        let b = DVector::from_vec(vec![0.5f64.sqrt(), 2.0 * 0.5, 4.0 * 0.5]);
        let x = pivoted_least_squares(a, b).unwrap();
        let b1 = 1.0 / 0.6875;
        let b0 = 2.0 - 0.75 * b1;
        assert!((x[0] - b0).abs() < 1e-12, "{x}");
        assert!((x[1] - b1).abs() < 1e-12, "{x}");
    }

    #[test]
    fn collinear_columns_reported() {
        // x constant within the sample: x collinear with the intercept
        let exp = sample(
            &[2.0, 2.0, 2.0, 2.0, 2.0],
            &[0, 1, 0, 1, 1],
            &[1.0, 2.0, 3.0, 4.0, 5.0],
        );
        match fit_q_weighted(&exp, &TransferWeights::uniform(5)) {
            Err(Error::RankDeficient { columns }) => assert!(!columns.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weight_scaling_equivariance() {
        let x = [0.1, 0.7, -1.2, 2.0, 0.3, -0.4, 1.1, 0.9];
        let a = [0, 1, 0, 1, 1, 0, 1, 0];
        let y = [1.0, 0.2, -0.3, 2.2, 1.7, 0.4, -1.0, 0.5];
        let exp = sample(&x, &a, &y);
        let raw = [1.0, 2.0, 0.5, 0.3, 1.2, 0.7, 2.2, 1.0];
        let w1 = TransferWeights::new(
            raw.to_vec(),
            WeightNormalization::InverseScore,
            WeightMethod::Mle,
        )
        .unwrap();
        let w2 = TransferWeights::new(
            raw.iter().map(|v| 7.5 * v).collect(),
            WeightNormalization::InverseScore,
            WeightMethod::Mle,
        )
        .unwrap();
        let b1 = fit_q_weighted(&exp, &w1).unwrap();
        let b2 = fit_q_weighted(&exp, &w2).unwrap();
        for (u, v) in b1.iter().zip(&b2) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_propensity() {
        let n = 100;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let a: Vec<u8> = (0..n).map(|i| u8::from(i < 40)).collect();
        let exp = sample(&x, &a, &vec![0.0; n]);
        match fit_propensity(&exp, &TransferWeights::uniform(n), PropensityMode::Constant).unwrap()
        {
            Propensity::Constant(p) => assert!((p - 0.4).abs() < 1e-12),
            _ => unreachable!(),
        }
        let exp = sample(&[0.0, 1.0], &[1, 0], &[0.0, 0.0]);
        match fit_propensity(&exp, &weights(&[0.8, 0.2]), PropensityMode::Constant).unwrap() {
            Propensity::Constant(p) => assert!((p - 0.8).abs() < 1e-12),
            _ => unreachable!(),
        }
    }

    #[test]
    fn logistic_propensity_gradient_vanishes() {
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let a: Vec<u8> = x
            .iter()
            .enumerate()
            .map(|(i, v)| u8::from((v + (i as f64 * 1.7).cos()) > 0.0))
            .collect();
        let exp = sample(&x, &a, &vec![0.0; 60]);
        let w = TransferWeights::uniform(60);
        let g = match fit_propensity(&exp, &w, PropensityMode::Logistic).unwrap() {
            Propensity::Logistic(g) => g,
            _ => unreachable!(),
        };
        let mut grad = [0.0; 2];
        for i in 0..60 {
            let p = logistic(g[0] + g[1] * x[i]);
            grad[0] += (f64::from(a[i]) - p) / 60.0;
            grad[1] += (f64::from(a[i]) - p) * x[i] / 60.0;
        }
        assert!(grad[0].hypot(grad[1]) <= 1e-8);
    }

    #[test]
    fn logistic_separation_detected() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let a: Vec<u8> = (0..20).map(|i| u8::from(i >= 10)).collect();
        let exp = sample(&x, &a, &[0.0; 20]);
        let r = fit_propensity(
            &exp,
            &TransferWeights::uniform(20),
            PropensityMode::Logistic,
        );
        assert!(
            matches!(
                r,
                Err(Error::Separation { .. }) | Err(Error::NoConvergence { .. })
            ),
            "{r:?}"
        );
    }

    fn fit_with(beta: Vec<f64>, pi: f64) -> NuisanceFit {
        NuisanceFit {
            beta,
            propensity: Propensity::Constant(pi),
            weights: WeightMethod::Uniform,
            clipped: 0,
        }
    }

    #[test]
    fn aipw_hand_examples() {
        // single-row style evaluation: A=1, Y=3, Q(.,1)=1, Q(.,0)=2, pi=0.5
        let exp = sample(&[0.0, 0.0], &[1, 0], &[3.0, 3.0]);
        let fit = fit_with(vec![2.0, 0.0, -1.0, 0.0], 0.5);
        let tau = contrast_aipw(&exp, &fit).unwrap().tau;
        assert!((tau[0] - 3.0).abs() < 1e-15);

        let exp = sample(&[0.3, -1.0, 2.0], &[1, 0, 1], &[1.5, -2.0, 0.7]);
        let fit = fit_with(vec![0.0; 4], 0.5);
        let tau = contrast_aipw(&exp, &fit).unwrap().tau;
        for i in 0..3 {
            let (a, y) = (exp.a(i), exp.outcome()[i]);
            assert!((tau[i] - (2.0 * a * y - 2.0 * (1.0 - a) * y)).abs() < 1e-15);
        }
    }

    #[test]
    fn aipw_reduces_to_regression_when_residuals_vanish() {
        let beta = vec![0.5, 1.0, -1.0, 2.0];
        let fit = fit_with(beta.clone(), 0.3);
        let x = [0.2, -0.7, 1.4];
        let a = [1u8, 0, 1];
        let y: Vec<f64> = x
            .iter()
            .zip(&a)
            .map(|(&v, &ai)| fit.q(&[v], f64::from(ai)))
            .collect();
        let exp = sample(&x, &a, &y);
        let tau = contrast_aipw(&exp, &fit).unwrap().tau;
        for i in 0..3 {
            let expect = fit.q(&[x[i]], 1.0) - fit.q(&[x[i]], 0.0);
            assert!((tau[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn propensity_clip_bounds() {
        let p = Propensity::Constant(0.0);
        assert_eq!(p.at(&[]), PROPENSITY_CLIP);
        let p = Propensity::Logistic(vec![100.0, 0.0]);
        assert_eq!(p.at(&[1.0]), 1.0 - PROPENSITY_CLIP);
    }
}
