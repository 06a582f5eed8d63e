use proptest::prelude::*;

use transfer_itr::data::Matrix;
use transfer_itr::evaluation::value_mse;
use transfer_itr::nuisance::{fit_q_weighted, ContrastEstimates, ContrastEstimator};
use transfer_itr::policy::{
    dc_fit, empirical_risk, ramp_component, ramp_loss, Piece, RampLossParams, RiskLoss,
};
use transfer_itr::selection::{
    cross_validate, split_halves, CandidateMethod, MethodCatalog, SplitEvaluator,
};
use transfer_itr::weights::{effective_sample_size, solve_entropy_balance, BalanceConstraints};
use transfer_itr::{
    ExperimentalSample, LinearRule, Result, SamplingAlpha, Setting, SimulationConfig, TargetSample,
    TransferWeights, WeightMethod, WeightNormalization,
};

fn rows(flat: &[f64], p: usize) -> Vec<Vec<f64>> {
    flat.chunks(p).map(<[f64]>::to_vec).collect()
}

fn exp_from(x: &[Vec<f64>], y: Vec<f64>) -> ExperimentalSample {
    let a = (0..x.len()).map(|i| (i % 2) as u8).collect();
    ExperimentalSample::new(Matrix::from_rows(x).unwrap(), a, y).unwrap()
}

proptest! {
    #[test]
    fn ramp_is_difference_of_pieces(u in -50.0..50.0f64, z1 in 0.01..100.0f64, z2 in 0.01..10.0f64) {
        let p = RampLossParams::new(z1, z2).unwrap();
        let v = z1 * u;
        let pieces = (ramp_component(v, Piece::One) - ramp_component(v, Piece::Zero)) / z2;
        prop_assert!((ramp_loss(u, p) - pieces).abs() <= 1e-12 * (1.0 + pieces.abs()));
        prop_assert!(ramp_loss(u, p) >= 0.0 && ramp_loss(u, p) <= 2.0 / z2 + 1e-15);
    }

    #[test]
    fn decisions_ignore_positive_scale(
        eta in prop::collection::vec(-5.0..5.0f64, 3),
        x in prop::collection::vec(-5.0..5.0f64, 2),
        c in 1e-3..1e3f64,
    ) {
        let a = LinearRule::new(eta.clone()).unwrap();
        let b = LinearRule::new(eta.iter().map(|v| c * v).collect()).unwrap();
        prop_assert_eq!(a.decide(&x), b.decide(&x));
        prop_assert_eq!(a.decide(&x), a.canonical().decide(&x));
    }

    #[test]
    fn ess_within_one_and_n(raw in prop::collection::vec(1e-6..10.0f64, 1..40)) {
        let w = TransferWeights::normalized(&raw, WeightMethod::Nonparametric).unwrap();
        let ess = effective_sample_size(&w);
        prop_assert!(ess >= 1.0 - 1e-12 && ess <= raw.len() as f64 + 1e-9);
    }

    #[test]
    fn outcome_regression_ignores_weight_scale(
        flat in prop::collection::vec(-3.0..3.0f64, 24),
        y in prop::collection::vec(-3.0..3.0f64, 12),
        raw in prop::collection::vec(0.1..5.0f64, 12),
        c in 0.01..100.0f64,
    ) {
        let exp = exp_from(&rows(&flat, 2), y);
        let scaled: Vec<f64> = raw.iter().map(|v| c * v).collect();
        let a = TransferWeights::new(raw, WeightNormalization::InverseScore, WeightMethod::True).unwrap();
        let b = TransferWeights::new(scaled, WeightNormalization::InverseScore, WeightMethod::True).unwrap();
        let (ba, bb) = (fit_q_weighted(&exp, &a).unwrap(), fit_q_weighted(&exp, &b).unwrap());
        for (u, v) in ba.iter().zip(&bb) {
            prop_assert!((u - v).abs() <= 1e-7 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn split_halves_partition(size in 2usize..500, seed in any::<u64>()) {
        let (train, test) = split_halves(size, seed).unwrap();
        prop_assert_eq!(train.len(), size.div_ceil(2));
        prop_assert_eq!(test.len(), size / 2);
        prop_assert!(train.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(test.windows(2).all(|p| p[0] < p[1]));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..size).collect::<Vec<_>>());
        prop_assert_eq!(split_halves(size, seed).unwrap(), (train, test));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dc_objective_never_rises(
        flat in prop::collection::vec(-3.0..3.0f64, 30),
        tau in prop::collection::vec(-3.0..3.0f64, 15),
        raw in prop::collection::vec(0.1..3.0f64, 15),
        init in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let exp = exp_from(&rows(&flat, 2), vec![0.0; 15]);
        let w = TransferWeights::normalized(&raw, WeightMethod::Nonparametric).unwrap();
        let tau = ContrastEstimates::new(tau, ContrastEstimator::Aipw, true).unwrap();
        let init = LinearRule::new(init).unwrap();
        let params = RampLossParams::default();
        let report = dc_fit(&exp, &w, &tau, params, &init).unwrap();
        let mut trace = vec![empirical_risk(&init, &exp, &w, &tau, RiskLoss::Ramp(params)).unwrap()];
        trace.extend(&report.objective_trace);
        for p in trace.windows(2) {
            prop_assert!(p[1] <= p[0] + 1e-10, "{:?}", trace);
        }
    }

    #[test]
    fn entropy_falls_as_bands_widen(
        flat in prop::collection::vec(-2.0..2.0f64, 40),
        target in prop::collection::vec(-1.0..1.0f64, 20),
        band in 0.01..0.5f64,
    ) {
        let exp = exp_from(&rows(&flat, 2), vec![0.0; 20]);
        let rwd = TargetSample::new(Matrix::from_rows(&rows(&target, 2)).unwrap()).unwrap();
        let features = BalanceConstraints::default_features(&exp, &rwd);
        let mut last = f64::INFINITY;
        for level in [0.0, 1.0, 2.0, 4.0] {
            let c = BalanceConstraints::new(features.clone(), vec![band * level; features.len()]).unwrap();
            if let Ok(fit) = solve_entropy_balance(&exp, &rwd, &c) {
                prop_assert!(fit.entropy <= last + 1e-9);
                last = fit.entropy;
            }
        }
    }

    #[test]
    fn value_mse_is_nonnegative(eta in prop::collection::vec(-2.0..2.0f64, 3), seed in 0u64..1000) {
        // a mild sampling design so a 2000-row population yields a usable trial
        let mut cfg = SimulationConfig::new(Setting::II, 2000, 50, seed);
        cfg.sampling_alpha = SamplingAlpha { intercept: -2.0, slopes: vec![0.5, -1.0] };
        let draw = transfer_itr::data::simulate_population(&cfg).unwrap();
        let mse = value_mse(&LinearRule::new(eta).unwrap(), &draw).unwrap();
        prop_assert!(mse.is_finite() && mse >= 0.0);
    }
}

struct Stub(usize);

impl CandidateMethod for Stub {
    fn name(&self) -> &str {
        ["a", "b", "c", "d"][self.0]
    }

    fn train(
        &self,
        exp: &ExperimentalSample,
        _: &TargetSample,
        _: Option<f64>,
        _: u64,
    ) -> Result<LinearRule> {
        let mut eta = vec![0.0; exp.p() + 1];
        eta[0] = self.0 as f64 + 1.0;
        LinearRule::new(eta)
    }
}

/// Per-split values for each stub, plus a common shift.
struct Table {
    values: Vec<Vec<f64>>,
    shift: f64,
}

impl SplitEvaluator for Table {
    fn evaluate(
        &self,
        split: usize,
        _: &ExperimentalSample,
        _: &TargetSample,
        rules: &[Option<LinearRule>],
    ) -> Result<Vec<Option<f64>>> {
        Ok(rules
            .iter()
            .map(|r| {
                r.as_ref()
                    .map(|r| self.values[split][r.eta()[0] as usize - 1] + self.shift)
            })
            .collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn selection_ignores_constant_shift(
        values in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 3),
        shift in -100.0..100.0f64,
        seed in any::<u64>(),
    ) {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 * 0.1, (i % 3) as f64]).collect();
        let exp = exp_from(&x, vec![0.0; 12]);
        let rwd = TargetSample::new(Matrix::from_rows(&x).unwrap()).unwrap();
        let catalog = || MethodCatalog::new((0..4).map(|g| Box::new(Stub(g)) as Box<dyn CandidateMethod>).collect(), None).unwrap();
        let base = cross_validate(&exp, &rwd, &catalog(), 3, seed, &Table { values: values.clone(), shift: 0.0 }).unwrap();
        let moved = cross_validate(&exp, &rwd, &catalog(), 3, seed, &Table { values, shift }).unwrap();
        prop_assert_eq!(base.winner_index, moved.winner_index);
    }
}
