use proptest::prelude::*;
use r2dn_core::lti_param::LmiSpec;
use r2dn_core::verify::{check_dissipation, estimate_contraction, estimate_gain};
use r2dn_core::{
    r2dn, ExplicitLti, ExplicitR2dn, LipschitzNet, LmiKind, LtiDims, Matrix, PhiConfig, R2dnConfig, StateSpaceModel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn linear_model(a: Matrix<f64>, m: usize) -> ExplicitR2dn<f64> {
    let n = a.rows();
    let mut lti = ExplicitLti::zeros(LtiDims::new(n, m, 1, 2, 2));
    lti.a = a;
    let phi = LipschitzNet::random(
        &PhiConfig {
            depth: 1,
            width: 3,
            ..PhiConfig::default()
        },
        2,
        2,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    ExplicitR2dn::new(lti, phi).unwrap()
}

/// Memoryless `y = k·u`.
struct StaticGain {
    k: f64,
    lti: ExplicitLti<f64>,
}

impl StaticGain {
    fn new(k: f64) -> Self {
        Self {
            k,
            lti: ExplicitLti::zeros(LtiDims::new(1, 2, 2, 1, 1)),
        }
    }
}

impl StateSpaceModel<f64> for StaticGain {
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn step_unchecked(&self, x: &Matrix<f64>, u: &Matrix<f64>) -> (Matrix<f64>, Matrix<f64>) {
        (x.scale(0.0), u.scale(self.k))
    }
    fn lti(&self) -> &ExplicitLti<f64> {
        &self.lti
    }
}

#[test]
fn contraction_rate_of_half_identity() {
    let model = linear_model(Matrix::identity(3).scale(0.5), 1);
    let rep = estimate_contraction(&model, 10, 40, 1).unwrap();
    assert!((rep.alpha_hat - 0.5).abs() <= 0.01, "{}", rep.alpha_hat);
    assert!((rep.k_hat - 1.0).abs() <= 0.05, "{}", rep.k_hat);
    assert!(rep.pass && !rep.degenerate);
}

#[test]
fn deadbeat_model_is_vacuously_contracting() {
    let model = linear_model(Matrix::zeros(2, 2), 1);
    let rep = estimate_contraction(&model, 5, 20, 3).unwrap();
    assert!(rep.degenerate && rep.pass);
}

#[test]
fn expanding_model_fails_contraction() {
    let model = linear_model(Matrix::identity(2).scale(1.05), 1);
    let rep = estimate_contraction(&model, 5, 50, 3).unwrap();
    assert!(!rep.pass);
    assert!(rep.alpha_hat > 1.0);
}

#[test]
fn static_gain_estimates() {
    let rep = estimate_gain(&StaticGain::new(2.0), 100, 8, 10, 4).unwrap();
    assert!((rep.gamma_hat - 2.0).abs() <= 1e-9, "{}", rep.gamma_hat);
    let rep = estimate_gain(&StaticGain::new(0.0), 100, 8, 10, 4).unwrap();
    assert_eq!(rep.gamma_hat, 0.0);
}

#[test]
fn gain_ascent_does_not_lower_the_estimate() {
    let cfg = R2dnConfig::new(2, 1, 1, 4, 4, LmiKind::Lipschitz { gamma: 2.0 }).with_phi(2, 6);
    let model = r2dn::realize(&cfg.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(9)), &cfg).unwrap();
    let plain = estimate_gain(&model, 200, 16, 0, 2).unwrap();
    let refined = estimate_gain(&model, 200, 16, 30, 2).unwrap();
    assert!(refined.gamma_hat >= plain.gamma_hat);
    assert!(refined.gamma_hat <= 2.0);
}

/// Initialization plus Gaussian noise, which moves `A` well away from zero.
fn perturbed_model(cfg: &R2dnConfig, seed: u64) -> ExplicitR2dn<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = cfg.init_params::<f64, _>(&mut rng);
    for v in p.as_mut_slice() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.5 * z;
    }
    r2dn::realize(&p, cfg).unwrap()
}

#[test]
fn dissipation_with_zero_b1() {
    let cfg = R2dnConfig::new(3, 1, 1, 4, 4, LmiKind::Contraction).with_phi(2, 6);
    let mut model = perturbed_model(&cfg, 5);
    model.lti.b1 = Matrix::zeros(3, 4);
    let rep = check_dissipation(&model, &LmiSpec::contraction(4, 4), 20, 20, 1).unwrap();
    assert!(rep.max_violation <= 1e-10, "{}", rep.max_violation);
}

#[test]
fn identical_pairs_have_zero_increments() {
    let cfg = R2dnConfig::new(2, 1, 1, 4, 4, LmiKind::Contraction).with_phi(2, 6);
    let model = perturbed_model(&cfg, 6);
    let x = Matrix::from_f64_rows(&[&[0.3, -1.0], &[0.3, -1.0]]);
    let u = Matrix::from_f64_rows(&[&[2.0], &[2.0]]);
    let s = model.step_with_signals(&x, &u).unwrap();
    for m in [&s.v, &s.w, &s.x_next, &s.y] {
        assert_eq!(m.row(0), m.row(1));
    }
}

#[test]
fn corrupted_certificates_violate() {
    for (seed, mode) in [(1, LmiKind::Contraction), (2, LmiKind::Lipschitz { gamma: 2.0 })] {
        let cfg = R2dnConfig::new(3, 1, 1, 4, 4, mode).with_phi(2, 6);
        let mut model = perturbed_model(&cfg, seed);
        let spec = cfg.lmi_spec().unwrap();
        assert!(check_dissipation(&model, &spec, 20, 20, 1).unwrap().max_violation <= 1e-8);
        model.lti.a = model.lti.a.scale(10.0);
        assert!(check_dissipation(&model, &spec, 20, 20, 1).unwrap().max_violation > 0.0);
    }
}

#[test]
fn contraction_rate_is_input_independent_for_linear_models() {
    let a = Matrix::from_f64_rows(&[&[0.6, 0.2], &[0.0, 0.5]]);
    let mut model = linear_model(a, 1);
    model.lti.b2 = Matrix::from_f64_rows(&[&[1.0], &[-2.0]]);
    let rates: Vec<f64> = (0..10)
        .map(|s| estimate_contraction(&model, 5, 60, 100 + s).unwrap().alpha_hat)
        .collect();
    let spread = rates.iter().cloned().fold(f64::MIN, f64::max) - rates.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 0.02, "{rates:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn realized_models_dissipate(seed in any::<u64>(), gi in 0usize..4) {
        let mode = [LmiKind::Contraction, LmiKind::Lipschitz { gamma: 0.5 }, LmiKind::Lipschitz { gamma: 2.0 }, LmiKind::Lipschitz { gamma: 10.0 }][gi];
        let cfg = R2dnConfig::new(3, 2, 2, 4, 3, mode).with_phi(2, 6);
        let model = r2dn::realize(&cfg.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(seed)), &cfg).unwrap();
        let spec = cfg.lmi_spec().unwrap();
        let rep = check_dissipation(&model, &spec, 10, 10, seed).unwrap();
        prop_assert!(rep.max_violation <= 1e-8, "{}", rep.max_violation);
    }

    #[test]
    fn contracting_models_contract(seed in any::<u64>()) {
        let cfg = R2dnConfig::new(2, 1, 1, 4, 4, LmiKind::Contraction).with_phi(2, 6);
        let model = r2dn::realize(&cfg.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(seed)), &cfg).unwrap();
        let rep = estimate_contraction(&model, 3, 300, seed).unwrap();
        prop_assert!(rep.pass, "{rep:?}");
    }
}
