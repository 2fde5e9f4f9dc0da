use std::sync::OnceLock;

use kcf::dynamics::{
    builtin, run_experiments, to_augmented, ExperimentPlan, InputMode, BUILTIN_SYSTEMS,
};
use kcf::edmd::{consistency_index, dictionary_matrices, fit_edmd, relative_prediction_error};
use kcf::learning::{LossMode, TrainConfig, DEFAULT_RIDGE};
use kcf::model::{extract_pseudoinverse, fit_bilinear_baseline, LiftedPredictor, SeparableModel};
use kcf::observables::descriptor::DictionaryDescriptor;
use kcf::observables::network::FamilyKind;
use kcf::observables::parametric::{ParametricDictionary, ParametricSpec};
use kcf::observables::{control_independent_extension, Monomials};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Example 1 model and the full EDMD matrix it came from.
fn example_model() -> &'static (SeparableModel, DMatrix<f64>) {
    static MODEL: OnceLock<(SeparableModel, DMatrix<f64>)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let plan = ExperimentPlan {
            num_experiments: 100,
            steps_per_experiment: 5,
            seed: 1,
            input_mode: InputMode::PiecewiseConstant { hold_steps: 1 },
        };
        let aug = to_augmented(&run_experiments(&builtin("example_poly").unwrap(), &plan).unwrap())
            .unwrap();
        let desc = DictionaryDescriptor::example_poly();
        let (a, b) = dictionary_matrices(&desc.build().unwrap(), &aug).unwrap();
        let k = fit_edmd(&a, &b).unwrap().k;
        (SeparableModel::identify(&desc, &aug).unwrap().0, k)
    })
}

fn small_spec() -> ParametricSpec {
    ParametricSpec {
        n: 2,
        m: 1,
        l: 4,
        s: 9,
        h_family: FamilyKind::residual_mlp(1, 8),
        g_family: FamilyKind::residual_mlp(1, 8),
        fixed_head: vec![0, 1],
        x_scale: vec![0.5, 0.5],
        u_scale: vec![0.5],
    }
}

/// A non-invariant pair `(A, B)` with full row rank.
fn random_pair(seed: u64, s: usize, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(s, n, &mut rng);
    let mix = rng.gen_range(0.0..1.0);
    let b = &a * (1.0 - mix) + random(s, n, &mut rng) * mix;
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_snapshots_replay(
        seed in any::<u64>(),
        experiments in 1usize..20,
        steps in 1usize..6,
        hold in 1usize..4,
        which in 0usize..3,
    ) {
        let sys = builtin(BUILTIN_SYSTEMS[which]).unwrap();
        let plan = ExperimentPlan {
            num_experiments: experiments,
            steps_per_experiment: steps,
            seed,
            input_mode: InputMode::PiecewiseConstant { hold_steps: hold },
        };
        let ss = run_experiments(&sys, &plan).unwrap();
        prop_assert!(ss.replays_on(&sys));
        prop_assert_eq!(&ss, &run_experiments(&sys, &plan).unwrap());
    }

    #[test]
    fn augmented_iterates_match_constant_input_simulation(
        x0 in proptest::collection::vec(-1.0f64..1.0, 2),
        u in -2.0f64..2.0,
        steps in 1usize..30,
    ) {
        let sys = builtin("example_poly").unwrap();
        let traj = sys.simulate(&x0, &vec![vec![u]; steps]).unwrap();
        let (mut x, mut v) = (x0.clone(), vec![u]);
        for k in 0..steps {
            let (nx, nv) = sys.augmented_step(&x, &v).unwrap();
            prop_assert_eq!(&nx, &traj.states[k + 1]);
            prop_assert_eq!(nv[0].to_bits(), u.to_bits());
            x = nx;
            v = nv;
        }
    }

    #[test]
    fn normal_form_top_block_is_h(
        seed in 0u64..500,
        x in proptest::collection::vec(-2.0f64..2.0, 2),
        u in -3.0f64..3.0,
    ) {
        let nd = ParametricDictionary::new(small_spec(), seed).unwrap().to_normal_dictionary();
        let phi = nd.eval(&x, &[u]);
        let h = nd.h.eval(&x);
        for i in 0..4 {
            prop_assert_eq!(phi[i].to_bits(), h[i].to_bits());
        }
    }

    #[test]
    fn control_independent_extension_ignores_input(
        seed in 0u64..500,
        coeffs in proptest::collection::vec(-3.0f64..3.0, 4),
        x in proptest::collection::vec(-1.0f64..1.0, 2),
    ) {
        let nd = ParametricDictionary::new(small_spec(), seed).unwrap().to_normal_dictionary();
        let v = control_independent_extension(&DVector::from_vec(coeffs), &nd).unwrap();
        let values: Vec<f64> = (0..9).map(|k| v.dot(&nd.eval(&x, &[-2.0 + 0.5 * k as f64]))).collect();
        for w in &values {
            prop_assert_eq!(w.to_bits(), values[0].to_bits());
        }
    }

    #[test]
    fn index_lies_in_unit_interval_before_clamping(seed in any::<u64>(), s in 1usize..7, extra in 0usize..60) {
        let (a, b) = random_pair(seed, s, s + 5 + extra);
        let rep = consistency_index(&a, &b).unwrap();
        let raw = rep.diagnostics.raw_index;
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&raw), "raw index {}", raw);
    }

    #[test]
    fn index_is_basis_invariant(seed in any::<u64>(), s in 1usize..6) {
        let (a, b) = random_pair(seed, s, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let m = random(s, s, &mut rng) + DMatrix::identity(s, s) * 1.5;
        let sv = m.singular_values();
        prop_assume!(sv.max() / sv.min() <= 1e3);
        let base = consistency_index(&a, &b).unwrap().index;
        let moved = consistency_index(&(&m * &a), &(&m * &b)).unwrap().index;
        prop_assert!((base - moved).abs() <= 1e-9);
    }

    #[test]
    fn certificate_is_the_worst_function(seed in any::<u64>(), s in 1usize..7) {
        let (a, b) = random_pair(seed, s, 80);
        let rep = consistency_index(&a, &b).unwrap();
        let w = DVector::from_vec(rep.worst_coeffs.clone());
        let err = relative_prediction_error(&w, &rep.k_f, &a, &b).unwrap();
        prop_assert!((err - rep.sqrt_index).abs() <= 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        for _ in 0..200 {
            let v = DVector::from_fn(s, |_, _| rng.gen_range(-1.0..1.0));
            if let Some(e) = relative_prediction_error(&v, &rep.k_f, &a, &b) {
                prop_assert!(e <= rep.sqrt_index + 1e-8);
            }
        }
    }

    #[test]
    fn trace_sandwich_holds(seed in any::<u64>(), s in 1usize..7) {
        let (a, b) = random_pair(seed, s, 50);
        let rep = consistency_index(&a, &b).unwrap();
        prop_assert!(rep.trace_lower <= rep.index && rep.index <= rep.trace_upper);
    }

    #[test]
    fn extraction_routes_agree(u in -2.0f64..2.0) {
        let (model, k) = example_model();
        let via_pinv = extract_pseudoinverse(k, &|v: &[f64]| model.dictionary.g_at(v), &[u]).unwrap();
        prop_assert!((via_pinv - model.a_of(&[u])).amax() <= 1e-9);
    }

    #[test]
    fn bilinear_embedding_is_exact(seed in any::<u64>()) {
        let plan = ExperimentPlan {
            num_experiments: 30,
            steps_per_experiment: 3,
            seed,
            input_mode: InputMode::PiecewiseConstant { hold_steps: 1 },
        };
        let ss = run_experiments(&builtin("example_poly").unwrap(), &plan).unwrap();
        let desc = DictionaryDescriptor::analytic(&Monomials::total_degree(2, 2), None, 1);
        let model = fit_bilinear_baseline(&desc, &ss, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let u = [rng.gen_range(-2.0..2.0)];
            let z = model.lift(&x);
            let direct = model.step_lifted(&z, &u).unwrap();
            let zaug = DVector::from_iterator(z.len() + 1, z.iter().copied().chain([1.0]));
            let embedded = model.separable_form(&u) * zaug;
            prop_assert!((embedded.rows(0, z.len()) - &direct).amax() <= 1e-12 * (1.0 + direct.amax()));
        }
    }

    #[test]
    fn learning_rate_schedule_is_linear(epochs in 2usize..400, start in 1e-5f64..1e-2, ratio in 1e-4f64..1.0) {
        let cfg = TrainConfig {
            dictionary: small_spec(),
            epochs,
            batch_size: 10,
            lr_start: start,
            lr_end: start * ratio,
            seed: 0,
            loss_mode: LossMode::Trace,
            ridge: DEFAULT_RIDGE,
            train_fraction: 0.5,
        };
        let lrs: Vec<f64> = (0..epochs).map(|e| cfg.learning_rate(e)).collect();
        prop_assert_eq!(lrs[0], start);
        prop_assert!((lrs[epochs - 1] - start * ratio).abs() <= 1e-15);
        let step = lrs[0] - lrs[1];
        for w in lrs.windows(2) {
            prop_assert!(w[1] <= w[0]);
            prop_assert!((w[0] - w[1] - step).abs() <= 1e-12 * start);
        }
    }
}
