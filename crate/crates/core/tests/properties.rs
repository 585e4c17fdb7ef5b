use massdrift::fibers::{phi_direct, phi_formula, small_models, FiberWord};
use massdrift::kernel::{
    back_and_forth, check_invariant_set, evolve, even_return_curve, BoundaryPolicy, Driver, InvarianceVerdict,
    MarkovModel, SnapshotSchedule, Truncation,
};
use massdrift::measures::{
    convolve_step, invert_law, GeneratorId, Observable, ReferenceWeights, StateId, StateSet, StateVector, StepLaw,
};
use massdrift::models::{
    build_cyclic_model, build_lattice_model, free_reduce, lattice_state, preimage_jacobian_sum, rotation,
    simple_walk, sl2_reduce, translation_law, SchottkyChart, SchottkyLetter, Sl2LatticePoint,
};
use massdrift::montecarlo::{run_ensemble, ChartKind, EnsembleSpec};
use nalgebra::Matrix2;
use proptest::prelude::*;

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|w| {
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    })
}

fn cyclic_law(order: u32, w: &[f64]) -> StepLaw {
    let atoms: Vec<(u32, f64)> = w.iter().enumerate().map(|(k, &p)| (k as u32, p)).collect();
    translation_law(order, &atoms).unwrap()
}

fn shift(order: u64) -> impl Fn(GeneratorId, StateId) -> Option<StateId> {
    move |g, x| Some(StateId((x.0 + g.id() as u64) % order))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mass_is_conserved(order in 2u32..7, copies in 1u32..3, n in 0usize..40, w in weights(3)) {
        let model = build_cyclic_model(order, copies).unwrap();
        let w = &w[..(order as usize).min(3)];
        let total: f64 = w.iter().sum();
        let law = cyclic_law(order, &w.iter().map(|x| x / total).collect::<Vec<_>>());
        let series = evolve(&model, StateId(0), &law, n, &SnapshotSchedule::Every(1)).unwrap();
        for (_, v) in series.snapshots() {
            prop_assert!((v.total_mass() + v.pruned_mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn convolution_is_linear(a in 0.0f64..1.0, x in 0u64..5, y in 0u64..5, w in weights(3)) {
        let law = cyclic_law(5, &w);
        let act = shift(5);
        let (u, v) = (StateVector::dirac(StateId(x)), StateVector::dirac(StateId(y)));
        let mixed = u.combine(a, &v, 1.0 - a).unwrap();
        let lhs = convolve_step(&mixed, &law, &act).unwrap();
        let rhs = convolve_step(&u, &law, &act)
            .unwrap()
            .combine(a, &convolve_step(&v, &law, &act).unwrap(), 1.0 - a)
            .unwrap();
        prop_assert!(lhs.sup_distance(&rhs) < 1e-15);
    }

    #[test]
    fn inversion_is_an_involution(order in 2u32..8, w in weights(4)) {
        let w = &w[..(order as usize).min(4)];
        let total: f64 = w.iter().sum();
        let law = cyclic_law(order, &w.iter().map(|x| x / total).collect::<Vec<_>>());
        prop_assert_eq!(invert_law(&invert_law(&law)), law);
    }

    #[test]
    fn convolution_is_associative(w1 in weights(3), w2 in weights(3), x in 0u64..7) {
        let (mu, nu) = (cyclic_law(7, &w1), cyclic_law(7, &w2));
        // μ∗ν as a law on ℤ/7
        let mut composed = [0.0; 7];
        for (a, p) in w1.iter().enumerate() {
            for (b, q) in w2.iter().enumerate() {
                composed[(a + b) % 7] += p * q;
            }
        }
        let atoms: Vec<(u32, f64)> = composed.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(k, &p)| (k as u32, p)).collect();
        let mu_nu = translation_law(7, &atoms).unwrap();
        let act = shift(7);
        let start = StateVector::dirac(StateId(x));
        let stepwise = convolve_step(&convolve_step(&start, &nu, &act).unwrap(), &mu, &act).unwrap();
        let at_once = convolve_step(&start, &mu_nu, &act).unwrap();
        prop_assert!(stepwise.sup_distance(&at_once) < 1e-15);
    }

    #[test]
    fn operator_and_generator_verdicts_agree(order in 2u32..5, copies in 1u32..4, mask in any::<u16>(), w in weights(2)) {
        let model = build_cyclic_model(order, copies).unwrap();
        let law = cyclic_law(order, &w);
        let set: StateSet = model.states().iter().copied().filter(|x| mask >> (x.0 % 16) & 1 == 1).collect();
        let report = check_invariant_set(&model, &set, &law, 1e-12).unwrap();
        prop_assert_eq!(report.operator_says_invariant(), report.generators_say_invariant());
        // invariant exactly when the set is a union of copies
        let union = (0..copies as u64).all(|c| {
            let block: Vec<bool> = (0..order as u64).map(|r| set.contains(&StateId(c * order as u64 + r))).collect();
            block.iter().all(|&b| b) || block.iter().all(|&b| !b)
        });
        prop_assert_eq!(report.verdict == InvarianceVerdict::Invariant, union);
    }

    #[test]
    fn back_and_forth_of_symmetric_law_is_even_snapshot(n in 0usize..25) {
        let model = build_lattice_model(1, 60).unwrap();
        let law = simple_walk(1);
        let entries = back_and_forth(&model, lattice_state(&[0]), &law, n).unwrap();
        let series = evolve(&model, lattice_state(&[0]), &law, 2 * n, &SnapshotSchedule::At(vec![2 * n])).unwrap();
        prop_assert!(entries[n].sup_distance(series.snapshot(2 * n).unwrap()) < 1e-14);
    }

    #[test]
    fn truncation_does_not_matter_before_the_boundary(n in 1usize..30, r in 31i64..40) {
        let law = simple_walk(1);
        let small = evolve(&build_lattice_model(1, r).unwrap(), lattice_state(&[0]), &law, n, &SnapshotSchedule::At(vec![n])).unwrap();
        let large = evolve(&build_lattice_model(1, 2 * r).unwrap(), lattice_state(&[0]), &law, n, &SnapshotSchedule::At(vec![n])).unwrap();
        prop_assert_eq!(small.snapshot(n), large.snapshot(n));
    }

    #[test]
    fn reversible_chains_have_nonincreasing_return_curves(
        p in prop::collection::vec(0.01f64..0.5, 6),
        weights_raw in prop::collection::vec(0.2f64..3.0, 7),
    ) {
        // birth-death chain with reference weights π and p(i,i+1)π(i) = p(i+1,i)π(i+1)
        let states: Vec<StateId> = (0..7).map(StateId).collect();
        let mut up = [0.0; 7];
        let mut down = [0.0; 7];
        for i in 0..6 {
            let flow = p[i] * weights_raw[i].min(weights_raw[i + 1]) / 2.0;
            up[i] = flow / weights_raw[i];
            down[i + 1] = flow / weights_raw[i + 1];
        }
        let rows = (0..7).map(|i| {
            let mut row = vec![];
            if i > 0 { row.push((StateId(i as u64 - 1), down[i])); }
            row.push((StateId(i as u64), 1.0 - up[i] - down[i]));
            if i < 6 { row.push((StateId(i as u64 + 1), up[i])); }
            row
        }).collect();
        let reference = ReferenceWeights::new(states.iter().copied().zip(weights_raw.iter().copied()), false).unwrap();
        let model = MarkovModel::from_rows(states, rows, reference, Truncation::new(BoundaryPolicy::Reflect, "0..=6"), &[], true).unwrap();
        let curve = even_return_curve(&model, StateId(3), Driver::Chain, 60).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[1] <= w[0] + 1e-13));
    }

    #[test]
    fn formula_and_enumeration_agree_on_random_observables(
        index in 0usize..1000,
        values in prop::collection::vec(-3.0f64..3.0, 4),
        n in 0usize..4,
        word_seed in any::<u64>(),
    ) {
        let models = small_models(4);
        let m = &models[index % models.len()];
        let f = Observable::new((0..m.points()).map(|x| (StateId(x as u64), values[x]))).unwrap();
        let order = m.group().order() as u64;
        let letters: Vec<u32> = (0..n).map(|k| ((word_seed >> (8 * k)) % order) as u32).collect();
        let word = FiberWord::new(m, letters).unwrap();
        for x in 0..m.points() as u64 {
            let a = phi_formula(m, n, &word, StateId(x), &f).unwrap();
            let b = phi_direct(m, n, &word, StateId(x), &f).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

fn sl2z() -> impl Strategy<Value = Matrix2<f64>> {
    prop::collection::vec(0u8..3, 1..12).prop_map(|steps| {
        let s = Matrix2::new(0.0, -1.0, 1.0, 0.0);
        let t = Matrix2::new(1.0, 1.0, 0.0, 1.0);
        let t_inv = Matrix2::new(1.0, -1.0, 0.0, 1.0);
        steps.iter().fold(Matrix2::identity(), |acc, k| acc * [s, t, t_inv][*k as usize])
    })
}

fn sl2r() -> impl Strategy<Value = Matrix2<f64>> {
    (0.0f64..6.3, -1.5f64..1.5, -2.0f64..2.0).prop_map(|(angle, log_scale, shear)| {
        let e = log_scale.exp();
        Matrix2::new(1.0, shear, 0.0, 1.0) * Matrix2::new(e, 0.0, 0.0, 1.0 / e) * rotation(angle)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn shortest_length_is_coset_invariant(basis in sl2r(), gamma in sl2z()) {
        let p = Sl2LatticePoint::new(basis).unwrap();
        let q = Sl2LatticePoint::new(basis * gamma).unwrap();
        prop_assert!((p.shortest_len() - q.shortest_len()).abs() < 1e-9);
    }

    #[test]
    fn reduction_is_idempotent(basis in sl2r()) {
        let once = Sl2LatticePoint::new(basis).unwrap();
        let twice = sl2_reduce(&once).unwrap();
        prop_assert!((once.shortest_len() - twice.shortest_len()).abs() < 1e-12);
        let same_up_to_sign_or_swap = [1.0, -1.0].iter().any(|s| {
            (twice.basis() - once.basis() * *s).abs().max() < 1e-12
        }) || {
            let (u, v) = (once.basis().column(0), once.basis().column(1));
            let (u2, v2) = (twice.basis().column(0), twice.basis().column(1));
            ((u2 - v).abs().max() < 1e-12 || (u2 + v).abs().max() < 1e-12)
                && ((v2 - u).abs().max() < 1e-12 || (v2 + u).abs().max() < 1e-12)
        };
        prop_assert!(same_up_to_sign_or_swap);
    }

    #[test]
    fn schottky_words_stay_reduced(letters in prop::collection::vec(0usize..4, 1..60)) {
        let chart = SchottkyChart::default_generators();
        let mut p = chart.point(rotation(0.37)).unwrap();
        let mut expected = Vec::new();
        for g in letters.iter().map(|&i| SchottkyLetter::from_index(i).unwrap()) {
            let before = p.word().len() as i64;
            p = chart.schottky_step(&p, g).unwrap();
            expected = free_reduce(&expected, &[g]);
            prop_assert_eq!(p.word(), &expected[..]);
            prop_assert!(p.word().windows(2).all(|w| w[1] != w[0].inverse()));
            prop_assert_eq!((p.word().len() as i64 - before).abs(), 1);
        }
    }

    #[test]
    fn boole_map_preserves_lebesgue(x in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
        prop_assert!((preimage_jacobian_sum(x) - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn split_runs_merge_to_one(seed in any::<u64>(), split in 1u64..40) {
        let mut whole = EnsembleSpec::new(ChartKind::Schottky, 40, 15, seed);
        whole.schedule = SnapshotSchedule::Every(5);
        let mut first = whole.clone();
        first.n_walkers = split;
        let mut second = whole.clone();
        second.n_walkers = 40 - split;
        second.walker_offset = split;
        let merged = run_ensemble(&first).unwrap().merge(&run_ensemble(&second).unwrap()).unwrap();
        prop_assert_eq!(merged, run_ensemble(&whole).unwrap());
    }
}
