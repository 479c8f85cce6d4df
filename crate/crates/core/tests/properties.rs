//! Property tests over seeded random members of each class.

use proptest::prelude::*;

use conflab::calibration::{apply_calibrator, apply_e_to_p, Calibrator};
use conflab::instances::{instance_rng, random_in_class, random_table};
use conflab::oracle::{
    check_class, check_e_exchangeable, check_e_iid, sup_iid_expectation, ClassLabel, Tolerances,
};
use conflab::space::enumerate_bags;
use conflab::universality::{decompose, permutation_average, product_embed, verify_decomposition};
use conflab::{iid_expectation, orbit_mean, BagPolynomial, Distribution, FnTable, ObservationSpace, DEFAULT_BUDGET};

fn shapes() -> impl Strategy<Value = (ObservationSpace, usize)> {
    prop_oneof![
        Just((ObservationSpace::new(1, 2).unwrap(), 1)),
        Just((ObservationSpace::new(1, 2).unwrap(), 2)),
        Just((ObservationSpace::new(1, 3).unwrap(), 1)),
        Just((ObservationSpace::new(1, 3).unwrap(), 2)),
        Just((ObservationSpace::new(2, 2).unwrap(), 1)),
    ]
}

fn classes() -> impl Strategy<Value = ClassLabel> {
    proptest::sample::select(ClassLabel::ALL.to_vec())
}

fn member(class: ClassLabel, shape: (ObservationSpace, usize), seed: u64) -> FnTable {
    random_in_class(class, &shape.0, shape.1, DEFAULT_BUDGET, &mut instance_rng(seed, 0)).unwrap()
}

fn distribution(z: usize, raw: &[f64]) -> Distribution {
    let w: Vec<f64> = raw.iter().take(z).map(|v| v + 1e-3).collect();
    let s: f64 = w.iter().sum();
    Distribution::new(w.iter().map(|v| v / s).collect()).unwrap()
}

/// Classes that contain `class` by the inclusion diagram.
fn supersets(class: ClassLabel) -> &'static [ClassLabel] {
    use ClassLabel::*;
    match class {
        EtX => &[EX, EtR, ER],
        TestCondEX => &[EX, ER],
        EX => &[ER],
        EtR => &[ER],
        EiR => &[EtR, ER],
        PtX => &[PX, PtR, PR],
        PX => &[PR],
        PtR => &[PR],
        _ => &[],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn members_satisfy_the_inclusion_lattice(class in classes(), shape in shapes(), seed in any::<u64>()) {
        let t = member(class, shape, seed);
        prop_assert!(check_class(&t, class, Tolerances::default()).ok);
        for &sup in supersets(class) {
            let r = check_class(&t, sup, Tolerances::default());
            prop_assert!(r.ok, "{} member fails {}: {:?}", class, sup, r);
        }
    }

    #[test]
    fn e_classes_are_closed_downward(class in classes(), shape in shapes(), seed in any::<u64>(), c in 0.0f64..=1.0) {
        prop_assume!(!class.is_p_class());
        let t = member(class, shape, seed);
        prop_assert!(check_class(&t.scale(c), class, Tolerances::default()).ok);
        // zeroing entries only lowers an e-variable; invariance classes need orbit-wise zeroing
        if matches!(class, ClassLabel::ER | ClassLabel::EX | ClassLabel::TestCondEX) {
            let lowered = t.map(|v| if v > 0.5 { 0.0 } else { v });
            prop_assert!(check_class(&lowered, class, Tolerances::default()).ok);
        }
    }

    #[test]
    fn oracle_values_are_monotone(shape in shapes(), seed in any::<u64>()) {
        let mut rng = instance_rng(seed, 1);
        let a = random_table(&shape.0, shape.1, DEFAULT_BUDGET, &mut rng).unwrap();
        let b = random_table(&shape.0, shape.1, DEFAULT_BUDGET, &mut rng).unwrap();
        let hi = a.zip_map(&b, f64::max).unwrap();
        prop_assert!(check_e_exchangeable(&a, 0.0).worst_value <= check_e_exchangeable(&hi, 0.0).worst_value);
        prop_assert!(sup_iid_expectation(&a).value <= sup_iid_expectation(&hi).value * (1.0 + 1e-9));
        let k = 3.0;
        let scaled = sup_iid_expectation(&a.scale(k)).value;
        prop_assert!((scaled - k * sup_iid_expectation(&a).value).abs() <= 1e-9 * scaled);
    }

    #[test]
    fn calibration_transports_classes(shape in shapes(), seed in any::<u64>(), d in 1u32..10) {
        let cal = Calibrator::power(d as f64 / 10.0).unwrap();
        let tol = Tolerances::default();
        let p = member(ClassLabel::PR, shape, seed);
        prop_assert!(check_class(&apply_calibrator(&cal, &p), ClassLabel::ER, tol).ok);
        let px = member(ClassLabel::PtX, shape, seed);
        prop_assert!(check_class(&apply_calibrator(&cal, &px), ClassLabel::EtX, tol).ok);
        let e = member(ClassLabel::EX, shape, seed);
        prop_assert!(check_class(&apply_e_to_p(&e), ClassLabel::PX, tol).ok);
        // Markov: an IID e-variable's reciprocal is an IID p-variable
        let er = member(ClassLabel::ER, shape, seed);
        prop_assert!(check_class(&apply_e_to_p(&er), ClassLabel::PR, tol).ok);
    }

    #[test]
    fn bag_polynomial_matches_dense_expectation(shape in shapes(), seed in any::<u64>(), raw in proptest::collection::vec(0.0f64..1.0, 4)) {
        let t = random_table(&shape.0, shape.1, DEFAULT_BUDGET, &mut instance_rng(seed, 2)).unwrap();
        let q = distribution(shape.0.z_card(), &raw);
        let dense = iid_expectation(&t, &q).unwrap();
        let poly = BagPolynomial::from_table(&t).eval(q.probs());
        prop_assert!((dense - poly).abs() <= 1e-12 * dense.max(1.0));
        prop_assert!(dense <= sup_iid_expectation(&t).value * (1.0 + 1e-9));
    }

    #[test]
    fn exchangeability_oracle_matches_enumeration(shape in shapes(), seed in any::<u64>()) {
        let t = random_table(&shape.0, shape.1, DEFAULT_BUDGET, &mut instance_rng(seed, 3)).unwrap();
        let brute = enumerate_bags(&shape.0, shape.1 + 1).iter().map(|b| orbit_mean(&t, b).unwrap()).fold(0.0, f64::max);
        let r = check_e_exchangeable(&t, 0.0);
        prop_assert!((r.worst_value - brute).abs() <= 1e-12 * brute.max(1.0));
    }

    #[test]
    fn decomposition_round_trips(shape in shapes(), seed in any::<u64>()) {
        let tol = Tolerances::default();
        let e = member(ClassLabel::ER, shape, seed);
        let d = decompose(&e, tol).unwrap();
        prop_assert!(verify_decomposition(&e, &d, tol).ok());
        let again = permutation_average(&d.invariant);
        prop_assert!(again.values().iter().zip(d.invariant.values()).all(|(a, b)| (a - b).abs() <= 1e-14 * b.abs()));
        // the reverse direction: any exchangeability e-variable times an invariant IID one
        let ex = member(ClassLabel::EX, shape, seed ^ 1);
        let inv = member(ClassLabel::EiR, shape, seed ^ 2);
        let prod = product_embed(&ex, &inv, tol).unwrap();
        prop_assert!(check_e_iid(&prod, tol.iid).ok);
    }
}
