use std::f64::consts::E;

use mfcrand::controls::{ActionSet, KappaKind};
use mfcrand::model::{ClosureReward, Dims, InitialCondition, LinearCoefficients};
use mfcrand::randomisation::{ConstantIntensity, IntensityControl};
use mfcrand::scenario::{AtomSpace, NoiseLattice, ScenarioTree, TimeGrid};
use mfcrand::value::{
    continuity_check, dpp_check, instance_value_direct, intro_example, law_invariance_check, micro_instance,
    micro_shape, permuted_instance, restriction_check, value_direct, value_randomised_bsde, value_randomised_mc,
};

#[test]
fn direct_value_matches_path_enumeration() {
    // Two steps of 1/2, no noise, dx = a dt with a = ±1 from x₀ = 0.5 and
    // reward −x_T²: the reachable endpoints are 1.5, 0.5 and −0.5.
    let tree = ScenarioTree::build(
        TimeGrid::uniform(1.0, 2).unwrap(),
        NoiseLattice::none(),
        NoiseLattice::none(),
        AtomSpace::uniform(1).unwrap(),
    )
    .unwrap();
    let coeffs = LinearCoefficients::new(Dims { d: 1, m: 0, n: 0 }, [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], 1.0);
    let reward = ClosureReward {
        name: "-x^2".into(),
        running: Box::new(|_, _, _, _| 0.0),
        terminal: Box::new(|x, _| -x[0] * x[0]),
        growth: 1.0,
    };
    let actions = ActionSet::bounded_euclidean(vec![vec![-1.0], vec![1.0]]).unwrap();
    let v = value_direct(&tree, &coeffs, &reward, &actions, &InitialCondition::scalar(&[0.5]), 4096).unwrap();
    let mut best = f64::NEG_INFINITY;
    for a0 in [-1.0, 1.0] {
        for a1 in [-1.0, 1.0] {
            let x: f64 = 0.5 + 0.5 * a0 + 0.5 * a1;
            best = best.max(-x * x);
        }
    }
    assert_eq!(best, -0.25);
    assert!((v - best).abs() < 1e-15);
}

#[test]
fn direct_and_randomised_values_agree() {
    for i in 0..3 {
        let inst = micro_instance(21, i, micro_shape(i)).unwrap();
        let v = instance_value_direct(&inst).unwrap();
        for kind in [KappaKind::UniformNew, KappaKind::UniformFull] {
            let lam = inst.lambda(kind, 1e6).unwrap();
            let levels: Vec<f64> = (0..=8).map(|j| 2f64.powi(j)).collect();
            let b = value_randomised_bsde(&inst, &lam, 0, &levels).unwrap();
            assert!((b.limit - v).abs() <= 1e-8, "instance {i}: {} vs {v}", b.limit);
            assert!(b.report.last_gap <= 1e-6);
        }
    }
}

#[test]
fn permuting_atoms_keeps_the_value() {
    for i in 0..4 {
        let inst = micro_instance(4, i, micro_shape(i)).unwrap();
        let swapped = permuted_instance(&inst, &[1, 0]).unwrap();
        assert!(law_invariance_check(&inst, &swapped).unwrap() <= 1e-10);
    }
}

#[test]
fn dpp_holds_at_every_grid_time() {
    let inst = micro_instance(8, 1, micro_shape(1)).unwrap();
    let lam = inst.lambda(KappaKind::UniformNew, 1e6).unwrap();
    for s in 0..=inst.steps() {
        let r = dpp_check(&inst, &lam, 0, s).unwrap();
        assert!(r.residual <= 1e-6, "s = {s}: {}", r.residual);
    }
}

#[test]
fn restriction_at_the_start_is_trivial() {
    let inst = micro_instance(8, 1, micro_shape(1)).unwrap();
    let r = restriction_check(&inst, KappaKind::UniformNew, 1e6, 0, 0).unwrap();
    assert_eq!(r.p_even, 1.0);
    assert_eq!(r.residual, 0.0);
    let r = restriction_check(&inst, KappaKind::UniformNew, 1e6, 0, 1).unwrap();
    assert!(r.p_even >= 0.5 && r.p_even < 1.0);
    assert!(r.residual <= 1e-8);
}

#[test]
fn tilted_value_is_continuous_in_the_initial_condition() {
    let inst = micro_instance(6, 1, micro_shape(1)).unwrap();
    let lam = inst.lambda(KappaKind::UniformNew, 1.0).unwrap();
    let nu = ConstantIntensity(2.0);
    let pts = continuity_check(&inst, &lam, 0, &nu, &[1e-2, 1e-3, 1e-4]).unwrap();
    assert!(pts.windows(2).all(|w| w[1].change < w[0].change));
    let ratios: Vec<f64> = pts.iter().map(|p| p.ratio).collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(*r), h.max(*r)));
    assert!(hi < 10.0 * lo.max(1e-12), "{ratios:?}");
}

#[test]
fn sampled_randomised_value_does_not_beat_the_value() {
    let inst = micro_instance(12, 1, micro_shape(1)).unwrap();
    let v = instance_value_direct(&inst).unwrap();
    let lam = inst.lambda(KappaKind::UniformNew, 0.5).unwrap();
    let rand = inst.randomisation(&lam).unwrap();
    let owned = [ConstantIntensity(1.0), ConstantIntensity(5.0)];
    let family: Vec<&dyn IntensityControl> = owned.iter().map(|c| c as &dyn IntensityControl).collect();
    let mc = value_randomised_mc(&inst, &rand, 0, &family, 500, 32, 77).unwrap();
    assert!(mc.best <= v + 3.0 * mc.best_se, "{} ± {} vs {v}", mc.best, mc.best_se);
    // Same streams, same answer.
    let again = value_randomised_mc(&inst, &rand, 0, &family, 500, 32, 77).unwrap();
    assert_eq!(mc.best.to_bits(), again.best.to_bits());
}

#[test]
fn intro_example_hand_values() {
    let r = intro_example(200).unwrap();
    let min = &r.conventions[0];
    // α ≡ 1 for everyone: m(1) = e − 1, atoms end at e − 2 and e, so the
    // reward is ½(0 + (e − 2 − 5/2)) + ½((e − 1) + 0) = e − 11/4.
    assert!((min.j_all_plus - (E - 2.75)).abs() < 1e-14);
    assert!(min.v >= min.j_all_plus - 1e-15);
    // The tagged state from 1 under α ≡ 1 also ends at e.
    assert!(min.v_plus >= E - 1.0 - 1e-14);
    for c in &r.conventions {
        assert!(c.v_minus_atomwise >= c.v_minus - 1e-14);
        assert!(c.v_plus_atomwise >= c.v_plus - 1e-14);
    }
    assert!(intro_example(99).is_err());
}
