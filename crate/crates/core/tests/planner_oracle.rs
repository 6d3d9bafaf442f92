//! Gibbs planning against brute-force enumeration on small instances, plus
//! planner invariants as property tests.

use std::sync::Arc;

use leap_core::codec::{make_plan_template, TokenSeq};
use leap_core::dataset::Dataset;
use leap_core::energy::{compose, EnergyFn};
use leap_core::gridworld::{Action, Dir, EnvSpec, GridEnv, Pose};
use leap_core::model::{fit_tabular, TabularModel};
use leap_core::oracle::{demo_from_env, StateVec};
use leap_core::planner::{gibbs_plan, PlanConfig, Temperature};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Oracle demos from every (pose, goal) pair of an open 3x3 interior.
fn open_room_tabular(width: usize) -> TabularModel {
    let cells: Vec<(u8, u8)> = (1..4).flat_map(|x| (1..4).map(move |y| (x, y))).collect();
    let mut demos = Vec::new();
    for &(x, y) in &cells {
        for &g in &cells {
            if (x, y) == g {
                continue;
            }
            for dir in Dir::ALL {
                let env = GridEnv::empty(5, 5, Pose::new(x, y, dir), g);
                demos.push(demo_from_env(&env, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
            }
        }
    }
    let spec = EnvSpec {
        width: 5,
        height: 5,
        obstacles: 0,
        ..EnvSpec::default()
    };
    fit_tabular(&Dataset::new(spec, 0, 0.0, demos), width, 0.5).unwrap()
}

fn all_plans(horizon: usize) -> Vec<Vec<Action>> {
    (0..4usize.pow(horizon as u32))
        .map(|mut code| {
            (0..horizon)
                .map(|_| {
                    let a = Action::PLANNING[code % 4];
                    code /= 4;
                    a
                })
                .collect()
        })
        .collect()
}

fn brute_force_min(energy: &EnergyFn, template: &TokenSeq) -> f64 {
    let seqs: Vec<TokenSeq> = all_plans(template.horizon).iter().map(|p| template.with_plan(p)).collect();
    energy.evaluate_batch(&seqs).unwrap().into_iter().fold(f64::INFINITY, f64::min)
}

fn template(pose: Pose, goal: (u8, u8), horizon: usize) -> TokenSeq {
    let env = GridEnv::empty(5, 5, pose, goal);
    make_plan_template(&[], StateVec::of_env(&env), horizon, 0, Arc::new(env.layout())).unwrap()
}

#[test]
fn gibbs_reaches_enumerated_minimum_with_four_slots() {
    let energy = EnergyFn::pll(Arc::new(open_room_tabular(1)));
    let t = template(Pose::new(1, 3, Dir::N), (3, 1), 4);
    let min = brute_force_min(&energy, &t);
    let cfg = PlanConfig {
        horizon: 4,
        iters: 60,
        temperature: Temperature::Linear { start: 1.0, end: 0.05 },
        ..PlanConfig::default()
    };
    let hits = (0..100)
        .filter(|&seed| {
            let (plan, _) = gibbs_plan(&energy, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            energy.evaluate(&t.with_plan(&plan)).unwrap() <= min + 1e-9
        })
        .count();
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn constraint_composition_is_enumerable_too() {
    // Forbid the cell straight ahead so the unconstrained optimum is ruled out.
    let model = EnergyFn::pll(Arc::new(open_room_tabular(1)));
    let energy = compose(vec![model, EnergyFn::constraint([(1, 2)])]).unwrap();
    let t = template(Pose::new(1, 3, Dir::N), (1, 1), 4);
    let min = brute_force_min(&energy, &t);
    assert!(min < 1e3, "a lava-free plan exists");
    let cfg = PlanConfig {
        horizon: 4,
        iters: 60,
        temperature: Temperature::Linear { start: 1.0, end: 0.05 },
        ..PlanConfig::default()
    };
    let hits = (0..100)
        .filter(|&seed| {
            let (plan, _) = gibbs_plan(&energy, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            energy.evaluate(&t.with_plan(&plan)).unwrap() <= min + 1e-9
        })
        .count();
    assert!(hits >= 95, "{hits}/100");
}

fn pose_strategy() -> impl Strategy<Value = (Pose, (u8, u8))> {
    (1u8..4, 1u8..4, 0u8..4, 1u8..4, 1u8..4)
        .prop_filter("distinct cells", |(x, y, _, gx, gy)| (x, y) != (gx, gy))
        .prop_map(|(x, y, d, gx, gy)| (Pose::new(x, y, Dir::from_code(d).unwrap()), (gx, gy)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn best_so_far_never_exceeds_initialization((pose, goal) in pose_strategy(), seed in 0u64..1000, iters in 0usize..12, masks in 1usize..4) {
        let energy = EnergyFn::pll(Arc::new(open_room_tabular(2)));
        let t = template(pose, goal, 4);
        let cfg = PlanConfig { horizon: 4, iters, masks_per_step: masks, ..PlanConfig::default() };
        let (plan, trace) = gibbs_plan(&energy, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(trace.snapshots.len(), iters + 1);
        let e = energy.evaluate(&t.with_plan(&plan)).unwrap();
        prop_assert!(e <= trace.snapshots[0].energy);
        let min = trace.snapshots.iter().map(|s| s.energy).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(e, min);
    }

    #[test]
    fn seeded_planning_is_reproducible((pose, goal) in pose_strategy(), seed in 0u64..1000) {
        let energy = EnergyFn::pll(Arc::new(open_room_tabular(1)));
        let t = template(pose, goal, 4);
        let cfg = PlanConfig { horizon: 4, iters: 8, temperature: Temperature::Linear { start: 1.0, end: 0.1 }, ..PlanConfig::default() };
        let a = gibbs_plan(&energy, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = gibbs_plan(&energy, &t, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

