//! Demonstration generation: shortest-path oracle over the pose graph,
//! action corruption for suboptimal data, and dataset assembly.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::gridworld::{build_env, Action, Cell, Dir, Dynamics, EnvError, EnvSpec, GridEnv, Layout, Pose};
use crate::rng::stream_seed;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("goal is unreachable from the agent")]
    NoPath,
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("dataset needs at least one demo")]
    EmptyDataset,
    #[error("stochastic rollout did not reach the goal within {0} attempts")]
    RolloutFailed(usize),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Integer state features fed to the sequence model: agent pose and goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateVec {
    pub x: u8,
    pub y: u8,
    pub dir: u8,
    pub gx: u8,
    pub gy: u8,
}

impl StateVec {
    pub fn new(pose: Pose, goal: (u8, u8)) -> StateVec {
        StateVec {
            x: pose.x,
            y: pose.y,
            dir: pose.dir.code(),
            gx: goal.0,
            gy: goal.1,
        }
    }

    pub fn of_env(env: &GridEnv) -> StateVec {
        StateVec::new(env.agent(), env.goal())
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, Dir::from_code(self.dir).expect("dir code in 0..4"))
    }

    pub fn goal(&self) -> (u8, u8) {
        (self.gx, self.gy)
    }

    pub fn to_array(&self) -> [u8; 5] {
        [self.x, self.y, self.dir, self.gx, self.gy]
    }

    pub fn from_array(a: [u8; 5]) -> Option<StateVec> {
        Dir::from_code(a[2])?;
        Some(StateVec {
            x: a[0],
            y: a[1],
            dir: a[2],
            gx: a[3],
            gy: a[4],
        })
    }
}

/// One demonstration: `states.len() == actions.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub layout: Layout,
    pub states: Vec<StateVec>,
    pub actions: Vec<Action>,
    pub optimal: bool,
}

impl Demo {
    /// Replay the actions from the first state under deterministic dynamics
    /// and check that every stored state is reproduced.
    pub fn replays_exactly(&self) -> bool {
        if self.states.len() != self.actions.len() + 1 {
            return false;
        }
        let first = self.states[0];
        let env = self.layout.to_env(first.pose(), first.goal());
        let rollout = env.simulate(&self.actions);
        rollout.len() == self.actions.len()
            && rollout
                .iter()
                .zip(&self.states[1..])
                .all(|(r, s)| StateVec::new(r.next_state, first.goal()) == *s)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Copy)]
struct Node {
    pose: Pose,
    /// The closed door in front of the agent has already been opened.
    front_open: bool,
}

fn node_index(env: &GridEnv, n: Node) -> usize {
    ((n.pose.y as usize * env.width() as usize + n.pose.x as usize) * 4 + n.pose.dir as usize) * 2
        + n.front_open as usize
}

fn successor(env: &GridEnv, n: Node, action: Action) -> Option<Node> {
    let front = n.pose.front(env.width(), env.height());
    match action {
        Action::Left => Some(Node {
            pose: Pose { dir: n.pose.dir.left(), ..n.pose },
            front_open: false,
        }),
        Action::Right => Some(Node {
            pose: Pose { dir: n.pose.dir.right(), ..n.pose },
            front_open: false,
        }),
        Action::Forward => {
            let (x, y) = front?;
            let enter = match env.cell(x, y) {
                Cell::Empty | Cell::Door { open: true } => true,
                Cell::Door { open: false } => n.front_open,
                Cell::Wall | Cell::Obstacle | Cell::Lava => false,
            };
            enter.then_some(Node {
                pose: Pose { x, y, ..n.pose },
                front_open: false,
            })
        }
        Action::Open => {
            let (x, y) = front?;
            (env.cell(x, y) == Cell::Door { open: false } && !n.front_open).then_some(Node {
                pose: n.pose,
                front_open: true,
            })
        }
        Action::Pickup | Action::Drop => None,
    }
}

/// Minimum-length action sequence from the agent to the goal, found by
/// breadth-first search over poses. Lava is never entered; closed doors are
/// opened on the way. Ties go to the first action in
/// `Left < Right < Forward < Open`.
pub fn optimal_plan(env: &GridEnv) -> Result<Vec<Action>, OracleError> {
    let start = Node {
        pose: env.agent(),
        front_open: false,
    };
    if start.pose.cell() == env.goal() {
        return Ok(Vec::new());
    }
    let n_nodes = env.width() as usize * env.height() as usize * 8;
    let mut parent: Vec<Option<(usize, Action)>> = vec![None; n_nodes];
    let mut seen = vec![false; n_nodes];
    let mut nodes: Vec<Option<Node>> = vec![None; n_nodes];
    let si = node_index(env, start);
    seen[si] = true;
    nodes[si] = Some(start);
    let mut queue = VecDeque::from([si]);
    while let Some(i) = queue.pop_front() {
        let node = nodes[i].expect("queued nodes are recorded");
        for action in Action::PLANNING {
            let Some(next) = successor(env, node, action) else {
                continue;
            };
            let j = node_index(env, next);
            if seen[j] {
                continue;
            }
            seen[j] = true;
            nodes[j] = Some(next);
            parent[j] = Some((i, action));
            if next.pose.cell() == env.goal() {
                let mut plan = Vec::new();
                let mut k = j;
                while let Some((p, a)) = parent[k] {
                    plan.push(a);
                    k = p;
                }
                plan.reverse();
                return Ok(plan);
            }
            queue.push_back(j);
        }
    }
    Err(OracleError::NoPath)
}

fn check_probability(p: f64) -> Result<(), OracleError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(OracleError::InvalidProbability(p))
    }
}

/// Replace each action with probability `p` by a uniform draw over the
/// planning vocabulary (which may return the original action).
pub fn corrupt_actions<R: Rng + ?Sized>(actions: &[Action], p: f64, rng: &mut R) -> Vec<Action> {
    actions
        .iter()
        .map(|&a| {
            if p > 0.0 && rng.gen::<f64>() < p {
                Action::PLANNING[rng.gen_range(0..Action::PLANNING.len())]
            } else {
                a
            }
        })
        .collect()
}

/// Re-run a demonstration with an expert that, at every decision, takes a
/// uniform random action with probability `p` and otherwise the oracle's
/// next optimal action from the state it is actually in. States come from
/// deterministic dynamics, so states and actions stay consistent. The demo
/// ends at the goal, in lava, or at the step limit.
pub fn corrupt<R: Rng + ?Sized>(demo: &Demo, p: f64, rng: &mut R) -> Result<Demo, OracleError> {
    check_probability(p)?;
    if p == 0.0 {
        return Ok(demo.clone());
    }
    let first = demo.states[0];
    let goal = first.goal();
    let mut env = demo.layout.to_env(first.pose(), goal);
    let mut states = vec![first];
    let mut actions = Vec::new();
    let mut optimal = demo.optimal;
    while !env.is_terminated() && env.agent().cell() != goal {
        let best = optimal_plan(&env)?[0];
        let action = if rng.gen::<f64>() < p {
            Action::PLANNING[rng.gen_range(0..Action::PLANNING.len())]
        } else {
            best
        };
        optimal &= action == best;
        let result = env.step(action, rng);
        actions.push(action);
        states.push(StateVec::new(result.next_state, goal));
    }
    Ok(Demo {
        layout: demo.layout.clone(),
        states,
        actions,
        optimal,
    })
}

/// Run the oracle in `env` and package the trajectory. Under stochastic
/// dynamics the oracle replans after every executed step and the stored
/// actions are the ones actually executed.
pub fn demo_from_env<R: Rng + ?Sized>(env: &GridEnv, rng: &mut R) -> Result<Demo, OracleError> {
    let layout = env.layout();
    let goal = env.goal();
    match env.dynamics() {
        Dynamics::Deterministic => {
            let plan = optimal_plan(env)?;
            let mut states = vec![StateVec::of_env(env)];
            states.extend(env.simulate(&plan).iter().map(|r| StateVec::new(r.next_state, goal)));
            Ok(Demo {
                layout,
                states,
                actions: plan,
                optimal: true,
            })
        }
        Dynamics::StochasticTurn { .. } => {
            let mut env = env.clone();
            let mut states = vec![StateVec::of_env(&env)];
            let mut actions = Vec::new();
            let mut optimal = true;
            while !env.is_terminated() {
                let plan = optimal_plan(&env)?;
                let commanded = plan[0];
                let result = env.step(commanded, rng);
                if result.executed != commanded {
                    optimal = false;
                }
                // Pickup/Drop leave the pose unchanged and have no token.
                if result.executed.vocab_index().is_none() {
                    continue;
                }
                actions.push(result.executed);
                states.push(StateVec::new(result.next_state, goal));
            }
            if env.agent().cell() != goal {
                return Err(OracleError::RolloutFailed(1));
            }
            Ok(Demo {
                layout,
                states,
                actions,
                optimal,
            })
        }
    }
}

/// Sample `m` demonstrations, each in a freshly generated layout with its own
/// RNG stream derived from `(seed, index)`.
pub fn generate_dataset(spec: &EnvSpec, m: usize, p_corrupt: f64, seed: u64) -> Result<Dataset, OracleError> {
    generate_dataset_with(spec, m, p_corrupt, seed, |env, _| Ok(env))
}

/// Like [`generate_dataset`], with a hook that may rewrite each sampled
/// environment (for example to hide part of the obstacles) before the oracle
/// runs in it.
pub fn generate_dataset_with(
    spec: &EnvSpec,
    m: usize,
    p_corrupt: f64,
    seed: u64,
    mut adapt: impl FnMut(GridEnv, &mut ChaCha8Rng) -> Result<GridEnv, OracleError>,
) -> Result<Dataset, OracleError> {
    if m == 0 {
        return Err(OracleError::EmptyDataset);
    }
    check_probability(p_corrupt)?;
    let mut demos = Vec::with_capacity(m);
    for i in 0..m {
        let stream = stream_seed(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let mut attempt = 0;
        let demo = loop {
            let env = build_env(spec, stream_seed(stream, attempt))?;
            let env = adapt(env, &mut rng)?;
            match demo_from_env(&env, &mut rng) {
                Ok(d) => break d,
                Err(OracleError::RolloutFailed(_)) if attempt < 10 => attempt += 1,
                Err(OracleError::RolloutFailed(_)) => return Err(OracleError::RolloutFailed(10)),
                Err(e) => return Err(e),
            }
        };
        demos.push(corrupt(&demo, p_corrupt, &mut rng)?);
    }
    Ok(Dataset::new(spec.clone(), seed, p_corrupt, demos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::LavaSpec;
    use std::collections::{BinaryHeap, HashMap};
    use std::cmp::Reverse;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    /// Dijkstra over (pose, door-state) with explicit door bookkeeping,
    /// written independently of the BFS above.
    fn dijkstra_len(env: &GridEnv) -> Option<usize> {
        type Key = (u8, u8, u8, Vec<(u8, u8)>);
        let start: Key = (env.agent().x, env.agent().y, env.agent().dir.code(), Vec::new());
        let mut dist: HashMap<Key, usize> = HashMap::new();
        let mut heap = BinaryHeap::new();
        dist.insert(start.clone(), 0);
        heap.push(Reverse((0usize, start)));
        while let Some(Reverse((d, key))) = heap.pop() {
            if dist.get(&key).is_some_and(|&best| best < d) {
                continue;
            }
            let (x, y, dir, opened) = key.clone();
            if (x, y) == env.goal() {
                return Some(d);
            }
            let (dx, dy) = Dir::from_code(dir).unwrap().delta();
            let (fx, fy) = ((x as i32 + dx) as u8, (y as i32 + dy) as u8);
            let mut next: Vec<Key> = vec![
                (x, y, (dir + 3) % 4, opened.clone()),
                (x, y, (dir + 1) % 4, opened.clone()),
            ];
            let front = env.cell(fx, fy);
            let open_now = opened.contains(&(fx, fy));
            match front {
                Cell::Empty | Cell::Door { open: true } => next.push((fx, fy, dir, opened.clone())),
                Cell::Door { open: false } if open_now => next.push((fx, fy, dir, opened.clone())),
                Cell::Door { open: false } => {
                    let mut o = opened.clone();
                    o.push((fx, fy));
                    o.sort();
                    next.push((x, y, dir, o));
                }
                _ => {}
            }
            for k in next {
                let nd = d + 1;
                if dist.get(&k).is_none_or(|&old| nd < old) {
                    dist.insert(k.clone(), nd);
                    heap.push(Reverse((nd, k)));
                }
            }
        }
        None
    }

    #[test]
    fn straight_line_plan() {
        let env = GridEnv::empty(6, 3, Pose::new(1, 1, Dir::E), (3, 1));
        assert_eq!(optimal_plan(&env).unwrap(), vec![Action::Forward, Action::Forward]);
    }

    #[test]
    fn turn_around_plan_matches_bfs_distance() {
        let env = GridEnv::empty(5, 5, Pose::new(1, 1, Dir::N), (1, 3));
        let plan = optimal_plan(&env).unwrap();
        assert_eq!(plan.len(), 4);
        assert_eq!(Some(plan.len()), dijkstra_len(&env));
        let last = env.simulate(&plan).last().unwrap().outcome;
        assert_eq!(last, crate::gridworld::Outcome::GoalReached);
        // Left is tried before Right.
        assert_eq!(&plan[..2], &[Action::Left, Action::Left]);
    }

    #[test]
    fn start_at_goal_is_empty_plan() {
        let env = GridEnv::empty(3, 3, Pose::new(1, 1, Dir::N), (1, 1));
        assert!(optimal_plan(&env).unwrap().is_empty());
    }

    #[test]
    fn walled_off_goal_has_no_path() {
        let mut env = GridEnv::empty(5, 3, Pose::new(1, 1, Dir::E), (3, 1));
        env.set_cell(2, 1, Cell::Obstacle).unwrap();
        assert!(matches!(optimal_plan(&env), Err(OracleError::NoPath)));
    }

    #[test]
    fn closed_door_inserts_open() {
        let mut env = GridEnv::empty(5, 3, Pose::new(1, 1, Dir::E), (3, 1));
        env.set_cell(2, 1, Cell::Door { open: false }).unwrap();
        let plan = optimal_plan(&env).unwrap();
        assert_eq!(plan, vec![Action::Open, Action::Forward, Action::Forward]);
        assert_eq!(Some(3), dijkstra_len(&env));
    }

    #[test]
    fn plans_are_optimal_on_random_layouts() {
        for (spec, n) in [(EnvSpec::local_7x7(), 40), (EnvSpec::maze_10x10(), 40)] {
            for seed in 0..n {
                let env = build_env(&spec, seed).unwrap();
                let plan = optimal_plan(&env).unwrap();
                assert_eq!(Some(plan.len()), dijkstra_len(&env), "seed {seed}");
                let res = env.simulate(&plan);
                assert_eq!(res.last().unwrap().outcome, crate::gridworld::Outcome::GoalReached);
            }
        }
        let closed = EnvSpec {
            closed_doors: true,
            ..EnvSpec::maze_10x10()
        };
        for seed in 0..20 {
            let env = build_env(&closed, seed).unwrap();
            let plan = optimal_plan(&env).unwrap();
            assert_eq!(Some(plan.len()), dijkstra_len(&env), "seed {seed}");
        }
    }

    #[test]
    fn oracle_avoids_lava() {
        let spec = EnvSpec {
            lava: LavaSpec::Count(4),
            obstacles: 2,
            ..EnvSpec::local_7x7()
        };
        for seed in 0..30 {
            let env = build_env(&spec, seed).unwrap();
            let plan = optimal_plan(&env).unwrap();
            assert!(env
                .simulate(&plan)
                .iter()
                .all(|r| r.outcome != crate::gridworld::Outcome::LavaDeath));
        }
    }

    #[test]
    fn corrupt_zero_is_identity() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 3, 0.0, 1).unwrap();
        for d in &ds.demos {
            let c = corrupt(d, 0.0, &mut rng()).unwrap();
            assert_eq!(&c, d);
            assert!(c.optimal);
        }
    }

    #[test]
    fn full_corruption_keeps_a_quarter() {
        let mut r = rng();
        let original = vec![Action::Forward; 40_000];
        let c = corrupt_actions(&original, 1.0, &mut r);
        let same = c.iter().zip(&original).filter(|(a, b)| a == b).count() as f64 / original.len() as f64;
        assert!((same - 0.25).abs() < 0.01, "{same}");
    }

    #[test]
    fn corrupted_demos_stay_replayable() {
        let ds = generate_dataset(&EnvSpec::maze_10x10(), 30, 0.5, 9).unwrap();
        for d in &ds.demos {
            assert!(d.replays_exactly());
        }
        assert!(ds.demos.iter().any(|d| !d.optimal));
    }

    #[test]
    fn corrupted_demos_mix_random_and_optimal_decisions() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 200, 0.25, 5).unwrap();
        let (mut optimal_steps, mut total) = (0, 0);
        for d in &ds.demos {
            let env = d.layout.to_env(d.states[0].pose(), d.states[0].goal());
            for (s, a) in d.states.iter().zip(&d.actions) {
                let mut here = env.clone();
                here.reset_agent(s.pose());
                optimal_steps += (optimal_plan(&here).unwrap()[0] == *a) as usize;
                total += 1;
            }
        }
        // A random draw matches the optimal action a quarter of the time.
        let expected = 1.0 - 0.25 * 0.75;
        let frac = optimal_steps as f64 / total as f64;
        assert!((frac - expected).abs() < 0.04, "{frac}");
        let reached = ds.demos.iter().filter(|d| d.states.last().unwrap().pose().cell() == d.states[0].goal()).count();
        assert!(reached > 190, "{reached}");
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = generate_dataset(&EnvSpec::local_7x7(), 20, 0.25, 42).unwrap();
        let b = generate_dataset(&EnvSpec::local_7x7(), 20, 0.25, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&EnvSpec::local_7x7(), 20, 0.25, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_demo_dataset() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 1, 0.0, 0).unwrap();
        assert_eq!(ds.demos.len(), 1);
        assert!(matches!(
            generate_dataset(&EnvSpec::local_7x7(), 0, 0.0, 0),
            Err(OracleError::EmptyDataset)
        ));
        assert!(matches!(
            generate_dataset(&EnvSpec::local_7x7(), 1, 1.5, 0),
            Err(OracleError::InvalidProbability(_))
        ));
    }

    #[test]
    fn stochastic_demos_replay_with_executed_actions() {
        let spec = EnvSpec {
            dynamics: Dynamics::StochasticTurn { p_fail: 0.2 },
            ..EnvSpec::maze_10x10()
        };
        let ds = generate_dataset(&spec, 40, 0.0, 5).unwrap();
        for d in &ds.demos {
            assert!(d.replays_exactly());
            assert_eq!(d.states.last().unwrap().pose().cell(), d.states[0].goal());
        }
        assert!(ds.demos.iter().any(|d| !d.optimal));
    }
}
