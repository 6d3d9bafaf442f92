//! Grid world simulator.
//!
//! Single-room and multi-room maze layouts with border walls, obstacles,
//! lava and doors. The agent has a pose `(x, y, dir)` with `y` growing to the
//! south, and acts with `Left`, `Right`, `Forward` and `Open`. Randomness is
//! always drawn from an RNG supplied by the caller.

use std::collections::VecDeque;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of layout attempts before `build_env` gives up.
pub const MAX_LAYOUT_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("no solvable layout found after {attempts} attempts")]
    UnsolvableLayout { attempts: usize },
    #[error("invalid env spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dir {
    N = 0,
    E = 1,
    S = 2,
    W = 3,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::N, Dir::E, Dir::S, Dir::W];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Dir> {
        Dir::ALL.get(code as usize).copied()
    }

    /// Counter-clockwise quarter turn.
    pub fn left(self) -> Dir {
        Dir::ALL[(self as usize + 3) % 4]
    }

    /// Clockwise quarter turn.
    pub fn right(self) -> Dir {
        Dir::ALL[(self as usize + 1) % 4]
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Dir::N => (0, -1),
            Dir::E => (1, 0),
            Dir::S => (0, 1),
            Dir::W => (-1, 0),
        }
    }
}

/// Agent actions. `Pickup` and `Drop` exist so the stochastic fallback set
/// matches the full action list, but they are no-ops and never planned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Left = 0,
    Right = 1,
    Forward = 2,
    Open = 3,
    Pickup = 6,
    Drop = 7,
}

impl Action {
    /// The plannable vocabulary, in tie-breaking order.
    pub const PLANNING: [Action; 4] = [Action::Left, Action::Right, Action::Forward, Action::Open];
    pub const ALL: [Action; 6] = [
        Action::Left,
        Action::Right,
        Action::Forward,
        Action::Open,
        Action::Pickup,
        Action::Drop,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Action> {
        Action::ALL.iter().copied().find(|a| a.code() == code)
    }

    /// Index into the 4-way planning vocabulary, if plannable.
    pub fn vocab_index(self) -> Option<usize> {
        Action::PLANNING.iter().position(|&a| a == self)
    }

    pub fn is_turn(self) -> bool {
        matches!(self, Action::Left | Action::Right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pose {
    pub x: u8,
    pub y: u8,
    pub dir: Dir,
}

impl Pose {
    pub fn new(x: u8, y: u8, dir: Dir) -> Self {
        Pose { x, y, dir }
    }

    pub fn cell(&self) -> (u8, u8) {
        (self.x, self.y)
    }

    /// The cell in front of the agent, or `None` if it would leave the grid.
    pub fn front(&self, width: u8, height: u8) -> Option<(u8, u8)> {
        let (dx, dy) = self.dir.delta();
        let nx = self.x as i32 + dx;
        let ny = self.y as i32 + dy;
        if nx < 0 || ny < 0 || nx >= width as i32 || ny >= height as i32 {
            None
        } else {
            Some((nx as u8, ny as u8))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Empty,
    Wall,
    Obstacle,
    Lava,
    Door { open: bool },
}

impl Cell {
    /// Whether the agent can move into this cell.
    pub fn passable(self) -> bool {
        matches!(self, Cell::Empty | Cell::Lava | Cell::Door { open: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Dynamics {
    Deterministic,
    /// Turns fail with probability `p_fail`, in which case a uniformly drawn
    /// different action is executed instead.
    StochasticTurn { p_fail: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Ongoing,
    GoalReached,
    LavaDeath,
    StepLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepResult {
    pub next_state: Pose,
    /// The action actually applied, which differs from the commanded one
    /// when a stochastic turn fails.
    pub executed: Action,
    pub terminated: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LavaSpec {
    Count(usize),
    Cells(Vec<(u8, u8)>),
}

/// Parameters of an environment family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub width: u8,
    pub height: u8,
    /// Number of rooms; must be a perfect square `k * k`.
    pub rooms: usize,
    pub obstacles: usize,
    pub lava: LavaSpec,
    pub dynamics: Dynamics,
    pub closed_doors: bool,
    pub agent: Option<Pose>,
    pub goal: Option<(u8, u8)>,
    pub seed: u64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            width: 7,
            height: 7,
            rooms: 1,
            obstacles: 5,
            lava: LavaSpec::Count(0),
            dynamics: Dynamics::Deterministic,
            closed_doors: false,
            agent: None,
            goal: None,
            seed: 0,
        }
    }
}

impl EnvSpec {
    /// The 7x7 single room with 5 obstacles.
    pub fn local_7x7() -> Self {
        EnvSpec::default()
    }

    /// The 10x10 maze of 3x3 rooms joined by open doors, with one obstacle.
    pub fn maze_10x10() -> Self {
        EnvSpec {
            width: 10,
            height: 10,
            rooms: 9,
            obstacles: 1,
            ..EnvSpec::default()
        }
    }

    pub fn room_grid(&self) -> Result<usize, EnvError> {
        let k = (self.rooms as f64).sqrt().round() as usize;
        if k == 0 || k * k != self.rooms {
            return Err(EnvError::InvalidSpec(format!(
                "rooms must be a perfect square, got {}",
                self.rooms
            )));
        }
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.width < 3 || self.height < 3 {
            return Err(EnvError::InvalidSpec(format!(
                "dimensions must be at least 3, got {}x{}",
                self.width, self.height
            )));
        }
        let k = self.room_grid()?;
        if k > 1 && ((self.width as usize - 1) / k < 2 || (self.height as usize - 1) / k < 2) {
            return Err(EnvError::InvalidSpec(format!(
                "{} rooms do not fit in {}x{}",
                self.rooms, self.width, self.height
            )));
        }
        if let Dynamics::StochasticTurn { p_fail } = self.dynamics {
            if !(0.0..=1.0).contains(&p_fail) {
                return Err(EnvError::InvalidSpec(format!("p_fail {p_fail} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Apply one `key=value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), EnvError> {
        let bad = |what: &str| EnvError::InvalidSpec(format!("bad value for {what}: {value:?}"));
        match key {
            "width" => self.width = value.parse().map_err(|_| bad(key))?,
            "height" => self.height = value.parse().map_err(|_| bad(key))?,
            "size" => {
                let s: u8 = value.parse().map_err(|_| bad(key))?;
                self.width = s;
                self.height = s;
            }
            "rooms" => self.rooms = value.parse().map_err(|_| bad(key))?,
            "obstacles" => self.obstacles = value.parse().map_err(|_| bad(key))?,
            "lava_cells" | "lava" => {
                self.lava = if value.contains(':') {
                    LavaSpec::Cells(parse_cells(value).ok_or_else(|| bad(key))?)
                } else {
                    LavaSpec::Count(value.parse().map_err(|_| bad(key))?)
                }
            }
            "dynamics" => {
                self.dynamics = match value {
                    "deterministic" => Dynamics::Deterministic,
                    "stochastic" => Dynamics::StochasticTurn {
                        p_fail: match self.dynamics {
                            Dynamics::StochasticTurn { p_fail } => p_fail,
                            Dynamics::Deterministic => 0.2,
                        },
                    },
                    _ => return Err(bad(key)),
                }
            }
            "p_fail" => {
                let p: f64 = value.parse().map_err(|_| bad(key))?;
                self.dynamics = Dynamics::StochasticTurn { p_fail: p };
            }
            "closed_doors" => self.closed_doors = value.parse().map_err(|_| bad(key))?,
            "agent" => {
                let parts: Vec<&str> = value.split(':').collect();
                if parts.len() != 3 {
                    return Err(bad(key));
                }
                let x = parts[0].parse().map_err(|_| bad(key))?;
                let y = parts[1].parse().map_err(|_| bad(key))?;
                let dir = match parts[2] {
                    "N" => Dir::N,
                    "E" => Dir::E,
                    "S" => Dir::S,
                    "W" => Dir::W,
                    _ => return Err(bad(key)),
                };
                self.agent = Some(Pose::new(x, y, dir));
            }
            "goal" => {
                let cells = parse_cells(value).ok_or_else(|| bad(key))?;
                if cells.len() != 1 {
                    return Err(bad(key));
                }
                self.goal = Some(cells[0]);
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            _ => return Err(EnvError::InvalidSpec(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a plain `key=value` listing. Blank lines and `#` comments are skipped.
    pub fn parse_kv(text: &str) -> Result<EnvSpec, EnvError> {
        let mut spec = EnvSpec::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EnvError::InvalidSpec(format!("expected key=value, got {line:?}")))?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses `x:y,x:y,...`.
fn parse_cells(value: &str) -> Option<Vec<(u8, u8)>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (x, y) = pair.trim().split_once(':')?;
            Some((x.trim().parse().ok()?, y.trim().parse().ok()?))
        })
        .collect()
}

/// What a planning model perceives of an environment: the cells that block
/// movement. Lava is deliberately absent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub width: u8,
    pub height: u8,
    /// Walls and obstacles, sorted.
    pub blocked: Vec<(u8, u8)>,
    /// Closed doors, sorted.
    pub closed_doors: Vec<(u8, u8)>,
}

impl Layout {
    pub fn from_env(env: &GridEnv) -> Layout {
        let mut blocked = Vec::new();
        let mut closed_doors = Vec::new();
        for y in 0..env.height {
            for x in 0..env.width {
                match env.cell(x, y) {
                    Cell::Wall | Cell::Obstacle => blocked.push((x, y)),
                    Cell::Door { open: false } => closed_doors.push((x, y)),
                    _ => {}
                }
            }
        }
        blocked.sort_unstable();
        closed_doors.sort_unstable();
        Layout {
            width: env.width,
            height: env.height,
            blocked,
            closed_doors,
        }
    }

    /// Copy of this layout with some blocked cells removed from view.
    pub fn without(&self, hidden: &[(u8, u8)]) -> Layout {
        Layout {
            blocked: self.blocked.iter().copied().filter(|c| !hidden.contains(c)).collect(),
            ..self.clone()
        }
    }

    /// Every blocked or closed-door cell.
    pub fn occupied(&self) -> impl Iterator<Item = (u8, u8)> + '_ {
        self.blocked.iter().chain(self.closed_doors.iter()).copied()
    }

    /// Rebuild a deterministic environment with this layout. Border cells
    /// become walls, interior blocked cells become obstacles.
    pub fn to_env(&self, agent: Pose, goal: (u8, u8)) -> GridEnv {
        let mut cells = vec![Cell::Empty; self.width as usize * self.height as usize];
        let w = self.width;
        let h = self.height;
        for &(x, y) in &self.blocked {
            let border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            cells[y as usize * w as usize + x as usize] = if border { Cell::Wall } else { Cell::Obstacle };
        }
        for &(x, y) in &self.closed_doors {
            cells[y as usize * w as usize + x as usize] = Cell::Door { open: false };
        }
        GridEnv::from_cells(w, h, cells, agent, goal, Dynamics::Deterministic)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEnv {
    width: u8,
    height: u8,
    cells: Vec<Cell>,
    agent: Pose,
    goal: (u8, u8),
    dynamics: Dynamics,
    steps: usize,
    step_limit: usize,
    outcome: Outcome,
}

impl GridEnv {
    /// An empty room surrounded by walls.
    pub fn empty(width: u8, height: u8, agent: Pose, goal: (u8, u8)) -> GridEnv {
        let mut cells = vec![Cell::Empty; width as usize * height as usize];
        for y in 0..height {
            for x in 0..width {
                if x == 0 || y == 0 || x == width - 1 || y == height - 1 {
                    cells[y as usize * width as usize + x as usize] = Cell::Wall;
                }
            }
        }
        GridEnv::from_cells(width, height, cells, agent, goal, Dynamics::Deterministic)
    }

    fn from_cells(
        width: u8,
        height: u8,
        cells: Vec<Cell>,
        agent: Pose,
        goal: (u8, u8),
        dynamics: Dynamics,
    ) -> GridEnv {
        let mut env = GridEnv {
            width,
            height,
            cells,
            agent,
            goal,
            dynamics,
            steps: 0,
            step_limit: default_step_limit(width, height),
            outcome: Outcome::Ongoing,
        };
        env.outcome = env.outcome_here();
        env
    }

    pub fn width(&self) -> u8 {
        self.width
    }

    pub fn height(&self) -> u8 {
        self.height
    }

    pub fn agent(&self) -> Pose {
        self.agent
    }

    pub fn goal(&self) -> (u8, u8) {
        self.goal
    }

    pub fn dynamics(&self) -> Dynamics {
        self.dynamics
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step_limit(&self) -> usize {
        self.step_limit
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn is_terminated(&self) -> bool {
        self.outcome != Outcome::Ongoing
    }

    pub fn in_bounds(&self, x: u8, y: u8) -> bool {
        x < self.width && y < self.height
    }

    pub fn cell(&self, x: u8, y: u8) -> Cell {
        self.cells[y as usize * self.width as usize + x as usize]
    }

    pub fn set_dynamics(&mut self, dynamics: Dynamics) {
        self.dynamics = dynamics;
    }

    pub fn set_step_limit(&mut self, limit: usize) {
        self.step_limit = limit;
    }

    /// Place a cell kind. Agent and goal cells may only hold `Empty`.
    pub fn set_cell(&mut self, x: u8, y: u8, cell: Cell) -> Result<(), EnvError> {
        if !self.in_bounds(x, y) {
            return Err(EnvError::InvalidSpec(format!("cell ({x}, {y}) out of bounds")));
        }
        if cell != Cell::Empty && ((x, y) == self.agent.cell() || (x, y) == self.goal) {
            return Err(EnvError::InvalidSpec(format!("cell ({x}, {y}) holds the agent or goal")));
        }
        self.cells[y as usize * self.width as usize + x as usize] = cell;
        Ok(())
    }

    /// Teleport the agent, resetting the episode counters.
    pub fn reset_agent(&mut self, pose: Pose) {
        self.agent = pose;
        self.steps = 0;
        self.outcome = self.outcome_here();
    }

    fn cells_of(&self, pred: impl Fn(Cell) -> bool) -> Vec<(u8, u8)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if pred(self.cell(x, y)) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn walls(&self) -> Vec<(u8, u8)> {
        self.cells_of(|c| c == Cell::Wall)
    }

    pub fn obstacles(&self) -> Vec<(u8, u8)> {
        self.cells_of(|c| c == Cell::Obstacle)
    }

    pub fn lava(&self) -> Vec<(u8, u8)> {
        self.cells_of(|c| c == Cell::Lava)
    }

    pub fn doors(&self) -> Vec<(u8, u8, bool)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if let Cell::Door { open } = self.cell(x, y) {
                    out.push((x, y, open));
                }
            }
        }
        out
    }

    pub fn layout(&self) -> Layout {
        Layout::from_env(self)
    }

    fn outcome_here(&self) -> Outcome {
        if self.cell(self.agent.x, self.agent.y) == Cell::Lava {
            Outcome::LavaDeath
        } else if self.agent.cell() == self.goal {
            Outcome::GoalReached
        } else if self.steps >= self.step_limit {
            Outcome::StepLimit
        } else {
            Outcome::Ongoing
        }
    }

    /// Choose the action that actually runs under the current dynamics.
    fn resolve_action<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Action {
        match self.dynamics {
            Dynamics::StochasticTurn { p_fail } if action.is_turn() && p_fail > 0.0 => {
                if rng.gen::<f64>() < p_fail {
                    let others: Vec<Action> = Action::ALL.iter().copied().filter(|&a| a != action).collect();
                    others[rng.gen_range(0..others.len())]
                } else {
                    action
                }
            }
            _ => action,
        }
    }

    /// Pose reached by applying `action` deterministically, plus a door to
    /// open if the action opens one.
    fn transition(&self, pose: Pose, action: Action) -> (Pose, Option<(u8, u8)>) {
        match action {
            Action::Left => (Pose { dir: pose.dir.left(), ..pose }, None),
            Action::Right => (Pose { dir: pose.dir.right(), ..pose }, None),
            Action::Forward => match pose.front(self.width, self.height) {
                Some((x, y)) if self.cell(x, y).passable() => (Pose { x, y, ..pose }, None),
                _ => (pose, None),
            },
            Action::Open => match pose.front(self.width, self.height) {
                Some((x, y)) if self.cell(x, y) == (Cell::Door { open: false }) => (pose, Some((x, y))),
                _ => (pose, None),
            },
            Action::Pickup | Action::Drop => (pose, None),
        }
    }

    /// Advance the episode by one action.
    ///
    /// Calling `step` on a terminated episode is a no-op that reports the
    /// terminal outcome again.
    pub fn step<R: Rng + ?Sized>(&mut self, action: Action, rng: &mut R) -> StepResult {
        if self.is_terminated() {
            return StepResult {
                next_state: self.agent,
                executed: action,
                terminated: true,
                outcome: self.outcome,
            };
        }
        let executed = self.resolve_action(action, rng);
        let (pose, door) = self.transition(self.agent, executed);
        if let Some((x, y)) = door {
            self.cells[y as usize * self.width as usize + x as usize] = Cell::Door { open: true };
        }
        self.agent = pose;
        self.steps += 1;
        self.outcome = self.outcome_here();
        StepResult {
            next_state: pose,
            executed,
            terminated: self.is_terminated(),
            outcome: self.outcome,
        }
    }

    /// Roll out `actions` under deterministic dynamics from the current pose
    /// without touching `self`. Stops early on termination.
    pub fn simulate(&self, actions: &[Action]) -> Vec<StepResult> {
        let mut env = self.clone();
        env.dynamics = Dynamics::Deterministic;
        env.steps = 0;
        env.step_limit = usize::MAX;
        env.outcome = env.outcome_here();
        let mut out = Vec::with_capacity(actions.len());
        // Deterministic dynamics never consult the RNG.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &a in actions {
            if env.is_terminated() {
                break;
            }
            out.push(env.step(a, &mut rng));
        }
        out
    }

    /// Breadth-first reachability of the goal over cells, treating doors as
    /// passable and lava, walls and obstacles as blocked.
    pub fn is_solvable(&self) -> bool {
        let w = self.width as usize;
        let idx = |x: u8, y: u8| y as usize * w + x as usize;
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::new();
        let start = self.agent.cell();
        seen[idx(start.0, start.1)] = true;
        queue.push_back(start);
        while let Some((x, y)) = queue.pop_front() {
            if (x, y) == self.goal {
                return true;
            }
            for d in Dir::ALL {
                if let Some((nx, ny)) = Pose::new(x, y, d).front(self.width, self.height) {
                    let c = self.cell(nx, ny);
                    if matches!(c, Cell::Empty | Cell::Door { .. }) && !seen[idx(nx, ny)] {
                        seen[idx(nx, ny)] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
        false
    }

    /// ASCII rendering, one row per line.
    pub fn ascii(&self) -> String {
        let mut s = String::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let ch = if self.agent.cell() == (x, y) {
                    match self.agent.dir {
                        Dir::N => '^',
                        Dir::E => '>',
                        Dir::S => 'v',
                        Dir::W => '<',
                    }
                } else if self.goal == (x, y) {
                    'G'
                } else {
                    match self.cell(x, y) {
                        Cell::Empty => '.',
                        Cell::Wall => '#',
                        Cell::Obstacle => 'o',
                        Cell::Lava => '~',
                        Cell::Door { open: true } => 'd',
                        Cell::Door { open: false } => 'D',
                    }
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for GridEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.ascii())
    }
}

/// Episode step limit: 4 * (width + height).
pub fn default_step_limit(width: u8, height: u8) -> usize {
    4 * (width as usize + height as usize)
}

/// Positions of the interior wall lines splitting `len` cells into `k` rooms.
fn wall_lines(len: u8, k: usize) -> Vec<u8> {
    (0..=k).map(|i| (i * (len as usize - 1) / k) as u8).collect()
}

/// Build a solvable environment from `spec`, rerolling the layout up to
/// [`MAX_LAYOUT_ATTEMPTS`] times.
pub fn build_env(spec: &EnvSpec, seed: u64) -> Result<GridEnv, EnvError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let env = sample_layout(spec, &mut rng)?;
        if env.is_solvable() {
            return Ok(env);
        }
    }
    Err(EnvError::UnsolvableLayout {
        attempts: MAX_LAYOUT_ATTEMPTS,
    })
}

fn sample_layout<R: Rng>(spec: &EnvSpec, rng: &mut R) -> Result<GridEnv, EnvError> {
    let (w, h) = (spec.width, spec.height);
    let placeholder = Pose::new(1, 1, Dir::E);
    let mut env = GridEnv::empty(w, h, placeholder, (1, 1));
    env.dynamics = spec.dynamics;

    let k = spec.room_grid()?;
    if k > 1 {
        let xs = wall_lines(w, k);
        let ys = wall_lines(h, k);
        for &x in &xs[1..k] {
            for y in 0..h {
                env.cells[y as usize * w as usize + x as usize] = Cell::Wall;
            }
        }
        for &y in &ys[1..k] {
            for x in 0..w {
                env.cells[y as usize * w as usize + x as usize] = Cell::Wall;
            }
        }
        let door = Cell::Door {
            open: !spec.closed_doors,
        };
        for j in 0..k {
            for i in 0..k {
                if i + 1 < k {
                    let x = xs[i + 1];
                    let y = rng.gen_range(ys[j] + 1..ys[j + 1]);
                    env.cells[y as usize * w as usize + x as usize] = door;
                }
                if j + 1 < k {
                    let y = ys[j + 1];
                    let x = rng.gen_range(xs[i] + 1..xs[i + 1]);
                    env.cells[y as usize * w as usize + x as usize] = door;
                }
            }
        }
    }

    let mut free: Vec<(u8, u8)> = env.cells_of(|c| c == Cell::Empty);
    free.shuffle(rng);

    let agent = match spec.agent {
        Some(p) => p,
        None => {
            let (x, y) = free.pop().ok_or_else(|| EnvError::InvalidSpec("no free cell for the agent".into()))?;
            Pose::new(x, y, Dir::ALL[rng.gen_range(0..4)])
        }
    };
    free.retain(|&c| c != agent.cell());
    let goal = match spec.goal {
        Some(g) => g,
        None => free.pop().ok_or_else(|| EnvError::InvalidSpec("no free cell for the goal".into()))?,
    };
    free.retain(|&c| c != goal);
    for (x, y) in [agent.cell(), goal] {
        if !env.in_bounds(x, y) || env.cell(x, y) != Cell::Empty {
            return Err(EnvError::InvalidSpec(format!("agent/goal cell ({x}, {y}) is not free")));
        }
    }

    if spec.obstacles > free.len() && spec.obstacles > 0 {
        return Err(EnvError::InvalidSpec(format!(
            "{} obstacles leave no free path cell",
            spec.obstacles
        )));
    }
    for _ in 0..spec.obstacles {
        let (x, y) = free.pop().expect("checked above");
        env.cells[y as usize * w as usize + x as usize] = Cell::Obstacle;
    }
    match &spec.lava {
        LavaSpec::Count(n) => {
            if *n > free.len() {
                return Err(EnvError::InvalidSpec(format!("no room for {n} lava cells")));
            }
            for _ in 0..*n {
                let (x, y) = free.pop().expect("checked above");
                env.cells[y as usize * w as usize + x as usize] = Cell::Lava;
            }
        }
        LavaSpec::Cells(cells) => {
            for &(x, y) in cells {
                if !free.contains(&(x, y)) {
                    return Err(EnvError::InvalidSpec(format!("lava cell ({x}, {y}) is not free")));
                }
                env.cells[y as usize * w as usize + x as usize] = Cell::Lava;
            }
        }
    }

    env.agent = agent;
    env.goal = goal;
    env.outcome = env.outcome_here();
    Ok(env)
}
