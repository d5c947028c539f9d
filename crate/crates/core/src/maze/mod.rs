//! Point-mass maze worlds: maze definitions, double-integrator dynamics, a PD
//! tracking controller, offline dataset generation, plan scoring and
//! closed-loop execution.

mod dataset;
mod eval;

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{generate_dataset, generate_episode, Dataset, DatasetConfig, DATASET_VERSION};
pub use eval::{
    evaluate_plan, execute_plan, EpisodeOutcome, ExecutionConfig, PlanScore, Replanner,
};

/// Grid cell as `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Continuous `[x, y]` coordinates of the cell centre.
    pub fn center(self) -> [f64; 2] {
        [self.col as f64 + 0.5, self.row as f64 + 0.5]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

/// A start/goal pair on one maze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub start: Cell,
    pub goal: Cell,
}

/// Physical and scoring constants carried in the maze header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MazeParams {
    /// Episode horizon `H` in steps; also the planning horizon.
    pub horizon: usize,
    pub goal_radius: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub penalty_weight: f64,
}

impl Default for MazeParams {
    fn default() -> Self {
        Self {
            horizon: 500,
            goal_radius: 0.5,
            v_max: 1.0,
            a_max: 0.5,
            penalty_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Maze {
    name: String,
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
    tasks: Vec<Task>,
    active: usize,
    params: MazeParams,
}

/// Position and velocity of the point mass, in cells and cells/step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl PointState {
    pub fn at_rest(position: [f64; 2]) -> Self {
        Self {
            position,
            velocity: [0.0; 2],
        }
    }

    pub fn to_vec(self) -> [f64; 4] {
        [
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
        ]
    }
}

pub(crate) fn norm2(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn clamp_norm(v: [f64; 2], max: f64) -> [f64; 2] {
    let n = norm2(v);
    if n > max && n > 0.0 {
        [v[0] * max / n, v[1] * max / n]
    } else {
        v
    }
}

const BUNDLED: &[(&str, &str)] = &[
    ("medium", include_str!("../../mazes/medium.maze")),
    ("large", include_str!("../../mazes/large.maze")),
    ("giant", include_str!("../../mazes/giant.maze")),
    ("deadend", include_str!("../../mazes/deadend.maze")),
];

/// Names of the mazes shipped with the crate.
pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

pub fn bundled_spec(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn bundled(name: &str) -> Result<Maze> {
    let spec = bundled_spec(name)
        .ok_or_else(|| Error::Config(format!("unknown bundled maze `{name}`")))?;
    load_maze(spec)
}

fn parse_cell(s: &str, line: usize) -> Result<Cell> {
    let (r, c) = s.trim().split_once(',').ok_or_else(|| Error::MazeParse {
        line,
        msg: format!("expected `row,col`, got `{s}`"),
    })?;
    let num = |v: &str| {
        v.trim().parse::<usize>().map_err(|e| Error::MazeParse {
            line,
            msg: format!("bad cell coordinate `{v}`: {e}"),
        })
    };
    Ok(Cell::new(num(r)?, num(c)?))
}

/// Parses a maze from its text form: `key = value` header lines followed by a
/// rectangular grid of `#` (wall), `.` (free), `S` (start) and `G` (goal).
pub fn load_maze(spec: &str) -> Result<Maze> {
    let mut params = MazeParams::default();
    let mut name = String::from("unnamed");
    let mut extra_tasks = Vec::new();
    let mut grid: Vec<(usize, &str)> = Vec::new();

    for (idx, raw) in spec.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            if !grid.is_empty() {
                return Err(Error::MazeParse {
                    line: line_no,
                    msg: "header line after grid".into(),
                });
            }
            let key = key.trim();
            let value = value.trim();
            let bad = |e: &dyn fmt::Display| Error::MazeParse {
                line: line_no,
                msg: format!("bad value for `{key}`: {e}"),
            };
            match key {
                "name" => name = value.to_string(),
                "horizon" => params.horizon = value.parse().map_err(|e| bad(&e))?,
                "goal_radius" => params.goal_radius = value.parse().map_err(|e| bad(&e))?,
                "v_max" => params.v_max = value.parse().map_err(|e| bad(&e))?,
                "a_max" => params.a_max = value.parse().map_err(|e| bad(&e))?,
                "penalty_weight" => params.penalty_weight = value.parse().map_err(|e| bad(&e))?,
                "tasks" => {
                    for pair in value.split(';').filter(|p| !p.trim().is_empty()) {
                        let (a, b) = pair.split_once("->").ok_or_else(|| Error::MazeParse {
                            line: line_no,
                            msg: format!("task `{pair}` must look like `r,c->r,c`"),
                        })?;
                        extra_tasks.push(Task {
                            start: parse_cell(a, line_no)?,
                            goal: parse_cell(b, line_no)?,
                        });
                    }
                }
                other => {
                    return Err(Error::MazeParse {
                        line: line_no,
                        msg: format!("unknown header key `{other}`"),
                    })
                }
            }
        } else {
            grid.push((line_no, line));
        }
    }

    if grid.is_empty() {
        return Err(Error::MazeParse {
            line: spec.lines().count().max(1),
            msg: "missing grid".into(),
        });
    }
    let cols = grid[0].1.chars().count();
    let rows = grid.len();
    let mut walls = Vec::with_capacity(rows * cols);
    let mut start = None;
    let mut goal = None;
    for (r, (line_no, line)) in grid.iter().enumerate() {
        if line.chars().count() != cols {
            return Err(Error::MazeParse {
                line: *line_no,
                msg: format!(
                    "ragged row: expected {cols} columns, got {}",
                    line.chars().count()
                ),
            });
        }
        for (c, ch) in line.chars().enumerate() {
            match ch {
                '#' => walls.push(true),
                '.' => walls.push(false),
                'S' => {
                    if start.replace(Cell::new(r, c)).is_some() {
                        return Err(Error::MazeParse {
                            line: *line_no,
                            msg: "more than one start".into(),
                        });
                    }
                    walls.push(false);
                }
                'G' => {
                    if goal.replace(Cell::new(r, c)).is_some() {
                        return Err(Error::MazeParse {
                            line: *line_no,
                            msg: "more than one goal".into(),
                        });
                    }
                    walls.push(false);
                }
                other => {
                    return Err(Error::MazeParse {
                        line: *line_no,
                        msg: format!("unexpected character `{other}`"),
                    })
                }
            }
        }
    }
    let last_line = grid.last().map(|(l, _)| *l).unwrap_or(1);
    let start = start.ok_or(Error::MazeParse {
        line: last_line,
        msg: "missing start `S`".into(),
    })?;
    let goal = goal.ok_or(Error::MazeParse {
        line: last_line,
        msg: "missing goal `G`".into(),
    })?;

    if params.horizon == 0
        || params.goal_radius <= 0.0
        || params.v_max <= 0.0
        || params.a_max <= 0.0
    {
        return Err(Error::MazeValidation(
            "horizon, goal_radius, v_max and a_max must be positive".into(),
        ));
    }
    if params.v_max > 1.0 {
        return Err(Error::MazeValidation(
            "v_max above one cell per step would let the point tunnel through walls".into(),
        ));
    }

    let mut tasks = vec![Task { start, goal }];
    tasks.extend(extra_tasks);
    let maze = Maze {
        name,
        rows,
        cols,
        walls,
        tasks,
        active: 0,
        params,
    };
    for (i, t) in maze.tasks.iter().enumerate() {
        for (label, cell) in [("start", t.start), ("goal", t.goal)] {
            if !maze.is_free(cell) {
                return Err(Error::MazeValidation(format!(
                    "task {i}: {label} {cell} is not a free cell"
                )));
            }
        }
        if maze.distances_from(t.start)[maze.index(t.goal)].is_none() {
            return Err(Error::MazeValidation(format!(
                "task {i}: goal {} unreachable from start {}",
                t.goal, t.start
            )));
        }
    }
    Ok(maze)
}

impl Maze {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn params(&self) -> &MazeParams {
        &self.params
    }

    pub fn horizon(&self) -> usize {
        self.params.horizon
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self) -> Task {
        self.tasks[self.active]
    }

    pub fn start(&self) -> Cell {
        self.task().start
    }

    pub fn goal(&self) -> Cell {
        self.task().goal
    }

    pub fn goal_position(&self) -> [f64; 2] {
        self.goal().center()
    }

    /// Copy of the maze with task `i` active. Task ids wrap around.
    pub fn with_task(&self, i: usize) -> Maze {
        let mut m = self.clone();
        m.active = i % self.tasks.len();
        m
    }

    /// Copy with a different start/goal pair (both must be free and connected).
    pub fn with_start_goal(&self, start: Cell, goal: Cell) -> Result<Maze> {
        if !self.is_free(start) || !self.is_free(goal) {
            return Err(Error::MazeValidation("start and goal must be free".into()));
        }
        if self.distances_from(start)[self.index(goal)].is_none() {
            return Err(Error::MazeValidation("goal unreachable".into()));
        }
        let mut m = self.clone();
        m.tasks.push(Task { start, goal });
        m.active = m.tasks.len() - 1;
        Ok(m)
    }

    pub fn with_params(&self, params: MazeParams) -> Maze {
        let mut m = self.clone();
        m.params = params;
        m
    }

    fn index(&self, c: Cell) -> usize {
        c.row * self.cols + c.col
    }

    pub fn is_wall(&self, c: Cell) -> bool {
        c.row >= self.rows || c.col >= self.cols || self.walls[self.index(c)]
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_wall(c)
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Option<Cell> {
        if !(p[0] >= 0.0 && p[1] >= 0.0) || !p[0].is_finite() || !p[1].is_finite() {
            return None;
        }
        let (c, r) = (p[0].floor() as usize, p[1].floor() as usize);
        (r < self.rows && c < self.cols).then(|| Cell::new(r, c))
    }

    /// True when `p` lies outside the grid or inside a wall cell.
    pub fn is_blocked(&self, p: [f64; 2]) -> bool {
        self.cell_of(p).is_none_or(|c| self.is_wall(c))
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| Cell::new(r, c)))
            .filter(|&c| self.is_free(c))
            .collect()
    }

    fn neighbours(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        let deltas: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
        deltas.into_iter().filter_map(move |(dr, dc)| {
            let r = c.row.checked_add_signed(dr)?;
            let cc = c.col.checked_add_signed(dc)?;
            let n = Cell::new(r, cc);
            self.is_free(n).then_some(n)
        })
    }

    /// Breadth-first step distances from `from` to every cell (`None` if unreachable).
    pub fn distances_from(&self, from: Cell) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.rows * self.cols];
        if self.is_wall(from) {
            return dist;
        }
        let mut queue = VecDeque::from([from]);
        dist[self.index(from)] = Some(0);
        while let Some(c) = queue.pop_front() {
            let d = dist[self.index(c)].unwrap();
            for n in self.neighbours(c) {
                let i = self.index(n);
                if dist[i].is_none() {
                    dist[i] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Shortest 4-connected cell path from `from` to `to`, inclusive of both ends.
    pub fn shortest_path(&self, from: Cell, to: Cell) -> Option<Vec<Cell>> {
        let dist = self.distances_from(to);
        dist[self.index(from)]?;
        let mut path = vec![from];
        let mut cur = from;
        while cur != to {
            let d = dist[self.index(cur)].unwrap();
            cur = self
                .neighbours(cur)
                .find(|n| dist[self.index(*n)] == Some(d - 1))
                .expect("BFS distances are consistent");
            path.push(cur);
        }
        Some(path)
    }

    /// Advances the point mass one step. Collisions are resolved per axis: the
    /// blocked coordinate is clipped to the wall face and its velocity zeroed.
    pub fn step(&self, state: PointState, action: [f64; 2]) -> PointState {
        let a = clamp_norm(action, self.params.a_max);
        let mut v = clamp_norm(
            [state.velocity[0] + a[0], state.velocity[1] + a[1]],
            self.params.v_max,
        );
        let mut p = state.position;
        const FACE: f64 = 1e-6;
        for axis in 0..2 {
            let mut next = p;
            next[axis] += v[axis];
            if self.is_blocked(next) {
                let cur = p[axis].floor();
                next[axis] = if v[axis] > 0.0 {
                    cur + 1.0 - FACE
                } else {
                    cur + FACE
                };
                v[axis] = 0.0;
            }
            p = next;
        }
        PointState {
            position: p,
            velocity: v,
        }
    }

    /// Renders the maze with an optional path overlay as text.
    pub fn render(&self, path: &[[f64; 2]]) -> String {
        let mut out = String::new();
        let visited: std::collections::HashSet<Cell> =
            path.iter().filter_map(|p| self.cell_of(*p)).collect();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let cell = Cell::new(r, c);
                let ch = if cell == self.start() {
                    'S'
                } else if cell == self.goal() {
                    'G'
                } else if self.is_wall(cell) {
                    '#'
                } else if visited.contains(&cell) {
                    'o'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    /// Text form accepted by [`load_maze`].
    pub fn to_spec(&self) -> String {
        let p = &self.params;
        let mut out = format!(
            "name = {}\nhorizon = {}\ngoal_radius = {}\nv_max = {}\na_max = {}\npenalty_weight = {}\n",
            self.name, p.horizon, p.goal_radius, p.v_max, p.a_max, p.penalty_weight
        );
        if self.tasks.len() > 1 {
            let tasks: Vec<String> = self.tasks[1..]
                .iter()
                .map(|t| format!("{}->{}", t.start, t.goal))
                .collect();
            out.push_str(&format!("tasks = {}\n", tasks.join("; ")));
        }
        let first = self.tasks[0];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let cell = Cell::new(r, c);
                out.push(if cell == first.start {
                    'S'
                } else if cell == first.goal {
                    'G'
                } else if self.is_wall(cell) {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }
}

/// PD law toward a subgoal position, clamped to the actuator limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicController {
    pub kp: f64,
    pub kd: f64,
    pub a_max: f64,
}

impl Default for HeuristicController {
    fn default() -> Self {
        Self {
            kp: 1.0,
            kd: 0.5,
            a_max: 0.5,
        }
    }
}

impl HeuristicController {
    pub fn action(&self, state: &PointState, subgoal: [f64; 2]) -> [f64; 2] {
        let a = [
            self.kp * (subgoal[0] - state.position[0]) - self.kd * state.velocity[0],
            self.kp * (subgoal[1] - state.position[1]) - self.kd * state.velocity[1],
        ];
        clamp_norm(a, self.a_max)
    }
}

pub fn heuristic_controller(state: &PointState, subgoal: [f64; 2]) -> [f64; 2] {
    HeuristicController::default().action(state, subgoal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ROOM: &str = "horizon = 50\n#####\n#S..#\n#...#\n#..G#\n#####\n";

    #[test]
    fn smallest_open_room() {
        let m = load_maze("horizon = 10\n#####\n#SG.#\n#...#\n#...#\n#####\n").unwrap();
        assert_eq!(m.start(), Cell::new(1, 1));
        assert_eq!(m.goal(), Cell::new(1, 2));
        assert_eq!(m.horizon(), 10);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = load_maze("horizon = 10\n#####\n#S.G\n#####\n").unwrap_err();
        assert!(matches!(err, Error::MazeParse { line: 3, .. }), "{err}");
        let err = load_maze("horizon = 10\n###\n#S#\n###\n").unwrap_err();
        assert!(matches!(err, Error::MazeParse { .. }));
        let err = load_maze("bogus = 1\n###\n#SG\n###\n").unwrap_err();
        assert!(matches!(err, Error::MazeParse { line: 1, .. }));
    }

    #[test]
    fn unreachable_goal_rejected() {
        let err = load_maze("#######\n#S.#.G#\n#######\n").unwrap_err();
        assert!(matches!(err, Error::MazeValidation(_)));
    }

    #[test]
    fn task_goal_inside_wall_rejected() {
        let err = load_maze("tasks = 1,1->0,0\n#####\n#S.G#\n#####\n").unwrap_err();
        assert!(matches!(err, Error::MazeValidation(_)), "{err}");
    }

    #[test]
    fn bundled_mazes_load_with_expected_horizons() {
        for (name, h) in [("medium", 500), ("large", 500), ("giant", 1000)] {
            let m = bundled(name).unwrap();
            assert_eq!(m.horizon(), h, "{name}");
            assert_eq!(m.tasks().len(), 5, "{name}");
        }
        assert!(bundled("deadend").is_ok());
    }

    #[test]
    fn spec_round_trip() {
        let m = bundled("large").unwrap();
        assert_eq!(load_maze(&m.to_spec()).unwrap(), m);
    }

    #[test]
    fn zero_action_fixed_point() {
        let m = load_maze(ROOM).unwrap();
        let s = PointState::at_rest([2.5, 2.5]);
        assert_eq!(m.step(s, [0.0, 0.0]), s);
    }

    #[test]
    fn head_on_wall_is_clipped() {
        let m = load_maze(ROOM).unwrap();
        let s = PointState {
            position: [3.6, 2.5],
            velocity: [0.9, 0.0],
        };
        let n = m.step(s, [0.5, 0.0]);
        assert!(n.position[0] < 4.0 && n.position[0] > 3.99);
        assert_eq!(n.velocity[0], 0.0);
        assert!(!m.is_blocked(n.position));
    }

    #[test]
    fn shortest_path_is_connected() {
        let m = bundled("giant").unwrap();
        let path = m.shortest_path(m.start(), m.goal()).unwrap();
        assert_eq!(path.first(), Some(&m.start()));
        assert_eq!(path.last(), Some(&m.goal()));
        for w in path.windows(2) {
            assert_eq!(w[0].row.abs_diff(w[1].row) + w[0].col.abs_diff(w[1].col), 1);
        }
    }

    #[test]
    fn controller_equilibrium_and_direction() {
        let c = HeuristicController::default();
        let s = PointState::at_rest([2.0, 3.0]);
        assert_eq!(c.action(&s, [2.0, 3.0]), [0.0, 0.0]);
        let a = c.action(&s, [2.3, 3.4]);
        assert!((a[0] / a[1] - 0.3 / 0.4).abs() < 1e-12 && a[0] > 0.0);
    }

    #[test]
    fn controller_reaches_straight_line_subgoals() {
        let m = load_maze("horizon = 100\n##########\n#S.......#\n#........#\n#.......G#\n#........#\n##########\n").unwrap();
        let c = HeuristicController::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let free = m.free_cells();
        for _ in 0..50 {
            let from = free[rng.random_range(0..free.len())].center();
            let to = free[rng.random_range(0..free.len())].center();
            let mut s = PointState::at_rest(from);
            let mut reached = false;
            for _ in 0..50 {
                s = m.step(s, c.action(&s, to));
                if norm2([s.position[0] - to[0], s.position[1] - to[1]]) <= m.params().goal_radius {
                    reached = true;
                    break;
                }
            }
            assert!(reached, "{from:?} -> {to:?}");
        }
    }

    #[test]
    fn random_rollout_stays_in_bounds() {
        let m = bundled("medium").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = PointState::at_rest(m.start().center());
        for _ in 0..100_000 {
            let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            s = m.step(s, a);
            assert!(!m.is_blocked(s.position), "{s:?}");
            assert!(norm2(s.velocity) <= m.params().v_max + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn step_never_enters_walls(x in 0.0f64..1.0, y in 0.0f64..1.0,
                                   vx in -1.0f64..1.0, vy in -1.0f64..1.0,
                                   ax in -1.0f64..1.0, ay in -1.0f64..1.0,
                                   cell_pick in 0usize..1000) {
            let m = bundled("giant").unwrap();
            let free = m.free_cells();
            let c = free[cell_pick % free.len()];
            let s = PointState { position: [c.col as f64 + x * 0.999, c.row as f64 + y * 0.999],
                                 velocity: clamp_norm([vx, vy], m.params().v_max) };
            let n = m.step(s, [ax, ay]);
            prop_assert!(!m.is_blocked(n.position));
        }
    }
}
