use serde::{Deserialize, Serialize};

use super::{norm2, HeuristicController, Maze, PointState};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Open-loop score of a plan against the maze.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanScore {
    /// First plan index within the goal radius.
    pub first_hit: Option<usize>,
    pub wall_states: usize,
    /// Consecutive positions further apart than `v_max`.
    pub jumps: usize,
    pub goal_term: f64,
    pub reward: f64,
}

impl PlanScore {
    pub fn violations(&self) -> usize {
        self.wall_states + self.jumps
    }

    pub fn reaches_goal(&self) -> bool {
        self.first_hit.is_some()
    }

    pub fn is_feasible(&self) -> bool {
        self.violations() == 0
    }
}

/// Scores a plan in maze coordinates: `(H - t*) / H` for the first goal hit,
/// minus the penalty weight per wall state or over-speed jump, clipped to [-1, 1].
pub fn evaluate_plan(maze: &Maze, plan: &Trajectory) -> PlanScore {
    let p = maze.params();
    let goal = maze.goal_position();
    let positions = plan.positions();
    let mut first_hit = None;
    let mut wall_states = 0;
    let mut jumps = 0;
    for (i, pos) in positions.iter().enumerate() {
        if maze.is_blocked(*pos) {
            wall_states += 1;
        }
        if i > 0 {
            let prev = positions[i - 1];
            if norm2([pos[0] - prev[0], pos[1] - prev[1]]) > p.v_max + 1e-9 {
                jumps += 1;
            }
        }
        if first_hit.is_none() && norm2([pos[0] - goal[0], pos[1] - goal[1]]) <= p.goal_radius {
            first_hit = Some(i);
        }
    }
    let h = p.horizon as f64;
    let goal_term = first_hit.map_or(0.0, |t| ((h - t as f64) / h).max(0.0));
    let reward = (goal_term - p.penalty_weight * (wall_states + jumps) as f64).clamp(-1.0, 1.0);
    PlanScore {
        first_hit,
        wall_states,
        jumps,
        goal_term,
        reward,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionConfig {
    /// Plan states skipped between consecutive controller subgoals.
    pub subgoal_stride: usize,
    /// Environment steps between replans when a replanner is supplied.
    pub replan_interval: Option<usize>,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            subgoal_stride: 10,
            replan_interval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    /// Environment steps taken (equal to the horizon on failure).
    pub steps: usize,
    pub replans: usize,
    pub states: Vec<PointState>,
    pub final_distance: f64,
}

pub type Replanner<'a> = dyn FnMut(&PointState, usize) -> Result<Trajectory> + 'a;

/// Tracks the plan with the PD controller, advancing the subgoal by
/// `subgoal_stride` plan states each time it is reached. With a replanner and
/// a replan interval, a fresh plan from the current state replaces the old one
/// every `replan_interval` steps.
pub fn execute_plan(
    maze: &Maze,
    plan: &Trajectory,
    cfg: &ExecutionConfig,
    mut replanner: Option<&mut Replanner<'_>>,
) -> Result<EpisodeOutcome> {
    if cfg.subgoal_stride == 0 {
        return Err(Error::Config("subgoal stride must be at least 1".into()));
    }
    if cfg.replan_interval == Some(0) {
        return Err(Error::Config("replan interval must be at least 1".into()));
    }
    let p = maze.params();
    let controller = HeuristicController {
        a_max: p.a_max,
        ..HeuristicController::default()
    };
    let goal = maze.goal_position();
    let mut state = PointState::at_rest(maze.start().center());
    let mut states = vec![state];
    let mut plan = plan.positions();
    let mut replans = 0;
    let mut t = 0;
    let dist = |s: &PointState| norm2([s.position[0] - goal[0], s.position[1] - goal[1]]);
    let at_goal = |s: &PointState| dist(s) <= p.goal_radius;
    if at_goal(&state) {
        return Ok(EpisodeOutcome {
            success: true,
            steps: 0,
            replans,
            final_distance: dist(&state),
            states,
        });
    }
    while t < p.horizon {
        let mut idx = cfg.subgoal_stride.min(plan.len() - 1);
        let mut since_plan = 0;
        while t < p.horizon {
            let sub = plan[idx];
            state = maze.step(state, controller.action(&state, sub));
            states.push(state);
            t += 1;
            since_plan += 1;
            if at_goal(&state) {
                return Ok(EpisodeOutcome {
                    success: true,
                    steps: t,
                    replans,
                    final_distance: dist(&state),
                    states,
                });
            }
            let d = norm2([state.position[0] - sub[0], state.position[1] - sub[1]]);
            if d <= p.goal_radius {
                idx = (idx + cfg.subgoal_stride).min(plan.len() - 1);
            }
            if let (Some(interval), Some(r)) = (cfg.replan_interval, replanner.as_deref_mut()) {
                if since_plan >= interval && t < p.horizon {
                    plan = r(&state, t)?.positions();
                    replans += 1;
                    break;
                }
            }
        }
    }
    Ok(EpisodeOutcome {
        success: false,
        steps: p.horizon,
        replans,
        final_distance: dist(&state),
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{bundled, generate_dataset, load_maze, DatasetConfig};
    use ndarray::Array2;

    fn traj(points: &[[f64; 2]]) -> Trajectory {
        let mut a = Array2::zeros((points.len(), 4));
        for (i, p) in points.iter().enumerate() {
            a[[i, 0]] = p[0];
            a[[i, 1]] = p[1];
        }
        Trajectory::new(a).unwrap()
    }

    fn straight(from: [f64; 2], to: [f64; 2], n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| {
                let f = i as f64 / (n - 1) as f64;
                [
                    from[0] + f * (to[0] - from[0]),
                    from[1] + f * (to[1] - from[1]),
                ]
            })
            .collect()
    }

    const CORRIDOR: &str =
        "horizon = 100\nv_max = 0.5\na_max = 0.1\npenalty_weight = 0.1\n#######\n#S...G#\n#######\n";

    #[test]
    fn goal_term_from_first_hit() {
        let m = load_maze(CORRIDOR).unwrap();
        let mut pts = straight([1.5, 1.5], [5.5, 1.5], 21);
        pts.resize(100, [5.5, 1.5]);
        let s = evaluate_plan(&m, &traj(&pts));
        // first point within 0.5 of x = 5.5 is x = 5.1 at index 18
        assert_eq!(s.first_hit, Some(18));
        assert!((s.goal_term - 0.82).abs() < 1e-12);
        assert_eq!(s.violations(), 0);
        assert!((s.reward - 0.82).abs() < 1e-12);
    }

    #[test]
    fn violations_are_penalised() {
        let m = load_maze(CORRIDOR).unwrap();
        // three points inside the wall row above the corridor
        let mut pts = vec![[1.5, 1.5], [1.6, 0.5], [1.7, 0.5], [1.8, 0.5], [1.9, 1.5]];
        pts.resize(10, [1.9, 1.5]);
        let s = evaluate_plan(&m, &traj(&pts));
        assert_eq!(s.wall_states, 3);
        assert_eq!(s.jumps, 2);
        assert!((s.reward + 0.5).abs() < 1e-12);
        assert_eq!(s.first_hit, None);
    }

    #[test]
    fn reward_is_clipped() {
        let m = load_maze(CORRIDOR).unwrap();
        let pts: Vec<[f64; 2]> = (0..30).map(|_| [0.5, 0.5]).collect();
        assert_eq!(evaluate_plan(&m, &traj(&pts)).reward, -1.0);
    }

    #[test]
    fn dataset_trajectories_are_feasible() {
        let m = bundled("giant").unwrap();
        let ds = generate_dataset(
            &m,
            &DatasetConfig {
                episodes: 4,
                ..Default::default()
            },
        )
        .unwrap();
        for ep in &ds.episodes {
            let s = evaluate_plan(&m, &Trajectory::new(ep.clone()).unwrap());
            assert_eq!(s.violations(), 0);
        }
    }

    #[test]
    fn straight_plan_in_corridor_succeeds() {
        let m = load_maze(CORRIDOR).unwrap();
        let mut pts = straight([1.5, 1.5], [5.5, 1.5], 41);
        pts.resize(100, [5.5, 1.5]);
        let out = execute_plan(&m, &traj(&pts), &ExecutionConfig::default(), None).unwrap();
        assert!(out.success);
        assert!(out.steps < 100);
        assert!(out.final_distance <= 0.5);
        let executed = Trajectory::new(Array2::from_shape_fn((out.states.len(), 4), |(i, d)| {
            out.states[i].to_vec()[d]
        }))
        .unwrap();
        assert!(evaluate_plan(&m, &executed).goal_term > 0.0);
    }

    #[test]
    fn plan_through_wall_fails() {
        let m = load_maze(
            "horizon = 60\nv_max = 0.5\na_max = 0.1\n#######\n#S#.G.#\n#.#...#\n#.....#\n#######\n",
        )
        .unwrap();
        let mut pts = straight([1.5, 1.5], [4.5, 1.5], 20);
        pts.resize(60, [4.5, 1.5]);
        let out = execute_plan(&m, &traj(&pts), &ExecutionConfig::default(), None).unwrap();
        assert!(!out.success);
        assert_eq!(out.steps, 60);
    }

    #[test]
    fn replanner_is_invoked_on_schedule() {
        let m = load_maze(CORRIDOR).unwrap();
        let pts = vec![[1.5, 1.5]; 100];
        let mut calls = Vec::new();
        let mut replan = |s: &PointState, t: usize| {
            calls.push(t);
            let mut p = straight(s.position, [5.5, 1.5], 41);
            p.resize(100, [5.5, 1.5]);
            Ok(traj(&p))
        };
        let cfg = ExecutionConfig {
            subgoal_stride: 10,
            replan_interval: Some(5),
        };
        let out = execute_plan(&m, &traj(&pts), &cfg, Some(&mut replan)).unwrap();
        assert!(out.success);
        assert!(out.replans >= 1);
        assert_eq!(calls[0], 5);
    }
}
