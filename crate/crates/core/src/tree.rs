//! Monte Carlo tree search over partially denoised plans. Each child of a
//! node denoises the next subplan under one guidance scale (its meta-action).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maze::{evaluate_plan, Maze, PlanScore};
use crate::sampler::{PlanContext, PlanState};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Guidance scales available as meta-actions.
    pub guidance: Vec<f64>,
    pub max_iterations: usize,
    pub uct_weight: f64,
    /// Children per node; `None` means one per guidance scale. Larger counts
    /// cycle through the scales.
    pub children: Option<usize>,
    /// Jump interval of the simulation; `None` simulates in one model call.
    pub jump: Option<usize>,
    /// Stop as soon as a simulated plan reaches the goal without violations.
    pub early_stop: bool,
    /// Wall states plus jumps a goal-reaching plan may contain and still
    /// stop the search early.
    pub stop_violations: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            guidance: vec![0.0, 0.1, 0.5, 1.0, 2.0],
            max_iterations: 500,
            uct_weight: std::f64::consts::SQRT_2,
            children: None,
            jump: Some(10),
            early_stop: true,
            stop_violations: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max iterations must be at least 1".into()));
        }
        if !(self.uct_weight >= 0.0) {
            return Err(Error::Config("UCT weight must be non-negative".into()));
        }
        if self.guidance.is_empty() {
            return Err(Error::Config("guidance set is empty".into()));
        }
        if self.guidance.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("guidance scales must be finite".into()));
        }
        if self.children == Some(0) || self.jump == Some(0) {
            return Err(Error::Config(
                "children and jump interval must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Guidance scale of every child slot.
    pub fn meta_actions(&self) -> Vec<f64> {
        let n = self.children.unwrap_or(self.guidance.len());
        (0..n)
            .map(|i| self.guidance[i % self.guidance.len()])
            .collect()
    }

    fn jump_interval(&self, levels: usize) -> usize {
        self.jump.unwrap_or(levels).max(1)
    }
}

/// `v + W sqrt(ln N / n)`, with `ln` taken of `max(N, 1)` and `+inf` for an
/// unvisited child.
pub fn uct_score(value_mean: f64, visits: f64, parent_visits: f64, weight: f64) -> f64 {
    if visits <= 0.0 {
        return f64::INFINITY;
    }
    value_mean + weight * (parent_visits.max(1.0).ln() / visits).sqrt()
}

/// Index of the highest score, the lowest index on ties.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub depth: usize,
    /// Child slot under the parent.
    pub slot: Option<usize>,
    pub scale: Option<f64>,
    pub visits: u64,
    pub value_sum: f64,
    pub children: Vec<Option<usize>>,
    pub state: PlanState,
    /// Plan and score from this node's simulation.
    pub simulated: Option<(Trajectory, PlanScore)>,
}

impl TreeNode {
    pub fn value_mean(&self) -> Option<f64> {
        (self.visits > 0).then(|| self.value_sum / self.visits as f64)
    }

    pub fn is_expandable(&self, depth_limit: usize) -> bool {
        self.depth < depth_limit && self.children.iter().any(Option::is_none)
    }
}

/// Arena of nodes; index 0 is the root.
#[derive(Debug, Clone)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    pub actions: Vec<f64>,
    pub depth_limit: usize,
}

impl Tree {
    pub fn new(root: PlanState, actions: Vec<f64>, depth_limit: usize) -> Self {
        let root = TreeNode {
            parent: None,
            depth: root.depth(),
            slot: None,
            scale: None,
            visits: 0,
            value_sum: 0.0,
            children: vec![None; actions.len()],
            state: root,
            simulated: None,
        };
        Self {
            nodes: vec![root],
            actions,
            depth_limit,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Follows the UCT-best child from the root until a node that can still be
    /// expanded or a fully committed leaf.
    pub fn select(&self, weight: f64) -> usize {
        let mut id = 0;
        loop {
            let node = &self.nodes[id];
            if node.depth >= self.depth_limit || node.is_expandable(self.depth_limit) {
                return id;
            }
            let kids: Vec<usize> = node
                .children
                .iter()
                .map(|c| c.expect("fully expanded"))
                .collect();
            let scores: Vec<f64> = kids
                .iter()
                .map(|&c| {
                    let ch = &self.nodes[c];
                    uct_score(
                        ch.value_mean().unwrap_or(0.0),
                        ch.visits as f64,
                        node.visits as f64,
                        weight,
                    )
                })
                .collect();
            id = kids[argmax_first(&scores).expect("node has children")];
        }
    }

    /// Adds the child for the lowest untried slot of `id`: frames still at the
    /// top noise level get fresh noise, then the next subplan is denoised under
    /// the slot's guidance scale.
    pub fn expand(
        &mut self,
        id: usize,
        ctx: &PlanContext<'_>,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let node = &self.nodes[id];
        if node.depth >= self.depth_limit {
            return Err(Error::TreeContract(format!("node {id} is fully committed")));
        }
        let slot = node
            .children
            .iter()
            .position(Option::is_none)
            .ok_or_else(|| Error::TreeContract(format!("node {id} has no untried meta-action")))?;
        let scale = self.actions[slot];
        let mut state = node.state.clone();
        ctx.refresh_noise(&mut state, rng);
        let state = ctx.denoise_subplan(&state, node.depth, scale)?;
        let child = TreeNode {
            parent: Some(id),
            depth: state.depth(),
            slot: Some(slot),
            scale: Some(scale),
            visits: 0,
            value_sum: 0.0,
            children: vec![None; self.actions.len()],
            state,
            simulated: None,
        };
        let cid = self.nodes.len();
        self.nodes.push(child);
        self.nodes[id].children[slot] = Some(cid);
        Ok(cid)
    }

    /// Adds `reward` to the node and all of its ancestors.
    pub fn backpropagate(&mut self, id: usize, reward: f64) {
        let mut cur = Some(id);
        while let Some(i) = cur {
            let n = &mut self.nodes[i];
            n.visits += 1;
            n.value_sum += reward;
            cur = n.parent;
        }
    }

    /// Child slots from the root down to `id`.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            out.push(self.nodes[cur].slot.unwrap());
            cur = p;
        }
        out.reverse();
        out
    }

    /// Descends by highest mean value (lowest slot on ties) to a node without
    /// visited children.
    pub fn best_path_leaf(&self) -> usize {
        let mut id = 0;
        loop {
            let kids: Vec<usize> = self.nodes[id]
                .children
                .iter()
                .flatten()
                .copied()
                .filter(|&c| self.nodes[c].visits > 0)
                .collect();
            if kids.is_empty() {
                return id;
            }
            let means: Vec<f64> = kids
                .iter()
                .map(|&c| self.nodes[c].value_mean().unwrap())
                .collect();
            id = kids[argmax_first(&means).unwrap()];
        }
    }
}

/// Completes a node's plan with jumpy denoising under its own guidance scale
/// and scores it. The node's plan-state is not modified.
pub fn simulate(
    ctx: &PlanContext<'_>,
    maze: &Maze,
    state: &PlanState,
    scale: f64,
    jump: usize,
) -> Result<(Trajectory, PlanScore)> {
    let plan = if state.depth() == ctx.depth_limit() {
        ctx.committed_plan(state)?
    } else {
        ctx.jumpy_denoise(state, jump, scale)?
    };
    let score = evaluate_plan(maze, &plan);
    Ok((plan, score))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub node: usize,
    pub depth: usize,
    pub scale: Option<f64>,
    pub reward: f64,
    /// Child slots from the root, joined by `/`.
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub plan: Trajectory,
    pub score: PlanScore,
    pub iterations: usize,
    pub early_stopped: bool,
    pub trace: Vec<TraceRow>,
    pub tree: Tree,
}

fn is_success(score: &PlanScore, tolerance: usize) -> bool {
    score.reaches_goal() && score.violations() <= tolerance
}

/// Runs select, expand, simulate and backpropagate until the iteration cap or
/// an early stop. Returns the first plan that triggered the early stop, or
/// else the simulated plan at the end of the highest-mean path.
pub fn mctd_plan(
    ctx: &PlanContext<'_>,
    maze: &Maze,
    cfg: &SearchConfig,
    rng: &mut impl Rng,
) -> Result<SearchResult> {
    cfg.validate()?;
    let jump = cfg.jump_interval(ctx.model().config().levels);
    let root = ctx.initial_state(rng);
    let mut tree = Tree::new(root, cfg.meta_actions(), ctx.depth_limit());
    let mut trace = Vec::new();
    let mut iterations = 0;
    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        let sel = tree.select(cfg.uct_weight);
        let target = if tree.nodes[sel].depth >= tree.depth_limit {
            sel
        } else {
            tree.expand(sel, ctx, rng)?
        };
        if tree.nodes[target].simulated.is_none() {
            let scale = tree.nodes[target].scale.unwrap_or(0.0);
            let sim = simulate(ctx, maze, &tree.nodes[target].state, scale, jump)?;
            tree.nodes[target].simulated = Some(sim);
        }
        let score = tree.nodes[target].simulated.as_ref().unwrap().1;
        tree.backpropagate(target, score.reward);
        trace.push(TraceRow {
            iteration: it,
            node: target,
            depth: tree.nodes[target].depth,
            scale: tree.nodes[target].scale,
            reward: score.reward,
            path: tree
                .path(target)
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join("/"),
        });
        if cfg.early_stop && is_success(&score, cfg.stop_violations) {
            let plan = tree.nodes[target].simulated.as_ref().unwrap().0.clone();
            return Ok(SearchResult {
                plan,
                score,
                iterations,
                early_stopped: true,
                trace,
                tree,
            });
        }
    }
    let leaf = tree.best_path_leaf();
    let (plan, score) = match &tree.nodes[leaf].simulated {
        Some(s) => s.clone(),
        None => simulate(ctx, maze, &tree.nodes[leaf].state, 0.0, jump)?,
    };
    Ok(SearchResult {
        plan,
        score,
        iterations,
        early_stopped: false,
        trace,
        tree,
    })
}

/// Greedy search without backtracking: at every depth, `children` candidate
/// subplans are denoised (cycling through `guidance`), each is simulated, and
/// only the best is kept.
pub fn greedy_tree_plan(
    ctx: &PlanContext<'_>,
    maze: &Maze,
    guidance: &[f64],
    children: usize,
    jump: Option<usize>,
    rng: &mut impl Rng,
) -> Result<(Trajectory, PlanScore)> {
    if children == 0 {
        return Err(Error::Config(
            "children per branch must be at least 1".into(),
        ));
    }
    if guidance.is_empty() {
        return Err(Error::Config("guidance set is empty".into()));
    }
    let jump = jump.unwrap_or(ctx.model().config().levels);
    let mut state = ctx.initial_state(rng);
    for s in 0..ctx.depth_limit() {
        let mut best: Option<(PlanState, f64)> = None;
        for i in 0..children {
            let scale = guidance[i % guidance.len()];
            let mut cand = state.clone();
            ctx.refresh_noise(&mut cand, rng);
            let cand = ctx.denoise_subplan(&cand, s, scale)?;
            let (_, score) = simulate(ctx, maze, &cand, scale, jump)?;
            if best.as_ref().is_none_or(|(_, r)| score.reward > *r) {
                best = Some((cand, score.reward));
            }
        }
        state = best.unwrap().0;
    }
    let plan = ctx.committed_plan(&state)?;
    let score = evaluate_plan(maze, &plan);
    Ok((plan, score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, DenoiserConfig};
    use crate::maze::{load_maze, PointState};
    use crate::sampler::{GridKind, SamplerConfig};
    use proptest::prelude::{prop_assert_eq, prop_assume, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ROOM: &str = "horizon = 12\n#######\n#S....#\n#.....#\n#....G#\n#######\n";

    fn model(seed: u64, mean: [f64; 2], spread: f64) -> Denoiser {
        let mut m = Denoiser::new(
            DenoiserConfig {
                window: 3,
                hidden: vec![8],
                levels: 20,
                frame_stack: 2,
                smooth_modes: Some(4),
                map_extent: Some([7, 7]),
                ..Default::default()
            },
            seed,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = m
            .parameters()
            .iter()
            .map(|_| rng.random_range(-0.3..0.3))
            .collect();
        m.set_parameters(&p).unwrap();
        m.set_normalization(
            vec![mean[0], mean[1], 0.0, 0.0],
            vec![spread, spread, 0.1, 0.1],
        )
        .unwrap();
        m
    }

    fn ctx<'a>(m: &'a Denoiser, maze: &crate::maze::Maze, grid: GridKind) -> PlanContext<'a> {
        PlanContext::new(
            m,
            &PointState::at_rest(maze.start().center()),
            maze.goal_position(),
            12,
            SamplerConfig {
                subplans: 3,
                steps_per_expansion: 3,
                grid,
                sigma_scale: 1.0,
            },
        )
        .unwrap()
    }

    fn no_stop(iters: usize) -> SearchConfig {
        SearchConfig {
            max_iterations: iters,
            early_stop: false,
            ..Default::default()
        }
    }

    #[test]
    fn uct_examples() {
        let e = std::f64::consts::E;
        assert!((uct_score(0.5, 1.0, e, 1.0) - 1.5).abs() < 1e-12);
        assert_eq!(uct_score(0.3, 4.0, 17.0, 0.0), 0.3);
        assert_eq!(uct_score(0.3, 0.0, 17.0, 1.0), f64::INFINITY);
        // ln max(N, 1) keeps a zero-visit parent finite
        assert_eq!(uct_score(0.3, 2.0, 0.0, 1.0), 0.3);
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_first(&[]), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn uct_argmax_translation_invariant(
            kids in proptest::collection::vec((-1.0f64..1.0, 1u32..50), 1..8),
            shift in -5.0f64..5.0,
            w in 0.0f64..4.0,
        ) {
            let parent: u32 = kids.iter().map(|k| k.1).sum();
            let score = |c: f64| -> Vec<f64> {
                kids.iter()
                    .map(|&(v, n)| uct_score(v + c, n as f64, parent as f64, w))
                    .collect()
            };
            let base = score(0.0);
            let mut sorted = base.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            // near-ties may round differently after the shift
            prop_assume!(sorted.len() == 1 || sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(argmax_first(&base), argmax_first(&score(shift)));
        }
    }

    #[test]
    fn fresh_root_selects_itself_and_expansion_uses_a_slot() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(1, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tree = Tree::new(c.initial_state(&mut rng), vec![0.0, 0.1, 0.5, 1.0, 2.0], 3);
        assert_eq!(tree.select(1.0), 0);
        let a = tree.expand(0, &c, &mut rng).unwrap();
        assert_eq!(
            tree.nodes[0]
                .children
                .iter()
                .filter(|c| c.is_none())
                .count(),
            4
        );
        assert_eq!(tree.nodes[a].depth, 1);
        assert_eq!(tree.nodes[a].scale, Some(0.0));
        let b = tree.expand(0, &c, &mut rng).unwrap();
        assert_eq!(tree.nodes[b].scale, Some(0.1));
        assert_ne!(tree.nodes[a].state.tokens(), tree.nodes[b].state.tokens());
        // drive one branch to the committed depth
        let mut id = a;
        while tree.nodes[id].depth < 3 {
            id = tree.expand(id, &c, &mut rng).unwrap();
        }
        assert!(matches!(
            tree.expand(id, &c, &mut rng),
            Err(Error::TreeContract(_))
        ));
    }

    #[test]
    fn select_follows_exhaustive_uct() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(1, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tree = Tree::new(c.initial_state(&mut rng), vec![0.0, 1.0, 2.0], 3);
        let kids: Vec<usize> = (0..3)
            .map(|_| tree.expand(0, &c, &mut rng).unwrap())
            .collect();
        let rewards = [[0.1, 0.2], [0.9, 0.8], [0.3, -0.2]];
        for (k, r) in kids.iter().zip(rewards) {
            for v in r {
                tree.backpropagate(*k, v);
            }
        }
        let n = tree.nodes[0].visits as f64;
        let best = (0..3)
            .max_by(|&i, &j| {
                let s = |i: usize| {
                    rewards[i].iter().sum::<f64>() / 2.0 + 2f64.sqrt() * (n.ln() / 2.0).sqrt()
                };
                s(i).partial_cmp(&s(j)).unwrap()
            })
            .unwrap();
        assert_eq!(best, 1);
        assert_eq!(tree.select(2f64.sqrt()), kids[best]);
    }

    #[test]
    fn backpropagation_updates_the_path() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(1, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tree = Tree::new(c.initial_state(&mut rng), vec![0.0, 1.0], 3);
        let mut id = 0;
        for _ in 0..3 {
            id = tree.expand(id, &c, &mut rng).unwrap();
        }
        let sibling = tree.expand(0, &c, &mut rng).unwrap();
        tree.backpropagate(id, 1.0);
        assert_eq!(tree.nodes.iter().filter(|n| n.visits == 1).count(), 4);
        assert_eq!(tree.nodes[sibling].visits, 0);
        tree.backpropagate(id, 0.0);
        assert_eq!(tree.nodes[id].value_mean(), Some(0.5));
        assert_eq!(tree.path(id), vec![0, 0, 0]);
        assert_eq!(tree.path(sibling), vec![1]);
    }

    #[test]
    fn visit_counts_are_conserved() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(2, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = mctd_plan(&c, &maze, &no_stop(1000), &mut rng).unwrap();
        assert_eq!(res.iterations, 1000);
        let tree = &res.tree;
        // every simulation is counted by each node on its root path
        let mut expected = vec![0u64; tree.len()];
        for row in &res.trace {
            let mut cur = Some(row.node);
            while let Some(i) = cur {
                expected[i] += 1;
                cur = tree.nodes[i].parent;
            }
        }
        for (i, n) in tree.nodes.iter().enumerate() {
            assert_eq!(n.visits, expected[i], "node {i}");
            let child_sum: u64 = n
                .children
                .iter()
                .flatten()
                .map(|&k| tree.nodes[k].visits)
                .sum();
            assert!(n.visits >= child_sum);
            if let Some(v) = n.value_mean() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
        assert_eq!(tree.nodes[0].visits, 1000);
    }

    #[test]
    fn root_children_visited_first_with_large_weight() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(2, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SearchConfig {
            uct_weight: 100.0,
            ..no_stop(5)
        };
        let res = mctd_plan(&c, &maze, &cfg, &mut rng).unwrap();
        let depths: Vec<usize> = res.trace.iter().map(|r| r.depth).collect();
        assert_eq!(depths, vec![1; 5]);
    }

    #[test]
    fn search_is_deterministic() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(4, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let run = |seed| {
            mctd_plan(
                &c,
                &maze,
                &no_stop(40),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        let (a, b) = (run(7), run(7));
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.trace, b.trace);
        assert_ne!(run(8).plan, a.plan);
    }

    #[test]
    fn simulation_is_pure_and_in_range() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(4, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tree = Tree::new(c.initial_state(&mut rng), vec![0.5], 3);
        let id = tree.expand(0, &c, &mut rng).unwrap();
        let before = tree.nodes[id].state.clone();
        let a = simulate(&c, &maze, &before, 0.5, 10).unwrap();
        let b = simulate(&c, &maze, &before, 0.5, 10).unwrap();
        let one = simulate(&c, &maze, &before, 0.5, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(tree.nodes[id].state, before);
        for r in [a.1.reward, one.1.reward] {
            assert!((-1.0..=1.0).contains(&r));
        }
        assert_ne!(a.0, one.0);
    }

    #[test]
    fn terminal_simulation_returns_committed_plan() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(4, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tree = Tree::new(c.initial_state(&mut rng), vec![0.5], 3);
        let mut id = 0;
        for _ in 0..3 {
            id = tree.expand(id, &c, &mut rng).unwrap();
        }
        let calls = c.calls();
        let (plan, _) = simulate(&c, &maze, &tree.nodes[id].state, 0.5, 10).unwrap();
        assert_eq!(c.calls(), calls);
        assert_eq!(plan, c.committed_plan(&tree.nodes[id].state).unwrap());
    }

    #[test]
    fn start_inside_goal_radius_stops_at_once() {
        let maze =
            load_maze("horizon = 12\ngoal_radius = 1.2\n#####\n#SG.#\n#...#\n#####\n").unwrap();
        // a narrow prior centred on the start keeps every plan feasible
        let m = model(5, maze.start().center(), 0.01);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let cfg = SearchConfig::default();
        let res = mctd_plan(&c, &maze, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(res.early_stopped);
        assert!(res.iterations <= cfg.guidance.len());
        assert_eq!(res.score.goal_term, 1.0);
        assert!(res.score.is_feasible());
    }

    #[test]
    fn early_stop_only_on_feasible_goal_plans() {
        let maze = load_maze(ROOM).unwrap();
        for seed in 0..5 {
            let m = model(seed, [3.0, 2.0], 1.5);
            let c = ctx(&m, &maze, GridKind::Pyramid);
            let cfg = SearchConfig {
                max_iterations: 60,
                ..Default::default()
            };
            let res = mctd_plan(&c, &maze, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            if res.early_stopped {
                assert!(res.score.reaches_goal() && res.score.is_feasible());
                assert_eq!(res.trace.last().unwrap().reward, res.score.reward);
            } else {
                assert_eq!(res.iterations, 60);
            }
        }
    }

    #[test]
    fn single_child_greedy_is_one_guided_rollout() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(6, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let (plan, score) = greedy_tree_plan(
            &c,
            &maze,
            &[0.5],
            1,
            Some(10),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut state = c.initial_state(&mut rng);
        for s in 0..c.depth_limit() {
            c.refresh_noise(&mut state, &mut rng);
            state = c.denoise_subplan(&state, s, 0.5).unwrap();
        }
        assert_eq!(plan, c.committed_plan(&state).unwrap());
        assert_eq!(score, evaluate_plan(&maze, &plan));
    }

    #[test]
    fn greedy_keeps_the_best_candidate() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(6, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Pyramid);
        let guidance = [0.0, 1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (plan, _) = greedy_tree_plan(&c, &maze, &guidance, 3, Some(10), &mut rng).unwrap();
        // replay with an independent argmax over candidate rewards
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = c.initial_state(&mut rng);
        for s in 0..c.depth_limit() {
            let cands: Vec<(PlanState, f64)> = guidance
                .iter()
                .map(|&g| {
                    let mut st = state.clone();
                    c.refresh_noise(&mut st, &mut rng);
                    let st = c.denoise_subplan(&st, s, g).unwrap();
                    let r = simulate(&c, &maze, &st, g, 10).unwrap().1.reward;
                    (st, r)
                })
                .collect();
            let top = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            state = cands.into_iter().find(|c| c.1 == top).unwrap().0;
        }
        assert_eq!(plan, c.committed_plan(&state).unwrap());
        assert!(greedy_tree_plan(&c, &maze, &guidance, 0, None, &mut rng).is_err());
    }

    #[test]
    fn zero_iterations_is_config_error() {
        let maze = load_maze(ROOM).unwrap();
        let m = model(6, [3.0, 2.0], 1.0);
        let c = ctx(&m, &maze, GridKind::Flat);
        let err = mctd_plan(&c, &maze, &no_stop(0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
