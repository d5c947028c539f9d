//! Guided DDIM sampling over partially denoised plans: goal guidance, the
//! skip-step update, causal per-subplan denoising and jumpy completion.

use std::cell::Cell;

use ndarray::{s, Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{epsilon_from_x0_tokens, Denoiser};
use crate::error::{Error, Result};
use crate::maze::PointState;
use crate::trajectory::{
    build_flat_grid, build_pyramid_grid, partition, BetaSchedule, NoiseLevelGrid, SubplanPartition,
    Trajectory,
};

/// `J = -sum_i |p_i - g|` over the position columns of `tokens`.
pub fn guidance_value(tokens: ArrayView2<f64>, goal: &[f64]) -> Result<f64> {
    check_goal(tokens, goal)?;
    Ok(-tokens
        .rows()
        .into_iter()
        .map(|r| {
            goal.iter()
                .enumerate()
                .map(|(d, g)| (r[d] - g).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>())
}

/// Gradient of [`guidance_value`] with respect to the position columns.
/// Tokens sitting exactly on the goal get a zero gradient.
pub fn guidance_gradient(tokens: ArrayView2<f64>, goal: &[f64]) -> Result<Array2<f64>> {
    check_goal(tokens, goal)?;
    let k = goal.len();
    let mut out = Array2::zeros((tokens.nrows(), k));
    for (i, r) in tokens.rows().into_iter().enumerate() {
        let n = goal
            .iter()
            .enumerate()
            .map(|(d, g)| (r[d] - g).powi(2))
            .sum::<f64>()
            .sqrt();
        if n > 0.0 {
            for d in 0..k {
                out[[i, d]] = -(r[d] - goal[d]) / n;
            }
        }
    }
    Ok(out)
}

fn check_goal(tokens: ArrayView2<f64>, goal: &[f64]) -> Result<()> {
    if goal.is_empty() || tokens.ncols() < goal.len() {
        return Err(Error::Guidance(format!(
            "goal of dimension {} for tokens of dimension {}",
            goal.len(),
            tokens.ncols()
        )));
    }
    Ok(())
}

/// Goal and strength for one guided update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceContext<'a> {
    /// Goal position in maze coordinates.
    pub goal: [f64; 2],
    pub scale: f64,
    /// Multiplier on the per-token variance proxy `1 - alpha_bar`.
    pub sigma_scale: f64,
    /// Per-dimension normalization scale of the tokens.
    pub std: &'a [f64],
}

/// Shifts predicted noise so that the implied clean estimate moves along the
/// guidance gradient.
///
/// `x0_raw` holds clean-token estimates in maze coordinates; `eps` lives in
/// normalized coordinates. Per token with variance proxy
/// `sigma = sigma_scale * (1 - a)`, the clean estimate moves by
/// `scale * sigma * grad J` (maze units), which in noise space is
/// `-sqrt(a) / sqrt(1 - a)` times that shift divided by the dimension scale.
pub fn guided_epsilon(
    eps: ArrayView2<f64>,
    x0_raw: ArrayView2<f64>,
    alpha_bars: &[f64],
    ctx: &GuidanceContext<'_>,
) -> Result<Array2<f64>> {
    if !ctx.scale.is_finite() || ctx.scale < 0.0 {
        return Err(Error::Guidance(format!(
            "scale {} must be finite and >= 0",
            ctx.scale
        )));
    }
    let mut out = eps.to_owned();
    if ctx.scale == 0.0 {
        return Ok(out);
    }
    if eps.dim() != x0_raw.dim() || alpha_bars.len() != eps.nrows() {
        return Err(Error::Guidance("eps / x0 / alpha shapes differ".into()));
    }
    let grad = guidance_gradient(x0_raw, &ctx.goal)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Guidance("non-finite guidance gradient".into()));
    }
    for (i, &a) in alpha_bars.iter().enumerate() {
        let sigma = ctx.sigma_scale * (1.0 - a);
        let k = ctx.scale * sigma * a.sqrt() / (1.0 - a).sqrt();
        for d in 0..2 {
            out[[i, d]] -= k * grad[[i, d]] / ctx.std[d];
        }
    }
    Ok(out)
}

/// One deterministic DDIM update from noise index `from` to `to < from`.
pub fn ddim_step(
    x: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    from: usize,
    to: usize,
    schedule: &BetaSchedule,
) -> Result<Array2<f64>> {
    if to >= from {
        return Err(Error::StepOrder { from, to });
    }
    let a = schedule.alpha_bar(from)?;
    let b = schedule.alpha_bar(to)?;
    Ok(ddim_update(x, eps, a, b))
}

/// The DDIM map between two cumulative signal levels.
pub fn ddim_update(
    x: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    a_from: f64,
    a_to: f64,
) -> Array2<f64> {
    let r = (a_to / a_from).sqrt();
    let (sf, st) = ((1.0 - a_from).sqrt(), (1.0 - a_to).sqrt());
    let mut out = Array2::zeros(x.raw_dim());
    Zip::from(&mut out)
        .and(x)
        .and(eps)
        .for_each(|o, &x, &e| *o = r * (x - sf * e) + st * e);
    out
}

/// Decreasing step list `{from, K - C, K - 2C, ..., 0}` restricted to indices
/// below `from`.
pub fn jumpy_steps(from: usize, k: usize, c: usize) -> Result<Vec<usize>> {
    if c == 0 {
        return Err(Error::Config("jump interval must be at least 1".into()));
    }
    let mut steps = vec![from];
    let mut l = k;
    while l > c {
        l -= c;
        if l < from {
            steps.push(l);
        }
    }
    if from > 0 {
        steps.push(0);
    }
    Ok(steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    /// Left-staircase causal schedule; each expansion commits one subplan.
    Pyramid,
    /// All tokens share one level; each expansion advances every token.
    Flat,
}

/// A partially denoised plan: noisy tokens, per-frame levels and the clean
/// tokens of committed subplans.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanState {
    tokens: Array2<f64>,
    clean: Array2<f64>,
    frame_levels: Vec<usize>,
    depth: usize,
}

impl PlanState {
    /// Number of completed expansions.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn frame_levels(&self) -> &[usize] {
        &self.frame_levels
    }

    /// Normalized noisy tokens.
    pub fn tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.view()
    }

    /// Normalized clean tokens of committed subplans (zeros elsewhere).
    pub fn clean(&self) -> ArrayView2<'_, f64> {
        self.clean.view()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub subplans: usize,
    /// Model calls per expansion, including the final clean-up call.
    pub steps_per_expansion: usize,
    pub grid: GridKind,
    pub sigma_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            subplans: 5,
            steps_per_expansion: 20,
            grid: GridKind::Pyramid,
            sigma_scale: 1.0,
        }
    }
}

/// Everything fixed for one planning problem: model, start, goal, subplan
/// layout and scheduling grid. Counts denoiser calls.
pub struct PlanContext<'a> {
    model: &'a Denoiser,
    config: SamplerConfig,
    start: Array1<f64>,
    goal: [f64; 2],
    frames: usize,
    partition: SubplanPartition,
    grid: NoiseLevelGrid,
    /// Grid rows executed by each expansion.
    stages: Vec<std::ops::Range<usize>>,
    calls: Cell<usize>,
}

impl<'a> PlanContext<'a> {
    pub fn new(
        model: &'a Denoiser,
        start: &PointState,
        goal: [f64; 2],
        horizon: usize,
        config: SamplerConfig,
    ) -> Result<Self> {
        let mc = model.config();
        if mc.dim != 4 {
            return Err(Error::ModelContract(format!(
                "planner expects D = 4, model has {}",
                mc.dim
            )));
        }
        if !horizon.is_multiple_of(mc.frame_stack) {
            return Err(Error::ModelContract(format!(
                "horizon {horizon} is not a multiple of frame stack {}",
                mc.frame_stack
            )));
        }
        let frames = horizon / mc.frame_stack;
        if frames < mc.window {
            return Err(Error::ModelContract(format!(
                "horizon of {frames} frames is shorter than the model window"
            )));
        }
        if config.steps_per_expansion < 2 {
            return Err(Error::Config(
                "steps per expansion must be at least 2".into(),
            ));
        }
        let part = partition(frames, config.subplans)?;
        let k = mc.levels;
        let stab = crate::trajectory::DEFAULT_STABILIZATION_LEVEL.min(k - 1);
        let span = k - stab;
        let (grid, stages) = match config.grid {
            GridKind::Pyramid => {
                let stride = span.div_ceil(config.steps_per_expansion - 1).max(1);
                let grid = build_pyramid_grid(config.subplans, k, stride);
                let stages = (0..config.subplans)
                    .map(|s| {
                        let lo = if s == 0 {
                            1
                        } else {
                            grid.commit_round(s - 1).unwrap() + 1
                        };
                        lo..grid.commit_round(s).unwrap() + 1
                    })
                    .collect();
                (grid, stages)
            }
            GridKind::Flat => {
                let total = config.subplans * (config.steps_per_expansion - 1);
                let stride = span.div_ceil(total).max(1);
                let grid = build_flat_grid(config.subplans, k, stride);
                let rounds = grid.num_rows() - 1;
                let n = config.subplans;
                let stages = (0..n)
                    .map(|s| 1 + s * rounds / n..1 + (s + 1) * rounds / n)
                    .collect();
                (grid, stages)
            }
        };
        let raw = ndarray::arr2(&[start.to_vec()]);
        let start = model.normalize(raw.view()).row(0).to_owned();
        Ok(Self {
            model,
            config,
            start,
            goal,
            frames,
            partition: part,
            grid,
            stages,
            calls: Cell::new(0),
        })
    }

    pub fn model(&self) -> &Denoiser {
        self.model
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn grid(&self) -> &NoiseLevelGrid {
        &self.grid
    }

    /// Subplan layout over frames.
    pub fn partition(&self) -> &SubplanPartition {
        &self.partition
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn horizon(&self) -> usize {
        self.frames * self.model.config().frame_stack
    }

    /// Number of expansions that take a fresh plan to a fully committed one.
    pub fn depth_limit(&self) -> usize {
        self.stages.len()
    }

    /// Denoiser calls made through this context so far.
    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    fn levels(&self) -> usize {
        self.model.config().levels
    }

    fn fs(&self) -> usize {
        self.model.config().frame_stack
    }

    /// Frames whose level is set by grid column `s`.
    fn column_frames(&self, s: usize) -> std::ops::Range<usize> {
        self.partition.range(s)
    }

    fn frame_levels_for_row(&self, row: usize) -> Vec<usize> {
        let mut out = vec![0; self.frames];
        for s in 0..self.partition.count() {
            for f in self.column_frames(s) {
                out[f] = self.grid.entry(row, s);
            }
        }
        out
    }

    /// Every token at level `K` with fresh Gaussian noise, except the first
    /// token, which holds the start state throughout.
    pub fn initial_state(&self, rng: &mut impl Rng) -> PlanState {
        let d = self.model.config().dim;
        let n = self.horizon();
        let mut tokens = Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
        tokens.row_mut(0).assign(&self.start);
        PlanState {
            tokens,
            clean: Array2::zeros((n, d)),
            frame_levels: vec![self.levels(); self.frames],
            depth: 0,
        }
    }

    /// Redraws the noise of every frame still at level `K`.
    pub fn refresh_noise(&self, state: &mut PlanState, rng: &mut impl Rng) {
        let fs = self.fs();
        let k = self.levels();
        for f in 0..self.frames {
            if state.frame_levels[f] == k {
                for v in state
                    .tokens
                    .slice_mut(s![f * fs..(f + 1) * fs, ..])
                    .iter_mut()
                {
                    *v = rng.sample(StandardNormal);
                }
            }
        }
        state.tokens.row_mut(0).assign(&self.start);
    }

    fn model_x0(
        &self,
        tokens: &Array2<f64>,
        levels: &[usize],
        active: &[bool],
    ) -> Result<Array2<f64>> {
        self.calls.set(self.calls.get() + 1);
        let goal = self
            .model
            .config()
            .goal_input
            .then(|| self.model.normalize_goal(self.goal));
        let mut x0 = self
            .model
            .predict_plan(tokens.view(), levels, active, true, goal)?;
        if active[0] {
            x0.row_mut(0).assign(&self.start);
        }
        Ok(x0)
    }

    /// One guided DDIM move of the active frames from their current levels to
    /// `to_levels`. Inactive frames are left untouched.
    fn guided_move(
        &self,
        tokens: &Array2<f64>,
        from: &[usize],
        to: &[usize],
        scales: &[f64],
    ) -> Result<Array2<f64>> {
        let fs = self.fs();
        let schedule = self.model.schedule();
        let active: Vec<bool> = from.iter().zip(to).map(|(a, b)| b < a).collect();
        let x0 = self.model_x0(tokens, from, &active)?;
        let mut out = tokens.clone();
        for f in (0..self.frames).filter(|&f| active[f]) {
            let rows = f * fs..(f + 1) * fs;
            let x = tokens.slice(s![rows.clone(), ..]);
            let c = x0.slice(s![rows.clone(), ..]);
            let lv = vec![from[f]; fs];
            let eps = epsilon_from_x0_tokens(x, c, &lv, schedule)?;
            let a = schedule.alpha_bar(from[f])?;
            let ctx = GuidanceContext {
                goal: self.goal,
                scale: scales[f],
                sigma_scale: self.config.sigma_scale,
                std: self.model.std(),
            };
            let eps = if scales[f] == 0.0 {
                eps
            } else {
                let raw = self.model.denormalize(c);
                let mut g = guided_epsilon(eps.view(), raw.view(), &vec![a; fs], &ctx)?;
                if f == 0 {
                    // the pinned start token takes no guidance
                    g.row_mut(0).assign(&eps.row(0));
                }
                g
            };
            let next = ddim_step(x, eps.view(), from[f], to[f], schedule)?;
            out.slice_mut(s![rows, ..]).assign(&next);
        }
        out.row_mut(0).assign(&self.start);
        Ok(out)
    }

    /// Runs expansion `s` with guidance `scale`: steps the grid rows of stage
    /// `s` and then fully denoises the frames that reached the stabilization
    /// level into the committed clean buffer.
    pub fn denoise_subplan(&self, state: &PlanState, s: usize, scale: f64) -> Result<PlanState> {
        if s != state.depth {
            return Err(Error::TreeContract(format!(
                "expansion {s} requested on a plan at depth {}",
                state.depth
            )));
        }
        if s >= self.depth_limit() {
            return Err(Error::TreeContract(format!(
                "plan already fully committed at depth {s}"
            )));
        }
        let scales = vec![scale; self.frames];
        let mut next = state.clone();
        for row in self.stages[s].clone() {
            let to = self.frame_levels_for_row(row);
            next.tokens = self.guided_move(&next.tokens, &next.frame_levels, &to, &scales)?;
            next.frame_levels = to;
        }
        let stab = self.grid.stabilization();
        let commit: Vec<usize> = match self.config.grid {
            GridKind::Pyramid => self.column_frames(s).collect(),
            GridKind::Flat if s + 1 == self.depth_limit() => (0..self.frames).collect(),
            GridKind::Flat => Vec::new(),
        };
        if !commit.is_empty() {
            let mut to = next.frame_levels.clone();
            for &f in &commit {
                debug_assert_eq!(next.frame_levels[f], stab);
                to[f] = 0;
            }
            let clean = self.guided_move(&next.tokens, &next.frame_levels, &to, &scales)?;
            let fs = self.fs();
            for &f in &commit {
                let rows = f * fs..(f + 1) * fs;
                next.clean
                    .slice_mut(s![rows.clone(), ..])
                    .assign(&clean.slice(s![rows, ..]));
            }
        }
        next.depth = s + 1;
        Ok(next)
    }

    /// Frames already committed to clean tokens.
    fn committed_frames(&self, state: &PlanState) -> usize {
        match self.config.grid {
            GridKind::Pyramid if state.depth > 0 => self.column_frames(state.depth - 1).end,
            GridKind::Flat if state.depth == self.depth_limit() => self.frames,
            _ => 0,
        }
    }

    /// Completes every uncommitted frame to level 0 along `steps` (a strictly
    /// decreasing list starting at those frames' current level) under
    /// guidance `scale`. Committed frames are copied verbatim.
    pub fn complete_with_steps(
        &self,
        state: &PlanState,
        steps: &[usize],
        scale: f64,
    ) -> Result<Trajectory> {
        let committed = self.committed_frames(state);
        let fs = self.fs();
        let mut tokens = state.tokens.clone();
        let mut levels = state.frame_levels.clone();
        if committed < self.frames {
            let cur = levels[committed];
            if steps.first() != Some(&cur) || steps.last() != Some(&0) {
                return Err(Error::InvalidSchedule(format!(
                    "step list must run from {cur} to 0, got {steps:?}"
                )));
            }
            if levels[committed..].iter().any(|&l| l != cur) {
                return Err(Error::InvalidSchedule(
                    "uncommitted frames are at mixed levels".into(),
                ));
            }
            let scales = vec![scale; self.frames];
            for w in steps.windows(2) {
                if w[1] >= w[0] {
                    return Err(Error::StepOrder {
                        from: w[0],
                        to: w[1],
                    });
                }
                let mut to = levels.clone();
                to[committed..].iter_mut().for_each(|l| *l = w[1]);
                tokens = self.guided_move(&tokens, &levels, &to, &scales)?;
                levels = to;
            }
        }
        let mut out = tokens;
        out.slice_mut(s![..committed * fs, ..])
            .assign(&state.clean.slice(s![..committed * fs, ..]));
        Trajectory::with_frame_stack(self.model.denormalize(out.view()), fs)
    }

    /// Jumpy completion with interval `c`.
    pub fn jumpy_denoise(&self, state: &PlanState, c: usize, scale: f64) -> Result<Trajectory> {
        let committed = self.committed_frames(state);
        let from = if committed < self.frames {
            state.frame_levels[committed]
        } else {
            0
        };
        let steps = jumpy_steps(from, self.levels(), c)?;
        self.complete_with_steps(state, &steps, scale)
    }

    /// Completion through every noise index.
    pub fn full_denoise(&self, state: &PlanState, scale: f64) -> Result<Trajectory> {
        let committed = self.committed_frames(state);
        let from = if committed < self.frames {
            state.frame_levels[committed]
        } else {
            0
        };
        let steps: Vec<usize> = (0..=from).rev().collect();
        self.complete_with_steps(state, &steps, scale)
    }

    /// The committed plan once every expansion has run.
    pub fn committed_plan(&self, state: &PlanState) -> Result<Trajectory> {
        if state.depth != self.depth_limit() {
            return Err(Error::TreeContract(format!(
                "plan at depth {} of {} is not fully committed",
                state.depth,
                self.depth_limit()
            )));
        }
        Trajectory::with_frame_stack(self.model.denormalize(state.clean.view()), self.fs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{forward_noise, DenoiserConfig};
    use crate::trajectory::{build_beta_schedule, ScheduleKind};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64) -> Denoiser {
        let mut m = Denoiser::new(
            DenoiserConfig {
                window: 3,
                hidden: vec![16, 16],
                levels: 40,
                frame_stack: 5,
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
            .map(|_| rng.random_range(-0.2..0.2))
            .collect();
        m.set_parameters(&p).unwrap();
        m.set_normalization(vec![3.0, 2.0, 0.0, 0.0], vec![2.0, 1.5, 0.1, 0.1])
            .unwrap();
        m
    }

    fn ctx(m: &Denoiser, grid: GridKind) -> PlanContext<'_> {
        PlanContext::new(
            m,
            &PointState::at_rest([1.5, 1.5]),
            [5.5, 3.5],
            60,
            SamplerConfig {
                subplans: 3,
                steps_per_expansion: 6,
                grid,
                sigma_scale: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn guidance_value_examples() {
        let t = ndarray::arr2(&[[1.0, 2.0, 9.0], [1.0, 2.0, -4.0]]);
        assert_eq!(guidance_value(t.view(), &[1.0, 2.0]).unwrap(), 0.0);
        let t = ndarray::arr2(&[[3.0, 0.0], [0.0, 4.0]]);
        assert_eq!(guidance_value(t.view(), &[0.0, 0.0]).unwrap(), -7.0);
        assert!(matches!(
            guidance_value(t.view(), &[0.0, 0.0, 0.0]),
            Err(Error::Guidance(_))
        ));
    }

    #[test]
    fn guidance_value_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Array2::<f64>::from_shape_fn((10, 4), |_| rng.random_range(-5.0..5.0));
        let g = [0.7f64, -1.3];
        let mut want = 0.0;
        for i in 0..10 {
            let dx = t[[i, 0]] - g[0];
            let dy = t[[i, 1]] - g[1];
            want -= (dx * dx + dy * dy).sqrt();
        }
        assert!((guidance_value(t.view(), &g).unwrap() - want).abs() < 1e-12);
    }

    fn shift_matches_fd(rng: &mut ChaCha8Rng) -> f64 {
        let x0 = ndarray::arr2(&[[
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            0.3,
            -0.2,
        ]]);
        let eps = ndarray::arr2(&[[0.1, -0.4, 0.2, 0.05]]);
        let goal = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let a = rng.random_range(0.05..0.95);
        let std = [
            rng.random_range(0.5..3.0),
            rng.random_range(0.5..3.0),
            1.0,
            1.0,
        ];
        let scale = rng.random_range(0.1..3.0);
        let ctx = GuidanceContext {
            goal,
            scale,
            sigma_scale: 1.0,
            std: &std,
        };
        let g = guided_epsilon(eps.view(), x0.view(), &[a], &ctx).unwrap();
        let k = scale * (1.0 - a) * a.sqrt() / (1.0 - a).sqrt();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for d in 0..2 {
            let implied = (eps[[0, d]] - g[[0, d]]) * std[d] / k;
            let mut p = x0.clone();
            p[[0, d]] += h;
            let jp = guidance_value(p.view(), &goal).unwrap();
            p[[0, d]] -= 2.0 * h;
            let jm = guidance_value(p.view(), &goal).unwrap();
            let fd = (jp - jm) / (2.0 * h);
            worst = worst.max((implied - fd).abs() / fd.abs().max(1e-3));
        }
        assert_eq!(g[[0, 2]], eps[[0, 2]]);
        worst
    }

    #[test]
    fn guided_shift_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let w = shift_matches_fd(&mut rng);
            assert!(w < 1e-5, "{w}");
        }
    }

    #[test]
    fn zero_scale_and_stationary_goal_are_identity() {
        let eps = ndarray::arr2(&[[0.1, -0.4, 0.2, 0.05]]);
        let x0 = ndarray::arr2(&[[2.0, 3.0, 0.0, 0.0]]);
        let std = [1.0; 4];
        let c0 = GuidanceContext {
            goal: [9.0, 9.0],
            scale: 0.0,
            sigma_scale: 1.0,
            std: &std,
        };
        assert_eq!(
            guided_epsilon(eps.view(), x0.view(), &[0.5], &c0).unwrap(),
            eps
        );
        let c1 = GuidanceContext {
            goal: [2.0, 3.0],
            scale: 2.0,
            ..c0
        };
        assert_eq!(
            guided_epsilon(eps.view(), x0.view(), &[0.5], &c1).unwrap(),
            eps
        );
        let bad = GuidanceContext {
            scale: f64::NAN,
            ..c0
        };
        assert!(guided_epsilon(eps.view(), x0.view(), &[0.5], &bad).is_err());
    }

    #[test]
    fn ddim_step_examples() {
        let sch = build_beta_schedule(ScheduleKind::Linear, 50).unwrap();
        let x = ndarray::arr2(&[[0.3, -1.0]]);
        let e = ndarray::arr2(&[[1.0, 2.0]]);
        assert_eq!(ddim_update(x.view(), e.view(), 0.4, 0.4), x);
        assert!(matches!(
            ddim_step(x.view(), e.view(), 5, 5, &sch),
            Err(Error::StepOrder { .. })
        ));
        assert!(matches!(
            ddim_step(x.view(), e.view(), 5, 9, &sch),
            Err(Error::StepOrder { .. })
        ));

        let x0 = ndarray::arr2(&[[0.7, -0.2, 1.1]]);
        let eps = ndarray::arr2(&[[0.5, 1.5, -0.9]]);
        for (from, to) in [(50, 0), (30, 12), (7, 6)] {
            let (a, b) = (sch.alpha_bars()[from], sch.alpha_bars()[to]);
            let xt =
                Array2::from_shape_fn((1, 3), |(_, j)| forward_noise(x0[[0, j]], eps[[0, j]], a));
            let out = ddim_step(xt.view(), eps.view(), from, to, &sch).unwrap();
            for j in 0..3 {
                let want = forward_noise(x0[[0, j]], eps[[0, j]], b);
                assert!((out[[0, j]] - want).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn ddim_telescopes_under_exact_noise(x0 in -3.0f64..3.0, e in -3.0f64..3.0,
                                             picks in proptest::collection::btree_set(1usize..50, 0..10)) {
            let sch = build_beta_schedule(ScheduleKind::Linear, 50).unwrap();
            let mut steps: Vec<usize> = picks.into_iter().rev().collect();
            steps.insert(0, 50);
            steps.dedup();
            steps.push(0);
            let eps = ndarray::arr2(&[[e]]);
            let mut x = ndarray::arr2(&[[forward_noise(x0, e, sch.alpha_bars()[50])]]);
            for w in steps.windows(2) {
                x = ddim_step(x.view(), eps.view(), w[0], w[1], &sch).unwrap();
            }
            prop_assert!((x[[0, 0]] - x0).abs() < 1e-10);
        }
    }

    #[test]
    fn jumpy_step_lists() {
        assert_eq!(jumpy_steps(200, 200, 10).unwrap().len(), 21);
        assert_eq!(jumpy_steps(200, 200, 200).unwrap(), vec![200, 0]);
        assert_eq!(
            jumpy_steps(20, 20, 1).unwrap(),
            (0..=20).rev().collect::<Vec<_>>()
        );
        assert_eq!(jumpy_steps(17, 40, 10).unwrap(), vec![17, 10, 0]);
        assert_eq!(jumpy_steps(0, 40, 10).unwrap(), vec![0]);
        assert!(jumpy_steps(10, 40, 0).is_err());
    }

    #[test]
    fn expansion_order_is_enforced() {
        let m = random_model(1);
        let c = ctx(&m, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s0 = c.initial_state(&mut rng);
        assert!(matches!(
            c.denoise_subplan(&s0, 1, 0.0),
            Err(Error::TreeContract(_))
        ));
        let mut s = s0;
        for d in 0..3 {
            s = c.denoise_subplan(&s, d, 0.5).unwrap();
        }
        assert!(matches!(
            c.denoise_subplan(&s, 3, 0.0),
            Err(Error::TreeContract(_))
        ));
    }

    #[test]
    fn expansion_touches_only_its_subplan() {
        let m = random_model(2);
        let c = ctx(&m, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s0 = c.initial_state(&mut rng);
        let s1 = c.denoise_subplan(&s0, 0, 1.0).unwrap();
        let s2 = c.denoise_subplan(&s1, 1, 1.0).unwrap();
        let fs = m.config().frame_stack;
        let r0 = c.partition().range(0);
        let r1 = c.partition().range(1);
        let r2 = c.partition().range(2);
        assert_eq!(
            s2.tokens().slice(s![r0.start * fs..r0.end * fs, ..]),
            s1.tokens().slice(s![r0.start * fs..r0.end * fs, ..])
        );
        assert_eq!(
            s2.tokens().slice(s![r2.start * fs..r2.end * fs, ..]),
            s0.tokens().slice(s![r2.start * fs..r2.end * fs, ..])
        );
        assert!(s2.frame_levels()[r0.clone()]
            .iter()
            .all(|&l| l == c.grid().stabilization()));
        assert!(s2.frame_levels()[r1]
            .iter()
            .all(|&l| l == c.grid().stabilization()));
        assert!(s2.frame_levels()[r2].iter().all(|&l| l == 40));
        // steps_per_expansion model calls per expansion
        assert_eq!(c.calls(), 12);
    }

    #[test]
    fn children_with_distinct_guidance_differ() {
        let m = random_model(3);
        let c = ctx(&m, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s0 = c.initial_state(&mut rng);
        let kids: Vec<PlanState> = [0.0, 0.1, 0.5, 1.0, 2.0]
            .iter()
            .map(|&g| c.denoise_subplan(&s0, 0, g).unwrap())
            .collect();
        for i in 0..kids.len() {
            for j in i + 1..kids.len() {
                assert_ne!(kids[i].clean(), kids[j].clean());
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let m = random_model(4);
        let c = ctx(&m, GridKind::Pyramid);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let s = c.initial_state(&mut rng);
            c.denoise_subplan(&s, 0, 0.5).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn jumpy_preserves_committed_prefix() {
        let m = random_model(5);
        let c = ctx(&m, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = c.initial_state(&mut rng);
        let s = c.denoise_subplan(&s, 0, 0.5).unwrap();
        let fs = m.config().frame_stack;
        let n = c.partition().range(0).end * fs;
        let committed = m.denormalize(s.clean().slice(s![..n, ..]));
        for cc in [1, 5, 10, 40] {
            let plan = c.jumpy_denoise(&s, cc, 1.0).unwrap();
            assert_eq!(plan.tokens().slice(s![..n, ..]), committed.view());
        }
    }

    #[test]
    fn jumpy_interval_one_equals_full_denoising() {
        let m = random_model(6);
        for grid in [GridKind::Pyramid, GridKind::Flat] {
            let c = ctx(&m, grid);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let s = c.initial_state(&mut rng);
            let s = c.denoise_subplan(&s, 0, 0.5).unwrap();
            assert_eq!(
                c.jumpy_denoise(&s, 1, 0.5).unwrap(),
                c.full_denoise(&s, 0.5).unwrap()
            );
        }
    }

    #[test]
    fn one_shot_is_a_single_call() {
        let m = random_model(7);
        let c = ctx(&m, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = c.initial_state(&mut rng);
        c.jumpy_denoise(&s, 40, 0.0).unwrap();
        assert_eq!(c.calls(), 1);
    }

    #[test]
    fn start_state_is_pinned() {
        let m = random_model(8);
        let c = ctx(&m, GridKind::Pyramid);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = c.initial_state(&mut rng);
        let plan = c.jumpy_denoise(&s, 10, 1.0).unwrap();
        assert!((plan.position(0)[0] - 1.5).abs() < 1e-12);
        assert!((plan.position(0)[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn flat_grid_commits_everything_at_the_end() {
        let m = random_model(9);
        let c = ctx(&m, GridKind::Flat);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = c.initial_state(&mut rng);
        for d in 0..c.depth_limit() {
            assert!(c.committed_plan(&s).is_err());
            s = c.denoise_subplan(&s, d, 0.5).unwrap();
        }
        let plan = c.committed_plan(&s).unwrap();
        assert_eq!(plan, c.jumpy_denoise(&s, 10, 0.5).unwrap());
        let all_equal = s.frame_levels().iter().all(|&l| l == s.frame_levels()[0]);
        assert!(all_equal);
    }
}
