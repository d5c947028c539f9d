//! Comparison planners sharing the denoiser, sampler and evaluator, plus the
//! closed-loop harness that runs any of them on a maze task.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::maze::{
    evaluate_plan, execute_plan, ExecutionConfig, Maze, PlanScore, PointState, Replanner,
};
use crate::sampler::{GridKind, PlanContext, SamplerConfig};
use crate::trajectory::Trajectory;
use crate::tree::{greedy_tree_plan, mctd_plan, SearchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mctd,
    MctdNoCausal,
    DiffusionForcing,
    DfNoCausal,
    Oneshot,
    Replanning,
    RandomSearch,
    Greedy,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Mctd,
        Variant::MctdNoCausal,
        Variant::DiffusionForcing,
        Variant::DfNoCausal,
        Variant::Oneshot,
        Variant::Replanning,
        Variant::RandomSearch,
        Variant::Greedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mctd => "mctd",
            Variant::MctdNoCausal => "mctd_no_causal",
            Variant::DiffusionForcing => "diffusion_forcing",
            Variant::DfNoCausal => "df_no_causal",
            Variant::Oneshot => "oneshot",
            Variant::Replanning => "replanning",
            Variant::RandomSearch => "random_search",
            Variant::Greedy => "greedy",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown planner {name:?}")))
    }

    /// Builds the planner for a causal/tree factorial cell.
    pub fn ablation(causal: bool, tree: bool) -> Self {
        match (causal, tree) {
            (true, true) => Variant::Mctd,
            (false, true) => Variant::MctdNoCausal,
            (true, false) => Variant::DiffusionForcing,
            (false, false) => Variant::DfNoCausal,
        }
    }

    pub fn is_causal(self) -> bool {
        matches!(
            self,
            Variant::Mctd | Variant::DiffusionForcing | Variant::Greedy
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub variant: Variant,
    /// Fixed guidance scale of the one-shot and causal single-path planners.
    pub scale: f64,
    /// Scales drawn by random search.
    pub scale_set: Vec<f64>,
    /// Samples drawn by random search.
    pub samples: usize,
    /// Candidates per depth of the greedy tree.
    pub greedy_children: usize,
    /// Jump interval of one-shot sampling.
    pub oneshot_jump: usize,
    /// Environment steps between replans; `None` executes open loop.
    pub replan_interval: Option<usize>,
    pub subgoal_stride: usize,
    pub search: SearchConfig,
    pub sampler: SamplerConfig,
}

impl BaselineConfig {
    /// Reference settings of a planner on a bundled maze size.
    pub fn for_maze(variant: Variant, maze: &str) -> Self {
        let giant = maze == "giant";
        let medium = maze == "medium";
        let guidance = if giant {
            vec![0.5, 1.0, 2.0, 3.0, 4.0]
        } else {
            vec![0.0, 0.1, 0.5, 1.0, 2.0]
        };
        let scale = match variant {
            Variant::DiffusionForcing | Variant::DfNoCausal if medium => 3.0,
            Variant::DiffusionForcing | Variant::DfNoCausal => 2.0,
            _ => 0.1,
        };
        let replan_interval = match variant {
            Variant::DiffusionForcing | Variant::DfNoCausal | Variant::Replanning => Some(50),
            _ => None,
        };
        Self {
            variant,
            scale,
            scale_set: vec![0.01, 0.05, 0.1, 0.2, 0.3],
            samples: 25,
            greedy_children: 5,
            oneshot_jump: 10,
            replan_interval,
            subgoal_stride: 10,
            search: SearchConfig {
                guidance,
                stop_violations: 10,
                ..Default::default()
            },
            sampler: SamplerConfig {
                grid: if variant.is_causal() {
                    GridKind::Pyramid
                } else {
                    GridKind::Flat
                },
                ..Default::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::RandomSearch && (self.samples == 0 || self.scale_set.is_empty())
        {
            return Err(Error::Config(
                "random search needs at least one sample and a non-empty scale set".into(),
            ));
        }
        if self.replan_interval == Some(0) {
            return Err(Error::Config("replan interval must be at least 1".into()));
        }
        if self.subgoal_stride == 0 || self.oneshot_jump == 0 || self.greedy_children == 0 {
            return Err(Error::Config(
                "subgoal stride, one-shot jump and greedy children must be at least 1".into(),
            ));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("guidance scale must be finite".into()));
        }
        self.search.validate()
    }
}

/// A plan with its score and the work spent finding it.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub plan: Trajectory,
    pub score: PlanScore,
    pub calls: usize,
    pub iterations: usize,
    pub early_stopped: bool,
}

fn output(ctx: &PlanContext<'_>, maze: &Maze, plan: Trajectory, iterations: usize) -> PlanOutput {
    PlanOutput {
        score: evaluate_plan(maze, &plan),
        plan,
        calls: ctx.calls(),
        iterations,
        early_stopped: false,
    }
}

/// Denoises every token together from fresh noise to level 0 under `scale`.
pub fn diffuser_oneshot(
    ctx: &PlanContext<'_>,
    maze: &Maze,
    scale: f64,
    jump: usize,
    rng: &mut impl Rng,
) -> Result<PlanOutput> {
    let state = ctx.initial_state(rng);
    let plan = ctx.jumpy_denoise(&state, jump, scale)?;
    Ok(output(ctx, maze, plan, 1))
}

/// Draws `samples` one-shot plans, each with a scale chosen uniformly from
/// `scales`, and keeps the highest-reward plan (the first on ties).
pub fn random_search(
    ctx: &PlanContext<'_>,
    maze: &Maze,
    samples: usize,
    scales: &[f64],
    jump: usize,
    rng: &mut impl Rng,
) -> Result<PlanOutput> {
    if samples == 0 || scales.is_empty() {
        return Err(Error::Config(
            "random search needs samples and scales".into(),
        ));
    }
    let mut best: Option<PlanOutput> = None;
    for i in 0..samples {
        let scale = scales[rng.random_range(0..scales.len())];
        let out = diffuser_oneshot(ctx, maze, scale, jump, rng)?;
        if best
            .as_ref()
            .is_none_or(|b| out.score.reward > b.score.reward)
        {
            best = Some(PlanOutput {
                iterations: i + 1,
                ..out
            });
        }
    }
    let mut best = best.unwrap();
    best.calls = ctx.calls();
    best.iterations = samples;
    Ok(best)
}

/// One pass through every expansion with a fixed scale and no branching.
pub fn diffusion_forcing_plan(
    ctx: &PlanContext<'_>,
    maze: &Maze,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<PlanOutput> {
    let mut state = ctx.initial_state(rng);
    for s in 0..ctx.depth_limit() {
        ctx.refresh_noise(&mut state, rng);
        state = ctx.denoise_subplan(&state, s, scale)?;
    }
    let plan = ctx.committed_plan(&state)?;
    Ok(output(ctx, maze, plan, ctx.depth_limit()))
}

/// Plans once from `start` toward the maze goal with the configured planner.
pub fn plan_once(
    model: &Denoiser,
    maze: &Maze,
    start: &PointState,
    cfg: &BaselineConfig,
    rng: &mut impl Rng,
) -> Result<PlanOutput> {
    let ctx = PlanContext::new(
        model,
        start,
        maze.goal_position(),
        maze.horizon(),
        cfg.sampler,
    )?;
    let grid_ok = match cfg.variant {
        Variant::Mctd | Variant::DiffusionForcing | Variant::Greedy => {
            cfg.sampler.grid == GridKind::Pyramid
        }
        Variant::MctdNoCausal | Variant::DfNoCausal => cfg.sampler.grid == GridKind::Flat,
        _ => true,
    };
    if !grid_ok {
        return Err(Error::Config(format!(
            "planner {} does not use the {:?} grid",
            cfg.variant.name(),
            cfg.sampler.grid
        )));
    }
    match cfg.variant {
        Variant::Mctd | Variant::MctdNoCausal => {
            let res = mctd_plan(&ctx, maze, &cfg.search, rng)?;
            Ok(PlanOutput {
                plan: res.plan,
                score: res.score,
                calls: ctx.calls(),
                iterations: res.iterations,
                early_stopped: res.early_stopped,
            })
        }
        Variant::DiffusionForcing | Variant::DfNoCausal => {
            diffusion_forcing_plan(&ctx, maze, cfg.scale, rng)
        }
        Variant::Oneshot | Variant::Replanning => {
            diffuser_oneshot(&ctx, maze, cfg.scale, cfg.oneshot_jump, rng)
        }
        Variant::RandomSearch => random_search(
            &ctx,
            maze,
            cfg.samples,
            &cfg.scale_set,
            cfg.oneshot_jump,
            rng,
        ),
        Variant::Greedy => {
            let (plan, _) = greedy_tree_plan(
                &ctx,
                maze,
                &cfg.search.guidance,
                cfg.greedy_children,
                cfg.search.jump,
                rng,
            )?;
            Ok(output(
                &ctx,
                maze,
                plan,
                ctx.depth_limit() * cfg.greedy_children,
            ))
        }
    }
}

/// Result of planning and executing one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Score of the first plan.
    pub reward: f64,
    pub seconds: f64,
    /// Denoiser calls summed over every (re)plan.
    pub calls: usize,
    /// Search iterations of the first plan.
    pub iterations: usize,
    pub early_stopped: bool,
    pub steps: usize,
    pub replans: usize,
    pub final_distance: f64,
}

/// Plans from the maze start, then executes the plan with the controller,
/// replanning from the current state when the config asks for it.
pub fn run_episode(
    model: &Denoiser,
    maze: &Maze,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = plan_once(
        model,
        maze,
        &PointState::at_rest(maze.start().center()),
        cfg,
        &mut rng,
    )?;
    let mut calls = first.calls;
    let exec = ExecutionConfig {
        subgoal_stride: cfg.subgoal_stride,
        replan_interval: cfg.replan_interval,
    };
    let mut extra = 0;
    let outcome = {
        let mut replan = |state: &PointState, _t: usize| -> Result<Trajectory> {
            let out = plan_once(model, maze, state, cfg, &mut rng)?;
            extra += out.calls;
            Ok(out.plan)
        };
        let replanner: Option<&mut Replanner<'_>> = match cfg.replan_interval {
            Some(_) => Some(&mut replan),
            None => None,
        };
        execute_plan(maze, &first.plan, &exec, replanner)?
    };
    calls += extra;
    Ok(EpisodeResult {
        success: outcome.success,
        reward: first.score.reward,
        seconds: clock.elapsed().as_secs_f64(),
        calls,
        iterations: first.iterations,
        early_stopped: first.early_stopped,
        steps: outcome.steps,
        replans: outcome.replans,
        final_distance: outcome.final_distance,
    })
}
