//! Trajectories, subplan partitions, diffusion noise schedules and the causal
//! scheduling grid shared by every sampler and planner.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of environment steps grouped into one model token.
pub const DEFAULT_FRAME_STACK: usize = 10;

/// Noise index at which committed subplans are held while later ones are generated.
pub const DEFAULT_STABILIZATION_LEVEL: usize = 10;

/// A horizon-length sequence of per-step state vectors.
///
/// Positions occupy the first two columns (maze cells), velocities the next two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    tokens: Array2<f64>,
}

impl Trajectory {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::ModelContract("trajectory must be non-empty".into()));
        }
        if tokens.ncols() < 2 {
            return Err(Error::ModelContract(format!(
                "token dimension must be >= 2, got {}",
                tokens.ncols()
            )));
        }
        Ok(Self { tokens })
    }

    /// Like [`Trajectory::new`] but also checks that the horizon groups into
    /// whole frames of `frame_stack` steps.
    pub fn with_frame_stack(tokens: Array2<f64>, frame_stack: usize) -> Result<Self> {
        if frame_stack == 0 || !tokens.nrows().is_multiple_of(frame_stack) {
            return Err(Error::ModelContract(format!(
                "horizon {} is not a multiple of frame stack {}",
                tokens.nrows(),
                frame_stack
            )));
        }
        Self::new(tokens)
    }

    pub fn horizon(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.view()
    }

    pub fn token(&self, i: usize) -> ArrayView1<'_, f64> {
        self.tokens.row(i)
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        [self.tokens[[i, 0]], self.tokens[[i, 1]]]
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        (0..self.horizon()).map(|i| self.position(i)).collect()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.tokens
    }

    /// Tokens of one subplan.
    pub fn subplan(&self, partition: &SubplanPartition, s: usize) -> ArrayView2<'_, f64> {
        let r = partition.range(s);
        self.tokens.slice(s![r.start..r.end, ..])
    }
}

/// Contiguous split of a horizon into `S` non-empty subplans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubplanPartition {
    boundaries: Vec<usize>,
}

impl SubplanPartition {
    pub fn count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn horizon(&self) -> usize {
        *self
            .boundaries
            .last()
            .expect("partition has at least two boundaries")
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.boundaries[s]..self.boundaries[s + 1]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index of the subplan containing token `i`.
    pub fn subplan_of(&self, i: usize) -> usize {
        match self.boundaries.binary_search(&i) {
            Ok(b) => b.min(self.count() - 1),
            Err(b) => b - 1,
        }
    }
}

/// Splits `horizon` into `subplans` contiguous chunks whose sizes differ by at most one.
/// Larger chunks come first.
pub fn partition(horizon: usize, subplans: usize) -> Result<SubplanPartition> {
    if subplans == 0 || subplans > horizon {
        return Err(Error::InvalidPartition { horizon, subplans });
    }
    let base = horizon / subplans;
    let extra = horizon % subplans;
    let mut boundaries = Vec::with_capacity(subplans + 1);
    boundaries.push(0);
    let mut acc = 0;
    for s in 0..subplans {
        acc += base + usize::from(s < extra);
        boundaries.push(acc);
    }
    Ok(SubplanPartition { boundaries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::InvalidSchedule(format!(
                "unknown schedule kind `{other}`"
            ))),
        }
    }
}

const MAX_BETA: f64 = 0.999;

/// Per-level noise variances and their cumulative signal fractions.
///
/// `alpha_bars[0] == 1` and `alpha_bars[k] = prod_{j <= k} (1 - betas[j - 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl BetaSchedule {
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("K must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            betas,
            alpha_bars,
        })
    }

    /// Betas linearly spaced from `beta_min` (level 1) to `beta_max` (level K).
    pub fn linear(k: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidSchedule("K must be at least 1".into()));
        }
        let betas = if k == 1 {
            vec![beta_max]
        } else {
            (0..k)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (k - 1) as f64)
                .collect()
        };
        Self::from_betas(ScheduleKind::Linear, betas)
    }

    /// Squared-cosine signal curve with offset `s = 0.008`.
    pub fn cosine(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidSchedule("K must be at least 1".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / k as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let betas = (1..=k)
            .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, MAX_BETA))
            .collect();
        Self::from_betas(ScheduleKind::Cosine, betas)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of noise levels `K`.
    pub fn levels(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::NoiseIndex {
            index: t,
            max: self.levels(),
        })
    }

    /// Recovers betas from the cumulative products.
    pub fn betas_from_alpha_bars(alpha_bars: &[f64]) -> Vec<f64> {
        alpha_bars.windows(2).map(|w| 1.0 - w[1] / w[0]).collect()
    }
}

/// Linear range used when only `K` is given: the usual DDPM range
/// `[1e-4, 0.02]` at 1000 levels, rescaled so that a shorter chain still ends
/// near pure noise.
pub fn default_linear_range(k: usize) -> (f64, f64) {
    let scale = 1000.0 / k.max(1) as f64;
    ((1e-4 * scale).min(MAX_BETA), (0.02 * scale).min(MAX_BETA))
}

pub fn build_beta_schedule(kind: ScheduleKind, k: usize) -> Result<BetaSchedule> {
    match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = default_linear_range(k);
            BetaSchedule::linear(k, lo, hi)
        }
        ScheduleKind::Cosine => BetaSchedule::cosine(k),
    }
}

/// Per-round, per-subplan noise indices.
///
/// Row 0 is the initial state with every subplan at `K`. Each later row is one
/// denoising round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseLevelGrid {
    rows: Vec<Vec<usize>>,
    levels: usize,
    stabilization: usize,
}

impl NoiseLevelGrid {
    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_subplans(&self) -> usize {
        self.rows[0].len()
    }

    pub fn entry(&self, r: usize, s: usize) -> usize {
        self.rows[r][s]
    }

    pub fn max_level(&self) -> usize {
        self.levels
    }

    pub fn stabilization(&self) -> usize {
        self.stabilization
    }

    /// Distinct levels column `s` passes through, from `K` down to stabilization.
    pub fn column_levels(&self, s: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for row in &self.rows {
            if out.last() != Some(&row[s]) {
                out.push(row[s]);
            }
        }
        out
    }

    /// First round in which subplan `s` sits at the stabilization level.
    pub fn commit_round(&self, s: usize) -> Option<usize> {
        self.rows
            .iter()
            .position(|row| row[s] == self.stabilization)
    }

    /// Checks monotonicity in rounds and causality across subplans.
    pub fn check_invariants(&self) -> Result<()> {
        for (r, row) in self.rows.iter().enumerate() {
            if row.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::InvalidSchedule(format!(
                    "row {r} is not causal: {row:?}"
                )));
            }
            if row.iter().any(|&l| l > self.levels) {
                return Err(Error::InvalidSchedule(format!("row {r} exceeds K")));
            }
        }
        for w in self.rows.windows(2) {
            if w[0].iter().zip(&w[1]).any(|(a, b)| b > a) {
                return Err(Error::InvalidSchedule(
                    "column increases between rounds".into(),
                ));
            }
        }
        Ok(())
    }
}

fn default_stabilization(k: usize) -> usize {
    DEFAULT_STABILIZATION_LEVEL.min(k.saturating_sub(1))
}

/// Left-staircase causal grid: subplan `s` starts denoising only once subplan
/// `s - 1` has reached the stabilization level, advancing `stride` noise
/// indices per round.
pub fn build_pyramid_grid(subplans: usize, k: usize, stride: usize) -> NoiseLevelGrid {
    build_pyramid_grid_with(subplans, k, stride, default_stabilization(k))
}

pub fn build_pyramid_grid_with(
    subplans: usize,
    k: usize,
    stride: usize,
    stabilization: usize,
) -> NoiseLevelGrid {
    assert!(subplans >= 1 && k >= 1 && stride >= 1 && stabilization <= k);
    let mut rows = vec![vec![k; subplans]];
    let mut current = vec![k; subplans];
    for s in 0..subplans {
        while current[s] > stabilization {
            current[s] = current[s].saturating_sub(stride).max(stabilization);
            rows.push(current.clone());
        }
    }
    NoiseLevelGrid {
        rows,
        levels: k,
        stabilization,
    }
}

/// Non-causal grid: every subplan advances together.
pub fn build_flat_grid(subplans: usize, k: usize, stride: usize) -> NoiseLevelGrid {
    assert!(subplans >= 1 && k >= 1 && stride >= 1);
    let stabilization = default_stabilization(k);
    let mut rows = vec![vec![k; subplans]];
    let mut level = k;
    while level > stabilization {
        level = level.saturating_sub(stride).max(stabilization);
        rows.push(vec![level; subplans]);
    }
    NoiseLevelGrid {
        rows,
        levels: k,
        stabilization,
    }
}

/// One guidance scale (meta-action) per subplan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    scales: Vec<f64>,
}

impl GuidanceSchedule {
    pub fn new(scales: Vec<f64>, guidance_set: &[f64], subplans: usize) -> Result<Self> {
        if scales.len() != subplans {
            return Err(Error::Guidance(format!(
                "schedule has {} entries for {} subplans",
                scales.len(),
                subplans
            )));
        }
        if let Some(g) = scales.iter().find(|g| !guidance_set.contains(g)) {
            return Err(Error::Guidance(format!("scale {g} not in guidance set")));
        }
        Ok(Self { scales })
    }

    /// The same scale for every subplan.
    pub fn constant(scale: f64, subplans: usize) -> Self {
        Self {
            scales: vec![scale; subplans],
        }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn get(&self, s: usize) -> f64 {
        self.scales[s]
    }
}
