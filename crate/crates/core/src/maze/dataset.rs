use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{norm2, HeuristicController, Maze, PointState};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub episodes: usize,
    /// Steps recorded per episode; `None` means the maze horizon.
    pub episode_length: Option<usize>,
    pub seed: u64,
    /// Distance at which the current waypoint counts as reached.
    pub waypoint_tolerance: f64,
    /// Uniform jitter applied to waypoint positions inside their cell.
    pub waypoint_jitter: f64,
    /// Per-episode cruise speed range as fractions of `v_max`.
    pub speed_range: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            episode_length: None,
            seed: 0,
            waypoint_tolerance: 0.1,
            waypoint_jitter: 0.0,
            speed_range: (0.2, 0.35),
        }
    }
}

/// Goal-agnostic exploratory trajectories plus per-dimension statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub maze_name: String,
    pub maze_hash: String,
    pub dim: usize,
    pub episode_length: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub episodes: Vec<Array2<f64>>,
}

pub(crate) fn maze_hash(maze: &Maze) -> String {
    let mut h = Sha256::new();
    h.update(maze.to_spec().as_bytes());
    hex::encode(&h.finalize()[..16])
}

/// Drives the controller through a random sequence of reachable waypoints,
/// following shortest cell paths between them, and records every state.
pub fn generate_episode(
    maze: &Maze,
    length: usize,
    controller: &HeuristicController,
    cfg: &DatasetConfig,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let free = maze.free_cells();
    let jitter = |rng: &mut dyn rand::RngCore, c: super::Cell| {
        let [x, y] = c.center();
        let j = cfg.waypoint_jitter;
        if j > 0.0 {
            [x + rng.random_range(-j..j), y + rng.random_range(-j..j)]
        } else {
            [x, y]
        }
    };
    let (lo, hi) = cfg.speed_range;
    let cruise = maze.params().v_max
        * if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
    let start_cell = free[rng.random_range(0..free.len())];
    let mut state = PointState::at_rest(start_cell.center());
    let mut current = start_cell;
    let mut waypoints: std::collections::VecDeque<[f64; 2]> = Default::default();
    let mut out = Array2::zeros((length, 4));
    for t in 0..length {
        out.row_mut(t).assign(&ndarray::arr1(&state.to_vec()));
        if t + 1 == length {
            break;
        }
        while waypoints.is_empty() {
            let target = free[rng.random_range(0..free.len())];
            if target == current {
                continue;
            }
            let path = maze
                .shortest_path(current, target)
                .expect("free cells of a validated maze are connected to the start");
            for c in path.into_iter().skip(1) {
                let w = jitter(rng, c);
                waypoints.push_back(w);
            }
            current = target;
        }
        let w = waypoints[0];
        let mut action = controller.action(&state, w);
        let v = [state.velocity[0] + action[0], state.velocity[1] + action[1]];
        let speed = norm2(v);
        if speed > cruise {
            action = [
                v[0] * cruise / speed - state.velocity[0],
                v[1] * cruise / speed - state.velocity[1],
            ];
        }
        state = maze.step(state, action);
        let d = norm2([state.position[0] - w[0], state.position[1] - w[1]]);
        if d <= cfg.waypoint_tolerance {
            waypoints.pop_front();
        }
    }
    out
}

/// Generates `cfg.episodes` trajectories and their normalization statistics.
pub fn generate_dataset(maze: &Maze, cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let length = cfg.episode_length.unwrap_or(maze.horizon());
    let (lo, hi) = cfg.speed_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!(
            "speed range ({lo}, {hi}) must lie in (0, 1]"
        )));
    }
    if length < 2 {
        return Err(Error::Config("episode length must be at least 2".into()));
    }
    let controller = HeuristicController {
        a_max: maze.params().a_max,
        ..HeuristicController::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let episodes: Vec<Array2<f64>> = (0..cfg.episodes)
        .map(|_| generate_episode(maze, length, &controller, cfg, &mut rng))
        .collect();
    let (mean, std) = stats(&episodes, 4);
    Ok(Dataset {
        version: DATASET_VERSION,
        maze_name: maze.name().to_string(),
        maze_hash: maze_hash(maze),
        dim: 4,
        episode_length: length,
        seed: cfg.seed,
        mean,
        std,
        episodes,
    })
}

fn stats(episodes: &[Array2<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut n = 0.0;
    for e in episodes {
        for row in e.rows() {
            for d in 0..dim {
                sum[d] += row[d];
                sq[d] += row[d] * row[d];
            }
            n += 1.0;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    (mean, std)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Start offsets of planning windows of length `horizon` cut with `stride`.
    pub fn windows(&self, horizon: usize, stride: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (e, ep) in self.episodes.iter().enumerate() {
            if ep.nrows() < horizon {
                continue;
            }
            let mut o = 0;
            while o + horizon <= ep.nrows() {
                out.push((e, o));
                o += stride.max(1);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        bincode::serialize(self).expect("dataset serializes")
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let ds: Dataset = bincode::deserialize(bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if ds.version != DATASET_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "dataset version {} (expected {DATASET_VERSION})",
                    ds.version
                ),
            });
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex digest of the serialized dataset.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{bundled, load_maze};

    #[test]
    fn open_room_episode_shape() {
        let m = load_maze("horizon = 40\n######\n#S...#\n#....#\n#...G#\n######\n").unwrap();
        let ds = generate_dataset(
            &m,
            &DatasetConfig {
                episodes: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ds.episodes[0].nrows(), 40);
        for row in ds.episodes[0].rows() {
            assert!(!m.is_blocked([row[0], row[1]]));
        }
    }

    #[test]
    fn zero_episodes_rejected() {
        let m = bundled("medium").unwrap();
        let cfg = DatasetConfig {
            episodes: 0,
            ..Default::default()
        };
        assert!(matches!(generate_dataset(&m, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn displacement_bounded_by_vmax() {
        let m = bundled("medium").unwrap();
        let cfg = DatasetConfig {
            episodes: 5,
            ..Default::default()
        };
        let ds = generate_dataset(&m, &cfg).unwrap();
        for ep in &ds.episodes {
            for t in 1..ep.nrows() {
                let d = norm2([ep[[t, 0]] - ep[[t - 1, 0]], ep[[t, 1]] - ep[[t - 1, 1]]]);
                assert!(d <= m.params().v_max + 1e-9);
            }
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let m = bundled("medium").unwrap();
        let cfg = DatasetConfig {
            episodes: 3,
            seed: 9,
            ..Default::default()
        };
        let a = generate_dataset(&m, &cfg).unwrap();
        let b = generate_dataset(&m, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn save_load_round_trip() {
        let m = bundled("medium").unwrap();
        let ds = generate_dataset(
            &m,
            &DatasetConfig {
                episodes: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn version_mismatch_fails_loudly() {
        let m = bundled("medium").unwrap();
        let mut ds = generate_dataset(
            &m,
            &DatasetConfig {
                episodes: 1,
                ..Default::default()
            },
        )
        .unwrap();
        ds.version = 99;
        let bytes = ds.to_bytes();
        let err = Dataset::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
