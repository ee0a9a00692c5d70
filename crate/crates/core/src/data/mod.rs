//! Trajectory datasets: normalization, CSV ingestion, subsequence batching
//! and simulated systems.

mod csv_io;
mod sim;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, load_manifest, read_trajectories, write_trajectories, ColumnSpec, Manifest};
pub use sim::{mss_check, simulate_dubins, simulate_linear, DubinsParams, LinearSim, LinearSystem, MssReport};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Array;

/// Aligned control and observation sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `T×d_u`
    pub u: Array,
    /// `T×d_y`
    pub y: Array,
    /// Ground-truth latent states `T×d_x` (simulated data only).
    pub x: Option<Array>,
    pub source: String,
}

impl Trajectory {
    pub fn new(u: Array, y: Array, x: Option<Array>, source: impl Into<String>) -> Result<Self> {
        let t = y.rows();
        if t < 2 {
            return Err(Error::Data(format!("trajectory of length {t}; need at least 2")));
        }
        if u.rows() != t || x.as_ref().is_some_and(|x| x.rows() != t) {
            return Err(Error::Data("u, y and x must have equal length".into()));
        }
        if !u.is_finite() || !y.is_finite() || x.as_ref().is_some_and(|x| !x.is_finite()) {
            return Err(Error::Data("trajectory contains non-finite values".into()));
        }
        Ok(Self {
            u,
            y,
            x,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Steps `range` of this trajectory.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Trajectory> {
        let rows = |a: &Array| {
            let c = a.cols();
            Array::matrix(range.len(), c, a.data()[range.start * c..range.end * c].to_vec())
        };
        Trajectory::new(
            rows(&self.u),
            rows(&self.y),
            self.x.as_ref().map(rows),
            self.source.clone(),
        )
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

/// Smallest standard deviation used for scaling.
pub const STD_FLOOR: f64 = 1e-8;

fn channel_stats(arrays: &[&Array]) -> (Vec<f64>, Vec<f64>) {
    let cols = arrays.first().map_or(0, |a| a.cols());
    let n: usize = arrays.iter().map(|a| a.rows()).sum();
    let mut mean = vec![0.0; cols];
    for a in arrays {
        for i in 0..a.rows() {
            for (m, v) in mean.iter_mut().zip(a.row(i)) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; cols];
    for a in arrays {
        for i in 0..a.rows() {
            for ((s, v), m) in var.iter_mut().zip(a.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = var
        .iter()
        .map(|s| (s / n.max(1) as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

fn scale(a: &Array, mean: &[f64], std: &[f64], forward: bool) -> Array {
    let c = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % c;
            if forward {
                (v - mean[j]) / std[j]
            } else {
                v * std[j] + mean[j]
            }
        })
        .collect();
    Array::matrix(a.rows(), c, data)
}

impl NormStats {
    /// Statistics of the given trajectories (pooled over time).
    pub fn from_trajectories(trajs: &[Trajectory]) -> Self {
        let us: Vec<&Array> = trajs.iter().map(|t| &t.u).collect();
        let ys: Vec<&Array> = trajs.iter().map(|t| &t.y).collect();
        let (u_mean, u_std) = channel_stats(&us);
        let (y_mean, y_std) = channel_stats(&ys);
        Self {
            u_mean,
            u_std,
            y_mean,
            y_std,
        }
    }

    /// Identity statistics for already-normalized data.
    pub fn identity(d_u: usize, d_y: usize) -> Self {
        Self {
            u_mean: vec![0.0; d_u],
            u_std: vec![1.0; d_u],
            y_mean: vec![0.0; d_y],
            y_std: vec![1.0; d_y],
        }
    }

    pub fn normalize(&self, t: &Trajectory) -> Trajectory {
        Trajectory {
            u: scale(&t.u, &self.u_mean, &self.u_std, true),
            y: scale(&t.y, &self.y_mean, &self.y_std, true),
            x: t.x.clone(),
            source: t.source.clone(),
        }
    }

    pub fn denormalize(&self, t: &Trajectory) -> Trajectory {
        Trajectory {
            u: scale(&t.u, &self.u_mean, &self.u_std, false),
            y: scale(&t.y, &self.y_mean, &self.y_std, false),
            x: t.x.clone(),
            source: t.source.clone(),
        }
    }

    /// Maps normalized observation means (`T×d_y`) back to raw units.
    pub fn denormalize_y_mean(&self, y: &Array) -> Array {
        scale(y, &self.y_mean, &self.y_std, false)
    }

    /// Maps normalized observation variances back to raw units.
    pub fn denormalize_y_var(&self, v: &Array) -> Array {
        let c = v.cols();
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * self.y_std[i % c] * self.y_std[i % c])
            .collect();
        Array::matrix(v.rows(), c, data)
    }
}

/// Train/test trajectories with normalization statistics of the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub stats: NormStats,
    /// Recognition lag `t'`.
    pub lag: usize,
    /// Whether `train`/`test` hold normalized values.
    pub normalized: bool,
}

impl Dataset {
    /// Builds a raw dataset; statistics come from `train` only.
    pub fn new(name: impl Into<String>, train: Vec<Trajectory>, test: Vec<Trajectory>, lag: usize) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Data("dataset without training trajectories".into()))?;
        let (du, dy) = (first.u.cols(), first.y.cols());
        if train.iter().chain(&test).any(|t| t.u.cols() != du || t.y.cols() != dy) {
            return Err(Error::Data("trajectories disagree on d_u or d_y".into()));
        }
        let stats = NormStats::from_trajectories(&train);
        Ok(Self {
            name: name.into(),
            train,
            test,
            stats,
            lag,
            normalized: false,
        })
    }

    pub fn d_u(&self) -> usize {
        self.train[0].u.cols()
    }

    pub fn d_y(&self) -> usize {
        self.train[0].y.cols()
    }

    /// Z-scores both splits with the train statistics.
    pub fn normalize(&self) -> Dataset {
        if self.normalized {
            return self.clone();
        }
        Dataset {
            train: self.train.iter().map(|t| self.stats.normalize(t)).collect(),
            test: self.test.iter().map(|t| self.stats.normalize(t)).collect(),
            normalized: true,
            ..self.clone()
        }
    }

    /// Inverse of [`Dataset::normalize`].
    pub fn denormalize(&self) -> Dataset {
        if !self.normalized {
            return self.clone();
        }
        Dataset {
            train: self.train.iter().map(|t| self.stats.denormalize(t)).collect(),
            test: self.test.iter().map(|t| self.stats.denormalize(t)).collect(),
            normalized: false,
            ..self.clone()
        }
    }

    /// Total number of training time steps.
    pub fn train_steps(&self) -> usize {
        self.train.iter().map(Trajectory::len).sum()
    }
}

/// Aligned window of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `T×d_y`
    pub y: Array,
    /// `T×d_u`
    pub u: Array,
    pub trajectory: usize,
    pub start: usize,
}

impl Window {
    pub fn whole(t: &Trajectory) -> Self {
        Self {
            y: t.y.clone(),
            u: t.u.clone(),
            trajectory: 0,
            start: 0,
        }
    }
}

/// Uniformly random fixed-length windows over a set of trajectories.
pub struct Subsequences<'a> {
    trajs: &'a [Trajectory],
    len: usize,
    /// Cumulative count of valid window starts.
    cumulative: Vec<usize>,
    rng: rng::Rng,
}

/// Windows of length `len` drawn uniformly over all valid start positions.
pub fn subsequences(trajs: &[Trajectory], len: usize, seed: u64) -> Result<Subsequences<'_>> {
    let shortest = trajs.iter().map(Trajectory::len).min().unwrap_or(0);
    if trajs.is_empty() || len < 2 || len > shortest {
        return Err(Error::InvalidArgument(format!(
            "window length {len} must lie in [2, {shortest}]"
        )));
    }
    let mut cumulative = Vec::with_capacity(trajs.len());
    let mut acc = 0;
    for t in trajs {
        acc += t.len() - len + 1;
        cumulative.push(acc);
    }
    Ok(Subsequences {
        trajs,
        len,
        cumulative,
        rng: rng::seeded(seed),
    })
}

impl Subsequences<'_> {
    pub fn next_window(&mut self) -> Window {
        let total = *self.cumulative.last().expect("non-empty");
        let k = self.rng.random_range(0..total);
        let traj = self.cumulative.partition_point(|&c| c <= k);
        let before = if traj == 0 { 0 } else { self.cumulative[traj - 1] };
        let start = k - before;
        let t = &self.trajs[traj];
        let (dy, du) = (t.y.cols(), t.u.cols());
        Window {
            y: Array::matrix(self.len, dy, t.y.data()[start * dy..(start + self.len) * dy].to_vec()),
            u: Array::matrix(self.len, du, t.u.data()[start * du..(start + self.len) * du].to_vec()),
            trajectory: traj,
            start,
        }
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<Window> {
        (0..batch).map(|_| self.next_window()).collect()
    }
}
