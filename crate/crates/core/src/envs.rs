//! Toy environments, their behavior policies, and the RFDS dataset format.
//!
//! ```text
//! "RFDS" | version u32 | state_dim u32 | action_dim u32 | rows u64
//! rows x (s, a, r, s', done) as f64, little-endian, tightly packed
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Reader;
use crate::nn::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"RFDS";
pub const DATASET_VERSION: u32 = 1;

/// Offline transitions stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub s: Tensor,
    pub a: Tensor,
    pub r: Vec<f64>,
    pub s2: Tensor,
    pub done: Vec<f64>,
}

impl TransitionBatch {
    pub fn empty(state_dim: usize, action_dim: usize) -> Self {
        Self {
            s: Tensor::matrix(0, state_dim, vec![]),
            a: Tensor::matrix(0, action_dim, vec![]),
            r: vec![],
            s2: Tensor::matrix(0, state_dim, vec![]),
            done: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.s.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            s: self.s.gather_rows(idx),
            a: self.a.gather_rows(idx),
            r: idx.iter().map(|&i| self.r[i]).collect(),
            s2: self.s2.gather_rows(idx),
            done: idx.iter().map(|&i| self.done[i]).collect(),
        }
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Self {
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.len())).collect();
        self.gather(&idx)
    }

    pub fn encode(&self) -> Vec<u8> {
        let (sd, ad) = (self.state_dim(), self.action_dim());
        let mut out = Vec::with_capacity(24 + self.len() * (2 * sd + ad + 2) * 8);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(sd as u32).to_le_bytes());
        out.extend_from_slice(&(ad as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        for i in 0..self.len() {
            self.s.row(i).iter().for_each(|&v| put(v));
            self.a.row(i).iter().for_each(|&v| put(v));
            put(self.r[i]);
            self.s2.row(i).iter().for_each(|&v| put(v));
            put(self.done[i]);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != DATASET_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected RFDS")));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let sd = r.u32()? as usize;
        let ad = r.u32()? as usize;
        let rows_at = r.pos as u64;
        let rows = r.u64()?;
        let width = 2 * sd + ad + 2;
        let expected = (rows as u128) * (width as u128) * 8;
        let left = (bytes.len() - r.pos) as u128;
        if expected != left {
            return Err(Error::format(
                rows_at,
                format!("{rows} rows of {width} floats need {expected} bytes, file has {left}"),
            ));
        }
        let rows = rows as usize;
        let mut out = Self::empty(sd, ad);
        let (mut s, mut a, mut s2) = (
            Vec::with_capacity(rows * sd),
            Vec::with_capacity(rows * ad),
            Vec::with_capacity(rows * sd),
        );
        for _ in 0..rows {
            for _ in 0..sd {
                s.push(r.f64()?);
            }
            for _ in 0..ad {
                a.push(r.f64()?);
            }
            out.r.push(r.f64()?);
            for _ in 0..sd {
                s2.push(r.f64()?);
            }
            out.done.push(r.f64()?);
        }
        out.s = Tensor::matrix(rows, sd, s);
        out.a = Tensor::matrix(rows, ad, a);
        out.s2 = Tensor::matrix(rows, sd, s2);
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Reward bump centers of the two-corner bandit.
pub const BANDIT_CORNERS: [[f64; 2]; 2] = [[-0.8, -0.8], [0.8, 0.8]];
pub const BANDIT_SIGMA: f64 = 0.35;
pub const LINE_STEP: f64 = 0.2;
pub const LINE_GOAL: f64 = 0.9;
pub const LINE_HORIZON: usize = 40;

/// Float slack on the LineWorld goal test so that seven steps of `0.2`
/// from `-0.5` count as reaching `0.9`.
const GOAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    TwoCornerBandit,
    LineWorld,
}

impl EnvKind {
    pub const ALL: [EnvKind; 2] = [EnvKind::TwoCornerBandit, EnvKind::LineWorld];

    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::TwoCornerBandit => "two-corner-bandit",
            EnvKind::LineWorld => "line-world",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown env `{s}`, expected one of: two-corner-bandit, line-world"
                ))
            })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvKind::TwoCornerBandit => 2,
            EnvKind::LineWorld => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvKind::TwoCornerBandit => 1,
            EnvKind::LineWorld => LINE_HORIZON,
        }
    }

    pub fn initial_state(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            EnvKind::TwoCornerBandit => vec![0.0, 0.0],
            EnvKind::LineWorld => vec![rng.gen_range(-1.0..=-0.5)],
        }
    }

    /// One transition `(s', r, done)`. Actions must lie in `[-1, 1]^2`.
    pub fn step(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        if a.len() != self.action_dim() || s.len() != self.state_dim() {
            return Err(Error::shape(format!(
                "{} takes a {}-d state and {}-d action, got {} and {}",
                self.name(),
                self.state_dim(),
                self.action_dim(),
                s.len(),
                a.len()
            )));
        }
        if let Some(x) = a.iter().find(|x| !(x.abs() <= 1.0)) {
            return Err(Error::contract(format!("action component {x} outside [-1, 1]")));
        }
        Ok(match self {
            EnvKind::TwoCornerBandit => (s.to_vec(), bandit_reward(a), true),
            EnvKind::LineWorld => {
                let next = (s[0] + LINE_STEP * a[0]).clamp(-1.0, 1.0);
                if next >= LINE_GOAL - GOAL_TOL {
                    (vec![next], 0.0, true)
                } else {
                    (vec![next], -1.0, false)
                }
            }
        })
    }
}

pub fn bandit_reward(a: &[f64]) -> f64 {
    let s2 = BANDIT_SIGMA * BANDIT_SIGMA;
    BANDIT_CORNERS
        .iter()
        .map(|c| {
            let d2 = (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2);
            (-d2 / s2).exp()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The data-collecting policy of each environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BehaviorSpec {
    /// Equal mixture of isotropic Gaussians, rejection-sampled into the box.
    GaussianMixture {
        centers: [[f64; 2]; 2],
        std: f64,
    },
    /// With probability `eps` a uniform action, otherwise `go`.
    EpsilonGreedy { eps: f64, go: [f64; 2] },
}

impl BehaviorSpec {
    pub fn default_for(env: EnvKind) -> Self {
        match env {
            EnvKind::TwoCornerBandit => BehaviorSpec::GaussianMixture {
                centers: [[-0.4, -0.4], [0.4, 0.4]],
                std: 0.25,
            },
            EnvKind::LineWorld => BehaviorSpec::EpsilonGreedy {
                eps: 0.5,
                go: [1.0, 0.0],
            },
        }
    }

    pub fn act(&self, rng: &mut impl Rng) -> [f64; 2] {
        match *self {
            BehaviorSpec::GaussianMixture { centers, std } => {
                let c = centers[rng.gen_range(0..2)];
                let noise = Normal::new(0.0, std).expect("positive std");
                loop {
                    let a = [c[0] + noise.sample(rng), c[1] + noise.sample(rng)];
                    if a.iter().all(|x| x.abs() <= 1.0) {
                        return a;
                    }
                }
            }
            BehaviorSpec::EpsilonGreedy { eps, go } => {
                if rng.gen::<f64>() < eps {
                    [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]
                } else {
                    go
                }
            }
        }
    }
}

/// Rolls out `behavior` for `episodes` episodes. Each episode draws from its
/// own stream derived from `(seed, episode)`, so the result does not depend on
/// how episodes are scheduled.
pub fn generate_dataset(
    env: EnvKind,
    behavior: &BehaviorSpec,
    episodes: usize,
    seed: u64,
) -> Result<TransitionBatch> {
    if episodes == 0 {
        return Err(Error::contract("at least one episode is required"));
    }
    let mut s_col = Vec::new();
    let mut a_col = Vec::new();
    let mut s2_col = Vec::new();
    let mut out = TransitionBatch::empty(env.state_dim(), env.action_dim());
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ep as u64);
        let mut s = env.initial_state(&mut rng);
        for _ in 0..env.horizon() {
            let a = behavior.act(&mut rng);
            let (s2, r, done) = env.step(&s, &a)?;
            s_col.extend_from_slice(&s);
            a_col.extend_from_slice(&a);
            s2_col.extend_from_slice(&s2);
            out.r.push(r);
            out.done.push(if done { 1.0 } else { 0.0 });
            if done {
                break;
            }
            s = s2;
        }
    }
    let n = out.r.len();
    out.s = Tensor::matrix(n, env.state_dim(), s_col);
    out.a = Tensor::matrix(n, env.action_dim(), a_col);
    out.s2 = Tensor::matrix(n, env.state_dim(), s2_col);
    Ok(out)
}

/// Monte Carlo mean of the bandit reward under `behavior`.
pub fn behavior_mean_reward(behavior: &BehaviorSpec, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| bandit_reward(&behavior.act(&mut rng)))
        .sum::<f64>()
        / samples as f64
}
