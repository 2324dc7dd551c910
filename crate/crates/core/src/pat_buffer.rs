//! Prioritized adversarial trajectory buffer.
//!
//! Entries are ranked by composite score. Sampling mixes a rank-based score
//! distribution with a staleness distribution; eviction removes the lowest
//! priority entry, oldest first on ties.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentCodec;
use crate::rng::{derive, Rng};
use crate::scoring::{composite_score, evaluate_trajectory, BufferStats, Measured, TrajectoryScore};
use crate::trajectory::{load_dataset, save_dataset, Trajectory};
use crate::wm::{LatentPredictor, SEED_CHUNKS};

pub const DEFAULT_CAPACITY: usize = 64;
pub const DEFAULT_RHO_STALE: f64 = 0.1;
pub const HORIZON_CHUNKS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub trajectory: Trajectory,
    pub scores: TrajectoryScore,
    pub priority: f64,
    /// Regret at the previous rescore cycle; `None` until the first one.
    pub last_rescore_regret: Option<f64>,
    pub insert_iter: u64,
    pub last_scored_iter: u64,
}

impl BufferEntry {
    pub fn id(&self) -> u64 {
        self.trajectory.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreWeights {
    pub lambda_afs: f64,
    pub beta_prog: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            lambda_afs: 0.25,
            beta_prog: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatBuffer {
    pub capacity: usize,
    pub rho_stale: f64,
    /// Rank temperature: `P_score` is proportional to `rank^(-1/temperature)`.
    pub temperature: f64,
    pub weights: ScoreWeights,
    entries: Vec<BufferEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RescoreReport {
    pub rescored: usize,
    pub dropped: Vec<u64>,
}

impl PatBuffer {
    pub fn new(capacity: usize, rho_stale: f64, weights: ScoreWeights) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&rho_stale) {
            return Err(Error::Config(format!("rho_stale {rho_stale} outside [0, 1]")));
        }
        Ok(Self {
            capacity,
            rho_stale,
            temperature: 1.0,
            weights,
            entries: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &BufferEntry {
        &self.entries[i]
    }

    pub fn contains(&self, id: u64) -> bool {
        self.entries.iter().any(|e| e.id() == id)
    }

    pub fn stats(&self) -> Result<BufferStats> {
        let r: Vec<f64> = self.entries.iter().map(|e| e.scores.l_regret).collect();
        let a: Vec<f64> = self.entries.iter().map(|e| e.scores.l_afs).collect();
        BufferStats::from_values(&r, &a)
    }

    pub fn mean_regret(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.scores.l_regret).sum::<f64>() / self.entries.len() as f64
    }

    /// Recomputes every composite score under the current statistics.
    pub fn refresh_priorities(&mut self) {
        let Ok(stats) = self.stats() else { return };
        for e in &mut self.entries {
            e.scores.composite = composite_score(&e.scores, &stats, self.weights.lambda_afs, self.weights.beta_prog);
            e.priority = e.scores.composite;
        }
    }

    fn eviction_index(&self) -> Option<usize> {
        (0..self.entries.len()).min_by(|&i, &j| {
            let (a, b) = (&self.entries[i], &self.entries[j]);
            a.priority
                .total_cmp(&b.priority)
                .then(a.insert_iter.cmp(&b.insert_iter))
                .then(i.cmp(&j))
        })
    }

    /// Inserts an entry with its priority as given. When over capacity the
    /// minimum-priority entry, possibly the newcomer, is evicted.
    pub fn insert(&mut self, entry: BufferEntry) -> Result<Option<u64>> {
        if self.contains(entry.id()) {
            return Err(Error::Invalid(format!("trajectory {} already in buffer", entry.id())));
        }
        self.entries.push(entry);
        if self.entries.len() <= self.capacity {
            return Ok(None);
        }
        let i = self.eviction_index().expect("non-empty");
        Ok(Some(self.entries.remove(i).id()))
    }

    /// Adds a freshly measured trajectory: statistics include the newcomer,
    /// all composites are refreshed, then the usual eviction rule applies.
    pub fn add_measured(&mut self, trajectory: Trajectory, m: Measured, iter: u64) -> Result<Option<u64>> {
        if self.contains(trajectory.id) {
            return Err(Error::Invalid(format!("trajectory {} already in buffer", trajectory.id)));
        }
        let entry = BufferEntry {
            trajectory,
            scores: m.into_score(),
            priority: 0.0,
            last_rescore_regret: None,
            insert_iter: iter,
            last_scored_iter: iter,
        };
        self.entries.push(entry);
        self.refresh_priorities();
        let evicted = if self.entries.len() > self.capacity {
            let i = self.eviction_index().expect("non-empty");
            Some(self.entries.remove(i).id())
        } else {
            None
        };
        self.refresh_priorities();
        Ok(evicted)
    }

    /// Rank of each entry by priority (1 = highest; ties by id).
    pub fn ranks(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&i, &j| {
            let (a, b) = (&self.entries[i], &self.entries[j]);
            b.priority.total_cmp(&a.priority).then(a.id().cmp(&b.id()))
        });
        let mut ranks = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
            ranks[i] = r + 1;
        }
        ranks
    }

    /// Mixture `(1 - rho) * P_score + rho * P_stale` over entries.
    pub fn probabilities(&self, current_iter: u64) -> Result<Vec<f64>> {
        if self.entries.is_empty() {
            return Err(Error::Invalid("cannot sample from an empty buffer".into()));
        }
        let score_w: Vec<f64> = self
            .ranks()
            .iter()
            .map(|&r| (1.0 / r as f64).powf(1.0 / self.temperature))
            .collect();
        let zs: f64 = score_w.iter().sum();
        let stale: Vec<f64> = self
            .entries
            .iter()
            .map(|e| current_iter.saturating_sub(e.last_scored_iter) as f64)
            .collect();
        let ss: f64 = stale.iter().sum();
        let n = self.entries.len() as f64;
        Ok(score_w
            .iter()
            .zip(&stale)
            .map(|(w, s)| {
                let p_stale = if ss > 0.0 { s / ss } else { 1.0 / n };
                (1.0 - self.rho_stale) * w / zs + self.rho_stale * p_stale
            })
            .collect())
    }

    /// `n` entry indices drawn with replacement.
    pub fn sample(&self, n: usize, current_iter: u64, rng: &mut Rng) -> Result<Vec<usize>> {
        let p = self.probabilities(current_iter)?;
        let dist = WeightedIndex::new(&p).map_err(|e| Error::Invalid(format!("sampling weights: {e}")))?;
        Ok((0..n).map(|_| dist.sample(rng)).collect())
    }

    /// Re-measures every entry under `predictor`. Each entry's sampling seed
    /// depends only on `seed` and its id, so an unchanged model reproduces
    /// the previous regret exactly. Entries that fail are dropped.
    pub fn rescore_all(
        &mut self,
        predictor: &impl LatentPredictor,
        codec: &LatentCodec,
        current_iter: u64,
        seed: u64,
    ) -> Result<RescoreReport> {
        let mut report = RescoreReport::default();
        let mut kept = Vec::with_capacity(self.entries.len());
        for mut e in std::mem::take(&mut self.entries) {
            let s = derive(seed, e.id());
            match evaluate_trajectory(predictor, &e.trajectory, codec, SEED_CHUNKS, HORIZON_CHUNKS, s) {
                Ok((m, _)) => {
                    e.scores.delta_regret = e.last_rescore_regret.map_or(0.0, |prev| m.l_regret - prev);
                    e.scores.l_regret = m.l_regret;
                    e.scores.l_afs = m.l_afs;
                    e.scores.pixel_mse = m.pixel_mse;
                    e.last_rescore_regret = Some(m.l_regret);
                    e.last_scored_iter = current_iter;
                    report.rescored += 1;
                    kept.push(e);
                }
                Err(err) => {
                    log::warn!("dropping buffer entry {} after failed rescore: {err}", e.id());
                    report.dropped.push(e.id());
                }
            }
        }
        self.entries = kept;
        self.refresh_priorities();
        Ok(report)
    }

    pub fn save_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let index = SnapshotIndex {
            capacity: self.capacity,
            rho_stale: self.rho_stale,
            lambda_afs: self.weights.lambda_afs,
            beta_prog: self.weights.beta_prog,
            entries: self
                .entries
                .iter()
                .map(|e| SnapshotEntry {
                    id: e.id(),
                    l_regret: e.scores.l_regret,
                    l_afs: e.scores.l_afs,
                    pixel_mse: e.scores.pixel_mse,
                    delta: e.scores.delta_regret,
                    priority: e.priority,
                    last_rescore_regret: e.last_rescore_regret,
                    insert_iter: e.insert_iter,
                    last_scored_iter: e.last_scored_iter,
                })
                .collect(),
        };
        fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        let trajs: Vec<Trajectory> = self.entries.iter().map(|e| e.trajectory.clone()).collect();
        let tdir = dir.join("trajectories");
        if tdir.exists() {
            fs::remove_dir_all(&tdir)?;
        }
        save_dataset(&tdir, &trajs)?;
        Ok(())
    }

    pub fn load_snapshot(dir: &Path) -> Result<Self> {
        let index: SnapshotIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
        let trajs = load_dataset(&dir.join("trajectories"))?;
        let mut buf = Self::new(
            index.capacity,
            index.rho_stale,
            ScoreWeights {
                lambda_afs: index.lambda_afs,
                beta_prog: index.beta_prog,
            },
        )?;
        for se in index.entries {
            let trajectory = trajs
                .iter()
                .find(|t| t.id == se.id)
                .cloned()
                .ok_or_else(|| Error::Format(format!("snapshot is missing trajectory {}", se.id)))?;
            buf.entries.push(BufferEntry {
                trajectory,
                scores: TrajectoryScore {
                    l_regret: se.l_regret,
                    l_afs: se.l_afs,
                    pixel_mse: se.pixel_mse,
                    delta_regret: se.delta,
                    composite: se.priority,
                },
                priority: se.priority,
                last_rescore_regret: se.last_rescore_regret,
                insert_iter: se.insert_iter,
                last_scored_iter: se.last_scored_iter,
            });
        }
        Ok(buf)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotIndex {
    capacity: usize,
    rho_stale: f64,
    lambda_afs: f64,
    beta_prog: f64,
    entries: Vec<SnapshotEntry>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    id: u64,
    l_regret: f64,
    l_afs: f64,
    pixel_mse: f64,
    delta: f64,
    priority: f64,
    last_rescore_regret: Option<f64>,
    insert_iter: u64,
    last_scored_iter: u64,
}
