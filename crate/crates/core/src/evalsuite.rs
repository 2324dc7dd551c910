//! Evaluation protocols: held-out scoring, hardest subsets, off-diagonal
//! cross-buffer scoring, long-horizon rollouts and arm comparison tables.
//!
//! Every protocol derives a per-trajectory seed from the caller's seed and
//! the trajectory id, so results do not depend on dataset order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coordinator::{csv_err, rollout_episode};
use crate::env::{gen_passive_dataset, DemoKind, Frame, CHUNK};
use crate::error::{Error, Result};
use crate::latent::LatentCodec;
use crate::pat_buffer::HORIZON_CHUNKS;
use crate::policy::PolicyParams;
use crate::rng::{derive, seeded};
use crate::scoring::{afs_epe, evaluate_trajectory, latent_regret, pixel_mse};
use crate::trajectory::{Source, Trajectory};
use crate::wm::{LatentPredictor, WmParams, SEED_CHUNKS};

pub const CLIMBER_MAP_BASE: u64 = 1_000_000;
pub const BUILDER_MAP_BASE: u64 = 1_100_000;
pub const REF_ROLLOUT_BASE: u64 = 1_200_000;
pub const LONG_MAP_BASE: u64 = 1_300_000;
pub const LONG_HORIZON: usize = 18;

/// Held-out demonstrator kinds on map seeds no training set uses.
pub fn heldout_sets(n: usize, len: usize) -> Result<Vec<(String, Vec<Trajectory>)>> {
    Ok(vec![
        ("climber".into(), gen_passive_dataset(DemoKind::Climber, n, len, CLIMBER_MAP_BASE)?),
        ("builder".into(), gen_passive_dataset(DemoKind::Builder, n, len, BUILDER_MAP_BASE)?),
    ])
}

/// Rollouts of the reference policy on unseen seeds.
pub fn reference_rollouts(reference: &PolicyParams, n: usize, len: usize, seed: u64) -> Result<Vec<Trajectory>> {
    (0..n as u64)
        .map(|i| {
            let mut rng = seeded(derive(seed, i));
            rollout_episode(reference, None, i, Source::Policy("reference".into()), REF_ROLLOUT_BASE + i, len, &mut rng)
                .map(|e| e.trajectory)
        })
        .collect()
}

/// Long walker episodes for the long-horizon protocol.
pub fn long_set(n: usize) -> Result<Vec<Trajectory>> {
    gen_passive_dataset(DemoKind::Walker, n, (SEED_CHUNKS + LONG_HORIZON) * CHUNK, LONG_MAP_BASE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub traj_id: u64,
    pub l_regret: f64,
    pub l_afs: f64,
    pub pixel_mse: f64,
}

/// Short-horizon scores for every long-enough trajectory, sorted by id.
pub fn eval_checkpoint(
    predictor: &impl LatentPredictor,
    codec: &LatentCodec,
    dataset: &[Trajectory],
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    let need = (SEED_CHUNKS + HORIZON_CHUNKS) * CHUNK;
    let mut out = Vec::with_capacity(dataset.len());
    for t in dataset {
        if t.len() < need {
            log::warn!("skipping trajectory {}: {} steps, need {need}", t.id, t.len());
            continue;
        }
        let (m, _) = evaluate_trajectory(predictor, t, codec, SEED_CHUNKS, HORIZON_CHUNKS, derive(seed, t.id))?;
        out.push(EvalRecord {
            traj_id: t.id,
            l_regret: m.l_regret,
            l_afs: m.l_afs,
            pixel_mse: m.pixel_mse,
        });
    }
    out.sort_by_key(|r| r.traj_id);
    Ok(out)
}

/// The `ceil(fraction * n)` ids with the highest Phase-1 regret; ties by id.
pub fn select_hardest(phase1_regrets: &[(u64, f64)], fraction: f64) -> Result<Vec<u64>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Invalid(format!("fraction {fraction} outside [0, 1]")));
    }
    let mut v = phase1_regrets.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    // guard against products like 0.1 * 30 = 3.0000000000000004
    let k = ((fraction * v.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut ids: Vec<u64> = v.into_iter().take(k).map(|(id, _)| id).collect();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanMetrics {
    pub l_regret: f64,
    pub l_afs: f64,
    pub pixel_mse: f64,
}

pub fn mean_metrics(records: &[EvalRecord]) -> Result<MeanMetrics> {
    if records.is_empty() {
        return Err(Error::Invalid("no records to average".into()));
    }
    let n = records.len() as f64;
    Ok(MeanMetrics {
        l_regret: records.iter().map(|r| r.l_regret).sum::<f64>() / n,
        l_afs: records.iter().map(|r| r.l_afs).sum::<f64>() / n,
        pixel_mse: records.iter().map(|r| r.pixel_mse).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossResult {
    pub arm: String,
    /// Buffers this checkpoint was scored on; never its own.
    pub buffers: Vec<String>,
    pub mean: MeanMetrics,
}

/// Scores each arm's checkpoint on every other arm's buffer and averages
/// the per-buffer means without weighting.
pub fn cross_buffer_eval<P: LatentPredictor>(
    checkpoints: &[(&str, &P)],
    buffers: &[(&str, &[Trajectory])],
    codec: &LatentCodec,
    seed: u64,
) -> Result<Vec<CrossResult>> {
    if checkpoints.len() < 2 {
        return Err(Error::Invalid("cross-buffer evaluation needs at least two arms".into()));
    }
    let mut out = Vec::with_capacity(checkpoints.len());
    for (arm, wm) in checkpoints {
        let mut names = Vec::new();
        let mut acc = MeanMetrics::default();
        for (b, trajs) in buffers.iter().filter(|(b, _)| b != arm) {
            let m = mean_metrics(&eval_checkpoint(*wm, codec, trajs, seed)?)?;
            acc.l_regret += m.l_regret;
            acc.l_afs += m.l_afs;
            acc.pixel_mse += m.pixel_mse;
            names.push(b.to_string());
        }
        if names.is_empty() {
            return Err(Error::Invalid(format!("no off-diagonal buffers for arm {arm}")));
        }
        let k = names.len() as f64;
        out.push(CrossResult {
            arm: arm.to_string(),
            buffers: names,
            mean: MeanMetrics {
                l_regret: acc.l_regret / k,
                l_afs: acc.l_afs / k,
                pixel_mse: acc.pixel_mse / k,
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongRecord {
    pub traj_id: u64,
    pub first_l_regret: f64,
    pub first_pixel_mse: f64,
    pub final_l_regret: f64,
    pub final_pixel_mse: f64,
    pub final_l_afs: f64,
    /// Mean per-element absolute difference on the final chunk's frames; a
    /// plain structural proxy, not comparable to perceptual metrics.
    pub final_abs_diff: f64,
}

/// Autoregressive rollout over `horizon` chunks; first and final chunk scored.
pub fn long_horizon_eval(
    predictor: &impl LatentPredictor,
    codec: &LatentCodec,
    dataset: &[Trajectory],
    horizon: usize,
    seed: u64,
) -> Result<Vec<LongRecord>> {
    if horizon == 0 {
        return Err(Error::Invalid("horizon must be positive".into()));
    }
    let s = SEED_CHUNKS * CHUNK;
    let need = s + horizon * CHUNK;
    let mut out = Vec::new();
    for t in dataset {
        if t.len() < need {
            log::warn!("skipping trajectory {}: {} steps, need {need}", t.id, t.len());
            continue;
        }
        let latents = t.latents(codec);
        let pred = predictor.predict(&latents[..s], &t.actions[..need], horizon, &mut seeded(derive(seed, t.id)))?;
        if pred.len() != horizon * CHUNK {
            return Err(Error::Shape(format!("predictor returned {} latents for {horizon} chunks", pred.len())));
        }
        let real = &latents[s..need];
        let decode = |z: &[crate::latent::Latent]| -> Vec<Frame> { z.iter().map(|z| codec.decode_latent(z)).collect() };
        let last = (horizon - 1) * CHUNK..horizon * CHUNK;
        let (fp, fr) = (decode(&pred[last.clone()]), decode(&real[last.clone()]));
        let abs: f64 = fp
            .iter()
            .zip(&fr)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .sum::<f64>()
            / (fp.len() * fp[0].len()) as f64;
        out.push(LongRecord {
            traj_id: t.id,
            first_l_regret: latent_regret(&pred[..CHUNK], &real[..CHUNK])?,
            first_pixel_mse: pixel_mse(&decode(&pred[..CHUNK]), &decode(&real[..CHUNK]))?,
            final_l_regret: latent_regret(&pred[last.clone()], &real[last])?,
            final_pixel_mse: pixel_mse(&fp, &fr)?,
            final_l_afs: afs_epe(&fp, &fr)?,
            final_abs_diff: abs,
        });
    }
    out.sort_by_key(|r| r.traj_id);
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV and comparison tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run_id: String,
    pub arm: String,
    pub dataset: String,
    pub traj_id: u64,
    pub l_regret: f64,
    pub l_afs: f64,
    pub pixel_mse: f64,
    pub horizon: usize,
    pub subset_tag: String,
}

pub const EVAL_COLUMNS: [&str; 9] = [
    "run_id",
    "arm",
    "dataset",
    "traj_id",
    "l_regret",
    "l_afs",
    "pixel_mse",
    "horizon",
    "subset_tag",
];

pub fn eval_rows(
    run_id: &str,
    arm: &str,
    dataset: &str,
    horizon: usize,
    subset_tag: &str,
    records: &[EvalRecord],
) -> Vec<EvalRow> {
    records
        .iter()
        .map(|r| EvalRow {
            run_id: run_id.into(),
            arm: arm.into(),
            dataset: dataset.into(),
            traj_id: r.traj_id,
            l_regret: r.l_regret,
            l_afs: r.l_afs,
            pixel_mse: r.pixel_mse,
            horizon,
            subset_tag: subset_tag.into(),
        })
        .collect()
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(EVAL_COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// 100 * (b - a) / a.
pub fn delta_pct(a: f64, b: f64) -> f64 {
    100.0 * (b - a) / a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub subset_tag: String,
    pub metric: String,
    pub baseline: String,
    pub arm: String,
    pub baseline_value: f64,
    pub arm_value: f64,
    pub delta_pct: f64,
}

/// Mean of each metric per (arm, dataset, subset_tag).
pub fn aggregate(rows: &[EvalRow]) -> BTreeMap<(String, String, String), MeanMetrics> {
    let mut groups: BTreeMap<(String, String, String), Vec<EvalRecord>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.arm.clone(), r.dataset.clone(), r.subset_tag.clone()))
            .or_default()
            .push(EvalRecord {
                traj_id: r.traj_id,
                l_regret: r.l_regret,
                l_afs: r.l_afs,
                pixel_mse: r.pixel_mse,
            });
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, mean_metrics(&v).expect("groups are non-empty")))
        .collect()
}

/// Comparison rows of every other arm against `baseline`, one per
/// (dataset, subset, metric) present for both.
pub fn report(rows: &[EvalRow], baseline: &str) -> Result<Vec<ReportRow>> {
    let agg = aggregate(rows);
    if !agg.keys().any(|(a, _, _)| a == baseline) {
        return Err(Error::Invalid(format!("baseline arm {baseline:?} not found")));
    }
    let mut out = Vec::new();
    for ((arm, dataset, subset), m) in &agg {
        if arm == baseline {
            continue;
        }
        let Some(b) = agg.get(&(baseline.to_string(), dataset.clone(), subset.clone())) else {
            continue;
        };
        for (metric, bv, av) in [
            ("l_regret", b.l_regret, m.l_regret),
            ("l_afs", b.l_afs, m.l_afs),
            ("pixel_mse", b.pixel_mse, m.pixel_mse),
        ] {
            out.push(ReportRow {
                dataset: dataset.clone(),
                subset_tag: subset.clone(),
                metric: metric.into(),
                baseline: baseline.into(),
                arm: arm.clone(),
                baseline_value: bv,
                arm_value: av,
                delta_pct: delta_pct(bv, av),
            });
        }
    }
    Ok(out)
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record([
            "dataset",
            "subset_tag",
            "metric",
            "baseline",
            "arm",
            "baseline_value",
            "arm_value",
            "delta_pct",
        ])
        .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// full protocol run

/// Dataset sizes and seed for [`run_protocols`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolPlan {
    /// Episodes per held-out demonstrator kind.
    pub heldout: usize,
    pub reference: usize,
    pub long: usize,
    pub episode_len: usize,
    pub seed: u64,
}

impl Default for ProtocolPlan {
    fn default() -> Self {
        Self {
            heldout: 128,
            reference: 64,
            long: 16,
            episode_len: 12,
            seed: 77,
        }
    }
}

/// One trained arm: its final checkpoint and, optionally, its buffer.
#[derive(Debug, Clone, Copy)]
pub struct ArmArtifacts<'a> {
    pub name: &'a str,
    pub wm: &'a WmParams,
    pub buffer: Option<&'a [Trajectory]>,
}

pub const PHASE1_ARM: &str = "phase1";
pub const HARDEST_TIERS: [(&str, f64); 2] = [("top25", 0.25), ("top10", 0.10)];

/// Runs every protocol for the Phase-1 checkpoint and each arm:
/// short-horizon scoring on held-out kinds and reference rollouts, with
/// hardest subsets picked by Phase-1 regret; long-horizon final-chunk
/// scoring; and scoring on every other arm's buffer.
pub fn run_protocols(
    run_id: &str,
    phase1: &WmParams,
    arms: &[ArmArtifacts],
    reference: &PolicyParams,
    codec: &LatentCodec,
    plan: &ProtocolPlan,
) -> Result<Vec<EvalRow>> {
    if arms.iter().any(|a| a.name == PHASE1_ARM) {
        return Err(Error::Invalid(format!("arm name {PHASE1_ARM:?} is reserved")));
    }
    let models: Vec<(&str, &WmParams)> = std::iter::once((PHASE1_ARM, phase1))
        .chain(arms.iter().map(|a| (a.name, a.wm)))
        .collect();
    let mut sets = heldout_sets(plan.heldout, plan.episode_len)?;
    sets.push((
        "reference".into(),
        reference_rollouts(reference, plan.reference, plan.episode_len, plan.seed)?,
    ));

    let mut rows = Vec::new();
    for (dataset, data) in &sets {
        let base = eval_checkpoint(phase1, codec, data, plan.seed)?;
        let regrets: Vec<(u64, f64)> = base.iter().map(|r| (r.traj_id, r.l_regret)).collect();
        let tiers = HARDEST_TIERS
            .iter()
            .map(|(tag, f)| Ok((*tag, select_hardest(&regrets, *f)?)))
            .collect::<Result<Vec<_>>>()?;
        for (name, wm) in &models {
            let recs = if *name == PHASE1_ARM { base.clone() } else { eval_checkpoint(*wm, codec, data, plan.seed)? };
            rows.extend(eval_rows(run_id, name, dataset, HORIZON_CHUNKS, "all", &recs));
            for (tag, ids) in &tiers {
                let sub: Vec<EvalRecord> = recs.iter().filter(|r| ids.contains(&r.traj_id)).copied().collect();
                rows.extend(eval_rows(run_id, name, dataset, HORIZON_CHUNKS, tag, &sub));
            }
        }
    }

    let long = long_set(plan.long)?;
    for (name, wm) in &models {
        let recs: Vec<EvalRecord> = long_horizon_eval(*wm, codec, &long, LONG_HORIZON, plan.seed)?
            .into_iter()
            .map(|r| EvalRecord {
                traj_id: r.traj_id,
                l_regret: r.final_l_regret,
                l_afs: r.final_l_afs,
                pixel_mse: r.final_pixel_mse,
            })
            .collect();
        rows.extend(eval_rows(run_id, name, "long", LONG_HORIZON, "final", &recs));
    }

    for arm in arms {
        let Some(buffer) = arm.buffer else { continue };
        let dataset = format!("buffer:{}", arm.name);
        for (name, wm) in models.iter().filter(|(n, _)| *n != arm.name) {
            let recs = eval_checkpoint(*wm, codec, buffer, plan.seed)?;
            rows.extend(eval_rows(run_id, name, &dataset, HORIZON_CHUNKS, "offdiag", &recs));
        }
    }
    Ok(rows)
}
