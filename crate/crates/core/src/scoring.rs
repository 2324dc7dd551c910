//! Trajectory error measures and the buffer priority score.
//!
//! Motion fidelity is measured on decoded frames with per-element temporal
//! differences standing in for optical flow: a prediction that freezes while
//! the real scene moves is penalised even when its appearance is close.

use crate::env::{Frame, CHUNK, FRAME_LEN};
use crate::error::{shape_err, Error, Result};
use crate::latent::{Latent, LatentCodec, LATENT_DIM};
use crate::rng::seeded;
use crate::trajectory::Trajectory;
use crate::wm::LatentPredictor;

pub const Z_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrajectoryScore {
    pub l_regret: f64,
    pub l_afs: f64,
    /// Diagnostic only; never enters the composite.
    pub pixel_mse: f64,
    pub delta_regret: f64,
    pub composite: f64,
}

/// Raw error measurements of one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measured {
    pub l_regret: f64,
    pub l_afs: f64,
    pub pixel_mse: f64,
}

impl Measured {
    pub fn into_score(self) -> TrajectoryScore {
        TrajectoryScore {
            l_regret: self.l_regret,
            l_afs: self.l_afs,
            pixel_mse: self.pixel_mse,
            delta_regret: 0.0,
            composite: 0.0,
        }
    }
}

/// Population statistics of regret and AFS over the buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferStats {
    pub n: usize,
    pub mean_regret: f64,
    pub std_regret: f64,
    pub mean_afs: f64,
    pub std_afs: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl BufferStats {
    pub fn from_values(regrets: &[f64], afs: &[f64]) -> Result<Self> {
        if regrets.is_empty() || regrets.len() != afs.len() {
            return Err(Error::Invalid(format!(
                "buffer statistics need equal non-empty inputs, got {} and {}",
                regrets.len(),
                afs.len()
            )));
        }
        let (mean_regret, std_regret) = mean_std(regrets);
        let (mean_afs, std_afs) = mean_std(afs);
        Ok(Self {
            n: regrets.len(),
            mean_regret,
            std_regret,
            mean_afs,
            std_afs,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Regret,
    Afs,
}

/// Buffer z-score with a floored standard deviation; 0 for buffers under 2.
pub fn znorm(stats: &BufferStats, value: f64, which: Metric) -> f64 {
    if stats.n < 2 {
        return 0.0;
    }
    let (m, s) = match which {
        Metric::Regret => (stats.mean_regret, stats.std_regret),
        Metric::Afs => (stats.mean_afs, stats.std_afs),
    };
    (value - m) / s.max(Z_FLOOR)
}

/// `z(regret) + lambda_afs * z(afs) + beta_prog * delta_regret`; the progress
/// term stays in raw regret units.
pub fn composite_score(score: &TrajectoryScore, stats: &BufferStats, lambda_afs: f64, beta_prog: f64) -> f64 {
    znorm(stats, score.l_regret, Metric::Regret)
        + lambda_afs * znorm(stats, score.l_afs, Metric::Afs)
        + beta_prog * score.delta_regret
}

/// Root mean squared error over every element of the predicted horizon.
pub fn latent_regret(pred: &[Latent], real: &[Latent]) -> Result<f64> {
    if pred.len() != real.len() || pred.is_empty() {
        return shape_err(format!("regret over {} predicted vs {} real latents", pred.len(), real.len()));
    }
    let sq: f64 = pred
        .iter()
        .zip(real)
        .flat_map(|(p, r)| p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)))
        .sum();
    Ok((sq / (pred.len() * LATENT_DIM) as f64).sqrt())
}

/// Per-step temporal differences `frame[t+1] - frame[t]`.
pub fn motion_field(frames: &[Frame]) -> Result<Vec<Frame>> {
    if frames.len() < 2 {
        return Err(Error::Invalid(format!("motion field needs at least 2 frames, got {}", frames.len())));
    }
    Ok(frames
        .windows(2)
        .map(|w| std::array::from_fn(|i| w[1][i] - w[0][i]))
        .collect())
}

/// Mean absolute disagreement between predicted and real motion, averaged
/// over step pairs and frame elements.
pub fn afs_epe(pred: &[Frame], real: &[Frame]) -> Result<f64> {
    if pred.len() != real.len() {
        return shape_err(format!("afs over {} predicted vs {} real frames", pred.len(), real.len()));
    }
    let fp = motion_field(pred)?;
    let fr = motion_field(real)?;
    let total: f64 = fp
        .iter()
        .zip(&fr)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .sum();
    Ok(total / (fp.len() * FRAME_LEN) as f64)
}

pub fn pixel_mse(pred: &[Frame], real: &[Frame]) -> Result<f64> {
    if pred.len() != real.len() || pred.is_empty() {
        return shape_err(format!("pixel mse over {} vs {} frames", pred.len(), real.len()));
    }
    let total: f64 = pred
        .iter()
        .zip(real)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
        .sum();
    Ok(total / (pred.len() * FRAME_LEN) as f64)
}

/// Regret in latent space; AFS and pixel error on decoded frames, with the
/// real latents decoded through the same codec.
pub fn measure(pred: &[Latent], real: &[Latent], codec: &LatentCodec) -> Result<Measured> {
    let l_regret = latent_regret(pred, real)?;
    let fp: Vec<Frame> = pred.iter().map(|z| codec.decode_latent(z)).collect();
    let fr: Vec<Frame> = real.iter().map(|z| codec.decode_latent(z)).collect();
    Ok(Measured {
        l_regret,
        l_afs: afs_epe(&fp, &fr)?,
        pixel_mse: pixel_mse(&fp, &fr)?,
    })
}

/// Predicts `horizon` chunks from the first `seed_chunks` chunks of `traj`
/// and measures the prediction against the recorded continuation.
pub fn evaluate_trajectory(
    predictor: &impl LatentPredictor,
    traj: &Trajectory,
    codec: &LatentCodec,
    seed_chunks: usize,
    horizon: usize,
    seed: u64,
) -> Result<(Measured, Vec<Latent>)> {
    let need = (seed_chunks + horizon) * CHUNK;
    if traj.len() < need {
        return Err(Error::Invalid(format!(
            "trajectory {} has {} steps, needs {need}",
            traj.id,
            traj.len()
        )));
    }
    let latents = traj.latents(codec);
    let s = seed_chunks * CHUNK;
    let pred = predictor.predict(&latents[..s], &traj.actions[..need], horizon, &mut seeded(seed))?;
    let real = &latents[s..need];
    Ok((measure(&pred, real, codec)?, pred))
}
