//! Factored actor-critic adversary.
//!
//! One MLP reads the 64-value frame plus two pose features and emits 9 yaw
//! logits, 9 pitch logits, 8 button logits and a value. The action
//! distribution is the product of the two categoricals and eight Bernoullis,
//! so entropy and KL to the reference policy are computed exactly.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::checkpoint::{params_checksum, Container, Section};
use crate::env::{Action, AgentState, Frame, FRAME_LEN, N_BINS, N_BUTTONS};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, clip_global_norm, AdamConfig, AdamState, MlpParams};
use crate::rng::{derive, seeded, stream, Rng};
use crate::trajectory::Trajectory;

pub const FEATURE_DIM: usize = FRAME_LEN + 2;
pub const YAW_OFF: usize = 0;
pub const PITCH_OFF: usize = N_BINS;
pub const BUTTON_OFF: usize = 2 * N_BINS;
pub const VALUE_OFF: usize = 2 * N_BINS + N_BUTTONS;
pub const HEAD_DIM: usize = VALUE_OFF + 1;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const POLICY_MAGIC: [u8; 4] = *b"PRPL";

pub fn features(frame: &Frame, state: &AgentState) -> Vec<f64> {
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.extend_from_slice(frame);
    f.extend_from_slice(&state.pose_features());
    f
}

// ---------------------------------------------------------------------------
// distribution algebra

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `ln sigmoid(x)`, stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The factored action distribution at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDist {
    pub yaw_logp: Vec<f64>,
    pub pitch_logp: Vec<f64>,
    pub button_logits: Vec<f64>,
}

fn cat_entropy(logp: &[f64]) -> f64 {
    -logp.iter().map(|l| l.exp() * l).sum::<f64>()
}

fn cat_kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter().zip(logq).map(|(p, q)| p.exp() * (p - q)).sum()
}

fn bern_entropy(x: f64) -> f64 {
    let p = sigmoid(x);
    -(p * log_sigmoid(x) + (1.0 - p) * log_sigmoid(-x))
}

fn bern_kl(x: f64, y: f64) -> f64 {
    let p = sigmoid(x);
    p * (log_sigmoid(x) - log_sigmoid(y)) + (1.0 - p) * (log_sigmoid(-x) - log_sigmoid(-y))
}

/// Direction of the anchor penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// KL(policy || reference).
    Forward,
    /// KL(reference || policy).
    Reverse,
}

impl std::str::FromStr for KlDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(KlDirection::Forward),
            "reverse" => Ok(KlDirection::Reverse),
            other => Err(Error::Config(format!("unknown kl direction {other:?}"))),
        }
    }
}

impl ActionDist {
    pub fn from_head(out: &[f64]) -> Self {
        Self {
            yaw_logp: log_softmax(&out[YAW_OFF..YAW_OFF + N_BINS]),
            pitch_logp: log_softmax(&out[PITCH_OFF..PITCH_OFF + N_BINS]),
            button_logits: out[BUTTON_OFF..BUTTON_OFF + N_BUTTONS].to_vec(),
        }
    }

    pub fn log_prob(&self, a: &Action) -> f64 {
        let mut lp = self.yaw_logp[a.yaw_bin as usize] + self.pitch_logp[a.pitch_bin as usize];
        for (x, &b) in self.button_logits.iter().zip(&a.buttons) {
            lp += if b { log_sigmoid(*x) } else { log_sigmoid(-x) };
        }
        lp
    }

    /// Per-head log-probabilities: yaw, pitch, then the eight buttons.
    pub fn head_log_probs(&self, a: &Action) -> [f64; 2 + N_BUTTONS] {
        let mut out = [0.0; 2 + N_BUTTONS];
        out[0] = self.yaw_logp[a.yaw_bin as usize];
        out[1] = self.pitch_logp[a.pitch_bin as usize];
        for (k, (x, &b)) in self.button_logits.iter().zip(&a.buttons).enumerate() {
            out[2 + k] = if b { log_sigmoid(*x) } else { log_sigmoid(-x) };
        }
        out
    }

    pub fn entropy(&self) -> f64 {
        cat_entropy(&self.yaw_logp)
            + cat_entropy(&self.pitch_logp)
            + self.button_logits.iter().map(|&x| bern_entropy(x)).sum::<f64>()
    }

    /// KL(self || other), summed over the ten heads.
    pub fn kl(&self, other: &ActionDist) -> f64 {
        cat_kl(&self.yaw_logp, &other.yaw_logp)
            + cat_kl(&self.pitch_logp, &other.pitch_logp)
            + self
                .button_logits
                .iter()
                .zip(&other.button_logits)
                .map(|(&x, &y)| bern_kl(x, y))
                .sum::<f64>()
    }

    pub fn sample(&self, rng: &mut Rng) -> Action {
        let pick = |logp: &[f64], rng: &mut Rng| {
            let mut u: f64 = rng.random();
            for (i, l) in logp.iter().enumerate() {
                u -= l.exp();
                if u < 0.0 {
                    return i as u8;
                }
            }
            (logp.len() - 1) as u8
        };
        let yaw_bin = pick(&self.yaw_logp, rng);
        let pitch_bin = pick(&self.pitch_logp, rng);
        let mut buttons = [false; N_BUTTONS];
        for (b, &x) in buttons.iter_mut().zip(&self.button_logits) {
            *b = rng.random::<f64>() < sigmoid(x);
        }
        Action {
            yaw_bin,
            pitch_bin,
            buttons,
        }
    }

    /// d log p(a) / d head outputs (value slot zero).
    fn grad_log_prob(&self, a: &Action, g: &mut [f64], scale: f64) {
        for (j, l) in self.yaw_logp.iter().enumerate() {
            let onehot = if j == a.yaw_bin as usize { 1.0 } else { 0.0 };
            g[YAW_OFF + j] += scale * (onehot - l.exp());
        }
        for (j, l) in self.pitch_logp.iter().enumerate() {
            let onehot = if j == a.pitch_bin as usize { 1.0 } else { 0.0 };
            g[PITCH_OFF + j] += scale * (onehot - l.exp());
        }
        for (k, (&x, &b)) in self.button_logits.iter().zip(&a.buttons).enumerate() {
            g[BUTTON_OFF + k] += scale * (if b { 1.0 } else { 0.0 } - sigmoid(x));
        }
    }

    fn grad_entropy(&self, g: &mut [f64], scale: f64) {
        for (off, logp) in [(YAW_OFF, &self.yaw_logp), (PITCH_OFF, &self.pitch_logp)] {
            let h = cat_entropy(logp);
            for (j, l) in logp.iter().enumerate() {
                g[off + j] += scale * (-l.exp() * (l + h));
            }
        }
        for (k, &x) in self.button_logits.iter().enumerate() {
            let p = sigmoid(x);
            g[BUTTON_OFF + k] += scale * (-x * p * (1.0 - p));
        }
    }

    fn grad_kl(&self, reference: &ActionDist, dir: KlDirection, g: &mut [f64], scale: f64) {
        for (off, logp, logq) in [
            (YAW_OFF, &self.yaw_logp, &reference.yaw_logp),
            (PITCH_OFF, &self.pitch_logp, &reference.pitch_logp),
        ] {
            let kl = cat_kl(logp, logq);
            for j in 0..logp.len() {
                let p = logp[j].exp();
                g[off + j] += scale
                    * match dir {
                        KlDirection::Forward => p * ((logp[j] - logq[j]) - kl),
                        KlDirection::Reverse => p - logq[j].exp(),
                    };
            }
        }
        for (k, (&x, &y)) in self.button_logits.iter().zip(&reference.button_logits).enumerate() {
            let p = sigmoid(x);
            g[BUTTON_OFF + k] += scale
                * match dir {
                    KlDirection::Forward => p * (1.0 - p) * (x - y),
                    KlDirection::Reverse => p - sigmoid(y),
                };
        }
    }
}

pub fn kl_directed(pi: &ActionDist, reference: &ActionDist, dir: KlDirection) -> f64 {
    match dir {
        KlDirection::Forward => pi.kl(reference),
        KlDirection::Reverse => reference.kl(pi),
    }
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub net: MlpParams,
}

impl PolicyParams {
    pub fn init(seed: u64, hidden: &[usize]) -> Result<Self> {
        let mut sizes = vec![FEATURE_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(HEAD_DIM);
        Ok(Self {
            net: MlpParams::init(&sizes, 0.1, &mut seeded(derive(seed, stream::POLICY_INIT)))?,
        })
    }

    /// Zero network: uniform camera bins, fair-coin buttons, value 0.
    pub fn uniform(hidden: &[usize]) -> Result<Self> {
        let mut sizes = vec![FEATURE_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(HEAD_DIM);
        Ok(Self {
            net: MlpParams::zeros(&sizes)?,
        })
    }

    pub fn dist(&self, features: &[f64]) -> Result<(ActionDist, f64)> {
        let out = self.net.forward(features)?;
        Ok((ActionDist::from_head(&out), out[VALUE_OFF]))
    }

    pub fn checksum(&self) -> String {
        params_checksum(self.net.flat())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Container {
            magic: POLICY_MAGIC,
            seed_a: 0,
            seed_b: 0,
            sections: vec![Section {
                name: "policy".into(),
                params: self.net.clone(),
            }],
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, POLICY_MAGIC)?;
        let net = c.section("policy")?.clone();
        if net.input_width() != FEATURE_DIM || net.output_width() != HEAD_DIM {
            return Err(Error::Format("policy layer sizes do not fit the action heads".into()));
        }
        Ok(Self { net })
    }
}

/// A frozen reference with the checksum taken when it was frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct RefPolicy {
    params: PolicyParams,
    checksum: String,
}

impl RefPolicy {
    pub fn freeze(params: PolicyParams) -> Self {
        let checksum = params.checksum();
        Self { params, checksum }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn verify(&self) -> Result<()> {
        if self.params.checksum() != self.checksum {
            return Err(Error::Invalid("reference policy parameters changed".into()));
        }
        Ok(())
    }
}

/// One sampled step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActSample {
    pub action: Action,
    pub head_logp: [f64; 2 + N_BUTTONS],
    pub logp: f64,
    pub value: f64,
}

pub fn act(params: &PolicyParams, features: &[f64], rng: &mut Rng) -> Result<ActSample> {
    let (d, value) = params.dist(features)?;
    let action = d.sample(rng);
    let head_logp = d.head_log_probs(&action);
    Ok(ActSample {
        action,
        head_logp,
        logp: head_logp.iter().sum(),
        value,
    })
}

pub fn analytic_kl(params: &PolicyParams, reference: &PolicyParams, features: &[f64]) -> Result<f64> {
    let (p, _) = params.dist(features)?;
    let (q, _) = reference.dist(features)?;
    Ok(p.kl(&q))
}

/// Schulman's k3 estimator `(r - 1) - ln r` with `r = p_ref / p_policy`.
pub fn k3_kl_estimate(logp_policy: f64, logp_ref: f64) -> f64 {
    let log_r = logp_ref - logp_policy;
    log_r.exp_m1() - log_r
}

/// Mean over consecutive steps of the averaged absolute yaw and pitch bin change.
pub fn camera_velocity(actions: &[Action]) -> Result<f64> {
    if actions.len() < 2 {
        return Err(Error::Invalid(format!("camera velocity needs 2 actions, got {}", actions.len())));
    }
    let total: f64 = actions
        .windows(2)
        .map(|w| {
            let dy = (w[1].yaw_bin as f64 - w[0].yaw_bin as f64).abs();
            let dp = (w[1].pitch_bin as f64 - w[0].pitch_bin as f64).abs();
            (dy + dp) / 2.0
        })
        .sum();
    Ok(total / (actions.len() - 1) as f64)
}

/// Generalized advantage estimation. `values` has one more entry than
/// `rewards` (the bootstrap value after the last step).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Invalid(format!(
            "gae needs {} values for {} rewards, got {}",
            rewards.len() + 1,
            rewards.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

// ---------------------------------------------------------------------------
// PPO

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub features: Vec<f64>,
    pub action: Action,
    pub logp: f64,
    pub value: f64,
}

/// One episode; the reward is paid once, at the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub steps: Vec<RolloutStep>,
    pub terminal_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub c_v: f64,
    pub c_e: f64,
    pub c_kl: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub kl_direction: KlDirection,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            c_v: 0.5,
            c_e: 0.05,
            c_kl: 1.5,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch: 256,
            lr: 3e-5,
            max_grad_norm: 0.5,
            kl_direction: KlDirection::Forward,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpoStats {
    pub aborted: bool,
    pub mean_loss: f64,
    pub mean_kl_before: f64,
    pub mean_kl_after: f64,
    pub mean_entropy: f64,
    /// Largest |ratio - 1| at the start of the first epoch.
    pub max_initial_ratio_dev: f64,
    pub grad_steps: usize,
}

struct Sample<'a> {
    step: &'a RolloutStep,
    adv: f64,
    ret: f64,
    ref_dist: ActionDist,
}

/// Per-sample PPO loss terms for the current parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoTerms {
    pub ratio: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub total: f64,
}

/// Loss of one sample and, if `grad` is given, its gradient added in with
/// weight `scale`.
pub fn ppo_sample_loss(
    params: &PolicyParams,
    reference: &ActionDist,
    step: &RolloutStep,
    adv: f64,
    ret: f64,
    cfg: &PpoConfig,
    grad: Option<(&mut [f64], f64)>,
) -> Result<PpoTerms> {
    let trace = params.net.forward_trace(&step.features)?;
    let out = trace.output();
    let d = ActionDist::from_head(out);
    let v = out[VALUE_OFF];
    let logp = d.log_prob(&step.action);
    let ratio = (logp - step.logp).exp();
    let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let unclipped_term = ratio * adv;
    let surrogate = -(unclipped_term.min(clipped * adv));
    let entropy = d.entropy();
    let kl = kl_directed(&d, reference, cfg.kl_direction);
    let value_loss = (v - ret) * (v - ret);
    let total = surrogate + cfg.c_v * value_loss - cfg.c_e * entropy + cfg.c_kl * kl;
    if let Some((g, scale)) = grad {
        let mut up = vec![0.0; HEAD_DIM];
        // the min picks the unclipped branch unless clipping binds
        if unclipped_term <= clipped * adv {
            d.grad_log_prob(&step.action, &mut up, -ratio * adv);
        }
        up[VALUE_OFF] += cfg.c_v * 2.0 * (v - ret);
        d.grad_entropy(&mut up, -cfg.c_e);
        d.grad_kl(reference, cfg.kl_direction, &mut up, cfg.c_kl);
        up.iter_mut().for_each(|u| *u *= scale);
        params.net.backward(&trace, &up, Some(g))?;
    }
    Ok(PpoTerms {
        ratio,
        surrogate,
        value_loss,
        entropy,
        kl,
        total,
    })
}

/// Clipped-surrogate update with value, entropy and KL-anchor terms.
/// On a non-finite loss the update is abandoned and `params` and `adam`
/// are left exactly as they were.
pub fn ppo_update(
    params: &mut PolicyParams,
    reference: &PolicyParams,
    episodes: &[EpisodeBatch],
    cfg: &PpoConfig,
    adam: &mut AdamState,
    rng: &mut Rng,
) -> Result<PpoStats> {
    if episodes.is_empty() || episodes.iter().any(|e| e.steps.is_empty()) {
        return Err(Error::Invalid("ppo needs at least one non-empty episode".into()));
    }
    let mut samples = Vec::new();
    for ep in episodes {
        let n = ep.steps.len();
        let mut rewards = vec![0.0; n];
        rewards[n - 1] = ep.terminal_reward;
        let mut values: Vec<f64> = ep.steps.iter().map(|s| s.value).collect();
        values.push(0.0);
        let (adv, ret) = gae(&rewards, &values, cfg.gamma, cfg.gae_lambda)?;
        for ((step, a), r) in ep.steps.iter().zip(adv).zip(ret) {
            samples.push(Sample {
                step,
                adv: a,
                ret: r,
                ref_dist: reference.dist(&step.features)?.0,
            });
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.adv).sum::<f64>() / n;
    let std = (samples.iter().map(|s| (s.adv - mean).powi(2)).sum::<f64>() / n).sqrt();
    for s in &mut samples {
        s.adv = (s.adv - mean) / std.max(1e-8);
    }

    let snapshot = (params.clone(), adam.clone());
    let mut stats = PpoStats::default();
    let mut kl_before = 0.0;
    let mut ent = 0.0;
    for s in &samples {
        let t = ppo_sample_loss(params, &s.ref_dist, s.step, s.adv, s.ret, cfg, None)?;
        stats.max_initial_ratio_dev = stats.max_initial_ratio_dev.max((t.ratio - 1.0).abs());
        kl_before += t.kl;
        ent += t.entropy;
    }
    stats.mean_kl_before = kl_before / n;
    stats.mean_entropy = ent / n;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let abort = |params: &mut PolicyParams, adam: &mut AdamState, snapshot: (PolicyParams, AdamState)| {
        log::warn!("non-finite ppo loss; update abandoned, parameters kept");
        *params = snapshot.0;
        *adam = snapshot.1;
    };
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for mb in order.chunks(cfg.minibatch.max(1)) {
            let mut grad = vec![0.0; params.net.len()];
            let scale = 1.0 / mb.len() as f64;
            let mut mb_loss = 0.0;
            for &i in mb {
                let s = &samples[i];
                let t = ppo_sample_loss(params, &s.ref_dist, s.step, s.adv, s.ret, cfg, Some((&mut grad, scale)))?;
                mb_loss += t.total * scale;
            }
            if !mb_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                abort(params, adam, snapshot);
                return Ok(PpoStats {
                    aborted: true,
                    ..Default::default()
                });
            }
            clip_global_norm(&mut [&mut grad], cfg.max_grad_norm);
            adam_step(params.net.flat_mut(), &grad, adam, cfg.lr, AdamConfig::default())?;
            loss_sum += mb_loss;
            loss_count += 1;
            stats.grad_steps += 1;
        }
    }
    stats.mean_loss = loss_sum / loss_count as f64;
    let mut kl_after = 0.0;
    for s in &samples {
        kl_after += kl_directed(&params.dist(&s.step.features)?.0, &s.ref_dist, cfg.kl_direction);
    }
    stats.mean_kl_after = kl_after / n;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// behaviour cloning

/// (features, action) pairs from recorded demonstrations.
pub fn demo_pairs(demos: &[Trajectory]) -> Vec<(Vec<f64>, Action)> {
    demos
        .iter()
        .flat_map(|t| {
            t.replay_observations()
                .into_iter()
                .zip(&t.actions)
                .map(|((s, f), a)| (features(&f, &s), *a))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Mean per-step negative log-likelihood of the demonstrated actions.
pub fn mean_nll(params: &PolicyParams, pairs: &[(Vec<f64>, Action)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no demonstration steps".into()));
    }
    let mut total = 0.0;
    for (f, a) in pairs {
        total -= params.dist(f)?.0.log_prob(a);
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub minibatch: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            minibatch: 64,
        }
    }
}

/// Maximum-likelihood fit of the actor heads to demonstrator actions.
pub fn bc_pretrain(demos: &[Trajectory], cfg: &BcConfig, seed: u64, hidden: &[usize]) -> Result<RefPolicy> {
    let pairs = demo_pairs(demos);
    if pairs.is_empty() {
        return Err(Error::Invalid("behaviour cloning needs demonstrations".into()));
    }
    let mut params = PolicyParams::init(seed, hidden)?;
    let mut adam = AdamState::new(params.net.len());
    let mut rng = seeded(derive(seed, stream::BC));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for mb in order.chunks(cfg.minibatch.max(1)) {
            let mut grad = vec![0.0; params.net.len()];
            for &i in mb {
                let (f, a) = &pairs[i];
                let trace = params.net.forward_trace(f)?;
                let d = ActionDist::from_head(trace.output());
                let mut up = vec![0.0; HEAD_DIM];
                d.grad_log_prob(a, &mut up, -1.0 / mb.len() as f64);
                params.net.backward(&trace, &up, Some(&mut grad))?;
            }
            adam_step(params.net.flat_mut(), &grad, &mut adam, cfg.lr, AdamConfig::default())?;
        }
    }
    Ok(RefPolicy::freeze(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{gen_passive_dataset, random_frame, Button, DemoKind};
    use crate::numerics::{finite_diff_grad, grad_close};
    use proptest::prelude::*;

    fn feat(seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let mut f = random_frame(&mut rng).to_vec();
        f.extend_from_slice(&[rng.random::<f64>(), rng.random::<f64>() - 0.5]);
        f
    }

    fn head(yaw: &[f64], pitch: &[f64], buttons: &[f64]) -> Vec<f64> {
        let mut h = Vec::new();
        h.extend_from_slice(yaw);
        h.extend_from_slice(pitch);
        h.extend_from_slice(buttons);
        h.push(0.0);
        h
    }

    #[test]
    fn uniform_policy_probabilities() {
        let p = PolicyParams::uniform(&[8]).unwrap();
        let (d, v) = p.dist(&feat(1)).unwrap();
        assert_eq!(v, 0.0);
        for l in d.yaw_logp.iter().chain(&d.pitch_logp) {
            assert!((l.exp() - 1.0 / 9.0).abs() < 1e-15);
        }
        assert!(d.button_logits.iter().all(|&x| sigmoid(x) == 0.5));
        let max_h = 2.0 * 9f64.ln() + 8.0 * 2f64.ln();
        assert!((d.entropy() - max_h).abs() < 1e-12);
    }

    #[test]
    fn act_is_reproducible() {
        let p = PolicyParams::init(3, &[16]).unwrap();
        let f = feat(2);
        assert_eq!(act(&p, &f, &mut seeded(9)).unwrap(), act(&p, &f, &mut seeded(9)).unwrap());
        let s = act(&p, &f, &mut seeded(9)).unwrap();
        let (d, _) = p.dist(&f).unwrap();
        assert!((s.logp - d.log_prob(&s.action)).abs() < 1e-12);
    }

    #[test]
    fn kl_worked_examples() {
        let f = feat(3);
        let p = PolicyParams::init(4, &[16]).unwrap();
        assert!(analytic_kl(&p, &p, &f).unwrap().abs() < 1e-12);
        // near-deterministic yaw head against a uniform one
        let mut yaw = vec![-1e3; 9];
        yaw[2] = 0.0;
        let sharp = ActionDist::from_head(&head(&yaw, &[0.0; 9], &[0.0; 8]));
        let flat = ActionDist::from_head(&head(&[0.0; 9], &[0.0; 9], &[0.0; 8]));
        assert!((sharp.kl(&flat) - 9f64.ln()).abs() < 1e-12);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let b09 = ActionDist::from_head(&head(&[0.0; 9], &[0.0; 9], &[logit(0.9), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let oracle = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((b09.kl(&flat) - oracle).abs() < 1e-12);
        assert!((b09.kl(&flat) - 0.3680).abs() < 1e-4);
    }

    #[test]
    fn k3_examples() {
        assert_eq!(k3_kl_estimate(-1.3, -1.3), 0.0);
        assert!((k3_kl_estimate(0.0, 2f64.ln()) - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((k3_kl_estimate(0.0, 0.5f64.ln()) - (-0.5 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn camera_velocity_examples() {
        let a = |y: u8, p: u8| Action::new(y, p, [false; 8]).unwrap();
        assert_eq!(camera_velocity(&[a(3, 4); 5]).unwrap(), 0.0);
        assert_eq!(camera_velocity(&[a(0, 4), a(8, 4), a(0, 4), a(8, 4)]).unwrap(), 4.0);
        assert!(camera_velocity(&[a(0, 0)]).is_err());
        let mut rng = seeded(5);
        let seq: Vec<Action> = (0..20).map(|_| a(rng.random_range(0..9), rng.random_range(0..9))).collect();
        let mut s = 0.0;
        for t in 1..seq.len() {
            s += ((seq[t].yaw_bin as i32 - seq[t - 1].yaw_bin as i32).abs()
                + (seq[t].pitch_bin as i32 - seq[t - 1].pitch_bin as i32).abs()) as f64
                / 2.0;
        }
        assert!((camera_velocity(&seq).unwrap() - s / 19.0).abs() < 1e-12);
    }

    #[test]
    fn gae_examples() {
        let (a, r) = gae(&[1.0], &[0.0, 0.0], 0.99, 0.95).unwrap();
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let (a, _) = gae(&[0.0, 1.0], &[0.0, 0.0, 0.0], 0.99, 0.95).unwrap();
        assert!((a[0] - 0.9405).abs() < 1e-12 && a[1] == 1.0);
        let (a, _) = gae(&[0.0; 4], &[0.0; 5], 0.99, 0.95).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
        assert!(gae(&[0.0; 4], &[0.0; 4], 0.99, 0.95).is_err());
    }

    fn episode(p: &PolicyParams, seed: u64, reward: f64) -> EpisodeBatch {
        let mut rng = seeded(seed);
        let steps = (0..12)
            .map(|t| {
                let f = feat(seed * 100 + t);
                let s = act(p, &f, &mut rng).unwrap();
                RolloutStep {
                    features: f,
                    action: s.action,
                    logp: s.logp,
                    value: s.value,
                }
            })
            .collect();
        EpisodeBatch {
            steps,
            terminal_reward: reward,
        }
    }

    #[test]
    fn clip_uses_clipped_factor() {
        let p = PolicyParams::init(6, &[8]).unwrap();
        let f = feat(7);
        let (d, v) = p.dist(&f).unwrap();
        let a = Action::noop().with(Button::Fwd);
        let logp = d.log_prob(&a);
        // old log-prob chosen so that ratio = 1.5
        let step = RolloutStep {
            features: f,
            action: a,
            logp: logp - 1.5f64.ln(),
            value: v,
        };
        let cfg = PpoConfig {
            c_v: 0.0,
            c_e: 0.0,
            c_kl: 0.0,
            ..Default::default()
        };
        let t = ppo_sample_loss(&p, &d, &step, 2.0, 0.0, &cfg, None).unwrap();
        assert!((t.ratio - 1.5).abs() < 1e-12);
        assert!((t.surrogate + 1.2 * 2.0).abs() < 1e-12);
        // clipped branch active: no actor gradient
        let mut g = vec![0.0; p.net.len()];
        ppo_sample_loss(&p, &d, &step, 2.0, 0.0, &cfg, Some((&mut g, 1.0))).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_advantage_no_actor_gradient() {
        let p = PolicyParams::init(8, &[8]).unwrap();
        let ep = episode(&p, 1, 0.0);
        let cfg = PpoConfig {
            c_v: 0.0,
            c_e: 0.0,
            c_kl: 0.0,
            ..Default::default()
        };
        let mut g = vec![0.0; p.net.len()];
        for s in &ep.steps {
            let d = p.dist(&s.features).unwrap().0;
            ppo_sample_loss(&p, &d, s, 0.0, 0.0, &cfg, Some((&mut g, 1.0))).unwrap();
        }
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ppo_loss_gradients_match_finite_differences() {
        let p = PolicyParams::init(10, &[6]).unwrap();
        let r = PolicyParams::init(11, &[6]).unwrap();
        let ep = episode(&p, 2, 1.0);
        for dir in [KlDirection::Forward, KlDirection::Reverse] {
            let cfg = PpoConfig {
                c_kl: 0.7,
                kl_direction: dir,
                ..Default::default()
            };
            let s = &ep.steps[3];
            let rd = r.dist(&s.features).unwrap().0;
            let mut g = vec![0.0; p.net.len()];
            ppo_sample_loss(&p, &rd, s, 0.8, 0.3, &cfg, Some((&mut g, 1.0))).unwrap();
            let fd = finite_diff_grad(
                |x| {
                    let q = PolicyParams {
                        net: MlpParams::from_flat(p.net.sizes(), x.to_vec()).unwrap(),
                    };
                    ppo_sample_loss(&q, &rd, s, 0.8, 0.3, &cfg, None).unwrap().total
                },
                p.net.flat(),
                1e-6,
            );
            for (a, b) in g.iter().zip(&fd) {
                assert!(grad_close(*a, *b, 1e-5, 1e-8), "{dir:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ppo_ratio_starts_at_one_and_huge_anchor_holds_kl() {
        let reference = PolicyParams::init(12, &[16]).unwrap();
        let mut p = reference.clone();
        // move the policy away so the anchor has something to pull back
        for v in p.net.output_bias_mut() {
            *v += 0.8;
        }
        let eps: Vec<EpisodeBatch> = (0..4).map(|i| episode(&p, 20 + i, i as f64)).collect();
        let cfg = PpoConfig {
            c_kl: 1e6,
            lr: 1e-3,
            ..Default::default()
        };
        let mut adam = AdamState::new(p.net.len());
        let st = ppo_update(&mut p, &reference, &eps, &cfg, &mut adam, &mut seeded(1)).unwrap();
        assert_eq!(st.max_initial_ratio_dev, 0.0);
        assert!(!st.aborted);
        assert!(st.mean_kl_after <= st.mean_kl_before);
        assert_eq!(st.grad_steps, 4);
    }

    #[test]
    fn non_finite_loss_keeps_parameters() {
        let mut p = PolicyParams::init(13, &[8]).unwrap();
        let reference = p.clone();
        let mut eps = vec![episode(&p, 3, 1.0)];
        eps[0].steps[0].logp = f64::NEG_INFINITY;
        let before = p.clone();
        let mut adam = AdamState::new(p.net.len());
        let st = ppo_update(&mut p, &reference, &eps, &PpoConfig::default(), &mut adam, &mut seeded(1)).unwrap();
        assert!(st.aborted);
        assert_eq!(p, before);
        assert_eq!(adam.step(), 0);
    }

    #[test]
    fn bc_beats_uniform_and_is_reproducible() {
        let demos = gen_passive_dataset(DemoKind::Walker, 24, 12, 100).unwrap();
        let held = gen_passive_dataset(DemoKind::Walker, 8, 12, 700).unwrap();
        let cfg = BcConfig {
            epochs: 5,
            ..Default::default()
        };
        let r1 = bc_pretrain(&demos, &cfg, 1, &[32]).unwrap();
        let r2 = bc_pretrain(&demos, &cfg, 1, &[32]).unwrap();
        assert_eq!(r1.checksum(), r2.checksum());
        let uniform = 2.0 * 9f64.ln() + 8.0 * 2f64.ln();
        let nll = mean_nll(r1.params(), &demo_pairs(&held)).unwrap();
        assert!(nll < uniform, "{nll} vs {uniform}");
        r1.verify().unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = PolicyParams::init(1, &[8, 4]).unwrap();
        p.save(&dir.path().join("p.bin")).unwrap();
        assert_eq!(PolicyParams::load(&dir.path().join("p.bin")).unwrap(), p);
        assert!(crate::wm::WmParams::load(&dir.path().join("p.bin")).is_err());
    }

    proptest! {
        #[test]
        fn k3_nonnegative(a in -20.0f64..0.0, b in -20.0f64..0.0) {
            prop_assert!(k3_kl_estimate(a, b) >= 0.0);
        }

        #[test]
        fn entropy_is_sum_of_heads_and_kl_nonnegative(seed in 0u64..200) {
            let p = PolicyParams::init(seed, &[8]).unwrap();
            let q = PolicyParams::init(seed + 1000, &[8]).unwrap();
            let f = feat(seed);
            let (d, _) = p.dist(&f).unwrap();
            let (e, _) = q.dist(&f).unwrap();
            let heads = cat_entropy(&d.yaw_logp) + cat_entropy(&d.pitch_logp)
                + d.button_logits.iter().map(|&x| bern_entropy(x)).sum::<f64>();
            prop_assert!((d.entropy() - heads).abs() < 1e-12);
            prop_assert!(d.entropy() <= 2.0 * 9f64.ln() + 8.0 * 2f64.ln() + 1e-12);
            prop_assert!(d.kl(&e) >= -1e-12);
            prop_assert!(d.kl(&d).abs() < 1e-12);
        }
    }
}
