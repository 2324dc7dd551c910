//! Diffusion-forcing world model over chunks of latent frames.
//!
//! The context is a fixed window of 21 latent slots: 6 lightly-noised history
//! slots, 3 target slots and 12 pure-noise pads. An MLP trunk reads the
//! flattened window, the per-slot noise levels and a 16-wide conditioning
//! vector, and predicts the velocity `eps - z` for each target slot.
//!
//! Actions reach the model as a serialized token string, embedded by a frozen
//! hashed bag-of-tokens table and passed through a small trainable adapter.
//! The trunk and the adapter are separate parameter sets so that fine-tuning
//! can be restricted to the conditioning pathway.

use std::path::Path;

use rand::Rng as _;

use crate::checkpoint::{params_checksum, Container, Section};
use crate::env::{Action, Button, CENTER_BIN, CHUNK};
use crate::error::{shape_err, Error, Result};
use crate::latent::{Latent, LatentCodec, LATENT_DIM};
use crate::numerics::{adam_step, clip_global_norm, randn, AdamConfig, AdamState, MlpParams, MlpTrace};
use crate::rng::{derive, fnv1a64, seeded, Rng};
use crate::trajectory::Trajectory;

pub const MAX_T: usize = 21;
pub const HISTORY_SLOTS: usize = 6;
pub const TARGET_SLOTS: usize = CHUNK;
pub const PAD_SLOTS: usize = MAX_T - HISTORY_SLOTS - TARGET_SLOTS;
pub const HISTORY_SIGMA: f64 = 0.05;
pub const SEED_CHUNKS: usize = 2;
pub const EMBED_DIM: usize = 32;
pub const COND_DIM: usize = 16;
pub const ADAPTER_HIDDEN: usize = 32;
pub const TRUNK_IN: usize = MAX_T * LATENT_DIM + MAX_T + COND_DIM;
pub const TRUNK_OUT: usize = TARGET_SLOTS * LATENT_DIM;
pub const DEFAULT_TRUNK_HIDDEN: [usize; 2] = [256, 256];
pub const CFG_DROPOUT: f64 = 0.1;
pub const WM_MAGIC: [u8; 4] = *b"PRWM";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    History,
    Target,
    Pad,
}

/// Which parameters a loss evaluation differentiates and an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    CondOnly,
}

// ---------------------------------------------------------------------------
// action serialization and embedding

fn frame_token(a: &Action) -> String {
    let mut parts: Vec<String> = Button::ALL
        .iter()
        .filter(|&&b| a.pressed(b))
        .map(|b| b.name().to_string())
        .collect();
    parts.sort();
    if a.yaw_bin != CENTER_BIN || a.pitch_bin != CENTER_BIN {
        parts.push(format!("cam({},{})", a.yaw_bin, a.pitch_bin));
    }
    if parts.is_empty() {
        "idle".to_string()
    } else {
        parts.join(" ")
    }
}

/// Run-length encoded token string for one chunk of actions.
pub fn serialize_actions(actions: &[Action]) -> String {
    let mut runs: Vec<(String, usize)> = Vec::new();
    for a in actions {
        let tok = frame_token(a);
        match runs.last_mut() {
            Some((last, n)) if *last == tok => *n += 1,
            _ => runs.push((tok, 1)),
        }
    }
    runs.into_iter()
        .map(|(t, n)| if n > 1 { format!("{t} x{n}") } else { t })
        .collect::<Vec<_>>()
        .join(" | ")
}

fn token_vector(embed_seed: u64, token: &str) -> [f64; EMBED_DIM] {
    let mut rng = seeded(derive(embed_seed, fnv1a64(token.as_bytes())));
    let scale = (EMBED_DIM as f64).sqrt();
    let mut v = [0.0; EMBED_DIM];
    v.iter_mut().for_each(|x| *x = randn(&mut rng) / scale);
    v
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, PartialEq)]
pub struct WmParams {
    pub trunk: MlpParams,
    pub cond_adapter: MlpParams,
    embed_seed: u64,
    codec_seed: u64,
}

impl WmParams {
    pub fn init(seed: u64, codec_seed: u64, trunk_hidden: &[usize]) -> Result<Self> {
        let mut rng = seeded(seed);
        let mut sizes = vec![TRUNK_IN];
        sizes.extend_from_slice(trunk_hidden);
        sizes.push(TRUNK_OUT);
        let trunk = MlpParams::init(&sizes, 0.1, &mut rng)?;
        let cond_adapter = MlpParams::init(&[EMBED_DIM, ADAPTER_HIDDEN, COND_DIM], 1.0, &mut rng)?;
        Ok(Self {
            trunk,
            cond_adapter,
            embed_seed: derive(seed, 0xE3BE),
            codec_seed,
        })
    }

    pub fn embed_seed(&self) -> u64 {
        self.embed_seed
    }

    pub fn codec_seed(&self) -> u64 {
        self.codec_seed
    }

    /// Frozen bag-of-tokens embedding: sum of per-token hashed vectors.
    pub fn raw_embedding(&self, tokens: &str) -> [f64; EMBED_DIM] {
        let mut out = [0.0; EMBED_DIM];
        for tok in tokens.split_whitespace() {
            for (o, v) in out.iter_mut().zip(token_vector(self.embed_seed, tok)) {
                *o += v;
            }
        }
        out
    }

    pub fn trunk_checksum(&self) -> String {
        params_checksum(self.trunk.flat())
    }

    pub fn adapter_checksum(&self) -> String {
        params_checksum(self.cond_adapter.flat())
    }

    pub fn to_container(&self) -> Container {
        Container {
            magic: WM_MAGIC,
            seed_a: self.codec_seed,
            seed_b: self.embed_seed,
            sections: vec![
                Section {
                    name: "trunk".into(),
                    params: self.trunk.clone(),
                },
                Section {
                    name: "cond_adapter".into(),
                    params: self.cond_adapter.clone(),
                },
            ],
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let trunk = c.section("trunk")?.clone();
        let cond_adapter = c.section("cond_adapter")?.clone();
        if trunk.input_width() != TRUNK_IN || trunk.output_width() != TRUNK_OUT {
            return Err(Error::Format("trunk layer sizes do not fit the window layout".into()));
        }
        if cond_adapter.input_width() != EMBED_DIM || cond_adapter.output_width() != COND_DIM {
            return Err(Error::Format("adapter layer sizes do not fit the embedding".into()));
        }
        Ok(Self {
            trunk,
            cond_adapter,
            embed_seed: c.seed_b,
            codec_seed: c.seed_a,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, WM_MAGIC)?)
    }

    /// Checks that this checkpoint was trained against `codec`.
    pub fn check_codec(&self, codec: &LatentCodec) -> Result<()> {
        if codec.seed() != self.codec_seed {
            return Err(Error::Config(format!(
                "world model expects codec seed {}, got {}",
                self.codec_seed,
                codec.seed()
            )));
        }
        Ok(())
    }
}

/// Conditioning vector for a token string. With `dropout_active`, the raw
/// embedding is zeroed with probability [`CFG_DROPOUT`].
pub fn embed_actions(params: &WmParams, tokens: &str, dropout_active: bool, rng: &mut Rng) -> Result<Vec<f64>> {
    let dropped = dropout_active && rng.random::<f64>() < CFG_DROPOUT;
    let raw = if dropped { [0.0; EMBED_DIM] } else { params.raw_embedding(tokens) };
    params.cond_adapter.forward(&raw)
}

// ---------------------------------------------------------------------------
// window layout

/// Gaussian draws for the history perturbation and the pad slots.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowNoise {
    pub history: [Latent; HISTORY_SLOTS],
    pub pads: [Latent; PAD_SLOTS],
}

fn randn_latent(rng: &mut Rng) -> Latent {
    let mut z = [0.0; LATENT_DIM];
    z.iter_mut().for_each(|v| *v = randn(rng));
    z
}

impl WindowNoise {
    pub fn draw(rng: &mut Rng) -> Self {
        Self {
            history: std::array::from_fn(|_| randn_latent(rng)),
            pads: std::array::from_fn(|_| randn_latent(rng)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkWindow {
    pub slots: Vec<Latent>,
    pub sigmas: Vec<f64>,
    pub roles: Vec<SlotRole>,
}

impl ChunkWindow {
    /// History slots are noised at [`HISTORY_SIGMA`]; pads are pure noise at 1.0.
    pub fn assemble(
        history: &[Latent],
        targets: &[Latent; TARGET_SLOTS],
        target_sigmas: &[f64; TARGET_SLOTS],
        noise: &WindowNoise,
    ) -> Result<Self> {
        if history.len() != HISTORY_SLOTS {
            return shape_err(format!("window needs {HISTORY_SLOTS} history latents, got {}", history.len()));
        }
        let mut slots = Vec::with_capacity(MAX_T);
        let mut sigmas = Vec::with_capacity(MAX_T);
        let mut roles = Vec::with_capacity(MAX_T);
        for (z, e) in history.iter().zip(&noise.history) {
            slots.push(std::array::from_fn(|i| (1.0 - HISTORY_SIGMA) * z[i] + HISTORY_SIGMA * e[i]));
            sigmas.push(HISTORY_SIGMA);
            roles.push(SlotRole::History);
        }
        for (z, &s) in targets.iter().zip(target_sigmas) {
            slots.push(*z);
            sigmas.push(s);
            roles.push(SlotRole::Target);
        }
        for p in &noise.pads {
            slots.push(*p);
            sigmas.push(1.0);
            roles.push(SlotRole::Pad);
        }
        Ok(Self { slots, sigmas, roles })
    }

    /// Checks slot count, role ordering, the target count and pad noise level.
    pub fn validate(&self) -> Result<()> {
        if self.slots.len() != MAX_T || self.sigmas.len() != MAX_T || self.roles.len() != MAX_T {
            return shape_err(format!("window must have {MAX_T} slots"));
        }
        let rank = |r: &SlotRole| match r {
            SlotRole::History => 0,
            SlotRole::Target => 1,
            SlotRole::Pad => 2,
        };
        if self.roles.windows(2).any(|w| rank(&w[0]) > rank(&w[1])) {
            return Err(Error::Invalid("window roles out of order".into()));
        }
        if self.roles.iter().filter(|r| **r == SlotRole::Target).count() != TARGET_SLOTS {
            return Err(Error::Invalid(format!("window needs exactly {TARGET_SLOTS} target slots")));
        }
        for (r, s) in self.roles.iter().zip(&self.sigmas) {
            if !(0.0..=1.0).contains(s) || (*r == SlotRole::Pad && *s != 1.0) {
                return Err(Error::Invalid(format!("bad noise level {s} for {r:?} slot")));
            }
        }
        Ok(())
    }

    pub fn target_range(&self) -> std::ops::Range<usize> {
        HISTORY_SLOTS..HISTORY_SLOTS + TARGET_SLOTS
    }

    fn trunk_input(&self, cond: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(TRUNK_IN);
        for s in &self.slots {
            x.extend_from_slice(s);
        }
        x.extend_from_slice(&self.sigmas);
        x.extend_from_slice(cond);
        x
    }
}

// ---------------------------------------------------------------------------
// diffusion-forcing loss

/// All random quantities consumed by one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DfDraw {
    pub sigmas: [f64; TARGET_SLOTS],
    pub eps: [Latent; TARGET_SLOTS],
    pub noise: WindowNoise,
    pub dropped: bool,
}

impl DfDraw {
    pub fn sample(rng: &mut Rng, dropout_p: f64) -> Self {
        let sigmas = std::array::from_fn(|_| rng.random::<f64>());
        let eps = std::array::from_fn(|_| randn_latent(rng));
        let noise = WindowNoise::draw(rng);
        let dropped = rng.random::<f64>() < dropout_p;
        Self {
            sigmas,
            eps,
            noise,
            dropped,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmGrads {
    /// `None` when only the conditioning subset was differentiated.
    pub trunk: Option<Vec<f64>>,
    pub adapter: Vec<f64>,
}

impl WmGrads {
    pub fn zeros(params: &WmParams, subset: Subset) -> Self {
        Self {
            trunk: (subset == Subset::All).then(|| vec![0.0; params.trunk.len()]),
            adapter: vec![0.0; params.cond_adapter.len()],
        }
    }

    fn add_scaled(&mut self, other: &WmGrads, s: f64) {
        if let (Some(a), Some(b)) = (self.trunk.as_mut(), other.trunk.as_ref()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
        self.adapter.iter_mut().zip(&other.adapter).for_each(|(x, y)| *x += s * y);
    }
}

struct DfForward {
    loss: f64,
    residual: Vec<f64>,
    trunk_trace: MlpTrace,
    adapter_trace: MlpTrace,
}

fn df_forward(
    params: &WmParams,
    history: &[Latent],
    targets: &[Latent; TARGET_SLOTS],
    tokens: &str,
    draw: &DfDraw,
) -> Result<DfForward> {
    let noisy: [Latent; TARGET_SLOTS] = std::array::from_fn(|k| {
        let s = draw.sigmas[k];
        std::array::from_fn(|i| (1.0 - s) * targets[k][i] + s * draw.eps[k][i])
    });
    let window = ChunkWindow::assemble(history, &noisy, &draw.sigmas, &draw.noise)?;
    let raw = if draw.dropped { [0.0; EMBED_DIM] } else { params.raw_embedding(tokens) };
    let adapter_trace = params.cond_adapter.forward_trace(&raw)?;
    let trunk_trace = params.trunk.forward_trace(&window.trunk_input(adapter_trace.output()))?;
    let out = trunk_trace.output();
    let mut residual = Vec::with_capacity(TRUNK_OUT);
    for k in 0..TARGET_SLOTS {
        for i in 0..LATENT_DIM {
            residual.push(out[k * LATENT_DIM + i] - (draw.eps[k][i] - targets[k][i]));
        }
    }
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / TRUNK_OUT as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("df_loss"));
    }
    Ok(DfForward {
        loss,
        residual,
        trunk_trace,
        adapter_trace,
    })
}

/// Loss and gradients for a fixed draw. The loss is the mean squared error
/// between the predicted and true velocities over the target slots.
pub fn df_loss_with_draw(
    params: &WmParams,
    history: &[Latent],
    targets: &[Latent; TARGET_SLOTS],
    tokens: &str,
    draw: &DfDraw,
    subset: Subset,
) -> Result<(f64, WmGrads)> {
    let fwd = df_forward(params, history, targets, tokens, draw)?;
    let upstream: Vec<f64> = fwd.residual.iter().map(|r| 2.0 * r / TRUNK_OUT as f64).collect();
    let mut grads = WmGrads::zeros(params, subset);
    let dx = params.trunk.backward(&fwd.trunk_trace, &upstream, grads.trunk.as_deref_mut())?;
    let dcond = &dx[TRUNK_IN - COND_DIM..];
    params
        .cond_adapter
        .backward(&fwd.adapter_trace, dcond, Some(&mut grads.adapter))?;
    Ok((fwd.loss, grads))
}

pub fn df_loss_value(
    params: &WmParams,
    history: &[Latent],
    targets: &[Latent; TARGET_SLOTS],
    tokens: &str,
    draw: &DfDraw,
) -> Result<f64> {
    Ok(df_forward(params, history, targets, tokens, draw)?.loss)
}

/// Draws noise levels, noise and the dropout coin from `rng`, then evaluates.
pub fn df_loss(
    params: &WmParams,
    history: &[Latent],
    targets: &[Latent; TARGET_SLOTS],
    tokens: &str,
    subset: Subset,
    rng: &mut Rng,
) -> Result<(f64, WmGrads)> {
    let draw = DfDraw::sample(rng, CFG_DROPOUT);
    df_loss_with_draw(params, history, targets, tokens, &draw, subset)
}

// ---------------------------------------------------------------------------
// sampling and rollout

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub cfg_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 20,
            cfg_scale: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleNoise {
    pub init: [Latent; TARGET_SLOTS],
    pub window: WindowNoise,
}

impl SampleNoise {
    pub fn draw(rng: &mut Rng) -> Self {
        Self {
            init: std::array::from_fn(|_| randn_latent(rng)),
            window: WindowNoise::draw(rng),
        }
    }
}

/// Euler integration of the guided velocity field from sigma 1 to 0.
pub fn sample_chunk_with_noise(
    params: &WmParams,
    history: &[Latent],
    tokens: &str,
    cfg: &SamplerConfig,
    noise: &SampleNoise,
) -> Result<[Latent; TARGET_SLOTS]> {
    if cfg.n_steps == 0 {
        return Err(Error::Invalid("sampler needs at least one step".into()));
    }
    let cond = params.cond_adapter.forward(&params.raw_embedding(tokens))?;
    let uncond = params.cond_adapter.forward(&[0.0; EMBED_DIM])?;
    let guided = cfg.cfg_scale != 1.0;
    let dt = 1.0 / cfg.n_steps as f64;
    let mut x = noise.init;
    for step in 0..cfg.n_steps {
        let sigma = 1.0 - step as f64 * dt;
        let window = ChunkWindow::assemble(history, &x, &[sigma; TARGET_SLOTS], &noise.window)?;
        let v_c = params.trunk.forward(&window.trunk_input(&cond))?;
        let v = if guided {
            let v_u = params.trunk.forward(&window.trunk_input(&uncond))?;
            v_u.iter().zip(&v_c).map(|(u, c)| u + cfg.cfg_scale * (c - u)).collect()
        } else {
            v_c
        };
        for k in 0..TARGET_SLOTS {
            for i in 0..LATENT_DIM {
                x[k][i] -= dt * v[k * LATENT_DIM + i];
            }
        }
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled chunk"));
    }
    Ok(x)
}

pub fn sample_chunk(
    params: &WmParams,
    history: &[Latent],
    tokens: &str,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<[Latent; TARGET_SLOTS]> {
    let noise = SampleNoise::draw(rng);
    sample_chunk_with_noise(params, history, tokens, cfg, &noise)
}

/// Autoregressive rollout with one explicit seed per predicted chunk.
///
/// `seed_latents` holds whole seed chunks; `actions` covers the seed chunks
/// plus the horizon. Returns `chunk_seeds.len() * K` predicted latents.
pub fn rollout_chunks(
    params: &WmParams,
    seed_latents: &[Latent],
    actions: &[Action],
    chunk_seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<Latent>> {
    let horizon = chunk_seeds.len();
    if horizon == 0 {
        return Err(Error::Invalid("rollout horizon must be at least one chunk".into()));
    }
    if seed_latents.len() < HISTORY_SLOTS || seed_latents.len() % CHUNK != 0 {
        return shape_err(format!(
            "rollout needs whole seed chunks covering {HISTORY_SLOTS} latents, got {}",
            seed_latents.len()
        ));
    }
    let s = seed_latents.len() / CHUNK;
    if actions.len() < (s + horizon) * CHUNK {
        return shape_err(format!(
            "rollout over {} chunks needs {} actions, got {}",
            s + horizon,
            (s + horizon) * CHUNK,
            actions.len()
        ));
    }
    let mut context = seed_latents.to_vec();
    let mut predicted = Vec::with_capacity(horizon * CHUNK);
    for (i, &seed) in chunk_seeds.iter().enumerate() {
        let a0 = (s + i) * CHUNK;
        let tokens = serialize_actions(&actions[a0..a0 + CHUNK]);
        let history = &context[context.len() - HISTORY_SLOTS..];
        let chunk = sample_chunk(params, history, &tokens, cfg, &mut seeded(seed))?;
        context.extend_from_slice(&chunk);
        predicted.extend_from_slice(&chunk);
    }
    Ok(predicted)
}

pub fn rollout(
    params: &WmParams,
    seed_latents: &[Latent],
    actions: &[Action],
    horizon: usize,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<Latent>> {
    let seeds: Vec<u64> = (0..horizon).map(|_| rng.random()).collect();
    rollout_chunks(params, seed_latents, actions, &seeds, cfg)
}

/// Anything that can continue a latent sequence given the actions. The world
/// model is the main implementation; tests plug in exact oracles.
pub trait LatentPredictor {
    fn predict(&self, seed_latents: &[Latent], actions: &[Action], horizon: usize, rng: &mut Rng) -> Result<Vec<Latent>>;
}

impl LatentPredictor for WmParams {
    fn predict(&self, seed_latents: &[Latent], actions: &[Action], horizon: usize, rng: &mut Rng) -> Result<Vec<Latent>> {
        rollout(self, seed_latents, actions, horizon, &SamplerConfig::default(), rng)
    }
}

// ---------------------------------------------------------------------------
// training

/// One training example: six clean history latents, three clean targets and
/// the serialized target-chunk actions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainWindow {
    pub history: Vec<Latent>,
    pub targets: [Latent; TARGET_SLOTS],
    pub tokens: String,
}

/// Every window of a trajectory whose target chunk has a full history.
pub fn training_windows(latents: &[Latent], actions: &[Action]) -> Vec<TrainWindow> {
    let n_chunks = latents.len().min(actions.len()) / CHUNK;
    (HISTORY_SLOTS / CHUNK..n_chunks)
        .map(|j| {
            let t0 = j * CHUNK;
            TrainWindow {
                history: latents[t0 - HISTORY_SLOTS..t0].to_vec(),
                targets: std::array::from_fn(|k| latents[t0 + k]),
                tokens: serialize_actions(&actions[t0..t0 + CHUNK]),
            }
        })
        .collect()
}

pub fn trajectory_windows(traj: &Trajectory, codec: &LatentCodec) -> Vec<TrainWindow> {
    training_windows(&traj.latents(codec), &traj.actions)
}

/// Mean loss over windows with a fixed seed and no conditioning dropout.
pub fn eval_df_loss(params: &WmParams, windows: &[TrainWindow], seed: u64) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Invalid("no evaluation windows".into()));
    }
    let mut rng = seeded(seed);
    let mut total = 0.0;
    for w in windows {
        let draw = DfDraw::sample(&mut rng, 0.0);
        total += df_loss_value(params, &w.history, &w.targets, &w.tokens, &draw)?;
    }
    Ok(total / windows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmTrainConfig {
    pub lr: f64,
    pub max_grad_norm: f64,
    pub cfg_dropout: f64,
}

impl Default for WmTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            max_grad_norm: 1.0,
            cfg_dropout: CFG_DROPOUT,
        }
    }
}

/// Optimizer state for both parameter subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct WmTrainer {
    pub cfg: WmTrainConfig,
    adam_trunk: AdamState,
    adam_adapter: AdamState,
}

impl WmTrainer {
    pub fn new(params: &WmParams, cfg: WmTrainConfig) -> Self {
        Self {
            cfg,
            adam_trunk: AdamState::new(params.trunk.len()),
            adam_adapter: AdamState::new(params.cond_adapter.len()),
        }
    }

    /// One optimizer step on a minibatch: gradients are averaged over every
    /// window of every sample, clipped, then applied to `subset` only.
    /// Returns the mean loss before the step.
    pub fn step(&mut self, params: &mut WmParams, samples: &[&[TrainWindow]], subset: Subset, rng: &mut Rng) -> Result<f64> {
        let n: usize = samples.iter().map(|s| s.len()).sum();
        if n == 0 {
            return Err(Error::Invalid("minibatch has no training windows".into()));
        }
        let mut acc = WmGrads::zeros(params, subset);
        let mut loss = 0.0;
        for w in samples.iter().flat_map(|s| s.iter()) {
            let draw = DfDraw::sample(rng, self.cfg.cfg_dropout);
            let (l, g) = df_loss_with_draw(params, &w.history, &w.targets, &w.tokens, &draw, subset)?;
            loss += l;
            acc.add_scaled(&g, 1.0 / n as f64);
        }
        match acc.trunk.as_mut() {
            Some(t) => clip_global_norm(&mut [t, &mut acc.adapter], self.cfg.max_grad_norm),
            None => clip_global_norm(&mut [&mut acc.adapter], self.cfg.max_grad_norm),
        };
        let adam = AdamConfig::default();
        if let Some(t) = &acc.trunk {
            adam_step(params.trunk.flat_mut(), t, &mut self.adam_trunk, self.cfg.lr, adam)?;
        }
        adam_step(params.cond_adapter.flat_mut(), &acc.adapter, &mut self.adam_adapter, self.cfg.lr, adam)?;
        Ok(loss / n as f64)
    }

    /// Fine-tunes on a batch of trajectories, `minibatch` samples per step.
    /// Returns the mean pre-step loss across steps.
    pub fn finetune(
        &mut self,
        params: &mut WmParams,
        batch: &[&Trajectory],
        codec: &LatentCodec,
        subset: Subset,
        minibatch: usize,
        rng: &mut Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("fine-tune batch is empty".into()));
        }
        let windows: Vec<Vec<TrainWindow>> = batch.iter().map(|t| trajectory_windows(t, codec)).collect();
        let mut total = 0.0;
        let mut steps = 0;
        for group in windows.chunks(minibatch.max(1)) {
            let refs: Vec<&[TrainWindow]> = group.iter().map(|w| w.as_slice()).collect();
            total += self.step(params, &refs, subset, rng)?;
            steps += 1;
        }
        Ok(total / steps as f64)
    }
}
