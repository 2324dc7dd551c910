//! Orchestration of both training phases.
//!
//! Phase 1 fits the world model to passive walker demonstrations and clones
//! the demonstrator into a frozen reference policy. Phase 2 runs one arm:
//! each iteration rolls out the explorer for one episode, scores the world
//! model on it, files it in the buffer and pays the terminal reward; PPO and
//! world-model cycles run on fixed cadences.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{env_reset, env_step, gen_passive_dataset, DemoKind, CHUNK};
use crate::error::{Error, Result};
use crate::latent::LatentCodec;
use crate::numerics::AdamState;
use crate::pat_buffer::{PatBuffer, ScoreWeights, HORIZON_CHUNKS};
use crate::policy::{
    act, bc_pretrain, camera_velocity, features, k3_kl_estimate, ppo_update, BcConfig, EpisodeBatch, KlDirection,
    PolicyParams, PpoConfig, RefPolicy, RolloutStep,
};
use crate::rng::{derive, seeded, stream, Rng};
use crate::scoring::{composite_score, evaluate_trajectory, BufferStats, TrajectoryScore};
use crate::trajectory::{load_dataset, save_dataset, Source, Trajectory};
use crate::wm::{eval_df_loss, trajectory_windows, Subset, TrainWindow, WmParams, WmTrainConfig, WmTrainer, SEED_CHUNKS};

/// Episode seed for Phase-2 iteration `iter`.
pub const EPISODE_SEED_BASE: u64 = 5000;
/// Map seeds of the held-out walker clips used to monitor Phase 1.
pub const PHASE1_HELDOUT_BASE: u64 = 900_000;
pub const PHASE1_HELDOUT_CLIPS: usize = 64;

pub fn episode_seed(iter: u64) -> u64 {
    EPISODE_SEED_BASE + iter
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Phase1,
    FrozenRef,
    Prowl,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Phase1 => "phase1",
            Mode::FrozenRef => "frozen_ref",
            Mode::Prowl => "prowl",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase1" => Ok(Mode::Phase1),
            "frozen_ref" => Ok(Mode::FrozenRef),
            "prowl" => Ok(Mode::Prowl),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// What the explorer is paid at the end of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardSource {
    Composite,
    LatentRegret,
}

impl RewardSource {
    pub fn name(self) -> &'static str {
        match self {
            RewardSource::Composite => "composite",
            RewardSource::LatentRegret => "latent_regret",
        }
    }
}

impl std::str::FromStr for RewardSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "composite" => Ok(RewardSource::Composite),
            "latent_regret" => Ok(RewardSource::LatentRegret),
            other => Err(Error::Config(format!("unknown reward_source {other:?}"))),
        }
    }
}

/// One experiment arm. Serialized as flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmConfig {
    pub arm: String,
    pub mode: Mode,
    pub run_seed: u64,
    pub codec_seed: u64,

    // passive data and Phase 1
    pub passive_episodes: usize,
    pub passive_seed: u64,
    pub episode_len: usize,
    pub trunk_hidden: Vec<usize>,
    pub phase1_steps: usize,
    pub phase1_lr: f64,
    pub phase1_minibatch: usize,
    pub phase1_eval_every: usize,
    pub policy_hidden: Vec<usize>,
    pub bc_epochs: usize,
    pub bc_lr: f64,

    // Phase 2
    pub total_iterations: u64,
    pub c_kl: f64,
    pub kl_direction: KlDirection,
    pub lambda_afs: f64,
    pub beta_prog: f64,
    pub rho_stale: f64,
    pub rank_temperature: f64,
    pub buffer_capacity: usize,
    pub reward_source: RewardSource,
    /// Iterations per world-model cycle.
    pub t_wm: u64,
    pub episodes_per_update: usize,
    /// Probability that a cycle sample comes from the buffer.
    pub mixture_r: f64,
    pub pat_epochs: usize,
    /// Full scale uses 500 to 1024.
    pub wm_steps_per_cycle: usize,
    pub wm_lr: f64,
    pub wm_minibatch: usize,
    pub wm_max_grad_norm: f64,
    pub cfg_dropout: f64,
    pub ppo_enabled: bool,
    pub policy_lr: f64,
    pub clip_eps: f64,
    pub c_v: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ppo_epochs: usize,
    pub ppo_minibatch: usize,
    pub policy_max_grad_norm: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            arm: "prowl".into(),
            mode: Mode::Prowl,
            run_seed: 0,
            codec_seed: 0,
            passive_episodes: 256,
            passive_seed: 100,
            episode_len: 12,
            trunk_hidden: vec![256, 256],
            phase1_steps: 2000,
            phase1_lr: 1e-3,
            phase1_minibatch: 8,
            phase1_eval_every: 200,
            policy_hidden: vec![64, 64],
            bc_epochs: 30,
            bc_lr: 1e-3,
            total_iterations: 500,
            c_kl: 1.5,
            kl_direction: KlDirection::Forward,
            lambda_afs: 0.25,
            beta_prog: 1.0,
            rho_stale: 0.1,
            rank_temperature: 1.0,
            buffer_capacity: 64,
            reward_source: RewardSource::LatentRegret,
            t_wm: 24,
            episodes_per_update: 16,
            mixture_r: 0.5,
            pat_epochs: 7,
            wm_steps_per_cycle: 200,
            wm_lr: 1e-5,
            wm_minibatch: 8,
            wm_max_grad_norm: 1.0,
            cfg_dropout: 0.1,
            ppo_enabled: true,
            policy_lr: 3e-3,
            clip_eps: 0.2,
            c_v: 0.5,
            entropy_coef: 0.05,
            gamma: 0.99,
            gae_lambda: 0.95,
            ppo_epochs: 4,
            ppo_minibatch: 256,
            policy_max_grad_norm: 0.5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_sizes(key: &str, v: &str) -> Result<Vec<usize>> {
    let sizes: Vec<usize> = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
    if sizes.contains(&0) {
        return Err(Error::Config(format!("{key}: layer widths must be positive")));
    }
    Ok(sizes)
}

fn join_sizes(s: &[usize]) -> String {
    s.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

impl ArmConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are
    /// collected and reported together.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut unknown = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !cfg.set(k, v)? {
                unknown.push(k.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Sets one key. Returns `false` for an unknown key.
    pub fn set(&mut self, k: &str, v: &str) -> Result<bool> {
        match k {
            "arm" => self.arm = v.to_string(),
            "mode" => self.mode = v.parse()?,
            "run_seed" => self.run_seed = parse_num(k, v)?,
            "codec_seed" => self.codec_seed = parse_num(k, v)?,
            "passive_episodes" => self.passive_episodes = parse_num(k, v)?,
            "passive_seed" => self.passive_seed = parse_num(k, v)?,
            "episode_len" => self.episode_len = parse_num(k, v)?,
            "trunk_hidden" => self.trunk_hidden = parse_sizes(k, v)?,
            "phase1_steps" => self.phase1_steps = parse_num(k, v)?,
            "phase1_lr" => self.phase1_lr = parse_num(k, v)?,
            "phase1_minibatch" => self.phase1_minibatch = parse_num(k, v)?,
            "phase1_eval_every" => self.phase1_eval_every = parse_num(k, v)?,
            "policy_hidden" => self.policy_hidden = parse_sizes(k, v)?,
            "bc_epochs" => self.bc_epochs = parse_num(k, v)?,
            "bc_lr" => self.bc_lr = parse_num(k, v)?,
            "total_iterations" => self.total_iterations = parse_num(k, v)?,
            "c_kl" => self.c_kl = parse_num(k, v)?,
            "kl_direction" => self.kl_direction = v.parse()?,
            "lambda_afs" => self.lambda_afs = parse_num(k, v)?,
            "beta_prog" => self.beta_prog = parse_num(k, v)?,
            "rho_stale" => self.rho_stale = parse_num(k, v)?,
            "rank_temperature" => self.rank_temperature = parse_num(k, v)?,
            "buffer_capacity" => self.buffer_capacity = parse_num(k, v)?,
            "reward_source" => self.reward_source = v.parse()?,
            "t_wm" => self.t_wm = parse_num(k, v)?,
            "episodes_per_update" => self.episodes_per_update = parse_num(k, v)?,
            "mixture_r" => self.mixture_r = parse_num(k, v)?,
            "pat_epochs" => self.pat_epochs = parse_num(k, v)?,
            "wm_steps_per_cycle" => self.wm_steps_per_cycle = parse_num(k, v)?,
            "wm_lr" => self.wm_lr = parse_num(k, v)?,
            "wm_minibatch" => self.wm_minibatch = parse_num(k, v)?,
            "wm_max_grad_norm" => self.wm_max_grad_norm = parse_num(k, v)?,
            "cfg_dropout" => self.cfg_dropout = parse_num(k, v)?,
            "ppo_enabled" => self.ppo_enabled = parse_num(k, v)?,
            "policy_lr" => self.policy_lr = parse_num(k, v)?,
            "clip_eps" => self.clip_eps = parse_num(k, v)?,
            "c_v" => self.c_v = parse_num(k, v)?,
            "entropy_coef" => self.entropy_coef = parse_num(k, v)?,
            "gamma" => self.gamma = parse_num(k, v)?,
            "gae_lambda" => self.gae_lambda = parse_num(k, v)?,
            "ppo_epochs" => self.ppo_epochs = parse_num(k, v)?,
            "ppo_minibatch" => self.ppo_minibatch = parse_num(k, v)?,
            "policy_max_grad_norm" => self.policy_max_grad_norm = parse_num(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.episode_len == 0 || self.episode_len % CHUNK != 0 {
            return bad("episode_len must be a positive multiple of the chunk size");
        }
        if self.episode_len < (SEED_CHUNKS + HORIZON_CHUNKS) * CHUNK {
            return bad("episode_len too short for seed plus horizon chunks");
        }
        if !(0.0..=1.0).contains(&self.mixture_r) || !(0.0..=1.0).contains(&self.rho_stale) {
            return bad("mixture_r and rho_stale must lie in [0, 1]");
        }
        if self.c_kl < 0.0 {
            return bad("c_kl must be nonnegative");
        }
        if self.t_wm == 0 || self.episodes_per_update == 0 || self.buffer_capacity == 0 {
            return bad("t_wm, episodes_per_update and buffer_capacity must be positive");
        }
        if self.rank_temperature <= 0.0 || self.policy_lr <= 0.0 || self.wm_lr <= 0.0 || self.phase1_lr <= 0.0 {
            return bad("learning rates and rank_temperature must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("arm", self.arm.clone());
        kv("mode", self.mode.name().into());
        kv("run_seed", self.run_seed.to_string());
        kv("codec_seed", self.codec_seed.to_string());
        kv("passive_episodes", self.passive_episodes.to_string());
        kv("passive_seed", self.passive_seed.to_string());
        kv("episode_len", self.episode_len.to_string());
        kv("trunk_hidden", join_sizes(&self.trunk_hidden));
        kv("phase1_steps", self.phase1_steps.to_string());
        kv("phase1_lr", self.phase1_lr.to_string());
        kv("phase1_minibatch", self.phase1_minibatch.to_string());
        kv("phase1_eval_every", self.phase1_eval_every.to_string());
        kv("policy_hidden", join_sizes(&self.policy_hidden));
        kv("bc_epochs", self.bc_epochs.to_string());
        kv("bc_lr", self.bc_lr.to_string());
        kv("total_iterations", self.total_iterations.to_string());
        kv("c_kl", self.c_kl.to_string());
        kv(
            "kl_direction",
            match self.kl_direction {
                KlDirection::Forward => "forward".into(),
                KlDirection::Reverse => "reverse".into(),
            },
        );
        kv("lambda_afs", self.lambda_afs.to_string());
        kv("beta_prog", self.beta_prog.to_string());
        kv("rho_stale", self.rho_stale.to_string());
        kv("rank_temperature", self.rank_temperature.to_string());
        kv("buffer_capacity", self.buffer_capacity.to_string());
        kv("reward_source", self.reward_source.name().into());
        kv("t_wm", self.t_wm.to_string());
        kv("episodes_per_update", self.episodes_per_update.to_string());
        kv("mixture_r", self.mixture_r.to_string());
        kv("pat_epochs", self.pat_epochs.to_string());
        kv("wm_steps_per_cycle", self.wm_steps_per_cycle.to_string());
        kv("wm_lr", self.wm_lr.to_string());
        kv("wm_minibatch", self.wm_minibatch.to_string());
        kv("wm_max_grad_norm", self.wm_max_grad_norm.to_string());
        kv("cfg_dropout", self.cfg_dropout.to_string());
        kv("ppo_enabled", self.ppo_enabled.to_string());
        kv("policy_lr", self.policy_lr.to_string());
        kv("clip_eps", self.clip_eps.to_string());
        kv("c_v", self.c_v.to_string());
        kv("entropy_coef", self.entropy_coef.to_string());
        kv("gamma", self.gamma.to_string());
        kv("gae_lambda", self.gae_lambda.to_string());
        kv("ppo_epochs", self.ppo_epochs.to_string());
        kv("ppo_minibatch", self.ppo_minibatch.to_string());
        kv("policy_max_grad_norm", self.policy_max_grad_norm.to_string());
        s
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            clip_eps: self.clip_eps,
            c_v: self.c_v,
            c_e: self.entropy_coef,
            c_kl: self.c_kl,
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            epochs: self.ppo_epochs,
            minibatch: self.ppo_minibatch,
            lr: self.policy_lr,
            max_grad_norm: self.policy_max_grad_norm,
            kl_direction: self.kl_direction,
        }
    }

    fn wm_train_config(&self, lr: f64) -> WmTrainConfig {
        WmTrainConfig {
            lr,
            max_grad_norm: self.wm_max_grad_norm,
            cfg_dropout: self.cfg_dropout,
        }
    }
}

// ---------------------------------------------------------------------------
// Phase 1

#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Output {
    pub wm: WmParams,
    /// (step, held-out eval loss), including step 0.
    pub eval_log: Vec<(usize, f64)>,
}

pub fn phase1_heldout(cfg: &ArmConfig) -> Result<Vec<Trajectory>> {
    gen_passive_dataset(DemoKind::Walker, PHASE1_HELDOUT_CLIPS, cfg.episode_len, PHASE1_HELDOUT_BASE)
}

/// Trains every world-model parameter on the passive set.
pub fn run_phase1(cfg: &ArmConfig, passive: &[Trajectory], codec: &LatentCodec) -> Result<Phase1Output> {
    let mut wm = WmParams::init(derive(cfg.run_seed, stream::WM_INIT), codec.seed(), &cfg.trunk_hidden)?;
    let windows: Vec<Vec<TrainWindow>> = passive
        .iter()
        .map(|t| trajectory_windows(t, codec))
        .filter(|w| !w.is_empty())
        .collect();
    if windows.is_empty() && cfg.phase1_steps > 0 {
        return Err(Error::Invalid("phase 1 needs passive trajectories with full windows".into()));
    }
    let held: Vec<TrainWindow> = phase1_heldout(cfg)?
        .iter()
        .flat_map(|t| trajectory_windows(t, codec))
        .collect();
    let eval_seed = derive(cfg.run_seed, stream::EVAL);
    let mut eval_log = vec![(0, eval_df_loss(&wm, &held, eval_seed)?)];
    let mut trainer = WmTrainer::new(&wm, cfg.wm_train_config(cfg.phase1_lr));
    let mut rng = seeded(derive(cfg.run_seed, stream::PHASE1));
    for step in 1..=cfg.phase1_steps {
        let mb: Vec<&[TrainWindow]> = (0..cfg.phase1_minibatch.max(1))
            .map(|_| windows[rng.random_range(0..windows.len())].as_slice())
            .collect();
        let loss = trainer.step(&mut wm, &mb, Subset::All, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("phase 1 loss"));
        }
        if cfg.phase1_eval_every > 0 && (step % cfg.phase1_eval_every == 0 || step == cfg.phase1_steps) {
            let l = eval_df_loss(&wm, &held, eval_seed)?;
            log::info!("phase1 step {step}: held-out loss {l:.5}");
            eval_log.push((step, l));
        }
    }
    Ok(Phase1Output { wm, eval_log })
}

/// Everything Phase 2 starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub codec: LatentCodec,
    pub passive: Vec<Trajectory>,
    pub wm: WmParams,
    pub reference: RefPolicy,
    pub eval_log: Vec<(usize, f64)>,
}

pub fn pretrain(cfg: &ArmConfig) -> Result<Pretrained> {
    let codec = LatentCodec::build(cfg.codec_seed);
    let passive = gen_passive_dataset(DemoKind::Walker, cfg.passive_episodes, cfg.episode_len, cfg.passive_seed)?;
    let p1 = run_phase1(cfg, &passive, &codec)?;
    let bc = BcConfig {
        epochs: cfg.bc_epochs,
        lr: cfg.bc_lr,
        ..Default::default()
    };
    let reference = bc_pretrain(&passive, &bc, cfg.run_seed, &cfg.policy_hidden)?;
    Ok(Pretrained {
        codec,
        passive,
        wm: p1.wm,
        reference,
        eval_log: p1.eval_log,
    })
}

impl Pretrained {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.codec.save(&dir.join("codec.json"))?;
        self.wm.save(&dir.join("wm_phase1.bin"))?;
        self.reference.params().save(&dir.join("ref_policy.bin"))?;
        let pdir = dir.join("passive");
        if pdir.exists() {
            fs::remove_dir_all(&pdir)?;
        }
        save_dataset(&pdir, &self.passive)?;
        let mut w = csv::Writer::from_path(dir.join("phase1_log.csv")).map_err(csv_err)?;
        w.write_record(["step", "eval_loss"]).map_err(csv_err)?;
        for (s, l) in &self.eval_log {
            w.write_record([s.to_string(), l.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let codec = LatentCodec::load(&dir.join("codec.json"))?;
        let wm = WmParams::load(&dir.join("wm_phase1.bin"))?;
        wm.check_codec(&codec)?;
        let reference = RefPolicy::freeze(PolicyParams::load(&dir.join("ref_policy.bin"))?);
        let passive = load_dataset(&dir.join("passive"))?;
        let mut eval_log = Vec::new();
        let log_path = dir.join("phase1_log.csv");
        if log_path.exists() {
            let mut r = csv::Reader::from_path(log_path).map_err(csv_err)?;
            for rec in r.records() {
                let rec = rec.map_err(csv_err)?;
                eval_log.push((parse_field(&rec, 0)?, parse_field(&rec, 1)?));
            }
        }
        Ok(Self {
            codec,
            passive,
            wm,
            reference,
            eval_log,
        })
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad csv field {i} in {rec:?}")))
}

// ---------------------------------------------------------------------------
// Phase 2

/// A policy episode with the bookkeeping PPO and the diagnostics need.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub steps: Vec<RolloutStep>,
    pub ref_logp: Vec<f64>,
}

impl Episode {
    pub fn mean_k3(&self) -> f64 {
        let s: f64 = self
            .steps
            .iter()
            .zip(&self.ref_logp)
            .map(|(st, r)| k3_kl_estimate(st.logp, *r))
            .sum();
        s / self.steps.len() as f64
    }
}

/// Rolls `policy` out for `len` steps. When `reference` is given its
/// log-probability of every sampled action is recorded too.
pub fn rollout_episode(
    policy: &PolicyParams,
    reference: Option<&PolicyParams>,
    id: u64,
    source: Source,
    seed: u64,
    len: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let (mut map, mut state, mut frame) = env_reset(seed, seed);
    let mut steps = Vec::with_capacity(len);
    let mut ref_logp = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    let mut frames = Vec::with_capacity(len);
    for _ in 0..len {
        let f = features(&frame, &state);
        let s = act(policy, &f, rng)?;
        ref_logp.push(match reference {
            Some(r) => r.dist(&f)?.0.log_prob(&s.action),
            None => s.logp,
        });
        let (ns, nf) = env_step(&mut map, &state, &s.action);
        state = ns;
        frame = nf;
        actions.push(s.action);
        frames.push(frame);
        steps.push(RolloutStep {
            features: f,
            action: s.action,
            logp: s.logp,
            value: s.value,
        });
    }
    Ok(Episode {
        trajectory: Trajectory::new(id, source, seed, seed, actions, frames),
        steps,
        ref_logp,
    })
}

/// One row of the per-iteration metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub episode_seed: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub k3_kl: f64,
    pub camera_velocity: f64,
    pub buffer_mean_regret: f64,
    pub buffer_size: usize,
    pub wm_cycle: u8,
    pub ppo_update: u8,
    pub l_regret: f64,
    pub l_afs: f64,
    pub pixel_mse: f64,
}

pub const METRICS_COLUMNS: [&str; 12] = [
    "iteration",
    "episode_seed",
    "return",
    "k3_kl",
    "camera_velocity",
    "buffer_mean_regret",
    "buffer_size",
    "wm_cycle",
    "ppo_update",
    "l_regret",
    "l_afs",
    "pixel_mse",
];

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Counts of where world-model cycle samples came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CycleDraws {
    pub buffer: usize,
    pub passive: usize,
}

#[derive(Debug, Clone)]
pub struct RunState {
    pub cfg: ArmConfig,
    pub iteration: u64,
    pub codec: LatentCodec,
    pub wm: WmParams,
    pub wm_trainer: WmTrainer,
    pub policy: PolicyParams,
    pub policy_adam: AdamState,
    pub reference: RefPolicy,
    pub buffer: PatBuffer,
    pub passive: Vec<Trajectory>,
    pub pending: Vec<EpisodeBatch>,
    pub metrics: Vec<MetricsRow>,
    pub cycle_draws: Vec<CycleDraws>,
}

impl RunState {
    pub fn new(cfg: &ArmConfig, pre: &Pretrained) -> Result<Self> {
        if cfg.mode == Mode::Phase1 {
            return Err(Error::Config("phase1 mode runs no adversarial loop".into()));
        }
        cfg.validate()?;
        pre.reference.verify()?;
        let mut buffer = PatBuffer::new(
            cfg.buffer_capacity,
            cfg.rho_stale,
            ScoreWeights {
                lambda_afs: cfg.lambda_afs,
                beta_prog: cfg.beta_prog,
            },
        )?;
        buffer.temperature = cfg.rank_temperature;
        let policy = pre.reference.params().clone();
        Ok(Self {
            cfg: cfg.clone(),
            iteration: 0,
            codec: pre.codec.clone(),
            wm: pre.wm.clone(),
            wm_trainer: WmTrainer::new(&pre.wm, cfg.wm_train_config(cfg.wm_lr)),
            policy_adam: AdamState::new(policy.net.len()),
            policy,
            reference: pre.reference.clone(),
            buffer,
            passive: pre.passive.clone(),
            pending: Vec::new(),
            metrics: Vec::new(),
            cycle_draws: Vec::new(),
        })
    }

    fn score_seed(&self) -> u64 {
        derive(self.cfg.run_seed, stream::SCORE)
    }

    /// Draws `n` cycle samples: each independently from the buffer with
    /// probability `mixture_r`, else uniformly from the passive set.
    pub fn draw_cycle_batch(&self, n: usize, rng: &mut Rng) -> Result<(Vec<Trajectory>, CycleDraws)> {
        let probs = if self.buffer.is_empty() {
            None
        } else {
            Some(self.buffer.probabilities(self.iteration)?)
        };
        let dist = probs
            .as_ref()
            .map(|p| rand::distr::weighted::WeightedIndex::new(p))
            .transpose()
            .map_err(|e| Error::Invalid(format!("buffer weights: {e}")))?;
        let mut out = Vec::with_capacity(n);
        let mut draws = CycleDraws::default();
        for _ in 0..n {
            if rng.random::<f64>() < self.cfg.mixture_r {
                let d = dist
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("cycle drew from an empty buffer".into()))?;
                out.push(self.buffer.get(rand::distr::Distribution::sample(d, rng)).trajectory.clone());
                draws.buffer += 1;
            } else {
                if self.passive.is_empty() {
                    return Err(Error::Invalid("cycle drew from an empty passive set".into()));
                }
                out.push(self.passive[rng.random_range(0..self.passive.len())].clone());
                draws.passive += 1;
            }
        }
        Ok((out, draws))
    }

    /// Conditioning-only fine-tune on a buffer/passive mixture, then rescore.
    pub fn wm_cycle(&mut self) -> Result<()> {
        let mut rng = seeded(derive(derive(self.cfg.run_seed, stream::WM_CYCLE), self.iteration));
        let m = self.cfg.wm_steps_per_cycle * self.cfg.pat_epochs;
        let (batch, draws) = self.draw_cycle_batch(m, &mut rng)?;
        self.cycle_draws.push(draws);
        if !batch.is_empty() {
            let refs: Vec<&Trajectory> = batch.iter().collect();
            let loss = self.wm_trainer.finetune(
                &mut self.wm,
                &refs,
                &self.codec,
                Subset::CondOnly,
                self.cfg.wm_minibatch,
                &mut rng,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("world-model cycle loss"));
            }
            log::info!(
                "iter {}: wm cycle on {} buffer + {} passive samples, loss {loss:.5}",
                self.iteration,
                draws.buffer,
                draws.passive
            );
        }
        let seed = self.score_seed();
        self.buffer.rescore_all(&self.wm, &self.codec, self.iteration, seed)?;
        Ok(())
    }

    /// One adversarial iteration.
    pub fn run_iteration(&mut self) -> Result<MetricsRow> {
        self.reference.verify()?;
        let iter = self.iteration;
        let seed = episode_seed(iter);
        let mut act_rng = seeded(derive(derive(self.cfg.run_seed, stream::ACT), iter));
        let anchored = self.cfg.mode == Mode::Prowl;
        let ep = rollout_episode(
            &self.policy,
            anchored.then(|| self.reference.params()),
            iter,
            Source::Policy(self.cfg.arm.clone()),
            seed,
            self.cfg.episode_len,
            &mut act_rng,
        )?;
        let k3 = ep.mean_k3();
        let cam = camera_velocity(&ep.trajectory.actions)?;

        let eval_seed = derive(self.score_seed(), ep.trajectory.id);
        let (m, _) = evaluate_trajectory(&self.wm, &ep.trajectory, &self.codec, SEED_CHUNKS, HORIZON_CHUNKS, eval_seed)?;

        let reward = match self.cfg.reward_source {
            RewardSource::LatentRegret => m.l_regret,
            RewardSource::Composite => {
                let mut regrets: Vec<f64> = self.buffer.entries().iter().map(|e| e.scores.l_regret).collect();
                let mut afs: Vec<f64> = self.buffer.entries().iter().map(|e| e.scores.l_afs).collect();
                regrets.push(m.l_regret);
                afs.push(m.l_afs);
                let stats = BufferStats::from_values(&regrets, &afs)?;
                let score = TrajectoryScore {
                    l_regret: m.l_regret,
                    l_afs: m.l_afs,
                    ..Default::default()
                };
                composite_score(&score, &stats, self.cfg.lambda_afs, self.cfg.beta_prog)
            }
        };
        self.buffer.add_measured(ep.trajectory, m, iter)?;

        let mut ppo_flag = 0;
        if anchored {
            self.pending.push(EpisodeBatch {
                steps: ep.steps,
                terminal_reward: reward,
            });
            if self.pending.len() >= self.cfg.episodes_per_update {
                if self.cfg.ppo_enabled {
                    let mut rng = seeded(derive(derive(self.cfg.run_seed, stream::PPO), iter));
                    let st = ppo_update(
                        &mut self.policy,
                        self.reference.params(),
                        &self.pending,
                        &self.cfg.ppo_config(),
                        &mut self.policy_adam,
                        &mut rng,
                    )?;
                    ppo_flag = u8::from(!st.aborted);
                }
                self.pending.clear();
            }
        }

        let cycle = (iter + 1) % self.cfg.t_wm == 0;
        if cycle {
            self.wm_cycle()?;
        }
        let row = MetricsRow {
            iteration: iter,
            episode_seed: seed,
            episode_return: reward,
            k3_kl: k3,
            camera_velocity: cam,
            buffer_mean_regret: self.buffer.mean_regret(),
            buffer_size: self.buffer.len(),
            wm_cycle: u8::from(cycle),
            ppo_update: ppo_flag,
            l_regret: m.l_regret,
            l_afs: m.l_afs,
            pixel_mse: m.pixel_mse,
        };
        self.metrics.push(row.clone());
        self.iteration += 1;
        Ok(row)
    }

    /// Writes checkpoint, policy, buffer snapshot, metrics and config.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.wm.save(&dir.join("wm.bin"))?;
        self.policy.save(&dir.join("policy.bin"))?;
        self.buffer.save_snapshot(&dir.join("buffer"))?;
        write_metrics(&dir.join("metrics.csv"), &self.metrics)?;
        fs::write(dir.join("arm.cfg"), self.cfg.to_text())?;
        Ok(())
    }
}

/// Result of a finished arm.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub state: RunState,
    pub out_dir: PathBuf,
}

/// Runs every iteration of an arm and persists the artifacts to `out`.
/// On a fault the partial state goes to `out/abort`.
pub fn run_arm(cfg: &ArmConfig, pre: &Pretrained, out: &Path) -> Result<ArmOutcome> {
    let mut state = RunState::new(cfg, pre)?;
    for _ in 0..cfg.total_iterations {
        if let Err(e) = state.run_iteration() {
            let path = out.join("abort");
            log::error!("arm {} failed at iteration {}: {e}", cfg.arm, state.iteration);
            state.persist(&path)?;
            fs::write(path.join("error.txt"), format!("iteration {}: {e}\n", state.iteration))?;
            return Err(Error::Aborted {
                path,
                source: Box::new(e),
            });
        }
    }
    state.persist(out)?;
    Ok(ArmOutcome {
        state,
        out_dir: out.to_path_buf(),
    })
}
