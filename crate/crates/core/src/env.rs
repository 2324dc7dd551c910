//! Deterministic synthetic first-person environment.
//!
//! A 64x64 toroidal height map, an agent with yaw/pitch, and a 64-ray depth
//! "camera" covering the full circle around the agent. Yaw always sits on the
//! ray lattice (multiples of 5.625 degrees), so rotating by one camera bin of
//! +/-5.625 degrees shifts the rendered frame by exactly one ray.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::randn;
use crate::rng::{derive, seeded, Rng};
use crate::trajectory::{Source, Trajectory};

pub const MAP_SIZE: usize = 64;
pub const FRAME_LEN: usize = 64;
pub const RAY_PITCH_DEG: f64 = 360.0 / FRAME_LEN as f64;
pub const N_BINS: usize = 9;
pub const CENTER_BIN: u8 = 4;
pub const N_BUTTONS: usize = 8;
/// Chunk size K (latent frames per prediction chunk).
pub const CHUNK: usize = 3;

/// Degrees per camera bin index.
pub const BIN_DEGREES: [f64; N_BINS] = [-45.0, -22.5, -11.25, -5.625, 0.0, 5.625, 11.25, 22.5, 45.0];

const VIEW_RANGE: f64 = 16.0;
const MARCH_STEP: f64 = 0.25;
const VERTICAL_SCALE: f64 = 4.0;
const EYE_HEIGHT: f64 = 0.5;
const STEP_LEN: f64 = 0.5;
const CLIMB_LIMIT: f64 = 0.2;
const EDIT_DELTA: f64 = 0.1;
const TERRACE: f64 = 8.0;

pub type Frame = [f64; FRAME_LEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Button {
    Fwd = 0,
    Back = 1,
    StrafeL = 2,
    StrafeR = 3,
    Jump = 4,
    Sprint = 5,
    Atk = 6,
    Use = 7,
}

impl Button {
    pub const ALL: [Button; N_BUTTONS] = [
        Button::Fwd,
        Button::Back,
        Button::StrafeL,
        Button::StrafeR,
        Button::Jump,
        Button::Sprint,
        Button::Atk,
        Button::Use,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Button::Fwd => "fwd",
            Button::Back => "back",
            Button::StrafeL => "strafe_l",
            Button::StrafeR => "strafe_r",
            Button::Jump => "jump",
            Button::Sprint => "sprint",
            Button::Atk => "atk",
            Button::Use => "use",
        }
    }
}

/// One step of input: two camera bins and eight buttons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub yaw_bin: u8,
    pub pitch_bin: u8,
    pub buttons: [bool; N_BUTTONS],
}

impl Default for Action {
    fn default() -> Self {
        Self::noop()
    }
}

impl Action {
    pub fn noop() -> Self {
        Self {
            yaw_bin: CENTER_BIN,
            pitch_bin: CENTER_BIN,
            buttons: [false; N_BUTTONS],
        }
    }

    pub fn new(yaw_bin: u8, pitch_bin: u8, buttons: [bool; N_BUTTONS]) -> Result<Self> {
        if yaw_bin as usize >= N_BINS || pitch_bin as usize >= N_BINS {
            return Err(Error::Invalid(format!(
                "camera bins ({yaw_bin}, {pitch_bin}) out of range 0..=8"
            )));
        }
        Ok(Self {
            yaw_bin,
            pitch_bin,
            buttons,
        })
    }

    pub fn with(mut self, b: Button) -> Self {
        self.buttons[b as usize] = true;
        self
    }

    pub fn pressed(&self, b: Button) -> bool {
        self.buttons[b as usize]
    }

    pub fn yaw_deg(&self) -> f64 {
        BIN_DEGREES[self.yaw_bin as usize]
    }

    pub fn pitch_deg(&self) -> f64 {
        BIN_DEGREES[self.pitch_bin as usize]
    }

    /// Buttons as an 8-character 0/1 string in [`Button::ALL`] order.
    pub fn button_string(&self) -> String {
        self.buttons.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_buttons(s: &str) -> Result<[bool; N_BUTTONS]> {
        let bytes = s.as_bytes();
        if bytes.len() != N_BUTTONS || bytes.iter().any(|&c| c != b'0' && c != b'1') {
            return Err(Error::Format(format!("button string {s:?} is not 8 chars of 0/1")));
        }
        let mut out = [false; N_BUTTONS];
        for (o, &c) in out.iter_mut().zip(bytes) {
            *o = c == b'1';
        }
        Ok(out)
    }
}

/// Seeded terraced value-noise terrain plus per-cell edit markers.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldMap {
    seed: u64,
    heights: Vec<f64>,
    dug: Vec<bool>,
    built: Vec<bool>,
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn wrap_cell(v: i64) -> usize {
    v.rem_euclid(MAP_SIZE as i64) as usize
}

fn wrap_pos(v: f64) -> f64 {
    let m = MAP_SIZE as f64;
    let w = v.rem_euclid(m);
    if w >= m {
        0.0
    } else {
        w
    }
}

impl WorldMap {
    pub fn generate(seed: u64) -> Self {
        let mut rng = seeded(derive(seed, 0x4d41_50));
        let mut raw = vec![0.0; MAP_SIZE * MAP_SIZE];
        for (spacing, amp) in [(16usize, 1.0), (8, 0.5), (4, 0.25)] {
            let n = MAP_SIZE / spacing;
            let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            for y in 0..MAP_SIZE {
                for x in 0..MAP_SIZE {
                    let (gx, gy) = (x / spacing, y / spacing);
                    let tx = smooth((x % spacing) as f64 / spacing as f64);
                    let ty = smooth((y % spacing) as f64 / spacing as f64);
                    let at = |i: usize, j: usize| lattice[(j % n) * n + (i % n)];
                    let top = at(gx, gy) * (1.0 - tx) + at(gx + 1, gy) * tx;
                    let bot = at(gx, gy + 1) * (1.0 - tx) + at(gx + 1, gy + 1) * tx;
                    raw[y * MAP_SIZE + x] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let heights = raw
            .iter()
            .map(|v| (((v - lo) / span) * TERRACE).floor().min(TERRACE) / TERRACE)
            .collect();
        Self {
            seed,
            heights,
            dug: vec![false; MAP_SIZE * MAP_SIZE],
            built: vec![false; MAP_SIZE * MAP_SIZE],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base_height(&self, cx: usize, cy: usize) -> f64 {
        self.heights[cy * MAP_SIZE + cx]
    }

    /// Height after dig/build markers, clamped to [0, 1].
    pub fn height(&self, cx: usize, cy: usize) -> f64 {
        let i = cy * MAP_SIZE + cx;
        let mut h = self.heights[i];
        if self.dug[i] {
            h -= EDIT_DELTA;
        }
        if self.built[i] {
            h += EDIT_DELTA;
        }
        h.clamp(0.0, 1.0)
    }

    fn height_at(&self, x: f64, y: f64) -> f64 {
        self.height(wrap_cell(x.floor() as i64), wrap_cell(y.floor() as i64))
    }

    pub fn markers(&self, cx: usize, cy: usize) -> (bool, bool) {
        let i = cy * MAP_SIZE + cx;
        (self.dug[i], self.built[i])
    }

    fn walkable(&self, cx: usize, cy: usize) -> bool {
        let h = self.height(cx, cy);
        [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
            let n = self.height(wrap_cell(cx as i64 + dx), wrap_cell(cy as i64 + dy));
            n - h <= CLIMB_LIMIT
        })
    }
}

/// Agent pose. `yaw` is always a multiple of the ray pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub pitch: f64,
}

impl AgentState {
    fn yaw_index(&self) -> i64 {
        (self.yaw / RAY_PITCH_DEG).round() as i64
    }

    /// Pose features for the policy: yaw/360 and pitch/90.
    pub fn pose_features(&self) -> [f64; 2] {
        [self.yaw / 360.0, self.pitch / 90.0]
    }
}

fn ray_dir(index: i64) -> (f64, f64) {
    let a = (index.rem_euclid(FRAME_LEN as i64) as f64) * RAY_PITCH_DEG.to_radians();
    (a.cos(), a.sin())
}

/// Depth raycast: ray `k` looks at yaw + (k - 32) ray pitches, elevated by
/// the agent's pitch. Depth is hit distance over view range; 1.0 = no hit.
pub fn render(map: &WorldMap, s: &AgentState) -> Frame {
    let base = s.yaw_index();
    let eye = map.height_at(s.x, s.y) * VERTICAL_SCALE + EYE_HEIGHT;
    let (sp, cp) = s.pitch.to_radians().sin_cos();
    let n_steps = (VIEW_RANGE / MARCH_STEP) as usize;
    let mut frame = [1.0; FRAME_LEN];
    for (k, out) in frame.iter_mut().enumerate() {
        let (dx, dy) = ray_dir(base + k as i64 - (FRAME_LEN as i64 / 2));
        for i in 1..=n_steps {
            let dist = i as f64 * MARCH_STEP;
            let horiz = dist * cp;
            let z = eye + dist * sp;
            let ground = map.height_at(s.x + horiz * dx, s.y + horiz * dy) * VERTICAL_SCALE;
            if z <= ground || z < 0.0 {
                *out = dist / VIEW_RANGE;
                break;
            }
        }
    }
    frame
}

/// Resets to a seeded walkable cell centre, yaw on the ray lattice, pitch 0.
pub fn env_reset(map_seed: u64, spawn_seed: u64) -> (WorldMap, AgentState, Frame) {
    let map = WorldMap::generate(map_seed);
    let mut rng = seeded(derive(spawn_seed, 0x5350_4157));
    let (cx, cy) = loop {
        let cx = rng.random_range(0..MAP_SIZE);
        let cy = rng.random_range(0..MAP_SIZE);
        if map.walkable(cx, cy) {
            break (cx, cy);
        }
    };
    let yaw = rng.random_range(0..FRAME_LEN) as f64 * RAY_PITCH_DEG;
    let state = AgentState {
        x: cx as f64 + 0.5,
        y: cy as f64 + 0.5,
        yaw,
        pitch: 0.0,
    };
    let frame = render(&map, &state);
    (map, state, frame)
}

/// Advances one step, mutating the map's edit markers for atk/use.
pub fn env_step(map: &mut WorldMap, state: &AgentState, action: &Action) -> (AgentState, Frame) {
    let mut s = *state;
    s.yaw = (s.yaw + action.yaw_deg()).rem_euclid(360.0);
    s.pitch = (s.pitch + action.pitch_deg()).clamp(-90.0, 90.0);

    let idx = s.yaw_index();
    let (hx, hy) = ray_dir(idx);
    let (lx, ly) = ray_dir(idx + FRAME_LEN as i64 / 4);
    let mut along = 0.0;
    let mut side = 0.0;
    if action.pressed(Button::Fwd) {
        along += if action.pressed(Button::Sprint) { 2.0 * STEP_LEN } else { STEP_LEN };
    }
    if action.pressed(Button::Back) {
        along -= STEP_LEN;
    }
    if action.pressed(Button::StrafeL) {
        side += STEP_LEN;
    }
    if action.pressed(Button::StrafeR) {
        side -= STEP_LEN;
    }
    if along != 0.0 || side != 0.0 {
        let nx = wrap_pos(s.x + along * hx + side * lx);
        let ny = wrap_pos(s.y + along * hy + side * ly);
        let rise = map.height_at(nx, ny) - map.height_at(s.x, s.y);
        if rise <= CLIMB_LIMIT || action.pressed(Button::Jump) {
            s.x = nx;
            s.y = ny;
        }
    }

    let atk = action.pressed(Button::Atk);
    let use_ = action.pressed(Button::Use);
    if atk || use_ {
        let fx = wrap_cell((s.x + hx).floor() as i64);
        let fy = wrap_cell((s.y + hy).floor() as i64);
        let i = fy * MAP_SIZE + fx;
        if atk {
            map.dug[i] = !map.dug[i];
        }
        if use_ {
            map.built[i] = !map.built[i];
        }
    }
    let frame = render(map, &s);
    (s, frame)
}

/// Scripted demonstrator families standing in for human play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DemoKind {
    Walker,
    Climber,
    Builder,
}

impl DemoKind {
    pub fn name(self) -> &'static str {
        match self {
            DemoKind::Walker => "walker",
            DemoKind::Climber => "climber",
            DemoKind::Builder => "builder",
        }
    }
}

impl std::str::FromStr for DemoKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walker" => Ok(DemoKind::Walker),
            "climber" => Ok(DemoKind::Climber),
            "builder" => Ok(DemoKind::Builder),
            other => Err(Error::Invalid(format!("unknown demonstrator kind {other:?}"))),
        }
    }
}

fn pick(rng: &mut Rng, weights: &[(u8, f64)]) -> u8 {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(v, w) in weights {
        if u < w {
            return v;
        }
        u -= w;
    }
    weights.last().expect("non-empty").0
}

fn coin(rng: &mut Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Scripted action. Camera bins stay within +/-11.25 degrees.
pub fn script_action(kind: DemoKind, map: &WorldMap, state: &AgentState, rng: &mut Rng) -> Action {
    let mut a = Action::noop();
    match kind {
        DemoKind::Walker => {
            a.yaw_bin = pick(rng, &[(4, 0.80), (3, 0.08), (5, 0.08), (2, 0.02), (6, 0.02)]);
            a.pitch_bin = pick(rng, &[(4, 0.90), (3, 0.05), (5, 0.05)]);
            a.buttons[Button::Fwd as usize] = coin(rng, 0.88);
            a.buttons[Button::Sprint as usize] = a.pressed(Button::Fwd) && coin(rng, 0.10);
            a.buttons[Button::Jump as usize] = coin(rng, 0.05);
            for b in [Button::Back, Button::StrafeL, Button::StrafeR, Button::Atk, Button::Use] {
                a.buttons[b as usize] = coin(rng, 0.02);
            }
        }
        DemoKind::Climber => {
            // steer toward the higher of the two diagonal-ahead cells
            let idx = state.yaw_index();
            let probe = |off: i64| {
                let (dx, dy) = ray_dir(idx + off);
                map.height_at(state.x + 1.5 * dx, state.y + 1.5 * dy)
            };
            let (left, right) = (probe(4), probe(-4));
            a.yaw_bin = if left > right {
                pick(rng, &[(6, 0.6), (5, 0.3), (4, 0.1)])
            } else if right > left {
                pick(rng, &[(2, 0.6), (3, 0.3), (4, 0.1)])
            } else {
                pick(rng, &[(4, 0.6), (3, 0.2), (5, 0.2)])
            };
            a.pitch_bin = pick(rng, &[(4, 0.6), (5, 0.25), (3, 0.15)]);
            a.buttons[Button::Fwd as usize] = coin(rng, 0.85);
            a.buttons[Button::Jump as usize] = coin(rng, 0.6);
            a.buttons[Button::Sprint as usize] = coin(rng, 0.05);
        }
        DemoKind::Builder => {
            // always turn one ray so yaw parity flips, alternating use and atk
            a.yaw_bin = if coin(rng, 0.5) { 3 } else { 5 };
            a.pitch_bin = pick(rng, &[(4, 0.7), (3, 0.3)]);
            if coin(rng, 0.8) {
                let b = if state.yaw_index().rem_euclid(2) == 0 { Button::Use } else { Button::Atk };
                a.buttons[b as usize] = true;
            }
            a.buttons[Button::Fwd as usize] = coin(rng, 0.3);
        }
    }
    a
}

/// Rolls out one scripted episode of `len` steps.
pub fn demo_episode(kind: DemoKind, map_seed: u64, spawn_seed: u64, action_seed: u64, len: usize) -> Trajectory {
    let (mut map, mut state, _) = env_reset(map_seed, spawn_seed);
    let mut rng = seeded(action_seed);
    let mut actions = Vec::with_capacity(len);
    let mut frames = Vec::with_capacity(len);
    for _ in 0..len {
        let a = script_action(kind, &map, &state, &mut rng);
        let (s, f) = env_step(&mut map, &state, &a);
        state = s;
        actions.push(a);
        frames.push(f);
    }
    Trajectory::new(0, Source::Demo(kind), map_seed, spawn_seed, actions, frames)
}

/// Passive dataset: episode `i` uses map seed `base_seed + i`.
pub fn gen_passive_dataset(kind: DemoKind, n_episodes: usize, episode_len: usize, base_seed: u64) -> Result<Vec<Trajectory>> {
    if episode_len % CHUNK != 0 {
        return Err(Error::Invalid(format!(
            "episode length {episode_len} is not a multiple of chunk size {CHUNK}"
        )));
    }
    Ok((0..n_episodes)
        .map(|i| {
            let map_seed = base_seed + i as u64;
            let spawn_seed = derive(map_seed, 0x53);
            let action_seed = derive(derive(base_seed, kind as u64), i as u64);
            let mut t = demo_episode(kind, map_seed, spawn_seed, action_seed, episode_len);
            t.id = i as u64;
            t
        })
        .collect())
}

/// Gaussian jitter used by tests that need random frames.
pub fn random_frame(rng: &mut Rng) -> Frame {
    let mut f = [0.0; FRAME_LEN];
    for v in f.iter_mut() {
        *v = (0.5 + 0.2 * randn(rng)).clamp(0.0, 1.0);
    }
    f
}
