//! Episode records and the line-delimited JSON trajectory store.
//!
//! A trajectory file is one JSON header line followed by one JSON line per
//! step. Step `t` holds the action taken at `t` and the frame rendered after
//! it; the pre-action observations are recovered by replaying from reset.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{env_reset, env_step, Action, AgentState, DemoKind, Frame, FRAME_LEN};
use crate::error::{Error, Result};
use crate::latent::{LatentCodec, Latent};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Source {
    Demo(DemoKind),
    Policy(String),
}

impl Source {
    pub fn label(&self) -> String {
        match self {
            Source::Demo(k) => k.name().to_string(),
            Source::Policy(id) => format!("policy:{id}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("policy:") {
            Some(id) => Ok(Source::Policy(id.to_string())),
            None => Ok(Source::Demo(s.parse()?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub source: Source,
    pub map_seed: u64,
    pub spawn_seed: u64,
    pub actions: Vec<Action>,
    pub frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    id: u64,
    map_seed: u64,
    spawn_seed: u64,
    source: String,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    t: usize,
    yaw_bin: u8,
    pitch_bin: u8,
    buttons: String,
    frame: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        id: u64,
        source: Source,
        map_seed: u64,
        spawn_seed: u64,
        actions: Vec<Action>,
        frames: Vec<Frame>,
    ) -> Self {
        debug_assert_eq!(actions.len(), frames.len());
        Self {
            id,
            source,
            map_seed,
            spawn_seed,
            actions,
            frames,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn latents(&self, codec: &LatentCodec) -> Vec<Latent> {
        self.frames.iter().map(|f| codec.encode_frame(f)).collect()
    }

    /// Pre-action observations (pose and frame) for every step.
    pub fn replay_observations(&self) -> Vec<(AgentState, Frame)> {
        let (mut map, mut state, mut frame) = env_reset(self.map_seed, self.spawn_seed);
        let mut out = Vec::with_capacity(self.len());
        for a in &self.actions {
            out.push((state, frame));
            let (s, f) = env_step(&mut map, &state, a);
            state = s;
            frame = f;
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            schema_version: SCHEMA_VERSION,
            id: self.id,
            map_seed: self.map_seed,
            spawn_seed: self.spawn_seed,
            source: self.source.label(),
            length: self.len(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (t, (a, f)) in self.actions.iter().zip(&self.frames).enumerate() {
            let line = StepLine {
                t,
                yaw_bin: a.yaw_bin,
                pitch_bin: a.pitch_bin,
                buttons: a.button_string(),
                frame: f.to_vec(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Format("empty trajectory file".into()))??;
        let header: Header = serde_json::from_str(&head)?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported trajectory schema version {}",
                header.schema_version
            )));
        }
        let mut actions = Vec::with_capacity(header.length);
        let mut frames = Vec::with_capacity(header.length);
        for (t, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let step: StepLine = serde_json::from_str(&line)?;
            if step.t != t {
                return Err(Error::Format(format!("step index {} out of order (expected {t})", step.t)));
            }
            let frame: Frame = step
                .frame
                .try_into()
                .map_err(|v: Vec<f64>| Error::Format(format!("frame has {} values, expected {FRAME_LEN}", v.len())))?;
            actions.push(Action::new(step.yaw_bin, step.pitch_bin, Action::parse_buttons(&step.buttons)?)?);
            frames.push(frame);
        }
        if actions.len() != header.length {
            return Err(Error::Format(format!(
                "header declares {} steps, file holds {}",
                header.length,
                actions.len()
            )));
        }
        Ok(Self::new(
            header.id,
            Source::parse(&header.source)?,
            header.map_seed,
            header.spawn_seed,
            actions,
            frames,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }
}

pub fn trajectory_file_name(id: u64) -> String {
    format!("traj_{id:08}.jsonl")
}

/// Writes one file per trajectory into `dir` (created if missing).
pub fn save_dataset(dir: &Path, trajs: &[Trajectory]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    trajs
        .iter()
        .map(|t| {
            let p = dir.join(trajectory_file_name(t.id));
            t.save(&p)?;
            Ok(p)
        })
        .collect()
}

/// Loads every `traj_*.jsonl` in `dir`, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Trajectory>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("traj_") && n.ends_with(".jsonl"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| Trajectory::load(p)).collect()
}
