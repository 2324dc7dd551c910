//! Threshold-based action fingerprints and strict novelty across sources.
//!
//! A fingerprint is one exclusive camera tier plus any number of button
//! tags, derived from means over a rollout window. Thresholds are hard and
//! identical for every source, so labels can be compared across buffers.

use std::collections::BTreeMap;
use std::path::Path;

use crate::coordinator::csv_err;
use crate::env::{Action, Button, CHUNK};
use crate::error::{Error, Result};
use crate::pat_buffer::HORIZON_CHUNKS;
use crate::trajectory::Trajectory;
use crate::wm::SEED_CHUNKS;

pub const ROT_DEGREES: f64 = 8.0;
pub const LOOK_DEGREES: f64 = 3.0;
pub const BUTTON_THRESHOLD: f64 = 0.3;
pub const JUMP_THRESHOLD: f64 = 0.2;

/// Button tags in canonical order.
pub const TAGS: [&str; 7] = ["fwd", "back", "strafe", "jump", "sprint", "atk", "use"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CameraTier {
    Rot,
    Look,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    pub camera: CameraTier,
    pub tags: Vec<&'static str>,
    pub label: String,
}

fn make_label(camera: CameraTier, tags: &[&'static str]) -> String {
    let mut parts: Vec<&str> = Vec::new();
    match camera {
        CameraTier::Rot => parts.push("rot"),
        CameraTier::Look => parts.push("look"),
        CameraTier::None => {}
    }
    parts.extend_from_slice(tags);
    if parts.is_empty() {
        "still".into()
    } else {
        parts.join("+")
    }
}

impl Fingerprint {
    /// Rebuilds a fingerprint from its label.
    pub fn parse(label: &str) -> Result<Self> {
        if label == "still" {
            return Ok(Self {
                camera: CameraTier::None,
                tags: Vec::new(),
                label: label.into(),
            });
        }
        let mut parts = label.split('+').peekable();
        let camera = match parts.peek() {
            Some(&"rot") => CameraTier::Rot,
            Some(&"look") => CameraTier::Look,
            _ => CameraTier::None,
        };
        if camera != CameraTier::None {
            parts.next();
        }
        let mut tags = Vec::new();
        let mut last = None;
        for p in parts {
            let i = TAGS
                .iter()
                .position(|t| *t == p)
                .ok_or_else(|| Error::Invalid(format!("unknown fingerprint tag {p:?} in {label:?}")))?;
            if last.is_some_and(|l| i <= l) {
                return Err(Error::Invalid(format!("tags out of canonical order in {label:?}")));
            }
            last = Some(i);
            tags.push(TAGS[i]);
        }
        let fp = Self {
            camera,
            label: make_label(camera, &tags),
            tags,
        };
        if fp.label != label {
            return Err(Error::Invalid(format!("non-canonical label {label:?}")));
        }
        Ok(fp)
    }
}

/// Mean per-step magnitude of the commanded camera rotation, in degrees.
pub fn mean_camera_degrees(actions: &[Action]) -> f64 {
    actions.iter().map(|a| a.yaw_deg().hypot(a.pitch_deg())).sum::<f64>() / actions.len() as f64
}

pub fn fingerprint(actions: &[Action]) -> Result<Fingerprint> {
    if actions.is_empty() {
        return Err(Error::Invalid("fingerprint needs a non-empty window".into()));
    }
    let n = actions.len() as f64;
    let theta = mean_camera_degrees(actions);
    let camera = if theta > ROT_DEGREES {
        CameraTier::Rot
    } else if theta > LOOK_DEGREES {
        CameraTier::Look
    } else {
        CameraTier::None
    };
    let frac = |f: &dyn Fn(&Action) -> bool| actions.iter().filter(|a| f(a)).count() as f64 / n;
    let mut tags = Vec::new();
    for tag in TAGS {
        let (mean, threshold) = match tag {
            "fwd" => (frac(&|a| a.pressed(Button::Fwd)), BUTTON_THRESHOLD),
            "back" => (frac(&|a| a.pressed(Button::Back)), BUTTON_THRESHOLD),
            "strafe" => (
                frac(&|a| a.pressed(Button::StrafeL) || a.pressed(Button::StrafeR)),
                BUTTON_THRESHOLD,
            ),
            "jump" => (frac(&|a| a.pressed(Button::Jump)), JUMP_THRESHOLD),
            "sprint" => (frac(&|a| a.pressed(Button::Sprint)), BUTTON_THRESHOLD),
            "atk" => (frac(&|a| a.pressed(Button::Atk)), BUTTON_THRESHOLD),
            _ => (frac(&|a| a.pressed(Button::Use)), BUTTON_THRESHOLD),
        };
        if mean > threshold {
            tags.push(tag);
        }
    }
    Ok(Fingerprint {
        camera,
        label: make_label(camera, &tags),
        tags,
    })
}

/// The predicted segment of a trajectory: the horizon chunks after the seed chunks.
pub fn rollout_window(traj: &Trajectory) -> Result<&[Action]> {
    let (a, b) = (SEED_CHUNKS * CHUNK, (SEED_CHUNKS + HORIZON_CHUNKS) * CHUNK);
    traj.actions
        .get(a..b)
        .ok_or_else(|| Error::Invalid(format!("trajectory {} too short for a rollout window", traj.id)))
}

pub type ModeCounts = BTreeMap<String, usize>;

/// Label counts over the rollout windows of `trajs`; short ones are skipped.
pub fn count_modes(trajs: &[Trajectory]) -> Result<ModeCounts> {
    let mut counts = ModeCounts::new();
    for t in trajs {
        match rollout_window(t) {
            Ok(w) => *counts.entry(fingerprint(w)?.label).or_default() += 1,
            Err(e) => log::warn!("{e}"),
        }
    }
    Ok(counts)
}

/// Labels that occur in some candidate but in no reference source, with
/// per-candidate counts (zero counts omitted).
pub fn novel_modes(candidates: &[(&str, &ModeCounts)], references: &[&ModeCounts]) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (name, counts) in candidates {
        for (label, &c) in counts.iter() {
            if c > 0 && references.iter().all(|r| r.get(label).copied().unwrap_or(0) == 0) {
                *out.entry(label.clone()).or_default().entry(name.to_string()).or_default() += c;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModeRow {
    pub label: String,
    pub source: String,
    pub count: usize,
}

pub fn mode_rows(sources: &[(&str, &ModeCounts)]) -> Vec<ModeRow> {
    let mut rows: Vec<ModeRow> = sources
        .iter()
        .flat_map(|(s, counts)| {
            counts.iter().map(move |(l, &c)| ModeRow {
                label: l.clone(),
                source: s.to_string(),
                count: c,
            })
        })
        .collect();
    rows.sort_by(|a, b| a.label.cmp(&b.label).then(a.source.cmp(&b.source)));
    rows
}

pub fn write_mode_report(path: &Path, rows: &[ModeRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(["label", "source", "count"]).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mode_report(path: &Path) -> Result<Vec<ModeRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
