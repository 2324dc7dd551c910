//! Frozen linear codec between 64-value frames and 8-dimensional latents.
//!
//! The encoder rows are an orthonormalised seeded Gaussian draw; the decoder
//! is its transpose, so `encode(decode(z)) == z` up to rounding.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{Frame, FRAME_LEN};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, randn};
use crate::rng::{derive, seeded};

pub const LATENT_DIM: usize = 8;

pub type Latent = [f64; LATENT_DIM];

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    seed: u64,
    encode: Vec<[f64; FRAME_LEN]>,
}

#[derive(Serialize, Deserialize)]
struct CodecFile {
    seed: u64,
    encode_matrix: Vec<f64>,
}

fn gram_schmidt(rows: &mut [[f64; FRAME_LEN]]) -> bool {
    for i in 0..rows.len() {
        for j in 0..i {
            let (done, rest) = rows.split_at_mut(i);
            let proj = dot(&rest[0], &done[j]);
            for (a, b) in rest[0].iter_mut().zip(&done[j]) {
                *a -= proj * b;
            }
        }
        let norm = dot(&rows[i], &rows[i]).sqrt();
        if norm < 1e-8 {
            return false;
        }
        rows[i].iter_mut().for_each(|v| *v /= norm);
    }
    true
}

impl LatentCodec {
    pub fn build(seed: u64) -> Self {
        let mut sub = 0u64;
        loop {
            let mut rng = seeded(derive(seed, sub));
            let mut rows = vec![[0.0; FRAME_LEN]; LATENT_DIM];
            for r in rows.iter_mut() {
                r.iter_mut().for_each(|v| *v = randn(&mut rng));
            }
            if gram_schmidt(&mut rows) {
                return Self { seed, encode: rows };
            }
            log::warn!("codec draw {sub} for seed {seed} was rank-deficient, redrawing");
            sub += 1;
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode_matrix(&self) -> &[[f64; FRAME_LEN]] {
        &self.encode
    }

    pub fn encode_frame(&self, frame: &Frame) -> Latent {
        let mut z = [0.0; LATENT_DIM];
        for (zi, row) in z.iter_mut().zip(&self.encode) {
            *zi = dot(row, frame);
        }
        z
    }

    pub fn encode(&self, frame: &[f64]) -> Result<Latent> {
        let f: &Frame = frame
            .try_into()
            .map_err(|_| Error::Shape(format!("frame has {} values, expected {FRAME_LEN}", frame.len())))?;
        Ok(self.encode_frame(f))
    }

    /// Linear reconstruction before clamping.
    pub fn decode_raw(&self, z: &Latent) -> Frame {
        let mut f = [0.0; FRAME_LEN];
        for (zi, row) in z.iter().zip(&self.encode) {
            for (fv, r) in f.iter_mut().zip(row) {
                *fv += zi * r;
            }
        }
        f
    }

    pub fn decode_latent(&self, z: &Latent) -> Frame {
        let mut f = self.decode_raw(z);
        f.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        f
    }

    pub fn decode(&self, z: &[f64]) -> Result<Frame> {
        if z.len() != LATENT_DIM {
            return shape_err(format!("latent has {} values, expected {LATENT_DIM}", z.len()));
        }
        let mut l = [0.0; LATENT_DIM];
        l.copy_from_slice(z);
        Ok(self.decode_latent(&l))
    }

    /// SHA-256 over the little-endian encoder matrix.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for row in &self.encode {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CodecFile {
            seed: self.seed,
            encode_matrix: self.encode.iter().flat_map(|r| r.iter().copied()).collect(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CodecFile = serde_json::from_str(s)?;
        if f.encode_matrix.len() != LATENT_DIM * FRAME_LEN {
            return Err(Error::Format("codec matrix has wrong size".into()));
        }
        let encode = f
            .encode_matrix
            .chunks(FRAME_LEN)
            .map(|c| c.try_into().expect("exact chunk"))
            .collect();
        Ok(Self { seed: f.seed, encode })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
