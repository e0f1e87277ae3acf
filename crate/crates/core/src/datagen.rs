//! Synthetic multi-domain generator standing in for the real datasets.
//!
//! Every domain applies a distinct parameterized shift (rotation, channel
//! bias, noise, texture watermark) to a shared live/spoof generative
//! process. Live samples carry 3-D structure (a radial intensity bump plus
//! a highlight) and a smooth depth-like target; spoof samples are flat
//! textured variants with reduced contrast and an all-zero depth target.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::nn::seeded_rng;

pub const IMG_C: usize = 3;
pub const IMG_S: usize = 16;
pub const DEPTH_S: usize = 8;
pub const IMG_DIM: usize = IMG_C * IMG_S * IMG_S;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("need at least 2 domains, got {0}")]
    TooFewDomains(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("data file parse error: {0}")]
    Parse(String),
}

/// Parameterized distribution shift of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub rotation_deg: f64,
    pub channel_bias: [f64; 3],
    pub noise_sigma: f64,
    pub texture_freq: f64,
    /// Per-channel weighting of the live 3-D cue: acquisition "spectral
    /// response" that differs between domains, so a classifier tuned to the
    /// source mixture misreads the target one.
    pub cue_mix: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    /// 3×16×16 image, row-major, values in [0,1].
    pub x: Vec<f64>,
    /// 1 = live, 0 = spoof.
    pub y: u8,
    /// 8×8 depth-like grid in [0,1]; all zeros for spoof.
    pub depth: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainBatch {
    pub domain: usize,
    pub samples: Vec<Sample>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Flattened image batch `[n, dim]`; dim inferred from the samples.
    pub fn inputs(&self) -> Tensor {
        let dim = self.samples.first().map_or(IMG_DIM, |s| s.x.len());
        let data: Vec<f64> = self.samples.iter().flat_map(|s| s.x.iter().copied()).collect();
        Tensor::from_vec(vec![self.samples.len(), dim], data)
    }

    pub fn labels(&self) -> Tensor {
        Tensor::from_vec(
            vec![self.samples.len()],
            self.samples.iter().map(|s| s.y as f64).collect(),
        )
    }

    /// Depth targets `[n, d, d]`; d inferred from the samples.
    pub fn depth_targets(&self) -> Tensor {
        let d = self
            .samples
            .first()
            .map_or(DEPTH_S, |s| (s.depth.len() as f64).sqrt().round() as usize);
        let data: Vec<f64> = self.samples.iter().flat_map(|s| s.depth.iter().copied()).collect();
        Tensor::from_vec(vec![self.samples.len(), d, d], data)
    }
}

/// Build `n` pairwise-distinct domain shifts spread across the shift family.
pub fn make_domains(n: usize, seed: u64) -> Result<Vec<DomainSpec>, DatagenError> {
    if n < 2 {
        return Err(DatagenError::TooFewDomains(n));
    }
    let mut rng = seeded_rng(seed ^ 0xd0a11);
    let mut specs = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        // structured spread plus a small seed-dependent jitter
        let rotation = -28.0 + 56.0 * t + rng.gen_range(-4.0..4.0);
        let swing = 0.4 * (2.0 * t - 1.0);
        let channel_bias = [
            swing + rng.gen_range(-0.05..0.05),
            -swing + rng.gen_range(-0.05..0.05),
            0.34 * (std::f64::consts::PI * 2.0 * t).sin() + rng.gen_range(-0.05..0.05),
        ];
        let noise_sigma = 0.05 + 0.04 * t;
        let texture_freq = 2.0 + 3.0 * t + rng.gen_range(-0.2..0.2);
        // rotate the cue emphasis around the three channels as t advances
        let phase = std::f64::consts::TAU * t * 0.33 + rng.gen_range(-0.15..0.15);
        let raw = [
            1.0 + 0.97 * phase.cos(),
            1.0 + 0.97 * (phase - 2.0).cos(),
            1.0 + 0.97 * (phase - 4.0).cos(),
        ];
        let total: f64 = raw.iter().sum();
        let cue_mix = [raw[0] / total, raw[1] / total, raw[2] / total];
        specs.push(DomainSpec {
            id: i,
            rotation_deg: rotation,
            channel_bias,
            noise_sigma,
            texture_freq,
            cue_mix,
        });
    }
    Ok(specs)
}

fn rotate_image(img: &[f64], angle_deg: f64) -> Vec<f64> {
    let s = IMG_S as f64;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let center = (s - 1.0) / 2.0;
    let mut out = vec![0.0; img.len()];
    for c in 0..IMG_C {
        for y in 0..IMG_S {
            for x in 0..IMG_S {
                let dx = x as f64 - center;
                let dy = y as f64 - center;
                let sx = (cos * dx + sin * dy + center).round() as isize;
                let sy = (-sin * dx + cos * dy + center).round() as isize;
                let v = if (0..IMG_S as isize).contains(&sx) && (0..IMG_S as isize).contains(&sy) {
                    img[(c * IMG_S + sy as usize) * IMG_S + sx as usize]
                } else {
                    0.5
                };
                out[(c * IMG_S + y) * IMG_S + x] = v;
            }
        }
    }
    out
}

fn base_sample(live: bool, cue_mix: &[f64; 3], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; IMG_DIM];
    let cx = 7.5 + rng.gen_range(-1.5..1.5);
    let cy = 7.5 + rng.gen_range(-1.5..1.5);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let grad_dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let bump_width: f64 = rng.gen_range(12.0..22.0);
    let base_level: f64 = rng.gen_range(0.38..0.52);
    // The liveness cue lives in a channel *direction*, not in total energy:
    // the genuine shading bump lands along the domain's cue mixture while a
    // confound bump of the opposite class strength lands along the
    // complementary mixture. Summing channels nearly cancels the class
    // difference, so classifiers must read the domain-specific mixture.
    let (cue_amp, confound_amp): (f64, f64) = if live {
        (rng.gen_range(0.10..0.22), rng.gen_range(0.0..0.05))
    } else {
        (rng.gen_range(0.0..0.07), rng.gen_range(0.04..0.12))
    };
    let anti_raw = [1.0 - cue_mix[0], 1.0 - cue_mix[1], 1.0 - cue_mix[2]];
    let anti_total: f64 = anti_raw.iter().sum();
    for c in 0..IMG_C {
        let gain = 3.0 * cue_mix[c];
        let anti_gain = 3.0 * anti_raw[c] / anti_total;
        for yi in 0..IMG_S {
            for xi in 0..IMG_S {
                let u = xi as f64 / (IMG_S - 1) as f64 - 0.5;
                let v = yi as f64 / (IMG_S - 1) as f64 - 0.5;
                let background = base_level + 0.15 * (u * grad_dir.cos() + v * grad_dir.sin());
                let r2 = (xi as f64 - cx).powi(2) + (yi as f64 - cy).powi(2);
                let shading = (-r2 / bump_width).exp();
                let bump = (cue_amp * gain + confound_amp * anti_gain) * shading;
                let hr2 = (xi as f64 - cx + 2.0).powi(2) + (yi as f64 - cy - 2.0).powi(2);
                let highlight = 0.55 * cue_amp * (-hr2 / 2.5).exp() * gain;
                let val = if live {
                    background + bump + highlight
                } else {
                    // flat periodic print texture over reduced contrast
                    let stripe =
                        (std::f64::consts::TAU * (xi as f64 * 0.45 + yi as f64 * 0.2) / 2.2 + phase).sin();
                    0.5 + 0.8 * (background - 0.5) + 0.05 * stripe + bump + highlight
                };
                x[(c * IMG_S + yi) * IMG_S + xi] = val;
            }
        }
    }
    let mut depth = vec![0.0; DEPTH_S * DEPTH_S];
    if live {
        let dcx = cx / 2.0;
        let dcy = cy / 2.0;
        for yi in 0..DEPTH_S {
            for xi in 0..DEPTH_S {
                let r2 = (xi as f64 - dcx).powi(2) + (yi as f64 - dcy).powi(2);
                depth[yi * DEPTH_S + xi] = 0.9 * (-r2 / (bump_width / 4.0)).exp();
            }
        }
    }
    (x, depth)
}

fn apply_shift(x: &[f64], spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = rotate_image(x, spec.rotation_deg);
    for c in 0..IMG_C {
        for i in 0..IMG_S * IMG_S {
            let yi = i / IMG_S;
            let xi = i % IMG_S;
            let watermark =
                0.06 * (std::f64::consts::TAU * spec.texture_freq * (xi + yi) as f64 / IMG_S as f64).sin();
            let noise = if spec.noise_sigma > 0.0 {
                // Box-Muller
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                spec.noise_sigma * (-2.0 * u1.ln()).sqrt() * u2.cos()
            } else {
                0.0
            };
            let idx = c * IMG_S * IMG_S + i;
            out[idx] = (out[idx] + spec.channel_bias[c] + watermark + noise).clamp(0.0, 1.0);
        }
    }
    out
}

/// Stratified batch of `n` samples from one domain; shift applied to x only.
pub fn sample_batch(spec: &DomainSpec, n: usize, seed: u64) -> DomainBatch {
    let mut rng = seeded_rng(seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(spec.id as u64));
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let live = i % 2 == 0;
        let (base, depth) = base_sample(live, &spec.cue_mix, &mut rng);
        let x = apply_shift(&base, spec, &mut rng);
        samples.push(Sample {
            x,
            y: live as u8,
            depth,
        });
    }
    DomainBatch {
        domain: spec.id,
        samples,
    }
}

// ---------------------------------------------------------------------------
// Record file: versioned header with counts/shapes, then row-major float
// records. Floats use shortest round-trip decimal formatting.
// ---------------------------------------------------------------------------

pub const DATA_VERSION: &str = "sda-data v1";

pub fn write_batches(w: &mut impl std::io::Write, batches: &[DomainBatch]) -> Result<(), DatagenError> {
    writeln!(w, "{DATA_VERSION}")?;
    writeln!(w, "batches {} image {} {} {} depth {}", batches.len(), IMG_C, IMG_S, IMG_S, DEPTH_S)?;
    for b in batches {
        writeln!(w, "domain {} samples {}", b.domain, b.samples.len())?;
        for s in &b.samples {
            writeln!(w, "sample {}", s.y)?;
            let xs: Vec<String> = s.x.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", xs.join(" "))?;
            let ds: Vec<String> = s.depth.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", ds.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_batches<R: std::io::BufRead>(r: R) -> Result<Vec<DomainBatch>, DatagenError> {
    let mut lines = r.lines();
    let mut next_line = || -> Result<String, DatagenError> {
        lines
            .next()
            .ok_or_else(|| DatagenError::Parse("unexpected end of file".into()))?
            .map_err(DatagenError::Io)
    };
    let header = next_line()?;
    if header.trim() != DATA_VERSION {
        return Err(DatagenError::Parse(format!(
            "unsupported data version {header:?}, expected {DATA_VERSION:?}"
        )));
    }
    let counts = next_line()?;
    let parts: Vec<&str> = counts.split_whitespace().collect();
    if parts.len() != 8 || parts[0] != "batches" {
        return Err(DatagenError::Parse(format!("bad counts line {counts:?}")));
    }
    let n_batches: usize = parts[1]
        .parse()
        .map_err(|_| DatagenError::Parse("bad batch count".into()))?;
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let dom_line = next_line()?;
        let dp: Vec<&str> = dom_line.split_whitespace().collect();
        if dp.len() != 4 || dp[0] != "domain" || dp[2] != "samples" {
            return Err(DatagenError::Parse(format!("bad domain line {dom_line:?}")));
        }
        let domain: usize = dp[1].parse().map_err(|_| DatagenError::Parse("bad domain id".into()))?;
        let n: usize = dp[3].parse().map_err(|_| DatagenError::Parse("bad sample count".into()))?;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let s_line = next_line()?;
            let y: u8 = s_line
                .strip_prefix("sample ")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| DatagenError::Parse(format!("bad sample line {s_line:?}")))?;
            let parse_row = |line: String, want: usize| -> Result<Vec<f64>, DatagenError> {
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|p| p.parse().map_err(|_| DatagenError::Parse("bad float".into())))
                    .collect::<Result<_, _>>()?;
                if vals.len() != want {
                    return Err(DatagenError::Parse(format!("expected {want} values, got {}", vals.len())));
                }
                Ok(vals)
            };
            let x = parse_row(next_line()?, IMG_DIM)?;
            let depth = parse_row(next_line()?, DEPTH_S * DEPTH_S)?;
            samples.push(Sample { x, y, depth });
        }
        batches.push(DomainBatch { domain, samples });
    }
    Ok(batches)
}
