//! The five networks and their wiring: feature extractor F, classifier C,
//! adapted classifier C_a (C's first convolution plus a 1×1 residual
//! adaptor branch), depth estimator D, and autoencoder R.
//!
//! Desk-scale defaults: 3×16×16 inputs, an 8-channel 8×8 feature map, a
//! 1×1-conv classifier first layer the adaptor attaches to, an 8×8 depth
//! grid, and a 512→64→512 autoencoder over the first-layer features.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, AdResult, Tape, Tensor};
use crate::nn::{self, GroupName, ParamGroup};

/// Where the adaptor's residual branch joins C's first convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualMode {
    /// activation(conv_C(f) + conv_A(f)) — the default reading.
    PreActivation,
    /// activation(conv_C(f)) + conv_A(f)
    PostActivation,
}

impl Default for ResidualMode {
    fn default() -> Self {
        ResidualMode::PreActivation
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input channels × height × width.
    pub input: (usize, usize, usize),
    /// Hidden width of F's first stage.
    pub f_hidden: usize,
    /// Feature-map channels.
    pub k: usize,
    /// Feature-map spatial size.
    pub s: usize,
    /// Depth grid is d×d.
    pub d_out: usize,
    /// Autoencoder bottleneck width.
    pub r_bottleneck: usize,
    pub residual: ResidualMode,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input: (3, 16, 16),
            f_hidden: 32,
            k: 8,
            s: 8,
            d_out: 8,
            r_bottleneck: 64,
            residual: ResidualMode::PreActivation,
        }
    }
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    pub fn feature_dim(&self) -> usize {
        self.k * self.s * self.s
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k < 2 {
            return Err("feature channels k must be at least 2".into());
        }
        if self.d_out >= self.input.1 || self.d_out >= self.input.2 {
            return Err("depth grid must be strictly smaller than the input spatial size".into());
        }
        if self.r_bottleneck >= self.feature_dim() {
            return Err("autoencoder bottleneck must be smaller than the feature dimension".into());
        }
        Ok(())
    }
}

/// The full parameter set: θ_F, θ_C, θ_D, θ_R, θ_A.
#[derive(Clone)]
pub struct ParamSet {
    pub f: ParamGroup,
    pub c: ParamGroup,
    pub d: ParamGroup,
    pub r: ParamGroup,
    pub a: ParamGroup,
}

impl ParamSet {
    pub fn groups(&self) -> [&ParamGroup; 5] {
        [&self.f, &self.c, &self.d, &self.r, &self.a]
    }

    pub fn attach(&self, tape: &Tape) -> ParamSet {
        ParamSet {
            f: self.f.attach(tape),
            c: self.c.attach(tape),
            d: self.d.attach(tape),
            r: self.r.attach(tape),
            a: self.a.attach(tape),
        }
    }

    pub fn detach(&self) -> ParamSet {
        ParamSet {
            f: self.f.detach(),
            c: self.c.detach(),
            d: self.d.detach(),
            r: self.r.detach(),
            a: self.a.detach(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|g| g.tensors.iter().all(|(_, t)| t.all_finite()))
    }

    /// Order-stable checksum of every group except the adaptor.
    pub fn non_adaptor_checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for g in [&self.f, &self.c, &self.d, &self.r] {
            for (name, t) in &g.tensors {
                for b in name.bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
                for v in t.data() {
                    h = (h ^ v.to_bits()).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Per-channel moments of F's output feature map, used by the
/// statistics-recalibration baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Fan-in uniform initialization for F, C, D, R; zeros for the adaptor so
/// the adapted classifier starts exactly equal to the plain one.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamSet {
    let mut rng = nn::seeded_rng(seed);
    let in_dim = spec.input_dim();
    let feat = spec.feature_dim();
    let (k, h) = (spec.k, spec.f_hidden);
    let d2 = spec.d_out * spec.d_out;
    let f = ParamGroup::new(
        GroupName::F,
        vec![
            ("w1".into(), nn::init_uniform(vec![h, in_dim], in_dim, &mut rng)),
            ("b1".into(), Tensor::zeros(vec![h])),
            ("w2".into(), nn::init_uniform(vec![feat, h], h, &mut rng)),
            ("b2".into(), Tensor::zeros(vec![feat])),
        ],
    );
    let c = ParamGroup::new(
        GroupName::C,
        vec![
            ("conv_w".into(), nn::init_uniform(vec![k, k], k, &mut rng)),
            ("conv_b".into(), Tensor::zeros(vec![k])),
            ("head_w".into(), nn::init_uniform(vec![1, k], k, &mut rng)),
            ("head_b".into(), Tensor::zeros(vec![1])),
        ],
    );
    let d = ParamGroup::new(
        GroupName::D,
        vec![
            ("w".into(), nn::init_uniform(vec![d2, feat], feat, &mut rng)),
            ("b".into(), Tensor::zeros(vec![d2])),
        ],
    );
    let r = ParamGroup::new(
        GroupName::R,
        vec![
            ("enc_w".into(), nn::init_uniform(vec![spec.r_bottleneck, feat], feat, &mut rng)),
            ("enc_b".into(), Tensor::zeros(vec![spec.r_bottleneck])),
            ("dec_w".into(), nn::init_uniform(vec![feat, spec.r_bottleneck], spec.r_bottleneck, &mut rng)),
            ("dec_b".into(), Tensor::zeros(vec![feat])),
        ],
    );
    let a = ParamGroup::new(GroupName::A, vec![("w".into(), Tensor::zeros(vec![k, k]))]);
    ParamSet { f, c, d, r, a }
}

/// Feature extractor: flattened image batch `[n, c·h·w]` → `[n,k,s,s]`.
pub fn forward_f(spec: &ModelSpec, f: &ParamGroup, x: &Tensor) -> AdResult<Tensor> {
    let n = x.shape()[0];
    let h1 = ops::relu(&ops::dense(x, f.get("w1"), f.get("b1"))?);
    let h2 = ops::relu(&ops::dense(&h1, f.get("w2"), f.get("b2"))?);
    ops::reshape(&h2, vec![n, spec.k, spec.s, spec.s])
}

fn c_l1_preact(c: &ParamGroup, fmap: &Tensor) -> AdResult<Tensor> {
    ops::channel_bias(&ops::conv1x1(c.get("conv_w"), fmap)?, c.get("conv_b"))
}

/// First layers of C, up to and including the first activation.
pub fn forward_c_l1(c: &ParamGroup, fmap: &Tensor) -> AdResult<Tensor> {
    Ok(ops::relu(&c_l1_preact(c, fmap)?))
}

/// First layers of C_a: C's first convolution plus the adaptor's 1×1
/// residual branch.
pub fn forward_ca_l1(
    spec: &ModelSpec,
    c: &ParamGroup,
    a: &ParamGroup,
    fmap: &Tensor,
) -> AdResult<Tensor> {
    let branch = ops::conv1x1(a.get("w"), fmap)?;
    match spec.residual {
        ResidualMode::PreActivation => Ok(ops::relu(&ops::add(&c_l1_preact(c, fmap)?, &branch))),
        ResidualMode::PostActivation => Ok(ops::add(&forward_c_l1(c, fmap)?, &branch)),
    }
}

fn c_head(c: &ParamGroup, l1: &Tensor) -> AdResult<Tensor> {
    let n = l1.shape()[0];
    let pooled = ops::spatial_mean(l1)?;
    let logit = ops::dense(&pooled, c.get("head_w"), c.get("head_b"))?;
    ops::reshape(&ops::sigmoid(&logit), vec![n])
}

/// Plain classifier: feature map → per-sample probability in (0,1).
pub fn forward_c(c: &ParamGroup, fmap: &Tensor) -> AdResult<Tensor> {
    c_head(c, &forward_c_l1(c, fmap)?)
}

/// Adapted classifier C_a.
pub fn forward_ca(
    spec: &ModelSpec,
    c: &ParamGroup,
    a: &ParamGroup,
    fmap: &Tensor,
) -> AdResult<Tensor> {
    c_head(c, &forward_ca_l1(spec, c, a, fmap)?)
}

/// Depth estimator: feature map → `[n,d,d]` grid in [0,1].
pub fn forward_d(spec: &ModelSpec, d: &ParamGroup, fmap: &Tensor) -> AdResult<Tensor> {
    let n = fmap.shape()[0];
    let flat = ops::reshape(fmap, vec![n, spec.feature_dim()])?;
    let grid = ops::sigmoid(&ops::dense(&flat, d.get("w"), d.get("b"))?);
    ops::reshape(&grid, vec![n, spec.d_out, spec.d_out])
}

/// Autoencoder over first-layer classifier features `[n,k,s,s]`; output
/// shaped like its input.
pub fn forward_r(spec: &ModelSpec, r: &ParamGroup, h: &Tensor) -> AdResult<Tensor> {
    let n = h.shape()[0];
    let shape = h.shape().to_vec();
    let flat = ops::reshape(h, vec![n, spec.feature_dim()])?;
    let z = ops::relu(&ops::dense(&flat, r.get("enc_w"), r.get("enc_b"))?);
    let out = ops::dense(&z, r.get("dec_w"), r.get("dec_b"))?;
    ops::reshape(&out, shape)
}

// ---------------------------------------------------------------------------
// Parameter manifest: flat, named, versioned text; decimal f64 values use
// Rust's shortest round-trip formatting so save/load is bit-stable.
// ---------------------------------------------------------------------------

pub const MANIFEST_VERSION: &str = "sda-model v1";

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Parse(String),
}

pub fn write_manifest(spec: &ModelSpec, params: &ParamSet, w: &mut impl std::io::Write) -> Result<(), ManifestError> {
    writeln!(w, "{MANIFEST_VERSION}")?;
    writeln!(w, "spec {}", serde_json::to_string(spec).expect("spec serializes"))?;
    for g in params.groups() {
        for (name, t) in &g.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "tensor {}.{} {}", g.name, name, dims.join(" "))?;
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", vals.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_manifest<R: std::io::BufRead>(r: R) -> Result<(ModelSpec, ParamSet), ManifestError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| ManifestError::Parse("empty manifest".into()))??;
    if header.trim() != MANIFEST_VERSION {
        return Err(ManifestError::Parse(format!(
            "unsupported manifest version {header:?}, expected {MANIFEST_VERSION:?}"
        )));
    }
    let spec_line = lines
        .next()
        .ok_or_else(|| ManifestError::Parse("missing spec line".into()))??;
    let spec: ModelSpec = spec_line
        .strip_prefix("spec ")
        .ok_or_else(|| ManifestError::Parse("missing spec line".into()))
        .and_then(|s| serde_json::from_str(s).map_err(|e| ManifestError::Parse(e.to_string())))?;

    let mut found: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    while let Some(line) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("tensor") => {}
            other => return Err(ManifestError::Parse(format!("unexpected record {other:?}"))),
        }
        let name = parts
            .next()
            .ok_or_else(|| ManifestError::Parse("tensor record missing name".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| ManifestError::Parse(format!("bad dim in {name}"))))
            .collect::<Result<_, _>>()?;
        let data_line = lines
            .next()
            .ok_or_else(|| ManifestError::Parse(format!("{name}: missing values")))??;
        let data: Vec<f64> = data_line
            .split_whitespace()
            .map(|p| p.parse().map_err(|_| ManifestError::Parse(format!("bad value in {name}"))))
            .collect::<Result<_, _>>()?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(ManifestError::Parse(format!("{name}: shape/value count mismatch")));
        }
        found.insert(name, Tensor::from_vec(shape, data));
    }

    let template = init_params(&spec, 0);
    let mut take_group = |g: &ParamGroup| -> Result<ParamGroup, ManifestError> {
        let tensors = g
            .tensors
            .iter()
            .map(|(n, t)| {
                let key = format!("{}.{}", g.name, n);
                let loaded = found
                    .remove(&key)
                    .ok_or_else(|| ManifestError::Parse(format!("missing tensor {key}")))?;
                if loaded.shape() != t.shape() {
                    return Err(ManifestError::Parse(format!("{key}: unexpected shape")));
                }
                Ok((n.clone(), loaded))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ParamGroup::new(g.name, tensors))
    };
    let params = ParamSet {
        f: take_group(&template.f)?,
        c: take_group(&template.c)?,
        d: take_group(&template.d)?,
        r: take_group(&template.r)?,
        a: take_group(&template.a)?,
    };
    if !found.is_empty() {
        let extra: Vec<&String> = found.keys().collect();
        return Err(ManifestError::Parse(format!("unknown tensors {extra:?}")));
    }
    Ok((spec, params))
}

pub fn save_manifest(path: &std::path::Path, spec: &ModelSpec, params: &ParamSet) -> Result<(), ManifestError> {
    let mut buf = Vec::new();
    write_manifest(spec, params, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_manifest(path: &std::path::Path) -> Result<(ModelSpec, ParamSet), ManifestError> {
    let file = std::fs::File::open(path)?;
    read_manifest(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, finite_diff, GradMode};
    use crate::losses;

    fn toy_batch(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
        let mut rng = nn::seeded_rng(seed);
        use rand::Rng;
        let dim = spec.input_dim();
        Tensor::from_vec(vec![n, dim], (0..n * dim).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn spec_defaults_validate() {
        let spec = ModelSpec::default();
        assert!(spec.validate().is_ok());
        assert_eq!(spec.input_dim(), 768);
        assert_eq!(spec.feature_dim(), 512);
        let bad = ModelSpec { k: 1, ..spec };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_feature_map() {
        let spec = ModelSpec::default();
        let params = init_params(&spec, 1);
        let x = Tensor::zeros(vec![2, spec.input_dim()]);
        let fmap = forward_f(&spec, &params.f, &x).unwrap();
        assert!(fmap.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_determinism_and_finiteness() {
        let spec = ModelSpec::default();
        let params = init_params(&spec, 7);
        let x = toy_batch(&spec, 3, 9);
        let f1 = forward_f(&spec, &params.f, &x).unwrap();
        let f2 = forward_f(&spec, &params.f, &x).unwrap();
        assert_eq!(f1.data(), f2.data());
        for seed in 0..20 {
            let x = toy_batch(&spec, 2, seed);
            let fmap = forward_f(&spec, &params.f, &x).unwrap();
            assert!(fmap.all_finite());
            let p = forward_c(&params.c, &fmap).unwrap();
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let d = forward_d(&spec, &params.d, &fmap).unwrap();
            assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn init_params_seed_contract() {
        let spec = ModelSpec::default();
        let a = init_params(&spec, 5);
        let b = init_params(&spec, 5);
        let c = init_params(&spec, 6);
        assert_eq!(a.f.get("w1").data(), b.f.get("w1").data());
        assert_ne!(a.f.get("w1").data(), c.f.get("w1").data());
        assert!(a.a.get("w").data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adaptor_removal_identity_is_exact() {
        let spec = ModelSpec::default();
        let params = init_params(&spec, 3);
        let x = toy_batch(&spec, 4, 4);
        let fmap = forward_f(&spec, &params.f, &x).unwrap();
        let plain = forward_c(&params.c, &fmap).unwrap();
        let adapted = forward_ca(&spec, &params.c, &params.a, &fmap).unwrap();
        assert_eq!(plain.data(), adapted.data());
        let l1_plain = forward_c_l1(&params.c, &fmap).unwrap();
        let l1_adapted = forward_ca_l1(&spec, &params.c, &params.a, &fmap).unwrap();
        assert_eq!(l1_plain.data(), l1_adapted.data());
    }

    #[test]
    fn identity_adaptor_adds_feature_map_under_linear_stub() {
        // With a post-activation residual the branch output is added verbatim.
        let spec = ModelSpec {
            residual: ResidualMode::PostActivation,
            ..ModelSpec::default()
        };
        let mut params = init_params(&spec, 3);
        let k = spec.k;
        let mut id = vec![0.0; k * k];
        for i in 0..k {
            id[i * k + i] = 1.0;
        }
        params.a = params.a.with_tensors(vec![Tensor::from_vec(vec![k, k], id)]);
        let x = toy_batch(&spec, 2, 8);
        let fmap = forward_f(&spec, &params.f, &x).unwrap();
        let plain = forward_c_l1(&params.c, &fmap).unwrap();
        let adapted = forward_ca_l1(&spec, &params.c, &params.a, &fmap).unwrap();
        for i in 0..fmap.numel() {
            let want = plain.data()[i] + fmap.data()[i];
            assert!((adapted.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn random_adaptor_matches_straight_line_oracle() {
        let spec = ModelSpec::default();
        let mut params = init_params(&spec, 13);
        let mut rng = nn::seeded_rng(21);
        params.a = params
            .a
            .with_tensors(vec![nn::init_uniform(vec![spec.k, spec.k], spec.k, &mut rng)]);
        let x = toy_batch(&spec, 2, 14);
        let fmap = forward_f(&spec, &params.f, &x).unwrap();
        let got = forward_ca_l1(&spec, &params.c, &params.a, &fmap).unwrap();

        // straight-line re-implementation with plain loops
        let (n, k, s) = (2, spec.k, spec.s);
        let wc = params.c.get("conv_w").data();
        let bc = params.c.get("conv_b").data();
        let wa = params.a.get("w").data();
        let fm = fmap.data();
        let sites = s * s;
        for ni in 0..n {
            for oc in 0..k {
                for site in 0..sites {
                    let mut acc = bc[oc];
                    for ic in 0..k {
                        let v = fm[(ni * k + ic) * sites + site];
                        acc += wc[oc * k + ic] * v + wa[oc * k + ic] * v;
                    }
                    let want = acc.max(0.0);
                    let gotv = got.data()[(ni * k + oc) * sites + site];
                    assert!((gotv - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn classifier_output_monotone_in_head_bias() {
        let spec = ModelSpec::default();
        let params = init_params(&spec, 2);
        let x = toy_batch(&spec, 2, 3);
        let fmap = forward_f(&spec, &params.f, &x).unwrap();
        let base = forward_c(&params.c, &fmap).unwrap();
        let mut bumped = params.c.clone();
        let idx = bumped.tensors.iter().position(|(n, _)| n == "head_b").unwrap();
        bumped.tensors[idx].1 = Tensor::from_vec(vec![1], vec![0.5]);
        let higher = forward_c(&bumped, &fmap).unwrap();
        for (lo, hi) in base.data().iter().zip(higher.data()) {
            assert!(hi > lo);
        }
    }

    #[test]
    fn autoencoder_output_shape_matches_input() {
        let spec = ModelSpec::default();
        let params = init_params(&spec, 2);
        let x = toy_batch(&spec, 3, 5);
        let fmap = forward_f(&spec, &params.f, &x).unwrap();
        let l1 = forward_c_l1(&params.c, &fmap).unwrap();
        let recon = forward_r(&spec, &params.r, &l1).unwrap();
        assert_eq!(recon.shape(), l1.shape());
    }

    #[test]
    fn parameter_census_every_group_reaches_its_forward() {
        let spec = ModelSpec::default();
        let params = init_params(&spec, 6);
        let x = toy_batch(&spec, 2, 6);
        let names: Vec<String> = params
            .groups()
            .iter()
            .flat_map(|g| g.tensors.iter().map(move |(n, _)| format!("{}.{}", g.name, n)))
            .collect();
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len(), "duplicate parameter names");
        assert_eq!(names.len(), 15);

        // Perturbing any single tensor must change the output of the pass
        // that owns it.
        let outputs = |p: &ParamSet| {
            let fmap = forward_f(&spec, &p.f, &x).unwrap();
            let mut nonzero_a = p.a.clone();
            nonzero_a = nonzero_a.with_tensors(vec![Tensor::full(vec![spec.k, spec.k], 0.05)]);
            (
                forward_c(&p.c, &fmap).unwrap(),
                forward_d(&spec, &p.d, &fmap).unwrap(),
                forward_r(&spec, &p.r, &forward_c_l1(&p.c, &fmap).unwrap()).unwrap(),
                forward_ca(&spec, &p.c, &nonzero_a, &fmap).unwrap(),
            )
        };
        let base = outputs(&params);
        for gi in 0..5 {
            let mut p = params.clone();
            let group = match gi {
                0 => &mut p.f,
                1 => &mut p.c,
                2 => &mut p.d,
                3 => &mut p.r,
                _ => &mut p.a,
            };
            for ti in 0..group.tensors.len() {
                let mut q = params.clone();
                let g = match gi {
                    0 => &mut q.f,
                    1 => &mut q.c,
                    2 => &mut q.d,
                    3 => &mut q.r,
                    _ => &mut q.a,
                };
                let old = g.tensors[ti].1.clone();
                g.tensors[ti].1 = ops::add(&old, &Tensor::scalar(0.37)).detach();
                let perturbed = if gi == 4 {
                    // the adaptor only reaches forward_ca
                    let fmap = forward_f(&spec, &q.f, &x).unwrap();
                    let changed = forward_ca(&spec, &q.c, &q.a, &fmap).unwrap();
                    let fmap0 = forward_f(&spec, &params.f, &x).unwrap();
                    let base_ca = forward_ca(&spec, &params.c, &params.a, &fmap0).unwrap();
                    changed.data() != base_ca.data()
                } else {
                    let out = outputs(&q);
                    out.0.data() != base.0.data()
                        || out.1.data() != base.1.data()
                        || out.2.data() != base.2.data()
                        || out.3.data() != base.3.data()
                };
                assert!(perturbed, "group {gi} tensor {ti} unreachable from forward passes");
            }
            let _ = group;
        }
    }

    #[test]
    fn end_to_end_gradient_check() {
        let spec = ModelSpec::default();
        let params = init_params(&spec, 11);
        let x = toy_batch(&spec, 2, 12);
        let labels = Tensor::from_vec(vec![2], vec![1.0, 0.0]);
        // check the classifier head weight; full-input FD over every F weight
        // is oversized for a unit test
        let loss_at = |head_w: &Tensor| {
            let mut p = params.clone();
            let idx = p.c.tensors.iter().position(|(n, _)| n == "head_w").unwrap();
            p.c.tensors[idx].1 = head_w.detach();
            let fmap = forward_f(&spec, &p.f, &x).unwrap();
            let probs = forward_c(&p.c, &fmap).unwrap();
            losses::cls_loss(&probs, &labels).item()
        };
        let tape = Tape::new();
        let attached = params.attach(&tape);
        let fmap = forward_f(&spec, &attached.f, &x).unwrap();
        let probs = forward_c(&attached.c, &fmap).unwrap();
        let loss = losses::cls_loss(&probs, &labels);
        let g = backward(&loss, &[attached.c.get("head_w")], GradMode::FirstOrder).unwrap();
        let fd = finite_diff(|t| loss_at(t), params.c.get("head_w"), 1e-5);
        for (a, b) in g[0].data().iter().zip(fd.data()) {
            let rel = (a - b).abs() / b.abs().max(1e-8);
            assert!(rel < 1e-4, "{a} vs {b}");
        }
        // and one F-side weight row to cover the deep path
        let gf = {
            let tape = Tape::new();
            let attached = params.attach(&tape);
            let fmap = forward_f(&spec, &attached.f, &x).unwrap();
            let probs = forward_c(&attached.c, &fmap).unwrap();
            let loss = losses::cls_loss(&probs, &labels);
            backward(&loss, &[attached.f.get("b1")], GradMode::FirstOrder).unwrap()
        };
        let fd_b1 = finite_diff(
            |b1| {
                let mut p = params.clone();
                let idx = p.f.tensors.iter().position(|(n, _)| n == "b1").unwrap();
                p.f.tensors[idx].1 = b1.detach();
                let fmap = forward_f(&spec, &p.f, &x).unwrap();
                let probs = forward_c(&p.c, &fmap).unwrap();
                losses::cls_loss(&probs, &labels).item()
            },
            params.f.get("b1"),
            1e-5,
        );
        for (a, b) in gf[0].data().iter().zip(fd_b1.data()) {
            let rel = (a - b).abs() / b.abs().max(1e-8);
            assert!(rel < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn manifest_round_trip_is_bit_stable() {
        let spec = ModelSpec::default();
        let params = init_params(&spec, 31);
        let mut buf = Vec::new();
        write_manifest(&spec, &params, &mut buf).unwrap();
        let (spec2, params2) = read_manifest(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(spec2.input, spec.input);
        for (g1, g2) in params.groups().iter().zip(params2.groups()) {
            for ((n1, t1), (n2, t2)) in g1.tensors.iter().zip(&g2.tensors) {
                assert_eq!(n1, n2);
                let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits1, bits2, "{n1} not bit-stable");
            }
        }
        let mut buf2 = Vec::new();
        write_manifest(&spec2, &params2, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn manifest_rejects_bad_version_and_missing_tensors() {
        let bad = b"sda-model v99\n".to_vec();
        assert!(read_manifest(std::io::Cursor::new(&bad)).is_err());
        let spec = ModelSpec::default();
        let params = init_params(&spec, 1);
        let mut buf = Vec::new();
        write_manifest(&spec, &params, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(read_manifest(std::io::Cursor::new(truncated.as_bytes())).is_err());
    }
}
