//! Test-time adaptation: freeze everything except the adaptor, optimize
//! the unsupervised objective on unlabeled target batches, then predict
//! with the adapted classifier. Also houses the self-adaptation baselines
//! (feature-moment recalibration and entropy-only updates).
//!
//! The interface is label-free and source-free by construction: [`adapt`]
//! receives only target input batches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{backward, AdError, AdResult, GradMode, Tape, Tensor};
use crate::losses::{AblationMask, EntropyKind, LossWeights};
use crate::metatrain::{adaptor_objective, AdapParts, TrainedModel};
use crate::model::{forward_ca, forward_f, FeatureStats, ModelSpec, ParamSet};
use crate::nn::{adam_step, sgd_step, AdamState, ParamGroup};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no target batches provided")]
    NoBatches,
    #[error("empty target batch")]
    EmptyBatch,
    #[error("non-finite adaptor loss in batch {batch}; pre-adaptation parameters restored")]
    NonFinite { batch: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("statistics-recalibration baseline requires recorded source feature moments")]
    MissingMoments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMode {
    None,
    BnStats,
    EntropyOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub mask: AblationMask,
    pub entropy: EntropyKind,
    pub baseline: BaselineMode,
    /// Plain gradient steps by default; Adam optional.
    pub use_adam: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 1,
            batch_size: 20,
            lr: 1e-3,
            weights: LossWeights::default(),
            mask: AblationMask::default(),
            entropy: EntropyKind::default(),
            baseline: BaselineMode::None,
            use_adam: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.epochs < 1 {
            return Err(AdaptError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(AdaptError::Config("batch size must be at least 2".into()));
        }
        if self.lr < 0.0 {
            return Err(AdaptError::Config("learning rate must be non-negative".into()));
        }
        self.mask.validate().map_err(AdaptError::Config)
    }

    /// The effective term mask: the entropy-only baseline overrides it.
    pub fn effective_mask(&self) -> AblationMask {
        match self.baseline {
            BaselineMode::EntropyOnly => AblationMask {
                use_ent: true,
                use_ae: false,
                use_orth: false,
            },
            _ => self.mask,
        }
    }
}

/// Per-batch loss components before and after the gradient step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchAdaptTrace {
    pub batch: usize,
    pub before: AdapParts,
    pub after: AdapParts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptReport {
    pub batches: Vec<BatchAdaptTrace>,
    pub theta_a_delta_norm: f64,
    pub non_adaptor_checksum_before: u64,
    pub non_adaptor_checksum_after: u64,
}

pub fn write_report(w: &mut impl std::io::Write, report: &AdaptReport) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, report)?;
    writeln!(w)
}

pub fn read_report<R: std::io::Read>(r: R) -> std::io::Result<AdaptReport> {
    serde_json::from_reader(r).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn eval_objective(
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &Tensor,
    cfg: &AdaptConfig,
) -> AdResult<AdapParts> {
    let (_, parts) = adaptor_objective(
        spec,
        &params.f,
        &params.c,
        &params.r,
        &params.a,
        inputs,
        cfg.weights,
        cfg.effective_mask(),
        cfg.entropy,
    )?;
    Ok(parts)
}

/// Optimize θ_A on unlabeled target batches; every other parameter group
/// is bit-identical in the returned model. A non-finite loss or update
/// aborts with the input model untouched.
pub fn adapt(
    model: &TrainedModel,
    target_batches: &[Tensor],
    cfg: &AdaptConfig,
) -> Result<(TrainedModel, AdaptReport), AdaptError> {
    cfg.validate()?;
    if target_batches.is_empty() {
        return Err(AdaptError::NoBatches);
    }
    let checksum_before = model.params.non_adaptor_checksum();
    let mask = cfg.effective_mask();
    let mut params = model.params.detach();
    let mut adam = AdamState::for_group(cfg.lr, &params.a);
    let mut batches_trace = Vec::new();
    let mut step_index = 0usize;
    for _ in 0..cfg.epochs {
        for inputs in target_batches {
            if inputs.shape()[0] == 0 {
                return Err(AdaptError::EmptyBatch);
            }
            let tape = Tape::new();
            let a = params.a.attach(&tape);
            let live = ParamSet { a: a.clone(), ..params.clone() };
            let (loss, before) = adaptor_objective(
                &model.spec,
                &live.f,
                &live.c,
                &live.r,
                &live.a,
                inputs,
                cfg.weights,
                mask,
                cfg.entropy,
            )?;
            if !before.is_finite() {
                return Err(AdaptError::NonFinite { batch: step_index });
            }
            let grads = backward(&loss, &a.values(), GradMode::FirstOrder)?;
            let stepped = if cfg.use_adam {
                adam_step(&mut adam, &a.values(), &grads)
            } else {
                sgd_step(&a.values(), &grads, cfg.lr)
                    .into_iter()
                    .map(|t| t.detach())
                    .collect()
            };
            let a_next = params.a.with_tensors(stepped);
            if !a_next.values().iter().all(|t| t.all_finite()) {
                return Err(AdaptError::NonFinite { batch: step_index });
            }
            params = ParamSet { a: a_next, ..params };
            let after = eval_objective(&model.spec, &params, inputs, cfg)?;
            batches_trace.push(BatchAdaptTrace {
                batch: step_index,
                before,
                after,
            });
            step_index += 1;
        }
    }
    let delta: f64 = model
        .params
        .a
        .values()
        .iter()
        .zip(params.a.values())
        .flat_map(|(o, n)| o.data().iter().zip(n.data()).map(|(a, b)| (a - b) * (a - b)).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt();
    let adapted = TrainedModel {
        params,
        ..model.clone()
    };
    let report = AdaptReport {
        batches: batches_trace,
        theta_a_delta_norm: delta,
        non_adaptor_checksum_before: checksum_before,
        non_adaptor_checksum_after: adapted.params.non_adaptor_checksum(),
    };
    Ok((adapted, report))
}

/// Per-channel mean/variance of F's features over a set of input batches,
/// computed in two passes.
pub fn feature_moments(
    spec: &ModelSpec,
    f: &ParamGroup,
    batches: &[Tensor],
) -> AdResult<FeatureStats> {
    let k = spec.k;
    let mut count = 0usize;
    let mut sums = vec![0.0; k];
    let mut maps = Vec::new();
    for inputs in batches {
        let fmap = forward_f(spec, f, inputs)?;
        let per = spec.s * spec.s;
        let n = fmap.shape()[0];
        for i in 0..n {
            for c in 0..k {
                let base = (i * k + c) * per;
                sums[c] += fmap.data()[base..base + per].iter().sum::<f64>();
            }
        }
        count += n * per;
        maps.push(fmap);
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; k];
    for fmap in &maps {
        let per = spec.s * spec.s;
        let n = fmap.shape()[0];
        for i in 0..n {
            for c in 0..k {
                let base = (i * k + c) * per;
                sq[c] += fmap.data()[base..base + per]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
    }
    let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
    Ok(FeatureStats { mean, var })
}

const BN_EPS: f64 = 1e-8;

/// Standardize `fmap` from `from` moments to `to` moments, per channel.
pub fn recalibrate(fmap: &Tensor, from: &FeatureStats, to: &FeatureStats) -> Tensor {
    let shape = fmap.shape().to_vec();
    let (k, per) = (shape[1], shape[2] * shape[3]);
    let n = shape[0];
    let mut out = Vec::with_capacity(fmap.numel());
    for i in 0..n {
        for c in 0..k {
            let scale = ((to.var[c] + BN_EPS) / (from.var[c] + BN_EPS)).sqrt();
            let base = (i * k + c) * per;
            out.extend(
                fmap.data()[base..base + per]
                    .iter()
                    .map(|v| (v - from.mean[c]) * scale + to.mean[c]),
            );
        }
    }
    Tensor::from_vec(shape, out)
}

/// The AdapBN-style baseline: record target-domain feature moments so that
/// prediction standardizes them back to the source moments. No gradient
/// steps; no parameter changes.
pub fn baseline_bn_stats(
    model: &TrainedModel,
    target_batches: &[Tensor],
) -> Result<TrainedModel, AdaptError> {
    let src = model.src_moments.as_ref().ok_or(AdaptError::MissingMoments)?;
    if target_batches.is_empty() {
        return Err(AdaptError::NoBatches);
    }
    let tgt = feature_moments(&model.spec, &model.params.f, target_batches)?;
    let _ = src;
    Ok(TrainedModel {
        bn_recal: Some(tgt),
        ..model.clone()
    })
}

/// Per-sample live probabilities through the adapted classifier. Pure.
pub fn predict(model: &TrainedModel, inputs: &Tensor) -> AdResult<Tensor> {
    let params = model.params.detach();
    let mut fmap = forward_f(&model.spec, &params.f, inputs)?;
    if let (Some(src), Some(tgt)) = (&model.src_moments, &model.bn_recal) {
        fmap = recalibrate(&fmap, tgt, src);
    }
    forward_ca(&model.spec, &params.c, &params.a, &fmap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_domains, sample_batch};
    use crate::metatrain::{train, MetaConfig};
    use crate::model::forward_c;
    use crate::nn::Hyperparams;

    fn quick_model() -> TrainedModel {
        let domains = make_domains(3, 2).unwrap();
        let cfg = MetaConfig {
            iterations: 3,
            seed: 5,
            hyper: Hyperparams {
                batch_per_domain: 6,
                ..Hyperparams::default()
            },
            ..MetaConfig::default()
        };
        train(&cfg, &domains).unwrap()
    }

    fn target_batches(n_batches: usize, per: usize, seed: u64) -> Vec<Tensor> {
        let domains = make_domains(4, 2).unwrap();
        (0..n_batches)
            .map(|i| sample_batch(&domains[3], per, seed + i as u64).inputs())
            .collect()
    }

    #[test]
    fn zero_lr_is_a_noop() {
        let model = quick_model();
        let batches = target_batches(2, 6, 1);
        let cfg = AdaptConfig {
            lr: 0.0,
            ..AdaptConfig::default()
        };
        let (adapted, report) = adapt(&model, &batches, &cfg).unwrap();
        assert_eq!(report.theta_a_delta_norm, 0.0);
        for (o, n) in model.params.a.values().iter().zip(adapted.params.a.values()) {
            assert_eq!(o.data(), n.data());
        }
        assert_eq!(
            report.non_adaptor_checksum_before,
            report.non_adaptor_checksum_after
        );
    }

    #[test]
    fn only_the_adaptor_moves() {
        let model = quick_model();
        let batches = target_batches(3, 6, 2);
        let cfg = AdaptConfig::default();
        let (adapted, report) = adapt(&model, &batches, &cfg).unwrap();
        assert_eq!(
            report.non_adaptor_checksum_before,
            report.non_adaptor_checksum_after
        );
        assert_eq!(
            model.params.non_adaptor_checksum(),
            adapted.params.non_adaptor_checksum()
        );
        assert!(report.theta_a_delta_norm > 0.0);
        assert_eq!(report.batches.len(), 3);
        // bit-identical frozen groups
        for (g_old, g_new) in [
            (&model.params.f, &adapted.params.f),
            (&model.params.c, &adapted.params.c),
            (&model.params.d, &adapted.params.d),
            (&model.params.r, &adapted.params.r),
        ] {
            for (o, n) in g_old.values().iter().zip(g_new.values()) {
                let ob: Vec<u64> = o.data().iter().map(|v| v.to_bits()).collect();
                let nb: Vec<u64> = n.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(ob, nb);
            }
        }
    }

    #[test]
    fn entropy_only_step_does_not_increase_entropy() {
        let model = quick_model();
        let batches = target_batches(1, 10, 3);
        let cfg = AdaptConfig {
            baseline: BaselineMode::EntropyOnly,
            lr: 1e-3,
            ..AdaptConfig::default()
        };
        let (_, report) = adapt(&model, &batches, &cfg).unwrap();
        let t = &report.batches[0];
        assert!(
            t.after.ent <= t.before.ent + 1e-12,
            "entropy increased: {} -> {}",
            t.before.ent,
            t.after.ent
        );
        assert_eq!(t.after.ae, 0.0);
        assert_eq!(t.after.orth, 0.0);
    }

    #[test]
    fn masked_term_weight_is_irrelevant() {
        let model = quick_model();
        let batches = target_batches(2, 6, 4);
        let mask = AblationMask {
            use_ae: false,
            use_orth: true,
            use_ent: true,
        };
        let run = |lambda: f64| {
            let cfg = AdaptConfig {
                mask,
                weights: LossWeights {
                    lambda,
                    ..LossWeights::default()
                },
                ..AdaptConfig::default()
            };
            let (m, _) = adapt(&model, &batches, &cfg).unwrap();
            m.params
                .a
                .values()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(0.1), run(123.0));
    }

    #[test]
    fn predict_is_pure_and_respects_adaptor_removal() {
        let model = quick_model();
        let inputs = target_batches(1, 8, 5).pop().unwrap();
        let p1 = predict(&model, &inputs).unwrap();
        let p2 = predict(&model, &inputs).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1), bits(&p2));
        // θ_A stayed zero through meta-training start? not necessarily: zero it
        let mut zeroed = model.clone();
        zeroed.params.a = zeroed
            .params
            .a
            .with_tensors(zeroed.params.a.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect());
        let pz = predict(&zeroed, &inputs).unwrap();
        let fmap = forward_f(&model.spec, &model.params.f, &inputs).unwrap();
        let plain = forward_c(&model.params.c, &fmap).unwrap();
        for (a, b) in pz.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // batch permutation permutes outputs
        let n = inputs.shape()[0];
        let dim = inputs.shape()[1];
        let mut rev = Vec::with_capacity(inputs.numel());
        for i in (0..n).rev() {
            rev.extend_from_slice(&inputs.data()[i * dim..(i + 1) * dim]);
        }
        let pr = predict(&model, &Tensor::from_vec(vec![n, dim], rev)).unwrap();
        let mut expect: Vec<u64> = bits(&p1);
        expect.reverse();
        assert_eq!(bits(&pr), expect);
    }

    #[test]
    fn moments_match_streaming_oracle_and_identity_recalibration() {
        let model = quick_model();
        let batches = target_batches(2, 7, 6);
        let stats = feature_moments(&model.spec, &model.params.f, &batches).unwrap();
        // streaming (Welford) oracle per channel
        let k = model.spec.k;
        let per = model.spec.s * model.spec.s;
        let mut count = vec![0usize; k];
        let mut mean = vec![0.0; k];
        let mut m2 = vec![0.0; k];
        for inputs in &batches {
            let fmap = forward_f(&model.spec, &model.params.f, inputs).unwrap();
            let n = fmap.shape()[0];
            for i in 0..n {
                for c in 0..k {
                    let base = (i * k + c) * per;
                    for &v in &fmap.data()[base..base + per] {
                        count[c] += 1;
                        let d = v - mean[c];
                        mean[c] += d / count[c] as f64;
                        m2[c] += d * (v - mean[c]);
                    }
                }
            }
        }
        for c in 0..k {
            assert!((stats.mean[c] - mean[c]).abs() < 1e-10);
            assert!((stats.var[c] - m2[c] / count[c] as f64).abs() < 1e-10);
        }

        // identical moments → predictions unchanged
        let mut m = model.clone();
        m.src_moments = Some(stats.clone());
        let recal = baseline_bn_stats(&m, &batches).unwrap();
        let p0 = predict(&m, &batches[0]).unwrap();
        let p1 = predict(&recal, &batches[0]).unwrap();
        for (a, b) in p0.data().iter().zip(p1.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn recalibration_removes_a_constant_shift_exactly() {
        let stats_from = FeatureStats {
            mean: vec![1.5, -0.5],
            var: vec![2.0, 0.7],
        };
        let stats_to = FeatureStats {
            mean: vec![0.5, -1.5],
            var: vec![2.0, 0.7],
        };
        let fmap = Tensor::from_vec(
            vec![1, 2, 1, 2],
            vec![2.0, 3.0, -1.0, 0.25],
        );
        let out = recalibrate(&fmap, &stats_from, &stats_to);
        let expect = [2.0 - 1.0, 3.0 - 1.0, -1.0 - 1.0, 0.25 - 1.0];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adapt_report_round_trips() {
        let model = quick_model();
        let batches = target_batches(1, 6, 7);
        let (_, report) = adapt(&model, &batches, &AdaptConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_report(&mut buf, &report).unwrap();
        let parsed = read_report(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(parsed.batches.len(), report.batches.len());
        assert_eq!(
            parsed.theta_a_delta_norm.to_bits(),
            report.theta_a_delta_norm.to_bits()
        );
    }
}
