//! Meta-training loop: domain-pair sampling, inner updates of the
//! classifier / autoencoder / adaptor, meta-test losses at the updated
//! parameters, and the five meta-optimization rules.
//!
//! Every inner update is functional — nothing mutates until
//! [`meta_optimize`] commits — and under [`GradMode::SecondOrder`] the
//! updated parameter sets stay on the tape so the outer gradients include
//! the path through the inner steps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{backward, ops, AdError, AdResult, GradMode, Tape, Tensor};
use crate::datagen::{sample_batch, DomainBatch, DomainSpec};
use crate::losses::{
    ae_loss, cls_loss, depth_loss, entropy_loss, orth_loss, AblationMask, EntropyKind, LossWeights,
};
use crate::model::{
    forward_c, forward_c_l1, forward_ca, forward_ca_l1, forward_d, forward_f, forward_r,
    init_params, ModelSpec, ParamSet,
};
use crate::nn::{adam_step, sgd_step, AdamState, Hyperparams, ParamGroup};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("need at least 2 source domains, got {0}")]
    TooFewDomains(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        trace: Box<MetaStepTrace>,
    },
}

/// Outer-loop optimizer: Adam at learning rate β (default), or raw β-SGD
/// exactly as the update rules are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuterOpt {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaConfig {
    pub spec: ModelSpec,
    pub hyper: Hyperparams,
    pub grad_mode: GradMode,
    pub mask: AblationMask,
    pub entropy: EntropyKind,
    pub outer_opt: OuterOpt,
    pub iterations: usize,
    pub seed: u64,
    /// Skip the meta-loop entirely and train F/C/D supervised on pooled
    /// source data (the adaptor-free baseline).
    pub disable_meta: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            spec: ModelSpec::default(),
            hyper: Hyperparams::default(),
            grad_mode: GradMode::SecondOrder,
            mask: AblationMask::default(),
            entropy: EntropyKind::default(),
            outer_opt: OuterOpt::Adam,
            iterations: 2000,
            seed: 0,
            disable_meta: false,
        }
    }
}

impl MetaConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.hyper.lambda,
            mu: self.hyper.mu,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.spec.validate().map_err(TrainError::Config)?;
        self.hyper.validate().map_err(TrainError::Config)?;
        self.mask.validate().map_err(TrainError::Config)?;
        if self.iterations < 1 {
            return Err(TrainError::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Components of the combined adaptor loss, for tracing.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AdapParts {
    pub total: f64,
    pub ent: f64,
    pub ae: f64,
    pub orth: f64,
}

impl AdapParts {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.ent.is_finite() && self.ae.is_finite() && self.orth.is_finite()
    }
}

/// One line of the training trace: every loss of one meta-iteration plus
/// per-group outer gradient norms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaStepTrace {
    pub iteration: usize,
    pub d_trn: usize,
    pub d_val: usize,
    pub l_cls_trn: f64,
    pub l_dep_trn: f64,
    pub l_ae_trn: f64,
    pub l_adap: AdapParts,
    pub l_cls_val: f64,
    pub l_dep_val: f64,
    pub grad_norm_f: f64,
    pub grad_norm_c: f64,
    pub grad_norm_d: f64,
    pub grad_norm_a: f64,
}

impl MetaStepTrace {
    pub fn is_finite(&self) -> bool {
        [
            self.l_cls_trn,
            self.l_dep_trn,
            self.l_ae_trn,
            self.l_cls_val,
            self.l_dep_val,
            self.grad_norm_f,
            self.grad_norm_c,
            self.grad_norm_d,
            self.grad_norm_a,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.l_adap.is_finite()
    }
}

pub fn write_trace(w: &mut impl std::io::Write, trace: &[MetaStepTrace]) -> std::io::Result<()> {
    for t in trace {
        serde_json::to_writer(&mut *w, t)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_trace<R: std::io::BufRead>(r: R) -> std::io::Result<Vec<MetaStepTrace>> {
    r.lines()
        .map(|line| {
            serde_json::from_str(&line?).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}

#[derive(Clone)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub config: MetaConfig,
    pub trace: Vec<MetaStepTrace>,
    /// Source-domain feature moments, recorded after training for the
    /// statistics-recalibration baseline.
    pub src_moments: Option<crate::model::FeatureStats>,
    /// Target-domain moments set by the recalibration baseline; when
    /// present, prediction standardizes F's features from these back to
    /// the source moments.
    pub bn_recal: Option<crate::model::FeatureStats>,
}

/// Algorithm line 2: an ordered pair of distinct domains, uniform over the
/// n·(n−1) ordered pairs.
pub fn pick_domains<'a>(
    domains: &'a [DomainSpec],
    rng: &mut ChaCha8Rng,
) -> Result<(&'a DomainSpec, &'a DomainSpec), TrainError> {
    let n = domains.len();
    if n < 2 {
        return Err(TrainError::TooFewDomains(n));
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Ok((&domains[i], &domains[j]))
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Inner step of a parameter group: one SGD step at lr α on `loss`
/// w.r.t. the group only, staying on the tape.
fn inner_step(group: &ParamGroup, loss: &Tensor, alpha: f64, mode: GradMode) -> AdResult<ParamGroup> {
    let grads = backward(loss, &group.values(), mode)?;
    Ok(group.with_tensors(sgd_step(&group.values(), &grads, alpha)))
}

pub struct MetaTrainOut {
    pub theta_c_prime: ParamGroup,
    pub theta_r_prime: ParamGroup,
    pub l_cls: Tensor,
    pub l_dep: Tensor,
    pub l_ae: Tensor,
}

/// Lines 5–9: supervised losses on the meta-train batch and the inner
/// updates of the classifier and the autoencoder. The autoencoder sees
/// detached features — gradient flows to θ_R only.
pub fn meta_train_phase(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &DomainBatch,
    alpha: f64,
    mode: GradMode,
) -> Result<MetaTrainOut, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let x = batch.inputs();
    let fmap = forward_f(spec, &params.f, &x)?;
    let probs = forward_c(&params.c, &fmap)?;
    let l_cls = cls_loss(&probs, &batch.labels());
    let theta_c_prime = inner_step(&params.c, &l_cls, alpha, mode)?;

    let l_dep = depth_loss(&forward_d(spec, &params.d, &fmap)?, &batch.depth_targets());

    let h = forward_c_l1(&params.c, &fmap)?.detach();
    let recon = forward_r(spec, &params.r, &h)?;
    let l_ae = ae_loss(&recon, &h);
    let theta_r_prime = inner_step(&params.r, &l_ae, alpha, mode)?;

    Ok(MetaTrainOut {
        theta_c_prime,
        theta_r_prime,
        l_cls,
        l_dep,
        l_ae,
    })
}

/// The combined adaptor objective at the given (possibly inner-updated)
/// classifier and autoencoder, with per-component values for tracing.
/// Reads only the inputs of the batch — never labels.
pub fn adaptor_objective(
    spec: &ModelSpec,
    f: &ParamGroup,
    c: &ParamGroup,
    r: &ParamGroup,
    a: &ParamGroup,
    inputs: &Tensor,
    weights: LossWeights,
    mask: AblationMask,
    entropy: EntropyKind,
) -> AdResult<(Tensor, AdapParts)> {
    let fmap = forward_f(spec, f, inputs)?;
    let mut parts = AdapParts::default();
    let mut total: Option<Tensor> = None;
    let mut accumulate = |t: Tensor, slot: &mut f64| {
        *slot = t.item();
        total = Some(match total.take() {
            Some(acc) => ops::add(&acc, &t),
            None => t,
        });
    };
    if mask.use_ent {
        let probs = forward_ca(spec, c, a, &fmap)?;
        accumulate(entropy_loss(&probs, entropy), &mut parts.ent);
    }
    if mask.use_ae {
        let fa = forward_ca_l1(spec, c, a, &fmap)?;
        let recon = forward_r(spec, r, &fa)?;
        accumulate(ops::scale(&ae_loss(&recon, &fa), weights.lambda), &mut parts.ae);
    }
    if mask.use_orth {
        accumulate(ops::scale(&orth_loss(a.get("w")), weights.mu), &mut parts.orth);
    }
    let total = total.expect("adaptor objective: ablation mask removed every term");
    parts.total = total.item();
    Ok((total, parts))
}

/// Lines 10–11: one unsupervised step of the adaptor at θ_C′, θ_R′.
pub fn adaptor_inner_update(
    spec: &ModelSpec,
    params: &ParamSet,
    theta_c_prime: &ParamGroup,
    theta_r_prime: &ParamGroup,
    inputs: &Tensor,
    weights: LossWeights,
    mask: AblationMask,
    entropy: EntropyKind,
    alpha: f64,
    mode: GradMode,
) -> Result<(ParamGroup, Tensor, AdapParts), TrainError> {
    if inputs.shape()[0] == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let (l_adap, parts) = adaptor_objective(
        spec,
        &params.f,
        theta_c_prime,
        theta_r_prime,
        &params.a,
        inputs,
        weights,
        mask,
        entropy,
    )?;
    let theta_a_prime = inner_step(&params.a, &l_adap, alpha, mode)?;
    Ok((theta_a_prime, l_adap, parts))
}

/// Lines 13–14: meta-test losses — classification through the adapted
/// classifier (θ_C′ with the θ_A′ residual), depth at the original θ_D.
pub fn meta_test_phase(
    spec: &ModelSpec,
    params: &ParamSet,
    theta_c_prime: &ParamGroup,
    theta_a_prime: &ParamGroup,
    batch: &DomainBatch,
) -> Result<(Tensor, Tensor), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let x = batch.inputs();
    let fmap = forward_f(spec, &params.f, &x)?;
    let probs = forward_ca(spec, theta_c_prime, theta_a_prime, &fmap)?;
    let l_cls = cls_loss(&probs, &batch.labels());
    let l_dep = depth_loss(&forward_d(spec, &params.d, &fmap)?, &batch.depth_targets());
    Ok((l_cls, l_dep))
}

/// Per-group outer optimizer state.
pub struct OuterState {
    pub f: AdamState,
    pub c: AdamState,
    pub d: AdamState,
    pub a: AdamState,
}

impl OuterState {
    pub fn new(beta: f64, params: &ParamSet) -> Self {
        OuterState {
            f: AdamState::for_group(beta, &params.f),
            c: AdamState::for_group(beta, &params.c),
            d: AdamState::for_group(beta, &params.d),
            a: AdamState::for_group(beta, &params.a),
        }
    }
}

fn outer_update(
    group: &ParamGroup,
    loss: &Tensor,
    opt: OuterOpt,
    beta: f64,
    state: &mut AdamState,
) -> AdResult<(ParamGroup, f64)> {
    let grads = backward(loss, &group.values(), GradMode::FirstOrder)?;
    let norm = grad_norm(&grads);
    let updated = match opt {
        OuterOpt::Adam => adam_step(state, &group.values(), &grads),
        OuterOpt::Sgd => sgd_step(&group.values(), &grads, beta)
            .into_iter()
            .map(|t| t.detach())
            .collect(),
    };
    Ok((group.with_tensors(updated), norm))
}

pub struct MetaLosses<'a> {
    pub l_cls_trn: &'a Tensor,
    pub l_dep_trn: &'a Tensor,
    pub l_adap: &'a Tensor,
    pub l_cls_val: &'a Tensor,
    pub l_dep_val: &'a Tensor,
}

/// Lines 16–20. The four gradient rules read the losses off the live tape
/// (so second-order paths through the inner updates are included), and the
/// autoencoder is overwritten by θ_R′ unconditionally.
pub fn meta_optimize(
    params: &ParamSet,
    theta_r_prime: &ParamGroup,
    losses: MetaLosses,
    opt: OuterOpt,
    beta: f64,
    state: &mut OuterState,
) -> Result<(ParamSet, [f64; 4]), TrainError> {
    let both_cls = ops::add(losses.l_cls_trn, losses.l_cls_val);
    let both_dep = ops::add(losses.l_dep_trn, losses.l_dep_val);
    let f_obj = ops::add(&both_dep, &both_cls);
    let a_obj = ops::add(losses.l_adap, losses.l_cls_val);

    let (c, gn_c) = outer_update(&params.c, &both_cls, opt, beta, &mut state.c)?;
    let (f, gn_f) = outer_update(&params.f, &f_obj, opt, beta, &mut state.f)?;
    let (d, gn_d) = outer_update(&params.d, &both_dep, opt, beta, &mut state.d)?;
    let (a, gn_a) = outer_update(&params.a, &a_obj, opt, beta, &mut state.a)?;
    let r = theta_r_prime.detach();

    Ok((ParamSet { f, c, d, r, a }, [gn_f, gn_c, gn_d, gn_a]))
}

fn batch_seed(seed: u64, iteration: usize, phase: u64) -> u64 {
    seed.wrapping_mul(0x2545f4914f6cdd1d)
        .wrapping_add(iteration as u64 * 3 + phase)
}

fn supervised_step(
    cfg: &MetaConfig,
    params: &ParamSet,
    state: &mut OuterState,
    domains: &[DomainSpec],
    iteration: usize,
) -> Result<(ParamSet, MetaStepTrace), TrainError> {
    // pooled batch across every source domain
    let mut samples = Vec::new();
    for d in domains {
        samples.extend(sample_batch(d, cfg.hyper.batch_per_domain, batch_seed(cfg.seed, iteration, 0)).samples);
    }
    let batch = DomainBatch { domain: 0, samples };
    let tape = Tape::new();
    let p = params.attach(&tape);
    let x = batch.inputs();
    let fmap = forward_f(&cfg.spec, &p.f, &x)?;
    let l_cls = cls_loss(&forward_c(&p.c, &fmap)?, &batch.labels());
    let l_dep = depth_loss(&forward_d(&cfg.spec, &p.d, &fmap)?, &batch.depth_targets());
    let total = ops::add(&l_cls, &l_dep);
    let (c, gn_c) = outer_update(&p.c, &l_cls, cfg.outer_opt, cfg.hyper.beta, &mut state.c)?;
    let (f, gn_f) = outer_update(&p.f, &total, cfg.outer_opt, cfg.hyper.beta, &mut state.f)?;
    let (d, gn_d) = outer_update(&p.d, &l_dep, cfg.outer_opt, cfg.hyper.beta, &mut state.d)?;
    let next = ParamSet {
        f: f.detach(),
        c: c.detach(),
        d: d.detach(),
        r: params.r.clone(),
        a: params.a.clone(),
    };
    let trace = MetaStepTrace {
        iteration,
        d_trn: batch.domain,
        d_val: batch.domain,
        l_cls_trn: l_cls.item(),
        l_dep_trn: l_dep.item(),
        l_ae_trn: 0.0,
        l_adap: AdapParts::default(),
        l_cls_val: 0.0,
        l_dep_val: 0.0,
        grad_norm_f: gn_f,
        grad_norm_c: gn_c,
        grad_norm_d: gn_d,
        grad_norm_a: 0.0,
    };
    Ok((next, trace))
}

fn meta_step(
    cfg: &MetaConfig,
    params: &ParamSet,
    state: &mut OuterState,
    domains: &[DomainSpec],
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<(ParamSet, MetaStepTrace), TrainError> {
    let (d_trn, d_val) = pick_domains(domains, rng)?;
    let t_hat = sample_batch(d_trn, cfg.hyper.batch_per_domain, batch_seed(cfg.seed, iteration, 1));
    let t_tilde = sample_batch(d_val, cfg.hyper.batch_per_domain, batch_seed(cfg.seed, iteration, 2));

    let tape = Tape::new();
    let p = params.attach(&tape);
    let alpha = cfg.hyper.alpha;

    let mt = meta_train_phase(&cfg.spec, &p, &t_hat, alpha, cfg.grad_mode)?;
    let (theta_a_prime, l_adap, adap_parts) = adaptor_inner_update(
        &cfg.spec,
        &p,
        &mt.theta_c_prime,
        &mt.theta_r_prime,
        &t_tilde.inputs(),
        cfg.weights(),
        cfg.mask,
        cfg.entropy,
        alpha,
        cfg.grad_mode,
    )?;
    let (l_cls_val, l_dep_val) =
        meta_test_phase(&cfg.spec, &p, &mt.theta_c_prime, &theta_a_prime, &t_tilde)?;

    let (next, [gn_f, gn_c, gn_d, gn_a]) = meta_optimize(
        &p,
        &mt.theta_r_prime,
        MetaLosses {
            l_cls_trn: &mt.l_cls,
            l_dep_trn: &mt.l_dep,
            l_adap: &l_adap,
            l_cls_val: &l_cls_val,
            l_dep_val: &l_dep_val,
        },
        cfg.outer_opt,
        cfg.hyper.beta,
        state,
    )?;

    let trace = MetaStepTrace {
        iteration,
        d_trn: d_trn.id,
        d_val: d_val.id,
        l_cls_trn: mt.l_cls.item(),
        l_dep_trn: mt.l_dep.item(),
        l_ae_trn: mt.l_ae.item(),
        l_adap: adap_parts,
        l_cls_val: l_cls_val.item(),
        l_dep_val: l_dep_val.item(),
        grad_norm_f: gn_f,
        grad_norm_c: gn_c,
        grad_norm_d: gn_d,
        grad_norm_a: gn_a,
    };
    Ok((next.detach(), trace))
}

/// Run the full training loop over the given source domains.
pub fn train(cfg: &MetaConfig, domains: &[DomainSpec]) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    if domains.len() < 2 {
        return Err(TrainError::TooFewDomains(domains.len()));
    }
    let mut params = init_params(&cfg.spec, cfg.seed);
    let mut state = OuterState::new(cfg.hyper.beta, &params);
    let mut rng = crate::nn::seeded_rng(cfg.seed ^ 0x5eed);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let (next, step_trace) = if cfg.disable_meta {
            supervised_step(cfg, &params, &mut state, domains, iteration)?
        } else {
            meta_step(cfg, &params, &mut state, domains, &mut rng, iteration)?
        };
        if !step_trace.is_finite() || !next.all_finite() {
            return Err(TrainError::NonFinite {
                iteration,
                trace: Box::new(step_trace),
            });
        }
        params = next;
        trace.push(step_trace);
    }
    Ok(TrainedModel {
        spec: cfg.spec.clone(),
        params,
        config: cfg.clone(),
        trace,
        src_moments: None,
        bn_recal: None,
    })
}
