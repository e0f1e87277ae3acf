//! Metrics and the experiment protocol: ROC / AUC / HTER with the live
//! class as positive (scores are P(live)), a leave-one-domain-out runner
//! over the method variants, and feature dumps for external embedding
//! visualization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::datagen::{sample_batch, DomainBatch, DomainSpec};
use crate::losses::AblationMask;
use crate::metatrain::{train, MetaConfig, TrainedModel};
use crate::model::{forward_f, ModelSpec};
use crate::nn::ParamGroup;
use crate::ttadapt::{adapt, baseline_bn_stats, feature_moments, predict, AdaptConfig, BaselineMode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("both classes must be present (got {live} live, {spoof} spoof)")]
    SingleClass { live: usize, spoof: usize },
    #[error("scores and labels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("score {0} outside [0,1]")]
    ScoreOutOfRange(f64),
    #[error("need at least 3 domains for leave-one-out, got {0}")]
    TooFewDomains(usize),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-sample (score, label) pairs; score = P(live), label 1 = live.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, EvalError> {
        if scores.len() != labels.len() {
            return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
        }
        if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(EvalError::ScoreOutOfRange(s));
        }
        let live = labels.iter().filter(|&&y| y == 1).count();
        let spoof = labels.len() - live;
        if live == 0 || spoof == 0 {
            return Err(EvalError::SingleClass { live, spoof });
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn counts(&self) -> (usize, usize) {
        let live = self.labels.iter().filter(|&&y| y == 1).count();
        (live, self.labels.len() - live)
    }
}

/// One operating point of the ROC: accept as live when score ≥ threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    /// False acceptance rate: spoof accepted / spoof total.
    pub far: f64,
    /// True positive rate: live accepted / live total.
    pub tpr: f64,
}

fn rates_at(set: &ScoredSet, threshold: f64) -> (f64, f64) {
    let (live, spoof) = set.counts();
    let mut spoof_acc = 0usize;
    let mut live_acc = 0usize;
    for (&s, &y) in set.scores.iter().zip(&set.labels) {
        if s >= threshold {
            if y == 1 {
                live_acc += 1;
            } else {
                spoof_acc += 1;
            }
        }
    }
    (spoof_acc as f64 / spoof as f64, live_acc as f64 / live as f64)
}

/// ROC at every distinct score threshold (exact; no binning), plus an
/// all-reject endpoint, ordered by increasing FAR.
pub fn roc(set: &ScoredSet) -> Vec<RocPoint> {
    let mut thresholds: Vec<f64> = set.scores.clone();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    // strictest first: a threshold above every score accepts nothing
    // (finite sentinel so reports survive JSON round trips)
    points.push(RocPoint {
        threshold: f64::MAX,
        far: 0.0,
        tpr: 0.0,
    });
    for &t in thresholds.iter().rev() {
        let (far, tpr) = rates_at(set, t);
        points.push(RocPoint { threshold: t, far, tpr });
    }
    points
}

/// Trapezoidal area under the ROC; equals the Mann–Whitney statistic.
pub fn auc(set: &ScoredSet) -> f64 {
    let points = roc(set);
    let mut area = 0.0;
    for w in points.windows(2) {
        area += (w[1].far - w[0].far) * (w[1].tpr + w[0].tpr) / 2.0;
    }
    // close the curve to (1,1) if the smallest threshold accepts not all
    let last = points.last().unwrap();
    area += (1.0 - last.far) * (1.0 + last.tpr) / 2.0;
    area
}

/// HTER at the EER operating point: τ* minimizes |FAR − FRR| over the
/// distinct score grid (ties → lower threshold); HTER = (FAR+FRR)/2.
pub fn hter(set: &ScoredSet) -> (f64, f64) {
    let mut thresholds: Vec<f64> = set.scores.clone();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let (live, spoof) = set.counts();
    // Exact tie-breaking: FAR = fa/spoof and FRR = fr/live are compared as
    // |fa·live − fr·spoof| in integers, so equal gaps resolve to the lower
    // threshold regardless of float rounding.
    let mut best: Option<(u64, f64, f64)> = None; // (scaled gap, τ, HTER)
    for &t in &thresholds {
        let mut fa = 0u64;
        let mut fr = 0u64;
        for (&s, &y) in set.scores.iter().zip(&set.labels) {
            match (y, s >= t) {
                (0, true) => fa += 1,
                (1, false) => fr += 1,
                _ => {}
            }
        }
        let gap = (fa * live as u64).abs_diff(fr * spoof as u64);
        if best.map_or(true, |(g, _, _)| gap < g) {
            let hter_val = (fa as f64 / spoof as f64 + fr as f64 / live as f64) / 2.0;
            best = Some((gap, t, hter_val));
        }
    }
    let (_, tau, h) = best.expect("hter: empty score set");
    (h, tau)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub hter: f64,
    pub auc: f64,
    pub eer_threshold: f64,
    pub roc: Vec<RocPoint>,
    pub n_live: usize,
    pub n_spoof: usize,
}

pub fn evaluate(set: &ScoredSet) -> EvalReport {
    let (h, tau) = hter(set);
    let (n_live, n_spoof) = set.counts();
    EvalReport {
        hter: h,
        auc: auc(set),
        eer_threshold: tau,
        roc: roc(set),
        n_live,
        n_spoof,
    }
}

/// ROC as comma-separated rows: threshold, FAR, TPR.
pub fn write_roc_csv(w: &mut impl std::io::Write, points: &[RocPoint]) -> std::io::Result<()> {
    writeln!(w, "threshold,far,tpr")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.far, p.tpr)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out protocol
// ---------------------------------------------------------------------------

pub const ALL_VARIANTS: [&str; 9] = [
    "baseline",
    "ours_wo_meta",
    "ours_wo_adapt",
    "ours_wo_AE",
    "ours_wo_Orth",
    "ours_wo_Ent",
    "adapbn",
    "entropy_only",
    "ours",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolCell {
    pub task: usize,
    pub variant: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub cells: Vec<ProtocolCell>,
    pub config_digest: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub meta: MetaConfig,
    pub adapt: AdaptConfig,
    /// Samples per domain in the evaluation (and adaptation) set.
    pub eval_samples: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            meta: MetaConfig::default(),
            adapt: AdaptConfig::default(),
            eval_samples: 200,
        }
    }
}

fn digest_str(h: &mut u64, s: &str) {
    for b in s.bytes() {
        *h = (*h ^ b as u64).wrapping_mul(0x100000001b3);
    }
}

impl ProtocolConfig {
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        digest_str(&mut h, &serde_json::to_string(self).expect("protocol config serializes"));
        h
    }
}

fn variant_meta(cfg: &ProtocolConfig, variant: &str, seed: u64) -> MetaConfig {
    let mut meta = MetaConfig {
        seed,
        ..cfg.meta.clone()
    };
    match variant {
        "baseline" | "adapbn" | "entropy_only" => meta.disable_meta = true,
        "ours_wo_meta" => meta.disable_meta = true,
        "ours_wo_AE" => meta.mask = AblationMask { use_ae: false, ..meta.mask },
        "ours_wo_Orth" => meta.mask = AblationMask { use_orth: false, ..meta.mask },
        "ours_wo_Ent" => meta.mask = AblationMask { use_ent: false, ..meta.mask },
        _ => {}
    }
    meta
}

/// Score a model on a labeled evaluation batch.
pub fn score_model(model: &TrainedModel, batch: &DomainBatch) -> Result<ScoredSet, EvalError> {
    let probs = predict(model, &batch.inputs())
        .map_err(|e| EvalError::Io(std::io::Error::other(e.to_string())))?;
    ScoredSet::new(
        probs.data().to_vec(),
        batch.samples.iter().map(|s| s.y).collect(),
    )
}

fn chunk_inputs(batch: &DomainBatch, chunk: usize) -> Vec<Tensor> {
    batch
        .samples
        .chunks(chunk.max(2))
        .map(|samples| {
            DomainBatch {
                domain: batch.domain,
                samples: samples.to_vec(),
            }
            .inputs()
        })
        .collect()
}

/// Train / adapt / evaluate one (held-out task, variant, seed) cell.
pub fn run_cell(
    cfg: &ProtocolConfig,
    domains: &[DomainSpec],
    task: usize,
    variant: &str,
    seed: u64,
) -> Result<EvalReport, String> {
    let sources: Vec<DomainSpec> = domains
        .iter()
        .filter(|d| d.id != domains[task].id)
        .cloned()
        .collect();
    let meta = variant_meta(cfg, variant, seed);
    let mut model = train(&meta, &sources).map_err(|e| e.to_string())?;
    let eval_batch = sample_batch(&domains[task], cfg.eval_samples, seed ^ 0xe7a1);
    let target_inputs = chunk_inputs(&eval_batch, cfg.adapt.batch_size);

    let adapted = match variant {
        "baseline" | "ours_wo_adapt" => model,
        "adapbn" => {
            let src_batches: Vec<Tensor> = sources
                .iter()
                .map(|d| sample_batch(d, cfg.eval_samples, seed ^ 0x5fc).inputs())
                .collect();
            model.src_moments = Some(
                feature_moments(&model.spec, &model.params.f, &src_batches)
                    .map_err(|e| e.to_string())?,
            );
            baseline_bn_stats(&model, &target_inputs).map_err(|e| e.to_string())?
        }
        v => {
            let mut acfg = AdaptConfig {
                lr: cfg.adapt.lr,
                ..cfg.adapt.clone()
            };
            match v {
                "entropy_only" => acfg.baseline = BaselineMode::EntropyOnly,
                "ours_wo_meta" | "ours" => {}
                "ours_wo_AE" => acfg.mask = AblationMask { use_ae: false, ..acfg.mask },
                "ours_wo_Orth" => acfg.mask = AblationMask { use_orth: false, ..acfg.mask },
                "ours_wo_Ent" => acfg.mask = AblationMask { use_ent: false, ..acfg.mask },
                other => return Err(format!("unknown variant {other:?}")),
            }
            let (m, _) = adapt(&model, &target_inputs, &acfg).map_err(|e| e.to_string())?;
            m
        }
    };
    let scored = score_model(&adapted, &eval_batch).map_err(|e| e.to_string())?;
    Ok(evaluate(&scored))
}

/// Leave-one-domain-out over every (task, variant, seed) cell; failures
/// are recorded per cell and the run continues.
pub fn run_protocol(
    cfg: &ProtocolConfig,
    domains: &[DomainSpec],
    variants: &[&str],
    seeds: &[u64],
) -> Result<ProtocolResult, EvalError> {
    if domains.len() < 3 {
        return Err(EvalError::TooFewDomains(domains.len()));
    }
    for v in variants {
        if !ALL_VARIANTS.contains(v) {
            return Err(EvalError::UnknownVariant(v.to_string()));
        }
    }
    let mut cells = Vec::new();
    for task in 0..domains.len() {
        for variant in variants {
            for &seed in seeds {
                let cell = match run_cell(cfg, domains, task, variant, seed) {
                    Ok(report) => ProtocolCell {
                        task,
                        variant: variant.to_string(),
                        seed,
                        report: Some(report),
                        error: None,
                    },
                    Err(e) => ProtocolCell {
                        task,
                        variant: variant.to_string(),
                        seed,
                        report: None,
                        error: Some(e),
                    },
                };
                cells.push(cell);
            }
        }
    }
    Ok(ProtocolResult {
        cells,
        config_digest: cfg.digest(),
    })
}

impl ProtocolResult {
    /// Mean HTER over tasks and seeds for one variant, skipping failed cells.
    pub fn mean_hter(&self, variant: &str) -> Option<f64> {
        self.mean_of(variant, |r| r.hter)
    }

    pub fn mean_auc(&self, variant: &str) -> Option<f64> {
        self.mean_of(variant, |r| r.auc)
    }

    fn mean_of(&self, variant: &str, f: impl Fn(&EvalReport) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.report.as_ref().map(&f))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Stable digest over every cell's metric values.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for c in &self.cells {
            digest_str(&mut h, &c.variant);
            h = (h ^ c.task as u64).wrapping_mul(0x100000001b3);
            h = (h ^ c.seed).wrapping_mul(0x100000001b3);
            if let Some(r) = &c.report {
                h = (h ^ r.hter.to_bits()).wrapping_mul(0x100000001b3);
                h = (h ^ r.auc.to_bits()).wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// Variant×task summary table, cells HTER% / AUC% to one decimal.
    pub fn summary_table(&self) -> String {
        let mut variants: Vec<&str> = Vec::new();
        let mut tasks: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !variants.contains(&c.variant.as_str()) {
                variants.push(&c.variant);
            }
            if !tasks.contains(&c.task) {
                tasks.push(c.task);
            }
        }
        tasks.sort_unstable();
        let mut out = String::from("variant");
        for t in &tasks {
            out.push_str(&format!("\tto_d{t}"));
        }
        out.push('\n');
        for v in &variants {
            out.push_str(v);
            for &t in &tasks {
                let reports: Vec<&EvalReport> = self
                    .cells
                    .iter()
                    .filter(|c| c.variant == *v && c.task == t)
                    .filter_map(|c| c.report.as_ref())
                    .collect();
                if reports.is_empty() {
                    out.push_str("\tfailed");
                } else {
                    let n = reports.len() as f64;
                    let h = reports.iter().map(|r| r.hter).sum::<f64>() / n * 100.0;
                    let a = reports.iter().map(|r| r.auc).sum::<f64>() / n * 100.0;
                    out.push_str(&format!("\t{h:.1}/{a:.1}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_protocol(w: &mut impl std::io::Write, result: &ProtocolResult) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, result)?;
    writeln!(w)
}

pub fn read_protocol<R: std::io::Read>(r: R) -> std::io::Result<ProtocolResult> {
    serde_json::from_reader(r).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Write pooled-feature records (feature vector, label, domain id) for
/// external embedding visualization; returns the record count.
pub fn dump_features(
    spec: &ModelSpec,
    f: &ParamGroup,
    batches: &[DomainBatch],
    w: &mut impl std::io::Write,
) -> Result<usize, EvalError> {
    let mut count = 0;
    writeln!(w, "sda-features v1 dim {}", spec.k)?;
    for batch in batches {
        let fmap = forward_f(spec, f, &batch.inputs())
            .map_err(|e| EvalError::Io(std::io::Error::other(e.to_string())))?;
        let pooled = crate::autodiff::ops::spatial_mean(&fmap)
            .map_err(|e| EvalError::Io(std::io::Error::other(e.to_string())))?;
        for (i, s) in batch.samples.iter().enumerate() {
            let row = &pooled.data()[i * spec.k..(i + 1) * spec.k];
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{} {} {}", s.y, batch.domain, vals.join(" "))?;
            count += 1;
        }
    }
    Ok(count)
}

/// Read back a feature dump: (features, label, domain) triples.
pub fn read_features<R: std::io::BufRead>(r: R) -> Result<Vec<(Vec<f64>, u8, usize)>, EvalError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| EvalError::Io(std::io::Error::other("empty feature file")))??;
    if !header.starts_with("sda-features v1") {
        return Err(EvalError::Io(std::io::Error::other(format!(
            "bad feature header {header:?}"
        ))));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        let mut parts = line.split_whitespace();
        let y: u8 = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| EvalError::Io(std::io::Error::other("bad label")))?;
        let domain: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| EvalError::Io(std::io::Error::other("bad domain")))?;
        let feats: Vec<f64> = parts
            .map(|p| p.parse().map_err(|_| EvalError::Io(std::io::Error::other("bad float"))))
            .collect::<Result<_, _>>()?;
        out.push((feats, y, domain));
    }
    Ok(out)
}
