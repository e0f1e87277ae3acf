//! The loss family: binary cross-entropy classification, depth regression,
//! autoencoder reconstruction, prediction entropy, the SRIP orthogonality
//! penalty on the adaptor kernel, and their weighted combination.
//!
//! All reductions are batch means so the combination weights keep their
//! meaning across batch sizes. Probabilities are clamped to
//! `[1e-7, 1 − 1e-7]` inside logs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Tensor};

pub const PROB_EPS: f64 = 1e-7;

/// Weights balancing the three terms of the combined adaptor loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.1, mu: 10.0 }
    }
}

/// Which terms of the adaptor loss are active (ablation switches).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AblationMask {
    pub use_ae: bool,
    pub use_orth: bool,
    pub use_ent: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        AblationMask { use_ae: true, use_orth: true, use_ent: true }
    }
}

impl AblationMask {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.use_ae || self.use_orth || self.use_ent) {
            return Err("ablation mask must keep at least one adaptor-loss term".into());
        }
        Ok(())
    }
}

/// Entropy variant: the printed single term −p·log p, or full Bernoulli
/// entropy (the default, standard in entropy-minimization adaptation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropyKind {
    SingleTerm,
    Bernoulli,
}

impl Default for EntropyKind {
    fn default() -> Self {
        EntropyKind::Bernoulli
    }
}

fn clamp_probs(probs: &Tensor) -> Tensor {
    ops::clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross-entropy. `labels` are constants in {0,1}.
pub fn cls_loss(probs: &Tensor, labels: &Tensor) -> Tensor {
    assert_eq!(probs.numel(), labels.numel(), "cls_loss: {} probs vs {} labels", probs.numel(), labels.numel());
    assert!(probs.numel() > 0, "cls_loss: empty batch");
    let p = clamp_probs(probs);
    let y = labels.detach();
    let one_minus_y = ops::sub(&Tensor::ones(y.shape().to_vec()), &y);
    let one_minus_p = ops::sub(&Tensor::ones(p.shape().to_vec()), &p);
    let ll = ops::add(
        &ops::mul(&y, &ops::log(&p)),
        &ops::mul(&one_minus_y, &ops::log(&one_minus_p)),
    );
    ops::neg(&ops::mean(&ll))
}

/// Mean squared error over all elements and samples.
pub fn depth_loss(pred: &Tensor, target: &Tensor) -> Tensor {
    assert_eq!(pred.shape(), target.shape(), "depth_loss: shape mismatch {:?} vs {:?}", pred.shape(), target.shape());
    let diff = ops::sub(pred, &target.detach());
    ops::mean(&ops::mul(&diff, &diff))
}

/// Mean squared reconstruction error. Gradient flows into whatever the
/// caller left attached to the tape (the autoencoder in meta-train, the
/// adaptor through both arguments in the adaptor loss).
pub fn ae_loss(recon: &Tensor, features: &Tensor) -> Tensor {
    assert_eq!(recon.shape(), features.shape(), "ae_loss: shape mismatch {:?} vs {:?}", recon.shape(), features.shape());
    let diff = ops::sub(recon, features);
    ops::mean(&ops::mul(&diff, &diff))
}

/// Mean prediction entropy over the batch.
pub fn entropy_loss(probs: &Tensor, kind: EntropyKind) -> Tensor {
    assert!(probs.numel() > 0, "entropy_loss: empty batch");
    let p = clamp_probs(probs);
    let term_p = ops::mul(&p, &ops::log(&p));
    let h = match kind {
        EntropyKind::SingleTerm => ops::neg(&term_p),
        EntropyKind::Bernoulli => {
            let q = ops::sub(&Tensor::ones(p.shape().to_vec()), &p);
            ops::neg(&ops::add(&term_p, &ops::mul(&q, &ops::log(&q))))
        }
    };
    ops::mean(&h)
}

fn eye(k: usize) -> Tensor {
    let mut data = vec![0.0; k * k];
    for i in 0..k {
        data[i * k + i] = 1.0;
    }
    Tensor::from_vec(vec![k, k], data)
}

/// Deterministic unit start vector for power iteration.
fn start_vector(k: usize) -> Tensor {
    // splitmix64 stream from a fixed seed; normalized
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut vals = Vec::with_capacity(k);
    for _ in 0..k {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        vals.push((z >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
    }
    let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
    Tensor::from_vec(vec![k, 1], vals.into_iter().map(|v| v / norm).collect())
}

/// Number of recorded power iterations used during training.
pub const ORTH_TRAIN_ITERS: usize = 2;

/// Spectral norm of `θ_AᵀθA − I`, estimated by `iters` power iterations
/// from a fixed unit start vector. Differentiable through the iterations.
pub fn orth_loss_with_iters(theta_a: &Tensor, iters: usize) -> Tensor {
    let k = match theta_a.shape() {
        [r, c] if r == c => *r,
        other => panic!("orth_loss: adaptor weight must be square, got {:?}", other),
    };
    let m = ops::sub(
        &ops::matmul(&ops::transpose(theta_a), theta_a).expect("orth_loss"),
        &eye(k),
    );
    let mut v = start_vector(k);
    let mut sigma = Tensor::scalar(0.0);
    for _ in 0..iters.max(1) {
        let mv = ops::matmul(&m, &v).expect("orth_loss");
        sigma = ops::l2_norm(&mv);
        // The iteration vector is treated as a constant: gradients flow only
        // through the final norm. Differentiating through the normalization
        // blows up as θ_A approaches orthogonality (the estimate itself is
        // unchanged, and at convergence the frozen-vector gradient equals the
        // true spectral-norm gradient).
        v = ops::mul(&mv, &ops::recip(&sigma)).detach();
    }
    sigma
}

/// Spectral-norm penalty with the training iteration count.
pub fn orth_loss(theta_a: &Tensor) -> Tensor {
    orth_loss_with_iters(theta_a, ORTH_TRAIN_ITERS)
}

/// Non-differentiable power iteration on `θ_AᵀθA − I`, run until the
/// estimate stabilizes. Used when an accurate value is needed rather than
/// a cheap training signal.
pub fn orth_loss_converged(theta_a: &Tensor, tol: f64, max_iters: usize) -> f64 {
    let k = match theta_a.shape() {
        [r, c] if r == c => *r,
        other => panic!("orth_loss: adaptor weight must be square, got {:?}", other),
    };
    let a = theta_a.data();
    let mut m = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for r in 0..k {
                acc += a[r * k + i] * a[r * k + j];
            }
            m[i * k + j] = acc - if i == j { 1.0 } else { 0.0 };
        }
    }
    let mut v: Vec<f64> = start_vector(k).data().to_vec();
    let mut sigma = 0.0;
    for _ in 0..max_iters {
        let mut mv = vec![0.0; k];
        for i in 0..k {
            let row = &m[i * k..(i + 1) * k];
            mv[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = mv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-15 {
            return 0.0;
        }
        let prev = sigma;
        sigma = norm;
        for (slot, x) in v.iter_mut().zip(mv) {
            *slot = x / norm;
        }
        if (sigma - prev).abs() < tol {
            break;
        }
    }
    sigma
}

/// The combined unsupervised adaptor objective: entropy + λ·reconstruction
/// + μ·orthogonality, with masked-out terms contributing exactly zero and
/// no gradient.
pub fn adaptor_loss(
    probs: &Tensor,
    recon: &Tensor,
    features: &Tensor,
    theta_a: &Tensor,
    weights: LossWeights,
    mask: AblationMask,
    entropy: EntropyKind,
) -> Tensor {
    let mut total: Option<Tensor> = None;
    let mut accumulate = |t: Tensor| {
        total = Some(match total.take() {
            Some(acc) => ops::add(&acc, &t),
            None => t,
        });
    };
    if mask.use_ent {
        accumulate(entropy_loss(probs, entropy));
    }
    if mask.use_ae {
        accumulate(ops::scale(&ae_loss(recon, features), weights.lambda));
    }
    if mask.use_orth {
        accumulate(ops::scale(&orth_loss(theta_a), weights.mu));
    }
    total.expect("adaptor_loss: ablation mask removed every term")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, finite_diff, GradMode, Tape};

    /// Largest |eigenvalue| of a symmetric matrix by cyclic Jacobi rotations.
    /// Dense oracle, independent of the power-iteration path.
    pub fn symmetric_spectral_norm_oracle(m: &[f64], k: usize) -> f64 {
        let mut a = m.to_vec();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..k {
                for q in (p + 1)..k {
                    off += a[p * k + q] * a[p * k + q];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..k {
                for q in (p + 1)..k {
                    let apq = a[p * k + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * k + q] - a[p * k + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..k {
                        let aip = a[i * k + p];
                        let aiq = a[i * k + q];
                        a[i * k + p] = c * aip - s * aiq;
                        a[i * k + q] = s * aip + c * aiq;
                    }
                    for i in 0..k {
                        let api = a[p * k + i];
                        let aqi = a[q * k + i];
                        a[p * k + i] = c * api - s * aqi;
                        a[q * k + i] = s * api + c * aqi;
                    }
                }
            }
        }
        (0..k).map(|i| a[i * k + i].abs()).fold(0.0, f64::max)
    }

    fn gram_minus_identity(a: &Tensor) -> Vec<f64> {
        let k = a.shape()[0];
        let ad = a.data();
        let mut m = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for r in 0..k {
                    acc += ad[r * k + i] * ad[r * k + j];
                }
                m[i * k + j] = acc - if i == j { 1.0 } else { 0.0 };
            }
        }
        m
    }

    #[test]
    fn cls_loss_examples() {
        let near_perfect = cls_loss(&Tensor::scalar(1.0 - 1e-12), &Tensor::scalar(1.0));
        assert!(near_perfect.item() < 1e-6);
        let uncertain = cls_loss(&Tensor::scalar(0.5), &Tensor::scalar(1.0));
        assert!((uncertain.item() - std::f64::consts::LN_2).abs() < 1e-12);
        let batch = cls_loss(
            &Tensor::from_vec(vec![2], vec![0.9, 0.2]),
            &Tensor::from_vec(vec![2], vec![1.0, 0.0]),
        );
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((batch.item() - want).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_is_nonnegative() {
        let mut rng = crate::nn::seeded_rng(11);
        use rand::Rng;
        for _ in 0..200 {
            let p: f64 = rng.gen_range(0.0..1.0);
            let y = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            assert!(cls_loss(&Tensor::scalar(p), &Tensor::scalar(y)).item() >= 0.0);
        }
    }

    #[test]
    fn depth_loss_examples() {
        let t = Tensor::from_vec(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        assert_eq!(depth_loss(&t, &t).item(), 0.0);
        let shifted = ops::add(&t, &Tensor::scalar(0.1));
        assert!((depth_loss(&shifted, &t).item() - 0.01).abs() < 1e-12);
        let mut rng = crate::nn::seeded_rng(3);
        let a = crate::nn::init_uniform(vec![3, 5], 1, &mut rng);
        let b = crate::nn::init_uniform(vec![3, 5], 1, &mut rng);
        let want: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 15.0;
        assert!((depth_loss(&a, &b).item() - want).abs() < 1e-12);
        assert!((ae_loss(&a, &b).item() - want).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples_and_symmetry() {
        let max = entropy_loss(&Tensor::scalar(0.5), EntropyKind::Bernoulli);
        assert!((max.item() - std::f64::consts::LN_2).abs() < 1e-12);
        // clamping at 1e-7 bounds the value near certainty
        let certain = entropy_loss(&Tensor::scalar(1.0 - 1e-12), EntropyKind::Bernoulli);
        assert!(certain.item() < 1e-5);
        let at_09 = entropy_loss(&Tensor::scalar(0.9), EntropyKind::Bernoulli);
        assert!((at_09.item() - 0.325083).abs() < 1e-6);
        for p in [0.01, 0.2, 0.37, 0.49, 0.88] {
            let a = entropy_loss(&Tensor::scalar(p), EntropyKind::Bernoulli).item();
            let b = entropy_loss(&Tensor::scalar(1.0 - p), EntropyKind::Bernoulli).item();
            assert!((a - b).abs() < 1e-12, "entropy not symmetric at {p}");
        }
        let single = entropy_loss(&Tensor::scalar(0.9), EntropyKind::SingleTerm);
        assert!((single.item() - (-0.9 * 0.9f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn orth_loss_diagonal_cases() {
        let id = eye(4);
        assert!(orth_loss(&id).item() < 1e-6);
        let two_id = ops::scale(&eye(5), 2.0).detach();
        assert!((orth_loss(&two_id).item() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn orth_loss_matches_dense_oracle() {
        let mut rng = crate::nn::seeded_rng(77);
        for trial in 0..100 {
            let k = if trial % 2 == 0 { 4 } else { 8 };
            let a = crate::nn::init_uniform(vec![k, k], k, &mut rng);
            let got = orth_loss_converged(&a, 1e-13, 200_000);
            let want = symmetric_spectral_norm_oracle(&gram_minus_identity(&a), k);
            assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn orth_loss_near_zero_for_householder_orthogonal_matrices() {
        let mut rng = crate::nn::seeded_rng(9);
        for _ in 0..20 {
            let k = 6;
            // Q = product of two Householder reflections
            let mut q = vec![0.0; k * k];
            for i in 0..k {
                q[i * k + i] = 1.0;
            }
            for _ in 0..2 {
                let v = crate::nn::init_uniform(vec![k], 1, &mut rng);
                let norm2: f64 = v.data().iter().map(|x| x * x).sum();
                let mut h = vec![0.0; k * k];
                for i in 0..k {
                    for j in 0..k {
                        h[i * k + j] = (if i == j { 1.0 } else { 0.0 })
                            - 2.0 * v.data()[i] * v.data()[j] / norm2;
                    }
                }
                let mut next = vec![0.0; k * k];
                for i in 0..k {
                    for j in 0..k {
                        for r in 0..k {
                            next[i * k + j] += q[i * k + r] * h[r * k + j];
                        }
                    }
                }
                q = next;
            }
            let qt = Tensor::from_vec(vec![k, k], q);
            assert!(orth_loss_with_iters(&qt, 50).item() < 1e-6);
        }
    }

    #[test]
    fn adaptor_loss_arithmetic_and_masking() {
        let probs = Tensor::from_vec(vec![2], vec![0.7, 0.3]);
        let feats = Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let recon = Tensor::from_vec(vec![4], vec![0.15, 0.1, 0.35, 0.5]);
        let a = Tensor::from_vec(vec![2, 2], vec![1.2, 0.1, -0.3, 0.8]);
        let w = LossWeights::default();
        let full = AblationMask::default();
        let e = entropy_loss(&probs, EntropyKind::Bernoulli).item();
        let ae = ae_loss(&recon, &feats).item();
        let o = orth_loss(&a).item();
        let total = adaptor_loss(&probs, &recon, &feats, &a, w, full, EntropyKind::Bernoulli);
        assert!((total.item() - (e + 0.1 * ae + 10.0 * o)).abs() < 1e-12);

        let ent_only = AblationMask { use_ae: false, use_orth: false, use_ent: true };
        let only = adaptor_loss(&probs, &recon, &feats, &a, w, ent_only, EntropyKind::Bernoulli);
        assert_eq!(only.item(), e);

        let zeroish = adaptor_loss(
            &Tensor::scalar(1.0 - 1e-12),
            &feats,
            &feats,
            &eye(2),
            w,
            full,
            EntropyKind::Bernoulli,
        );
        assert!(zeroish.item() < 1e-5);
    }

    #[test]
    fn all_loss_gradients_match_finite_differences() {
        let check = |f: &dyn Fn(&Tensor) -> f64, at: &Tensor, build: &dyn Fn(&Tensor) -> Tensor| {
            let tape = Tape::new();
            let x = tape.leaf(at);
            let loss = build(&x);
            let g = backward(&loss, &[&x], GradMode::FirstOrder).unwrap();
            let fd = finite_diff(f, at, 1e-5);
            for (a, b) in g[0].data().iter().zip(fd.data()) {
                let rel = (a - b).abs() / b.abs().max(1e-6);
                assert!(rel < 1e-4, "{a} vs {b}");
            }
        };
        let labels = Tensor::from_vec(vec![3], vec![1.0, 0.0, 1.0]);
        let probs = Tensor::from_vec(vec![3], vec![0.8, 0.3, 0.6]);
        check(
            &|p| cls_loss(p, &labels).item(),
            &probs,
            &|p| cls_loss(p, &labels),
        );
        check(
            &|p| entropy_loss(p, EntropyKind::Bernoulli).item(),
            &probs,
            &|p| entropy_loss(p, EntropyKind::Bernoulli),
        );
        let target = Tensor::from_vec(vec![4], vec![0.2, 0.4, 0.1, 0.9]);
        let pred = Tensor::from_vec(vec![4], vec![0.3, 0.1, 0.4, 0.5]);
        check(
            &|p| depth_loss(p, &target).item(),
            &pred,
            &|p| depth_loss(p, &target),
        );
        check(
            &|p| ae_loss(p, &target).item(),
            &pred,
            &|p| ae_loss(p, &target),
        );
        // With a converged iteration vector the frozen-vector gradient equals
        // the finite-difference gradient of the estimate.
        let a = Tensor::from_vec(vec![3, 3], vec![0.9, 0.2, -0.1, 0.05, 1.1, 0.3, -0.2, 0.1, 0.7]);
        check(
            &|t| orth_loss_with_iters(t, 60).item(),
            &a,
            &|t| orth_loss_with_iters(t, 60),
        );
    }

    #[test]
    fn adaptor_loss_pure_function() {
        let probs = Tensor::from_vec(vec![2], vec![0.6, 0.4]);
        let feats = Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let recon = Tensor::from_vec(vec![4], vec![0.2, 0.1, 0.4, 0.3]);
        let a = Tensor::from_vec(vec![2, 2], vec![0.9, 0.1, -0.1, 1.05]);
        let run = || {
            adaptor_loss(
                &probs,
                &recon,
                &feats,
                &a,
                LossWeights::default(),
                AblationMask::default(),
                EntropyKind::Bernoulli,
            )
            .item()
            .to_bits()
        };
        assert_eq!(run(), run());
    }
}
