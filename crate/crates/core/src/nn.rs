//! Parameter groups, initialization, and the two optimizers: the plain
//! gradient step used inside meta-training inner updates (differentiable,
//! stays on the tape) and the Adam outer optimizer.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Tape, Tensor};

/// The five parameter groups: feature extractor, classifier, depth
/// estimator, autoencoder, adaptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupName {
    F,
    C,
    D,
    R,
    A,
}

impl std::fmt::Display for GroupName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GroupName::F => "F",
            GroupName::C => "C",
            GroupName::D => "D",
            GroupName::R => "R",
            GroupName::A => "A",
        };
        f.write_str(s)
    }
}

/// One named group of parameter tensors with a trainability flag.
#[derive(Clone)]
pub struct ParamGroup {
    pub name: GroupName,
    pub tensors: Vec<(String, Tensor)>,
    pub trainable: bool,
}

impl ParamGroup {
    pub fn new(name: GroupName, tensors: Vec<(String, Tensor)>) -> Self {
        let mut seen = std::collections::HashSet::new();
        for (n, _) in &tensors {
            assert!(seen.insert(n.clone()), "duplicate parameter name {n} in group {name}");
        }
        ParamGroup {
            name,
            tensors,
            trainable: true,
        }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("group {} has no parameter {name}", self.name))
            .1
    }

    pub fn values(&self) -> Vec<&Tensor> {
        self.tensors.iter().map(|(_, t)| t).collect()
    }

    /// Re-create every tensor as a leaf of `tape`, preserving values.
    pub fn attach(&self, tape: &Tape) -> ParamGroup {
        ParamGroup {
            name: self.name,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(&t.detach())))
                .collect(),
            trainable: self.trainable,
        }
    }

    /// Detached copy (values only, off any tape).
    pub fn detach(&self) -> ParamGroup {
        ParamGroup {
            name: self.name,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.detach()))
                .collect(),
            trainable: self.trainable,
        }
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> ParamGroup {
        assert_eq!(tensors.len(), self.tensors.len());
        ParamGroup {
            name: self.name,
            tensors: self
                .tensors
                .iter()
                .zip(tensors)
                .map(|((n, _), t)| (n.clone(), t))
                .collect(),
            trainable: self.trainable,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Training hyperparameters with the published defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Inner (and inference-time) learning rate.
    pub alpha: f64,
    /// Outer (meta) learning rate.
    pub beta: f64,
    /// Weight on the reconstruction term of the adaptor loss.
    pub lambda: f64,
    /// Weight on the orthogonality term of the adaptor loss.
    pub mu: f64,
    pub batch_per_domain: usize,
    pub adapt_epochs: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 1e-3,
            beta: 1e-3,
            lambda: 0.1,
            mu: 10.0,
            batch_per_domain: 20,
            adapt_epochs: 1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), String> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err("learning rates alpha and beta must be positive".into());
        }
        if self.lambda < 0.0 || self.mu < 0.0 {
            return Err("loss weights lambda and mu must be non-negative".into());
        }
        if self.batch_per_domain < 2 {
            return Err("batch_per_domain must be at least 2".into());
        }
        if self.adapt_epochs < 1 {
            return Err("adapt_epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// One plain gradient step `θ − lr·∇`, expressed in recorded ops so that
/// differentiating through the step works when the gradients are on a tape.
pub fn sgd_step(params: &[&Tensor], grads: &[Tensor], lr: f64) -> Vec<Tensor> {
    assert_eq!(params.len(), grads.len(), "sgd_step: {} params, {} grads", params.len(), grads.len());
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            assert_eq!(p.shape(), g.shape(), "sgd_step: shape mismatch {:?} vs {:?}", p.shape(), g.shape());
            ops::sub(p, &ops::scale(g, lr))
        })
        .collect()
}

/// Adam accumulator state for one parameter group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect(),
            v: shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect(),
        }
    }

    pub fn for_group(lr: f64, group: &ParamGroup) -> Self {
        let shapes: Vec<&[usize]> = group.tensors.iter().map(|(_, t)| t.shape()).collect();
        Self::new(lr, &shapes)
    }
}

/// Standard Adam update with bias correction; returns detached tensors.
pub fn adam_step(state: &mut AdamState, params: &[&Tensor], grads: &[Tensor]) -> Vec<Tensor> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(
        params.len(),
        state.m.len(),
        "adam_step: state initialized for {} tensors, got {}",
        state.m.len(),
        params.len()
    );
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    params
        .iter()
        .zip(grads)
        .enumerate()
        .map(|(i, (p, g))| {
            assert_eq!(p.shape(), g.shape(), "adam_step: shape mismatch");
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            let mut out = p.data().to_vec();
            for (j, (&gv, slot)) in g.data().iter().zip(out.iter_mut()).enumerate() {
                m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gv;
                v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *slot -= state.lr * mhat / (vhat.sqrt() + state.eps);
            }
            Tensor::from_vec(p.shape().to_vec(), out)
        })
        .collect()
}

/// Scaled-uniform fan-in initialization: U(−1/√fan_in, 1/√fan_in).
pub fn init_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, finite_diff, GradMode};

    #[test]
    fn sgd_step_arithmetic() {
        let p = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        assert_eq!(sgd_step(&[&p], &[g.clone()], 0.5)[0].item(), 0.0);
        assert_eq!(sgd_step(&[&p], &[g], 0.0)[0].item(), 1.0);
    }

    #[test]
    fn sgd_step_matches_elementwise_oracle() {
        let p = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]);
        let g = Tensor::from_vec(vec![3], vec![0.1, 0.2, -0.3]);
        let out = sgd_step(&[&p], &[g.clone()], 0.7);
        for i in 0..3 {
            let want = p.data()[i] - 0.7 * g.data()[i];
            assert!((out[0].data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_step_is_differentiable_through_the_update() {
        // θ' = θ − α ∇(θ²) = (1 − 2α)θ; check dθ'/dθ against finite differences.
        let alpha = 0.3;
        let eval = |theta: &Tensor| -> f64 {
            let tape = Tape::new();
            let th = tape.leaf(theta);
            let loss = ops::mul(&th, &th);
            let g = backward(&loss, &[&th], GradMode::SecondOrder).unwrap();
            sgd_step(&[&th], &[g[0].clone()], alpha)[0].item()
        };
        let tape = Tape::new();
        let th = tape.leaf(&Tensor::scalar(1.5));
        let loss = ops::mul(&th, &th);
        let g = backward(&loss, &[&th], GradMode::SecondOrder).unwrap();
        let updated = sgd_step(&[&th], &[g[0].clone()], alpha);
        let d = backward(&updated[0], &[&th], GradMode::FirstOrder).unwrap()[0].item();
        let fd = finite_diff(|t| eval(t), &Tensor::scalar(1.5), 1e-5).item();
        assert!((d - fd).abs() / fd.abs() < 1e-3, "{d} vs {fd}");
        assert!((d - (1.0 - 2.0 * alpha)).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let p = Tensor::from_vec(vec![2], vec![3.0, -4.0]);
        let mut state = AdamState::new(1e-3, &[p.shape()]);
        let out = adam_step(&mut state, &[&p], &[Tensor::zeros(vec![2])]);
        assert_eq!(out[0].data(), p.data());
    }

    #[test]
    fn adam_first_step_matches_hand_oracle() {
        // Step 1 with gradient g: update = −lr·g/(|g| + ε) after bias correction.
        let lr = 1e-3;
        let p = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let g = Tensor::from_vec(vec![2], vec![0.4, -0.02]);
        let mut state = AdamState::new(lr, &[p.shape()]);
        let out = adam_step(&mut state, &[&p], &[g.clone()]);
        for i in 0..2 {
            let gv: f64 = g.data()[i];
            let want = p.data()[i] - lr * gv / (gv.abs() + state.eps);
            assert!((out[0].data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_constant_gradient_update_magnitude_approaches_lr() {
        let lr = 1e-3;
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(0.37);
        let mut state = AdamState::new(lr, &[p.shape()]);
        let mut last_delta = 0.0;
        for _ in 0..10_000 {
            let next = adam_step(&mut state, &[&p], &[g.clone()]);
            last_delta = (next[0].item() - p.item()).abs();
            p = next.into_iter().next().unwrap();
        }
        assert!((last_delta - lr).abs() / lr < 0.01, "delta {last_delta}");
    }

    #[test]
    fn adam_stays_finite_for_finite_inputs() {
        let mut rng = seeded_rng(5);
        for _ in 0..20 {
            let p = init_uniform(vec![4, 3], 3, &mut rng);
            let g = init_uniform(vec![4, 3], 1, &mut rng);
            let mut state = AdamState::new(1e-3, &[p.shape()]);
            let out = adam_step(&mut state, &[&p], &[ops::scale(&g, 1e9).detach()]);
            assert!(out[0].all_finite());
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_uniform(vec![5, 5], 5, &mut seeded_rng(42));
        let b = init_uniform(vec![5, 5], 5, &mut seeded_rng(42));
        let c = init_uniform(vec![5, 5], 5, &mut seeded_rng(43));
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn hyperparam_defaults_and_validation() {
        let h = Hyperparams::default();
        assert_eq!(h.alpha, 1e-3);
        assert_eq!(h.beta, 1e-3);
        assert_eq!(h.lambda, 0.1);
        assert_eq!(h.mu, 10.0);
        assert_eq!(h.batch_per_domain, 20);
        assert_eq!(h.adapt_epochs, 1);
        assert!(h.validate().is_ok());
        assert!(Hyperparams { alpha: 0.0, ..h.clone() }.validate().is_err());
        assert!(Hyperparams { batch_per_domain: 1, ..h }.validate().is_err());
    }
}
