//! Self-domain adaptation at desk scale: a meta-learned residual adaptor
//! for binary classification under domain shift, optimized unsupervisedly
//! on the target domain at inference, with a full HTER/AUC evaluation and
//! ablation harness on synthetic multi-domain data.

pub mod autodiff;
pub mod datagen;
pub mod eval;
pub mod losses;
pub mod metatrain;
pub mod model;
pub mod nn;
pub mod ttadapt;

pub use autodiff::{backward, finite_diff, GradMode, Tape, Tensor};
