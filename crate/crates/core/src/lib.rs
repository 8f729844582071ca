//! Change captioning for partially overlapping scene pairs.
//!
//! The pipeline: a synthetic grid-scene generator with known content
//! shifts ([`scenegen`]), a learned patch embedder ([`patchenc`]),
//! similarity-voting shift estimation and overlap masks ([`shiftvote`]),
//! region-aware encoding with per-region CLS tokens ([`dalt`]),
//! contrastive/HSIC context distillation into a change representation
//! ([`distill`]), cross-modal orientation calibration ([`hcm_occ`]), a
//! transformer caption decoder ([`captioner`]), the training loop and
//! gradient verification ([`trainer`]), and caption metrics ([`evalkit`]).

pub mod captioner;
pub mod dalt;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod hcm_occ;
pub mod model;
pub mod nn;
pub mod patchenc;
pub mod pgm;
pub mod scenegen;
pub mod shiftvote;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Ablation, Model, ModelConfig};
pub use scenegen::{GenConfig, PairRecord};
pub use shiftvote::VoteResult;
pub use trainer::{LossReport, TrainConfig};
