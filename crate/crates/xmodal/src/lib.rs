//! Cross-modal transfer for sequence classifiers.
//!
//! A target-modality classifier is trained against a frozen source-modality
//! classifier by aligning normalized attention signatures (KᵀV) alongside
//! the usual cross-entropy objective. Pairing is needed only at training
//! time; inference consumes the target sensor alone.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod datagen;
pub mod encoder;
pub mod losses;
pub mod rng;
pub mod training;
