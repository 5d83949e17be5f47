//! Joint training of a multi-label classifier on several partially labeled
//! domains: class- and task-weighted partial-label loss, per-category
//! adversarial feature alignment, and uncertainty-gated temporal ensembling
//! of predictions on unknown labels.

pub mod datagen;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;
