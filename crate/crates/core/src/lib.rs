//! Linear probing of hidden representations for numeric entity attributes:
//! rank statistics, PLS probes, activation stores, cross-attribute
//! evaluation, few-shot distractor experiments and a synthetic generator
//! with known ground truth.

pub mod entity;
pub mod fewshot;
pub mod pls;
pub mod probe;
pub mod render;
pub mod report;
pub mod stats;
pub mod store;
pub mod synth;

pub use entity::{AttributeTable, EntityClass, Transform};
pub use pls::{fit_pls, FitReport, PlsModel};
pub use probe::{ModelSet, SelectionMode, SweepConfig, SweepGrid};
pub use report::{CellSource, CorrelationCell, CorrelationReport};
pub use stats::{partial_spearman, spearman, CorrelationValue, Stars};
pub use store::{ActivationStore, InMemoryLayers, LayerSource};
pub use synth::SynthSpec;
