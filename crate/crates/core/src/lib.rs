//! Simulation and detection toolkit for smart-inverter Volt-VAr control
//! (VVC) setpoint security studies.
//!
//! The crate models a radial medium-voltage feeder with inverter-based
//! distributed generators, runs the discrete-time VVC droop loop against a
//! backward/forward-sweep power flow, generates labeled datasets of
//! legitimate and destabilizing droop-curve updates, and trains a
//! multilayer-perceptron detector that accepts or rejects newly
//! communicated curves at the inverter.
//!
//! Module map:
//! - [`grid`]: network data model, the bundled 9-bus benchmark, per-unit
//!   conversion, Thevenin path impedances, load calibration.
//! - [`powerflow`]: backward/forward sweep solver for radial networks.
//! - [`vvc`]: droop curves, reactive-power limits, slope diagnostics.
//! - [`sim`]: the closed control loop and trace recording/export.
//! - [`scenario`]: attack construction, oscillation labeling, dataset
//!   generation.
//! - [`features`]: measurement-window feature extraction (including the
//!   scaled voltage-deviation indicator).
//! - [`mlp`]: the feedforward classifier, backpropagation training,
//!   k-fold cross-validation, random hyperparameter search.
//! - [`eval`]: confusion counts and classification metrics.
//! - [`gate`]: the inverter-side accept/reject decision and fallback
//!   policies.

pub mod error;
pub mod eval;
pub mod features;
pub mod gate;
pub mod grid;
pub mod mlp;
pub mod powerflow;
pub mod scenario;
pub mod sim;
pub mod vvc;

pub use error::CoreError;
pub use eval::{confusion, metrics, ConfusionCounts, MetricsReport};
pub use features::{FeatureMode, FeatureVector, ZetaConfig, FEATURE_DIM};
pub use gate::{DetectionVerdict, FallbackPolicy, GateDecision};
pub use grid::{
    LineSpec, LoadSpec, NetworkConfig, NetworkModel, PerUnitBase, SourceSpec, TransformerSpec,
};
pub use mlp::{FoldProtocol, MlpModel, MlpSpec, SearchSpace, TrainConfig};
pub use powerflow::{BusVoltages, Injection};
pub use scenario::{AttackDescriptor, AttackKind, Dataset, DatasetConfig, Scenario};
pub use sim::{ClosedLoopConfig, SimTrace, Window};
pub use vvc::{DroopCurve, InverterParams};
