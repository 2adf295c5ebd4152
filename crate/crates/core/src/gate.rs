//! Inverter-side acceptance gate: screen a newly communicated curve,
//! reject detected attacks, and apply the configured fallback.
//!
//! Malformed curves (ordering violations, out-of-window breakpoints)
//! never reach the classifier; the gate refuses them outright. Well-
//! formed curves are screened by the trained detector over the pre/post
//! measurement windows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::{assemble_features, ZetaConfig};
use crate::grid::NetworkModel;
use crate::mlp::MlpModel;
use crate::scenario::label_by_oscillation;
use crate::scenario::OracleConfig;
use crate::sim::{run_closed_loop, ClosedLoopConfig, SimTrace, Window};
use crate::vvc::{DroopCurve, InverterParams};

/// Gate outcome category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateDecision {
    Permit,
    Reject,
    Malformed,
}

impl fmt::Display for GateDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateDecision::Permit => write!(f, "permit"),
            GateDecision::Reject => write!(f, "reject"),
            GateDecision::Malformed => write!(f, "malformed"),
        }
    }
}

/// Configured response to a rejected curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPolicy {
    UnityPowerFactor,
    SelfIsolate,
    RevertLastStable,
    FlattenedBackup,
}

impl fmt::Display for FallbackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FallbackPolicy::UnityPowerFactor => "unity-power-factor",
            FallbackPolicy::SelfIsolate => "self-isolate",
            FallbackPolicy::RevertLastStable => "revert-last-stable",
            FallbackPolicy::FlattenedBackup => "flattened-backup",
        };
        write!(f, "{s}")
    }
}

impl FromStr for FallbackPolicy {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unity-power-factor" => Ok(FallbackPolicy::UnityPowerFactor),
            "self-isolate" => Ok(FallbackPolicy::SelfIsolate),
            "revert-last-stable" => Ok(FallbackPolicy::RevertLastStable),
            "flattened-backup" => Ok(FallbackPolicy::FlattenedBackup),
            other => Err(CoreError::Format(format!("unknown fallback policy {other:?}"))),
        }
    }
}

/// The gate's answer for one candidate curve.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionVerdict {
    pub decision: GateDecision,
    /// Detector probability; absent for malformed candidates that never
    /// reach the model.
    pub probability: Option<f64>,
    pub fallback_applied: Option<FallbackPolicy>,
}

/// Gate settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateConfig {
    pub threshold: f64,
    pub policy: FallbackPolicy,
    /// Wide-deadband backup installed by `flattened-backup`.
    pub backup_curve: DroopCurve,
    pub zeta: ZetaConfig,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            threshold: 0.5,
            policy: FallbackPolicy::RevertLastStable,
            backup_curve: DroopCurve::new(0.90, 0.99, 1.01, 1.10)
                .expect("backup curve is valid"),
            zeta: ZetaConfig::default(),
        }
    }
}

/// Screen a candidate curve given the measurement windows around its
/// provisional application. Malformed candidates are refused without
/// invoking the classifier.
pub fn gate(
    model: &MlpModel,
    old_curve: &DroopCurve,
    candidate: &str,
    pre: &Window,
    post: &Window,
    cfg: &GateConfig,
) -> Result<DetectionVerdict> {
    let new_curve = match candidate.parse::<DroopCurve>() {
        Ok(c) => c,
        Err(_) => {
            return Ok(DetectionVerdict {
                decision: GateDecision::Malformed,
                probability: None,
                fallback_applied: Some(cfg.policy),
            })
        }
    };
    gate_parsed(model, old_curve, &new_curve, pre, post, cfg)
}

/// Screen an already-validated curve.
pub fn gate_parsed(
    model: &MlpModel,
    old_curve: &DroopCurve,
    new_curve: &DroopCurve,
    pre: &Window,
    post: &Window,
    cfg: &GateConfig,
) -> Result<DetectionVerdict> {
    let features = assemble_features(pre, post, old_curve, new_curve, &cfg.zeta)?;
    let x = features.project(model.feature_mode);
    let probability = model.forward(&x)?;
    if probability >= cfg.threshold {
        Ok(DetectionVerdict {
            decision: GateDecision::Reject,
            probability: Some(probability),
            fallback_applied: Some(cfg.policy),
        })
    } else {
        Ok(DetectionVerdict {
            decision: GateDecision::Permit,
            probability: Some(probability),
            fallback_applied: None,
        })
    }
}

/// Inverter state after a gated update.
#[derive(Clone, Debug)]
pub struct GatedOutcome {
    pub verdict: DetectionVerdict,
    /// Curve in force after the decision.
    pub active_curve: DroopCurve,
    /// Inverter parameters after the decision (unity-power-factor zeroes
    /// the reactive budget).
    pub params: InverterParams,
    /// Set by the self-isolate policy.
    pub disconnected: bool,
    /// Oracle label of the observation run, when one was performed.
    pub observed_label: Option<u8>,
    pub trace: Option<SimTrace>,
}

/// Monitored-mode gate: provisionally apply the candidate in the closed
/// loop, observe the post-update window, decide, and roll back per
/// policy on rejection.
#[allow(clippy::too_many_arguments)]
pub fn gated_update(
    model: &MlpModel,
    network: &NetworkModel,
    dg: &str,
    params: &InverterParams,
    old_curve: &DroopCurve,
    candidate: &str,
    gate_cfg: &GateConfig,
    sim_cfg: &ClosedLoopConfig,
    oracle: &OracleConfig,
    pre_window_s: f64,
) -> Result<GatedOutcome> {
    let new_curve = match candidate.parse::<DroopCurve>() {
        Ok(c) => c,
        Err(_) => {
            return Ok(GatedOutcome {
                verdict: DetectionVerdict {
                    decision: GateDecision::Malformed,
                    probability: None,
                    fallback_applied: Some(gate_cfg.policy),
                },
                active_curve: *old_curve,
                params: *params,
                disconnected: false,
                observed_label: None,
                trace: None,
            });
        }
    };

    let trace = run_closed_loop(network, dg, params, old_curve, &new_curve, sim_cfg)?;
    let (pre, post) = trace.update_windows(pre_window_s, oracle.post_window_s)?;
    let verdict = gate_parsed(model, old_curve, &new_curve, &pre, &post, gate_cfg)?;
    let observed_label = Some(label_by_oscillation(&trace, oracle)?);

    let mut active_curve = new_curve;
    let mut out_params = *params;
    let mut disconnected = false;
    if verdict.decision == GateDecision::Reject {
        match gate_cfg.policy {
            FallbackPolicy::RevertLastStable => active_curve = *old_curve,
            FallbackPolicy::FlattenedBackup => active_curve = gate_cfg.backup_curve,
            FallbackPolicy::UnityPowerFactor => {
                // Whole rating to active power: zero reactive budget.
                active_curve = *old_curve;
                out_params.p_ref = out_params.s_max;
            }
            FallbackPolicy::SelfIsolate => {
                active_curve = *old_curve;
                disconnected = true;
            }
        }
    }
    Ok(GatedOutcome {
        verdict,
        active_curve,
        params: out_params,
        disconnected,
        observed_label,
        trace: Some(trace),
    })
}
