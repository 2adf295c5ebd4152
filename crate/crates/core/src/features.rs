//! Fixed-schema feature extraction from pre/post measurement windows.
//!
//! Each snapshot contributes 17 values: the active curve's four
//! breakpoints, three-phase current and voltage magnitudes, dq currents
//! and voltages, and the scaled voltage-deviation indicator per phase.
//! Pre and post snapshots concatenate to the 34-value vector the
//! detector consumes. A "predictive" projection keeps only the pre
//! measurements plus the new curve's breakpoints (17 values) for
//! pre-application screening.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::sim::Window;
use crate::vvc::DroopCurve;

/// Values per snapshot.
pub const SNAPSHOT_DIM: usize = 17;
/// Full (monitored-mode) feature dimension.
pub const FEATURE_DIM: usize = 2 * SNAPSHOT_DIM;
/// Predictive-mode dimension: pre measurements + new curve parameters.
pub const PREDICTIVE_DIM: usize = SNAPSHOT_DIM;

const SNAPSHOT_COLUMNS: [&str; SNAPSHOT_DIM] = [
    "va", "vb", "vc", "vd", "i1", "i2", "i3", "v1", "v2", "v3", "id", "iq", "vd_ax", "vq_ax",
    "zeta_v1", "zeta_v2", "zeta_v3",
];

/// Which slice of the schema a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Both snapshots: decide after observing the applied curve.
    Monitored,
    /// Pre measurements plus the candidate curve: decide before applying.
    Predictive,
}

impl FeatureMode {
    pub fn dim(&self) -> usize {
        match self {
            FeatureMode::Monitored => FEATURE_DIM,
            FeatureMode::Predictive => PREDICTIVE_DIM,
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureMode::Monitored => write!(f, "monitored"),
            FeatureMode::Predictive => write!(f, "predictive"),
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monitored" => Ok(FeatureMode::Monitored),
            "predictive" => Ok(FeatureMode::Predictive),
            other => Err(CoreError::Format(format!("unknown feature mode {other:?}"))),
        }
    }
}

/// Ordered column names for a mode.
pub fn feature_columns(mode: FeatureMode) -> Vec<String> {
    match mode {
        FeatureMode::Monitored => {
            let mut cols = Vec::with_capacity(FEATURE_DIM);
            for c in SNAPSHOT_COLUMNS {
                cols.push(format!("pre_{c}"));
            }
            for c in SNAPSHOT_COLUMNS {
                cols.push(format!("post_{c}"));
            }
            cols
        }
        FeatureMode::Predictive => {
            let mut cols = Vec::with_capacity(PREDICTIVE_DIM);
            for c in &SNAPSHOT_COLUMNS[..4] {
                cols.push(format!("new_{c}"));
            }
            for c in &SNAPSHOT_COLUMNS[4..] {
                cols.push(format!("pre_{c}"));
            }
            cols
        }
    }
}

/// Hash of the ordered column names; recorded in dataset manifests and
/// saved models so mismatched schemas are rejected at load time.
pub fn schema_hash(mode: FeatureMode) -> String {
    let mut hasher = Sha256::new();
    hasher.update(mode.to_string().as_bytes());
    hasher.update(b":");
    hasher.update(feature_columns(mode).join(",").as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Constants of the scaled voltage-deviation indicator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZetaConfig {
    pub v_nominal: f64,
    pub c: u32,
    pub p: u32,
}

impl Default for ZetaConfig {
    fn default() -> Self {
        ZetaConfig {
            v_nominal: 1.0,
            c: 100,
            p: 2,
        }
    }
}

/// Scaled voltage-deviation indicator: c * |v_pcc - v_n|^p.
pub fn zeta(v_pcc: f64, v_n: f64, c: u32, p: u32) -> f64 {
    (c as f64) * (v_pcc - v_n).abs().powi(p as i32)
}

/// Column selector for [`window_aggregate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowColumn {
    VMag,
    IMag,
    Vd,
    Vq,
    Id,
    Iq,
    ZetaV,
}

/// Mean of one measurement column over a window (the per-snapshot
/// aggregation rule for every feature).
pub fn window_aggregate(window: &Window, column: WindowColumn, zeta_cfg: &ZetaConfig) -> Result<f64> {
    if window.is_empty() {
        return Err(CoreError::Range("empty measurement window".into()));
    }
    let n = window.len() as f64;
    let sum: f64 = (0..window.len())
        .map(|i| {
            let row = &window.rows()[i];
            match column {
                WindowColumn::VMag => row.v_mag,
                WindowColumn::IMag => row.i_mag,
                WindowColumn::Vd => window.dq(i).0,
                WindowColumn::Vq => window.dq(i).1,
                WindowColumn::Id => window.dq(i).2,
                WindowColumn::Iq => window.dq(i).3,
                WindowColumn::ZetaV => zeta(row.v_mag, zeta_cfg.v_nominal, zeta_cfg.c, zeta_cfg.p),
            }
        })
        .sum();
    Ok(sum / n)
}

/// The 34-value detector input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Predictive-mode projection: new-curve breakpoints plus the pre
    /// snapshot's measurements.
    pub fn predictive(&self) -> [f64; PREDICTIVE_DIM] {
        let mut out = [0.0; PREDICTIVE_DIM];
        // New curve parameters live in the post snapshot's first four slots.
        out[..4].copy_from_slice(&self.0[SNAPSHOT_DIM..SNAPSHOT_DIM + 4]);
        out[4..].copy_from_slice(&self.0[4..SNAPSHOT_DIM]);
        out
    }

    pub fn project(&self, mode: FeatureMode) -> Vec<f64> {
        match mode {
            FeatureMode::Monitored => self.0.to_vec(),
            FeatureMode::Predictive => self.predictive().to_vec(),
        }
    }
}

fn snapshot(out: &mut [f64], curve: &DroopCurve, window: &Window, zeta_cfg: &ZetaConfig) -> Result<()> {
    let [va, vb, vc, vd] = curve.breakpoints();
    let i_mag = window_aggregate(window, WindowColumn::IMag, zeta_cfg)?;
    let v_mag = window_aggregate(window, WindowColumn::VMag, zeta_cfg)?;
    let id = window_aggregate(window, WindowColumn::Id, zeta_cfg)?;
    let iq = window_aggregate(window, WindowColumn::Iq, zeta_cfg)?;
    let vd_ax = window_aggregate(window, WindowColumn::Vd, zeta_cfg)?;
    let vq_ax = window_aggregate(window, WindowColumn::Vq, zeta_cfg)?;
    let z = window_aggregate(window, WindowColumn::ZetaV, zeta_cfg)?;
    let values = [
        va, vb, vc, vd, i_mag, i_mag, i_mag, v_mag, v_mag, v_mag, id, iq, vd_ax, vq_ax, z, z, z,
    ];
    out.copy_from_slice(&values);
    Ok(())
}

/// Build the full feature vector: pre snapshot under the old curve, post
/// snapshot under the new one.
pub fn assemble_features(
    pre: &Window,
    post: &Window,
    old_curve: &DroopCurve,
    new_curve: &DroopCurve,
    zeta_cfg: &ZetaConfig,
) -> Result<FeatureVector> {
    let mut out = [0.0; FEATURE_DIM];
    snapshot(&mut out[..SNAPSHOT_DIM], old_curve, pre, zeta_cfg)?;
    snapshot(&mut out[SNAPSHOT_DIM..], new_curve, post, zeta_cfg)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Schema("non-finite feature value".into()));
    }
    Ok(FeatureVector(out))
}
