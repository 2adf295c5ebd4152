//! Network data model for a radial distribution feeder.
//!
//! A network is declared in physical units (`NetworkConfig`, loadable from
//! TOML), converted to per-unit on a common apparent-power base
//! (`PerUnitNetwork`), and compiled into an immutable solve tree
//! (`NetworkModel`) that the power-flow sweep and the closed-loop
//! simulator consume. The solve tree has one node per medium-voltage bus
//! plus one PCC node per DG (its inverter-side terminal behind the
//! interface transformer leakage) and the utility Thevenin node as root.

use std::collections::HashMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::powerflow::{self, Injection};

/// Bundled 9-bus benchmark network definition.
pub const BENCHMARK_TOML: &str = include_str!("benchmark.toml");

fn default_scale() -> f64 {
    1.0
}

/// Apparent-power and voltage bases for per-unit normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    pub s_base_mva: f64,
    pub v_base_mv_kv: f64,
    pub v_base_lv_kv: f64,
}

impl PerUnitBase {
    pub fn z_base_mv_ohm(&self) -> f64 {
        self.v_base_mv_kv * self.v_base_mv_kv / self.s_base_mva
    }

    fn validate(&self) -> Result<()> {
        if self.s_base_mva <= 0.0 || self.v_base_mv_kv <= 0.0 || self.v_base_lv_kv <= 0.0 {
            return Err(CoreError::Domain(
                "per-unit bases must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// One feeder segment, impedance given per km.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub from: String,
    pub to: String,
    pub r_ohm_per_km: f64,
    pub x_ohm_per_km: f64,
    pub length_km: f64,
}

/// Utility source reduced to its Thevenin equivalent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub short_circuit_mva: f64,
    pub x_over_r: f64,
    pub voltage_pu: f64,
}

impl SourceSpec {
    /// Thevenin impedance in pu on `s_base`: magnitude s_base / S_sc,
    /// split into R and X by the X/R ratio.
    pub fn impedance_pu(&self, s_base_mva: f64) -> Complex64 {
        let z_mag = s_base_mva / self.short_circuit_mva;
        let r = z_mag / (1.0 + self.x_over_r * self.x_over_r).sqrt();
        Complex64::new(r, r * self.x_over_r)
    }
}

/// Substation transformer, modeled as an ideal ratio device (per-unit
/// makes the ratio transparent; the source short-circuit level already
/// characterizes the upstream impedance).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub rating_mva: f64,
    pub hv_kv: f64,
    pub lv_kv: f64,
}

/// Constant-PQ load at a bus. `scale` is a scenario multiplier applied on
/// top of the base values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub bus: String,
    pub p_mw: f64,
    pub q_mvar: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

/// Inverter-interfaced DG and its interface transformer. `tr_x_pu` is the
/// leakage reactance on the transformer's own rating base; the DG's PCC
/// (where the inverter measures and injects) is the LV-side node behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgSpec {
    pub bus: String,
    pub s_max_mva: f64,
    pub tr_hv_kv: f64,
    pub tr_lv_kv: f64,
    pub tr_x_pu: f64,
}

/// Physical-unit network declaration; the TOML schema of network config
/// files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub base: PerUnitBase,
    pub source: SourceSpec,
    pub transformer: TransformerSpec,
    pub buses: Vec<String>,
    pub lines: Vec<LineSpec>,
    pub loads: Vec<LoadSpec>,
    pub dgs: Vec<DgSpec>,
}

impl NetworkConfig {
    /// The bundled 9-bus benchmark.
    pub fn benchmark() -> Self {
        toml::from_str(BENCHMARK_TOML).expect("bundled benchmark config is valid")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CoreError::Format(format!("network config: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Format(format!("network config: {e}")))
    }
}

/// Per-unit line segment (length retained so the physical form can be
/// recovered).
#[derive(Clone, Debug, PartialEq)]
pub struct PuLine {
    pub from: String,
    pub to: String,
    pub z: Complex64,
    pub length_km: f64,
}

/// Per-unit load; `p`/`q` are the unscaled base values.
#[derive(Clone, Debug, PartialEq)]
pub struct PuLoad {
    pub bus: String,
    pub p: f64,
    pub q: f64,
    pub scale: f64,
}

/// Per-unit DG entry; `tr_x` is on the system base.
#[derive(Clone, Debug, PartialEq)]
pub struct PuDg {
    pub bus: String,
    pub s_max: f64,
    pub tr_x: f64,
    pub tr_rating_mva: f64,
    pub tr_hv_kv: f64,
    pub tr_lv_kv: f64,
}

/// The whole network normalized onto the common s_base.
#[derive(Clone, Debug, PartialEq)]
pub struct PerUnitNetwork {
    pub base: PerUnitBase,
    pub source_z: Complex64,
    pub source_v: f64,
    pub transformer: TransformerSpec,
    pub buses: Vec<String>,
    pub lines: Vec<PuLine>,
    pub loads: Vec<PuLoad>,
    pub dgs: Vec<PuDg>,
}

/// Convert a physical network declaration to per-unit.
pub fn to_per_unit(cfg: &NetworkConfig) -> Result<PerUnitNetwork> {
    cfg.base.validate()?;
    if cfg.source.short_circuit_mva <= 0.0 || cfg.source.x_over_r <= 0.0 {
        return Err(CoreError::Domain(
            "source short-circuit level and X/R must be positive".into(),
        ));
    }
    let z_base = cfg.base.z_base_mv_ohm();
    let lines = cfg
        .lines
        .iter()
        .map(|l| {
            if l.length_km <= 0.0 {
                return Err(CoreError::Domain(format!(
                    "line {}-{} has non-positive length",
                    l.from, l.to
                )));
            }
            if l.r_ohm_per_km < 0.0 || l.x_ohm_per_km < 0.0 {
                return Err(CoreError::Domain(format!(
                    "line {}-{} has negative impedance",
                    l.from, l.to
                )));
            }
            Ok(PuLine {
                from: l.from.clone(),
                to: l.to.clone(),
                z: Complex64::new(l.r_ohm_per_km, l.x_ohm_per_km) * l.length_km / z_base,
                length_km: l.length_km,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let loads = cfg
        .loads
        .iter()
        .map(|l| {
            if l.p_mw < 0.0 {
                return Err(CoreError::Domain(format!(
                    "load at bus {} has negative active power",
                    l.bus
                )));
            }
            if l.scale <= 0.0 {
                return Err(CoreError::Domain(format!(
                    "load at bus {} has non-positive scale",
                    l.bus
                )));
            }
            Ok(PuLoad {
                bus: l.bus.clone(),
                p: l.p_mw / cfg.base.s_base_mva,
                q: l.q_mvar / cfg.base.s_base_mva,
                scale: l.scale,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dgs = cfg
        .dgs
        .iter()
        .map(|d| {
            if d.s_max_mva <= 0.0 {
                return Err(CoreError::Domain(format!(
                    "dg at bus {} has non-positive rating",
                    d.bus
                )));
            }
            Ok(PuDg {
                bus: d.bus.clone(),
                s_max: d.s_max_mva / cfg.base.s_base_mva,
                tr_x: d.tr_x_pu * cfg.base.s_base_mva / d.s_max_mva,
                tr_rating_mva: d.s_max_mva,
                tr_hv_kv: d.tr_hv_kv,
                tr_lv_kv: d.tr_lv_kv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerUnitNetwork {
        base: cfg.base,
        source_z: cfg.source.impedance_pu(cfg.base.s_base_mva),
        source_v: cfg.source.voltage_pu,
        transformer: cfg.transformer,
        buses: cfg.buses.clone(),
        lines,
        loads,
        dgs,
    })
}

/// Recover the physical declaration from a per-unit network. Inverse of
/// [`to_per_unit`] up to floating-point rounding.
pub fn from_per_unit(pu: &PerUnitNetwork) -> NetworkConfig {
    let z_base = pu.base.z_base_mv_ohm();
    let z_mag = pu.source_z.norm();
    NetworkConfig {
        base: pu.base,
        source: SourceSpec {
            short_circuit_mva: pu.base.s_base_mva / z_mag,
            x_over_r: pu.source_z.im / pu.source_z.re,
            voltage_pu: pu.source_v,
        },
        transformer: pu.transformer,
        buses: pu.buses.clone(),
        lines: pu
            .lines
            .iter()
            .map(|l| LineSpec {
                from: l.from.clone(),
                to: l.to.clone(),
                r_ohm_per_km: l.z.re * z_base / l.length_km,
                x_ohm_per_km: l.z.im * z_base / l.length_km,
                length_km: l.length_km,
            })
            .collect(),
        loads: pu
            .loads
            .iter()
            .map(|l| LoadSpec {
                bus: l.bus.clone(),
                p_mw: l.p * pu.base.s_base_mva,
                q_mvar: l.q * pu.base.s_base_mva,
                scale: l.scale,
            })
            .collect(),
        dgs: pu
            .dgs
            .iter()
            .map(|d| DgSpec {
                bus: d.bus.clone(),
                s_max_mva: d.s_max * pu.base.s_base_mva,
                tr_hv_kv: d.tr_hv_kv,
                tr_lv_kv: d.tr_lv_kv,
                tr_x_pu: d.tr_x * d.tr_rating_mva / pu.base.s_base_mva,
            })
            .collect(),
    }
}

/// DG entry in the compiled model.
#[derive(Clone, Debug)]
pub struct DgNode {
    /// MV bus the DG connects to.
    pub bus: String,
    /// Solve-tree index of the PCC node (inverter terminal).
    pub node: usize,
    /// Inverter rating, pu on s_base.
    pub s_max_pu: f64,
}

/// Immutable compiled network: a rooted tree ready for the sweep solver.
///
/// Node 0 is the utility Thevenin node (slack); MV buses follow in
/// declaration order; one PCC node per DG is appended (named
/// `pcc<bus>`). Branch `n` connects `parent[n]` to `n`.
#[derive(Clone, Debug)]
pub struct NetworkModel {
    config: NetworkConfig,
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<usize>,
    branch_z: Vec<Complex64>,
    order: Vec<usize>,
    load_s: Vec<Complex64>,
    dgs: Vec<DgNode>,
    source_v: f64,
}

impl NetworkModel {
    pub fn from_config(cfg: &NetworkConfig) -> Result<Self> {
        let pu = to_per_unit(cfg)?;
        Self::from_per_unit_network(cfg.clone(), &pu)
    }

    /// The bundled 9-bus benchmark with its base (uncalibrated) loads.
    pub fn benchmark() -> Self {
        Self::from_config(&NetworkConfig::benchmark()).expect("bundled benchmark config is valid")
    }

    fn from_per_unit_network(config: NetworkConfig, pu: &PerUnitNetwork) -> Result<Self> {
        if pu.buses.is_empty() {
            return Err(CoreError::Topology("network has no buses".into()));
        }
        if pu.lines.len() + 1 != pu.buses.len() {
            return Err(CoreError::Topology(format!(
                "radial network needs exactly {} lines for {} buses, got {}",
                pu.buses.len() - 1,
                pu.buses.len(),
                pu.lines.len()
            )));
        }

        let mut names: Vec<String> = Vec::with_capacity(1 + pu.buses.len() + pu.dgs.len());
        names.push("source".to_string());
        names.extend(pu.buses.iter().cloned());
        let mut index: HashMap<String, usize> = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(CoreError::Topology(format!("duplicate bus id {n}")));
            }
        }

        // Adjacency over MV buses only.
        let mut adj: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); names.len()];
        for l in &pu.lines {
            let a = *index
                .get(&l.from)
                .ok_or_else(|| CoreError::Reference(format!("line endpoint {}", l.from)))?;
            let b = *index
                .get(&l.to)
                .ok_or_else(|| CoreError::Reference(format!("line endpoint {}", l.to)))?;
            if a == b {
                return Err(CoreError::Topology(format!("line {}-{} is a self-loop", l.from, l.to)));
            }
            adj[a].push((b, l.z));
            adj[b].push((a, l.z));
        }
        // Utility branch feeds the first declared bus (the substation bus).
        let substation = index[&pu.buses[0]];
        adj[0].push((substation, pu.source_z));
        adj[substation].push((0, pu.source_z));

        // Root the tree at the source node with a BFS.
        let mut parent = vec![usize::MAX; names.len()];
        let mut branch_z = vec![Complex64::new(0.0, 0.0); names.len()];
        let mut order = Vec::with_capacity(names.len());
        parent[0] = 0;
        order.push(0);
        let mut head = 0;
        while head < order.len() {
            let n = order[head];
            head += 1;
            for &(m, z) in &adj[n] {
                if parent[m] == usize::MAX {
                    parent[m] = n;
                    branch_z[m] = z;
                    order.push(m);
                }
            }
        }
        if order.len() != names.len() {
            let missing: Vec<&str> = names
                .iter()
                .enumerate()
                .filter(|(i, _)| parent[*i] == usize::MAX)
                .map(|(_, n)| n.as_str())
                .collect();
            return Err(CoreError::Topology(format!(
                "network is disconnected; unreachable buses: {}",
                missing.join(", ")
            )));
        }

        // Append PCC nodes behind the interface transformers.
        let mut dgs = Vec::with_capacity(pu.dgs.len());
        for d in &pu.dgs {
            let mv = *index
                .get(&d.bus)
                .ok_or_else(|| CoreError::Reference(format!("dg bus {}", d.bus)))?;
            let node = names.len();
            let pcc_name = format!("pcc{}", d.bus);
            if index.insert(pcc_name.clone(), node).is_some() {
                return Err(CoreError::Topology(format!("duplicate dg at bus {}", d.bus)));
            }
            names.push(pcc_name);
            parent.push(mv);
            branch_z.push(Complex64::new(0.0, d.tr_x));
            order.push(node);
            dgs.push(DgNode {
                bus: d.bus.clone(),
                node,
                s_max_pu: d.s_max,
            });
        }

        let mut load_s = vec![Complex64::new(0.0, 0.0); names.len()];
        for l in &pu.loads {
            let n = *index
                .get(&l.bus)
                .ok_or_else(|| CoreError::Reference(format!("load bus {}", l.bus)))?;
            load_s[n] += Complex64::new(l.p, l.q) * l.scale;
        }

        Ok(NetworkModel {
            config,
            names,
            index,
            parent,
            branch_z,
            order,
            load_s,
            dgs,
            source_v: pu.source_v,
        })
    }

    /// Physical declaration this model was compiled from.
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// New model with every load's scale multiplied by `scale`.
    pub fn with_load_scale(&self, scale: f64) -> Result<NetworkModel> {
        if scale <= 0.0 || !scale.is_finite() {
            return Err(CoreError::Domain(format!("load scale {scale} must be positive")));
        }
        let mut cfg = self.config.clone();
        for l in &mut cfg.loads {
            l.scale *= scale;
        }
        Self::from_config(&cfg)
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn node_index(&self, bus: &str) -> Result<usize> {
        self.index
            .get(bus)
            .copied()
            .ok_or_else(|| CoreError::Reference(bus.to_string()))
    }

    pub fn node_name(&self, node: usize) -> &str {
        &self.names[node]
    }

    pub fn parent(&self, node: usize) -> usize {
        self.parent[node]
    }

    pub fn branch_impedance(&self, node: usize) -> Complex64 {
        self.branch_z[node]
    }

    /// Nodes in root-first breadth-first order.
    pub fn sweep_order(&self) -> &[usize] {
        &self.order
    }

    /// Effective (scale-applied) load at each node, pu, consumption positive.
    pub fn loads_pu(&self) -> &[Complex64] {
        &self.load_s
    }

    pub fn source_voltage(&self) -> f64 {
        self.source_v
    }

    pub fn dgs(&self) -> &[DgNode] {
        &self.dgs
    }

    pub fn dg(&self, bus: &str) -> Result<&DgNode> {
        self.dgs
            .iter()
            .find(|d| d.bus == bus)
            .ok_or_else(|| CoreError::Reference(format!("no dg at bus {bus}")))
    }

    /// Driving-point Thevenin impedance at a bus: the series impedance of
    /// the path back to the utility node. For small injections,
    /// d|v|/dQ at the bus is approximately the imaginary part.
    pub fn thevenin_sensitivity(&self, bus: &str) -> Result<Complex64> {
        let mut n = self.node_index(bus)?;
        let mut z = Complex64::new(0.0, 0.0);
        while n != 0 {
            z += self.branch_z[n];
            n = self.parent[n];
        }
        Ok(z)
    }
}

/// Scale the model's loads so the no-attack PCC voltage of `dg_bus`
/// (all DGs injecting `p_ref_pu`, zero reactive power) hits `target_v`.
///
/// Returns the scale and the calibrated model. Bisection over the scale;
/// the PCC voltage is monotone decreasing in load.
pub fn calibrate_load_scale(
    model: &NetworkModel,
    dg_bus: &str,
    p_ref_pu: f64,
    target_v: f64,
    tol_v: f64,
) -> Result<(f64, NetworkModel)> {
    let pcc_v = |m: &NetworkModel| -> Result<f64> {
        let inj: Vec<Injection> = m
            .dgs()
            .iter()
            .map(|d| Injection {
                bus: m.node_name(d.node).to_string(),
                p: p_ref_pu,
                q: 0.0,
            })
            .collect();
        let sol = powerflow::solve(m, &inj, 1e-10, 80)?;
        let node = m.dg(dg_bus)?.node;
        Ok(sol.magnitude(node))
    };

    let mut lo = 1e-6;
    let mut hi = 4.0;
    let v_lo = pcc_v(&model.with_load_scale(lo)?)?;
    let v_hi = pcc_v(&model.with_load_scale(hi)?)?;
    if target_v > v_lo || target_v < v_hi {
        return Err(CoreError::Domain(format!(
            "calibration target {target_v} outside reachable range [{v_hi:.4}, {v_lo:.4}]"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let m = model.with_load_scale(mid)?;
        let v = pcc_v(&m)?;
        if (v - target_v).abs() < tol_v {
            return Ok((mid, m));
        }
        if v > target_v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(CoreError::Domain(format!(
        "calibration did not reach {target_v} within tolerance {tol_v}"
    )))
}
