//! Curve-update scenario generation, oscillation labeling, and dataset
//! assembly.
//!
//! A scenario is one closed-loop run: a stabilizing curve operates, a new
//! curve arrives mid-run, and the oscillation oracle decides the label
//! from the recorded trace. Attack construction spans setpoint shifts,
//! segment steepening, chord-preserving interior manipulation, and
//! orientation flips; labels always come from the oracle, never from the
//! attacker's intent, so a stabilizing "attack" lands in the legitimate
//! class.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::features::{
    assemble_features, feature_columns, schema_hash, FeatureMode, FeatureVector, ZetaConfig,
    FEATURE_DIM,
};
use crate::grid::{calibrate_load_scale, NetworkModel};
use crate::powerflow::{self, Injection};
use crate::sim::{run_closed_loop, ClosedLoopConfig, SimTrace};
use crate::vvc::{DroopCurve, InverterParams};

/// Attack families. `None` marks sampler-drawn legitimate updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Shift,
    Steepen,
    StealthChord,
    Invert,
    None,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttackKind::Shift => "shift",
            AttackKind::Steepen => "steepen",
            AttackKind::StealthChord => "stealth-chord",
            AttackKind::Invert => "invert",
            AttackKind::None => "none",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for AttackKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shift" => Ok(AttackKind::Shift),
            "steepen" => Ok(AttackKind::Steepen),
            "stealth-chord" => Ok(AttackKind::StealthChord),
            "invert" => Ok(AttackKind::Invert),
            "none" => Ok(AttackKind::None),
            other => Err(CoreError::Format(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// How a new curve was derived from the operating one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackDescriptor {
    pub kind: AttackKind,
    /// Setpoint offset vector (zero except for shift and interior moves).
    pub alpha: [f64; 4],
    /// Target segment slopes, pu/pu (steepen attacks).
    pub target_slopes: Option<(f64, f64)>,
    /// Per-candidate derived seed.
    pub seed: u64,
}

impl AttackDescriptor {
    pub fn none(seed: u64) -> Self {
        AttackDescriptor {
            kind: AttackKind::None,
            alpha: [0.0; 4],
            target_slopes: None,
            seed,
        }
    }
}

/// Apply an attack to the operating curve. The result is re-validated; a
/// degenerate outcome is an attack-construction error and the caller
/// redraws.
pub fn apply_attack(pre: &DroopCurve, attack: &AttackDescriptor) -> Result<DroopCurve> {
    match attack.kind {
        AttackKind::None => Ok(*pre),
        AttackKind::Shift => pre.shifted(attack.alpha),
        AttackKind::Invert => Ok(pre.flipped()),
        AttackKind::Steepen | AttackKind::StealthChord => {
            if attack.alpha[0] != 0.0 || attack.alpha[3] != 0.0 {
                return Err(CoreError::MalformedCurve(
                    "interior attacks must leave va and vd untouched".into(),
                ));
            }
            pre.with_interior(pre.vb() + attack.alpha[1], pre.vc() + attack.alpha[2])
        }
    }
}

/// Oscillation-oracle thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Peak-to-peak threshold over the evaluation tail, pu.
    pub eps_osc: f64,
    /// Evaluation tail length, s.
    pub tail_s: f64,
    /// Non-decay requirement: last-half p2p over previous-half p2p.
    pub decay_ratio: f64,
    /// Post-update observation span, s.
    pub post_window_s: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            eps_osc: 0.002,
            tail_s: 2.0,
            decay_ratio: 0.8,
            post_window_s: 10.0,
        }
    }
}

fn peak_to_peak(rows: &[crate::sim::TraceRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let mut hi = f64::MIN;
    let mut lo = f64::MAX;
    for r in rows {
        hi = hi.max(r.v_mag);
        lo = lo.min(r.v_mag);
    }
    hi - lo
}

/// Label a trace: 1 when the post-update voltage exhibits a sustained
/// (non-decaying, above-threshold) oscillation over the final stretch of
/// the observation window, else 0.
pub fn label_by_oscillation(trace: &SimTrace, cfg: &OracleConfig) -> Result<u8> {
    let t0 = trace.attack_time();
    let t_end = (t0 + cfg.post_window_s).min(trace.end_time());
    if t_end - t0 < cfg.tail_s {
        return Err(CoreError::Range(format!(
            "trace covers only {:.2} s after the update; need {}",
            t_end - t0,
            cfg.tail_s
        )));
    }
    let tail: Vec<_> = trace
        .rows()
        .iter()
        .copied()
        .filter(|r| r.t > t_end - cfg.tail_s && r.t <= t_end)
        .collect();
    let half = cfg.tail_s / 2.0;
    let (last_half, prev_half): (Vec<_>, Vec<_>) =
        tail.iter().copied().partition(|r| r.t > t_end - half);
    let pp_tail = peak_to_peak(&tail);
    let pp_prev = peak_to_peak(&prev_half);
    let pp_last = peak_to_peak(&last_half);
    let sustained = pp_tail > cfg.eps_osc && pp_last >= cfg.decay_ratio * pp_prev;
    Ok(u8::from(sustained))
}

/// Spec-form stability gain: |local droop slope at `operating_v`| times
/// the PCC Thevenin reactance. Below 1 the delayed discrete loop
/// contracts, above 1 it folds into a limit cycle.
///
/// For inverted curves the local slope is not predictive (the flipped map
/// is increasing and almost always has a reachable rest point), so the
/// check enumerates the piecewise rest-point candidates from
/// `operating_v` taken as the zero-response voltage, and reports the rest
/// gain (sub-unity) when one exists, else the worst segment gain.
pub fn analytic_stability_check(
    model: &NetworkModel,
    dg: &str,
    curve: &DroopCurve,
    operating_v: f64,
    params: &InverterParams,
) -> Result<f64> {
    let node = model.dg(dg)?.node;
    let x = model.thevenin_sensitivity(model.node_name(node))?.im;
    let q_max = params.q_max()?;
    if !curve.is_inverted() {
        return Ok(curve.slope_at(operating_v, q_max).abs() * x);
    }

    let v0 = operating_v;
    let (va, vb, vc, vd) = (curve.va(), curve.vb(), curve.vc(), curve.vd());
    let mut rest_gains: Vec<f64> = Vec::new();
    if v0 - x * q_max < va {
        rest_gains.push(0.0); // absorbing saturation
    }
    if v0 + x * q_max >= vd {
        rest_gains.push(0.0); // injecting saturation
    }
    if (vb..vc).contains(&v0) {
        rest_gains.push(0.0); // dead band
    }
    for (lo, hi, anchor) in [(va, vb, vb), (vc, vd, vc)] {
        let s = q_max / (hi - lo);
        let xs = x * s;
        if xs < 1.0 {
            let v_star = (v0 - xs * anchor) / (1.0 - xs);
            if (lo..hi).contains(&v_star) {
                rest_gains.push(xs);
            }
        }
    }
    match rest_gains
        .iter()
        .copied()
        .min_by(|a, b| a.partial_cmp(b).unwrap())
    {
        Some(g) => Ok(g),
        None => {
            let (s1, s2) = curve.segment_slopes(q_max);
            Ok(s1.abs().max(s2.abs()) * x)
        }
    }
}

/// Unique fixed point of the standard-orientation closed-loop map
/// v -> v0 + x * q(v) (continuous and non-increasing), by bisection.
pub fn fixed_point(curve: &DroopCurve, v0: f64, x: f64, q_max: f64) -> f64 {
    let f = |v: f64| v0 + x * curve.q_ref(v, q_max) - v;
    let mut lo = 0.5;
    let mut hi = 1.5;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Analytic loop gain of a curve at its own closed-loop operating point,
/// derived from the zero-response voltage `v0`.
pub fn loop_gain(
    model: &NetworkModel,
    dg: &str,
    curve: &DroopCurve,
    params: &InverterParams,
    v0: f64,
) -> Result<f64> {
    if curve.is_inverted() {
        return analytic_stability_check(model, dg, curve, v0, params);
    }
    let node = model.dg(dg)?.node;
    let x = model.thevenin_sensitivity(model.node_name(node))?.im;
    let q_max = params.q_max()?;
    let fp = fixed_point(curve, v0, x, q_max);
    analytic_stability_check(model, dg, curve, fp, params)
}

/// Draw a stabilizing curve: breakpoints inside the declared ranges,
/// minimum segment and dead-band widths, and analytic loop gain at the
/// operating condition within `margin`.
pub fn sample_legitimate_curve(
    rng: &mut ChaCha8Rng,
    margin: f64,
    x_pcc: f64,
    q_max: f64,
    v0: f64,
) -> Result<DroopCurve> {
    if margin <= 0.0 || margin >= 1.0 {
        return Err(CoreError::Domain(format!("margin {margin} outside (0, 1)")));
    }
    for _ in 0..10_000 {
        let va = rng.gen_range(0.90..=0.97);
        let vd = rng.gen_range(1.03..=1.10);
        let vb = rng.gen_range(va + 0.02..vd - 0.03);
        let vc = rng.gen_range(vb + 0.01..vd - 0.02);
        let Ok(curve) = DroopCurve::new(va, vb, vc, vd) else {
            continue;
        };
        let fp = fixed_point(&curve, v0, x_pcc, q_max);
        let g = curve.slope_at(fp, q_max).abs() * x_pcc;
        if g <= margin {
            return Ok(curve);
        }
    }
    Err(CoreError::Sampling(format!(
        "no stabilizing curve within margin {margin} after 10000 draws"
    )))
}

/// Train/test membership, fixed at generation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One labeled curve-update scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub id: u64,
    pub load_scale: f64,
    pub dg: String,
    pub old_curve: DroopCurve,
    pub new_curve: DroopCurve,
    pub attack: AttackDescriptor,
    /// Oracle label: 1 = results in sustained oscillation.
    pub label: u8,
    /// Analytic loop gain of the new curve at its operating point.
    pub gain: f64,
    pub features: FeatureVector,
    pub split: Split,
}

/// Generator settings; hashed (seed excluded) into the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_legitimate: usize,
    pub n_malicious: usize,
    pub seed: u64,
    pub dg: String,
    pub load_scale_range: (f64, f64),
    pub legit_margin: f64,
    /// Candidate budget per requested scenario.
    pub draw_budget_factor: usize,
    /// Fraction of the legitimate quota fillable by stabilizing attack
    /// draws.
    pub attack_spill_cap: f64,
    /// Orientation-flip scenarios to include. Flips preserve slope
    /// magnitudes, so a curve that was stable in operation stays
    /// non-oscillatory after flipping and these land in the legitimate
    /// class.
    pub invert_fraction: f64,
    /// Targeted attack draws aim for at least this analytic gain, and
    /// accepted malicious rows must reach it; keeps the classes
    /// separated by the same boundary band the oracle itself cannot
    /// resolve.
    pub malicious_gain_min: f64,
    /// Stabilizing attack draws may spill into the legitimate class
    /// only below this analytic gain.
    pub spill_gain_max: f64,
    pub test_fraction: f64,
    pub calibration_target_v: f64,
    pub pre_window_s: f64,
    pub params: InverterParams,
    pub oracle: OracleConfig,
    pub zeta: ZetaConfig,
    pub attack_time_s: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_legitimate: 2000,
            n_malicious: 2000,
            seed: 7,
            dg: "4".into(),
            load_scale_range: (0.6, 1.3),
            legit_margin: 0.7,
            draw_budget_factor: 60,
            attack_spill_cap: 0.3,
            invert_fraction: 0.05,
            malicious_gain_min: 1.25,
            spill_gain_max: 0.8,
            test_fraction: 0.2,
            calibration_target_v: 1.011,
            pre_window_s: 2.0,
            params: InverterParams {
                s_max: 0.1,
                p_ref: 0.02,
                tau: 0.1,
                dt: 0.1,
            },
            oracle: OracleConfig::default(),
            zeta: ZetaConfig::default(),
            attack_time_s: 3.0,
        }
    }
}

impl DatasetConfig {
    pub fn sim_config(&self, seed: u64) -> ClosedLoopConfig {
        ClosedLoopConfig {
            duration_s: self.attack_time_s + self.oracle.post_window_s + self.params.dt,
            dt_s: self.params.dt,
            attack_time_s: self.attack_time_s,
            record_pre_s: self.attack_time_s,
            seed,
            noise_pu: 0.0,
        }
    }

    pub fn config_hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.seed = 0;
        let text = toml::to_string(&hashed).unwrap_or_default();
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Reproducibility record stored next to the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_legitimate: usize,
    pub n_malicious: usize,
    pub calibrated_scale: f64,
    pub schema_hash: String,
    pub config_hash: String,
    pub kind_counts_malicious: BTreeMap<String, usize>,
    pub kind_counts_legitimate: BTreeMap<String, usize>,
}

/// Generated scenarios plus their manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenarios: Vec<Scenario>,
    pub manifest: Manifest,
}

fn mix_seed(seed: u64, k: u64) -> u64 {
    // splitmix64 round over seed xor golden-ratio stride.
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Zero-VVC PCC voltage: every DG at its active-power reference, no
/// reactive response.
pub fn zero_response_voltage(
    model: &NetworkModel,
    dg: &str,
    params: &InverterParams,
) -> Result<f64> {
    let inj: Vec<Injection> = model
        .dgs()
        .iter()
        .map(|d| Injection {
            bus: model.node_name(d.node).to_string(),
            p: params.p_ref,
            q: 0.0,
        })
        .collect();
    let sol = powerflow::solve(model, &inj, 1e-9, 80)?;
    Ok(sol.magnitude(model.dg(dg)?.node))
}

struct DrawContext<'a> {
    model: &'a NetworkModel,
    dg: &'a str,
    params: &'a InverterParams,
    x_pcc: f64,
    q_max: f64,
    v0: f64,
    gain_min: f64,
}

fn guided_gain(ctx: &DrawContext, curve: &DroopCurve) -> f64 {
    let fp = fixed_point(curve, ctx.v0, ctx.x_pcc, ctx.q_max);
    curve.slope_at(fp, ctx.q_max).abs() * ctx.x_pcc
}

fn draw_shift(
    rng: &mut ChaCha8Rng,
    ctx: &DrawContext,
    old: &DroopCurve,
    seed: u64,
) -> Option<(DroopCurve, DroopCurve, AttackDescriptor)> {
    let reach = ctx.q_max * ctx.x_pcc;
    // Targeted draws rebuild the operating curve so an upward shift of
    // the interior setpoints exposes the operating point to the lower
    // segment (the demonstrated attack shape); free draws perturb the
    // supplied curve arbitrarily and may spill into the legitimate class
    // as hard negatives.
    let targeted = rng.gen_bool(0.6);
    for _ in 0..200 {
        if targeted {
            let va_lo = (ctx.v0 - reach / ctx.gain_min + 0.004).max(0.90);
            let va_hi = (ctx.v0 - 0.03).min(0.97);
            if va_lo >= va_hi {
                return None;
            }
            let va = rng.gen_range(va_lo..va_hi);
            let vb = rng.gen_range(va + 0.02..ctx.v0 - 0.005);
            let vc = rng.gen_range(ctx.v0 + 0.005..ctx.v0 + 0.05);
            let vd = rng.gen_range(vc + 0.02..(vc + 0.09f64).min(1.2));
            let Ok(pre) = DroopCurve::new(va, vb, vc, vd) else {
                continue;
            };
            // Shift vb past the operating point; drag vc along when the
            // ordering would break, mirroring the two-setpoint shift.
            let vb_hi = va + reach / ctx.gain_min;
            if vb_hi <= ctx.v0 + 0.004 {
                continue;
            }
            let vb_new = rng.gen_range(ctx.v0 + 0.003..vb_hi);
            let vc_new = if vb_new > vc - 0.005 {
                vb_new + rng.gen_range(0.005..0.03)
            } else {
                vc
            };
            let alpha = [0.0, vb_new - vb, vc_new - vc, 0.0];
            let Ok(new) = pre.shifted(alpha) else { continue };
            if guided_gain(ctx, &new) < ctx.gain_min {
                continue;
            }
            let desc = AttackDescriptor {
                kind: AttackKind::Shift,
                alpha,
                target_slopes: None,
                seed,
            };
            return Some((pre, new, desc));
        }
        let alpha: [f64; 4] = if rng.gen_bool(0.4) {
            let d = rng.gen_range(-0.06f64..0.06);
            [d; 4]
        } else {
            let mut a = [0.0; 4];
            let mut any = false;
            for slot in a.iter_mut() {
                if rng.gen_bool(0.5) {
                    *slot = rng.gen_range(-0.06f64..0.06);
                    any = true;
                }
            }
            if !any {
                continue;
            }
            a
        };
        let Ok(new) = old.shifted(alpha) else { continue };
        let desc = AttackDescriptor {
            kind: AttackKind::Shift,
            alpha,
            target_slopes: None,
            seed,
        };
        return Some((*old, new, desc));
    }
    None
}

fn draw_steepen(
    rng: &mut ChaCha8Rng,
    ctx: &DrawContext,
    seed: u64,
) -> Option<(DroopCurve, DroopCurve, AttackDescriptor)> {
    // Steepening only destabilizes when the operating point sits on the
    // segment being steepened, so the pre-attack curve is built with its
    // settled point on a gently sloped segment (stable, gain <= 0.92)
    // and the interior move then narrows that segment.
    let reach = ctx.q_max * ctx.x_pcc;
    for _ in 0..100 {
        let lower_side = rng.gen_bool(0.5);
        let (old, fp) = if lower_side {
            // Operating point on the injecting segment: va < v0 < vb.
            let va_lo = (ctx.v0 - 0.06).max(0.90);
            let va_hi = (ctx.v0 - 0.012).min(0.97);
            if va_lo >= va_hi {
                continue;
            }
            let va = rng.gen_range(va_lo..va_hi);
            let vb_lo = (va + reach / 0.92).max(ctx.v0 + 0.006);
            let vb_hi = (va + 0.16).min(1.10);
            if vb_lo >= vb_hi {
                continue;
            }
            let vb = rng.gen_range(vb_lo..vb_hi);
            let vc_hi = (vb + 0.05).min(1.14);
            if vb + 0.01 >= vc_hi {
                continue;
            }
            let vc = rng.gen_range(vb + 0.01..vc_hi);
            let vd_hi = (vc + 0.08).min(1.18);
            if vc + 0.02 >= vd_hi {
                continue;
            }
            let vd = rng.gen_range(vc + 0.02..vd_hi);
            let Ok(old) = DroopCurve::new(va, vb, vc, vd) else {
                continue;
            };
            let fp = fixed_point(&old, ctx.v0, ctx.x_pcc, ctx.q_max);
            if !(old.va()..old.vb()).contains(&fp) {
                continue;
            }
            (old, fp)
        } else {
            // Operating point on the absorbing segment: vc < fp < vd.
            let vc_lo = (ctx.v0 - 0.055).max(0.93);
            let vc_hi = ctx.v0 - 0.006;
            if vc_lo >= vc_hi {
                continue;
            }
            let vc = rng.gen_range(vc_lo..vc_hi);
            let vd_lo = (vc + reach / 0.92).max(ctx.v0 + 0.004);
            let vd_hi = (vc + 0.16).min(1.2);
            if vd_lo >= vd_hi {
                continue;
            }
            let vd = rng.gen_range(vd_lo..vd_hi);
            let vb = rng.gen_range(vc - 0.03..vc - 0.005);
            let va_lo = (vb - 0.08).max(0.90);
            if va_lo >= vb - 0.02 {
                continue;
            }
            let va = rng.gen_range(va_lo..vb - 0.02);
            let Ok(old) = DroopCurve::new(va, vb, vc, vd) else {
                continue;
            };
            let fp = fixed_point(&old, ctx.v0, ctx.x_pcc, ctx.q_max);
            if !(old.vc()..old.vd()).contains(&fp) {
                continue;
            }
            (old, fp)
        };

        // The narrowed segment must still reach past the zero-response
        // voltage, else the operating point escapes into the dead band.
        let g_lo = ctx.gain_min.max(1.05);
        let built = if lower_side {
            let g_hi = (reach / (ctx.v0 - old.va() + 0.004)).min(4.0);
            if g_hi <= g_lo {
                continue;
            }
            let g_t = rng.gen_range(g_lo..g_hi);
            let width = reach / g_t;
            old.with_interior(old.va() + width, old.vc())
                .ok()
                .map(|new| (new, (-ctx.q_max / width, old.segment_slopes(ctx.q_max).1)))
        } else {
            let g_hi = (reach / (old.vd() - ctx.v0 + 0.004)).min(4.0);
            if g_hi <= g_lo {
                continue;
            }
            let g_t = rng.gen_range(g_lo..g_hi);
            let width = reach / g_t;
            let vc_new = old.vd() - width;
            if vc_new < old.vb() {
                continue;
            }
            old.with_interior(old.vb(), vc_new)
                .ok()
                .map(|new| (new, (old.segment_slopes(ctx.q_max).0, -ctx.q_max / width)))
        };
        let _ = fp;
        let Some((new, targets)) = built else { continue };
        if guided_gain(ctx, &new) < ctx.gain_min {
            continue;
        }
        let desc = AttackDescriptor {
            kind: AttackKind::Steepen,
            alpha: [0.0, new.vb() - old.vb(), new.vc() - old.vc(), 0.0],
            target_slopes: Some(targets),
            seed,
        };
        return Some((old, new, desc));
    }
    None
}

fn draw_stealth(
    rng: &mut ChaCha8Rng,
    ctx: &DrawContext,
    old: &DroopCurve,
    seed: u64,
) -> Option<(DroopCurve, AttackDescriptor)> {
    for _ in 0..200 {
        let candidate = if rng.gen_bool(0.5) {
            // Pull vc just below the operating point: the absorbing
            // segment catches it.
            let hi = ctx.v0 - 0.003;
            let lo = (old.va() + 0.022).max(ctx.v0 - 0.04);
            if lo >= hi {
                continue;
            }
            let vc_new = rng.gen_range(lo..hi);
            let vb_lo = old.va() + 0.02;
            if vb_lo >= vc_new {
                continue;
            }
            let vb_new = rng.gen_range(vb_lo..vc_new);
            old.with_interior(vb_new, vc_new)
        } else {
            // Push vb just above the operating point: the injecting
            // segment catches it.
            let lo = ctx.v0 + 0.003;
            let hi = (old.vd() - 0.015).min(ctx.v0 + 0.04);
            if lo >= hi {
                continue;
            }
            let vb_new = rng.gen_range(lo..hi);
            let vc_hi = old.vd() - 0.01;
            if vb_new >= vc_hi {
                continue;
            }
            let vc_new = rng.gen_range(vb_new..vc_hi);
            old.with_interior(vb_new, vc_new)
        };
        let Ok(new) = candidate else { continue };
        if guided_gain(ctx, &new) < ctx.gain_min {
            continue;
        }
        let desc = AttackDescriptor {
            kind: AttackKind::StealthChord,
            alpha: [0.0, new.vb() - old.vb(), new.vc() - old.vc(), 0.0],
            target_slopes: None,
            seed,
        };
        return Some((new, desc));
    }
    None
}

struct SimOutcome {
    label: u8,
    features: Option<FeatureVector>,
}

fn simulate_candidate(
    ctx: &DrawContext,
    cfg: &DatasetConfig,
    old: &DroopCurve,
    new: &DroopCurve,
    seed: u64,
) -> Result<SimOutcome> {
    let sim_cfg = cfg.sim_config(seed);
    match run_closed_loop(ctx.model, ctx.dg, ctx.params, old, new, &sim_cfg) {
        Ok(trace) => {
            let label = label_by_oscillation(&trace, &cfg.oracle)?;
            let (pre, post) = trace.update_windows(cfg.pre_window_s, cfg.oracle.post_window_s)?;
            let features = assemble_features(&pre, &post, old, new, &cfg.zeta)?;
            Ok(SimOutcome {
                label,
                features: Some(features),
            })
        }
        Err(CoreError::Simulation { source, .. })
            if matches!(*source, CoreError::Infeasible { .. }) =>
        {
            // Collapse during the run is malicious by definition; no
            // usable measurement window exists though, so the caller
            // cannot turn it into a dataset row.
            Ok(SimOutcome {
                label: 1,
                features: None,
            })
        }
        Err(e) => Err(e),
    }
}

/// Generate a class-exact labeled dataset. Deterministic in `seed`:
/// every candidate draw derives its own stream from (seed, index).
pub fn generate_dataset(base_model: &NetworkModel, cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n_legitimate == 0 || cfg.n_malicious == 0 {
        return Err(CoreError::Generation("class counts must be positive".into()));
    }
    let (cal_scale, cal_model) = calibrate_load_scale(
        base_model,
        &cfg.dg,
        cfg.params.p_ref,
        cfg.calibration_target_v,
        1e-4,
    )?;

    let destabilizable = [AttackKind::Shift, AttackKind::Steepen, AttackKind::StealthChord];
    let mut mal_quota: BTreeMap<AttackKind, usize> = BTreeMap::new();
    let per_kind = cfg.n_malicious / destabilizable.len();
    let mut remainder = cfg.n_malicious - per_kind * destabilizable.len();
    for k in destabilizable {
        let extra = usize::from(remainder > 0);
        remainder = remainder.saturating_sub(1);
        mal_quota.insert(k, per_kind + extra);
    }
    let invert_target = ((cfg.n_legitimate as f64) * cfg.invert_fraction).round() as usize;
    let spill_cap = ((cfg.n_legitimate as f64) * cfg.attack_spill_cap).round() as usize;

    let mut mal_counts: BTreeMap<AttackKind, usize> =
        destabilizable.iter().map(|&k| (k, 0)).collect();
    let mut legit_kind_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut invert_count = 0usize;
    let mut spilled = 0usize;
    let mut accepted: Vec<Scenario> = Vec::with_capacity(cfg.n_legitimate + cfg.n_malicious);
    let mut n_label0 = 0usize;
    let mut n_label1 = 0usize;

    let budget = cfg.draw_budget_factor * (cfg.n_legitimate + cfg.n_malicious);
    let mut candidate: u64 = 0;

    while n_label0 < cfg.n_legitimate || n_label1 < cfg.n_malicious {
        if candidate as usize >= budget {
            return Err(CoreError::Generation(format!(
                "label quotas unreachable within {budget} draws \
                 (have {n_label0} legitimate, {n_label1} malicious)"
            )));
        }
        let draw_seed = mix_seed(cfg.seed, candidate);
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        candidate += 1;

        // Purpose: fill malicious kinds first (least-filled wins), then
        // orientation-flip enrichment, then the legitimate sampler.
        let unmet_kind = destabilizable
            .iter()
            .copied()
            .filter(|k| mal_counts[k] < mal_quota[k])
            .min_by_key(|k| mal_counts[k]);
        let purpose = if n_label1 < cfg.n_malicious {
            unmet_kind
        } else if invert_count < invert_target
            && spilled < spill_cap
            && n_label0 < cfg.n_legitimate
        {
            Some(AttackKind::Invert)
        } else {
            None
        };

        let load_scale = rng.gen_range(cfg.load_scale_range.0..=cfg.load_scale_range.1);
        let model_i = cal_model.with_load_scale(load_scale)?;
        let v0 = zero_response_voltage(&model_i, &cfg.dg, &cfg.params)?;
        let x_pcc = model_i.thevenin_sensitivity(&format!("pcc{}", cfg.dg))?.im;
        let q_max = cfg.params.q_max()?;
        let ctx = DrawContext {
            model: &model_i,
            dg: &cfg.dg,
            params: &cfg.params,
            x_pcc,
            q_max,
            v0,
            gain_min: cfg.malicious_gain_min,
        };

        let drawn = match purpose {
            Some(AttackKind::Shift) => {
                let old = sample_legitimate_curve(&mut rng, cfg.legit_margin, x_pcc, q_max, v0)?;
                draw_shift(&mut rng, &ctx, &old, draw_seed)
            }
            Some(AttackKind::Steepen) => draw_steepen(&mut rng, &ctx, draw_seed),
            Some(AttackKind::StealthChord) => {
                let old = sample_legitimate_curve(&mut rng, cfg.legit_margin, x_pcc, q_max, v0)?;
                draw_stealth(&mut rng, &ctx, &old, draw_seed).map(|(new, d)| (old, new, d))
            }
            Some(AttackKind::Invert) => {
                let old = sample_legitimate_curve(&mut rng, cfg.legit_margin, x_pcc, q_max, v0)?;
                let desc = AttackDescriptor {
                    kind: AttackKind::Invert,
                    alpha: [0.0; 4],
                    target_slopes: None,
                    seed: draw_seed,
                };
                let new = apply_attack(&old, &desc)?;
                Some((old, new, desc))
            }
            Some(AttackKind::None) | None => {
                let old = sample_legitimate_curve(&mut rng, cfg.legit_margin, x_pcc, q_max, v0)?;
                let new = sample_legitimate_curve(&mut rng, cfg.legit_margin, x_pcc, q_max, v0)?;
                Some((old, new, AttackDescriptor::none(draw_seed)))
            }
        };
        let Some((old, new, desc)) = drawn else {
            if std::env::var_os("VOLTGATE_TRACE").is_some() {
                eprintln!("cand {candidate}: purpose {purpose:?} draw failed");
            }
            continue;
        };

        let outcome = simulate_candidate(&ctx, cfg, &old, &new, draw_seed)?;
        if std::env::var_os("VOLTGATE_TRACE").is_some() {
            eprintln!(
                "cand {candidate}: purpose {purpose:?} kind {} label {} old ({:.3},{:.3},{:.3},{:.3}) new ({:.3},{:.3},{:.3},{:.3})",
                desc.kind,
                outcome.label,
                old.va(), old.vb(), old.vc(), old.vd(),
                new.va(), new.vb(), new.vc(), new.vd()
            );
        }
        let Some(features) = outcome.features else {
            continue; // collapse: no measurement window to learn from
        };
        let gain = loop_gain(&model_i, &cfg.dg, &new, &cfg.params, v0)?;

        let accept = match outcome.label {
            1 => {
                // Only clearly destabilizing rows enter the malicious
                // class; boundary-band cases have washed-out window
                // means the oracle itself barely resolves.
                if desc.kind != AttackKind::Invert
                    && desc.kind != AttackKind::None
                    && gain >= cfg.malicious_gain_min
                    && mal_counts[&desc.kind] < mal_quota[&desc.kind]
                {
                    *mal_counts.get_mut(&desc.kind).unwrap() += 1;
                    n_label1 += 1;
                    true
                } else {
                    false
                }
            }
            _ => {
                if n_label0 >= cfg.n_legitimate {
                    false
                } else {
                    match desc.kind {
                        AttackKind::None => {
                            n_label0 += 1;
                            true
                        }
                        AttackKind::Invert => {
                            if gain <= cfg.spill_gain_max {
                                invert_count += 1;
                                spilled += 1;
                                n_label0 += 1;
                                true
                            } else {
                                false
                            }
                        }
                        // A stabilizing stealth row would break the
                        // dataset's chord-preserving-implies-malicious
                        // property; discard those draws.
                        AttackKind::StealthChord => false,
                        _ => {
                            if spilled < spill_cap && gain <= cfg.spill_gain_max {
                                spilled += 1;
                                n_label0 += 1;
                                true
                            } else {
                                false
                            }
                        }
                    }
                }
            }
        };
        if !accept {
            continue;
        }
        if outcome.label == 0 {
            *legit_kind_counts.entry(desc.kind.to_string()).or_insert(0) += 1;
        }
        accepted.push(Scenario {
            id: accepted.len() as u64,
            load_scale,
            dg: cfg.dg.clone(),
            old_curve: old,
            new_curve: new,
            attack: desc,
            label: outcome.label,
            gain,
            features,
            split: Split::Train, // assigned below
        });
    }

    // Shuffled test split, recorded per scenario id.
    let mut order: Vec<usize> = (0..accepted.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX));
    for i in (1..order.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_test = ((accepted.len() as f64) * cfg.test_fraction).round() as usize;
    for &idx in order.iter().take(n_test) {
        accepted[idx].split = Split::Test;
    }

    let manifest = Manifest {
        seed: cfg.seed,
        n_legitimate: cfg.n_legitimate,
        n_malicious: cfg.n_malicious,
        calibrated_scale: cal_scale,
        schema_hash: schema_hash(FeatureMode::Monitored),
        config_hash: cfg.config_hash(),
        kind_counts_malicious: mal_counts
            .iter()
            .map(|(k, &v)| (k.to_string(), v))
            .collect(),
        kind_counts_legitimate: legit_kind_counts,
    };
    Ok(Dataset {
        scenarios: accepted,
        manifest,
    })
}

/// Draw unfiltered candidates (no label-quota selection) and report how
/// often the simulated label agrees with the analytic prediction, over
/// candidates whose gain falls outside the excluded boundary band.
/// Returns (checked, agreements).
pub fn agreement_study(
    base_model: &NetworkModel,
    cfg: &DatasetConfig,
    n_candidates: usize,
    band: (f64, f64),
) -> Result<(usize, usize)> {
    let (_, cal_model) = calibrate_load_scale(
        base_model,
        &cfg.dg,
        cfg.params.p_ref,
        cfg.calibration_target_v,
        1e-4,
    )?;
    let kinds = [
        AttackKind::None,
        AttackKind::Shift,
        AttackKind::Steepen,
        AttackKind::StealthChord,
        AttackKind::Invert,
    ];
    let mut checked = 0usize;
    let mut agreements = 0usize;
    let mut candidate = 0u64;
    while checked < n_candidates {
        if candidate as usize > 100 * n_candidates {
            return Err(CoreError::Generation(
                "agreement study ran out of candidate budget".into(),
            ));
        }
        let draw_seed = mix_seed(cfg.seed ^ 0xA5A5_5A5A, candidate);
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        let kind = kinds[(candidate % kinds.len() as u64) as usize];
        candidate += 1;

        let load_scale = rng.gen_range(cfg.load_scale_range.0..=cfg.load_scale_range.1);
        let model_i = cal_model.with_load_scale(load_scale)?;
        let v0 = zero_response_voltage(&model_i, &cfg.dg, &cfg.params)?;
        let x_pcc = model_i.thevenin_sensitivity(&format!("pcc{}", cfg.dg))?.im;
        let q_max = cfg.params.q_max()?;
        let ctx = DrawContext {
            model: &model_i,
            dg: &cfg.dg,
            params: &cfg.params,
            x_pcc,
            q_max,
            v0,
            gain_min: cfg.malicious_gain_min,
        };
        let old = sample_legitimate_curve(&mut rng, cfg.legit_margin, x_pcc, q_max, v0)?;
        let drawn = match kind {
            AttackKind::None => {
                let new = sample_legitimate_curve(&mut rng, cfg.legit_margin, x_pcc, q_max, v0)?;
                Some((old, new))
            }
            AttackKind::Shift => draw_shift(&mut rng, &ctx, &old, draw_seed).map(|(o, n, _)| (o, n)),
            AttackKind::Steepen => draw_steepen(&mut rng, &ctx, draw_seed).map(|(o, n, _)| (o, n)),
            AttackKind::StealthChord => {
                draw_stealth(&mut rng, &ctx, &old, draw_seed).map(|(n, _)| (old, n))
            }
            AttackKind::Invert => Some((old, old.flipped())),
        };
        let Some((old, new)) = drawn else { continue };
        let gain = loop_gain(&model_i, &cfg.dg, &new, &cfg.params, v0)?;
        if gain >= band.0 && gain <= band.1 {
            continue; // boundary band excluded by construction
        }
        let outcome = simulate_candidate(&ctx, cfg, &old, &new, draw_seed)?;
        let predicted = u8::from(gain > 1.0);
        checked += 1;
        if predicted == outcome.label {
            agreements += 1;
        }
    }
    Ok((checked, agreements))
}

const META_COLUMNS: [&str; 9] = [
    "id",
    "split",
    "label",
    "attack_kind",
    "load_scale",
    "dg",
    "gain",
    "old_inverted",
    "new_inverted",
];

impl Dataset {
    pub fn dataset_path(dir: &Path) -> std::path::PathBuf {
        dir.join("dataset.csv")
    }

    pub fn manifest_path(dir: &Path) -> std::path::PathBuf {
        dir.join("manifest.toml")
    }

    /// Write `dataset.csv` and `manifest.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = String::new();
        let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(feature_columns(FeatureMode::Monitored));
        out.push_str(&header.join(","));
        out.push('\n');
        for s in &self.scenarios {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}",
                s.id,
                s.split,
                s.label,
                s.attack.kind,
                s.load_scale,
                s.dg,
                s.gain,
                u8::from(s.old_curve.is_inverted()),
                u8::from(s.new_curve.is_inverted()),
            ));
            for v in s.features.as_slice() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        fs::File::create(Self::dataset_path(dir))?.write_all(out.as_bytes())?;
        let manifest_text = toml::to_string_pretty(&self.manifest)
            .map_err(|e| CoreError::Format(format!("manifest: {e}")))?;
        fs::File::create(Self::manifest_path(dir))?.write_all(manifest_text.as_bytes())?;
        Ok(())
    }

    /// Read a dataset written by [`Dataset::write`].
    pub fn read(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest = toml::from_str(&fs::read_to_string(Self::manifest_path(dir))?)
            .map_err(|e| CoreError::Format(format!("manifest: {e}")))?;
        if manifest.schema_hash != schema_hash(FeatureMode::Monitored) {
            return Err(CoreError::Schema(format!(
                "dataset schema hash {} does not match this build",
                manifest.schema_hash
            )));
        }
        let text = fs::read_to_string(Self::dataset_path(dir))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::Format("empty dataset file".into()))?;
        let mut expected: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
        expected.extend(feature_columns(FeatureMode::Monitored));
        if header != expected.join(",") {
            return Err(CoreError::Schema("dataset column header mismatch".into()));
        }
        let mut scenarios = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != META_COLUMNS.len() + FEATURE_DIM {
                return Err(CoreError::Format(format!(
                    "dataset row has {} columns, expected {}",
                    cells.len(),
                    META_COLUMNS.len() + FEATURE_DIM
                )));
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| CoreError::Format(format!("bad number {s:?} in dataset")))
            };
            let id: u64 = cells[0]
                .parse()
                .map_err(|_| CoreError::Format("bad scenario id".into()))?;
            let split = match cells[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(CoreError::Format(format!("bad split {other:?}"))),
            };
            let label: u8 = cells[2]
                .parse()
                .map_err(|_| CoreError::Format("bad label".into()))?;
            let kind: AttackKind = cells[3].parse()?;
            let load_scale = parse_f(cells[4])?;
            let dg = cells[5].to_string();
            let gain = parse_f(cells[6])?;
            let old_inverted = cells[7] == "1";
            let new_inverted = cells[8] == "1";
            let mut features = [0.0f64; FEATURE_DIM];
            for (slot, cell) in features.iter_mut().zip(&cells[META_COLUMNS.len()..]) {
                *slot = parse_f(cell)?;
            }
            let old_curve = DroopCurve::with_orientation(
                features[0],
                features[1],
                features[2],
                features[3],
                old_inverted,
            )?;
            let half = FEATURE_DIM / 2;
            let new_curve = DroopCurve::with_orientation(
                features[half],
                features[half + 1],
                features[half + 2],
                features[half + 3],
                new_inverted,
            )?;
            scenarios.push(Scenario {
                id,
                load_scale,
                dg,
                old_curve,
                new_curve,
                attack: AttackDescriptor {
                    kind,
                    alpha: [0.0; 4],
                    target_slopes: None,
                    seed: 0,
                },
                label,
                gain,
                features: FeatureVector(features),
                split,
            });
        }
        Ok(Dataset {
            scenarios,
            manifest,
        })
    }

    /// Feature matrix and label vector for one split, projected to a mode.
    pub fn matrix(&self, mode: FeatureMode, split: Split) -> (Vec<Vec<f64>>, Vec<f64>, Vec<u64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut ids = Vec::new();
        for s in self.scenarios.iter().filter(|s| s.split == split) {
            x.push(s.features.project(mode));
            y.push(f64::from(s.label));
            ids.push(s.id);
        }
        (x, y, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{default_companion_curve, TraceRow};

    fn calibrated() -> (NetworkModel, DatasetConfig) {
        let cfg = DatasetConfig::default();
        let model = NetworkModel::benchmark();
        let (_, cal) = calibrate_load_scale(&model, "4", cfg.params.p_ref, 1.011, 1e-4).unwrap();
        (cal, cfg)
    }

    #[test]
    fn paper_attack_construction_via_shift_descriptor() {
        let pre = default_companion_curve();
        let desc = AttackDescriptor {
            kind: AttackKind::Shift,
            alpha: [0.0, 0.04, 0.02, 0.0],
            target_slopes: None,
            seed: 0,
        };
        let post = apply_attack(&pre, &desc).unwrap();
        assert!((post.vb() - 1.02).abs() < 1e-12);
        assert!((post.vc() - 1.04).abs() < 1e-12);
        assert_eq!(post.va(), pre.va());
        assert_eq!(post.vd(), pre.vd());

        let same = apply_attack(&pre, &AttackDescriptor::none(0)).unwrap();
        assert_eq!(same, pre);
    }

    #[test]
    fn degenerate_attack_is_rejected() {
        let pre = default_companion_curve();
        let desc = AttackDescriptor {
            kind: AttackKind::Shift,
            alpha: [0.0, 0.08, 0.0, 0.0], // vb beyond vc
            target_slopes: None,
            seed: 0,
        };
        assert!(apply_attack(&pre, &desc).is_err());
    }

    #[test]
    fn paper_attack_gain_exceeds_threshold_and_legit_is_quiet() {
        let (model, cfg) = calibrated();
        let v0 = zero_response_voltage(&model, "4", &cfg.params).unwrap();
        assert!((v0 - 1.011).abs() < 2e-3, "v0 = {v0}");
        let legit = default_companion_curve();
        let g_legit = loop_gain(&model, "4", &legit, &cfg.params, v0).unwrap();
        assert!(g_legit < 0.1, "g_legit = {g_legit}");
        let attack = DroopCurve::new(0.95, 1.02, 1.04, 1.05).unwrap();
        let g_attack = loop_gain(&model, "4", &attack, &cfg.params, v0).unwrap();
        assert!(g_attack > 1.2, "g_attack = {g_attack}");
    }

    #[test]
    fn stability_dichotomy_matches_simulation() {
        let (model, cfg) = calibrated();
        let v0 = zero_response_voltage(&model, "4", &cfg.params).unwrap();
        let x = model.thevenin_sensitivity("pcc4").unwrap().im;
        let q_max = cfg.params.q_max().unwrap();
        let old = default_companion_curve();

        // A lower segment of chosen width containing the operating point
        // pins the loop gain: width = q_max * x / g.
        for (g_target, expect_osc) in [(0.5, false), (0.7, false), (1.5, true), (2.5, true)] {
            let width = q_max * x / g_target;
            let vb = v0 + 0.004;
            let va = vb - width;
            let vc = vb + 0.01;
            let curve = DroopCurve::new(va, vb, vc, vc + 0.03).unwrap();
            let g = loop_gain(&model, "4", &curve, &cfg.params, v0).unwrap();
            assert!(
                (g - g_target).abs() < 0.05,
                "constructed gain {g} vs target {g_target}"
            );
            let trace =
                run_closed_loop(&model, "4", &cfg.params, &old, &curve, &cfg.sim_config(0))
                    .unwrap();
            let label = label_by_oscillation(&trace, &cfg.oracle).unwrap();
            assert_eq!(label, u8::from(expect_osc), "gain {g_target}: label {label}");
        }
    }

    fn synthetic_trace(rows: Vec<TraceRow>, dt: f64, attack: f64) -> SimTrace {
        // Route through the CSV form; trace fields are private to sim.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut out = String::new();
        out.push_str("# dg = 4\n# old_curve = 0.95,0.98,1.02,1.05\n");
        out.push_str("# new_curve = 0.95,1.02,1.04,1.05\n");
        out.push_str(&format!("# dt_s = {dt}\n# attack_time_s = {attack}\n"));
        out.push_str("t,V1,V2,V3,I1,I2,I3,Vd,Vq,Id,Iq,Q,curve\n");
        for r in rows {
            out.push_str(&format!(
                "{},{v},{v},{v},{i},{i},{i},{v},0,{i},0,{q},{c}\n",
                r.t,
                v = r.v_mag,
                i = r.i_mag,
                q = r.q,
                c = r.curve_id
            ));
        }
        std::fs::write(&path, out).unwrap();
        SimTrace::read_csv(&path).unwrap()
    }

    #[test]
    fn decaying_step_response_is_not_malicious() {
        // Exponential settling toward a new setpoint: large initial
        // swing, decaying envelope; the oracle must reject it.
        let dt = 0.1;
        let rows: Vec<TraceRow> = (0..131)
            .map(|k| {
                let t = k as f64 * dt;
                let v = if t < 3.0 {
                    1.011
                } else {
                    let dt_post = t - 3.0;
                    1.015 + 0.01 * (-dt_post / 1.5).exp() * (8.0 * dt_post).cos()
                };
                TraceRow {
                    t,
                    v_mag: v,
                    v_ang: 0.0,
                    i_mag: 0.02,
                    i_ang: 0.0,
                    q: 0.0,
                    curve_id: u8::from(t >= 3.0),
                }
            })
            .collect();
        let trace = synthetic_trace(rows, dt, 3.0);
        assert_eq!(
            label_by_oscillation(&trace, &OracleConfig::default()).unwrap(),
            0
        );
    }

    #[test]
    fn settled_trace_is_not_malicious_and_short_trace_errors() {
        let dt = 0.1;
        let rows: Vec<TraceRow> = (0..131)
            .map(|k| TraceRow {
                t: k as f64 * dt,
                v_mag: 1.011,
                v_ang: 0.0,
                i_mag: 0.02,
                i_ang: 0.0,
                q: 0.0,
                curve_id: u8::from(k >= 30),
            })
            .collect();
        let trace = synthetic_trace(rows.clone(), dt, 3.0);
        assert_eq!(
            label_by_oscillation(&trace, &OracleConfig::default()).unwrap(),
            0
        );

        let short = synthetic_trace(rows[..35].to_vec(), dt, 3.0);
        assert!(matches!(
            label_by_oscillation(&short, &OracleConfig::default()),
            Err(CoreError::Range(_))
        ));
    }

    #[test]
    fn legitimate_sampler_respects_margin_and_ranges() {
        let (model, cfg) = calibrated();
        let v0 = zero_response_voltage(&model, "4", &cfg.params).unwrap();
        let x = model.thevenin_sensitivity("pcc4").unwrap().im;
        let q_max = cfg.params.q_max().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let c = sample_legitimate_curve(&mut rng, 0.7, x, q_max, v0).unwrap();
            assert!((0.90..=0.97).contains(&c.va()));
            assert!((1.03..=1.10).contains(&c.vd()));
            assert!(c.vc() - c.vb() >= 0.01);
            let fp = fixed_point(&c, v0, x, q_max);
            let g = c.slope_at(fp, q_max).abs() * x;
            assert!(g <= 0.7, "g = {g}");
        }
        // The benchmark default curve passes the sampler's predicate.
        let g_default =
            loop_gain(&model, "4", &default_companion_curve(), &cfg.params, v0).unwrap();
        assert!(g_default <= 0.7);
    }

    #[test]
    fn small_dataset_has_exact_counts_kinds_and_determinism() {
        let model = NetworkModel::benchmark();
        let cfg = DatasetConfig {
            n_legitimate: 24,
            n_malicious: 24,
            seed: 11,
            ..Default::default()
        };
        let a = generate_dataset(&model, &cfg).unwrap();
        assert_eq!(a.scenarios.len(), 48);
        let n1: usize = a.scenarios.iter().filter(|s| s.label == 1).count();
        assert_eq!(n1, 24);

        for kind in ["shift", "steepen", "stealth-chord"] {
            let n = a.manifest.kind_counts_malicious[kind];
            assert!(n * 100 >= 15 * 24, "{kind}: {n} of 24");
        }
        assert!(a
            .scenarios
            .iter()
            .any(|s| s.attack.kind == AttackKind::Invert && s.label == 0));

        for s in a
            .scenarios
            .iter()
            .filter(|s| s.attack.kind == AttackKind::StealthChord)
        {
            assert_eq!(s.label, 1);
            let q_max = cfg.params.q_max().unwrap();
            assert!(
                (s.old_curve.chord_slope(q_max) - s.new_curve.chord_slope(q_max)).abs() < 1e-9
            );
        }

        let b = generate_dataset(&model, &cfg).unwrap();
        assert_eq!(a.scenarios.len(), b.scenarios.len());
        for (sa, sb) in a.scenarios.iter().zip(&b.scenarios) {
            assert_eq!(sa.label, sb.label);
            assert_eq!(sa.features, sb.features);
            assert_eq!(sa.split, sb.split);
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let model = NetworkModel::benchmark();
        let cfg = DatasetConfig {
            n_legitimate: 9,
            n_malicious: 9,
            seed: 3,
            ..Default::default()
        };
        let ds = generate_dataset(&model, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.scenarios.len(), ds.scenarios.len());
        for (a, b) in ds.scenarios.iter().zip(&back.scenarios) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.split, b.split);
            assert_eq!(a.attack.kind, b.attack.kind);
            assert_eq!(a.features, b.features);
            assert_eq!(a.old_curve, b.old_curve);
            assert_eq!(a.new_curve, b.new_curve);
        }
    }
}
