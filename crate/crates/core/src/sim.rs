//! Discrete-time closed loop: measure the PCC voltage, evaluate the
//! droop, track the command through a first-order lag, re-solve the
//! network, repeat. A curve update is applied mid-run and the
//! measurement history around the update instant is recorded.
//!
//! Every DG in the model runs its own loop; only the DG under test
//! receives the new curve, the rest keep a fixed legitimate curve. The
//! droop command is evaluated on the previous step's measurement (one
//! control period of measurement delay), which makes the loop's
//! oscillation boundary sit at |segment slope| * X_th = 1 for the
//! default tau = dt.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::grid::NetworkModel;
use crate::powerflow::{self, Injection};
use crate::vvc::{DroopCurve, InverterParams};

/// The fixed curve run by DGs other than the one under test.
pub fn default_companion_curve() -> DroopCurve {
    DroopCurve::new(0.95, 0.98, 1.02, 1.05).expect("companion curve is valid")
}

/// Timing and recording settings for one closed-loop run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedLoopConfig {
    /// Total simulated span, s.
    pub duration_s: f64,
    /// Control period, s (must match the inverter's `dt`).
    pub dt_s: f64,
    /// Instant the new curve is applied, s.
    pub attack_time_s: f64,
    /// Pre-update history retained in the trace, s.
    pub record_pre_s: f64,
    /// Seed for the optional load perturbation.
    pub seed: u64,
    /// Uniform multiplicative load perturbation amplitude (0 disables).
    pub noise_pu: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        ClosedLoopConfig {
            duration_s: 13.0,
            dt_s: 0.1,
            attack_time_s: 3.0,
            record_pre_s: 3.0,
            seed: 0,
            noise_pu: 0.0,
        }
    }
}

impl ClosedLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0 && self.dt_s <= self.attack_time_s && self.attack_time_s < self.duration_s)
        {
            return Err(CoreError::Domain(format!(
                "need 0 < dt ({}) <= attack_time ({}) < duration ({})",
                self.dt_s, self.attack_time_s, self.duration_s
            )));
        }
        if self.record_pre_s < 0.0 {
            return Err(CoreError::Domain("record_pre must be non-negative".into()));
        }
        Ok(())
    }
}

/// One control step of the recorded PCC history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    /// PCC voltage phasor (positive sequence; per-phase magnitudes are
    /// all equal under the balanced assumption).
    pub v_mag: f64,
    pub v_ang: f64,
    /// Inverter terminal current phasor.
    pub i_mag: f64,
    pub i_ang: f64,
    /// Reactive power injected by the DG under test, pu.
    pub q: f64,
    /// 0 while the pre-update curve is active, 1 afterwards.
    pub curve_id: u8,
}

/// Recorded measurement history of one closed-loop run.
#[derive(Clone, Debug)]
pub struct SimTrace {
    dg: String,
    old_curve: DroopCurve,
    new_curve: DroopCurve,
    dt: f64,
    attack_time: f64,
    rows: Vec<TraceRow>,
}

/// A contiguous slice of a trace with the dq reference frame anchored to
/// the voltage phasor at its opening row.
#[derive(Clone, Copy, Debug)]
pub struct Window<'a> {
    rows: &'a [TraceRow],
    anchor: f64,
    dt: f64,
}

/// Rotate a row's phasors into the frame anchored at `anchor`:
/// d-axis along the anchoring voltage phasor.
pub fn dq_at_step(row: &TraceRow, anchor: f64) -> (f64, f64, f64, f64) {
    let dv = row.v_ang - anchor;
    let di = row.i_ang - anchor;
    (
        row.v_mag * dv.cos(),
        row.v_mag * dv.sin(),
        row.i_mag * di.cos(),
        row.i_mag * di.sin(),
    )
}

impl<'a> Window<'a> {
    /// Window over externally assembled rows, anchored at the first row's
    /// voltage angle.
    pub fn new(rows: &'a [TraceRow], dt: f64) -> Window<'a> {
        Window {
            rows,
            anchor: rows.first().map(|r| r.v_ang).unwrap_or(0.0),
            dt,
        }
    }

    pub fn rows(&self) -> &'a [TraceRow] {
        self.rows
    }

    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dq(&self, idx: usize) -> (f64, f64, f64, f64) {
        dq_at_step(&self.rows[idx], self.anchor)
    }
}

impl SimTrace {
    pub fn dg(&self) -> &str {
        &self.dg
    }

    pub fn old_curve(&self) -> &DroopCurve {
        &self.old_curve
    }

    pub fn new_curve(&self) -> &DroopCurve {
        &self.new_curve
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn attack_time(&self) -> f64 {
        self.attack_time
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn start_time(&self) -> f64 {
        self.rows.first().map(|r| r.t).unwrap_or(0.0)
    }

    pub fn end_time(&self) -> f64 {
        self.rows.last().map(|r| r.t).unwrap_or(0.0)
    }

    fn index_of(&self, t: f64) -> Result<usize> {
        let idx = (t - self.start_time()) / self.dt;
        let rounded = idx.round();
        if (idx - rounded).abs() > 1e-6 {
            return Err(CoreError::Range(format!(
                "time {t} is not on the {}-s step grid",
                self.dt
            )));
        }
        let i = rounded as isize;
        if i < 0 || i as usize >= self.rows.len() {
            return Err(CoreError::Range(format!(
                "time {t} outside recorded span [{}, {}]",
                self.start_time(),
                self.end_time()
            )));
        }
        Ok(i as usize)
    }

    /// Split out the `[center - before, center)` and `[center, center + after]`
    /// sub-traces, each dq-anchored at its opening row.
    pub fn extract_window(&self, center: f64, before: f64, after: f64) -> Result<(Window<'_>, Window<'_>)> {
        let c = self.index_of(center)?;
        let b = (before / self.dt).round() as usize;
        let a = (after / self.dt).round() as usize;
        if b > c {
            return Err(CoreError::Range(format!(
                "pre-window of {before} s starts before the recorded span"
            )));
        }
        let post_end = c + a;
        if post_end >= self.rows.len() {
            return Err(CoreError::Range(format!(
                "post-window of {after} s runs past the recorded span"
            )));
        }
        let pre_rows = &self.rows[c - b..c];
        let post_rows = &self.rows[c..=post_end];
        let pre = Window {
            rows: pre_rows,
            anchor: pre_rows.first().map(|r| r.v_ang).unwrap_or(0.0),
            dt: self.dt,
        };
        let post = Window {
            rows: post_rows,
            anchor: post_rows.first().map(|r| r.v_ang).unwrap_or(0.0),
            dt: self.dt,
        };
        Ok((pre, post))
    }

    /// Pre/post feature windows around the curve-update instant.
    pub fn update_windows(&self, before: f64, after: f64) -> Result<(Window<'_>, Window<'_>)> {
        self.extract_window(self.attack_time, before, after)
    }

    /// Delimited text export, one row per control step. The dq frame is
    /// re-anchored at the update instant, matching the feature windows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# dg = {}\n", self.dg));
        out.push_str(&format!("# old_curve = {}\n", self.old_curve));
        out.push_str(&format!("# new_curve = {}\n", self.new_curve));
        out.push_str(&format!("# dt_s = {}\n", self.dt));
        out.push_str(&format!("# attack_time_s = {}\n", self.attack_time));
        out.push_str("t,V1,V2,V3,I1,I2,I3,Vd,Vq,Id,Iq,Q,curve\n");
        let pre_anchor = self.rows.first().map(|r| r.v_ang).unwrap_or(0.0);
        let post_anchor = self
            .rows
            .iter()
            .find(|r| r.curve_id == 1)
            .map(|r| r.v_ang)
            .unwrap_or(pre_anchor);
        for r in &self.rows {
            let anchor = if r.curve_id == 1 { post_anchor } else { pre_anchor };
            let (vd, vq, id, iq) = dq_at_step(r, anchor);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.t,
                r.v_mag,
                r.v_mag,
                r.v_mag,
                r.i_mag,
                r.i_mag,
                r.i_mag,
                vd,
                vq,
                id,
                iq,
                r.q,
                r.curve_id
            ));
        }
        fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Parse a file produced by [`SimTrace::write_csv`]. Phasor angles
    /// are recovered relative to each window's anchor, which is exactly
    /// what window re-extraction needs.
    pub fn read_csv(path: &Path) -> Result<SimTrace> {
        let text = fs::read_to_string(path)?;
        let mut dg = None;
        let mut old_curve = None;
        let mut new_curve = None;
        let mut dt = None;
        let mut attack_time = None;
        let mut rows = Vec::new();
        let mut saw_header = false;
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix('#') {
                let mut parts = meta.splitn(2, '=');
                let key = parts.next().unwrap_or("").trim();
                let value = parts.next().unwrap_or("").trim();
                match key {
                    "dg" => dg = Some(value.to_string()),
                    "old_curve" => old_curve = Some(value.parse::<DroopCurve>()?),
                    "new_curve" => new_curve = Some(value.parse::<DroopCurve>()?),
                    "dt_s" => dt = value.parse::<f64>().ok(),
                    "attack_time_s" => attack_time = value.parse::<f64>().ok(),
                    _ => {}
                }
                continue;
            }
            if !saw_header {
                saw_header = true; // column header
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CoreError::Format(format!("trace row {line:?}: {e}")))?;
            if f.len() != 13 {
                return Err(CoreError::Format(format!(
                    "trace row has {} columns, expected 13",
                    f.len()
                )));
            }
            let (vd, vq, id, iq) = (f[7], f[8], f[9], f[10]);
            rows.push(TraceRow {
                t: f[0],
                v_mag: f[1],
                v_ang: vq.atan2(vd),
                i_mag: f[4],
                i_ang: iq.atan2(id),
                q: f[11],
                curve_id: f[12] as u8,
            });
        }
        Ok(SimTrace {
            dg: dg.ok_or_else(|| CoreError::Format("trace missing dg metadata".into()))?,
            old_curve: old_curve
                .ok_or_else(|| CoreError::Format("trace missing old_curve metadata".into()))?,
            new_curve: new_curve
                .ok_or_else(|| CoreError::Format("trace missing new_curve metadata".into()))?,
            dt: dt.ok_or_else(|| CoreError::Format("trace missing dt_s metadata".into()))?,
            attack_time: attack_time
                .ok_or_else(|| CoreError::Format("trace missing attack_time_s metadata".into()))?,
            rows,
        })
    }
}

/// Run the closed loop with `new_curve` swapped in at the attack time.
pub fn run_closed_loop(
    model: &NetworkModel,
    dg: &str,
    params: &InverterParams,
    old_curve: &DroopCurve,
    new_curve: &DroopCurve,
    cfg: &ClosedLoopConfig,
) -> Result<SimTrace> {
    cfg.validate()?;
    params.validate()?;
    if (params.dt - cfg.dt_s).abs() > 1e-12 {
        return Err(CoreError::Domain(format!(
            "inverter control period {} disagrees with loop dt {}",
            params.dt, cfg.dt_s
        )));
    }
    let dut = model.dg(dg)?.node;
    let q_max = params.q_max()?;
    let companion = default_companion_curve();
    let alpha = (cfg.dt_s / params.tau).min(1.0);

    let n_steps = (cfg.duration_s / cfg.dt_s).round() as usize;
    let switch_step = (cfg.attack_time_s / cfg.dt_s).round() as usize;
    let record_from = switch_step.saturating_sub((cfg.record_pre_s / cfg.dt_s).round() as usize);

    let dg_nodes: Vec<usize> = model.dgs().iter().map(|d| d.node).collect();
    let dut_slot = dg_nodes
        .iter()
        .position(|&n| n == dut)
        .expect("dg under test is in the model's dg list");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noisy = cfg.noise_pu > 0.0;
    let load_nodes: Vec<(usize, Complex64)> = model
        .loads_pu()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.norm() > 0.0)
        .map(|(n, s)| (n, *s))
        .collect();

    let mut q = vec![0.0f64; dg_nodes.len()];
    let mut v_prev = vec![0.0f64; dg_nodes.len()];
    let mut warm = vec![Complex64::new(model.source_voltage(), 0.0); model.node_count()];
    let mut rows = Vec::with_capacity(n_steps - record_from);

    // Initial settled measurement for the delayed command evaluation.
    {
        let inj: Vec<Injection> = dg_nodes
            .iter()
            .map(|&n| Injection {
                bus: model.node_name(n).to_string(),
                p: params.p_ref,
                q: 0.0,
            })
            .collect();
        let sol = powerflow::solve(model, &inj, 1e-8, 60).map_err(|e| CoreError::Simulation {
            step: 0,
            source: Box::new(e),
        })?;
        for (slot, &n) in dg_nodes.iter().enumerate() {
            v_prev[slot] = sol.magnitude(n);
        }
        for k in 0..model.node_count() {
            warm[k] = sol.complex(k);
        }
    }

    for step in 0..n_steps {
        let t = step as f64 * cfg.dt_s;
        let mut inj: Vec<Injection> = dg_nodes
            .iter()
            .zip(&q)
            .map(|(&n, &qd)| Injection {
                bus: model.node_name(n).to_string(),
                p: params.p_ref,
                q: qd,
            })
            .collect();
        if noisy {
            for &(n, s) in &load_nodes {
                let u: f64 = rng.gen_range(-1.0..=1.0);
                let extra = -s * (cfg.noise_pu * u);
                inj.push(Injection {
                    bus: model.node_name(n).to_string(),
                    p: extra.re,
                    q: extra.im,
                });
            }
        }

        let sol = powerflow::solve_from(model, &inj, 1e-8, 60, warm.clone()).map_err(|e| {
            CoreError::Simulation {
                step,
                source: Box::new(e),
            }
        })?;
        for k in 0..model.node_count() {
            warm[k] = sol.complex(k);
        }

        if step >= record_from {
            let v = sol.complex(dut);
            let i = powerflow::pcc_current(
                model,
                &sol,
                &Injection {
                    bus: model.node_name(dut).to_string(),
                    p: params.p_ref,
                    q: q[dut_slot],
                },
            )?;
            rows.push(TraceRow {
                t,
                v_mag: v.norm(),
                v_ang: v.arg(),
                i_mag: i.norm(),
                i_ang: i.arg(),
                q: q[dut_slot],
                curve_id: if step >= switch_step { 1 } else { 0 },
            });
        }

        for (slot, &n) in dg_nodes.iter().enumerate() {
            let curve = if slot == dut_slot {
                if step >= switch_step {
                    new_curve
                } else {
                    old_curve
                }
            } else {
                &companion
            };
            let cmd = curve.q_ref(v_prev[slot], q_max);
            q[slot] += alpha * (cmd - q[slot]);
            v_prev[slot] = sol.magnitude(n);
        }
    }

    Ok(SimTrace {
        dg: dg.to_string(),
        old_curve: *old_curve,
        new_curve: *new_curve,
        dt: cfg.dt_s,
        attack_time: cfg.attack_time_s,
        rows,
    })
}
