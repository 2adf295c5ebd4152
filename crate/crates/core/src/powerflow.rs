//! Backward/forward-sweep power flow for radial networks.
//!
//! The backward pass accumulates branch currents from the leaves with
//! constant-PQ loads and injections evaluated at the present voltage
//! estimate; the forward pass re-propagates voltages from the slack
//! node. Iteration stops when the per-bus complex power mismatch drops
//! below tolerance.

use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::grid::NetworkModel;

/// Power injected into the grid at a bus (positive = injected), pu.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub bus: String,
    pub p: f64,
    pub q: f64,
}

/// Converged complex voltages, one per solve-tree node.
#[derive(Clone, Debug)]
pub struct BusVoltages {
    v: Vec<Complex64>,
    iterations: usize,
    mismatch: f64,
}

impl BusVoltages {
    pub fn complex(&self, node: usize) -> Complex64 {
        self.v[node]
    }

    pub fn magnitude(&self, node: usize) -> f64 {
        self.v[node].norm()
    }

    pub fn angle(&self, node: usize) -> f64 {
        self.v[node].arg()
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Largest per-bus complex power mismatch at the returned solution.
    pub fn mismatch(&self) -> f64 {
        self.mismatch
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

fn net_injections(model: &NetworkModel, injections: &[Injection]) -> Result<Vec<Complex64>> {
    let mut s = vec![Complex64::new(0.0, 0.0); model.node_count()];
    for (n, load) in model.loads_pu().iter().enumerate() {
        s[n] -= load;
    }
    for inj in injections {
        let n = model.node_index(&inj.bus)?;
        s[n] += Complex64::new(inj.p, inj.q);
    }
    Ok(s)
}

/// Solve the network for the given injections on top of the model's loads.
pub fn solve(
    model: &NetworkModel,
    injections: &[Injection],
    tol: f64,
    max_iter: usize,
) -> Result<BusVoltages> {
    let start = vec![
        Complex64::new(model.source_voltage(), 0.0);
        model.node_count()
    ];
    solve_from(model, injections, tol, max_iter, start)
}

/// Same as [`solve`] but warm-started from a previous solution's voltages.
pub fn solve_from(
    model: &NetworkModel,
    injections: &[Injection],
    tol: f64,
    max_iter: usize,
    start: Vec<Complex64>,
) -> Result<BusVoltages> {
    if tol <= 0.0 {
        return Err(CoreError::Domain("tolerance must be positive".into()));
    }
    if max_iter == 0 {
        return Err(CoreError::Domain("max_iter must be at least 1".into()));
    }
    let n = model.node_count();
    if start.len() != n {
        return Err(CoreError::Domain("start vector length mismatch".into()));
    }
    let s_net = net_injections(model, injections)?;
    let order = model.sweep_order();
    let slack_v = Complex64::new(model.source_voltage(), 0.0);

    let mut v = start;
    v[0] = slack_v;
    let mut branch_i = vec![Complex64::new(0.0, 0.0); n];
    let mut node_i = vec![Complex64::new(0.0, 0.0); n];
    let mut last_mismatch = f64::INFINITY;

    for iter in 0..max_iter {
        // Backward: accumulate demand currents leaf-to-root. The branch
        // into node k carries the whole subtree under k.
        for &k in order.iter().rev() {
            node_i[k] = (-s_net[k] / v[k]).conj();
            branch_i[k] += node_i[k];
            if k != 0 {
                let p = model.parent(k);
                let acc = branch_i[k];
                branch_i[p] += acc;
            }
        }
        // Forward: re-propagate voltages from the slack node.
        for &k in order.iter() {
            if k == 0 {
                continue;
            }
            let p = model.parent(k);
            v[k] = v[p] - model.branch_impedance(k) * branch_i[k];
            let mag = v[k].norm();
            if mag < 0.5 {
                return Err(CoreError::Infeasible {
                    bus: model.node_name(k).to_string(),
                    v_mag: mag,
                });
            }
        }
        // Mismatch: power drawn by the fixed node currents at the new
        // voltages vs the specified net injections.
        let mut mismatch: f64 = 0.0;
        for &k in order.iter() {
            if k == 0 {
                continue;
            }
            let s_calc = v[k] * node_i[k].conj();
            mismatch = mismatch.max((s_calc + s_net[k]).norm());
        }
        last_mismatch = mismatch;
        for b in branch_i.iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        if mismatch < tol {
            return Ok(BusVoltages {
                v,
                iterations: iter + 1,
                mismatch,
            });
        }
    }
    Err(CoreError::Convergence {
        iterations: max_iter,
        mismatch: last_mismatch,
    })
}

/// Inverter terminal current phasor: I = conj(S / V) at the PCC node.
pub fn pcc_current(
    model: &NetworkModel,
    voltages: &BusVoltages,
    injection: &Injection,
) -> Result<Complex64> {
    let node = model.node_index(&injection.bus)?;
    let v = voltages.complex(node);
    if v.norm() == 0.0 {
        return Err(CoreError::Domain(format!(
            "zero voltage at bus {}; current undefined",
            injection.bus
        )));
    }
    Ok((Complex64::new(injection.p, injection.q) / v).conj())
}

/// Complex power delivered by the slack source into the network.
pub fn source_power(model: &NetworkModel, voltages: &BusVoltages) -> Complex64 {
    // Branch current into the substation equals the source current;
    // recompute it from the voltage drop over the source branch.
    let substation = model
        .sweep_order()
        .iter()
        .copied()
        .find(|&k| k != 0 && model.parent(k) == 0)
        .expect("source feeds one substation bus");
    let z = model.branch_impedance(substation);
    let i = (voltages.complex(0) - voltages.complex(substation)) / z;
    voltages.complex(0) * i.conj()
}

/// Total series losses at the solution.
pub fn total_losses(model: &NetworkModel, voltages: &BusVoltages) -> Complex64 {
    let mut losses = Complex64::new(0.0, 0.0);
    for &k in model.sweep_order() {
        if k == 0 {
            continue;
        }
        let p = model.parent(k);
        let z = model.branch_impedance(k);
        if z.norm() == 0.0 {
            continue;
        }
        let i = (voltages.complex(p) - voltages.complex(k)) / z;
        losses += z * i.norm_sqr();
    }
    losses
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{calibrate_load_scale, NetworkConfig, NetworkModel};

    fn unloaded_benchmark() -> NetworkModel {
        let mut cfg = NetworkConfig::benchmark();
        cfg.loads.clear();
        NetworkModel::from_config(&cfg).unwrap()
    }

    #[test]
    fn no_load_no_injection_gives_flat_profile() {
        let model = unloaded_benchmark();
        let sol = solve(&model, &[], 1e-10, 50).unwrap();
        for k in 0..model.node_count() {
            assert_eq!(sol.magnitude(k), model.source_voltage());
            assert_eq!(sol.angle(k), 0.0);
        }
    }

    #[test]
    fn single_far_load_drops_voltage() {
        let model = unloaded_benchmark();
        let inj = [Injection {
            bus: "5".into(),
            p: -0.1,
            q: 0.0,
        }];
        let sol = solve(&model, &inj, 1e-10, 50).unwrap();
        let n5 = model.node_index("5").unwrap();
        assert!(sol.magnitude(n5) < model.source_voltage());
    }

    #[test]
    fn passive_feeder_voltage_is_monotone_from_source() {
        let model = NetworkModel::benchmark();
        let sol = solve(&model, &[], 1e-10, 50).unwrap();
        for feeder in [["1", "2", "3", "4", "5"], ["1", "6", "7", "8", "9"]] {
            let mags: Vec<f64> = feeder
                .iter()
                .map(|b| sol.magnitude(model.node_index(b).unwrap()))
                .collect();
            for w in mags.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{mags:?}");
            }
        }
    }

    #[test]
    fn reactive_injection_raises_voltage_per_thevenin() {
        let model = NetworkModel::benchmark();
        let dq = 0.05;
        let base = solve(&model, &[], 1e-10, 50).unwrap();
        let inj = [Injection {
            bus: "pcc4".into(),
            p: 0.0,
            q: dq,
        }];
        let bumped = solve(&model, &inj, 1e-10, 50).unwrap();
        let n = model.node_index("pcc4").unwrap();
        let dv = bumped.magnitude(n) - base.magnitude(n);
        assert!(dv > 0.0);
        let x_th = model.thevenin_sensitivity("pcc4").unwrap().im;
        let predicted = x_th * dq;
        assert!(
            (dv - predicted).abs() / predicted < 0.05,
            "dv = {dv}, predicted = {predicted}"
        );
    }

    #[test]
    fn thevenin_matches_numerical_sensitivity_within_5_percent() {
        let model = NetworkModel::benchmark();
        let delta = 1e-4;
        let n = model.node_index("pcc4").unwrap();
        let v0 = solve(&model, &[], 1e-11, 50).unwrap().magnitude(n);
        let inj = [Injection {
            bus: "pcc4".into(),
            p: 0.0,
            q: delta,
        }];
        let v1 = solve(&model, &inj, 1e-11, 50).unwrap().magnitude(n);
        let numeric = (v1 - v0) / delta;
        let x_th = model.thevenin_sensitivity("pcc4").unwrap().im;
        assert!(
            (numeric - x_th).abs() / x_th < 0.05,
            "numeric = {numeric}, x_th = {x_th}"
        );
    }

    #[test]
    fn power_balance_holds_at_convergence() {
        let model = NetworkModel::benchmark();
        let inj = [
            Injection {
                bus: "pcc4".into(),
                p: 0.02,
                q: 0.03,
            },
            Injection {
                bus: "pcc9".into(),
                p: 0.05,
                q: -0.02,
            },
        ];
        let tol = 1e-9;
        let sol = solve(&model, &inj, tol, 60).unwrap();
        let src = source_power(&model, &sol);
        let losses = total_losses(&model, &sol);
        let mut net = Complex64::new(0.0, 0.0);
        for load in model.loads_pu() {
            net += load;
        }
        for i in &inj {
            net -= Complex64::new(i.p, i.q);
        }
        let residual = (src - net - losses).norm();
        assert!(residual < 10.0 * tol, "residual = {residual:.3e}");
    }

    #[test]
    fn pcc_current_basics() {
        let model = NetworkModel::benchmark();
        let sol = solve(&model, &[], 1e-10, 50).unwrap();
        let zero = Injection {
            bus: "pcc4".into(),
            p: 0.0,
            q: 0.0,
        };
        assert_eq!(pcc_current(&model, &sol, &zero).unwrap().norm(), 0.0);

        // P = 0.1, Q = 0 at |V| = 1: |I| = 0.1.
        let mut cfg = NetworkConfig::benchmark();
        cfg.loads.clear();
        cfg.source.voltage_pu = 1.0;
        let flat = NetworkModel::from_config(&cfg).unwrap();
        let flat_sol = solve(&flat, &[], 1e-10, 50).unwrap();
        let i = pcc_current(
            &flat,
            &flat_sol,
            &Injection {
                bus: "pcc4".into(),
                p: 0.1,
                q: 0.0,
            },
        )
        .unwrap();
        assert!((i.norm() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn divergent_case_reports_convergence_error() {
        let model = NetworkModel::benchmark();
        // Absurd load forces collapse or non-convergence.
        let inj = [Injection {
            bus: "5".into(),
            p: -30.0,
            q: -30.0,
        }];
        let err = solve(&model, &inj, 1e-10, 30).unwrap_err();
        assert!(matches!(
            err,
            CoreError::Convergence { .. } | CoreError::Infeasible { .. }
        ));
    }

    #[test]
    fn calibration_pins_dg1_pcc_voltage() {
        let model = NetworkModel::benchmark();
        let (scale, calibrated) =
            calibrate_load_scale(&model, "4", 0.02, 1.011, 1e-4).unwrap();
        assert!(scale > 0.0 && scale < 4.0);
        let inj: Vec<Injection> = calibrated
            .dgs()
            .iter()
            .map(|d| Injection {
                bus: calibrated.node_name(d.node).to_string(),
                p: 0.02,
                q: 0.0,
            })
            .collect();
        let sol = solve(&calibrated, &inj, 1e-10, 80).unwrap();
        let v = sol.magnitude(calibrated.dg("4").unwrap().node);
        assert!((v - 1.011).abs() < 1e-3, "v = {v}");
    }
}
