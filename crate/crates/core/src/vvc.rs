//! Volt-VAr droop curves and the inverter's reactive-power command.
//!
//! A droop curve is the piecewise-linear map from measured PCC voltage
//! to commanded reactive power: full injection below `va`, declining to
//! zero at `vb`, a dead band to `vc`, then declining absorption that
//! saturates at `vd`. An inverted curve flips the output sign, the
//! abnormal shape used by setpoint-manipulation attacks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Sanity window for breakpoints, pu.
const V_WINDOW: (f64, f64) = (0.5, 1.5);

/// Droop setpoints (pu) plus orientation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroopCurve {
    va: f64,
    vb: f64,
    vc: f64,
    vd: f64,
    #[serde(default)]
    inverted: bool,
}

impl DroopCurve {
    /// Validates ordering (`va < vb <= vc < vd`; the sloped segments must
    /// have positive width) and the sanity window.
    pub fn new(va: f64, vb: f64, vc: f64, vd: f64) -> Result<Self> {
        Self::with_orientation(va, vb, vc, vd, false)
    }

    pub fn with_orientation(va: f64, vb: f64, vc: f64, vd: f64, inverted: bool) -> Result<Self> {
        for (name, v) in [("va", va), ("vb", vb), ("vc", vc), ("vd", vd)] {
            if !v.is_finite() || v <= V_WINDOW.0 || v >= V_WINDOW.1 {
                return Err(CoreError::MalformedCurve(format!(
                    "{name} = {v} outside ({}, {}) pu",
                    V_WINDOW.0, V_WINDOW.1
                )));
            }
        }
        if !(va < vb) {
            return Err(CoreError::MalformedCurve(format!(
                "va = {va} must be strictly below vb = {vb}"
            )));
        }
        if !(vb <= vc) {
            return Err(CoreError::MalformedCurve(format!(
                "vb = {vb} must not exceed vc = {vc}"
            )));
        }
        if !(vc < vd) {
            return Err(CoreError::MalformedCurve(format!(
                "vc = {vc} must be strictly below vd = {vd}"
            )));
        }
        Ok(DroopCurve {
            va,
            vb,
            vc,
            vd,
            inverted,
        })
    }

    pub fn va(&self) -> f64 {
        self.va
    }
    pub fn vb(&self) -> f64 {
        self.vb
    }
    pub fn vc(&self) -> f64 {
        self.vc
    }
    pub fn vd(&self) -> f64 {
        self.vd
    }
    pub fn is_inverted(&self) -> bool {
        self.inverted
    }

    /// +1 for the standard stabilizing shape, -1 when inverted.
    pub fn orientation(&self) -> f64 {
        if self.inverted {
            -1.0
        } else {
            1.0
        }
    }

    pub fn breakpoints(&self) -> [f64; 4] {
        [self.va, self.vb, self.vc, self.vd]
    }

    /// Component-wise shifted copy (attack vector addition); re-validated.
    pub fn shifted(&self, alpha: [f64; 4]) -> Result<Self> {
        Self::with_orientation(
            self.va + alpha[0],
            self.vb + alpha[1],
            self.vc + alpha[2],
            self.vd + alpha[3],
            self.inverted,
        )
    }

    /// Copy with replaced interior breakpoints; `va`/`vd` untouched.
    pub fn with_interior(&self, vb: f64, vc: f64) -> Result<Self> {
        Self::with_orientation(self.va, vb, vc, self.vd, self.inverted)
    }

    /// Orientation-flipped copy.
    pub fn flipped(&self) -> Self {
        DroopCurve {
            inverted: !self.inverted,
            ..*self
        }
    }

    /// Reactive-power command (pu, positive = injected) at measured
    /// voltage `v`, saturating at `q_max`.
    pub fn q_ref(&self, v: f64, q_max: f64) -> f64 {
        let q = if v < self.va {
            q_max
        } else if v < self.vb {
            q_max * (self.vb - v) / (self.vb - self.va)
        } else if v < self.vc {
            0.0
        } else if v < self.vd {
            -q_max * (v - self.vc) / (self.vd - self.vc)
        } else {
            -q_max
        };
        self.orientation() * q
    }

    /// Signed local slope dQ/dv (pu/pu) of the segment containing `v`
    /// (segments taken right-continuous, saturation and dead band are
    /// flat).
    pub fn slope_at(&self, v: f64, q_max: f64) -> f64 {
        let s = if v < self.va {
            0.0
        } else if v < self.vb {
            -q_max / (self.vb - self.va)
        } else if v < self.vc {
            0.0
        } else if v < self.vd {
            -q_max / (self.vd - self.vc)
        } else {
            0.0
        };
        self.orientation() * s
    }

    /// Slopes of the two inclined segments, orientation-adjusted.
    pub fn segment_slopes(&self, q_max: f64) -> (f64, f64) {
        (
            self.orientation() * (-q_max / (self.vb - self.va)),
            self.orientation() * (-q_max / (self.vd - self.vc)),
        )
    }

    /// End-to-end chord slope: the slope of the line joining the curve's
    /// endpoints (va, +q_max) and (vd, -q_max). Invariant under curve
    /// translation and under interior-breakpoint manipulation, which is
    /// what makes chord-based screening bypassable.
    pub fn chord_slope(&self, q_max: f64) -> f64 {
        self.orientation() * (-2.0 * q_max / (self.vd - self.va))
    }
}

impl fmt::Display for DroopCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.va, self.vb, self.vc, self.vd)?;
        if self.inverted {
            write!(f, ",inverted")?;
        }
        Ok(())
    }
}

impl FromStr for DroopCurve {
    type Err = CoreError;

    /// Parses `va,vb,vc,vd` with an optional trailing `inverted` flag.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 && parts.len() != 5 {
            return Err(CoreError::MalformedCurve(format!(
                "expected va,vb,vc,vd[,inverted], got {s:?}"
            )));
        }
        let mut vals = [0.0; 4];
        for (i, p) in parts[..4].iter().enumerate() {
            vals[i] = p
                .parse::<f64>()
                .map_err(|_| CoreError::MalformedCurve(format!("breakpoint {p:?} is not a number")))?;
        }
        let inverted = match parts.get(4) {
            None => false,
            Some(&"inverted") => true,
            Some(other) => {
                return Err(CoreError::MalformedCurve(format!(
                    "unknown flag {other:?}"
                )))
            }
        };
        Self::with_orientation(vals[0], vals[1], vals[2], vals[3], inverted)
    }
}

/// Inverter electrical parameters, pu on the system base.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverterParams {
    /// Rated apparent power.
    pub s_max: f64,
    /// Active-power reference.
    pub p_ref: f64,
    /// First-order response time constant, s.
    pub tau: f64,
    /// Control period, s.
    pub dt: f64,
}

impl InverterParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=self.s_max).contains(&self.p_ref) {
            return Err(CoreError::Domain(format!(
                "p_ref = {} outside [0, s_max = {}]",
                self.p_ref, self.s_max
            )));
        }
        if self.tau <= 0.0 || self.dt <= 0.0 {
            return Err(CoreError::Domain("tau and dt must be positive".into()));
        }
        Ok(())
    }

    /// Maximum available reactive power given the rating and the active
    /// output: sqrt(s_max^2 - p_ref^2).
    pub fn q_max(&self) -> Result<f64> {
        if self.p_ref > self.s_max {
            return Err(CoreError::Domain(format!(
                "p_ref = {} exceeds s_max = {}",
                self.p_ref, self.s_max
            )));
        }
        Ok((self.s_max * self.s_max - self.p_ref * self.p_ref).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_curve() -> DroopCurve {
        DroopCurve::new(0.95, 0.98, 1.02, 1.05).unwrap()
    }

    fn attack_curve() -> DroopCurve {
        DroopCurve::new(0.95, 1.02, 1.04, 1.05).unwrap()
    }

    #[test]
    fn q_max_examples() {
        let q = |s_max: f64, p_ref: f64| {
            InverterParams {
                s_max,
                p_ref,
                tau: 0.1,
                dt: 0.1,
            }
            .q_max()
            .unwrap()
        };
        assert_eq!(q(1.0, 0.0), 1.0);
        assert!((q(0.1, 0.08) - 0.06).abs() < 1e-15);
        assert_eq!(q(0.1, 0.1), 0.0);
    }

    #[test]
    fn q_max_rejects_p_ref_above_rating() {
        let p = InverterParams {
            s_max: 0.1,
            p_ref: 0.2,
            tau: 0.1,
            dt: 0.1,
        };
        assert!(p.q_max().is_err());
    }

    #[test]
    fn droop_examples() {
        let c = paper_curve();
        assert_eq!(c.q_ref(1.00, 0.06), 0.0);
        assert!((c.q_ref(1.035, 0.06) - (-0.03)).abs() < 1e-15);

        // Post-attack operating point ends up on the injecting segment.
        let a = attack_curve();
        let expected = 0.06 * (1.02 - 1.011) / (1.02 - 0.95);
        assert!((a.q_ref(1.011, 0.06) - expected).abs() < 1e-15);
        assert!(a.q_ref(1.011, 0.06) > 0.0);
    }

    #[test]
    fn segment_slope_examples() {
        let (lo, hi) = paper_curve().segment_slopes(1.0);
        assert!((lo - (-1.0 / 0.03)).abs() < 1e-9);
        assert!((hi - (-1.0 / 0.03)).abs() < 1e-9);

        let (lo, hi) = attack_curve().segment_slopes(1.0);
        assert!((lo - (-1.0 / 0.07)).abs() < 1e-9);
        assert!((hi - (-100.0)).abs() < 1e-9);

        let wide = DroopCurve::new(0.90, 0.99, 1.01, 1.10).unwrap();
        let (lo, hi) = wide.segment_slopes(1.0);
        assert!((lo - (-1.0 / 0.09)).abs() < 1e-9);
        assert!((hi - (-1.0 / 0.09)).abs() < 1e-9);
    }

    #[test]
    fn chord_slope_examples() {
        assert!((paper_curve().chord_slope(1.0) - (-20.0)).abs() < 1e-12);
        // Interior manipulation leaves the chord untouched.
        assert!((attack_curve().chord_slope(1.0) - (-20.0)).abs() < 1e-12);
        // Whole-curve translation leaves the chord untouched.
        let shifted = paper_curve().shifted([0.01; 4]).unwrap();
        assert!((shifted.chord_slope(1.0) - (-20.0)).abs() < 1e-12);
    }

    #[test]
    fn stealth_interior_change_steepens_segment_but_keeps_chord() {
        let pre = paper_curve();
        let post = pre.with_interior(1.02, 1.04).unwrap();
        assert_eq!(pre.chord_slope(1.0), post.chord_slope(1.0));
        let steepening = post.segment_slopes(1.0).1 / pre.segment_slopes(1.0).1;
        assert!((steepening - 3.0).abs() < 1e-9);
    }

    #[test]
    fn parse_and_display_round_trip() {
        let c: DroopCurve = "0.95,0.98,1.02,1.05".parse().unwrap();
        assert_eq!(c, paper_curve());
        let i: DroopCurve = "0.95, 0.98, 1.02, 1.05, inverted".parse().unwrap();
        assert!(i.is_inverted());
        assert_eq!(i.to_string().parse::<DroopCurve>().unwrap(), i);
    }

    #[test]
    fn malformed_orderings_are_rejected() {
        assert!(DroopCurve::new(0.98, 0.95, 1.02, 1.05).is_err());
        assert!(DroopCurve::new(0.95, 0.95, 1.02, 1.05).is_err()); // va = vb
        assert!(DroopCurve::new(0.95, 0.98, 1.05, 1.05).is_err()); // vc = vd
        assert!(DroopCurve::new(0.95, 1.03, 1.02, 1.05).is_err()); // vb > vc
        assert!(DroopCurve::new(0.30, 0.98, 1.02, 1.05).is_err()); // window
        assert!("0.95,0.98,1.02".parse::<DroopCurve>().is_err());
        assert!("a,b,c,d".parse::<DroopCurve>().is_err());
        // Zero-width dead band is allowed.
        assert!(DroopCurve::new(0.95, 1.0, 1.0, 1.05).is_ok());
    }

    #[test]
    fn inverted_flips_sign() {
        let c = paper_curve().flipped();
        assert!(c.q_ref(0.90, 1.0) < 0.0);
        assert!(c.q_ref(1.10, 1.0) > 0.0);
        assert_eq!(c.q_ref(1.0, 1.0), 0.0);
    }

    fn arbitrary_curve() -> impl Strategy<Value = DroopCurve> {
        // Build from ordered gaps so ordering invariants hold by
        // construction.
        (
            0.55f64..1.30,
            1e-4f64..0.2,
            0.0f64..0.1,
            1e-4f64..0.2,
            proptest::bool::ANY,
        )
            .prop_filter_map("inside window", |(va, w1, w2, w3, inv)| {
                let vb = va + w1;
                let vc = vb + w2;
                let vd = vc + w3;
                DroopCurve::with_orientation(va, vb, vc, vd, inv).ok()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn continuity_at_breakpoints(c in arbitrary_curve(), q_max in 0.0f64..1.0) {
            // One-sided finite difference: the discrepancy of a truly
            // continuous piecewise-linear map is bounded by slope * eps.
            let eps = 1e-12;
            let (s1, s2) = c.segment_slopes(q_max);
            let tol = 1e-12 + eps * s1.abs().max(s2.abs());
            for v in c.breakpoints() {
                let left = c.q_ref(v - eps, q_max);
                let right = c.q_ref(v, q_max);
                prop_assert!((left - right).abs() <= tol,
                    "jump at {v}: {left} vs {right}");
            }
        }

        #[test]
        fn monotone_and_saturating(c in arbitrary_curve(), q_max in 0.0f64..1.0) {
            let mut prev = None;
            for i in 0..=200 {
                let v = 0.5 + i as f64 * 0.005;
                let q = c.q_ref(v, q_max);
                prop_assert!(q.abs() <= q_max + 1e-15);
                if let Some(p) = prev {
                    if c.is_inverted() {
                        prop_assert!(q >= p - 1e-15);
                    } else {
                        prop_assert!(q <= p + 1e-15);
                    }
                }
                prev = Some(q);
            }
        }

        #[test]
        fn dead_band_is_zero(c in arbitrary_curve(), q_max in 0.0f64..1.0, t in 0.0f64..1.0) {
            // Sample inside [vb, vc); skip zero-width dead bands.
            if c.vc() > c.vb() {
                let v = c.vb() + t * (c.vc() - c.vb()) * 0.999;
                prop_assert_eq!(c.q_ref(v, q_max), 0.0);
            }
        }

        #[test]
        fn translation_invariance(c in arbitrary_curve(), q_max in 0.01f64..1.0, d in -0.02f64..0.02) {
            if let Ok(shifted) = c.shifted([d; 4]) {
                prop_assert!((c.chord_slope(q_max) - shifted.chord_slope(q_max)).abs() < 1e-9);
                let (a0, b0) = c.segment_slopes(q_max);
                let (a1, b1) = shifted.segment_slopes(q_max);
                prop_assert!((a0 - a1).abs() < 1e-6 * a0.abs());
                prop_assert!((b0 - b1).abs() < 1e-6 * b0.abs());
            }
        }
    }
}
