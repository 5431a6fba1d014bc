//! Elastic-structure model of the spoked flexure.
//!
//! Each spoke is a cantilever loaded at its tip by the tangential force
//! produced by the hub torque. Tip compliance combines Euler–Bernoulli
//! bending with a Timoshenko shear term, and the spokes act in parallel on
//! the hub radius.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::{Error, Result};

/// Aluminium 7075 Young's modulus, Pa.
pub const E_AL7075: f64 = 71.7e9;
/// Aluminium 7075 shear modulus, Pa.
pub const G_AL7075: f64 = 26.9e9;
/// Shear correction factor for a rectangular section.
pub const KAPPA_RECT: f64 = 5.0 / 6.0;

/// Geometry and material of the flexure. Lengths in metres, moduli in pascals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamParams {
    /// Spoke length.
    pub l: f64,
    /// Spoke width (bending direction).
    pub b: f64,
    /// Spoke height.
    pub h: f64,
    /// Central ring radius.
    pub r_i: f64,
    /// Centre-to-sensor distance.
    pub l_s: f64,
    pub e: f64,
    pub g: f64,
    pub kappa: f64,
    pub n_spokes: u32,
}

impl Default for BeamParams {
    /// Flexure dimensions of the reference design with aluminium 7075.
    fn default() -> Self {
        Self {
            l: 21e-3,
            b: 4e-3,
            h: 7e-3,
            r_i: 19e-3,
            l_s: 30e-3,
            e: E_AL7075,
            g: G_AL7075,
            kappa: KAPPA_RECT,
            n_spokes: 4,
        }
    }
}

impl BeamParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("l", self.l),
            ("b", self.b),
            ("h", self.h),
            ("r_i", self.r_i),
            ("l_s", self.l_s),
            ("E", self.e),
            ("G", self.g),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::domain(field, format!("must be finite and > 0, got {value}")));
            }
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::domain("kappa", format!("must lie in (0, 1], got {}", self.kappa)));
        }
        if self.n_spokes < 3 {
            return Err(Error::domain("n_spokes", format!("need at least 3, got {}", self.n_spokes)));
        }
        Ok(())
    }

    /// Cross-sectional area `b·h`.
    pub fn area(&self) -> f64 {
        self.b * self.h
    }

    /// Second moment of area about the bending axis, `h·b³/12`.
    pub fn second_moment(&self) -> f64 {
        self.h * self.b.powi(3) / 12.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessResult {
    /// Single-spoke tip stiffness, N/m.
    pub k_b: f64,
    /// Hub torsional stiffness, N·m/rad. Zero until [`torsional_stiffness`] fills it.
    pub k_t: f64,
    pub area: f64,
    pub second_moment: f64,
    /// `l³/(3EI)`, m/N.
    pub compliance_bending: f64,
    /// `l/(κGA)`, m/N.
    pub compliance_shear: f64,
}

impl StiffnessResult {
    /// Fraction of total tip compliance contributed by shear.
    pub fn shear_fraction(&self) -> f64 {
        self.compliance_shear / (self.compliance_bending + self.compliance_shear)
    }
}

/// Tip stiffness of one spoke: bending and shear compliances in series.
pub fn spoke_stiffness(p: &BeamParams) -> Result<StiffnessResult> {
    p.validate()?;
    let area = p.area();
    let second_moment = p.second_moment();
    let compliance_bending = p.l.powi(3) / (3.0 * p.e * second_moment);
    let compliance_shear = p.l / (p.kappa * p.g * area);
    Ok(StiffnessResult {
        k_b: 1.0 / (compliance_bending + compliance_shear),
        k_t: 0.0,
        area,
        second_moment,
        compliance_bending,
        compliance_shear,
    })
}

/// Hub torsional stiffness `n·r_i²·k_b`.
///
/// The tangential tip force acts at the ring radius and the hub rotation
/// displaces each tip by `r_i·θ`, so both lever arms are `r_i`.
pub fn torsional_stiffness(p: &BeamParams) -> Result<StiffnessResult> {
    let mut s = spoke_stiffness(p)?;
    s.k_t = f64::from(p.n_spokes) * p.r_i * p.r_i * s.k_b;
    Ok(s)
}

/// Hub rotation `T/K_t` under torque `torque`.
pub fn torque_to_angle(k_t: f64, torque: f64) -> Result<f64> {
    if !(k_t.is_finite() && k_t > 0.0) {
        return Err(Error::domain("K_t", format!("must be > 0, got {k_t}")));
    }
    Ok(torque / k_t)
}

/// First torsional mode `sqrt(k_z/J_z)/(2π)` of the central part, Hz.
pub fn torsional_natural_frequency(k_z: f64, j_z: f64) -> Result<f64> {
    if !(k_z.is_finite() && k_z > 0.0) {
        return Err(Error::domain("k_z", format!("must be > 0, got {k_z}")));
    }
    if !(j_z.is_finite() && j_z > 0.0) {
        return Err(Error::domain("J_z", format!("must be > 0, got {j_z}")));
    }
    Ok((k_z / j_z).sqrt() / (2.0 * PI))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Values frozen from an independent scalar calculation of the
    // cantilever formulas for the default flexure.
    const KB_ORACLE: f64 = 842_673.010_536_525_7;
    const KT_ORACLE: f64 = 1_216.819_827_214_743;
    const CB_ORACLE: f64 = 1.153_242_677_824_267_6e-6;
    const CS_ORACLE: f64 = 3.345_724_907_063_197e-8;

    #[test]
    fn unit_compliances_in_series_halve_stiffness() {
        // l³/(3EI) = 1 and l/(κGA) = 1 with l = b = h = 1.
        let p = BeamParams {
            l: 1.0,
            b: 1.0,
            h: 1.0,
            r_i: 1.0,
            l_s: 1.0,
            e: 4.0,          // I = 1/12 so 3EI = 1
            g: 1.0 / 0.5,    // κGA = 0.5·2·1 = 1
            kappa: 0.5,
            n_spokes: 4,
        };
        let s = spoke_stiffness(&p).unwrap();
        assert_relative_eq!(s.compliance_bending, 1.0, max_relative = 1e-15);
        assert_relative_eq!(s.compliance_shear, 1.0, max_relative = 1e-15);
        assert_relative_eq!(s.k_b, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn default_flexure_matches_oracle() {
        let s = torsional_stiffness(&BeamParams::default()).unwrap();
        assert_relative_eq!(s.compliance_bending, CB_ORACLE, max_relative = 1e-12);
        assert_relative_eq!(s.compliance_shear, CS_ORACLE, max_relative = 1e-12);
        assert_relative_eq!(s.k_b, KB_ORACLE, max_relative = 1e-12);
        assert_relative_eq!(s.k_t, KT_ORACLE, max_relative = 1e-12);
        assert!(s.shear_fraction() < 0.035);
        assert_relative_eq!(s.shear_fraction(), 0.028_193_520_798_619_82, max_relative = 1e-9);
    }

    #[test]
    fn bending_only_stiffness_scales_with_modulus() {
        let mut p = BeamParams {
            g: 1e30,
            ..BeamParams::default()
        };
        let k1 = spoke_stiffness(&p).unwrap().k_b;
        p.e *= 2.0;
        let k2 = spoke_stiffness(&p).unwrap().k_b;
        assert_relative_eq!(k2 / k1, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn torsional_stiffness_unit_and_spoke_count() {
        // k_b = 1 N/m via two half compliances, r_i = 1.
        let p = BeamParams {
            l: 1.0,
            b: 1.0,
            h: 1.0,
            r_i: 1.0,
            l_s: 1.0,
            e: 8.0,
            g: 4.0,
            kappa: 0.5,
            n_spokes: 4,
        };
        let s4 = torsional_stiffness(&p).unwrap();
        assert_relative_eq!(s4.k_b, 1.0, max_relative = 1e-15);
        assert_relative_eq!(s4.k_t, 4.0, max_relative = 1e-15);
        let s3 = torsional_stiffness(&BeamParams { n_spokes: 3, ..p }).unwrap();
        assert_eq!(s3.k_t / s4.k_t, 0.75);
    }

    #[test]
    fn angle_examples() {
        assert_relative_eq!(
            torque_to_angle(KT_ORACLE, 25.0).unwrap(),
            0.020_545_358_845_133_303,
            max_relative = 1e-12
        );
        assert_eq!(torque_to_angle(1216.8, 0.0).unwrap(), 0.0);
        assert_eq!(torque_to_angle(2.0, -4.0).unwrap(), -2.0);
        assert!(torque_to_angle(0.0, 1.0).is_err());
        assert!(torque_to_angle(-1.0, 1.0).is_err());
    }

    #[test]
    fn natural_frequency_examples() {
        let f = torsional_natural_frequency(4.0 * PI * PI, 1.0).unwrap();
        assert!((f - 1.0).abs() < 1e-12);
        // J_z back-solved so the default flexure lands near the ~6 kHz mode.
        let f = torsional_natural_frequency(KT_ORACLE, 8.6e-7).unwrap();
        assert_relative_eq!(f, 5_986.652_430_005_658, max_relative = 1e-9);
        assert!((f - 5975.0).abs() / 5975.0 < 0.01);
        let f1 = torsional_natural_frequency(3.0, 2.0).unwrap();
        let f4 = torsional_natural_frequency(12.0, 2.0).unwrap();
        assert_relative_eq!(f4 / f1, 2.0, max_relative = 1e-14);
        assert!(torsional_natural_frequency(0.0, 1.0).is_err());
        assert!(torsional_natural_frequency(1.0, -1.0).is_err());
    }

    #[test]
    fn validation_names_field() {
        let err = spoke_stiffness(&BeamParams {
            h: -1.0,
            ..BeamParams::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains('h'), "{err}");
        let err = spoke_stiffness(&BeamParams {
            e: 0.0,
            ..BeamParams::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Domain { field: "E", .. }));
        assert!(spoke_stiffness(&BeamParams {
            kappa: 1.5,
            ..BeamParams::default()
        })
        .is_err());
        assert!(spoke_stiffness(&BeamParams {
            n_spokes: 2,
            ..BeamParams::default()
        })
        .is_err());
    }

    proptest! {
        #[test]
        fn stiffness_decreases_with_length(l in 5e-3f64..50e-3, dl in 1e-4f64..10e-3) {
            let p = BeamParams { l, ..BeamParams::default() };
            let q = BeamParams { l: l + dl, ..BeamParams::default() };
            prop_assert!(spoke_stiffness(&q).unwrap().k_b < spoke_stiffness(&p).unwrap().k_b);
        }

        #[test]
        fn angle_round_trip(t in -100.0f64..100.0, r in 10e-3f64..40e-3, n in 3u32..9) {
            let p = BeamParams { r_i: r, n_spokes: n, ..BeamParams::default() };
            let kt = torsional_stiffness(&p).unwrap().k_t;
            let back = torque_to_angle(kt, t).unwrap() * kt;
            prop_assert!((back - t).abs() <= 1e-12 * t.abs().max(1e-300));
            // linear in spoke count
            let k1 = torsional_stiffness(&BeamParams { n_spokes: 1 + 2, ..p }).unwrap().k_t;
            prop_assert!((kt / k1 - f64::from(n) / 3.0).abs() < 1e-12);
        }
    }
}
