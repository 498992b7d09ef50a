//! Inversion-recovery signal model.
//!
//! `I = PD * (1 - 2 exp(-TI/T1) + exp(-TR/T1))`, evaluated in double
//! precision and kept signed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qmapfit::QuantMaps;
use crate::volume::ScalarVolume;

pub const DEFAULT_TR: f64 = 4000.0;
pub const MPRAGE_TI: f64 = 1400.0;
pub const FGATIR_TI: f64 = 400.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    /// Repetition time, ms.
    pub tr: f64,
    /// Inversion time, ms.
    pub ti: f64,
    /// Echo time, ms. Metadata only.
    #[serde(default)]
    pub te: Option<f64>,
    /// Flip angle, degrees. Metadata only.
    #[serde(default)]
    pub flip_angle: Option<f64>,
}

impl AcquisitionParams {
    pub fn new(tr: f64, ti: f64) -> Result<Self> {
        if !(tr > 0.0 && ti > 0.0 && ti < tr) {
            return Err(Error::invalid(format!(
                "acquisition requires 0 < TI < TR, got TI={ti} TR={tr}"
            )));
        }
        Ok(AcquisitionParams {
            tr,
            ti,
            te: None,
            flip_angle: None,
        })
    }

    pub fn mprage() -> Self {
        Self::new(DEFAULT_TR, MPRAGE_TI).unwrap()
    }

    pub fn fgatir() -> Self {
        Self::new(DEFAULT_TR, FGATIR_TI).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    /// Longitudinal relaxation time, ms.
    pub t1: f64,
    /// Proton density, normalized units.
    pub pd: f64,
}

/// Whether an image holds the signed model signal or its magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Signed,
    Magnitude,
}

/// The bracketed recovery term; the signal for unit proton density.
#[inline]
pub fn recovery(t1: f64, ti: f64, tr: f64) -> f64 {
    1.0 - 2.0 * (-ti / t1).exp() + (-tr / t1).exp()
}

#[inline]
fn recovery_dt1(t1: f64, ti: f64, tr: f64) -> f64 {
    let inv2 = 1.0 / (t1 * t1);
    -2.0 * ti * inv2 * (-ti / t1).exp() + tr * inv2 * (-tr / t1).exp()
}

pub fn ir_signal(tissue: TissueParams, acq: AcquisitionParams) -> f64 {
    if tissue.pd == 0.0 || tissue.t1 <= 0.0 {
        return 0.0;
    }
    tissue.pd * recovery(tissue.t1, acq.ti, acq.tr)
}

/// Analytic partial derivatives `(dI/dPD, dI/dT1)`.
pub fn ir_jacobian(tissue: TissueParams, acq: AcquisitionParams) -> (f64, f64) {
    let d_pd = recovery(tissue.t1, acq.ti, acq.tr);
    let d_t1 = tissue.pd * recovery_dt1(tissue.t1, acq.ti, acq.tr);
    (d_pd, d_t1)
}

/// Inversion time at which the signal of tissue `t1` crosses zero.
pub fn null_ti(t1: f64, tr: f64) -> f64 {
    t1 * (2.0 / (1.0 + (-tr / t1).exp())).ln()
}

/// Elementwise negation, turning an FGATIR magnitude image into the signed
/// signal expected by the model for long-T1 tissue.
pub fn negate_fgatir(v: &ScalarVolume) -> ScalarVolume {
    v.map(|x| -x)
}

/// `400, 420, ..., 1400` ms.
pub fn default_ti_list() -> Vec<f64> {
    ti_range(400.0, 1400.0, 20.0)
}

/// Inclusive arithmetic sequence `start, start + step, ..., <= stop`.
pub fn ti_range(start: f64, stop: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0, "step must be positive");
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|k| start + k as f64 * step).collect()
}

/// Magnitude images `|I(T1, PD; TI, TR)|` for each TI.
pub fn synthesize_multi_ti(maps: &QuantMaps, tr: f64, ti_list: &[f64]) -> Vec<ScalarVolume> {
    ti_list
        .iter()
        .map(|&ti| synthesize_ti(&maps.t1_map, &maps.pd_map, tr, ti))
        .collect()
}

pub fn synthesize_ti(t1_map: &ScalarVolume, pd_map: &ScalarVolume, tr: f64, ti: f64) -> ScalarVolume {
    let data = t1_map
        .data()
        .iter()
        .zip(pd_map.data())
        .map(|(&t1, &pd)| {
            ir_signal(
                TissueParams { t1, pd },
                AcquisitionParams {
                    tr,
                    ti,
                    te: None,
                    flip_angle: None,
                },
            )
            .abs()
        })
        .collect();
    t1_map.same_grid(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn acq(ti: f64, tr: f64) -> AcquisitionParams {
        AcquisitionParams::new(tr, ti).unwrap()
    }

    fn tissue(t1: f64, pd: f64) -> TissueParams {
        TissueParams { t1, pd }
    }

    #[test]
    fn reference_values() {
        let s = ir_signal(tissue(1000.0, 1.0), acq(1400.0, 4000.0));
        assert!((s - 0.5251216).abs() < 1e-6, "{s}");
        let s = ir_signal(tissue(1000.0, 2.0), acq(400.0, 4000.0));
        assert!((s + 0.6446489).abs() < 1e-6, "{s}");
        assert_eq!(ir_signal(tissue(1000.0, 0.0), acq(400.0, 4000.0)), 0.0);
    }

    #[test]
    fn jacobian_pd_is_unit_signal() {
        let (dpd, _) = ir_jacobian(tissue(1000.0, 3.7), acq(1400.0, 4000.0));
        assert!((dpd - 0.5251216).abs() < 1e-6);
        let (_, dt1) = ir_jacobian(tissue(1000.0, 0.0), acq(1400.0, 4000.0));
        assert_eq!(dt1, 0.0);
    }

    fn fd_t1(t1: f64, pd: f64, a: AcquisitionParams, h: f64) -> f64 {
        (ir_signal(tissue(t1 + h, pd), a) - ir_signal(tissue(t1 - h, pd), a)) / (2.0 * h)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let a = acq(400.0, 4000.0);
        let (_, dt1) = ir_jacobian(tissue(1200.0, 1.5), a);
        let fd = fd_t1(1200.0, 1.5, a, 1e-3);
        assert!(((dt1 - fd) / fd).abs() < 1e-6);

        for i in 0..20 {
            for j in 0..20 {
                let t1 = 300.0 + 200.0 * i as f64;
                let ti = 100.0 + 180.0 * j as f64;
                let a = acq(ti, 4000.0);
                let (_, dt1) = ir_jacobian(tissue(t1, 1.0), a);
                let fd = fd_t1(t1, 1.0, a, 1e-3);
                let rel = (dt1 - fd).abs() / dt1.abs().max(1e-12);
                assert!(rel < 1e-6, "t1={t1} ti={ti} rel={rel}");
            }
        }
    }

    fn bisect_null(t1: f64, tr: f64) -> f64 {
        let (mut lo, mut hi) = (1e-6, tr - 1e-6);
        let f = |ti: f64| recovery(t1, ti, tr);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn null_ti_reference() {
        let t = null_ti(1000.0, 4000.0);
        assert!((t - 675.0).abs() < 0.1, "{t}");
        assert!((t - bisect_null(1000.0, 4000.0)).abs() < 1e-6);
        let t = null_ti(1000.0, 1e9);
        assert!((t - 693.147).abs() < 1e-3);
    }

    #[test]
    fn negation() {
        let v = ScalarVolume::new([3, 1, 1], vec![1.0, 0.0, 2.5]).unwrap();
        let n = negate_fgatir(&v);
        assert_eq!(n.data(), &[-1.0, -0.0, -2.5]);
        assert_eq!(negate_fgatir(&n), v);
        let mag = ir_signal(tissue(1000.0, 1.0), acq(400.0, 4000.0)).abs();
        assert!((-mag + 0.3223244).abs() < 1e-6);
    }

    #[test]
    fn default_list_has_51_entries() {
        let l = default_ti_list();
        assert_eq!(l.len(), 51);
        assert_eq!(l[0], 400.0);
        assert_eq!(l[50], 1400.0);
    }

    #[test]
    fn acquisition_requires_ti_below_tr() {
        assert!(AcquisitionParams::new(4000.0, 4000.0).is_err());
        assert!(AcquisitionParams::new(4000.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn null_ti_is_a_root(t1 in 200.0f64..5000.0, tr in 500.0f64..20000.0) {
            let ti = null_ti(t1, tr);
            prop_assert!(recovery(t1, ti, tr).abs() < 1e-9);
        }

        #[test]
        fn linear_in_pd(t1 in 200.0f64..5000.0, ti in 10.0f64..3900.0, k in 0.0f64..10.0) {
            let a = acq(ti, 4000.0);
            let s1 = ir_signal(tissue(t1, 1.3), a);
            let sk = ir_signal(tissue(t1, 1.3 * k), a);
            prop_assert!((sk - k * s1).abs() <= 1e-12 * (1.0 + sk.abs()));
        }

        #[test]
        fn increasing_in_ti(t1 in 200.0f64..5000.0, ti in 10.0f64..3900.0, dt in 1.0f64..90.0) {
            let lo = ir_signal(tissue(t1, 1.0), acq(ti, 4000.0));
            let hi = ir_signal(tissue(t1, 1.0), acq(ti + dt, 4000.0));
            prop_assert!(hi > lo);
        }
    }
}
