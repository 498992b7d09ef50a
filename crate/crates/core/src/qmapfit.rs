//! Voxelwise (PD, T1) estimation from an MPRAGE/FGATIR pair.
//!
//! PD enters the model linearly, so for every trial T1 it is eliminated in
//! closed form (variable projection) and Levenberg-Marquardt runs on the
//! remaining one-dimensional T1 problem. Several T1 seeds are tried and the
//! lowest residual wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irsignal::{negate_fgatir, recovery, Polarity, TissueParams};
use crate::volume::{LabelVolume, ScalarVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Admissible T1 interval, ms.
    pub t1_bounds: [f64; 2],
    pub max_iterations: usize,
    /// Stop once the residual norm falls below this fraction of the
    /// measurement norm.
    pub residual_tolerance: f64,
    /// Stop once a relative T1 step falls below this.
    pub step_tolerance: f64,
    pub lm_lambda_init: f64,
    pub lm_lambda_factor: f64,
    /// T1 starting points, ms.
    pub init_grid: Vec<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            t1_bounds: [200.0, 5000.0],
            max_iterations: 50,
            residual_tolerance: 1e-10,
            step_tolerance: 1e-8,
            lm_lambda_init: 1e-3,
            lm_lambda_factor: 10.0,
            init_grid: vec![400.0, 800.0, 1200.0, 2000.0, 3000.0],
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.t1_bounds;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::invalid(format!("T1 bounds must satisfy 0 < lo < hi, got {lo}, {hi}")));
        }
        if !(self.residual_tolerance > 0.0 && self.step_tolerance > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if !(self.lm_lambda_init > 0.0 && self.lm_lambda_factor > 1.0) {
            return Err(Error::invalid("LM damping must be positive with factor > 1"));
        }
        if self.init_grid.is_empty() {
            return Err(Error::invalid("init_grid must not be empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    SkippedBackground,
    Converged,
    ClippedAtBound,
    NonIdentifiable,
}

impl FitStatus {
    /// Code used when the status map is written as a label volume.
    pub fn code(self) -> u8 {
        match self {
            FitStatus::SkippedBackground => 0,
            FitStatus::Converged => 1,
            FitStatus::ClippedAtBound => 2,
            FitStatus::NonIdentifiable => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantMaps {
    pub t1_map: ScalarVolume,
    pub pd_map: ScalarVolume,
    pub status_map: Volume<FitStatus>,
}

impl QuantMaps {
    pub fn status_labels(&self) -> LabelVolume {
        self.status_map.map(FitStatus::code)
    }
}

/// The two measurements of one voxel and their inversion times.
#[derive(Clone, Copy, Debug)]
pub struct VoxelProblem {
    pub m_mprage: f64,
    pub m_fgatir: f64,
    pub tr: f64,
    pub ti_mprage: f64,
    pub ti_fgatir: f64,
}

impl VoxelProblem {
    fn basis(&self, t1: f64) -> [f64; 2] {
        [
            recovery(t1, self.ti_mprage, self.tr),
            recovery(t1, self.ti_fgatir, self.tr),
        ]
    }

    fn basis_dt1(&self, t1: f64) -> [f64; 2] {
        let d = |ti: f64| {
            let inv2 = 1.0 / (t1 * t1);
            -2.0 * ti * inv2 * (-ti / t1).exp() + self.tr * inv2 * (-self.tr / t1).exp()
        };
        [d(self.ti_mprage), d(self.ti_fgatir)]
    }

    fn m(&self) -> [f64; 2] {
        [self.m_mprage, self.m_fgatir]
    }

    /// Least-squares PD for a fixed T1, constrained to be nonnegative.
    pub fn projected_pd(&self, t1: f64) -> f64 {
        let f = self.basis(t1);
        let m = self.m();
        let ff = f[0] * f[0] + f[1] * f[1];
        if ff == 0.0 {
            return 0.0;
        }
        ((f[0] * m[0] + f[1] * m[1]) / ff).max(0.0)
    }

    /// Sum of squared residuals with PD eliminated.
    pub fn objective(&self, t1: f64) -> f64 {
        let pd = self.projected_pd(t1);
        self.objective_at(t1, pd)
    }

    pub fn objective_at(&self, t1: f64, pd: f64) -> f64 {
        let f = self.basis(t1);
        let m = self.m();
        (pd * f[0] - m[0]).powi(2) + (pd * f[1] - m[1]).powi(2)
    }

    /// Projected residual `r(T1) = m - PD*(T1) f(T1)` and its exact derivative.
    fn residual_and_jacobian(&self, t1: f64) -> ([f64; 2], [f64; 2]) {
        let f = self.basis(t1);
        let df = self.basis_dt1(t1);
        let m = self.m();
        let ff = f[0] * f[0] + f[1] * f[1];
        let fm = f[0] * m[0] + f[1] * m[1];
        let pd = fm / ff;
        if pd <= 0.0 {
            // PD clamped at zero: residual is m, independent of T1.
            return (m, [0.0, 0.0]);
        }
        let dfm = df[0] * m[0] + df[1] * m[1];
        let dff = 2.0 * (f[0] * df[0] + f[1] * df[1]);
        let dpd = (dfm * ff - fm * dff) / (ff * ff);
        let r = [m[0] - pd * f[0], m[1] - pd * f[1]];
        let j = [-(dpd * f[0] + pd * df[0]), -(dpd * f[1] + pd * df[1])];
        (r, j)
    }
}

#[derive(Clone, Copy, Debug)]
struct LmRun {
    t1: f64,
    objective: f64,
}

fn lm_from(p: &VoxelProblem, start: f64, cfg: &FitConfig, trace: &mut Option<&mut Vec<f64>>) -> LmRun {
    let [lo, hi] = cfg.t1_bounds;
    let m = p.m();
    let m_norm2 = m[0] * m[0] + m[1] * m[1];
    let target = cfg.residual_tolerance * cfg.residual_tolerance * m_norm2;

    let mut t1 = start.clamp(lo, hi);
    let mut obj = p.objective(t1);
    let mut lambda = cfg.lm_lambda_init;
    if let Some(t) = trace.as_deref_mut() {
        t.push(obj);
    }
    for _ in 0..cfg.max_iterations {
        if obj <= target {
            break;
        }
        let (r, j) = p.residual_and_jacobian(t1);
        let jtj = j[0] * j[0] + j[1] * j[1];
        let jtr = j[0] * r[0] + j[1] * r[1];
        if jtj == 0.0 || jtr == 0.0 {
            break;
        }
        let mut accepted = false;
        let mut small_step = false;
        // Inner damping loop: raise lambda until the step reduces the objective.
        for _ in 0..32 {
            let step = -jtr / (jtj * (1.0 + lambda));
            let cand = (t1 + step).clamp(lo, hi);
            if (cand - t1).abs() <= cfg.step_tolerance * t1 {
                small_step = true;
                break;
            }
            let cand_obj = p.objective(cand);
            if cand_obj < obj {
                t1 = cand;
                obj = cand_obj;
                lambda /= cfg.lm_lambda_factor;
                accepted = true;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(obj);
                }
                if (step.abs()) <= cfg.step_tolerance * t1 {
                    small_step = true;
                }
                break;
            }
            lambda *= cfg.lm_lambda_factor;
        }
        if !accepted || small_step {
            break;
        }
    }
    LmRun { t1, objective: obj }
}

/// Fit one voxel. `m_fgatir_signed` must already carry the model polarity.
pub fn fit_voxel(
    m_mprage: f64,
    m_fgatir_signed: f64,
    tr: f64,
    ti_mprage: f64,
    ti_fgatir: f64,
    cfg: &FitConfig,
) -> (TissueParams, FitStatus) {
    let p = VoxelProblem {
        m_mprage,
        m_fgatir: m_fgatir_signed,
        tr,
        ti_mprage,
        ti_fgatir,
    };
    fit_problem(&p, cfg, None)
}

/// As [`fit_voxel`], recording the accepted objective values of every start.
pub fn fit_voxel_traced(p: &VoxelProblem, cfg: &FitConfig) -> ((TissueParams, FitStatus), Vec<Vec<f64>>) {
    let mut traces = Vec::new();
    let r = fit_problem(p, cfg, Some(&mut traces));
    (r, traces)
}

fn fit_problem(
    p: &VoxelProblem,
    cfg: &FitConfig,
    mut traces: Option<&mut Vec<Vec<f64>>>,
) -> (TissueParams, FitStatus) {
    if p.m_mprage.abs() < 1e-6 && p.m_fgatir.abs() < 1e-6 {
        return (TissueParams { t1: 0.0, pd: 0.0 }, FitStatus::NonIdentifiable);
    }
    let mut best: Option<LmRun> = None;
    for &seed in &cfg.init_grid {
        let run = match traces.as_deref_mut() {
            Some(all) => {
                let mut t = Vec::new();
                let r = lm_from(p, seed, cfg, &mut Some(&mut t));
                all.push(t);
                r
            }
            None => lm_from(p, seed, cfg, &mut None),
        };
        if best.is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let best = best.expect("init grid is nonempty");
    let t1 = best.t1;
    let pd = p.projected_pd(t1);
    let [lo, hi] = cfg.t1_bounds;
    let status = if pd <= 0.0 {
        FitStatus::NonIdentifiable
    } else if t1 <= lo || t1 >= hi {
        FitStatus::ClippedAtBound
    } else {
        FitStatus::Converged
    };
    (TissueParams { t1, pd }, status)
}

/// Fit every voxel inside `mask` (all voxels when absent).
///
/// `fgatir_polarity` states whether `fgatir` is a magnitude image that must be
/// negated first or already the signed signal.
pub fn fit_volume(
    mprage: &ScalarVolume,
    fgatir: &ScalarVolume,
    fgatir_polarity: Polarity,
    mask: Option<&LabelVolume>,
    tr: f64,
    ti_mprage: f64,
    ti_fgatir: f64,
    cfg: &FitConfig,
) -> Result<QuantMaps> {
    fit_volume_threaded(mprage, fgatir, fgatir_polarity, mask, tr, ti_mprage, ti_fgatir, cfg, 1)
}

/// [`fit_volume`] on a dedicated pool of `threads` workers. Each voxel is
/// self-contained, so the result does not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn fit_volume_threaded(
    mprage: &ScalarVolume,
    fgatir: &ScalarVolume,
    fgatir_polarity: Polarity,
    mask: Option<&LabelVolume>,
    tr: f64,
    ti_mprage: f64,
    ti_fgatir: f64,
    cfg: &FitConfig,
    threads: usize,
) -> Result<QuantMaps> {
    cfg.validate()?;
    mprage.same_dims(fgatir)?;
    if let Some(m) = mask {
        mprage.same_dims(m)?;
    }
    let signed;
    let fgatir = match fgatir_polarity {
        Polarity::Signed => fgatir,
        Polarity::Magnitude => {
            signed = negate_fgatir(fgatir);
            &signed
        }
    };
    let work = |i: usize| -> (TissueParams, FitStatus) {
        if mask.is_some_and(|m| m.data()[i] == 0) {
            return (TissueParams { t1: 0.0, pd: 0.0 }, FitStatus::SkippedBackground);
        }
        fit_voxel(
            mprage.data()[i],
            fgatir.data()[i],
            tr,
            ti_mprage,
            ti_fgatir,
            cfg,
        )
    };
    let n = mprage.len();
    let results: Vec<(TissueParams, FitStatus)> = if threads <= 1 {
        (0..n).map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(work).collect())
    };
    Ok(QuantMaps {
        t1_map: mprage.same_grid(results.iter().map(|r| r.0.t1).collect()),
        pd_map: mprage.same_grid(results.iter().map(|r| r.0.pd).collect()),
        status_map: mprage.same_grid(results.iter().map(|r| r.1).collect()),
    })
}

/// Exhaustive 1 ms grid search over T1 in [200, 5000] with PD solved in
/// closed form. Verification oracle only.
pub fn oracle_grid_fit(
    m_mprage: f64,
    m_fgatir_signed: f64,
    tr: f64,
    ti_mprage: f64,
    ti_fgatir: f64,
) -> TissueParams {
    let p = VoxelProblem {
        m_mprage,
        m_fgatir: m_fgatir_signed,
        tr,
        ti_mprage,
        ti_fgatir,
    };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for t in 200..=5000 {
        let t1 = t as f64;
        let pd = p.projected_pd(t1);
        let obj = p.objective_at(t1, pd);
        if obj < best.0 {
            best = (obj, t1, pd);
        }
    }
    TissueParams {
        t1: best.1,
        pd: best.2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irsignal::{ir_signal, AcquisitionParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const TR: f64 = 4000.0;

    fn measure(t1: f64, pd: f64) -> (f64, f64) {
        let t = TissueParams { t1, pd };
        (
            ir_signal(t, AcquisitionParams::new(TR, 1400.0).unwrap()),
            ir_signal(t, AcquisitionParams::new(TR, 400.0).unwrap()),
        )
    }

    #[test]
    fn synthesized_inputs_reference() {
        let (m, f) = measure(1200.0, 1.5);
        assert!((m - 0.6193018).abs() < 1e-6, "{m}");
        assert!((f + 0.5960831).abs() < 1e-6, "{f}");
    }

    #[test]
    fn recovers_noiseless_parameters() {
        let (m, f) = measure(1200.0, 1.5);
        let (t, s) = fit_voxel(m, f, TR, 1400.0, 400.0, &FitConfig::default());
        assert_eq!(s, FitStatus::Converged);
        assert!(((t.t1 - 1200.0) / 1200.0).abs() < 1e-6, "{}", t.t1);
        assert!(((t.pd - 1.5) / 1.5).abs() < 1e-6, "{}", t.pd);
    }

    #[test]
    fn zero_input_is_non_identifiable() {
        let (_, s) = fit_voxel(0.0, 0.0, TR, 1400.0, 400.0, &FitConfig::default());
        assert_eq!(s, FitStatus::NonIdentifiable);
    }

    #[test]
    fn out_of_range_t1_is_clipped() {
        // T1 = 6000 lies above the default upper bound.
        let (m, f) = measure(6000.0, 1.0);
        let (t, s) = fit_voxel(m, f, TR, 1400.0, 400.0, &FitConfig::default());
        assert_eq!(s, FitStatus::ClippedAtBound);
        assert_eq!(t.t1, 5000.0);
    }

    #[test]
    fn oracle_on_grid() {
        let (m, f) = measure(1000.0, 1.0);
        let o = oracle_grid_fit(m, f, TR, 1400.0, 400.0);
        assert_eq!(o.t1, 1000.0);
        assert!((o.pd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.02).unwrap();
        for _ in 0..100 {
            let (m, f) = measure(rng.random_range(300.0..4500.0), rng.random_range(0.5..2.0));
            let p = VoxelProblem {
                m_mprage: m + noise.sample(&mut rng),
                m_fgatir: f + noise.sample(&mut rng),
                tr: TR,
                ti_mprage: 1400.0,
                ti_fgatir: 400.0,
            };
            let (_, traces) = fit_voxel_traced(&p, &FitConfig::default());
            for t in traces {
                assert!(t.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }

    #[test]
    fn noisy_median_within_three_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let (m, f) = measure(800.0, 2.0);
        let mut t1s: Vec<f64> = (0..1000)
            .map(|_| {
                let (mn, fnn) = (m + noise.sample(&mut rng), f + noise.sample(&mut rng));
                let (t, _) = fit_voxel(mn, fnn, TR, 1400.0, 400.0, &FitConfig::default());
                let o = oracle_grid_fit(mn, fnn, TR, 1400.0, 400.0);
                assert!((t.t1 - o.t1).abs() <= 1.0, "solver {} oracle {}", t.t1, o.t1);
                t.t1
            })
            .collect();
        t1s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = 0.5 * (t1s[499] + t1s[500]);
        assert!((median - 800.0).abs() <= 0.03 * 800.0, "median {median}");
    }

    #[test]
    fn masked_voxels_skipped_and_thread_count_irrelevant() {
        let (m, f) = measure(900.0, 1.2);
        let mut mprage = ScalarVolume::filled([4, 4, 2], m);
        mprage.data_mut()[5] = measure(1500.0, 0.8).0;
        let fgatir = ScalarVolume::filled([4, 4, 2], f.abs());
        let mut mask = LabelVolume::filled([4, 4, 2], 1);
        mask.data_mut()[0] = 0;
        let cfg = FitConfig::default();
        let a = fit_volume(&mprage, &fgatir, Polarity::Magnitude, Some(&mask), TR, 1400.0, 400.0, &cfg)
            .unwrap();
        assert_eq!(a.status_map.data()[0], FitStatus::SkippedBackground);
        assert_eq!((a.t1_map.data()[0], a.pd_map.data()[0]), (0.0, 0.0));
        assert!((a.t1_map.data()[1] - 900.0).abs() < 1e-6);
        let b = fit_volume_threaded(
            &mprage, &fgatir, Polarity::Magnitude, Some(&mask), TR, 1400.0, 400.0, &cfg, 3,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dim_mismatch() {
        let a = ScalarVolume::filled([2, 2, 2], 1.0);
        let b = ScalarVolume::filled([2, 2, 3], 1.0);
        let r = fit_volume(&a, &b, Polarity::Signed, None, TR, 1400.0, 400.0, &FitConfig::default());
        assert!(matches!(r, Err(Error::DimMismatch(..))));
    }
}
