//! Tauberian constants and local-limit fits tying the resolvent, the heat
//! kernel and the boundary measures together.

use crate::graph::{length_spectrum, QuotientGraph, SpectrumDiagnostics, TreePoint};
use crate::heat::{DecayFit, HeatField, SpectralEstimate};
use crate::linalg::{least_squares, line_fit, runs_test_z, LinalgError};
use crate::resolvent::{green_lambda_derivative, solve_weyl, ResolventError};
use crate::thermo::{delta_lambda, ThermoError};
use serde::Serialize;

#[derive(Debug, thiserror::Error, Clone)]
pub enum AsymptoticsError {
    #[error("regression rejected: R² = {r2} below {min}")]
    FitRejected {
        r2: f64,
        min: f64,
        report: Box<TauberianReport>,
    },
    #[error("fit window [{t_min}, {t_max}] contaminated: {reason}")]
    WindowContaminated { t_min: f64, t_max: f64, reason: String },
    #[error("δ at λ₀ is {0:e}, not zero")]
    NotCritical(f64),
    #[error("invalid λ-grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Resolvent(#[from] ResolventError),
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Minimal R² for acceptance-grade fits.
pub const MIN_R2: f64 = 0.99;

/// Log-spaced grid with `λ₀ − λ` from `1e-3` up to `min(0.1, λ₀)`.
pub fn tauberian_grid(lambda0: f64, n: usize) -> Vec<f64> {
    let (lo, hi) = (1e-3f64, 0.1f64.min(lambda0));
    (0..n)
        .map(|i| {
            let eps = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp();
            (lambda0 - eps).max(0.0)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TauberianReport {
    pub lambda0: f64,
    pub lambdas: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// `1/√slope` of the regression of `1/(∂_λG)²` on `λ₀ − λ`.
    pub l_fit: f64,
    pub l_band: f64,
    pub r2: f64,
    pub intercept: f64,
    /// `L_fit` on the lower and upper halves of the grid.
    pub l_sub: [f64; 2],
    pub sub_spread: f64,
    /// `L` from `√ε ∂_λG = L + B√ε + Cε`, which models the regular part of `∂_λG`.
    pub l_expansion: f64,
    pub b_expansion: f64,
    pub r2_expansion: f64,
    /// `2 ε^{3/2} ∂²_λG / L_fit` at the grid point closest to λ₀.
    pub second_ratio: f64,
    /// The same ratio against `l_expansion`.
    pub second_ratio_expansion: f64,
}

fn l_from(eps: &[f64], d1: &[f64]) -> Result<(f64, f64, f64, f64), AsymptoticsError> {
    let y: Vec<f64> = d1.iter().map(|d| 1.0 / (d * d)).collect();
    let f = line_fit(eps, &y)?;
    if !(f.slope > 0.0) {
        return Err(AsymptoticsError::BadGrid("non-positive slope".into()));
    }
    let l = 1.0 / f.slope.sqrt();
    Ok((l, 0.5 * l * f.slope_stderr / f.slope, f.r2, f.intercept))
}

/// Regresses `1/(∂_λG(x,y))²` on `λ₀ − λ`; `L_fit` is the limit of
/// `√(λ₀ − λ) ∂_λG`.
pub fn tauberian_limit(
    g: &QuotientGraph,
    x: &TreePoint,
    y: &TreePoint,
    lambda0: f64,
    lambdas: &[f64],
) -> Result<TauberianReport, AsymptoticsError> {
    if lambdas.len() < 12 {
        return Err(AsymptoticsError::BadGrid(format!("{} points", lambdas.len())));
    }
    if lambdas.iter().any(|&l| !(l < lambda0) || l < 0.0) {
        return Err(AsymptoticsError::BadGrid("λ outside [0, λ₀)".into()));
    }
    let mut lams = lambdas.to_vec();
    lams.sort_by(|a, b| b.partial_cmp(a).unwrap());
    lams.dedup();
    let eps: Vec<f64> = lams.iter().map(|l| lambda0 - l).collect();
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    for &l in &lams {
        d1.push(green_lambda_derivative(g, l, x, y, 1, None, 0.0)?.jet);
        d2.push(green_lambda_derivative(g, l, x, y, 2, None, 0.0)?.jet);
    }
    let (l_fit, l_band, r2, intercept) = l_from(&eps, &d1)?;
    let h = eps.len() / 2;
    let lo = l_from(&eps[..h], &d1[..h])?.0;
    let hi = l_from(&eps[h..], &d1[h..])?.0;
    let design: Vec<Vec<f64>> = eps.iter().map(|e| vec![1.0, e.sqrt(), *e]).collect();
    let scaled: Vec<f64> = eps.iter().zip(&d1).map(|(e, d)| e.sqrt() * d).collect();
    let ex = least_squares(&design, &scaled)?;
    let second = 2.0 * eps[0].powf(1.5) * d2[0];
    let report = TauberianReport {
        lambda0,
        lambdas: lams,
        d1,
        d2,
        l_fit,
        l_band,
        r2,
        intercept,
        l_sub: [lo, hi],
        sub_spread: (lo - hi).abs() / l_fit,
        l_expansion: ex.coef[0],
        b_expansion: ex.coef[1],
        r2_expansion: ex.r2,
        second_ratio: second / l_fit,
        second_ratio_expansion: second / ex.coef[0],
    };
    if r2 < MIN_R2 {
        return Err(AsymptoticsError::FitRejected {
            r2,
            min: MIN_R2,
            report: Box::new(report),
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct LltFit {
    pub lambda0: f64,
    pub window: (f64, f64),
    /// Free fit `log p + λ₀t = log C − α log t`.
    pub alpha_free: f64,
    pub alpha_stderr: f64,
    pub c_free: f64,
    pub r2_free: f64,
    /// Fit with `α = 3/2` pinned.
    pub c_pinned: f64,
    pub pinned_rms: f64,
    /// Free fit with an added `a/t` term.
    pub alpha_corrected: f64,
    pub a_over_t: f64,
    pub r2_corrected: f64,
    /// Runs-test z-score of the free-fit residuals.
    pub runs_z: f64,
    /// `e^{λ₀t} p` decreases on the window.
    pub decreasing: bool,
    /// Estimated relative truncation error on the window.
    pub contamination: Option<f64>,
}

fn window_samples(
    field: &HeatField,
    probe: usize,
    t_min: f64,
    t_max: f64,
    max_points: usize,
) -> Vec<(f64, f64)> {
    let idx: Vec<usize> = (0..field.times.len())
        .filter(|&i| field.times[i] >= t_min - 1e-9 && field.times[i] <= t_max + 1e-9)
        .collect();
    let stride = (idx.len() / max_points).max(1);
    idx.iter()
        .step_by(stride)
        .map(|&i| (field.times[i], field.probes[probe][i]))
        .collect()
}

/// Fits `p(t) ≈ C t^{−α} e^{−λ₀t}` on `[t_min, t_max]`. The same probe from
/// smaller balls (largest first) estimates the truncation error, which must
/// stay below 1% of the signal: one reference gives the plain difference, two
/// give a geometric-tail extrapolation.
pub fn llt_fit(
    field: &HeatField,
    probe: usize,
    lambda0: f64,
    t_min: f64,
    t_max: f64,
    reference: &[(&HeatField, usize)],
) -> Result<LltFit, AsymptoticsError> {
    let contaminated = |reason: String| AsymptoticsError::WindowContaminated {
        t_min,
        t_max,
        reason,
    };
    let t_end = *field.times.last().unwrap();
    if t_max > t_end + 1e-9 || t_min <= field.times[field.startup_steps] || t_min >= t_max {
        return Err(contaminated(format!("outside the simulated horizon {t_end}")));
    }
    let pts = window_samples(field, probe, t_min, t_max, 400);
    if pts.iter().any(|&(_, p)| !(p > 0.0)) {
        return Err(contaminated("non-positive values".into()));
    }
    let contamination = match reference.len() {
        0 => None,
        k => {
            let refs: Vec<Vec<(f64, f64)>> = reference
                .iter()
                .map(|(r, rp)| window_samples(r, *rp, t_min, t_max, 400))
                .collect();
            if refs.iter().any(|r| r.len() != pts.len()) {
                return Err(contaminated("reference sampled differently".into()));
            }
            let mut c: f64 = 0.0;
            for (i, &(_, p)) in pts.iter().enumerate() {
                let d1 = p - refs[0][i].1;
                let err = if k >= 2 {
                    let d2 = refs[0][i].1 - refs[1][i].1;
                    let q = d1 / d2;
                    if d2 != 0.0 && (0.0..1.0).contains(&q) {
                        d1 * q / (1.0 - q)
                    } else {
                        d1
                    }
                } else {
                    d1
                };
                c = c.max(err.abs() / p);
            }
            if c > 0.01 {
                return Err(contaminated(format!("truncation error {c:.3e}")));
            }
            Some(c)
        }
    };
    let ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let q: Vec<f64> = pts.iter().map(|&(t, p)| p.ln() + lambda0 * t).collect();
    let logt: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let free = line_fit(&logt, &q)?;
    let pinned: Vec<f64> = q.iter().zip(&logt).map(|(v, l)| v + 1.5 * l).collect();
    let mean = pinned.iter().sum::<f64>() / pinned.len() as f64;
    let rms = (pinned.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pinned.len() as f64).sqrt();
    let design: Vec<Vec<f64>> = ts.iter().map(|t| vec![1.0, t.ln(), 1.0 / t]).collect();
    let corr = least_squares(&design, &q)?;
    Ok(LltFit {
        lambda0,
        window: (t_min, t_max),
        alpha_free: -free.slope,
        alpha_stderr: free.slope_stderr,
        c_free: free.intercept.exp(),
        r2_free: free.r2,
        c_pinned: mean.exp(),
        pinned_rms: rms,
        alpha_corrected: -corr.coef[1],
        a_over_t: corr.coef[2],
        r2_corrected: corr.r2,
        runs_z: runs_test_z(&free.residuals),
        decreasing: q.windows(2).all(|w| w[1] < w[0]),
        contamination,
    })
}

/// Longest window `[t_min, t]` with `t ≤ t_max` on which [`llt_fit`] accepts
/// the truncation error, scanning `t` down in unit steps to `t_min + min_span`.
pub fn llt_fit_auto(
    field: &HeatField,
    probe: usize,
    lambda0: f64,
    t_min: f64,
    t_max: f64,
    min_span: f64,
    reference: &[(&HeatField, usize)],
) -> Result<LltFit, AsymptoticsError> {
    let mut t = t_max;
    loop {
        match llt_fit(field, probe, lambda0, t_min, t, reference) {
            Err(AsymptoticsError::WindowContaminated { .. }) if t - 1.0 >= t_min + min_span => t -= 1.0,
            r => return r,
        }
    }
}

/// Numerical settings shared by the two sides of a lattice contrast.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SolverSettings {
    pub radius: f64,
    pub h: f64,
    pub dt: f64,
    pub window: (f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct OscillationReport {
    pub graph: String,
    pub density: String,
    pub lattice_unit: Option<f64>,
    /// Maximal relative deviation of `t^{3/2} e^{λ₀t} p` from its smooth fit.
    pub amplitude: f64,
    /// Period of the strongest Fourier mode of the residuals.
    pub dominant_period: Option<f64>,
    pub settings: SolverSettings,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatticeContrast {
    pub reports: Vec<OscillationReport>,
    pub controlled: bool,
}

/// Residual oscillation of `t^{3/2} e^{λ₀t} p(t, x, x)` around `c + a/t + b/t²`.
pub fn oscillation_report(
    g: &QuotientGraph,
    field: &HeatField,
    probe: usize,
    lambda0: f64,
    settings: &SolverSettings,
) -> Result<OscillationReport, AsymptoticsError> {
    let (t_min, t_max) = settings.window;
    let pts = window_samples(field, probe, t_min, t_max, 2048);
    let ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let q: Vec<f64> = pts
        .iter()
        .map(|&(t, p)| p.ln() + lambda0 * t + 1.5 * t.ln())
        .collect();
    let design: Vec<Vec<f64>> = ts.iter().map(|t| vec![1.0, 1.0 / t, 1.0 / (t * t)]).collect();
    let fit = least_squares(&design, &q)?;
    let amplitude = fit
        .residuals
        .iter()
        .map(|r| r.exp_m1().abs())
        .fold(0.0, f64::max);
    let n = fit.residuals.len();
    let dt = (ts[n - 1] - ts[0]) / (n - 1) as f64;
    let mut best = (0.0, None);
    for k in 1..n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, r) in fit.residuals.iter().enumerate() {
            let a = 2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
            re += r * a.cos();
            im -= r * a.sin();
        }
        let power = re * re + im * im;
        if power > best.0 {
            best = (power, Some(n as f64 * dt / k as f64));
        }
    }
    let spec = length_spectrum(g, 8, 2.0);
    Ok(OscillationReport {
        graph: g.name().to_string(),
        density: spec.diagnostics.density.clone(),
        lattice_unit: spec.diagnostics.lattice_unit,
        amplitude,
        dominant_period: best.1,
        settings: settings.clone(),
    })
}

pub fn lattice_contrast(
    a: (&QuotientGraph, &HeatField, usize, f64),
    b: (&QuotientGraph, &HeatField, usize, f64),
    settings: &SolverSettings,
) -> Result<LatticeContrast, AsymptoticsError> {
    let ra = oscillation_report(a.0, a.1, a.2, a.3, settings)?;
    let rb = oscillation_report(b.0, b.1, b.2, b.3, settings)?;
    let controlled = ra.settings == rb.settings && a.1.dt == b.1.dt;
    Ok(LatticeContrast {
        reports: vec![ra, rb],
        controlled,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Lambda0Agreement {
    pub resolvent: f64,
    pub spectral: f64,
    pub heat: f64,
    pub heat_stderr: f64,
    pub max_pairwise: f64,
    pub tolerance: f64,
    pub agree: bool,
}

/// Pairwise agreement of the three λ₀ routes within `2e-3` plus the fit error.
pub fn lambda0_agreement(resolvent: f64, spectral: &SpectralEstimate, heat: &DecayFit) -> Lambda0Agreement {
    let v = [resolvent, spectral.extrapolated, heat.lambda];
    let mut max: f64 = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            max = max.max((v[i] - v[j]).abs());
        }
    }
    let tolerance = 2e-3 + heat.lambda_stderr;
    Lambda0Agreement {
        resolvent,
        spectral: spectral.extrapolated,
        heat: heat.lambda,
        heat_stderr: heat.lambda_stderr,
        max_pairwise: max,
        tolerance,
        agree: max <= tolerance,
    }
}

/// `δ_{λ₀}` must vanish before any local-limit fit.
pub fn require_critical(g: &QuotientGraph, lambda0: f64) -> Result<f64, AsymptoticsError> {
    let d = delta_lambda(&solve_weyl(g, lambda0)?)?;
    if d.abs() > 5e-3 {
        return Err(AsymptoticsError::NotCritical(d));
    }
    Ok(d)
}

/// Combined local-limit report.
#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub graph: String,
    pub x: String,
    pub y: String,
    pub lambda0_used: f64,
    pub delta_at_lambda0: f64,
    pub alpha_fit: f64,
    pub c_fit: f64,
    pub l_fit: f64,
    pub predicted_c: f64,
    /// `C_fit / predicted_C − 1`.
    pub c_deviation: f64,
    /// The two Tauberian constants are treated as equal in `predicted_C`.
    pub assumes_equal_constants: bool,
    pub spectrum: SpectrumDiagnostics,
    /// Set only for a dense length spectrum.
    pub llt_label: bool,
    pub tauberian: Option<TauberianReport>,
    pub tauberian_error: Option<String>,
    pub llt: LltFit,
}

/// Assembles the report; `L_fit` is taken from the Tauberian regression even
/// when it is rejected, in which case the rejection is recorded.
pub fn fit_report(
    g: &QuotientGraph,
    x: &TreePoint,
    y: &TreePoint,
    lambda0: f64,
    lambdas: &[f64],
    llt: LltFit,
) -> Result<FitReport, AsymptoticsError> {
    let delta = require_critical(g, lambda0)?;
    let (taub, err) = match tauberian_limit(g, x, y, lambda0, lambdas) {
        Ok(r) => (r, None),
        Err(AsymptoticsError::FitRejected { report, r2, min }) => {
            (*report, Some(format!("R² = {r2} below {min}")))
        }
        Err(e) => return Err(e),
    };
    let spectrum = length_spectrum(g, 8, 2.0).diagnostics;
    let predicted = taub.l_fit / std::f64::consts::PI.sqrt();
    Ok(FitReport {
        graph: g.name().to_string(),
        x: x.label(g),
        y: y.label(g),
        lambda0_used: lambda0,
        delta_at_lambda0: delta,
        alpha_fit: llt.alpha_free,
        c_fit: llt.c_pinned,
        l_fit: taub.l_fit,
        predicted_c: predicted,
        c_deviation: llt.c_pinned / predicted - 1.0,
        assumes_equal_constants: true,
        llt_label: spectrum.density == "dense",
        spectrum,
        tauberian: Some(taub),
        tauberian_error: err,
        llt,
    })
}
