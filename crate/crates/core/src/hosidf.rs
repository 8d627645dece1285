//! Higher-order sinusoidal-input describing functions of reset systems,
//! open-loop composition and derived loop quantities.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::elements::{CgLpConfig, CgLpKind, ControllerChain, ResetSystem, StateSpaceModel};
use crate::error::{Error, KernelMatrix, Result};
use crate::linalg;

/// Condition-number ceiling for Λ and Δ_r.
pub const MAX_KERNEL_COND: f64 = 1e12;

/// Per-frequency matrices entering the describing function.
#[derive(Debug, Clone)]
pub struct HosidfKernel {
    pub omega: f64,
    /// `e^{(π/ω)A}`
    pub e: DMatrix<f64>,
    /// `ω²I + A²`
    pub lambda: DMatrix<f64>,
    /// `I + E`
    pub delta: DMatrix<f64>,
    /// `I + A_ρE`
    pub delta_r: DMatrix<f64>,
    /// `Δ_r⁻¹ A_ρ Δ Λ⁻¹`
    pub gamma_r: DMatrix<f64>,
    /// `-(2ω²/π) Δ (Γ_r - Λ⁻¹)`
    pub theta_d: DMatrix<f64>,
}

pub fn hosidf_kernel(system: &ResetSystem, omega: f64) -> Result<HosidfKernel> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::InvalidConfig(format!("omega must be positive, got {omega}")));
    }
    let a = system.base().a();
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let ar = system.reset_matrix();
    let e = linalg::expm(&(a * (PI / omega)));
    let lambda = &id * (omega * omega) + a * a;
    let delta = &id + &e;
    let delta_r = &id + &ar * &e;

    let cl = linalg::cond2(&lambda);
    if cl > MAX_KERNEL_COND {
        return Err(Error::NearSingularFrequency { which: KernelMatrix::Lambda, omega, cond: cl });
    }
    let cr = linalg::cond2(&delta_r);
    if cr > MAX_KERNEL_COND {
        return Err(Error::NearSingularFrequency { which: KernelMatrix::DeltaR, omega, cond: cr });
    }
    let lambda_inv = lambda.clone().try_inverse().ok_or(Error::NearSingularFrequency {
        which: KernelMatrix::Lambda,
        omega,
        cond: f64::INFINITY,
    })?;
    let rhs = &ar * &delta * &lambda_inv;
    let gamma_r = delta_r.clone().lu().solve(&rhs).ok_or(Error::NearSingularFrequency {
        which: KernelMatrix::DeltaR,
        omega,
        cond: f64::INFINITY,
    })?;
    let theta_d = &delta * (&gamma_r - &lambda_inv) * (-2.0 * omega * omega / PI);
    Ok(HosidfKernel { omega, e, lambda, delta, delta_r, gamma_r, theta_d })
}

fn df_from_kernel(system: &ResetSystem, k: &HosidfKernel, n: u32) -> Result<Complex64> {
    if n == 0 {
        return Err(Error::InvalidConfig("harmonic order starts at 1".into()));
    }
    if n % 2 == 0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let base = system.base();
    let b = base.b();
    let w = k.omega;
    let jtb: DVector<Complex64> = (&k.theta_d * b).map(|v| Complex64::new(0.0, v));
    let s = Complex64::new(0.0, n as f64 * w);
    if n == 1 {
        let rhs: DVector<Complex64> = b.map(|v| Complex64::new(v, 0.0)) + jtb;
        let g = linalg::resolvent_apply(base.a(), &rhs, base.c(), s)
            .ok_or(Error::SingularResolvent { omega: w })?;
        Ok(g + base.d())
    } else {
        linalg::resolvent_apply(base.a(), &jtb, base.c(), s)
            .ok_or(Error::SingularResolvent { omega: n as f64 * w })
    }
}

/// `G_n(ω)`. Even orders are exactly zero.
pub fn describing_function(system: &ResetSystem, n: u32, omega: f64) -> Result<Complex64> {
    if n >= 2 && n % 2 == 0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let k = hosidf_kernel(system, omega)?;
    df_from_kernel(system, &k, n)
}

/// Several orders at one frequency sharing a single kernel evaluation.
pub fn describing_functions(system: &ResetSystem, orders: &[u32], omega: f64) -> Result<Vec<Complex64>> {
    if orders.iter().all(|&n| n >= 2 && n % 2 == 0) {
        return Ok(vec![Complex64::new(0.0, 0.0); orders.len()]);
    }
    let k = hosidf_kernel(system, omega)?;
    orders.iter().map(|&n| df_from_kernel(system, &k, n)).collect()
}

/// `C(jωI - A)⁻¹B + D`. `ω = 0` gives the DC gain.
pub fn linear_freq_response(model: &StateSpaceModel, omega: f64) -> Result<Complex64> {
    model.eval(Complex64::new(0.0, omega)).ok_or(Error::SingularResolvent { omega })
}

/// Complex response table indexed by (order, frequency). `None` marks a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicResponse {
    pub source: String,
    pub frequencies: Vec<f64>,
    pub orders: Vec<u32>,
    /// `values[k][i]` is order `orders[k]` at `frequencies[i]`.
    pub values: Vec<Vec<Option<Complex64>>>,
}

pub const HARMONIC_CSV_HEADER: [&str; 6] = ["omega_rad_s", "order", "re", "im", "mag_db", "phase_deg"];

impl HarmonicResponse {
    pub fn order_index(&self, n: u32) -> Option<usize> {
        self.orders.iter().position(|&o| o == n)
    }

    pub fn get(&self, n: u32, i: usize) -> Option<Complex64> {
        self.order_index(n).and_then(|k| self.values[k][i])
    }

    pub fn series(&self, n: u32) -> Option<&[Option<Complex64>]> {
        self.order_index(n).map(|k| self.values[k].as_slice())
    }

    /// Phase in degrees, unwrapped along the grid and anchored at the lowest
    /// frequency with a valid value. Gaps stay `None`.
    pub fn unwrapped_phase_deg(&self, n: u32) -> Option<Vec<Option<f64>>> {
        self.series(n).map(|s| unwrap_phase_deg(s))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wr.write_record(HARMONIC_CSV_HEADER)?;
        for (k, &n) in self.orders.iter().enumerate() {
            let phase = unwrap_phase_deg(&self.values[k]);
            for (i, &w_) in self.frequencies.iter().enumerate() {
                let rec = match self.values[k][i] {
                    Some(v) => [
                        fmt_num(w_),
                        n.to_string(),
                        fmt_num(v.re),
                        fmt_num(v.im),
                        fmt_num(mag_db(v)),
                        fmt_num(phase[i].unwrap_or(f64::NAN)),
                    ],
                    None => [
                        fmt_num(w_),
                        n.to_string(),
                        "nan".into(),
                        "nan".into(),
                        "nan".into(),
                        "nan".into(),
                    ],
                };
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Nine significant digits, `nan`, `inf` and `-inf` spelled out.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.8e}")
    }
}

pub fn mag_db(v: Complex64) -> f64 {
    let m = v.norm();
    if m == 0.0 {
        f64::NEG_INFINITY
    } else {
        20.0 * m.log10()
    }
}

pub fn unwrap_phase_deg(values: &[Option<Complex64>]) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(values.len());
    let mut prev: Option<f64> = None;
    for v in values {
        match v {
            None => out.push(None),
            Some(z) => {
                let raw = z.arg().to_degrees();
                let p = match prev {
                    None => raw,
                    Some(q) => raw + 360.0 * ((q - raw) / 360.0).round(),
                };
                prev = Some(p);
                out.push(Some(p));
            }
        }
    }
    out
}

pub fn log_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && points >= 2) {
        return Err(Error::InvalidConfig(format!(
            "grid needs 0 < lo < hi and at least two points, got [{lo}, {hi}] with {points}"
        )));
    }
    let (a, b) = (lo.log10(), hi.log10());
    let mut g: Vec<f64> = (0..points)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64))
        .collect();
    g[0] = lo;
    g[points - 1] = hi;
    Ok(g)
}

/// 500 points, logarithmic over [0.1, 1e4] rad/s.
pub fn default_grid() -> Vec<f64> {
    log_grid(0.1, 1e4, 500).expect("valid")
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty frequency grid".into()));
    }
    if grid.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidConfig("grid frequencies must be positive and finite".into()));
    }
    if grid.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidConfig("grid must be strictly increasing".into()));
    }
    Ok(())
}

fn validate_orders(orders: &[u32]) -> Result<()> {
    if orders.is_empty() || orders.contains(&0) {
        return Err(Error::InvalidConfig("orders must be non-empty and start at 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SweepOptions {
    /// Retry a near-singular frequency a few ulps away instead of leaving a gap.
    pub nudge_singular: bool,
}

/// Dense response table over the grid. Points where the kernel is singular
/// become gaps.
pub fn hosidf_sweep(system: &ResetSystem, orders: &[u32], grid: &[f64]) -> Result<HarmonicResponse> {
    hosidf_sweep_with(system, orders, grid, SweepOptions::default(), "")
}

pub fn hosidf_sweep_with(
    system: &ResetSystem,
    orders: &[u32],
    grid: &[f64],
    opts: SweepOptions,
    source: &str,
) -> Result<HarmonicResponse> {
    validate_grid(grid)?;
    validate_orders(orders)?;
    let per_point: Vec<Option<Vec<Complex64>>> = grid
        .par_iter()
        .map(|&w| {
            let mut r = describing_functions(system, orders, w);
            if opts.nudge_singular && matches!(r, Err(Error::NearSingularFrequency { .. })) {
                r = describing_functions(system, orders, w * (1.0 + 16.0 * f64::EPSILON));
            }
            match r {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("gap at omega = {w}: {e}");
                    None
                }
            }
        })
        .collect();
    let values = (0..orders.len())
        .map(|k| per_point.iter().map(|p| p.as_ref().map(|v| v[k])).collect())
        .collect();
    Ok(HarmonicResponse {
        source: source.to_string(),
        frequencies: grid.to_vec(),
        orders: orders.to_vec(),
        values,
    })
}

/// `L_n(ω) = G_n(ω) C(jnω) P(jnω)` with every linear block evaluated at the
/// harmonic frequency.
pub fn open_loop_hosidf(
    controller_df: &HarmonicResponse,
    linear_controller: &StateSpaceModel,
    plant: &StateSpaceModel,
    grid: &[f64],
) -> Result<HarmonicResponse> {
    if grid != controller_df.frequencies.as_slice() {
        return Err(Error::DimensionMismatch(format!(
            "grid of {} points differs from the describing-function grid of {} points",
            grid.len(),
            controller_df.frequencies.len()
        )));
    }
    let values = controller_df
        .orders
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            grid.iter()
                .enumerate()
                .map(|(i, &w)| {
                    let g = controller_df.values[k][i]?;
                    let nw = n as f64 * w;
                    let c = linear_freq_response(linear_controller, nw).ok()?;
                    let p = linear_freq_response(plant, nw).ok()?;
                    Some(g * c * p)
                })
                .collect()
        })
        .collect();
    Ok(HarmonicResponse {
        source: format!("open loop of {}", controller_df.source),
        frequencies: grid.to_vec(),
        orders: controller_df.orders.clone(),
        values,
    })
}

/// Open-loop harmonics of a chain whose reset element sits behind a linear
/// pre-filter `T`. The element sees `|T(jω)| sin(ωt + ∠T(jω))`, so by
/// homogeneity and time shift its n-th harmonic is scaled by
/// `|T(jω)| e^{jn∠T(jω)}`; downstream blocks act at `nω`.
pub fn chain_open_loop_hosidf(
    chain: &ControllerChain,
    plant: &StateSpaceModel,
    orders: &[u32],
    grid: &[f64],
) -> Result<HarmonicResponse> {
    validate_grid(grid)?;
    validate_orders(orders)?;
    let pre = chain.pre_filter()?;
    let post = chain.post_filter()?;
    let values = orders
        .iter()
        .map(|&n| {
            grid.par_iter()
                .map(|&w| {
                    let t = linear_freq_response(&pre, w).ok()?;
                    let shift = t.norm() * Complex64::from_polar(1.0, n as f64 * t.arg());
                    let g = match &chain.cglp {
                        Some(c) => describing_function(c, n, w).ok()?,
                        None if n == 1 => Complex64::new(1.0, 0.0),
                        None => Complex64::new(0.0, 0.0),
                    };
                    let nw = n as f64 * w;
                    let c = linear_freq_response(&post, nw).ok()?;
                    let p = linear_freq_response(plant, nw).ok()?;
                    Some(shift * g * c * p)
                })
                .collect()
        })
        .collect();
    Ok(HarmonicResponse { source: "chain open loop".into(), frequencies: grid.to_vec(), orders: orders.to_vec(), values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMargin {
    pub omega_c: f64,
    pub margin_deg: f64,
}

/// First-harmonic phase margin. The crossover is interpolated linearly in
/// `log ω` against `log|L|`; the margin is `180° + ∠L` wrapped to (-180, 180].
pub fn phase_margin(open_loop: &HarmonicResponse) -> Result<PhaseMargin> {
    let s = open_loop
        .series(1)
        .ok_or_else(|| Error::InvalidConfig("open loop has no first harmonic".into()))?;
    let phase = unwrap_phase_deg(s);
    let w = &open_loop.frequencies;
    let mut hits = Vec::new();
    for i in 0..w.len().saturating_sub(1) {
        let (Some(a), Some(b)) = (s[i], s[i + 1]) else { continue };
        let (la, lb) = (a.norm().ln(), b.norm().ln());
        if (la >= 0.0) != (lb >= 0.0) {
            let f = if la == lb { 0.0 } else { la / (la - lb) };
            let lw = w[i].ln() + f * (w[i + 1].ln() - w[i].ln());
            let ph = phase[i].unwrap() + f * (phase[i + 1].unwrap() - phase[i].unwrap());
            hits.push(PhaseMargin { omega_c: lw.exp(), margin_deg: crate::elements::wrap_deg(180.0 + ph) });
        }
    }
    match hits.len() {
        0 => Err(Error::NoCrossover),
        1 => Ok(hits[0]),
        k => Err(Error::MultipleCrossovers(k)),
    }
}

/// Frequency at which the reset of a SOSRE-type element has no steady-state
/// effect: the resetting state is in phase with the input there.
/// `None` for FORE (only ω = 0 qualifies) and for SORE whose first state
/// also resets.
pub fn linear_behavior_frequency(config: &CgLpConfig) -> Option<f64> {
    match config.kind {
        CgLpKind::Sosre => Some(config.omega_ralpha),
        CgLpKind::Sore if config.gamma.first() == Some(&1.0) => Some(config.omega_ralpha),
        _ => None,
    }
}

/// Phase (degrees) from the element input to the resetting state `x_2`,
/// `90° - atan2(2β ω_rα ω, ω_rα² - ω²)`.
pub fn resetting_state_phase_deg(config: &CgLpConfig, omega: f64) -> f64 {
    let wa = config.omega_ralpha;
    let b = config.beta_r.unwrap_or(1.0);
    90.0 - (2.0 * b * wa * omega).atan2(wa * wa - omega * omega).to_degrees()
}
