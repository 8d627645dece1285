//! Fixed-step hybrid simulation with zero-crossing resets, steady-state
//! extraction, Fourier projection and error metrics.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elements::{ControllerChain, ResetSystem, StateSpaceModel};
use crate::error::{Error, Result};
use crate::hosidf::fmt_num;
use crate::linalg;

/// Scalar input or reference signal.
#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    Zero,
    Step { amplitude: f64 },
    Sin { amplitude: f64, omega: f64 },
    /// Linear interpolation between samples, held constant outside.
    Sampled { t: Vec<f64>, v: Vec<f64> },
}

impl Signal {
    pub fn sin(omega: f64) -> Self {
        Signal::Sin { amplitude: 1.0, omega }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Signal::Zero => 0.0,
            Signal::Step { amplitude } => {
                if t >= 0.0 {
                    *amplitude
                } else {
                    0.0
                }
            }
            Signal::Sin { amplitude, omega } => amplitude * (omega * t).sin(),
            Signal::Sampled { t: ts, v } => {
                if ts.is_empty() {
                    return 0.0;
                }
                if t <= ts[0] {
                    return v[0];
                }
                if t >= ts[ts.len() - 1] {
                    return v[v.len() - 1];
                }
                let i = ts.partition_point(|&x| x <= t) - 1;
                let f = (t - ts[i]) / (ts[i + 1] - ts[i]);
                v[i] + f * (v[i + 1] - v[i])
            }
        }
    }

    pub fn period(&self) -> Option<f64> {
        match self {
            Signal::Sin { omega, .. } => Some(2.0 * PI / omega),
            _ => None,
        }
    }
}

/// Which signal drives the reset of the CgLp inside a closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerSource {
    /// The CgLp's own input, i.e. the tamed-derivative output.
    #[default]
    ElementInput,
    /// The loop error `e = r - y`.
    LoopError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    /// Bisection stops once the crossing is bracketed this tightly.
    pub event_tol: f64,
    /// Fraction of the run kept as steady state.
    pub window_fraction: f64,
    /// Detection is suppressed for this long after a jump.
    pub holdoff: f64,
    pub initial_state: Option<DVector<f64>>,
    pub trigger: TriggerSource,
    pub max_events_per_step: usize,
    pub divergence_limit: f64,
}

pub const STEPS_PER_PERIOD: usize = 2000;
pub const DEFAULT_PERIODS: usize = 40;
pub const DEFAULT_KEPT_PERIODS: usize = 10;
/// Post-jump detection hold-off as a fraction of `dt`. A full `dt` drops
/// genuine crossing pairs in chattering loops.
pub const HOLDOFF_FRACTION: f64 = 0.1;

impl SimConfig {
    /// `dt = T/2000`, 40 periods, the last 10 kept.
    pub fn for_sinusoid(omega: f64) -> Self {
        Self::with_periods(omega, DEFAULT_PERIODS, STEPS_PER_PERIOD)
    }

    pub fn with_periods(omega: f64, periods: usize, steps_per_period: usize) -> Self {
        let t = 2.0 * PI / omega;
        let dt = t / steps_per_period as f64;
        Self {
            dt,
            duration: t * periods as f64,
            event_tol: dt * 1e-6,
            window_fraction: (DEFAULT_KEPT_PERIODS.min(periods / 2).max(1) as f64 / periods as f64).min(0.5),
            holdoff: dt * HOLDOFF_FRACTION,
            initial_state: None,
            trigger: TriggerSource::ElementInput,
            max_events_per_step: 10,
            divergence_limit: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.duration >= self.dt) {
            return bad("duration must cover at least one step");
        }
        if !(self.event_tol > 0.0 && self.event_tol < self.dt) {
            return bad("event tolerance must lie in (0, dt)");
        }
        if !(self.window_fraction > 0.0 && self.window_fraction < 1.0) {
            return bad("window fraction must lie in (0, 1)");
        }
        if !(self.holdoff >= 0.0) {
            return bad("holdoff must be non-negative");
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResetEvent {
    pub t: f64,
    pub state_index: usize,
    pub pre: f64,
    pub post: f64,
    /// Trigger signal at the logged instant.
    pub trigger: f64,
}

/// Sampled signals. States are stored row-major, `n_states` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub e: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub n_states: usize,
    pub states: Vec<f64>,
    pub events: Vec<ResetEvent>,
}

pub const TRACE_CSV_FIXED: [&str; 5] = ["t", "r", "e", "u", "y"];
pub const EVENTS_CSV_HEADER: [&str; 4] = ["t_event", "state_index", "pre", "post"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    R,
    E,
    U,
    Y,
    State(usize),
}

impl SimTrace {
    fn empty(n_states: usize) -> Self {
        Self {
            t: Vec::new(),
            r: Vec::new(),
            e: Vec::new(),
            u: Vec::new(),
            y: Vec::new(),
            n_states,
            states: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn state(&self, sample: usize, i: usize) -> f64 {
        self.states[sample * self.n_states + i]
    }

    pub fn signal(&self, sel: Selector) -> Vec<f64> {
        match sel {
            Selector::R => self.r.clone(),
            Selector::E => self.e.clone(),
            Selector::U => self.u.clone(),
            Selector::Y => self.y.clone(),
            Selector::State(i) => (0..self.len()).map(|k| self.state(k, i)).collect(),
        }
    }

    pub fn duration(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Columns `t, r, e, u, y, x1..xn`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let mut head: Vec<String> = TRACE_CSV_FIXED.iter().map(|s| s.to_string()).collect();
        head.extend((1..=self.n_states).map(|i| format!("x{i}")));
        wr.write_record(&head)?;
        for k in 0..self.len() {
            let mut rec = vec![
                fmt_num(self.t[k]),
                fmt_num(self.r[k]),
                fmt_num(self.e[k]),
                fmt_num(self.u[k]),
                fmt_num(self.y[k]),
            ];
            rec.extend((0..self.n_states).map(|i| fmt_num(self.state(k, i))));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Columns `t_event, state_index, pre, post`; `state_index` is one-based
    /// so that it names the matching `x` column of the trace.
    pub fn write_events_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wr.write_record(EVENTS_CSV_HEADER)?;
        for ev in &self.events {
            wr.write_record(&[
                fmt_num(ev.t),
                (ev.state_index + 1).to_string(),
                fmt_num(ev.pre),
                fmt_num(ev.post),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Affine read-out `row · x + d · r(t)`.
#[derive(Debug, Clone)]
pub struct Readout {
    pub row: DVector<f64>,
    pub d: f64,
}

impl Readout {
    pub fn eval(&self, x: &DVector<f64>, r: f64) -> f64 {
        self.row.dot(x) + self.d * r
    }
}

/// Linear dynamics `x' = Ax + b r(t)` with an optional zero-crossing
/// trigger and a diagonal jump map `x ← diag(gamma) x`.
pub struct Hybrid<'a> {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub input: &'a Signal,
    pub trigger: Option<Readout>,
    pub gamma: DVector<f64>,
    /// States written to the event log at each crossing.
    pub logged: Vec<usize>,
    pub e: Readout,
    pub u: Readout,
    pub y: Readout,
    /// Stop with `Divergence` once |y| exceeds the configured limit.
    pub check_divergence: bool,
}

/// Largest `h·ρ(A)` allowed before a step is subdivided. The classical RK4
/// stability interval on the negative real axis ends near 2.78.
const RK4_STABILITY: f64 = 2.5;

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let d = linalg::balance(a);
    let b = linalg::similarity_scale(a, &d);
    b.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

impl<'a> Hybrid<'a> {
    fn deriv(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * self.input.eval(t)
    }

    fn rk4(&self, t: f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
        let k1 = self.deriv(t, x);
        let k2 = self.deriv(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
        let k3 = self.deriv(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
        let k4 = self.deriv(t + h, &(x + &k3 * h));
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    fn g(&self, t: f64, x: &DVector<f64>) -> f64 {
        self.trigger.as_ref().map_or(0.0, |tr| tr.eval(x, self.input.eval(t)))
    }

    fn push(&self, tr: &mut SimTrace, t: f64, x: &DVector<f64>) {
        let r = self.input.eval(t);
        tr.t.push(t);
        tr.r.push(r);
        tr.e.push(self.e.eval(x, r));
        tr.u.push(self.u.eval(x, r));
        tr.y.push(self.y.eval(x, r));
        tr.states.extend(x.iter());
    }

    pub fn run(&self, cfg: &SimConfig) -> Result<SimTrace> {
        cfg.validate()?;
        let n = self.a.nrows();
        let mut x = match &cfg.initial_state {
            Some(x0) if x0.len() == n => x0.clone(),
            Some(x0) => {
                return Err(Error::DimensionMismatch(format!(
                    "initial state has {} entries for {} states",
                    x0.len(),
                    n
                )))
            }
            None => DVector::zeros(n),
        };
        let identity_reset = self.gamma.iter().all(|&g| g == 1.0);
        let sub = ((cfg.dt * spectral_radius(&self.a)) / RK4_STABILITY).ceil().max(1.0) as usize;
        let steps = cfg.steps();
        let mut tr = SimTrace::empty(n);
        tr.t.reserve(steps + 1);
        self.push(&mut tr, 0.0, &x);
        let mut holdoff_until = f64::NEG_INFINITY;
        for k in 0..steps {
            let mut events_this_step = 0usize;
            for j in 0..sub {
                let ts = (k as f64 + j as f64 / sub as f64) * cfg.dt;
                let te = if j + 1 == sub {
                    (k + 1) as f64 * cfg.dt
                } else {
                    (k as f64 + (j + 1) as f64 / sub as f64) * cfg.dt
                };
                let mut t = ts;
                while t < te {
                    let detect = self.trigger.is_some() && t >= holdoff_until;
                    let end = if !detect && holdoff_until > t && holdoff_until < te && self.trigger.is_some() {
                        holdoff_until
                    } else {
                        te
                    };
                    let h = end - t;
                    let x1 = self.rk4(t, &x, h);
                    if detect {
                        let g0 = self.g(t, &x);
                        let g1 = self.g(end, &x1);
                        if g0 != 0.0 && (g1 == 0.0 || g0.signum() != g1.signum()) {
                            let (mut lo, mut hi) = (0.0, h);
                            while hi - lo > cfg.event_tol {
                                let mid = 0.5 * (lo + hi);
                                let gm = self.g(t + mid, &self.rk4(t, &x, mid));
                                if gm == 0.0 || gm.signum() != g0.signum() {
                                    hi = mid;
                                } else {
                                    lo = mid;
                                }
                            }
                            let t_ev = if hi == h { end } else { t + hi };
                            let x_ev = if hi == h { x1.clone() } else { self.rk4(t, &x, hi) };
                            let g_ev = self.g(t_ev, &x_ev);
                            events_this_step += 1;
                            if events_this_step > cfg.max_events_per_step {
                                return Err(Error::EventStorm { t: t_ev, count: events_this_step });
                            }
                            if identity_reset {
                                for &i in &self.logged {
                                    tr.events.push(ResetEvent { t: t_ev, state_index: i, pre: x_ev[i], post: x_ev[i], trigger: g_ev });
                                }
                                x = x1;
                                t = end;
                                continue;
                            }
                            let x_post = x_ev.component_mul(&self.gamma);
                            for &i in &self.logged {
                                tr.events.push(ResetEvent {
                                    t: t_ev,
                                    state_index: i,
                                    pre: x_ev[i],
                                    post: x_post[i],
                                    trigger: g_ev,
                                });
                            }
                            self.push(&mut tr, t_ev, &x_ev);
                            self.push(&mut tr, t_ev, &x_post);
                            holdoff_until = t_ev + cfg.holdoff;
                            x = x_post;
                            t = t_ev;
                            continue;
                        }
                    }
                    x = x1;
                    t = end;
                }
            }
            let t1 = (k + 1) as f64 * cfg.dt;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { t: t1 });
            }
            if tr.t.last() != Some(&t1) {
                self.push(&mut tr, t1, &x);
            }
            if self.check_divergence {
                let y = *tr.y.last().expect("non-empty");
                if y.abs() > cfg.divergence_limit {
                    return Err(Error::Divergence { t: t1, value: y.abs() });
                }
            }
        }
        Ok(tr)
    }
}

/// Drives a reset element with `input`. Resets fire on the input's zero
/// crossings; `r` and `e` hold the input, `u` and `y` the output.
pub fn simulate_reset_element(system: &ResetSystem, input: &Signal, cfg: &SimConfig) -> Result<SimTrace> {
    let base = system.base();
    let n = base.order();
    let out = Readout { row: base.c().clone(), d: base.d() };
    let logged = {
        let r = system.resetting_states();
        if r.is_empty() {
            (0..n).collect()
        } else {
            r
        }
    };
    let h = Hybrid {
        a: base.a().clone(),
        b: base.b().clone(),
        input,
        trigger: Some(Readout { row: DVector::zeros(n), d: 1.0 }),
        gamma: system.gamma().clone(),
        logged,
        e: Readout { row: DVector::zeros(n), d: 1.0 },
        u: out.clone(),
        y: out,
        check_divergence: false,
    };
    h.run(cfg)
}

/// Plain linear simulation with the same integrator and no events.
pub fn simulate_linear(model: &StateSpaceModel, input: &Signal, cfg: &SimConfig) -> Result<SimTrace> {
    let n = model.order();
    let out = Readout { row: model.c().clone(), d: model.d() };
    let h = Hybrid {
        a: model.a().clone(),
        b: model.b().clone(),
        input,
        trigger: None,
        gamma: DVector::from_element(n, 1.0),
        logged: Vec::new(),
        e: Readout { row: DVector::zeros(n), d: 1.0 },
        u: out.clone(),
        y: out,
        check_divergence: false,
    };
    h.run(cfg)
}

/// Closed-loop matrices of a chain around a strictly proper plant. States
/// are ordered (controller blocks in signal order, plant).
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub n_controller: usize,
    pub n_plant: usize,
    pub gamma: DVector<f64>,
    /// Closed-loop state indices of the CgLp block.
    pub cglp_states: std::ops::Range<usize>,
    e: Readout,
    u: Readout,
    y: Readout,
    element_input: Option<Readout>,
}

impl ClosedLoop {
    pub fn new(chain: &ControllerChain, plant: &StateSpaceModel) -> Result<Self> {
        if plant.d() != 0.0 {
            return Err(Error::InvalidConfig("plant must be strictly proper".into()));
        }
        let (comp, stage) = chain.compose()?;
        let c = comp.system.base();
        let (nc, np) = (c.order(), plant.order());
        let n = nc + np;
        let mut a = DMatrix::zeros(n, n);
        a.view_mut((0, 0), (nc, nc)).copy_from(c.a());
        a.view_mut((0, nc), (nc, np)).copy_from(&(-(c.b() * plant.c().transpose())));
        a.view_mut((nc, 0), (np, nc)).copy_from(&(plant.b() * c.c().transpose()));
        a.view_mut((nc, nc), (np, np))
            .copy_from(&(plant.a() - plant.b() * plant.c().transpose() * c.d()));
        let mut b = DVector::zeros(n);
        b.rows_mut(0, nc).copy_from(c.b());
        b.rows_mut(nc, np).copy_from(&(plant.b() * c.d()));
        let mut gamma = DVector::from_element(n, 1.0);
        gamma.rows_mut(0, nc).copy_from(comp.system.gamma());

        let lift = |row_c: &DVector<f64>, d: f64| {
            let mut row = DVector::zeros(n);
            row.rows_mut(0, nc).copy_from(row_c);
            row.rows_mut(nc, np).copy_from(&(-plant.c() * d));
            Readout { row, d }
        };
        let e = lift(&DVector::zeros(nc), 1.0);
        let u = lift(c.c(), c.d());
        let mut yrow = DVector::zeros(n);
        yrow.rows_mut(nc, np).copy_from(plant.c());
        let y = Readout { row: yrow, d: 0.0 };
        let (element_input, cglp_states) = match stage {
            Some(k) => {
                let (row, d) = comp.stage_input(k);
                (Some(lift(&row, d)), comp.ranges[k].clone())
            }
            None => (None, 0..0),
        };
        Ok(Self { a, b, n_controller: nc, n_plant: np, gamma, cglp_states, e, u, y, element_input })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// Plant output row in closed-loop coordinates.
    pub fn output_row(&self) -> &DVector<f64> {
        &self.y.row
    }

    /// Indices of states with a reset coefficient other than 1.
    pub fn resetting_states(&self) -> Vec<usize> {
        (0..self.order()).filter(|&i| self.gamma[i] != 1.0).collect()
    }
}

pub fn simulate_closed_loop(
    chain: &ControllerChain,
    plant: &StateSpaceModel,
    reference: &Signal,
    cfg: &SimConfig,
) -> Result<SimTrace> {
    let cl = ClosedLoop::new(chain, plant)?;
    let trigger = match cfg.trigger {
        TriggerSource::ElementInput => cl.element_input.clone(),
        TriggerSource::LoopError => cl.element_input.as_ref().map(|_| cl.e.clone()),
    };
    let logged = {
        let r = cl.resetting_states();
        if r.is_empty() {
            cl.cglp_states.clone().collect()
        } else {
            r
        }
    };
    let h = Hybrid {
        a: cl.a.clone(),
        b: cl.b.clone(),
        input: reference,
        trigger,
        gamma: cl.gamma.clone(),
        logged,
        e: cl.e.clone(),
        u: cl.u.clone(),
        y: cl.y.clone(),
        check_divergence: true,
    };
    h.run(cfg)
}

/// The final `n_periods` of a trace, re-based to start at `t = 0`.
pub fn extract_steady_state(trace: &SimTrace, period: f64, n_periods: usize) -> Result<SimTrace> {
    let need = 2.0 * n_periods as f64 * period;
    let have = trace.duration();
    if have < need * (1.0 - 1e-9) {
        return Err(Error::TooShort { have, need });
    }
    let t_end = *trace.t.last().expect("non-empty");
    let start = t_end - n_periods as f64 * period;
    let tol = 1e-9 * period;
    let first = trace.t.partition_point(|&t| t < start - tol);
    let mut out = SimTrace::empty(trace.n_states);
    let t0 = trace.t[first];
    out.t = trace.t[first..].iter().map(|t| t - t0).collect();
    out.r = trace.r[first..].to_vec();
    out.e = trace.e[first..].to_vec();
    out.u = trace.u[first..].to_vec();
    out.y = trace.y[first..].to_vec();
    out.states = trace.states[first * trace.n_states..].to_vec();
    out.events = trace
        .events
        .iter()
        .filter(|ev| ev.t >= t0)
        .map(|ev| ResetEvent { t: ev.t - t0, ..*ev })
        .collect();
    Ok(out)
}

/// Complex Fourier coefficients `c_n = j (2/W) ∫ s(t) e^{-jnωt} dt` by the
/// trapezoid rule. A unit `sin(ωt)` gives `c_1 = 1`; the phase is measured
/// against `sin(nωt)` at the window start.
pub fn fourier_harmonics(steady: &SimTrace, sel: Selector, omega: f64, orders: &[u32]) -> Result<Vec<Complex64>> {
    let s = steady.signal(sel);
    fourier_of(&steady.t, &s, omega, orders)
}

pub fn fourier_of(t: &[f64], s: &[f64], omega: f64, orders: &[u32]) -> Result<Vec<Complex64>> {
    let period = 2.0 * PI / omega;
    let window = match (t.first(), t.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    let cycles = (window / period).round();
    if cycles < 1.0 || ((window / period) - cycles).abs() > 1e-3 * cycles {
        return Err(Error::NonCommensurateWindow { window, period });
    }
    let t0 = t[0];
    Ok(orders
        .iter()
        .map(|&n| {
            let nw = n as f64 * omega;
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..t.len() - 1 {
                let h = t[i + 1] - t[i];
                if h == 0.0 {
                    continue;
                }
                let a = s[i] * Complex64::from_polar(1.0, -nw * (t[i] - t0));
                let b = s[i + 1] * Complex64::from_polar(1.0, -nw * (t[i + 1] - t0));
                acc += (a + b) * (0.5 * h);
            }
            Complex64::new(0.0, 2.0 / window) * acc
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    #[serde(rename = "L2")]
    pub l2: f64,
    #[serde(rename = "Linf")]
    pub linf: f64,
}

/// RMS (time-weighted, trapezoid) and maximum of |e| over the window.
pub fn error_metrics(steady: &SimTrace) -> ErrorMetrics {
    let e = &steady.e;
    let t = &steady.t;
    let linf = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let w = steady.duration();
    let l2 = if w > 0.0 {
        let mut acc = 0.0;
        for i in 0..t.len() - 1 {
            acc += 0.5 * (e[i] * e[i] + e[i + 1] * e[i + 1]) * (t[i + 1] - t[i]);
        }
        (acc / w).sqrt()
    } else if e.is_empty() {
        0.0
    } else {
        (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt()
    };
    ErrorMetrics { l2, linf }
}

/// Steady-state metrics of a closed loop tracking `sin(ωt)` with the
/// default schedule.
pub fn sinusoid_metrics(
    chain: &ControllerChain,
    plant: &StateSpaceModel,
    omega: f64,
    cfg: &SimConfig,
) -> Result<(ErrorMetrics, SimTrace)> {
    let tr = simulate_closed_loop(chain, plant, &Signal::sin(omega), cfg)?;
    let period = 2.0 * PI / omega;
    let keep = ((cfg.window_fraction * cfg.duration / period).round() as usize).max(1);
    let ss = extract_steady_state(&tr, period, keep)?;
    Ok((error_metrics(&ss), tr))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub omega: f64,
    pub metrics: Option<ErrorMetrics>,
}

/// Steady-state error metrics over a frequency grid. Failed points are gaps.
pub fn sweep_error(
    chain: &ControllerChain,
    plant: &StateSpaceModel,
    grid: &[f64],
    make_cfg: impl Fn(f64) -> SimConfig + Sync,
) -> Vec<SweepPoint> {
    grid.par_iter()
        .map(|&w| {
            let cfg = make_cfg(w);
            let metrics = match sinusoid_metrics(chain, plant, w, &cfg) {
                Ok((m, _)) => Some(m),
                Err(e) => {
                    log::warn!("sweep point omega = {w} failed: {e}");
                    None
                }
            };
            SweepPoint { omega: w, metrics }
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: [&str; 4] = ["omega_rad_s", "controller", "l2", "linf"];

/// Long-format sweep table shared by all controllers.
pub fn write_sweep_csv<W: Write>(w: W, rows: &[(String, Vec<SweepPoint>)]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wr.write_record(SWEEP_CSV_HEADER)?;
    for (name, pts) in rows {
        for p in pts {
            let (l2, linf) = p.metrics.map_or((f64::NAN, f64::NAN), |m| (m.l2, m.linf));
            wr.write_record(&[fmt_num(p.omega), name.clone(), fmt_num(l2), fmt_num(linf)])?;
        }
    }
    wr.flush()?;
    Ok(())
}
