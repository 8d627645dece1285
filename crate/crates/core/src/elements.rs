//! Linear blocks, reset elements, CgLp filters and the tamed-PID chain.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// SISO state-space block `x' = Ax + Bu`, `y = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    d: f64,
}

impl StateSpaceModel {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, d: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.len() != n || c.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}, B has {}, C has {} entries",
                a.nrows(),
                a.ncols(),
                b.len(),
                c.len()
            )));
        }
        let finite = a.iter().chain(b.iter()).chain(c.iter()).all(|v| v.is_finite());
        if !finite || !d.is_finite() {
            return Err(Error::InvalidConfig("non-finite state-space entry".into()));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn from_rows(a: &[&[f64]], b: &[f64], c: &[f64], d: f64) -> Result<Self> {
        let n = a.len();
        let flat: Vec<f64> = a.iter().flat_map(|r| r.iter().copied()).collect();
        if flat.len() != n * n {
            return Err(Error::DimensionMismatch("A rows are ragged".into()));
        }
        Self::new(
            DMatrix::from_row_slice(n, n, &flat),
            DVector::from_column_slice(b),
            DVector::from_column_slice(c),
            d,
        )
    }

    pub fn gain(k: f64) -> Self {
        Self {
            a: DMatrix::zeros(0, 0),
            b: DVector::zeros(0),
            c: DVector::zeros(0),
            d: k,
        }
    }

    pub fn integrator() -> Self {
        Self::from_rows(&[&[0.0]], &[1.0], &[1.0], 0.0).expect("valid")
    }

    /// `(s/ω_d + 1)/(s/ω_t + 1)`
    pub fn tamed_derivative(omega_d: f64, omega_t: f64) -> Result<Self> {
        if !(omega_d > 0.0 && omega_t > omega_d) {
            return Err(Error::InvalidConfig(format!(
                "tamed derivative needs 0 < omega_d < omega_t, got {omega_d}, {omega_t}"
            )));
        }
        let r = omega_t / omega_d;
        Self::from_rows(&[&[-omega_t]], &[omega_t], &[1.0 - r], r)
    }

    /// `k_p (1 + ω_i/s)`
    pub fn pi(k_p: f64, omega_i: f64) -> Result<Self> {
        if !(omega_i > 0.0) {
            return Err(Error::InvalidConfig(format!("omega_i must be positive, got {omega_i}")));
        }
        Self::from_rows(&[&[0.0]], &[1.0], &[k_p * omega_i], k_p)
    }

    /// `(s/ω_r + 1)/(s/ω_f + 1)`
    pub fn lead(omega_r: f64, omega_f: f64) -> Result<Self> {
        let r = omega_f / omega_r;
        Self::from_rows(&[&[-omega_f]], &[omega_f], &[1.0 - r], r)
    }

    pub fn lowpass(lp: &LowPass) -> Result<Self> {
        lp.validate()?;
        let w = lp.corner;
        match lp.order {
            1 => Self::from_rows(&[&[-w]], &[w], &[1.0], 0.0),
            _ => Self::from_rows(
                &[&[0.0, 1.0], &[-w * w, -2.0 * lp.damping * w]],
                &[0.0, 1.0],
                &[w * w, 0.0],
                0.0,
            ),
        }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }
    pub fn d(&self) -> f64 {
        self.d
    }

    /// `C (sI - A)^{-1} B + D`, or `None` when `s` is a pole.
    pub fn eval(&self, s: Complex64) -> Option<Complex64> {
        let b = self.b.map(|v| Complex64::new(v, 0.0));
        linalg::resolvent_apply(&self.a, &b, &self.c, s).map(|g| g + self.d)
    }

    pub fn series(&self, next: &StateSpaceModel) -> StateSpaceModel {
        series_compose(&[Block::Linear(self.clone()), Block::Linear(next.clone())])
            .expect("linear blocks always compose")
            .system
            .base
    }
}

/// Low-pass descriptor. Order 1 is `ω/(s+ω)`, order 2 is `ω²/(s²+2ζωs+ω²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowPass {
    pub order: u8,
    pub corner: f64,
    #[serde(default = "unit_damping")]
    pub damping: f64,
}

fn unit_damping() -> f64 {
    1.0
}

impl LowPass {
    pub fn first_order(corner: f64) -> Self {
        Self { order: 1, corner, damping: 1.0 }
    }
    pub fn second_order(corner: f64, damping: f64) -> Self {
        Self { order: 2, corner, damping }
    }
    fn validate(&self) -> Result<()> {
        if !(self.order == 1 || self.order == 2) {
            return Err(Error::InvalidConfig(format!("low-pass order must be 1 or 2, got {}", self.order)));
        }
        if !(self.corner > 0.0 && self.corner.is_finite()) || !(self.damping > 0.0) {
            return Err(Error::InvalidConfig("low-pass corner and damping must be positive".into()));
        }
        Ok(())
    }
}

/// A linear base system plus a diagonal reset matrix. States jump
/// `x ← A_ρ x` when the element input crosses zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ResetSystem {
    base: StateSpaceModel,
    gamma: DVector<f64>,
}

impl ResetSystem {
    pub fn new(base: StateSpaceModel, gamma: DVector<f64>) -> Result<Self> {
        if gamma.len() != base.order() {
            return Err(Error::DimensionMismatch(format!(
                "reset matrix has {} entries for {} states",
                gamma.len(),
                base.order()
            )));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidConfig("non-finite reset coefficient".into()));
        }
        let sys = Self { base, gamma };
        for w in sys.warnings() {
            log::warn!("{w}");
        }
        Ok(sys)
    }

    /// A linear block seen as a reset system that never changes its state.
    pub fn linear(base: StateSpaceModel) -> Self {
        let n = base.order();
        Self { base, gamma: DVector::from_element(n, 1.0) }
    }

    pub fn base(&self) -> &StateSpaceModel {
        &self.base
    }
    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }
    pub fn order(&self) -> usize {
        self.base.order()
    }
    pub fn reset_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.gamma)
    }

    /// Indices of states whose reset coefficient differs from 1.
    pub fn resetting_states(&self) -> Vec<usize> {
        (0..self.order()).filter(|&i| self.gamma[i] != 1.0).collect()
    }

    pub fn is_identity_reset(&self) -> bool {
        self.gamma.iter().all(|&g| g == 1.0)
    }

    pub fn with_gamma(&self, gamma: DVector<f64>) -> Result<Self> {
        Self::new(self.base.clone(), gamma)
    }

    pub fn with_identity_reset(&self) -> Self {
        Self::linear(self.base.clone())
    }

    /// Reset coefficients outside [-1, 1] are allowed but reported.
    pub fn warnings(&self) -> Vec<String> {
        self.gamma
            .iter()
            .enumerate()
            .filter(|(_, g)| g.abs() > 1.0)
            .map(|(i, g)| format!("reset coefficient gamma[{i}] = {g} lies outside [-1, 1]"))
            .collect()
    }
}

pub fn make_clegg() -> ResetSystem {
    ResetSystem::new(StateSpaceModel::integrator(), DVector::from_element(1, 0.0)).expect("valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CgLpKind {
    #[serde(rename = "FORE")]
    Fore,
    #[serde(rename = "SORE")]
    Sore,
    #[serde(rename = "SOSRE")]
    Sosre,
}

impl std::fmt::Display for CgLpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CgLpKind::Fore => "FORE",
            CgLpKind::Sore => "SORE",
            CgLpKind::Sosre => "SOSRE",
        })
    }
}

/// CgLp parameters. `omega_ralpha` and `alpha` are stored as given and
/// `omega_r = alpha * omega_ralpha` is derived, so `ω_rα = ω_r/α` by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgLpConfig {
    pub kind: CgLpKind,
    pub omega_ralpha: f64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_r: Option<f64>,
    pub omega_f: f64,
    /// FORE: `[γ]`. SORE: `[γ1, γ2]`. SOSRE: `[γ2]`.
    pub gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_lowpass: Option<LowPass>,
}

impl CgLpConfig {
    pub fn omega_r(&self) -> f64 {
        self.alpha * self.omega_ralpha
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let finite = [self.omega_ralpha, self.alpha, self.omega_f]
            .iter()
            .chain(self.gamma.iter())
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite CgLp parameter".into());
        }
        if !(self.omega_ralpha > 0.0) || !(self.alpha > 0.0) {
            return bad("omega_ralpha and alpha must be positive".into());
        }
        if !(self.omega_f > self.omega_r()) {
            return bad(format!(
                "omega_f = {} must exceed omega_r = {}",
                self.omega_f,
                self.omega_r()
            ));
        }
        let want = match self.kind {
            CgLpKind::Fore => 1,
            CgLpKind::Sore => 2,
            CgLpKind::Sosre => 1,
        };
        if self.gamma.len() != want {
            return bad(format!("{} expects {} gamma value(s), got {}", self.kind, want, self.gamma.len()));
        }
        match (self.kind, self.beta_r) {
            (CgLpKind::Fore, Some(_)) => bad("FORE takes no beta_r".into()),
            (CgLpKind::Sore | CgLpKind::Sosre, None) => bad(format!("{} needs beta_r", self.kind)),
            (CgLpKind::Sore | CgLpKind::Sosre, Some(b)) if !(b > 0.0 && b.is_finite()) => {
                bad("beta_r must be positive".into())
            }
            _ => Ok(()),
        }?;
        if let Some(lp) = &self.extra_lowpass {
            if self.kind != CgLpKind::Fore {
                return bad("extra_lowpass applies to FORE only".into());
            }
            lp.validate()?;
        }
        Ok(())
    }
}

/// Builds the reset element described by `config`.
pub fn make_cglp(config: &CgLpConfig) -> Result<ResetSystem> {
    match config.kind {
        CgLpKind::Fore => make_fore_cglp(config),
        CgLpKind::Sore => make_sore_cglp(config),
        CgLpKind::Sosre => make_sosre_cglp(config),
    }
}

/// Reset lag `1/(s/ω_rα + 1)` followed by the lead `(s/ω_r+1)/(s/ω_f+1)` and
/// the optional low-pass. Only the lag state resets.
pub fn make_fore_cglp(config: &CgLpConfig) -> Result<ResetSystem> {
    if config.kind != CgLpKind::Fore {
        return Err(Error::InvalidConfig(format!("expected FORE, got {}", config.kind)));
    }
    config.validate()?;
    let w = config.omega_ralpha;
    let lag = StateSpaceModel::from_rows(&[&[-w]], &[w], &[1.0], 0.0)?;
    let lag = ResetSystem::new(lag, DVector::from_element(1, config.gamma[0]))?;
    let mut blocks = vec![
        Block::Reset(lag),
        Block::Linear(StateSpaceModel::lead(config.omega_r(), config.omega_f)?),
    ];
    if let Some(lp) = &config.extra_lowpass {
        blocks.push(Block::Linear(StateSpaceModel::lowpass(lp)?));
    }
    Ok(series_compose(&blocks)?.system)
}

fn second_order_cglp(config: &CgLpConfig, gamma: [f64; 2]) -> Result<ResetSystem> {
    let wa = config.omega_ralpha;
    let wr = config.omega_r();
    let wf = config.omega_f;
    let br = config.beta_r.expect("validated");
    let a = [
        [0.0, 1.0, 0.0, 0.0],
        [-wa * wa, -2.0 * br * wa, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [wa * wa, 0.0, -wf * wf, -2.0 * wf],
    ];
    let c = [
        (wa * wf / wr).powi(2),
        0.0,
        wf * wf * (1.0 - (wf / wr).powi(2)),
        wf * wf * (2.0 * br / wr - 2.0 * wf / (wr * wr)),
    ];
    let base = StateSpaceModel::new(
        DMatrix::from_fn(4, 4, |i, j| a[i][j]),
        DVector::from_column_slice(&[0.0, 1.0, 0.0, 0.0]),
        DVector::from_column_slice(&c),
        0.0,
    )?;
    ResetSystem::new(base, DVector::from_column_slice(&[gamma[0], gamma[1], 1.0, 1.0]))
}

/// Controllable-form second-order reset lag in series with the
/// second-order lead; both lag states reset.
pub fn make_sore_cglp(config: &CgLpConfig) -> Result<ResetSystem> {
    if config.kind != CgLpKind::Sore {
        return Err(Error::InvalidConfig(format!("expected SORE, got {}", config.kind)));
    }
    config.validate()?;
    second_order_cglp(config, [config.gamma[0], config.gamma[1]])
}

/// Same realization as SORE with only the second state resetting.
/// The realization is kept exactly as built; a similarity transform would
/// change which physical signal is reset.
pub fn make_sosre_cglp(config: &CgLpConfig) -> Result<ResetSystem> {
    if config.kind != CgLpKind::Sosre {
        return Err(Error::InvalidConfig(format!("expected SOSRE, got {}", config.kind)));
    }
    config.validate()?;
    second_order_cglp(config, [1.0, config.gamma[0]])
}

/// `P(s) = 1/(m s² + c s + k)` realized with position and velocity states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantModel {
    pub m: f64,
    pub c: f64,
    pub k: f64,
}

impl PlantModel {
    pub fn new(m: f64, c: f64, k: f64) -> Result<Self> {
        let p = Self { m, c, k };
        p.validate()?;
        Ok(p)
    }

    /// Checks `m > 0`, `c ≥ 0`, `k > 0`.
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.c >= 0.0 && self.k > 0.0)
            || ![self.m, self.c, self.k].iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "plant needs m > 0, c >= 0, k > 0; got m={}, c={}, k={}",
                self.m, self.c, self.k
            )));
        }
        Ok(())
    }

    pub fn dc_gain(&self) -> f64 {
        1.0 / self.k
    }

    /// State-space realization. Does not validate, so a destabilized plant
    /// (negative stiffness) can still be analysed.
    pub fn model(&self) -> StateSpaceModel {
        StateSpaceModel::from_rows(
            &[&[0.0, 1.0], &[-self.k / self.m, -self.c / self.m]],
            &[0.0, 1.0 / self.m],
            &[1.0, 0.0],
            0.0,
        )
        .expect("valid shapes")
    }
}

/// Either kind of block in a series chain.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Linear(StateSpaceModel),
    Reset(ResetSystem),
}

impl Block {
    fn parts(&self) -> (&StateSpaceModel, Option<&DVector<f64>>) {
        match self {
            Block::Linear(m) => (m, None),
            Block::Reset(r) => (&r.base, Some(&r.gamma)),
        }
    }
}

/// Result of [`series_compose`]: the augmented system plus the state range
/// of each block and each block's output as `row · x + d · u`.
#[derive(Debug, Clone)]
pub struct Composite {
    pub system: ResetSystem,
    pub ranges: Vec<Range<usize>>,
    pub stage_outputs: Vec<(DVector<f64>, f64)>,
}

impl Composite {
    /// Input of block `k` as `row · x + d · u`.
    pub fn stage_input(&self, k: usize) -> (DVector<f64>, f64) {
        if k == 0 {
            (DVector::zeros(self.system.order()), 1.0)
        } else {
            self.stage_outputs[k - 1].clone()
        }
    }
}

/// Series connection in signal order. Linear blocks get unit reset
/// coefficients; reset blocks keep theirs.
pub fn series_compose(blocks: &[Block]) -> Result<Composite> {
    if blocks.is_empty() {
        return Err(Error::DimensionMismatch("series_compose needs at least one block".into()));
    }
    let n: usize = blocks.iter().map(|b| b.parts().0.order()).sum();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    let mut gamma = DVector::from_element(n, 1.0);
    let mut ranges = Vec::with_capacity(blocks.len());
    let mut stage_outputs = Vec::with_capacity(blocks.len());
    // signal entering the current block, as row · x + d · u
    let mut in_row = DVector::<f64>::zeros(n);
    let mut in_d = 1.0;
    let mut off = 0;
    for blk in blocks {
        let (m, g) = blk.parts();
        let k = m.order();
        let r = off..off + k;
        for i in 0..k {
            for j in 0..k {
                a[(off + i, off + j)] = m.a[(i, j)];
            }
            for j in 0..n {
                a[(off + i, j)] += m.b[i] * in_row[j];
            }
            b[off + i] = m.b[i] * in_d;
            if let Some(g) = g {
                gamma[off + i] = g[i];
            }
        }
        let mut out_row = &in_row * m.d;
        for i in 0..k {
            out_row[off + i] += m.c[i];
        }
        let out_d = m.d * in_d;
        stage_outputs.push((out_row.clone(), out_d));
        in_row = out_row;
        in_d = out_d;
        ranges.push(r);
        off += k;
    }
    let base = StateSpaceModel::new(a, b, in_row, in_d)?;
    Ok(Composite { system: ResetSystem { base, gamma }, ranges, stage_outputs })
}

/// Loop controller: tamed derivative, optional CgLp (or linear
/// low-pass), PI with gain `k_p`. Blocks that are `None` are omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerChain {
    pub k_p: f64,
    pub omega_i: Option<f64>,
    pub tamed: Option<(f64, f64)>,
    pub cglp: Option<ResetSystem>,
    pub lowpass: Option<LowPass>,
}

impl ControllerChain {
    pub fn new(
        k_p: f64,
        omega_i: Option<f64>,
        tamed: Option<(f64, f64)>,
        cglp: Option<ResetSystem>,
        lowpass: Option<LowPass>,
    ) -> Result<Self> {
        if !(k_p >= 0.0 && k_p.is_finite()) {
            return Err(Error::InvalidConfig(format!("k_p must be finite and non-negative, got {k_p}")));
        }
        if k_p == 0.0 {
            log::warn!("controller chain with k_p = 0 is open loop");
        }
        if let Some(wi) = omega_i {
            if !(wi > 0.0) {
                return Err(Error::InvalidConfig(format!("omega_i must be positive, got {wi}")));
            }
        }
        if let Some((wd, wt)) = tamed {
            if !(wd > 0.0 && wt > wd) {
                return Err(Error::InvalidConfig(format!("need omega_t > omega_d > 0, got {wd}, {wt}")));
            }
        }
        if cglp.is_some() && lowpass.is_some() {
            return Err(Error::InvalidConfig("a chain holds either a CgLp or a low-pass, not both".into()));
        }
        Ok(Self { k_p, omega_i, tamed, cglp, lowpass })
    }

    fn blocks(&self) -> Result<(Vec<Block>, Option<usize>)> {
        let mut blocks = Vec::new();
        let mut reset_stage = None;
        if let Some((wd, wt)) = self.tamed {
            blocks.push(Block::Linear(StateSpaceModel::tamed_derivative(wd, wt)?));
        }
        if let Some(c) = &self.cglp {
            reset_stage = Some(blocks.len());
            blocks.push(Block::Reset(c.clone()));
        }
        if let Some(lp) = &self.lowpass {
            blocks.push(Block::Linear(StateSpaceModel::lowpass(lp)?));
        }
        match self.omega_i {
            Some(wi) => blocks.push(Block::Linear(StateSpaceModel::pi(self.k_p, wi)?)),
            None => blocks.push(Block::Linear(StateSpaceModel::gain(self.k_p))),
        }
        Ok((blocks, reset_stage))
    }

    /// Whole controller as one reset system, plus the index of the CgLp
    /// block when present.
    pub fn compose(&self) -> Result<(Composite, Option<usize>)> {
        let (blocks, reset_stage) = self.blocks()?;
        Ok((series_compose(&blocks)?, reset_stage))
    }

    /// Linear blocks upstream of the CgLp (the tamed derivative).
    pub fn pre_filter(&self) -> Result<StateSpaceModel> {
        match self.tamed {
            Some((wd, wt)) => StateSpaceModel::tamed_derivative(wd, wt),
            None => Ok(StateSpaceModel::gain(1.0)),
        }
    }

    /// Linear blocks downstream of the CgLp (low-pass and PI).
    pub fn post_filter(&self) -> Result<StateSpaceModel> {
        let mut m = StateSpaceModel::gain(1.0);
        if let Some(lp) = &self.lowpass {
            m = m.series(&StateSpaceModel::lowpass(lp)?);
        }
        let pi = match self.omega_i {
            Some(wi) => StateSpaceModel::pi(self.k_p, wi)?,
            None => StateSpaceModel::gain(self.k_p),
        };
        Ok(m.series(&pi))
    }

    /// All linear controller blocks in series (CgLp excluded).
    pub fn linear_part(&self) -> Result<StateSpaceModel> {
        Ok(self.pre_filter()?.series(&self.post_filter()?))
    }

    /// The same chain with every reset coefficient set to 1.
    pub fn base_linear(&self) -> Self {
        Self { cglp: self.cglp.as_ref().map(|c| c.with_identity_reset()), ..self.clone() }
    }

    pub fn state_count(&self) -> usize {
        self.compose().map(|(c, _)| c.system.order()).unwrap_or(0)
    }
}

/// Design targets for [`make_pid_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningTargets {
    pub omega_c: f64,
    pub phase_margin_deg: f64,
    /// Drop the tamed derivative and the integrator and only solve `k_p`.
    #[serde(default)]
    pub proportional_only: bool,
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_deg(x: f64) -> f64 {
    let mut y = x % 360.0;
    if y <= -180.0 {
        y += 360.0;
    } else if y > 180.0 {
        y -= 360.0;
    }
    y
}

fn eval_at(m: &StateSpaceModel, w: f64) -> Result<Complex64> {
    m.eval(Complex64::new(0.0, w)).ok_or(Error::SingularResolvent { omega: w })
}

/// Tunes the chain: `ω_i = ω_c/10`, `ω_d = ω_c/a`, `ω_t = ω_c·a` with `a`
/// bisected on [1.01, 20] so the base linear loop has the requested phase
/// at `ω_c`, then `k_p` so the first-harmonic loop gain is 1 at `ω_c`.
pub fn make_pid_chain(
    plant: &StateSpaceModel,
    cglp: Option<&ResetSystem>,
    lowpass: Option<LowPass>,
    targets: TuningTargets,
) -> Result<ControllerChain> {
    let wc = targets.omega_c;
    if !(wc > 0.0 && wc.is_finite()) {
        return Err(Error::InvalidConfig(format!("omega_c must be positive, got {wc}")));
    }
    let p = eval_at(plant, wc)?;
    let (g1, bl) = match cglp {
        Some(c) => (
            crate::hosidf::describing_function(c, 1, wc)?,
            eval_at(c.base(), wc)?,
        ),
        None => match &lowpass {
            Some(lp) => {
                let v = eval_at(&StateSpaceModel::lowpass(lp)?, wc)?;
                (v, v)
            }
            None => (Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)),
        },
    };
    if targets.proportional_only {
        let l = g1 * p;
        if l.norm() == 0.0 {
            return Err(Error::TuningFailed("zero loop gain at omega_c".into()));
        }
        return ControllerChain::new(1.0 / l.norm(), None, None, cglp.cloned(), lowpass);
    }
    let wi = wc / 10.0;
    let pi = Complex64::new(1.0, -wi / wc);
    let tamed = |a: f64| {
        let s = Complex64::new(0.0, wc);
        (s / (wc / a) + 1.0) / (s / (wc * a) + 1.0)
    };
    let pm = |a: f64| wrap_deg(180.0 + (tamed(a) * bl * pi * p).arg().to_degrees());
    let target = targets.phase_margin_deg;
    let (mut lo, mut hi) = (1.01, 20.0);
    let (flo, fhi) = (pm(lo) - target, pm(hi) - target);
    if flo.signum() == fhi.signum() {
        return Err(Error::TuningFailed(format!(
            "phase margin {target} deg not reachable: a in [1.01, 20] gives [{:.2}, {:.2}] deg",
            pm(lo),
            pm(hi)
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (pm(mid) - target).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi {
            break;
        }
    }
    let a = 0.5 * (lo + hi);
    let l1 = tamed(a) * g1 * pi * p;
    let k_p = 1.0 / l1.norm();
    ControllerChain::new(k_p, Some(wi), Some((wc / a, wc * a)), cglp.cloned(), lowpass)
}

/// Parameter sets of the three compared CgLps, the plant and the linear
/// PID low-pass.
pub mod presets {
    use super::*;

    pub fn sosre() -> CgLpConfig {
        CgLpConfig {
            kind: CgLpKind::Sosre,
            omega_ralpha: 10.0,
            alpha: 1.13,
            beta_r: Some(1.0),
            omega_f: 1000.0,
            gamma: vec![0.1],
            extra_lowpass: None,
        }
    }

    pub fn sore() -> CgLpConfig {
        CgLpConfig {
            kind: CgLpKind::Sore,
            omega_ralpha: 10.0,
            alpha: 0.9,
            beta_r: Some(1.0),
            omega_f: 1000.0,
            gamma: vec![0.44, 0.44],
            extra_lowpass: None,
        }
    }

    pub fn fore() -> CgLpConfig {
        CgLpConfig {
            kind: CgLpKind::Fore,
            omega_ralpha: 10.0,
            alpha: 1.3,
            beta_r: None,
            omega_f: 1000.0,
            gamma: vec![0.15],
            extra_lowpass: Some(LowPass::first_order(1000.0)),
        }
    }

    pub fn plant() -> PlantModel {
        PlantModel { m: 11.11, c: 40.0, k: 10000.0 }
    }

    /// Low-pass of the linear PID, matching the CgLp high-frequency roll-off.
    pub fn pid_lowpass() -> LowPass {
        LowPass::second_order(1000.0, 1.0)
    }

    pub const BANDWIDTH: f64 = 100.0;
    pub const CGLP_BASE_PM_DEG: f64 = 5.0;
    pub const PID_PM_DEG: f64 = 45.0;

    pub fn cglp_targets() -> TuningTargets {
        TuningTargets { omega_c: BANDWIDTH, phase_margin_deg: CGLP_BASE_PM_DEG, proportional_only: false }
    }

    pub fn pid_targets() -> TuningTargets {
        TuningTargets { omega_c: BANDWIDTH, phase_margin_deg: PID_PM_DEG, proportional_only: false }
    }

    /// Tuned chain for a CgLp preset, or the linear PID when `None`.
    pub fn tuned_chain(cglp: Option<&CgLpConfig>) -> Result<ControllerChain> {
        let p = plant().model();
        match cglp {
            Some(cfg) => make_pid_chain(&p, Some(&make_cglp(cfg)?), None, cglp_targets()),
            None => make_pid_chain(&p, None, Some(pid_lowpass()), pid_targets()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol * b.norm().max(1e-300)
    }

    #[test]
    fn clegg_realization() {
        let c = make_clegg();
        assert_eq!(c.base().a()[(0, 0)], 0.0);
        assert_eq!(c.base().b()[0], 1.0);
        assert_eq!(c.base().c()[0], 1.0);
        assert_eq!(c.base().d(), 0.0);
        assert_eq!(c.gamma()[0], 0.0);
    }

    #[test]
    fn sosre_entries() {
        let s = make_sosre_cglp(&presets::sosre()).unwrap();
        let a = s.base().a();
        assert_eq!(a[(1, 0)], -100.0);
        assert_eq!(a[(1, 1)], -20.0);
        assert_eq!(a[(3, 0)], 100.0);
        assert_eq!(a[(3, 2)], -1e6);
        assert_eq!(a[(3, 3)], -2000.0);
        assert_eq!(s.gamma().as_slice(), &[1.0, 0.1, 1.0, 1.0]);
        let c0 = s.base().c()[0];
        assert!((c0 - 7.831e5).abs() / 7.831e5 < 1e-4, "{c0}");
    }

    #[test]
    fn sore_reset_matrix() {
        let s = make_sore_cglp(&presets::sore()).unwrap();
        assert_eq!(s.gamma().as_slice(), &[0.44, 0.44, 1.0, 1.0]);
    }

    #[test]
    fn fore_with_first_order_lowpass_has_three_states() {
        let f = make_fore_cglp(&presets::fore()).unwrap();
        assert_eq!(f.order(), 3);
        assert_eq!(f.gamma().as_slice(), &[0.15, 1.0, 1.0]);
    }

    #[test]
    fn fore_with_second_order_lowpass_has_four_states() {
        let mut cfg = presets::fore();
        cfg.extra_lowpass = Some(LowPass::second_order(1000.0, 1.0));
        let f = make_fore_cglp(&cfg).unwrap();
        assert_eq!(f.order(), 4);
        assert_eq!(f.gamma().as_slice(), &[0.15, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn fore_rejects_bad_ordering() {
        let mut cfg = presets::fore();
        cfg.omega_f = 5.0;
        assert!(matches!(make_fore_cglp(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn kind_mismatch_rejected() {
        assert!(make_sore_cglp(&presets::sosre()).is_err());
        assert!(make_sosre_cglp(&presets::fore()).is_err());
    }

    #[test]
    fn second_order_base_realizes_lag_times_lead() {
        let cfg = presets::sosre();
        let s = make_sosre_cglp(&cfg).unwrap();
        let (wa, wr, wf, b) = (cfg.omega_ralpha, cfg.omega_r(), cfg.omega_f, 1.0);
        for &w in &[0.3, 3.0, 10.0, 77.0, 500.0, 4000.0] {
            let s_ = Complex64::new(0.0, w);
            let r = 1.0 / ((s_ / wa).powi(2) + 2.0 * b * s_ / wa + 1.0);
            let d = ((s_ / wr).powi(2) + 2.0 * b * s_ / wr + 1.0) / ((s_ / wf).powi(2) + 2.0 * s_ / wf + 1.0);
            let g = s.base().eval(s_).unwrap();
            assert!(close(g, r * d, 1e-9), "w={w}: {g} vs {}", r * d);
        }
    }

    #[test]
    fn fore_base_realizes_lag_lead_lowpass() {
        let cfg = presets::fore();
        let f = make_fore_cglp(&cfg).unwrap();
        for &w in &[0.5, 10.0, 100.0, 2000.0] {
            let s = Complex64::new(0.0, w);
            let want = 1.0 / (s / cfg.omega_ralpha + 1.0) * (s / cfg.omega_r() + 1.0) / (s / cfg.omega_f + 1.0)
                / (s / 1000.0 + 1.0);
            assert!(close(f.base().eval(s).unwrap(), want, 1e-12));
        }
    }

    #[test]
    fn plant_dc_gain_and_resonance() {
        let p = presets::plant();
        let m = p.model();
        let g0 = m.eval(Complex64::new(0.0, 0.0)).unwrap();
        assert!((g0.re - 1e-4).abs() < 1e-18 && g0.im.abs() < 1e-18);
        let g = m.eval(Complex64::new(0.0, 30.0)).unwrap();
        let want = 1.0 / Complex64::new(1.0, 1200.0);
        assert!(close(g, want, 1e-9));
    }

    #[test]
    fn plant_validation() {
        assert!(PlantModel::new(1.0, 0.0, 1.0).is_ok());
        assert!(PlantModel::new(0.0, 1.0, 1.0).is_err());
        assert!(PlantModel::new(1.0, -1.0, 1.0).is_err());
        assert!(PlantModel::new(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn compose_counts_states_and_keeps_order() {
        let chain = presets::tuned_chain(Some(&presets::sosre())).unwrap();
        let (comp, stage) = chain.compose().unwrap();
        assert_eq!(comp.system.order(), 6);
        assert_eq!(stage, Some(1));
        assert_eq!(comp.ranges, vec![0..1, 1..5, 5..6]);
        assert_eq!(comp.system.gamma().as_slice(), &[1.0, 1.0, 0.1, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn compose_product_of_responses() {
        let l1 = StateSpaceModel::tamed_derivative(20.0, 400.0).unwrap();
        let l2 = StateSpaceModel::lowpass(&LowPass::second_order(300.0, 0.4)).unwrap();
        let comp = series_compose(&[Block::Linear(l1.clone()), Block::Linear(l2.clone())]).unwrap();
        for &w in &[0.1, 1.0, 50.0, 299.0, 1e4] {
            let s = Complex64::new(0.0, w);
            let want = l1.eval(s).unwrap() * l2.eval(s).unwrap();
            assert!(close(comp.system.base().eval(s).unwrap(), want, 1e-12));
        }
    }

    #[test]
    fn compose_stage_outputs() {
        let l1 = StateSpaceModel::tamed_derivative(20.0, 400.0).unwrap();
        let l2 = StateSpaceModel::pi(3.0, 2.0).unwrap();
        let comp = series_compose(&[Block::Linear(l1.clone()), Block::Linear(l2)]).unwrap();
        let (row, d) = &comp.stage_outputs[0];
        assert_eq!(*d, l1.d());
        assert_eq!(row[0], l1.c()[0]);
        assert_eq!(row[1], 0.0);
    }

    #[test]
    fn empty_compose_errors() {
        assert!(matches!(series_compose(&[]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn pid_tuning_corners() {
        let chain = presets::tuned_chain(None).unwrap();
        let (wd, wt) = chain.tamed.unwrap();
        assert_eq!(chain.omega_i, Some(10.0));
        assert!((wd - 26.3).abs() / 26.3 < 0.03, "wd {wd}");
        assert!((wt - 380.0).abs() / 380.0 < 0.03, "wt {wt}");
        assert!((wd * wt - 1e4).abs() < 1e-6);
    }

    #[test]
    fn proportional_only_unity_plant() {
        let unity = StateSpaceModel::gain(1.0);
        let t = TuningTargets { omega_c: 1.0, phase_margin_deg: 90.0, proportional_only: true };
        let chain = make_pid_chain(&unity, None, None, t).unwrap();
        assert_eq!(chain.k_p, 1.0);
        assert!(chain.tamed.is_none() && chain.omega_i.is_none());
    }

    #[test]
    fn unreachable_margin_fails() {
        let p = presets::plant().model();
        let t = TuningTargets { omega_c: 100.0, phase_margin_deg: 170.0, proportional_only: false };
        assert!(matches!(make_pid_chain(&p, None, None, t), Err(Error::TuningFailed(_))));
    }

    #[test]
    fn wrap_deg_range() {
        assert_eq!(wrap_deg(180.0), 180.0);
        assert_eq!(wrap_deg(-180.0), 180.0);
        assert_eq!(wrap_deg(344.0), -16.0);
        assert_eq!(wrap_deg(-190.0), 170.0);
    }

    #[test]
    fn gamma_outside_unit_interval_warns() {
        let r = ResetSystem::new(StateSpaceModel::integrator(), DVector::from_element(1, 1.5)).unwrap();
        assert_eq!(r.warnings().len(), 1);
        assert!(make_clegg().warnings().is_empty());
    }

    #[test]
    fn chain_rejects_bad_corners() {
        assert!(ControllerChain::new(1.0, Some(1.0), Some((10.0, 5.0)), None, None).is_err());
        assert!(ControllerChain::new(-1.0, None, None, None, None).is_err());
    }
}
