//! Quadratic stability of reset closed loops through the restricted
//! Lyapunov condition: find `P ≻ 0` with `AᵀP + PA ≺ 0` whose resetting rows
//! equal `[β C_p, 0, P_ρ]`, and `A_ρ P_ρ A_ρ - P_ρ ⪯ 0`.
//!
//! States are ordered (plant, non-resetting controller, resetting) for the
//! analysis. The search works in diagonally scaled coordinates `x = S z`;
//! a diagonal `S` commutes with the diagonal reset matrix, so the condition
//! is unchanged and the certificate is stated in `z`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::elements::{ControllerChain, StateSpaceModel};
use crate::error::{Error, Result};
use crate::linalg;
use crate::lmi::{self, BarrierOptions, LmiProblem};
use crate::sim::ClosedLoop;

/// Closed-loop matrix plus the bookkeeping that maps it to the analysis
/// ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopPartition {
    /// As realized.
    pub a_cl: DMatrix<f64>,
    pub n_p: usize,
    pub n_nr: usize,
    pub n_r: usize,
    /// Plant output row over the plant states.
    pub c_p: DVector<f64>,
    /// `perm[k]` is the realized index of the k-th analysis state.
    pub perm: Vec<usize>,
    /// Reset coefficients of the resetting states, in analysis order.
    pub gamma_r: DVector<f64>,
}

impl ClosedLoopPartition {
    /// `plant` and `resetting` are realized indices; every other state is a
    /// non-resetting controller state.
    pub fn new(
        a_cl: DMatrix<f64>,
        plant: &[usize],
        c_p: DVector<f64>,
        resetting: &[usize],
        gamma_r: DVector<f64>,
    ) -> Result<Self> {
        let n = a_cl.nrows();
        if a_cl.ncols() != n || c_p.len() != plant.len() || gamma_r.len() != resetting.len() {
            return Err(Error::DimensionMismatch("partition blocks disagree with A_cl".into()));
        }
        let mut seen = vec![false; n];
        for &i in plant.iter().chain(resetting.iter()) {
            if i >= n || seen[i] {
                return Err(Error::DimensionMismatch(format!("state {i} listed twice or out of range")));
            }
            seen[i] = true;
        }
        let nonreset: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
        let perm: Vec<usize> = plant.iter().chain(nonreset.iter()).chain(resetting.iter()).copied().collect();
        Ok(Self {
            a_cl,
            n_p: plant.len(),
            n_nr: nonreset.len(),
            n_r: resetting.len(),
            c_p,
            perm,
            gamma_r,
        })
    }

    pub fn from_chain(chain: &ControllerChain, plant: &StateSpaceModel) -> Result<Self> {
        let cl = ClosedLoop::new(chain, plant)?;
        let plant_idx: Vec<usize> = (cl.n_controller..cl.order()).collect();
        let resetting = cl.resetting_states();
        let gamma_r = DVector::from_iterator(resetting.len(), resetting.iter().map(|&i| cl.gamma[i]));
        Self::new(cl.a.clone(), &plant_idx, plant.c().clone(), &resetting, gamma_r)
    }

    pub fn dim(&self) -> usize {
        self.a_cl.nrows()
    }

    /// `Π A_cl Πᵀ` in the analysis ordering.
    pub fn ordered_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.a_cl[(self.perm[i], self.perm[j])])
    }

    /// The same partition with the permutation already applied.
    pub fn permuted(&self) -> Self {
        Self { a_cl: self.ordered_matrix(), perm: (0..self.dim()).collect(), ..self.clone() }
    }

    pub fn validate_permutation(&self) -> bool {
        let mut p = self.perm.clone();
        p.sort_unstable();
        p == (0..self.dim()).collect::<Vec<_>>() && self.n_p + self.n_nr + self.n_r == self.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLinearReport {
    pub stable: bool,
    pub eigenvalues: Vec<Complex64>,
    pub max_re: f64,
}

/// Eigenvalues of the closed loop with every reset disabled. A real part
/// within `1e-10·ρ(A)` of zero counts as marginal, hence not stable.
pub fn base_linear_stable(partition: &ClosedLoopPartition) -> BaseLinearReport {
    let a = &partition.a_cl;
    if a.nrows() == 0 {
        return BaseLinearReport { stable: true, eigenvalues: vec![], max_re: f64::NEG_INFINITY };
    }
    let d = linalg::balance(a);
    let b = linalg::similarity_scale(a, &d);
    let eig: Vec<Complex64> = b.complex_eigenvalues().iter().copied().collect();
    let rho = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let max_re = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    BaseLinearReport { stable: max_re < -1e-10 * rho.max(f64::MIN_POSITIVE), eigenvalues: eig, max_re }
}

/// Largest eigenvalue of `A_ρ P_ρ A_ρ - P_ρ` for diagonal `A_ρ`.
pub fn reset_matrix_condition(gamma_r: &DVector<f64>, p_rho: &DMatrix<f64>) -> f64 {
    let g = DMatrix::from_diagonal(gamma_r);
    linalg::sym_max_eig(&(&g * p_rho * &g - p_rho))
}

/// Signed margins, each relative to the Frobenius scale of its matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// `λ_min(P)/‖P‖`, must be ≥ slack.
    pub p_min_eig: f64,
    /// `λ_max(AᵀP + PA)/‖AᵀP + PA‖`, must be ≤ -slack.
    pub lyapunov_max_eig: f64,
    /// `‖B_0ᵀP - C_0‖/‖P‖`, must be < slack.
    pub equality_residual: f64,
    /// `λ_max(A_ρP_ρA_ρ - P_ρ)/‖P_ρ‖`, must be ≤ -slack. `-inf` without resetting states.
    pub reset_max_eig: f64,
}

impl Margins {
    pub fn pass(&self, slack: f64) -> bool {
        self.p_min_eig >= slack
            && self.lyapunov_max_eig <= -slack
            && self.equality_residual < slack
            && self.reset_max_eig <= -slack
    }
}

pub const DEFAULT_SLACK: f64 = 1e-8;

/// Certificate in scaled analysis coordinates `x_ordered = diag(scaling) z`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityCertificate {
    pub scaling: DVector<f64>,
    pub p: DMatrix<f64>,
    pub p_rho: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub margins: Margins,
}

fn scaled(partition: &ClosedLoopPartition, scaling: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let a = linalg::similarity_scale(&partition.ordered_matrix(), scaling);
    let cp = partition.c_p.component_mul(&scaling.rows(0, partition.n_p));
    (a, cp)
}

fn frob(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

impl StabilityCertificate {
    /// Recomputes every margin from the partition and the stored matrices.
    pub fn verify(&self, partition: &ClosedLoopPartition) -> Result<Margins> {
        let n = partition.dim();
        if self.p.nrows() != n || self.scaling.len() != n || self.p_rho.nrows() != partition.n_r {
            return Err(Error::DimensionMismatch("certificate does not match the partition".into()));
        }
        let (a, cp) = scaled(partition, &self.scaling);
        let p = (&self.p + self.p.transpose()) * 0.5;
        let pn = frob(&p);
        let p_min_eig = linalg::sym_min_eig(&p) / pn;
        let l = a.transpose() * &p + &p * &a;
        let lyapunov_max_eig = linalg::sym_max_eig(&l) / frob(&l);
        let k = partition.n_r;
        let npn = n - k;
        let equality_residual = if k == 0 {
            0.0
        } else {
            let mut c0 = DMatrix::zeros(k, n);
            for i in 0..k {
                for j in 0..partition.n_p {
                    c0[(i, j)] = self.beta[i] * cp[j];
                }
                for j in 0..k {
                    c0[(i, npn + j)] = self.p_rho[(i, j)];
                }
            }
            frob(&(p.rows(npn, k).into_owned() - c0)) / pn
        };
        let reset_max_eig = if k == 0 {
            f64::NEG_INFINITY
        } else {
            reset_matrix_condition(&partition.gamma_r, &self.p_rho) / frob(&self.p_rho)
        };
        Ok(Margins { p_min_eig, lyapunov_max_eig, equality_residual, reset_max_eig })
    }

    /// `P`, `P_ρ`, `β` in the unscaled analysis ordering.
    pub fn unscaled(&self, n_r: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let n = self.p.nrows();
        let s = &self.scaling;
        let p = DMatrix::from_fn(n, n, |i, j| self.p[(i, j)] / (s[i] * s[j]));
        let off = n - n_r;
        let p_rho = DMatrix::from_fn(n_r, n_r, |i, j| self.p_rho[(i, j)] / (s[off + i] * s[off + j]));
        let beta = DVector::from_fn(n_r, |i, _| self.beta[i] / s[off + i]);
        (p, p_rho, beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StabilityOutcome {
    Certified(Box<StabilityCertificate>),
    /// The search found no certificate. The condition is only sufficient,
    /// so this says nothing about instability.
    Unknown { best_margin: f64, reason: String },
}

impl StabilityOutcome {
    pub fn is_certified(&self) -> bool {
        matches!(self, StabilityOutcome::Certified(_))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub slack: f64,
    pub jacobi_sweeps: usize,
    pub barrier: BarrierOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { slack: DEFAULT_SLACK, jacobi_sweeps: 3, barrier: BarrierOptions::default() }
    }
}

/// Power-of-two balancing followed by sweeps that equalize the diagonal of
/// the Lyapunov solution with `Q = I`.
fn analysis_scaling(a: &DMatrix<f64>, sweeps: usize) -> Result<DVector<f64>> {
    let mut s = linalg::balance(a);
    let mut az = linalg::similarity_scale(a, &s);
    let n = a.nrows();
    for _ in 0..sweeps {
        let p = linalg::lyap(&az, &DMatrix::identity(n, n))?;
        let d = DVector::from_fn(n, |i, _| p[(i, i)].max(f64::MIN_POSITIVE).sqrt());
        az = DMatrix::from_fn(n, n, |i, j| az[(i, j)] * d[i] / d[j]);
        s = s.component_div(&d);
    }
    Ok(s)
}

fn sym_basis(n: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        for j in i..n {
            let mut e = DMatrix::zeros(n, n);
            if i == j {
                e[(i, i)] = 1.0;
            } else {
                e[(i, j)] = r;
                e[(j, i)] = r;
            }
            out.push(e);
        }
    }
    out
}

fn mix(basis: &[DMatrix<f64>], w: nalgebra::DVectorView<'_, f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(basis[0].nrows(), basis[0].ncols());
    for (l, b) in basis.iter().enumerate() {
        if w[l] != 0.0 {
            m += b * w[l];
        }
    }
    m
}

/// Searches for a certificate. `P` is parameterized through `Q` with
/// `AᵀP + PA = -Q`, the equality constraint is imposed as a linear subspace,
/// and the smallest eigenvalue over `Q`, `P` and `P_ρ - A_ρP_ρA_ρ` is
/// maximized by an interior-point method. A result is returned as
/// certified only after [`StabilityCertificate::verify`] passes.
pub fn quadratic_stability_search(partition: &ClosedLoopPartition, opts: SearchOptions) -> Result<StabilityOutcome> {
    if !partition.validate_permutation() {
        return Err(Error::DimensionMismatch("partition permutation is not a bijection".into()));
    }
    let report = base_linear_stable(partition);
    if !report.stable {
        return Err(Error::BaseLinearUnstable { max_re: report.max_re });
    }
    let n = partition.dim();
    let k = partition.n_r;
    let npn = n - k;
    let a_ord = partition.ordered_matrix();
    let scaling = analysis_scaling(&a_ord, opts.jacobi_sweeps)?;
    let (a, cp) = scaled(partition, &scaling);
    let solver = linalg::LyapSolver::new(&a)?;

    if k == 0 {
        let p = solver.solve(&DMatrix::identity(n, n));
        return finish(partition, scaling, p, 0, opts.slack, f64::NAN);
    }

    let basis = sym_basis(n);
    let images: Vec<DMatrix<f64>> = basis.iter().map(|q| solver.solve(q)).collect();

    // rows of P for resetting states: plant part parallel to C_p, zero on
    // the non-resetting controller states
    let n_p = partition.n_p;
    let cp_mat = DMatrix::from_row_slice(1, n_p, cp.as_slice());
    let perp = linalg::null_space(&cp_mat, n_p, 0.0);
    let per_row = perp.ncols() + partition.n_nr;
    let mut cons = DMatrix::zeros(k * per_row, basis.len());
    for (col, p) in images.iter().enumerate() {
        for i in 0..k {
            let row = p.row(npn + i);
            let plant_part = row.columns(0, n_p).transpose();
            let proj = perp.transpose() * plant_part;
            for r in 0..perp.ncols() {
                cons[(i * per_row + r, col)] = proj[r];
            }
            for r in 0..partition.n_nr {
                cons[(i * per_row + perp.ncols() + r, col)] = row[n_p + r];
            }
        }
    }
    let cscale = cons.amax().max(f64::MIN_POSITIVE);
    let null = linalg::null_space(&(cons / cscale), basis.len(), 0.0);
    if null.ncols() == 0 {
        return Ok(StabilityOutcome::Unknown { best_margin: f64::NEG_INFINITY, reason: "equality constraint leaves no freedom".into() });
    }
    let qb: Vec<DMatrix<f64>> = (0..null.ncols()).map(|l| mix(&basis, null.column(l))).collect();
    let pb: Vec<DMatrix<f64>> = (0..null.ncols())
        .map(|l| {
            let m = mix(&images, null.column(l));
            (&m + m.transpose()) * 0.5
        })
        .collect();
    let sq = qb.iter().map(frob).fold(0.0, f64::max);
    let sp = pb.iter().map(frob).fold(0.0, f64::max);

    // whiten the parameterization
    let rows = 2 * n * n;
    let mut kmat = DMatrix::zeros(rows, qb.len());
    for l in 0..qb.len() {
        for (r, v) in qb[l].iter().enumerate() {
            kmat[(r, l)] = v / sq;
        }
        for (r, v) in pb[l].iter().enumerate() {
            kmat[(n * n + r, l)] = v / sp;
        }
    }
    let svd = kmat.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Numeric("SVD failed".into()))?;
    let s0 = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-13 * s0)
        .collect();
    let t_mat = DMatrix::from_fn(qb.len(), keep.len(), |l, m| vt[(keep[m], l)] / svd.singular_values[keep[m]]);
    let qw: Vec<DMatrix<f64>> = (0..keep.len()).map(|m| mix(&qb, t_mat.column(m))).collect();
    let pw: Vec<DMatrix<f64>> = (0..keep.len()).map(|m| mix(&pb, t_mat.column(m))).collect();
    let g = DMatrix::from_diagonal(&partition.gamma_r);
    let rw: Vec<DMatrix<f64>> = pw
        .iter()
        .map(|p| {
            let pr = p.view((npn, npn), (k, k)).into_owned();
            &pr - &g * &pr * &g
        })
        .collect();
    let normal = DVector::from_iterator(keep.len(), qw.iter().zip(pw.iter()).map(|(q, p)| q.trace() / sq + p.trace() / sp));
    let problem = LmiProblem {
        families: vec![
            qw.iter().map(|q| q / sq).collect(),
            pw.iter().map(|p| p / sp).collect(),
            rw.iter().map(|r| r / sp).collect(),
        ],
        normal,
    };
    let sol = lmi::maximize_margin(&problem, opts.barrier)?;
    log::debug!("barrier margin t = {:.3e} after {} Newton steps", sol.t, sol.newton_steps);
    if !(sol.t > 0.0) {
        return Ok(StabilityOutcome::Unknown {
            best_margin: sol.t,
            reason: format!("restricted Lyapunov search reached margin {:.3e} <= 0", sol.t),
        });
    }
    let p = mix(&pw, sol.theta.rows(0, sol.theta.len()));
    let p = (&p + p.transpose()) * 0.5;
    finish(partition, scaling, p, k, opts.slack, sol.t)
}

fn finish(
    partition: &ClosedLoopPartition,
    scaling: DVector<f64>,
    p: DMatrix<f64>,
    k: usize,
    slack: f64,
    t: f64,
) -> Result<StabilityOutcome> {
    let n = p.nrows();
    let npn = n - k;
    let cp = partition.c_p.component_mul(&scaling.rows(0, partition.n_p));
    let cc = cp.dot(&cp);
    let beta = DVector::from_fn(k, |i, _| {
        let row = p.row(npn + i);
        (0..partition.n_p).map(|j| row[j] * cp[j]).sum::<f64>() / cc
    });
    let p_rho = p.view((npn, npn), (k, k)).into_owned();
    let mut cert = StabilityCertificate {
        scaling,
        p,
        p_rho,
        beta,
        margins: Margins { p_min_eig: 0.0, lyapunov_max_eig: 0.0, equality_residual: 0.0, reset_max_eig: 0.0 },
    };
    cert.margins = cert.verify(partition)?;
    if cert.margins.pass(slack) {
        Ok(StabilityOutcome::Certified(Box::new(cert)))
    } else {
        Ok(StabilityOutcome::Unknown {
            best_margin: t,
            reason: format!("candidate failed re-verification: {:?}", cert.margins),
        })
    }
}

/// Row-major matrix for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateJson {
    pub ordering: Vec<usize>,
    pub n_plant: usize,
    pub n_nonresetting: usize,
    pub n_resetting: usize,
    pub scaling: Vec<f64>,
    pub p: MatrixJson,
    pub p_rho: MatrixJson,
    pub beta: Vec<f64>,
    pub margins: Margins,
}

impl CertificateJson {
    pub fn new(cert: &StabilityCertificate, partition: &ClosedLoopPartition) -> Self {
        Self {
            ordering: partition.perm.clone(),
            n_plant: partition.n_p,
            n_nonresetting: partition.n_nr,
            n_resetting: partition.n_r,
            scaling: cert.scaling.iter().copied().collect(),
            p: (&cert.p).into(),
            p_rho: (&cert.p_rho).into(),
            beta: cert.beta.iter().copied().collect(),
            margins: cert.margins,
        }
    }

    pub fn to_certificate(&self) -> StabilityCertificate {
        StabilityCertificate {
            scaling: DVector::from_vec(self.scaling.clone()),
            p: self.p.to_matrix(),
            p_rho: self.p_rho.to_matrix(),
            beta: DVector::from_vec(self.beta.clone()),
            margins: self.margins,
        }
    }
}
