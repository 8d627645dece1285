//! Small dense LMI solver: maximizes the common eigenvalue margin `t` of
//! affine matrix families with a log-det barrier and damped Newton steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// `maximize t` subject to `Σ_l θ_l F[m][l] - t I ≻ 0` for every family `m`
/// and `normal · θ = 1`.
#[derive(Debug, Clone)]
pub struct LmiProblem {
    pub families: Vec<Vec<DMatrix<f64>>>,
    pub normal: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LmiSolution {
    pub theta: DVector<f64>,
    pub t: f64,
    pub newton_steps: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BarrierOptions {
    /// Stop once the duality-gap bound `m/τ` falls below this.
    pub gap_tol: f64,
    pub max_newton_per_stage: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self { gap_tol: 1e-13, max_newton_per_stage: 100 }
    }
}

fn log_det_pd(m: &DMatrix<f64>) -> Option<f64> {
    let ch = m.clone().cholesky()?;
    let l = ch.l_dirty();
    let mut s = 0.0;
    for i in 0..m.nrows() {
        let d = l[(i, i)];
        if !(d > 0.0) {
            return None;
        }
        s += d.ln();
    }
    Some(2.0 * s)
}

pub fn maximize_margin(p: &LmiProblem, opts: BarrierOptions) -> Result<LmiSolution> {
    let q = p.normal.len();
    if q == 0 || p.families.iter().any(|f| f.len() != q) {
        return Err(Error::DimensionMismatch("LMI families must have one matrix per variable".into()));
    }
    let a = &p.normal;
    let aa = a.dot(a);
    if !(aa > 0.0) {
        return Err(Error::Numeric("zero normalization vector".into()));
    }
    let th0 = a / aa;
    let z = linalg::null_space(&DMatrix::from_row_slice(1, q, a.as_slice()), q, 0.0);
    let nz = z.ncols();
    let nv = nz + 1;

    let combine = |fam: &[DMatrix<f64>], w: &DVector<f64>| {
        let mut m = DMatrix::zeros(fam[0].nrows(), fam[0].ncols());
        for (l, f) in fam.iter().enumerate() {
            if w[l] != 0.0 {
                m += f * w[l];
            }
        }
        m
    };
    let base: Vec<DMatrix<f64>> = p.families.iter().map(|f| combine(f, &th0)).collect();
    let dirs: Vec<Vec<DMatrix<f64>>> = p
        .families
        .iter()
        .map(|f| {
            let n = f[0].nrows();
            let mut v: Vec<DMatrix<f64>> = (0..nz).map(|k| combine(f, &z.column(k).into_owned())).collect();
            v.push(-DMatrix::<f64>::identity(n, n));
            v
        })
        .collect();
    let mats = |y: &DVector<f64>| -> Vec<DMatrix<f64>> {
        base.iter()
            .zip(dirs.iter())
            .map(|(b, d)| {
                let mut m = b.clone();
                for k in 0..nv {
                    if y[k] != 0.0 {
                        m += &d[k] * y[k];
                    }
                }
                m
            })
            .collect()
    };
    let phi = |y: &DVector<f64>, tau: f64| -> f64 {
        let mut v = -tau * y[nv - 1];
        for m in mats(y) {
            match log_det_pd(&m) {
                Some(ld) => v -= ld,
                None => return f64::INFINITY,
            }
        }
        v
    };

    let mut y = DVector::zeros(nv);
    let start = base.iter().map(linalg::sym_min_eig).fold(f64::INFINITY, f64::min);
    y[nv - 1] = start - 1.0;
    let m_tot: usize = base.iter().map(|b| b.nrows()).sum();
    let mut tau = 1.0;
    let mut steps = 0;
    loop {
        for _ in 0..opts.max_newton_per_stage {
            let mut g = DVector::zeros(nv);
            g[nv - 1] = -tau;
            let mut h = DMatrix::zeros(nv, nv);
            for (m, d) in mats(&y).iter().zip(dirs.iter()) {
                let w = m
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("iterate left the feasible cone".into()))?
                    .inverse();
                let wg: Vec<DMatrix<f64>> = d.iter().map(|gk| &w * gk).collect();
                for k in 0..nv {
                    g[k] -= wg[k].trace();
                    for l in k..nv {
                        let v = wg[k].component_mul(&wg[l].transpose()).sum();
                        h[(k, l)] += v;
                        if l != k {
                            h[(l, k)] += v;
                        }
                    }
                }
            }
            let dy = match h.clone().cholesky() {
                Some(c) => -c.solve(&g),
                None => -h.lu().solve(&g).ok_or_else(|| Error::Numeric("singular Newton system".into()))?,
            };
            let lam2 = -g.dot(&dy);
            if lam2 / 2.0 < 1e-10 {
                break;
            }
            let f0 = phi(&y, tau);
            let slope = g.dot(&dy);
            let mut s = 1.0;
            let mut halvings = 0;
            while phi(&(&y + &dy * s), tau) > f0 + 0.25 * s * slope {
                s *= 0.5;
                halvings += 1;
                if halvings > 60 {
                    break;
                }
            }
            if halvings > 60 {
                break;
            }
            y += &dy * s;
            steps += 1;
        }
        if m_tot as f64 / tau < opts.gap_tol {
            break;
        }
        tau *= 10.0;
    }
    let theta = &th0 + &z * y.rows(0, nz);
    Ok(LmiSolution { theta, t: y[nv - 1], newton_steps: steps })
}
