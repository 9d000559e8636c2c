//! Sparse face-based operators and a Jacobi-preconditioned conjugate
//! gradient solver with optional mean-zero projection.
//!
//! Operators are assembled from face couplings, so every one of them is
//! symmetric by construction. Singular periodic and pure-Neumann problems
//! are handled by restricting CG to the mean-zero subspace of an active set.

use crate::error::{CoreError, Result};
use crate::grid::{max_abs, project_mean_zero};

pub trait LinearOperator {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;
}

/// Mixed-derivative coupling between the four cells around a vertex of the
/// `(a, b)` plane, in the order `00, 10, 01, 11`.
#[derive(Debug, Clone, Copy)]
pub struct CrossCoupling {
    pub cells: [usize; 4],
    pub coef: f64,
    pub inv_2h: f64,
}

const CROSS_A: [f64; 4] = [-1.0, 1.0, -1.0, 1.0];
const CROSS_B: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

/// `y = diag .* x + sum_faces c_f (x_lo - x_hi)(e_lo - e_hi) + cross terms`.
#[derive(Debug, Clone)]
pub struct FaceOperator {
    n: usize,
    pub(crate) faces: Vec<(usize, usize, f64)>,
    pub(crate) diag: Vec<f64>,
    pub(crate) cross: Vec<CrossCoupling>,
}

impl FaceOperator {
    pub fn new(n: usize) -> Self {
        Self { n, faces: Vec::new(), diag: vec![0.0; n], cross: Vec::new() }
    }

    pub fn add_face(&mut self, lo: usize, hi: usize, coef: f64) {
        if coef != 0.0 {
            self.faces.push((lo, hi, coef));
        }
    }

    pub fn add_diag(&mut self, i: usize, v: f64) {
        self.diag[i] += v;
    }

    pub fn add_cross(&mut self, c: CrossCoupling) {
        if c.coef != 0.0 {
            self.cross.push(c);
        }
    }
}

impl LinearOperator for FaceOperator {
    fn len(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for ((yi, xi), d) in y.iter_mut().zip(x).zip(&self.diag) {
            *yi = d * xi;
        }
        for &(lo, hi, c) in &self.faces {
            let f = c * (x[lo] - x[hi]);
            y[lo] += f;
            y[hi] -= f;
        }
        for cc in &self.cross {
            let (mut ga, mut gb) = (0.0, 0.0);
            for k in 0..4 {
                ga += CROSS_A[k] * x[cc.cells[k]];
                gb += CROSS_B[k] * x[cc.cells[k]];
            }
            ga *= cc.inv_2h;
            gb *= cc.inv_2h;
            for k in 0..4 {
                y[cc.cells[k]] += cc.coef * cc.inv_2h * (CROSS_A[k] * gb + CROSS_B[k] * ga);
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut d = self.diag.clone();
        for &(lo, hi, c) in &self.faces {
            d[lo] += c;
            d[hi] += c;
        }
        for cc in &self.cross {
            for k in 0..4 {
                d[cc.cells[k]] += 2.0 * cc.coef * cc.inv_2h * cc.inv_2h * CROSS_A[k] * CROSS_B[k];
            }
        }
        d
    }
}

/// Constant null space of a singular operator.
#[derive(Debug, Clone, Copy)]
pub enum NullSpace<'a> {
    None,
    /// Constants over the active cells (all cells when the mask is `None`).
    /// Inactive cells are pinned to zero.
    Constants(Option<&'a [bool]>),
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions<'a> {
    pub tol: f64,
    pub max_iter: usize,
    pub null_space: NullSpace<'a>,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// True relative residual `||b - A x|| / ||b||` at exit.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Check that the rhs of a singular system lies in the range of the operator.
pub fn check_compatible(b: &[f64], mask: Option<&[bool]>, rel: f64) -> Result<()> {
    let sum: f64 = match mask {
        None => b.iter().sum(),
        Some(m) => b.iter().zip(m).filter(|(_, &f)| f).map(|(v, _)| v).sum(),
    };
    let scale = norm(b).max(b.iter().map(|v| v.abs()).sum::<f64>() * f64::EPSILON);
    let limit = rel * scale;
    if sum.abs() > limit && sum.abs() > f64::MIN_POSITIVE {
        return Err(CoreError::Incompatible { sum: sum.abs(), limit });
    }
    Ok(())
}

/// Jacobi-preconditioned CG. For a constant null space the rhs must already be
/// compatible (see [`check_compatible`]); it is projected once more to remove
/// rounding, and the returned iterate has zero mean over the active set.
pub fn conjugate_gradient<Op: LinearOperator>(
    op: &Op,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &CgOptions,
) -> Result<CgOutcome> {
    let n = op.len();
    assert_eq!(b.len(), n, "rhs length does not match operator");
    let mask = match opts.null_space {
        NullSpace::Constants(m) => Some(m),
        NullSpace::None => None,
    };
    let project = |v: &mut [f64]| {
        if let Some(m) = mask {
            if let Some(active) = m {
                for (x, &a) in v.iter_mut().zip(active) {
                    if !a {
                        *x = 0.0;
                    }
                }
            }
            project_mean_zero(v, m);
        }
    };

    let mut rhs = b.to_vec();
    project(&mut rhs);
    let bnorm = norm(&rhs);
    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    project(&mut x);
    if bnorm == 0.0 {
        return Ok(CgOutcome { x: vec![0.0; n], iterations: 0, residual: 0.0 });
    }

    let inv_diag: Vec<f64> = op.diagonal().into_iter().map(|d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let precondition = |r: &[f64], z: &mut [f64]| {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&inv_diag) {
            *zi = ri * di;
        }
        project(z);
    };

    let mut r = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut iterations = 0usize;

    // Outer restarts guard against drift between the recursive and the true
    // residual near the tolerance floor.
    for _restart in 0..4 {
        op.apply(&x, &mut ap);
        for i in 0..n {
            r[i] = rhs[i] - ap[i];
        }
        project(&mut r);
        if norm(&r) <= opts.tol * bnorm {
            break;
        }
        precondition(&r, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        while iterations < opts.max_iter {
            op.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            project(&mut r);
            iterations += 1;
            if norm(&r) <= 0.5 * opts.tol * bnorm {
                break;
            }
            precondition(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        project(&mut x);
        if iterations >= opts.max_iter {
            break;
        }
    }

    op.apply(&x, &mut ap);
    for i in 0..n {
        r[i] = rhs[i] - ap[i];
    }
    project(&mut r);
    let residual = norm(&r) / bnorm;
    if residual > opts.tol {
        return Err(CoreError::NotConverged { iterations, residual });
    }
    // Clean residual rounding from the mean.
    if mask.is_some() && max_abs(&x) > 0.0 {
        project(&mut x);
    }
    Ok(CgOutcome { x, iterations, residual })
}
