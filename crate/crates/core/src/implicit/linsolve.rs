//! Matrix-free Krylov solvers with a dense least-squares last resort.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffcore::{dot, norm2, Tensor};
use crate::error::{Error, Result};

/// A square operator known only through products with it and its transpose.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_transpose(&self, y: &[f64]) -> Vec<f64>;
}

/// Explicit square matrix, mostly for tests and small problems.
pub struct DenseOperator(pub Tensor);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.matvec(x).expect("dimension checked by caller")
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.0.transpose().matvec(y).expect("dimension checked by caller")
    }
}

/// Swaps the roles of an operator and its transpose.
pub struct Transposed<'a, O: ?Sized>(pub &'a O);

impl<O: LinearOperator + ?Sized> LinearOperator for Transposed<'_, O> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.apply_transpose(x)
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.0.apply(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolveMethod {
    /// Conjugate gradients on `AᵀA x = Aᵀb`.
    NormalCg,
    Gmres,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearSolveConfig {
    pub method: LinearSolveMethod,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restart: usize,
}

impl Default for LinearSolveConfig {
    fn default() -> Self {
        Self {
            method: LinearSolveMethod::Gmres,
            tolerance: 1e-10,
            max_iterations: 500,
            restart: 50,
        }
    }
}

impl LinearSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("linear solve tolerance must be positive"));
        }
        if self.max_iterations == 0 || self.restart == 0 {
            return Err(Error::invalid("linear solve needs positive iteration and restart limits"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolvedBy {
    NormalCg,
    Gmres,
    PseudoInverse,
}

#[derive(Debug, Clone)]
pub struct LinearSolveOutcome {
    pub x: Vec<f64>,
    /// `‖A x − b‖₂`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: SolvedBy,
}

fn residual_norm(op: &dyn LinearOperator, x: &[f64], b: &[f64]) -> f64 {
    let ax = op.apply(x);
    ax.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Solves `A x = b` with the configured method, starting from zero.
///
/// Hitting the iteration cap is reported through `converged`; a Krylov
/// breakdown with a residual still above tolerance is an error.
pub fn linear_solve(
    op: &dyn LinearOperator,
    rhs: &[f64],
    cfg: &LinearSolveConfig,
) -> Result<LinearSolveOutcome> {
    cfg.validate()?;
    if rhs.len() != op.dim() {
        return Err(Error::shape(format!(
            "right-hand side has {} entries for an operator of size {}",
            rhs.len(),
            op.dim()
        )));
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear solve right-hand side".into()));
    }
    let target = cfg.tolerance * norm2(rhs).max(1.0);
    match cfg.method {
        LinearSolveMethod::Gmres => gmres(op, rhs, cfg, target),
        LinearSolveMethod::NormalCg => normal_cg(op, rhs, cfg, target),
    }
}

fn normal_cg(
    op: &dyn LinearOperator,
    b: &[f64],
    cfg: &LinearSolveConfig,
    target: f64,
) -> Result<LinearSolveOutcome> {
    let n = b.len();
    let mut x = vec![0.0; n];
    // r tracks b − A x, z = Aᵀ r is the normal-equation residual.
    let mut r = b.to_vec();
    let mut z = op.apply_transpose(&r);
    let mut p = z.clone();
    let mut zz = dot(&z, &z);
    let mut iterations = 0;
    while norm2(&r) > target && iterations < cfg.max_iterations {
        let ap = op.apply(&p);
        let denom = dot(&ap, &ap);
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::LinearSolve(format!(
                "normal CG breakdown at iteration {iterations}, residual {:.3e}",
                norm2(&r)
            )));
        }
        let alpha = zz / denom;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        z = op.apply_transpose(&r);
        let zz_new = dot(&z, &z);
        let beta = zz_new / zz;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        zz = zz_new;
        iterations += 1;
        if zz == 0.0 {
            break;
        }
    }
    let residual = residual_norm(op, &x, b);
    Ok(LinearSolveOutcome {
        x,
        residual,
        iterations,
        converged: residual <= target,
        method: SolvedBy::NormalCg,
    })
}

fn gmres(
    op: &dyn LinearOperator,
    b: &[f64],
    cfg: &LinearSolveConfig,
    target: f64,
) -> Result<LinearSolveOutcome> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut iterations = 0;
    let mut residual = norm2(b);
    while residual > target && iterations < cfg.max_iterations {
        let ax = op.apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = norm2(&r);
        if beta <= target {
            residual = beta;
            break;
        }
        let m = cfg.restart.min(cfg.max_iterations - iterations).min(n.max(1));
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut e = vec![0.0; m + 1];
        e[0] = beta;
        let mut k = 0;
        while k < m {
            let mut w = op.apply(&basis[k]);
            for (i, v) in basis.iter().enumerate() {
                let h = dot(&w, v);
                hess[i][k] = h;
                for (wj, vj) in w.iter_mut().zip(v) {
                    *wj -= h * vj;
                }
            }
            let hn = norm2(&w);
            hess[k + 1][k] = hn;
            for i in 0..k {
                let t = cs[i] * hess[i][k] + sn[i] * hess[i + 1][k];
                hess[i + 1][k] = -sn[i] * hess[i][k] + cs[i] * hess[i + 1][k];
                hess[i][k] = t;
            }
            let d = hess[k][k].hypot(hess[k + 1][k]);
            if d == 0.0 {
                return Err(Error::LinearSolve(format!(
                    "GMRES breakdown at iteration {}",
                    iterations + k
                )));
            }
            cs[k] = hess[k][k] / d;
            sn[k] = hess[k + 1][k] / d;
            hess[k][k] = d;
            hess[k + 1][k] = 0.0;
            e[k + 1] = -sn[k] * e[k];
            e[k] *= cs[k];
            k += 1;
            if e[k].abs() <= target || hn <= f64::EPSILON * beta {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // back substitution on the k × k triangle
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|j| hess[i][j] * y[j]).sum();
            y[i] = (e[i] - s) / hess[i][i];
        }
        for (yi, v) in y.iter().zip(&basis) {
            for (xj, vj) in x.iter_mut().zip(v) {
                *xj += yi * vj;
            }
        }
        iterations += k;
        residual = residual_norm(op, &x, b);
        if !residual.is_finite() {
            return Err(Error::LinearSolve("GMRES produced a non-finite iterate".into()));
        }
    }
    Ok(LinearSolveOutcome {
        x,
        residual,
        iterations,
        converged: residual <= target,
        method: SolvedBy::Gmres,
    })
}

/// Minimum-norm least-squares solution through a dense pseudo-inverse.
pub fn pseudo_inverse_solve(op: &dyn LinearOperator, rhs: &[f64]) -> Result<LinearSolveOutcome> {
    let n = op.dim();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        for (i, v) in op.apply(&e).into_iter().enumerate() {
            a[(i, j)] = v;
        }
        e[j] = 0.0;
    }
    let pinv = a
        .pseudo_inverse(1e-12)
        .map_err(|m| Error::LinearSolve(format!("pseudo-inverse failed: {m}")))?;
    let x: Vec<f64> = (pinv * nalgebra::DVector::from_column_slice(rhs)).iter().copied().collect();
    let residual = residual_norm(op, &x, rhs);
    Ok(LinearSolveOutcome {
        x,
        residual,
        iterations: 0,
        converged: true,
        method: SolvedBy::PseudoInverse,
    })
}

/// Tries the configured method, then the other Krylov method, then the
/// dense pseudo-inverse.
pub fn solve_with_fallback(
    op: &dyn LinearOperator,
    rhs: &[f64],
    cfg: &LinearSolveConfig,
) -> Result<LinearSolveOutcome> {
    let other = LinearSolveConfig {
        method: match cfg.method {
            LinearSolveMethod::Gmres => LinearSolveMethod::NormalCg,
            LinearSolveMethod::NormalCg => LinearSolveMethod::Gmres,
        },
        ..cfg.clone()
    };
    for c in [cfg, &other] {
        if let Ok(out) = linear_solve(op, rhs, c) {
            if out.converged {
                return Ok(out);
            }
        }
    }
    pseudo_inverse_solve(op, rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(method: LinearSolveMethod) -> LinearSolveConfig {
        LinearSolveConfig {
            method,
            ..Default::default()
        }
    }

    const METHODS: [LinearSolveMethod; 2] = [LinearSolveMethod::Gmres, LinearSolveMethod::NormalCg];

    #[test]
    fn identity_and_diagonal() {
        for m in METHODS {
            let id = DenseOperator(Tensor::identity(3));
            let out = linear_solve(&id, &[1.0, -2.0, 3.0], &cfg(m)).unwrap();
            for (a, b) in out.x.iter().zip([1.0, -2.0, 3.0]) {
                assert!((a - b).abs() < 1e-12);
            }
            let d = DenseOperator(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap());
            let out = linear_solve(&d, &[2.0, 4.0], &cfg(m)).unwrap();
            assert!(out.converged);
            assert!((out.x[0] - 1.0).abs() < 1e-12 && (out.x[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonally_dominant_against_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let n = 8;
            let mut a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for i in 0..n {
                a[i * n + i] += n as f64;
            }
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dense = DMatrix::from_row_slice(n, n, &a);
            let oracle = dense.lu().solve(&nalgebra::DVector::from_column_slice(&b)).unwrap();
            let op = DenseOperator(Tensor::matrix(n, n, a).unwrap());
            for m in METHODS {
                let out = linear_solve(&op, &b, &cfg(m)).unwrap();
                assert!(out.residual <= 1e-8, "{m:?} residual {}", out.residual);
                for (x, o) in out.x.iter().zip(oracle.iter()) {
                    assert!((x - o).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn restarted_gmres_on_nonsymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 30;
        let mut a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.1..0.1)).collect();
        for i in 0..n {
            a[i * n + i] += 1.0;
        }
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let op = DenseOperator(Tensor::matrix(n, n, a).unwrap());
        let c = LinearSolveConfig {
            restart: 4,
            ..Default::default()
        };
        let out = linear_solve(&op, &b, &c).unwrap();
        assert!(out.converged, "{}", out.residual);
    }

    #[test]
    fn singular_system_falls_back() {
        let op = DenseOperator(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let out = solve_with_fallback(&op, &[1.0, 0.0], &LinearSolveConfig::default()).unwrap();
        assert_eq!(out.method, SolvedBy::PseudoInverse);
        assert!((out.x[0] - 0.25).abs() < 1e-12 && (out.x[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let id = DenseOperator(Tensor::identity(2));
        assert!(linear_solve(&id, &[1.0], &LinearSolveConfig::default()).is_err());
        let bad = LinearSolveConfig {
            tolerance: 0.0,
            ..Default::default()
        };
        assert!(linear_solve(&id, &[1.0, 1.0], &bad).is_err());
    }
}
