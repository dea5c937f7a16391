//! Exact multilinear extension by enumeration of all `2^|V|` subsets.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::setfn::{masks_from_bits, SetFunction};

use super::MeanFieldState;

/// Largest ground set the enumeration routines accept.
pub const ENUMERATION_LIMIT: usize = 20;

const TABLE_CHUNK: u64 = 1 << 14;

pub(crate) fn check_enumerable(n: usize) -> Result<()> {
    if n > ENUMERATION_LIMIT {
        return Err(Error::GroundSetTooLarge {
            size: n,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

/// `F(T)` for every subset `T`, indexed by the bitmask of `T`.
pub fn value_table(f: &dyn SetFunction) -> Result<Vec<f64>> {
    let n = f.ground_size();
    check_enumerable(n)?;
    let total = 1u64 << n;
    let mut table = Vec::with_capacity(total as usize);
    let mut start = 0;
    while start < total {
        let end = (start + TABLE_CHUNK).min(total);
        table.extend(f.eval_masks(&masks_from_bits(n, start..end))?);
        start = end;
    }
    Ok(table)
}

/// Product-of-Bernoullis probability `q(T; ψ)` of every subset `T`.
pub(crate) fn subset_probs(psi: &[f64]) -> Vec<f64> {
    let mut probs = vec![1.0];
    for (i, &p) in psi.iter().enumerate() {
        let half = 1usize << i;
        let mut next = vec![0.0; half * 2];
        for (t, &q) in probs.iter().enumerate() {
            next[t] = q * (1.0 - p);
            next[t | half] = q * p;
        }
        probs = next;
    }
    probs
}

pub(crate) fn table_value(table: &[f64], psi: &[f64]) -> f64 {
    subset_probs(psi).iter().zip(table).map(|(p, f)| p * f).sum()
}

fn pinned(psi: &[f64], pins: &[(usize, f64)]) -> Vec<f64> {
    let mut p = psi.to_vec();
    for &(i, v) in pins {
        p[i] = v;
    }
    p
}

/// `∂F̃/∂ψ_i = F̃([ψ]_{+i}) − F̃([ψ]_{−i})` from a value table.
pub(crate) fn table_grad(table: &[f64], psi: &[f64]) -> Vec<f64> {
    (0..psi.len())
        .map(|i| {
            table_value(table, &pinned(psi, &[(i, 1.0)]))
                - table_value(table, &pinned(psi, &[(i, 0.0)]))
        })
        .collect()
}

/// Four-point pinned differences off the diagonal, zero on it.
pub(crate) fn table_hessian(table: &[f64], psi: &[f64]) -> Tensor {
    let n = psi.len();
    let mut h = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = |a: f64, b: f64| table_value(table, &pinned(psi, &[(i, a), (j, b)]));
            let hij = v(1.0, 1.0) - v(0.0, 1.0) - v(1.0, 0.0) + v(0.0, 0.0);
            h.set(i, j, hij);
            h.set(j, i, hij);
        }
    }
    h
}

fn check_state(f: &dyn SetFunction, psi: &MeanFieldState) -> Result<()> {
    if psi.len() != f.ground_size() {
        return Err(Error::shape(format!(
            "state has {} entries for a ground set of {}",
            psi.len(),
            f.ground_size()
        )));
    }
    Ok(())
}

/// `F̃(ψ) = Σ_S F(S) Π_{j∈S} ψ_j Π_{j∉S} (1 − ψ_j)`.
pub fn exact_value(f: &dyn SetFunction, psi: &MeanFieldState) -> Result<f64> {
    check_state(f, psi)?;
    Ok(table_value(&value_table(f)?, psi.as_slice()))
}

pub fn exact_grad(f: &dyn SetFunction, psi: &MeanFieldState) -> Result<Vec<f64>> {
    check_state(f, psi)?;
    Ok(table_grad(&value_table(f)?, psi.as_slice()))
}

pub fn exact_hessian(f: &dyn SetFunction, psi: &MeanFieldState) -> Result<Tensor> {
    check_state(f, psi)?;
    Ok(table_hessian(&value_table(f)?, psi.as_slice()))
}
