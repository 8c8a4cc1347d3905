use nalgebra::{DMatrix, DVector};

use super::{check_len, Coefficients, OperatorDictionary};
use crate::error::Result;
use crate::linalg::spd_solve;

/// Residual norm, relative to `‖h‖`, at which pursuit stops early.
const RESIDUAL_RTOL: f64 = 1e-12;

/// Orthogonal matching pursuit of `h` over the columns of `atoms` with at
/// most `t0` selected atoms. Correlations are normalised by atom norm; ties
/// go to the lowest atom index.
pub fn omp(atoms: &DMatrix<f64>, h: &[f64], t0: usize) -> Vec<f64> {
    let k = atoms.ncols();
    let mut alpha = vec![0.0; k];
    let target = DVector::from_column_slice(h);
    let h_norm = target.norm();
    if t0 == 0 || h_norm == 0.0 {
        return alpha;
    }
    let norms: Vec<f64> = atoms.column_iter().map(|c| c.norm()).collect();
    let mut support: Vec<usize> = Vec::with_capacity(t0.min(k));
    let mut residual = target.clone();
    let mut coef = DVector::zeros(0);

    while support.len() < t0.min(k) && residual.norm() >= RESIDUAL_RTOL * h_norm {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..k {
            if norms[j] == 0.0 || support.contains(&j) {
                continue;
            }
            let c = (atoms.column(j).dot(&residual) / norms[j]).abs();
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let Some((j, c)) = best else { break };
        if c <= RESIDUAL_RTOL * h_norm {
            break;
        }
        support.push(j);
        let sub = DMatrix::from_fn(atoms.nrows(), support.len(), |r, s| atoms[(r, support[s])]);
        let gram = sub.transpose() * &sub;
        match spd_solve(&gram, &(sub.transpose() * &target)) {
            Some(c) => coef = c,
            None => {
                support.pop();
                break;
            }
        }
        residual = &target - &sub * &coef;
    }
    for (s, &j) in support.iter().enumerate() {
        alpha[j] = coef[s];
    }
    alpha
}

pub fn omp_code(dict: &OperatorDictionary, h: &[f64], t0: usize) -> Result<Coefficients> {
    check_len(dict, h)?;
    Ok(Coefficients {
        alpha: omp(dict.atoms(), h, t0),
    })
}
