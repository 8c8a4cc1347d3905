use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_fit_shape, columns_of, omp, DictKind, DictMeta, FitTrace, OperatorDictionary};
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;

const KSVD_SALT: u64 = 0x6b73_7664;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsvdParams {
    /// Sparsity budget per sample.
    pub t0: usize,
    /// Outer iterations (coding + atom sweep).
    pub iters: usize,
    pub seed: u64,
}

impl Default for KsvdParams {
    fn default() -> Self {
        Self {
            t0: 3,
            iters: 30,
            seed: 0,
        }
    }
}

/// KSVD dictionary learning on `n × m` samples (one per row).
///
/// Each outer iteration re-codes every sample with OMP (keeping its previous
/// code when that one fits better) and then sweeps the atoms, replacing each
/// by the leading singular pair of the residual restricted to the samples
/// that use it. Atoms nobody uses are re-seeded from the worst-represented
/// sample. The objective `‖S − D A‖²_F` is recorded after every iteration.
pub fn ksvd_fit(
    samples: &DMatrix<f64>,
    k: usize,
    params: &KsvdParams,
) -> Result<(OperatorDictionary, FitTrace)> {
    check_fit_shape(samples, k)?;
    if params.t0 == 0 || params.t0 > k {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= t0 <= k, got t0={}",
            params.t0
        )));
    }
    let s = columns_of(samples)?;
    let (m, n) = s.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ KSVD_SALT);
    let mut atoms = initial_atoms(&s, k, &mut rng);
    let mut codes = DMatrix::<f64>::zeros(k, n);
    let mut trace = FitTrace {
        objective: vec![objective(&s, &atoms, &codes)],
    };

    for _ in 0..params.iters {
        // coding phase
        let new_codes: Vec<DVector<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let col = s.column(i);
                let old = codes.column(i).into_owned();
                let fresh = DVector::from_vec(omp(&atoms, col.as_slice(), params.t0));
                let e_old = (col - &atoms * &old).norm_squared();
                let e_new = (col - &atoms * &fresh).norm_squared();
                if e_new < e_old {
                    fresh
                } else {
                    old
                }
            })
            .collect();
        for (i, c) in new_codes.into_iter().enumerate() {
            codes.set_column(i, &c);
        }

        // atom sweep
        let mut reseeded: Vec<usize> = Vec::new();
        for j in 0..k {
            let users: Vec<usize> = (0..n).filter(|&i| codes[(j, i)] != 0.0).collect();
            if users.is_empty() {
                if let Some(i) = worst_represented(&s, &atoms, &codes, &reseeded) {
                    let col = s.column(i);
                    atoms.set_column(j, &(col / col.norm()));
                    reseeded.push(i);
                }
                continue;
            }
            let mut err = DMatrix::zeros(m, users.len());
            for (c, &i) in users.iter().enumerate() {
                let mut r = s.column(i) - &atoms * codes.column(i);
                r += atoms.column(j) * codes[(j, i)];
                err.set_column(c, &r);
            }
            let (_, vecs) = sym_eigen_desc(&(&err * err.transpose()));
            let mut u = vecs.column(0).into_owned();
            if u.dot(&atoms.column(j)) < 0.0 {
                u.neg_mut();
            }
            u /= u.norm();
            let x = err.transpose() * &u;
            atoms.set_column(j, &u);
            for (c, &i) in users.iter().enumerate() {
                codes[(j, i)] = x[c];
            }
        }
        trace.objective.push(objective(&s, &atoms, &codes));
    }

    let dict = OperatorDictionary::new(
        DictKind::Sparse,
        atoms,
        DVector::zeros(m),
        DictMeta {
            seed: params.seed,
            iters: params.iters,
            t0: params.t0,
        },
    )?;
    Ok((dict, trace))
}

pub(crate) fn objective(s: &DMatrix<f64>, atoms: &DMatrix<f64>, codes: &DMatrix<f64>) -> f64 {
    (s - atoms * codes).norm_squared()
}

/// `k` distinct sample directions in seeded order, topped up with seeded
/// random unit vectors when the data has fewer distinct directions.
fn initial_atoms(s: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (m, n) = s.shape();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(k);
    for i in order {
        if chosen.len() == k {
            break;
        }
        let col = s.column(i);
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let dir = col / norm;
        if chosen.iter().all(|c| c.dot(&dir).abs() < 1.0 - 1e-9) {
            chosen.push(dir);
        }
    }
    while chosen.len() < k {
        let v = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        let norm: f64 = v.norm();
        chosen.push(v / norm);
    }
    DMatrix::from_columns(&chosen)
}

fn worst_represented(
    s: &DMatrix<f64>,
    atoms: &DMatrix<f64>,
    codes: &DMatrix<f64>,
    skip: &[usize],
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..s.ncols() {
        if skip.contains(&i) || s.column(i).norm() == 0.0 {
            continue;
        }
        let e = (s.column(i) - atoms * codes.column(i)).norm_squared();
        if best.is_none_or(|(_, b)| e > b) {
            best = Some((i, e));
        }
    }
    best.filter(|(_, e)| *e > 0.0).map(|(i, _)| i)
}
