use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ksvd::objective;
use super::{
    check_fit_shape, check_len, columns_of, Coefficients, DictKind, DictMeta, FitTrace,
    OperatorDictionary,
};
use crate::error::Result;
use crate::linalg::{max_eigenvalue, spd_solve};

const NN_SALT: u64 = 0x6e6e_6d66;
/// Ridge on `A Aᵀ` in the dictionary update.
const DICT_EPS: f64 = 1e-10;
/// Inner projected-gradient stopping rule during training.
const INNER_RTOL: f64 = 1e-8;
const INNER_MAX: usize = 500;
/// KKT tolerance for stand-alone coding.
const CODE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnParams {
    pub iters: usize,
    pub seed: u64,
}

impl Default for NnParams {
    fn default() -> Self {
        Self {
            iters: 100,
            seed: 0,
        }
    }
}

/// Dictionary learning with non-negative coefficients: alternates projected
/// gradient steps on the coefficients (step `1/L`, `L = λ_max(DᵀD)`) with a
/// ridge-regularised least-squares dictionary update, then rescales atoms to
/// unit norm.
pub fn nn_fit(
    samples: &DMatrix<f64>,
    k: usize,
    params: &NnParams,
) -> Result<(OperatorDictionary, FitTrace)> {
    check_fit_shape(samples, k)?;
    let s = columns_of(samples)?;
    let (m, n) = s.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ NN_SALT);
    let mut atoms = farthest_point_init(&s, k, &mut rng);
    let mut codes = DMatrix::<f64>::zeros(k, n);
    let mut trace = FitTrace {
        objective: vec![objective(&s, &atoms, &codes)],
    };

    for _ in 0..params.iters {
        // coefficient step
        let gram = atoms.transpose() * &atoms;
        let lipschitz = max_eigenvalue(&gram);
        let corr = atoms.transpose() * &s;
        let updated: Vec<DVector<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut a = codes.column(i).into_owned();
                projected_gradient(
                    &gram,
                    &corr.column(i).into_owned(),
                    lipschitz,
                    &mut a,
                    INNER_MAX,
                );
                a
            })
            .collect();
        for (i, c) in updated.into_iter().enumerate() {
            codes.set_column(i, &c);
        }
        let mut current = objective(&s, &atoms, &codes);

        // dictionary step: D = S Aᵀ (A Aᵀ + ε I)⁻¹, kept only if it helps
        let mut aat = &codes * codes.transpose();
        for j in 0..k {
            aat[(j, j)] += DICT_EPS;
        }
        let sat = &s * codes.transpose();
        if let Some(solved) = solve_rows(&aat, &sat) {
            let candidate = objective(&s, &solved, &codes);
            if candidate <= current {
                atoms = solved;
                current = candidate;
            }
        }

        // unit-norm atoms, coefficients rescaled inversely
        for j in 0..k {
            let norm = atoms.column(j).norm();
            if norm > 1e-12 {
                atoms.column_mut(j).unscale_mut(norm);
                codes.row_mut(j).scale_mut(norm);
            } else if codes.row(j).iter().all(|v| *v == 0.0) {
                let i = worst_sample(&s, &atoms, &codes);
                let col = s.column(i);
                atoms.set_column(j, &(col / col.norm()));
            }
        }
        trace.objective.push(objective(&s, &atoms, &codes));
    }

    let dict = OperatorDictionary::new(
        DictKind::Nonneg,
        atoms,
        DVector::zeros(m),
        DictMeta {
            seed: params.seed,
            iters: params.iters,
            t0: 0,
        },
    )?;
    Ok((dict, trace))
}

/// Solves `X · aat = sat` for `X` (row by row, `aat` symmetric positive
/// definite).
fn solve_rows(aat: &DMatrix<f64>, sat: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = aat.clone().cholesky()?;
    let xt = chol.solve(&sat.transpose());
    let x = xt.transpose();
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Projected gradient descent on `½ aᵀ G a − bᵀ a` over `a ≥ 0`, in place,
/// until the relative step falls below the training tolerance.
fn projected_gradient(
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    lipschitz: f64,
    a: &mut DVector<f64>,
    max_steps: usize,
) {
    if lipschitz <= 0.0 {
        a.fill(0.0);
        return;
    }
    for _ in 0..max_steps {
        let grad = g * &*a - b;
        let next = (&*a - grad / lipschitz).map(|v| v.max(0.0));
        let change = (&next - &*a).norm();
        let scale = next.norm().max(f64::MIN_POSITIVE);
        *a = next;
        if change <= INNER_RTOL * scale {
            break;
        }
    }
}

/// KKT residual of `min ½ aᵀ G a − bᵀ a, a ≥ 0`: `max_i |min(a_i, g_i)|`
/// with `g = G a − b`.
pub(crate) fn kkt_residual(g: &DMatrix<f64>, b: &DVector<f64>, a: &DVector<f64>) -> f64 {
    let grad = g * a - b;
    a.iter()
        .zip(grad.iter())
        .map(|(x, gi)| x.min(*gi).abs())
        .fold(0.0, f64::max)
}

fn quad_objective(g: &DMatrix<f64>, b: &DVector<f64>, a: &DVector<f64>) -> f64 {
    0.5 * a.dot(&(g * a)) - b.dot(a)
}

/// Non-negative least squares in Gram form, `argmin_{a ≥ 0} ½ aᵀ G a − bᵀ a`.
///
/// Accelerated projected gradient runs until the KKT residual drops below
/// `tol`; between rounds the current support is re-solved exactly, which
/// finishes the job once the active set has been identified.
pub fn nnls_gram(g: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> DVector<f64> {
    let k = b.len();
    let mut a = DVector::zeros(k);
    let lipschitz = max_eigenvalue(g);
    if k == 0 || lipschitz <= 0.0 {
        return a;
    }
    for _round in 0..50 {
        accelerated_pg(g, b, lipschitz, &mut a, 2000, tol);
        if kkt_residual(g, b, &a) <= tol {
            return a;
        }
        if let Some(polished) = refit_support(g, b, &a) {
            if kkt_residual(g, b, &polished) <= tol {
                return polished;
            }
            if quad_objective(g, b, &polished) < quad_objective(g, b, &a) {
                a = polished;
            }
        }
    }
    a
}

fn accelerated_pg(
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    lipschitz: f64,
    a: &mut DVector<f64>,
    steps: usize,
    tol: f64,
) {
    let mut prev = a.clone();
    let mut momentum = 1.0_f64;
    let mut f_prev = quad_objective(g, b, a);
    for it in 0..steps {
        let next_m = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next_m;
        let y = &*a + (&*a - &prev) * beta;
        let grad = g * &y - b;
        let next = (&y - grad / lipschitz).map(|v| v.max(0.0));
        let f_next = quad_objective(g, b, &next);
        prev = a.clone();
        if f_next > f_prev {
            // restart momentum from a plain projected step
            momentum = 1.0;
            let grad = g * &*a - b;
            *a = (&*a - grad / lipschitz).map(|v| v.max(0.0));
            f_prev = quad_objective(g, b, a);
        } else {
            momentum = next_m;
            *a = next;
            f_prev = f_next;
        }
        if it % 16 == 15 && kkt_residual(g, b, a) <= tol {
            break;
        }
    }
}

/// Exact least-squares solve on the strictly positive entries of `a`;
/// `None` unless the solution stays positive.
fn refit_support(g: &DMatrix<f64>, b: &DVector<f64>, a: &DVector<f64>) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let mut out = DVector::zeros(a.len());
    if support.is_empty() {
        return Some(out);
    }
    let gs = DMatrix::from_fn(support.len(), support.len(), |r, c| {
        g[(support[r], support[c])]
    });
    let bs = DVector::from_fn(support.len(), |r, _| b[support[r]]);
    let z = spd_solve(&gs, &bs)?;
    if z.iter().any(|v| *v <= 0.0) {
        return None;
    }
    for (r, &i) in support.iter().enumerate() {
        out[i] = z[r];
    }
    Some(out)
}

/// `argmin_{α ≥ 0} ‖h − atoms · α‖²`.
pub fn nnls_code(dict: &OperatorDictionary, h: &[f64]) -> Result<Coefficients> {
    check_len(dict, h)?;
    let atoms = dict.atoms();
    let g = atoms.transpose() * atoms;
    let b = atoms.transpose() * DVector::from_column_slice(h);
    let alpha = nnls_gram(&g, &b, CODE_TOL);
    Ok(Coefficients {
        alpha: alpha.as_slice().to_vec(),
    })
}

/// Seeded farthest-point selection of `k` samples, normalised.
fn farthest_point_init(s: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = s.ncols();
    let nonzero: Vec<usize> = (0..n).filter(|&i| s.column(i).norm() > 0.0).collect();
    let first = nonzero[rng.random_range(0..nonzero.len())];
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| (s.column(i) - s.column(first)).norm_squared())
        .collect();
    while chosen.len() < k {
        let mut best = nonzero[0];
        for &i in &nonzero {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            dist[i] = dist[i].min((s.column(i) - s.column(best)).norm_squared());
        }
    }
    let cols: Vec<DVector<f64>> = chosen
        .iter()
        .map(|&i| {
            let c = s.column(i);
            c / c.norm()
        })
        .collect();
    DMatrix::from_columns(&cols)
}

fn worst_sample(s: &DMatrix<f64>, atoms: &DMatrix<f64>, codes: &DMatrix<f64>) -> usize {
    let mut best = (0, -1.0);
    for i in 0..s.ncols() {
        if s.column(i).norm() == 0.0 {
            continue;
        }
        let e = (s.column(i) - atoms * codes.column(i)).norm_squared();
        if e > best.1 {
            best = (i, e);
        }
    }
    best.0
}
