use nalgebra::{DMatrix, DVector};

use super::{check_fit_shape, check_len, Coefficients, DictKind, DictMeta, OperatorDictionary};
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;

/// Relative eigenvalue floor below which a principal direction counts as
/// absent from the data.
const RANK_RTOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PcaFit {
    pub dict: OperatorDictionary,
    /// Numerical rank of the centred samples.
    pub rank: usize,
    /// Set when `rank < k`; the trailing atoms then complete the basis
    /// orthonormally without carrying variance.
    pub rank_deficient: bool,
    /// Eigenvalues of the centred scatter matrix, descending.
    pub spectrum: Vec<f64>,
}

/// Principal-component dictionary from `n × m` samples (one per row).
pub fn pca_fit(samples: &DMatrix<f64>, k: usize) -> Result<PcaFit> {
    check_fit_shape(samples, k)?;
    let (n, m) = samples.shape();
    if k > m {
        return Err(Error::InvalidParameter(format!(
            "k={k} exceeds dimension {m}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "training samples must be finite".into(),
        ));
    }
    let mean: DVector<f64> = samples.row_mean().transpose();
    let mut centred = samples.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let scatter = centred.transpose() * &centred;
    let (vals, vecs) = sym_eigen_desc(&scatter);
    let floor = RANK_RTOL
        * vals
            .first()
            .copied()
            .unwrap_or(0.0)
            .max(samples.norm_squared());
    let rank = vals
        .iter()
        .filter(|v| **v > floor && **v > 0.0)
        .count()
        .min(n);
    let atoms = vecs.columns(0, k).into_owned();
    let dict = OperatorDictionary::new(
        DictKind::Orthogonal,
        atoms,
        mean,
        DictMeta {
            seed: 0,
            iters: 0,
            t0: 0,
        },
    )?;
    Ok(PcaFit {
        dict,
        rank,
        rank_deficient: rank < k,
        spectrum: vals,
    })
}

/// `alpha = atomsᵀ (h − mean)`.
pub fn project_code(dict: &OperatorDictionary, h: &[f64]) -> Result<Coefficients> {
    if dict.kind() != DictKind::Orthogonal {
        return Err(Error::InvalidParameter(
            "projection coding needs an orthogonal dictionary".into(),
        ));
    }
    check_len(dict, h)?;
    let centred = DVector::from_column_slice(h) - dict.mean();
    let alpha = dict.atoms().transpose() * centred;
    Ok(Coefficients {
        alpha: alpha.as_slice().to_vec(),
    })
}
