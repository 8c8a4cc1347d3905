//! Joint operator dictionaries `[D_k^Y | D_k^X]` with shared coefficients,
//! learned under orthogonality (PCA), sparsity (KSVD + OMP) or
//! non-negative coefficient constraints.

mod ksvd;
mod nonneg;
mod omp;
mod pca;

pub use ksvd::{ksvd_fit, KsvdParams};
pub use nonneg::{nn_fit, nnls_code, nnls_gram, NnParams};
pub use omp::{omp, omp_code};
pub use pca::{pca_fit, project_code, PcaFit};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calib::{w_p_for_joint_len, OperatorPair};
use crate::error::{Error, Result};

/// Tolerance for the orthonormality / unit-norm invariants.
pub const INVARIANT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictKind {
    Orthogonal,
    Sparse,
    Nonneg,
}

impl DictKind {
    /// Short method label used in reports (`pca`, `ksvd`, `nn`).
    pub fn method_name(&self) -> &'static str {
        match self {
            DictKind::Orthogonal => "pca",
            DictKind::Sparse => "ksvd",
            DictKind::Nonneg => "nn",
        }
    }

    pub fn from_method_name(name: &str) -> Option<Self> {
        match name {
            "pca" | "orthogonal" => Some(DictKind::Orthogonal),
            "ksvd" | "sparse" => Some(DictKind::Sparse),
            "nn" | "nonneg" => Some(DictKind::Nonneg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DictMeta {
    pub seed: u64,
    pub iters: usize,
    pub t0: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha: Vec<f64>,
}

impl Coefficients {
    pub fn zeros(k: usize) -> Self {
        Self {
            alpha: vec![0.0; k],
        }
    }

    pub fn support_size(&self) -> usize {
        self.alpha.iter().filter(|a| **a != 0.0).count()
    }
}

/// Per-outer-iteration objective values of a dictionary fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    /// `‖S − D A‖²_F`, first entry before any update.
    pub objective: Vec<f64>,
}

impl FitTrace {
    pub fn is_monotone(&self, rtol: f64) -> bool {
        self.objective
            .windows(2)
            .all(|w| w[1] <= w[0] + rtol * w[0].abs().max(f64::MIN_POSITIVE))
    }
}

/// `K` joint atoms stored as the columns of an `m × K` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DictRepr", into = "DictRepr")]
pub struct OperatorDictionary {
    kind: DictKind,
    atoms: DMatrix<f64>,
    mean: DVector<f64>,
    meta: DictMeta,
}

#[derive(Serialize, Deserialize)]
struct DictRepr {
    m: usize,
    k: usize,
    kind: DictKind,
    mean: Vec<f64>,
    atoms: Vec<Vec<f64>>,
    meta: DictMeta,
}

impl TryFrom<DictRepr> for OperatorDictionary {
    type Error = Error;
    fn try_from(r: DictRepr) -> Result<Self> {
        if r.atoms.len() != r.k {
            return Err(Error::DimensionMismatch {
                expected: r.k,
                got: r.atoms.len(),
            });
        }
        if let Some(bad) = r.atoms.iter().find(|c| c.len() != r.m) {
            return Err(Error::DimensionMismatch {
                expected: r.m,
                got: bad.len(),
            });
        }
        if r.mean.len() != r.m {
            return Err(Error::DimensionMismatch {
                expected: r.m,
                got: r.mean.len(),
            });
        }
        let flat: Vec<f64> = r.atoms.into_iter().flatten().collect();
        OperatorDictionary::new(
            r.kind,
            DMatrix::from_column_slice(r.m, r.k, &flat),
            DVector::from_vec(r.mean),
            r.meta,
        )
    }
}

impl From<OperatorDictionary> for DictRepr {
    fn from(d: OperatorDictionary) -> Self {
        DictRepr {
            m: d.m(),
            k: d.k(),
            kind: d.kind,
            mean: d.mean.as_slice().to_vec(),
            atoms: d
                .atoms
                .column_iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
            meta: d.meta,
        }
    }
}

impl OperatorDictionary {
    /// Wraps atoms after checking the per-kind invariants.
    pub fn new(
        kind: DictKind,
        atoms: DMatrix<f64>,
        mean: DVector<f64>,
        meta: DictMeta,
    ) -> Result<Self> {
        let d = Self {
            kind,
            atoms,
            mean,
            meta,
        };
        d.check_invariants()?;
        Ok(d)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let (m, k) = self.atoms.shape();
        if k == 0 || m == 0 {
            return Err(Error::InvalidParameter(
                "dictionary must have at least one atom".into(),
            ));
        }
        if w_p_for_joint_len(m).is_none() {
            return Err(Error::InvalidParameter(format!(
                "{m} is not a joint operator length"
            )));
        }
        if self.mean.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: self.mean.len(),
            });
        }
        if self
            .atoms
            .iter()
            .chain(self.mean.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter(
                "dictionary entries must be finite".into(),
            ));
        }
        match self.kind {
            DictKind::Orthogonal => {
                let gram = self.atoms.transpose() * &self.atoms;
                let dev = (gram - DMatrix::identity(k, k)).amax();
                if dev > INVARIANT_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "orthogonal atoms deviate from orthonormality by {dev:e}"
                    )));
                }
            }
            DictKind::Sparse => {
                if let Some(j) =
                    (0..k).find(|&j| (self.atoms.column(j).norm() - 1.0).abs() > INVARIANT_TOL)
                {
                    return Err(Error::InvalidParameter(format!(
                        "sparse atom {j} is not unit-norm"
                    )));
                }
            }
            DictKind::Nonneg => {}
        }
        if self.kind != DictKind::Orthogonal && self.mean.iter().any(|v| *v != 0.0) {
            return Err(Error::InvalidParameter(
                "only orthogonal dictionaries carry a mean".into(),
            ));
        }
        Ok(())
    }

    pub fn kind(&self) -> DictKind {
        self.kind
    }
    pub fn m(&self) -> usize {
        self.atoms.nrows()
    }
    pub fn k(&self) -> usize {
        self.atoms.ncols()
    }
    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn meta(&self) -> &DictMeta {
        &self.meta
    }
    pub fn w_p(&self) -> usize {
        w_p_for_joint_len(self.m()).expect("checked at construction")
    }

    /// Offset added to `atoms · alpha` when decoding.
    pub fn offset(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Codes `h` under this dictionary's own constraint.
    pub fn code(&self, h: &[f64]) -> Result<Coefficients> {
        match self.kind {
            DictKind::Orthogonal => project_code(self, h),
            DictKind::Sparse => omp_code(self, h, self.meta.t0),
            DictKind::Nonneg => nnls_code(self, h),
        }
    }

    pub fn decode(&self, alpha: &[f64]) -> Result<OperatorPair> {
        decode(self, alpha)
    }
}

/// `mean · [orthogonal] + atoms · alpha`, split into `(h_y, h_x)`.
pub fn decode(dict: &OperatorDictionary, alpha: &[f64]) -> Result<OperatorPair> {
    if alpha.len() != dict.k() {
        return Err(Error::DimensionMismatch {
            expected: dict.k(),
            got: alpha.len(),
        });
    }
    let joint = dict.offset() + dict.atoms() * DVector::from_column_slice(alpha);
    OperatorPair::from_joint(dict.w_p(), joint.as_slice().to_vec())
}

pub(crate) fn check_len(dict: &OperatorDictionary, h: &[f64]) -> Result<()> {
    if h.len() != dict.m() {
        return Err(Error::DimensionMismatch {
            expected: dict.m(),
            got: h.len(),
        });
    }
    Ok(())
}

/// Samples as columns, with the all-zero check shared by the learners.
pub(crate) fn columns_of(samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if samples.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateInput(
            "all training samples are zero".into(),
        ));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "training samples must be finite".into(),
        ));
    }
    Ok(samples.transpose())
}

pub(crate) fn check_fit_shape(samples: &DMatrix<f64>, k: usize) -> Result<()> {
    let (n, m) = samples.shape();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    if w_p_for_joint_len(m).is_none() {
        return Err(Error::InvalidParameter(format!(
            "{m} is not a joint operator length"
        )));
    }
    Ok(())
}
