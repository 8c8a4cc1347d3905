//! Least-squares calibration of the paired convolution operators at
//! irregular observation positions.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldStack, TrackObservations};
use crate::linalg::{dot, spd_solve};

/// Number of entries in one `(2 w_p + 1)^2` patch.
pub fn patch_len(w_p: usize) -> usize {
    (2 * w_p + 1).pow(2)
}

/// Patch half-width for a joint operator of length `m`, if `m` is valid.
pub fn w_p_for_joint_len(m: usize) -> Option<usize> {
    if m < 2 || !m.is_multiple_of(2) {
        return None;
    }
    let side = ((m / 2) as f64).sqrt().round() as usize;
    (side * side == m / 2 && side % 2 == 1).then_some((side - 1) / 2)
}

/// The two impulse responses `(H_Y, H_X)`, stored jointly as `[h_y | h_x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairRepr", into = "PairRepr")]
pub struct OperatorPair {
    w_p: usize,
    joint: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PairRepr {
    w_p: usize,
    h_y: Vec<f64>,
    h_x: Vec<f64>,
}

impl TryFrom<PairRepr> for OperatorPair {
    type Error = Error;
    fn try_from(r: PairRepr) -> Result<Self> {
        OperatorPair::new(r.w_p, r.h_y, r.h_x)
    }
}

impl From<OperatorPair> for PairRepr {
    fn from(op: OperatorPair) -> Self {
        PairRepr {
            w_p: op.w_p,
            h_y: op.h_y().to_vec(),
            h_x: op.h_x().to_vec(),
        }
    }
}

impl OperatorPair {
    pub fn new(w_p: usize, h_y: Vec<f64>, h_x: Vec<f64>) -> Result<Self> {
        let n = patch_len(w_p);
        for h in [&h_y, &h_x] {
            if h.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: h.len(),
                });
            }
        }
        let mut joint = h_y;
        joint.extend(h_x);
        Self::from_joint(w_p, joint)
    }

    pub fn from_joint(w_p: usize, joint: Vec<f64>) -> Result<Self> {
        let m = 2 * patch_len(w_p);
        if joint.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: joint.len(),
            });
        }
        if joint.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "operator entries must be finite".into(),
            ));
        }
        Ok(Self { w_p, joint })
    }

    pub fn zeros(w_p: usize) -> Self {
        Self {
            w_p,
            joint: vec![0.0; 2 * patch_len(w_p)],
        }
    }

    pub fn w_p(&self) -> usize {
        self.w_p
    }
    pub fn joint(&self) -> &[f64] {
        &self.joint
    }
    pub fn h_y(&self) -> &[f64] {
        &self.joint[..self.joint.len() / 2]
    }
    pub fn h_x(&self) -> &[f64] {
        &self.joint[self.joint.len() / 2..]
    }
    pub fn is_zero(&self) -> bool {
        self.joint.iter().all(|v| *v == 0.0)
    }
}

/// `dot(h_y, y_patch) + dot(h_x, x_patch)`.
pub fn predict_detail(op: &OperatorPair, y_patch: &[f64], x_patch: &[f64]) -> Result<f64> {
    let n = patch_len(op.w_p);
    for p in [y_patch, x_patch] {
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p.len(),
            });
        }
    }
    Ok(dot(op.h_y(), y_patch) + dot(op.h_x(), x_patch))
}

/// Regression rows `[Y_LR patch | X patch]` and high-resolution details
/// `y_obs - Y_LR(t, s)` at observation positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSystem {
    w_p: usize,
    rows: Vec<f64>,
    rhs: Vec<f64>,
    weights: Option<Vec<f64>>,
    sources: Vec<usize>,
    dropped: usize,
}

impl DesignSystem {
    pub fn empty(w_p: usize) -> Self {
        Self {
            w_p,
            rows: Vec::new(),
            rhs: Vec::new(),
            weights: None,
            sources: Vec::new(),
            dropped: 0,
        }
    }

    pub fn from_rows(
        w_p: usize,
        rows: Vec<f64>,
        rhs: Vec<f64>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let m = 2 * patch_len(w_p);
        if rows.len() != rhs.len() * m {
            return Err(Error::DimensionMismatch {
                expected: rhs.len() * m,
                got: rows.len(),
            });
        }
        if let Some(w) = &weights {
            if w.len() != rhs.len() {
                return Err(Error::DimensionMismatch {
                    expected: rhs.len(),
                    got: w.len(),
                });
            }
        }
        if rows.iter().chain(&rhs).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "design entries must be finite".into(),
            ));
        }
        let sources = (0..rhs.len()).collect();
        Ok(Self {
            w_p,
            rows,
            rhs,
            weights,
            sources,
            dropped: 0,
        })
    }

    pub fn w_p(&self) -> usize {
        self.w_p
    }
    /// Unknown count `m = 2 (2 w_p + 1)^2`.
    pub fn m(&self) -> usize {
        2 * patch_len(self.w_p)
    }
    pub fn n_rows(&self) -> usize {
        self.rhs.len()
    }
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.m();
        &self.rows[i * m..(i + 1) * m]
    }
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }
    /// Index into the originating observation set for each row.
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }
    /// Observations skipped because their patch footprint left coverage.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn normal_equations(&self) -> NormalEquations {
        let mut ne = NormalEquations::new(self.m());
        for i in 0..self.n_rows() {
            ne.add_row(self.row(i), self.rhs[i], self.weight(i));
        }
        ne
    }

    /// `A x` for every row.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows()).map(|i| dot(self.row(i), x)).collect()
    }

    /// Debug dump: one line per row, `source,rhs,a0,...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["source".to_string(), "rhs".to_string()];
        header.extend((0..self.m() / 2).map(|j| format!("y{j}")));
        header.extend((0..self.m() / 2).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.sources[i].to_string(), self.rhs[i].to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accumulated `AᵀWA`, `AᵀWb`, `bᵀWb`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub ata: DMatrix<f64>,
    pub atb: DVector<f64>,
    pub btb: f64,
    pub n: usize,
}

impl NormalEquations {
    pub fn new(m: usize) -> Self {
        Self {
            ata: DMatrix::zeros(m, m),
            atb: DVector::zeros(m),
            btb: 0.0,
            n: 0,
        }
    }

    pub fn m(&self) -> usize {
        self.atb.len()
    }

    pub fn add_row(&mut self, row: &[f64], rhs: f64, weight: f64) {
        let m = self.m();
        for a in 0..m {
            let ra = weight * row[a];
            self.atb[a] += ra * rhs;
            for b in a..m {
                self.ata[(a, b)] += ra * row[b];
            }
        }
        self.btb += weight * rhs * rhs;
        self.n += 1;
    }

    /// Mirrors the upper triangle filled by `add_row` into the lower one.
    fn symmetric(&self) -> DMatrix<f64> {
        let mut a = self.ata.clone();
        let m = self.m();
        for i in 0..m {
            for j in 0..i {
                a[(i, j)] = a[(j, i)];
            }
        }
        a
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.symmetric()
    }

    pub fn trace(&self) -> f64 {
        self.ata.diagonal().sum()
    }

    /// Residual `‖A x − b‖²` computed from the accumulated moments.
    pub fn residual2(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        let g = self.symmetric();
        (x.dot(&(&g * &x)) - 2.0 * x.dot(&self.atb) + self.btb).max(0.0)
    }
}

/// Ridge strength, either fixed or proportional to `trace(AᵀA) / m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    Fixed(f64),
    Scaled(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Scaled(1e-6)
    }
}

impl Ridge {
    pub fn resolve(&self, ne: &NormalEquations) -> f64 {
        match *self {
            Ridge::Fixed(r) => r,
            Ridge::Scaled(f) => f * ne.trace() / ne.m().max(1) as f64,
        }
    }
}

/// Default over-determination requirement: three rows per unknown.
pub fn default_min_rows(w_p: usize) -> usize {
    3 * 2 * patch_len(w_p)
}

/// Builds the regression system for `subset` against the covariate `x_hr`
/// and the upsampled low-resolution field `y_lr_up`.
pub fn build_design(
    subset: &TrackObservations,
    x_hr: &FieldStack,
    y_lr_up: &FieldStack,
    w_p: usize,
) -> Result<DesignSystem> {
    if !x_hr.same_support(y_lr_up) {
        return Err(Error::GridMismatch(
            "covariate and low-resolution stacks differ in grid or times".into(),
        ));
    }
    let m = 2 * patch_len(w_p);
    let mut sys = DesignSystem::empty(w_p);
    let mut row = Vec::with_capacity(m);
    for (k, obs) in subset.iter().enumerate() {
        row.clear();
        match design_row(obs.t, obs.point(), x_hr, y_lr_up, w_p, &mut row) {
            Ok(centre) => {
                sys.rows.extend_from_slice(&row);
                sys.rhs.push(obs.value - centre);
                sys.sources.push(k);
            }
            Err(Error::OutOfDomain(_)) | Err(Error::MaskedRegion(_)) => sys.dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(sys)
}

/// Fills `row` with the two patches at `(t, p)` and returns the Y_LR value
/// at `p` itself.
pub(crate) fn design_row(
    t: f64,
    p: crate::field::Point,
    x_hr: &FieldStack,
    y_lr_up: &FieldStack,
    w_p: usize,
    row: &mut Vec<f64>,
) -> Result<f64> {
    let tw = y_lr_up.time_weights(t)?;
    let (r, c) = y_lr_up.locate(p)?;
    y_lr_up.patch_into(&tw, r, c, w_p, row)?;
    x_hr.patch_into(&tw, r, c, w_p, row)?;
    Ok(row[patch_len(w_p) / 2])
}

/// Unconstrained ridge least-squares fit of the joint operator.
pub fn fit_unconstrained(sys: &DesignSystem, ridge: f64, min_rows: usize) -> Result<OperatorPair> {
    fit_normal(&sys.normal_equations(), sys.w_p(), ridge, min_rows)
}

/// Solves `(AᵀA + ridge I) x = Aᵀb` from accumulated normal equations.
pub fn fit_normal(
    ne: &NormalEquations,
    w_p: usize,
    ridge: f64,
    min_rows: usize,
) -> Result<OperatorPair> {
    if ne.n < min_rows {
        return Err(Error::InsufficientData {
            rows: ne.n,
            required: min_rows,
        });
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ridge must be >= 0, got {ridge}"
        )));
    }
    if ne.atb.iter().all(|v| *v == 0.0) && ridge > 0.0 {
        return Ok(OperatorPair::zeros(w_p));
    }
    let mut g = ne.gram();
    for i in 0..g.nrows() {
        g[(i, i)] += ridge;
    }
    let x = spd_solve(&g, &ne.atb)
        .ok_or_else(|| Error::SingularSystem(format!("normal equations over {} rows", ne.n)))?;
    OperatorPair::from_joint(w_p, x.as_slice().to_vec())
}
