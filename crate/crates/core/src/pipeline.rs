//! Locally-adapted super-resolution: operator harvesting over wide
//! neighbourhoods, local coefficient estimation over small ones, and
//! overlap-averaged reconstruction on a calibration lattice.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{
    build_design, default_min_rows, fit_normal, patch_len, predict_detail, NormalEquations,
    OperatorPair, Ridge,
};
use crate::dict::{decode, nnls_gram, omp, DictKind, OperatorDictionary};
use crate::error::{Error, Result};
use crate::field::{FieldStack, GridSpec, NeighborhoodSpec, Point, TrackObservations};
use crate::linalg::spd_solve;

const HARVEST_SALT: u64 = 0x6861_7276;
/// Rows required per dictionary coefficient before a local fit is trusted.
const ROWS_PER_COEFFICIENT: usize = 3;
/// KKT tolerance of the reduced non-negative solve.
const REDUCED_NNLS_TOL: f64 = 1e-10;

/// Design rows for every usable observation, sorted by time so that
/// neighbourhood systems can be accumulated without rebuilding patches.
#[derive(Debug, Clone)]
pub struct ObsDesign {
    w_p: usize,
    rows: Vec<f64>,
    rhs: Vec<f64>,
    t: Vec<f64>,
    pos: Vec<Point>,
    dropped: usize,
}

impl ObsDesign {
    pub fn build(
        obs: &TrackObservations,
        x_hr: &FieldStack,
        y_lr_up: &FieldStack,
        w_p: usize,
    ) -> Result<Self> {
        let sys = build_design(obs, x_hr, y_lr_up, w_p)?;
        let records = obs.records();
        let mut order: Vec<usize> = (0..sys.n_rows()).collect();
        order.sort_by(|&a, &b| {
            let (ta, tb) = (records[sys.sources()[a]].t, records[sys.sources()[b]].t);
            ta.total_cmp(&tb).then(a.cmp(&b))
        });
        let m = sys.m();
        let mut rows = Vec::with_capacity(sys.n_rows() * m);
        let mut rhs = Vec::with_capacity(sys.n_rows());
        let mut t = Vec::with_capacity(sys.n_rows());
        let mut pos = Vec::with_capacity(sys.n_rows());
        for &i in &order {
            let r = &records[sys.sources()[i]];
            rows.extend_from_slice(sys.row(i));
            rhs.push(sys.rhs()[i]);
            t.push(r.t);
            pos.push(r.point());
        }
        Ok(Self {
            w_p,
            rows,
            rhs,
            t,
            pos,
            dropped: sys.dropped(),
        })
    }

    pub fn w_p(&self) -> usize {
        self.w_p
    }
    pub fn m(&self) -> usize {
        2 * patch_len(self.w_p)
    }
    pub fn n_rows(&self) -> usize {
        self.rhs.len()
    }
    pub fn dropped(&self) -> usize {
        self.dropped
    }
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.m();
        &self.rows[i * m..(i + 1) * m]
    }
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Normal equations of every row.
    pub fn all_normal_equations(&self) -> NormalEquations {
        let mut ne = NormalEquations::new(self.m());
        for i in 0..self.n_rows() {
            ne.add_row(self.row(i), self.rhs[i], 1.0);
        }
        ne
    }

    /// Normal equations of the rows inside the neighbourhood of `(t0, s0)`.
    pub fn normal_equations(&self, t0: f64, s0: Point, spec: &NeighborhoodSpec) -> NormalEquations {
        let lo = self.t.partition_point(|&t| t < t0 - spec.d_t);
        let hi = self.t.partition_point(|&t| t <= t0 + spec.d_t);
        let mut ne = NormalEquations::new(self.m());
        for i in lo..hi {
            if spec.contains(t0, s0, self.t[i], self.pos[i]) {
                ne.add_row(self.row(i), self.rhs[i], 1.0);
            }
        }
        ne
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestConfig {
    /// Neighbourhoods to attempt.
    pub n_target: usize,
    pub train_spec: NeighborhoodSpec,
    /// Minimum rows per fit; `None` means three per unknown.
    pub min_rows: Option<usize>,
    pub ridge: Ridge,
    pub seed: u64,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            n_target: 1500,
            train_spec: NeighborhoodSpec {
                d_s: 7.0,
                d_t: 10.0,
            },
            min_rows: None,
            ridge: Ridge::default(),
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Harvest {
    /// One unconstrained joint operator per successful neighbourhood (rows).
    pub samples: DMatrix<f64>,
    pub anchors: Vec<(f64, Point)>,
    pub attempted: usize,
}

impl Harvest {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Seeded uniform anchors over the space-time box of `grid` × `[t_first, t_last]`.
pub fn draw_anchors(
    grid: &GridSpec,
    t_first: f64,
    t_last: f64,
    n: usize,
    seed: u64,
) -> Vec<(f64, Point)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HARVEST_SALT);
    (0..n)
        .map(|_| {
            let t = t_first + rng.random::<f64>() * (t_last - t_first);
            let lat = grid.lat_min() + rng.random::<f64>() * (grid.lat_top() - grid.lat_min());
            let lon = grid.lon_min() + rng.random::<f64>() * (grid.lon_right() - grid.lon_min());
            (t, Point::new(lat, lon))
        })
        .collect()
}

/// Fits unconstrained operators over `cfg.n_target` seeded neighbourhoods,
/// skipping those without enough rows. Fails if fewer than `min_samples`
/// succeed.
pub fn harvest_from_design(
    design: &ObsDesign,
    grid: &GridSpec,
    times: &[i64],
    cfg: &HarvestConfig,
    min_samples: usize,
) -> Result<Harvest> {
    cfg.train_spec.validate()?;
    let (t_first, t_last) = (times[0] as f64, *times.last().unwrap() as f64);
    let anchors = draw_anchors(grid, t_first, t_last, cfg.n_target, cfg.seed);
    let min_rows = cfg
        .min_rows
        .unwrap_or_else(|| default_min_rows(design.w_p()));
    let fits: Vec<Option<OperatorPair>> = anchors
        .par_iter()
        .map(|&(t0, s0)| {
            let ne = design.normal_equations(t0, s0, &cfg.train_spec);
            match fit_normal(&ne, design.w_p(), cfg.ridge.resolve(&ne), min_rows) {
                Ok(op) => Ok(Some(op)),
                Err(Error::InsufficientData { .. }) | Err(Error::SingularSystem(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut kept = Vec::new();
    let mut kept_anchors = Vec::new();
    for (op, anchor) in fits.into_iter().zip(&anchors) {
        if let Some(op) = op {
            kept.push(op);
            kept_anchors.push(*anchor);
        }
    }
    if kept.len() < min_samples.max(1) {
        return Err(Error::HarvestTooSmall {
            got: kept.len(),
            required: min_samples.max(1),
        });
    }
    let m = design.m();
    let samples = DMatrix::from_fn(kept.len(), m, |i, j| kept[i].joint()[j]);
    Ok(Harvest {
        samples,
        anchors: kept_anchors,
        attempted: anchors.len(),
    })
}

pub fn harvest_operators(
    obs: &TrackObservations,
    x_hr: &FieldStack,
    y_lr_up: &FieldStack,
    w_p: usize,
    cfg: &HarvestConfig,
    min_samples: usize,
) -> Result<Harvest> {
    let design = ObsDesign::build(obs, x_hr, y_lr_up, w_p)?;
    harvest_from_design(&design, x_hr.grid(), x_hr.times(), cfg, min_samples)
}

/// One unconstrained fit over every observation.
pub fn fit_global(
    obs: &TrackObservations,
    x_hr: &FieldStack,
    y_lr_up: &FieldStack,
    w_p: usize,
    min_rows: usize,
    ridge: f64,
) -> Result<OperatorPair> {
    let sys = build_design(obs, x_hr, y_lr_up, w_p)?;
    crate::calib::fit_unconstrained(&sys, ridge, min_rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Use the global operator.
    Global,
    /// Use the zero operator, i.e. keep the low-resolution field.
    Lowres,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coding {
    /// Regress the local details directly on `A · atoms`.
    Reduced,
    /// Fit a full local operator first, then code it on the dictionary.
    FitThenCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrConfig {
    pub sr_spec: NeighborhoodSpec,
    /// Lattice spacing in degrees; `None` means `d_s / 2`.
    pub stride: Option<f64>,
    /// Tile half-width in degrees; `None` means `d_s / 2`.
    pub block: Option<f64>,
    pub fallback: Fallback,
    pub coding: Coding,
    pub ridge: Ridge,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            sr_spec: NeighborhoodSpec {
                d_s: 2.0,
                d_t: 10.0,
            },
            stride: None,
            block: None,
            fallback: Fallback::Global,
            coding: Coding::Reduced,
            ridge: Ridge::default(),
        }
    }
}

impl SrConfig {
    pub fn stride(&self) -> f64 {
        self.stride.unwrap_or(self.sr_spec.d_s / 2.0)
    }
    pub fn block(&self) -> f64 {
        self.block.unwrap_or(self.sr_spec.d_s / 2.0)
    }
    pub fn validate(&self) -> Result<()> {
        self.sr_spec.validate()?;
        if !(self.stride() > 0.0 && self.block() > 0.0) {
            return Err(Error::InvalidParameter(
                "stride and block must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub op: OperatorPair,
    pub alpha: Option<Vec<f64>>,
    pub rows: usize,
    pub fallback: bool,
}

/// Local operator for the neighbourhood of `(t, s)`.
pub fn local_coefficients(
    dict: &OperatorDictionary,
    design: &ObsDesign,
    t: f64,
    s: Point,
    cfg: &SrConfig,
    global_op: &OperatorPair,
) -> LocalFit {
    let ne = design.normal_equations(t, s, &cfg.sr_spec);
    local_from_normal(dict, &ne, cfg, global_op)
}

/// Local coefficient estimate from accumulated neighbourhood moments.
pub fn local_from_normal(
    dict: &OperatorDictionary,
    ne: &NormalEquations,
    cfg: &SrConfig,
    global_op: &OperatorPair,
) -> LocalFit {
    let fallback = |rows| LocalFit {
        op: match cfg.fallback {
            Fallback::Global => global_op.clone(),
            Fallback::Lowres => OperatorPair::zeros(dict.w_p()),
        },
        alpha: None,
        rows,
        fallback: true,
    };
    if ne.n < ROWS_PER_COEFFICIENT * dict.k() {
        return fallback(ne.n);
    }
    let alpha = match cfg.coding {
        Coding::Reduced => reduced_alpha(dict, ne, cfg),
        Coding::FitThenCode => {
            let min_rows = default_min_rows(dict.w_p());
            fit_normal(ne, dict.w_p(), cfg.ridge.resolve(ne), min_rows)
                .ok()
                .and_then(|op| dict.code(op.joint()).ok())
                .map(|c| c.alpha)
        }
    };
    match alpha.and_then(|a| decode(dict, &a).ok().map(|op| (a, op))) {
        Some((a, op)) => LocalFit {
            op,
            alpha: Some(a),
            rows: ne.n,
            fallback: false,
        },
        None => fallback(ne.n),
    }
}

/// Solves for `alpha` in `joint = offset + atoms · alpha` directly against
/// the neighbourhood's normal equations, under the dictionary's constraint.
fn reduced_alpha(
    dict: &OperatorDictionary,
    ne: &NormalEquations,
    cfg: &SrConfig,
) -> Option<Vec<f64>> {
    let d = dict.atoms();
    let g = ne.gram();
    let g_red = d.transpose() * &g * d;
    let b_red = d.transpose() * (&ne.atb - &g * dict.offset());
    let k = dict.k();
    let ridge_for = |m: &DMatrix<f64>| match cfg.ridge {
        Ridge::Fixed(r) => r,
        Ridge::Scaled(f) => f * m.trace() / k as f64,
    };
    let solve_ls = || -> Option<DVector<f64>> {
        let mut a = g_red.clone();
        let r = ridge_for(&a);
        for i in 0..k {
            a[(i, i)] += r;
        }
        spd_solve(&a, &b_red)
    };
    match dict.kind() {
        DictKind::Orthogonal => solve_ls().map(|a| a.as_slice().to_vec()),
        DictKind::Sparse => {
            let ls = solve_ls()?;
            let h = d * ls;
            Some(omp(d, h.as_slice(), dict.meta().t0))
        }
        DictKind::Nonneg => Some(
            nnls_gram(&g_red, &b_red, REDUCED_NNLS_TOL)
                .as_slice()
                .to_vec(),
        ),
    }
}

/// A calibration node with the index ranges of the tile it paints.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeNode {
    pub centre: Point,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub nodes: Vec<LatticeNode>,
}

impl Lattice {
    /// Regular lattice over the grid interior inset by `block`, with tiles
    /// of half-width `block`; the outermost tiles extend to the grid edge.
    pub fn new(grid: &GridSpec, stride: f64, block: f64) -> Result<Self> {
        if !(stride > 0.0 && block > 0.0) {
            return Err(Error::InvalidParameter(
                "stride and block must be > 0".into(),
            ));
        }
        let lat_axis = axis(grid.lat_min(), grid.step(), grid.n_rows(), stride, block);
        let lon_axis = axis(grid.lon_min(), grid.step(), grid.n_cols(), stride, block);
        let mut nodes = Vec::with_capacity(lat_axis.len() * lon_axis.len());
        for (lat, rows) in &lat_axis {
            for (lon, cols) in &lon_axis {
                nodes.push(LatticeNode {
                    centre: Point::new(*lat, *lon),
                    rows: rows.clone(),
                    cols: cols.clone(),
                });
            }
        }
        Ok(Self { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn axis(origin: f64, step: f64, n: usize, stride: f64, block: f64) -> Vec<(f64, Range<usize>)> {
    let last = origin + (n - 1) as f64 * step;
    let eps = 1e-9 * step;
    let (start, end) = (origin + block, last - block);
    let mut centres = Vec::new();
    if start > end + eps {
        centres.push(0.5 * (origin + last));
    } else {
        let mut i = 0usize;
        loop {
            let c = start + i as f64 * stride;
            if c > end + eps {
                break;
            }
            centres.push(c);
            i += 1;
        }
        if (centres.last().unwrap() - end).abs() > eps {
            centres.push(end);
        }
    }
    let count = centres.len();
    centres
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let lo = if i == 0 {
                0
            } else {
                (((c - block - origin) / step) - 1e-9).ceil().max(0.0) as usize
            };
            let hi = if i + 1 == count {
                n
            } else {
                ((((c + block - origin) / step) + 1e-9).floor() as usize + 1).min(n)
            };
            (c, lo..hi)
        })
        .collect()
}

/// Per-node `y` and `x` patches of one slice, with indices clamped at the
/// grid border.
struct SlicePatches {
    w_p: usize,
    y: Vec<f64>,
    x: Vec<f64>,
}

impl SlicePatches {
    fn new(y_lr_up: &FieldStack, x_hr: &FieldStack, ti: usize, w_p: usize) -> Self {
        let g = y_lr_up.grid();
        let (nr, nc) = (g.n_rows() as isize, g.n_cols() as isize);
        let w = w_p as isize;
        let p = patch_len(w_p);
        let mut y = Vec::with_capacity(g.len() * p);
        let mut x = Vec::with_capacity(g.len() * p);
        for i in 0..nr {
            for j in 0..nc {
                for di in -w..=w {
                    let r = (i + di).clamp(0, nr - 1) as usize;
                    for dj in -w..=w {
                        let c = (j + dj).clamp(0, nc - 1) as usize;
                        y.push(y_lr_up.get(ti, r, c));
                        x.push(x_hr.get(ti, r, c));
                    }
                }
            }
        }
        Self { w_p, y, x }
    }

    fn node(&self, flat: usize) -> (&[f64], &[f64]) {
        let p = patch_len(self.w_p);
        (
            &self.y[flat * p..(flat + 1) * p],
            &self.x[flat * p..(flat + 1) * p],
        )
    }
}

/// Applies each lattice node's operator over its tile and averages the
/// overlapping predictions: `y_lr_up + mean(detail predictions)`.
pub fn reconstruct(
    models: &[OperatorPair],
    lattice: &Lattice,
    x_hr: &FieldStack,
    y_lr_up: &FieldStack,
    ti: usize,
) -> Result<Vec<f64>> {
    if !x_hr.same_support(y_lr_up) {
        return Err(Error::GridMismatch(
            "covariate and low-resolution stacks differ".into(),
        ));
    }
    if models.len() != lattice.len() {
        return Err(Error::DimensionMismatch {
            expected: lattice.len(),
            got: models.len(),
        });
    }
    let grid = y_lr_up.grid();
    let w_p = models.first().map_or(0, |m| m.w_p());
    let patches = SlicePatches::new(y_lr_up, x_hr, ti, w_p);
    let mut sum = vec![0.0; grid.len()];
    let mut count = vec![0u32; grid.len()];
    for (op, node) in models.iter().zip(&lattice.nodes) {
        for i in node.rows.clone() {
            for j in node.cols.clone() {
                let flat = i * grid.n_cols() + j;
                let (yp, xp) = patches.node(flat);
                sum[flat] += predict_detail(op, yp, xp)?;
                count[flat] += 1;
            }
        }
    }
    let base = y_lr_up.slice(ti);
    (0..grid.len())
        .map(|flat| {
            if count[flat] == 0 {
                return Err(Error::UncoveredNode {
                    row: flat / grid.n_cols(),
                    col: flat % grid.n_cols(),
                });
            }
            Ok(base[flat] + sum[flat] / count[flat] as f64)
        })
        .collect()
}

/// Neighbourhood normal equations for every (slice, lattice node), shared by
/// all dictionaries.
pub struct LocalSystems {
    pub lattice: Lattice,
    systems: Vec<Vec<NormalEquations>>,
}

impl LocalSystems {
    pub fn build(
        design: &ObsDesign,
        grid: &GridSpec,
        times: &[i64],
        cfg: &SrConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let lattice = Lattice::new(grid, cfg.stride(), cfg.block())?;
        let systems = times
            .par_iter()
            .map(|&d| {
                lattice
                    .nodes
                    .iter()
                    .map(|node| design.normal_equations(d as f64, node.centre, &cfg.sr_spec))
                    .collect()
            })
            .collect();
        Ok(Self { lattice, systems })
    }

    pub fn slice(&self, ti: usize) -> &[NormalEquations] {
        &self.systems[ti]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalDiagnostics {
    pub fits: usize,
    pub fallbacks: usize,
}

/// Locally-adapted reconstruction of every slice with `dict`.
pub fn super_resolve(
    dict: &OperatorDictionary,
    systems: &LocalSystems,
    x_hr: &FieldStack,
    y_lr_up: &FieldStack,
    cfg: &SrConfig,
    global_op: &OperatorPair,
) -> Result<(FieldStack, LocalDiagnostics)> {
    let per_slice: Vec<(Vec<f64>, LocalDiagnostics)> = (0..y_lr_up.n_times())
        .into_par_iter()
        .map(|ti| {
            let fits: Vec<LocalFit> = systems
                .slice(ti)
                .iter()
                .map(|ne| local_from_normal(dict, ne, cfg, global_op))
                .collect();
            let diag = LocalDiagnostics {
                fits: fits.len(),
                fallbacks: fits.iter().filter(|f| f.fallback).count(),
            };
            let models: Vec<OperatorPair> = fits.into_iter().map(|f| f.op).collect();
            Ok((
                reconstruct(&models, &systems.lattice, x_hr, y_lr_up, ti)?,
                diag,
            ))
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(y_lr_up.values().len());
    let mut diag = LocalDiagnostics::default();
    for (v, d) in per_slice {
        values.extend(v);
        diag.fits += d.fits;
        diag.fallbacks += d.fallbacks;
    }
    Ok((y_lr_up.with_values(values)?, diag))
}

/// Reconstruction with one operator everywhere.
pub fn apply_global(
    op: &OperatorPair,
    x_hr: &FieldStack,
    y_lr_up: &FieldStack,
) -> Result<FieldStack> {
    let grid = y_lr_up.grid();
    let lattice = Lattice {
        nodes: vec![LatticeNode {
            centre: Point::new(grid.lat_min(), grid.lon_min()),
            rows: 0..grid.n_rows(),
            cols: 0..grid.n_cols(),
        }],
    };
    let slices: Vec<Vec<f64>> = (0..y_lr_up.n_times())
        .into_par_iter()
        .map(|ti| reconstruct(std::slice::from_ref(op), &lattice, x_hr, y_lr_up, ti))
        .collect::<Result<_>>()?;
    y_lr_up.with_values(slices.concat())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub days: Vec<i64>,
    pub per_day: Vec<f64>,
    pub mean: f64,
}

/// Per-day relative RMSE: `RMS(estimate − truth) / RMS(truth − mean(truth))`
/// over unmasked cells. A constant truth slice yields `0` for an exact
/// estimate and `+inf` otherwise.
pub fn evaluate_rmse(estimate: &FieldStack, truth: &FieldStack) -> Result<RmseReport> {
    if estimate.grid() != truth.grid() {
        return Err(Error::DimensionMismatch {
            expected: truth.grid().len(),
            got: estimate.grid().len(),
        });
    }
    if estimate.times() != truth.times() {
        return Err(Error::DimensionMismatch {
            expected: truth.n_times(),
            got: estimate.n_times(),
        });
    }
    let g = truth.grid();
    let per_day: Vec<f64> = (0..truth.n_times())
        .map(|ti| {
            let cells: Vec<(f64, f64)> = (0..g.n_rows())
                .flat_map(|i| (0..g.n_cols()).map(move |j| (i, j)))
                .filter(|&(i, j)| !truth.is_masked(ti, i, j) && !estimate.is_masked(ti, i, j))
                .map(|(i, j)| (estimate.get(ti, i, j), truth.get(ti, i, j)))
                .collect();
            let n = cells.len().max(1) as f64;
            let mean = cells.iter().map(|c| c.1).sum::<f64>() / n;
            let err = (cells.iter().map(|c| (c.0 - c.1).powi(2)).sum::<f64>() / n).sqrt();
            let anomaly = (cells.iter().map(|c| (c.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
            if err == 0.0 {
                0.0
            } else if anomaly == 0.0 {
                f64::INFINITY
            } else {
                err / anomaly
            }
        })
        .collect();
    let mean = per_day.iter().sum::<f64>() / per_day.len().max(1) as f64;
    Ok(RmseReport {
        days: truth.times().to_vec(),
        per_day,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }
}

/// Equal-width histogram over `[lo, hi]`; the last bin is closed and
/// values outside the range are ignored.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    let bins = bins.max(1);
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if !v.is_finite() || v < lo || v > hi {
            continue;
        }
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Histogram { lo, hi, counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Observation;
    use rand::Rng;

    #[test]
    fn lattice_covers_and_respects_stride() {
        let g = GridSpec::new(36.5, 40.0, 1.5, 8.5, 0.05).unwrap();
        let lat = Lattice::new(&g, 1.0, 1.0).unwrap();
        let lats: Vec<f64> = lat.nodes.iter().map(|n| n.centre.lat).collect();
        assert!((lats[0] - 37.5).abs() < 1e-12);
        let mut hit = vec![0; g.len()];
        for n in &lat.nodes {
            for i in n.rows.clone() {
                for j in n.cols.clone() {
                    hit[i * g.n_cols() + j] += 1;
                }
            }
        }
        assert!(hit.iter().all(|h| *h >= 1));
    }

    #[test]
    fn small_grid_gets_single_node() {
        let g = GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.1).unwrap();
        let lat = Lattice::new(&g, 1.0, 1.0).unwrap();
        assert_eq!(lat.len(), 1);
        assert_eq!(lat.nodes[0].rows, 0..11);
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 0.1, 0.5, 0.99, 1.0, 2.0], 2, 0.0, 1.0);
        assert_eq!(h.counts, vec![2, 3]);
        assert_eq!(h.edges(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn design_neighbourhood_matches_query() {
        let g = GridSpec::new(0.0, 2.0, 0.0, 2.0, 0.1).unwrap();
        let y =
            FieldStack::from_fn(g, vec![0, 1, 2, 3], |d, p| p.lat.sin() + 0.1 * d as f64).unwrap();
        let x = FieldStack::from_fn(g, vec![0, 1, 2, 3], |d, p| (p.lon * 2.0).cos() * d as f64)
            .unwrap();
        let recs: Vec<Observation> = (0..200)
            .map(|k| {
                let f = k as f64;
                Observation {
                    t: (f * 0.37) % 3.0,
                    lat: (f * 0.173) % 2.0,
                    lon: (f * 0.291) % 2.0,
                    value: (f * 0.7).sin(),
                }
            })
            .collect();
        let obs = TrackObservations::new(recs).unwrap();
        let design = ObsDesign::build(&obs, &x, &y, 1).unwrap();
        let spec = NeighborhoodSpec::new(0.6, 1.0).unwrap();
        let (t0, s0) = (1.5, Point::new(1.0, 1.1));
        let ne = design.normal_equations(t0, s0, &spec);
        let sub = crate::field::neighborhood_query(&obs, t0, s0, &spec);
        let want = build_design(&sub, &x, &y, 1).unwrap().normal_equations();
        assert_eq!(ne.n, want.n);
        assert!((ne.gram() - want.gram()).amax() < 1e-12);
        assert!((&ne.atb - &want.atb).amax() < 1e-12);
    }

    fn planted_setup(
        op: &OperatorPair,
        n_obs: usize,
        seed: u64,
    ) -> (TrackObservations, FieldStack, FieldStack) {
        let g = GridSpec::new(0.0, 2.0, 0.0, 2.0, 0.1).unwrap();
        let times: Vec<i64> = (0..5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = times.len() * g.len();
        let y = FieldStack::new(
            g,
            times.clone(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            None,
        )
        .unwrap();
        let x = FieldStack::new(
            g,
            times,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            None,
        )
        .unwrap();
        let recs = (0..n_obs)
            .map(|_| {
                let t = rng.random_range(0.0..4.0);
                let p = Point::new(rng.random_range(0.15..1.85), rng.random_range(0.15..1.85));
                let yp = y.patch(t, p, op.w_p()).unwrap();
                let xp = x.patch(t, p, op.w_p()).unwrap();
                let value = y.sample(t, p).unwrap() + predict_detail(op, &yp, &xp).unwrap();
                Observation {
                    t,
                    lat: p.lat,
                    lon: p.lon,
                    value,
                }
            })
            .collect();
        (TrackObservations::new(recs).unwrap(), x, y)
    }

    fn planted_op(seed: u64) -> OperatorPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        OperatorPair::from_joint(1, (0..18).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
    }

    #[test]
    fn global_fit_recovers_planted_operator() {
        let op = planted_op(1);
        let (obs, x, y) = planted_setup(&op, 400, 2);
        let fit = fit_global(&obs, &x, &y, 1, 54, 0.0).unwrap();
        for (a, b) in fit.joint().iter().zip(op.joint()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn global_fit_of_exact_lowres_is_zero() {
        let (obs, x, y) = planted_setup(&OperatorPair::zeros(1), 200, 3);
        let fit = fit_global(&obs, &x, &y, 1, 54, 1e-9).unwrap();
        assert!(fit.joint().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn global_fit_ignores_record_order() {
        let op = planted_op(4);
        let (obs, x, y) = planted_setup(&op, 200, 5);
        let mut recs = obs.records().to_vec();
        recs.reverse();
        let rev = TrackObservations::new(recs).unwrap();
        let a = fit_global(&obs, &x, &y, 1, 54, 0.0).unwrap();
        let b = fit_global(&rev, &x, &y, 1, 54, 0.0).unwrap();
        for (p, q) in a.joint().iter().zip(b.joint()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn harvest_is_seeded_and_recovers_plant() {
        let op = planted_op(6);
        let (obs, x, y) = planted_setup(&op, 600, 7);
        let cfg = HarvestConfig {
            n_target: 5,
            train_spec: NeighborhoodSpec::new(1.0, 3.0).unwrap(),
            ridge: Ridge::Fixed(0.0),
            ..Default::default()
        };
        let a = harvest_operators(&obs, &x, &y, 1, &cfg, 1).unwrap();
        let b = harvest_operators(&obs, &x, &y, 1, &cfg, 1).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.attempted, 5);
        assert!(!a.is_empty());
        for i in 0..a.len() {
            for (j, v) in op.joint().iter().enumerate() {
                assert!((a.samples[(i, j)] - v).abs() < 1e-7);
            }
        }
        let tiny = HarvestConfig {
            n_target: 3,
            min_rows: Some(100_000),
            ..cfg
        };
        assert!(matches!(
            harvest_operators(&obs, &x, &y, 1, &tiny, 2),
            Err(Error::HarvestTooSmall { got: 0, .. })
        ));
    }

    fn planted_dict(kind: DictKind) -> OperatorDictionary {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = DMatrix::from_fn(18, 3, |_, _| rng.random_range(-1.0..1.0f64));
        let (atoms, mean) = match kind {
            DictKind::Orthogonal => (
                raw.qr().q().columns(0, 3).into_owned(),
                DVector::from_fn(18, |i, _| 0.01 * i as f64),
            ),
            _ => {
                let mut a = raw.abs();
                for mut c in a.column_iter_mut() {
                    let n = c.norm();
                    c /= n;
                }
                (a, DVector::zeros(18))
            }
        };
        OperatorDictionary::new(
            kind,
            atoms,
            mean,
            crate::dict::DictMeta {
                seed: 0,
                iters: 0,
                t0: 2,
            },
        )
        .unwrap()
    }

    #[test]
    fn local_coefficients_recover_planted_alpha() {
        let sr = SrConfig {
            ridge: Ridge::Fixed(0.0),
            ..Default::default()
        };
        for kind in [DictKind::Orthogonal, DictKind::Nonneg] {
            let dict = planted_dict(kind);
            let alpha = vec![0.4, 0.0, 0.25];
            let op = decode(&dict, &alpha).unwrap();
            let (obs, x, y) = planted_setup(&op, 300, 9);
            let design = ObsDesign::build(&obs, &x, &y, 1).unwrap();
            let fit = local_coefficients(
                &dict,
                &design,
                2.0,
                Point::new(1.0, 1.0),
                &sr,
                &OperatorPair::zeros(1),
            );
            assert!(!fit.fallback);
            let got = fit.alpha.unwrap();
            for (a, b) in got.iter().zip(&alpha) {
                assert!((a - b).abs() < 1e-5, "{kind:?}: {got:?}");
            }
            if kind == DictKind::Nonneg {
                assert!(got.iter().all(|a| *a >= 0.0));
            }
        }
    }

    #[test]
    fn nonneg_coefficients_stay_non_negative() {
        let dict = planted_dict(DictKind::Nonneg);
        let op = planted_op(10);
        let (obs, x, y) = planted_setup(&op, 300, 11);
        let design = ObsDesign::build(&obs, &x, &y, 1).unwrap();
        let fit = local_coefficients(
            &dict,
            &design,
            2.0,
            Point::new(1.0, 1.0),
            &SrConfig::default(),
            &op,
        );
        assert!(fit.alpha.unwrap().iter().all(|a| *a >= 0.0));
    }

    #[test]
    fn empty_neighbourhood_falls_back() {
        let dict = planted_dict(DictKind::Orthogonal);
        let (obs, x, y) = planted_setup(&planted_op(12), 50, 13);
        let design = ObsDesign::build(&obs, &x, &y, 1).unwrap();
        let global = planted_op(14);
        let far = 100.0;
        let low = SrConfig {
            fallback: Fallback::Lowres,
            ..Default::default()
        };
        let fit = local_coefficients(&dict, &design, far, Point::new(1.0, 1.0), &low, &global);
        assert!(fit.fallback && fit.op.is_zero() && fit.rows == 0);
        let fit = local_coefficients(
            &dict,
            &design,
            far,
            Point::new(1.0, 1.0),
            &SrConfig::default(),
            &global,
        );
        assert!(fit.fallback);
        assert_eq!(fit.op, global);
    }

    #[test]
    fn reconstruct_special_cases() {
        let (_, x, y) = planted_setup(&OperatorPair::zeros(1), 0, 15);
        let lattice = Lattice::new(y.grid(), 0.5, 0.5).unwrap();
        let zeros = vec![OperatorPair::zeros(1); lattice.len()];
        let out = reconstruct(&zeros, &lattice, &x, &y, 2).unwrap();
        assert_eq!(out, y.slice(2));

        let op = planted_op(16);
        let same = vec![op.clone(); lattice.len()];
        let tiled = reconstruct(&same, &lattice, &x, &y, 2).unwrap();
        let global = apply_global(&op, &x, &y).unwrap();
        for (a, b) in tiled.iter().zip(global.slice(2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapping_tiles_are_averaged() {
        let g = GridSpec::new(0.0, 1.0, 0.0, 0.4, 0.1).unwrap();
        let y = FieldStack::constant(g, vec![0], 1.0).unwrap();
        let x = FieldStack::constant(g, vec![0], 0.0).unwrap();
        let lattice = Lattice {
            nodes: vec![
                LatticeNode {
                    centre: Point::new(0.3, 0.2),
                    rows: 0..7,
                    cols: 0..5,
                },
                LatticeNode {
                    centre: Point::new(0.7, 0.2),
                    rows: 4..11,
                    cols: 0..5,
                },
            ],
        };
        // centre tap of h_y scales the detail by y itself
        let mut a = vec![0.0; 18];
        a[4] = 1.0;
        let mut b = vec![0.0; 18];
        b[4] = 3.0;
        let models = vec![
            OperatorPair::from_joint(1, a).unwrap(),
            OperatorPair::from_joint(1, b).unwrap(),
        ];
        let out = reconstruct(&models, &lattice, &x, &y, 0).unwrap();
        assert_eq!(out[0], 2.0);
        assert_eq!(out[5 * 5], 3.0);
        assert_eq!(out[10 * 5], 4.0);
        let gap = Lattice {
            nodes: vec![lattice.nodes[0].clone(), lattice.nodes[0].clone()],
        };
        assert!(matches!(
            reconstruct(&models, &gap, &x, &y, 0),
            Err(Error::UncoveredNode { row: 7, col: 0 })
        ));
    }

    #[test]
    fn rmse_cases() {
        let g = GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.25).unwrap();
        let truth =
            FieldStack::from_fn(g, vec![0, 1], |d, p| p.lat - 2.0 * p.lon + d as f64).unwrap();
        let r = evaluate_rmse(&truth, &truth).unwrap();
        assert_eq!(r.per_day, vec![0.0, 0.0]);
        let mean_only = FieldStack::from_fn(g, vec![0, 1], |d, _| -0.5 + d as f64).unwrap();
        let r = evaluate_rmse(&mean_only, &truth).unwrap();
        for v in &r.per_day {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let doubled = truth
            .with_values(truth.values().iter().map(|v| 2.0 * v).collect())
            .unwrap();
        let anomaly_doubled = FieldStack::from_fn(g, vec![0, 1], |d, p| {
            2.0 * (p.lat - 2.0 * p.lon) + 0.5 + d as f64
        })
        .unwrap();
        let r = evaluate_rmse(&anomaly_doubled, &truth).unwrap();
        for v in &r.per_day {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(evaluate_rmse(&doubled, &truth).unwrap().mean > 1.0);
        let other = FieldStack::constant(g, vec![0], 0.0).unwrap();
        assert!(evaluate_rmse(&other, &truth).is_err());
    }
}
