//! Regular grids, field time series, irregular point observations, and the
//! space-time interpolation primitives everything else is built on.
//!
//! Grid row `i` sits at latitude `lat_min + i * step` (row 0 is the southern
//! edge); column `j` sits at longitude `lon_min + j * step`. Field slices are
//! stored row-major. Observation times are real-valued days, field slices
//! are tagged with integer days.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance (in grid cells, or days) under which a coordinate snaps onto a
/// grid node or a slice time.
const SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub lat: f64,
    pub lon: f64,
}

impl Point {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct GridBounds {
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
    step: f64,
}

/// A regular lat/lon grid. Node counts are derived from the bounds and step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridBounds", into = "GridBounds")]
pub struct GridSpec {
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
    step: f64,
    n_rows: usize,
    n_cols: usize,
}

impl TryFrom<GridBounds> for GridSpec {
    type Error = Error;

    fn try_from(b: GridBounds) -> Result<Self> {
        GridSpec::new(b.lat_min, b.lat_max, b.lon_min, b.lon_max, b.step)
    }
}

impl From<GridSpec> for GridBounds {
    fn from(g: GridSpec) -> Self {
        GridBounds {
            lat_min: g.lat_min,
            lat_max: g.lat_max,
            lon_min: g.lon_min,
            lon_max: g.lon_max,
            step: g.step,
        }
    }
}

/// Fractional position along one grid axis: node index plus a fraction in
/// `[0, 1)`. A zero fraction means the coordinate sits on the node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AxisPos {
    pub idx: usize,
    pub frac: f64,
}

impl GridSpec {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64, step: f64) -> Result<Self> {
        let all_finite = [lat_min, lat_max, lon_min, lon_max, step]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidParameter("grid bounds must be finite".into()));
        }
        if lat_max <= lat_min || lon_max <= lon_min {
            return Err(Error::InvalidParameter(format!(
                "empty grid box lat [{lat_min}, {lat_max}] lon [{lon_min}, {lon_max}]"
            )));
        }
        if step <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "grid step must be > 0, got {step}"
            )));
        }
        let n_rows = ((lat_max - lat_min) / step).round() as usize + 1;
        let n_cols = ((lon_max - lon_min) / step).round() as usize + 1;
        Ok(Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            step,
            n_rows,
            n_cols,
        })
    }

    pub fn lat_min(&self) -> f64 {
        self.lat_min
    }
    pub fn lat_max(&self) -> f64 {
        self.lat_max
    }
    pub fn lon_min(&self) -> f64 {
        self.lon_min
    }
    pub fn lon_max(&self) -> f64 {
        self.lon_max
    }
    pub fn step(&self) -> f64 {
        self.step
    }
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }
    /// Number of nodes in one slice.
    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lat(&self, row: usize) -> f64 {
        self.lat_min + row as f64 * self.step
    }

    pub fn lon(&self, col: usize) -> f64 {
        self.lon_min + col as f64 * self.step
    }

    pub fn node(&self, row: usize, col: usize) -> Point {
        Point::new(self.lat(row), self.lon(col))
    }

    /// Latitude of the northernmost node row.
    pub fn lat_top(&self) -> f64 {
        self.lat(self.n_rows - 1)
    }

    /// Longitude of the easternmost node column.
    pub fn lon_right(&self) -> f64 {
        self.lon(self.n_cols - 1)
    }

    /// True when `p` lies inside the node box (with a tiny tolerance).
    pub fn contains(&self, p: Point) -> bool {
        let tol = SNAP_EPS * self.step;
        p.lat >= self.lat_min - tol
            && p.lat <= self.lat_top() + tol
            && p.lon >= self.lon_min - tol
            && p.lon <= self.lon_right() + tol
    }

    /// True when this grid's node box contains `other`'s node box.
    pub fn covers(&self, other: &GridSpec) -> bool {
        let tol = SNAP_EPS * self.step.max(other.step);
        other.lat_min >= self.lat_min - tol
            && other.lat_top() <= self.lat_top() + tol
            && other.lon_min >= self.lon_min - tol
            && other.lon_right() <= self.lon_right() + tol
    }

    pub(crate) fn locate_row(&self, lat: f64) -> Option<AxisPos> {
        locate(lat, self.lat_min, self.step, self.n_rows)
    }

    pub(crate) fn locate_col(&self, lon: f64) -> Option<AxisPos> {
        locate(lon, self.lon_min, self.step, self.n_cols)
    }
}

fn locate(x: f64, origin: f64, step: f64, n: usize) -> Option<AxisPos> {
    if !x.is_finite() {
        return None;
    }
    let u = (x - origin) / step;
    let last = (n - 1) as f64;
    if u < -SNAP_EPS || u > last + SNAP_EPS {
        return None;
    }
    let r = u.round();
    if (u - r).abs() < SNAP_EPS {
        return Some(AxisPos {
            idx: r.clamp(0.0, last) as usize,
            frac: 0.0,
        });
    }
    let idx = u.floor() as usize;
    Some(AxisPos {
        idx,
        frac: u - idx as f64,
    })
}

/// Up to two slices bracketing a query time with their linear weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TimeWeights {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f64,
}

impl TimeWeights {
    pub fn slices(&self) -> impl Iterator<Item = (usize, f64)> {
        let single = self.w_hi == 0.0;
        let first = std::iter::once((self.lo, 1.0 - self.w_hi));
        let second = (!single).then_some((self.hi, self.w_hi));
        first.chain(second)
    }
}

/// A time series of 2-D scalar fields on a common regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    grid: GridSpec,
    times: Vec<i64>,
    values: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl FieldStack {
    /// Builds a stack, checking time ordering, value shape and finiteness.
    /// `mask[k] == true` marks cell `k` as missing.
    pub fn new(
        grid: GridSpec,
        times: Vec<i64>,
        values: Vec<f64>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidParameter(
                "field stack needs at least one time".into(),
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "times must be strictly increasing".into(),
            ));
        }
        let expected = times.len() * grid.len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        if let Some(m) = &mask {
            if m.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: m.len(),
                });
            }
        }
        let bad = values
            .iter()
            .enumerate()
            .find(|(k, v)| !v.is_finite() && !mask.as_ref().is_some_and(|m| m[*k]));
        if let Some((k, v)) = bad {
            return Err(Error::InvalidParameter(format!(
                "non-finite unmasked value {v} at flat index {k}"
            )));
        }
        Ok(Self {
            grid,
            times,
            values,
            mask,
        })
    }

    pub fn constant(grid: GridSpec, times: Vec<i64>, value: f64) -> Result<Self> {
        let n = times.len() * grid.len();
        Self::new(grid, times, vec![value; n], None)
    }

    /// Evaluates `f(day, point)` at every node of every slice.
    pub fn from_fn(grid: GridSpec, times: Vec<i64>, f: impl Fn(i64, Point) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(times.len() * grid.len());
        for &d in &times {
            for i in 0..grid.n_rows() {
                for j in 0..grid.n_cols() {
                    values.push(f(d, grid.node(i, j)));
                }
            }
        }
        Self::new(grid, times, values, None)
    }

    /// Same grid and times, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.grid, self.times.clone(), values, self.mask.clone())
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn times(&self) -> &[i64] {
        &self.times
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn slice(&self, ti: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[ti * n..(ti + 1) * n]
    }

    pub fn get(&self, ti: usize, row: usize, col: usize) -> f64 {
        self.values[self.flat(ti, row, col)]
    }

    pub fn is_masked(&self, ti: usize, row: usize, col: usize) -> bool {
        self.mask
            .as_ref()
            .is_some_and(|m| m[self.flat(ti, row, col)])
    }

    pub fn time_index(&self, day: i64) -> Option<usize> {
        self.times.binary_search(&day).ok()
    }

    /// True when both stacks share grid and time axis.
    pub fn same_support(&self, other: &FieldStack) -> bool {
        self.grid == other.grid && self.times == other.times
    }

    fn flat(&self, ti: usize, row: usize, col: usize) -> usize {
        (ti * self.grid.n_rows() + row) * self.grid.n_cols() + col
    }

    pub(crate) fn time_weights(&self, t: f64) -> Result<TimeWeights> {
        let first = self.times[0] as f64;
        let last = *self.times.last().unwrap() as f64;
        if !t.is_finite() || t < first - SNAP_EPS || t > last + SNAP_EPS {
            return Err(Error::OutOfDomain(format!(
                "time {t} outside [{first}, {last}]"
            )));
        }
        let k = self.times.partition_point(|&d| (d as f64) <= t + SNAP_EPS);
        let lo = k.saturating_sub(1);
        if (t - self.times[lo] as f64).abs() <= SNAP_EPS || lo + 1 == self.times.len() {
            return Ok(TimeWeights {
                lo,
                hi: lo,
                w_hi: 0.0,
            });
        }
        let (t0, t1) = (self.times[lo] as f64, self.times[lo + 1] as f64);
        Ok(TimeWeights {
            lo,
            hi: lo + 1,
            w_hi: (t - t0) / (t1 - t0),
        })
    }

    /// Bilinear value at (row, col) fractional positions, blended across the
    /// bracketing slices. Nodes carrying zero weight are never read.
    pub(crate) fn interp(&self, tw: &TimeWeights, r: AxisPos, c: AxisPos) -> Result<f64> {
        let (nr, nc) = (self.grid.n_rows(), self.grid.n_cols());
        let row_hi = usize::from(r.frac > 0.0);
        let col_hi = usize::from(c.frac > 0.0);
        if r.idx + row_hi >= nr || c.idx + col_hi >= nc {
            return Err(Error::OutOfDomain(format!(
                "cell ({}, {}) outside {nr}x{nc} grid",
                r.idx, c.idx
            )));
        }
        let mut acc = 0.0;
        for (ti, wt) in tw.slices() {
            for di in 0..=row_hi {
                let wr = if di == 0 { 1.0 - r.frac } else { r.frac };
                for dj in 0..=col_hi {
                    let wc = if dj == 0 { 1.0 - c.frac } else { c.frac };
                    let (i, j) = (r.idx + di, c.idx + dj);
                    if self.is_masked(ti, i, j) {
                        return Err(Error::MaskedRegion(format!(
                            "slice {} node ({i}, {j})",
                            self.times[ti]
                        )));
                    }
                    acc += wt * wr * wc * self.get(ti, i, j);
                }
            }
        }
        Ok(acc)
    }

    /// Bilinear-in-space, linear-in-time value at `(t, p)`.
    pub fn sample(&self, t: f64, p: Point) -> Result<f64> {
        let tw = self.time_weights(t)?;
        let (r, c) = self.locate(p)?;
        self.interp(&tw, r, c)
    }

    /// `(2 w_p + 1)^2` samples centred on `p`, offset by whole grid steps,
    /// row-major with the (south-to-north) row offset varying slowest.
    pub fn patch(&self, t: f64, p: Point, w_p: usize) -> Result<Vec<f64>> {
        let tw = self.time_weights(t)?;
        let (r, c) = self.locate(p)?;
        let mut out = Vec::with_capacity((2 * w_p + 1).pow(2));
        self.patch_into(&tw, r, c, w_p, &mut out)?;
        Ok(out)
    }

    pub(crate) fn patch_into(
        &self,
        tw: &TimeWeights,
        r: AxisPos,
        c: AxisPos,
        w_p: usize,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        let w = w_p as isize;
        for di in -w..=w {
            let row = offset(r, di).ok_or_else(|| out_of_patch(di, 0))?;
            for dj in -w..=w {
                let col = offset(c, dj).ok_or_else(|| out_of_patch(di, dj))?;
                out.push(self.interp(tw, row, col)?);
            }
        }
        Ok(())
    }

    pub(crate) fn locate(&self, p: Point) -> Result<(AxisPos, AxisPos)> {
        let r = self.grid.locate_row(p.lat);
        let c = self.grid.locate_col(p.lon);
        match (r, c) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::OutOfDomain(format!(
                "point ({}, {}) outside grid box",
                p.lat, p.lon
            ))),
        }
    }

    /// Mean and population standard deviation over all unmasked cells.
    pub fn moments(&self) -> (f64, f64) {
        let mut n = 0usize;
        let mut sum = 0.0;
        for (k, v) in self.values.iter().enumerate() {
            if !self.mask.as_ref().is_some_and(|m| m[k]) {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            return (0.0, 0.0);
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for (k, v) in self.values.iter().enumerate() {
            if !self.mask.as_ref().is_some_and(|m| m[k]) {
                ss += (v - mean).powi(2);
            }
        }
        (mean, (ss / n as f64).sqrt())
    }

    /// Zero-mean, unit-variance copy. A constant stack is only centred.
    pub fn standardized(&self) -> (FieldStack, f64, f64) {
        let (mean, std) = self.moments();
        let scale = if std > 0.0 { std } else { 1.0 };
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, v)| {
                if self.mask.as_ref().is_some_and(|m| m[k]) {
                    *v
                } else {
                    (v - mean) / scale
                }
            })
            .collect();
        let out = FieldStack {
            grid: self.grid,
            times: self.times.clone(),
            values,
            mask: self.mask.clone(),
        };
        (out, mean, scale)
    }
}

fn offset(pos: AxisPos, d: isize) -> Option<AxisPos> {
    let idx = pos.idx as isize + d;
    (idx >= 0).then_some(AxisPos {
        idx: idx as usize,
        frac: pos.frac,
    })
}

fn out_of_patch(di: isize, dj: isize) -> Error {
    Error::OutOfDomain(format!("patch offset ({di}, {dj}) leaves the grid"))
}

pub fn sample_field(stack: &FieldStack, t: f64, p: Point) -> Result<f64> {
    stack.sample(t, p)
}

pub fn extract_patch(stack: &FieldStack, t: f64, p: Point, w_p: usize) -> Result<Vec<f64>> {
    stack.patch(t, p, w_p)
}

/// Bilinear resampling of every slice of `lr` onto `hr_grid`.
pub fn upsample(lr: &FieldStack, hr_grid: &GridSpec) -> Result<FieldStack> {
    if !lr.grid().covers(hr_grid) {
        return Err(Error::CoverageMismatch(format!(
            "target box lat [{}, {}] lon [{}, {}] vs source lat [{}, {}] lon [{}, {}]",
            hr_grid.lat_min(),
            hr_grid.lat_top(),
            hr_grid.lon_min(),
            hr_grid.lon_right(),
            lr.grid().lat_min(),
            lr.grid().lat_top(),
            lr.grid().lon_min(),
            lr.grid().lon_right()
        )));
    }
    let rows: Vec<AxisPos> = (0..hr_grid.n_rows())
        .map(|i| lr.grid().locate_row(hr_grid.lat(i)))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::CoverageMismatch("row outside source grid".into()))?;
    let cols: Vec<AxisPos> = (0..hr_grid.n_cols())
        .map(|j| lr.grid().locate_col(hr_grid.lon(j)))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::CoverageMismatch("column outside source grid".into()))?;

    let n = lr.n_times() * hr_grid.len();
    let mut values = Vec::with_capacity(n);
    let mut mask = lr.mask().map(|_| Vec::with_capacity(n));
    for ti in 0..lr.n_times() {
        let tw = TimeWeights {
            lo: ti,
            hi: ti,
            w_hi: 0.0,
        };
        for r in &rows {
            for c in &cols {
                match lr.interp(&tw, *r, *c) {
                    Ok(v) => {
                        values.push(v);
                        if let Some(m) = mask.as_mut() {
                            m.push(false);
                        }
                    }
                    Err(Error::MaskedRegion(_)) => {
                        values.push(0.0);
                        if let Some(m) = mask.as_mut() {
                            m.push(true);
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    FieldStack::new(*hr_grid, lr.times().to_vec(), values, mask)
}

/// A single high-resolution point observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub lat: f64,
    pub lon: f64,
    pub value: f64,
}

impl Observation {
    pub fn point(&self) -> Point {
        Point::new(self.lat, self.lon)
    }
}

/// Irregularly-sampled observations, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackObservations {
    records: Vec<Observation>,
}

impl TrackObservations {
    pub fn new(records: Vec<Observation>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| {
            !(r.t.is_finite() && r.lat.is_finite() && r.lon.is_finite() && r.value.is_finite())
        }) {
            return Err(Error::InvalidParameter(format!(
                "non-finite observation {r:?}"
            )));
        }
        Ok(Self { records })
    }

    /// Fails if any record lies outside `grid`'s node box.
    pub fn check_within(&self, grid: &GridSpec) -> Result<()> {
        match self.records.iter().find(|r| !grid.contains(r.point())) {
            Some(r) => Err(Error::OutOfDomain(format!(
                "observation at ({}, {}) outside grid box",
                r.lat, r.lon
            ))),
            None => Ok(()),
        }
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
    pub fn iter(&self) -> std::slice::Iter<'_, Observation> {
        self.records.iter()
    }

    pub fn mean_value(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.value).sum::<f64>() / self.records.len() as f64
    }

    pub fn variance(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let m = self.mean_value();
        self.records
            .iter()
            .map(|r| (r.value - m).powi(2))
            .sum::<f64>()
            / self.records.len() as f64
    }
}

/// Space-time neighbourhood: max-norm box of half-width `d_s` degrees and a
/// `±d_t` day window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    pub d_s: f64,
    pub d_t: f64,
}

impl NeighborhoodSpec {
    pub fn new(d_s: f64, d_t: f64) -> Result<Self> {
        let spec = Self { d_s, d_t };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_s > 0.0 && self.d_s.is_finite()) || !(self.d_t >= 0.0 && self.d_t.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "neighbourhood needs d_s > 0 and d_t >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, t0: f64, s0: Point, t: f64, s: Point) -> bool {
        (t - t0).abs() <= self.d_t && (s.lat - s0.lat).abs().max((s.lon - s0.lon).abs()) <= self.d_s
    }
}

pub fn neighborhood_query(
    obs: &TrackObservations,
    t0: f64,
    s0: Point,
    spec: &NeighborhoodSpec,
) -> TrackObservations {
    let records = obs
        .iter()
        .filter(|r| spec.contains(t0, s0, r.t, r.point()))
        .copied()
        .collect();
    TrackObservations { records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSpec {
        GridSpec::new(10.0, 11.0, 20.0, 22.0, 0.25).unwrap()
    }

    #[test]
    fn grid_counts() {
        let g = grid();
        assert_eq!(g.n_rows(), 5);
        assert_eq!(g.n_cols(), 9);
        let g = GridSpec::new(36.5, 40.0, 1.5, 8.5, 0.05).unwrap();
        assert_eq!((g.n_rows(), g.n_cols()), (71, 141));
        assert!(GridSpec::new(1.0, 1.0, 0.0, 1.0, 0.1).is_err());
        assert!(GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn grid_serde_uses_bounds_only() {
        let g = grid();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(
            s,
            r#"{"lat_min":10.0,"lat_max":11.0,"lon_min":20.0,"lon_max":22.0,"step":0.25}"#
        );
        let back: GridSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn constant_stack_samples_constant() {
        let s = FieldStack::constant(grid(), vec![0, 1, 2], 5.0).unwrap();
        for (t, lat, lon) in [(0.0, 10.0, 20.0), (1.3, 10.61, 21.99), (2.0, 11.0, 22.0)] {
            assert!((s.sample(t, Point::new(lat, lon)).unwrap() - 5.0).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_in_lon_is_exact() {
        let s = FieldStack::from_fn(grid(), vec![3], |_, p| p.lon).unwrap();
        let v = s.sample(3.0, Point::new(10.5, 20.125)).unwrap();
        assert!((v - 20.125).abs() < 1e-12);
    }

    #[test]
    fn cell_centre_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = GridSpec::new(0.0, 1.0, 0.0, 1.0, 1.0).unwrap();
        for _ in 0..20 {
            let vals: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = FieldStack::new(g, vec![0], vals.clone(), None).unwrap();
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            let got = s.sample(0.0, Point::new(u, v)).unwrap();
            let want = (1.0 - u) * (1.0 - v) * vals[0]
                + (1.0 - u) * v * vals[1]
                + u * (1.0 - v) * vals[2]
                + u * v * vals[3];
            assert!((got - want).abs() < 1e-13);
            let centre = s.sample(0.0, Point::new(0.5, 0.5)).unwrap();
            assert!((centre - vals.iter().sum::<f64>() / 4.0).abs() < 1e-13);
        }
    }

    #[test]
    fn node_exact_and_time_linear() {
        let s = FieldStack::from_fn(grid(), vec![0, 2], |d, p| d as f64 * 10.0 + p.lat * p.lon)
            .unwrap();
        let p = grid().node(2, 3);
        assert_eq!(s.sample(2.0, p).unwrap(), s.get(1, 2, 3));
        let mid = s.sample(1.0, p).unwrap();
        assert!((mid - 0.5 * (s.get(0, 2, 3) + s.get(1, 2, 3))).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain_and_masked() {
        let g = grid();
        let mut mask = vec![false; g.len()];
        mask[g.n_cols() + 1] = true; // node (1, 1)
        let s = FieldStack::new(g, vec![0], vec![1.0; g.len()], Some(mask)).unwrap();
        assert!(matches!(
            s.sample(0.0, Point::new(9.0, 20.0)),
            Err(Error::OutOfDomain(_))
        ));
        assert!(matches!(
            s.sample(0.5, Point::new(10.0, 20.0)),
            Err(Error::OutOfDomain(_))
        ));
        assert!(matches!(
            s.sample(0.0, Point::new(10.3, 20.3)),
            Err(Error::MaskedRegion(_))
        ));
        assert!(s.sample(0.0, Point::new(10.6, 20.6)).is_ok());
    }

    #[test]
    fn patch_at_node_returns_stored_values() {
        let s = FieldStack::from_fn(grid(), vec![0, 1], |d, p| {
            d as f64 + 3.0 * p.lat - p.lon * p.lon
        })
        .unwrap();
        let p = grid().node(2, 4);
        let patch = s.patch(1.0, p, 1).unwrap();
        let mut k = 0;
        for i in 1..=3 {
            for j in 3..=5 {
                assert_eq!(patch[k], s.get(1, i, j));
                k += 1;
            }
        }
        assert!(s.patch(1.0, grid().node(0, 4), 1).is_err());
    }

    #[test]
    fn patch_entries_match_pointwise_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = grid();
        let s = FieldStack::from_fn(g, vec![0, 1, 2], |d, p| {
            (p.lat * 3.0).sin() + (p.lon * d as f64).cos()
        })
        .unwrap();
        for _ in 0..50 {
            let p = Point::new(
                rng.random_range(10.25..10.75),
                rng.random_range(20.25..21.75),
            );
            let t = rng.random_range(0.0..2.0);
            let patch = s.patch(t, p, 1).unwrap();
            let mut k = 0;
            for di in -1..=1 {
                for dj in -1..=1 {
                    let q = Point::new(p.lat + di as f64 * g.step(), p.lon + dj as f64 * g.step());
                    assert!((patch[k] - s.sample(t, q).unwrap()).abs() < 1e-12);
                    k += 1;
                }
            }
            assert_eq!(patch[4], s.sample(t, p).unwrap());
        }
    }

    #[test]
    fn upsample_cases() {
        let lr = GridSpec::new(0.0, 2.0, 0.0, 4.0, 0.5).unwrap();
        let hr = GridSpec::new(0.25, 1.75, 0.5, 3.5, 0.125).unwrap();
        let c = FieldStack::constant(lr, vec![0, 1], 2.5).unwrap();
        let up = upsample(&c, &hr).unwrap();
        assert!(up.values().iter().all(|v| (v - 2.5).abs() < 1e-14));

        let same = upsample(&c, &lr).unwrap();
        assert_eq!(same.values(), c.values());

        let ramp = FieldStack::from_fn(lr, vec![0], |_, p| 3.0 * p.lon - 1.0).unwrap();
        let up = upsample(&ramp, &hr).unwrap();
        let dev = (0..hr.n_rows())
            .flat_map(|i| (0..hr.n_cols()).map(move |j| (i, j)))
            .map(|(i, j)| (up.get(0, i, j) - (3.0 * hr.lon(j) - 1.0)).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-12, "max deviation {dev}");

        let wide = GridSpec::new(-0.5, 1.0, 0.0, 1.0, 0.125).unwrap();
        assert!(matches!(
            upsample(&c, &wide),
            Err(Error::CoverageMismatch(_))
        ));
    }

    #[test]
    fn neighbourhood_basic_cases() {
        let spec = NeighborhoodSpec::new(1.0, 2.0).unwrap();
        let empty = TrackObservations::default();
        assert!(neighborhood_query(&empty, 0.0, Point::new(0.0, 0.0), &spec).is_empty());
        let one = TrackObservations::new(vec![Observation {
            t: 4.5,
            lat: 1.0,
            lon: 2.0,
            value: 7.0,
        }])
        .unwrap();
        let tiny = NeighborhoodSpec::new(1e-6, 0.0).unwrap();
        let got = neighborhood_query(&one, 4.5, Point::new(1.0, 2.0), &tiny);
        assert_eq!(got.records(), one.records());
        assert!(NeighborhoodSpec::new(0.0, 1.0).is_err());
        assert!(NeighborhoodSpec::new(1.0, -1.0).is_err());
    }

    #[test]
    fn neighbourhood_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let records: Vec<Observation> = (0..100)
            .map(|_| Observation {
                t: rng.random_range(0.0..30.0),
                lat: rng.random_range(0.0..5.0),
                lon: rng.random_range(0.0..5.0),
                value: rng.random(),
            })
            .collect();
        let obs = TrackObservations::new(records.clone()).unwrap();
        let spec = NeighborhoodSpec::new(1.5, 5.0).unwrap();
        let (t0, s0) = (12.0, Point::new(2.0, 3.0));
        let got = neighborhood_query(&obs, t0, s0, &spec);
        let want: Vec<_> = records
            .iter()
            .filter(|r| {
                (r.t - t0).abs() <= 5.0 && (r.lat - 2.0).abs() <= 1.5 && (r.lon - 3.0).abs() <= 1.5
            })
            .copied()
            .collect();
        assert!(!want.is_empty());
        assert_eq!(got.records(), &want[..]);
    }

    #[test]
    fn standardize_moments() {
        let s = FieldStack::from_fn(grid(), vec![0, 1], |d, p| d as f64 + p.lat * 2.0).unwrap();
        let (z, _, _) = s.standardized();
        let (m, sd) = z.moments();
        assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    }
}
