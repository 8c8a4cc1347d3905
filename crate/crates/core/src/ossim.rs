//! Seeded synthetic observing system: drifting-eddy truth fields, a
//! covariate coupled to their fine-scale detail, and straight along-track
//! sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldStack, GridSpec, Observation, Point, TrackObservations};

const EDDY_SALT: u64 = 0x6564_6479;
const XFIELD_SALT: u64 = 0x7866_6c64;
const TRACK_SALT: u64 = 0x7472_6b73;
/// Random modes in the covariate's smooth component.
const SMOOTH_MODES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthParams {
    pub grid: GridSpec,
    pub n_days: usize,
    pub n_eddies: usize,
    /// Peak amplitude range, field units.
    pub amp_range: [f64; 2],
    /// Gaussian e-folding radius range, degrees.
    pub radius_range: [f64; 2],
    /// Drift speed range, degrees per day.
    pub drift_range: [f64; 2],
    /// Bound on the background ramp.
    pub background_amp: f64,
    /// Gain of `x` on the detail `y − blur(y)`.
    pub x_coupling: f64,
    /// Std of the smooth random component of `x`, in units of the detail std.
    pub x_smooth: f64,
    /// Std of the white noise of `x`, in units of the detail std.
    pub x_noise: f64,
    pub seed: u64,
}

impl Default for TruthParams {
    fn default() -> Self {
        Self {
            grid: GridSpec::new(36.5, 40.0, 1.5, 8.5, 0.05).expect("default grid"),
            n_days: 120,
            n_eddies: 25,
            amp_range: [0.05, 0.2],
            radius_range: [0.08, 0.2],
            drift_range: [0.0, 0.03],
            background_amp: 0.3,
            x_coupling: 0.7,
            x_smooth: 0.5,
            x_noise: 0.3,
            seed: 1,
        }
    }
}

impl TruthParams {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.n_days == 0 {
            return Err(Error::InvalidParameter("n_days must be >= 1".into()));
        }
        if !ordered(self.radius_range) || self.radius_range[0] <= 0.0 {
            return Err(Error::InvalidParameter("eddy radii must be > 0".into()));
        }
        if !ordered(self.amp_range) || !ordered(self.drift_range) || self.drift_range[0] < 0.0 {
            return Err(Error::InvalidParameter(
                "amplitude and drift ranges must be ordered".into(),
            ));
        }
        for (name, v) in [
            ("background_amp", self.background_amp),
            ("x_smooth", self.x_smooth),
            ("x_noise", self.x_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0")));
            }
        }
        if !self.x_coupling.is_finite() {
            return Err(Error::InvalidParameter("x_coupling must be finite".into()));
        }
        Ok(())
    }

    pub fn days(&self) -> Vec<i64> {
        (0..self.n_days as i64).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Eddy {
    lat: f64,
    lon: f64,
    v_lat: f64,
    v_lon: f64,
    amp: f64,
    radius: f64,
}

/// Truth `y` and covariate `x`. The covariate is
/// `x_coupling · (y − blur(y)) + smooth field + noise`, with the blur scale
/// set to the largest eddy radius. Smooth and noise amplitudes are relative to
/// the pooled detail std, or absolute when the detail vanishes.
pub fn generate_truth(p: &TruthParams) -> Result<(FieldStack, FieldStack)> {
    p.validate()?;
    let g = p.grid;
    let days = p.days();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ EDDY_SALT);
    let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| r[0] + rng.random::<f64>() * (r[1] - r[0]);

    // background: bilinear ramp in normalized coordinates, |b| <= background_amp
    let mut c = [0.0f64; 4];
    for ci in &mut c {
        *ci = rng.random_range(-1.0..1.0);
    }
    let total: f64 = c.iter().map(|v| v.abs()).sum();
    let c = c.map(|v| {
        if total > 0.0 {
            v / total * p.background_amp
        } else {
            0.0
        }
    });
    let (lat_mid, lon_mid) = (
        0.5 * (g.lat_min() + g.lat_top()),
        0.5 * (g.lon_min() + g.lon_right()),
    );
    let (lat_half, lon_half) = (
        (0.5 * (g.lat_top() - g.lat_min())).max(f64::MIN_POSITIVE),
        (0.5 * (g.lon_right() - g.lon_min())).max(f64::MIN_POSITIVE),
    );
    let background = move |pt: Point| {
        let u = (pt.lat - lat_mid) / lat_half;
        let v = (pt.lon - lon_mid) / lon_half;
        c[0] + c[1] * u + c[2] * v + c[3] * u * v
    };

    let margin = p.radius_range[1];
    let t_mid = 0.5 * (p.n_days - 1) as f64;
    let eddies: Vec<Eddy> = (0..p.n_eddies)
        .map(|_| {
            let lat = uniform(&mut rng, [g.lat_min() - margin, g.lat_top() + margin]);
            let lon = uniform(&mut rng, [g.lon_min() - margin, g.lon_right() + margin]);
            let speed = uniform(&mut rng, p.drift_range);
            let dir = rng.random::<f64>() * std::f64::consts::TAU;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let amp = sign * uniform(&mut rng, p.amp_range);
            let radius = uniform(&mut rng, p.radius_range);
            Eddy {
                lat,
                lon,
                v_lat: speed * dir.cos(),
                v_lon: speed * dir.sin(),
                amp,
                radius,
            }
        })
        .collect();

    let y = FieldStack::from_fn(g, days.clone(), |d, pt| {
        let dt = d as f64 - t_mid;
        let mut v = background(pt);
        for e in &eddies {
            let dl = pt.lat - (e.lat + e.v_lat * dt);
            let dn = pt.lon - (e.lon + e.v_lon * dt);
            v += e.amp * (-(dl * dl + dn * dn) / (e.radius * e.radius)).exp();
        }
        v
    })?;

    let sigma_cells = p.radius_range[1] / g.step();
    let detail: Vec<f64> = (0..days.len())
        .flat_map(|ti| {
            let slice = y.slice(ti);
            let blurred = gaussian_blur(slice, g.n_rows(), g.n_cols(), sigma_cells);
            slice
                .iter()
                .zip(blurred)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>()
        })
        .collect();
    let n = detail.len() as f64;
    let d_mean = detail.iter().sum::<f64>() / n;
    let d_std = (detail.iter().map(|v| (v - d_mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if d_std > 0.0 { d_std } else { 1.0 };

    let mut xrng = ChaCha8Rng::seed_from_u64(p.seed ^ XFIELD_SALT);
    let modes: Vec<[f64; 5]> = (0..SMOOTH_MODES)
        .map(|_| {
            let wavelength = uniform(&mut xrng, [1.0, 3.0]);
            let dir = xrng.random::<f64>() * std::f64::consts::TAU;
            let k = std::f64::consts::TAU / wavelength;
            let omega = std::f64::consts::TAU / uniform(&mut xrng, [30.0, 90.0]);
            let phase = xrng.random::<f64>() * std::f64::consts::TAU;
            [
                k * dir.cos(),
                k * dir.sin(),
                omega,
                phase,
                (2.0 / SMOOTH_MODES as f64).sqrt(),
            ]
        })
        .collect();
    let smooth_amp = p.x_smooth * scale;
    let noise_std = p.x_noise * scale;
    let mut values = Vec::with_capacity(detail.len());
    for (ti, &d) in days.iter().enumerate() {
        for i in 0..g.n_rows() {
            for j in 0..g.n_cols() {
                let pt = g.node(i, j);
                let smooth: f64 = modes
                    .iter()
                    .map(|m| m[4] * (m[0] * pt.lat + m[1] * pt.lon + m[2] * d as f64 + m[3]).cos())
                    .sum();
                let z: f64 = StandardNormal.sample(&mut xrng);
                let k = (ti * g.n_rows() + i) * g.n_cols() + j;
                values.push(p.x_coupling * detail[k] + smooth_amp * smooth + noise_std * z);
            }
        }
    }
    let x = FieldStack::new(g, days, values, None)?;
    Ok((y, x))
}

/// Separable Gaussian blur truncated at 3σ, with weights renormalized where
/// the kernel leaves the grid.
pub fn gaussian_blur(values: &[f64], n_rows: usize, n_cols: usize, sigma_cells: f64) -> Vec<f64> {
    if sigma_cells <= 0.0 {
        return values.to_vec();
    }
    let half = (3.0 * sigma_cells).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half)
        .map(|o| (-0.5 * (o as f64 / sigma_cells).powi(2)).exp())
        .collect();
    let pass = |src: &[f64], len: usize, count: usize, at: &dyn Fn(usize, usize) -> usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            for pos in 0..len {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (ki, o) in (-half..=half).enumerate() {
                    let q = pos as isize + o;
                    if q < 0 || q >= len as isize {
                        continue;
                    }
                    acc += kernel[ki] * src[at(line, q as usize)];
                    wsum += kernel[ki];
                }
                out[at(line, pos)] = acc / wsum;
            }
        }
        out
    };
    let along_cols = pass(values, n_cols, n_rows, &|r, c| r * n_cols + c);
    pass(&along_cols, n_rows, n_cols, &|c, r| r * n_cols + c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackParams {
    pub n_tracks_per_day: usize,
    /// Heading range, degrees clockwise from north.
    pub azimuth_range: [f64; 2],
    /// Along-track spacing, degrees.
    pub spacing: f64,
    pub obs_noise: f64,
    pub seed: u64,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            n_tracks_per_day: 4,
            azimuth_range: [-40.0, 40.0],
            spacing: 0.05,
            obs_noise: 0.0,
            seed: 2,
        }
    }
}

impl TrackParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidParameter("track spacing must be > 0".into()));
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return Err(Error::InvalidParameter("obs_noise must be >= 0".into()));
        }
        if !(self.azimuth_range[0] <= self.azimuth_range[1]) {
            return Err(Error::InvalidParameter(
                "azimuth range must be ordered".into(),
            ));
        }
        Ok(())
    }
}

/// Points every `spacing` degrees from `a` towards `b`, `a` included:
/// `floor(L / spacing) + 1` of them for a segment of length `L`.
pub fn track_points(a: Point, b: Point, spacing: f64) -> Vec<Point> {
    let (dl, dn) = (b.lat - a.lat, b.lon - a.lon);
    let len = (dl * dl + dn * dn).sqrt();
    if len == 0.0 {
        return vec![a];
    }
    let count = (len / spacing + 1e-9).floor() as usize + 1;
    (0..count)
        .map(|k| {
            let f = (k as f64 * spacing / len).min(1.0);
            Point::new(a.lat + f * dl, a.lon + f * dn)
        })
        .collect()
}

/// Clips the line through `p` with direction `(d_lat, d_lon)` to the box.
fn clip_line(g: &GridSpec, p: Point, d_lat: f64, d_lon: f64) -> Option<(Point, Point)> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (x, d, a, b) in [
        (p.lat, d_lat, g.lat_min(), g.lat_top()),
        (p.lon, d_lon, g.lon_min(), g.lon_right()),
    ] {
        if d.abs() < 1e-15 {
            if x < a || x > b {
                return None;
            }
            continue;
        }
        let (s1, s2) = ((a - x) / d, (b - x) / d);
        lo = lo.max(s1.min(s2));
        hi = hi.min(s1.max(s2));
    }
    if lo > hi {
        return None;
    }
    let at = |s: f64| {
        Point::new(
            (p.lat + s * d_lat).clamp(g.lat_min(), g.lat_top()),
            (p.lon + s * d_lon).clamp(g.lon_min(), g.lon_right()),
        )
    };
    Some((at(lo), at(hi)))
}

/// Straight tracks with seeded heading, position and sub-day time offset;
/// the last day's tracks are taken at the day itself so every sample lies
/// inside the stack's time span.
pub fn simulate_tracks(y: &FieldStack, p: &TrackParams) -> Result<TrackObservations> {
    p.validate()?;
    let g = *y.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ TRACK_SALT);
    let last = *y.times().last().expect("non-empty stack");
    let mut records = Vec::new();
    for &day in y.times() {
        for _ in 0..p.n_tracks_per_day {
            let az = (p.azimuth_range[0]
                + rng.random::<f64>() * (p.azimuth_range[1] - p.azimuth_range[0]))
                .to_radians();
            let anchor = Point::new(
                g.lat_min() + rng.random::<f64>() * (g.lat_top() - g.lat_min()),
                g.lon_min() + rng.random::<f64>() * (g.lon_right() - g.lon_min()),
            );
            let offset: f64 = rng.random();
            let t = if day == last {
                day as f64
            } else {
                day as f64 + offset
            };
            let Some((a, b)) = clip_line(&g, anchor, az.cos(), az.sin()) else {
                continue;
            };
            for pt in track_points(a, b, p.spacing) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let value = y.sample(t, pt)? + p.obs_noise * noise;
                records.push(Observation {
                    t,
                    lat: pt.lat,
                    lon: pt.lon,
                    value,
                });
            }
        }
    }
    TrackObservations::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TruthParams {
        TruthParams {
            grid: GridSpec::new(36.5, 38.0, 1.5, 3.5, 0.05).unwrap(),
            n_days: 6,
            n_eddies: 8,
            ..Default::default()
        }
    }

    #[test]
    fn empty_truth_is_zero() {
        let p = TruthParams {
            n_eddies: 0,
            background_amp: 0.0,
            x_smooth: 0.0,
            ..small()
        };
        let (y, x) = generate_truth(&p).unwrap();
        assert!(y.values().iter().all(|v| *v == 0.0));
        let (_, std) = x.moments();
        assert!((std - 0.3).abs() < 0.02);
    }

    #[test]
    fn seeded_truth_is_deterministic_and_bounded() {
        let p = small();
        let (y1, x1) = generate_truth(&p).unwrap();
        let (y2, x2) = generate_truth(&p).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(x1, x2);
        let bound = p.background_amp + p.n_eddies as f64 * p.amp_range[1];
        assert!(y1
            .values()
            .iter()
            .all(|v| v.is_finite() && v.abs() <= bound));
        assert!(x1.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn covariate_tracks_detail() {
        let p = TruthParams {
            n_days: 10,
            ..Default::default()
        };
        let (y, x) = generate_truth(&p).unwrap();
        let g = p.grid;
        let mut d = Vec::new();
        for ti in 0..y.n_times() {
            let s = y.slice(ti);
            let b = gaussian_blur(s, g.n_rows(), g.n_cols(), p.radius_range[1] / g.step());
            d.extend(s.iter().zip(b).map(|(a, b)| a - b));
        }
        let xs = x.values();
        let n = d.len() as f64;
        let (md, mx) = (d.iter().sum::<f64>() / n, xs.iter().sum::<f64>() / n);
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (a, b) in d.iter().zip(xs) {
            sxy += (a - md) * (b - mx);
            sxx += (a - md).powi(2);
            syy += (b - mx).powi(2);
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!(r >= 0.5, "correlation {r}");
    }

    #[test]
    fn blur_preserves_constants() {
        let v = vec![2.5; 12 * 7];
        for out in gaussian_blur(&v, 12, 7, 2.3) {
            assert!((out - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn horizontal_track_count() {
        let a = Point::new(37.0, 2.0);
        for (len, spacing) in [(1.0, 0.05), (0.97, 0.05), (3.3, 0.1), (0.0, 0.2)] {
            let pts = track_points(a, Point::new(37.0, 2.0 + len), spacing);
            assert_eq!(pts.len(), (len / spacing + 1e-9).floor() as usize + 1);
            assert!(pts.iter().all(|p| p.lat == 37.0));
        }
    }

    #[test]
    fn tracks_sample_truth_inside_box() {
        let p = small();
        let (y, _) = generate_truth(&p).unwrap();
        let tp = TrackParams::default();
        let obs = simulate_tracks(&y, &tp).unwrap();
        assert!(!obs.is_empty());
        assert_eq!(obs, simulate_tracks(&y, &tp).unwrap());
        for o in obs.iter() {
            assert!(p.grid.contains(o.point()));
            assert!(o.t >= 0.0 && o.t <= 5.0);
            assert!((o.value - y.sample(o.t, o.point()).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_tracks_are_unbiased() {
        let p = small();
        let (y, _) = generate_truth(&p).unwrap();
        let tp = TrackParams {
            obs_noise: 0.05,
            n_tracks_per_day: 20,
            ..Default::default()
        };
        let obs = simulate_tracks(&y, &tp).unwrap();
        let n = obs.len() as f64;
        let bias = obs
            .iter()
            .map(|o| o.value - y.sample(o.t, o.point()).unwrap())
            .sum::<f64>()
            / n;
        assert!(bias.abs() <= 3.0 * 0.05 / n.sqrt());
    }

    #[test]
    fn invalid_params() {
        assert!(generate_truth(&TruthParams {
            radius_range: [0.0, 0.1],
            ..small()
        })
        .is_err());
        assert!(generate_truth(&TruthParams {
            n_days: 0,
            ..small()
        })
        .is_err());
        let (y, _) = generate_truth(&small()).unwrap();
        assert!(simulate_tracks(
            &y,
            &TrackParams {
                spacing: 0.0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
