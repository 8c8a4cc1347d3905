//! Optimal interpolation (simple kriging around the observation mean) with
//! an isotropic Gaussian covariance in a scaled space-time metric.

use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldStack, GridSpec, Observation, Point, TrackObservations};
use crate::linalg::spd_solve;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OiParams {
    /// Signal variance.
    pub sigma2: f64,
    /// Spatial decorrelation length, degrees.
    pub l_s: f64,
    /// Temporal decorrelation scale, days.
    pub l_t: f64,
    /// Observation noise variance.
    pub noise2: f64,
    /// Observations used per analysis point.
    pub max_obs: usize,
}

impl OiParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma2 > 0.0
            && self.l_s > 0.0
            && self.l_t > 0.0
            && self.noise2 >= 0.0
            && self.max_obs >= 1
            && [self.sigma2, self.l_s, self.l_t, self.noise2]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid OI parameters {self:?}"
            )))
        }
    }

    /// Squared scaled distance between two space-time points.
    pub fn scaled_dist2(&self, t_a: f64, a: Point, t_b: f64, b: Point) -> f64 {
        let ds2 = (a.lat - b.lat).powi(2) + (a.lon - b.lon).powi(2);
        ds2 / (self.l_s * self.l_s) + ((t_a - t_b) / self.l_t).powi(2)
    }

    pub fn covariance(&self, d2: f64) -> f64 {
        self.sigma2 * (-d2).exp()
    }
}

/// Observations ordered by time, for nearest-neighbour selection.
struct TimeOrdered<'a> {
    records: &'a [Observation],
    order: Vec<usize>,
    times: Vec<f64>,
}

impl<'a> TimeOrdered<'a> {
    fn new(obs: &'a TrackObservations) -> Self {
        let records = obs.records();
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| records[a].t.total_cmp(&records[b].t).then(a.cmp(&b)));
        let times = order.iter().map(|&i| records[i].t).collect();
        Self {
            records,
            order,
            times,
        }
    }

    /// Indices of the `k` nearest observations to `(t0, p0)` under the
    /// scaled metric, ties broken by record index, returned in record order.
    fn nearest(&self, t0: f64, p0: Point, k: usize, params: &OiParams) -> Vec<usize> {
        let n = self.order.len();
        let mut heap: BinaryHeap<(u64, usize)> = BinaryHeap::with_capacity(k + 1);
        let start = self.times.partition_point(|&t| t < t0);
        let (mut lo, mut hi) = (start, start);
        loop {
            let dt_lo = (lo > 0).then(|| t0 - self.times[lo - 1]);
            let dt_hi = (hi < n).then(|| self.times[hi] - t0);
            let pos = match (dt_lo, dt_hi) {
                (None, None) => break,
                (Some(a), Some(b)) if a <= b => {
                    lo -= 1;
                    lo
                }
                (Some(_), None) => {
                    lo -= 1;
                    lo
                }
                _ => {
                    hi += 1;
                    hi - 1
                }
            };
            let dt2 = ((self.times[pos] - t0) / params.l_t).powi(2);
            // candidates come in order of increasing time gap, so once the
            // gap alone exceeds the worst kept distance nothing closer remains
            if heap.len() == k && dt2 > f64::from_bits(heap.peek().unwrap().0) {
                break;
            }
            let idx = self.order[pos];
            let r = &self.records[idx];
            let d2 = params.scaled_dist2(r.t, r.point(), t0, p0);
            let key = (d2.to_bits(), idx);
            if heap.len() < k {
                heap.push(key);
            } else if key < *heap.peek().unwrap() {
                heap.pop();
                heap.push(key);
            }
        }
        let mut out: Vec<usize> = heap.into_iter().map(|(_, i)| i).collect();
        out.sort_unstable();
        out
    }
}

/// Kriging estimate at one analysis point from a given observation subset.
pub fn krige_point(
    records: &[Observation],
    selected: &[usize],
    t0: f64,
    p0: Point,
    mean: f64,
    params: &OiParams,
) -> Result<f64> {
    let n = selected.len();
    let mut c = DMatrix::zeros(n, n);
    let mut c0 = DVector::zeros(n);
    for (a, &ia) in selected.iter().enumerate() {
        let ra = &records[ia];
        c0[a] = params.covariance(params.scaled_dist2(ra.t, ra.point(), t0, p0));
        c[(a, a)] = params.sigma2 + params.noise2;
        for (b, &ib) in selected.iter().enumerate().take(a) {
            let rb = &records[ib];
            let v = params.covariance(params.scaled_dist2(ra.t, ra.point(), rb.t, rb.point()));
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    let w = spd_solve(&c, &c0).ok_or_else(|| {
        Error::SingularSystem(format!(
            "kriging system of {n} observations at t={t0}, ({}, {})",
            p0.lat, p0.lon
        ))
    })?;
    let anomaly: f64 = selected
        .iter()
        .enumerate()
        .map(|(a, &i)| w[a] * (records[i].value - mean))
        .sum();
    Ok(mean + anomaly)
}

/// Optimal-interpolation analysis of `obs` on every node of `grid` at each
/// of `times`.
pub fn oi_reconstruct(
    obs: &TrackObservations,
    grid: &GridSpec,
    times: &[i64],
    params: &OiParams,
) -> Result<FieldStack> {
    params.validate()?;
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let index = TimeOrdered::new(obs);
    let mean = obs.mean_value();
    let per_slice = grid.len();
    let k = params.max_obs.min(obs.len());
    let values: Vec<f64> = (0..times.len() * per_slice)
        .into_par_iter()
        .map(|flat| {
            let t0 = times[flat / per_slice] as f64;
            let cell = flat % per_slice;
            let p0 = grid.node(cell / grid.n_cols(), cell % grid.n_cols());
            let selected = index.nearest(t0, p0, k, params);
            krige_point(obs.records(), &selected, t0, p0, mean, params)
        })
        .collect::<Result<_>>()?;
    FieldStack::new(*grid, times.to_vec(), values, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(noise2: f64, max_obs: usize) -> OiParams {
        OiParams {
            sigma2: 2.0,
            l_s: 0.7,
            l_t: 5.0,
            noise2,
            max_obs,
        }
    }

    fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Observation> {
        (0..n)
            .map(|_| Observation {
                t: rng.random_range(0.0..10.0),
                lat: rng.random_range(0.0..2.0),
                lon: rng.random_range(0.0..2.0),
                value: rng.random_range(-1.0..1.0),
            })
            .collect()
    }

    #[test]
    fn single_observation_is_interpolated() {
        let grid = GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.5).unwrap();
        let obs = TrackObservations::new(vec![Observation {
            t: 3.0,
            lat: 0.5,
            lon: 0.5,
            value: 1.7,
        }])
        .unwrap();
        let f = oi_reconstruct(&obs, &grid, &[3], &params(0.0, 10)).unwrap();
        assert!((f.get(0, 1, 1) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_returns_common_value() {
        let grid = GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.5).unwrap();
        let obs = TrackObservations::new(vec![
            Observation {
                t: 2.0,
                lat: 0.5,
                lon: 0.2,
                value: 0.9,
            },
            Observation {
                t: 2.0,
                lat: 0.5,
                lon: 0.8,
                value: 0.9,
            },
        ])
        .unwrap();
        let f = oi_reconstruct(&obs, &grid, &[2], &params(0.0, 10)).unwrap();
        assert!((f.get(0, 1, 1) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn nearest_selection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let records = random_obs(&mut rng, 300);
        let obs = TrackObservations::new(records.clone()).unwrap();
        let index = TimeOrdered::new(&obs);
        let p = params(0.1, 25);
        for _ in 0..30 {
            let t0 = rng.random_range(-2.0..12.0);
            let p0 = Point::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
            let got = index.nearest(t0, p0, 25, &p);
            let mut all: Vec<(f64, usize)> = records
                .iter()
                .enumerate()
                .map(|(i, r)| (p.scaled_dist2(r.t, r.point(), t0, p0), i))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = all[..25].iter().map(|x| x.1).collect();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn capped_solve_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let records = random_obs(&mut rng, 20);
        let obs = TrackObservations::new(records.clone()).unwrap();
        let p = params(0.05, 20);
        let grid = GridSpec::new(0.5, 1.0, 0.5, 1.0, 0.5).unwrap();
        let f = oi_reconstruct(&obs, &grid, &[4], &p).unwrap();

        // dense oracle via LU on the full system
        let mean = records.iter().map(|r| r.value).sum::<f64>() / 20.0;
        let p0 = grid.node(0, 0);
        let mut c = DMatrix::zeros(20, 20);
        let mut c0 = DVector::zeros(20);
        for a in 0..20 {
            let ra = records[a];
            c0[a] = 2.0
                * (-(((ra.lat - p0.lat).powi(2) + (ra.lon - p0.lon).powi(2)) / 0.49
                    + ((ra.t - 4.0) / 5.0).powi(2)))
                .exp();
            for b in 0..20 {
                let rb = records[b];
                let d2 = ((ra.lat - rb.lat).powi(2) + (ra.lon - rb.lon).powi(2)) / 0.49
                    + ((ra.t - rb.t) / 5.0).powi(2);
                c[(a, b)] = 2.0 * (-d2).exp() + if a == b { 0.05 } else { 0.0 };
            }
        }
        let w = c.lu().solve(&c0).unwrap();
        let want = mean
            + (0..20)
                .map(|a| w[a] * (records[a].value - mean))
                .sum::<f64>();
        assert!((f.get(0, 0, 0) - want).abs() < 1e-10);
    }

    #[test]
    fn duplicate_without_noise_is_singular() {
        let o = Observation {
            t: 1.0,
            lat: 0.5,
            lon: 0.5,
            value: 1.0,
        };
        let obs = TrackObservations::new(vec![o, o]).unwrap();
        let grid = GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.5).unwrap();
        assert!(matches!(
            oi_reconstruct(&obs, &grid, &[1], &params(0.0, 10)),
            Err(Error::SingularSystem(_))
        ));
    }

    #[test]
    fn duplicate_with_small_noise_changes_little() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let records = random_obs(&mut rng, 40);
        let grid = GridSpec::new(0.0, 2.0, 0.0, 2.0, 0.25).unwrap();
        let p = OiParams {
            noise2: 1e-8 * 2.0,
            ..params(0.0, 100)
        };
        let obs = TrackObservations::new(records.clone()).unwrap();
        let mut dup = records.clone();
        dup.push(records[7]);
        let dup_obs = TrackObservations::new(dup).unwrap();
        // the background mean is held fixed so only the weights are compared
        let mean = obs.mean_value();
        let (a, b) = (TimeOrdered::new(&obs), TimeOrdered::new(&dup_obs));
        let mut worst: f64 = 0.0;
        for i in 0..grid.n_rows() {
            for j in 0..grid.n_cols() {
                let p0 = grid.node(i, j);
                let va = krige_point(
                    obs.records(),
                    &a.nearest(5.0, p0, 100, &p),
                    5.0,
                    p0,
                    mean,
                    &p,
                )
                .unwrap();
                let vb = krige_point(
                    dup_obs.records(),
                    &b.nearest(5.0, p0, 100, &p),
                    5.0,
                    p0,
                    mean,
                    &p,
                )
                .unwrap();
                worst = worst.max((va - vb).abs());
            }
        }
        assert!(worst <= 1e-6 * 2f64.sqrt(), "max change {worst}");
    }

    #[test]
    fn estimates_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let grid = GridSpec::new(0.0, 2.0, 0.0, 2.0, 0.25).unwrap();
        for _ in 0..10 {
            // values drawn from a smooth field, as the covariance model assumes
            let (fa, fb) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let records: Vec<Observation> = random_obs(&mut rng, 60)
                .into_iter()
                .map(|r| Observation {
                    value: (fa * r.lat).sin() * (fb * r.lon).cos() + 0.05 * r.t,
                    ..r
                })
                .collect();
            let obs = TrackObservations::new(records).unwrap();
            let mean = obs.mean_value();
            let spread = obs
                .iter()
                .map(|r| (r.value - mean).abs())
                .fold(0.0, f64::max);
            let f = oi_reconstruct(&obs, &grid, &[0, 5, 9], &params(0.02, 30)).unwrap();
            for v in f.values() {
                assert!(v.is_finite());
                assert!(
                    (v - mean).abs() <= 1.5 * spread,
                    "{v} vs mean {mean} spread {spread}"
                );
            }
        }
    }

    #[test]
    fn empty_observations_error() {
        let grid = GridSpec::new(0.0, 1.0, 0.0, 1.0, 0.5).unwrap();
        assert!(matches!(
            oi_reconstruct(&TrackObservations::default(), &grid, &[0], &params(0.1, 5)),
            Err(Error::EmptyObservations)
        ));
    }
}
