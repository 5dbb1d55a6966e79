//! Style change over a career: the windowed change function, convergence
//! points, population curves and trajectory clustering.
//!
//! The change at a manuscript is the L1 distance between the mean of the
//! preceding window of attributed vectors and the vector at that manuscript.
//! A scholar converges at the earliest change-series index whose tail mean
//! stays at or below a threshold.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{AuthorManuscriptGraph, ModelError, WsVector};
use crate::stats;

/// `‖mean(window) − u‖₁`.
pub fn change(window: &[&WsVector], u: &WsVector) -> Result<f64, ModelError> {
    let first = window.first().ok_or(ModelError::Empty)?;
    let n = first.dim();
    u.check_dim(n)?;
    // Summing offsets from the first vector keeps a window of identical
    // vectors exactly at its own mean.
    let base = first.as_slice();
    let mut acc = vec![0.0; n];
    for v in &window[1..] {
        v.check_dim(n)?;
        for ((a, x), b) in acc.iter_mut().zip(v.as_slice()).zip(base) {
            *a += x - b;
        }
    }
    let k = window.len() as f64;
    Ok(acc
        .iter()
        .zip(base)
        .zip(u.as_slice())
        .map(|((s, b), x)| (b + s / k - x).abs())
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeSeries {
    pub scholar: String,
    /// Entry `i` is the change at trajectory index `i + kappa_used`.
    pub values: Vec<f64>,
    pub kappa_used: usize,
}

/// Change series over a scholar's attributed trajectory. The window is the
/// scholar's yearly rate unless overridden.
pub fn change_series(
    graph: &AuthorManuscriptGraph,
    scholar: &str,
    window: Option<usize>,
) -> Result<ChangeSeries, ModelError> {
    let window = match window {
        Some(w) => w.max(1),
        None => graph.kappa(scholar)?,
    };
    let traj: Vec<&WsVector> = graph
        .attributed_trajectory(scholar)?
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let mut values = Vec::with_capacity(traj.len().saturating_sub(window));
    for i in window..traj.len() {
        values.push(change(&traj[i - window..i], traj[i])?);
    }
    Ok(ChangeSeries {
        scholar: scholar.to_string(),
        values,
        kappa_used: window,
    })
}

/// Change series for every scholar, in scholar id order.
pub fn all_change_series(
    graph: &AuthorManuscriptGraph,
    window: Option<usize>,
) -> Result<Vec<ChangeSeries>, ModelError> {
    let ids: Vec<&str> = graph.scholar_ids().collect();
    ids.par_iter().map(|s| change_series(graph, s, window)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceResult {
    pub scholar: String,
    pub omega: f64,
    /// Index into the change series.
    pub alpha: Option<usize>,
    pub converged: bool,
}

/// Earliest index whose inclusive tail mean is at most `omega`.
pub fn convergence_index(values: &[f64], omega: f64) -> Option<usize> {
    let mut tail = 0.0;
    let mut best = None;
    for (j, v) in values.iter().enumerate().rev() {
        tail += v;
        if tail / (values.len() - j) as f64 <= omega {
            best = Some(j);
        }
    }
    best
}

pub fn convergence_point(series: &ChangeSeries, omega: f64) -> ConvergenceResult {
    let alpha = convergence_index(&series.values, omega);
    ConvergenceResult {
        scholar: series.scholar.clone(),
        omega,
        alpha,
        converged: alpha.is_some(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub index: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-index mean, population standard deviation and survivor count over
/// every series long enough to reach the index.
pub fn population_curve(series: &[&[f64]], max_index: Option<usize>) -> Vec<CurvePoint> {
    let longest = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let end = max_index.map_or(longest, |m| longest.min(m + 1));
    let mut column = Vec::with_capacity(series.len());
    (0..end)
        .map(|i| {
            column.clear();
            column.extend(series.iter().filter_map(|s| s.get(i).copied()));
            CurvePoint {
                index: i,
                mean: stats::mean(&column),
                std: stats::population_std(&column),
                count: column.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    pub alpha_mean: f64,
    pub alpha_std: f64,
    pub converged_pct: f64,
    pub converged: usize,
    pub total: usize,
}

/// Convergence statistics per threshold, over non-empty series, rows in
/// input order.
pub fn convergence_sweep(series: &[ChangeSeries], omegas: &[f64]) -> Vec<SweepRow> {
    let usable: Vec<&ChangeSeries> = series.iter().filter(|s| !s.values.is_empty()).collect();
    omegas
        .iter()
        .map(|&omega| {
            let alphas: Vec<f64> = usable
                .iter()
                .filter_map(|s| convergence_index(&s.values, omega))
                .map(|a| a as f64)
                .collect();
            SweepRow {
                omega,
                alpha_mean: stats::mean(&alphas),
                alpha_std: if alphas.is_empty() { f64::NAN } else { stats::population_std(&alphas) },
                converged_pct: if usable.is_empty() {
                    f64::NAN
                } else {
                    100.0 * alphas.len() as f64 / usable.len() as f64
                },
                converged: alphas.len(),
                total: usable.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub k: usize,
    pub inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd iterations from the given centroids. Inertia never rises above
/// that of the initial centroids.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> KMeansFit {
    let dim = points[0].len();
    let k = centroids.len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let (c, _) = nearest_centroid(p, &centroids);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
            if n > 0 {
                *c = s.into_iter().map(|x| x / n as f64).collect();
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    KMeansFit {
        centroids,
        labels,
        inertia,
    }
}

/// Distance-weighted seeding.
fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Best of `restarts` seeded k-means runs, plus the optional warm start.
pub fn kmeans(points: &[Vec<f64>], k: usize, config: &KMeansConfig, warm: Option<Vec<Vec<f64>>>) -> KMeansFit {
    assert!(k >= 1 && k <= points.len());
    let mut fits: Vec<KMeansFit> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(((k as u64) << 20) | r as u64);
            lloyd(points, kmeans_pp(points, k, &mut rng), config.max_iter)
        })
        .collect();
    if let Some(w) = warm {
        fits.push(lloyd(points, w, config.max_iter));
    }
    fits.into_iter()
        .reduce(|best, f| if f.inertia < best.inertia { f } else { best })
        .expect("at least one run")
}

/// Series truncated to `t` and sorted, so results do not depend on input order.
pub fn trajectory_points(series: &[&[f64]], t: usize) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = series
        .iter()
        .filter(|s| s.len() >= t)
        .map(|s| s[..t].to_vec())
        .collect();
    pts.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    pts
}

/// Inertia per `k` for k-means on the series truncated to length `t`.
/// Each `k` also tries the previous solution plus its worst-fit point as a
/// start, so inertia never increases with `k`.
pub fn ts_kmeans_elbow(
    series: &[&[f64]],
    ks: RangeInclusive<usize>,
    t: usize,
    config: &KMeansConfig,
) -> Vec<ElbowPoint> {
    let points = trajectory_points(series, t);
    let mut out = Vec::new();
    let mut prev: Option<KMeansFit> = None;
    for k in ks {
        if k == 0 {
            continue;
        }
        if points.is_empty() || t == 0 || k > points.len() {
            log::warn!("skipping k = {k}: only {} eligible series", points.len());
            continue;
        }
        let warm = prev.as_ref().filter(|p| p.centroids.len() + 1 == k).map(|p| {
            let far = points
                .iter()
                .zip(&p.labels)
                .map(|(x, &l)| sq_dist(x, &p.centroids[l]))
                .enumerate()
                .fold((0, -1.0), |b, (i, d)| if d > b.1 { (i, d) } else { b })
                .0;
            let mut c = p.centroids.clone();
            c.push(points[far].clone());
            c
        });
        let fit = kmeans(&points, k, config, warm);
        out.push(ElbowPoint { k, inertia: fit.inertia });
        prev = Some(fit);
    }
    out
}

/// `(I(k-1) - I(k)) / (I(k) - I(k+1))` for each interior `k` of a
/// contiguous elbow table.
pub fn drop_ratios(elbow: &[ElbowPoint]) -> Vec<(usize, f64)> {
    elbow
        .windows(3)
        .filter(|w| w[1].k == w[0].k + 1 && w[2].k == w[1].k + 1)
        .map(|w| {
            let before = w[0].inertia - w[1].inertia;
            let after = w[1].inertia - w[2].inertia;
            let ratio = if after > 0.0 {
                before / after
            } else if before > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            (w[1].k, ratio)
        })
        .collect()
}
