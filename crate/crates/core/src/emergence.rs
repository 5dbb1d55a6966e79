//! How students' styles depart from their advisors'.
//!
//! A scholar's advisors are the co-authors sharing the most manuscripts with
//! them during their first three calendar years of publishing. The advisor
//! baseline is the mean advisor vector over those shared manuscripts, and the
//! emergence series is the L1 distance from that baseline to each of the
//! student's later attributed vectors.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{mean_vector, AuthorManuscriptGraph, ModelError, WsVector};

/// Why a scholar has no emergence series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum Exclusion {
    #[error("no co-authored manuscript in the first three publishing years")]
    NoCoauthoredInWindow,
    #[error("no advisor vector attributed on the shared manuscripts")]
    NoAdvisorVector,
    #[error("no attributed manuscript after the training period")]
    NothingAfterTraining,
}

#[derive(Debug, Error)]
pub enum EmergenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("projection needs at least {needed} vectors of dimension >= 2, got {got}")]
    TooFewVectors { needed: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvisorLink {
    pub student: String,
    pub advisors: BTreeSet<String>,
    /// Shared training manuscripts in timeline order.
    pub shared: Vec<String>,
    pub rho: usize,
    pub window: (u16, u16),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// One term per (advisor, shared manuscript) attributed vector.
    #[default]
    AdvisorManuscriptPairs,
    /// Mean per advisor first, then the mean of those.
    PerAdvisorMean,
}

pub fn detect_advisors(graph: &AuthorManuscriptGraph, student: &str) -> Result<Result<AdvisorLink, Exclusion>, ModelError> {
    let timeline = graph.timeline(student)?;
    let Some(first) = timeline.first() else {
        return Ok(Err(Exclusion::NoCoauthoredInWindow));
    };
    let first_year = graph.manuscript(first)?.published_at.year;
    let window = (first_year, first_year + 2);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut in_window = Vec::new();
    for mid in &timeline {
        let m = graph.manuscript(mid)?;
        if m.published_at.year > window.1 {
            break;
        }
        in_window.push(m);
        for s in &m.byline {
            if s != student {
                *counts.entry(s).or_default() += 1;
            }
        }
    }
    let Some(&top) = counts.values().max() else {
        return Ok(Err(Exclusion::NoCoauthoredInWindow));
    };
    let advisors: BTreeSet<String> = counts
        .iter()
        .filter(|(_, &c)| c == top)
        .map(|(s, _)| s.to_string())
        .collect();
    let shared: Vec<String> = in_window
        .iter()
        .filter(|m| m.byline.iter().any(|s| advisors.contains(s)))
        .map(|m| m.id.clone())
        .collect();
    Ok(Ok(AdvisorLink {
        student: student.to_string(),
        rho: shared.len(),
        advisors,
        shared,
        window,
    }))
}

pub fn advisor_baseline(
    graph: &AuthorManuscriptGraph,
    link: &AdvisorLink,
    mode: BaselineMode,
) -> Result<Option<WsVector>, ModelError> {
    let mut per_advisor: BTreeMap<&str, Vec<&WsVector>> = BTreeMap::new();
    for m in &link.shared {
        for a in &link.advisors {
            if let Some(v) = graph.attributed(a, m) {
                per_advisor.entry(a).or_default().push(v);
            }
        }
    }
    if per_advisor.is_empty() {
        return Ok(None);
    }
    let v = match mode {
        BaselineMode::AdvisorManuscriptPairs => mean_vector(per_advisor.values().flatten().copied())?,
        BaselineMode::PerAdvisorMean => {
            let means = per_advisor
                .values()
                .map(|vs| mean_vector(vs.iter().copied()))
                .collect::<Result<Vec<_>, _>>()?;
            mean_vector(means.iter())?
        }
    };
    Ok(Some(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmergenceSeries {
    pub student: String,
    pub baseline: WsVector,
    /// Distance at each attributed manuscript after the last shared one.
    pub values: Vec<f64>,
    pub manuscripts: Vec<String>,
}

/// Distance from the baseline to the student's attributed vectors after the
/// training period.
pub fn emergence_series(
    graph: &AuthorManuscriptGraph,
    link: &AdvisorLink,
    baseline: &WsVector,
) -> Result<Option<EmergenceSeries>, ModelError> {
    let timeline = graph.timeline(&link.student)?;
    let last = link.shared.last().expect("rho >= 1");
    let start = timeline
        .iter()
        .position(|m| m == last)
        .expect("shared manuscripts are on the student's timeline")
        + 1;
    let mut values = Vec::new();
    let mut manuscripts = Vec::new();
    for mid in &timeline[start..] {
        if let Some(u) = graph.attributed(&link.student, mid) {
            u.check_dim(baseline.dim())?;
            values.push(baseline.l1_distance(u));
            manuscripts.push(mid.to_string());
        }
    }
    if values.is_empty() {
        return Ok(None);
    }
    Ok(Some(EmergenceSeries {
        student: link.student.clone(),
        baseline: baseline.clone(),
        values,
        manuscripts,
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergenceReport {
    pub scholars: usize,
    pub linked: usize,
    pub excluded_no_coauthored: usize,
    pub excluded_no_advisor_vector: usize,
    pub excluded_nothing_after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmergenceAnalysis {
    pub links: Vec<AdvisorLink>,
    pub series: Vec<EmergenceSeries>,
    pub report: EmergenceReport,
}

/// Links, baselines and series for every scholar, in scholar id order.
pub fn analyze(graph: &AuthorManuscriptGraph, mode: BaselineMode) -> Result<EmergenceAnalysis, ModelError> {
    let ids: Vec<&str> = graph.scholar_ids().collect();
    let results = ids
        .par_iter()
        .map(|s| -> Result<Result<(AdvisorLink, EmergenceSeries), Exclusion>, ModelError> {
            let link = match detect_advisors(graph, s)? {
                Ok(l) => l,
                Err(e) => return Ok(Err(e)),
            };
            let Some(baseline) = advisor_baseline(graph, &link, mode)? else {
                return Ok(Err(Exclusion::NoAdvisorVector));
            };
            Ok(match emergence_series(graph, &link, &baseline)? {
                Some(series) => Ok((link, series)),
                None => Err(Exclusion::NothingAfterTraining),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = EmergenceAnalysis {
        links: Vec::new(),
        series: Vec::new(),
        report: EmergenceReport {
            scholars: ids.len(),
            ..Default::default()
        },
    };
    for r in results {
        match r {
            Ok((link, series)) => {
                out.links.push(link);
                out.series.push(series);
            }
            Err(Exclusion::NoCoauthoredInWindow) => out.report.excluded_no_coauthored += 1,
            Err(Exclusion::NoAdvisorVector) => out.report.excluded_no_advisor_vector += 1,
            Err(Exclusion::NothingAfterTraining) => out.report.excluded_nothing_after += 1,
        }
    }
    out.report.linked = out.series.len();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub lower: f64,
    pub upper: f64,
    pub inflection: f64,
    pub width: f64,
    pub sse: f64,
}

impl LogisticFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.lower + (self.upper - self.lower) * sigmoid((x - self.inflection) / self.width)
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Least-squares fit of `lower + (upper - lower) / (1 + exp(-(x - inflection) / width))`
/// for `x = 0, 1, ...`. Inflection and width come from a coarse-to-fine grid;
/// the levels are solved exactly for each grid point.
pub fn fit_logistic(ys: &[f64]) -> Option<LogisticFit> {
    if ys.len() < 4 || ys.iter().any(|y| !y.is_finite()) {
        return None;
    }
    let n = ys.len() as f64;
    let eval = |c: f64, w: f64| -> Option<LogisticFit> {
        // Linear least squares in (lower, amplitude) for fixed c, w.
        let (mut s1, mut ss, mut sy, mut ssy, mut sss) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, y) in ys.iter().enumerate() {
            let s = sigmoid((i as f64 - c) / w);
            s1 += 1.0;
            ss += s;
            sy += y;
            ssy += s * y;
            sss += s * s;
        }
        let det = s1 * sss - ss * ss;
        if det.abs() < 1e-12 {
            return None;
        }
        let amp = (s1 * ssy - ss * sy) / det;
        let lower = (sy - amp * ss) / s1;
        let fit = LogisticFit {
            lower,
            upper: lower + amp,
            inflection: c,
            width: w,
            sse: 0.0,
        };
        let sse = ys.iter().enumerate().map(|(i, y)| (fit.eval(i as f64) - y).powi(2)).sum();
        Some(LogisticFit { sse, ..fit })
    };
    fn keep_better(best: &mut Option<LogisticFit>, f: Option<LogisticFit>) {
        if let Some(f) = f {
            if best.is_none_or(|b| f.sse < b.sse) {
                *best = Some(f);
            }
        }
    }
    let mut best: Option<LogisticFit> = None;
    for ci in 0..=((n - 1.0) * 10.0) as usize {
        for wi in 0..48 {
            let w = 0.2 * (n / 0.2).powf(wi as f64 / 47.0);
            keep_better(&mut best, eval(ci as f64 * 0.1, w));
        }
    }
    let coarse = best?;
    for ci in -50..=50 {
        for wi in -40..=40 {
            let c = coarse.inflection + ci as f64 * 0.004;
            let w = coarse.width * (1.0 + wi as f64 * 0.005);
            if w > 0.0 {
                keep_better(&mut best, eval(c, w));
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub points: Vec<[f64; 2]>,
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Share of total variance on the two axes.
    pub explained: f64,
    /// Covariance rank below two; the second coordinate is zero.
    pub rank_deficient: bool,
}

impl PcaProjection {
    pub fn project(&self, v: &[f64]) -> [f64; 2] {
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        let dot = |a: &[f64]| centered.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

/// Projection onto the top two eigenvectors of the sample covariance. Each
/// axis is oriented so its first nonzero coordinate is positive.
pub fn pca_project(vectors: &[&WsVector]) -> Result<PcaProjection, EmergenceError> {
    let n = vectors.len();
    let dim = vectors.first().map_or(0, |v| v.dim());
    if n < 3 || dim < 2 {
        return Err(EmergenceError::TooFewVectors { needed: 3, got: n });
    }
    for v in vectors {
        v.check_dim(dim)?;
    }
    let data = DMatrix::from_fn(n, dim, |i, j| vectors[i].as_slice()[j]);
    let mean: Vec<f64> = (0..dim).map(|j| data.column(j).mean()).collect();
    let mut centered = data;
    for (j, m) in mean.iter().enumerate() {
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let tol = eigenvalues[0].max(f64::MIN_POSITIVE) * 1e-12;
    let rank_deficient = eigenvalues[1] <= tol;
    let axis = |k: usize| -> Vec<f64> {
        let mut a: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        if let Some(first) = a.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                a.iter_mut().for_each(|x| *x = -*x);
            }
        }
        a
    };
    let axes = [axis(0), if rank_deficient { vec![0.0; dim] } else { axis(1) }];
    let explained = if total > 0.0 { (eigenvalues[0] + eigenvalues[1]) / total } else { 0.0 };
    let mut out = PcaProjection {
        points: Vec::with_capacity(n),
        mean,
        axes,
        eigenvalues,
        explained,
        rank_deficient,
    };
    out.points = vectors.iter().map(|v| out.project(v.as_slice())).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_graph, Component, ManuscriptRecord, PubDate, SourceKind};

    fn v(x: &[f64]) -> WsVector {
        WsVector::new(x.to_vec()).unwrap()
    }

    fn ms(id: &str, year: u16, byline: &[&str]) -> ManuscriptRecord {
        ManuscriptRecord {
            id: id.into(),
            published_at: PubDate::year_only(year),
            byline: byline.iter().map(|s| s.to_string()).collect(),
            components: vec![Component { ws: v(&[0.0, 0.0]), weight: 1.0, span: None }],
            source_kind: SourceKind::PrecomputedVectors,
            title: None,
            text: None,
        }
    }

    fn graph(records: Vec<ManuscriptRecord>) -> AuthorManuscriptGraph {
        build_graph(records, vec![]).unwrap().0
    }

    #[test]
    fn unique_advisor() {
        let mut r = vec![ms("s0", 2000, &["S"])];
        for i in 0..4 {
            r.push(ms(&format!("x{i}"), 2001, &["S", "X"]));
        }
        r.push(ms("y0", 2002, &["S", "Y"]));
        r.push(ms("y1", 2002, &["Y", "S"]));
        r.push(ms("z0", 2000, &["S", "Z"]));
        r.push(ms("late", 2003, &["S", "Y"]));
        let link = detect_advisors(&graph(r), "S").unwrap().unwrap();
        assert_eq!(link.advisors, BTreeSet::from(["X".to_string()]));
        assert_eq!(link.rho, 4);
        assert_eq!(link.window, (2000, 2002));
    }

    #[test]
    fn tied_advisors() {
        let mut r = vec![ms("s0", 2000, &["S"])];
        for i in 0..4 {
            r.push(ms(&format!("x{i}"), 2001, &["S", "X"]));
            r.push(ms(&format!("y{i}"), 2002, &["Y", "S"]));
        }
        let link = detect_advisors(&graph(r), "S").unwrap().unwrap();
        assert_eq!(link.advisors.len(), 2);
        assert_eq!(link.rho, 8);
    }

    #[test]
    fn solo_start_is_excluded() {
        let r = vec![ms("s0", 2000, &["S"]), ms("s1", 2002, &["S"]), ms("j", 2003, &["S", "X"])];
        assert_eq!(
            detect_advisors(&graph(r), "S").unwrap(),
            Err(Exclusion::NoCoauthoredInWindow)
        );
    }

    fn trained() -> AuthorManuscriptGraph {
        let r = vec![
            ms("s0", 2000, &["S"]),
            ms("a0", 1995, &["A"]),
            ms("j0", 2000, &["S", "A"]),
            ms("j1", 2001, &["S", "A"]),
            ms("p0", 2004, &["S"]),
            ms("p1", 2005, &["S"]),
        ];
        let mut g = graph(r);
        g.set_attributed("A", "j0", v(&[0.0, 0.0])).unwrap();
        g.set_attributed("A", "j1", v(&[2.0, 2.0])).unwrap();
        g.set_attributed("S", "p0", v(&[4.0, 0.0])).unwrap();
        g.set_attributed("S", "p1", v(&[1.0, 1.0])).unwrap();
        g
    }

    #[test]
    fn baseline_and_series() {
        let g = trained();
        let link = detect_advisors(&g, "S").unwrap().unwrap();
        let b = advisor_baseline(&g, &link, BaselineMode::default()).unwrap().unwrap();
        assert_eq!(b, v(&[1.0, 1.0]));
        let s = emergence_series(&g, &link, &b).unwrap().unwrap();
        assert_eq!(s.values, vec![4.0, 0.0]);
        assert_eq!(s.manuscripts, vec!["p0", "p1"]);
    }

    #[test]
    fn baseline_modes_differ_with_uneven_advisors() {
        let mut r = vec![ms("s0", 2000, &["S"])];
        r.push(ms("j0", 2000, &["S", "A", "B"]));
        r.push(ms("j1", 2001, &["S", "A", "B"]));
        let mut g = graph(r);
        g.set_attributed("A", "j0", v(&[0.0, 0.0])).unwrap();
        g.set_attributed("A", "j1", v(&[0.0, 0.0])).unwrap();
        g.set_attributed("B", "j1", v(&[3.0, 3.0])).unwrap();
        let link = detect_advisors(&g, "S").unwrap().unwrap();
        let pairs = advisor_baseline(&g, &link, BaselineMode::AdvisorManuscriptPairs).unwrap().unwrap();
        let per = advisor_baseline(&g, &link, BaselineMode::PerAdvisorMean).unwrap().unwrap();
        assert_eq!(pairs, v(&[1.0, 1.0]));
        assert_eq!(per, v(&[1.5, 1.5]));
    }

    #[test]
    fn analysis_counts_exclusions() {
        let g = trained();
        let a = analyze(&g, BaselineMode::default()).unwrap();
        assert_eq!(a.report.scholars, 2);
        assert_eq!(a.report.linked, 1);
        assert_eq!(a.report.excluded_no_coauthored, 1);
    }

    #[test]
    fn logistic_recovers_planted_curve() {
        let truth = LogisticFit { lower: 0.2, upper: 1.4, inflection: 6.3, width: 1.7, sse: 0.0 };
        let ys: Vec<f64> = (0..20).map(|i| truth.eval(i as f64)).collect();
        let fit = fit_logistic(&ys).unwrap();
        assert!((fit.inflection - 6.3).abs() < 0.02, "{fit:?}");
        assert!((fit.width - 1.7).abs() < 0.02);
        assert!((fit.upper - 1.4).abs() < 1e-3);
    }

    #[test]
    fn pca_axis_aligned() {
        let pts: Vec<WsVector> = vec![v(&[3.0, 0.0]), v(&[-3.0, 0.0]), v(&[0.0, 1.0]), v(&[0.0, -1.0])];
        let refs: Vec<&WsVector> = pts.iter().collect();
        let p = pca_project(&refs).unwrap();
        assert!(!p.rank_deficient);
        for (q, x) in p.points.iter().zip(&pts) {
            assert!((q[0] - x.as_slice()[0]).abs() < 1e-12);
            assert!((q[1] - x.as_slice()[1]).abs() < 1e-12);
        }
        assert!((p.explained - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_collinear_is_flagged() {
        let pts: Vec<WsVector> = (0..5).map(|i| v(&[i as f64, 2.0 * i as f64, 0.0])).collect();
        let refs: Vec<&WsVector> = pts.iter().collect();
        let p = pca_project(&refs).unwrap();
        assert!(p.rank_deficient);
        assert!(p.points.iter().all(|q| q[1] == 0.0));
        assert!(p.axes[0][0] > 0.0);
    }

    #[test]
    fn pca_needs_three_points() {
        let pts = [v(&[0.0, 1.0]), v(&[1.0, 0.0])];
        assert!(pca_project(&[&pts[0], &pts[1]]).is_err());
    }
}
