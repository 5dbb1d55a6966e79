//! Domain types and the bipartite scholar–manuscript graph.
//!
//! Scholars and manuscripts are the two node kinds; an edge joins a scholar
//! to every manuscript whose byline lists them. Attributed writing-style
//! vectors live on edges and are filled in by [`crate::attribution`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scholars with more manuscripts than this are dropped by [`filter_scholars`].
pub const MAX_MANUSCRIPTS_PER_SCHOLAR: usize = 500;

/// Earliest accepted publication year.
pub const MIN_YEAR: u16 = 1900;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("duplicate manuscript id `{0}`")]
    DuplicateManuscript(String),
    #[error("unknown scholar `{0}`")]
    UnknownScholar(String),
    #[error("unknown manuscript `{0}`")]
    UnknownManuscript(String),
    #[error("vector has dimension {actual}, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("empty vector list")]
    Empty,
    #[error("invalid date {0}")]
    InvalidDate(String),
}

/// A point in writing-style space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WsVector(Vec<f64>);

impl WsVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn check_dim(&self, expected: usize) -> Result<(), ModelError> {
        if self.dim() == expected {
            Ok(())
        } else {
            Err(ModelError::DimensionMismatch {
                expected,
                actual: self.dim(),
            })
        }
    }

    pub fn l1_distance(&self, other: &WsVector) -> f64 {
        l1_distance(&self.0, &other.0)
    }

    pub fn squared_l2_distance(&self, other: &WsVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> WsVector {
        WsVector(self.0.iter().map(|v| v * factor).collect())
    }
}

impl From<WsVector> for Vec<f64> {
    fn from(v: WsVector) -> Self {
        v.0
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Unweighted mean of equal-length vectors, summed in input order.
pub fn mean_vector<'a, I>(vectors: I) -> Result<WsVector, ModelError>
where
    I: IntoIterator<Item = &'a WsVector>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(ModelError::Empty)?;
    let mut acc = first.0.clone();
    let mut count = 1usize;
    for v in iter {
        v.check_dim(acc.len())?;
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += x;
        }
        count += 1;
    }
    let n = count as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(WsVector(acc))
}

/// Weighted mean `Σ wᵢvᵢ / Σ wᵢ`, summed in input order.
///
/// A single entry is returned as-is so that one-component manuscripts
/// carry their vector through without rounding.
pub fn weighted_mean<'a, I>(items: I) -> Result<WsVector, ModelError>
where
    I: IntoIterator<Item = (&'a WsVector, f64)>,
{
    let items: Vec<(&WsVector, f64)> = items.into_iter().collect();
    match items.as_slice() {
        [] => Err(ModelError::Empty),
        [(v, _)] => Ok((*v).clone()),
        [(first, _), ..] => {
            let dim = first.dim();
            let mut acc = vec![0.0; dim];
            let mut total = 0.0;
            for (v, w) in &items {
                v.check_dim(dim)?;
                for (a, x) in acc.iter_mut().zip(&v.0) {
                    *a += w * x;
                }
                total += w;
            }
            acc.iter_mut().for_each(|a| *a /= total);
            Ok(WsVector(acc))
        }
    }
}

/// Publication date at month granularity; day is optional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PubDate {
    pub year: u16,
    pub month: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day: Option<u8>,
}

impl PubDate {
    pub fn new(year: u16, month: u8, day: Option<u8>) -> Result<Self, ModelError> {
        let d = Self { year, month, day };
        if !(1..=12).contains(&month) || day.is_some_and(|d| !(1..=31).contains(&d)) {
            return Err(ModelError::InvalidDate(d.to_string()));
        }
        Ok(d)
    }

    /// Year-only dates are placed mid-year.
    pub fn year_only(year: u16) -> Self {
        Self {
            year,
            month: 6,
            day: None,
        }
    }

    /// Whether the year lies in `[MIN_YEAR, current year]`.
    pub fn in_accepted_range(&self) -> bool {
        self.year >= MIN_YEAR && self.year <= current_year()
    }
}

impl fmt::Display for PubDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.day {
            Some(d) => write!(f, "{:04}-{:02}-{:02}", self.year, self.month, d),
            None => write!(f, "{:04}-{:02}", self.year, self.month),
        }
    }
}

pub fn current_year() -> u16 {
    use chrono::Datelike;
    chrono::Utc::now().year() as u16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    FullText,
    PrecomputedVectors,
}

/// A contiguous span of a manuscript with its style vector and length share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub ws: WsVector,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManuscriptRecord {
    pub id: String,
    pub published_at: PubDate,
    pub byline: Vec<String>,
    #[serde(default)]
    pub components: Vec<Component>,
    pub source_kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    /// Raw text awaiting segmentation; dropped once embedded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl ManuscriptRecord {
    pub fn is_solo(&self) -> bool {
        self.byline.len() == 1
    }

    /// Component-weighted mean of the manuscript's vectors.
    pub fn weighted_mean(&self) -> Result<WsVector, ModelError> {
        weighted_mean(self.components.iter().map(|c| (&c.ws, c.weight)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    #[default]
    Unknown,
}

impl Gender {
    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Unknown => "unknown",
        }
    }

    pub fn parse(label: &str) -> Gender {
        match label.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Gender::Male,
            "female" | "f" => Gender::Female,
            _ => Gender::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScholarProfile {
    pub id: String,
    pub field_of_study: Option<String>,
    pub gender: Gender,
    pub manuscript_count: usize,
    pub first_pub_year: u16,
}

impl ScholarProfile {
    pub fn bare(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            field_of_study: None,
            gender: Gender::Unknown,
            manuscript_count: 0,
            first_pub_year: 0,
        }
    }
}

/// Counts reported by [`build_graph`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub manuscripts: usize,
    pub scholars: usize,
    pub edges: usize,
    pub skipped_empty_byline: usize,
    pub skipped_out_of_range_date: usize,
    pub duplicate_byline_entries: usize,
    pub profiles_created: usize,
}

/// Counts reported by [`filter_scholars`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub removed_prolific: usize,
    pub removed_without_solo: usize,
    pub removed_manuscripts: usize,
}

/// Bipartite temporal graph `G = (S, M, E)`.
///
/// Edges are not stored separately: `(s, m)` is an edge exactly when `s`
/// is on `m`'s byline, and `by_scholar` indexes the same relation from the
/// scholar side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuthorManuscriptGraph {
    scholars: BTreeMap<String, ScholarProfile>,
    manuscripts: BTreeMap<String, ManuscriptRecord>,
    by_scholar: BTreeMap<String, BTreeSet<String>>,
    attributed: BTreeMap<(String, String), WsVector>,
}

/// Builds the graph from manuscripts and the profiles known for their authors.
///
/// Byline ids without a profile get a bare one. Records with an empty
/// byline or a date outside the accepted range are skipped and counted.
pub fn build_graph(
    manuscripts: Vec<ManuscriptRecord>,
    profiles: Vec<ScholarProfile>,
) -> Result<(AuthorManuscriptGraph, BuildReport), ModelError> {
    let mut report = BuildReport::default();
    let mut graph = AuthorManuscriptGraph::default();
    let mut known: BTreeMap<String, ScholarProfile> = BTreeMap::new();
    for p in profiles {
        known.entry(p.id.clone()).or_insert(p);
    }

    for mut m in manuscripts {
        if graph.manuscripts.contains_key(&m.id) {
            return Err(ModelError::DuplicateManuscript(m.id));
        }
        let before = m.byline.len();
        let mut seen = BTreeSet::new();
        m.byline.retain(|s| seen.insert(s.clone()));
        report.duplicate_byline_entries += before - m.byline.len();
        if m.byline.is_empty() {
            report.skipped_empty_byline += 1;
            continue;
        }
        if !m.published_at.in_accepted_range() {
            report.skipped_out_of_range_date += 1;
            continue;
        }
        for s in &m.byline {
            if !graph.scholars.contains_key(s) {
                let profile = match known.remove(s) {
                    Some(p) => p,
                    None => {
                        report.profiles_created += 1;
                        ScholarProfile::bare(s.clone())
                    }
                };
                graph.scholars.insert(s.clone(), profile);
            }
            graph
                .by_scholar
                .entry(s.clone())
                .or_default()
                .insert(m.id.clone());
        }
        graph.manuscripts.insert(m.id.clone(), m);
    }
    if report.skipped_empty_byline > 0 {
        warn!(
            "skipped {} manuscripts with an empty byline",
            report.skipped_empty_byline
        );
    }
    graph.refresh_profile_stats();
    report.manuscripts = graph.manuscripts.len();
    report.scholars = graph.scholars.len();
    report.edges = graph.edge_count();
    Ok((graph, report))
}

/// Drops scholars with more than [`MAX_MANUSCRIPTS_PER_SCHOLAR`] manuscripts,
/// then scholars without a single-authored manuscript, then manuscripts left
/// without authors.
///
/// Solo status is judged on bylines after the first removal, which makes
/// the filter idempotent.
pub fn filter_scholars(graph: AuthorManuscriptGraph) -> (AuthorManuscriptGraph, FilterReport) {
    let mut graph = graph;
    let mut report = FilterReport::default();

    let prolific: Vec<String> = graph
        .by_scholar
        .iter()
        .filter(|(_, ms)| ms.len() > MAX_MANUSCRIPTS_PER_SCHOLAR)
        .map(|(s, _)| s.clone())
        .collect();
    report.removed_prolific = prolific.len();
    report.removed_manuscripts += graph.remove_scholars(&prolific);

    let without_solo: Vec<String> = graph
        .scholars
        .keys()
        .filter(|s| {
            !graph
                .by_scholar
                .get(*s)
                .into_iter()
                .flatten()
                .any(|m| graph.manuscripts[m].is_solo())
        })
        .cloned()
        .collect();
    report.removed_without_solo = without_solo.len();
    report.removed_manuscripts += graph.remove_scholars(&without_solo);

    graph.refresh_profile_stats();
    (graph, report)
}

impl AuthorManuscriptGraph {
    pub fn scholars(&self) -> impl Iterator<Item = &ScholarProfile> {
        self.scholars.values()
    }

    pub fn scholar(&self, id: &str) -> Result<&ScholarProfile, ModelError> {
        self.scholars
            .get(id)
            .ok_or_else(|| ModelError::UnknownScholar(id.to_string()))
    }

    pub fn scholar_ids(&self) -> impl Iterator<Item = &str> {
        self.scholars.keys().map(String::as_str)
    }

    pub fn scholar_count(&self) -> usize {
        self.scholars.len()
    }

    pub fn manuscripts(&self) -> impl Iterator<Item = &ManuscriptRecord> {
        self.manuscripts.values()
    }

    pub fn manuscript(&self, id: &str) -> Result<&ManuscriptRecord, ModelError> {
        self.manuscripts
            .get(id)
            .ok_or_else(|| ModelError::UnknownManuscript(id.to_string()))
    }

    pub fn manuscript_count(&self) -> usize {
        self.manuscripts.len()
    }

    /// Every `(scholar, manuscript)` edge, ordered by scholar then manuscript id.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.by_scholar
            .iter()
            .flat_map(|(s, ms)| ms.iter().map(move |m| (s.as_str(), m.as_str())))
    }

    pub fn edge_count(&self) -> usize {
        self.by_scholar.values().map(BTreeSet::len).sum()
    }

    pub fn has_edge(&self, scholar: &str, manuscript: &str) -> bool {
        self.by_scholar
            .get(scholar)
            .is_some_and(|ms| ms.contains(manuscript))
    }

    /// The scholar's manuscripts sorted by date, ties broken by id.
    pub fn timeline(&self, scholar: &str) -> Result<Vec<&str>, ModelError> {
        let ids = self
            .by_scholar
            .get(scholar)
            .ok_or_else(|| ModelError::UnknownScholar(scholar.to_string()))?;
        let mut out: Vec<&ManuscriptRecord> = ids.iter().map(|m| &self.manuscripts[m]).collect();
        out.sort_by(|a, b| (a.published_at, &a.id).cmp(&(b.published_at, &b.id)));
        Ok(out.into_iter().map(|m| m.id.as_str()).collect())
    }

    /// All manuscripts in global chronological order (date, then id).
    pub fn global_timeline(&self) -> Vec<&ManuscriptRecord> {
        let mut out: Vec<&ManuscriptRecord> = self.manuscripts.values().collect();
        out.sort_by(|a, b| (a.published_at, &a.id).cmp(&(b.published_at, &b.id)));
        out
    }

    /// Rounded yearly publication rate, at least 1.
    pub fn kappa(&self, scholar: &str) -> Result<usize, ModelError> {
        let ids = self
            .by_scholar
            .get(scholar)
            .ok_or_else(|| ModelError::UnknownScholar(scholar.to_string()))?;
        let years = ids.iter().map(|m| self.manuscripts[m].published_at.year);
        let (first, last) = years.fold((u16::MAX, u16::MIN), |(lo, hi), y| (lo.min(y), hi.max(y)));
        Ok(kappa_from_counts(ids.len(), first, last))
    }

    pub fn attributed(&self, scholar: &str, manuscript: &str) -> Option<&WsVector> {
        self.attributed
            .get(&(scholar.to_string(), manuscript.to_string()))
    }

    pub fn attributed_entries(&self) -> impl Iterator<Item = (&str, &str, &WsVector)> {
        self.attributed
            .iter()
            .map(|((s, m), v)| (s.as_str(), m.as_str(), v))
    }

    pub fn attributed_count(&self) -> usize {
        self.attributed.len()
    }

    /// Records an attributed vector on an existing edge.
    pub fn set_attributed(
        &mut self,
        scholar: &str,
        manuscript: &str,
        ws: WsVector,
    ) -> Result<(), ModelError> {
        if !self.scholars.contains_key(scholar) {
            return Err(ModelError::UnknownScholar(scholar.to_string()));
        }
        if !self.has_edge(scholar, manuscript) {
            return Err(ModelError::UnknownManuscript(manuscript.to_string()));
        }
        self.attributed
            .insert((scholar.to_string(), manuscript.to_string()), ws);
        Ok(())
    }

    pub fn clear_attributed(&mut self) {
        self.attributed.clear();
    }

    /// Attributed vectors along the scholar's timeline, skipping gaps.
    pub fn attributed_trajectory(&self, scholar: &str) -> Result<Vec<(&str, &WsVector)>, ModelError> {
        Ok(self
            .timeline(scholar)?
            .into_iter()
            .filter_map(|m| self.attributed(scholar, m).map(|v| (m, v)))
            .collect())
    }

    pub fn manuscripts_mut(&mut self) -> impl Iterator<Item = &mut ManuscriptRecord> {
        self.manuscripts.values_mut()
    }

    /// Vector dimension shared by all components, if any component exists.
    pub fn dimension(&self) -> Option<usize> {
        self.manuscripts
            .values()
            .flat_map(|m| m.components.first())
            .map(|c| c.ws.dim())
            .next()
    }

    /// Removes the given scholars and returns how many manuscripts were left
    /// without authors and dropped.
    fn remove_scholars(&mut self, ids: &[String]) -> usize {
        let mut touched = BTreeSet::new();
        for s in ids {
            self.scholars.remove(s);
            if let Some(ms) = self.by_scholar.remove(s) {
                touched.extend(ms);
            }
        }
        let removed: BTreeSet<&String> = ids.iter().collect();
        let mut dropped = 0;
        for m in touched {
            let record = self.manuscripts.get_mut(&m).expect("edge endpoint exists");
            record.byline.retain(|s| !removed.contains(s));
            if record.byline.is_empty() {
                self.manuscripts.remove(&m);
                dropped += 1;
            }
        }
        self.attributed.retain(|(s, _), _| !removed.contains(s));
        dropped
    }

    fn refresh_profile_stats(&mut self) {
        for (id, profile) in self.scholars.iter_mut() {
            let ms = self.by_scholar.get(id);
            profile.manuscript_count = ms.map_or(0, BTreeSet::len);
            profile.first_pub_year = ms
                .into_iter()
                .flatten()
                .map(|m| self.manuscripts[m].published_at.year)
                .min()
                .unwrap_or(0);
        }
    }
}

/// `round(count / span)` with inclusive year span, half rounding up, floor 1.
pub fn kappa_from_counts(count: usize, first_year: u16, last_year: u16) -> usize {
    if count == 0 {
        return 1;
    }
    let span = (last_year.saturating_sub(first_year) as usize) + 1;
    ((2 * count + span) / (2 * span)).max(1)
}
