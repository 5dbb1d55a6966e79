//! What collaborating does to a scholar's style.
//!
//! Every co-authored manuscript yields one event per byline scholar with
//! enough history. An event carries the change magnitude at that
//! manuscript, a fixed-width feature vector describing the byline, the
//! direction of movement relative to the co-authors' pre-manuscript centroid,
//! and the factor levels used for grouping.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::change;
use crate::gbt::{self, GbtError, GbtParams, GroupImportance, RegressionFit};
use crate::model::{AuthorManuscriptGraph, Gender, ModelError, WsVector};
use crate::stats::{self, significance_stars, StatsError, TukeyComparison};

pub const SENTINEL: f64 = -1.0;

#[derive(Debug, Error)]
pub enum CollabError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Regression(#[from] GbtError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeType {
    TowardCenter,
    PositiveOneSide,
    NegativeOneSide,
    NoClearChange,
}

impl ChangeType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChangeType::TowardCenter => "toward_center",
            ChangeType::PositiveOneSide => "positive_one_side",
            ChangeType::NegativeOneSide => "negative_one_side",
            ChangeType::NoClearChange => "no_clear_change",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceMode {
    /// Tolerance in embedding units.
    #[default]
    Absolute,
    /// Tolerance as a fraction of the largest pre-manuscript centroid distance.
    Relative,
}

/// Direction of movement relative to the centroid of the pre-manuscript
/// vectors. `focal` indexes into `pre` and `post`.
pub fn classify_change_type(
    pre: &[&WsVector],
    post: &[&WsVector],
    focal: usize,
    epsilon: f64,
    mode: ToleranceMode,
) -> Result<ChangeType, ModelError> {
    if pre.is_empty() || pre.len() != post.len() || focal >= pre.len() {
        return Err(ModelError::Empty);
    }
    let dim = pre[0].dim();
    for v in pre.iter().chain(post) {
        v.check_dim(dim)?;
    }
    let centroid = crate::model::mean_vector(pre.iter().copied())?;
    let d_pre: Vec<f64> = pre.iter().map(|v| v.l1_distance(&centroid)).collect();
    let d_post: Vec<f64> = post.iter().map(|v| v.l1_distance(&centroid)).collect();
    let eps = match mode {
        ToleranceMode::Absolute => epsilon,
        ToleranceMode::Relative => epsilon * d_pre.iter().copied().fold(0.0, f64::max),
    };
    let closer = |i: usize| d_post[i] < d_pre[i] - eps;
    Ok(if (0..pre.len()).all(closer) {
        ChangeType::TowardCenter
    } else if closer(focal) {
        ChangeType::PositiveOneSide
    } else if d_post[focal] > d_pre[focal] + eps {
        ChangeType::NegativeOneSide
    } else {
        ChangeType::NoClearChange
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenderCategory {
    AllMale,
    MaleMix,
    FemaleMix,
    AllFemale,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldCategory {
    Identical,
    Different,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CoauthorBucket {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    #[serde(rename = "4plus")]
    FourPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PriorPubsBucket {
    #[serde(rename = "1to3")]
    OneToThree,
    #[serde(rename = "4to13")]
    FourToThirteen,
    #[serde(rename = "14plus")]
    FourteenPlus,
}

impl fmt::Display for GenderCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenderCategory::AllMale => "all_male",
            GenderCategory::MaleMix => "male_mix",
            GenderCategory::FemaleMix => "female_mix",
            GenderCategory::AllFemale => "all_female",
            GenderCategory::Excluded => "excluded",
        })
    }
}

impl fmt::Display for FieldCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldCategory::Identical => "identical",
            FieldCategory::Different => "different",
        })
    }
}

impl fmt::Display for CoauthorBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoauthorBucket::Two => "2",
            CoauthorBucket::Three => "3",
            CoauthorBucket::FourPlus => "4plus",
        })
    }
}

impl fmt::Display for PriorPubsBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorPubsBucket::OneToThree => "1to3",
            PriorPubsBucket::FourToThirteen => "4to13",
            PriorPubsBucket::FourteenPlus => "14plus",
        })
    }
}

impl CoauthorBucket {
    pub fn from_byline_size(n: usize) -> Self {
        match n {
            0..=2 => CoauthorBucket::Two,
            3 => CoauthorBucket::Three,
            _ => CoauthorBucket::FourPlus,
        }
    }
}

impl PriorPubsBucket {
    pub fn from_count(n: usize) -> Self {
        match n {
            0..=3 => PriorPubsBucket::OneToThree,
            4..=13 => PriorPubsBucket::FourToThirteen,
            _ => PriorPubsBucket::FourteenPlus,
        }
    }
}

/// Gender category from the focal scholar's point of view.
pub fn gender_category(focal: Gender, others: &[Gender]) -> GenderCategory {
    if focal == Gender::Unknown || others.contains(&Gender::Unknown) {
        return GenderCategory::Excluded;
    }
    if others.iter().all(|g| *g == focal) {
        return match focal {
            Gender::Male => GenderCategory::AllMale,
            _ => GenderCategory::AllFemale,
        };
    }
    match focal {
        Gender::Male => GenderCategory::MaleMix,
        _ => GenderCategory::FemaleMix,
    }
}

/// Identical only when every field is known and equal.
pub fn field_category(fields: &[Option<&str>]) -> FieldCategory {
    let known = |f: &Option<&str>| f.is_some_and(|s| !s.is_empty() && s != "unknown");
    if fields.iter().all(known) && fields.windows(2).all(|w| w[0] == w[1]) {
        FieldCategory::Identical
    } else {
        FieldCategory::Different
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorAssignment {
    pub gender: GenderCategory,
    pub field: FieldCategory,
    pub coauthors: CoauthorBucket,
    pub prior_pubs: PriorPubsBucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub focal: String,
    pub manuscript: String,
    pub features: Vec<f64>,
    pub y: f64,
    /// Absent when some co-author lacks a vector before or at the manuscript.
    pub change_type: Option<ChangeType>,
    /// Focal scholar's centroid approach `d_pre - d_post`.
    pub signed_approach: Option<f64>,
    pub factors: FactorAssignment,
    pub prior_pubs: usize,
    pub byline_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventConfig {
    /// Change window; the scholar's yearly rate when absent.
    pub window: Option<usize>,
    pub epsilon: f64,
    pub tolerance_mode: ToleranceMode,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            window: None,
            epsilon: 1e-6,
            tolerance_mode: ToleranceMode::Absolute,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventReport {
    pub coauthored_pairs: usize,
    pub events: usize,
    pub skipped_short_history: usize,
    pub skipped_no_vector: usize,
    pub untyped: usize,
    pub max_byline: usize,
    pub feature_width: usize,
}

/// Feature columns per factor group for a given maximum byline.
pub fn factor_columns(max_byline: usize) -> Vec<(String, Vec<usize>)> {
    let per = |offset: usize| (0..max_byline).map(|j| 3 * j + offset).collect::<Vec<_>>();
    vec![
        ("gender".to_string(), per(1)),
        ("field".to_string(), per(0)),
        ("coauthors".to_string(), vec![3 * max_byline]),
        ("prior_pubs".to_string(), per(2)),
    ]
}

struct ScholarIndex<'g> {
    position: HashMap<&'g str, usize>,
    /// (timeline position, vector) for attributed manuscripts.
    attributed: Vec<(usize, &'g WsVector)>,
}

impl<'g> ScholarIndex<'g> {
    fn before(&self, pos: usize) -> &[(usize, &'g WsVector)] {
        let end = self.attributed.partition_point(|(p, _)| *p < pos);
        &self.attributed[..end]
    }

    fn at(&self, pos: usize) -> Option<&'g WsVector> {
        self.attributed
            .binary_search_by_key(&pos, |(p, _)| *p)
            .ok()
            .map(|i| self.attributed[i].1)
    }
}

/// One event per (scholar, co-authored manuscript) with a full window of
/// earlier attributed vectors and a vector at the manuscript.
pub fn build_change_events(
    graph: &AuthorManuscriptGraph,
    config: &EventConfig,
) -> Result<(Vec<ChangeEvent>, EventReport), CollabError> {
    let max_byline = graph.manuscripts().map(|m| m.byline.len()).max().unwrap_or(0);
    let fields: BTreeSet<&str> = graph
        .scholars()
        .map(|p| p.field_of_study.as_deref().unwrap_or("unknown"))
        .collect();
    let field_id: HashMap<&str, f64> = fields.iter().enumerate().map(|(i, f)| (*f, i as f64)).collect();
    let gender_id = |g: Gender| match g {
        Gender::Male => 0.0,
        Gender::Female => 1.0,
        Gender::Unknown => 2.0,
    };

    let ids: Vec<&str> = graph.scholar_ids().collect();
    let index: HashMap<&str, ScholarIndex> = ids
        .par_iter()
        .map(|&s| -> Result<_, ModelError> {
            let timeline = graph.timeline(s)?;
            let attributed = timeline
                .iter()
                .enumerate()
                .filter_map(|(i, m)| graph.attributed(s, m).map(|v| (i, v)))
                .collect();
            let position = timeline.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
            Ok((s, ScholarIndex { position, attributed }))
        })
        .collect::<Result<_, _>>()?;

    #[derive(Default)]
    struct Tally {
        pairs: usize,
        short: usize,
        no_vector: usize,
    }

    let per_scholar = ids
        .par_iter()
        .map(|&s| -> Result<(Vec<ChangeEvent>, Tally), CollabError> {
            let window = match config.window {
                Some(w) => w.max(1),
                None => graph.kappa(s)?,
            };
            let me = &index[s];
            let profile = graph.scholar(s)?;
            let mut events = Vec::new();
            let mut tally = Tally::default();
            for mid in graph.timeline(s)? {
                let m = graph.manuscript(mid)?;
                if m.is_solo() {
                    continue;
                }
                tally.pairs += 1;
                let pos = me.position[mid];
                let prior = me.before(pos);
                if prior.len() < window {
                    tally.short += 1;
                    continue;
                }
                let Some(current) = me.at(pos) else {
                    tally.no_vector += 1;
                    continue;
                };
                let recent: Vec<&WsVector> = prior[prior.len() - window..].iter().map(|(_, v)| *v).collect();
                let y = change(&recent, current)?;

                let mut features = vec![SENTINEL; 3 * max_byline + 1];
                let mut genders = Vec::with_capacity(m.byline.len());
                let mut member_fields = Vec::with_capacity(m.byline.len());
                let mut pre = Vec::with_capacity(m.byline.len());
                let mut post = Vec::with_capacity(m.byline.len());
                let mut focal_idx = 0;
                for (j, c) in m.byline.iter().enumerate() {
                    let p = graph.scholar(c)?;
                    let ci = &index[c.as_str()];
                    let cpos = ci.position[mid];
                    let field = p.field_of_study.as_deref().unwrap_or("unknown");
                    features[3 * j] = field_id[field];
                    features[3 * j + 1] = gender_id(p.gender);
                    features[3 * j + 2] = cpos as f64;
                    if c == s {
                        focal_idx = j;
                    } else {
                        genders.push(p.gender);
                    }
                    member_fields.push(p.field_of_study.as_deref());
                    pre.push(ci.before(cpos).last().map(|(_, v)| *v));
                    post.push(ci.at(cpos));
                }
                features[3 * max_byline] = m.byline.len() as f64;

                let (change_type, signed_approach) = match (
                    pre.iter().copied().collect::<Option<Vec<_>>>(),
                    post.iter().copied().collect::<Option<Vec<_>>>(),
                ) {
                    (Some(pre), Some(post)) => {
                        let t = classify_change_type(&pre, &post, focal_idx, config.epsilon, config.tolerance_mode)?;
                        let centroid = crate::model::mean_vector(pre.iter().copied())?;
                        let approach = pre[focal_idx].l1_distance(&centroid) - post[focal_idx].l1_distance(&centroid);
                        (Some(t), Some(approach))
                    }
                    _ => (None, None),
                };
                let prior_pubs = pos;
                events.push(ChangeEvent {
                    focal: s.to_string(),
                    manuscript: mid.to_string(),
                    features,
                    y,
                    change_type,
                    signed_approach,
                    factors: FactorAssignment {
                        gender: gender_category(profile.gender, &genders),
                        field: field_category(&member_fields),
                        coauthors: CoauthorBucket::from_byline_size(m.byline.len()),
                        prior_pubs: PriorPubsBucket::from_count(prior_pubs),
                    },
                    prior_pubs,
                    byline_size: m.byline.len(),
                });
            }
            Ok((events, tally))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut report = EventReport {
        max_byline,
        feature_width: 3 * max_byline + 1,
        ..Default::default()
    };
    let mut events = Vec::new();
    for (ev, t) in per_scholar {
        report.coauthored_pairs += t.pairs;
        report.skipped_short_history += t.short;
        report.skipped_no_vector += t.no_vector;
        events.extend(ev);
    }
    report.events = events.len();
    report.untyped = events.iter().filter(|e| e.change_type.is_none()).count();
    Ok((events, report))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnovaResponse {
    /// Focal centroid approach `d_pre - d_post`.
    #[default]
    SignedApproach,
    /// Change magnitude `y`.
    Magnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: String,
    pub n: usize,
    pub mean: f64,
    pub modal_type: Option<ChangeType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyRow {
    pub level_a: String,
    pub level_b: String,
    #[serde(flatten)]
    pub comparison: TukeyComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTest {
    pub factor: String,
    pub levels: Vec<LevelSummary>,
    /// `None` when fewer than two levels have two or more observations.
    pub f: Option<f64>,
    pub p: Option<f64>,
    pub stars: String,
    pub degenerate: bool,
    pub tukey: Vec<TukeyRow>,
}

pub fn factor_level(event: &ChangeEvent, factor: &str) -> Option<String> {
    let f = &event.factors;
    match factor {
        "gender" => (f.gender != GenderCategory::Excluded).then(|| f.gender.to_string()),
        "field" => Some(f.field.to_string()),
        "coauthors" => Some(f.coauthors.to_string()),
        "prior_pubs" => Some(f.prior_pubs.to_string()),
        _ => None,
    }
}

pub const FACTORS: [&str; 4] = ["gender", "field", "coauthors", "prior_pubs"];

/// One-way ANOVA and Tukey HSD of the response across one factor's levels.
pub fn anova_tukey(
    events: &[ChangeEvent],
    factor: &str,
    response: AnovaResponse,
    alpha: f64,
) -> Result<FactorTest, CollabError> {
    let mut groups: BTreeMap<String, (Vec<f64>, BTreeMap<ChangeType, usize>)> = BTreeMap::new();
    for e in events {
        let (Some(level), Some(t)) = (factor_level(e, factor), e.change_type) else {
            continue;
        };
        let value = match response {
            AnovaResponse::SignedApproach => e.signed_approach.expect("typed events carry an approach"),
            AnovaResponse::Magnitude => e.y,
        };
        let g = groups.entry(level).or_default();
        g.0.push(value);
        *g.1.entry(t).or_default() += 1;
    }
    let levels: Vec<LevelSummary> = groups
        .iter()
        .map(|(level, (vals, types))| LevelSummary {
            level: level.clone(),
            n: vals.len(),
            mean: stats::mean(vals),
            modal_type: types
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(t, _)| *t),
        })
        .collect();
    let testable: Vec<(&String, &[f64])> = groups
        .iter()
        .filter(|(_, (v, _))| v.len() >= 2)
        .map(|(l, (v, _))| (l, v.as_slice()))
        .collect();
    let mut out = FactorTest {
        factor: factor.to_string(),
        levels,
        f: None,
        p: None,
        stars: String::new(),
        degenerate: false,
        tukey: Vec::new(),
    };
    if testable.len() < 2 {
        return Ok(out);
    }
    let slices: Vec<&[f64]> = testable.iter().map(|(_, v)| *v).collect();
    let anova = stats::one_way_anova(&slices)?;
    out.f = Some(anova.f);
    out.p = Some(anova.p);
    out.stars = significance_stars(anova.p).to_string();
    out.degenerate = anova.degenerate;
    out.tukey = stats::tukey_hsd(&slices, alpha)?
        .into_iter()
        .map(|c| TukeyRow {
            level_a: testable[c.a].0.clone(),
            level_b: testable[c.b].0.clone(),
            comparison: c,
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollabConfig {
    pub events: EventConfig,
    pub gbt: GbtParams,
    pub importance_repeats: usize,
    pub tukey_alpha: f64,
    pub response: AnovaResponse,
    pub seed: u64,
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            events: EventConfig::default(),
            gbt: GbtParams::default(),
            importance_repeats: 10,
            tukey_alpha: 0.05,
            response: AnovaResponse::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub events: usize,
    pub train_mae: f64,
    pub test_mae: f64,
    pub median_baseline_mae: f64,
    pub constant_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabAnalysis {
    pub events: Vec<ChangeEvent>,
    pub report: EventReport,
    pub regression: Option<RegressionSummary>,
    pub importance: Vec<GroupImportance>,
    pub tests: Vec<FactorTest>,
}

/// Model fit plus held-out importance per factor group.
pub fn regression_importance(
    events: &[ChangeEvent],
    max_byline: usize,
    config: &CollabConfig,
) -> Result<(RegressionFit, Vec<GroupImportance>), CollabError> {
    let x: Vec<Vec<f64>> = events.iter().map(|e| e.features.clone()).collect();
    let y: Vec<f64> = events.iter().map(|e| e.y).collect();
    let fit = gbt::fit_with_holdout(&x, &y, config.seed, &config.gbt)?;
    let xte: Vec<Vec<f64>> = fit.test_rows.iter().map(|&i| x[i].clone()).collect();
    let yte: Vec<f64> = fit.test_rows.iter().map(|&i| y[i]).collect();
    let imp = gbt::permutation_importance(
        &fit.model,
        &xte,
        &yte,
        &factor_columns(max_byline),
        config.importance_repeats,
        config.seed,
    );
    Ok((fit, imp))
}

/// Events, regression with importance (when there are enough events), and
/// per-factor tests.
pub fn analyze(graph: &AuthorManuscriptGraph, config: &CollabConfig) -> Result<CollabAnalysis, CollabError> {
    let (events, report) = build_change_events(graph, &config.events)?;
    let (regression, importance) = if events.len() >= gbt::MIN_REGRESSION_ROWS {
        let (fit, imp) = regression_importance(&events, report.max_byline, config)?;
        (
            Some(RegressionSummary {
                events: events.len(),
                train_mae: fit.train_mae,
                test_mae: fit.test_mae,
                median_baseline_mae: fit.median_baseline_mae,
                constant_target: fit.constant_target,
            }),
            imp,
        )
    } else {
        log::warn!("only {} change events; skipping regression", events.len());
        (None, Vec::new())
    };
    let tests = FACTORS
        .iter()
        .map(|f| anova_tukey(&events, f, config.response, config.tukey_alpha))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CollabAnalysis {
        events,
        report,
        regression,
        importance,
        tests,
    })
}
