//! Component-to-author attribution and timeline propagation.
//!
//! Each manuscript component goes to the byline scholar whose current style
//! estimate is nearest in Euclidean distance. Estimates start from every
//! scholar's earliest single-authored manuscript and are carried along the
//! global manuscript timeline in alternating forward and backward passes,
//! each resolved manuscript replacing its authors' estimates with the
//! vectors just attributed to them. Passes stop once a forward/backward
//! pair reproduces the previous pair's assignments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{weighted_mean, AuthorManuscriptGraph, ManuscriptRecord, ModelError, WsVector};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scholars credited with each component, in component order. Ties put
/// several scholars on one component; the ids are sorted.
pub type ManuscriptAssignment = Vec<Vec<String>>;

/// Assignments for every resolved manuscript, keyed by manuscript id.
pub type AssignmentMap = BTreeMap<String, ManuscriptAssignment>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub max_passes: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { max_passes: 16 }
    }
}

/// Working state of a propagation run.
#[derive(Debug, Clone, Default)]
pub struct AttributionState {
    pub current_ws: HashMap<String, WsVector>,
    pub assignment: AssignmentMap,
    pub unresolved: BTreeSet<String>,
    pub pass_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub passes: usize,
    pub converged: bool,
    /// Manuscripts whose assignment still changed between the last two pass pairs.
    pub unstable_manuscripts: usize,
    pub unresolved_manuscripts: usize,
    pub seeded_scholars: usize,
    pub unseeded_scholars: usize,
    /// Share of manuscripts assigned differently by the final forward and
    /// backward passes. The backward result is kept.
    pub disagreement_rate: f64,
    pub attributed_edges: usize,
    /// Assignments that differ from a supplied previous run, if any.
    pub changed_from_previous: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub assignments: AssignmentMap,
    pub report: PropagationReport,
}

/// Assigns each component of `m` to the nearest byline scholar with an
/// estimate. Returns `None` when no byline scholar has one.
pub fn assign_components(
    m: &ManuscriptRecord,
    estimates: &HashMap<String, WsVector>,
) -> Option<ManuscriptAssignment> {
    let candidates: Vec<(&String, &WsVector)> = m
        .byline
        .iter()
        .filter_map(|s| estimates.get(s).map(|v| (s, v)))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    Some(
        m.components
            .iter()
            .map(|c| nearest(&c.ws, &candidates))
            .collect(),
    )
}

fn nearest(v: &WsVector, candidates: &[(&String, &WsVector)]) -> Vec<String> {
    if let [(only, _)] = candidates {
        return vec![(*only).clone()];
    }
    let dists: Vec<f64> = candidates
        .iter()
        .map(|(_, e)| v.squared_l2_distance(e))
        .collect();
    let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let mut winners: Vec<String> = candidates
        .iter()
        .zip(&dists)
        .filter(|(_, &d)| d == best)
        .map(|((s, _), _)| (*s).clone())
        .collect();
    winners.sort();
    winners
}

/// Weighted mean of the components assigned to `scholar`; `None` if none were.
pub fn scholar_ws_from_assignment(
    m: &ManuscriptRecord,
    assignment: &ManuscriptAssignment,
    scholar: &str,
) -> Option<WsVector> {
    let mine: Vec<(&WsVector, f64)> = m
        .components
        .iter()
        .zip(assignment)
        .filter(|(_, owners)| owners.iter().any(|o| o == scholar))
        .map(|(c, _)| (&c.ws, c.weight))
        .collect();
    if mine.is_empty() {
        return None;
    }
    Some(weighted_mean(mine).expect("components share one dimension"))
}

/// Per-scholar vectors for one resolved manuscript, in byline order.
fn attribute_manuscript(m: &ManuscriptRecord, assignment: &ManuscriptAssignment) -> Vec<(String, WsVector)> {
    m.byline
        .iter()
        .filter_map(|s| scholar_ws_from_assignment(m, assignment, s).map(|v| (s.clone(), v)))
        .collect()
}

/// Estimates from each scholar's earliest single-authored manuscript.
pub fn seed_estimates(graph: &AuthorManuscriptGraph) -> Result<HashMap<String, WsVector>, ModelError> {
    let mut seeds = HashMap::new();
    for s in graph.scholar_ids() {
        for mid in graph.timeline(s)? {
            let m = graph.manuscript(mid)?;
            if m.is_solo() && !m.components.is_empty() {
                seeds.insert(s.to_string(), m.weighted_mean()?);
                break;
            }
        }
    }
    Ok(seeds)
}

/// Estimates recovered from an attributed graph: each scholar's vector at
/// the earliest manuscript attributed to them, which is where a backward
/// pass leaves its state.
pub fn warm_estimates(graph: &AuthorManuscriptGraph) -> Result<HashMap<String, WsVector>, ModelError> {
    let mut out = HashMap::new();
    for s in graph.scholar_ids() {
        if let Some((_, v)) = graph.attributed_trajectory(s)?.first() {
            out.insert(s.to_string(), (*v).clone());
        }
    }
    Ok(out)
}

fn run_pass(
    order: &[&ManuscriptRecord],
    state: &mut AttributionState,
    keep: bool,
) -> (AssignmentMap, Vec<(String, String, WsVector)>) {
    let mut assignments = AssignmentMap::new();
    let mut attributed = Vec::new();
    state.unresolved.clear();
    for m in order {
        let Some(assignment) = assign_components(m, &state.current_ws) else {
            state.unresolved.insert(m.id.clone());
            continue;
        };
        for (s, v) in attribute_manuscript(m, &assignment) {
            if keep {
                attributed.push((s.clone(), m.id.clone(), v.clone()));
            }
            state.current_ws.insert(s, v);
        }
        assignments.insert(m.id.clone(), assignment);
    }
    state.pass_count += 1;
    (assignments, attributed)
}

fn count_differences(a: &AssignmentMap, b: &AssignmentMap) -> usize {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).count()
}

/// Runs propagation from solo-manuscript seeds and fills the graph's
/// attributed vectors.
pub fn propagate(
    graph: &mut AuthorManuscriptGraph,
    config: &PropagationConfig,
) -> Result<Attribution, AttributionError> {
    let seeds = seed_estimates(graph)?;
    propagate_from(graph, config, seeds, None)
}

/// Re-runs propagation starting from the estimates an earlier run left
/// behind, reporting how many manuscript assignments differ from
/// `previous`. On a converged run this changes nothing.
pub fn propagate_warm(
    graph: &mut AuthorManuscriptGraph,
    config: &PropagationConfig,
    previous: &AssignmentMap,
) -> Result<Attribution, AttributionError> {
    let mut start = seed_estimates(graph)?;
    start.extend(warm_estimates(graph)?);
    propagate_from(graph, config, start, Some(previous))
}

/// Propagation from explicit starting estimates.
pub fn propagate_from(
    graph: &mut AuthorManuscriptGraph,
    config: &PropagationConfig,
    start: HashMap<String, WsVector>,
    previous: Option<&AssignmentMap>,
) -> Result<Attribution, AttributionError> {
    let max_passes = config.max_passes.max(1);
    let seeded = start.len();
    let mut state = AttributionState {
        current_ws: start,
        ..Default::default()
    };

    let (final_assign, final_vectors, report_bits) = {
        let forward: Vec<&ManuscriptRecord> = graph.global_timeline();
        let backward: Vec<&ManuscriptRecord> = forward.iter().rev().copied().collect();

        if forward.iter().all(|m| m.byline.len() == 1) {
            // Every assignment is forced; one pass is the fixed point.
            let (a, v) = run_pass(&forward, &mut state, true);
            (a, v, (true, 0usize, 0.0))
        } else {
            let mut last_pair: Option<(AssignmentMap, AssignmentMap)> = None;
            let mut outcome = None;
            while state.pass_count + 2 <= max_passes.max(2) {
                let (fwd, _) = run_pass(&forward, &mut state, false);
                let (bwd, vectors) = run_pass(&backward, &mut state, true);
                let disagreement = if bwd.is_empty() {
                    0.0
                } else {
                    count_differences(&fwd, &bwd) as f64 / bwd.len().max(fwd.len()) as f64
                };
                let same = last_pair
                    .as_ref()
                    .is_some_and(|(pf, pb)| *pf == fwd && *pb == bwd);
                let unstable = last_pair
                    .as_ref()
                    .map_or(bwd.len(), |(_, pb)| count_differences(pb, &bwd));
                let done = same || state.pass_count + 2 > max_passes.max(2);
                if done {
                    outcome = Some((bwd, vectors, (same, if same { 0 } else { unstable }, disagreement)));
                    break;
                }
                last_pair = Some((fwd, bwd));
            }
            outcome.expect("at least one pass pair runs")
        }
    };

    graph.clear_attributed();
    for (s, m, v) in final_vectors {
        graph.set_attributed(&s, &m, v)?;
    }
    let (converged, unstable, disagreement_rate) = report_bits;
    let report = PropagationReport {
        passes: state.pass_count,
        converged,
        unstable_manuscripts: unstable,
        unresolved_manuscripts: state.unresolved.len(),
        seeded_scholars: seeded,
        unseeded_scholars: graph.scholar_count().saturating_sub(seeded),
        disagreement_rate,
        attributed_edges: graph.attributed_count(),
        changed_from_previous: previous.map(|p| count_differences(p, &final_assign)),
    };
    if !report.converged {
        log::warn!(
            "propagation stopped after {} passes with {} unstable manuscripts",
            report.passes,
            report.unstable_manuscripts
        );
    }
    Ok(Attribution {
        assignments: final_assign,
        report,
    })
}

/// Writes `scholar_id,manuscript_id,dim0..dimN-1` rows in key order.
pub fn write_attributed_csv<W: Write>(mut out: W, graph: &AuthorManuscriptGraph) -> std::io::Result<()> {
    let dim = graph
        .attributed_entries()
        .next()
        .map_or(0, |(_, _, v)| v.dim());
    write!(out, "scholar_id,manuscript_id")?;
    for d in 0..dim {
        write!(out, ",dim{d}")?;
    }
    writeln!(out)?;
    for (s, m, v) in graph.attributed_entries() {
        write!(out, "{},{}", csv_field(s), csv_field(m))?;
        for x in v.as_slice() {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reads rows written by [`write_attributed_csv`] into the graph.
pub fn read_attributed_csv<R: BufRead>(
    reader: R,
    graph: &mut AuthorManuscriptGraph,
) -> Result<usize, AttributionError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut n = 0;
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| AttributionError::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        if row.len() < 2 {
            return Err(AttributionError::Parse {
                line: i + 2,
                message: "expected scholar and manuscript ids".into(),
            });
        }
        let values = row
            .iter()
            .skip(2)
            .map(|x| x.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| AttributionError::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
        graph.set_attributed(&row[0], &row[1], WsVector::new(values)?)?;
        n += 1;
    }
    Ok(n)
}

/// Writes `manuscript_id,component,scholars` rows; tied scholars joined by `;`.
pub fn write_assignments_csv<W: Write>(out: W, assignments: &AssignmentMap) -> Result<(), AttributionError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["manuscript_id", "component", "scholars"])
        .map_err(|e| AttributionError::Io(e.into()))?;
    for (m, comps) in assignments {
        for (i, owners) in comps.iter().enumerate() {
            w.write_record([m.as_str(), &i.to_string(), &owners.join(";")])
                .map_err(|e| AttributionError::Io(e.into()))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments_csv<R: BufRead>(reader: R) -> Result<AssignmentMap, AttributionError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = AssignmentMap::new();
    for (i, row) in rdr.records().enumerate() {
        let parse_err = |message: String| AttributionError::Parse { line: i + 2, message };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        if row.len() != 3 {
            return Err(parse_err("expected 3 columns".into()));
        }
        let idx: usize = row[1].parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?;
        let comps = out.entry(row[0].to_string()).or_default();
        if idx != comps.len() {
            return Err(parse_err(format!("component {idx} out of order")));
        }
        comps.push(row[2].split(';').map(str::to_string).collect());
    }
    Ok(out)
}
