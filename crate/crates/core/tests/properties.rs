//! Property tests for the cross-module invariants.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylotrace::attribution::{self, PropagationConfig};
use stylotrace::collab::{self, ToleranceMode};
use stylotrace::dynamics::{self, KMeansConfig};
use stylotrace::embedder::{self, EmbedderConfig};
use stylotrace::emergence;
use stylotrace::gbt::{self, GbtParams};
use stylotrace::ingest;
use stylotrace::model::{self, AuthorManuscriptGraph, Component, ManuscriptRecord, PubDate, SourceKind, WsVector};
use stylotrace::stats;

#[derive(Debug, Clone)]
struct RawManuscript {
    byline: Vec<usize>,
    year: u16,
    month: u8,
    vectors: Vec<(Vec<f64>, f64)>,
}

const DIM: usize = 3;

fn raw_manuscript(scholars: usize) -> impl Strategy<Value = RawManuscript> {
    (
        prop::collection::vec(0..scholars, 1..=3),
        1990u16..2010,
        1u8..=12,
        prop::collection::vec((prop::collection::vec(-1.0f64..1.0, DIM), 0.5f64..2.0), 1..=4),
    )
        .prop_map(|(byline, year, month, vectors)| RawManuscript {
            byline,
            year,
            month,
            vectors,
        })
}

fn corpus() -> impl Strategy<Value = Vec<RawManuscript>> {
    (2usize..7).prop_flat_map(|s| prop::collection::vec(raw_manuscript(s), 1..30))
}

fn records(raw: &[RawManuscript]) -> Vec<ManuscriptRecord> {
    raw.iter()
        .enumerate()
        .map(|(i, r)| ManuscriptRecord {
            id: format!("m{i:03}"),
            published_at: PubDate::new(r.year, r.month, None).unwrap(),
            byline: r.byline.iter().map(|s| format!("s{s}")).collect(),
            components: r
                .vectors
                .iter()
                .map(|(v, w)| Component {
                    ws: WsVector::new(v.clone()).unwrap(),
                    weight: *w,
                    span: None,
                })
                .collect(),
            source_kind: SourceKind::PrecomputedVectors,
            title: None,
            text: None,
        })
        .collect()
}

fn graph_of(raw: &[RawManuscript]) -> AuthorManuscriptGraph {
    let recs: Vec<ManuscriptRecord> = records(raw)
        .into_iter()
        .map(|r| embedder::embed_manuscript(r, &EmbedderConfig::default()).unwrap())
        .collect();
    model::build_graph(recs, Vec::new()).unwrap().0
}

fn edges_mirror_bylines(g: &AuthorManuscriptGraph) -> bool {
    let from_bylines: usize = g.manuscripts().map(|m| m.byline.len()).sum();
    let all_present = g.manuscripts().all(|m| m.byline.iter().all(|s| g.has_edge(s, &m.id)));
    let endpoints = g.edges().all(|(s, m)| g.scholar(s).is_ok() && g.manuscript(m).is_ok());
    from_bylines == g.edge_count() && all_present && endpoints
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn graph_edges_mirror_bylines_through_filtering(raw in corpus()) {
        let g = graph_of(&raw);
        prop_assert!(edges_mirror_bylines(&g));
        for m in g.manuscripts() {
            let mut ids = m.byline.clone();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), m.byline.len());
        }
        let (once, _) = model::filter_scholars(g);
        prop_assert!(edges_mirror_bylines(&once));
        let (twice, report) = model::filter_scholars(once.clone());
        prop_assert_eq!(&twice, &once);
        prop_assert_eq!(report.removed_manuscripts, 0);
        for s in once.scholar_ids() {
            prop_assert!(once.kappa(s).unwrap() >= 1);
        }
    }

    #[test]
    fn timelines_ignore_input_order(raw in corpus(), seed in any::<u64>()) {
        let g = graph_of(&raw);
        let mut recs = records(&raw);
        recs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let recs = recs.into_iter().map(|r| embedder::embed_manuscript(r, &EmbedderConfig::default()).unwrap()).collect();
        let h = model::build_graph(recs, Vec::new()).unwrap().0;
        for s in g.scholar_ids() {
            prop_assert_eq!(g.timeline(s).unwrap(), h.timeline(s).unwrap());
        }
    }

    #[test]
    fn component_weights_sum_to_one(raw in corpus()) {
        let g = graph_of(&raw);
        for m in g.manuscripts() {
            let total: f64 = m.components.iter().map(|c| c.weight).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(m.components.iter().all(|c| c.weight > 0.0 && c.weight <= 1.0));
        }
    }

    #[test]
    fn attribution_invariants(raw in corpus()) {
        let g = graph_of(&raw);
        let (mut g, _) = model::filter_scholars(g);
        let mut again = g.clone();
        let cfg = PropagationConfig::default();
        let first = attribution::propagate(&mut g, &cfg).unwrap();
        let second = attribution::propagate(&mut again, &cfg).unwrap();
        prop_assert_eq!(&first.assignments, &second.assignments);
        prop_assert_eq!(&g, &again);

        for (m, owners) in &first.assignments {
            let rec = g.manuscript(m).unwrap();
            for owner in owners.iter().flatten() {
                prop_assert!(rec.byline.contains(owner));
            }
        }
        for (s, m, v) in g.attributed_entries() {
            prop_assert!(g.has_edge(s, m));
            let rec = g.manuscript(m).unwrap();
            if rec.is_solo() {
                prop_assert_eq!(v, &rec.weighted_mean().unwrap());
            }
        }
        if first.report.converged {
            let previous = first.assignments.clone();
            let warm = attribution::propagate_warm(&mut g, &cfg, &previous).unwrap();
            prop_assert_eq!(warm.report.changed_from_previous, Some(0));
        }
    }

    #[test]
    fn change_is_zero_exactly_at_the_mean(
        v in prop::collection::vec(-10.0f64..10.0, 1..16),
        k in 1usize..6,
        bump in prop::collection::vec(-1.0f64..1.0, 16),
    ) {
        let u = WsVector::new(v.clone()).unwrap();
        let window: Vec<&WsVector> = std::iter::repeat_n(&u, k).collect();
        prop_assert_eq!(dynamics::change(&window, &u).unwrap(), 0.0);
        let moved: Vec<f64> = v.iter().zip(&bump).map(|(a, b)| a + b).collect();
        if moved != v {
            let m = WsVector::new(moved).unwrap();
            prop_assert!(dynamics::change(&window, &m).unwrap() > 0.0);
        }
    }

    #[test]
    fn change_is_one_lipschitz_in_the_current_vector(
        window in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 8), 1..6),
        a in prop::collection::vec(-5.0f64..5.0, 8),
        b in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let w: Vec<WsVector> = window.into_iter().map(|v| WsVector::new(v).unwrap()).collect();
        let refs: Vec<&WsVector> = w.iter().collect();
        let (ua, ub) = (WsVector::new(a).unwrap(), WsVector::new(b).unwrap());
        let gap = (dynamics::change(&refs, &ua).unwrap() - dynamics::change(&refs, &ub).unwrap()).abs();
        prop_assert!(gap <= ua.l1_distance(&ub) + 1e-12);
    }

    #[test]
    fn convergence_point_is_monotone_in_threshold(
        values in prop::collection::vec(0.0f64..1.0, 1..40),
        w1 in 0.0f64..1.0,
        w2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
        let a = dynamics::convergence_index(&values, lo);
        let b = dynamics::convergence_index(&values, hi);
        if let Some(a) = a {
            prop_assert!(a < values.len());
            prop_assert!(b.is_some_and(|b| b <= a));
        }
    }

    #[test]
    fn kmeans_inertia_monotone_and_order_free(
        series in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 3..25),
        seed in any::<u64>(),
    ) {
        let cfg = KMeansConfig { restarts: 3, max_iter: 50, seed: 1 };
        let refs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
        let elbow = dynamics::ts_kmeans_elbow(&refs, 1..=5, 6, &cfg);
        prop_assert!(elbow.windows(2).all(|w| w[1].inertia <= w[0].inertia));
        let mut shuffled = refs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(dynamics::ts_kmeans_elbow(&shuffled, 1..=5, 6, &cfg), elbow);
    }

    #[test]
    fn advisors_ignore_byline_and_input_order(raw in corpus(), seed in any::<u64>()) {
        let g = graph_of(&raw);
        let mut recs: Vec<ManuscriptRecord> = g.manuscripts().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        recs.shuffle(&mut rng);
        for r in &mut recs {
            r.byline.shuffle(&mut rng);
        }
        let h = model::build_graph(recs, Vec::new()).unwrap().0;
        for s in g.scholar_ids() {
            prop_assert_eq!(
                emergence::detect_advisors(&g, s).unwrap(),
                emergence::detect_advisors(&h, s).unwrap()
            );
        }
    }

    #[test]
    fn change_type_stable_under_positive_scaling(
        pre in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 2..4),
        shift in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 4),
        scale in 0.1f64..10.0,
        focal_pick in 0usize..4,
    ) {
        let n = pre.len();
        let focal = focal_pick % n;
        let post: Vec<Vec<f64>> = pre.iter().zip(&shift).map(|(p, d)| p.iter().zip(d).map(|(a, b)| a + b).collect()).collect();
        let to_ws = |vs: &[Vec<f64>], c: f64| -> Vec<WsVector> {
            vs.iter().map(|v| WsVector::new(v.iter().map(|x| x * c).collect()).unwrap()).collect()
        };
        let (p1, q1, p2, q2) = (to_ws(&pre, 1.0), to_ws(&post, 1.0), to_ws(&pre, scale), to_ws(&post, scale));
        fn r(v: &[WsVector]) -> Vec<&WsVector> {
            v.iter().collect()
        }
        let a = collab::classify_change_type(&r(&p1), &r(&q1), focal, 1e-3, ToleranceMode::Relative).unwrap();
        let b = collab::classify_change_type(&r(&p2), &r(&q2), focal, 1e-3, ToleranceMode::Relative).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn anova_f_invariant_under_affine_maps(
        groups in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2..8), 2..5),
        shift in -100.0f64..100.0,
        scale in 0.01f64..100.0,
    ) {
        let refs: Vec<&[f64]> = groups.iter().map(|g| g.as_slice()).collect();
        let base = stats::one_way_anova(&refs).unwrap();
        prop_assume!(!base.degenerate && base.f.is_finite() && base.f > 1e-6);
        let mapped: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|x| x * scale + shift).collect()).collect();
        let mrefs: Vec<&[f64]> = mapped.iter().map(|g| g.as_slice()).collect();
        let other = stats::one_way_anova(&mrefs).unwrap();
        prop_assert!(((other.f - base.f) / base.f).abs() < 1e-7);
    }

    #[test]
    fn normalize_field_idempotent_and_order_free(words in prop::collection::vec("[a-zA-Z]{1,8}", 1..6), seed in any::<u64>()) {
        let stop = ingest::DEFAULT_FIELD_STOP_WORDS;
        let raw = words.join(" ");
        let once = ingest::normalize_field(&raw, stop);
        prop_assert_eq!(ingest::normalize_field(&once, stop), once.clone());
        let mut shuffled = words.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(ingest::normalize_field(&shuffled.join("  "), stop), once);
    }

    #[test]
    fn bibliographic_xml_round_trips(raw in corpus(), titles in prop::collection::vec("[ -~]{1,20}", 30)) {
        let mut recs = records(&raw);
        for (r, t) in recs.iter_mut().zip(&titles) {
            r.components.clear();
            r.source_kind = SourceKind::FullText;
            let mut byline = r.byline.clone();
            byline.dedup();
            r.byline = byline;
            r.title = Some(t.trim().to_string()).filter(|t| !t.is_empty());
        }
        let mut buf = Vec::new();
        ingest::write_bibliographic_xml(&mut buf, &recs).unwrap();
        let parsed: Vec<ManuscriptRecord> = ingest::BibXmlReader::new(buf.as_slice()).collect::<Result<_, _>>().unwrap();
        prop_assert_eq!(parsed, recs);
    }

    #[test]
    fn segments_cover_text_in_order(paragraphs in prop::collection::vec("[a-z ,.]{1,60}", 1..6)) {
        let text = paragraphs.join("\n\n");
        prop_assume!(!text.trim().is_empty());
        let cfg = EmbedderConfig::default();
        let segs = embedder::segment(&text, &cfg).unwrap();
        let joined: String = segs.iter().map(|s| s.text).collect();
        prop_assert_eq!(joined, text.clone());
        prop_assert_eq!(segs[0].span.0, 0);
        prop_assert!(segs.windows(2).all(|w| w[0].span.1 == w[1].span.0));
        prop_assert_eq!(segs.last().unwrap().span.1, text.chars().count());
    }
}

#[test]
fn regression_is_reproducible_from_inputs() {
    let planted = stylotrace::synth::planted_events(9, 300, 0.05);
    let params = GbtParams::default();
    let a = gbt::fit_with_holdout(&planted.features, &planted.y, 4, &params).unwrap();
    let b = gbt::fit_with_holdout(&planted.features, &planted.y, 4, &params).unwrap();
    assert_eq!(a.test_mae, b.test_mae);
    assert_eq!(a.model.predict_all(&planted.features), b.model.predict_all(&planted.features));
    let groups = collab::factor_columns(planted.max_byline);
    let ia = gbt::permutation_importance(&a.model, &planted.features, &planted.y, &groups, 5, 2);
    let ib = gbt::permutation_importance(&b.model, &planted.features, &planted.y, &groups, 5, 2);
    assert_eq!(ia, ib);
}

/// Eigenvalues by cyclic Jacobi rotation, largest first.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn pca_matches_brute_force_rank_two_optimum(points in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 4..12)) {
        let vs: Vec<WsVector> = points.iter().map(|p| WsVector::new(p.clone()).unwrap()).collect();
        let refs: Vec<&WsVector> = vs.iter().collect();
        let pca = emergence::pca_project(&refs).unwrap();
        let n = points.len();
        let d = 4;
        let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![vec![0.0; d]; d];
        for p in &points {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        let ev = jacobi_eigenvalues(cov);
        // Residual of the rank-2 projection equals the discarded eigenvalue mass.
        let mut residual = 0.0;
        for (p, xy) in points.iter().zip(&pca.points) {
            let back: Vec<f64> = (0..d).map(|j| mean[j] + xy[0] * pca.axes[0][j] + xy[1] * pca.axes[1][j]).collect();
            residual += p.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let optimum: f64 = ev[2..].iter().map(|e| e.max(0.0)).sum::<f64>() * (n - 1) as f64;
        prop_assert!((residual - optimum).abs() <= 1e-8 * (1.0 + optimum), "{} vs {}", residual, optimum);
        prop_assert!((pca.eigenvalues[0] - ev[0]).abs() <= 1e-8 * (1.0 + ev[0].abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn synthetic_corpus_passes_ingest_and_graph_invariants(seed in any::<u64>(), scholars in 4usize..24, text in any::<bool>()) {
        use stylotrace::pipeline::{self, Pipeline, PipelineConfig, Stage};
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig { seed, output: dir.path().to_path_buf(), ..PipelineConfig::default() };
        cfg.synth.scholars = scholars;
        cfg.synth.text = text;
        let corpus = stylotrace::synth::generate(&stylotrace::synth::SynthConfig { seed, ..cfg.synth.clone() }).unwrap();
        prop_assert_eq!(&corpus, &stylotrace::synth::generate(&stylotrace::synth::SynthConfig { seed, ..cfg.synth.clone() }).unwrap());

        Pipeline::new(cfg, false).run(&[Stage::Simulate, Stage::Ingest, Stage::Embed]).unwrap();
        let ingested = pipeline::read_records(&dir.path().join(pipeline::INGESTED_FILE)).unwrap();
        prop_assert_eq!(ingested.len(), corpus.manuscripts.len());
        let (g, report) = model::build_graph(ingested, Vec::new()).unwrap();
        prop_assert_eq!(report.skipped_empty_byline + report.skipped_out_of_range_date, 0);
        prop_assert!(edges_mirror_bylines(&g));
        let (filtered, _) = model::filter_scholars(g.clone());
        prop_assert_eq!(filtered.scholar_count(), g.scholar_count());
    }
}
