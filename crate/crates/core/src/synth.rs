//! Synthetic corpora with known authorship and style trajectories.
//!
//! Generation runs in two phases. The structure phase draws scholars,
//! careers, publication dates, advisor pairings and bylines. The style
//! phase then walks every manuscript in global chronological order and
//! advances each author's latent style:
//!
//! - senior scholars approach a personal attractor exponentially, with a
//!   pull toward their co-authors' current styles;
//! - students write close to their advisor while training, then depart
//!   along a logistic curve toward their own attractor;
//! - everyone carries a damped random jitter of personal amplitude.
//!
//! Component vectors are the true style plus isotropic Gaussian noise. All
//! randomness derives from one seed through separate streams, so changing
//! how one stream is consumed leaves the others untouched.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AssignmentMap;
use crate::ingest::{self, TextPayload, TextRecord};
use crate::model::{AuthorManuscriptGraph, Component, Gender, ManuscriptRecord, PubDate, ScholarProfile, SourceKind, WsVector};

pub const FIELDS: [&str; 6] = [
    "computer science",
    "physics",
    "biology",
    "mathematics",
    "economics",
    "linguistics",
];

const LATEST_YEAR: u16 = 2020;
const MAX_CAREER_YEARS: usize = 28;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error("ground truth line {line}: {message}")]
    Truth { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scholars: usize,
    pub dimension: usize,
    /// Standard deviation of attractor coordinates.
    pub separation: f64,
    /// Standard deviation of component noise per coordinate.
    pub noise: f64,
    pub student_fraction: f64,
    /// Lognormal career length, in manuscripts, before clamping.
    pub career_mean: f64,
    pub career_sd: f64,
    pub career_min: usize,
    pub career_max: usize,
    pub rate_min: usize,
    pub rate_max: usize,
    /// Per-manuscript approach rate toward the attractor.
    pub approach_rate: f64,
    pub collab_pull: f64,
    /// Upper bound of the per-scholar jitter amplitude.
    pub drift_noise_max: f64,
    pub collab_rate: f64,
    /// Share of the advisor-to-student gap already present while training.
    pub departure_floor: f64,
    /// Post-training manuscript index of the departure midpoint.
    pub departure_inflection: f64,
    pub departure_width: f64,
    pub post_training_min: usize,
    pub female_rate: f64,
    pub unknown_gender_rate: f64,
    /// Emit rendered text instead of component vectors.
    pub text: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scholars: 16,
            dimension: 16,
            separation: 0.01,
            noise: 0.001,
            student_fraction: 0.5,
            career_mean: 23.42,
            career_sd: 40.44,
            career_min: 5,
            career_max: 300,
            rate_min: 2,
            rate_max: 5,
            approach_rate: 0.15,
            collab_pull: 0.05,
            drift_noise_max: 0.003,
            collab_rate: 0.3,
            departure_floor: 0.3,
            departure_inflection: 7.0,
            departure_width: 1.5,
            post_training_min: 16,
            female_rate: 0.3,
            unknown_gender_rate: 0.05,
            text: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.scholars == 0 {
            return bad("scholars must be positive");
        }
        if self.dimension == 0 {
            return bad("dimension must be positive");
        }
        if self.separation.is_nan() || self.separation <= 0.0 || self.noise.is_nan() || self.noise < 0.0 || !self.noise.is_finite() {
            return bad("separation must be positive and noise non-negative");
        }
        if !(0.0..=1.0).contains(&self.student_fraction) {
            return bad("student_fraction must lie in [0, 1]");
        }
        if self.student_fraction > 0.0 && self.scholars < 2 {
            return bad("students need at least one senior scholar");
        }
        if !(self.career_mean > 0.0 && self.career_sd >= 0.0) {
            return bad("career_mean must be positive");
        }
        if self.career_min == 0 || self.career_min > self.career_max {
            return bad("career_min must be positive and at most career_max");
        }
        if self.rate_min == 0 || self.rate_min > self.rate_max {
            return bad("rate_min must be positive and at most rate_max");
        }
        for (name, v) in [
            ("approach_rate", self.approach_rate),
            ("collab_pull", self.collab_pull),
            ("collab_rate", self.collab_rate),
            ("departure_floor", self.departure_floor),
            ("female_rate", self.female_rate),
            ("unknown_gender_rate", self.unknown_gender_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.drift_noise_max >= 0.0 && self.departure_width > 0.0) {
            return bad("drift_noise_max must be non-negative and departure_width positive");
        }
        Ok(())
    }
}

/// Logistic departure share at post-training index `tau`.
pub fn departure_share(tau: f64, floor: f64, inflection: f64, width: f64) -> f64 {
    floor + (1.0 - floor) / (1.0 + (-(tau - inflection) / width).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTruth {
    pub student: String,
    pub advisor: String,
    pub floor: f64,
    pub inflection: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    /// True style per (scholar, manuscript).
    pub ws: BTreeMap<(String, String), Vec<f64>>,
    /// True author of each component, in component order.
    pub components: BTreeMap<String, Vec<String>>,
    pub students: Vec<StudentTruth>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TruthLine {
    Style { scholar: String, manuscript: String, ws: Vec<f64> },
    Components { manuscript: String, authors: Vec<String> },
    Student(StudentTruth),
}

impl GroundTruth {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let line = |out: &mut W, l: &TruthLine| -> std::io::Result<()> {
            writeln!(out, "{}", serde_json::to_string(l).expect("plain data serializes"))
        };
        for ((s, m), ws) in &self.ws {
            line(&mut out, &TruthLine::Style { scholar: s.clone(), manuscript: m.clone(), ws: ws.clone() })?;
        }
        for (m, authors) in &self.components {
            line(&mut out, &TruthLine::Components { manuscript: m.clone(), authors: authors.clone() })?;
        }
        for s in &self.students {
            line(&mut out, &TruthLine::Student(s.clone()))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, SynthError> {
        let mut out = GroundTruth::default();
        for (i, l) in reader.lines().enumerate() {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let parsed: TruthLine = serde_json::from_str(&l).map_err(|e| SynthError::Truth {
                line: i + 1,
                message: e.to_string(),
            })?;
            match parsed {
                TruthLine::Style { scholar, manuscript, ws } => {
                    out.ws.insert((scholar, manuscript), ws);
                }
                TruthLine::Components { manuscript, authors } => {
                    out.components.insert(manuscript, authors);
                }
                TruthLine::Student(s) => out.students.push(s),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub manuscripts: Vec<ManuscriptRecord>,
    pub profiles: Vec<ScholarProfile>,
    pub truth: GroundTruth,
    /// Rendered text per manuscript when text output is requested.
    pub texts: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Senior,
    Student { advisor: usize },
}

struct Scholar {
    role: Role,
    start: u16,
    end: u16,
    slots: Vec<PubDate>,
    field: &'static str,
    gender: Gender,
    jitter_amp: f64,
}

#[derive(Clone)]
struct Draft {
    date: PubDate,
    owner: usize,
    slot: usize,
    byline: Vec<usize>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_SCHOLARS: u64 = 1;
const STREAM_SCHEDULE: u64 = 2;
const STREAM_STYLES: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_TEXT: u64 = 5;

fn scholar_id(i: usize) -> String {
    format!("s{i:04}")
}

fn manuscript_id(i: usize) -> String {
    format!("m{i:06}")
}

fn schedule(start: u16, n: usize, rate: usize, rng: &mut ChaCha8Rng) -> Vec<PubDate> {
    let mut slots: Vec<PubDate> = (0..n)
        .map(|k| {
            let year = start + (k / rate) as u16;
            PubDate::new(year, rng.random_range(1..=12), None).expect("valid month")
        })
        .collect();
    slots.sort();
    slots
}

fn draw_scholars(cfg: &SynthConfig) -> Vec<Scholar> {
    let mut rng = stream(cfg.seed, STREAM_SCHOLARS);
    let sigma2 = (1.0 + (cfg.career_sd / cfg.career_mean).powi(2)).ln();
    let careers = LogNormal::new(cfg.career_mean.ln() - sigma2 / 2.0, sigma2.sqrt()).expect("valid lognormal");
    let n_students = ((cfg.scholars as f64) * cfg.student_fraction).round() as usize;
    let n_students = n_students.min(cfg.scholars - 1);
    let n_seniors = cfg.scholars - n_students;

    let mut out: Vec<Scholar> = Vec::with_capacity(cfg.scholars);
    for i in 0..cfg.scholars {
        let career = (careers.sample(&mut rng).round() as usize).clamp(cfg.career_min, cfg.career_max);
        let mut rate = rng.random_range(cfg.rate_min..=cfg.rate_max);
        let field_draw = FIELDS[rng.random_range(0..FIELDS.len())];
        let gender = if rng.random::<f64>() < cfg.unknown_gender_rate {
            Gender::Unknown
        } else if rng.random::<f64>() < cfg.female_rate {
            Gender::Female
        } else {
            Gender::Male
        };
        let jitter_amp = rng.random::<f64>() * cfg.drift_noise_max;
        let advisor_pick = rng.random_range(0..n_seniors.max(1));
        let start_gap = rng.random_range(5..=12u16);
        let senior_start = rng.random_range(1950..=1980u16);

        let (role, n, start, field) = if i < n_seniors {
            (Role::Senior, career, senior_start, field_draw)
        } else {
            let advisor = advisor_pick;
            let n = career.max(3 * rate + 1 + cfg.post_training_min);
            let field = if rng.random::<f64>() < 0.7 { out[advisor].field } else { field_draw };
            (Role::Student { advisor }, n, out[advisor].start + start_gap, field)
        };
        let n = n.min(cfg.career_max.max(3 * rate + 1 + cfg.post_training_min));
        rate = rate.max(n.div_ceil(MAX_CAREER_YEARS));
        let years = n.div_ceil(rate) as u16;
        let start = start.min(LATEST_YEAR + 1 - years);
        let slots = schedule(start, n, rate, &mut rng);
        out.push(Scholar {
            role,
            start,
            end: start + years - 1,
            slots,
            field,
            gender,
            jitter_amp,
        });
    }
    out
}

fn draw_bylines(cfg: &SynthConfig, scholars: &[Scholar]) -> Vec<Draft> {
    let mut rng = stream(cfg.seed, STREAM_SCHEDULE);
    let mut by_year: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, s) in scholars.iter().enumerate() {
        for y in s.start + 3..=s.end {
            by_year.entry(y).or_default().push(i);
        }
    }
    let mut drafts = Vec::new();
    for (i, s) in scholars.iter().enumerate() {
        for (k, date) in s.slots.iter().enumerate() {
            let in_window = date.year <= s.start + 2;
            let byline = match s.role {
                Role::Senior if in_window => vec![i],
                Role::Student { .. } if k == 0 => vec![i],
                Role::Student { advisor } if in_window => vec![i, advisor],
                _ => {
                    let mut b = vec![i];
                    if rng.random::<f64>() < cfg.collab_rate {
                        let extra = match rng.random::<f64>() {
                            x if x < 0.6 => 1,
                            x if x < 0.9 => 2,
                            _ => 3,
                        };
                        let pool: Vec<usize> = by_year
                            .get(&date.year)
                            .map(|v| v.iter().copied().filter(|&j| j != i).collect())
                            .unwrap_or_default();
                        for &g in pool.choose_multiple(&mut rng, extra) {
                            b.push(g);
                        }
                    }
                    b
                }
            };
            drafts.push(Draft { date: *date, owner: i, slot: k, byline });
        }
    }
    drafts.sort_by_key(|d| (d.date, d.owner, d.slot));
    drafts
}

struct StyleState {
    attractor: Vec<f64>,
    drift: Vec<f64>,
    jitter: Vec<f64>,
    current: Option<Vec<f64>>,
    manuscripts: usize,
    /// Student bookkeeping: advisor styles seen on training manuscripts.
    training_sum: Vec<f64>,
    training_count: usize,
    training_left: usize,
    baseline: Option<Vec<f64>>,
    post_index: usize,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    if sd == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, sd).expect("finite sd");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Builds a corpus from the configuration. Deterministic per seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let scholars = draw_scholars(cfg);
    let drafts = draw_bylines(cfg, &scholars);
    let dim = cfg.dimension;

    let mut style_rng = stream(cfg.seed, STREAM_STYLES);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut states: Vec<StyleState> = scholars
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let attractor = normal_vec(&mut style_rng, dim, cfg.separation);
            let drift = attractor
                .iter()
                .map(|a| a + if style_rng.random::<bool>() { 2.0 } else { -2.0 } * cfg.separation)
                .collect();
            let training_left = match s.role {
                Role::Senior => 0,
                Role::Student { .. } => drafts
                    .iter()
                    .filter(|d| d.owner == i && d.byline.len() == 2 && d.date.year <= s.start + 2)
                    .count(),
            };
            StyleState {
                attractor,
                drift,
                jitter: vec![0.0; dim],
                current: None,
                manuscripts: 0,
                training_sum: vec![0.0; dim],
                training_count: 0,
                training_left,
                baseline: None,
                post_index: 0,
            }
        })
        .collect();

    let mut truth = GroundTruth::default();
    let mut manuscripts = Vec::with_capacity(drafts.len());
    for (mi, d) in drafts.iter().enumerate() {
        let mid = manuscript_id(mi);
        let previous: Vec<Option<Vec<f64>>> = d.byline.iter().map(|&s| states[s].current.clone()).collect();
        let mut styles: Vec<Vec<f64>> = vec![Vec::new(); d.byline.len()];
        // Seniors first so a training manuscript sees the advisor's style at that manuscript.
        let mut order: Vec<usize> = (0..d.byline.len()).collect();
        order.sort_by_key(|&k| matches!(scholars[d.byline[k]].role, Role::Student { .. }));
        for k in order {
            let s = d.byline[k];
            let amp = scholars[s].jitter_amp;
            let rate = cfg.approach_rate;
            let st = &mut states[s];
            if st.manuscripts > 0 {
                let step = normal_vec(&mut style_rng, dim, amp);
                for (j, e) in st.jitter.iter_mut().zip(step) {
                    *j = (1.0 - rate) * *j + e;
                }
            }
            let base: Vec<f64> = match scholars[s].role {
                Role::Senior => {
                    if st.manuscripts > 0 {
                        let others: Vec<&Vec<f64>> = previous
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| *j != k)
                            .filter_map(|(_, p)| p.as_ref())
                            .collect();
                        for c in 0..dim {
                            let mut next = st.drift[c] + rate * (st.attractor[c] - st.drift[c]);
                            if !others.is_empty() {
                                let mean = others.iter().map(|o| o[c]).sum::<f64>() / others.len() as f64;
                                next += cfg.collab_pull * (mean - st.drift[c]);
                            }
                            st.drift[c] = next;
                        }
                    }
                    st.drift.clone()
                }
                Role::Student { advisor } => {
                    if let Some(b) = &st.baseline {
                        let h = departure_share(
                            st.post_index as f64,
                            cfg.departure_floor,
                            cfg.departure_inflection,
                            cfg.departure_width,
                        );
                        st.post_index += 1;
                        b.iter().zip(&st.attractor).map(|(b, a)| b + h * (a - b)).collect()
                    } else {
                        let on_byline = d.byline.iter().position(|&x| x == advisor);
                        let adv: Vec<f64> = match on_byline {
                            Some(p) if !styles[p].is_empty() => styles[p].clone(),
                            _ => states[advisor].current.clone().unwrap_or_else(|| states[advisor].drift.clone()),
                        };
                        let st = &mut states[s];
                        if on_byline.is_some() {
                            for (t, a) in st.training_sum.iter_mut().zip(&adv) {
                                *t += a;
                            }
                            st.training_count += 1;
                            st.training_left -= 1;
                            if st.training_left == 0 {
                                let n = st.training_count as f64;
                                st.baseline = Some(st.training_sum.iter().map(|x| x / n).collect());
                            }
                        }
                        adv.iter()
                            .zip(&st.attractor)
                            .map(|(b, a)| b + cfg.departure_floor * (a - b))
                            .collect()
                    }
                }
            };
            let st = &mut states[s];
            let style: Vec<f64> = base.iter().zip(&st.jitter).map(|(b, j)| b + j).collect();
            st.current = Some(style.clone());
            st.manuscripts += 1;
            styles[k] = style;
        }

        let solo = d.byline.len() == 1;
        let mut parts: Vec<(usize, Vec<f64>, f64)> = Vec::new();
        for (k, &s) in d.byline.iter().enumerate() {
            let count = if solo { noise_rng.random_range(5..=7) } else { noise_rng.random_range(4..=6) };
            for _ in 0..count {
                let noise = normal_vec(&mut noise_rng, dim, cfg.noise);
                let v: Vec<f64> = styles[k].iter().zip(noise).map(|(x, e)| x + e).collect();
                parts.push((s, v, noise_rng.random_range(0.8..1.2)));
            }
        }
        parts.shuffle(&mut noise_rng);
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let components = parts
            .iter()
            .map(|(_, v, w)| Component {
                ws: WsVector::new(v.clone()).expect("finite"),
                weight: w / total,
                span: None,
            })
            .collect();
        truth
            .components
            .insert(mid.clone(), parts.iter().map(|(s, _, _)| scholar_id(*s)).collect());
        for (k, &s) in d.byline.iter().enumerate() {
            truth.ws.insert((scholar_id(s), mid.clone()), styles[k].clone());
        }
        manuscripts.push(ManuscriptRecord {
            id: mid,
            published_at: d.date,
            byline: d.byline.iter().map(|&s| scholar_id(s)).collect(),
            components,
            source_kind: SourceKind::PrecomputedVectors,
            title: None,
            text: None,
        });
    }

    for (i, s) in scholars.iter().enumerate() {
        if let Role::Student { advisor } = s.role {
            truth.students.push(StudentTruth {
                student: scholar_id(i),
                advisor: scholar_id(advisor),
                floor: cfg.departure_floor,
                inflection: cfg.departure_inflection,
                width: cfg.departure_width,
            });
        }
    }
    let profiles = scholars
        .iter()
        .enumerate()
        .map(|(i, s)| ScholarProfile {
            field_of_study: Some(s.field.to_string()),
            gender: s.gender,
            ..ScholarProfile::bare(scholar_id(i))
        })
        .collect();
    let texts = cfg.text.then(|| render_texts(cfg.seed, &manuscripts, &truth));
    Ok(SynthCorpus {
        manuscripts,
        profiles,
        truth,
        texts,
    })
}

const FUNCTION_POOL: [&str; 16] = [
    "the", "of", "and", "to", "in", "that", "is", "for", "it", "with", "as", "on", "by", "this", "which", "we",
];
const CONTENT_POOL: [&str; 24] = [
    "model", "data", "result", "analysis", "method", "system", "effect", "network", "signal", "theory",
    "sample", "measure", "process", "structure", "pattern", "value", "study", "approach", "field", "response",
    "estimate", "variable", "feature", "design",
];
const ENDINGS: [&str; 3] = [".", "!", "?"];
const INNER: [&str; 4] = [",", ";", ":", " -"];

/// A fixed paragraph per scholar, so paragraphs by one author embed alike.
fn scholar_template(seed: u64, scholar: &str) -> String {
    let mut h: u64 = 1469598103934665603;
    for b in scholar.bytes() {
        h = (h ^ b as u64).wrapping_mul(1099511628211);
    }
    let mut rng = stream(seed ^ h, STREAM_TEXT);
    let fw_share = rng.random_range(0.2..0.7);
    let fw: Vec<&str> = FUNCTION_POOL.choose_multiple(&mut rng, 5).copied().collect();
    let sentence_len = rng.random_range(6..24);
    let ending = ENDINGS[rng.random_range(0..ENDINGS.len())];
    let inner = INNER[rng.random_range(0..INNER.len())];
    let mut sentences = Vec::new();
    for _ in 0..4 {
        let mut words = Vec::new();
        for w in 0..sentence_len {
            let word = if rng.random::<f64>() < fw_share {
                fw[rng.random_range(0..fw.len())]
            } else {
                CONTENT_POOL[rng.random_range(0..CONTENT_POOL.len())]
            };
            words.push(word.to_string());
            if w + 1 < sentence_len && w % 5 == 4 {
                words.last_mut().expect("just pushed").push_str(inner);
            }
        }
        let mut s = words.join(" ");
        s.push_str(ending);
        let mut c = s.chars();
        let first = c.next().expect("non-empty").to_uppercase().collect::<String>();
        sentences.push(first + c.as_str());
    }
    sentences.join(" ")
}

fn render_texts(seed: u64, manuscripts: &[ManuscriptRecord], truth: &GroundTruth) -> Vec<String> {
    let mut cache: BTreeMap<&str, String> = BTreeMap::new();
    manuscripts
        .iter()
        .map(|m| {
            truth.components[&m.id]
                .iter()
                .map(|a| cache.entry(a).or_insert_with(|| scholar_template(seed, a)).clone())
                .collect::<Vec<_>>()
                .join("\n\n")
        })
        .collect()
}

pub const BIBLIOGRAPHY_FILE: &str = "dblp.xml";
pub const TEXTS_FILE: &str = "manuscripts.jsonl";
pub const PROFILES_FILE: &str = "profiles.csv";
pub const TRUTH_FILE: &str = "ground_truth.jsonl";

impl SynthCorpus {
    /// Writes the bibliography, texts, profiles and ground truth files.
    pub fn write_files(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        let mut xml = BufWriter::new(File::create(dir.join(BIBLIOGRAPHY_FILE))?);
        ingest::write_bibliographic_xml(&mut xml, &self.manuscripts)?;
        xml.flush()?;

        let mut jsonl = BufWriter::new(File::create(dir.join(TEXTS_FILE))?);
        for (i, m) in self.manuscripts.iter().enumerate() {
            let payload = match &self.texts {
                Some(t) => TextPayload::Text(t[i].clone()),
                None => TextPayload::Vectors(
                    m.components
                        .iter()
                        .map(|c| (c.ws.as_slice().to_vec(), c.weight))
                        .collect(),
                ),
            };
            let rec = TextRecord { id: m.id.clone(), payload };
            writeln!(jsonl, "{}", ingest::text_record_to_json(&rec))?;
        }
        jsonl.flush()?;

        let profiles = BufWriter::new(File::create(dir.join(PROFILES_FILE))?);
        ingest::write_profiles_csv(profiles, &self.profiles)?;

        let mut truth = BufWriter::new(File::create(dir.join(TRUTH_FILE))?);
        self.truth.write_jsonl(&mut truth)?;
        truth.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub components: usize,
    pub correct: usize,
    /// Components credited to several tied scholars.
    pub tied: usize,
    pub accuracy: f64,
    pub attributed_pairs: usize,
    /// Mean L1 distance between attributed and true vectors.
    pub mean_l1_error: f64,
    /// The same error divided by the dimension.
    pub mean_abs_coordinate_error: f64,
}

/// Compares assignments and attributed vectors against the recorded truth.
/// A component counts as correct only when credited to its author alone.
pub fn score_attribution(truth: &GroundTruth, graph: &AuthorManuscriptGraph, assignments: &AssignmentMap) -> AttributionScore {
    let mut score = AttributionScore::default();
    for (m, authors) in &truth.components {
        let assigned = assignments.get(m);
        for (i, author) in authors.iter().enumerate() {
            score.components += 1;
            if let Some(owners) = assigned.and_then(|a| a.get(i)) {
                if owners.len() > 1 {
                    score.tied += 1;
                }
                if owners.len() == 1 && owners[0] == *author {
                    score.correct += 1;
                }
            }
        }
    }
    score.accuracy = if score.components == 0 { 0.0 } else { score.correct as f64 / score.components as f64 };
    let mut total = 0.0;
    let mut dims = 0usize;
    for (s, m, v) in graph.attributed_entries() {
        if let Some(t) = truth.ws.get(&(s.to_string(), m.to_string())) {
            total += crate::model::l1_distance(v.as_slice(), t);
            dims = t.len();
            score.attributed_pairs += 1;
        }
    }
    if score.attributed_pairs > 0 {
        score.mean_l1_error = total / score.attributed_pairs as f64;
        score.mean_abs_coordinate_error = score.mean_l1_error / dims.max(1) as f64;
    }
    score
}

/// Trajectories of length `t` around `clusters` distinct mean curves.
/// One cluster gives a single drift regime with isotropic noise.
pub fn planted_trajectory_series(seed: u64, per_cluster: usize, clusters: usize, t: usize, separation: f64, noise: f64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, 11);
    let d = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut out = Vec::with_capacity(per_cluster * clusters);
    for c in 0..clusters {
        let level = 0.05 + separation * c as f64;
        let amp = 0.1 * (1.0 + c as f64);
        for _ in 0..per_cluster {
            out.push(
                (0..t)
                    .map(|i| level + amp * (-(i as f64) / 5.0).exp() + if noise > 0.0 { d.sample(&mut rng) } else { 0.0 })
                    .collect(),
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEvents {
    pub features: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub max_byline: usize,
}

/// Change events laid out like real ones (field, gender, prior count per
/// byline slot, then byline size). The target depends only on the first
/// slot's prior count. Padding reveals the byline size through every
/// group's columns, so size is kept out of the target to leave gender,
/// field and co-author count genuinely uninformative.
pub fn planted_events(seed: u64, n: usize, noise: f64) -> PlantedEvents {
    let max_byline = 4;
    let mut rng = stream(seed, 12);
    let d = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut features = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let size = rng.random_range(2..=max_byline);
        let mut x = vec![-1.0; 3 * max_byline + 1];
        for j in 0..size {
            x[3 * j] = rng.random_range(0..FIELDS.len()) as f64;
            x[3 * j + 1] = rng.random_range(0..2) as f64;
            x[3 * j + 2] = rng.random_range(1..60) as f64;
        }
        x[3 * max_byline] = size as f64;
        let e = if noise > 0.0 { d.sample(&mut rng) } else { 0.0 };
        y.push(0.5 * (1.0 + x[2]).ln() + e);
        features.push(x);
    }
    PlantedEvents { features, y, max_byline }
}
