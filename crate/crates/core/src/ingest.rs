//! Streaming readers for bibliographic dumps, manuscript text/vector records
//! and scholar profiles.
//!
//! The XML reader follows the DBLP dump layout: publication elements
//! (`article`, `inproceedings`, ...) holding `author`, `title`, `year`,
//! optional `month` and `ee` children. It yields one record at a time and
//! never holds more than the record being assembled.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use log::warn;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    current_year, Component, Gender, ManuscriptRecord, ModelError, PubDate, ScholarProfile,
    SourceKind, WsVector, MIN_YEAR,
};

/// Gender labels are taken only above this confidence (strictly).
pub const GENDER_CONFIDENCE_THRESHOLD: f64 = 0.95;

/// Generic tokens dropped from field-of-study strings.
pub const DEFAULT_FIELD_STOP_WORDS: &[&str] =
    &["department", "faculty", "school", "institute", "of", "the", "dept"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("not XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("record `{id}`: vector dimension {actual}, expected {expected}")]
    Dimension {
        id: String,
        expected: usize,
        actual: usize,
    },
    #[error("record `{id}`: {message}")]
    InvalidRecord { id: String, message: String },
    #[error("profiles: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

const PUBLICATION_ELEMENTS: &[&[u8]] = &[
    b"article",
    b"inproceedings",
    b"proceedings",
    b"book",
    b"incollection",
    b"phdthesis",
    b"mastersthesis",
];

fn is_publication(name: &[u8]) -> bool {
    PUBLICATION_ELEMENTS.contains(&name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Author,
    Title,
    Year,
    Month,
    Ee,
}

impl Field {
    fn from_name(name: &[u8]) -> Option<Self> {
        match name {
            b"author" => Some(Field::Author),
            b"title" => Some(Field::Title),
            b"year" => Some(Field::Year),
            b"month" => Some(Field::Month),
            b"ee" => Some(Field::Ee),
            _ => None,
        }
    }
}

/// Counters kept by [`BibXmlReader`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct XmlStats {
    pub publication_elements: u64,
    pub emitted: u64,
    pub skipped_no_author: u64,
    pub skipped_no_year: u64,
    pub skipped_year_out_of_range: u64,
}

impl XmlStats {
    pub fn skipped(&self) -> u64 {
        self.skipped_no_author + self.skipped_no_year + self.skipped_year_out_of_range
    }
}

#[derive(Default)]
struct PartialRecord {
    key: Option<String>,
    authors: Vec<String>,
    title: String,
    year: String,
    month: String,
    doi: Option<String>,
    ee_first: Option<String>,
}

/// Pull-based reader over a DBLP-style dump.
pub struct BibXmlReader<R: BufRead> {
    xml: Reader<R>,
    buf: Vec<u8>,
    stats: XmlStats,
    depth: usize,
    current: Option<PartialRecord>,
    pub_depth: usize,
    field: Option<(Field, usize)>,
    text: String,
    max_year: u16,
    done: bool,
}

impl<R: BufRead> BibXmlReader<R> {
    pub fn new(reader: R) -> Self {
        let mut xml = Reader::from_reader(reader);
        xml.config_mut().trim_text(false);
        xml.config_mut().check_end_names = true;
        Self {
            xml,
            buf: Vec::with_capacity(8 * 1024),
            stats: XmlStats::default(),
            depth: 0,
            current: None,
            pub_depth: 0,
            field: None,
            text: String::new(),
            max_year: current_year(),
            done: false,
        }
    }

    pub fn stats(&self) -> &XmlStats {
        &self.stats
    }

    fn fatal(&mut self, message: impl Into<String>) -> IngestError {
        self.done = true;
        IngestError::Xml {
            offset: self.xml.buffer_position(),
            message: message.into(),
        }
    }

    fn finish_record(&mut self, rec: PartialRecord) -> Option<ManuscriptRecord> {
        self.stats.publication_elements += 1;
        if rec.authors.is_empty() {
            self.stats.skipped_no_author += 1;
            return None;
        }
        let Ok(year) = rec.year.trim().parse::<u16>() else {
            self.stats.skipped_no_year += 1;
            return None;
        };
        if year < MIN_YEAR || year > self.max_year {
            self.stats.skipped_year_out_of_range += 1;
            return None;
        }
        let published_at = match parse_month(&rec.month) {
            Some(month) => PubDate {
                year,
                month,
                day: None,
            },
            None => PubDate::year_only(year),
        };
        let id = rec
            .doi
            .or(rec.key)
            .or(rec.ee_first)
            .unwrap_or_else(|| format!("record-{}", self.stats.publication_elements));
        let title = rec.title.trim();
        self.stats.emitted += 1;
        Some(ManuscriptRecord {
            id,
            published_at,
            byline: rec.authors,
            components: Vec::new(),
            source_kind: SourceKind::FullText,
            title: (!title.is_empty()).then(|| title.to_string()),
            text: None,
        })
    }

    fn next_record(&mut self) -> Result<Option<ManuscriptRecord>, IngestError> {
        loop {
            self.buf.clear();
            let event = match self.xml.read_event_into(&mut self.buf) {
                Ok(e) => e,
                Err(e) => return Err(self.fatal(e.to_string())),
            };
            match event {
                Event::Start(e) => {
                    self.depth += 1;
                    let name = e.name();
                    if self.current.is_some() {
                        if self.field.is_none() {
                            if let Some(f) = Field::from_name(name.as_ref()) {
                                self.field = Some((f, self.depth));
                                self.text.clear();
                            }
                        }
                    } else if is_publication(name.as_ref()) {
                        let mut rec = PartialRecord::default();
                        for attr in e.attributes().flatten() {
                            if attr.key.as_ref() == b"key" {
                                rec.key = Some(String::from_utf8_lossy(&attr.value).into_owned());
                            }
                        }
                        self.current = Some(rec);
                        self.pub_depth = self.depth;
                    }
                }
                Event::Empty(e) => {
                    if self.current.is_none() && is_publication(e.name().as_ref()) {
                        let rec = PartialRecord::default();
                        if let Some(out) = self.finish_record(rec) {
                            return Ok(Some(out));
                        }
                    }
                }
                Event::End(_) => {
                    if let Some((field, depth)) = self.field {
                        if depth == self.depth {
                            self.field = None;
                            let value = std::mem::take(&mut self.text);
                            let rec = self.current.as_mut().expect("field inside record");
                            store_field(rec, field, value.trim());
                        }
                    }
                    let closing_pub = self.current.is_some() && self.depth == self.pub_depth;
                    self.depth = self.depth.saturating_sub(1);
                    if closing_pub {
                        let rec = self.current.take().expect("checked");
                        if let Some(out) = self.finish_record(rec) {
                            return Ok(Some(out));
                        }
                    }
                }
                Event::Text(t) => {
                    if self.field.is_some() {
                        let raw = String::from_utf8_lossy(t.as_ref());
                        match quick_xml::escape::unescape_with(&raw, resolve_entity) {
                            Ok(s) => self.text.push_str(&s),
                            Err(_) => self.text.push_str(&raw),
                        }
                    } else if self.depth == 0 && t.iter().any(|b| !b.is_ascii_whitespace()) {
                        return Err(self.fatal("character data outside the root element"));
                    }
                }
                Event::CData(t) => {
                    if self.field.is_some() {
                        self.text.push_str(&String::from_utf8_lossy(t.as_ref()));
                    }
                }
                Event::Eof => {
                    self.done = true;
                    if self.depth != 0 {
                        return Err(self.fatal("unexpected end of input inside an element"));
                    }
                    return Ok(None);
                }
                _ => {}
            }
        }
    }
}

impl<R: BufRead> Iterator for BibXmlReader<R> {
    type Item = Result<ManuscriptRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        self.next_record().transpose()
    }
}

fn store_field(rec: &mut PartialRecord, field: Field, value: &str) {
    match field {
        Field::Author => {
            if !value.is_empty() {
                rec.authors.push(value.to_string());
            }
        }
        Field::Title => rec.title = value.to_string(),
        Field::Year => rec.year = value.to_string(),
        Field::Month => rec.month = value.to_string(),
        Field::Ee => {
            if rec.doi.is_none() {
                rec.doi = extract_doi(value);
            }
            if rec.ee_first.is_none() && !value.is_empty() {
                rec.ee_first = Some(value.to_string());
            }
        }
    }
}

/// Pulls a bare DOI out of `doi:...` or `https://doi.org/...` links.
pub fn extract_doi(ee: &str) -> Option<String> {
    let ee = ee.trim();
    let lower = ee.to_ascii_lowercase();
    if lower.starts_with("doi:") {
        return Some(ee[4..].trim().to_string()).filter(|s| !s.is_empty());
    }
    for prefix in ["https://doi.org/", "http://doi.org/", "https://dx.doi.org/", "http://dx.doi.org/"] {
        if lower.starts_with(prefix) {
            return Some(ee[prefix.len()..].to_string()).filter(|s| !s.is_empty());
        }
    }
    None
}

fn parse_month(raw: &str) -> Option<u8> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    if let Ok(n) = raw.parse::<u8>() {
        return (1..=12).contains(&n).then_some(n);
    }
    const NAMES: [&str; 12] = [
        "jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec",
    ];
    let lower = raw.to_ascii_lowercase();
    NAMES
        .iter()
        .position(|n| lower.starts_with(n))
        .map(|i| i as u8 + 1)
}

fn resolve_entity(name: &str) -> Option<&'static str> {
    Some(match name {
        "amp" => "&",
        "lt" => "<",
        "gt" => ">",
        "quot" => "\"",
        "apos" => "'",
        "auml" => "ä",
        "ouml" => "ö",
        "uuml" => "ü",
        "Auml" => "Ä",
        "Ouml" => "Ö",
        "Uuml" => "Ü",
        "szlig" => "ß",
        "eacute" => "é",
        "egrave" => "è",
        "aacute" => "á",
        "iacute" => "í",
        "oacute" => "ó",
        "uacute" => "ú",
        "ccedil" => "ç",
        "ntilde" => "ñ",
        "aring" => "å",
        "oslash" => "ø",
        _ => return None,
    })
}

/// Writes records in the layout [`BibXmlReader`] reads.
pub fn write_bibliographic_xml<'a, W, I>(mut out: W, records: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a ManuscriptRecord>,
{
    use quick_xml::escape::escape;
    writeln!(out, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>")?;
    writeln!(out, "<dblp>")?;
    for r in records {
        writeln!(out, "<article key=\"{}\">", escape(r.id.as_str()))?;
        for a in &r.byline {
            writeln!(out, "<author>{}</author>", escape(a.as_str()))?;
        }
        if let Some(t) = &r.title {
            writeln!(out, "<title>{}</title>", escape(t.as_str()))?;
        }
        writeln!(out, "<year>{}</year>", r.published_at.year)?;
        writeln!(out, "<month>{}</month>", r.published_at.month)?;
        writeln!(out, "<ee>doi:{}</ee>", escape(r.id.as_str()))?;
        writeln!(out, "</article>")?;
    }
    writeln!(out, "</dblp>")?;
    Ok(())
}

/// Payload of one manuscript text/vector line.
#[derive(Debug, Clone, PartialEq)]
pub enum TextPayload {
    Text(String),
    Vectors(Vec<(Vec<f64>, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextRecord {
    pub id: String,
    pub payload: TextPayload,
}

impl TextRecord {
    pub fn source_kind(&self) -> SourceKind {
        match self.payload {
            TextPayload::Text(_) => SourceKind::FullText,
            TextPayload::Vectors(_) => SourceKind::PrecomputedVectors,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawComponent {
    vector: Vec<f64>,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
struct RawTextLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    components: Option<Vec<RawComponent>>,
}

/// Streams line-delimited JSON manuscript records.
///
/// With `dimension` set, vector records of any other dimension are yielded
/// as [`IngestError::Dimension`] and the stream continues.
pub fn parse_manuscript_text_jsonl<R: BufRead>(
    reader: R,
    dimension: Option<usize>,
) -> impl Iterator<Item = Result<TextRecord, IngestError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| {
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(IngestError::Io(e))),
            };
            if line.trim().is_empty() {
                return None;
            }
            Some(parse_text_line(&line, i + 1, dimension))
        })
}

fn parse_text_line(line: &str, lineno: usize, dimension: Option<usize>) -> Result<TextRecord, IngestError> {
    let raw: RawTextLine = serde_json::from_str(line).map_err(|e| IngestError::MalformedLine {
        line: lineno,
        message: e.to_string(),
    })?;
    let payload = match (raw.text, raw.components) {
        (Some(t), None) => TextPayload::Text(t),
        (None, Some(cs)) => {
            if cs.is_empty() {
                return Err(IngestError::InvalidRecord {
                    id: raw.id,
                    message: "empty component list".into(),
                });
            }
            let expected = dimension.unwrap_or(cs[0].vector.len());
            for c in &cs {
                if c.vector.len() != expected {
                    return Err(IngestError::Dimension {
                        id: raw.id,
                        expected,
                        actual: c.vector.len(),
                    });
                }
                if !(c.weight.is_finite() && c.weight > 0.0) {
                    return Err(IngestError::InvalidRecord {
                        id: raw.id,
                        message: format!("component weight {} is not positive", c.weight),
                    });
                }
            }
            TextPayload::Vectors(cs.into_iter().map(|c| (c.vector, c.weight)).collect())
        }
        _ => {
            return Err(IngestError::MalformedLine {
                line: lineno,
                message: "expected exactly one of `text` or `components`".into(),
            })
        }
    };
    Ok(TextRecord { id: raw.id, payload })
}

/// Serializes one record as a JSONL line (no trailing newline).
pub fn text_record_to_json(rec: &TextRecord) -> String {
    let raw = match &rec.payload {
        TextPayload::Text(t) => RawTextLine {
            id: rec.id.clone(),
            text: Some(t.clone()),
            components: None,
        },
        TextPayload::Vectors(vs) => RawTextLine {
            id: rec.id.clone(),
            text: None,
            components: Some(
                vs.iter()
                    .map(|(v, w)| RawComponent {
                        vector: v.clone(),
                        weight: *w,
                    })
                    .collect(),
            ),
        },
    };
    serde_json::to_string(&raw).expect("plain data serializes")
}

/// Outcome of joining bibliographic records with their text/vector lines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub bibliographic_records: usize,
    pub matched: usize,
    /// `matched / bibliographic_records`.
    pub match_rate: f64,
    pub text_records: usize,
    pub unknown_ids: usize,
    pub duplicate_text_ids: usize,
    pub rejected_dimension: usize,
    pub rejected_malformed: usize,
}

/// Attaches text or precomputed vectors to records by id.
///
/// Returns only the records that found a payload; the rest are counted.
pub fn link_texts<I>(
    records: Vec<ManuscriptRecord>,
    texts: I,
) -> Result<(Vec<ManuscriptRecord>, LinkReport), IngestError>
where
    I: IntoIterator<Item = Result<TextRecord, IngestError>>,
{
    let mut report = LinkReport {
        bibliographic_records: records.len(),
        ..Default::default()
    };
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        index.entry(r.id.clone()).or_insert(i);
    }
    let mut payloads: Vec<Option<TextRecord>> = vec![None; records.len()];
    for t in texts {
        let t = match t {
            Ok(t) => t,
            Err(IngestError::Dimension { id, expected, actual }) => {
                warn!("rejected `{id}`: dimension {actual}, expected {expected}");
                report.text_records += 1;
                report.rejected_dimension += 1;
                continue;
            }
            Err(e @ (IngestError::MalformedLine { .. } | IngestError::InvalidRecord { .. })) => {
                warn!("{e}");
                report.text_records += 1;
                report.rejected_malformed += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        report.text_records += 1;
        match index.get(&t.id) {
            Some(&i) if payloads[i].is_some() => report.duplicate_text_ids += 1,
            Some(&i) => payloads[i] = Some(t),
            None => report.unknown_ids += 1,
        }
    }
    let mut out = Vec::with_capacity(records.len());
    for (mut r, p) in records.into_iter().zip(payloads) {
        let Some(p) = p else { continue };
        r.source_kind = p.source_kind();
        match p.payload {
            TextPayload::Text(t) => r.text = Some(t),
            TextPayload::Vectors(vs) => {
                r.components = vs
                    .into_iter()
                    .map(|(v, w)| {
                        Ok(Component {
                            ws: WsVector::new(v)?,
                            weight: w,
                            span: None,
                        })
                    })
                    .collect::<Result<_, ModelError>>()?;
            }
        }
        out.push(r);
    }
    report.matched = out.len();
    report.match_rate = if report.bibliographic_records == 0 {
        0.0
    } else {
        report.matched as f64 / report.bibliographic_records as f64
    };
    Ok((out, report))
}

/// Lowercases, drops generic tokens, sorts the rest.
///
/// Returns `"unknown"` when nothing survives.
pub fn normalize_field<S: AsRef<str>>(raw: &str, stop_words: &[S]) -> String {
    let mut tokens: Vec<String> = raw
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !stop_words.iter().any(|s| s.as_ref() == t))
        .collect();
    if tokens.is_empty() {
        return "unknown".to_string();
    }
    tokens.sort();
    tokens.join(" ")
}

/// One row of the external name–gender table joined to a scholar.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSource {
    pub scholar_id: String,
    pub raw_field: String,
    pub gender_label: Gender,
    pub confidence: f64,
}

pub fn resolve_gender(source: &ProfileSource) -> Gender {
    if source.confidence > GENDER_CONFIDENCE_THRESHOLD {
        source.gender_label
    } else {
        Gender::Unknown
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfilesReport {
    pub rows: usize,
    pub profiles: usize,
    pub multiple_fields_flagged: usize,
    pub duplicate_rows: usize,
    pub gender_resolved: usize,
    pub invalid_confidence: usize,
}

#[derive(Deserialize)]
struct ProfileRow {
    id: String,
    #[serde(default)]
    field: String,
    #[serde(default)]
    gender: String,
    #[serde(default)]
    confidence: Option<f64>,
}

/// Reads `id,field,gender,confidence` rows.
///
/// A field cell listing several affiliations separated by `;` keeps the
/// first one; such rows, and repeated ids, are flagged in the report.
pub fn read_profiles_csv<R: Read, S: AsRef<str>>(
    reader: R,
    stop_words: &[S],
) -> Result<(Vec<ScholarProfile>, ProfilesReport), IngestError> {
    let mut report = ProfilesReport::default();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for row in rdr.deserialize::<ProfileRow>() {
        let row = row?;
        report.rows += 1;
        if !seen.insert(row.id.clone()) {
            report.duplicate_rows += 1;
            continue;
        }
        let mut parts = row.field.split(';').map(str::trim).filter(|s| !s.is_empty());
        let first = parts.next();
        if parts.next().is_some() {
            report.multiple_fields_flagged += 1;
        }
        let confidence = match row.confidence {
            Some(c) if (0.0..=1.0).contains(&c) => c,
            Some(_) => {
                report.invalid_confidence += 1;
                0.0
            }
            None => 0.0,
        };
        let source = ProfileSource {
            scholar_id: row.id.clone(),
            raw_field: first.unwrap_or("").to_string(),
            gender_label: Gender::parse(&row.gender),
            confidence,
        };
        let gender = resolve_gender(&source);
        if gender != Gender::Unknown {
            report.gender_resolved += 1;
        }
        let field = first.map(|f| normalize_field(f, stop_words));
        out.push(ScholarProfile {
            field_of_study: field,
            gender,
            ..ScholarProfile::bare(row.id)
        });
    }
    report.profiles = out.len();
    Ok((out, report))
}

/// Writes profiles back as `id,field,gender,confidence`.
///
/// Resolved genders are written with confidence 1, unknown with 0.
pub fn write_profiles_csv<W: Write>(out: W, profiles: &[ScholarProfile]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "field", "gender", "confidence"])?;
    for p in profiles {
        let conf = if p.gender == Gender::Unknown { "0" } else { "1" };
        w.write_record([
            p.id.as_str(),
            p.field_of_study.as_deref().unwrap_or(""),
            p.gender.as_str(),
            conf,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything the ingest stage reports, serialized as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub xml: XmlStats,
    pub link: LinkReport,
    pub profiles: ProfilesReport,
    pub build: crate::model::BuildReport,
    pub filter: crate::model::FilterReport,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_all(xml: &str) -> (Vec<ManuscriptRecord>, XmlStats) {
        let mut r = BibXmlReader::new(xml.as_bytes());
        let out: Vec<_> = r.by_ref().map(Result::unwrap).collect();
        (out, r.stats().clone())
    }

    #[test]
    fn minimal_record() {
        let (recs, stats) = parse_all(
            "<article><author>A</author><author>B</author><title>T</title><year>2020</year><ee>doi:10.1/x</ee></article>",
        );
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.byline, vec!["A", "B"]);
        assert_eq!(r.published_at, PubDate::year_only(2020));
        assert_eq!(r.id, "10.1/x");
        assert_eq!(r.title.as_deref(), Some("T"));
        assert_eq!(stats.emitted, 1);
    }

    #[test]
    fn record_without_authors_skipped() {
        let (recs, stats) = parse_all(
            "<dblp><article><title>T</title><year>2020</year></article><article><author>A</author><year>2001</year></article></dblp>",
        );
        assert_eq!(recs.len(), 1);
        assert_eq!(stats.skipped_no_author, 1);
        assert_eq!(stats.publication_elements, 2);
    }

    #[test]
    fn missing_year_skipped() {
        let (recs, stats) =
            parse_all("<dblp><inproceedings key=\"k\"><author>A</author></inproceedings></dblp>");
        assert!(recs.is_empty());
        assert_eq!(stats.skipped_no_year, 1);
    }

    #[test]
    fn nested_title_markup_and_entities() {
        let (recs, _) = parse_all(
            "<dblp><article key=\"conf/x/1\"><author>J&uuml;rgen M&amp;M</author><title>On <i>deep</i> things</title><year>2019</year><month>March</month><ee>https://doi.org/10.5/abc</ee></article></dblp>",
        );
        assert_eq!(recs[0].byline, vec!["Jürgen M&M"]);
        assert_eq!(recs[0].title.as_deref(), Some("On deep things"));
        assert_eq!(recs[0].published_at.month, 3);
        assert_eq!(recs[0].id, "10.5/abc");
    }

    #[test]
    fn key_used_without_doi() {
        let (recs, _) = parse_all(
            "<dblp><article key=\"journals/a/B\"><author>A</author><year>2019</year><ee>http://example.org/p</ee></article></dblp>",
        );
        assert_eq!(recs[0].id, "journals/a/B");
    }

    #[test]
    fn plain_text_is_fatal() {
        let mut r = BibXmlReader::new("hello, this is not xml".as_bytes());
        match r.next() {
            Some(Err(IngestError::Xml { .. })) => {}
            other => panic!("expected xml error, got {other:?}"),
        }
        assert!(r.next().is_none());
    }

    #[test]
    fn mismatched_tags_report_offset() {
        let mut r = BibXmlReader::new("<dblp><article><author>A</year></article></dblp>".as_bytes());
        match r.next() {
            Some(Err(IngestError::Xml { offset, .. })) => assert!(offset > 0),
            other => panic!("expected xml error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_document_is_fatal() {
        let mut r = BibXmlReader::new("<dblp><article><author>A</author>".as_bytes());
        assert!(matches!(r.next(), Some(Err(IngestError::Xml { .. }))));
    }

    #[test]
    fn jsonl_kinds() {
        let input = r#"{"id":"a","text":"Hello world. Fin."}
{"id":"b","components":[{"vector":[1,2,3],"weight":0.6},{"vector":[0,0,1],"weight":0.4}]}
"#;
        let recs: Vec<_> = parse_manuscript_text_jsonl(input.as_bytes(), Some(3))
            .map(Result::unwrap)
            .collect();
        assert_eq!(recs[0].source_kind(), SourceKind::FullText);
        assert_eq!(recs[1].source_kind(), SourceKind::PrecomputedVectors);
    }

    #[test]
    fn jsonl_dimension_mismatch() {
        let input = r#"{"id":"b","components":[{"vector":[1,2],"weight":1.0}]}"#;
        let mut it = parse_manuscript_text_jsonl(input.as_bytes(), Some(3));
        match it.next() {
            Some(Err(IngestError::Dimension { id, expected, actual })) => {
                assert_eq!((id.as_str(), expected, actual), ("b", 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn link_rate() {
        let recs: Vec<_> = (0..100)
            .map(|i| ManuscriptRecord {
                id: format!("m{i}"),
                published_at: PubDate::year_only(2000),
                byline: vec!["A".into()],
                components: vec![],
                source_kind: SourceKind::FullText,
                title: None,
                text: None,
            })
            .collect();
        let texts = (0..100).map(|i| {
            let id = if i < 97 { format!("m{i}") } else { format!("zz{i}") };
            Ok(TextRecord {
                id,
                payload: TextPayload::Text("x.".into()),
            })
        });
        let (out, rep) = link_texts(recs, texts).unwrap();
        assert_eq!(out.len(), 97);
        assert_eq!(rep.match_rate, 0.97);
        assert_eq!(rep.unknown_ids, 3);
    }

    #[test]
    fn field_normalization() {
        let s = DEFAULT_FIELD_STOP_WORDS;
        assert_eq!(normalize_field("Department of Computer Science", s), "computer science");
        assert_eq!(normalize_field("Computer Science Department", s), "computer science");
        assert_eq!(normalize_field("Faculty of the Department", s), "unknown");
        assert_eq!(normalize_field("", s), "unknown");
        assert_eq!(normalize_field("Dept. of Physics", s), "physics");
    }

    #[test]
    fn gender_threshold() {
        let src = |g, c| ProfileSource {
            scholar_id: "x".into(),
            raw_field: String::new(),
            gender_label: g,
            confidence: c,
        };
        assert_eq!(resolve_gender(&src(Gender::Female, 0.99)), Gender::Female);
        assert_eq!(resolve_gender(&src(Gender::Male, 0.95)), Gender::Unknown);
        assert_eq!(resolve_gender(&src(Gender::Female, 0.10)), Gender::Unknown);
    }

    #[test]
    fn profiles_csv() {
        let csv = "id,field,gender,confidence\n\
                   a,Department of Physics,female,0.99\n\
                   b,Math; Physics,male,0.5\n\
                   a,Biology,male,0.99\n\
                   c,,,\n";
        let (ps, rep) = read_profiles_csv(csv.as_bytes(), DEFAULT_FIELD_STOP_WORDS).unwrap();
        assert_eq!(ps.len(), 3);
        assert_eq!(ps[0].gender, Gender::Female);
        assert_eq!(ps[0].field_of_study.as_deref(), Some("physics"));
        assert_eq!(ps[1].gender, Gender::Unknown);
        assert_eq!(ps[1].field_of_study.as_deref(), Some("math"));
        assert_eq!(ps[2].field_of_study, None);
        assert_eq!(rep.multiple_fields_flagged, 1);
        assert_eq!(rep.duplicate_rows, 1);
    }
}
