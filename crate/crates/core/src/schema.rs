//! Entity records, their one-line text form, and the JSONL file formats.
//!
//! # Record grammar
//!
//! ```text
//! record     = span " | " type " | " ( boxliteral / "None" )
//! boxliteral = "[" int ", " int ", " int ", " int "]"
//! ```
//!
//! That is the canonical form written by [`serialize_record`]. The parser is
//! more lenient: whitespace around fields and inside the box literal is
//! free, coordinates may be decimals or negative, and `none`/`null` are
//! accepted in any case. Fields are split from the right, so a span may
//! itself contain `|` while a type may not.
//!
//! A model generation is free-form reasoning followed by records, one per
//! line. The record block is the longest run of trailing lines (blank lines
//! ignored) that look like records: at least two `|`, or one `|` plus a `[`.
//! Lines in that block that fail the grammar are reported as malformed
//! rather than dropped.
//!
//! # Dataset file
//!
//! One JSON object per line:
//!
//! ```text
//! {"id": "...", "text": "...", "image_path": "...", "image_width": 640,
//!  "image_height": 480, "entities": [{"span": "...", "type": "PER",
//!  "box": [x1, y1, x2, y2] | null}], "reasoning": "..."}
//! ```
//!
//! `reasoning` is optional. Generations files hold `{"id", "output"}` per line.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::{BBox, ImageDims};
use crate::scalar::Scalar;

/// Trims and collapses internal whitespace runs to a single space.
/// Case is preserved.
pub fn normalize_span(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One `(span, type, box)` entity. `bbox == None` marks an ungroundable
/// entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord<T = f64> {
    pub span: String,
    pub etype: String,
    pub bbox: Option<BBox<T>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("span is empty")]
    EmptySpan,
    #[error("span {0:?} contains the field delimiter \" | \"")]
    DelimiterInSpan(String),
    #[error("type label is empty")]
    EmptyType,
    #[error("type label {0:?} contains '|' or a line break")]
    BadType(String),
    #[error("box {0} collapses when rounded to integer pixels")]
    DegenerateAfterRounding(String),
}

impl<T: Scalar> EntityRecord<T> {
    /// Builds a record with a normalized span and trimmed type.
    pub fn new(span: &str, etype: &str, bbox: Option<BBox<T>>) -> Result<Self, RecordError> {
        let span = normalize_span(span);
        if span.is_empty() {
            return Err(RecordError::EmptySpan);
        }
        let etype = etype.trim();
        if etype.is_empty() {
            return Err(RecordError::EmptyType);
        }
        if etype.contains(['|', '\n', '\r']) {
            return Err(RecordError::BadType(etype.to_string()));
        }
        Ok(Self {
            span,
            etype: etype.to_string(),
            bbox,
        })
    }
}

/// Writes the canonical line `span | type | [x1, y1, x2, y2]` (or `None`),
/// rounding coordinates half-away-from-zero.
pub fn serialize_record<T: Scalar>(r: &EntityRecord<T>) -> Result<String, RecordError> {
    let span = normalize_span(&r.span);
    if span.is_empty() {
        return Err(RecordError::EmptySpan);
    }
    if span.contains(" | ") {
        return Err(RecordError::DelimiterInSpan(span));
    }
    let etype = r.etype.trim();
    if etype.is_empty() {
        return Err(RecordError::EmptyType);
    }
    if etype.contains(['|', '\n', '\r']) {
        return Err(RecordError::BadType(etype.to_string()));
    }
    match &r.bbox {
        None => Ok(format!("{span} | {etype} | None")),
        Some(b) => {
            let q = b
                .rounded()
                .map_err(|_| RecordError::DegenerateAfterRounding(format!("{b:?}")))?;
            let [x1, y1, x2, y2] = q.to_array().map(|c| c.as_f64() as i64);
            Ok(format!("{span} | {etype} | [{x1}, {y1}, {x2}, {y2}]"))
        }
    }
}

/// Serializes records one per line, joined by `\n` (no trailing newline).
pub fn serialize_records<T: Scalar>(records: &[EntityRecord<T>]) -> Result<String, RecordError> {
    let lines = records
        .iter()
        .map(serialize_record)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(lines.join("\n"))
}

/// Raw model output for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub id: String,
    pub output: String,
}

/// Coordinate frame used by a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoordFrame {
    /// Absolute pixels of the example image.
    #[default]
    Absolute,
    /// Coordinates on a 0..1000 grid, rescaled to the given image size.
    Normalized1000(ImageDims),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MalformedLine {
    /// 1-based line number within the raw output.
    pub line_no: usize,
    pub line: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrediction<T = f64> {
    pub id: String,
    pub reasoning: String,
    pub records: Vec<EntityRecord<T>>,
    pub malformed_lines: Vec<MalformedLine>,
}

impl<T> ParsedPrediction<T> {
    /// Lines recognized as belonging to the record block.
    pub fn candidate_lines(&self) -> usize {
        self.records.len() + self.malformed_lines.len()
    }
}

enum LineKind<T> {
    Prose,
    Record(EntityRecord<T>),
    Malformed(String),
}

fn looks_like_record(line: &str) -> bool {
    let pipes = line.matches('|').count();
    pipes >= 2 || (pipes == 1 && line.contains('['))
}

fn parse_box<T: Scalar>(field: &str, frame: CoordFrame) -> Result<Option<BBox<T>>, String> {
    if field.eq_ignore_ascii_case("none") || field.eq_ignore_ascii_case("null") {
        return Ok(None);
    }
    let inner = field
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("box field {field:?} is neither [x1, y1, x2, y2] nor None"))?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!(
            "box literal has {} coordinates, expected 4",
            parts.len()
        ));
    }
    let mut c = [0.0f64; 4];
    for (slot, p) in c.iter_mut().zip(&parts) {
        let v: f64 = p
            .parse()
            .map_err(|_| format!("coordinate {p:?} is not a number"))?;
        if !v.is_finite() {
            return Err(format!("coordinate {p:?} is not finite"));
        }
        *slot = v;
    }
    if let CoordFrame::Normalized1000(dims) = frame {
        let (sx, sy) = (
            f64::from(dims.width()) / 1000.0,
            f64::from(dims.height()) / 1000.0,
        );
        c = [c[0] * sx, c[1] * sy, c[2] * sx, c[3] * sy];
    }
    BBox::new(T::of(c[0]), T::of(c[1]), T::of(c[2]), T::of(c[3]))
        .map(Some)
        .map_err(|e| e.to_string())
}

fn classify<T: Scalar>(line: &str, frame: CoordFrame) -> LineKind<T> {
    let line = line.trim();
    if !looks_like_record(line) {
        return LineKind::Prose;
    }
    let parse = || -> Result<EntityRecord<T>, String> {
        let (rest, box_field) = line.rsplit_once('|').expect("line has a pipe");
        let bbox = parse_box(box_field.trim(), frame)?;
        let (span, etype) = rest
            .rsplit_once('|')
            .ok_or_else(|| "missing type field".to_string())?;
        EntityRecord::new(span, etype, bbox).map_err(|e| e.to_string())
    };
    match parse() {
        Ok(r) => LineKind::Record(r),
        Err(reason) => LineKind::Malformed(reason),
    }
}

/// True when `line` would be taken as part of a record block.
pub fn is_record_candidate(line: &str) -> bool {
    looks_like_record(line.trim())
}

/// Splits a raw generation into reasoning and records. Never fails.
pub fn parse_generation(g: &Generation) -> ParsedPrediction<f64> {
    parse_generation_with(g, CoordFrame::Absolute)
}

pub fn parse_generation_with<T: Scalar>(g: &Generation, frame: CoordFrame) -> ParsedPrediction<T> {
    let lines: Vec<&str> = g.output.lines().collect();
    let mut block_start = lines.len();
    let mut kinds = Vec::new();
    for (i, line) in lines.iter().enumerate().rev() {
        if line.trim().is_empty() {
            continue;
        }
        match classify::<T>(line, frame) {
            LineKind::Prose => break,
            kind => {
                block_start = i;
                kinds.push((i, kind));
            }
        }
    }
    kinds.reverse();

    let mut records = Vec::new();
    let mut malformed_lines = Vec::new();
    for (i, kind) in kinds {
        match kind {
            LineKind::Record(r) => records.push(r),
            LineKind::Malformed(reason) => malformed_lines.push(MalformedLine {
                line_no: i + 1,
                line: lines[i].to_string(),
                reason,
            }),
            LineKind::Prose => unreachable!(),
        }
    }
    ParsedPrediction {
        id: g.id.clone(),
        reasoning: lines[..block_start].join("\n").trim().to_string(),
        records,
        malformed_lines,
    }
}

/// One dataset instance: an image-text pair with gold entities.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub image_ref: String,
    pub dims: ImageDims,
    pub gold: Vec<EntityRecord<f64>>,
    pub reasoning: Option<String>,
}

/// Box coordinates on the wire; integral values are written without a
/// fractional part.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(transparent)]
struct WireBox([f64; 4]);

impl Serialize for WireBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(4))?;
        for &c in &self.0 {
            if c.fract() == 0.0 && c.abs() < 9.0e15 {
                seq.serialize_element(&(c as i64))?;
            } else {
                seq.serialize_element(&c)?;
            }
        }
        seq.end()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEntity {
    span: String,
    #[serde(rename = "type")]
    etype: String,
    #[serde(rename = "box")]
    bbox: Option<WireBox>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireExample {
    id: String,
    text: String,
    image_path: String,
    image_width: u32,
    image_height: u32,
    entities: Vec<WireEntity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reasoning: Option<String>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: example {id:?}, field {field}: {reason}")]
    Invalid {
        line: usize,
        id: String,
        field: String,
        reason: String,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("cannot write example {id:?}: {reason}")]
    Unwritable { id: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn from_wire(w: WireExample, line: usize) -> Result<Example, DatasetError> {
    let invalid = |field: String, reason: String| DatasetError::Invalid {
        line,
        id: w.id.clone(),
        field,
        reason,
    };
    if w.id.trim().is_empty() {
        return Err(invalid("id".into(), "id is empty".into()));
    }
    let dims = ImageDims::new(w.image_width, w.image_height)
        .map_err(|e| invalid("image_width/image_height".into(), e.to_string()))?;
    let mut gold = Vec::with_capacity(w.entities.len());
    for (i, e) in w.entities.iter().enumerate() {
        let bbox = match e.bbox {
            None => None,
            Some(WireBox(c)) => {
                let b = BBox::from_array(c)
                    .map_err(|err| invalid(format!("entities[{i}].box"), err.to_string()))?;
                if !b.is_inside(dims) {
                    return Err(invalid(
                        format!("entities[{i}].box"),
                        format!(
                            "box {c:?} exceeds the {}x{} image",
                            dims.width(),
                            dims.height()
                        ),
                    ));
                }
                Some(b)
            }
        };
        let rec = EntityRecord::new(&e.span, &e.etype, bbox).map_err(|err| {
            let field = match err {
                RecordError::EmptySpan => "span",
                _ => "type",
            };
            invalid(format!("entities[{i}].{field}"), err.to_string())
        })?;
        gold.push(rec);
    }
    Ok(Example {
        id: w.id.clone(),
        text: w.text,
        image_ref: w.image_path,
        dims,
        gold,
        reasoning: w.reasoning,
    })
}

fn to_wire(ex: &Example) -> WireExample {
    WireExample {
        id: ex.id.clone(),
        text: ex.text.clone(),
        image_path: ex.image_ref.clone(),
        image_width: ex.dims.width(),
        image_height: ex.dims.height(),
        entities: ex
            .gold
            .iter()
            .map(|r| WireEntity {
                span: r.span.clone(),
                etype: r.etype.clone(),
                bbox: r.bbox.map(|b| WireBox(b.to_array())),
            })
            .collect(),
        reasoning: ex.reasoning.clone(),
    }
}

/// Reads a JSONL stream of any line-per-object type, skipping blank lines.
/// Yields `(1-based line number, value)`.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(
    reader: R,
) -> impl Iterator<Item = Result<(usize, T), (usize, io::Result<serde_json::Error>)>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Err(e) => Some(Err((i + 1, Err(e)))),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(
                serde_json::from_str::<T>(&l)
                    .map(|v| (i + 1, v))
                    .map_err(|e| (i + 1, Ok(e))),
            ),
        })
}

fn jsonl_error(path: &Path, (line, e): (usize, io::Result<serde_json::Error>)) -> DatasetError {
    match e {
        Ok(source) => DatasetError::Json { line, source },
        Err(source) => io_err(path)(source),
    }
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<Example>, DatasetError> {
    read_dataset_inner(reader, Path::new("<reader>"))
}

fn read_dataset_inner<R: BufRead>(reader: R, path: &Path) -> Result<Vec<Example>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for item in read_jsonl::<WireExample, _>(reader) {
        let (line, wire) = item.map_err(|e| jsonl_error(path, e))?;
        let ex = from_wire(wire, line)?;
        if !seen.insert(ex.id.clone()) {
            return Err(DatasetError::DuplicateId { line, id: ex.id });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>, DatasetError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(io_err(path))?;
    read_dataset_inner(BufReader::new(f), path)
}

/// Writes one canonical JSON object per line.
pub fn write_dataset_to<W: Write>(examples: &[Example], mut w: W) -> io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, &to_wire(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_dataset(examples: &[Example], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let f = File::create(path).map_err(io_err(path))?;
    write_dataset_to(examples, BufWriter::new(f)).map_err(io_err(path))
}

pub fn load_generations(path: impl AsRef<Path>) -> Result<Vec<Generation>, DatasetError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(io_err(path))?;
    read_jsonl::<Generation, _>(BufReader::new(f))
        .map(|item| item.map(|(_, g)| g).map_err(|e| jsonl_error(path, e)))
        .collect()
}

pub fn write_generations(gens: &[Generation], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for g in gens {
        serde_json::to_writer(&mut w, g).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Renders each example's gold records as a generation, optionally prefixed
/// by its reasoning. Useful for self-scoring and fixtures.
pub fn generations_from_gold(examples: &[Example]) -> Result<Vec<Generation>, DatasetError> {
    examples
        .iter()
        .map(|ex| {
            let records = serialize_records(&ex.gold).map_err(|e| DatasetError::Unwritable {
                id: ex.id.clone(),
                reason: e.to_string(),
            })?;
            let output = match ex.reasoning.as_deref().map(str::trim) {
                Some(r) if !r.is_empty() => format!("{r}\n{records}"),
                _ => records,
            };
            Ok(Generation {
                id: ex.id.clone(),
                output,
            })
        })
        .collect()
}

/// Closed set of entity type labels, read from a file with one label per
/// line (`#` starts a comment).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TypeVocabulary {
    labels: BTreeSet<String>,
}

impl TypeVocabulary {
    pub fn from_labels<I: IntoIterator<Item = S>, S: Into<String>>(labels: I) -> Self {
        Self {
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn parse(text: &str) -> Self {
        Self::from_labels(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty()),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels in `records` that are not in the vocabulary, with counts,
    /// sorted by label.
    pub fn unknown<'a, T: 'a>(
        &self,
        records: impl IntoIterator<Item = &'a EntityRecord<T>>,
    ) -> Vec<(String, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for r in records {
            if !self.contains(&r.etype) {
                *counts.entry(r.etype.clone()).or_insert(0) += 1;
            }
        }
        counts.into_iter().collect()
    }
}

impl fmt::Display for TypeVocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<&str> = self.labels.iter().map(String::as_str).collect();
        write!(f, "{{{}}}", labels.join(", "))
    }
}
