//! Chain-of-thought instruction-tuning sets with perturbed box targets.
//!
//! Each output line is `{"id", "instruction", "image_path", "input_text",
//! "target"}` where `target` is the reasoning trace, a newline, then the
//! gold records (in annotation order) with boxes replaced by their GRBP
//! perturbations. Candidates are snapped to integer pixels before the IoU
//! guard, so the guard holds for the exact coordinates written to the
//! target.
//!
//! Reasoning traces come from a JSONL file of `{"id", "reasoning"}` lines.
//! A trace containing any line that looks like a record is rejected, since
//! it would be read back as part of the record block.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grbp::{perturb_dataset_with, DatasetPerturbError, GrbpConfig, PerturbOptions, Snap};
use crate::schema::{
    is_record_candidate, parse_generation, read_jsonl, serialize_records, Example, Generation,
    MalformedLine, RecordError,
};

pub const TEXT_PLACEHOLDER: &str = "{text}";

const DEFAULT_TEMPLATE: &str = "\
You are given an image and a sentence from a social media post. Find every named entity \
in the sentence, assign it an entity type, and ground it to the image region it refers to \
when such a region exists.

Sentence: {text}

First reason step by step about the sentence and the image: decide which visual cues are \
relevant and what background knowledge helps. Then write the entities, one per line, as

span | type | [x1, y1, x2, y2]

where (x1, y1) is the top-left and (x2, y2) the bottom-right corner of the box in pixels. \
Write None in place of the box when the entity is not visible in the image.";

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(
        "template {name:?} must contain exactly one {TEXT_PLACEHOLDER} placeholder, found {found}"
    )]
    Template { name: String, found: usize },
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
    #[error("line {line}: duplicate reasoning id {id:?}")]
    DuplicateTrace { line: usize, id: String },
    #[error(transparent)]
    Perturb(#[from] DatasetPerturbError),
    #[error("example {id:?}: {source}")]
    Record {
        id: String,
        #[source]
        source: RecordError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BuildError + '_ {
    move |source| BuildError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplate {
    name: String,
    body: String,
}

impl InstructionTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self, BuildError> {
        let (name, body) = (name.into(), body.into());
        let found = body.matches(TEXT_PLACEHOLDER).count();
        if found != 1 {
            return Err(BuildError::Template { name, found });
        }
        Ok(Self { name, body })
    }

    /// Reads a template file; its name is the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BuildError> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(io_err(path))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "template".into());
        Self::new(name, body.trim_end())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn render(&self, text: &str) -> String {
        self.body.replacen(TEXT_PLACEHOLDER, text, 1)
    }
}

impl Default for InstructionTemplate {
    fn default() -> Self {
        Self::new("default", DEFAULT_TEMPLATE).expect("built-in template is valid")
    }
}

/// File-backed `id -> reasoning` lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReasoningProvider {
    traces: HashMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    id: String,
    reasoning: String,
}

impl ReasoningProvider {
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            traces: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }

    /// Uses the `reasoning` field carried by dataset examples.
    pub fn from_examples(examples: &[Example]) -> Self {
        Self::from_pairs(
            examples
                .iter()
                .filter_map(|e| e.reasoning.as_ref().map(|r| (e.id.clone(), r.clone()))),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BuildError> {
        let path = path.as_ref();
        let f = File::open(path).map_err(io_err(path))?;
        let mut traces = HashMap::new();
        for item in read_jsonl::<TraceLine, _>(BufReader::new(f)) {
            let (line, t) = item.map_err(|(line, e)| match e {
                Ok(source) => BuildError::Json { line, source },
                Err(source) => io_err(path)(source),
            })?;
            if traces.insert(t.id.clone(), t.reasoning).is_some() {
                return Err(BuildError::DuplicateTrace { line, id: t.id });
            }
        }
        Ok(Self { traces })
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.traces.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ReasoningMode<'a> {
    /// Targets start with the example's reasoning trace.
    Cot(&'a ReasoningProvider),
    /// Targets hold only the record block.
    NoCot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub instruction: String,
    pub image_path: String,
    pub input_text: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skip {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildCounts {
    pub input: usize,
    pub emitted: usize,
    pub skipped_missing_reasoning: usize,
    pub skipped_rejected_reasoning: usize,
    pub boxes: usize,
    pub boxes_perturbed: usize,
    pub guard_fallbacks: usize,
    pub small_boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub toolkit_version: String,
    pub template: String,
    pub cot: bool,
    pub grbp: GrbpConfig,
    pub base_seed: u64,
    pub counts: BuildCounts,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BuildError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| BuildError::Json { line: 1, source })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), BuildError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub examples: Vec<TrainingExample>,
    pub skipped: Vec<Skip>,
    pub manifest: Manifest,
}

fn check_reasoning(trace: &str) -> Result<&str, String> {
    match trace.lines().position(is_record_candidate) {
        Some(i) => Err(format!(
            "reasoning line {} looks like an entity record: {:?}",
            i + 1,
            trace.lines().nth(i).unwrap_or_default()
        )),
        None => Ok(trace.trim()),
    }
}

/// Builds one training example per dataset example, minus those skipped for
/// missing or rejected reasoning.
pub fn build_training_set(
    dataset: &[Example],
    template: &InstructionTemplate,
    mode: ReasoningMode<'_>,
    cfg: &GrbpConfig,
    base_seed: u64,
    workers: Option<usize>,
) -> Result<BuildOutput, BuildError> {
    let mut counts = BuildCounts {
        input: dataset.len(),
        ..BuildCounts::default()
    };
    let mut skipped = Vec::new();
    let mut kept = Vec::with_capacity(dataset.len());
    let mut reasoning = Vec::with_capacity(dataset.len());
    for ex in dataset {
        let trace = match mode {
            ReasoningMode::NoCot => None,
            ReasoningMode::Cot(provider) => match provider.get(&ex.id).map(check_reasoning) {
                None => {
                    counts.skipped_missing_reasoning += 1;
                    skipped.push(Skip {
                        id: ex.id.clone(),
                        reason: "no reasoning trace for this id".into(),
                    });
                    continue;
                }
                Some(Err(reason)) => {
                    counts.skipped_rejected_reasoning += 1;
                    skipped.push(Skip {
                        id: ex.id.clone(),
                        reason,
                    });
                    continue;
                }
                Some(Ok(r)) => Some(r.to_string()),
            },
        };
        kept.push(ex.clone());
        reasoning.push(trace);
    }

    let opts = PerturbOptions {
        snap: Snap::Pixel,
        workers,
    };
    let (perturbed, stats) = perturb_dataset_with(&kept, cfg, base_seed, &opts)?;
    counts.boxes = stats.boxes;
    counts.boxes_perturbed = stats.accepted;
    counts.guard_fallbacks = stats.guard_fallbacks;
    counts.small_boxes = stats.small_boxes;

    let examples = perturbed
        .iter()
        .zip(reasoning)
        .map(|(ex, trace)| {
            let records = serialize_records(&ex.gold).map_err(|source| BuildError::Record {
                id: ex.id.clone(),
                source,
            })?;
            let target = match trace.as_deref() {
                Some(r) if !r.is_empty() => format!("{r}\n{records}"),
                _ => records,
            };
            Ok(TrainingExample {
                id: ex.id.clone(),
                instruction: template.render(&ex.text),
                image_path: ex.image_ref.clone(),
                input_text: ex.text.clone(),
                target,
            })
        })
        .collect::<Result<Vec<_>, BuildError>>()?;
    counts.emitted = examples.len();

    Ok(BuildOutput {
        examples,
        skipped,
        manifest: Manifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            template: template.name().to_string(),
            cot: matches!(mode, ReasoningMode::Cot(_)),
            grbp: *cfg,
            base_seed,
            counts,
        },
    })
}

pub fn write_training_set(
    examples: &[TrainingExample],
    path: impl AsRef<Path>,
) -> Result<(), BuildError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_training_set(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>, BuildError> {
    let path = path.as_ref();
    let f = File::open(path).map_err(io_err(path))?;
    read_jsonl::<TrainingExample, _>(BufReader::new(f))
        .map(|item| {
            item.map(|(_, t)| t).map_err(|(line, e)| match e {
                Ok(source) => BuildError::Json { line, source },
                Err(source) => io_err(path)(source),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GuardViolation {
    pub id: String,
    pub record: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub examples: usize,
    pub records: usize,
    pub malformed_lines: Vec<(String, MalformedLine)>,
    pub guard_violations: Vec<GuardViolation>,
    /// Training ids with no counterpart in the supplied gold set.
    pub ids_without_gold: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.malformed_lines.is_empty() && self.guard_violations.is_empty()
    }
}

/// Re-parses every target. With `gold` and `tau`, also checks that each
/// parsed record matches its gold record and that its box either equals the
/// gold box (as written, i.e. rounded) or has IoU >= `tau` with it.
pub fn validate_training_set(
    examples: &[TrainingExample],
    gold: Option<&[Example]>,
    tau: Option<f64>,
) -> ValidationReport {
    let gold_by_id: HashMap<&str, &Example> = gold
        .unwrap_or(&[])
        .iter()
        .map(|e| (e.id.as_str(), e))
        .collect();
    let mut report = ValidationReport {
        examples: examples.len(),
        ..ValidationReport::default()
    };
    for ex in examples {
        let parsed = parse_generation(&Generation {
            id: ex.id.clone(),
            output: ex.target.clone(),
        });
        report.records += parsed.records.len();
        report.malformed_lines.extend(
            parsed
                .malformed_lines
                .iter()
                .map(|m| (ex.id.clone(), m.clone())),
        );

        if gold.is_none() {
            continue;
        }
        let Some(g) = gold_by_id.get(ex.id.as_str()) else {
            report.ids_without_gold += 1;
            continue;
        };
        let violation = |record, reason| GuardViolation {
            id: ex.id.clone(),
            record,
            reason,
        };
        if parsed.records.len() != g.gold.len() {
            report.guard_violations.push(violation(
                None,
                format!(
                    "{} records in target, {} in gold",
                    parsed.records.len(),
                    g.gold.len()
                ),
            ));
            continue;
        }
        for (i, (p, gr)) in parsed.records.iter().zip(&g.gold).enumerate() {
            if p.span != gr.span || p.etype != gr.etype {
                report.guard_violations.push(violation(
                    Some(i),
                    format!(
                        "({}, {}) != gold ({}, {})",
                        p.span, p.etype, gr.span, gr.etype
                    ),
                ));
                continue;
            }
            match (&p.bbox, &gr.bbox) {
                (None, None) => {}
                (Some(pb), Some(gb)) => {
                    let unchanged = pb == gb || gb.rounded().is_ok_and(|r| r == *pb);
                    if let Some(tau) = tau {
                        let v = pb.iou(gb);
                        if !unchanged && v < tau {
                            report.guard_violations.push(violation(
                                Some(i),
                                format!("IoU {v:.6} with gold box is below tau {tau}"),
                            ));
                        }
                    }
                }
                _ => report
                    .guard_violations
                    .push(violation(Some(i), "box presence differs from gold".into())),
            }
        }
    }
    report
}

/// [`validate_training_set`] over a file.
pub fn validate_training_file(
    path: impl AsRef<Path>,
    gold: Option<&[Example]>,
    tau: Option<f64>,
) -> Result<ValidationReport, BuildError> {
    Ok(validate_training_set(&load_training_set(path)?, gold, tau))
}
