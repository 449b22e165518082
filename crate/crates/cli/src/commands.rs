use std::collections::{HashMap, HashSet};
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use gmner_core::databuilder::{
    build_training_set, load_training_set, validate_training_set, write_training_set,
    InstructionTemplate, Manifest, ReasoningMode, ReasoningProvider,
};
use gmner_core::grbp::{
    characterize, perturb_dataset_with, BoxSampler, GrbpConfig, PerturbOptions, PerturbStats, Snap,
};
use gmner_core::schema::{
    load_dataset, load_generations, parse_generation_with, CoordFrame, EntityRecord, Example,
    MalformedLine, TypeVocabulary,
};
use gmner_core::scoring::{oracle_score, score, Labeled, DEFAULT_THRESHOLDS};
use gmner_core::{BBox, ImageDims};
use serde::Serialize;
use serde_json::value::RawValue;

use crate::config::{FileConfig, GrbpOverrides};
use crate::{Cli, Command, Frame};

/// Error with its process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    err: anyhow::Error,
}

impl CliError {
    pub fn code(&self) -> u8 {
        self.code
    }

    pub fn inner(&self) -> &anyhow::Error {
        &self.err
    }
}

fn config(err: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: 2,
        err: err.into(),
    }
}

fn input(err: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: 3,
        err: err.into(),
    }
}

fn internal(err: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: 4,
        err: err.into(),
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Globals {
    seed: u64,
    workers: Option<usize>,
    file: FileConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(p) = &cli.config {
        require_file(p).map_err(config)?;
    }
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(config)?,
        None => FileConfig::default(),
    };
    if cli.workers == Some(0) {
        return Err(config(anyhow!("--workers must be >= 1")));
    }
    let g = Globals {
        seed: cli.seed.or(file.grbp.seed).unwrap_or(0),
        workers: cli.workers,
        file,
    };
    match cli.command {
        Command::Score {
            gold,
            generations,
            thresholds,
            out,
            frame,
            types,
            oracle,
        } => cmd_score(
            &g,
            &gold,
            &generations,
            thresholds,
            out.as_deref(),
            frame,
            types,
            oracle,
        ),
        Command::Perturb { dataset, out, grbp } => cmd_perturb(&g, &dataset, &out, &grbp),
        Command::BuildTrain {
            dataset,
            traces,
            inline_reasoning,
            no_cot,
            template,
            out,
            grbp,
        } => {
            let source = match (traces, inline_reasoning, no_cot) {
                (Some(p), _, _) => Reasoning::Traces(p),
                (None, true, _) => Reasoning::Inline,
                (None, false, true) => Reasoning::None,
                (None, false, false) => {
                    return Err(config(anyhow!(
                        "one of --traces, --inline-reasoning or --no-cot is required"
                    )))
                }
            };
            cmd_build(&g, &dataset, source, template.as_deref(), &out, &grbp)
        }
        Command::ValidateTrain {
            train,
            gold,
            manifest,
            strict,
        } => cmd_validate(&train, gold.as_deref(), manifest.as_deref(), strict),
        Command::Sweep {
            betas,
            gammas,
            taus,
            n_samples,
            dataset,
            image_size,
            box_frac,
            out,
            grbp,
        } => {
            let sampler = match dataset {
                Some(p) => SamplerSpec::Dataset(p),
                None => SamplerSpec::Uniform {
                    image_size,
                    box_frac,
                },
            };
            cmd_sweep(
                &g,
                &betas,
                gammas.as_deref(),
                taus.as_deref(),
                n_samples,
                sampler,
                &out,
                &grbp,
            )
        }
        Command::Parse {
            generations,
            out,
            frame,
            gold,
        } => cmd_parse(&generations, &out, frame, gold.as_deref()),
    }
}

fn require_file(p: &Path) -> anyhow::Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(anyhow!("{}: no such file", p.display()))
    }
}

fn require_out_dir(p: &Path) -> anyhow::Result<()> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(anyhow!(
            "{}: output directory does not exist",
            dir.display()
        )),
        _ if p.is_dir() => Err(anyhow!("{}: is a directory", p.display())),
        _ => Ok(()),
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = OsString::from(out.as_os_str());
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path)
            .with_context(|| format!("creating {}", path.display()))
            .map_err(input)?,
    );
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(anyhow::Error::from)
        .and_then(|_| w.write_all(b"\n").map_err(Into::into))
        .and_then(|_| w.flush().map_err(Into::into))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(input)
}

fn frame_for(frame: Frame, dims: Option<ImageDims>) -> CoordFrame {
    match (frame, dims) {
        (Frame::Normalized1000, Some(d)) => CoordFrame::Normalized1000(d),
        _ => CoordFrame::Absolute,
    }
}

#[derive(Serialize)]
struct GenerationStats {
    n_generations: usize,
    /// Gold ids with no generation; scored as empty predictions.
    missing_ids: Vec<String>,
    /// Generation ids absent from gold; ignored.
    unknown_ids: Vec<String>,
    malformed_lines: usize,
    /// Predicted types outside the vocabulary, with counts.
    unknown_types: Vec<(String, usize)>,
}

#[derive(Serialize)]
struct ScoreFile<'a> {
    metrics: &'a RawValue,
    generations: GenerationStats,
}

#[allow(clippy::too_many_arguments)]
fn cmd_score(
    g: &Globals,
    gold_path: &Path,
    gen_path: &Path,
    thresholds: Option<Vec<f64>>,
    out: Option<&Path>,
    frame: Frame,
    types: Option<PathBuf>,
    oracle: bool,
) -> Result<()> {
    require_file(gold_path).map_err(input)?;
    require_file(gen_path).map_err(input)?;
    let types = types.or_else(|| g.file.scoring.types.clone());
    if let Some(t) = &types {
        require_file(t).map_err(config)?;
    }
    if let Some(o) = out {
        require_out_dir(o).map_err(input)?;
    }
    let thresholds = thresholds
        .or_else(|| g.file.scoring.thresholds.clone())
        .unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
    let vocab = types
        .map(|t| TypeVocabulary::load(&t).with_context(|| format!("reading {}", t.display())))
        .transpose()
        .map_err(config)?;

    let gold = load_dataset(gold_path).map_err(input)?;
    let gens = load_generations(gen_path).map_err(input)?;
    let dims: HashMap<&str, ImageDims> = gold.iter().map(|e| (e.id.as_str(), e.dims)).collect();

    let parsed: Vec<_> = gens
        .iter()
        .map(|gen| {
            let f = frame_for(frame, dims.get(gen.id.as_str()).copied());
            parse_generation_with::<f64>(gen, f)
        })
        .collect();
    let gen_ids: HashSet<&str> = gens.iter().map(|g| g.id.as_str()).collect();
    let stats = GenerationStats {
        n_generations: gens.len(),
        missing_ids: gold
            .iter()
            .filter(|e| !gen_ids.contains(e.id.as_str()))
            .map(|e| e.id.clone())
            .collect(),
        unknown_ids: gens
            .iter()
            .filter(|g| !dims.contains_key(g.id.as_str()))
            .map(|g| g.id.clone())
            .collect(),
        malformed_lines: parsed.iter().map(|p| p.malformed_lines.len()).sum(),
        unknown_types: vocab
            .as_ref()
            .map(|v| v.unknown(parsed.iter().flat_map(|p| p.records.iter())))
            .unwrap_or_default(),
    };

    let preds: Vec<Labeled<f64>> = parsed.into_iter().map(|p| (p.id, p.records)).collect();
    let golds: Vec<Labeled<f64>> = gold.into_iter().map(|e| (e.id, e.gold)).collect();
    let report = if oracle {
        oracle_score(&preds, &golds, &thresholds)
    } else {
        score(&preds, &golds, &thresholds)
    }
    .map_err(|e| match e {
        gmner_core::scoring::ScoreError::Threshold(_) => config(e),
        _ => input(e),
    })?;

    println!("{report}");
    println!(
        "generations: {} ({} missing, {} unknown ids, {} malformed lines)",
        stats.n_generations,
        stats.missing_ids.len(),
        stats.unknown_ids.len(),
        stats.malformed_lines
    );
    for (label, n) in &stats.unknown_types {
        log::warn!("predicted type {label:?} is not in the vocabulary ({n} records)");
    }
    if let Some(o) = out {
        let metrics =
            RawValue::from_string(report.to_json().replace('\n', "\n  ")).map_err(internal)?;
        write_json(
            &ScoreFile {
                metrics: &metrics,
                generations: stats,
            },
            o,
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PerturbManifest {
    toolkit_version: &'static str,
    grbp: GrbpConfig,
    base_seed: u64,
    stats: PerturbStats,
}

fn cmd_perturb(g: &Globals, dataset: &Path, out: &Path, flags: &GrbpOverrides) -> Result<()> {
    require_file(dataset).map_err(input)?;
    require_out_dir(out).map_err(input)?;
    let cfg = flags.resolve(&g.file.grbp).map_err(config)?;
    let examples = load_dataset(dataset).map_err(input)?;
    let opts = PerturbOptions {
        snap: Snap::None,
        workers: g.workers,
    };
    let (perturbed, stats) = perturb_dataset_with(&examples, &cfg, g.seed, &opts).map_err(input)?;
    check_guard(&examples, &perturbed, cfg.tau).map_err(internal)?;

    gmner_core::write_dataset(&perturbed, out).map_err(input)?;
    write_json(
        &PerturbManifest {
            toolkit_version: env!("CARGO_PKG_VERSION"),
            grbp: cfg,
            base_seed: g.seed,
            stats,
        },
        &manifest_path(out),
    )?;
    println!(
        "perturbed {} boxes: {} accepted, {} guard fallbacks, {} below min_size",
        stats.boxes, stats.accepted, stats.guard_fallbacks, stats.small_boxes
    );
    Ok(())
}

/// Every output box must equal its input box or overlap it with IoU >= tau.
fn check_guard(before: &[Example], after: &[Example], tau: f64) -> anyhow::Result<()> {
    if before.len() != after.len() {
        return Err(anyhow!("perturbation changed the number of examples"));
    }
    for (a, b) in before.iter().zip(after) {
        if a.id != b.id || a.gold.len() != b.gold.len() {
            return Err(anyhow!(
                "perturbation reordered or dropped records in {}",
                a.id
            ));
        }
        for (i, (ra, rb)) in a.gold.iter().zip(&b.gold).enumerate() {
            let ok = match (&ra.bbox, &rb.bbox) {
                (None, None) => true,
                (Some(x), Some(y)) => (x == y || y.iou(x) >= tau) && y.is_inside(b.dims),
                _ => false,
            };
            if !ok {
                return Err(anyhow!("guard violated for {} record {i}", a.id));
            }
        }
    }
    Ok(())
}

enum Reasoning {
    Traces(PathBuf),
    Inline,
    None,
}

fn cmd_build(
    g: &Globals,
    dataset: &Path,
    source: Reasoning,
    template: Option<&Path>,
    out: &Path,
    flags: &GrbpOverrides,
) -> Result<()> {
    require_file(dataset).map_err(input)?;
    if let Reasoning::Traces(p) = &source {
        require_file(p).map_err(input)?;
    }
    if let Some(t) = template {
        require_file(t).map_err(config)?;
    }
    require_out_dir(out).map_err(input)?;
    let cfg = flags.resolve(&g.file.grbp).map_err(config)?;
    let template = match template {
        Some(t) => InstructionTemplate::load(t).map_err(config)?,
        None => InstructionTemplate::default(),
    };
    let examples = load_dataset(dataset).map_err(input)?;
    let provider = match &source {
        Reasoning::Traces(p) => Some(ReasoningProvider::load(p).map_err(input)?),
        Reasoning::Inline => Some(ReasoningProvider::from_examples(&examples)),
        Reasoning::None => None,
    };
    let mode = match &provider {
        Some(p) => ReasoningMode::Cot(p),
        None => ReasoningMode::NoCot,
    };
    let built =
        build_training_set(&examples, &template, mode, &cfg, g.seed, g.workers).map_err(input)?;

    let report = validate_training_set(&built.examples, Some(&examples), Some(cfg.tau));
    if !report.is_clean() {
        return Err(internal(anyhow!(
            "built set failed validation: {} malformed lines, {} guard violations",
            report.malformed_lines.len(),
            report.guard_violations.len()
        )));
    }

    write_training_set(&built.examples, out).map_err(input)?;
    built.manifest.write(manifest_path(out)).map_err(input)?;
    for s in &built.skipped {
        log::info!("skipped {}: {}", s.id, s.reason);
    }
    let c = built.manifest.counts;
    println!(
        "emitted {} of {} examples ({} missing reasoning, {} rejected reasoning)",
        c.emitted, c.input, c.skipped_missing_reasoning, c.skipped_rejected_reasoning
    );
    println!(
        "boxes: {} total, {} perturbed, {} guard fallbacks, {} below min_size",
        c.boxes, c.boxes_perturbed, c.guard_fallbacks, c.small_boxes
    );
    Ok(())
}

fn cmd_validate(
    train: &Path,
    gold: Option<&Path>,
    manifest: Option<&Path>,
    strict: bool,
) -> Result<()> {
    require_file(train).map_err(input)?;
    if let Some(p) = gold {
        require_file(p).map_err(input)?;
    }
    if let Some(p) = manifest {
        require_file(p).map_err(input)?;
    }
    let manifest = match manifest {
        Some(p) => Some(Manifest::load(p).map_err(input)?),
        None => {
            let p = manifest_path(train);
            if p.is_file() {
                Some(Manifest::load(&p).map_err(input)?)
            } else {
                None
            }
        }
    };
    let tau = manifest.map(|m| m.grbp.tau);
    let gold = gold.map(load_dataset).transpose().map_err(input)?;
    let examples = load_training_set(train).map_err(input)?;
    let report = validate_training_set(&examples, gold.as_deref(), tau);

    println!(
        "{} examples, {} records, {} malformed lines, {} guard violations, {} ids without gold",
        report.examples,
        report.records,
        report.malformed_lines.len(),
        report.guard_violations.len(),
        report.ids_without_gold
    );
    for (id, m) in &report.malformed_lines {
        println!(
            "malformed {id} line {}: {} ({})",
            m.line_no, m.line, m.reason
        );
    }
    for v in &report.guard_violations {
        match v.record {
            Some(i) => println!("violation {} record {i}: {}", v.id, v.reason),
            None => println!("violation {}: {}", v.id, v.reason),
        }
    }
    if strict && !report.is_clean() {
        return Err(internal(anyhow!("training set failed validation")));
    }
    Ok(())
}

enum SamplerSpec {
    Dataset(PathBuf),
    Uniform {
        image_size: String,
        box_frac: String,
    },
}

fn parse_pair<T: std::str::FromStr>(s: &str, sep: char, what: &str) -> anyhow::Result<(T, T)> {
    let bad = || anyhow!("invalid {what} {s:?}");
    let (a, b) = s.split_once(sep).ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

#[derive(Serialize)]
struct SweepCsvRow {
    beta: f64,
    gamma: f64,
    tau: f64,
    n_samples: usize,
    mean_iou: f64,
    mean_iou_accepted: f64,
    acceptance_rate: f64,
    fallback_rate: f64,
    small_box_rate: f64,
    #[serde(rename = "acc_at_0.5")]
    acc_at_half: f64,
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    g: &Globals,
    betas: &[f64],
    gammas: Option<&[f64]>,
    taus: Option<&[f64]>,
    n_samples: usize,
    sampler: SamplerSpec,
    out: &Path,
    flags: &GrbpOverrides,
) -> Result<()> {
    if let SamplerSpec::Dataset(p) = &sampler {
        require_file(p).map_err(input)?;
    }
    require_out_dir(out).map_err(input)?;
    let base = flags.resolve(&g.file.grbp).map_err(config)?;
    let sampler = match sampler {
        SamplerSpec::Dataset(p) => {
            let boxes: Vec<(BBox<f64>, ImageDims)> = load_dataset(&p)
                .map_err(input)?
                .iter()
                .flat_map(|ex| ex.gold.iter().filter_map(|r| r.bbox.map(|b| (b, ex.dims))))
                .collect();
            if boxes.is_empty() {
                return Err(input(anyhow!("{}: dataset has no boxes", p.display())));
            }
            BoxSampler::Cycle(boxes)
        }
        SamplerSpec::Uniform {
            image_size,
            box_frac,
        } => {
            let (w, h): (u32, u32) =
                parse_pair(&image_size, 'x', "--image-size").map_err(config)?;
            let dims = ImageDims::new(w, h).map_err(config)?;
            let (min_frac, max_frac) = parse_pair(&box_frac, ':', "--box-frac").map_err(config)?;
            BoxSampler::Uniform {
                dims,
                min_frac,
                max_frac,
            }
        }
    };
    let jitter: Vec<(f64, f64)> = match gammas {
        Some(gs) => betas
            .iter()
            .flat_map(|&b| gs.iter().map(move |&g| (b, g)))
            .collect(),
        None => betas.iter().map(|&b| (b, b)).collect(),
    };
    let taus = taus.map(<[f64]>::to_vec).unwrap_or_else(|| vec![base.tau]);
    let grid: Vec<GrbpConfig> = jitter
        .iter()
        .flat_map(|&(beta, gamma)| {
            taus.iter().map(move |&tau| GrbpConfig {
                beta,
                gamma,
                tau,
                ..base
            })
        })
        .collect();

    let rows =
        characterize::<f64>(&grid, &sampler, n_samples, g.seed, g.workers).map_err(config)?;
    let mut w = csv::Writer::from_path(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(input)?;
    println!(
        "{:>6} {:>6} {:>5} {:>9} {:>9} {:>9} {:>9}",
        "beta", "gamma", "tau", "mean_iou", "accepted", "fallback", "acc@0.5"
    );
    for r in &rows {
        println!(
            "{:>6.3} {:>6.3} {:>5.2} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.beta, r.gamma, r.tau, r.mean_iou, r.acceptance_rate, r.fallback_rate, r.acc_at_half
        );
        w.serialize(SweepCsvRow {
            beta: r.beta,
            gamma: r.gamma,
            tau: r.tau,
            n_samples: r.n_samples,
            mean_iou: r.mean_iou,
            mean_iou_accepted: r.mean_iou_accepted,
            acceptance_rate: r.acceptance_rate,
            fallback_rate: r.fallback_rate,
            small_box_rate: r.small_box_rate,
            acc_at_half: r.acc_at_half,
        })
        .map_err(input)?;
    }
    w.flush()
        .with_context(|| format!("writing {}", out.display()))
        .map_err(input)
}

#[derive(Serialize)]
struct WireRecord<'a> {
    span: &'a str,
    #[serde(rename = "type")]
    etype: &'a str,
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
}

#[derive(Serialize)]
struct ParsedLine<'a> {
    id: &'a str,
    reasoning: &'a str,
    records: Vec<WireRecord<'a>>,
    malformed_lines: &'a [MalformedLine],
}

fn wire(r: &EntityRecord<f64>) -> WireRecord<'_> {
    WireRecord {
        span: &r.span,
        etype: &r.etype,
        bbox: r.bbox.map(|b| b.to_array()),
    }
}

fn cmd_parse(gen_path: &Path, out: &Path, frame: Frame, gold: Option<&Path>) -> Result<()> {
    require_file(gen_path).map_err(input)?;
    if let Some(p) = gold {
        require_file(p).map_err(input)?;
    }
    require_out_dir(out).map_err(input)?;
    if frame == Frame::Normalized1000 && gold.is_none() {
        return Err(config(anyhow!(
            "--frame normalized-1000 needs --gold for image sizes"
        )));
    }
    let gold = gold.map(load_dataset).transpose().map_err(input)?;
    let dims: HashMap<&str, ImageDims> = gold
        .iter()
        .flatten()
        .map(|e| (e.id.as_str(), e.dims))
        .collect();
    let gens = load_generations(gen_path).map_err(input)?;

    let mut w = BufWriter::new(
        File::create(out)
            .with_context(|| format!("creating {}", out.display()))
            .map_err(input)?,
    );
    let (mut n_records, mut n_malformed, mut n_empty, mut n_no_dims) = (0, 0, 0, 0);
    for gen in &gens {
        let d = dims.get(gen.id.as_str()).copied();
        if frame == Frame::Normalized1000 && d.is_none() {
            n_no_dims += 1;
        }
        let p = parse_generation_with::<f64>(gen, frame_for(frame, d));
        n_records += p.records.len();
        n_malformed += p.malformed_lines.len();
        n_empty += usize::from(p.records.is_empty());
        let line = ParsedLine {
            id: &p.id,
            reasoning: &p.reasoning,
            records: p.records.iter().map(wire).collect(),
            malformed_lines: &p.malformed_lines,
        };
        serde_json::to_writer(&mut w, &line)
            .map_err(anyhow::Error::from)
            .and_then(|_| w.write_all(b"\n").map_err(Into::into))
            .with_context(|| format!("writing {}", out.display()))
            .map_err(input)?;
    }
    w.flush()
        .with_context(|| format!("writing {}", out.display()))
        .map_err(input)?;
    if n_no_dims > 0 {
        log::warn!("{n_no_dims} generations have no gold image size; read as absolute pixels");
    }
    println!(
        "{} generations, {} records, {} malformed lines, {} without records",
        gens.len(),
        n_records,
        n_malformed,
        n_empty
    );
    Ok(())
}
