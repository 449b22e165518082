//! IoU-guarded Gaussian box perturbation.
//!
//! Each try jitters the box center by `N(0, beta^2)` times the box size and
//! the width/height by a multiplicative factor `clamp(1 + N(0, gamma^2),
//! s_min, s_max)`, floors the new extents at `min_size`, clips the candidate
//! to the image and accepts it if its IoU with the original box is at least
//! `tau`. After `max_tries` rejections the original box is returned. Boxes
//! narrower or shorter than `min_size` are returned untouched without
//! consuming randomness.
//!
//! Every try consumes exactly four standard normals in the order
//! `dx, dy, ew, eh` (two Box–Muller pairs, see [`crate::rng`]).

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError, ImageDims};
use crate::rng::{derive_seed, DrawStream};
use crate::scalar::Scalar;
use crate::schema::Example;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("beta must be finite and >= 0, got {0}")]
    Beta(f64),
    #[error("gamma must be finite and >= 0, got {0}")]
    Gamma(f64),
    #[error("tau must lie in [0, 1], got {0}")]
    Tau(f64),
    #[error("max_tries must be >= 1")]
    MaxTries,
    #[error("min_size must be finite and > 0, got {0}")]
    MinSize(f64),
    #[error("scale bounds must satisfy 0 < s_min <= 1 <= s_max, got [{0}, {1}]")]
    ScaleBounds(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrbpError {
    #[error("invalid GRBP config: {0}")]
    Config(#[from] ConfigError),
    #[error("box {bbox} lies outside the {width}x{height} image")]
    OutsideImage {
        bbox: String,
        width: u32,
        height: u32,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Perturbation knobs. `beta` and `gamma` are unitless standard deviations
/// relative to box size; `min_size` is in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrbpConfig {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub max_tries: u32,
    pub min_size: f64,
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for GrbpConfig {
    fn default() -> Self {
        Self {
            beta: 0.03,
            gamma: 0.03,
            tau: 0.7,
            max_tries: 10,
            min_size: 4.0,
            s_min: 0.8,
            s_max: 1.2,
        }
    }
}

impl GrbpConfig {
    pub fn with_jitter(beta: f64, gamma: f64) -> Self {
        Self {
            beta,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(ConfigError::Beta(self.beta));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(ConfigError::Gamma(self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ConfigError::Tau(self.tau));
        }
        if self.max_tries == 0 {
            return Err(ConfigError::MaxTries);
        }
        if !(self.min_size.is_finite() && self.min_size > 0.0) {
            return Err(ConfigError::MinSize(self.min_size));
        }
        if !(self.s_min > 0.0 && self.s_min <= 1.0 && self.s_max >= 1.0 && self.s_max.is_finite()) {
            return Err(ConfigError::ScaleBounds(self.s_min, self.s_max));
        }
        Ok(())
    }
}

/// Result of one perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbOutcome<T> {
    pub bbox: BBox<T>,
    /// The original box was returned, either because it was below
    /// `min_size` or because every try failed the guard.
    pub was_fallback: bool,
    /// Number of tries drawn; 0 for the small-box early return.
    pub tries_used: u32,
}

/// Whether candidates are snapped to the integer pixel grid before the guard
/// check. Snapping makes the guard certify the box that ends up in a
/// serialized training target rather than its unrounded precursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Snap {
    #[default]
    None,
    Pixel,
}

/// Perturbs `b` with the stream seeded by `seed`.
pub fn perturb<T: Scalar>(
    b: &BBox<T>,
    dims: ImageDims,
    cfg: &GrbpConfig,
    seed: u64,
) -> Result<PerturbOutcome<T>, GrbpError> {
    perturb_snapped(b, dims, cfg, seed, Snap::None)
}

pub fn perturb_snapped<T: Scalar>(
    b: &BBox<T>,
    dims: ImageDims,
    cfg: &GrbpConfig,
    seed: u64,
    snap: Snap,
) -> Result<PerturbOutcome<T>, GrbpError> {
    cfg.validate()?;
    if !b.is_inside(dims) {
        return Err(GrbpError::OutsideImage {
            bbox: format!("{b:?}"),
            width: dims.width(),
            height: dims.height(),
        });
    }
    let fallback = |tries_used| PerturbOutcome {
        bbox: *b,
        was_fallback: true,
        tries_used,
    };

    let min_size = T::of(cfg.min_size);
    let (w, h) = (b.width(), b.height());
    if w < min_size || h < min_size {
        return Ok(fallback(0));
    }

    let tau = T::of(cfg.tau);
    let two = T::of(2.0);
    let mut draws = DrawStream::new(seed);
    for t in 1..=cfg.max_tries {
        let (zx, zy) = draws.normal_pair();
        let (zw, zh) = draws.normal_pair();

        let dx = T::of(cfg.beta * zx) * w;
        let dy = T::of(cfg.beta * zy) * h;
        let aw = T::of((1.0 + cfg.gamma * zw).clamp(cfg.s_min, cfg.s_max));
        let ah = T::of((1.0 + cfg.gamma * zh).clamp(cfg.s_min, cfg.s_max));
        let new_w = (w * aw).max(min_size);
        let new_h = (h * ah).max(min_size);

        // Center/size round trip written as edge offsets: algebraically
        // identical, and bit-exact when the jitter is zero.
        let grow_x = (new_w - w) / two;
        let grow_y = (new_h - h) / two;
        let candidate = BBox::new(
            b.x1() + dx - grow_x,
            b.y1() + dy - grow_y,
            b.x2() + dx + grow_x,
            b.y2() + dy + grow_y,
        )
        .and_then(|c| c.clip_to_image(dims))
        .and_then(|c| match snap {
            Snap::None => Ok(c),
            Snap::Pixel => c.rounded(),
        });
        let Ok(candidate) = candidate else {
            continue;
        };
        if candidate.iou(b) >= tau {
            return Ok(PerturbOutcome {
                bbox: candidate,
                was_fallback: false,
                tries_used: t,
            });
        }
    }
    Ok(fallback(cfg.max_tries))
}

/// Seed used for the `record_index`-th gold record of example `id`.
pub fn record_seed(base_seed: u64, id: &str, record_index: usize) -> u64 {
    derive_seed(base_seed, id, record_index as u64)
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("example {id:?}, entity {record}: {source}")]
pub struct DatasetPerturbError {
    pub id: String,
    pub record: usize,
    #[source]
    pub source: GrbpError,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PerturbStats {
    pub boxes: usize,
    pub accepted: usize,
    pub guard_fallbacks: usize,
    pub small_boxes: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PerturbOptions {
    pub snap: Snap,
    /// Worker threads; `None` uses the global rayon pool. The output never
    /// depends on this value.
    pub workers: Option<usize>,
}

/// Replaces every gold box with its perturbation. Records without boxes are
/// passed through; the output keeps input order.
pub fn perturb_dataset(
    examples: &[Example],
    cfg: &GrbpConfig,
    base_seed: u64,
) -> Result<Vec<Example>, DatasetPerturbError> {
    perturb_dataset_with(examples, cfg, base_seed, &PerturbOptions::default()).map(|(xs, _)| xs)
}

pub fn perturb_dataset_with(
    examples: &[Example],
    cfg: &GrbpConfig,
    base_seed: u64,
    opts: &PerturbOptions,
) -> Result<(Vec<Example>, PerturbStats), DatasetPerturbError> {
    let one = |ex: &Example| -> Result<(Example, PerturbStats), DatasetPerturbError> {
        let mut out = ex.clone();
        let mut stats = PerturbStats::default();
        for (i, rec) in out.gold.iter_mut().enumerate() {
            let Some(b) = rec.bbox else { continue };
            let seed = record_seed(base_seed, &ex.id, i);
            let o = perturb_snapped(&b, ex.dims, cfg, seed, opts.snap).map_err(|source| {
                DatasetPerturbError {
                    id: ex.id.clone(),
                    record: i,
                    source,
                }
            })?;
            stats.boxes += 1;
            match (o.was_fallback, o.tries_used) {
                (false, _) => stats.accepted += 1,
                (true, 0) => stats.small_boxes += 1,
                (true, _) => stats.guard_fallbacks += 1,
            }
            rec.bbox = Some(o.bbox);
        }
        Ok((out, stats))
    };

    let results: Vec<_> = run_with_workers(opts.workers, || {
        examples.par_iter().map(one).collect::<Vec<_>>()
    });

    let mut out = Vec::with_capacity(results.len());
    let mut total = PerturbStats::default();
    for r in results {
        let (ex, s) = r?;
        total.boxes += s.boxes;
        total.accepted += s.accepted;
        total.guard_fallbacks += s.guard_fallbacks;
        total.small_boxes += s.small_boxes;
        out.push(ex);
    }
    debug!("perturbed {} boxes: {:?}", total.boxes, total);
    Ok((out, total))
}

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool.
pub(crate) fn run_with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                f()
            }
        },
        None => f(),
    }
}

/// Source of boxes for the Monte-Carlo characterization.
#[derive(Debug, Clone)]
pub enum BoxSampler {
    /// Uniformly placed boxes whose width and height are uniform fractions
    /// of the image size in `[min_frac, max_frac)`.
    Uniform {
        dims: ImageDims,
        min_frac: f64,
        max_frac: f64,
    },
    /// Boxes taken in order (cycling) from a fixed list, e.g. dataset gold.
    Cycle(Vec<(BBox<f64>, ImageDims)>),
}

impl BoxSampler {
    fn sample(&self, stream: &mut DrawStream, i: usize) -> (BBox<f64>, ImageDims) {
        match self {
            BoxSampler::Uniform {
                dims,
                min_frac,
                max_frac,
            } => {
                let (iw, ih) = (f64::from(dims.width()), f64::from(dims.height()));
                let w = iw * stream.uniform_in(*min_frac, *max_frac);
                let h = ih * stream.uniform_in(*min_frac, *max_frac);
                let x1 = stream.uniform_in(0.0, iw - w);
                let y1 = stream.uniform_in(0.0, ih - h);
                let b = BBox::new(x1, y1, (x1 + w).min(iw), (y1 + h).min(ih))
                    .expect("sampler fractions are validated to give positive extents");
                (b, *dims)
            }
            BoxSampler::Cycle(boxes) => boxes[i % boxes.len()],
        }
    }

    fn validate(&self) -> Result<(), CharacterizeError> {
        match self {
            BoxSampler::Uniform {
                min_frac, max_frac, ..
            } if !(*min_frac > 0.0 && min_frac <= max_frac && *max_frac <= 1.0) => {
                Err(CharacterizeError::Sampler(format!(
                    "box fractions must satisfy 0 < min <= max <= 1, got [{min_frac}, {max_frac}]"
                )))
            }
            BoxSampler::Cycle(boxes) if boxes.is_empty() => Err(CharacterizeError::Sampler(
                "no boxes to cycle through".into(),
            )),
            BoxSampler::Cycle(boxes) => match boxes.iter().position(|(b, d)| !b.is_inside(*d)) {
                Some(i) => Err(CharacterizeError::Sampler(format!(
                    "box {i} lies outside its image"
                ))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CharacterizeError {
    #[error("grid entry {index} (beta={beta}, gamma={gamma}): {source}")]
    InvalidEntry {
        index: usize,
        beta: f64,
        gamma: f64,
        #[source]
        source: ConfigError,
    },
    #[error("n_samples must be >= 1")]
    NoSamples,
    #[error("invalid box sampler: {0}")]
    Sampler(String),
}

/// Monte-Carlo statistics for one grid entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub n_samples: usize,
    /// Mean IoU between output and original over all samples.
    pub mean_iou: f64,
    /// Mean IoU over guard-accepted outputs only (0 when none were accepted).
    pub mean_iou_accepted: f64,
    /// Accepted candidates per drawn try.
    pub acceptance_rate: f64,
    /// Fraction of samples that exhausted `max_tries`.
    pub fallback_rate: f64,
    /// Fraction of samples below `min_size` (returned without drawing).
    pub small_box_rate: f64,
    /// Fraction of outputs with IoU >= 0.5 against the original.
    pub acc_at_half: f64,
}

/// Runs every grid entry over the same `n_samples` boxes and seeds, so rows
/// differ only through their configs.
pub fn characterize<T: Scalar>(
    grid: &[GrbpConfig],
    sampler: &BoxSampler,
    n_samples: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<Vec<SweepRow>, CharacterizeError> {
    if n_samples == 0 {
        return Err(CharacterizeError::NoSamples);
    }
    sampler.validate()?;
    for (index, cfg) in grid.iter().enumerate() {
        cfg.validate()
            .map_err(|source| CharacterizeError::InvalidEntry {
                index,
                beta: cfg.beta,
                gamma: cfg.gamma,
                source,
            })?;
    }

    let samples: Vec<(BBox<T>, ImageDims, u64)> = (0..n_samples)
        .map(|i| {
            let mut stream = DrawStream::new(derive_seed(seed, "sampler", i as u64));
            let (b, dims) = sampler.sample(&mut stream, i);
            (b.cast::<T>(), dims, derive_seed(seed, "perturb", i as u64))
        })
        .collect();

    let rows = grid
        .iter()
        .map(|cfg| {
            let outcomes: Vec<(f64, PerturbOutcome<T>)> = run_with_workers(workers, || {
                samples
                    .par_iter()
                    .map(|(b, dims, s)| {
                        let o = perturb(b, *dims, cfg, *s)
                            .expect("config and boxes were validated up front");
                        (o.bbox.iou(b).as_f64(), o)
                    })
                    .collect()
            });
            summarize(cfg, &outcomes)
        })
        .collect();
    Ok(rows)
}

fn summarize<T>(cfg: &GrbpConfig, outcomes: &[(f64, PerturbOutcome<T>)]) -> SweepRow {
    let n = outcomes.len();
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mut iou_sum = 0.0;
    let mut accepted_iou_sum = 0.0;
    let (mut accepted, mut tries, mut fallbacks, mut small, mut above_half) = (0, 0, 0, 0, 0);
    for (v, o) in outcomes {
        iou_sum += v;
        tries += o.tries_used as usize;
        if *v >= 0.5 {
            above_half += 1;
        }
        match (o.was_fallback, o.tries_used) {
            (false, _) => {
                accepted += 1;
                accepted_iou_sum += v;
            }
            (true, 0) => small += 1,
            (true, _) => fallbacks += 1,
        }
    }
    SweepRow {
        beta: cfg.beta,
        gamma: cfg.gamma,
        tau: cfg.tau,
        n_samples: n,
        mean_iou: iou_sum / n as f64,
        mean_iou_accepted: if accepted == 0 {
            0.0
        } else {
            accepted_iou_sum / accepted as f64
        },
        acceptance_rate: ratio(accepted, tries),
        fallback_rate: ratio(fallbacks, n),
        small_box_rate: ratio(small, n),
        acc_at_half: ratio(above_half, n),
    }
}
