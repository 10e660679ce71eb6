//! Post-fit analysis: single-motion generation, error metrics,
//! reference-frame sweeps and multi-seed robustness studies.

use std::collections::BTreeMap;

use crate::generator::{Generator, GeneratorError, GeneratorSpec, LatentState, TrackInit};
use crate::optim::{fit, FitConfig, FitError};
use crate::video::{VideoError, VideoTensor};

#[derive(Debug, thiserror::Error)]
pub enum SeparationError {
    #[error("shape mismatch: generated {gen:?} vs truth {truth:?}")]
    ShapeMismatch {
        gen: (usize, usize, usize),
        truth: (usize, usize, usize),
    },
    #[error("ground truth has zero norm")]
    ZeroNormTruth,
    #[error("seed study needs at least 2 seeds, got {seeds}")]
    TooFewSeeds { seeds: usize },
    #[error("no ground truth available for motion {motion}")]
    MissingTruth { motion: usize },
    #[error("problem lists {tracks} tracks but {truths} ground-truth entries")]
    TruthCountMismatch { tracks: usize, truths: usize },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Video(#[from] VideoError),
}

/// Generates the video containing only motion `motion`: frame t uses
/// the motion's own track at t while every motion listed in
/// `fixed_frames` is overridden to its reference frame.
pub fn generate_single_motion(
    gen: &Generator<f32>,
    state: &LatentState<f32>,
    motion: usize,
    fixed_frames: &BTreeMap<usize, usize>,
) -> Result<VideoTensor, SeparationError> {
    if motion >= state.motions() {
        return Err(SeparationError::Generator(GeneratorError::MotionOutOfRange {
            index: motion,
            motions: state.motions(),
        }));
    }
    let frames = state.frames();
    let (h, w) = gen.spec().output_shape()?;
    let mut data = Vec::with_capacity(frames * h * w);
    for t in 0..frames {
        let z = state.assemble_latent(t, fixed_frames)?;
        let frame = gen.forward(&z)?;
        data.extend_from_slice(frame.data());
    }
    Ok(VideoTensor::new(frames, h, w, data)?)
}

/// Overrides fixing every motion except `motion` at frame `h`.
pub fn fix_others(motions: usize, motion: usize, h: usize) -> BTreeMap<usize, usize> {
    (0..motions).filter(|&i| i != motion).map(|i| (i, h)).collect()
}

/// Relative error `||generated - truth||_2 / ||truth||_2` over all
/// T*H*W entries, accumulated in f64.
pub fn relative_error(generated: &VideoTensor, truth: &VideoTensor) -> Result<f64, SeparationError> {
    let g_dims = (generated.frames(), generated.height(), generated.width());
    let t_dims = (truth.frames(), truth.height(), truth.width());
    if g_dims != t_dims {
        return Err(SeparationError::ShapeMismatch {
            gen: g_dims,
            truth: t_dims,
        });
    }
    let mut num = 0.0_f64;
    let mut den = 0.0_f64;
    for (&g, &t) in generated.data().iter().zip(truth.data()) {
        num += (g as f64 - t as f64).powi(2);
        den += (t as f64).powi(2);
    }
    if den == 0.0 {
        return Err(SeparationError::ZeroNormTruth);
    }
    Ok((num / den).sqrt())
}

/// Error-vs-reference-frame curve for one motion type.
#[derive(Debug, Clone)]
pub struct SweepCurve {
    pub errors: Vec<f64>,
    pub best_h: usize,
    pub best_error: f64,
}

/// Evaluates the single-motion error for every reference frame h and
/// returns the full curve with its argmin.
pub fn h_sweep(
    gen: &Generator<f32>,
    state: &LatentState<f32>,
    motion: usize,
    truth: &VideoTensor,
) -> Result<SweepCurve, SeparationError> {
    let frames = state.frames();
    let mut errors = Vec::with_capacity(frames);
    for h in 0..frames {
        let generated = generate_single_motion(gen, state, motion, &fix_others(state.motions(), motion, h))?;
        errors.push(relative_error(&generated, truth)?);
    }
    let (best_h, best_error) = errors
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
        .map(|(h, &e)| (h, e))
        .expect("at least one frame");
    Ok(SweepCurve {
        errors,
        best_h,
        best_error,
    })
}

/// Which initialization scheme a study uses per seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Orthogonal,
    Default,
}

/// A complete experiment description: the observed video, the
/// generator architecture, the dynamic track layout and optional
/// per-motion ground truth.
#[derive(Debug, Clone)]
pub struct SeparationProblem {
    pub video: VideoTensor,
    pub spec: GeneratorSpec,
    pub tracks: Vec<TrackInit>,
    pub truths: Vec<Option<VideoTensor>>,
    pub init: InitScheme,
}

impl SeparationProblem {
    fn validate(&self) -> Result<(), SeparationError> {
        if self.truths.len() != self.tracks.len() {
            return Err(SeparationError::TruthCountMismatch {
                tracks: self.tracks.len(),
                truths: self.truths.len(),
            });
        }
        Ok(())
    }
}

/// One fitted seed: per-motion best-h error (where ground truth
/// exists) and the tracked loss extremes.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    /// Per motion: (best h, error at best h), None without truth.
    pub errors: Vec<Option<(usize, f64)>>,
    pub best_loss: f64,
    pub initial_loss: f64,
}

/// Robust statistics over one metric.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Stats {
    pub median: f64,
    pub mad: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median of absolute deviations from the median.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let deviations: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&deviations)
}

pub fn stats(values: &[f64]) -> Stats {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64
    } else {
        0.0
    };
    Stats {
        median: median(values),
        mad: mad(values),
        mean,
        std: var.sqrt(),
    }
}

/// Multi-seed robustness study.
#[derive(Debug, Clone)]
pub struct SeedStudy {
    pub runs: Vec<Result<SeedRun, String>>,
    /// Per motion, over successful runs with ground truth.
    pub error_stats: Vec<Option<Stats>>,
    pub loss_stats: Option<Stats>,
    pub flagged: Vec<bool>,
    /// Seed whose first-motion error is closest to the median.
    pub median_run_seed: Option<u64>,
    /// Seed with the lowest tracked loss.
    pub best_run_seed: Option<u64>,
}

impl SeedStudy {
    pub fn successful(&self) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter_map(|r| r.as_ref().ok())
    }
}

/// Fits one seed of a problem and evaluates best-h errors per motion.
pub fn run_seed(
    problem: &SeparationProblem,
    config: &FitConfig,
    seed: u64,
) -> Result<SeedRun, SeparationError> {
    problem.validate()?;
    let mut gen = Generator::<f32>::new(problem.spec.clone())?;
    match problem.init {
        InitScheme::Orthogonal => gen.init_orthogonal(seed),
        InitScheme::Default => gen.init_default(seed),
    }
    let state = LatentState::<f32>::init(
        problem.spec.latent_dim(),
        problem.video.frames(),
        &problem.tracks,
        seed,
    )?;
    let result = fit(&gen, &state, &problem.video, config)?;
    let mut errors = Vec::with_capacity(problem.tracks.len());
    for (motion, truth) in problem.truths.iter().enumerate() {
        match truth {
            Some(truth) => {
                let curve = h_sweep(&result.best_generator, &result.best_latents, motion, truth)?;
                errors.push(Some((curve.best_h, curve.best_error)));
            }
            None => errors.push(None),
        }
    }
    Ok(SeedRun {
        seed,
        errors,
        best_loss: result.best_loss,
        initial_loss: result.loss_history[0],
    })
}

/// Flags runs whose best loss exceeds `factor` times the median best
/// loss; failed runs are always flagged.
pub fn flag_outliers(runs: &[Result<SeedRun, String>], factor: f64) -> Vec<bool> {
    let losses: Vec<f64> = runs.iter().filter_map(|r| r.as_ref().ok().map(|r| r.best_loss)).collect();
    if losses.is_empty() {
        return vec![true; runs.len()];
    }
    let threshold = factor * median(&losses);
    runs.iter()
        .map(|r| match r {
            Ok(run) => run.best_loss > threshold,
            Err(_) => true,
        })
        .collect()
}

pub const DEFAULT_OUTLIER_FACTOR: f64 = 2.0;

/// Runs independent fits for every seed and aggregates
/// median/MAD/mean/std per metric. Flagged runs stay in the row list
/// but are excluded from the aggregates.
pub fn seed_study(
    problem: &SeparationProblem,
    config: &FitConfig,
    seeds: &[u64],
    outlier_factor: f64,
) -> Result<SeedStudy, SeparationError> {
    if seeds.len() < 2 {
        return Err(SeparationError::TooFewSeeds { seeds: seeds.len() });
    }
    problem.validate()?;
    let runs: Vec<Result<SeedRun, String>> = seeds
        .iter()
        .map(|&seed| run_seed(problem, config, seed).map_err(|e| e.to_string()))
        .collect();
    let flagged = flag_outliers(&runs, outlier_factor);
    let kept: Vec<&SeedRun> = runs
        .iter()
        .zip(&flagged)
        .filter_map(|(r, &f)| if f { None } else { r.as_ref().ok() })
        .collect();
    let motions = problem.tracks.len();
    let error_stats: Vec<Option<Stats>> = (0..motions)
        .map(|motion| {
            let values: Vec<f64> = kept
                .iter()
                .filter_map(|r| r.errors[motion].map(|(_, e)| e))
                .collect();
            (!values.is_empty()).then(|| stats(&values))
        })
        .collect();
    let losses: Vec<f64> = kept.iter().map(|r| r.best_loss).collect();
    let loss_stats = (!losses.is_empty()).then(|| stats(&losses));
    let best_run_seed = kept
        .iter()
        .min_by(|a, b| a.best_loss.partial_cmp(&b.best_loss).unwrap())
        .map(|r| r.seed);
    let median_run_seed = error_stats.first().and_then(|s| s.as_ref()).and_then(|s| {
        kept.iter()
            .filter_map(|r| r.errors[0].map(|(_, e)| (r.seed, (e - s.median).abs())))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(seed, _)| seed)
    });
    Ok(SeedStudy {
        runs,
        error_stats,
        loss_stats,
        flagged,
        median_run_seed,
        best_run_seed,
    })
}
