//! Command-line front end: dataset synthesis, fitting, separation,
//! reference-frame sweeps, seed studies and figure-style exports.
//!
//! Exit codes: 0 success, 2 validation error, 3 divergence, 4 I/O
//! error. `MOTIONSEP_THREADS` caps worker parallelism.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use motionsep::generator::{Generator, GeneratorSpec, LatentState, Track, TrackInit};
use motionsep::io::{self, IoError, LossSummary, RunManifest};
use motionsep::optim::{fit_with, FitConfig, FitError};
use motionsep::phantom::{render_phantom, PhantomScene};
use motionsep::separation::{
    fix_others, generate_single_motion, h_sweep, relative_error, seed_study, InitScheme,
    SeparationProblem, DEFAULT_OUTLIER_FACTOR,
};
use motionsep::tensor::Tensor;
use motionsep::video::VideoTensor;

#[derive(Parser)]
#[command(name = "motionsep", version, about = "Training-free motion separation for dynamic image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Orthogonal,
    Default,
}

impl From<InitArg> for InitScheme {
    fn from(v: InitArg) -> Self {
        match v {
            InitArg::Orthogonal => InitScheme::Orthogonal,
            InitArg::Default => InitScheme::Default,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the two-motion disk phantom: mixed video, both
    /// single-motion ground truths and the two trigger tracks.
    Phantom {
        /// Scene JSON; built-in default scene when omitted.
        #[arg(long)]
        scene_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the generator and latent space to one video.
    Fit {
        #[arg(long)]
        video: PathBuf,
        /// Trigger CSVs for the given (a-priori known) motion tracks.
        #[arg(long, num_args = 1.., required = true)]
        triggers: Vec<PathBuf>,
        /// Number of additional learnable motion tracks; these occupy
        /// the first motion indices, given triggers follow.
        #[arg(long, default_value_t = 0)]
        learnable: usize,
        #[arg(long)]
        gen_config: PathBuf,
        #[arg(long)]
        fit_config: PathBuf,
        /// Overrides the seed in the fit config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = InitArg::Orthogonal)]
        init: InitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Freeze every other motion at a reference frame and generate
    /// the single-motion video from saved fit artifacts.
    Separate {
        /// Output directory of a previous `fit` run.
        fit_dir: PathBuf,
        #[arg(long)]
        motion: usize,
        #[arg(long, conflicts_with = "sweep")]
        fix_frame: Option<usize>,
        /// Sweep all reference frames and keep the error-minimizing
        /// one; requires --truth.
        #[arg(long, requires = "truth")]
        sweep: bool,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit many seeds and report median/MAD/mean/std of the
    /// separation errors, flagging high-loss outliers.
    SeedStudy {
        #[arg(long)]
        video: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        triggers: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        learnable: usize,
        /// Ground-truth DVT per motion index, `-` for none.
        #[arg(long, num_args = 1..)]
        truth: Vec<String>,
        #[arg(long)]
        gen_config: PathBuf,
        #[arg(long)]
        fit_config: PathBuf,
        /// Comma-separated seed list (at least two).
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_OUTLIER_FACTOR)]
        outlier_factor: f64,
        #[arg(long, value_enum, default_value_t = InitArg::Orthogonal)]
        init: InitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract one spatial column over time as an HxT PGM image.
    Slice {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        column: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export selected frames as PGM images; with --truth, exports
    /// amplified absolute-difference images instead.
    ExportFrames {
        #[arg(long)]
        video: PathBuf,
        /// Comma-separated frame indices.
        #[arg(long, value_delimiter = ',', required = true)]
        frames: Vec<usize>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Amplification applied to difference images before clipping.
        #[arg(long, default_value_t = 1.0, requires = "truth")]
        diff_factor: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// CLI failure carrying its exit code.
enum CliError {
    Validation(String),
    Diverged(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Diverged(m) | CliError::Io(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Video(e) => CliError::Validation(e.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

macro_rules! validation_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}

validation_from!(
    motionsep::generator::GeneratorError,
    motionsep::phantom::PhantomError,
    motionsep::separation::SeparationError,
    motionsep::video::VideoError,
    serde_json::Error
);

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("MOTIONSEP_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                // Ignore the error if a pool already exists.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: MOTIONSEP_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Phantom { scene_config, out } => cmd_phantom(scene_config.as_deref(), &out),
        Command::Fit {
            video,
            triggers,
            learnable,
            gen_config,
            fit_config,
            seed,
            init,
            out,
        } => cmd_fit(&video, &triggers, learnable, &gen_config, &fit_config, seed, init.into(), &out),
        Command::Separate {
            fit_dir,
            motion,
            fix_frame,
            sweep,
            truth,
            out,
        } => cmd_separate(&fit_dir, motion, fix_frame, sweep, truth.as_deref(), &out),
        Command::SeedStudy {
            video,
            triggers,
            learnable,
            truth,
            gen_config,
            fit_config,
            seeds,
            outlier_factor,
            init,
            out,
        } => cmd_seed_study(
            &video,
            &triggers,
            learnable,
            &truth,
            &gen_config,
            &fit_config,
            &seeds,
            outlier_factor,
            init.into(),
            &out,
        ),
        Command::Slice { video, column, out } => cmd_slice(&video, column, &out),
        Command::ExportFrames {
            video,
            frames,
            truth,
            diff_factor,
            out,
        } => cmd_export_frames(&video, &frames, truth.as_deref(), diff_factor, &out),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn rel(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn cmd_phantom(scene_config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let scene = match scene_config {
        Some(path) => serde_json::from_str::<PhantomScene>(&std::fs::read_to_string(path)?)?,
        None => PhantomScene::default(),
    };
    let cardiac = scene.cardiac_trigger()?;
    let resp = scene.respiratory_trigger()?;
    let (mixed, cardiac_only, resp_only) = render_phantom(&scene, &cardiac, &resp)?;
    ensure_dir(out)?;
    let mut artifacts = Vec::new();
    for (name, video) in [
        ("mixed.dvt", &mixed),
        ("cardiac_only.dvt", &cardiac_only),
        ("resp_only.dvt", &resp_only),
    ] {
        io::write_dvt(&rel(out, name), video)?;
        artifacts.push(name.to_string());
    }
    for (name, trig) in [("cardiac_trigger.csv", &cardiac), ("resp_trigger.csv", &resp)] {
        io::write_series_csv(&rel(out, name), ("frame", "value"), trig.values.iter().cloned().enumerate())?;
        artifacts.push(name.to_string());
    }
    std::fs::write(rel(out, "scene.json"), serde_json::to_string_pretty(&scene)?)?;
    artifacts.push("scene.json".to_string());
    write_manifest(out, "phantom", scene_config.iter().map(|p| p.display().to_string()).collect(), vec![], artifacts, None)?;
    println!(
        "wrote phantom: {} frames of {}x{} to {}",
        scene.frames,
        scene.height,
        scene.width,
        out.display()
    );
    Ok(())
}

/// Serialized latent state; together with the generator config and
/// weights this fully determines the fitted model.
#[derive(Serialize, Deserialize)]
struct LatentFile {
    z0: Vec<f32>,
    tracks: Vec<TrackFile>,
}

#[derive(Serialize, Deserialize)]
struct TrackFile {
    values: Vec<f32>,
    learnable: bool,
}

impl LatentFile {
    fn from_state(state: &LatentState<f32>) -> Self {
        LatentFile {
            z0: state.z0.clone(),
            tracks: state
                .tracks
                .iter()
                .map(|t| TrackFile {
                    values: t.values.clone(),
                    learnable: t.learnable,
                })
                .collect(),
        }
    }

    fn into_state(self) -> LatentState<f32> {
        LatentState {
            z0: self.z0,
            tracks: self
                .tracks
                .into_iter()
                .map(|t| Track {
                    values: t.values,
                    learnable: t.learnable,
                })
                .collect(),
        }
    }
}

fn load_tracks(triggers: &[PathBuf], learnable: usize) -> Result<Vec<TrackInit>, CliError> {
    let mut tracks = vec![TrackInit::Learnable; learnable];
    for path in triggers {
        tracks.push(TrackInit::Given(io::read_series_csv(path)?));
    }
    Ok(tracks)
}

fn write_manifest(
    out: &Path,
    command: &str,
    configs: Vec<String>,
    seeds: Vec<u64>,
    mut artifacts: Vec<String>,
    loss_summary: Option<LossSummary>,
) -> Result<(), CliError> {
    artifacts.push("manifest.json".to_string());
    let manifest = RunManifest {
        command: command.to_string(),
        configs,
        seeds,
        out_dir: out.display().to_string(),
        artifacts,
        loss_summary,
    };
    manifest.write(&rel(out, "manifest.json"))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    video_path: &Path,
    triggers: &[PathBuf],
    learnable: usize,
    gen_config: &Path,
    fit_config: &Path,
    seed: Option<u64>,
    init: InitScheme,
    out: &Path,
) -> Result<(), CliError> {
    let video = io::read_dvt(video_path)?;
    let spec = GeneratorSpec::from_json(&std::fs::read_to_string(gen_config)?)?;
    let mut config: FitConfig = serde_json::from_str(&std::fs::read_to_string(fit_config)?)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let tracks = load_tracks(triggers, learnable)?;

    let mut gen = Generator::<f32>::new(spec.clone())?;
    match init {
        InitScheme::Orthogonal => gen.init_orthogonal(config.seed),
        InitScheme::Default => gen.init_default(config.seed),
    }
    let state = LatentState::<f32>::init(spec.latent_dim(), video.frames(), &tracks, config.seed)?;

    ensure_dir(out)?;
    let total = config.total_epochs();
    let result = fit_with(&gen, &state, &video, &config, |epoch, loss| {
        if epoch % 500 == 0 || epoch + 1 == total {
            eprintln!("epoch {epoch}: loss {loss:.6e}");
        }
    });
    let result = match result {
        Ok(r) => r,
        Err(FitError::Diverged { epoch, history }) => {
            // Save the partial history so the failure can be inspected.
            io::write_series_csv(&rel(out, "loss.csv"), ("epoch", "loss"), history.iter().cloned().enumerate())?;
            return Err(CliError::Diverged(format!(
                "optimization diverged at epoch {epoch}; partial loss history saved to {}",
                rel(out, "loss.csv").display()
            )));
        }
        Err(e) => return Err(CliError::Validation(e.to_string())),
    };

    let mut artifacts = Vec::new();
    std::fs::write(rel(out, "gen_config.json"), spec.to_json())?;
    artifacts.push("gen_config.json".to_string());
    std::fs::write(rel(out, "fit_config.json"), serde_json::to_string_pretty(&config)?)?;
    artifacts.push("fit_config.json".to_string());

    let best = &result.best_generator;
    let mut tensors: Vec<Tensor<f32>> = best.weights().to_vec();
    if let Some(biases) = best.biases() {
        tensors.extend_from_slice(biases);
    }
    io::write_weights(&rel(out, "weights.bin"), &tensors)?;
    artifacts.push("weights.bin".to_string());

    let latents = LatentFile::from_state(&result.best_latents);
    std::fs::write(rel(out, "latents.json"), serde_json::to_string_pretty(&latents)?)?;
    artifacts.push("latents.json".to_string());
    io::write_series_csv(
        &rel(out, "z0.csv"),
        ("index", "value"),
        latents.z0.iter().map(|&v| v as f64).enumerate(),
    )?;
    artifacts.push("z0.csv".to_string());
    write_tracks_csv(&rel(out, "tracks.csv"), &latents)?;
    artifacts.push("tracks.csv".to_string());
    io::write_series_csv(
        &rel(out, "loss.csv"),
        ("epoch", "loss"),
        result.loss_history.iter().cloned().enumerate(),
    )?;
    artifacts.push("loss.csv".to_string());

    let summary = LossSummary {
        initial_loss: result.loss_history[0],
        best_loss: result.best_loss,
        best_epoch: result.best_epoch,
        final_loss: result.final_loss,
    };
    write_manifest(
        out,
        "fit",
        vec![gen_config.display().to_string(), fit_config.display().to_string()],
        vec![config.seed],
        artifacts,
        Some(summary),
    )?;
    println!(
        "fit finished: best loss {:.6e} at epoch {} (final {:.6e})",
        result.best_loss, result.best_epoch, result.final_loss
    );
    Ok(())
}

fn write_tracks_csv(path: &Path, latents: &LatentFile) -> Result<(), CliError> {
    use std::io::Write as _;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..latents.tracks.len()).map(|i| format!("track{i}")).collect();
    writeln!(file, "frame,{}", header.join(","))?;
    let frames = latents.tracks.first().map(|t| t.values.len()).unwrap_or(0);
    for t in 0..frames {
        let row: Vec<String> = latents.tracks.iter().map(|tr| tr.values[t].to_string()).collect();
        writeln!(file, "{t},{}", row.join(","))?;
    }
    Ok(())
}

fn load_fit(fit_dir: &Path) -> Result<(Generator<f32>, LatentState<f32>), CliError> {
    let spec = GeneratorSpec::from_json(&std::fs::read_to_string(rel(fit_dir, "gen_config.json"))?)?;
    let tensors = io::read_weights(&rel(fit_dir, "weights.bin"))?;
    let layers = spec.layer_count();
    let expected = if spec.use_bias { 2 * layers } else { layers };
    if tensors.len() != expected {
        return Err(CliError::Validation(format!(
            "weights.bin holds {} tensors, generator config needs {expected}",
            tensors.len()
        )));
    }
    let mut gen = Generator::<f32>::new(spec.clone())?;
    let mut tensors = tensors;
    let biases = tensors.split_off(layers);
    gen.set_weights(tensors);
    if spec.use_bias {
        gen.set_biases(biases);
    }
    let latents: LatentFile = serde_json::from_str(&std::fs::read_to_string(rel(fit_dir, "latents.json"))?)?;
    Ok((gen, latents.into_state()))
}

fn cmd_separate(
    fit_dir: &Path,
    motion: usize,
    fix_frame: Option<usize>,
    sweep: bool,
    truth: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if fix_frame.is_none() && !sweep {
        return Err(CliError::Validation(
            "pass --fix-frame <h> or --sweep".to_string(),
        ));
    }
    let (gen, state) = load_fit(fit_dir)?;
    let truth = truth.map(io::read_dvt).transpose()?;
    ensure_dir(out)?;
    let mut artifacts = Vec::new();

    let h = if sweep {
        let truth = truth.as_ref().expect("clap enforces --truth with --sweep");
        let curve = h_sweep(&gen, &state, motion, truth)?;
        io::write_series_csv(&rel(out, "sweep.csv"), ("h", "error"), curve.errors.iter().cloned().enumerate())?;
        artifacts.push("sweep.csv".to_string());
        println!("sweep: best h = {} with E = {:.6e}", curve.best_h, curve.best_error);
        curve.best_h
    } else {
        fix_frame.unwrap()
    };

    let generated = generate_single_motion(&gen, &state, motion, &fix_others(state.motions(), motion, h))?;
    let video_name = format!("single_motion_{motion}.dvt");
    io::write_dvt(&rel(out, &video_name), &generated)?;
    artifacts.push(video_name);

    let error = truth
        .as_ref()
        .map(|t| relative_error(&generated, t))
        .transpose()?;
    let metrics = serde_json::json!({ "motion": motion, "h": h, "error": error });
    std::fs::write(rel(out, "metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    artifacts.push("metrics.json".to_string());
    if let Some(e) = error {
        println!("motion {motion} at h = {h}: E = {e:.6e}");
    } else {
        println!("motion {motion} at h = {h}: no ground truth given");
    }
    write_manifest(out, "separate", vec![fit_dir.display().to_string()], vec![], artifacts, None)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_seed_study(
    video_path: &Path,
    triggers: &[PathBuf],
    learnable: usize,
    truth: &[String],
    gen_config: &Path,
    fit_config: &Path,
    seeds: &[u64],
    outlier_factor: f64,
    init: InitScheme,
    out: &Path,
) -> Result<(), CliError> {
    let video = io::read_dvt(video_path)?;
    let spec = GeneratorSpec::from_json(&std::fs::read_to_string(gen_config)?)?;
    let config: FitConfig = serde_json::from_str(&std::fs::read_to_string(fit_config)?)?;
    let tracks = load_tracks(triggers, learnable)?;
    let mut truths: Vec<Option<VideoTensor>> = truth
        .iter()
        .map(|t| {
            if t == "-" {
                Ok(None)
            } else {
                io::read_dvt(Path::new(t)).map(Some)
            }
        })
        .collect::<Result<_, IoError>>()?;
    truths.resize(tracks.len(), None);

    let problem = SeparationProblem {
        video,
        spec,
        tracks,
        truths,
        init,
    };
    let study = seed_study(&problem, &config, seeds, outlier_factor)?;

    ensure_dir(out)?;
    let mut artifacts = Vec::new();
    io::write_study_csv(&rel(out, "study.csv"), &study, seeds)?;
    artifacts.push("study.csv".to_string());
    io::write_study_json(&rel(out, "study.json"), &study)?;
    artifacts.push("study.json".to_string());
    write_manifest(
        out,
        "seed-study",
        vec![gen_config.display().to_string(), fit_config.display().to_string()],
        seeds.to_vec(),
        artifacts,
        None,
    )?;

    for (motion, stats) in study.error_stats.iter().enumerate() {
        if let Some(s) = stats {
            println!(
                "motion {motion}: median {:.4e}, MAD {:.4e}, mean {:.4e}, std {:.4e}",
                s.median, s.mad, s.mean, s.std
            );
        }
    }
    let flagged = study.flagged.iter().filter(|&&f| f).count();
    println!("{} of {} runs flagged as outliers", flagged, seeds.len());
    Ok(())
}

fn cmd_slice(video_path: &Path, column: usize, out: &Path) -> Result<(), CliError> {
    let video = io::read_dvt(video_path)?;
    if column >= video.width() {
        return Err(CliError::Validation(format!(
            "column {column} out of range for width {}",
            video.width()
        )));
    }
    let (t_len, h, w) = (video.frames(), video.height(), video.width());
    // Pixel (y, t) of the HxT image is frame t's column value at row y.
    let mut pixels = vec![0.0f32; h * t_len];
    for t in 0..t_len {
        let frame = video.frame(t)?;
        for y in 0..h {
            pixels[y * t_len + t] = frame[y * w + column];
        }
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    io::write_pgm(out, &pixels, h, t_len)?;
    println!("wrote {}x{} slice image to {}", h, t_len, out.display());
    Ok(())
}

fn cmd_export_frames(
    video_path: &Path,
    frames: &[usize],
    truth: Option<&Path>,
    diff_factor: f64,
    out: &Path,
) -> Result<(), CliError> {
    let video = io::read_dvt(video_path)?;
    let reference = truth.map(io::read_dvt).transpose()?;
    ensure_dir(out)?;
    let mut artifacts = Vec::new();
    for &t in frames {
        let frame = video.frame(t)?;
        let pixels: Vec<f32> = match &reference {
            Some(reference) => {
                let other = reference.frame(t)?;
                frame
                    .iter()
                    .zip(other)
                    .map(|(&a, &b)| ((a - b).abs() * diff_factor as f32).min(1.0))
                    .collect()
            }
            None => frame.to_vec(),
        };
        let name = format!("frame_{t:04}.pgm");
        io::write_pgm(&rel(out, &name), &pixels, video.height(), video.width())?;
        artifacts.push(name);
    }
    write_manifest(out, "export-frames", vec![], vec![], artifacts, None)?;
    println!("exported {} frames to {}", frames.len(), out.display());
    Ok(())
}
