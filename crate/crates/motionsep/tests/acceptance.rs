//! Acceptance gate: one test per criterion, each printing a pass/fail
//! line. Criteria 4-6 run reduced presets sized for a single-core CI
//! box; the published-scale variants are `#[ignore]`d and can be run
//! with `cargo test --test acceptance -- --ignored`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use motionsep::generator::{ActivationSpec, Generator, GeneratorSpec, LatentState, TrackInit};
use motionsep::optim::{build_loss, fit, FitConfig};
use motionsep::phantom::{
    concat_cycles, crop, make_trigger, render_phantom, shear_video, PhantomScene, ShearAxis,
};
use motionsep::separation::{
    flag_outliers, mad, median, relative_error, run_seed, seed_study, InitScheme, SeedRun,
    SeparationProblem, SeedStudy,
};
use motionsep::tensor::{gradcheck, Graph, NodeId, Tensor};
use motionsep::video::VideoTensor;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_parameter_counts() {
    let counts = [
        (GeneratorSpec::phantom().param_count(), 303_360usize),
        (GeneratorSpec::four_chamber().param_count(), 5_388_980),
        (GeneratorSpec::short_axis().param_count(), 5_396_320),
    ];
    let pass = counts.iter().all(|(got, want)| got == want);
    report(
        "1 (parameter counts)",
        pass,
        &format!("{:?}", counts.map(|(g, _)| g)),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_output_shapes() {
    let shapes = [
        (GeneratorSpec::phantom().output_shape().unwrap(), (64, 64)),
        (GeneratorSpec::four_chamber().output_shape().unwrap(), (100, 100)),
        (GeneratorSpec::short_axis().output_shape().unwrap(), (70, 70)),
    ];
    let pass = shapes.iter().all(|(got, want)| got == want);
    report(
        "2 (output shapes)",
        pass,
        &format!("{:?}", shapes.map(|(g, _)| g)),
    );
}

// ---------------------------------------------------------------- 3

fn random_small_spec(rng: &mut ChaCha8Rng) -> GeneratorSpec {
    loop {
        let layers = rng.random_range(1..=2usize);
        let mut channels = vec![rng.random_range(3..=6usize)];
        for _ in 0..layers - 1 {
            channels.push(rng.random_range(1..=4));
        }
        channels.push(1);
        let kernels: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=3)).collect();
        let strides: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=2)).collect();
        let paddings: Vec<usize> = kernels.iter().map(|&k| rng.random_range(0..k)).collect();
        let activations: Vec<ActivationSpec> = (0..layers)
            .map(|_| match rng.random_range(0..4u8) {
                0 => ActivationSpec::None,
                1 => ActivationSpec::Tanh,
                2 => ActivationSpec::Relu,
                _ => ActivationSpec::leaky(),
            })
            .collect();
        let spec = GeneratorSpec {
            channels,
            kernels,
            strides,
            paddings,
            activations,
            use_bias: rng.random_bool(0.5),
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Max relative gradient error of the full loss w.r.t. one parameter
/// group, holding every other group constant.
fn group_gradcheck(
    spec: &GeneratorSpec,
    weights: &[Tensor<f64>],
    biases: Option<&[Tensor<f64>]>,
    z0: &Tensor<f64>,
    track: &Tensor<f64>,
    targets: &[Tensor<f64>],
    group: usize,
) -> f64 {
    let gen = {
        let mut g = Generator::<f64>::new(spec.clone()).unwrap();
        g.set_weights(weights.to_vec());
        if let Some(b) = biases {
            g.set_biases(b.to_vec());
        }
        g
    };
    let layers = spec.layer_count();
    let point = if group < layers {
        weights[group].clone()
    } else if group == layers {
        z0.clone()
    } else {
        track.clone()
    };
    let build = move |g: &mut Graph<f64>, x: NodeId| {
        let w_ids: Vec<NodeId> = weights
            .iter()
            .enumerate()
            .map(|(j, w)| if j == group { x } else { g.leaf(w.clone(), false) })
            .collect();
        let b_ids = biases.map(|bs| bs.iter().map(|b| g.leaf(b.clone(), false)).collect::<Vec<_>>());
        let z0_id = if group == layers { x } else { g.leaf(z0.clone(), false) };
        let track_id = if group == layers + 1 { x } else { g.leaf(track.clone(), false) };
        build_loss(g, &gen, &w_ids, b_ids.as_deref(), z0_id, &[track_id], targets)
            .map_err(|_| motionsep::tensor::TensorError::NonFinite { context: "loss" })
    };
    gradcheck(build, &point, 1e-5).unwrap()
}

#[test]
fn criterion_3_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let spec = random_small_spec(&mut rng);
        let layers = spec.layer_count();
        let weights: Vec<Tensor<f64>> = (0..layers)
            .map(|j| {
                random_tensor(
                    &mut rng,
                    vec![spec.channels[j], spec.channels[j + 1], spec.kernels[j], spec.kernels[j]],
                )
            })
            .collect();
        let biases: Option<Vec<Tensor<f64>>> = spec
            .use_bias
            .then(|| (0..layers).map(|j| random_tensor(&mut rng, vec![spec.channels[j + 1]])).collect());
        let frames = 2;
        let z0 = random_tensor(&mut rng, vec![spec.latent_dim() - 1]);
        let track = random_tensor(&mut rng, vec![frames]);
        let (h, w) = spec.output_shape().unwrap();
        let targets: Vec<Tensor<f64>> = (0..frames)
            .map(|_| random_tensor(&mut rng, vec![h, w]))
            .collect();
        for group in 0..layers + 2 {
            let err = group_gradcheck(
                &spec,
                &weights,
                biases.as_deref(),
                &z0,
                &track,
                &targets,
                group,
            );
            if err > worst {
                worst = err;
            }
        }
    }
    report(
        "3 (gradient correctness)",
        worst <= 1e-4,
        &format!("max relative error {worst:.3e} over 100 random configurations"),
    );
}

// ------------------------------------------------------- presets 4-6

/// CI phantom: 20 frames of 32x32, 3 dilation and 2 shear cycles.
fn ci_scene() -> PhantomScene {
    PhantomScene {
        frames: 20,
        ..PhantomScene::reduced()
    }
}

fn ci_fit_config() -> FitConfig {
    FitConfig::new(vec![1000, 500, 500], vec![0.01, 0.005, 0.002], 0)
}

const CI_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct PhantomData {
    mixed: VideoTensor,
    cardiac_only: VideoTensor,
    resp_only: VideoTensor,
    cardiac: Vec<f64>,
    resp: Vec<f64>,
}

fn ci_phantom() -> &'static PhantomData {
    static DATA: OnceLock<PhantomData> = OnceLock::new();
    DATA.get_or_init(|| {
        let scene = ci_scene();
        let cardiac = scene.cardiac_trigger().unwrap();
        let resp = scene.respiratory_trigger().unwrap();
        let (mixed, cardiac_only, resp_only) = render_phantom(&scene, &cardiac, &resp).unwrap();
        PhantomData {
            mixed,
            cardiac_only,
            resp_only,
            cardiac: cardiac.values,
            resp: resp.values,
        }
    })
}

fn ci_study(tracks: Vec<TrackInit>) -> SeedStudy {
    let data = ci_phantom();
    let problem = SeparationProblem {
        video: data.mixed.clone(),
        spec: GeneratorSpec::from_json(include_str!("../../../configs/generator_reduced.json")).unwrap(),
        tracks,
        truths: vec![Some(data.cardiac_only.clone()), Some(data.resp_only.clone())],
        init: InitScheme::Orthogonal,
    };
    seed_study(&problem, &ci_fit_config(), &CI_SEEDS, 2.0).unwrap()
}

fn both_known_study() -> &'static SeedStudy {
    static STUDY: OnceLock<SeedStudy> = OnceLock::new();
    STUDY.get_or_init(|| {
        let data = ci_phantom();
        ci_study(vec![
            TrackInit::Given(data.cardiac.clone()),
            TrackInit::Given(data.resp.clone()),
        ])
    })
}

fn medians(study: &SeedStudy) -> (f64, f64) {
    let stats: Vec<f64> = study
        .error_stats
        .iter()
        .map(|s| s.as_ref().expect("ground truth for both motions").median)
        .collect();
    (stats[0], stats[1])
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_phantom_both_triggers_reduced() {
    let (e1, e2) = medians(both_known_study());
    report(
        "4 (phantom separation, both triggers known; reduced preset)",
        e1 <= 5e-2 && e2 <= 5e-2,
        &format!("median E1 {e1:.3e}, E2 {e2:.3e} vs threshold 5e-2 over {} seeds", CI_SEEDS.len()),
    );
}

#[test]
#[ignore = "published scale: 80x64x64, 8000 epochs, roughly an hour per seed on one core"]
fn criterion_4_phantom_both_triggers_full() {
    let scene = PhantomScene::default();
    let cardiac = scene.cardiac_trigger().unwrap();
    let resp = scene.respiratory_trigger().unwrap();
    let (mixed, cardiac_only, resp_only) = render_phantom(&scene, &cardiac, &resp).unwrap();
    let problem = SeparationProblem {
        video: mixed,
        spec: GeneratorSpec::phantom(),
        tracks: vec![TrackInit::Given(cardiac.values), TrackInit::Given(resp.values)],
        truths: vec![Some(cardiac_only), Some(resp_only)],
        init: InitScheme::Orthogonal,
    };
    let study = seed_study(&problem, &FitConfig::phantom(0), &CI_SEEDS, 2.0).unwrap();
    let (e1, e2) = medians(&study);
    report(
        "4 (phantom separation, both triggers known; full scale)",
        e1 <= 2e-2 && e2 <= 2.5e-2,
        &format!("median E1 {e1:.3e} (<= 2e-2), E2 {e2:.3e} (<= 2.5e-2)"),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_phantom_one_trigger_reduced() {
    let data = ci_phantom();
    let one = ci_study(vec![TrackInit::Learnable, TrackInit::Given(data.resp.clone())]);
    let (o1, o2) = medians(&one);
    let (b1, b2) = medians(both_known_study());
    report(
        "5 (phantom separation, one trigger known; reduced preset)",
        o1 <= 8e-2 && o2 <= 8e-2 && b1 <= o1 && b2 <= o2,
        &format!(
            "one-known median E1 {o1:.3e}, E2 {o2:.3e} (<= 8e-2); both-known {b1:.3e}/{b2:.3e} are <= one-known"
        ),
    );
}

#[test]
#[ignore = "published scale: 80x64x64, 8000 epochs, roughly an hour per seed on one core"]
fn criterion_5_phantom_one_trigger_full() {
    let scene = PhantomScene::default();
    let cardiac = scene.cardiac_trigger().unwrap();
    let resp = scene.respiratory_trigger().unwrap();
    let (mixed, cardiac_only, resp_only) = render_phantom(&scene, &cardiac, &resp).unwrap();
    let truths = vec![Some(cardiac_only), Some(resp_only)];
    let one = {
        let problem = SeparationProblem {
            video: mixed.clone(),
            spec: GeneratorSpec::phantom(),
            tracks: vec![TrackInit::Learnable, TrackInit::Given(resp.values.clone())],
            truths: truths.clone(),
            init: InitScheme::Orthogonal,
        };
        seed_study(&problem, &FitConfig::phantom(0), &CI_SEEDS, 2.0).unwrap()
    };
    let both = {
        let problem = SeparationProblem {
            video: mixed,
            spec: GeneratorSpec::phantom(),
            tracks: vec![TrackInit::Given(cardiac.values), TrackInit::Given(resp.values)],
            truths,
            init: InitScheme::Orthogonal,
        };
        seed_study(&problem, &FitConfig::phantom(0), &CI_SEEDS, 2.0).unwrap()
    };
    let (o1, o2) = medians(&one);
    let (b1, b2) = medians(&both);
    report(
        "5 (phantom separation, one trigger known; full scale)",
        o1 <= 4e-2 && o2 <= 4e-2 && b1 <= o1 && b2 <= o2,
        &format!("one-known {o1:.3e}/{o2:.3e}, both-known {b1:.3e}/{b2:.3e}"),
    );
}

// ---------------------------------------------------------------- 6

struct SemiSynthetic {
    mixed: VideoTensor,
    content_truth: VideoTensor,
    shear_truth: VideoTensor,
    content_trigger: Vec<f64>,
    shear_trigger: Vec<f64>,
}

/// Semi-synthetic pipeline: tile a one-cycle content video three
/// times, overlay two cycles of row-proportional shear, crop.
fn semi_synthetic(base: &VideoTensor, shear_amplitude: f64, crop_margin: usize) -> SemiSynthetic {
    let frames = base.frames() * 3;
    let tiled = concat_cycles(base, 3).unwrap();
    let shear = make_trigger(frames, 2.0, 0.0, "shear").unwrap();
    let sheared = shear_video(&tiled, &shear, ShearAxis::Horizontal, shear_amplitude).unwrap();
    let h = base.height() - 2 * crop_margin;
    let w = base.width() - 2 * crop_margin;
    let mixed = crop(&sheared, crop_margin, crop_margin, h, w).unwrap();
    let content_truth = crop(&tiled, crop_margin, crop_margin, h, w).unwrap();
    let static_video = VideoTensor::new(
        frames,
        base.height(),
        base.width(),
        (0..frames).flat_map(|_| base.frame(0).unwrap().to_vec()).collect(),
    )
    .unwrap();
    let shear_truth = crop(
        &shear_video(&static_video, &shear, ShearAxis::Horizontal, shear_amplitude).unwrap(),
        crop_margin,
        crop_margin,
        h,
        w,
    )
    .unwrap();
    let content = make_trigger(base.frames(), 1.0, 0.0, "content").unwrap();
    let content_trigger = (0..frames).map(|t| content.values[t % base.frames()]).collect();
    SemiSynthetic {
        mixed,
        content_truth,
        shear_truth,
        content_trigger,
        shear_trigger: shear.values,
    }
}

fn thorax_like_base(frames: usize, size: usize) -> VideoTensor {
    let scene = PhantomScene {
        frames,
        height: size,
        width: size,
        center_y: (size - 1) as f64 / 2.0,
        center_x: (size - 1) as f64 / 2.0,
        outer_radius: size as f64 * 0.36,
        inner_base_radius: size as f64 * 0.125,
        inner_dilation_amplitude: size as f64 * 0.097,
        shear_amplitude: 0.0,
        cardiac_cycles: 1.0,
        respiratory_cycles: 1.0,
        ..PhantomScene::default()
    };
    let content = make_trigger(frames, 1.0, 0.0, "content").unwrap();
    let none = make_trigger(frames, 1.0, 0.0, "none").unwrap();
    render_phantom(&scene, &content, &none).unwrap().0
}

fn run_semi_synthetic(
    data: &SemiSynthetic,
    spec: GeneratorSpec,
    config: &FitConfig,
    seeds: &[u64],
) -> (f64, f64, f64) {
    let problem = SeparationProblem {
        video: data.mixed.clone(),
        spec,
        tracks: vec![
            TrackInit::Given(data.content_trigger.clone()),
            TrackInit::Given(data.shear_trigger.clone()),
        ],
        truths: vec![Some(data.content_truth.clone()), Some(data.shear_truth.clone())],
        init: InitScheme::Orthogonal,
    };
    let mut ratios = Vec::new();
    let mut e1 = Vec::new();
    let mut e2 = Vec::new();
    for &seed in seeds {
        let run = run_seed(&problem, config, seed).unwrap();
        ratios.push(run.best_loss / run.initial_loss);
        e1.push(run.errors[0].unwrap().1);
        e2.push(run.errors[1].unwrap().1);
    }
    (
        ratios.iter().cloned().fold(f64::MIN, f64::max),
        median(&e1),
        median(&e2),
    )
}

#[test]
fn criterion_6_semi_synthetic_reduced() {
    let base = thorax_like_base(11, 36);
    let data = semi_synthetic(&base, 0.15, 2);
    let spec = GeneratorSpec::from_json(include_str!("../../../configs/generator_reduced.json")).unwrap();
    let config = FitConfig::new(vec![200; 5], vec![0.01, 0.008, 0.005, 0.003, 0.001], 0);
    let (worst_ratio, e1, e2) = run_semi_synthetic(&data, spec, &config, &[1, 2, 3]);
    report(
        "6 (semi-synthetic pipeline; reduced preset)",
        worst_ratio < 0.05 && e1 <= 0.15 && e2 <= 0.15,
        &format!("worst best/initial loss ratio {worst_ratio:.3e} (< 0.05), median E1 {e1:.3e}, E2 {e2:.3e} (<= 0.15)"),
    );
}

#[test]
#[ignore = "published scale: 99 frames of 100x100 with the four-chamber network, days on one core"]
fn criterion_6_semi_synthetic_full() {
    let base = thorax_like_base(33, 104);
    let data = semi_synthetic(&base, 0.15, 2);
    let (worst_ratio, e1, e2) =
        run_semi_synthetic(&data, GeneratorSpec::four_chamber(), &FitConfig::real_data(0), &[1, 2, 3]);
    report(
        "6 (semi-synthetic pipeline; full scale)",
        worst_ratio < 0.05 && e1 <= 0.15 && e2 <= 0.15,
        &format!("worst best/initial loss ratio {worst_ratio:.3e}, median E1 {e1:.3e}, E2 {e2:.3e}"),
    );
}

// ---------------------------------------------------------------- 7

fn tiny_spec() -> GeneratorSpec {
    GeneratorSpec {
        channels: vec![8, 8, 4, 1],
        kernels: vec![2, 2, 2],
        strides: vec![1, 2, 2],
        paddings: vec![0, 0, 0],
        activations: vec![ActivationSpec::Tanh, ActivationSpec::leaky(), ActivationSpec::Tanh],
        use_bias: false,
    }
}

fn tiny_video(frames: usize) -> VideoTensor {
    let data: Vec<f32> = (0..frames * 64)
        .map(|i| {
            let t = (i / 64) as f32;
            let p = (i % 64) as f32;
            0.5 + 0.3 * (0.9 * t + 0.2 * p).sin() * (0.13 * p).cos()
        })
        .collect();
    VideoTensor::new(frames, 8, 8, data).unwrap()
}

fn tiny_fit(tracks: &[TrackInit], seed: u64, epochs: usize) -> motionsep::optim::FitResult<f32> {
    let spec = tiny_spec();
    let mut gen = Generator::<f32>::new(spec.clone()).unwrap();
    gen.init_orthogonal(seed);
    let video = tiny_video(6);
    let state = LatentState::<f32>::init(spec.latent_dim(), 6, tracks, seed).unwrap();
    fit(&gen, &state, &video, &FitConfig::new(vec![epochs], vec![0.01], seed)).unwrap()
}

#[test]
fn criterion_7_property_suite() {
    // Self-override identity: fixing motion i at frame t leaves the
    // latent for frame t unchanged.
    let state = LatentState::<f32>::init(6, 5, &[TrackInit::Learnable, TrackInit::Learnable], 3).unwrap();
    let plain = state.assemble_latent(2, &BTreeMap::new()).unwrap();
    let fixed = state.assemble_latent(2, &BTreeMap::from([(0, 2), (1, 2)])).unwrap();
    let self_override = plain == fixed;

    // Relative-error scale law: E(a*x, x) with truth x is |a-1|.
    let truth = tiny_video(3);
    let scaled = VideoTensor::new(
        3,
        8,
        8,
        truth.data().iter().map(|&v| 1.25 * v).collect(),
    )
    .unwrap();
    let e = relative_error(&scaled, &truth).unwrap();
    let scale_law = (e - 0.25).abs() < 1e-6;

    // Trigger immutability: a given track survives fitting bit-exactly.
    let trigger: Vec<f64> = (0..6).map(|t| t as f64 / 5.0).collect();
    let result = tiny_fit(&[TrackInit::Given(trigger.clone()), TrackInit::Learnable], 4, 30);
    let trigger_immutable = result.best_latents.tracks[0]
        .values
        .iter()
        .zip(&trigger)
        .all(|(&got, &want)| got == want as f32)
        && !result.best_latents.tracks[0].learnable;

    // Best-loss tracking: the snapshot loss is the running minimum.
    let min_loss = result.loss_history.iter().cloned().fold(f64::INFINITY, f64::min);
    let best_loss_monotone =
        result.best_loss == min_loss && result.loss_history[result.best_epoch] == result.best_loss;

    // DVT round trip is bit-exact.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.dvt");
    motionsep::io::write_dvt(&path, &truth).unwrap();
    let dvt_lossless = motionsep::io::read_dvt(&path).unwrap() == truth;

    // Determinism: identical seed, identical outputs (bit-for-bit).
    let a = tiny_fit(&[TrackInit::Learnable], 9, 25);
    let b = tiny_fit(&[TrackInit::Learnable], 9, 25);
    let deterministic = a.loss_history == b.loss_history
        && a.best_generator
            .weights()
            .iter()
            .zip(b.best_generator.weights())
            .all(|(x, y)| x.data() == y.data())
        && a.best_latents == b.best_latents;

    // Hand-computed statistics on [1, 2, 3, 4, 100].
    let xs = [1.0, 2.0, 3.0, 4.0, 100.0];
    let stats_ok = median(&xs) == 3.0 && mad(&xs) == 1.0;

    let checks = [
        ("self-override identity", self_override),
        ("scale law", scale_law),
        ("trigger immutability", trigger_immutable),
        ("best-loss tracking", best_loss_monotone),
        ("DVT lossless", dvt_lossless),
        ("determinism", deterministic),
        ("median/MAD", stats_ok),
    ];
    let failing: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    report(
        "7 (property suite)",
        failing.is_empty(),
        &if failing.is_empty() {
            format!("{} properties hold", checks.len())
        } else {
            format!("failing: {failing:?}")
        },
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_outlier_detection() {
    let spec = tiny_spec();
    let video = tiny_video(6);
    let problem = SeparationProblem {
        video,
        spec,
        tracks: vec![TrackInit::Learnable],
        truths: vec![None],
        init: InitScheme::Orthogonal,
    };
    let good = FitConfig::new(vec![250], vec![0.01], 0);
    let bad = FitConfig::new(vec![250], vec![10.0], 0);
    let runs: Vec<Result<SeedRun, String>> = (1..=5u64)
        .map(|seed| {
            let config = if seed == 3 { &bad } else { &good };
            run_seed(&problem, config, seed).map_err(|e| e.to_string())
        })
        .collect();
    let flags = flag_outliers(&runs, 2.0);
    let pass = flags == [false, false, true, false, false];
    report(
        "8 (outlier detection)",
        pass,
        &format!("flags for seeds 1-5 with seed 3 at learning rate 10: {flags:?}"),
    );
}
