//! Joint fitting of generator weights and latent variables.
//!
//! The loss is the mean over frames of the squared Euclidean pixel
//! norm of the residual. One epoch is one full-batch Adam step over
//! all frames. Learning rates change at epoch-block boundaries
//! without resetting the optimizer moments, and the weights/latents
//! achieving the minimal loss are snapshotted and returned instead
//! of the last iterate.

use serde::{Deserialize, Serialize};

use crate::generator::{Generator, GeneratorError, LatentState};
use crate::tensor::{Graph, NodeId, Real, Tensor, TensorError};
use crate::video::VideoTensor;

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("epoch_blocks ({blocks}) and learning_rates ({rates}) must be non-empty and equal length")]
    BadSchedule { blocks: usize, rates: usize },
    #[error("learning rates, betas and epsilon must be positive (betas in (0,1))")]
    BadHyperparameters,
    #[error("generator output {gen_h}x{gen_w} does not match video frames {vid_h}x{vid_w}")]
    FrameShapeMismatch {
        gen_h: usize,
        gen_w: usize,
        vid_h: usize,
        vid_w: usize,
    },
    #[error("latent tracks cover {track_frames} frames, video has {video_frames}")]
    TrackFrameMismatch {
        track_frames: usize,
        video_frames: usize,
    },
    #[error("latent dimension {latent} does not match generator input {gen}")]
    LatentDimMismatch { latent: usize, gen: usize },
    #[error("optimization diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize, history: Vec<f64> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

/// Optimization schedule and Adam settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epoch_blocks: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_track_best")]
    pub track_best: bool,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_track_best() -> bool {
    true
}

impl FitConfig {
    pub fn new(epoch_blocks: Vec<usize>, learning_rates: Vec<f64>, seed: u64) -> Self {
        Self {
            epoch_blocks,
            learning_rates,
            seed,
            betas: default_betas(),
            epsilon: default_epsilon(),
            track_best: default_track_best(),
        }
    }

    /// Paper schedule for the phantom: [4000, 4000] epochs at
    /// [0.01, 0.005].
    pub fn phantom(seed: u64) -> Self {
        Self::new(vec![4000, 4000], vec![0.01, 0.005], seed)
    }

    /// Paper schedule for real data: five blocks of 4000 epochs at
    /// [0.01, 0.008, 0.005, 0.003, 0.001].
    pub fn real_data(seed: u64) -> Self {
        Self::new(
            vec![4000; 5],
            vec![0.01, 0.008, 0.005, 0.003, 0.001],
            seed,
        )
    }

    pub fn total_epochs(&self) -> usize {
        self.epoch_blocks.iter().sum()
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.epoch_blocks.is_empty() || self.epoch_blocks.len() != self.learning_rates.len() {
            return Err(FitError::BadSchedule {
                blocks: self.epoch_blocks.len(),
                rates: self.learning_rates.len(),
            });
        }
        let (b1, b2) = self.betas;
        let ok = self.learning_rates.iter().all(|&lr| lr > 0.0)
            && b1 > 0.0
            && b1 < 1.0
            && b2 > 0.0
            && b2 < 1.0
            && self.epsilon > 0.0;
        if !ok {
            return Err(FitError::BadHyperparameters);
        }
        Ok(())
    }

    /// Learning rate in effect for a 0-based epoch index.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let mut consumed = 0;
        for (block, &lr) in self.epoch_blocks.iter().zip(&self.learning_rates) {
            consumed += block;
            if epoch < consumed {
                return lr;
            }
        }
        *self.learning_rates.last().unwrap()
    }
}

/// Adam with bias correction. Moments persist for the lifetime of
/// the optimizer; learning-rate changes do not reset them.
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: usize,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(betas: (f64, f64), epsilon: f64, sizes: &[usize]) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            epsilon,
            step: 0,
            moments: sizes.iter().map(|&n| (vec![T::zero(); n], vec![T::zero(); n])).collect(),
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// One update over all parameter slots. Returns an error if any
    /// updated value is non-finite.
    pub fn step(
        &mut self,
        params: &mut [Vec<T>],
        grads: &[Vec<T>],
        lr: f64,
    ) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.epsilon);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
                if !p[i].is_finite() {
                    return Err(TensorError::NonFinite { context: "adam update" });
                }
            }
        }
        Ok(())
    }
}

/// Fit outcome: the minimal-loss iterate plus the full loss history.
#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub best_generator: Generator<T>,
    pub best_latents: LatentState<T>,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
}

fn check_problem<T: Real>(
    gen: &Generator<T>,
    state: &LatentState<T>,
    video: &VideoTensor,
) -> Result<(), FitError> {
    let (gh, gw) = gen.spec().output_shape()?;
    if (gh, gw) != (video.height(), video.width()) {
        return Err(FitError::FrameShapeMismatch {
            gen_h: gh,
            gen_w: gw,
            vid_h: video.height(),
            vid_w: video.width(),
        });
    }
    if state.frames() != video.frames() {
        return Err(FitError::TrackFrameMismatch {
            track_frames: state.frames(),
            video_frames: video.frames(),
        });
    }
    if state.latent_dim() != gen.spec().latent_dim() {
        return Err(FitError::LatentDimMismatch {
            latent: state.latent_dim(),
            gen: gen.spec().latent_dim(),
        });
    }
    Ok(())
}

/// Records the full loss over all frames:
/// `(1/T) * sum_t ||y_t - G(z0, tracks[.][t])||^2`.
///
/// `track_ids` must hold one leaf of length T per dynamic track.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    gen: &Generator<T>,
    weight_ids: &[NodeId],
    bias_ids: Option<&[NodeId]>,
    z0_id: NodeId,
    track_ids: &[NodeId],
    targets: &[Tensor<T>],
) -> Result<NodeId, FitError> {
    let frames = targets.len();
    let mut per_frame = Vec::with_capacity(frames);
    for (t, target) in targets.iter().enumerate() {
        let mut parts = vec![z0_id];
        for &track in track_ids {
            parts.push(g.select(track, t)?);
        }
        let latent = g.concat(parts)?;
        let frame = gen.forward_graph(g, weight_ids, bias_ids, latent)?;
        let y = g.leaf(target.clone(), false);
        let residual = g.sub(y, frame)?;
        per_frame.push(g.sum_squares(residual)?);
    }
    let total = g.sum_n(per_frame)?;
    Ok(g.mul_scalar(total, 1.0 / frames as f64)?)
}

/// Evaluates the fitting loss without gradients.
pub fn loss<T: Real>(
    gen: &Generator<T>,
    state: &LatentState<T>,
    video: &VideoTensor,
) -> Result<f64, FitError> {
    check_problem(gen, state, video)?;
    let mut g = Graph::new();
    let (w_ids, b_ids) = gen.leaves(&mut g, false);
    let z0_id = g.leaf(Tensor::new(vec![state.z0.len()], state.z0.clone())?, false);
    let track_ids: Vec<NodeId> = state
        .tracks
        .iter()
        .map(|tr| {
            let t = Tensor::new(vec![tr.values.len()], tr.values.clone())?;
            Ok(g.leaf(t, false))
        })
        .collect::<Result<_, TensorError>>()?;
    let targets: Vec<Tensor<T>> = video
        .frame_tensors()
        .into_iter()
        .map(|f| Tensor::new(f.shape().to_vec(), f.data().iter().map(|&v| T::from_f64(v as f64)).collect()))
        .collect::<Result<_, TensorError>>()?;
    let l = build_loss(&mut g, gen, &w_ids, b_ids.as_deref(), z0_id, &track_ids, &targets)?;
    Ok(g.value(l).data()[0].to_f64())
}

// Parameter layout inside the flat slot list used by fit.
struct Slots {
    weight_count: usize,
    bias_count: usize,
    learnable_tracks: Vec<usize>,
}

/// Runs the epoch-block schedule. Only the generator parameters, the
/// static code and the learnable tracks are updated; given tracks
/// pass through bit-identical.
pub fn fit<T: Real>(
    gen: &Generator<T>,
    state: &LatentState<T>,
    video: &VideoTensor,
    config: &FitConfig,
) -> Result<FitResult<T>, FitError> {
    fit_with(gen, state, video, config, |_, _| {})
}

/// Like [`fit`], invoking `on_epoch(epoch, loss)` after each epoch's
/// loss evaluation.
pub fn fit_with<T: Real>(
    gen: &Generator<T>,
    state: &LatentState<T>,
    video: &VideoTensor,
    config: &FitConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<FitResult<T>, FitError> {
    config.validate()?;
    check_problem(gen, state, video)?;

    let targets: Vec<Tensor<T>> = video
        .frame_tensors()
        .into_iter()
        .map(|f| {
            Tensor::new(
                f.shape().to_vec(),
                f.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
            )
        })
        .collect::<Result<_, TensorError>>()?;

    // Flat learnable slots: weights, biases, z0, learnable tracks.
    let mut slot_data: Vec<Vec<T>> = Vec::new();
    let mut slot_shapes: Vec<Vec<usize>> = Vec::new();
    for w in gen.weights() {
        slot_data.push(w.data().to_vec());
        slot_shapes.push(w.shape().to_vec());
    }
    let weight_count = gen.weights().len();
    let bias_count = gen.biases().map(|b| b.len()).unwrap_or(0);
    if let Some(biases) = gen.biases() {
        for b in biases {
            slot_data.push(b.data().to_vec());
            slot_shapes.push(b.shape().to_vec());
        }
    }
    slot_data.push(state.z0.clone());
    slot_shapes.push(vec![state.z0.len()]);
    let learnable_tracks: Vec<usize> = state
        .tracks
        .iter()
        .enumerate()
        .filter(|(_, tr)| tr.learnable)
        .map(|(i, _)| i)
        .collect();
    for &i in &learnable_tracks {
        slot_data.push(state.tracks[i].values.clone());
        slot_shapes.push(vec![state.tracks[i].values.len()]);
    }
    let slots = Slots {
        weight_count,
        bias_count,
        learnable_tracks,
    };

    let sizes: Vec<usize> = slot_data.iter().map(|d| d.len()).collect();
    let mut adam = Adam::new(config.betas, config.epsilon, &sizes);

    let total_epochs = config.total_epochs();
    let mut history: Vec<f64> = Vec::with_capacity(total_epochs);
    let mut best: Option<(f64, usize, Vec<Vec<T>>)> = None;

    for epoch in 0..total_epochs {
        let lr = config.learning_rate_at(epoch);
        let epoch_result = run_epoch(gen, state, &slots, &slot_data, &slot_shapes, &targets);
        let (loss_value, grads) = match epoch_result {
            Ok(v) => v,
            Err(FitError::Tensor(TensorError::NonFinite { .. })) => {
                return Err(FitError::Diverged { epoch, history });
            }
            Err(e) => return Err(e),
        };
        let loss_f64 = loss_value.to_f64();
        if !loss_f64.is_finite() {
            return Err(FitError::Diverged { epoch, history });
        }
        history.push(loss_f64);
        on_epoch(epoch, loss_f64);
        if config.track_best {
            let improved = best.as_ref().map(|(b, _, _)| loss_f64 < *b).unwrap_or(true);
            if improved {
                best = Some((loss_f64, epoch, slot_data.clone()));
            }
        }
        if adam.step(&mut slot_data, &grads, lr).is_err() {
            return Err(FitError::Diverged { epoch, history });
        }
    }

    // Without best tracking the final iterate's evaluated loss is
    // exported instead of the minimum.
    let (best_loss, best_epoch, best_slots) = if config.track_best {
        best.expect("at least one epoch ran")
    } else {
        let last = history.len() - 1;
        (history[last], last, slot_data.clone())
    };
    let final_loss = *history.last().unwrap();

    let mut best_generator = gen.clone();
    let mut best_latents = state.clone();
    write_slots(&mut best_generator, &mut best_latents, &slots, &slot_shapes, &best_slots);

    Ok(FitResult {
        best_generator,
        best_latents,
        best_loss,
        best_epoch,
        loss_history: history,
        final_loss,
    })
}

fn run_epoch<T: Real>(
    gen: &Generator<T>,
    state: &LatentState<T>,
    slots: &Slots,
    slot_data: &[Vec<T>],
    slot_shapes: &[Vec<usize>],
    targets: &[Tensor<T>],
) -> Result<(T, Vec<Vec<T>>), FitError> {
    let mut g = Graph::new();
    let mut ids = Vec::with_capacity(slot_data.len());
    for (data, shape) in slot_data.iter().zip(slot_shapes) {
        ids.push(g.leaf(Tensor::new(shape.clone(), data.clone())?, true));
    }
    let weight_ids = &ids[..slots.weight_count];
    let bias_ids = (slots.bias_count > 0)
        .then(|| &ids[slots.weight_count..slots.weight_count + slots.bias_count]);
    let z0_id = ids[slots.weight_count + slots.bias_count];
    // Given tracks enter as constant leaves.
    let mut track_ids = Vec::with_capacity(state.tracks.len());
    let mut learnable_iter = ids[slots.weight_count + slots.bias_count + 1..].iter();
    for tr in &state.tracks {
        if tr.learnable {
            track_ids.push(*learnable_iter.next().expect("slot per learnable track"));
        } else {
            let leaf = g.leaf(Tensor::new(vec![tr.values.len()], tr.values.clone())?, false);
            track_ids.push(leaf);
        }
    }
    let loss_id = build_loss(&mut g, gen, weight_ids, bias_ids, z0_id, &track_ids, targets)?;
    let loss_value = g.value(loss_id).data()[0];
    g.backward(loss_id)?;
    let grads: Vec<Vec<T>> = ids
        .iter()
        .zip(slot_data)
        .map(|(&id, data)| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::zero(); data.len()]))
        .collect();
    Ok((loss_value, grads))
}

fn write_slots<T: Real>(
    gen: &mut Generator<T>,
    state: &mut LatentState<T>,
    slots: &Slots,
    slot_shapes: &[Vec<usize>],
    slot_data: &[Vec<T>],
) {
    let weights: Vec<Tensor<T>> = (0..slots.weight_count)
        .map(|i| Tensor::from_parts(slot_shapes[i].clone(), slot_data[i].clone()))
        .collect();
    gen.set_weights(weights);
    if slots.bias_count > 0 {
        let biases: Vec<Tensor<T>> = (slots.weight_count..slots.weight_count + slots.bias_count)
            .map(|i| Tensor::from_parts(slot_shapes[i].clone(), slot_data[i].clone()))
            .collect();
        gen.set_biases(biases);
    }
    let z0_index = slots.weight_count + slots.bias_count;
    state.z0 = slot_data[z0_index].clone();
    for (offset, &track) in slots.learnable_tracks.iter().enumerate() {
        state.tracks[track].values = slot_data[z0_index + 1 + offset].clone();
    }
}
