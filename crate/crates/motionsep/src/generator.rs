//! The untrained generator: architecture specs, weight
//! initialization and the disentangled latent state.
//!
//! A generator maps a q-dimensional latent vector, reshaped to
//! `q x 1 x 1`, through L transposed-convolution layers to one
//! H x W frame. The latent vector is the concatenation of a static
//! code (length q - m) and m per-frame motion scalars, which occupy
//! the last m positions.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::tensor::{Activation, Graph, NodeId, Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("spec lists {channels} channel entries but {field} has {actual} entries (expected {expected})")]
    LayerCountMismatch {
        channels: usize,
        field: &'static str,
        actual: usize,
        expected: usize,
    },
    #[error("spec needs at least one layer")]
    NoLayers,
    #[error("channel counts and kernel sizes must be positive")]
    NonPositiveExtent,
    #[error("latent length {actual} does not match latent dimension {expected}")]
    LatentLengthMismatch { expected: usize, actual: usize },
    #[error("latent dimension {q} cannot host {m} dynamic components")]
    LatentTooSmall { q: usize, m: usize },
    #[error("given track values must lie in [0, 1], found {value}")]
    TrackOutOfRange { value: f64 },
    #[error("track {track} has {actual} values, expected {expected} frames")]
    TrackLengthMismatch {
        track: usize,
        expected: usize,
        actual: usize,
    },
    #[error("frame index {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("motion index {index} out of range for {motions} motions")]
    MotionOutOfRange { index: usize, motions: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-layer activation; `None` means the convolution output is
/// passed through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSpec {
    None,
    Tanh,
    Relu,
    LeakyRelu { slope: f64 },
}

impl ActivationSpec {
    pub fn leaky() -> Self {
        ActivationSpec::LeakyRelu { slope: 0.01 }
    }

    pub fn as_activation(&self) -> Option<Activation> {
        match *self {
            ActivationSpec::None => None,
            ActivationSpec::Tanh => Some(Activation::Tanh),
            ActivationSpec::Relu => Some(Activation::Relu),
            ActivationSpec::LeakyRelu { slope } => Some(Activation::LeakyRelu { slope }),
        }
    }
}

/// Layer-wise description of a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    pub activations: Vec<ActivationSpec>,
    #[serde(default)]
    pub use_bias: bool,
}

impl GeneratorSpec {
    pub fn layer_count(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    /// Latent dimension q (the input channel count).
    pub fn latent_dim(&self) -> usize {
        self.channels[0]
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let l = self.layer_count();
        if l == 0 {
            return Err(GeneratorError::NoLayers);
        }
        for (field, len) in [
            ("kernels", self.kernels.len()),
            ("strides", self.strides.len()),
            ("paddings", self.paddings.len()),
            ("activations", self.activations.len()),
        ] {
            if len != l {
                return Err(GeneratorError::LayerCountMismatch {
                    channels: self.channels.len(),
                    field,
                    actual: len,
                    expected: l,
                });
            }
        }
        if self.channels.iter().any(|&c| c == 0) || self.kernels.iter().any(|&k| k == 0) {
            return Err(GeneratorError::NonPositiveExtent);
        }
        for a in &self.activations {
            if let Some(act) = a.as_activation() {
                act.validate()?;
            }
        }
        // Also checks every intermediate extent is positive.
        self.output_shape()?;
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let weights: usize = (0..self.layer_count())
            .map(|j| self.channels[j] * self.channels[j + 1] * self.kernels[j] * self.kernels[j])
            .sum();
        let biases: usize = if self.use_bias {
            self.channels[1..].iter().sum()
        } else {
            0
        };
        weights + biases
    }

    /// Final spatial extents for a `q x 1 x 1` input.
    pub fn output_shape(&self) -> Result<(usize, usize), GeneratorError> {
        let mut h = 1;
        let mut w = 1;
        for j in 0..self.layer_count() {
            h = crate::tensor::conv_transpose_extent(h, self.strides[j], self.paddings[j], self.kernels[j])?;
            w = crate::tensor::conv_transpose_extent(w, self.strides[j], self.paddings[j], self.kernels[j])?;
        }
        Ok((h, w))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// 5-layer config for the 64x64 nested-disk phantom.
    pub fn phantom() -> Self {
        GeneratorSpec {
            channels: vec![64, 128, 64, 32, 16, 1],
            kernels: vec![4; 5],
            strides: vec![1, 2, 2, 2, 2],
            paddings: vec![0, 1, 1, 1, 1],
            activations: vec![
                ActivationSpec::Tanh,
                ActivationSpec::leaky(),
                ActivationSpec::Tanh,
                ActivationSpec::leaky(),
                ActivationSpec::Tanh,
            ],
            use_bias: false,
        }
    }

    /// 7-layer config for 99-frame 100x100 four-chamber data.
    pub fn four_chamber() -> Self {
        GeneratorSpec {
            channels: vec![100, 640, 320, 160, 80, 40, 20, 1],
            kernels: vec![4, 4, 4, 4, 4, 4, 3],
            strides: vec![2, 2, 2, 2, 2, 2, 1],
            paddings: vec![0, 2, 0, 2, 2, 1, 1],
            activations: vec![
                ActivationSpec::Relu,
                ActivationSpec::leaky(),
                ActivationSpec::leaky(),
                ActivationSpec::leaky(),
                ActivationSpec::leaky(),
                ActivationSpec::leaky(),
                ActivationSpec::Relu,
            ],
            use_bias: false,
        }
    }

    /// 7-layer config for 81-frame 70x70 short-axis data.
    pub fn short_axis() -> Self {
        GeneratorSpec {
            kernels: vec![4, 4, 4, 4, 4, 5, 4],
            paddings: vec![0, 2, 2, 2, 2, 1, 1],
            ..Self::four_chamber()
        }
    }
}

/// A spec together with materialized weights.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    weights: Vec<Tensor<T>>,
    biases: Option<Vec<Tensor<T>>>,
}

impl<T: Real> Generator<T> {
    /// Zero-initialized generator for a valid spec.
    pub fn new(spec: GeneratorSpec) -> Result<Self, GeneratorError> {
        spec.validate()?;
        let weights = (0..spec.layer_count())
            .map(|j| {
                Tensor::zeros(vec![
                    spec.channels[j],
                    spec.channels[j + 1],
                    spec.kernels[j],
                    spec.kernels[j],
                ])
            })
            .collect();
        let biases = spec
            .use_bias
            .then(|| (0..spec.layer_count()).map(|j| Tensor::zeros(vec![spec.channels[j + 1]])).collect());
        Ok(Self { spec, weights, biases })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    pub fn biases(&self) -> Option<&[Tensor<T>]> {
        self.biases.as_deref()
    }

    pub fn set_weights(&mut self, weights: Vec<Tensor<T>>) {
        debug_assert_eq!(weights.len(), self.spec.layer_count());
        self.weights = weights;
    }

    pub fn set_biases(&mut self, biases: Vec<Tensor<T>>) {
        debug_assert!(self.spec.use_bias);
        self.biases = Some(biases);
    }

    /// Number of learnable scalars actually allocated.
    pub fn allocated_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self
                .biases
                .as_ref()
                .map(|bs| bs.iter().map(|b| b.len()).sum::<usize>())
                .unwrap_or(0)
    }

    /// Orthogonal initialization: each weight, viewed as a
    /// `c_in x (c_out * k^2)` matrix, gets orthonormal rows (or
    /// columns when the matrix is tall) from a seeded Gaussian draw.
    /// Biases, if present, start at zero.
    pub fn init_orthogonal(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, Stream::Weights);
        let spec = self.spec.clone();
        for j in 0..spec.layer_count() {
            let rows = spec.channels[j];
            let cols = spec.channels[j + 1] * spec.kernels[j] * spec.kernels[j];
            let mat = orthogonal_matrix(&mut rng, rows, cols);
            let data: Vec<T> = mat.into_iter().map(T::from_f64).collect();
            self.weights[j] = Tensor::from_parts(
                vec![spec.channels[j], spec.channels[j + 1], spec.kernels[j], spec.kernels[j]],
                data,
            );
        }
    }

    /// Default initialization: uniform on [-b, b] with
    /// b = 1 / sqrt(c_out * k^2) for each layer. Biases, if present,
    /// start at zero.
    pub fn init_default(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, Stream::Weights);
        let spec = self.spec.clone();
        for j in 0..spec.layer_count() {
            let bound = 1.0 / ((spec.channels[j + 1] * spec.kernels[j] * spec.kernels[j]) as f64).sqrt();
            let n = spec.channels[j] * spec.channels[j + 1] * spec.kernels[j] * spec.kernels[j];
            let data: Vec<T> = (0..n)
                .map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
                .collect();
            self.weights[j] = Tensor::from_parts(
                vec![spec.channels[j], spec.channels[j + 1], spec.kernels[j], spec.kernels[j]],
                data,
            );
        }
    }

    /// Inserts weight (and bias) leaves into a graph.
    pub fn leaves(&self, g: &mut Graph<T>, requires_grad: bool) -> (Vec<NodeId>, Option<Vec<NodeId>>) {
        let w_ids = self.weights.iter().map(|w| g.leaf(w.clone(), requires_grad)).collect();
        let b_ids = self
            .biases
            .as_ref()
            .map(|bs| bs.iter().map(|b| g.leaf(b.clone(), requires_grad)).collect());
        (w_ids, b_ids)
    }

    /// Records the forward pass for a latent vector node of shape
    /// `[q]`; returns the `[H, W]` frame node.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        weight_ids: &[NodeId],
        bias_ids: Option<&[NodeId]>,
        latent: NodeId,
    ) -> Result<NodeId, GeneratorError> {
        let q = self.spec.latent_dim();
        if g.value(latent).len() != q {
            return Err(GeneratorError::LatentLengthMismatch {
                expected: q,
                actual: g.value(latent).len(),
            });
        }
        let mut x = g.reshape(latent, vec![q, 1, 1])?;
        for j in 0..self.spec.layer_count() {
            let bias = bias_ids.map(|b| b[j]);
            x = g.conv_transpose2d(x, weight_ids[j], bias, self.spec.strides[j], self.spec.paddings[j])?;
            if let Some(act) = self.spec.activations[j].as_activation() {
                x = g.activation(x, act)?;
            }
        }
        let out_shape = g.value(x).shape().to_vec();
        debug_assert_eq!(out_shape[0], 1);
        let frame = g.reshape(x, vec![out_shape[1], out_shape[2]])?;
        Ok(frame)
    }

    /// Evaluates one frame without recording gradients.
    pub fn forward(&self, z: &[T]) -> Result<Tensor<T>, GeneratorError> {
        let mut g = Graph::new();
        let latent = g.leaf(Tensor::new(vec![z.len()], z.to_vec())?, false);
        let (w_ids, b_ids) = self.leaves(&mut g, false);
        let frame = self.forward_graph(&mut g, &w_ids, b_ids.as_deref(), latent)?;
        Ok(g.value(frame).clone())
    }
}

/// Rows (rows <= cols) or columns (rows > cols) of a seeded Gaussian
/// draw, orthonormalized by modified Gram-Schmidt. Row-major output.
fn orthogonal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let transpose = rows > cols;
    let (nvec, dim) = if transpose { (cols, rows) } else { (rows, cols) };
    // Draw in row-major order of the original matrix so the stream
    // consumption is layout-independent.
    let raw: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let mut basis: Vec<Vec<f64>> = (0..nvec)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    if transpose {
                        raw[d * cols + i]
                    } else {
                        raw[i * cols + d]
                    }
                })
                .collect()
        })
        .collect();
    for i in 0..nvec {
        for jprev in 0..i {
            let dot: f64 = basis[i].iter().zip(&basis[jprev]).map(|(a, b)| a * b).sum();
            for d in 0..dim {
                basis[i][d] -= dot * basis[jprev][d];
            }
        }
        let norm: f64 = basis[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut basis[i] {
            *v /= norm;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (i, vec_i) in basis.iter().enumerate() {
        for (d, &v) in vec_i.iter().enumerate() {
            if transpose {
                out[d * cols + i] = v;
            } else {
                out[i * cols + d] = v;
            }
        }
    }
    out
}

/// How one dynamic track enters the optimization.
#[derive(Debug, Clone)]
pub enum TrackInit {
    /// Values supplied a priori (a motion trigger); excluded from
    /// optimization. Must lie in [0, 1].
    Given(Vec<f64>),
    /// Initialized uniformly on [0, 1) and optimized.
    Learnable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track<T> {
    pub values: Vec<T>,
    pub learnable: bool,
}

/// Static code plus m dynamic tracks; the disentangled latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    pub z0: Vec<T>,
    pub tracks: Vec<Track<T>>,
}

impl<T: Real> LatentState<T> {
    /// Random initialization: z0 and learnable tracks uniform on
    /// [0, 1), given tracks copied verbatim.
    pub fn init(
        q: usize,
        frames: usize,
        tracks: &[TrackInit],
        seed: u64,
    ) -> Result<Self, GeneratorError> {
        let m = tracks.len();
        if q <= m {
            return Err(GeneratorError::LatentTooSmall { q, m });
        }
        let mut static_rng = rng::stream(seed, Stream::StaticLatent);
        let z0: Vec<T> = (0..q - m)
            .map(|_| T::from_f64(static_rng.random::<f64>()))
            .collect();
        let mut dyn_rng = rng::stream(seed, Stream::DynamicLatent);
        let mut out_tracks = Vec::with_capacity(m);
        for (i, track) in tracks.iter().enumerate() {
            match track {
                TrackInit::Given(values) => {
                    if values.len() != frames {
                        return Err(GeneratorError::TrackLengthMismatch {
                            track: i,
                            expected: frames,
                            actual: values.len(),
                        });
                    }
                    for &v in values {
                        if !(0.0..=1.0).contains(&v) {
                            return Err(GeneratorError::TrackOutOfRange { value: v });
                        }
                    }
                    out_tracks.push(Track {
                        values: values.iter().map(|&v| T::from_f64(v)).collect(),
                        learnable: false,
                    });
                }
                TrackInit::Learnable => {
                    out_tracks.push(Track {
                        values: (0..frames)
                            .map(|_| T::from_f64(dyn_rng.random::<f64>()))
                            .collect(),
                        learnable: true,
                    });
                }
            }
        }
        Ok(Self { z0, tracks: out_tracks })
    }

    pub fn latent_dim(&self) -> usize {
        self.z0.len() + self.tracks.len()
    }

    pub fn motions(&self) -> usize {
        self.tracks.len()
    }

    pub fn frames(&self) -> usize {
        self.tracks.first().map(|t| t.values.len()).unwrap_or(0)
    }

    /// Builds the q-vector for frame `t`. Dynamic entries occupy the
    /// last m positions; an override replaces motion i's entry by its
    /// value at the override frame.
    pub fn assemble_latent(
        &self,
        t: usize,
        overrides: &BTreeMap<usize, usize>,
    ) -> Result<Vec<T>, GeneratorError> {
        let frames = self.frames();
        if t >= frames {
            return Err(GeneratorError::FrameOutOfRange { index: t, frames });
        }
        for (&motion, &frame) in overrides {
            if motion >= self.motions() {
                return Err(GeneratorError::MotionOutOfRange {
                    index: motion,
                    motions: self.motions(),
                });
            }
            if frame >= frames {
                return Err(GeneratorError::FrameOutOfRange { index: frame, frames });
            }
        }
        let mut z = self.z0.clone();
        for (i, track) in self.tracks.iter().enumerate() {
            let frame = overrides.get(&i).copied().unwrap_or(t);
            z.push(track.values[frame]);
        }
        Ok(z)
    }
}
