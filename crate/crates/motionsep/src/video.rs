//! Dense video storage: T frames of H x W real-valued images,
//! frame-major then row-major.

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum VideoError {
    #[error("dimensions {frames}x{height}x{width} imply {expected} values, got {actual}")]
    SizeMismatch {
        frames: usize,
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite pixel value")]
    NonFinite,
    #[error("frame index {index} out of range for {frames} frames")]
    FrameOutOfRange { index: usize, frames: usize },
    #[error("crop window ({top},{left})+{h}x{w} exceeds frame {height}x{width}")]
    CropOutOfBounds {
        top: usize,
        left: usize,
        h: usize,
        w: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, VideoError> {
        let expected = frames * height * width;
        if data.len() != expected {
            return Err(VideoError::SizeMismatch {
                frames,
                height,
                width,
                expected,
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(VideoError::NonFinite);
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> Result<&[f32], VideoError> {
        if t >= self.frames {
            return Err(VideoError::FrameOutOfRange {
                index: t,
                frames: self.frames,
            });
        }
        let n = self.height * self.width;
        Ok(&self.data[t * n..(t + 1) * n])
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[t * n..(t + 1) * n]
    }

    /// Each frame as an `[H, W]` tensor sharing no storage with self.
    pub fn frame_tensors(&self) -> Vec<Tensor<f32>> {
        (0..self.frames)
            .map(|t| {
                let n = self.height * self.width;
                Tensor::from_parts(
                    vec![self.height, self.width],
                    self.data[t * n..(t + 1) * n].to_vec(),
                )
            })
            .collect()
    }
}
