//! Synthetic data: motion triggers, the nested-disk phantom and the
//! semi-synthetic transforms applied to real sequences.
//!
//! The phantom shows two nested disks: the inner disk dilates with
//! the cardiac trigger, and the whole frame is sheared row-wise with
//! the respiratory trigger. Alongside the mixed video, ground-truth
//! single-motion videos are rendered by freezing the other trigger
//! at its first-frame value.

use serde::{Deserialize, Serialize};

use crate::video::{VideoError, VideoTensor};

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("trigger needs at least 2 frames, got {frames}")]
    TooFewFrames { frames: usize },
    #[error("cycle count must be positive, got {cycles}")]
    NonPositiveCycles { cycles: f64 },
    #[error("trigger values must lie in [0,1] with min 0 and max 1")]
    NotNormalized,
    #[error("trigger length {trigger} does not match {frames} frames")]
    TriggerLengthMismatch { trigger: usize, frames: usize },
    #[error("inner disk (base {base} + amplitude {amplitude}) leaves outer disk (radius {outer})")]
    InnerDiskEscapes {
        base: f64,
        amplitude: f64,
        outer: f64,
    },
    #[error("sheared disk leaves the frame (reach {reach:.1} in extent {extent})")]
    ShearOutOfFrame { reach: f64, extent: usize },
    #[error("concat repetition count must be >= 1")]
    ZeroRepetitions,
    #[error(transparent)]
    Video(#[from] VideoError),
}

/// One-dimensional per-frame signal parametrizing one motion type.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTrigger {
    pub values: Vec<f64>,
    pub cycles: f64,
    pub label: String,
}

impl MotionTrigger {
    /// Validates the normalization invariant: values in [0,1] with
    /// the extremes attained.
    pub fn new(values: Vec<f64>, cycles: f64, label: impl Into<String>) -> Result<Self, PhantomError> {
        if values.len() < 2 {
            return Err(PhantomError::TooFewFrames { frames: values.len() });
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(min == 0.0 && (max - 1.0).abs() < 1e-12) {
            return Err(PhantomError::NotNormalized);
        }
        Ok(Self {
            values,
            cycles,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Raised-cosine trigger with the given number of cycles over T
/// frames, min-max normalized to [0, 1].
pub fn make_trigger(
    frames: usize,
    cycles: f64,
    phase: f64,
    label: impl Into<String>,
) -> Result<MotionTrigger, PhantomError> {
    if frames < 2 {
        return Err(PhantomError::TooFewFrames { frames });
    }
    if cycles <= 0.0 {
        return Err(PhantomError::NonPositiveCycles { cycles });
    }
    let raw: Vec<f64> = (0..frames)
        .map(|t| {
            let angle = 2.0 * std::f64::consts::PI * cycles * t as f64 / frames as f64 + phase;
            (1.0 - angle.cos()) / 2.0
        })
        .collect();
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let values = raw.iter().map(|v| (v - min) / span).collect();
    MotionTrigger::new(values, cycles, label)
}

/// Geometry and intensities of the nested-disk phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomScene {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub center_y: f64,
    pub center_x: f64,
    pub outer_radius: f64,
    pub inner_base_radius: f64,
    pub inner_dilation_amplitude: f64,
    /// Horizontal shift per row index at full respiratory excursion,
    /// in pixels.
    pub shear_amplitude: f64,
    pub intensity_background: f64,
    pub intensity_outer: f64,
    pub intensity_inner: f64,
    pub cardiac_cycles: f64,
    pub respiratory_cycles: f64,
}

impl Default for PhantomScene {
    fn default() -> Self {
        PhantomScene {
            frames: 80,
            height: 64,
            width: 64,
            center_y: 31.5,
            center_x: 31.5,
            outer_radius: 24.0,
            inner_base_radius: 8.0,
            inner_dilation_amplitude: 6.0,
            shear_amplitude: 0.15,
            intensity_background: 0.0,
            intensity_outer: 0.5,
            intensity_inner: 1.0,
            cardiac_cycles: 3.0,
            respiratory_cycles: 2.0,
        }
    }
}

impl PhantomScene {
    /// Half-size preset used for quick runs and CI.
    pub fn reduced() -> Self {
        PhantomScene {
            frames: 40,
            height: 32,
            width: 32,
            center_y: 15.5,
            center_x: 15.5,
            outer_radius: 12.0,
            inner_base_radius: 4.0,
            inner_dilation_amplitude: 3.0,
            shear_amplitude: 0.15,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.frames < 2 {
            return Err(PhantomError::TooFewFrames { frames: self.frames });
        }
        if self.inner_base_radius + self.inner_dilation_amplitude >= self.outer_radius {
            return Err(PhantomError::InnerDiskEscapes {
                base: self.inner_base_radius,
                amplitude: self.inner_dilation_amplitude,
                outer: self.outer_radius,
            });
        }
        // Sheared disk must stay inside the frame at full excursion.
        for y in 0..self.height {
            let dy = y as f64 - self.center_y;
            let half = self.outer_radius * self.outer_radius - dy * dy;
            if half <= 0.0 {
                continue;
            }
            let half = half.sqrt();
            let shift = self.shear_amplitude * y as f64;
            let right = self.center_x + half + shift.max(0.0);
            let left = self.center_x - half + shift.min(0.0);
            if right > self.width as f64 - 0.5 || left < -0.5 {
                return Err(PhantomError::ShearOutOfFrame {
                    reach: if right > self.width as f64 - 0.5 { right } else { left },
                    extent: self.width,
                });
            }
        }
        Ok(())
    }

    pub fn cardiac_trigger(&self) -> Result<MotionTrigger, PhantomError> {
        make_trigger(self.frames, self.cardiac_cycles, 0.0, "cardiac")
    }

    pub fn respiratory_trigger(&self) -> Result<MotionTrigger, PhantomError> {
        make_trigger(self.frames, self.respiratory_cycles, 0.0, "respiratory")
    }
}

/// Anti-aliased nested-disk raster for one cardiac state. Coverage
/// is estimated on a 4x4 subpixel grid.
fn render_disks(scene: &PhantomScene, cardiac: f64) -> Vec<f32> {
    let inner_r = scene.inner_base_radius + scene.inner_dilation_amplitude * cardiac;
    let outer_r2 = scene.outer_radius * scene.outer_radius;
    let inner_r2 = inner_r * inner_r;
    let mut frame = vec![0.0_f32; scene.height * scene.width];
    for y in 0..scene.height {
        for x in 0..scene.width {
            let mut acc = 0.0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let py = y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5;
                    let px = x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5;
                    let dy = py - scene.center_y;
                    let dx = px - scene.center_x;
                    let d2 = dy * dy + dx * dx;
                    acc += if d2 <= inner_r2 {
                        scene.intensity_inner
                    } else if d2 <= outer_r2 {
                        scene.intensity_outer
                    } else {
                        scene.intensity_background
                    };
                }
            }
            frame[y * scene.width + x] = (acc / 16.0) as f32;
        }
    }
    frame
}

/// Shear direction. `Horizontal`: rows shift horizontally in
/// proportion to the row index. `Vertical`: columns shift vertically
/// in proportion to the column index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShearAxis {
    Horizontal,
    Vertical,
}

/// Bilinear sample along one line with edge replication.
fn shear_line(src: impl Fn(usize) -> f32, dst: &mut [f32], n: usize, shift: f64) {
    for (i, out) in dst.iter_mut().enumerate().take(n) {
        let pos = i as f64 - shift;
        let floor = pos.floor();
        let frac = (pos - floor) as f32;
        let i0 = (floor as isize).clamp(0, n as isize - 1) as usize;
        let i1 = ((floor as isize) + 1).clamp(0, n as isize - 1) as usize;
        *out = src(i0) * (1.0 - frac) + src(i1) * frac;
    }
}

fn shear_frame(frame: &[f32], height: usize, width: usize, amount: f64, axis: ShearAxis) -> Vec<f32> {
    if amount == 0.0 {
        return frame.to_vec();
    }
    let mut out = vec![0.0_f32; frame.len()];
    match axis {
        ShearAxis::Horizontal => {
            for y in 0..height {
                let shift = amount * y as f64;
                let row = &frame[y * width..(y + 1) * width];
                shear_line(|x| row[x], &mut out[y * width..(y + 1) * width], width, shift);
            }
        }
        ShearAxis::Vertical => {
            let mut column = vec![0.0_f32; height];
            for x in 0..width {
                let shift = amount * x as f64;
                shear_line(|y| frame[y * width + x], &mut column, height, shift);
                for y in 0..height {
                    out[y * width + x] = column[y];
                }
            }
        }
    }
    out
}

/// Per-frame shear with a per-row (or per-column) subpixel shift of
/// `amplitude * trigger[t] * index`, bilinear, edge-replicate.
pub fn shear_video(
    video: &VideoTensor,
    trigger: &MotionTrigger,
    axis: ShearAxis,
    amplitude: f64,
) -> Result<VideoTensor, PhantomError> {
    if trigger.len() != video.frames() {
        return Err(PhantomError::TriggerLengthMismatch {
            trigger: trigger.len(),
            frames: video.frames(),
        });
    }
    let (h, w) = (video.height(), video.width());
    let mut data = Vec::with_capacity(video.data().len());
    for t in 0..video.frames() {
        let frame = video.frame(t)?;
        data.extend(shear_frame(frame, h, w, amplitude * trigger.values[t], axis));
    }
    Ok(VideoTensor::new(video.frames(), h, w, data)?)
}

/// Renders the mixed-motion phantom plus the two ground-truth
/// single-motion videos (the other trigger frozen at frame 0).
pub fn render_phantom(
    scene: &PhantomScene,
    cardiac: &MotionTrigger,
    resp: &MotionTrigger,
) -> Result<(VideoTensor, VideoTensor, VideoTensor), PhantomError> {
    scene.validate()?;
    for trig in [cardiac, resp] {
        if trig.len() != scene.frames {
            return Err(PhantomError::TriggerLengthMismatch {
                trigger: trig.len(),
                frames: scene.frames,
            });
        }
    }
    let (h, w) = (scene.height, scene.width);
    let render = |cardiac_v: f64, resp_v: f64| -> Vec<f32> {
        let disks = render_disks(scene, cardiac_v);
        shear_frame(&disks, h, w, scene.shear_amplitude * resp_v, ShearAxis::Horizontal)
    };
    let mut mixed = Vec::with_capacity(scene.frames * h * w);
    let mut cardiac_only = Vec::with_capacity(scene.frames * h * w);
    let mut resp_only = Vec::with_capacity(scene.frames * h * w);
    for t in 0..scene.frames {
        mixed.extend(render(cardiac.values[t], resp.values[t]));
        cardiac_only.extend(render(cardiac.values[t], resp.values[0]));
        resp_only.extend(render(cardiac.values[0], resp.values[t]));
    }
    Ok((
        VideoTensor::new(scene.frames, h, w, mixed)?,
        VideoTensor::new(scene.frames, h, w, cardiac_only)?,
        VideoTensor::new(scene.frames, h, w, resp_only)?,
    ))
}

/// Tiles the video n times along the time axis.
pub fn concat_cycles(video: &VideoTensor, n: usize) -> Result<VideoTensor, PhantomError> {
    if n == 0 {
        return Err(PhantomError::ZeroRepetitions);
    }
    let mut data = Vec::with_capacity(video.data().len() * n);
    for _ in 0..n {
        data.extend_from_slice(video.data());
    }
    Ok(VideoTensor::new(
        video.frames() * n,
        video.height(),
        video.width(),
        data,
    )?)
}

/// Per-frame spatial crop.
pub fn crop(
    video: &VideoTensor,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Result<VideoTensor, PhantomError> {
    if top + h > video.height() || left + w > video.width() {
        return Err(PhantomError::Video(VideoError::CropOutOfBounds {
            top,
            left,
            h,
            w,
            height: video.height(),
            width: video.width(),
        }));
    }
    let mut data = Vec::with_capacity(video.frames() * h * w);
    for t in 0..video.frames() {
        let frame = video.frame(t)?;
        for y in top..top + h {
            data.extend_from_slice(&frame[y * video.width() + left..y * video.width() + left + w]);
        }
    }
    Ok(VideoTensor::new(video.frames(), h, w, data)?)
}
