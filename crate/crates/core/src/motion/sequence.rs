use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::skeleton::{Skeleton, TokenLayout};

/// `T` frames of flat per-frame features laid out as root | joints 1..n−1 | contact.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
    layout: TokenLayout,
    skeleton: Skeleton,
    fps: u32,
}

impl MotionSequence {
    pub fn new(frames: Tensor, layout: TokenLayout, skeleton: Skeleton, fps: u32) -> Result<Self> {
        skeleton.validate()?;
        if frames.shape().len() != 2 {
            return Err(Error::Layout(format!("frames must be a matrix, got {:?}", frames.shape())));
        }
        let t = frames.rows();
        if t < 2 {
            return Err(Error::SequenceTooShort {
                what: "motion frames",
                len: t,
                min: 2,
            });
        }
        let width = layout.width(skeleton.joint_count());
        if frames.cols() != width {
            return Err(Error::Layout(format!(
                "frame width {} does not match layout width {width}",
                frames.cols()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Layout("motion contains non-finite values".into()));
        }
        Ok(Self {
            frames,
            layout,
            skeleton,
            fps,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.frames.cols()
    }

    /// Keeps the first `len` frames.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        let w = self.width();
        let data = self.frames.data()[..len.min(self.len()) * w].to_vec();
        let frames = Tensor::new(vec![data.len() / w, w], data)?;
        Self::new(frames, self.layout, self.skeleton.clone(), self.fps)
    }

    pub fn token_count(&self) -> usize {
        self.skeleton.joint_count() + 1
    }
}

/// Column range of token `t` (`0` root, `1..n` joints, `n` contact) in a flat frame.
pub fn token_span(layout: &TokenLayout, n: usize, t: usize) -> std::ops::Range<usize> {
    if t == 0 {
        0..layout.root_dim
    } else if t < n {
        let start = layout.root_dim + (t - 1) * layout.joint_dim;
        start..start + layout.joint_dim
    } else {
        let start = layout.root_dim + (n - 1) * layout.joint_dim;
        start..start + layout.contact_dim
    }
}

/// Splits each frame into `n+1` tokens of width `d_token`, zero-padded on the right.
/// Returns `T × (n+1) × d_token`.
pub fn rearrange_to_tokens(m: &MotionSequence) -> Result<Tensor> {
    rearrange_frames(m.frames(), &m.layout(), m.skeleton().joint_count())
}

pub fn rearrange_frames(frames: &Tensor, layout: &TokenLayout, n: usize) -> Result<Tensor> {
    let width = layout.width(n);
    if frames.cols() != width {
        return Err(Error::Layout(format!(
            "frame width {} does not match layout width {width}",
            frames.cols()
        )));
    }
    let d = layout.token_width();
    let t = frames.rows();
    let mut out = vec![0.0; t * (n + 1) * d];
    for f in 0..t {
        let row = frames.row(f);
        for tok in 0..=n {
            let span = token_span(layout, n, tok);
            let dst = (f * (n + 1) + tok) * d;
            out[dst..dst + span.len()].copy_from_slice(&row[span]);
        }
    }
    Tensor::new(vec![t, n + 1, d], out)
}

/// Inverse of [`rearrange_frames`]: drops the padding and concatenates the token slices.
pub fn flatten_tokens(tokens: &Tensor, layout: &TokenLayout, n: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != n + 1 || s[2] != layout.token_width() {
        return Err(Error::Layout(format!(
            "token tensor {s:?} does not match {} tokens of width {}",
            n + 1,
            layout.token_width()
        )));
    }
    let (t, d) = (s[0], s[2]);
    let width = layout.width(n);
    let mut out = vec![0.0; t * width];
    for f in 0..t {
        for tok in 0..=n {
            let span = token_span(layout, n, tok);
            let src = (f * (n + 1) + tok) * d;
            out[f * width + span.start..f * width + span.end]
                .copy_from_slice(&tokens.data()[src..src + span.len()]);
        }
    }
    Tensor::new(vec![t, width], out)
}

/// Forward differences `frames[t+1] − frames[t]`.
pub fn compute_velocity(m: &MotionSequence) -> Result<Tensor> {
    frame_velocity(m.frames())
}

pub fn frame_velocity(frames: &Tensor) -> Result<Tensor> {
    let t = frames.rows();
    if t < 2 {
        return Err(Error::SequenceTooShort {
            what: "velocity input",
            len: t,
            min: 2,
        });
    }
    let w = frames.cols();
    let d = frames.data();
    let out = (0..(t - 1) * w).map(|i| d[i + w] - d[i]).collect();
    Tensor::new(vec![t - 1, w], out)
}

/// Linear-interpolation resampling of the rows of `frames` to `len` rows.
pub fn resample_frames(frames: &Tensor, len: usize) -> Tensor {
    let (t, w) = (frames.rows(), frames.cols());
    let mut out = Vec::with_capacity(len * w);
    for i in 0..len {
        let pos = if len == 1 { 0.0 } else { i as f64 * (t - 1) as f64 / (len - 1) as f64 };
        let lo = (pos.floor() as usize).min(t - 1);
        let hi = (lo + 1).min(t - 1);
        let frac = pos - lo as f64;
        for c in 0..w {
            out.push(frames.at(lo, c) * (1.0 - frac) + frames.at(hi, c) * frac);
        }
    }
    Tensor::from_parts(vec![len, w], out)
}
