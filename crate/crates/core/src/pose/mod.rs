//! Pose-parameter sequences: the 156-dim jaw/body/hand representation,
//! channel splitting, file formats and synthetic data.

pub mod io;
pub mod synth;

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use io::{load_sequence, save_sequence, FrameFile, PoseFormat};
pub use synth::{make_synthetic_dataset, SynthConfig};

pub const JAW_DIM: usize = 3;
pub const BODY_DIM: usize = 63;
pub const HAND_DIM: usize = 90;
pub const POSE_DIM: usize = JAW_DIM + BODY_DIM + HAND_DIM;
pub const DEFAULT_FPS: f64 = 30.0;
/// Sanity bound on axis-angle components.
pub const MAX_ABS_ANGLE: f64 = TAU;

/// One frame of axis-angle pose parameters, ordered jaw | body | hand.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureFrame {
    pub jaw: [f64; JAW_DIM],
    pub body: [f64; BODY_DIM],
    pub hand: [f64; HAND_DIM],
}

impl GestureFrame {
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != POSE_DIM {
            return Err(Error::invalid(format!(
                "frame width {} != {POSE_DIM}",
                values.len()
            )));
        }
        check_values(values, 0)?;
        let mut f = Self {
            jaw: [0.0; JAW_DIM],
            body: [0.0; BODY_DIM],
            hand: [0.0; HAND_DIM],
        };
        f.jaw.copy_from_slice(&values[..JAW_DIM]);
        f.body.copy_from_slice(&values[JAW_DIM..JAW_DIM + BODY_DIM]);
        f.hand.copy_from_slice(&values[JAW_DIM + BODY_DIM..]);
        Ok(f)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(POSE_DIM);
        v.extend_from_slice(&self.jaw);
        v.extend_from_slice(&self.body);
        v.extend_from_slice(&self.hand);
        v
    }
}

fn check_values(values: &[f64], first_frame: usize) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite value {v} at frame {}, column {}",
                first_frame + i / POSE_DIM,
                i % POSE_DIM
            )));
        }
        if v.abs() > MAX_ABS_ANGLE {
            return Err(Error::invalid(format!(
                "pose value {v} at frame {}, column {} exceeds 2π",
                first_frame + i / POSE_DIM,
                i % POSE_DIM
            )));
        }
    }
    Ok(())
}

/// Optional extra per-frame channel (body shape, expression, camera, ...)
/// carried through files but not used by the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraBlock {
    pub name: String,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Opaque metadata carried alongside a sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub style: Option<String>,
    pub speaker: Option<String>,
}

/// `N` frames of 156-dim poses at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureSequence {
    data: Vec<f64>,
    fps: f64,
    pub meta: SequenceMeta,
    pub extras: Vec<ExtraBlock>,
}

impl GestureSequence {
    /// Builds a sequence from row-major `N×156` values.
    pub fn new(data: Vec<f64>, fps: f64) -> Result<Self> {
        if data.is_empty() || data.len() % POSE_DIM != 0 {
            return Err(Error::invalid(format!(
                "sequence buffer of {} values is not a positive multiple of {POSE_DIM}",
                data.len()
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        check_values(&data, 0)?;
        Ok(Self {
            data,
            fps,
            meta: SequenceMeta::default(),
            extras: Vec::new(),
        })
    }

    pub fn from_frames(frames: &[GestureFrame], fps: f64) -> Result<Self> {
        Self::new(frames.iter().flat_map(GestureFrame::to_vec).collect(), fps)
    }

    pub fn zeros(frames: usize, fps: f64) -> Result<Self> {
        Self::new(vec![0.0; frames * POSE_DIM], fps)
    }

    pub fn with_meta(mut self, meta: SequenceMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len() / POSE_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * POSE_DIM..(i + 1) * POSE_DIM]
    }

    pub fn gesture_frame(&self, i: usize) -> GestureFrame {
        GestureFrame::from_slice(self.frame(i)).expect("validated at construction")
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), POSE_DIM], self.data.clone()).expect("sequence shape")
    }

    /// First `n` frames (metadata kept, extras truncated alike).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!("cannot truncate {} frames to {n}", self.len())));
        }
        let mut out = Self::new(self.data[..n * POSE_DIM].to_vec(), self.fps)?;
        out.meta = self.meta.clone();
        out.extras = self
            .extras
            .iter()
            .map(|b| ExtraBlock {
                name: b.name.clone(),
                width: b.width,
                data: b.data[..n * b.width].to_vec(),
            })
            .collect();
        Ok(out)
    }
}

/// Column-order-preserving split of a sequence into its three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSplit {
    /// `N×90`
    pub hand: Tensor,
    /// `N×63`
    pub body: Tensor,
    /// `N×3`
    pub jaw: Tensor,
}

pub fn split_channels(seq: &GestureSequence) -> ChannelSplit {
    let n = seq.len();
    let mut hand = Vec::with_capacity(n * HAND_DIM);
    let mut body = Vec::with_capacity(n * BODY_DIM);
    let mut jaw = Vec::with_capacity(n * JAW_DIM);
    for i in 0..n {
        let f = seq.frame(i);
        jaw.extend_from_slice(&f[..JAW_DIM]);
        body.extend_from_slice(&f[JAW_DIM..JAW_DIM + BODY_DIM]);
        hand.extend_from_slice(&f[JAW_DIM + BODY_DIM..]);
    }
    ChannelSplit {
        hand: Tensor::new(vec![n, HAND_DIM], hand).expect("hand shape"),
        body: Tensor::new(vec![n, BODY_DIM], body).expect("body shape"),
        jaw: Tensor::new(vec![n, JAW_DIM], jaw).expect("jaw shape"),
    }
}

/// Inverse of [`split_channels`].
pub fn concat_channels(split: &ChannelSplit, fps: f64) -> Result<GestureSequence> {
    let n = split.hand.rows();
    if split.hand.cols() != HAND_DIM
        || split.body.cols() != BODY_DIM
        || split.jaw.cols() != JAW_DIM
        || split.body.rows() != n
        || split.jaw.rows() != n
    {
        return Err(Error::shape("concat_channels", split.hand.shape(), split.body.shape()));
    }
    let mut data = Vec::with_capacity(n * POSE_DIM);
    for i in 0..n {
        data.extend_from_slice(split.jaw.row(i));
        data.extend_from_slice(split.body.row(i));
        data.extend_from_slice(split.hand.row(i));
    }
    GestureSequence::new(data, fps)
}

/// A pose sequence taken from a style-reference video, tagged with the
/// identifier of its source.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleClip {
    pub style_id: String,
    pub sequence: GestureSequence,
}

impl StyleClip {
    pub fn new(style_id: impl Into<String>, mut sequence: GestureSequence) -> Result<Self> {
        let style_id = style_id.into();
        if style_id.is_empty() {
            return Err(Error::invalid("style clip needs a non-empty style id"));
        }
        sequence.meta.style = Some(style_id.clone());
        Ok(Self { style_id, sequence })
    }

    /// Wraps a loaded sequence, requiring a style id in its metadata.
    pub fn from_sequence(sequence: GestureSequence) -> Result<Self> {
        let id = sequence
            .meta
            .style
            .clone()
            .ok_or_else(|| Error::invalid("sequence has no style id"))?;
        Self::new(id, sequence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(n: usize, seed: u64) -> GestureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * POSE_DIM).map(|_| rng.random_range(-3.0..3.0)).collect();
        GestureSequence::new(data, DEFAULT_FPS).unwrap()
    }

    #[test]
    fn split_is_definitional() {
        let frame: Vec<f64> = (0..POSE_DIM).map(|i| i as f64 * 0.01).collect();
        let seq = GestureSequence::new(frame.clone(), 30.0).unwrap();
        let s = split_channels(&seq);
        assert_eq!(s.jaw.data(), &frame[..3]);
        assert_eq!(s.body.data(), &frame[3..66]);
        assert_eq!(s.hand.data(), &frame[66..]);
        let gf = seq.gesture_frame(0);
        assert_eq!(gf.jaw[2], frame[2]);
        assert_eq!(gf.hand[0], frame[66]);
    }

    #[test]
    fn split_shapes_for_88_frames() {
        let s = split_channels(&random_seq(88, 1));
        assert_eq!(s.hand.shape(), &[88, 90]);
        assert_eq!(s.body.shape(), &[88, 63]);
        assert_eq!(s.jaw.shape(), &[88, 3]);
    }

    #[test]
    fn split_concat_roundtrip() {
        let seq = random_seq(17, 2);
        let back = concat_channels(&split_channels(&seq), seq.fps()).unwrap();
        assert_eq!(back.data(), seq.data());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(GestureSequence::new(vec![0.0; 155], 30.0).is_err());
        assert!(GestureSequence::new(vec![], 30.0).is_err());
        assert!(GestureSequence::new(vec![0.0; 156], 0.0).is_err());
        let mut v = vec![0.0; 156];
        v[7] = f64::NAN;
        assert!(GestureSequence::new(v.clone(), 30.0).is_err());
        v[7] = 7.0;
        assert!(GestureSequence::new(v, 30.0).is_err());
    }

    #[test]
    fn style_clip_needs_id() {
        assert!(StyleClip::new("", random_seq(2, 0)).is_err());
        let c = StyleClip::new("a", random_seq(2, 0)).unwrap();
        assert_eq!(c.sequence.meta.style.as_deref(), Some("a"));
    }
}
