//! Frame sequences, the synthetic moving-shapes generator and on-disk formats.

mod dseq;
mod model;
mod synth;

pub use dseq::{
    load_sequence, parse_sequence, read_sequence, save_sequence, write_sequence, DSEQ_HEADER_LEN, DSEQ_MAGIC,
    DSEQ_VERSION,
};
pub use model::{
    load_model, parse_model, read_model, save_model, write_model, LoadedModel, MODEL_MAGIC, MODEL_VERSION,
};
pub use synth::{
    class_of, generate_dataset, generate_sequence, DatasetKind, DatasetSpec, LabeledSequence, MotionAxis, ShapeKind,
    SyntheticSceneSpec, NUM_CLASSES,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `T` frames of shape `[h, w, c]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Tensor>,
    fps: f32,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>, fps: f32) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Domain("a sequence needs at least one frame".into()));
        };
        if first.shape().len() != 3 {
            return Err(Error::Dimension(format!("frames must be [h, w, c], got {:?}", first.shape())));
        }
        if let Some(f) = frames.iter().find(|f| f.shape() != first.shape()) {
            return Err(Error::Dimension(format!("frame shape {:?} differs from {:?}", f.shape(), first.shape())));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::Domain(format!("fps must be positive, got {fps}")));
        }
        if frames.iter().flat_map(|f| f.data()).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Tensor> {
        self.frames
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `[h, w, c]`.
    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }
}

/// Keeps frames `0, d, 2d, ...` and divides the frame rate by `d`.
pub fn subsample(seq: &FrameSequence, d: usize) -> Result<FrameSequence> {
    if d == 0 || seq.len() < d {
        return Err(Error::Domain(format!("cannot subsample {} frames by {d}", seq.len())));
    }
    Ok(FrameSequence { frames: seq.frames.iter().step_by(d).cloned().collect(), fps: seq.fps / d as f32 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(t: usize) -> FrameSequence {
        let frames = (0..t).map(|i| Tensor::full(&[1, 1, 1], i as f32 / t as f32)).collect();
        FrameSequence::new(frames, 24.0).unwrap()
    }

    #[test]
    fn subsample_keeps_every_dth() {
        let s = numbered(10);
        assert_eq!(subsample(&s, 1).unwrap(), s);
        let s3 = subsample(&s, 3).unwrap();
        let kept: Vec<f32> = s3.frames().iter().map(|f| f.data()[0] * 10.0).collect();
        assert_eq!(kept, vec![0.0, 3.0, 6.0, 9.0]);
        assert_eq!(s3.fps(), 8.0);
        assert!(subsample(&s, 0).is_err());
        assert!(subsample(&s, 11).is_err());
    }

    #[test]
    fn subsample_composes() {
        let s = numbered(17);
        assert_eq!(subsample(&subsample(&s, 2).unwrap(), 2).unwrap(), subsample(&s, 4).unwrap());
    }

    #[test]
    fn rejects_bad_sequences() {
        assert!(FrameSequence::new(vec![], 1.0).is_err());
        let a = Tensor::zeros(&[2, 2, 1]);
        let b = Tensor::zeros(&[2, 1, 1]);
        assert!(FrameSequence::new(vec![a.clone(), b], 1.0).is_err());
        assert!(FrameSequence::new(vec![a.clone()], 0.0).is_err());
        assert!(FrameSequence::new(vec![Tensor::full(&[1, 1, 1], 1.5)], 1.0).is_err());
    }
}
