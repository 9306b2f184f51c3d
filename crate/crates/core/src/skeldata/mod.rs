//! Skeleton sequences, their on-disk format, derived input modalities and a
//! synthetic dataset generator.

mod io;
mod layout;
mod synth;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use io::{
    decode_sequence, encode_sequence, load_sequence, save_sequence, DatasetManifest, ManifestEntry,
    SEQUENCE_MAGIC, SEQUENCE_VERSION,
};
pub use layout::{PartitionMap, SkeletonLayout, KINECT_JOINTS};
pub use synth::{class_template, synth_dataset, synth_sequence, SynthSpec, SYNTH_NOISE_STD};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Coordinate channels (x, y, z).
pub const CHANNELS: usize = 3;

/// Raw 3D joint trajectories of one clip, `coords[c, f, v, b]` in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    coords: Tensor,
    label: usize,
}

impl SkeletonSequence {
    /// `coords` must have shape `[3, frames, joints, persons]` with at least
    /// one frame and one person.
    pub fn new(coords: Tensor, label: usize) -> Result<Self> {
        let s = coords.shape();
        if s.len() != 4 || s[0] != CHANNELS || s[1] == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::ShapeMismatch {
                op: "SkeletonSequence::new",
                lhs: s.to_vec(),
                rhs: vec![CHANNELS, 0, 0, 0],
            });
        }
        if !coords.is_finite() {
            return Err(Error::NonFinite("skeleton coordinates"));
        }
        Ok(SkeletonSequence { coords, label })
    }

    pub fn zeros(frames: usize, joints: usize, persons: usize, label: usize) -> Self {
        Self::new(Tensor::zeros(&[CHANNELS, frames, joints, persons]), label)
            .expect("positive dimensions")
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub(crate) fn coords_mut(&mut self) -> &mut Tensor {
        &mut self.coords
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.coords.shape()[2]
    }

    pub fn persons(&self) -> usize {
        self.coords.shape()[3]
    }

    fn offset(&self, c: usize, f: usize, v: usize, b: usize) -> usize {
        let [_, nf, nv, nb] = self.dims();
        ((c * nf + f) * nv + v) * nb + b
    }

    fn dims(&self) -> [usize; 4] {
        let s = self.coords.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn get(&self, c: usize, f: usize, v: usize, b: usize) -> f64 {
        self.coords.data()[self.offset(c, f, v, b)]
    }

    pub fn set(&mut self, c: usize, f: usize, v: usize, b: usize, value: f64) {
        let i = self.offset(c, f, v, b);
        self.coords.data_mut()[i] = value;
    }

    pub fn point(&self, f: usize, v: usize, b: usize) -> [f64; 3] {
        [
            self.get(0, f, v, b),
            self.get(1, f, v, b),
            self.get(2, f, v, b),
        ]
    }

    pub fn set_point(&mut self, f: usize, v: usize, b: usize, p: [f64; 3]) {
        for (c, x) in p.into_iter().enumerate() {
            self.set(c, f, v, b, x);
        }
    }

    /// True when person `b` is the all-zero placeholder slab.
    pub fn person_absent(&self, b: usize) -> bool {
        let [_, nf, nv, _] = self.dims();
        (0..CHANNELS).all(|c| (0..nf).all(|f| (0..nv).all(|v| self.get(c, f, v, b) == 0.0)))
    }

    /// New sequence built from source frame indices.
    pub fn select_frames(&self, index: &[usize]) -> Self {
        let [_, _, nv, nb] = self.dims();
        let mut out = Self::zeros(index.len(), nv, nb, self.label);
        for (fo, &fi) in index.iter().enumerate() {
            for v in 0..nv {
                for b in 0..nb {
                    out.set_point(fo, v, b, self.point(fi, v, b));
                }
            }
        }
        out
    }

    /// Copy with `persons` person slots, padding absent ones with zeros.
    pub fn with_persons(&self, persons: usize) -> Result<Self> {
        let [_, nf, nv, nb] = self.dims();
        if persons < nb {
            return Err(Error::config(format!(
                "sequence has {nb} persons but the model accepts {persons}"
            )));
        }
        if persons == nb {
            return Ok(self.clone());
        }
        let mut out = Self::zeros(nf, nv, persons, self.label);
        for f in 0..nf {
            for v in 0..nv {
                for b in 0..nb {
                    out.set_point(f, v, b, self.point(f, v, b));
                }
            }
        }
        Ok(out)
    }
}

/// How frames are picked when a clip is brought to a fixed length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    /// Deterministic uniform grid over the whole clip.
    Eval,
    /// Random contiguous crop of at least half the clip, then a uniform grid.
    Train,
}

/// Frame indices of a uniform grid of `f_out` samples over `len` frames
/// starting at `start`; clips shorter than `f_out` repeat their last frame.
fn grid(start: usize, len: usize, f_out: usize) -> Vec<usize> {
    if len >= f_out {
        (0..f_out).map(|i| start + i * len / f_out).collect()
    } else {
        (0..f_out).map(|i| start + i.min(len - 1)).collect()
    }
}

pub fn resample_frames<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    f_out: usize,
    mode: ResampleMode,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    if f_out == 0 {
        return Err(Error::config("target frame count must be positive"));
    }
    let f_raw = seq.frames();
    let index = match mode {
        ResampleMode::Eval => grid(0, f_raw, f_out),
        ResampleMode::Train => {
            let min_len = f_raw.div_ceil(2).max(1);
            let len = rng.random_range(min_len..=f_raw);
            let start = rng.random_range(0..=f_raw - len);
            grid(start, len, f_out)
        }
    };
    Ok(seq.select_frames(&index))
}

/// Input stream derived from raw joint coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Joint,
        Modality::Bone,
        Modality::JointMotion,
        Modality::BoneMotion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
            Modality::JointMotion => "joint_motion",
            Modality::BoneMotion => "bone_motion",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown modality `{s}`")))
    }
}

/// Coordinates relative to the first person's center joint at frame 0.
/// Absent (all-zero) persons stay zero.
fn centered(seq: &SkeletonSequence, layout: &SkeletonLayout) -> SkeletonSequence {
    let origin = seq.point(0, layout.center_joint(), 0);
    let mut out = seq.clone();
    for b in 0..seq.persons() {
        if seq.person_absent(b) {
            continue;
        }
        for f in 0..seq.frames() {
            for v in 0..seq.joints() {
                let p = seq.point(f, v, b);
                out.set_point(
                    f,
                    v,
                    b,
                    [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]],
                );
            }
        }
    }
    out
}

fn bones(seq: &SkeletonSequence, layout: &SkeletonLayout) -> SkeletonSequence {
    let mut out = seq.clone();
    for b in 0..seq.persons() {
        for f in 0..seq.frames() {
            for v in 0..seq.joints() {
                let p = seq.point(f, v, b);
                let q = seq.point(f, layout.parent(v), b);
                out.set_point(f, v, b, [p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
            }
        }
    }
    out
}

/// `x[t+1] - x[t]`, with the final frame set to zero.
fn motion(seq: &SkeletonSequence) -> SkeletonSequence {
    let mut out = seq.clone();
    let nf = seq.frames();
    for b in 0..seq.persons() {
        for v in 0..seq.joints() {
            for f in 0..nf {
                let d = if f + 1 < nf {
                    let (p, q) = (seq.point(f + 1, v, b), seq.point(f, v, b));
                    [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
                } else {
                    [0.0; 3]
                };
                out.set_point(f, v, b, d);
            }
        }
    }
    out
}

pub fn derive_modality(
    seq: &SkeletonSequence,
    kind: Modality,
    layout: &SkeletonLayout,
) -> Result<SkeletonSequence> {
    if seq.joints() != layout.joints() {
        return Err(Error::ShapeMismatch {
            op: "derive_modality",
            lhs: vec![seq.joints()],
            rhs: vec![layout.joints()],
        });
    }
    let joint = centered(seq, layout);
    Ok(match kind {
        Modality::Joint => joint,
        Modality::Bone => bones(&joint, layout),
        Modality::JointMotion => motion(&joint),
        Modality::BoneMotion => motion(&bones(&joint, layout)),
    })
}
