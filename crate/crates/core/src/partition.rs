//! Partition encoding: per-joint feature lifting, grouping joints into part
//! tokens, and the patch embedding of each part.
//!
//! Joint features are kept position-major, `[rows, channels]` with rows
//! ordered `(sample, person, frame, joint)`. Part tokens are ordered
//! `(sample, frame, person, part)`, i.e. token `f * P' + p` inside a sample
//! where `P' = persons * P`. A token's `M * C_o` channels are the slot
//! features concatenated slot by slot, zero for padded slots.

use std::sync::Arc;

use crate::augment;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numkernel::{Tape, Tensor, Var};
use crate::params::{Affine, BatchNormParams, ParamSet};
use crate::skeldata::{PartitionMap, SkeletonSequence, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionEncoderParams {
    pub lift1: Affine,
    pub bn1: BatchNormParams,
    pub lift2: Affine,
    pub bn2: BatchNormParams,
    pub embed: Affine,
}

impl PartitionEncoderParams {
    pub fn register(
        set: &mut ParamSet,
        prefix: &str,
        joint_channels: usize,
        max_joints: usize,
        token_channels: usize,
    ) -> Self {
        PartitionEncoderParams {
            lift1: Affine::register(set, &format!("{prefix}.lift1"), CHANNELS, joint_channels),
            bn1: BatchNormParams::register(set, &format!("{prefix}.bn1"), joint_channels),
            lift2: Affine::register(
                set,
                &format!("{prefix}.lift2"),
                joint_channels,
                joint_channels,
            ),
            bn2: BatchNormParams::register(set, &format!("{prefix}.bn2"), joint_channels),
            embed: Affine::register(
                set,
                &format!("{prefix}.embed"),
                joint_channels * max_joints,
                token_channels,
            ),
        }
    }

    pub fn joint_channels(&self) -> usize {
        self.lift1.fan_out
    }

    pub fn token_channels(&self) -> usize {
        self.embed.fan_out
    }
}

/// Stack sequences into joint rows `[batch * persons * frames * joints, 3]`.
///
/// All sequences must share frame, joint and person counts.
pub fn joint_rows(seqs: &[SkeletonSequence]) -> Result<Tensor> {
    let first = seqs
        .first()
        .ok_or(Error::EmptyReduction("joint_rows on empty batch"))?;
    let (nf, nv, nb) = (first.frames(), first.joints(), first.persons());
    let mut data = Vec::with_capacity(seqs.len() * nb * nf * nv * CHANNELS);
    for s in seqs {
        if (s.frames(), s.joints(), s.persons()) != (nf, nv, nb) {
            return Err(Error::ShapeMismatch {
                op: "joint_rows",
                lhs: vec![nf, nv, nb],
                rhs: vec![s.frames(), s.joints(), s.persons()],
            });
        }
        for b in 0..nb {
            for f in 0..nf {
                for v in 0..nv {
                    data.extend_from_slice(&s.point(f, v, b));
                }
            }
        }
    }
    Tensor::new(&[data.len() / CHANNELS, CHANNELS], data)
}

/// `f_J`: two pointwise channel lifts, each followed by batch norm and ReLU.
pub fn extract_joint_features(
    g: &mut Graph<'_>,
    enc: &PartitionEncoderParams,
    x: Var,
) -> Result<Var> {
    if g.tape.value(x).cols() != CHANNELS {
        return Err(Error::ShapeMismatch {
            op: "extract_joint_features",
            lhs: g.tape.shape(x).to_vec(),
            rhs: vec![CHANNELS],
        });
    }
    let h = g.affine(&enc.lift1, x)?;
    let h = g.batch_norm(&enc.bn1, h)?;
    let h = g.tape.relu(h)?;
    let h = g.affine(&enc.lift2, h)?;
    let h = g.batch_norm(&enc.bn2, h)?;
    g.tape.relu(h)
}

/// Source joint row for every `(token, slot)` pair; `None` marks padding.
pub fn gather_index(
    map: &PartitionMap,
    batch: usize,
    persons: usize,
    frames: usize,
) -> Vec<Option<usize>> {
    let (nv, np, m) = (map.joints(), map.num_parts(), map.max_joints());
    let mut index = Vec::with_capacity(batch * frames * persons * np * m);
    for s in 0..batch {
        for f in 0..frames {
            for b in 0..persons {
                let base = ((s * persons + b) * frames + f) * nv;
                for p in 0..np {
                    for slot in 0..m {
                        index.push(map.slot(p, slot).map(|j| base + j));
                    }
                }
            }
        }
    }
    index
}

/// Group joint features into part tokens `[batch * frames * persons * P, M * C_o]`.
pub fn gather_parts(
    tape: &mut Tape,
    joint_features: Var,
    map: &PartitionMap,
    batch: usize,
    persons: usize,
    frames: usize,
) -> Result<Var> {
    let rows = tape.value(joint_features).rows();
    let want = batch * persons * frames * map.joints();
    if rows != want {
        return Err(Error::ShapeMismatch {
            op: "gather_parts",
            lhs: vec![rows],
            rhs: vec![want],
        });
    }
    let index = gather_index(map, batch, persons, frames);
    tape.gather(joint_features, Arc::new(index), map.max_joints())
}

/// `f_P`: affine map of each part token followed by ReLU.
pub fn embed_parts(g: &mut Graph<'_>, enc: &PartitionEncoderParams, tokens: Var) -> Result<Var> {
    let h = g.affine(&enc.embed, tokens)?;
    g.tape.relu(h)
}

/// 0/1 mask over joint rows zeroing, per sample, every joint of the chosen
/// part in all frames and persons.
pub fn part_mask_rows(
    map: &PartitionMap,
    masks: &[Option<usize>],
    persons: usize,
    frames: usize,
    channels: usize,
) -> Result<Tensor> {
    let per_sample = persons * frames * map.joints();
    let ones = Tensor::full(&[persons * frames, map.joints(), channels], 1.0);
    let mut data = Vec::with_capacity(masks.len() * per_sample * channels);
    for m in masks {
        match m {
            Some(p) => data.extend_from_slice(augment::part_mask(&ones, map, *p)?.data()),
            None => data.extend_from_slice(ones.data()),
        }
    }
    Tensor::new(&[masks.len() * per_sample, channels], data)
}

/// Full encoder: sequences to part tokens `[batch * N, C_P]` with
/// `N = frames * persons * P`. `part_masks`, when non-empty, holds one
/// optional part index per sample, applied to the lifted joint features.
pub fn partition_encode(
    g: &mut Graph<'_>,
    enc: &PartitionEncoderParams,
    map: &PartitionMap,
    seqs: &[SkeletonSequence],
    part_masks: &[Option<usize>],
) -> Result<Var> {
    let first = seqs
        .first()
        .ok_or(Error::EmptyReduction("partition_encode on empty batch"))?;
    if first.joints() != map.joints() {
        return Err(Error::ShapeMismatch {
            op: "partition_encode",
            lhs: vec![first.joints()],
            rhs: vec![map.joints()],
        });
    }
    let (persons, frames) = (first.persons(), first.frames());
    let x = g.tape.constant(joint_rows(seqs)?);
    let mut xj = extract_joint_features(g, enc, x)?;
    if part_masks.iter().any(Option::is_some) {
        if part_masks.len() != seqs.len() {
            return Err(Error::ShapeMismatch {
                op: "partition_encode masks",
                lhs: vec![part_masks.len()],
                rhs: vec![seqs.len()],
            });
        }
        let mask = part_mask_rows(map, part_masks, persons, frames, enc.joint_channels())?;
        let mask = g.tape.constant(mask);
        xj = g.tape.mul(xj, mask)?;
    }
    let parts = gather_parts(&mut g.tape, xj, map, seqs.len(), persons, frames)?;
    embed_parts(g, enc, parts)
}
