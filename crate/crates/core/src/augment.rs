//! Training-time augmentation: clip-level 3D rotation, part masking of the
//! lifted joint features, and the joint-level baselines (Gaussian noise,
//! random joint masking).

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::skeldata::{PartitionMap, SkeletonSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Per-axis angle bound in radians; `None` disables rotation.
    pub rotation: Option<f64>,
    /// Probability that a sample gets one uniformly chosen part masked.
    pub part_mask: f64,
    pub noise_std: f64,
    pub joint_mask: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation: Some(PI / 10.0),
            part_mask: 0.5,
            noise_std: 0.0,
            joint_mask: 0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            rotation: None,
            part_mask: 0.0,
            noise_std: 0.0,
            joint_mask: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.rotation {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::config(format!(
                    "rotation bound must be >= 0, got {b}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.part_mask) {
            return Err(Error::config(format!(
                "part_mask probability {} not in [0, 1]",
                self.part_mask
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// `R = Rz(gamma) Ry(beta) Rx(alpha)` as a row-major 3x3 tensor.
pub fn rotation_matrix(alpha: f64, beta: f64, gamma: f64) -> Tensor {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
    let r = mat3(&rz, &mat3(&ry, &rx));
    Tensor::new(&[3, 3], r.iter().flatten().copied().collect()).expect("3x3")
}

fn mat3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn random_rotation<R: Rng + ?Sized>(bound: f64, rng: &mut R) -> Tensor {
    let mut angle = || {
        if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        }
    };
    let (a, b, g) = (angle(), angle(), angle());
    rotation_matrix(a, b, g)
}

/// Multiply every joint coordinate by `r`.
pub fn apply_rotation(seq: &SkeletonSequence, r: &Tensor) -> Result<SkeletonSequence> {
    if r.shape() != [3, 3] {
        return Err(Error::ShapeMismatch {
            op: "apply_rotation",
            lhs: r.shape().to_vec(),
            rhs: vec![3, 3],
        });
    }
    let m = r.data();
    let mut out = seq.clone();
    for b in 0..seq.persons() {
        for f in 0..seq.frames() {
            for v in 0..seq.joints() {
                let p = seq.point(f, v, b);
                let mut q = [0.0; 3];
                for (i, qi) in q.iter_mut().enumerate() {
                    *qi = m[3 * i] * p[0] + m[3 * i + 1] * p[1] + m[3 * i + 2] * p[2];
                }
                out.set_point(f, v, b, q);
            }
        }
    }
    Ok(out)
}

/// Zero every joint of part `p` in a feature tensor shaped `[..., V, C]`.
pub fn part_mask(x: &Tensor, map: &PartitionMap, p: usize) -> Result<Tensor> {
    if p >= map.num_parts() {
        return Err(Error::IndexOutOfRange {
            what: "part",
            index: p,
            len: map.num_parts(),
        });
    }
    let shape = x.shape();
    if shape.len() < 2 || shape[shape.len() - 2] != map.joints() {
        return Err(Error::ShapeMismatch {
            op: "part_mask",
            lhs: shape.to_vec(),
            rhs: vec![map.joints(), x.cols()],
        });
    }
    let (nv, nc) = (map.joints(), x.cols());
    let mut out = x.clone();
    for block in out.data_mut().chunks_mut(nv * nc) {
        for &j in map.part(p) {
            block[j * nc..(j + 1) * nc]
                .iter_mut()
                .for_each(|e| *e = 0.0);
        }
    }
    Ok(out)
}

/// Add i.i.d. `N(0, std^2)` noise to every coordinate of present persons.
pub fn gaussian_noise<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    std: f64,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    if !(std.is_finite() && std >= 0.0) {
        return Err(Error::config(format!("noise std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(seq.clone());
    }
    let noise = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let mut out = seq.clone();
    for b in 0..seq.persons() {
        if seq.person_absent(b) {
            continue;
        }
        for f in 0..seq.frames() {
            for v in 0..seq.joints() {
                let mut p = seq.point(f, v, b);
                p.iter_mut().for_each(|x| *x += noise.sample(rng));
                out.set_point(f, v, b, p);
            }
        }
    }
    Ok(out)
}

/// Zero `k` distinct uniformly chosen (frame, joint) cells, for all persons.
pub fn joint_mask<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    k: usize,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    let cells = seq.frames() * seq.joints();
    if k > cells {
        return Err(Error::config(format!(
            "joint_mask count {k} exceeds {cells} frame-joint cells"
        )));
    }
    let mut out = seq.clone();
    for cell in index::sample(rng, cells, k) {
        let (f, v) = (cell / seq.joints(), cell % seq.joints());
        for b in 0..seq.persons() {
            out.set_point(f, v, b, [0.0; 3]);
        }
    }
    Ok(out)
}

/// Coordinate-level augmentations for one sample plus the part (if any) to
/// mask in its lifted joint features.
pub fn augment_sample<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    cfg: &AugmentConfig,
    map: &PartitionMap,
    rng: &mut R,
) -> Result<(SkeletonSequence, Option<usize>)> {
    let mut out = match cfg.rotation {
        Some(bound) => apply_rotation(seq, &random_rotation(bound, rng))?,
        None => seq.clone(),
    };
    if cfg.noise_std > 0.0 {
        out = gaussian_noise(&out, cfg.noise_std, rng)?;
    }
    if cfg.joint_mask > 0 {
        out = joint_mask(&out, cfg.joint_mask, rng)?;
    }
    let masked = (cfg.part_mask > 0.0 && rng.random_bool(cfg.part_mask))
        .then(|| rng.random_range(0..map.num_parts()));
    Ok((out, masked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(rotation_matrix(0.0, 0.0, 0.0), Tensor::eye(3));
    }

    #[test]
    fn quarter_turn_about_x() {
        let r = rotation_matrix(PI / 2.0, 0.0, 0.0);
        let y = [0.0, 1.0, 0.0];
        let out: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|k| r.data()[3 * i + k] * y[k]).sum())
            .collect();
        assert!((out[0]).abs() < 1e-15 && out[1].abs() < 1e-15 && (out[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn left_leg_mask_touches_only_its_joints() {
        let map = PartitionMap::default_kinect();
        let x = Tensor::full(&[2, 25, 4], 1.0);
        let leg = map.part_of(12).unwrap();
        let y = part_mask(&x, &map, leg).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let j = (i / 4) % 25;
            assert_eq!(*v == 0.0, [12, 13, 14, 15].contains(&j));
        }
        assert!(part_mask(&x, &map, 5).is_err());
    }

    #[test]
    fn joint_mask_bounds() {
        let seq = SkeletonSequence::zeros(2, 25, 1, 0);
        let mut r = rng::seeded(1);
        assert!(joint_mask(&seq, 51, &mut r).is_err());
        assert!(joint_mask(&seq, 50, &mut r).is_ok());
    }
}
