//! Synthetic Kinect-V2 clips: each class moves every body part along a
//! class-specific sinusoid; samples add Gaussian coordinate noise.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::io::{save_sequence, DatasetManifest, ManifestEntry};
use super::{PartitionMap, SkeletonSequence, KINECT_JOINTS};
use crate::error::{Error, Result};
use crate::rng;

/// Per-coordinate noise standard deviation of generated samples (meters).
pub const SYNTH_NOISE_STD: f64 = 0.01;

// Templates depend only on the class index, never on the dataset seed, so
// datasets drawn with different seeds share classes.
const TEMPLATE_SEED: u64 = 0x5e_ed7e_3a11_a7e5;

// Rest pose, 1-indexed joint order of the Kinect-V2 layout.
const REST_POSE: [[f64; 3]; KINECT_JOINTS] = [
    [0.0, 0.0, 3.0],
    [0.0, 0.3, 3.0],
    [0.0, 0.6, 3.0],
    [0.0, 0.75, 3.0],
    [-0.2, 0.55, 3.0],
    [-0.3, 0.3, 3.0],
    [-0.35, 0.05, 3.0],
    [-0.37, -0.03, 3.0],
    [0.2, 0.55, 3.0],
    [0.3, 0.3, 3.0],
    [0.35, 0.05, 3.0],
    [0.37, -0.03, 3.0],
    [-0.1, -0.05, 3.0],
    [-0.12, -0.45, 3.0],
    [-0.13, -0.85, 3.0],
    [-0.13, -0.9, 2.9],
    [0.1, -0.05, 3.0],
    [0.12, -0.45, 3.0],
    [0.13, -0.85, 3.0],
    [0.13, -0.9, 2.9],
    [0.0, 0.5, 3.0],
    [-0.38, -0.1, 3.0],
    [-0.33, -0.05, 3.0],
    [0.38, -0.1, 3.0],
    [0.33, -0.05, 3.0],
];

#[derive(Debug, Clone, Copy)]
struct PartMotion {
    cycles: f64,
    phase: f64,
    amplitude: f64,
    direction: [f64; 3],
}

fn part_motions(class: usize, parts: usize) -> Vec<PartMotion> {
    let mut r = rng::stream(TEMPLATE_SEED, &[class as u64]);
    (0..parts)
        .map(|_| {
            let d: [f64; 3] = [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-6);
            PartMotion {
                cycles: r.random_range(1..=3) as f64,
                phase: r.random_range(0.0..TAU),
                amplitude: r.random_range(0.15..0.4),
                direction: [d[0] / n, d[1] / n, d[2] / n],
            }
        })
        .collect()
}

/// Noise-free trajectory of `class` over `frames` frames (single person).
pub fn class_template(class: usize, frames: usize) -> SkeletonSequence {
    let map = PartitionMap::default_kinect();
    let motions = part_motions(class, map.num_parts());
    let mut seq = SkeletonSequence::zeros(frames.max(1), KINECT_JOINTS, 1, class);
    for f in 0..frames.max(1) {
        let t = f as f64 / frames.max(1) as f64;
        for (p, m) in motions.iter().enumerate() {
            let part = map.part(p);
            let wave = m.amplitude * (TAU * m.cycles * t + m.phase).sin();
            for (slot, &j) in part.iter().enumerate() {
                // distal joints swing further
                let reach = 0.5 + 0.5 * (slot + 1) as f64 / part.len() as f64;
                let base = REST_POSE[j];
                let mut pt = [0.0; 3];
                for c in 0..3 {
                    pt[c] = base[c] + reach * wave * m.direction[c];
                }
                seq.set_point(f, j, 0, pt);
            }
        }
    }
    seq
}

/// One noisy sample of `class`; coordinates are rounded to f32 so the
/// sample survives a file round trip unchanged.
pub fn synth_sequence<R: Rng + ?Sized>(
    class: usize,
    frames: usize,
    rng: &mut R,
) -> SkeletonSequence {
    let mut seq = class_template(class, frames);
    let noise = Normal::new(0.0, SYNTH_NOISE_STD).expect("positive std");
    for x in seq.coords_mut().data_mut() {
        *x = (*x + noise.sample(rng)) as f32 as f64;
    }
    seq
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub seed: u64,
}

/// Write `num_classes * samples_per_class` sequence files plus
/// `manifest.tsv` into `out_dir`; returns the manifest.
pub fn synth_dataset(spec: SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if spec.num_classes == 0 || spec.samples_per_class == 0 || spec.frames == 0 {
        return Err(Error::config(
            "synth needs positive classes, samples and frames",
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        for k in 0..spec.samples_per_class {
            let idx = class * spec.samples_per_class + k;
            let mut r = rng::stream(spec.seed, &[idx as u64]);
            let seq = synth_sequence(class, spec.frames, &mut r);
            let name = format!("sample_{idx:05}.iips");
            save_sequence(&seq, out_dir.join(&name))?;
            entries.push(ManifestEntry {
                path: name.into(),
                label: class,
                subject: 1 + (k % 20) as u32,
                camera: 1 + (k % 3) as u32,
            });
        }
    }
    let manifest = DatasetManifest::new(entries, out_dir);
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
