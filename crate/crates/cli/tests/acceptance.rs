//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so the
//! lines are visible under `cargo test`.

use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use iip_core::attention::{s_iipa, AttentionParams, AttnMode, Axis, TokenGrid};
use iip_core::augment::{apply_rotation, part_mask, random_rotation, rotation_matrix};
use iip_core::complexity::{compare_configs, count_model};
use iip_core::graph::{Graph, Mode};
use iip_core::model::{
    decode_checkpoint, encode_checkpoint, forward_batch, init_params, load_checkpoint,
    save_checkpoint, ForwardOptions, HeadMode, LayerStyle, ModelConfig, PartitionKind,
};
use iip_core::numkernel::{counter, Tape, Tensor};
use iip_core::params::ParamSet;
use iip_core::rng;
use iip_core::selfcheck::{randomize, run_suite, suite_model_config, SUITE_TOLERANCE};
use iip_core::skeldata::{
    class_template, derive_modality, load_sequence, save_sequence, synth_dataset, synth_sequence,
    DatasetManifest, Modality, PartitionMap, SkeletonLayout, SkeletonSequence, SynthSpec,
};
use iip_core::training::{evaluate, fuse_streams, score_manifest, train, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn iip(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_iip"))
        .args(args)
        .output()
        .expect("run iip binary")
}

fn synth(
    classes: usize,
    per_class: usize,
    frames: usize,
    seed: u64,
) -> (tempfile::TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().expect("tempdir");
    let spec = SynthSpec {
        num_classes: classes,
        samples_per_class: per_class,
        frames,
        seed,
    };
    let m = synth_dataset(spec, dir.path()).expect("synth");
    (dir, m)
}

fn gradient_suite() -> Outcome {
    let cfg = suite_model_config();
    ensure(
        cfg.map().num_parts() == 5 && cfg.frames == 4 && cfg.channels == 16 && cfg.layers == 1,
        format!("suite model config {cfg:?}"),
    )?;
    let entries = run_suite(0).map_err(|e| e.to_string())?;
    let worst = entries
        .iter()
        .map(|e| e.report.max_rel_err)
        .fold(0.0, f64::max);
    let failed: Vec<_> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| e.name)
        .collect();
    ensure(failed.is_empty(), format!("failing checks: {failed:?}"))?;
    ensure(worst < SUITE_TOLERANCE, format!("max rel err {worst:e}"))?;
    let start = Instant::now();
    let out = iip(&["gradcheck"]);
    let took = start.elapsed();
    ensure(
        out.status.code() == Some(0),
        format!("gradcheck exit {:?}", out.status.code()),
    )?;
    ensure(
        took < Duration::from_secs(60),
        format!("gradcheck took {took:?}"),
    )?;
    Ok(format!(
        "{} checks, max rel err {worst:.2e}, cli {:.1}s",
        entries.len(),
        took.as_secs_f64()
    ))
}

fn attention_invariants() -> Outcome {
    let mut r = rng::seeded(2024);
    let mut rows = 0usize;
    let mut worst_class = 0.0f64;
    for trial in 0..10_000u64 {
        let parts = r.random_range(1..=5);
        let frames = r.random_range(1..=5);
        let batch = r.random_range(1..=2);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let c = heads * r.random_range(1..=3);
        let axis = [Axis::Spatial, Axis::Temporal, Axis::Flat][r.random_range(0..3)];
        let grid = TokenGrid::new(batch, parts, frames);
        let plan = Arc::new(grid.plan(axis).map_err(|e| e.to_string())?);
        let mut t = Tape::new();
        let scale = r.random_range(0.1..20.0);
        let q = t.constant(Tensor::uniform(&[grid.rows(), c], scale, &mut r));
        let kv = t.constant(Tensor::uniform(&[grid.rows(), c], scale, &mut r));
        let a = t
            .attention(q, kv, kv, heads, plan.clone())
            .map_err(|e| e.to_string())?;
        let probs = t.attention_probs(a).ok_or("no probabilities recorded")?;
        let mut off = 0;
        for g in plan.groups() {
            for _ in 0..heads * g.queries.len() {
                let row = &probs[off..off + g.keys.len()];
                let s: f64 = row.iter().sum();
                ensure(
                    (s - 1.0).abs() <= 1e-12,
                    format!("trial {trial}: row sums to {s}"),
                )?;
                off += g.keys.len();
                rows += 1;
            }
        }

        // one clip through s_iipa, frames reordered
        let mut set = ParamSet::new();
        let p = AttentionParams::register(&mut set, "a", c, heads, AttnMode::Iipa)
            .map_err(|e| e.to_string())?;
        randomize(&mut set, 0.5, trial);
        let x = Tensor::uniform(&[parts * frames + 1, c], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..frames).collect();
        for i in (1..frames).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permute = |m: &Tensor| {
            let mut d = m.row(0).to_vec();
            for &f in &perm {
                for q in 0..parts {
                    d.extend_from_slice(m.row(1 + f * parts + q));
                }
            }
            Tensor::new(m.shape(), d).unwrap()
        };
        let run = |input: &Tensor| {
            let mut g = Graph::new(&set, Mode::Eval);
            let xv = g.tape.constant(input.clone());
            let y = s_iipa(&mut g, xv, &p, parts, frames).unwrap();
            g.value(y).clone()
        };
        let (y, yp) = (run(&x), run(&permute(&x)));
        ensure(
            permute(&y).data()[c..] == yp.data()[c..],
            format!("trial {trial}: token rows not permuted bitwise"),
        )?;
        for (a, b) in y.row(0).iter().zip(yp.row(0)) {
            worst_class = worst_class.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    ensure(
        worst_class <= 1e-12,
        format!("class output moved by {worst_class:e}"),
    )?;
    Ok(format!(
        "10000 trials, {rows} probability rows, token rows bitwise, class output within {worst_class:.1e}"
    ))
}

fn cost_claims() -> Outcome {
    let d = ModelConfig::default();
    let identity = ModelConfig {
        partition: PartitionKind::Identity,
        ..d
    };
    let (a, b) = (count_model(&identity), count_model(&d));
    let (sa, sb) = (
        a.madds_with_suffix("s_attn.part_scores"),
        b.madds_with_suffix("s_attn.part_scores"),
    );
    ensure(sa == 25 * sb, format!("spatial score ratio {sa}/{sb}"))?;
    let standard = ModelConfig {
        attn_mode: AttnMode::Standard,
        ..d
    };
    let ratio = compare_configs(&d, &standard).total.ratio;
    ensure(ratio <= 1.25, format!("iipa/standard {ratio}"))?;
    let small = ModelConfig {
        layers: 2,
        channels: 16,
        joint_channels: 8,
        heads: 2,
        frames: 4,
        ..d
    };
    let configs = [
        d,
        small,
        ModelConfig {
            partition: PartitionKind::Identity,
            ..small
        },
        ModelConfig {
            attn_mode: AttnMode::Standard,
            head_mode: HeadMode::AvgPool,
            ..small
        },
        ModelConfig {
            layer_style: LayerStyle::Flat,
            ..small
        },
        ModelConfig {
            persons: 2,
            frames: 3,
            ..small
        },
    ];
    for cfg in configs {
        let model = init_params(cfg, 1).map_err(|e| e.to_string())?;
        let seq = synth_sequence(0, cfg.frames, &mut rng::seeded(5));
        let mut g = Graph::new(&model.set, Mode::Train);
        let (out, n) =
            counter::measure(|| forward_batch(&mut g, &model, &[seq], &ForwardOptions::default()));
        out.map_err(|e| e.to_string())?;
        let want = count_model(&cfg);
        ensure(
            n.madds == want.total_madds() && n.elementwise_flops == want.total_elementwise_flops(),
            format!(
                "{cfg:?}: instrumented {n:?}, analytic {}",
                want.total_madds()
            ),
        )?;
    }
    Ok(format!(
        "score ratio {}, iipa/standard {ratio:.4}, {} configs exact",
        sa / sb,
        configs.len()
    ))
}

fn ablation_structure() -> Outcome {
    let (_dir, m) = synth(4, 4, 8, 3);
    let base = ModelConfig {
        num_classes: 4,
        frames: 8,
        ..ModelConfig::default()
    };
    let switches: [(&str, &str); 5] = [
        ("partition", "default"),
        ("attn_mode", "standard"),
        ("head_mode", "avg_pool"),
        ("partition", "identity"),
        ("layer_style", "flat"),
    ];
    let mut counts = Vec::new();
    for (k, v) in switches {
        let mut cfg = base;
        cfg.set(k, v).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let mut epochs = 0;
        let out = train(&m, cfg, &tc, |_| epochs += 1).map_err(|e| format!("{k}={v}: {e}"))?;
        ensure(epochs == 5, format!("{k}={v}: {epochs} epochs logged"))?;
        counts.push(out.checkpoint.model.trainable_count());
    }
    let [full, standard, avg, identity, flat] = counts[..] else {
        unreachable!()
    };
    ensure(
        standard < full,
        "standard attention should drop the intra branch",
    )?;
    ensure(
        avg == full,
        "pooling head should not change the parameter count",
    )?;
    ensure(
        identity != full && flat < full,
        "identity/flat parameter counts",
    )?;
    Ok(format!(
        "params full={full} standard={standard} avg_pool={avg} identity={identity} flat={flat}"
    ))
}

/// Label of the nearest noise-free class template in the centered joint stream.
fn nearest_template(seq: &SkeletonSequence, classes: usize) -> usize {
    let layout = SkeletonLayout::kinect_v2();
    let x = derive_modality(seq, Modality::Joint, &layout).unwrap();
    let dist = |k: usize| {
        let t =
            derive_modality(&class_template(k, seq.frames()), Modality::Joint, &layout).unwrap();
        x.coords()
            .data()
            .iter()
            .zip(t.coords().data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    (0..classes)
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
        .unwrap()
}

const TRAIN_EPOCHS: usize = 30;

fn trainability() -> Outcome {
    let (_d1, train_set) = synth(4, 32, 32, 11);
    let (_d2, held) = synth(4, 32, 32, 12);
    for m in [&train_set, &held] {
        let seqs = m.load_sequences().map_err(|e| e.to_string())?;
        let wrong = seqs
            .iter()
            .filter(|s| nearest_template(s, 4) != s.label())
            .count();
        ensure(
            wrong == 0,
            format!("nearest-template oracle misses {wrong} samples"),
        )?;
    }
    let cfg = ModelConfig {
        num_classes: 4,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: TRAIN_EPOCHS,
        workers: 1,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&train_set, cfg, &tc, |_| {}).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let a = evaluate(&train_set, &out.checkpoint)
        .map_err(|e| e.to_string())?
        .top1;
    let b = evaluate(&held, &out.checkpoint)
        .map_err(|e| e.to_string())?
        .top1;
    let summary = format!(
        "oracle 100%, {TRAIN_EPOCHS} epochs in {:.0}s, train {:.1}%, held-out {:.1}%",
        took.as_secs_f64(),
        100.0 * a,
        100.0 * b
    );
    ensure(
        a >= 0.99 && b >= 0.90 && took < Duration::from_secs(600),
        summary.clone(),
    )?;
    Ok(summary)
}

fn augmentation() -> Outcome {
    let mut r = rng::seeded(6);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let m = random_rotation(PI / 10.0, &mut r);
        let d = m.data();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| d[3 * k + i] * d[3 * k + j]).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        let det = d[0] * (d[4] * d[8] - d[5] * d[7]) - d[1] * (d[3] * d[8] - d[5] * d[6])
            + d[2] * (d[3] * d[7] - d[4] * d[6]);
        worst = worst.max((det - 1.0).abs());
    }
    ensure(worst <= 1e-12, format!("orthonormality error {worst:e}"))?;
    let seq = synth_sequence(2, 8, &mut rng::seeded(1));
    let rot = apply_rotation(&seq, &rotation_matrix(0.3, -0.2, 0.25)).map_err(|e| e.to_string())?;
    let mut dist_err = 0.0f64;
    for f in 0..8 {
        for u in 0..25 {
            for v in 0..u {
                let d = |s: &SkeletonSequence| {
                    let (a, b) = (s.point(f, u, 0), s.point(f, v, 0));
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                };
                dist_err = dist_err.max((d(&seq) - d(&rot)).abs());
            }
        }
    }
    ensure(dist_err <= 1e-9, format!("distance error {dist_err:e}"))?;
    let map = PartitionMap::default_kinect();
    let frames = 6;
    let x = Tensor::uniform(&[frames, 25, 4], 1.0, &mut r).map(|v| v + 2.0);
    for p in 0..map.num_parts() {
        let y = part_mask(&x, &map, p).map_err(|e| e.to_string())?;
        for f in 0..frames {
            for v in 0..25 {
                for c in 0..4 {
                    let i = (f * 25 + v) * 4 + c;
                    let want = if map.part(p).contains(&v) {
                        0.0
                    } else {
                        x.data()[i]
                    };
                    ensure(y.data()[i] == want, format!("part {p} frame {f} joint {v}"))?;
                }
            }
        }
    }
    Ok(format!("orthonormality/det error {worst:.1e}, distance error {dist_err:.1e}, 5 parts masked exactly"))
}

fn determinism() -> Outcome {
    let (dir, m) = synth(4, 2, 8, 4);
    let cfg = ModelConfig {
        num_classes: 4,
        frames: 8,
        layers: 2,
        channels: 16,
        joint_channels: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let run = || train(&m, cfg, &tc, |_| {}).map_err(|e| e.to_string());
    let (a, b) = (run()?, run()?);
    ensure(a.log == b.log, "metric logs differ")?;
    ensure(
        encode_checkpoint(&a.checkpoint) == encode_checkpoint(&b.checkpoint),
        "weights differ",
    )?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&a.checkpoint, &path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(
        encode_checkpoint(&back) == bytes,
        "checkpoint bytes changed on reload",
    )?;
    ensure(
        back.model.set == a.checkpoint.model.set,
        "checkpoint values changed on reload",
    )?;
    ensure(
        decode_checkpoint(&bytes[..bytes.len() - 1]).is_err(),
        "truncated checkpoint accepted",
    )?;
    let seq = m.load_sequences().map_err(|e| e.to_string())?.remove(0);
    let seq_path = dir.path().join("copy.seq");
    save_sequence(&seq, &seq_path).map_err(|e| e.to_string())?;
    let first = std::fs::read(&seq_path).map_err(|e| e.to_string())?;
    let again = load_sequence(&seq_path).map_err(|e| e.to_string())?;
    save_sequence(&again, &seq_path).map_err(|e| e.to_string())?;
    ensure(again == seq, "sequence values changed on reload")?;
    ensure(
        std::fs::read(&seq_path).map_err(|e| e.to_string())? == first,
        "sequence bytes changed",
    )?;
    Ok(format!(
        "2 runs identical ({} tensors), checkpoint {} bytes round-trips",
        a.checkpoint.model.set.len(),
        bytes.len()
    ))
}

fn fusion() -> Outcome {
    let (dir, m) = synth(4, 3, 8, 5);
    let cfg = ModelConfig {
        num_classes: 4,
        frames: 8,
        layers: 1,
        channels: 16,
        joint_channels: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let ckpt = train(&m, cfg, &tc, |_| {})
        .map_err(|e| e.to_string())?
        .checkpoint;
    let scores = score_manifest(&m, &ckpt).map_err(|e| e.to_string())?;
    let single = scores.report().map_err(|e| e.to_string())?;
    let fused = fuse_streams(&vec![scores.clone(); 4]).map_err(|e| e.to_string())?;
    ensure(
        fused == single,
        "fusing four identical streams changed the report",
    )?;
    let mut swapped = scores.clone();
    swapped.ids.swap(0, 1);
    swapped.labels.swap(0, 1);
    swapped.logits.swap(0, 1);
    let err = fuse_streams(&[scores.clone(), swapped.clone()])
        .err()
        .ok_or("reordered stream accepted")?;
    ensure(
        err.to_string().contains(&scores.ids[0]),
        format!("message lacks the first bad id: {err}"),
    )?;
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    scores.save(&a).map_err(|e| e.to_string())?;
    swapped.save(&b).map_err(|e| e.to_string())?;
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    let ok = iip(&["fuse", "--scores", a, a, a, a]);
    ensure(
        ok.status.code() == Some(0),
        "cli fuse of identical streams failed",
    )?;
    let bad = iip(&["fuse", "--scores", a, b]);
    ensure(
        bad.status.code() == Some(1),
        format!("cli fuse mismatch exit {:?}", bad.status.code()),
    )?;
    Ok(format!(
        "4x fusion exact over {} samples; reordering rejected",
        scores.ids.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("attention invariants", attention_invariants),
        ("cost claims", cost_claims),
        ("ablation structure", ablation_structure),
        ("trainability", trainability),
        ("augmentation correctness", augmentation),
        ("determinism and round-trip", determinism),
        ("fusion", fusion),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    panic::set_hook(Box::new(|_| {}));
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
