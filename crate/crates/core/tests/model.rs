use iip_core::attention::AttnMode;
use iip_core::graph::{Graph, Mode};
use iip_core::model::{
    forward, forward_batch, init_params, ForwardOptions, HeadMode, LayerStyle, ModelConfig,
    PartitionKind,
};
use iip_core::numkernel::gradcheck::FD_EPS;
use iip_core::rng;
use iip_core::selfcheck::{check_params, randomize, sample_coords, SUITE_TOLERANCE};
use iip_core::skeldata::{synth_sequence, Modality, SkeletonSequence};
use iip_core::training::{prepare_eval, sgd_step, SgdState};

fn small(frames: usize) -> ModelConfig {
    ModelConfig {
        layers: 1,
        channels: 16,
        joint_channels: 16,
        heads: 2,
        num_classes: 4,
        frames,
        ..ModelConfig::default()
    }
}

fn clips(n: usize, frames: usize, seed: u64) -> Vec<SkeletonSequence> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|i| synth_sequence(i % 4, frames, &mut r))
        .collect()
}

#[test]
fn end_to_end_gradcheck_on_each_variant() {
    let variants = [
        small(4),
        ModelConfig {
            head_mode: HeadMode::AvgPool,
            attn_mode: AttnMode::Standard,
            ..small(3)
        },
        ModelConfig {
            layer_style: LayerStyle::Flat,
            ..small(3)
        },
    ];
    for cfg in variants {
        let mut model = init_params(cfg, 4).unwrap();
        randomize(&mut model.set, 0.3, 8);
        let seqs = clips(2, cfg.frames, 1);
        let labels = [0, 1];
        let coords = sample_coords(&model.set, 3, 2);
        let report = check_params(
            &model.set,
            Mode::Train,
            &coords,
            |g| {
                let o = forward_batch(g, &model, &seqs, &ForwardOptions::default())?;
                g.tape.cross_entropy(o.logits, &labels)
            },
            FD_EPS,
        )
        .unwrap();
        assert!(
            report.max_rel_err < SUITE_TOLERANCE,
            "{cfg:?}: {}",
            report.max_rel_err
        );
    }
}

#[test]
fn forward_is_deterministic() {
    let model = init_params(small(4), 11).unwrap();
    let seq = clips(1, 4, 2).remove(0);
    let a = forward(&model, &seq, Mode::Eval).unwrap();
    let b = forward(&init_params(small(4), 11).unwrap(), &seq, Mode::Eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn baselines_differ_only_in_their_switch() {
    let base = ModelConfig::default();
    let switches = [
        ("attn_mode", "standard"),
        ("head_mode", "avg_pool"),
        ("partition", "identity"),
        ("layer_style", "flat"),
    ];
    for (key, value) in switches {
        let mut cfg = base;
        assert!(cfg.set(key, value).unwrap());
        cfg.validate().unwrap();
        let diff: Vec<_> = base
            .to_pairs()
            .into_iter()
            .zip(cfg.to_pairs())
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0)
            .collect();
        assert_eq!(diff, vec![key]);
    }
}

#[test]
fn loss_decreases_on_fixed_batch() {
    let cfg = small(4);
    let mut model = init_params(cfg, 0).unwrap();
    let seqs: Vec<_> = clips(8, cfg.frames, 3)
        .iter()
        .map(|s| prepare_eval(s, cfg.frames, Modality::Joint).unwrap())
        .collect();
    let labels: Vec<usize> = seqs.iter().map(SkeletonSequence::label).collect();
    let mut state = SgdState::new(&model.set);
    let mut last = f64::INFINITY;
    for step in 0..20 {
        let mut g = Graph::new(&model.set, Mode::Train);
        let o = forward_batch(&mut g, &model, &seqs, &ForwardOptions::default()).unwrap();
        let loss = g.tape.cross_entropy(o.logits, &labels).unwrap();
        let value = g.value(loss).item();
        assert!(value < last, "step {step}: {value} >= {last}");
        last = value;
        let grads = g.backward(loss).unwrap();
        sgd_step(&mut model.set, &grads, 0.01, 0.0, 0.0, &mut state).unwrap();
    }
}

#[test]
fn class_output_ignores_frame_order_without_positions() {
    let cfg = ModelConfig {
        positional: false,
        ..small(5)
    };
    let mut model = init_params(cfg, 6).unwrap();
    randomize(&mut model.set, 0.3, 1);
    let seq = clips(1, 5, 4).remove(0);
    let shuffled = seq.select_frames(&[3, 0, 4, 2, 1]);
    for mode in [Mode::Eval, Mode::Train] {
        let a = forward(&model, &seq, mode).unwrap();
        let b = forward(&model, &shuffled, mode).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
    let with_pos = init_params(small(5), 6).unwrap();
    let a = forward(&with_pos, &seq, Mode::Eval).unwrap();
    assert_ne!(a, forward(&with_pos, &shuffled, Mode::Eval).unwrap());
}

#[test]
fn every_stage_keeps_token_count() {
    for cfg in [
        small(3),
        ModelConfig {
            persons: 2,
            layers: 2,
            ..small(3)
        },
    ] {
        let model = init_params(cfg, 0).unwrap();
        let seqs = clips(2, cfg.frames, 5);
        let mut g = Graph::new(&model.set, Mode::Eval);
        let o = forward_batch(&mut g, &model, &seqs, &ForwardOptions::default()).unwrap();
        assert_eq!(o.stages.len(), cfg.layers + 1);
        for s in &o.stages {
            assert_eq!(g.value(*s).shape(), &[2 * (cfg.tokens() + 1), cfg.channels]);
        }
        assert_eq!(g.value(o.logits).shape(), &[2, cfg.num_classes]);
    }
}

#[test]
fn zero_input_gives_finite_logits() {
    for partition in [PartitionKind::Default, PartitionKind::Identity] {
        let cfg = ModelConfig {
            partition,
            ..small(2)
        };
        let model = init_params(cfg, 0).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let out = forward(&model, &SkeletonSequence::zeros(2, 25, 1, 0), mode).unwrap();
            assert!(out.is_finite());
        }
    }
}

#[test]
fn rejects_wrong_frame_count() {
    let model = init_params(small(4), 0).unwrap();
    assert!(forward(&model, &SkeletonSequence::zeros(3, 25, 1, 0), Mode::Eval).is_err());
    assert!(forward(&model, &SkeletonSequence::zeros(4, 20, 1, 0), Mode::Eval).is_err());
}

#[test]
fn variants_have_expected_parameter_counts() {
    let count = |c: ModelConfig| init_params(c, 0).unwrap().trainable_count();
    let base = ModelConfig::default();
    let n = count(base);
    assert!(
        count(ModelConfig {
            attn_mode: AttnMode::Standard,
            ..base
        }) < n
    );
    assert_eq!(
        count(ModelConfig {
            head_mode: HeadMode::AvgPool,
            ..base
        }),
        n
    );
    assert!(
        count(ModelConfig {
            partition: PartitionKind::Identity,
            ..base
        }) != n
    );
    assert!(
        count(ModelConfig {
            layer_style: LayerStyle::Flat,
            ..base
        }) < n
    );
}
