//! Finite-difference checks of whole layers against their parameters, and
//! the fixed suite run by the `gradcheck` command.

use std::sync::Arc;

use crate::attention::{flat_attention_layer, mhsa, s_iipa, t_iipa, AttentionParams, AttnMode};
use crate::error::Result;
use crate::graph::{Graph, Mode};
use crate::model::{forward_batch, init_params, ForwardOptions, ModelConfig};
use crate::numkernel::gradcheck::{check, rel_err, weighted_sum, GradCheckReport, FD_EPS};
use crate::numkernel::{AttentionPlan, Tape, Tensor, Var};
use crate::params::{ParamId, ParamKind, ParamSet};
use crate::partition::{partition_encode, PartitionEncoderParams};
use crate::rng;
use crate::skeldata::{synth_sequence, PartitionMap};

/// Pass threshold of the suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Gradients of the scalar built by `f` with respect to the listed parameter
/// elements, compared with central differences of the same graph.
pub fn check_params<F>(
    params: &ParamSet,
    mode: Mode,
    coords: &[(ParamId, usize)],
    f: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(params, mode);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new(p, mode);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for &(id, j) in coords {
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[j]);
        let x0 = params.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = x0 + eps;
        let hi = eval(&work)?;
        work.get_mut(id).data_mut()[j] = x0 - eps;
        let lo = eval(&work)?;
        work.get_mut(id).data_mut()[j] = x0;
        let numeric = (hi - lo) / (2.0 * eps);
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric));
        report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
        report.checked += 1;
    }
    Ok(report)
}

/// Every trainable element of `params`.
pub fn all_coords(params: &ParamSet) -> Vec<(ParamId, usize)> {
    params
        .ids()
        .filter(|&id| params.entry(id).kind != ParamKind::Buffer)
        .flat_map(|id| (0..params.get(id).len()).map(move |j| (id, j)))
        .collect()
}

/// Up to `per_tensor` seeded-random elements of every trainable tensor.
pub fn sample_coords(params: &ParamSet, per_tensor: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut r = rng::stream(seed, &[0xc00d]);
    let mut out = Vec::new();
    for id in params.ids() {
        if params.entry(id).kind == ParamKind::Buffer {
            continue;
        }
        let n = params.get(id).len();
        for j in rand::seq::index::sample(&mut r, n, per_tensor.min(n)) {
            out.push((id, j));
        }
    }
    out
}

/// Fill every trainable tensor with `U(-bound, bound)`, so that biases and
/// norm affines are exercised away from their initial values.
pub fn randomize(params: &mut ParamSet, bound: f64, seed: u64) {
    let mut r = rng::stream(seed, &[0x5a5a]);
    for id in params.ids().collect::<Vec<_>>() {
        if params.entry(id).kind != ParamKind::Buffer {
            let shape = params.get(id).shape().to_vec();
            *params.get_mut(id) = Tensor::uniform(&shape, bound, &mut r);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < SUITE_TOLERANCE
    }
}

fn tape_check(
    name: &'static str,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<SuiteEntry> {
    let mut r = rng::stream(seed, &[name.len() as u64, 0x77]);
    let w = Tensor::uniform(out_shape, 1.0, &mut r);
    let report = check(
        &inputs,
        |t, v| {
            let o = f(t, v)?;
            weighted_sum(t, o, &w)
        },
        FD_EPS,
    )?;
    Ok(SuiteEntry { name, report })
}

fn layer_check(
    name: &'static str,
    params: &ParamSet,
    mode: Mode,
    coords: &[(ParamId, usize)],
    f: impl Fn(&mut Graph<'_>) -> Result<Var>,
) -> Result<SuiteEntry> {
    let report = check_params(params, mode, coords, f, FD_EPS)?;
    Ok(SuiteEntry { name, report })
}

/// The end-to-end configuration of the suite: 5 parts, 4 frames, width 16,
/// one layer.
pub fn suite_model_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        channels: 16,
        joint_channels: 8,
        heads: 2,
        ffn_ratio: 2,
        num_classes: 4,
        frames: 4,
        ..ModelConfig::default()
    }
}

/// Run every check; deterministic in `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut r = rng::stream(seed, &[0x9c]);
    let mut u = |shape: &[usize]| Tensor::uniform(shape, 1.0, &mut r);
    let mut out = Vec::new();

    out.push(tape_check(
        "matmul",
        vec![u(&[3, 4]), u(&[4, 5])],
        &[3, 5],
        seed,
        |t, v| t.matmul(v[0], v[1]),
    )?);
    out.push(tape_check(
        "linear",
        vec![u(&[2, 3, 4]), u(&[4, 3]), u(&[3])],
        &[2, 3, 3],
        seed,
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    )?);
    out.push(tape_check(
        "add_mul",
        vec![u(&[3, 4]), u(&[3, 4])],
        &[3, 4],
        seed,
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let m = t.mul(s, v[1])?;
            t.scale(m, 0.7)
        },
    )?);
    out.push(tape_check(
        "relu",
        vec![u(&[4, 5])],
        &[4, 5],
        seed,
        |t, v| t.relu(v[0]),
    )?);
    out.push(tape_check(
        "softmax",
        vec![u(&[3, 6])],
        &[3, 6],
        seed,
        |t, v| t.softmax(v[0]),
    )?);
    out.push(tape_check(
        "layer_norm",
        vec![u(&[4, 6]), u(&[6]), u(&[6])],
        &[4, 6],
        seed,
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    )?);
    out.push(tape_check(
        "batch_norm_train",
        vec![u(&[6, 3]), u(&[3]), u(&[3])],
        &[6, 3],
        seed,
        |t, v| t.batch_norm(v[0], v[1], v[2], None),
    )?);
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    out.push(tape_check(
        "batch_norm_eval",
        vec![u(&[6, 3]), u(&[3]), u(&[3])],
        &[6, 3],
        seed,
        move |t, v| t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv))),
    )?);
    out.push(tape_check(
        "cross_entropy",
        vec![u(&[4, 5])],
        &[],
        seed,
        |t, v| t.cross_entropy(v[0], &[0, 3, 4, 1]),
    )?);
    let index = Arc::new(vec![Some(2), None, Some(0), Some(1), Some(2), None]);
    out.push(tape_check(
        "gather",
        vec![u(&[3, 4])],
        &[3, 8],
        seed,
        move |t, v| t.gather(v[0], index.clone(), 2),
    )?);
    out.push(tape_check(
        "concat_rows",
        vec![u(&[1, 4]), u(&[3, 4])],
        &[4, 4],
        seed,
        |t, v| t.concat_rows(&[v[0], v[1]]),
    )?);
    let groups = Arc::new(vec![vec![0, 2], vec![1, 3, 4]]);
    out.push(tape_check(
        "row_mean",
        vec![u(&[5, 3])],
        &[2, 3],
        seed,
        move |t, v| t.row_mean(v[0], groups.clone()),
    )?);
    out.push(tape_check(
        "mhsa",
        vec![u(&[3, 8]), u(&[4, 8]), u(&[4, 8])],
        &[3, 8],
        seed,
        |t, v| mhsa(t, v[0], v[1], v[2], 2),
    )?);
    let plan = Arc::new(AttentionPlan::new(
        vec![
            crate::numkernel::AttentionGroup {
                queries: vec![0],
                keys: vec![0, 1, 2, 3, 4],
            },
            crate::numkernel::AttentionGroup {
                queries: vec![1, 2],
                keys: vec![0, 1, 2],
            },
            crate::numkernel::AttentionGroup {
                queries: vec![3, 4],
                keys: vec![0, 3, 4],
            },
        ],
        5,
        5,
    )?);
    out.push(tape_check(
        "grouped_attention",
        vec![u(&[5, 8]), u(&[5, 8]), u(&[5, 8])],
        &[5, 8],
        seed,
        move |t, v| t.attention(v[0], v[1], v[2], 2, plan.clone()),
    )?);

    // layers, checked against every parameter element
    let (parts, frames, c) = (3, 2, 8);
    let x0 = u(&[parts * frames + 1, c]);
    let wl = u(&[parts * frames + 1, c]);
    type LayerFn = fn(&mut Graph<'_>, Var, &AttentionParams, usize, usize) -> Result<Var>;
    let layers: [(&'static str, LayerFn); 3] = [
        ("s_iipa", s_iipa),
        ("t_iipa", t_iipa),
        ("flat_attention", flat_attention_layer),
    ];
    for (i, (name, layer)) in layers.into_iter().enumerate() {
        let mut set = ParamSet::new();
        let ap = AttentionParams::register(&mut set, "attn", c, 2, AttnMode::Iipa)?;
        randomize(&mut set, 0.5, seed ^ i as u64);
        let xi = set.add("x", x0.clone(), ParamKind::Weight);
        let coords = all_coords(&set);
        out.push(layer_check(name, &set, Mode::Train, &coords, |g| {
            let x = g.var(xi);
            let y = layer(g, x, &ap, parts, frames)?;
            weighted_sum(&mut g.tape, y, &wl)
        })?);
    }

    // partition encoder on a 2-sample batch of 2 frames
    let map = PartitionMap::default_kinect();
    let mut set = ParamSet::new();
    let enc = PartitionEncoderParams::register(&mut set, "enc", 4, map.max_joints(), 6);
    randomize(&mut set, 0.5, seed ^ 0xe);
    let mut sr = rng::stream(seed, &[0x5e]);
    let seqs = vec![synth_sequence(0, 2, &mut sr), synth_sequence(1, 2, &mut sr)];
    let we = u(&[2 * 2 * 5, 6]);
    let coords = sample_coords(&set, 12, seed);
    out.push(layer_check(
        "partition_encode",
        &set,
        Mode::Train,
        &coords,
        |g| {
            let y = partition_encode(g, &enc, &map, &seqs, &[Some(3), None])?;
            weighted_sum(&mut g.tape, y, &we)
        },
    )?);

    // end to end
    let cfg = suite_model_config();
    let mut model = init_params(cfg, seed)?;
    randomize(&mut model.set, 0.3, seed ^ 0xf);
    let seqs: Vec<_> = (0..3)
        .map(|k| synth_sequence(k, cfg.frames, &mut sr))
        .collect();
    let labels: Vec<usize> = seqs.iter().map(|s| s.label()).collect();
    let coords = sample_coords(&model.set, 6, seed);
    out.push(layer_check(
        "model_end_to_end",
        &model.set,
        Mode::Train,
        &coords,
        |g| {
            let o = forward_batch(g, &model, &seqs, &ForwardOptions::default())?;
            g.tape.cross_entropy(o.logits, &labels)
        },
    )?);
    Ok(out)
}
