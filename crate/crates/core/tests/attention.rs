use std::sync::Arc;

use iip_core::attention::{
    flat_attention_layer, iipa, mhsa, s_iipa, t_iipa, AttentionParams, AttnMode, Axis, TokenGrid,
};
use iip_core::graph::{Graph, Mode};
use iip_core::numkernel::gradcheck::{check, weighted_sum, FD_EPS};
use iip_core::numkernel::{Tape, Tensor};
use iip_core::params::{ParamKind, ParamSet};
use iip_core::rng;
use iip_core::selfcheck::{all_coords, check_params, randomize};
use proptest::prelude::*;

fn params(c: usize, h: usize, mode: AttnMode, seed: u64) -> (ParamSet, AttentionParams) {
    let mut set = ParamSet::new();
    let p = AttentionParams::register(&mut set, "a", c, h, mode).unwrap();
    randomize(&mut set, 0.5, seed);
    (set, p)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng::seeded(seed))
}

/// Rows of a clip with frame blocks reordered by `perm` (class row fixed).
fn permute_blocks(x: &Tensor, block: usize, perm: &[usize]) -> Tensor {
    let mut data = x.row(0).to_vec();
    for &b in perm {
        for r in 0..block {
            data.extend_from_slice(x.row(1 + b * block + r));
        }
    }
    Tensor::new(x.shape(), data).unwrap()
}

/// Token grid transposed from frame-major `(f, p)` to `(p, f)`.
fn transpose_grid(x: &Tensor, parts: usize, frames: usize) -> Tensor {
    let mut data = x.row(0).to_vec();
    for p in 0..parts {
        for f in 0..frames {
            data.extend_from_slice(x.row(1 + f * parts + p));
        }
    }
    Tensor::new(x.shape(), data).unwrap()
}

fn run_layer(
    set: &ParamSet,
    p: &AttentionParams,
    x: &Tensor,
    parts: usize,
    frames: usize,
    f: fn(
        &mut Graph<'_>,
        iip_core::numkernel::Var,
        &AttentionParams,
        usize,
        usize,
    ) -> iip_core::Result<iip_core::numkernel::Var>,
) -> Tensor {
    let mut g = Graph::new(set, Mode::Eval);
    let xv = g.tape.constant(x.clone());
    let y = f(&mut g, xv, p, parts, frames).unwrap();
    g.value(y).clone()
}

#[test]
fn single_key_copies_value() {
    let mut t = Tape::new();
    let q = t.constant(rand_t(&[3, 4], 1));
    let k = t.constant(rand_t(&[1, 4], 2));
    let v = t.constant(rand_t(&[1, 4], 3));
    let y = mhsa(&mut t, q, k, v, 2).unwrap();
    for r in 0..3 {
        assert_eq!(t.value(y).row(r), t.value(v).row(0));
    }
}

#[test]
fn identical_keys_average_values() {
    let mut t = Tape::new();
    let q = t.constant(rand_t(&[2, 4], 1));
    let krow = rand_t(&[1, 4], 2);
    let k = t.constant(Tensor::new(&[3, 4], krow.data().repeat(3)).unwrap());
    let vt = rand_t(&[3, 4], 3);
    let v = t.constant(vt.clone());
    let y = mhsa(&mut t, q, k, v, 2).unwrap();
    for r in 0..2 {
        for c in 0..4 {
            let mean = (vt.row(0)[c] + vt.row(1)[c] + vt.row(2)[c]) / 3.0;
            assert!((t.value(y).row(r)[c] - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn mhsa_gradcheck() {
    let w = rand_t(&[3, 8], 9);
    let rep = check(
        &[rand_t(&[3, 8], 1), rand_t(&[4, 8], 2), rand_t(&[4, 8], 3)],
        |t, v| {
            let y = mhsa(t, v[0], v[1], v[2], 2)?;
            weighted_sum(t, y, &w)
        },
        FD_EPS,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn iipa_ablations() {
    let (mut set, p) = params(8, 2, AttnMode::Iipa, 4);
    let intra = p.intra.unwrap();
    let (q, k, v) = (rand_t(&[5, 8], 1), rand_t(&[5, 8], 2), rand_t(&[5, 8], 3));
    let run = |set: &ParamSet, p: &AttentionParams| {
        let mut g = Graph::new(set, Mode::Eval);
        let (qv, kv, vv) = (
            g.tape.constant(q.clone()),
            g.tape.constant(k.clone()),
            g.tape.constant(v.clone()),
        );
        let a = iipa(&mut g, qv, kv, vv, p).unwrap();
        let b = mhsa(&mut g.tape, qv, kv, vv, 2).unwrap();
        (g.value(a).clone(), g.value(b).clone())
    };
    *set.get_mut(intra.weight) = Tensor::zeros(&[8, 8]);
    *set.get_mut(intra.bias) = Tensor::zeros(&[8]);
    let (a, b) = run(&set, &p);
    assert_eq!(a, b);

    *set.get_mut(intra.weight) = Tensor::eye(8);
    let (a, b) = run(&set, &p);
    for i in 0..a.len() {
        assert!((a.data()[i] - b.data()[i] - v.data()[i]).abs() < 1e-15);
    }

    let (sset, sp) = params(8, 2, AttnMode::Standard, 4);
    let (a, b) = run(&sset, &sp);
    assert_eq!(a, b);
}

#[test]
fn standard_mode_has_fewer_params() {
    let (a, _) = params(8, 2, AttnMode::Iipa, 1);
    let (b, _) = params(8, 2, AttnMode::Standard, 1);
    assert_eq!(a.trainable_count() - b.trainable_count(), 8 * 8 + 8);
}

#[test]
fn flat_two_tokens() {
    let (set, p) = params(4, 1, AttnMode::Iipa, 2);
    let x = rand_t(&[2, 4], 5);
    let y = run_layer(&set, &p, &x, 1, 1, flat_attention_layer);
    assert_eq!(y.shape(), &[2, 4]);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let plan = Arc::new(TokenGrid::new(1, 1, 1).plan(Axis::Flat).unwrap());
    let a = t.attention(xv, xv, xv, 1, plan).unwrap();
    let probs = t.attention_probs(a).unwrap();
    assert_eq!(probs.len(), 4);
    for row in probs.chunks(2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn degenerate_axes_match_flat() {
    let (set, p) = params(8, 2, AttnMode::Iipa, 3);
    let x = rand_t(&[4, 8], 6);
    let flat = run_layer(&set, &p, &x, 3, 1, flat_attention_layer);
    assert_eq!(run_layer(&set, &p, &x, 3, 1, s_iipa), flat);
    let flat = run_layer(&set, &p, &x, 1, 3, flat_attention_layer);
    assert_eq!(run_layer(&set, &p, &x, 1, 3, t_iipa), flat);
}

#[test]
fn row_count_checked() {
    let (set, p) = params(8, 2, AttnMode::Iipa, 3);
    let mut g = Graph::new(&set, Mode::Eval);
    let x = g.tape.constant(rand_t(&[6, 8], 1));
    assert!(s_iipa(&mut g, x, &p, 3, 2).is_err());
    assert!(t_iipa(&mut g, x, &p, 3, 2).is_err());
}

#[test]
fn s_iipa_gradcheck() {
    let (mut set, p) = params(8, 2, AttnMode::Iipa, 7);
    let xi = set.add("x", rand_t(&[7, 8], 8), ParamKind::Weight);
    let w = rand_t(&[7, 8], 9);
    let coords = all_coords(&set);
    let rep = check_params(
        &set,
        Mode::Eval,
        &coords,
        |g| {
            let x = g.var(xi);
            let y = s_iipa(g, x, &p, 3, 2)?;
            weighted_sum(&mut g.tape, y, &w)
        },
        FD_EPS,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

fn check_equivariance(parts: usize, frames: usize, c: usize, h: usize, seed: u64) {
    let (set, p) = params(c, h, AttnMode::Iipa, seed);
    let x = rand_t(&[parts * frames + 1, c], seed + 1);
    let mut perm: Vec<usize> = (0..frames).collect();
    perm.reverse();
    perm.rotate_left(seed as usize % frames.max(1));
    let y = run_layer(&set, &p, &x, parts, frames, s_iipa);
    let yp = run_layer(
        &set,
        &p,
        &permute_blocks(&x, parts, &perm),
        parts,
        frames,
        s_iipa,
    );
    assert_eq!(permute_blocks(&y, parts, &perm).data()[c..], yp.data()[c..]);
    for (a, b) in y.row(0).iter().zip(yp.row(0)) {
        assert!((a - b).abs() <= 1e-13 * a.abs().max(1.0), "{a} {b}");
    }
}

#[test]
fn s_iipa_frame_permutation() {
    check_equivariance(5, 4, 8, 2, 1);
}

#[test]
fn spatial_and_temporal_are_transposes() {
    let (p0, f0, c) = (3, 4, 8);
    let (set, p) = params(c, 2, AttnMode::Iipa, 11);
    let x = rand_t(&[p0 * f0 + 1, c], 12);
    let ys = run_layer(&set, &p, &x, p0, f0, s_iipa);
    // x laid out as a (f0 x p0) grid; transposed it is a (p0 x f0) grid
    let xt = transpose_grid(&x, p0, f0);
    let yt = run_layer(&set, &p, &xt, f0, p0, t_iipa);
    assert_eq!(transpose_grid(&ys, p0, f0).data()[c..], yt.data()[c..]);
    for (a, b) in ys.row(0).iter().zip(yt.row(0)) {
        assert!((a - b).abs() <= 1e-13 * a.abs().max(1.0));
    }
}

fn grouped_probs_sum_to_one(
    parts: usize,
    frames: usize,
    batch: usize,
    h: usize,
    axis: Axis,
    seed: u64,
) {
    let c = 2 * h;
    let grid = TokenGrid::new(batch, parts, frames);
    let plan = Arc::new(grid.plan(axis).unwrap());
    let mut t = Tape::new();
    let x = Tensor::uniform(&[grid.rows(), c], 30.0, &mut rng::seeded(seed));
    let xv = t.constant(x);
    let a = t.attention(xv, xv, xv, h, plan.clone()).unwrap();
    let probs = t.attention_probs(a).unwrap();
    let mut off = 0;
    for g in plan.groups() {
        for _ in 0..h * g.queries.len() {
            let row = &probs[off..off + g.keys.len()];
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            off += g.keys.len();
        }
    }
    assert_eq!(off, probs.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(
        parts in 1usize..6, frames in 1usize..6, batch in 1usize..3, h in 1usize..4, axis in 0usize..3, seed in any::<u64>()
    ) {
        let axis = [Axis::Spatial, Axis::Temporal, Axis::Flat][axis];
        grouped_probs_sum_to_one(parts, frames, batch, h, axis, seed);
    }

    #[test]
    fn frame_permutation_equivariance(parts in 1usize..6, frames in 1usize..5, h in 1usize..3, seed in 0u64..1000) {
        check_equivariance(parts, frames, 4 * h, h, seed);
    }
}
