//! Intra-inter-part attention and its spatial, temporal and flat layouts.
//!
//! Token matrices are batched: sample `s` owns rows `s*(N+1) .. (s+1)*(N+1)`,
//! row 0 of each block is the class token and token `f * P + p` follows at
//! offset `1 + f * P + p`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numkernel::{AttentionGroup, AttentionPlan, Tape, Var};
use crate::params::{Affine, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMode {
    /// Multi-head attention plus the intra-part value branch.
    Iipa,
    /// Plain multi-head attention; the intra branch does not exist.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// One map per frame across parts.
    Spatial,
    /// One map per part across frames.
    Temporal,
    /// One map over every token of the clip.
    Flat,
}

impl fmt::Display for AttnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnMode::Iipa => "iipa",
            AttnMode::Standard => "standard",
        })
    }
}

impl FromStr for AttnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iipa" => Ok(AttnMode::Iipa),
            "standard" => Ok(AttnMode::Standard),
            _ => Err(Error::config(format!("unknown attention mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: Affine,
    pub k: Affine,
    pub v: Affine,
    pub intra: Option<Affine>,
    pub out: Affine,
    pub heads: usize,
}

impl AttentionParams {
    pub fn register(
        set: &mut ParamSet,
        prefix: &str,
        width: usize,
        heads: usize,
        mode: AttnMode,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{heads} heads do not divide width {width}"
            )));
        }
        let mut affine =
            |name: &str| Affine::register(set, &format!("{prefix}.{name}"), width, width);
        let (q, k, v) = (affine("q"), affine("k"), affine("v"));
        let intra = (mode == AttnMode::Iipa).then(|| affine("intra"));
        let out = affine("out");
        Ok(AttentionParams {
            q,
            k,
            v,
            intra,
            out,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.q.fan_in
    }

    pub fn mode(&self) -> AttnMode {
        if self.intra.is_some() {
            AttnMode::Iipa
        } else {
            AttnMode::Standard
        }
    }
}

/// Geometry of a batch of token grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub batch: usize,
    pub parts: usize,
    pub frames: usize,
}

impl TokenGrid {
    pub fn new(batch: usize, parts: usize, frames: usize) -> Self {
        TokenGrid {
            batch,
            parts,
            frames,
        }
    }

    pub fn tokens(&self) -> usize {
        self.parts * self.frames
    }

    /// Rows per sample including the class token.
    pub fn block(&self) -> usize {
        self.tokens() + 1
    }

    pub fn rows(&self) -> usize {
        self.batch * self.block()
    }

    pub fn token_row(&self, s: usize, f: usize, p: usize) -> usize {
        s * self.block() + 1 + f * self.parts + p
    }

    pub fn class_row(&self, s: usize) -> usize {
        s * self.block()
    }

    /// Attention groups for `axis`. Spatial and temporal plans give the class
    /// query a global map over the whole clip and prepend the class key to
    /// every per-frame or per-part map.
    pub fn plan(&self, axis: Axis) -> Result<AttentionPlan> {
        let mut groups = Vec::new();
        for s in 0..self.batch {
            let all: Vec<usize> = (self.class_row(s)..self.class_row(s) + self.block()).collect();
            if axis == Axis::Flat {
                groups.push(AttentionGroup {
                    queries: all.clone(),
                    keys: all,
                });
                continue;
            }
            groups.push(AttentionGroup {
                queries: vec![self.class_row(s)],
                keys: all,
            });
            let (outer, inner) = match axis {
                Axis::Spatial => (self.frames, self.parts),
                _ => (self.parts, self.frames),
            };
            for o in 0..outer {
                let queries: Vec<usize> = (0..inner)
                    .map(|i| match axis {
                        Axis::Spatial => self.token_row(s, o, i),
                        _ => self.token_row(s, i, o),
                    })
                    .collect();
                let mut keys = Vec::with_capacity(inner + 1);
                keys.push(self.class_row(s));
                keys.extend_from_slice(&queries);
                groups.push(AttentionGroup { queries, keys });
            }
        }
        AttentionPlan::new(groups, self.rows(), self.rows())
    }

    /// Row of every token, class rows skipped.
    pub fn token_index(&self) -> Vec<Option<usize>> {
        (0..self.rows())
            .filter(|r| r % self.block() != 0)
            .map(Some)
            .collect()
    }

    /// Inverse of [`Self::token_index`]: token-only row for every grid row,
    /// `None` at class rows.
    pub fn scatter_index(&self) -> Vec<Option<usize>> {
        (0..self.rows())
            .map(|r| (r % self.block() != 0).then(|| r - r / self.block() - 1))
            .collect()
    }
}

/// Cached plan and index tables for one grid and axis.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub grid: TokenGrid,
    pub axis: Axis,
    pub plan: Arc<AttentionPlan>,
    tokens: Arc<Vec<Option<usize>>>,
    scatter: Arc<Vec<Option<usize>>>,
}

impl LayerPlan {
    pub fn new(grid: TokenGrid, axis: Axis) -> Result<Self> {
        Ok(LayerPlan {
            grid,
            axis,
            plan: Arc::new(grid.plan(axis)?),
            tokens: Arc::new(grid.token_index()),
            scatter: Arc::new(grid.scatter_index()),
        })
    }
}

/// Scaled dot-product attention of every query over every key; no
/// projections.
pub fn mhsa(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (nq, nk) = (tape.value(q).rows(), tape.value(k).rows());
    let plan = AttentionPlan::dense(nq, nk)?;
    tape.attention(q, k, v, heads, Arc::new(plan))
}

/// `mhsa(Q, K, V) + f_intra(V)` for self-attention (`Q` and `V` share rows).
/// Without an intra branch this is exactly [`mhsa`].
pub fn iipa(g: &mut Graph<'_>, q: Var, k: Var, v: Var, params: &AttentionParams) -> Result<Var> {
    let inter = mhsa(&mut g.tape, q, k, v, params.heads)?;
    match &params.intra {
        Some(intra) => {
            let x = g.affine(intra, v)?;
            g.tape.add(inter, x)
        }
        None => Ok(inter),
    }
}

/// Projections, grouped attention, intra branch on token rows, output
/// projection. `x` is the `[grid.rows(), C]` token matrix.
pub fn attention_layer(
    g: &mut Graph<'_>,
    params: &AttentionParams,
    x: Var,
    plan: &LayerPlan,
) -> Result<Var> {
    let rows = g.tape.value(x).rows();
    if rows != plan.grid.rows() || g.tape.value(x).cols() != params.width() {
        return Err(Error::ShapeMismatch {
            op: "attention_layer",
            lhs: g.tape.shape(x).to_vec(),
            rhs: vec![plan.grid.rows(), params.width()],
        });
    }
    let q = g.affine(&params.q, x)?;
    let k = g.affine(&params.k, x)?;
    let v = g.affine(&params.v, x)?;
    let mut h = g.tape.attention(q, k, v, params.heads, plan.plan.clone())?;
    if let Some(intra) = &params.intra {
        let tv = g.tape.gather(v, plan.tokens.clone(), 1)?;
        let ti = g.affine(intra, tv)?;
        let back = g.tape.gather(ti, plan.scatter.clone(), 1)?;
        h = g.tape.add(h, back)?;
    }
    g.affine(&params.out, h)
}

fn check_rows(tape: &Tape, x: Var, parts: usize, frames: usize, op: &'static str) -> Result<()> {
    let rows = tape.value(x).rows();
    if rows != parts * frames + 1 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![rows],
            rhs: vec![parts * frames + 1],
        });
    }
    Ok(())
}

/// Spatial IIPA on one clip `[P*F + 1, C]`.
pub fn s_iipa(
    g: &mut Graph<'_>,
    x: Var,
    params: &AttentionParams,
    parts: usize,
    frames: usize,
) -> Result<Var> {
    check_rows(&g.tape, x, parts, frames, "s_iipa")?;
    let plan = LayerPlan::new(TokenGrid::new(1, parts, frames), Axis::Spatial)?;
    attention_layer(g, params, x, &plan)
}

/// Temporal IIPA on one clip `[P*F + 1, C]`.
pub fn t_iipa(
    g: &mut Graph<'_>,
    x: Var,
    params: &AttentionParams,
    parts: usize,
    frames: usize,
) -> Result<Var> {
    check_rows(&g.tape, x, parts, frames, "t_iipa")?;
    let plan = LayerPlan::new(TokenGrid::new(1, parts, frames), Axis::Temporal)?;
    attention_layer(g, params, x, &plan)
}

/// One attention over all `P*F + 1` rows of a flattened clip.
pub fn flat_attention_layer(
    g: &mut Graph<'_>,
    x: Var,
    params: &AttentionParams,
    parts: usize,
    frames: usize,
) -> Result<Var> {
    check_rows(&g.tape, x, parts, frames, "flat_attention_layer")?;
    let plan = LayerPlan::new(TokenGrid::new(1, parts, frames), Axis::Flat)?;
    attention_layer(g, params, x, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_plan_layout() {
        let grid = TokenGrid::new(2, 3, 2);
        let plan = grid.plan(Axis::Spatial).unwrap();
        // per sample: class group + 2 frame groups
        assert_eq!(plan.groups().len(), 6);
        assert_eq!(plan.groups()[1].queries, vec![1, 2, 3]);
        assert_eq!(plan.groups()[1].keys, vec![0, 1, 2, 3]);
        assert_eq!(plan.groups()[3].queries, vec![7]);
        assert_eq!(plan.score_entries(), 2 * (7 + 2 * 3 * 4));
    }

    #[test]
    fn temporal_plan_layout() {
        let grid = TokenGrid::new(1, 3, 2);
        let plan = grid.plan(Axis::Temporal).unwrap();
        assert_eq!(plan.groups().len(), 4);
        assert_eq!(plan.groups()[1].queries, vec![1, 4]);
        assert_eq!(plan.groups()[3].keys, vec![0, 3, 6]);
    }

    #[test]
    fn scatter_inverts_token_index() {
        let grid = TokenGrid::new(3, 2, 2);
        let tok = grid.token_index();
        let sc = grid.scatter_index();
        assert_eq!(tok.len(), 12);
        for (t, r) in tok.iter().enumerate() {
            assert_eq!(sc[r.unwrap()], Some(t));
        }
        assert_eq!(sc.iter().filter(|x| x.is_none()).count(), 3);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut set = ParamSet::new();
        assert!(AttentionParams::register(&mut set, "a", 10, 3, AttnMode::Iipa).is_err());
        let p = AttentionParams::register(&mut set, "b", 8, 2, AttnMode::Standard).unwrap();
        assert_eq!(p.mode(), AttnMode::Standard);
    }
}
