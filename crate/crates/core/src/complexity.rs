//! Closed-form multiply-add and parameter counts of one forward pass over a
//! single clip.
//!
//! Conventions match the instrumented kernels: an affine map over `n` rows
//! costs `n * in * out` madds (bias adds are free), attention costs
//! `C * q * k` madds for the scores plus the same for the weighted sum,
//! softmax, layer norm and batch norm cost `ELEMENTWISE_FLOPS` per element,
//! and ReLU, residual adds, gathers and pooling cost nothing.

use std::fmt;

use crate::attention::AttnMode;
use crate::model::{LayerStyle, ModelConfig};
use crate::numkernel::counter::ELEMENTWISE_FLOPS;
use crate::skeldata::CHANNELS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub name: String,
    /// Leading component of `name`, e.g. `encoder` or `layer2`.
    pub group: String,
    pub madds: u64,
    pub elementwise_flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    fn push(&mut self, name: String, madds: u64, elements: u64, params: u64) {
        let group = name.split('.').next().unwrap_or("").to_string();
        self.entries.push(CostEntry {
            name,
            group,
            madds,
            elementwise_flops: elements * ELEMENTWISE_FLOPS,
            params,
        });
    }

    pub fn total_madds(&self) -> u64 {
        self.entries.iter().map(|e| e.madds).sum()
    }

    pub fn total_elementwise_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.elementwise_flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn entry(&self, name: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Sum of madds over entries whose name ends with `suffix`.
    pub fn madds_with_suffix(&self, suffix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.ends_with(suffix))
            .map(|e| e.madds)
            .sum()
    }

    /// `(group, madds, elementwise_flops, params)` in first-seen order.
    pub fn groups(&self) -> Vec<(String, u64, u64, u64)> {
        let mut out: Vec<(String, u64, u64, u64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|g| g.0 == e.group) {
                Some(g) => {
                    g.1 += e.madds;
                    g.2 += e.elementwise_flops;
                    g.3 += e.params;
                }
                None => out.push((e.group.clone(), e.madds, e.elementwise_flops, e.params)),
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,group,madds,elementwise_flops,params\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.name, e.group, e.madds, e.elementwise_flops, e.params
            ));
        }
        s.push_str(&format!(
            "total,total,{},{},{}\n",
            self.total_madds(),
            self.total_elementwise_flops(),
            self.total_params()
        ));
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:width$}  {:>14}  {:>12}  {:>10}",
            "name", "madds", "elem_flops", "params"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:width$}  {:>14}  {:>12}  {:>10}",
                e.name, e.madds, e.elementwise_flops, e.params
            )?;
        }
        writeln!(
            f,
            "{:width$}  {:>14}  {:>12}  {:>10}",
            "total",
            self.total_madds(),
            self.total_elementwise_flops(),
            self.total_params()
        )
    }
}

struct Dims {
    c: usize,
    heads: usize,
    /// Tokens per frame.
    p: usize,
    f: usize,
    n: usize,
}

fn affine(r: &mut CostReport, name: String, rows: usize, fan_in: usize, fan_out: usize) {
    r.push(
        name,
        (rows * fan_in * fan_out) as u64,
        0,
        (fan_in * fan_out + fan_out) as u64,
    );
}

fn layer_norm(r: &mut CostReport, name: String, rows: usize, width: usize) {
    r.push(name, 0, (rows * width) as u64, 2 * width as u64);
}

#[derive(Clone, Copy)]
enum Layout {
    Spatial,
    Temporal,
    Flat,
}

fn attention(r: &mut CostReport, pre: &str, d: &Dims, mode: AttnMode, layout: Layout) {
    let (c, rows) = (d.c, d.n + 1);
    for proj in ["q", "k", "v"] {
        affine(r, format!("{pre}.{proj}"), rows, c, c);
    }
    // (groups, queries per group, token keys per group) of the local maps
    let entries = match layout {
        Layout::Flat => {
            r.push(format!("{pre}.scores"), (rows * rows * c) as u64, 0, 0);
            rows * rows
        }
        Layout::Spatial | Layout::Temporal => {
            let (groups, width) = match layout {
                Layout::Spatial => (d.f, d.p),
                _ => (d.p, d.f),
            };
            r.push(format!("{pre}.class_scores"), (rows * c) as u64, 0, 0);
            r.push(
                format!("{pre}.class_key_scores"),
                (groups * width * c) as u64,
                0,
                0,
            );
            r.push(
                format!("{pre}.part_scores"),
                (groups * width * width * c) as u64,
                0,
                0,
            );
            rows + groups * width * (width + 1)
        }
    };
    r.push(format!("{pre}.weighted_sum"), (entries * c) as u64, 0, 0);
    r.push(format!("{pre}.softmax"), 0, (entries * d.heads) as u64, 0);
    if mode == AttnMode::Iipa {
        affine(r, format!("{pre}.intra"), d.n, c, c);
    }
    affine(r, format!("{pre}.out"), rows, c, c);
}

/// Cost of one forward pass of a single clip under `config`.
pub fn count_model(config: &ModelConfig) -> CostReport {
    let map = config.map();
    let (co, c) = (config.joint_channels, config.channels);
    let d = Dims {
        c,
        heads: config.heads,
        p: config.frame_tokens(),
        f: config.frames,
        n: config.tokens(),
    };
    let positions = config.persons * config.frames * map.joints();
    let mut r = CostReport::default();
    affine(&mut r, "encoder.lift1".into(), positions, CHANNELS, co);
    r.push(
        "encoder.bn1".into(),
        0,
        (positions * co) as u64,
        2 * co as u64,
    );
    affine(&mut r, "encoder.lift2".into(), positions, co, co);
    r.push(
        "encoder.bn2".into(),
        0,
        (positions * co) as u64,
        2 * co as u64,
    );
    affine(
        &mut r,
        "encoder.embed".into(),
        d.n,
        co * map.max_joints(),
        c,
    );
    r.push("embed.cls_token".into(), 0, 0, c as u64);
    if config.positional {
        r.push("embed.pos_spatial".into(), 0, 0, (d.p * c) as u64);
        r.push("embed.pos_temporal".into(), 0, 0, (d.f * c) as u64);
    }
    let rows = d.n + 1;
    for l in 0..config.layers {
        let pre = format!("layer{l}");
        layer_norm(&mut r, format!("{pre}.norm1"), rows, c);
        match config.layer_style {
            LayerStyle::Split => {
                attention(
                    &mut r,
                    &format!("{pre}.s_attn"),
                    &d,
                    config.attn_mode,
                    Layout::Spatial,
                );
                layer_norm(&mut r, format!("{pre}.norm2"), rows, c);
                attention(
                    &mut r,
                    &format!("{pre}.t_attn"),
                    &d,
                    config.attn_mode,
                    Layout::Temporal,
                );
            }
            LayerStyle::Flat => {
                attention(
                    &mut r,
                    &format!("{pre}.s_attn"),
                    &d,
                    config.attn_mode,
                    Layout::Flat,
                );
            }
        }
        layer_norm(&mut r, format!("{pre}.norm3"), rows, c);
        affine(&mut r, format!("{pre}.ffn1"), rows, c, config.ffn_ratio * c);
        affine(&mut r, format!("{pre}.ffn2"), rows, config.ffn_ratio * c, c);
    }
    layer_norm(&mut r, "head.norm_out".into(), 1, c);
    affine(&mut r, "head.fc".into(), 1, c, config.num_classes);
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRatio {
    pub group: String,
    pub a: u64,
    pub b: u64,
    /// `a / b`; infinite when only `a` has cost, NaN when neither has.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub groups: Vec<GroupRatio>,
    pub total: GroupRatio,
    pub params: GroupRatio,
}

fn ratio(group: &str, a: u64, b: u64) -> GroupRatio {
    GroupRatio {
        group: group.to_string(),
        a,
        b,
        ratio: a as f64 / b as f64,
    }
}

/// Per-group and total madd ratios `a / b`.
pub fn compare_configs(a: &ModelConfig, b: &ModelConfig) -> Comparison {
    let (ra, rb) = (count_model(a), count_model(b));
    let (ga, gb) = (ra.groups(), rb.groups());
    let mut names: Vec<String> = ga.iter().map(|g| g.0.clone()).collect();
    for g in &gb {
        if !names.contains(&g.0) {
            names.push(g.0.clone());
        }
    }
    let find =
        |gs: &[(String, u64, u64, u64)], n: &str| gs.iter().find(|g| g.0 == n).map_or(0, |g| g.1);
    Comparison {
        groups: names
            .iter()
            .map(|n| ratio(n, find(&ga, n), find(&gb, n)))
            .collect(),
        total: ratio("total", ra.total_madds(), rb.total_madds()),
        params: ratio("params", ra.total_params(), rb.total_params()),
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:10}  {:>14}  {:>14}  {:>10}",
            "group", "madds_a", "madds_b", "a/b"
        )?;
        for g in self.groups.iter().chain([&self.total, &self.params]) {
            writeln!(
                f,
                "{:10}  {:>14}  {:>14}  {:>10.4}",
                g.group, g.a, g.b, g.ratio
            )?;
        }
        Ok(())
    }
}
