//! The full classifier: partition encoder, class token, factorized positional
//! embeddings, a stack of spatial-temporal layers and a linear head.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;

use crate::attention::{attention_layer, AttentionParams, AttnMode, Axis, LayerPlan, TokenGrid};
use crate::config::{parse_kv, parse_value, write_kv};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::numkernel::{Tensor, Var};
use crate::params::{Affine, Norm, ParamKind, ParamSet};
use crate::partition::{partition_encode, PartitionEncoderParams};
use crate::rng;
use crate::skeldata::{Modality, PartitionMap, SkeletonSequence, KINECT_JOINTS};

/// Standard deviation of the class token and positional tables at init.
pub const EMBED_INIT_STD: f64 = 0.02;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name {
            $($variant),+
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text),+
                })
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"),
                        s
                    ))),
                }
            }
        }
    };
}

keyword_enum!(PartitionKind { Default => "default", Identity => "identity" });
keyword_enum!(HeadMode { ClassToken => "class_token", AvgPool => "avg_pool" });
keyword_enum!(LayerStyle { Split => "split", Flat => "flat" });

impl PartitionKind {
    pub fn map(self) -> PartitionMap {
        match self {
            PartitionKind::Default => PartitionMap::default_kinect(),
            PartitionKind::Identity => PartitionMap::identity(KINECT_JOINTS),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    /// Token width `C_P`.
    pub channels: usize,
    /// Per-joint feature width `C_o`.
    pub joint_channels: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub num_classes: usize,
    pub frames: usize,
    pub persons: usize,
    pub partition: PartitionKind,
    pub head_mode: HeadMode,
    pub attn_mode: AttnMode,
    pub layer_style: LayerStyle,
    pub dropout: f64,
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            channels: 64,
            joint_channels: 32,
            heads: 8,
            ffn_ratio: 2,
            num_classes: 60,
            frames: 32,
            persons: 1,
            partition: PartitionKind::Default,
            head_mode: HeadMode::ClassToken,
            attn_mode: AttnMode::Iipa,
            layer_style: LayerStyle::Split,
            dropout: 0.0,
            positional: true,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 14] = [
        "layers",
        "channels",
        "joint_channels",
        "heads",
        "ffn_ratio",
        "num_classes",
        "frames",
        "persons",
        "partition",
        "head_mode",
        "attn_mode",
        "layer_style",
        "dropout",
        "positional",
    ];

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("channels", self.channels),
            ("joint_channels", self.joint_channels),
            ("heads", self.heads),
            ("ffn_ratio", self.ffn_ratio),
            ("num_classes", self.num_classes),
            ("frames", self.frames),
            ("persons", self.persons),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{k}` must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn map(&self) -> PartitionMap {
        self.partition.map()
    }

    /// Tokens per frame across all persons.
    pub fn frame_tokens(&self) -> usize {
        self.persons * self.map().num_parts()
    }

    /// Tokens per clip excluding the class token.
    pub fn tokens(&self) -> usize {
        self.frames * self.frame_tokens()
    }

    /// Set one field from its text form; `Ok(false)` for keys this config
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "layers" => self.layers = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "joint_channels" => self.joint_channels = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "ffn_ratio" => self.ffn_ratio = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "frames" => self.frames = parse_value(key, value)?,
            "persons" => self.persons = parse_value(key, value)?,
            "partition" => self.partition = value.parse()?,
            "head_mode" => self.head_mode = value.parse()?,
            "attn_mode" => self.attn_mode = value.parse()?,
            "layer_style" => self.layer_style = value.parse()?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "positional" => self.positional = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("channels", self.channels.to_string()),
            ("joint_channels", self.joint_channels.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_ratio", self.ffn_ratio.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("frames", self.frames.to_string()),
            ("persons", self.persons.to_string()),
            ("partition", self.partition.to_string()),
            ("head_mode", self.head_mode.to_string()),
            ("attn_mode", self.attn_mode.to_string()),
            ("layer_style", self.layer_style.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("positional", self.positional.to_string()),
        ]
    }

    /// Parse a complete `key = value` text; unknown keys are an error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::config(format!("unknown config key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub norm1: Norm,
    pub s_attn: AttentionParams,
    /// Absent for the flat layer style.
    pub temporal: Option<(Norm, AttentionParams)>,
    pub norm3: Norm,
    pub ffn1: Affine,
    pub ffn2: Affine,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
    pub encoder: PartitionEncoderParams,
    pub cls_token: crate::params::ParamId,
    pub pos: Option<(crate::params::ParamId, crate::params::ParamId)>,
    pub layers: Vec<LayerParams>,
    /// Norm of the pooled feature in front of the head.
    pub norm_out: Norm,
    pub head: Affine,
}

impl ModelParams {
    /// Register every tensor with placeholder values.
    pub fn layout(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let map = config.map();
        let c = config.channels;
        let mut set = ParamSet::new();
        let encoder = PartitionEncoderParams::register(
            &mut set,
            "encoder",
            config.joint_channels,
            map.max_joints(),
            c,
        );
        let cls_token = set.add("cls_token", Tensor::zeros(&[1, c]), ParamKind::NoDecay);
        let pos = config.positional.then(|| {
            (
                set.add(
                    "pos_spatial",
                    Tensor::zeros(&[config.frame_tokens(), c]),
                    ParamKind::NoDecay,
                ),
                set.add(
                    "pos_temporal",
                    Tensor::zeros(&[config.frames, c]),
                    ParamKind::NoDecay,
                ),
            )
        });
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let pre = format!("layer{l}");
            let norm1 = Norm::register(&mut set, &format!("{pre}.norm1"), c);
            let s_attn = AttentionParams::register(
                &mut set,
                &format!("{pre}.s_attn"),
                c,
                config.heads,
                config.attn_mode,
            )?;
            let temporal = match config.layer_style {
                LayerStyle::Split => Some((
                    Norm::register(&mut set, &format!("{pre}.norm2"), c),
                    AttentionParams::register(
                        &mut set,
                        &format!("{pre}.t_attn"),
                        c,
                        config.heads,
                        config.attn_mode,
                    )?,
                )),
                LayerStyle::Flat => None,
            };
            let norm3 = Norm::register(&mut set, &format!("{pre}.norm3"), c);
            let hidden = config.ffn_ratio * c;
            let ffn1 = Affine::register(&mut set, &format!("{pre}.ffn1"), c, hidden);
            let ffn2 = Affine::register(&mut set, &format!("{pre}.ffn2"), hidden, c);
            layers.push(LayerParams {
                norm1,
                s_attn,
                temporal,
                norm3,
                ffn1,
                ffn2,
            });
        }
        let norm_out = Norm::register(&mut set, "norm_out", c);
        let head = Affine::register(&mut set, "head", c, config.num_classes);
        Ok(ModelParams {
            config,
            set,
            encoder,
            cls_token,
            pos,
            layers,
            norm_out,
            head,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.set.trainable_count()
    }
}

/// Affine weights `U(+-1/sqrt(fan_in))`, biases zero, class token and
/// positional tables `N(0, 0.02^2)`, norms at identity.
pub fn init_params(config: ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut model = ModelParams::layout(config)?;
    let mut r = rng::stream(seed, &[0x1417]);
    let ids: Vec<_> = model.set.ids().collect();
    for id in ids {
        let e = model.set.entry(id);
        let shape = e.value.shape().to_vec();
        let value = match e.kind {
            ParamKind::NoDecay => Tensor::normal(&shape, EMBED_INIT_STD, &mut r),
            ParamKind::Weight if e.name.ends_with(".weight") && shape.len() == 2 => {
                Tensor::uniform(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut r)
            }
            _ => continue,
        };
        *model.set.get_mut(id) = value;
    }
    Ok(model)
}

/// Per-batch options for the training path.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// One optional masked part per sample; empty disables masking.
    pub part_masks: Vec<Option<usize>>,
    /// Seed of the dropout stream; only read in train mode with dropout > 0.
    pub dropout_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, num_classes]`.
    pub logits: Var,
    /// Token matrix after the embedding and after every layer.
    pub stages: Vec<Var>,
}

fn dropout(g: &mut Graph<'_>, x: Var, p: f64, seed: u64, key: &[u64]) -> Result<Var> {
    if g.mode() != Mode::Train || p == 0.0 {
        return Ok(x);
    }
    let mut r = rng::stream(seed, key);
    let keep = 1.0 / (1.0 - p);
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if r.random_bool(p) { 0.0 } else { keep })
        .collect();
    let m = g.tape.constant(Tensor::new(&shape, mask)?);
    g.tape.mul(x, m)
}

fn check_input(config: &ModelConfig, seqs: &[SkeletonSequence]) -> Result<Vec<SkeletonSequence>> {
    if seqs.is_empty() {
        return Err(Error::EmptyReduction("forward on empty batch"));
    }
    seqs.iter()
        .map(|s| {
            if s.frames() != config.frames || s.joints() != KINECT_JOINTS {
                return Err(Error::ShapeMismatch {
                    op: "model input (frames, joints)",
                    lhs: vec![s.frames(), s.joints()],
                    rhs: vec![config.frames, KINECT_JOINTS],
                });
            }
            if s.persons() > config.persons {
                return Err(Error::config(format!(
                    "sequence has {} persons, model expects at most {}",
                    s.persons(),
                    config.persons
                )));
            }
            s.with_persons(config.persons)
        })
        .collect()
}

/// Forward a batch of sequences already resampled to `config.frames`.
pub fn forward_batch(
    g: &mut Graph<'_>,
    model: &ModelParams,
    seqs: &[SkeletonSequence],
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let seqs = check_input(cfg, seqs)?;
    let batch = seqs.len();
    let map = cfg.map();
    let grid = TokenGrid::new(batch, cfg.frame_tokens(), cfg.frames);
    let n = grid.tokens();

    let mut tokens = partition_encode(g, &model.encoder, &map, &seqs, &opts.part_masks)?;
    if let Some((ps, pt)) = model.pos {
        let sp: Vec<Option<usize>> = (0..batch * n).map(|t| Some(t % grid.parts)).collect();
        let tp: Vec<Option<usize>> = (0..batch * n).map(|t| Some((t % n) / grid.parts)).collect();
        let (ps, pt) = (g.var(ps), g.var(pt));
        let es = g.tape.gather(ps, Arc::new(sp), 1)?;
        let et = g.tape.gather(pt, Arc::new(tp), 1)?;
        tokens = g.tape.add(tokens, es)?;
        tokens = g.tape.add(tokens, et)?;
    }
    let cls = g.var(model.cls_token);
    let stacked = g.tape.concat_rows(&[cls, tokens])?;
    let order: Vec<Option<usize>> = (0..grid.rows())
        .map(|r| {
            Some(if r % grid.block() == 0 {
                0
            } else {
                r - r / grid.block()
            })
        })
        .collect();
    let mut x = g.tape.gather(stacked, Arc::new(order), 1)?;

    let first_axis = match cfg.layer_style {
        LayerStyle::Split => Axis::Spatial,
        LayerStyle::Flat => Axis::Flat,
    };
    let plan1 = LayerPlan::new(grid, first_axis)?;
    let plan2 = LayerPlan::new(grid, Axis::Temporal)?;
    let mut stages = vec![x];
    for (l, layer) in model.layers.iter().enumerate() {
        let key = |branch: u64| [l as u64, branch];
        let h = g.layer_norm(&layer.norm1, x)?;
        let h = attention_layer(g, &layer.s_attn, h, &plan1)?;
        let h = dropout(g, h, cfg.dropout, opts.dropout_seed, &key(0))?;
        x = g.tape.add(x, h)?;
        if let Some((norm2, t_attn)) = &layer.temporal {
            let h = g.layer_norm(norm2, x)?;
            let h = attention_layer(g, t_attn, h, &plan2)?;
            let h = dropout(g, h, cfg.dropout, opts.dropout_seed, &key(1))?;
            x = g.tape.add(x, h)?;
        }
        let h = g.layer_norm(&layer.norm3, x)?;
        let h = g.affine(&layer.ffn1, h)?;
        let h = g.tape.relu(h)?;
        let h = g.affine(&layer.ffn2, h)?;
        let h = dropout(g, h, cfg.dropout, opts.dropout_seed, &key(2))?;
        x = g.tape.add(x, h)?;
        stages.push(x);
    }

    let pooled = match cfg.head_mode {
        HeadMode::ClassToken => {
            let rows: Vec<Option<usize>> = (0..batch).map(|s| Some(grid.class_row(s))).collect();
            g.tape.gather(x, Arc::new(rows), 1)?
        }
        HeadMode::AvgPool => {
            let groups: Vec<Vec<usize>> = (0..batch)
                .map(|s| (grid.class_row(s) + 1..grid.class_row(s) + grid.block()).collect())
                .collect();
            g.tape.row_mean(x, Arc::new(groups))?
        }
    };
    let pooled = g.layer_norm(&model.norm_out, pooled)?;
    let logits = g.affine(&model.head, pooled)?;
    Ok(ForwardOutput { logits, stages })
}

/// Logits of one sequence.
pub fn forward(model: &ModelParams, seq: &SkeletonSequence, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new(&model.set, mode);
    let out = forward_batch(
        &mut g,
        model,
        std::slice::from_ref(seq),
        &ForwardOptions::default(),
    )?;
    g.value(out.logits)
        .clone()
        .reshape(&[model.config.num_classes])
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IIPW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained weights plus the input stream they expect.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub modality: Modality,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut pairs = ckpt.model.config.to_pairs();
    pairs.push(("modality", ckpt.modality.to_string()));
    let text = write_kv(&pairs);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let entries = ckpt.model.set.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in e.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::format("checkpoint header is not UTF-8"))?;
    let mut config = ModelConfig::default();
    let mut modality = None;
    for (k, v) in parse_kv(text)? {
        if k == "modality" {
            modality = Some(v.parse::<Modality>()?);
        } else if !config.set(&k, &v)? {
            return Err(Error::format(format!(
                "unknown checkpoint config key `{k}`"
            )));
        }
    }
    let modality = modality.ok_or_else(|| Error::format("checkpoint header lacks modality"))?;
    let mut model = ModelParams::layout(config)?;
    let count = r.u32()? as usize;
    if count != model.set.len() {
        return Err(Error::format(format!(
            "checkpoint holds {count} tensors, config expects {}",
            model.set.len()
        )));
    }
    let ids: Vec<_> = model.set.ids().collect();
    for id in ids {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let want = &model.set.entry(id).name;
        if name != want {
            return Err(Error::format(format!(
                "checkpoint tensor `{name}` where `{want}` expected"
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != model.set.get(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint tensor",
                lhs: shape,
                rhs: model.set.get(id).shape().to_vec(),
            });
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *model.set.get_mut(id) = Tensor::new_finite(&shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint tensors"));
    }
    Ok(Checkpoint { model, modality })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 1,
            channels: 16,
            joint_channels: 8,
            heads: 2,
            num_classes: 3,
            frames: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig {
            dropout: 0.1,
            head_mode: HeadMode::AvgPool,
            ..small()
        };
        let text = write_kv(&cfg.to_pairs());
        assert_eq!(ModelConfig::from_text(&text).unwrap(), cfg);
        assert!(ModelConfig::from_text("bogus = 1").is_err());
        assert!(ModelConfig::from_text("heads = 3").is_err());
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let a = init_params(small(), 5).unwrap();
        let b = init_params(small(), 5).unwrap();
        let c = init_params(small(), 6).unwrap();
        assert_eq!(a.set, b.set);
        assert_ne!(a.set, c.set);
        for e in a.set.entries() {
            if e.name.ends_with(".bias") {
                assert!(e.value.data().iter().all(|x| *x == 0.0), "{}", e.name);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ckpt = Checkpoint {
            model: init_params(small(), 1).unwrap(),
            modality: Modality::Bone,
        };
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.model.set, ckpt.model.set);
        assert_eq!(back.model.config, ckpt.model.config);
        assert_eq!(back.modality, Modality::Bone);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn logits_have_class_count() {
        let m = init_params(small(), 2).unwrap();
        let seq = SkeletonSequence::zeros(4, 25, 1, 0);
        let out = forward(&m, &seq, Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[3]);
        assert!(out.is_finite());
    }
}
