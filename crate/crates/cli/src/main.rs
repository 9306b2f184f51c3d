use std::fs;
use std::io::Write as _;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iip_core::augment::{apply_rotation, gaussian_noise, joint_mask, part_mask, random_rotation};
use iip_core::complexity::{compare_configs, count_model};
use iip_core::config::parse_kv;
use iip_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use iip_core::numkernel::Tensor;
use iip_core::rng;
use iip_core::selfcheck::run_suite;
use iip_core::skeldata::{
    load_sequence, save_sequence, synth_dataset, DatasetManifest, PartitionMap, SkeletonSequence,
    SynthSpec,
};
use iip_core::training::{
    fuse_streams, parse_run_config, score_manifest, train, ScoreFile, TrainConfig,
};
use iip_core::{Error, Result};
use rand::Rng;

/// Part-level spatial-temporal transformer for skeleton action recognition.
#[derive(Parser, Debug)]
#[command(name = "iip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of sequence files plus manifest.tsv.
    Synth(SynthArgs),
    /// Train a model on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Average the softmax outputs of several score files.
    Fuse(FuseArgs),
    /// Analytic multiply-add and parameter counts of a model config.
    Flops(FlopsArgs),
    /// Apply one augmentation to a sequence file.
    Augment(AugmentArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Samples generated per class.
    #[arg(long = "per-class", default_value_t = 32)]
    per_class: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 32)]
    frames: usize,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Input stream: joint, bone, joint_motion or bone_motion [default: joint].
    #[arg(long)]
    modality: Option<String>,
    /// `key = value` file with model and training settings; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch metric records to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Training epochs [default: 50].
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 16].
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Base learning rate [default: 0.1].
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for initialization, shuffling and augmentation [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for data preparation and kernels [default: 1].
    #[arg(long)]
    workers: Option<usize>,
    /// Classifier width [default: largest manifest label + 1 unless the
    /// config file sets `num_classes`].
    #[arg(long = "num-classes")]
    num_classes: Option<usize>,
    /// Extra `key=value` setting, applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Write per-sample logits to this score file.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Score files written by `eval --scores`, in the same sample order.
    #[arg(long, num_args = 1.., required = true)]
    scores: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// Model config file; defaults apply to missing keys [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Second config; prints per-group ratios config / compare.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AugmentOp {
    Rotation,
    PartMask,
    Noise,
    JointMask,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Input sequence file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Augmentation to apply.
    #[arg(long, value_enum)]
    op: AugmentOp,
    /// Seed for the random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output sequence file.
    #[arg(long)]
    out: PathBuf,
    /// Rotation: per-axis angle bound in radians.
    #[arg(long, default_value_t = std::f64::consts::PI / 10.0)]
    angle: f64,
    /// Part mask: part to zero [default: drawn uniformly].
    #[arg(long)]
    part: Option<usize>,
    /// Noise: standard deviation in meters.
    #[arg(long, default_value_t = 0.01)]
    std: f64,
    /// Joint mask: number of (frame, joint) cells to zero.
    #[arg(long, default_value_t = 10)]
    count: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for parameters, inputs and probed coordinates.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        frames: a.frames,
        seed: a.seed,
    };
    let m = synth_dataset(spec, &a.out)?;
    println!(
        "wrote {} sequences and manifest.tsv to {}",
        m.len(),
        a.out.display()
    );
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let text = match &a.config {
        Some(p) => read(p)?,
        None => String::new(),
    };
    let (mut model, mut cfg) = parse_run_config(&text)?;
    let file_sets_classes = parse_kv(&text)?.iter().any(|(k, _)| k == "num_classes");
    if !file_sets_classes {
        model.num_classes = manifest.num_classes();
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
        let (k, v) = (k.trim(), v.trim());
        if !model.set(k, v)? && !cfg.set(k, v)? {
            return Err(Error::Config(format!("unknown config key `{k}`")));
        }
    }
    overlay(&mut model, &mut cfg, &a)?;
    let mut log = match &a.log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?),
        None => None,
    };
    let mut log_err = None;
    let out = train(&manifest, model, &cfg, |r| {
        println!("{r}");
        if let Some(f) = log.as_mut() {
            if let Err(e) = writeln!(f, "{r}") {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (log_err, &a.log) {
        return Err(Error::Io {
            path: p.clone(),
            source: e,
        });
    }
    save_checkpoint(&out.checkpoint, &a.out)?;
    println!(
        "params={} checkpoint={}",
        out.checkpoint.model.trainable_count(),
        a.out.display()
    );
    Ok(())
}

fn overlay(model: &mut ModelConfig, cfg: &mut TrainConfig, a: &TrainArgs) -> Result<()> {
    if let Some(m) = &a.modality {
        cfg.modality = m.parse()?;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.workers {
        cfg.workers = v;
    }
    if let Some(v) = a.num_classes {
        model.num_classes = v;
    }
    model.validate()?;
    cfg.validate()
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let scores = score_manifest(&manifest, &ckpt)?;
    if let Some(p) = &a.scores {
        scores.save(p)?;
    }
    print!("{}", scores.report()?);
    Ok(())
}

fn fuse_cmd(a: FuseArgs) -> Result<()> {
    let streams = a
        .scores
        .iter()
        .map(ScoreFile::load)
        .collect::<Result<Vec<_>>>()?;
    print!("{}", fuse_streams(&streams)?);
    Ok(())
}

fn model_config(path: Option<&PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => Ok(parse_run_config(&read(p)?)?.0),
        None => Ok(ModelConfig::default()),
    }
}

fn flops_cmd(a: FlopsArgs) -> Result<()> {
    let cfg = model_config(a.config.as_ref())?;
    cfg.validate()?;
    let report = count_model(&cfg);
    match a.format {
        Format::Text => print!("{report}"),
        Format::Csv => print!("{}", report.to_csv()),
    }
    if let Some(p) = &a.compare {
        let other = model_config(Some(p))?;
        other.validate()?;
        let cmp = compare_configs(&cfg, &other);
        match a.format {
            Format::Text => print!("\n{cmp}"),
            Format::Csv => {
                println!("group,madds_a,madds_b,ratio");
                for g in cmp.groups.iter().chain([&cmp.total, &cmp.params]) {
                    println!("{},{},{},{}", g.group, g.a, g.b, g.ratio);
                }
            }
        }
    }
    Ok(())
}

/// Zero a whole part's joints in every frame of the raw coordinates.
fn mask_sequence_part(
    seq: &SkeletonSequence,
    map: &PartitionMap,
    part: usize,
) -> Result<SkeletonSequence> {
    let (nf, nv, nb) = (seq.frames(), seq.joints(), seq.persons());
    let mut rows = Vec::with_capacity(nb * nf * nv * 3);
    for b in 0..nb {
        for f in 0..nf {
            for v in 0..nv {
                rows.extend_from_slice(&seq.point(f, v, b));
            }
        }
    }
    let masked = part_mask(&Tensor::new(&[nb * nf, nv, 3], rows)?, map, part)?;
    let mut out = seq.clone();
    for (i, p) in masked.data().chunks(3).enumerate() {
        let (b, f, v) = (i / (nf * nv), i / nv % nf, i % nv);
        out.set_point(f, v, b, [p[0], p[1], p[2]]);
    }
    Ok(out)
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    let seq = load_sequence(&a.input)?;
    let mut r = rng::seeded(a.seed);
    let out = match a.op {
        AugmentOp::Rotation => apply_rotation(&seq, &random_rotation(a.angle, &mut r))?,
        AugmentOp::PartMask => {
            let map = PartitionMap::default_kinect();
            let part = a.part.unwrap_or_else(|| r.random_range(0..map.num_parts()));
            println!("masked part {part}");
            mask_sequence_part(&seq, &map, part)?
        }
        AugmentOp::Noise => gaussian_noise(&seq, a.std, &mut r)?,
        AugmentOp::JointMask => joint_mask(&seq, a.count, &mut r)?,
    };
    save_sequence(&out, &a.out)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let entries = run_suite(a.seed)?;
    let mut failed = Vec::new();
    for e in &entries {
        println!(
            "{:20} max_rel_err={:.3e} max_abs_err={:.3e} checked={} {}",
            e.name,
            e.report.max_rel_err,
            e.report.max_abs_err,
            e.report.checked,
            if e.passed() { "ok" } else { "FAIL" }
        );
        if !e.passed() {
            failed.push(e.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::Flops(a) => flops_cmd(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

const USER_ERROR: u8 = 1;
const INTERNAL_ERROR: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USER_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() {
                INTERNAL_ERROR
            } else {
                USER_ERROR
            })
        }
        Err(_) => ExitCode::from(INTERNAL_ERROR),
    }
}
