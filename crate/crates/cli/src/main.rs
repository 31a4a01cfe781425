//! `lstc-mda`: parse skeleton files, generate and augment data, check
//! gradients, train and evaluate toy models, fuse modality scores and count
//! LSTC parameters.
//!
//! Exit codes: 0 success, 1 check failure, 2 input or usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use lstc_mda::augment::{apply_pipeline_traced, AugmentConfig, BodyPartition, Sample};
use lstc_mda::data::{
    derive_modalities, parse_ntu_skeleton, parse_sample_metadata, split_every, synth_dataset, synth_long_range,
    JointTopology, LongRangeConfig, Modality, SynthConfig,
};
use lstc_mda::gradcheck::{check_lstc_stack, LstcCheckConfig};
use lstc_mda::io::{load_samples, read_file, save_samples, write_file, Bundle};
use lstc_mda::lstc::{param_breakdown, LongKernelSpec, LongKernelVariant};
use lstc_mda::model::{
    ensemble_scores, evaluate, train, write_metrics_csv, EnsembleKind, ModelError, ToyModel, ToyModelConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "lstc-mda", version, about = "LSTC layers and joint-mixing augmentation for skeleton action recognition")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an NTU `.skeleton` file into JSON.
    Parse {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic labeled dataset.
    Synth {
        #[arg(long, value_enum, default_value = "standard")]
        kind: SynthKind,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        joints: usize,
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long)]
        noise: Option<f64>,
        /// Stream to emit, derived over a chain skeleton.
        #[arg(long, value_parser = parse_modality, default_value = "joint")]
        modality: Modality,
        /// Also write every fourth sample here instead of to `--out`.
        #[arg(long)]
        holdout: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Apply the mixing pipeline to a sample file, batch by batch.
    Augment {
        #[arg(long)]
        data: PathBuf,
        /// TOML augmentation config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON list of named joint groups.
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Write the mixing steps applied to each sample as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients of an LSTC stack.
    Gradcheck {
        /// TOML check config (dims at most 8 per axis).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        flip_sign: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a toy model; writes `model.bin` and `metrics.csv` under `--out`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// TOML with optional `[model]`, `[train]`, `[augment]` tables and a `partition` path.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint; prints accuracy and writes class scores.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fuse score files from `eval` by summing softmax scores.
    Ensemble {
        #[arg(long = "scores", required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<EnsembleKind>,
        #[command(flatten)]
        common: Common,
    },
    /// Learnable parameter counts of one LSTC layer.
    Paramcount {
        #[arg(long, value_parser = parse_variant)]
        variant: LongKernelVariant,
        /// `C,D,T,V`: channels (in = out), alignment width, input length, joints.
        #[arg(long)]
        dims: String,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Standard,
    LongRange,
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::parse(s).ok_or_else(|| format!("unknown modality `{s}`"))
}

fn parse_kind(s: &str) -> Result<EnsembleKind, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<LongKernelVariant, String> {
    s.parse().map_err(|e: lstc_mda::lstc::LstcError| e.to_string())
}

enum Failure {
    Check(String),
    Input(String),
}

type Outcome = Result<(), Failure>;

fn input(e: impl std::fmt::Display) -> Failure {
    Failure::Input(e.to_string())
}

fn require_out(common: &Common) -> Result<&Path, Failure> {
    common.out.as_deref().ok_or_else(|| Failure::Input("--out is required for this command".into()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(v).map_err(input)?;
    write_file(path, text.as_bytes()).map_err(input)
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let bytes = read_file(path).map_err(input)?;
    let text = String::from_utf8(bytes).map_err(|e| input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn cmd_parse(path: &Path, common: &Common) -> Outcome {
    let out = require_out(common)?;
    let bytes = read_file(path).map_err(|e| input(format!("io error: {e}")))?;
    let seq = parse_ntu_skeleton(&bytes).map_err(|e| input(format!("parse error in {}: {e}", path.display())))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let metadata = parse_sample_metadata(&name).ok();
    let doc = json!({
        "source": name,
        "metadata": metadata,
        "frames": seq.frames.len(),
        "max_bodies": seq.max_bodies(),
        "joints_per_body": seq.joints_per_body(),
        "sequence": seq,
    });
    write_json(out, &doc)?;
    println!("parsed {} frames from {}", seq.frames.len(), path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    kind: SynthKind,
    classes: usize,
    per_class: usize,
    frames: usize,
    joints: usize,
    views: usize,
    noise: Option<f64>,
    modality: Modality,
    holdout: Option<&Path>,
    common: &Common,
) -> Outcome {
    let out = require_out(common)?;
    let seed = common.seed.unwrap_or(0);
    let mut samples = match kind {
        SynthKind::Standard => synth_dataset(&SynthConfig {
            n_classes: classes,
            n_per_class: per_class,
            channels: 3,
            frames,
            joints,
            n_views: views,
            noise_sigma: noise.unwrap_or(0.05),
            seed,
        }),
        SynthKind::LongRange => synth_long_range(&LongRangeConfig {
            n_per_class: per_class,
            frames,
            joints,
            noise_sigma: noise.unwrap_or(LongRangeConfig::default().noise_sigma),
            seed,
            ..Default::default()
        }),
    }
    .map_err(input)?;
    if modality != Modality::Joint {
        let topo = JointTopology::chain(joints);
        for s in &mut samples {
            let m = derive_modalities(&s.x, topo.clone()).map_err(input)?;
            s.x = m.into_modality(modality);
        }
    }
    let extra = json!({ "modality": modality.name(), "seed": seed });
    match holdout {
        Some(path) => {
            let (train, test) = split_every(samples, 4, 1);
            save_samples(out, &train, extra.clone()).map_err(input)?;
            save_samples(path, &test, extra).map_err(input)?;
            println!("wrote {} training and {} held-out samples", train.len(), test.len());
        }
        None => {
            save_samples(out, &samples, extra).map_err(input)?;
            println!("wrote {} samples", samples.len());
        }
    }
    Ok(())
}

fn default_partition(joints: usize) -> Result<BodyPartition, Failure> {
    if joints % 25 == 0 {
        Ok(BodyPartition::ntu25())
    } else {
        BodyPartition::singletons(joints).map_err(input)
    }
}

fn load_partition(path: Option<&Path>, joints: usize) -> Result<BodyPartition, Failure> {
    match path {
        Some(p) => {
            let bytes = read_file(p).map_err(input)?;
            BodyPartition::from_json(&String::from_utf8_lossy(&bytes)).map_err(input)
        }
        None => default_partition(joints),
    }
}

fn cmd_augment(data: &Path, config: Option<&Path>, partition: Option<&Path>, batch_size: usize, trace: Option<&Path>, common: &Common) -> Outcome {
    let out = require_out(common)?;
    if batch_size == 0 {
        return Err(input("--batch-size must be positive"));
    }
    let mut cfg: AugmentConfig = config.map(read_toml).transpose()?.unwrap_or_default();
    if let Some(seed) = common.seed {
        cfg.rng_seed = seed;
    }
    let samples = load_samples(data).map_err(input)?;
    let Some(first) = samples.first() else {
        return Err(input("no samples to augment"));
    };
    let partition = load_partition(partition, first.joints())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut mixed = Vec::with_capacity(samples.len());
    let mut events = Vec::new();
    for (b, batch) in samples.chunks(batch_size).enumerate() {
        let (m, t) = apply_pipeline_traced(batch, &cfg, Some(&partition), &mut rng).map_err(input)?;
        for (s, ev) in m.iter().zip(t) {
            events.push(json!({ "batch": b, "id": s.id, "events": ev }));
        }
        mixed.extend(m);
    }
    save_samples(out, &mixed, json!({ "augmented_from": data.display().to_string() })).map_err(input)?;
    if let Some(path) = trace {
        write_json(path, &events)?;
    }
    let applied = events.iter().filter(|e| e["events"].as_array().is_some_and(|a| !a.is_empty())).count();
    println!("augmented {} samples ({applied} mixed)", mixed.len());
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, flip: Option<String>, common: &Common) -> Outcome {
    let mut cfg: LstcCheckConfig = config.map(read_toml).transpose()?.unwrap_or_default();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(input)?;
    let report = check_lstc_stack(&cfg, &cfg.options(flip)).map_err(input)?;
    println!("{:<18} {:>6} {:>12} {:>12}  status", "param", "numel", "max_rel_err", "max_abs_err");
    for p in &report.params {
        let status = if p.passed { "ok" } else { "FAIL" };
        println!("{:<18} {:>6} {:>12.3e} {:>12.3e}  {status}", p.name, p.numel, p.max_rel_err, p.max_abs_err);
    }
    if let Some(out) = &common.out {
        write_json(out, &json!({ "config": cfg, "passed": report.passed(), "params": report.params }))?;
    }
    if report.passed() {
        println!("all gradients within rel {:e} / abs {:e}", cfg.rel_tol, cfg.abs_tol);
        Ok(())
    } else {
        let worst = report.params.iter().filter(|p| !p.passed).max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
        Err(Failure::Check(format!(
            "gradcheck failed: worst offender `{}` (max relative error {:.3e} at element {})",
            worst.name, worst.max_rel_err, worst.worst_index
        )))
    }
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ToyModelConfig,
    train: Option<TrainConfig>,
    augment: AugmentConfig,
    partition: Option<PathBuf>,
}

fn cmd_train(data: &Path, val: Option<&Path>, config: Option<&Path>, common: &Common) -> Outcome {
    let out = require_out(common)?;
    let mut run: RunConfig = config.map(read_toml).transpose()?.unwrap_or_default();
    let seed = common.seed.unwrap_or(0);
    let train_set = load_samples(data).map_err(input)?;
    let val_set = val.map(load_samples).transpose().map_err(input)?.unwrap_or_default();
    let Some(first) = train_set.first() else {
        return Err(input("empty training set"));
    };
    let shape = first.x.shape();
    run.model.in_channels = shape[0];
    run.model.t_in = shape[1];
    run.model.joints = shape[2];
    run.model.n_classes = first.y.len();
    run.model.seed = seed;
    let mut tcfg = run.train.unwrap_or_else(TrainConfig::desk);
    tcfg.seed = seed;
    run.augment.rng_seed = seed;
    let partition = load_partition(run.partition.as_deref(), shape[2])?;
    let model = ToyModel::new(run.model).map_err(input)?;
    let outcome = train(model, &train_set, &val_set, &run.augment, Some(&partition), &tcfg).map_err(|e| match e {
        ModelError::Divergence { .. } | ModelError::NonFiniteGrad(_) => Failure::Check(e.to_string()),
        other => input(other),
    })?;
    outcome.model.to_bundle().save(&out.join("model.bin")).map_err(input)?;
    write_file(&out.join("metrics.csv"), write_metrics_csv(&outcome.log).as_bytes()).map_err(input)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {} loss {:.4} train_acc {} val_acc {}",
            last.epoch,
            last.loss,
            last.train_acc.map_or("-".into(), |a| format!("{a:.4}")),
            last.val_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    Ok(())
}

fn modality_of(path: &Path) -> Option<String> {
    let b = Bundle::load(path).ok()?;
    b.meta["extra"]["modality"].as_str().map(str::to_string)
}

fn cmd_eval(data: &Path, model: &Path, common: &Common) -> Outcome {
    let samples: Vec<Sample> = load_samples(data).map_err(input)?;
    let model = ToyModel::from_bundle(&Bundle::load(model).map_err(input)?).map_err(input)?;
    let r = evaluate(&model, &samples).map_err(input)?;
    println!("accuracy: {:.6}", r.accuracy);
    if let Some(out) = &common.out {
        write_json(
            out,
            &json!({ "accuracy": r.accuracy, "modality": modality_of(data), "labels": r.labels, "logits": r.logits }),
        )?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct ScoreFile {
    labels: Vec<usize>,
    logits: Vec<Vec<f64>>,
    modality: Option<String>,
}

fn cmd_ensemble(paths: &[PathBuf], kind: Option<EnsembleKind>, common: &Common) -> Outcome {
    let files: Vec<ScoreFile> = paths
        .iter()
        .map(|p| {
            let bytes = read_file(p).map_err(input)?;
            serde_json::from_slice(&bytes).map_err(|e| input(format!("{}: {e}", p.display())))
        })
        .collect::<Result<_, _>>()?;
    if let Some(kind) = kind {
        let want = kind.modalities();
        if files.len() != want.len() {
            return Err(input(format!("{kind} fuses {} modalities, got {} score files", want.len(), files.len())));
        }
        let mut have: Vec<String> = files.iter().filter_map(|f| f.modality.clone()).collect();
        if have.len() == files.len() {
            have.sort();
            let mut names: Vec<String> = want.iter().map(|m| m.name().to_string()).collect();
            names.sort();
            if have != names {
                return Err(input(format!("{kind} needs modalities {names:?}, got {have:?}")));
            }
        }
    }
    let labels = &files[0].labels;
    if files.iter().any(|f| &f.labels != labels) {
        return Err(input("score files disagree on sample labels"));
    }
    let sets: Vec<Vec<Vec<f64>>> = files.iter().map(|f| f.logits.clone()).collect();
    let (fused, preds) = ensemble_scores(&sets, &vec![1.0; sets.len()]).map_err(input)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = if labels.is_empty() { 0.0 } else { hits as f64 / labels.len() as f64 };
    println!("accuracy: {accuracy:.6}");
    if let Some(out) = &common.out {
        write_json(out, &json!({ "accuracy": accuracy, "predictions": preds, "scores": fused }))?;
    }
    Ok(())
}

fn cmd_paramcount(variant: LongKernelVariant, dims: &str, as_json: bool, common: &Common) -> Outcome {
    let parts: Vec<usize> = dims
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| input(format!("--dims `{dims}`: {e}")))?;
    let &[c, d, t, v] = parts.as_slice() else {
        return Err(input(format!("--dims expects C,D,T,V, got `{dims}`")));
    };
    let spec = LongKernelSpec::for_input(variant, t).map_err(input)?;
    let b = param_breakdown(c, c, d, t, v, &spec);
    let doc = json!({
        "variant": variant.name(),
        "dims": { "C": c, "D": d, "T": t, "V": v },
        "taps": spec.tap_count(),
        "short": b.short,
        "long": b.long,
        "projections": b.projections,
        "mu": b.mu,
        "total": b.total(),
    });
    if as_json {
        println!("{}", serde_json::to_string_pretty(&doc).map_err(input)?);
    } else {
        println!("variant {}  C_in=C_out={c} D={d} T={t} V={v}  taps={}", variant.name(), spec.tap_count());
        for (name, n) in [("short", b.short), ("long", b.long), ("projections", b.projections), ("mu", b.mu), ("total", b.total())] {
            println!("{name:<12} {n:>10}");
        }
    }
    if let Some(out) = &common.out {
        write_json(out, &doc)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Command::Parse { input, common } => cmd_parse(&input, &common),
        Command::Synth { kind, classes, per_class, frames, joints, views, noise, modality, holdout, common } => {
            cmd_synth(kind, classes, per_class, frames, joints, views, noise, modality, holdout.as_deref(), &common)
        }
        Command::Augment { data, config, partition, batch_size, trace, common } => {
            cmd_augment(&data, config.as_deref(), partition.as_deref(), batch_size, trace.as_deref(), &common)
        }
        Command::Gradcheck { config, flip_sign, common } => cmd_gradcheck(config.as_deref(), flip_sign, &common),
        Command::Train { data, val, config, common } => cmd_train(&data, val.as_deref(), config.as_deref(), &common),
        Command::Eval { data, model, common } => cmd_eval(&data, &model, &common),
        Command::Ensemble { scores, kind, common } => cmd_ensemble(&scores, kind, &common),
        Command::Paramcount { variant, dims, json, common } => cmd_paramcount(variant, &dims, json, &common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
