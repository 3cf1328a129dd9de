use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vptm_core::checkpoint::Checkpoint;
use vptm_core::data::{load_dataset, make_synthetic, Split, SyntheticSpec, DEFAULT_NOISE_STD, DEFAULT_PHASE_JITTER};
use vptm_core::harness::{
    collect_report, load_backbone, run_experiment, sweep, DatasetPaths, ExperimentConfig, SweepAxis,
};
use vptm_core::mvtm::{pretrain, write_trace_csv, PretrainOptions, DEFAULT_MASK_RATIO};
use vptm_core::prompt::Layout;
use vptm_core::regimes::{
    embedding_rows, evaluate, metrics_for, run_regime, Regime, RegimeSpec, TrainOptions, TrainReport, TunedModel,
};
use vptm_core::tokenizer::{codebook_from_dataset, Codebook, CodebookMode};
use vptm_core::verbalizer::{write_embeddings_csv, HeadKind};
use vptm_core::vit::{count_params, estimate_flops, BackboneConfig};
use vptm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vptm", version, about = "Masked visual token pretraining and prompt tuning on a tiny ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic-textures dataset.
    MakeSynthetic(MakeSynthetic),
    /// Fit a k-means visual vocabulary over patches or frozen features.
    BuildCodebook(BuildCodebook),
    /// Pretrain a backbone on masked visual token prediction.
    Pretrain(Pretrain),
    /// Tune prompts and a verbalizer head on a frozen backbone.
    PromptTune(PromptTune),
    /// Train one comparison regime from a config file or flags.
    Train(Train),
    /// Top-1 accuracy of a tuned checkpoint.
    Eval(Eval),
    /// Run one ablation axis from a config file.
    Sweep(Sweep),
    /// Tuned and total parameter counts.
    CountParams(Geometry),
    /// Forward GFLOPs per image.
    EstimateFlops(Geometry),
    /// Prototype and sample vectors in prototype space, as CSV.
    ExportEmbeddings(ExportEmbeddings),
    /// Table of every run under a directory.
    Report(Report),
}

#[derive(Args)]
struct MakeSynthetic {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE_STD)]
    noise: f64,
    #[arg(long, default_value_t = DEFAULT_PHASE_JITTER)]
    phase_jitter: f64,
    #[arg(long, default_value_t = Split::Train)]
    split: Split,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildCodebook {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "pixel")]
    mode: String,
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    /// Pretrained backbone whose hidden states are clustered (feature mode).
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    max_vectors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// Required when the codebook was built in feature mode.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Experiment config whose `backbone` table sets the geometry.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = DEFAULT_MASK_RATIO)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneFlags {
    #[arg(long, default_value_t = Layout::Cxpm)]
    layout: Layout,
    #[arg(long = "np", default_value_t = 5)]
    n_prompts: usize,
    #[arg(long, default_value_t = 64)]
    proto_dim: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PromptTune {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "pv")]
    head: HeadKind,
    #[command(flatten)]
    tune: TuneFlags,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Tuned checkpoint: frozen backbone plus `prompt.` entries.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long, conflicts_with_all = ["ckpt", "train", "test", "regime", "out"])]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    regime: Option<Regime>,
    #[command(flatten)]
    tune: TuneFlags,
    /// Run directory for config, metrics, trace and tuned checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values; codebook_mode takes MODE=CHECKPOINT pairs.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Args)]
struct Geometry {
    /// `desk` or `vit-base`.
    #[arg(long, default_value = "vit-base")]
    preset: String,
    #[arg(long, default_value_t = Regime::Vptm)]
    regime: Regime,
    #[arg(long = "np", default_value_t = 0)]
    n_prompts: usize,
    #[arg(long, default_value_t = 128)]
    proto_dim: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Overrides the sequence length implied by the regime.
    #[arg(long)]
    seq_len: Option<usize>,
}

#[derive(Args)]
struct ExportEmbeddings {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Report {
    dir: PathBuf,
}

fn parse_mode(s: &str) -> Result<CodebookMode> {
    match s.to_ascii_lowercase().as_str() {
        "pixel" => Ok(CodebookMode::Pixel),
        "feature" => Ok(CodebookMode::Feature),
        other => Err(Error::invalid(format!("unknown codebook mode `{other}`"))),
    }
}

fn preset(name: &str) -> Result<BackboneConfig> {
    match name.to_ascii_lowercase().as_str() {
        "desk" => Ok(BackboneConfig::desk()),
        "vit-base" | "vit_base" | "base" => Ok(BackboneConfig::vit_base()),
        other => Err(Error::invalid(format!("unknown preset `{other}`"))),
    }
}

fn train_options(t: &TuneFlags) -> TrainOptions {
    TrainOptions {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        seed: t.seed,
        ..TrainOptions::default()
    }
}

fn make_synthetic_cmd(a: MakeSynthetic) -> Result<()> {
    let spec = SyntheticSpec {
        classes: a.classes,
        per_class: a.per_class,
        image_size: a.image_size,
        channels: a.channels,
        noise_std: a.noise,
        phase_jitter: a.phase_jitter,
        seed: a.seed,
    };
    let ds = make_synthetic(&spec)?.with_split(a.split);
    ds.save(&a.out)?;
    println!("wrote {} images ({} classes) to {}", ds.len(), ds.n_classes, a.out.display());
    Ok(())
}

fn build_codebook_cmd(a: BuildCodebook) -> Result<()> {
    let mode = parse_mode(&a.mode)?;
    let ds = load_dataset(&a.data)?;
    let extractor = a.extractor.as_deref().map(|p| load_backbone(p, None)).transpose()?;
    let cfg = match &extractor {
        Some(b) => b.config,
        None => BackboneConfig {
            image_size: ds.height,
            channels: ds.channels,
            patch_size: a.patch_size,
            ..BackboneConfig::desk()
        },
    };
    if ds.height != ds.width || ds.height != cfg.image_size || ds.channels != cfg.channels {
        return Err(Error::invalid("dataset geometry does not match the patch grid"));
    }
    let cb = codebook_from_dataset(&ds, &cfg, mode, a.k, extractor.as_ref(), a.max_vectors, a.seed)?;
    cb.save(&a.out)?;
    println!(
        "{} codebook: {} codes of dim {} -> {}",
        mode.as_str(),
        cb.len(),
        cb.dim,
        a.out.display()
    );
    Ok(())
}

fn pretrain_cmd(a: Pretrain) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let cb = Codebook::load(&a.codebook)?;
    let extractor = a.extractor.as_deref().map(|p| load_backbone(p, None)).transpose()?;
    let cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.backbone,
        None => BackboneConfig {
            image_size: ds.height,
            channels: ds.channels,
            vocab_size: cb.len(),
            ..BackboneConfig::desk()
        },
    };
    let opts = PretrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup_epochs: a.warmup_epochs,
        mask_ratio: a.mask_ratio,
        seed: a.seed,
        ..PretrainOptions::default()
    };
    let out = pretrain(cfg, &ds, &cb, extractor.as_ref(), &opts)?;
    out.backbone.to_checkpoint().save(&a.out)?;
    if let Some(trace) = &a.trace {
        write_trace_csv(trace, &out.trace)?;
    }
    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        println!("loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, out.trace.len());
    }
    println!("backbone -> {}", a.out.display());
    Ok(())
}

fn head_spec(head: HeadKind, t: &TuneFlags, n_classes: usize) -> RegimeSpec {
    match head {
        HeadKind::Pv => RegimeSpec::vptm(t.layout, t.n_prompts, t.proto_dim, n_classes),
        HeadKind::Mlp1 | HeadKind::Mlp2 => {
            let regime = if head == HeadKind::Mlp1 { Regime::Mlp1 } else { Regime::Mlp2 };
            RegimeSpec {
                layout: t.layout,
                ..RegimeSpec::new(regime, n_classes).with_prompts(t.n_prompts)
            }
        }
    }
}

fn prompt_tune_cmd(a: PromptTune) -> Result<()> {
    let backbone = load_backbone(&a.ckpt, None)?;
    let train = load_dataset(&a.train)?;
    let test = match &a.test {
        Some(p) => load_dataset(p)?,
        None => train.clone(),
    };
    let spec = head_spec(a.head, &a.tune, train.n_classes);
    let (model, metrics, report) = run_regime(&backbone, spec, &train, &test, &train_options(&a.tune))?;
    if model.backbone.checkpoint_bytes() != backbone.checkpoint_bytes() {
        return Err(Error::invalid("backbone changed during prompt tuning"));
    }
    model.to_checkpoint().save(&a.out)?;
    if let Some(trace) = &a.trace {
        write_trace_csv(trace, &report.trace)?;
    }
    println!(
        "{} accuracy {:.4} tuned {} of {} ({:.4}%) -> {}",
        metrics.regime,
        metrics.accuracy,
        metrics.tuned_params,
        metrics.total_params,
        metrics.tuned_ratio,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: Train) -> Result<()> {
    let cfg = match a.config {
        Some(p) => ExperimentConfig::load(&p)?,
        None => {
            let need = |v: Option<PathBuf>, flag: &str| v.ok_or_else(|| Error::invalid(format!("--{flag} is required without --config")));
            let checkpoint_path = need(a.ckpt, "ckpt")?;
            let backbone = load_backbone(&checkpoint_path, None)?.config;
            let cfg = ExperimentConfig {
                backbone,
                codebook_path: None,
                checkpoint_path,
                regime: a.regime.ok_or_else(|| Error::invalid("--regime is required without --config"))?,
                layout: a.tune.layout,
                n_p: a.tune.n_prompts,
                t: a.tune.proto_dim,
                epochs: a.tune.epochs,
                batch_size: a.tune.batch_size,
                seed: a.tune.seed,
                dataset_paths: DatasetPaths {
                    train: need(a.train, "train")?,
                    test: need(a.test, "test")?,
                },
                output_dir: need(a.out, "out")?,
                lr: Some(a.tune.lr),
                weight_decay: None,
                warmup_epochs: None,
            };
            cfg.validate()?;
            cfg
        }
    };
    let m = run_experiment(&cfg)?;
    println!(
        "{} accuracy {:.4} tuned/total {:.4}% GFLOPs {:.6} -> {}",
        m.regime,
        m.accuracy,
        m.tuned_ratio,
        m.gflops,
        cfg.output_dir.display()
    );
    Ok(())
}

fn eval_cmd(a: Eval) -> Result<()> {
    let model = TunedModel::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    let ds = load_dataset(&a.data)?;
    let acc = evaluate(&model, &ds)?;
    println!("accuracy {acc:.6} on {} images", ds.len());
    if let Some(path) = &a.metrics {
        let opts = TrainOptions { epochs: 0, ..TrainOptions::default() };
        let empty = TrainReport { trace: Vec::new(), steps: 0 };
        metrics_for(&model, acc, &opts, &empty).write_json(path)?;
    }
    Ok(())
}

fn sweep_cmd(a: Sweep) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let values = if a.values.is_empty() { a.axis.default_values() } else { a.values };
    let table = sweep(&cfg, a.axis, &values)?;
    for r in &table.rows {
        match (&r.accuracy, &r.error) {
            (Some(acc), _) => println!("{}={}: accuracy {acc:.4}", a.axis, r.value),
            (_, Some(e)) => println!("{}={}: FAILED {e}", a.axis, r.value),
            _ => {}
        }
    }
    if let Some(spread) = table.spread() {
        println!("spread {spread:.4}");
    }
    println!("table -> {}", cfg.output_dir.join(format!("sweep_{}.csv", a.axis)).display());
    if table.failures() == table.rows.len() {
        return Err(Error::invalid("every sweep run failed"));
    }
    Ok(())
}

fn geometry_spec(a: &Geometry) -> Result<(BackboneConfig, RegimeSpec)> {
    let cfg = preset(&a.preset)?;
    let spec = RegimeSpec {
        regime: a.regime,
        layout: Layout::Cxpm,
        n_prompts: a.n_prompts,
        proto_dim: a.proto_dim,
        n_classes: a.classes,
    };
    spec.validate()?;
    Ok((cfg, spec))
}

fn count_params_cmd(a: Geometry) -> Result<()> {
    let (cfg, spec) = geometry_spec(&a)?;
    let c = count_params(&cfg, &spec.tuned_spec());
    println!("total {}", c.total);
    println!("tuned {}", c.tuned);
    println!("ratio_percent {:.4}", c.ratio_percent);
    Ok(())
}

fn estimate_flops_cmd(a: Geometry) -> Result<()> {
    let (cfg, spec) = geometry_spec(&a)?;
    let n = a.seq_len.unwrap_or_else(|| spec.seq_len(cfg.num_patches()));
    println!("seq_len {n}");
    println!("gflops {:.4}", estimate_flops(&cfg, n));
    Ok(())
}

fn export_embeddings_cmd(a: ExportEmbeddings) -> Result<()> {
    let model = TunedModel::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    let ds = load_dataset(&a.data)?;
    let rows = embedding_rows(&model, &ds)?;
    write_embeddings_csv(&a.out, &rows)?;
    println!("{} rows -> {}", rows.len(), a.out.display());
    Ok(())
}

fn report_cmd(a: Report) -> Result<()> {
    let report = collect_report(&a.dir)?;
    if report.rows.is_empty() {
        log::warn!("no metrics found under {}", a.dir.display());
    }
    for (path, why) in &report.missing {
        log::warn!("missing {}: {why}", path.display());
    }
    print!("{}", report.render());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic(a) => make_synthetic_cmd(a),
        Command::BuildCodebook(a) => build_codebook_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::PromptTune(a) => prompt_tune_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::CountParams(a) => count_params_cmd(a),
        Command::EstimateFlops(a) => estimate_flops_cmd(a),
        Command::ExportEmbeddings(a) => export_embeddings_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
