use clap::{Args, Parser, Subcommand};
use cmc::config::{requested_threads, substream, Config};
use cmc::contrastive::ContrastiveConfig;
use cmc::data::{generate_synthetic, make_splits, ChipDataset, SynthConfig};
use cmc::error::{Error, Result};
use cmc::eval::{
    append_ledger, run_finetune, run_linear_probe, write_report_json, FinetuneConfig,
    ProbeConfig, ReportRow, LEDGER_HEADER,
};
use cmc::nn::{CmcModel, EncoderConfig, TaskMode};
use cmc::optim::MultiStepSchedule;
use cmc::train::{pretrain, supervised_init, PretrainConfig, SupervisedInitConfig};
use cmc::views::{pca_fit, ViewSpec};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "cmc", about = "Contrastive multiview pretraining on image chips", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set epochs=5 (wins over --config).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path)?,
            None => Config::new(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled chip dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit a PCA view spec from randomly sampled pixels.
    PcaFit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 144)]
        pixels_per_chip: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Self-supervised pretraining of the two-branch model.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = ["lab", "bands", "pca"])]
        views: String,
        #[arg(long)]
        out: PathBuf,
        /// PCA spec file from pca-fit (required with --views pca).
        #[arg(long)]
        pca_spec: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Linear probe on frozen features.
    Probe {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Full finetuning of encoders plus head.
    Finetune {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Group a results ledger by pretraining source and protocol.
    Report {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pretraining run directory (holds checkpoint/ and view_spec.json).
    #[arg(long, conflicts_with_all = ["random_init", "supervised_init"])]
    checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialized encoder.
    #[arg(long, conflicts_with = "supervised_init")]
    random_init: bool,
    /// Train a label-supervised encoder first, then evaluate it.
    #[arg(long)]
    supervised_init: bool,
    /// View construction when no checkpoint provides one.
    #[arg(long, value_parser = ["lab", "bands", "pca"])]
    views: Option<String>,
    #[arg(long)]
    pca_spec: Option<PathBuf>,
    #[arg(long, default_value = "default", value_parser = ["default", "mlrsnet", "aid"])]
    preset: String,
    /// CSV results ledger to append to.
    #[arg(long)]
    ledger: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version exit 0; anything else is a usage error
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    requested_threads()?;
    match cli.command {
        Command::Synth { out, cfg } => cmd_synth(&out, &cfg.resolve()?),
        Command::PcaFit { dataset, out, pixels_per_chip, seed } => {
            cmd_pca_fit(&dataset, &out, pixels_per_chip, seed)
        }
        Command::Pretrain { dataset, views, out, pca_spec, epochs, k, tau, seed, cfg } => {
            let mut cfg = cfg.resolve()?;
            if let Some(v) = epochs {
                cfg.set("epochs", &v.to_string());
            }
            if let Some(v) = k {
                cfg.set("k", &v.to_string());
            }
            if let Some(v) = tau {
                cfg.set("tau", &v.to_string());
            }
            if let Some(v) = seed {
                cfg.set("seed", &v.to_string());
            }
            cmd_pretrain(&dataset, &views, &out, pca_spec.as_deref(), &cfg)
        }
        Command::Probe { eval } => cmd_eval(eval, Protocol::Probe),
        Command::Finetune { eval } => cmd_eval(eval, Protocol::Finetune),
        Command::Report { ledger, out } => cmd_report(&ledger, &out),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn snapshot(cfg: &Config, out: &Path) -> Result<()> {
    cfg.save(&out.join("resolved.cfg"))
}

fn cmd_synth(out: &Path, cfg: &Config) -> Result<()> {
    let task = match cfg.get("task").unwrap_or("single") {
        "single" | "single_label" => TaskMode::SingleLabel,
        "multi" | "multi_label" => TaskMode::MultiLabel,
        other => return Err(Error::Config(format!("unknown task {other:?}"))),
    };
    let synth = SynthConfig {
        n: cfg.parse_or("n", 200)?,
        num_classes: cfg.parse_or("classes", 4)?,
        height: cfg.parse_or("height", 32)?,
        width: cfg.parse_or("width", 32)?,
        task,
        noise: cfg.parse_or("noise", 0.05)?,
        rgb_uninformative: cfg.parse_or("rgb_uninformative", false)?,
    };
    let seed: u64 = cfg.parse_or("seed", 0)?;
    let train_frac: f64 = cfg.parse_or("train_frac", 0.7)?;
    let val_frac: f64 = cfg.parse_or("val_frac", 0.1)?;
    ensure_dir(out)?;
    let (meta, chips, labels) = generate_synthetic(&synth, &mut substream(seed, "synth", 0))?;
    let splits = make_splits(synth.n, train_frac, val_frac, seed)?;
    ChipDataset::create(out, meta, &chips, &labels, splits)?;
    let mut resolved = cfg.clone();
    resolved.set_default("n", &synth.n.to_string());
    resolved.set_default("seed", &seed.to_string());
    snapshot(&resolved, out)?;
    log::info!("wrote {} chips to {}", synth.n, out.display());
    Ok(())
}

fn cmd_pca_fit(dataset: &Path, out: &Path, pixels_per_chip: usize, seed: u64) -> Result<()> {
    let ds = ChipDataset::open(dataset)?;
    let idx = if ds.splits.train.is_empty() {
        (0..ds.len()).collect::<Vec<_>>()
    } else {
        ds.splits.train.clone()
    };
    let chips: Vec<_> = idx.iter().map(|&i| ds.chip(i)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&_> = chips.iter().collect();
    let basis = pca_fit(&refs, pixels_per_chip, &mut substream(seed, "pca", 0))?;
    let spec = ViewSpec::pca(basis)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    spec.save(out)?;
    log::info!("wrote PCA view spec to {}", out.display());
    Ok(())
}

/// Build a view spec for a dataset from a views name.
fn build_spec(
    ds: &ChipDataset,
    views: &str,
    pca_spec: Option<&Path>,
) -> Result<ViewSpec> {
    match views {
        "lab" => {
            let rgb = ds
                .meta
                .rgb_bands()
                .ok_or_else(|| Error::Config("dataset has no RGB-mapped bands".into()))?;
            Ok(ViewSpec::Lab { rgb_bands: rgb })
        }
        "bands" => {
            let idx = if ds.splits.train.is_empty() {
                (0..ds.len()).collect::<Vec<_>>()
            } else {
                ds.splits.train.clone()
            };
            let (mean, std) = ds.band_stats(&idx)?;
            ViewSpec::fixed_bands(&ds.meta.band_names, mean, std)
        }
        "pca" => {
            let path = pca_spec
                .ok_or_else(|| Error::Config("--views pca requires --pca-spec".into()))?;
            ViewSpec::load(path)
        }
        other => Err(Error::Config(format!("unknown views {other:?}"))),
    }
}

fn parse_widths(cfg: &Config, key: &str, default: &[usize]) -> Result<Vec<usize>> {
    match cfg.get(key) {
        None => Ok(default.to_vec()),
        Some(v) => v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("cannot parse {key}={v:?}")))
            })
            .collect(),
    }
}

fn pretrain_config(cfg: &Config) -> Result<PretrainConfig> {
    let d = PretrainConfig::default();
    let milestones = match cfg.get("milestones") {
        None => d.schedule.milestones.clone(),
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad milestones {v:?}"))))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut optimizer = d.optimizer.clone();
    optimizer.lr = cfg.parse_or("lr", optimizer.lr)?;
    optimizer.weight_decay = cfg.parse_or("weight_decay", optimizer.weight_decay)?;
    optimizer.momentum = cfg.parse_or("momentum", optimizer.momentum)?;
    Ok(PretrainConfig {
        epochs: cfg.parse_or("epochs", d.epochs)?,
        batch_size: cfg.parse_or("batch_size", d.batch_size)?,
        chip_size: cfg.parse_or("chip_size", d.chip_size)?,
        optimizer,
        schedule: MultiStepSchedule::new(milestones, cfg.parse_or("lr_factor", 10.0)?)?,
        contrastive: ContrastiveConfig {
            k: cfg.parse_or("k", d.contrastive.k)?,
            tau: cfg.parse_or("tau", d.contrastive.tau)?,
            symmetric: cfg.parse_or("symmetric", d.contrastive.symmetric)?,
            bank_momentum: cfg.parse_or("bank_momentum", d.contrastive.bank_momentum)?,
        },
        encoder_widths: parse_widths(cfg, "encoder_widths", &d.encoder_widths)?,
        embedding_dim: cfg.parse_or("embedding_dim", d.embedding_dim)?,
        d_h: cfg.parse_or("d_h", d.d_h)?,
        seed: cfg.parse_or("seed", d.seed)?,
        checkpoint_every: cfg.parse_or("checkpoint_every", d.checkpoint_every)?,
    })
}

fn cmd_pretrain(
    dataset: &Path,
    views: &str,
    out: &Path,
    pca_spec: Option<&Path>,
    cfg: &Config,
) -> Result<()> {
    let ds = ChipDataset::open(dataset)?;
    let pcfg = pretrain_config(cfg)?;
    ensure_dir(out)?;
    let spec_path = out.join("view_spec.json");
    let spec = if spec_path.exists() {
        // resuming: reuse the view spec fitted at run start
        ViewSpec::load(&spec_path)?
    } else {
        let spec = build_spec(&ds, views, pca_spec)?;
        spec.save(&spec_path)?;
        spec
    };
    let mut resolved = cfg.clone();
    resolved.set_default("epochs", &pcfg.epochs.to_string());
    resolved.set_default("k", &pcfg.contrastive.k.to_string());
    resolved.set_default("tau", &pcfg.contrastive.tau.to_string());
    resolved.set_default("seed", &pcfg.seed.to_string());
    resolved.set("views", views);
    snapshot(&resolved, out)?;
    let outcome = pretrain(&ds, &spec, &pcfg, out)?;
    let last = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
    log::info!("pretraining finished: {} epochs, final loss {last:.4}", outcome.epoch_losses.len());
    Ok(())
}

enum Protocol {
    Probe,
    Finetune,
}

fn cmd_eval(args: EvalArgs, protocol: Protocol) -> Result<()> {
    let ds = ChipDataset::open(&args.dataset)?;
    let cfg = args.cfg.resolve()?;
    let seed: u64 = args.seed.unwrap_or(cfg.parse_or("seed", 0)?);
    ensure_dir(&args.out)?;

    let (mut model, spec, source, n_pretrain) = if let Some(run_dir) = &args.checkpoint {
        let (model, _manifest) = CmcModel::load(&run_dir.join("checkpoint"))?;
        let spec = ViewSpec::load(&run_dir.join("view_spec.json"))?;
        let n = cmc::tensor::Tensor::<f32>::load(&run_dir.join("checkpoint/bank1.bin"))
            .map(|b| b.shape()[0])
            .unwrap_or(0);
        (model, spec, "cmc".to_string(), n)
    } else if args.supervised_init {
        let views = args.views.as_deref().unwrap_or("bands");
        let spec = build_spec(&ds, views, args.pca_spec.as_deref())?;
        let d = SupervisedInitConfig::default();
        let sup = SupervisedInitConfig {
            epochs: cfg.parse_or("sup_epochs", d.epochs)?,
            batch_size: cfg.parse_or("sup_batch_size", d.batch_size)?,
            chip_size: cfg.parse_or("chip_size", d.chip_size)?,
            encoder_widths: parse_widths(&cfg, "encoder_widths", &d.encoder_widths)?,
            embedding_dim: cfg.parse_or("embedding_dim", d.embedding_dim)?,
            d_h: cfg.parse_or("d_h", d.d_h)?,
            seed,
            ..d
        };
        let outcome = supervised_init(&ds, &spec, &sup, &args.out.join("supervised"))?;
        (outcome.model, spec, "supervised".to_string(), ds.splits.train.len())
    } else if args.random_init {
        let views = args.views.as_deref().unwrap_or("bands");
        let spec = build_spec(&ds, views, args.pca_spec.as_deref())?;
        let (c1, c2) = spec.view_channels();
        let widths = parse_widths(&cfg, "encoder_widths", &[16, 32, 64, 64])?;
        let enc = |c| EncoderConfig {
            in_channels: c,
            stage_widths: widths.clone(),
            kernel_size: 3,
            embedding_dim: cfg.parse_or("embedding_dim", 64).unwrap_or(64),
            ..EncoderConfig::new(c)
        };
        let d_h = cfg.parse_or("d_h", 32)?;
        let model = CmcModel::new(enc(c1), enc(c2), d_h, &mut substream(seed, "init", 0))?;
        (model, spec, "random".to_string(), 0)
    } else {
        return Err(Error::Config(
            "one of --checkpoint, --random-init, --supervised-init is required".into(),
        ));
    };

    let chip_size: usize = cfg.parse_or("chip_size", 32)?;
    let (protocol_name, outcome) = match protocol {
        Protocol::Probe => {
            let mut pcfg = ProbeConfig::preset(&args.preset)?;
            pcfg.epochs = cfg.parse_or("epochs", pcfg.epochs)?;
            pcfg.batch_size = cfg.parse_or("batch_size", pcfg.batch_size)?;
            pcfg.chip_size = chip_size;
            pcfg.seed = seed;
            ("probe", run_linear_probe(&mut model, &ds, &spec, &pcfg)?)
        }
        Protocol::Finetune => {
            let mut fcfg = FinetuneConfig::default();
            fcfg.epochs = cfg.parse_or("epochs", fcfg.epochs)?;
            fcfg.batch_size = cfg.parse_or("batch_size", fcfg.batch_size)?;
            fcfg.chip_size = chip_size;
            fcfg.seed = seed;
            ("finetune", run_finetune(&mut model, &ds, &spec, &fcfg)?)
        }
    };

    let task = match ds.meta.task {
        TaskMode::SingleLabel => "single_label",
        TaskMode::MultiLabel => "multi_label",
    };
    let row = ReportRow {
        task: task.into(),
        pretrain_source: source,
        views: spec.id().into(),
        n_pretrain,
        protocol: protocol_name.into(),
        metric: outcome.metric.clone(),
        value: outcome.value,
        seed,
    };
    write_report_json(&args.out.join("report.json"), std::slice::from_ref(&row))?;
    if let Some(ledger) = &args.ledger {
        append_ledger(ledger, std::slice::from_ref(&row))?;
    }
    snapshot(&cfg, &args.out)?;
    println!("{} {} = {:.4}", protocol_name, outcome.metric, outcome.value);
    Ok(())
}

fn cmd_report(ledger: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(ledger).map_err(|e| Error::io(ledger, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(ledger, "empty ledger"))?;
    if header != LEDGER_HEADER {
        return Err(Error::format(ledger, format!("unexpected header {header:?}")));
    }
    // group -> values, keyed by (source, views, n_pretrain, protocol, metric)
    let mut groups: std::collections::BTreeMap<(String, String, usize, String, String), Vec<f64>> =
        Default::default();
    let mut total = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::format(ledger, format!("line {}: expected 8 fields", lineno + 2)));
        }
        let n_pretrain: usize = fields[3]
            .parse()
            .map_err(|_| Error::format(ledger, format!("line {}: bad n_pretrain", lineno + 2)))?;
        let value: f64 = fields[6]
            .parse()
            .map_err(|_| Error::format(ledger, format!("line {}: bad value", lineno + 2)))?;
        groups
            .entry((
                fields[1].to_string(),
                fields[2].to_string(),
                n_pretrain,
                fields[4].to_string(),
                fields[5].to_string(),
            ))
            .or_default()
            .push(value);
        total += 1;
    }
    ensure_dir(out)?;
    let path = out.join("report.csv");
    let mut body =
        String::from("pretrain_source,views,n_pretrain,protocol,metric,runs,median,mean,min,max\n");
    let mut counted = 0usize;
    for ((source, views, n_pretrain, protocol, metric), mut values) in groups {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let runs = values.len();
        counted += runs;
        let median = if runs % 2 == 1 {
            values[runs / 2]
        } else {
            0.5 * (values[runs / 2 - 1] + values[runs / 2])
        };
        let mean = values.iter().sum::<f64>() / runs as f64;
        body.push_str(&format!(
            "{source},{views},{n_pretrain},{protocol},{metric},{runs},{median},{mean},{},{}\n",
            values[0],
            values[runs - 1]
        ));
    }
    assert_eq!(counted, total);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    log::info!("grouped {total} ledger rows into {}", path.display());
    Ok(())
}
