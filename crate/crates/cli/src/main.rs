//! `mvsq`: train, continue, evaluate and inspect multi-view decoding models.
//!
//! Exit codes: 0 success, 2 configuration or contract error, 3 numerical
//! divergence, 4 failed internal-consistency check, 1 anything else.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use config::{ConfigError, Decoder, RunConfig};
use mvdec::diagnostics::{write_bundle, BundleOptions, Probe};
use mvdec::eval::{beam_search_many, bleu, bucket_scores, greedy_decode, sequence_accuracy, write_bucket_csv};
use mvdec::model::{Integration, Seq2Seq, Strategy};
use mvdec::tasks::{generate, read_tsv, write_tsv, Pair};
use mvdec::train::{
    average_checkpoints, continue_conventional, continue_multiview, load_checkpoint, precision_of, save_checkpoint,
    train_from_scratch, train_phase1, write_loss_csv, Checkpoint, TrainRun,
};
use mvdec::{Precision, Scalar};

#[derive(Parser)]
#[command(name = "mvsq", version, about = "Layer-wise multi-view decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; every key is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set d_model=32`. Applied after the named
    /// flags, in order, so the last assignment of a key wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Phase 1: train the conventional model from initialization.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train the configured strategy from initialization instead.
        #[arg(long)]
        from_scratch: bool,
        /// Base name of the written files.
        #[arg(long)]
        name: Option<String>,
    },
    /// Phase 2: continue a phase-1 checkpoint as a multi-view model.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required_unless_present = "control")]
        strategy: Option<String>,
        #[arg(long, default_value = "soft")]
        integration: String,
        /// Keep training the conventional model under the phase-2 treatment.
        #[arg(long, conflicts_with = "strategy")]
        control: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Decode a dataset and report BLEU, sequence accuracy and length buckets.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// TSV dataset; defaults to the configured task's evaluation split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Beam search with this width (also for width 1).
        #[arg(long, conflicts_with = "greedy")]
        beam: Option<usize>,
        /// Batched greedy decoding.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        bucket_width: Option<usize>,
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Run diagnostic probes and write a bundle directory.
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated subset of consumption, grad_paths, cosine, attention.
        #[arg(long, value_delimiter = ',')]
        probes: Option<Vec<String>>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Example used for the cosine and attention maps.
        #[arg(long, default_value_t = 0)]
        example: usize,
        /// Bundle directory; defaults to `<report_dir>/diagnostics`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average the parameters of several checkpoints.
    Average {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        ckpts: Vec<PathBuf>,
    },
    /// Write the configured task's training or evaluation split as TSV.
    ExportData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "train", value_parser = ["train", "eval"])]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs, flags: Vec<String>) -> Result<RunConfig> {
    let overrides: Vec<String> = flags.into_iter().chain(args.set.iter().cloned()).collect();
    Ok(RunConfig::load(args.config.as_deref(), &overrides)?)
}

fn flag<T: std::fmt::Display>(key: &str, v: Option<T>) -> Option<String> {
    v.map(|v| format!("{key}={v}"))
}

fn provenance(command: &str, cfg: &RunConfig, inputs: Value) -> Value {
    json!({
        "tool": "mvsq",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "config": cfg,
        "inputs": inputs,
    })
}

/// `# `-prefixed header lines carrying the provenance record.
fn header(prov: &Value) -> String {
    format!(
        "# mvsq {} {}\n# provenance {}\n",
        env!("CARGO_PKG_VERSION"),
        prov["command"].as_str().unwrap_or(""),
        prov
    )
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn save<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    create_parent(path)?;
    save_checkpoint(ckpt, path)?;
    Ok(())
}

/// Write the artifacts of a training run; divergence becomes an error after
/// the last good state has been saved.
fn finish_run<T: Scalar>(run: TrainRun<T>, cfg: &RunConfig, name: &str, prov: &Value) -> Result<()> {
    let mut csv = header(prov).into_bytes();
    write_loss_csv(&run.curve, &mut csv)?;
    write_text(&cfg.report_dir.join(format!("{name}_loss.csv")), &String::from_utf8(csv)?)?;
    write_json(&cfg.report_dir.join(format!("{name}_config.json")), prov)?;
    let file = if run.divergence.is_some() {
        format!("{name}_last_good.ckpt")
    } else {
        format!("{name}.ckpt")
    };
    let path = cfg.checkpoint_dir.join(file);
    save(&run.checkpoint, &path)?;
    let last = run.curve.last().map(|p| p.loss);
    let ckpt = run.into_checkpoint()?;
    println!(
        "{}: {} steps, final loss {}",
        path.display(),
        ckpt.step,
        last.map_or_else(|| "n/a".to_string(), |l| format!("{l:.4}"))
    );
    Ok(())
}

fn periodic_sink<'a, T: Scalar>(
    dir: &'a Path,
    name: &'a str,
) -> impl FnMut(&Checkpoint<T>) -> mvdec::Result<()> + 'a {
    move |c| {
        fs::create_dir_all(dir)?;
        save_checkpoint(c, dir.join(format!("{name}_step{}.ckpt", c.step)))
    }
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, from_scratch: bool, name: Option<String>) -> Result<()> {
    let name = name.unwrap_or_else(|| {
        if from_scratch {
            format!("scratch_{}_{}", cfg.strategy, cfg.integration)
        } else {
            "phase1".into()
        }
    });
    let prov = provenance("train", cfg, json!({ "from_scratch": from_scratch }));
    let mut sink = periodic_sink::<T>(&cfg.checkpoint_dir, &name);
    let run = if from_scratch {
        train_from_scratch::<T>(&cfg.model(), &cfg.task_spec(), &cfg.train(), &mut sink)?
    } else {
        train_phase1::<T>(&cfg.model(), &cfg.task_spec(), &cfg.train(), &mut sink)?
    };
    finish_run(run, cfg, &name, &prov)
}

fn cmd_finetune<T: Scalar>(
    cfg: &RunConfig,
    ckpt_path: &Path,
    target: Option<(Strategy, Integration)>,
    name: Option<String>,
) -> Result<()> {
    let ckpt: Checkpoint<T> = load_checkpoint(ckpt_path)?;
    let name = name.unwrap_or_else(|| match target {
        Some((s, i)) => format!("phase2_{s}_{i}"),
        None => "control_conventional".into(),
    });
    let prov = provenance(
        "finetune",
        cfg,
        json!({
            "checkpoint": ckpt_path,
            "checkpoint_model": ckpt.config,
            "strategy": target.map(|t| t.0),
            "integration": target.map(|t| t.1),
        }),
    );
    let mut sink = periodic_sink::<T>(&cfg.checkpoint_dir, &name);
    let run = match target {
        Some((s, i)) => {
            let model = ckpt.config.clone().with_strategy(s, i);
            continue_multiview(&ckpt, &model, &cfg.task_spec(), &cfg.train(), &mut sink)?
        }
        None => continue_conventional(&ckpt, &cfg.task_spec(), &cfg.train(), &mut sink)?,
    };
    finish_run(run, cfg, &name, &prov)
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Pair>> {
    Ok(match data {
        Some(p) => read_tsv(p).with_context(|| format!("reading {}", p.display()))?,
        None => generate(&cfg.eval_spec())?,
    })
}

fn cmd_evaluate<T: Scalar>(cfg: &RunConfig, ckpt_path: &Path, data: Option<&Path>, name: &str) -> Result<()> {
    let ckpt: Checkpoint<T> = load_checkpoint(ckpt_path)?;
    let model = Seq2Seq::new(ckpt.config.clone(), ckpt.params)?;
    let pairs = dataset(cfg, data)?;
    let srcs: Vec<Vec<usize>> = pairs.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    let beam = cfg.beam();
    let hyps = match cfg.decoder {
        Decoder::Greedy => greedy_decode(&model, &srcs, beam.max_len)?,
        Decoder::Beam => beam_search_many(&model, &srcs, &beam)?.into_iter().map(|h| h.tokens).collect(),
    };
    let score = bleu(&hyps, &refs, &cfg.bleu())?;
    let acc = sequence_accuracy(&hyps, &refs)?;
    let lens: Vec<usize> = srcs.iter().map(Vec::len).collect();
    let rows = bucket_scores(&lens, &hyps, &refs, &cfg.buckets()?, cfg.bucket_metric, &cfg.bleu())?;

    let prov = provenance(
        "evaluate",
        cfg,
        json!({ "checkpoint": ckpt_path, "checkpoint_model": ckpt.config, "data": data }),
    );
    write_json(
        &cfg.report_dir.join(format!("{name}.json")),
        &json!({
            "provenance": prov,
            "count": pairs.len(),
            "bleu": score.score,
            "bleu_detail": score,
            "sequence_accuracy": acc,
            "buckets": rows,
        }),
    )?;
    let mut csv = header(&prov).into_bytes();
    write_bucket_csv(&rows, &mut csv)?;
    write_text(&cfg.report_dir.join(format!("{name}_buckets.csv")), &String::from_utf8(csv)?)?;
    let mut out = header(&prov);
    for h in &hyps {
        out.push_str(&h.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
        out.push('\n');
    }
    write_text(&cfg.report_dir.join(format!("{name}_hyps.txt")), &out)?;
    println!("n={} bleu={:.2} sequence_accuracy={:.4}", pairs.len(), score.score, acc);
    Ok(())
}

fn cmd_diagnose<T: Scalar>(
    cfg: &RunConfig,
    ckpt_path: &Path,
    probes: Vec<Probe>,
    data: Option<&Path>,
    example: usize,
    out: &Path,
) -> Result<()> {
    let ckpt: Checkpoint<T> = load_checkpoint(ckpt_path)?;
    let model = Seq2Seq::new(ckpt.config.clone(), ckpt.params)?;
    let pairs = dataset(cfg, data)?;
    let opts = BundleOptions {
        probes,
        example,
        seed: cfg.seed,
        ..BundleOptions::default()
    };
    let prov = provenance(
        "diagnose",
        cfg,
        json!({ "checkpoint": ckpt_path, "checkpoint_model": ckpt.config, "data": data, "example": example }),
    );
    let summary = write_bundle(out, &model, &pairs, &opts, prov)?;
    for d in &summary.diffusion {
        if let Some(v) = d.diffusion {
            println!("diffusion layer {}: {v:.4}", d.layer);
        }
    }
    println!("{}: {} files, all checks passed", out.display(), summary.files.len());
    Ok(())
}

fn cmd_average<T: Scalar>(out: &Path, ckpts: &[PathBuf]) -> Result<()> {
    let avg: Checkpoint<T> = average_checkpoints(ckpts)?;
    save(&avg, out)?;
    println!("{}: average of {} checkpoints", out.display(), ckpts.len());
    Ok(())
}

macro_rules! by_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, steps, seed, from_scratch, name } => {
            let flags = [flag("steps", steps), flag("seed", seed)].into_iter().flatten().collect();
            let cfg = load_config(&cfg, flags)?;
            by_precision!(cfg.precision, cmd_train(&cfg, from_scratch, name))
        }
        Command::Finetune { cfg, ckpt, strategy, integration, control, steps, seed, name } => {
            let flags = [flag("steps", steps), flag("seed", seed)].into_iter().flatten().collect();
            let cfg = load_config(&cfg, flags)?;
            let target = match strategy {
                Some(s) => Some((s.parse::<Strategy>()?, integration.parse::<Integration>()?)),
                None if control => None,
                None => unreachable!("clap requires --strategy unless --control"),
            };
            by_precision!(precision_of(&ckpt)?, cmd_finetune(&cfg, &ckpt, target, name))
        }
        Command::Evaluate { cfg, ckpt, data, beam, greedy, bucket_width, name } => {
            let mut flags: Vec<String> = [flag("beam_size", beam), flag("bucket_width", bucket_width)]
                .into_iter()
                .flatten()
                .collect();
            if beam.is_some() {
                flags.push("decoder=beam".into());
            }
            if greedy {
                flags.push("decoder=greedy".into());
            }
            let cfg = load_config(&cfg, flags)?;
            by_precision!(precision_of(&ckpt)?, cmd_evaluate(&cfg, &ckpt, data.as_deref(), &name))
        }
        Command::Diagnose { cfg, ckpt, probes, data, example, out } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let probes = match probes {
                Some(list) => list.iter().map(|p| p.trim().parse()).collect::<mvdec::Result<Vec<Probe>>>()?,
                None => Probe::ALL.to_vec(),
            };
            let out = out.unwrap_or_else(|| cfg.report_dir.join("diagnostics"));
            by_precision!(precision_of(&ckpt)?, cmd_diagnose(&cfg, &ckpt, probes, data.as_deref(), example, &out))
        }
        Command::Average { out, ckpts } => by_precision!(precision_of(&ckpts[0])?, cmd_average(&out, &ckpts)),
        Command::ExportData { cfg, split, out } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let spec = if split == "eval" { cfg.eval_spec() } else { cfg.task_spec() };
            let pairs = generate(&spec)?;
            create_parent(&out)?;
            write_tsv(&out, &pairs)?;
            let mut side = out.clone().into_os_string();
            side.push(".provenance.json");
            write_json(Path::new(&side), &provenance("export-data", &cfg, json!({ "split": split, "spec": spec })))?;
            println!("{}: {} pairs", out.display(), pairs.len());
            Ok(())
        }
        Command::Config { cfg } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", serde_json::to_string_pretty(&cfg)?)?;
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<mvdec::Error>() {
            return match e {
                mvdec::Error::Diverged { .. } | mvdec::Error::NonFinite(_) => 3,
                mvdec::Error::Consistency(_) => 4,
                mvdec::Error::Io(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("MVSQ_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(ConfigError(format!("MVSQ_THREADS must be a positive integer, got `{v}`")).into()),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads_from_env().and_then(|n| mvdec::par::with_threads(n, || run(cli)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
