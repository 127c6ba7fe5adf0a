//! `diffcap`: toy data generation, training, sampling, evaluation and
//! schedule inspection driven by one TOML run configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric divergence.

mod manifest;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffcap_core::config::RunConfig;
use diffcap_core::datasets::{
    export_levir, generate_toy_dataset, load_levir_cc, load_references, SPLITS,
};
use diffcap_core::metrics::evaluate;
use diffcap_core::model::{BackboneKind, Checkpoint};
use diffcap_core::pipeline::{build_backbone, init_run_params, training_examples};
use diffcap_core::sample::{trace_csv, NoiseMode, SampleOptions, Sampler};
use diffcap_core::textspace::tokenize;
use diffcap_core::train::{planned_steps, train, LossBreakdown, StepRecord};
use diffcap_core::vision::{Backbone, Image, ResNet};
use diffcap_core::Error;
use log::{info, warn};
use serde_json::json;

use manifest::RunManifest;

const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "diffcap", version, about = "Diffusion-based change captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set denoiser.ssa_depth=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(match &self.config {
            Some(path) => RunConfig::load(path, &self.overrides)?,
            None => RunConfig::from_toml_with("", &self.overrides)?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy dataset in the LEVIR-CC layout.
    Datagen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split; writes a JSONL log, checkpoints and metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root containing the caption index.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption a dataset split or a single image pair with a checkpoint.
    Sample(SampleArgs),
    /// Score a captions file against the reference captions.
    Eval {
        /// Tab-separated `pair_id<TAB>caption` lines.
        #[arg(long)]
        candidates: PathBuf,
        /// Dataset root containing the caption index.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the noise schedule as CSV.
    InspectSchedule {
        #[command(flatten)]
        config: ConfigArgs,
        /// CSV path, one row per step.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root; captions every pair of `--split`.
    #[arg(long, conflicts_with = "pair", required_unless_present = "pair")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// A single before/after image pair instead of a dataset split.
    #[arg(long, num_args = 2, value_names = ["BEFORE", "AFTER"])]
    pair: Option<Vec<PathBuf>>,
    /// Weights archive, needed when the checkpoint uses the imported backbone.
    #[arg(long)]
    backbone_weights: Option<PathBuf>,
    /// Captions file, `pair_id<TAB>caption` per line.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add `Σ(t)·ε` instead of `sqrt(Σ(t))·ε` at each reverse step.
    #[arg(long, conflicts_with = "no_noise")]
    strict_variance: bool,
    /// Deterministic chain: posterior means only.
    #[arg(long)]
    no_noise: bool,
    /// Snap each predicted `x_0` to the nearest embedding rows.
    #[arg(long)]
    clamp: bool,
    /// Directory for per-pair CSVs of latent norms at every step.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(
            Error::Divergence { .. } | Error::SamplerDiverged { .. } | Error::NonFinite { .. },
        ) => 4,
        Some(
            Error::Data(_)
            | Error::MissingDataset(_)
            | Error::EmptyCorpus
            | Error::TokenOutOfRange { .. }
            | Error::Image(_)
            | Error::Archive(_)
            | Error::Io { .. }
            | Error::Json(_),
        ) => 3,
        Some(_) => 2,
        None if err
            .chain()
            .any(|e| e.downcast_ref::<std::io::Error>().is_some()) =>
        {
            3
        }
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.command {
        Command::Datagen { config, out } => datagen(&config, &out, args),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out, args),
        Command::Sample(s) => sample_cmd(&s, args),
        Command::Eval {
            candidates,
            data,
            split,
            out,
        } => eval_cmd(&candidates, &data, &split, &out, args),
        Command::InspectSchedule { config, out } => inspect_schedule(&config, &out, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Manifest path for a single-file artifact: `<file>.manifest.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn datagen(config: &ConfigArgs, out: &Path, args: Vec<String>) -> Result<()> {
    let cfg = config.load()?;
    let dataset = generate_toy_dataset(&cfg.data.toy)?;
    create_dir(out)?;
    export_levir(&dataset, out)?;
    let mut m = RunManifest::new("datagen", args).with_config(&cfg);
    m.seed = Some(cfg.data.toy.seed);
    m.output("dataset", out, &[MANIFEST])?;
    m.write(&out.join(MANIFEST))?;
    info!(
        "wrote {} / {} / {} pairs to {}",
        dataset.train.pairs.len(),
        dataset.val.pairs.len(),
        dataset.test.pairs.len(),
        out.display()
    );
    Ok(())
}

fn mean_loss(records: &[StepRecord]) -> LossBreakdown {
    let n = records.len().max(1) as f64;
    let mut acc = LossBreakdown {
        l_t: 0.0,
        l_mse: 0.0,
        l_round: 0.0,
        total: 0.0,
    };
    for r in records {
        acc.l_t += r.loss.l_t / n;
        acc.l_mse += r.loss.l_mse / n;
        acc.l_round += r.loss.l_round / n;
        acc.total += r.loss.total / n;
    }
    acc
}

fn train_cmd(config: &ConfigArgs, data: &Path, out: &Path, args: Vec<String>) -> Result<()> {
    let cfg = config.load()?;
    let (dataset, vocab) = load_levir_cc(data)?;
    let backbone = build_backbone(&cfg.data)?;
    let sched = cfg.schedule.build()?;
    let params = init_run_params(&cfg, vocab.len())?;
    let examples = training_examples(
        &dataset.train,
        &vocab,
        cfg.denoiser.seq_len,
        &backbone,
        &params,
        cfg.train.finetune_backbone,
    )?;
    let total = planned_steps(examples.len(), &cfg.train);
    info!(
        "training on {} captions of {} pairs, vocabulary {}, {total} steps",
        examples.len(),
        dataset.train.pairs.len(),
        vocab.len()
    );

    create_dir(out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    let log_path = out.join("log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let checkpoint =
        |params: &diffcap_core::params::ParamStore, step, epoch, dir: &Path| -> Result<()> {
            Checkpoint::new(
                params.clone(),
                vocab.clone(),
                cfg.schedule.clone(),
                cfg.denoiser.clone(),
                cfg.data.backbone,
                cfg.content_hash(),
                step,
                epoch,
            )?
            .save(dir)?;
            Ok(())
        };
    let report_every = (total / 20).max(1);
    let mut on_step = |rec: &StepRecord,
                       params: &diffcap_core::params::ParamStore|
     -> diffcap_core::Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(log, "{line}").map_err(|e| Error::Data(format!("writing log: {e}")))?;
        if rec.step.is_multiple_of(report_every) || rec.step == total {
            info!(
                "step {}/{total} epoch {} total {:.5} (l_T {:.5}, l_mse {:.5}, l_round {:.5})",
                rec.step, rec.epoch, rec.loss.total, rec.loss.l_t, rec.loss.l_mse, rec.loss.l_round
            );
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && rec.step.is_multiple_of(every) {
            let dir = out
                .join("checkpoints")
                .join(format!("step-{:06}", rec.step));
            checkpoint(params, rec.step, rec.epoch, &dir)
                .map_err(|e| Error::Data(format!("{e:#}")))?;
        }
        Ok(())
    };
    let outcome = train(
        &examples,
        &cfg.train,
        &cfg.denoiser,
        &sched,
        params,
        &mut on_step,
    );
    log.flush()?;
    let outcome = outcome?;

    let last = outcome.records.last().context("training ran zero steps")?;
    let final_dir = out.join("checkpoint");
    checkpoint(&outcome.params, last.step, last.epoch, &final_dir)?;
    let tail = &outcome.records[outcome.records.len().saturating_sub(50)..];
    let metrics = json!({
        "steps": last.step,
        "epochs": last.epoch,
        "final": last,
        "mean_last_50": mean_loss(tail),
        "train_pairs": dataset.train.pairs.len(),
        "train_captions": examples.len(),
        "vocab_size": vocab.len(),
        "ssa_depth": cfg.denoiser.ssa_depth,
    });
    write_file(
        &out.join("metrics.json"),
        &(serde_json::to_string_pretty(&metrics)? + "\n"),
    )?;

    let mut m = RunManifest::new("train", args).with_config(&cfg);
    m.seed = Some(cfg.train.seed);
    m.input("data", data, &[MANIFEST])?;
    if let Some(w) = &cfg.data.backbone_weights {
        m.input("backbone_weights", w, &[])?;
    }
    m.output("log", &log_path, &[])?;
    m.output("checkpoint", &final_dir, &[])?;
    m.output("metrics", &out.join("metrics.json"), &[])?;
    m.write(&out.join(MANIFEST))?;
    info!("final checkpoint in {}", final_dir.display());
    Ok(())
}

fn sample_cmd(s: &SampleArgs, args: Vec<String>) -> Result<()> {
    let ck = Checkpoint::load(&s.checkpoint)?;
    let sched = ck.manifest.schedule.build()?;
    let backbone = match ck.manifest.backbone {
        BackboneKind::Toy => Backbone::Toy,
        BackboneKind::Resnet => {
            let path = s.backbone_weights.as_ref().ok_or_else(|| {
                Error::Config("checkpoint uses the resnet backbone; pass --backbone-weights".into())
            })?;
            Backbone::ResNet(Box::new(ResNet::load(path)?))
        }
    };
    let noise = if s.no_noise {
        NoiseMode::Off
    } else if s.strict_variance {
        NoiseMode::StrictLiteral
    } else {
        NoiseMode::Ancestral
    };
    let sampler = Sampler {
        params: &ck.params,
        cfg: &ck.manifest.denoiser,
        sched: &sched,
        vocab: &ck.vocab,
        backbone: &backbone,
        options: SampleOptions {
            noise,
            clamp: s.clamp,
            trace: s.trace.is_some(),
        },
    };

    let mut m = RunManifest::new("sample", args);
    m.seed = Some(s.seed);
    m.input("checkpoint", &s.checkpoint, &[])?;
    let pairs: Vec<(String, Image, Image)> = match (&s.data, &s.pair) {
        (Some(data), _) => {
            if !SPLITS.contains(&s.split.as_str()) {
                return Err(Error::Config(format!("unknown split `{}`", s.split)).into());
            }
            let (dataset, _) = load_levir_cc(data)?;
            m.input("data", data, &[MANIFEST])?;
            let split = dataset.split(&s.split).expect("split name checked");
            split
                .pairs
                .iter()
                .map(|p| (p.id.clone(), p.before.clone(), p.after.clone()))
                .collect()
        }
        (None, Some(pair)) => {
            m.input("before", &pair[0], &[])?;
            m.input("after", &pair[1], &[])?;
            let id = pair[0]
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "pair".into());
            vec![(id, Image::load_png(&pair[0])?, Image::load_png(&pair[1])?)]
        }
        (None, None) => bail!(Error::Config("pass --data or --pair".into())),
    };
    let refs: Vec<(&str, &Image, &Image)> =
        pairs.iter().map(|(id, b, a)| (id.as_str(), b, a)).collect();
    let outputs = sampler.batch_sample(&refs, s.seed)?;

    let mut text = String::new();
    for ((id, _, _), o) in pairs.iter().zip(&outputs) {
        text.push_str(&format!("{id}\t{}\n", o.caption));
    }
    write_file(&s.out, &text)?;
    m.output("captions", &s.out, &[])?;
    if let Some(dir) = &s.trace {
        create_dir(dir)?;
        for ((id, _, _), o) in pairs.iter().zip(&outputs) {
            if let Some(rows) = &o.trace {
                write_file(&dir.join(format!("{id}.csv")), &trace_csv(rows))?;
            }
        }
        m.output("trace", dir, &[])?;
    }
    m.write(&sidecar(&s.out))?;
    info!("wrote {} captions to {}", outputs.len(), s.out.display());
    Ok(())
}

/// Parse `pair_id<TAB>caption` lines; blank lines are skipped.
fn read_candidates(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected `pair_id<TAB>caption`",
                path.display(),
                lineno + 1
            ))
        })?;
        if out
            .insert(id.trim().to_string(), tokenize(caption))
            .is_some()
        {
            return Err(Error::Data(format!(
                "{}:{}: duplicate pair id `{id}`",
                path.display(),
                lineno + 1
            ))
            .into());
        }
    }
    Ok(out)
}

fn eval_cmd(
    candidates: &Path,
    data: &Path,
    split: &str,
    out: &Path,
    args: Vec<String>,
) -> Result<()> {
    let mut cands = read_candidates(candidates)?;
    let refs = load_references(data, split)?;
    let known: HashSet<String> = refs.iter().map(|(id, _)| id.clone()).collect();
    if let Some(unknown) = cands.keys().find(|id| !known.contains(*id)) {
        return Err(Error::Data(format!(
            "candidate id `{unknown}` is not in split `{split}`"
        ))
        .into());
    }
    let mut hyp = Vec::new();
    let mut gold = Vec::new();
    for (id, captions) in refs {
        if let Some(c) = cands.remove(&id) {
            hyp.push(c);
            gold.push(captions);
        }
    }
    if hyp.len() < known.len() {
        warn!(
            "{} of {} pairs in `{split}` have no candidate; scoring the rest",
            known.len() - hyp.len(),
            known.len()
        );
    }
    if hyp.is_empty() {
        return Err(Error::Data("no candidates to score".into()).into());
    }
    let report = evaluate(&hyp, &gold)?;
    write_file(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let mut m = RunManifest::new("eval", args);
    m.input("candidates", candidates, &[])?;
    m.input("data", data, &[MANIFEST])?;
    m.output("report", out, &[])?;
    m.write(&sidecar(out))?;
    info!(
        "BLEU-4 {:.4}  ROUGE-L {:.4}  over {} pairs",
        report.bleu4, report.rouge_l, report.n_items
    );
    Ok(())
}

fn inspect_schedule(config: &ConfigArgs, out: &Path, args: Vec<String>) -> Result<()> {
    let cfg = config.load()?;
    let sched = cfg.schedule.build()?;
    write_file(out, &sched.to_csv())?;
    let mut m = RunManifest::new("inspect-schedule", args).with_config(&cfg);
    m.output("schedule", out, &[])?;
    m.write(&sidecar(out))?;
    Ok(())
}
