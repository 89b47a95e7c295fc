//! `vidfm` command-line driver: corpus generation, both pretraining stages,
//! LiT tuning, the adaptation regimes, evaluations, the ablation grid, and
//! metric reporting. Every subcommand accepts `--config` / `--seed` /
//! `--set k=v` and is deterministic given them.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use vidfm::adapt::{
    adapt_train, lit_tune, retrieval_eval, task_labels, templates_from_config,
    zero_shot_classify_task, AdaptHyper, AdaptRegime, ProbeKind, TaskKind,
};
use vidfm::checkpoint::Checkpoint;
use vidfm::config::Config;
use vidfm::corpus::{self, Corpus, VideoClip};
use vidfm::metrics::{read_records, write_records, MetricRecord};
use vidfm::stage1::{
    build_vocab, embed_texts, embed_videos, train_stage1, vocab_from_checkpoint, Stage1Config,
};
use vidfm::stage2::train_stage2;
use vidfm::text::Vocab;

#[derive(Parser)]
#[command(name = "vidfm", version, about = "Two-stage video encoder pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value config file (include-aware); layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Inline overrides, repeatable: --set stage1.total_steps=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Base preset: `toy` (desk scale) or `paper` (reference scale).
    #[arg(long, default_value = "toy")]
    preset: String,
}

impl Common {
    fn build_config(&self) -> anyhow::Result<Config> {
        let mut cfg = match self.preset.as_str() {
            "toy" => Config::toy_defaults(),
            "paper" => Config::paper_defaults(),
            other => bail!("unknown preset `{other}` (expected `toy` or `paper`)"),
        };
        if let Some(path) = &self.config {
            let file = Config::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?;
            for (k, v) in file.iter() {
                cfg.set(k, v);
            }
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set wants KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim());
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", seed.to_string());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video-caption corpus directory.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Output directory (clips + manifest.jsonl + spec.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics: duration/caption histograms, plus caption-video
    /// alignment when a checkpoint with towers is given.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where to write metric records.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Stage-1 video-text contrastive pretraining (AGD over corpora).
    PretrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Training corpus directories (each one AGD corpus), repeatable.
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        eval_corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage-2 masked distillation against a frozen stage-1 teacher.
    PretrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        eval_corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// LiT: lock a video encoder, tune the text tower + MAP head.
    LitTune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint supplying the locked video encoder.
        #[arg(long)]
        video_checkpoint: PathBuf,
        /// Stage-1 checkpoint supplying text tower + MAP head init.
        #[arg(long)]
        stage1_checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        eval_corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Frozen-backbone probing (MAP / MLAP / linear-after-map head).
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// appearance | motion
        #[arg(long, default_value = "appearance")]
        task: String,
        /// map | mlap | linear-after-map
        #[arg(long, default_value = "map")]
        kind: String,
        #[arg(long, default_value = "0.75")]
        train_frac: f64,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Low-rank adapter tuning (adapters + MAP head train; base frozen).
    Lora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "appearance")]
        task: String,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value = "0.75")]
        train_frac: f64,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// End-to-end finetuning (backbone + head all trainable).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "appearance")]
        task: String,
        #[arg(long, default_value = "0.75")]
        train_frac: f64,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Zero-shot paired retrieval over a corpus (R@1/R@5 both directions).
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        gallery: Option<usize>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Zero-shot classification via prompt templates.
    EvalZeroshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "appearance")]
        task: String,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Ablation grids: masking (pattern x ratio), shuffle, global-distill.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// masking | shuffle | global-distill
        #[arg(long)]
        axis: String,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Probe corpus (labeled tasks); defaults to `corpus`.
        #[arg(long)]
        probe_corpus: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Summarize metric records as plain-text tables (optional SVG bars).
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long = "metrics", required = true)]
        metrics: Vec<PathBuf>,
        /// Write one SVG histogram per (task, regime, metric) group here.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    corpus::load_dir(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_task(s: &str) -> anyhow::Result<TaskKind> {
    match s {
        "appearance" => Ok(TaskKind::Appearance),
        "motion" => Ok(TaskKind::Motion),
        other => bail!("unknown task `{other}` (expected appearance|motion)"),
    }
}

fn parse_kind(s: &str) -> anyhow::Result<ProbeKind> {
    match s {
        "map" => Ok(ProbeKind::Map),
        "mlap" => Ok(ProbeKind::Mlap),
        "linear-after-map" => Ok(ProbeKind::LinearAfterMap),
        other => bail!("unknown probe kind `{other}`"),
    }
}

/// Deterministic train/eval split: shuffled indices by seed.
fn split_indices(n: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = vidfm::util::shuffle_indices(&mut vidfm::util::rng_from(seed), n);
    let cut = ((n as f64) * train_frac).round() as usize;
    (order[..cut].to_vec(), order[cut..].to_vec())
}

fn extra_vocab_for(cfg: &Config, corpora: &[&Corpus]) -> Vec<String> {
    let mut extra: Vec<String> = templates_from_config(cfg)
        .iter()
        .map(|t| t.replace("{}", "shape"))
        .collect();
    for c in corpora {
        if let Some(spec) = &c.spec {
            extra.extend(spec.word_pool());
        }
    }
    extra
}

fn vocab_for_eval(ck: &Checkpoint, cfg: &Config, corpora: &[&Corpus]) -> Vocab {
    vocab_from_checkpoint(ck)
        .unwrap_or_else(|_| build_vocab(corpora, &extra_vocab_for(cfg, corpora)))
}

fn emit(metrics_path: Option<&Path>, records: &[MetricRecord]) -> anyhow::Result<()> {
    for r in records {
        println!("{}", r.to_line());
    }
    if let Some(path) = metrics_path {
        write_records(path, records)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adapt_command(
    common: &Common,
    checkpoint: &Path,
    corpus_path: &Path,
    task_name: &str,
    regime_of: impl FnOnce(&Config) -> anyhow::Result<AdaptRegime>,
    train_frac: f64,
    metrics: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = common.build_config()?;
    let seed: u64 = cfg.require("seed")?;
    let ck = load_ckpt(checkpoint)?;
    let corpus = load_corpus(corpus_path)?;
    let kind = parse_task(task_name)?;
    let task = task_labels(&corpus, kind)?;
    let enc = vidfm::stage1::encoder_config_from(&cfg)?;
    let hyper = AdaptHyper::from_config(&cfg)?;
    let regime = regime_of(&cfg)?;
    let (train_idx, eval_idx) = split_indices(corpus.len(), train_frac, seed ^ 0x5eed);
    if eval_idx.is_empty() {
        bail!("train fraction {train_frac} leaves no eval clips");
    }
    let out = adapt_train(&ck.params, &enc, regime, &corpus, &task, &train_idx, &eval_idx, hyper)?;
    let records = vec![
        MetricRecord::new(
            kind.to_string(),
            out.regime.to_string(),
            "accuracy",
            out.accuracy,
            seed,
            hyper.steps,
        ),
        MetricRecord::new(
            kind.to_string(),
            out.regime.to_string(),
            "trainable_scalars",
            out.trainable_scalars as f64,
            seed,
            hyper.steps,
        ),
        MetricRecord::new(
            kind.to_string(),
            out.regime.to_string(),
            "backbone_changed",
            f64::from(u8::from(out.backbone_changed)),
            seed,
            hyper.steps,
        ),
    ];
    emit(metrics, &records)
}

#[allow(clippy::too_many_lines)]
fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCorpus { common, out } => {
            let cfg = common.build_config()?;
            let seed: u64 = cfg.require("seed")?;
            let spec = corpus::spec_from_config(&cfg, seed)?;
            let corpus = corpus::generate_to_dir(&spec, &out)?;
            println!(
                "wrote {} clips ({}x{}x{}) to {}",
                corpus.len(),
                spec.frames,
                spec.height,
                spec.width,
                out.display()
            );
            Ok(())
        }
        Command::Stats { common, corpus: corpus_path, checkpoint, metrics } => {
            let cfg = common.build_config()?;
            let seed: u64 = cfg.require("seed")?;
            let corpus = load_corpus(&corpus_path)?;
            let hists = corpus::corpus_stats(&corpus);
            let mut records = Vec::new();
            for h in &hists {
                println!("{}", h.name);
                for (label, count) in h.bin_labels.iter().zip(&h.counts) {
                    println!("  {label:>8}  {count}");
                    records.push(MetricRecord::new(
                        "corpus",
                        h.name.clone(),
                        label.clone(),
                        *count as f64,
                        seed,
                        0,
                    ));
                }
            }
            if let Some(ck_path) = checkpoint {
                let ck = load_ckpt(&ck_path)?;
                let refs = vec![&corpus];
                let vocab = vocab_for_eval(&ck, &cfg, &refs);
                let s1 = Stage1Config::from_config(&cfg, vocab.size())
                    .map_err(|e| anyhow!("config: {e}"))?;
                let clips: Vec<&VideoClip> = corpus.clips.iter().collect();
                let caps: Vec<&str> = corpus.rows.iter().map(|r| r.caption.as_str()).collect();
                let v = embed_videos(&ck.params, &s1.enc, &clips, 32)?;
                let t = embed_texts(&ck.params, &s1.text, &vocab, &caps, 32)?;
                let sims: Vec<f64> = v
                    .iter()
                    .zip(&t)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum())
                    .collect();
                let mean = sims.iter().sum::<f64>() / sims.len().max(1) as f64;
                println!("alignment_mean  {mean:.6}");
                records.push(MetricRecord::new("corpus", "alignment", "mean", mean, seed, ck.step));
                let mut bins = [0usize; 10];
                for &s in &sims {
                    let b = (((s + 1.0) / 0.2) as usize).min(9);
                    bins[b] += 1;
                }
                for (i, count) in bins.iter().enumerate() {
                    let lo = -1.0 + 0.2 * i as f64;
                    records.push(MetricRecord::new(
                        "corpus",
                        "alignment_hist",
                        format!("{lo:.1}"),
                        *count as f64,
                        seed,
                        ck.step,
                    ));
                }
            }
            if let Some(path) = metrics {
                write_records(&path, &records)?;
            }
            Ok(())
        }
        Command::PretrainStage1 { common, corpora, eval_corpus, out, metrics, resume } => {
            let cfg = common.build_config()?;
            let loaded: Vec<Corpus> =
                corpora.iter().map(|p| load_corpus(p)).collect::<anyhow::Result<_>>()?;
            let eval = eval_corpus.as_deref().map(load_corpus).transpose()?;
            let resume_ck = resume.as_deref().map(load_ckpt).transpose()?;
            let refs: Vec<&Corpus> = loaded.iter().collect();
            let extra = extra_vocab_for(&cfg, &refs);
            let run = train_stage1(&cfg, &loaded, eval.as_ref(), &extra, resume_ck)?;
            run.checkpoint.save(&out)?;
            println!(
                "saved stage-1 checkpoint (step {}) to {}",
                run.checkpoint.step,
                out.display()
            );
            emit(metrics.as_deref(), &run.metrics)
        }
        Command::PretrainStage2 {
            common,
            teacher,
            corpus: corpus_path,
            eval_corpus,
            out,
            metrics,
            resume,
        } => {
            let cfg = common.build_config()?;
            let teacher_ck = load_ckpt(&teacher)?;
            let corpus = load_corpus(&corpus_path)?;
            let eval = eval_corpus.as_deref().map(load_corpus).transpose()?;
            let resume_ck = resume.as_deref().map(load_ckpt).transpose()?;
            let run = train_stage2(&cfg, &teacher_ck, &corpus, eval.as_ref(), resume_ck)?;
            run.checkpoint.save(&out)?;
            println!(
                "saved stage-2 checkpoint (step {}) to {}",
                run.checkpoint.step,
                out.display()
            );
            emit(metrics.as_deref(), &run.metrics)
        }
        Command::LitTune {
            common,
            video_checkpoint,
            stage1_checkpoint,
            corpus: corpus_path,
            eval_corpus,
            out,
            metrics,
        } => {
            let cfg = common.build_config()?;
            let video_ck = load_ckpt(&video_checkpoint)?;
            let s1_ck = load_ckpt(&stage1_checkpoint)?;
            let corpus = load_corpus(&corpus_path)?;
            let eval = eval_corpus.as_deref().map(load_corpus).transpose()?;
            let vocab = vocab_from_checkpoint(&s1_ck)
                .map_err(|e| anyhow!("stage-1 checkpoint has no vocab: {e}"))?;
            let outcome = lit_tune(&cfg, &video_ck, &s1_ck, &vocab, &corpus, eval.as_ref())?;
            let mut snapshot = cfg.clone();
            snapshot.set("vocab.words", vocab.words().join(" "));
            let steps: u64 = cfg.require("lit.steps")?;
            Checkpoint::new(steps, snapshot.to_text(), outcome.params).save(&out)?;
            println!("saved LiT checkpoint to {}", out.display());
            emit(metrics.as_deref(), &outcome.metrics)
        }
        Command::Probe { common, checkpoint, corpus, task, kind, train_frac, metrics } => {
            let kind = parse_kind(&kind)?;
            adapt_command(
                &common,
                &checkpoint,
                &corpus,
                &task,
                |_| Ok(AdaptRegime::Frozen(kind)),
                train_frac,
                metrics.as_deref(),
            )
        }
        Command::Lora { common, checkpoint, corpus, task, rank, alpha, train_frac, metrics } => {
            adapt_command(
                &common,
                &checkpoint,
                &corpus,
                &task,
                |cfg| {
                    let rank = match rank {
                        Some(r) => r,
                        None => cfg.require("adapt.lora_rank")?,
                    };
                    let alpha = match alpha {
                        Some(a) => a,
                        None => cfg.require("adapt.lora_alpha")?,
                    };
                    Ok(AdaptRegime::Lora { rank, alpha })
                },
                train_frac,
                metrics.as_deref(),
            )
        }
        Command::Finetune { common, checkpoint, corpus, task, train_frac, metrics } => {
            adapt_command(
                &common,
                &checkpoint,
                &corpus,
                &task,
                |_| Ok(AdaptRegime::EndToEnd),
                train_frac,
                metrics.as_deref(),
            )
        }
        Command::EvalRetrieval { common, checkpoint, corpus: corpus_path, gallery, metrics } => {
            let cfg = common.build_config()?;
            let seed: u64 = cfg.require("seed")?;
            let ck = load_ckpt(&checkpoint)?;
            let corpus = load_corpus(&corpus_path)?;
            let refs = vec![&corpus];
            let vocab = vocab_for_eval(&ck, &cfg, &refs);
            let s1 =
                Stage1Config::from_config(&cfg, vocab.size()).map_err(|e| anyhow!("config: {e}"))?;
            let gallery = match gallery {
                Some(g) => g,
                None => cfg.require("eval.gallery")?,
            };
            let clips: Vec<&VideoClip> = corpus.clips.iter().collect();
            let caps: Vec<&str> = corpus.rows.iter().map(|r| r.caption.as_str()).collect();
            let v = embed_videos(&ck.params, &s1.enc, &clips, 32)?;
            let t = embed_texts(&ck.params, &s1.text, &vocab, &caps, 32)?;
            let mut sums = (0.0, 0.0, 0.0, 0.0);
            let mut galleries = 0.0;
            let mut i = 0;
            while i + gallery <= v.len() {
                let r = retrieval_eval(&v[i..i + gallery].to_vec(), &t[i..i + gallery].to_vec())?;
                sums.0 += r.t2v_r1;
                sums.1 += r.t2v_r5;
                sums.2 += r.v2t_r1;
                sums.3 += r.v2t_r5;
                galleries += 1.0;
                i += gallery;
            }
            if galleries == 0.0 {
                bail!("corpus smaller than one gallery of {gallery}");
            }
            let mut records = Vec::new();
            for (metric, value) in [
                ("t2v_r@1", sums.0 / galleries),
                ("t2v_r@5", sums.1 / galleries),
                ("v2t_r@1", sums.2 / galleries),
                ("v2t_r@5", sums.3 / galleries),
            ] {
                records.push(MetricRecord::new(
                    "retrieval",
                    "zero-shot",
                    metric,
                    value,
                    seed,
                    ck.step,
                ));
            }
            emit(metrics.as_deref(), &records)
        }
        Command::EvalZeroshot { common, checkpoint, corpus: corpus_path, task, metrics } => {
            let cfg = common.build_config()?;
            let seed: u64 = cfg.require("seed")?;
            let ck = load_ckpt(&checkpoint)?;
            let corpus = load_corpus(&corpus_path)?;
            let kind = parse_task(&task)?;
            let labeled = task_labels(&corpus, kind)?;
            let refs = vec![&corpus];
            let vocab = vocab_for_eval(&ck, &cfg, &refs);
            let s1 =
                Stage1Config::from_config(&cfg, vocab.size()).map_err(|e| anyhow!("config: {e}"))?;
            let class_words = zero_shot_class_words(&corpus, kind);
            let templates = templates_from_config(&cfg);
            let acc = zero_shot_classify_task(
                &ck.params,
                &s1,
                &vocab,
                &corpus,
                &labeled,
                &class_words,
                &templates,
            )?;
            let records = vec![MetricRecord::new(
                kind.to_string(),
                "zero-shot",
                "accuracy",
                acc,
                seed,
                ck.step,
            )];
            emit(metrics.as_deref(), &records)
        }
        Command::Ablate { common, axis, teacher, corpus: corpus_path, probe_corpus, metrics } => {
            run_ablation(
                &common,
                &axis,
                &teacher,
                &corpus_path,
                probe_corpus.as_deref(),
                metrics.as_deref(),
            )
        }
        Command::Report { common, metrics, svg } => {
            let _ = common.build_config()?;
            let mut all = Vec::new();
            for path in &metrics {
                all.extend(read_records(path)?);
            }
            report_tables(&all, svg.as_deref())
        }
    }
}

/// Class words matching a task's label order (sorted factor keys).
fn zero_shot_class_words(corpus: &Corpus, kind: TaskKind) -> Vec<String> {
    let mut keys: Vec<(String, String)> = corpus
        .rows
        .iter()
        .map(|r| match kind {
            TaskKind::Appearance => (
                format!("{:?}|{:?}", r.shape, r.color),
                format!("{} {}", r.color.word(), r.shape.word()),
            ),
            TaskKind::Motion => {
                (format!("{:?}", r.motion), format!("shape {}", r.motion.phrase()))
            }
        })
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().map(|(_, words)| words).collect()
}

fn run_ablation(
    common: &Common,
    axis: &str,
    teacher: &Path,
    corpus_path: &Path,
    probe_corpus: Option<&Path>,
    metrics: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = common.build_config()?;
    let seed: u64 = cfg.require("seed")?;
    let teacher_ck = load_ckpt(teacher)?;
    let corpus = load_corpus(corpus_path)?;
    let probe_c = match probe_corpus {
        Some(p) => load_corpus(p)?,
        None => corpus.clone(),
    };
    let enc = vidfm::stage1::encoder_config_from(&cfg)?;
    let hyper = AdaptHyper::from_config(&cfg)?;
    let (train_idx, eval_idx) = split_indices(probe_c.len(), 0.75, seed ^ 0x5eed);

    let variants: Vec<(String, Config)> = match axis {
        "masking" => {
            let mut v = Vec::new();
            for pattern in ["tube", "blockwise"] {
                for ratio in ["0.5", "0.65", "0.75"] {
                    let mut c = cfg.clone();
                    c.set("stage2.mask_pattern", pattern);
                    c.set("stage2.mask_ratio", ratio);
                    v.push((format!("{pattern}@{ratio}"), c));
                }
            }
            v
        }
        "shuffle" => ["true", "false"]
            .iter()
            .map(|on| {
                let mut c = cfg.clone();
                c.set("stage2.shuffle", *on);
                (format!("shuffle={on}"), c)
            })
            .collect(),
        "global-distill" => ["true", "false"]
            .iter()
            .map(|on| {
                let mut c = cfg.clone();
                c.set("stage2.global_distill", *on);
                (format!("global={on}"), c)
            })
            .collect(),
        other => bail!("unknown ablation axis `{other}` (masking|shuffle|global-distill)"),
    };

    let mut records = Vec::new();
    let mut table: Vec<(String, f64, f64)> = Vec::new();
    for (name, variant_cfg) in variants {
        let run = train_stage2(&variant_cfg, &teacher_ck, &corpus, None, None)?;
        let mut accs = [0.0f64; 2];
        for (i, kind) in [TaskKind::Motion, TaskKind::Appearance].into_iter().enumerate() {
            let task = task_labels(&probe_c, kind)?;
            let out = adapt_train(
                &run.checkpoint.params,
                &enc,
                AdaptRegime::Frozen(ProbeKind::Map),
                &probe_c,
                &task,
                &train_idx,
                &eval_idx,
                hyper,
            )?;
            accs[i] = out.accuracy;
            records.push(MetricRecord::new(
                kind.to_string(),
                format!("ablate:{name}"),
                "accuracy",
                out.accuracy,
                seed,
                run.checkpoint.step,
            ));
        }
        table.push((name, accs[0], accs[1]));
    }

    println!("{:<24} {:>10} {:>12}", "variant", "motion", "appearance");
    for (name, motion, appearance) in &table {
        println!("{name:<24} {motion:>10.4} {appearance:>12.4}");
    }
    emit(metrics, &records)
}

fn report_tables(records: &[MetricRecord], svg_dir: Option<&Path>) -> anyhow::Result<()> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.task.clone(), r.regime.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    println!(
        "{:<16} {:<22} {:<18} {:>6} {:>10} {:>10} {:>10}",
        "task", "regime", "metric", "n", "mean", "min", "max"
    );
    for ((task, regime, metric), values) in &groups {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{task:<16} {regime:<22} {metric:<18} {n:>6} {mean:>10.4} {min:>10.4} {max:>10.4}"
        );
    }
    if let Some(dir) = svg_dir {
        std::fs::create_dir_all(dir)?;
        for ((task, regime, metric), values) in &groups {
            let name = format!("{task}_{regime}_{metric}").replace(['/', ':', '@', ' '], "_");
            let path = dir.join(format!("{name}.svg"));
            std::fs::write(&path, histogram_svg(values))?;
        }
        println!("wrote {} SVG histograms to {}", groups.len(), dir.display());
    }
    Ok(())
}

/// Minimal 10-bin bar chart.
fn histogram_svg(values: &[f64]) -> String {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if (hi - lo).abs() < 1e-12 { 1.0 } else { hi - lo };
    let mut bins = [0usize; 10];
    for &v in values {
        let b = (((v - lo) / span) * 10.0).clamp(0.0, 9.0) as usize;
        bins[b] += 1;
    }
    let peak = *bins.iter().max().unwrap_or(&1) as f64;
    let mut s = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"220\" height=\"120\" viewBox=\"0 0 220 120\">\n",
    );
    for (i, &c) in bins.iter().enumerate() {
        let h = if peak > 0.0 { 100.0 * c as f64 / peak } else { 0.0 };
        let x = 10.0 + i as f64 * 20.0;
        let y = 110.0 - h;
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"18\" height=\"{h:.1}\" fill=\"#4477aa\"/>\n"
        ));
    }
    s.push_str("</svg>\n");
    s
}
