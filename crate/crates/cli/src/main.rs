use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use xembody::analysis::{tsne, write_layout_csv, TsneConfig};
use xembody::episode::{load_manifest, read_dataset, validate_episode, write_dataset};
use xembody::experiment::{
    derive_seed, eval_model, read_alignment_csv, read_results_csv, run_alignment, run_finetune, run_pretrain,
    run_sweep, summarize, write_json, LadderPoint, Mix, RunOptions, SeedData, SweepConfig,
};
use xembody::policy::{write_loss_csv, ModelParams};
use xembody::tokenizer::Tokenizer;
use xembody::world::{benchmark, subtask_vocab};

#[derive(Parser)]
#[command(name = "xembody", version, about = "Human-to-robot transfer experiments in a synthetic world")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Sweep config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixArg {
    RobotOnly,
    WithTransfer,
}

impl From<MixArg> for Mix {
    fn from(m: MixArg) -> Self {
        match m {
            MixArg::RobotOnly => Mix::RobotOnly,
            MixArg::WithTransfer => Mix::WithTransfer,
        }
    }
}

#[derive(Args)]
struct Rung {
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long)]
    x_emb: bool,
}

impl Rung {
    fn point(&self) -> LadderPoint {
        LadderPoint {
            fraction: self.fraction,
            x_emb: self.x_emb,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the seed's demonstrations and write them as a dataset.
    GenData,
    /// Validate a dataset directory and report its contents.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train the action tokenizer on a dataset.
    TokenizerTrain {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Pretrain on one ladder rung.
    Pretrain {
        #[command(flatten)]
        rung: Rung,
    },
    /// Fine-tune a checkpoint on a benchmark's data.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        benchmark: String,
        #[arg(long, value_enum, default_value = "with-transfer")]
        mix: MixArg,
        #[command(flatten)]
        rung: Rung,
    },
    /// Roll out a checkpoint on a benchmark.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        benchmark: String,
    },
    /// Run the full grid.
    Sweep {
        #[arg(long)]
        quiet: bool,
    },
    /// Embeddings, probe accuracy and t-SNE layout for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Recompute summary.json from results.csv and alignment.csv.
    Report,
}

fn load_config(g: &Global) -> Result<SweepConfig> {
    let mut cfg: SweepConfig = match &g.config {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SweepConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn one_seed(cfg: &SweepConfig) -> u64 {
    cfg.seeds[0]
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    let cfg = load_config(g)?;
    let out = &g.out_dir;
    match &cli.cmd {
        Cmd::GenData => {
            let seed = one_seed(&cfg);
            let data = SeedData::generate(&cfg, seed)?;
            let dir = out.join(format!("data_s{seed}"));
            let m = write_dataset(&dir, &data.episodes, &subtask_vocab())?;
            data.tokenizer.save(&dir.join("tokenizer.json"))?;
            println!("{} episodes, {} samples -> {}", m.episodes.len(), data.samples.len(), dir.display());
        }
        Cmd::Ingest { dataset } => {
            let m = load_manifest(dataset)?;
            let eps = read_dataset(dataset, &m)?;
            let mut bad = 0;
            for e in &eps {
                let v = validate_episode(e);
                if !v.is_empty() {
                    bad += 1;
                    eprintln!("{}: {v:?}", e.id);
                }
            }
            let frames: usize = eps.iter().map(|e| e.len()).sum();
            println!("{} episodes, {frames} frames, {bad} invalid", eps.len());
            if bad > 0 {
                bail!("{bad} invalid episodes");
            }
        }
        Cmd::TokenizerTrain { dataset } => {
            let m = load_manifest(dataset)?;
            let eps = read_dataset(dataset, &m)?;
            let corpus = xembody::data::unified_chunks(&eps, &cfg.chunk, &Default::default())?;
            let tok = Tokenizer::train(&corpus, cfg.tokenizer)?;
            let path = out.join("tokenizer.json");
            tok.save(&path)?;
            println!("{} merges, fingerprint {} -> {}", tok.merges().len(), tok.fingerprint().to_hex(), path.display());
        }
        Cmd::Pretrain { rung } => {
            let seed = one_seed(&cfg);
            let data = SeedData::generate(&cfg, seed)?;
            let (p, curve) = run_pretrain(&cfg, &data, rung.point())?;
            let name = format!("pretrain_{}_s{seed}", rung.point().tag());
            p.save(&out.join(format!("{name}.ckpt")))?;
            write_loss_csv(&out.join(format!("{name}_loss.csv")), &curve)?;
            println!("{}", out.join(format!("{name}.ckpt")).display());
        }
        Cmd::Finetune {
            checkpoint,
            benchmark: name,
            mix,
            rung,
        } => {
            let seed = one_seed(&cfg);
            let data = SeedData::generate(&cfg, seed)?;
            let start = ModelParams::load(checkpoint)?;
            let mix = Mix::from(*mix);
            let (p, curve) = run_finetune(&cfg, &data, &start, rung.point(), name, mix)?;
            let stem = format!("finetune_{}_{name}_{}_s{seed}", rung.point().tag(), mix.label(cfg.transfer));
            p.save(&out.join(format!("{stem}.ckpt")))?;
            write_loss_csv(&out.join(format!("{stem}_loss.csv")), &curve)?;
            println!("{}", out.join(format!("{stem}.ckpt")).display());
        }
        Cmd::Eval {
            checkpoint,
            benchmark: name,
        } => {
            let p = ModelParams::load(checkpoint)?;
            let scores = eval_model(&cfg, &p, &benchmark(name)?, one_seed(&cfg))?;
            println!("{}", serde_json::to_string(&scores)?);
        }
        Cmd::Sweep { quiet } => {
            let opts = RunOptions {
                out_dir: Some(out.clone()),
                jobs: g.jobs,
                progress: !quiet,
            };
            let r = run_sweep(&cfg, &opts)?;
            println!("{}", serde_json::to_string_pretty(&r.summary.gains)?);
            println!("{}", serde_json::to_string_pretty(&r.summary.emergence)?);
            println!("{}", serde_json::to_string_pretty(&r.summary.alignment)?);
            if !r.summary.failures.is_empty() {
                bail!("{} cells failed; see summary.json", r.summary.failures.len());
            }
        }
        Cmd::Analyze { checkpoint } => {
            let seed = one_seed(&cfg);
            let data = SeedData::generate(&cfg, seed)?;
            let p = ModelParams::load(checkpoint)?;
            let (set, m) = run_alignment(&cfg, &data, &p)?;
            let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let dir = out.join("embeddings");
            set.write_csv(&dir.join(format!("{stem}.csv")))?;
            let tc = TsneConfig {
                seed: derive_seed(seed, "tsne", 0),
                ..cfg.alignment.tsne
            };
            let r = tsne(set.points.view(), &tc)?;
            write_layout_csv(&dir.join(format!("{stem}_tsne.csv")), &r.layout, &set)?;
            write_json(&dir.join(format!("{stem}_metrics.json")), &m)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Cmd::Report => {
            let rows = read_results_csv(&out.join("results.csv"))?;
            let align = read_alignment_csv(&out.join("alignment.csv")).unwrap_or_default();
            let s = summarize(&cfg, &rows, &align, Vec::new());
            write_json(&out.join("summary.json"), &s)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}
