use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use geomattn::checkpoint::{load_checkpoint, save_checkpoint};
use geomattn::config::RunConfig;
use geomattn::data::{generate_synthetic, Raster, Split, SynthConfig};
use geomattn::pipeline::{attention_export, evaluate_model, train, write_attention, Dataset, TrainEvent};

#[derive(Parser)]
#[command(name = "geomattn", version, about = "Geometric attention re-identification at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset and its manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Training identities.
        #[arg(long)]
        ids: usize,
        #[arg(long)]
        per_id: usize,
        /// Held-out identities; defaults to a quarter of --ids (at least 2).
        #[arg(long)]
        test_ids: Option<usize>,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, env = "GEOMATTN_SEED", default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and evaluate it on the held-out split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long, env = "GEOMATTN_SEED")]
        seed: Option<u64>,
        /// Overrides the config data directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print retrieval metrics of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Export the attention map of one image.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Writes PREFIX.pgm, PREFIX.csv and PREFIX_overlay.ppm.
        #[arg(long)]
        out: String,
    },
    /// Print the default configuration.
    Config,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen {
            out,
            ids,
            per_id,
            test_ids,
            side,
            seed,
            force,
        } => gen(&out, ids, per_id, test_ids, side, seed, force),
        Cmd::Train { config, out, seed, data } => cmd_train(&config, &out, seed, data),
        Cmd::Eval { ckpt, data } => {
            let ck = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let ds = Dataset::load(&data).with_context(|| format!("loading {}", data.display()))?;
            println!("{}", serde_json::to_string(&evaluate_model(&ck.model, &ds)?)?);
            Ok(())
        }
        Cmd::Attn { ckpt, image, out } => {
            let ck = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let img = Raster::load(&image).with_context(|| format!("reading {}", image.display()))?;
            let export = attention_export(&ck.model, &img.to_tensor())?;
            write_attention(&export, &out)?;
            println!("wrote {out}.pgm {out}.csv {out}_overlay.ppm");
            Ok(())
        }
        Cmd::Config => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    }
}

fn gen(out: &Path, ids: usize, per_id: usize, test_ids: Option<usize>, side: usize, seed: u64, force: bool) -> Result<()> {
    if out.exists() && fs::read_dir(out)?.next().is_some() && !force {
        bail!("{} is not empty; pass --force to write into it", out.display());
    }
    let mut cfg = SynthConfig::new(ids, per_id, seed);
    cfg.side = side;
    if let Some(t) = test_ids {
        cfg.test_ids = t;
    }
    let m = generate_synthetic(out, &cfg)?;
    let count = |s| m.split(s).count();
    println!(
        "images {} train {} query {} gallery {} train_ids {} test_ids {}",
        m.records.len(),
        count(Split::Train),
        count(Split::Query),
        count(Split::Gallery),
        cfg.train_ids,
        cfg.test_ids
    );
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, data: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data_dir = match data {
        Some(d) => d,
        None => {
            let d = PathBuf::from(&cfg.data);
            if d.is_relative() && !d.exists() {
                config.parent().unwrap_or(Path::new(".")).join(d)
            } else {
                d
            }
        }
    };
    let ds = Dataset::load(&data_dir).with_context(|| format!("loading {}", data_dir.display()))?;
    fs::create_dir_all(out)?;
    let mut log = std::io::BufWriter::new(fs::File::create(out.join("loss_log.jsonl"))?);
    let ckpt = out.join("model.gatn");
    let every = cfg.checkpoint_every;
    let outcome = train(&cfg, &ds, |e| {
        match e {
            TrainEvent::Step { step, report } => writeln!(log, "{}", report.to_json_line(step as u64))?,
            TrainEvent::EpochEnd { epoch, model, optimizer } => {
                if every > 0 && (epoch + 1) % every == 0 {
                    save_checkpoint(&out.join(format!("epoch{:03}.gatn", epoch + 1)), model, optimizer, &cfg)?;
                }
            }
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&ckpt, &outcome.model, &outcome.optimizer, &cfg)?;
    let metrics = evaluate_model(&outcome.model, &ds)?;
    let json = serde_json::to_string(&metrics)?;
    fs::write(out.join("metrics.json"), format!("{json}\n"))?;
    println!("steps {} checkpoint {}", outcome.steps, ckpt.display());
    println!("{json}");
    Ok(())
}
