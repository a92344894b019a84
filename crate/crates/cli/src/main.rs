use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edtc::captioner::{beam_search, DecoderScorer};
use edtc::harness::{self, AblationMode, Checkpoint, TrainConfig};
use edtc::numerics::Graph;
use edtc::synthdata::{generate_dataset, read_record, Batch, Dataset, LatentSpec};
use edtc::{Error, Result};

#[derive(Parser)]
#[command(name = "edtc", version, about = "Feature fusion and twin-translator captioning on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        t: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// First sample id; use disjoint ranges for separate splits.
        #[arg(long, default_value_t = 0)]
        start_id: u64,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 16)]
        latent_dim: usize,
        #[arg(long, default_value_t = 16)]
        symbols: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        beams: Option<usize>,
    },
    /// Caption one sample.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long, default_value_t = 4)]
        beams: usize,
        /// Dataset holding the sample; defaults to the checkpoint's validation split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Train all four ablation modes and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::read(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read dataset {}: {io}", path.display())),
        other => other,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            count,
            seed,
            t,
            d,
            start_id,
            sigma,
            latent_dim,
            symbols,
            vocab,
        } => {
            let spec = LatentSpec {
                latent_dim,
                time: t,
                dim: d,
                num_symbols: symbols,
                vocab_size: vocab,
                seed,
                sigma,
                distinct_views: true,
            };
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            let data = generate_dataset(&spec, count, start_id).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            data.write(&out)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train { config, ablation } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(m) = ablation {
                cfg.ablation_mode = m.parse()?;
            }
            let train = load_data(&cfg.train_data)?;
            let val = load_data(&cfg.val_data)?;
            let summary = harness::train(&cfg, train, &val, &cfg.run_dir.clone())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval { ckpt, data, beams } => {
            let c = Checkpoint::load(&ckpt)?;
            let data = load_data(&data)?;
            let beams = beams.unwrap_or(c.model.cfg.num_beams);
            let rep = harness::evaluate(&c.model, &data, beams, 0)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
        Command::Infer {
            ckpt,
            sample,
            beams,
            data,
        } => {
            let c = Checkpoint::load(&ckpt)?;
            let path = data.unwrap_or_else(|| c.model.cfg.val_data.clone());
            let rec = read_record(&path, sample)?;
            let spec = load_data(&path)?.spec;
            let one = Dataset::new(spec, vec![rec.clone()])?;
            let batch = Batch::gather(&one, &[0])?;
            let mut g = Graph::new();
            let mut b = c.model.bind(&mut g, false);
            let (memory, _) = c.model.audio_branch(&mut g, &mut b, &batch.views)?;
            let memory = g.value(memory).clone();
            let scorer = DecoderScorer {
                decoder: &c.model.decoder,
                params: &c.model.decoder_params,
                memory: &memory,
            };
            let v = &c.model.vocab;
            let h = beam_search(&scorer, v.bos, v.eos, beams, rec.caption.len() - 1)?;
            println!("sample    {}", rec.sample_id);
            println!("caption   {}", v.words(&h.tokens).join(" "));
            println!("reference {}", v.words(&rec.caption[1..]).join(" "));
            println!("log_prob  {:.4}", h.log_prob);
        }
        Command::Gradcheck { module } => {
            let reports = harness::run_gradchecks(module.as_deref())?;
            let mut failed = Vec::new();
            for r in &reports {
                println!("{r}");
                if !r.passed {
                    failed.push(r.op_name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Ablate { config } => {
            let cfg = TrainConfig::load(&config)?;
            let train = load_data(&cfg.train_data)?;
            let val = load_data(&cfg.val_data)?;
            let rows = harness::ablate(&cfg, &train, &val, &cfg.run_dir)?;
            print!("{}", harness::ablation_table(&rows));
            let modes: Vec<&str> = AblationMode::ALL.iter().map(|m| m.as_str()).collect();
            log::info!("modes compared: {}", modes.join(", "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
