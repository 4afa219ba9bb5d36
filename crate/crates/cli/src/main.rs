use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ajepa::checkpoint;
use ajepa::diagnostics;
use ajepa::frontend::{encode_mel_dump, log_mel, normalize, pad_or_crop, Crop};
use ajepa::fsutil::{read, write_atomic};
use ajepa::mask::{draw_stats, render_pgm, MaskingConfig, MultiBlockParams};
use ajepa::model::{Model, ModelParams};
use ajepa::probe::{extract_features, featurize, load_probe_mels, probe_features, ProbeConfig};
use ajepa::synth::{build_corpus, CorpusConfig};
use ajepa::train::{run_pretraining, TrainConfig};
use ajepa::wav::decode_wav;

#[derive(Parser)]
#[command(name = "ajepa", version, about = "Audio JEPA pretraining, probing and diagnostics")]
struct Cli {
    /// Log progress at debug level.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Unstructured,
    Multiblock,
    Time,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic pretraining corpus and pitch task.
    GenData {
        /// Corpus JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Train from a JSON config, optionally continuing a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen context-encoder features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Per-clip CSV; the JSON report goes next to it.
        #[arg(long)]
        out: PathBuf,
        /// Probe a freshly initialized encoder of the same architecture.
        #[arg(long)]
        random_init: bool,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Draw masks; the first is written as a plain PGM and per-draw
    /// statistics go to a CSV beside it.
    Maskviz {
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.7)]
        target_ratio: f64,
        #[arg(long, default_value_t = 1)]
        draws: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks in 64-bit floats.
    Gradcheck {
        /// Comma-separated op names; all ops plus the training loss when
        /// omitted.
        #[arg(long, value_delimiter = ',')]
        ops: Option<Vec<String>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Frozen-encoder feature vector of one WAV file, as JSON.
    Featdump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the normalized model input as a MELSPEC1 dump.
        #[arg(long)]
        mel: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, threads } => gen_data(config.as_deref(), &out, threads),
        Command::Pretrain { config, resume } => {
            let c = TrainConfig::load(&config)?;
            let last = run_pretraining(&c, resume.as_deref())?;
            println!("{}", last.display());
            Ok(())
        }
        Command::Probe {
            checkpoint,
            manifest,
            out,
            random_init,
            threads,
        } => probe(&checkpoint, &manifest, &out, random_init, threads),
        Command::Maskviz {
            strategy,
            rows,
            cols,
            seed,
            target_ratio,
            draws,
            out,
        } => maskviz(strategy, rows, cols, seed, target_ratio, draws, &out),
        Command::Gradcheck { ops, seed } => gradcheck(ops.as_deref(), seed),
        Command::Featdump {
            checkpoint,
            wav,
            out,
            mel,
        } => featdump(&checkpoint, &wav, &out, mel.as_deref()),
    }
}

fn gen_data(config: Option<&Path>, out: &Path, threads: usize) -> Result<()> {
    let c: CorpusConfig = match config {
        Some(p) => serde_json::from_slice(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => CorpusConfig::default(),
    };
    let paths = build_corpus(&c, out, threads)?;
    let meta = serde_json::json!({ "corpus": c, "threads": threads });
    write_atomic(&out.join("corpus.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    println!("{}", paths.pretrain_manifest.display());
    println!("{}", paths.pitch_manifest.display());
    Ok(())
}

fn probe(ckpt_path: &Path, manifest: &Path, out: &Path, random_init: bool, threads: usize) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg = &ckpt.config;
    let model = Model::new(&cfg.model)?;
    let theta = if random_init {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        ModelParams::init(&cfg.model, &mut rng)?.theta
    } else {
        ckpt.state.params.theta
    };
    let (m, mels) = load_probe_mels(manifest, &cfg.frontend, ckpt.norm, threads)?;
    let data = featurize(&model, &theta, &m, &mels)?;
    let report = probe_features(&data, &ProbeConfig::default())?;
    write_atomic(out, report.csv().as_bytes())?;
    let json_path = out.with_extension("json");
    write_atomic(&json_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "accuracy {:.4} chance {:.4} mean_std {:.4} effective_rank {:.3}",
        report.accuracy, report.chance, report.mean_std, report.effective_rank
    );
    Ok(())
}

fn maskviz(strategy: Strategy, rows: usize, cols: usize, seed: u64, ratio: f64, draws: usize, out: &Path) -> Result<()> {
    if draws == 0 {
        bail!("--draws must be at least 1");
    }
    let cfg = match strategy {
        Strategy::Unstructured => MaskingConfig::Unstructured { target_ratio: ratio },
        Strategy::Multiblock => MaskingConfig::Multiblock(MultiBlockParams::default()),
        Strategy::Time => MaskingConfig::Time {
            target_ratio: ratio,
            contiguous: false,
        },
    };
    let name = strategy.to_possible_value().expect("no skipped variants").get_name().to_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("draw,strategy,seed,context,target,contiguity\n");
    for i in 0..draws {
        let spec = cfg.sample(rows, cols, &mut rng)?;
        let s = draw_stats(&spec, rows, cols);
        csv.push_str(&format!("{i},{name},{seed},{},{},{:.6}\n", s.context, s.target, s.contiguity));
        if i == 0 {
            write_atomic(out, render_pgm(&spec, rows, cols).as_bytes())?;
            println!(
                "context {} target {} column_coverage {:.3} contiguity {:.3}",
                s.context, s.target, s.column_coverage, s.contiguity
            );
        }
    }
    write_atomic(&out.with_extension("csv"), csv.as_bytes())?;
    Ok(())
}

fn gradcheck(ops: Option<&[String]>, seed: u64) -> Result<()> {
    let results = diagnostics::full_suite(&ajepa::model::ModelConfig::desk(), seed, ops)?;
    println!("{:<32} {:>12}  status", "check", "max_rel_err");
    let mut failed = 0;
    for r in &results {
        let ok = r.passed();
        failed += !ok as usize;
        println!(
            "{:<32} {:>12.3e}  {}",
            r.name,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        bail!("{failed} of {} checks at or above {:e}", results.len(), diagnostics::TOLERANCE);
    }
    Ok(())
}

fn featdump(ckpt_path: &Path, wav: &Path, out: &Path, mel_out: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let cfg = &ckpt.config;
    let wave = decode_wav(&read(wav)?).with_context(|| format!("decoding {}", wav.display()))?;
    if wave.sample_rate != cfg.frontend.sample_rate {
        bail!(
            "{} is {} Hz, the model expects {} Hz",
            wav.display(),
            wave.sample_rate,
            cfg.frontend.sample_rate
        );
    }
    let mel = pad_or_crop(&log_mel(&wave, &cfg.frontend)?, cfg.frontend.target_frames, Crop::Center);
    let mel = normalize(&mel, ckpt.norm)?;
    if let Some(p) = mel_out {
        write_atomic(p, &encode_mel_dump(&mel))?;
    }
    let model = Model::new(&cfg.model)?;
    let f = extract_features(&model, &ckpt.state.params.theta, &mel)?;
    let doc = serde_json::json!({ "dim": f.values.len(), "features": f.values });
    write_atomic(out, serde_json::to_string(&doc)?.as_bytes())?;
    println!("{} features", f.values.len());
    Ok(())
}
