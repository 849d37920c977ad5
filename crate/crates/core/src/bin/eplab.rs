use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use eplab::attacks::{EPParams, Method};
use eplab::harness::{self, ExperimentConfig, Report};
use eplab::splitsvc::{self, wire::FloatWidth, ClientDefense, ClientOptions, ServerConfig, SplitServer};

#[derive(Parser)]
#[command(name = "eplab", version, about = "Embedding-inversion attacks and defenses on a toy LM")]
struct Cli {
    /// Experiment config (JSON); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Layer to sweep, or the parrot's target layer for parrot commands.
    #[arg(long, global = true)]
    layer: Option<usize>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    /// Output directory (a file path for gen-corpus).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Bei,
    Hei,
    Ep,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackArg {
    None,
    Bei,
    Hei,
    Ep,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic financial-news corpus, one sentence per line.
    GenCorpus {
        #[arg(long, default_value_t = 3000)]
        lines: usize,
    },
    BuildVocab,
    TrainLm,
    /// BEI/HEI (and EP with --method ep) at every layer.
    Sweep,
    TrainParrot,
    EpEval,
    Defend,
    FinetuneEval,
    /// Re-render summary.md from rows.jsonl for every experiment under --out.
    Report,
    /// Serve the layers after the split over TCP until killed.
    Serve {
        #[arg(long, default_value_t = 1)]
        split_layer: usize,
        #[arg(long, value_enum, default_value_t = AttackArg::None)]
        attack: AttackArg,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Append attack reconstructions to this JSONL file.
        #[arg(long)]
        attack_log: Option<PathBuf>,
    },
    /// Run one split-inference request against a server.
    Infer {
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Apply the overlap-matrix defense before sending.
        #[arg(long)]
        defend: bool,
        /// Exact f64 transport.
        #[arg(long)]
        f64_wire: bool,
    },
}

fn method(m: MethodArg) -> Method {
    match m {
        MethodArg::Bei => Method::Bei,
        MethodArg::Hei => Method::Hei,
        MethodArg::Ep => Method::EpHei,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.set_seed(s);
    }
    if let Some(o) = &cli.out {
        c.out_dir = o.clone();
    }
    if let Some(m) = cli.method {
        c.methods = vec![method(m)];
    }
    if let Some(l) = cli.layer {
        match cli.cmd {
            Cmd::Sweep | Cmd::FinetuneEval => c.sweep_layers = Some(vec![l]),
            _ => c.ep.target_layer = Some(l),
        }
        if matches!(cli.cmd, Cmd::Sweep) && c.methods.iter().any(|m| m.uses_parrot()) {
            c.ep.target_layer = Some(l);
        }
    }
    c.validate()?;
    Ok(c)
}

fn print_report(report: &Report, config: &ExperimentConfig) {
    println!("{}", harness::render_summary(&report.rows, Some(&report.header), &config.metrics));
    println!("rows written to {}", config.out_dir.join(&report.header.experiment).display());
}

fn rerender_all(config: &ExperimentConfig, explicit: bool) -> Result<()> {
    let root = &config.out_dir;
    let mut dirs = Vec::new();
    if root.join("rows.jsonl").exists() {
        dirs.push(root.clone());
    }
    for entry in std::fs::read_dir(root).with_context(|| format!("reading {}", root.display()))? {
        let p = entry?.path();
        if p.join("rows.jsonl").exists() {
            dirs.push(p);
        }
    }
    if dirs.is_empty() {
        bail!("no rows.jsonl under {}", root.display());
    }
    dirs.sort();
    for d in dirs {
        let cfg = if explicit { Some(config) } else { None };
        let md = harness::rerender(&d, cfg)?;
        println!("== {} ==\n{md}", d.display());
    }
    Ok(())
}

fn serve(config: &ExperimentConfig, split_layer: usize, attack: AttackArg, bind: &str, log: Option<PathBuf>) -> Result<()> {
    let (vocab, lm) = harness::load_lm(config)?;
    let attack = match attack {
        AttackArg::None => None,
        AttackArg::Bei => Some(Method::Bei),
        AttackArg::Hei => Some(Method::Hei),
        AttackArg::Ep => Some(Method::EpHei),
    };
    let parrot = if attack.is_some_and(|m| m.uses_parrot()) {
        let p = harness::Artifacts::of(config).parrot(split_layer);
        Some(EPParams::load(&p).with_context(|| format!("loading {} (run train-parrot --layer {split_layer})", p.display()))?)
    } else {
        None
    };
    let cfg = ServerConfig { split_layer, attack, attack_log_path: log, ..Default::default() };
    let server = SplitServer::bind(bind, lm, vocab, parrot, cfg)?;
    println!("listening on {} (split layer {split_layer})", server.local_addr());
    server.serve();
    Ok(())
}

fn infer(config: &ExperimentConfig, text: &str, bind: &str, defend: bool, f64_wire: bool) -> Result<()> {
    let (vocab, lm) = harness::load_lm(config)?;
    let probe = splitsvc::SplitClient::connect(bind, FloatWidth::F32, Some(Duration::from_secs(10)))?;
    let prefix = lm.prefix(probe.split_layer())?;
    drop(probe);
    let defense = if defend {
        let set = harness::load_or_build_overlap(config, lm.hidden_dim())?;
        Some(ClientDefense { set, choice_seed: config.defense.choice_seed })
    } else {
        None
    };
    let opts = ClientOptions {
        wire: if f64_wire { FloatWidth::F64 } else { FloatWidth::F32 },
        defense,
        timeout: Some(Duration::from_secs(30)),
    };
    let out = splitsvc::client_session(&prefix, &vocab, text, bind, &opts)?;
    println!("{}", out.text);
    println!("final-state hash {:016x}", out.hidden_hash);
    Ok(())
}

fn write_corpus(out: &Path, lines: usize, seed: u64) -> Result<()> {
    let corpus = harness::synthetic_corpus(lines, seed);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, corpus.join("\n") + "\n").with_context(|| format!("writing {}", out.display()))?;
    println!("{} lines written to {}", corpus.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Cmd::GenCorpus { lines } = cli.cmd {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("corpus.txt"));
        return write_corpus(&out, lines, cli.seed.unwrap_or(ExperimentConfig::default().corpus.synthetic_seed));
    }
    let config = load_config(cli)?;
    let t0 = Instant::now();
    match &cli.cmd {
        Cmd::GenCorpus { .. } => unreachable!(),
        Cmd::BuildVocab => {
            let v = harness::build_vocab(&config)?;
            println!("vocabulary: {} tokens", v.len());
        }
        Cmd::TrainLm => {
            let (lm, out) = harness::train_lm(&config)?;
            for (i, l) in out.epoch_losses.iter().enumerate() {
                println!("epoch {:>2}  loss {l:.4}", i + 1);
            }
            println!("{} parameters checksum {:016x}", lm.tensors().iter().map(|(_, m)| m.data().len()).sum::<usize>(), lm.checksum());
        }
        Cmd::Sweep => print_report(&harness::run_sweep(&config)?, &config),
        Cmd::TrainParrot => {
            let (ep, out) = harness::train_parrot_stage(&config)?;
            for (i, l) in out.epoch_losses.iter().enumerate() {
                println!("epoch {:>2}  cosine loss {l:.4}", i + 1);
            }
            println!("parrot for layer {} saved", ep.config.target_layer);
        }
        Cmd::EpEval => print_report(&harness::run_ep_experiment(&config)?, &config),
        Cmd::Defend => print_report(&harness::run_defense_experiment(&config)?, &config),
        Cmd::FinetuneEval => print_report(&harness::run_finetune_experiment(&config)?, &config),
        Cmd::Report => rerender_all(&config, cli.config.is_some())?,
        Cmd::Serve { split_layer, attack, bind, attack_log } => serve(&config, *split_layer, *attack, bind, attack_log.clone())?,
        Cmd::Infer { text, bind, defend, f64_wire } => infer(&config, text, bind, *defend, *f64_wire)?,
    }
    log::info!("done in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
