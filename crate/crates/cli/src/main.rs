use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use prosima::bench::{run_robustness, run_scalability, run_table4, source_images, BenchError};
use prosima::config::{ConfigError, ExperimentConfig};
use prosima::consensus::{FaultMode, Network, SimConfig, TRACE_CSV_HEADER};
use prosima::fingerprint::{hash_latent, ShardEncoder};
use prosima::imaging::format::{encode_pgm, load};
use prosima::imaging::{fragment, ShardGrid};
use prosima::ledger::{create_transaction, Metadata, TxKind};
use prosima::reconstruction::reconstruct_image;
use prosima::rundir::{
    anchor_run, load_archive, lossless_encoding, overlay, verify_dir, RunError, VerifyOutcome,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;
const EXIT_ABORT: u8 = 4;
const EXIT_NOTHING: u8 = 5;

#[derive(Parser)]
#[command(
    name = "prosima",
    version,
    about = "Image-shard provenance ledger, consensus simulator and benchmarks"
)]
struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output and run directory.
    #[arg(long, global = true, env = "PROSIMA_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split an image into grid shards and print their fingerprints.
    Fragment(FragmentArgs),
    /// Anchor images into the run directory.
    Anchor(AnchorArgs),
    /// Rebuild a corrupted image from anchored latents.
    Reconstruct(ReconstructArgs),
    /// Re-check every ledger replica, image and latent of a run.
    Verify(VerifyArgs),
    /// Generate the overlay graph and its leader set.
    Topology,
    /// Run consensus rounds over synthetic transactions.
    ConsensusSim(SimArgs),
    /// Experiment runners that emit CSV.
    Bench {
        #[arg(value_enum)]
        which: BenchKind,
    },
}

#[derive(Args)]
struct FragmentArgs {
    image: PathBuf,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Also write each shard as an image under `<out>/shards`.
    #[arg(long)]
    write: bool,
}

#[derive(Args)]
struct AnchorArgs {
    /// PGM/PIMG directory; defaults to the config's, then to phantoms.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    corrupted: PathBuf,
    /// Ground truth, for quality metrics.
    #[arg(long)]
    original: Option<PathBuf>,
    /// Run directory holding the ledgers; defaults to the output directory.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Output PGM; the provenance sidecar goes next to it.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run directory; defaults to the output directory.
    dir: Option<PathBuf>,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    ranks: Option<usize>,
    #[arg(long)]
    faults: Option<usize>,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// Transactions per round.
    #[arg(long, default_value_t = 64)]
    txs: usize,
    /// Byzantine rank as `rank=crash|garbage_sig|equivocate`; repeatable.
    #[arg(long = "fault")]
    inject: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Table4,
    Scale,
    Robustness,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn fragment_cmd(cfg: &ExperimentConfig, args: &FragmentArgs) -> Result<u8> {
    let image = load(&args.image).with_context(|| format!("reading {}", args.image.display()))?;
    let grid = ShardGrid::new(
        args.rows.unwrap_or(cfg.grid.rows),
        args.cols.unwrap_or(cfg.grid.cols),
    )?;
    for shard in fragment(&image, grid)? {
        let fp = hash_latent(&cfg.encoder.encode(&shard)?);
        println!(
            "{}",
            json!({
                "row": shard.row,
                "col": shard.col,
                "width": shard.width,
                "height": shard.height,
                "shard_key": shard.key().to_hex(),
                "fingerprint": fp.to_hex(),
            })
        );
        if args.write {
            let img =
                prosima::imaging::Image::new(shard.width, shard.height, shard.pixels.clone())?;
            let (ext, bytes) = lossless_encoding(&img).unwrap_or(("pgm", encode_pgm(&img)));
            write(
                &cfg.output_dir
                    .join("shards")
                    .join(format!("{}-{}.{ext}", shard.row, shard.col)),
                bytes,
            )?;
        }
    }
    Ok(0)
}

fn anchor_cmd(mut cfg: ExperimentConfig, args: &AnchorArgs) -> Result<u8> {
    if let Some(dir) = &args.images {
        cfg.image_dir = Some(dir.clone());
    }
    let images = match &cfg.image_dir {
        Some(dir) => prosima::rundir::load_image_dir(dir)?,
        None => source_images(&cfg, cfg.images, cfg.image_size)?,
    };
    let summary = anchor_run(&cfg, &images, &cfg.output_dir)?;
    println!(
        "{}",
        serde_json::to_string(&json!({
            "run_dir": cfg.output_dir,
            "images": summary.images,
            "submitted_txs": summary.submitted_txs,
            "committed_txs": summary.committed_txs,
            "rounds": summary.traces.len(),
            "fingerprint_on": summary.fingerprint_on,
            "incomplete": summary.incomplete,
        }))?
    );
    Ok(if summary.incomplete.is_some() {
        EXIT_ABORT
    } else {
        0
    })
}

fn reconstruct_cmd(cfg: &ExperimentConfig, args: &ReconstructArgs) -> Result<u8> {
    let run = args.run.clone().unwrap_or_else(|| cfg.output_dir.clone());
    if !run.join("nodes").is_dir() {
        eprintln!("no ledgers found in {}", run.display());
        return Ok(EXIT_NOTHING);
    }
    let corrupted =
        load(&args.corrupted).with_context(|| format!("reading {}", args.corrupted.display()))?;
    let original = args
        .original
        .as_ref()
        .map(|p| load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let archive = load_archive(&run)?;
    let result = reconstruct_image(
        &corrupted,
        &archive,
        &cfg.reconstruction(),
        original.as_ref(),
    )?;
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("reconstructed.pgm"));
    write(&output, encode_pgm(&result.image))?;
    let sidecar = output.with_extension("provenance.jsonl");
    let mut lines = String::new();
    for p in &result.provenance {
        lines.push_str(&serde_json::to_string(&json!({
            "cell": [p.cell.0, p.cell.1],
            "scope": p.scope,
            "height": p.height,
            "tx_id": p.tx_id.to_hex(),
            "mode": p.mode,
            "cosine": p.cosine,
            "verified": p.verified,
        }))?);
        lines.push('\n');
    }
    write(&sidecar, lines)?;
    let mut summary = json!({
        "output": output,
        "provenance": sidecar,
        "verified": result.verified,
    });
    if let Some(m) = result.metrics {
        summary["psnr"] = json!(m.psnr);
        summary["ssim"] = json!(m.ssim);
        summary["cosine"] = json!(m.cosine);
        summary["loss_total"] = json!(m.losses.total);
    }
    println!("{summary}");
    Ok(if result.verified { 0 } else { EXIT_VERIFY })
}

fn verify_cmd(cfg: &ExperimentConfig, args: &VerifyArgs) -> Result<u8> {
    let dir = args.dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let report = match verify_dir(&dir)? {
        VerifyOutcome::NoLedgers => {
            println!("no ledgers found in {}", dir.display());
            return Ok(EXIT_NOTHING);
        }
        VerifyOutcome::Unavailable => {
            println!("verification unavailable: fingerprint anchoring was disabled for this run");
            return Ok(EXIT_NOTHING);
        }
        VerifyOutcome::Report(r) => r,
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for s in &report.scopes {
            match &s.problem {
                None => println!("PASS {} ({} replicas)", s.scope, s.replicas),
                Some((h, why)) => println!("FAIL {} height {h}: {why}", s.scope),
            }
        }
        for item in report.items.iter().filter(|i| !i.ok) {
            println!(
                "FAIL {}: {}",
                item.path,
                item.reason.as_deref().unwrap_or("")
            );
        }
        println!(
            "verification {:.2}% ({}/{})",
            100.0 * report.rate(),
            report.passed,
            report.total
        );
    }
    Ok(if report.all_ok() { 0 } else { EXIT_VERIFY })
}

fn topology_cmd(cfg: &ExperimentConfig) -> Result<u8> {
    let (graph, roles) = overlay(cfg)?;
    let path = cfg.output_dir.join("topology.edges");
    write(&path, graph.to_edge_list())?;
    println!(
        "{}",
        json!({
            "nodes": graph.node_count(),
            "edges": graph.edges().len(),
            "mean_degree": graph.mean_degree(),
            "degrees": graph.degrees(),
            "leaders": roles.leaders,
            "edge_list": path,
        })
    );
    Ok(0)
}

fn parse_fault(s: &str) -> Result<(usize, FaultMode)> {
    let (rank, mode) = s
        .split_once('=')
        .with_context(|| format!("fault `{s}` is not rank=mode"))?;
    let mode: FaultMode = serde_json::from_value(json!(mode))
        .with_context(|| format!("unknown fault mode `{mode}`"))?;
    Ok((
        rank.parse().with_context(|| format!("bad rank in `{s}`"))?,
        mode,
    ))
}

fn consensus_cmd(cfg: &ExperimentConfig, args: &SimArgs) -> Result<u8> {
    let mut sim: SimConfig = cfg.sim_config();
    if let Some(p) = args.ranks {
        sim.ranks = p;
    }
    if let Some(f) = args.faults {
        sim.faults = f;
    }
    for entry in &args.inject {
        let (rank, mode) = parse_fault(entry)?;
        sim = prosima::consensus::inject_fault(&sim, rank, mode)?;
    }
    let (graph, _) = overlay(cfg)?;
    // stamp the CSV with the settings actually simulated
    let resolved = ExperimentConfig {
        consensus: sim.clone(),
        ..cfg.clone()
    };
    let mut net = Network::new(sim, &graph)?;
    let mut csv = format!(
        "# config_sha256={}\n{TRACE_CSV_HEADER}\n",
        resolved.hash().to_hex()
    );
    let mut aborted = 0;
    for round in 0..args.rounds {
        let txs: Vec<_> = (0..args.txs)
            .map(|i| {
                let meta = Metadata::new()
                    .with("image_id", format!("sim-{round}-{}", i / cfg.grid.cells()))
                    .with("row", (i % cfg.grid.cells()) / cfg.grid.cols)
                    .with("col", i % cfg.grid.cols);
                let payload =
                    prosima::hash::Digest::of(format!("{}-{round}-{i}", cfg.seed).as_bytes());
                create_transaction(TxKind::ShardFingerprint, payload, &meta)
            })
            .collect::<Result<_, _>>()?;
        let out = net.run_round(&txs, None);
        if out.is_abort() || !out.stalled.is_empty() {
            aborted += 1;
        }
        csv.push_str(&out.trace.csv_row());
        csv.push('\n');
    }
    let safe = net.check_safety();
    let path = cfg.output_dir.join("consensus_trace.csv");
    write(&path, &csv)?;
    println!(
        "{}",
        json!({
            "rounds": args.rounds,
            "aborted_rounds": aborted,
            "safe": safe.is_ok(),
            "clock_ms": net.clock_ms(),
            "trace": path,
        })
    );
    Ok(if aborted > 0 || safe.is_err() {
        EXIT_ABORT
    } else {
        0
    })
}

fn bench_cmd(cfg: &ExperimentConfig, which: BenchKind) -> Result<u8> {
    let out = &cfg.output_dir;
    match which {
        BenchKind::Table4 => {
            let csv = run_table4(cfg)?.to_csv();
            write(&out.join("table4.csv"), &csv)?;
            print!("{csv}");
        }
        BenchKind::Scale => {
            let report = run_scalability(cfg)?;
            write(&out.join("scale.csv"), report.to_csv())?;
            write(&out.join("scale_sweep.csv"), report.sweep_csv())?;
            print!("{}{}", report.to_csv(), report.sweep_csv());
        }
        BenchKind::Robustness => {
            let csv = run_robustness(cfg)?.to_csv();
            write(&out.join("robustness.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(0)
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || matches!(c.downcast_ref::<BenchError>(), Some(BenchError::Config(_)))
            || matches!(c.downcast_ref::<RunError>(), Some(RunError::Config(_)))
    })
}

fn run(cli: &Cli) -> Result<u8> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Fragment(a) => fragment_cmd(&cfg, a),
        Command::Anchor(a) => anchor_cmd(cfg.clone(), a),
        Command::Reconstruct(a) => reconstruct_cmd(&cfg, a),
        Command::Verify(a) => verify_cmd(&cfg, a),
        Command::Topology => topology_cmd(&cfg),
        Command::ConsensusSim(a) => consensus_cmd(&cfg, a),
        Command::Bench { which } => bench_cmd(&cfg, *which),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { 1 })
        }
    }
}
