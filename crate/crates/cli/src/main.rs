//! `projnet`: validate architectures, generate data, train, evaluate and
//! compare runs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use projnet_core::config::{self, ConfigError};
use projnet_core::metrics::{compare_reports, evaluate, significance_stars, write_overlay_ppm, MetricsError, MetricsReport};
use projnet_core::netbuild::{count_params, level_table, load_checkpoint, save_checkpoint, summary};
use projnet_core::shapes::{receptive_field, validate};
use projnet_core::synthdata::{generate_dataset, load_dataset, save_dataset, write_pgm, SynthError};
use projnet_core::train::{train, write_loss_csv, TrainConfig, TrainError};
use projnet_core::{build, ArchConfig, InputExtent, NetError, NetGraph, ShapeError};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid architecture:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Shape(Vec<ShapeError>),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Train(TrainError::NonFinite { .. }) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser)]
#[command(name = "projnet", version, about = "N-D to M-D segmentation with projective skip connections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the level table, parameter count and receptive field.
    Validate {
        #[arg(long)]
        arch: PathBuf,
        /// Input extent, e.g. 64x128x256.
        #[arg(long)]
        extent: InputExtent,
        /// Also print the per-node summary.
        #[arg(long)]
        nodes: bool,
    },
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset, writing checkpoints and loss.csv.
    Train {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint, writing report.csv, summary.txt and masks.
    Eval {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Inference tile extent; defaults to the first volume's extent.
        #[arg(long)]
        patch: Option<InputExtent>,
    },
    /// Paired Wilcoxon tests between two reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Validate { arch, extent, nodes } => cmd_validate(&arch, &extent, nodes),
        Command::Gen {
            config,
            out,
            count,
            seed,
        } => cmd_gen(&config, &out, count, seed),
        Command::Train {
            arch,
            config,
            data,
            out,
            seed,
        } => cmd_train(&arch, &config, &data, &out, seed),
        Command::Eval {
            arch,
            checkpoint,
            data,
            out,
            patch,
        } => cmd_eval(&arch, &checkpoint, &data, &out, patch),
        Command::Compare { a, b } => cmd_compare(&a, &b),
    }
}

fn read_arch(path: &Path) -> Result<ArchConfig> {
    Ok(config::parse_arch(&config::read_file(path)?)?)
}

fn build_checked(cfg: &ArchConfig, extent: &InputExtent) -> Result<NetGraph> {
    validate(cfg, extent).map_err(CliError::Shape)?;
    Ok(build(cfg, extent)?)
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: not a directory", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn cmd_validate(arch: &Path, extent: &InputExtent, nodes: bool) -> Result<()> {
    let cfg = read_arch(arch)?;
    let graph = build_checked(&cfg, extent)?;
    print!("{}", level_table(&graph).map_err(|e| CliError::Shape(vec![e]))?);
    println!("parameters: {}", count_params(&graph));
    let rf = receptive_field(&graph);
    println!("receptive field: {} (within input: {})", rf.describe(), rf.clipped());
    if nodes {
        print!("{}", summary(&graph));
    }
    Ok(())
}

fn cmd_gen(config_path: &Path, out: &Path, count: usize, seed: Option<u64>) -> Result<()> {
    let mut spec = config::parse_data(&config::read_file(config_path)?)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let samples = generate_dataset(&spec, count)?;
    save_dataset(out, &samples)?;
    println!("wrote {count} samples ({}) to {}", InputExtent(spec.extent.clone()), out.display());
    Ok(())
}

fn checkpoint_path(out: &Path, iteration: usize) -> PathBuf {
    out.join(format!("ckpt_{iteration:06}.ckpt"))
}

fn cmd_train(arch: &Path, config_path: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = read_arch(arch)?;
    let mut tc: TrainConfig = config::parse_train(&config::read_file(config_path)?)?;
    if let Some(seed) = seed {
        tc.seed = seed;
    }
    let graph = build_checked(&cfg, &InputExtent(tc.patch.clone()))?;
    require_dir(data)?;
    let samples = load_dataset(data)?;
    create_dir(out)?;

    let outcome = train(&graph, &samples, &tc, |iteration, params| {
        save_checkpoint(&checkpoint_path(out, iteration), &graph, params)?;
        Ok(())
    })?;
    let loss_path = out.join("loss.csv");
    write_file(&loss_path, |w| write_loss_csv(w, &outcome.losses))?;
    save_checkpoint(&out.join("final.ckpt"), &graph, &outcome.params)?;
    if let Some(last) = outcome.losses.last() {
        println!("iteration {}: loss {:.6}, lr {}", last.iteration, last.loss, last.lr);
    }
    println!("wrote {} and {}", loss_path.display(), out.join("final.ckpt").display());
    Ok(())
}

fn cmd_eval(arch: &Path, checkpoint: &Path, data: &Path, out: &Path, patch: Option<InputExtent>) -> Result<()> {
    let cfg = read_arch(arch)?;
    require_dir(data)?;
    let samples = load_dataset(data)?;
    let first = samples
        .first()
        .ok_or_else(|| CliError::Usage(format!("{}: empty dataset", data.display())))?;
    let extent = patch.unwrap_or_else(|| InputExtent(first.volume.shape().to_vec()));
    let graph = build_checked(&cfg, &extent)?;
    let params = load_checkpoint(checkpoint)?.into_params(&graph)?;
    create_dir(out)?;

    let eval = evaluate(&graph, &params, &samples)?;
    write_file(&out.join("report.csv"), |w| eval.report.write_csv(w))?;
    let text = eval.report.summary();
    write_file(&out.join("summary.txt"), |w| w.write_all(text.as_bytes()))?;
    for (s, pred) in samples.iter().zip(&eval.predictions) {
        let pgm = out.join(format!("{}.pred.pgm", s.id));
        let mut w = BufWriter::new(File::create(&pgm).map_err(io_err(&pgm))?);
        write_pgm(&mut w, pred)?;
        w.flush().map_err(io_err(&pgm))?;
        let ppm = out.join(format!("{}.overlay.ppm", s.id));
        let mut w = BufWriter::new(File::create(&ppm).map_err(io_err(&ppm))?);
        write_overlay_ppm(&mut w, pred, &s.mask)?;
        w.flush().map_err(io_err(&ppm))?;
    }
    print!("{text}");
    Ok(())
}

fn read_report(path: &Path) -> Result<MetricsReport> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(MetricsReport::read_csv(BufReader::new(f))?)
}

fn cmd_compare(a: &Path, b: &Path) -> Result<()> {
    let (ra, rb) = (read_report(a)?, read_report(b)?);
    let c = compare_reports(&ra, &rb, &b.display().to_string())?;
    println!("pairs: {}", ra.records.len());
    println!("mean dice: {:.4} vs {:.4}", ra.mean_dice, rb.mean_dice);
    println!("mean hd95: {:.4} vs {:.4} mm", ra.mean_hd95, rb.mean_hd95);
    println!("p(dice) = {}{}", c.p_dice, significance_stars(c.p_dice));
    println!("p(hd95) = {}{}", c.p_hd95, significance_stars(c.p_hd95));
    Ok(())
}
