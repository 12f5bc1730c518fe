mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dve", version, about = "Dense visual embedding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Gd,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SegmentModeArg {
    Text,
    Mean,
    Probe,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F32,
    F16,
}

#[derive(Subcommand)]
pub enum Command {
    /// Distill a per-pixel student from teacher volumes.
    TrainStudent {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hidden layer widths, comma separated; empty for a linear student.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        hidden: Vec<usize>,
        #[arg(long, value_enum, default_value = "adam")]
        optimizer: OptimizerArg,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        /// Start from these parameters instead of a random init.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Write the per-iteration loss history here.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Cosine distillation loss of a prediction against a masked teacher.
    Loss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Run a trained student over a feature volume.
    Predict {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        dtype: DtypeArg,
    },
    /// Closed-set segmentation of an embedding volume.
    Segment {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, value_enum)]
        mode: SegmentModeArg,
        /// Reference bank (text prompts for `text`, visual means for `mean`).
        #[arg(long)]
        refs: Option<PathBuf>,
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class visual-mean references from labeled segment records.
    RefsMean {
        #[arg(long)]
        segments: Vec<PathBuf>,
        /// Class names in class-id order.
        #[arg(long, value_delimiter = ',', required = true)]
        names: Vec<String>,
        /// Average raw rather than context-suppressed segment embeddings.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value_t = dve_core::embedding::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a linear probe on labeled embedding volumes.
    ProbeTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-class IoU and mean IoU of a predicted label map.
    EvalMiou {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<u16>,
    },
    /// Fuse posed embedding images into a 3D cell map.
    MapBuild {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = dve_core::map3d::DEFAULT_CELL_SIZE)]
        cell_size: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank map cells by similarity to a bank entry.
    MapQuery {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        query_name: String,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 100)]
        top: usize,
    },
    /// Label every map cell with a probe.
    MapClassify {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-encode an embedding volume.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        dtype: DtypeArg,
    },
    /// Print the parsed header of an artifact.
    Info { file: PathBuf },
    /// Serve the HTTP query API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Visual-mean references for `mean` segmentation.
        #[arg(long)]
        references: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    commands::run(cli.command, &mut stdout.lock())
}
