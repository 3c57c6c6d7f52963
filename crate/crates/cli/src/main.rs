//! `selret`: command-line front end of the selective re-training toolkit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 segmenter failure,
//! 4 state corruption, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use selret_core::Connectivity;

#[derive(Parser)]
#[command(name = "selret", version, about = "Connectivity-based selective re-training for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ViewSet {
    /// 4 quarter turns about z times the 8 flip subsets
    Full,
    /// the 8 flip subsets only
    Flips,
    /// no augmentation
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline described by a config file
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Continue an interrupted run from its state file
    Resume {
        #[arg(long)]
        state: PathBuf,
    },
    /// Resample a volume (trilinear) or mask (nearest) to a new spacing
    Resample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// target spacing in mm: "s" or "sx,sy,sz"
        #[arg(long, value_parser = parse_spacing)]
        spacing: [f64; 3],
        /// treat the input as a binary mask
        #[arg(long)]
        mask: bool,
    },
    /// Compute foreground intensity stats or apply z-normalization
    Normalize {
        /// volume to normalize (with --output and --stats)
        #[arg(long, requires = "output", requires = "stats")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// stats JSON to apply
        #[arg(long)]
        stats: Option<PathBuf>,
        /// image and mask pairs to pool stats over: --pair IMAGE MASK
        #[arg(long, num_args = 2, value_names = ["IMAGE", "MASK"], conflicts_with = "input")]
        pair: Vec<PathBuf>,
    },
    /// Count connected components of a mask
    Components {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "26", value_parser = parse_connectivity)]
        connectivity: Connectivity,
        /// also write the label image as a 32-bit float volume
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Dice and HD95 of one prediction, or of a prediction directory over a manifest
    Evaluate {
        #[arg(long, requires = "gt", conflicts_with = "manifest")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires = "pred_dir")]
        manifest: Option<PathBuf>,
        /// directory holding one prediction bundle per case id
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// pooled or directed-max
        #[arg(long, default_value = "pooled")]
        convention: String,
    },
    /// Train a segmenter on the labeled cases of a manifest
    Train {
        /// segmenter spec JSON
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.3333333333333333,0.6666666666666666,1")]
        fractions: Vec<f64>,
    },
    /// Predict one image under every test-time view and fuse the results
    TtaPredict {
        #[arg(long)]
        segmenter: PathBuf,
        /// train job directory holding checkpoints.json
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value = "final")]
        checkpoint: String,
        #[arg(long)]
        image: PathBuf,
        /// defaults to the image file name
        #[arg(long)]
        case_id: Option<String>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        views: ViewSet,
    },
    /// Stability scores from per-checkpoint masks
    ScoreStability {
        /// one subdirectory of masks per checkpoint, named by checkpoint id
        #[arg(long)]
        pred_root: PathBuf,
        /// checkpoint ids in training order; the last one is the final mask
        #[arg(long, value_delimiter = ',', default_value = "c1,c2,final")]
        checkpoints: Vec<String>,
        #[arg(long, default_value = "26", value_parser = parse_connectivity)]
        connectivity: Connectivity,
    },
    /// Rank stability records and select pseudo-label cases
    Select {
        /// JSON list of stability records
        #[arg(long)]
        records: PathBuf,
        /// selection policy JSON; flags below override it
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        min_score: Option<f64>,
    },
    /// Demote disconnected and poorly reproduced labels, writing a new manifest
    FilterDataset {
        #[arg(long)]
        manifest: PathBuf,
        /// manifest to write; paths in it stay valid relative to the input
        #[arg(long)]
        out: PathBuf,
        /// reference predictions, one mask per case id
        #[arg(long)]
        reference_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0.85)]
        threshold: f64,
        #[arg(long, default_value = "26", value_parser = parse_connectivity)]
        connectivity: Connectivity,
    },
    /// Generate a synthetic tube-phantom dataset
    GenSynth {
        /// dataset spec JSON
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve one job directory with a built-in mock, speaking the external protocol
    MockSegmenter {
        /// segmenter spec JSON of kind threshold_mock or noisy_oracle
        #[arg(long)]
        spec: PathBuf,
        job_dir: PathBuf,
    },
}

fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [v] => Ok([v; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected 1 or 3 values, got {}", parts.len())),
    }
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    let n: u8 = s.parse().map_err(|_| format!("{s:?} is not 6, 18 or 26"))?;
    Connectivity::try_from(n).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
