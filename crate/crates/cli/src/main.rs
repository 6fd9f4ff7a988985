use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use foldpc::bitstream::Bitstream;
use foldpc::fold::{ModelDims, TrainConfig};
use foldpc::image::{bits_per_point, CodecChoice, ExternalCodec, DEFAULT_QPS, MAX_QP};
use foldpc::mapping::{DEFAULT_DELTA_MIN, DEFAULT_MAX_ROUNDS};
use foldpc::pipeline::{ablation_from_states, decode_detailed, encode_detailed, evaluate_stage, reconstruct_all, PipelineConfig, Stage, DEFAULT_K};
use foldpc::refine::RefineConfig;
use foldpc::{load_ply, save_ply, Error, PlyFormat};

const EXIT_FAILURE: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_CHECKSUM: u8 = 3;
const EXIT_CODEC: u8 = 4;
const EXIT_DETERMINISM: u8 = 5;

/// Point cloud attribute codec built on a folded 2D grid.
///
/// Exit codes: 0 ok, 1 other failure, 2 parse error, 3 geometry checksum
/// mismatch, 4 external image codec failure, 5 determinism violation.
/// The external BPG tools are located through FOLDPC_BPGENC and
/// FOLDPC_BPGDEC (default: `bpgenc` and `bpgdec` on PATH).
#[derive(Parser, Debug)]
#[command(name = "foldpc", version)]
struct Cli {
    /// Worker threads (0 = all cores). Output does not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode the colors of a PLY cloud into a bitstream.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Decode colors for a geometry PLY and write a colored PLY.
    Decode {
        geometry: PathBuf,
        bitstream: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = OutFormat::Binary)]
        format: OutFormat,
    },
    /// Rate/distortion table over QPs as CSV: qp,bpp,y_psnr,stage.
    Sweep {
        input: PathBuf,
        /// Comma-separated QP list.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_QPS)]
        qps: Vec<u8>,
        /// Stages to evaluate.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [StageArg::Optimized])]
        stages: Vec<StageArg>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Mapping-only distortion after each stage as CSV:
    /// stage,y_psnr,cells,occupancy_histogram.
    Ablate {
        input: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run the embedded oracle checks.
    Selftest,
}

#[derive(Args, Debug, Clone)]
struct PipelineArgs {
    /// Training iterations.
    #[arg(long, default_value_t = TrainConfig::default().iterations)]
    iterations: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    /// Seed for weight initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encoder layer widths; the last one is the codeword length.
    #[arg(long, value_parser = parse_widths::<4>, default_value = "128,128,128,128")]
    encoder_widths: [usize; 4],
    /// Hidden widths of each folding layer.
    #[arg(long, value_parser = parse_widths::<2>, default_value = "64,64")]
    folding_widths: [usize; 2],
    /// Refinement inertia in [0,1].
    #[arg(long, default_value_t = RefineConfig::default().alpha)]
    alpha: f64,
    #[arg(long, default_value_t = RefineConfig::default().iterations)]
    refine_iterations: usize,
    /// Candidate neighbors for occupancy-aware mapping.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Relative occupancy improvement below which grid expansion stops.
    #[arg(long, default_value_t = DEFAULT_DELTA_MIN)]
    delta_min: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    max_rounds: usize,
    #[arg(long, value_enum, default_value_t = CodecArg::Bpg)]
    codec: CodecArg,
    /// BPG quantization parameter.
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u8).range(0..=MAX_QP as i64))]
    qp: u8,
    /// Split clouds into patches of at most this many points (0 = one patch).
    #[arg(long, default_value_t = 0)]
    max_points: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum CodecArg {
    Lossless,
    Bpg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum OutFormat {
    Ascii,
    Binary,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum StageArg {
    Folded,
    Refined,
    Optimized,
}

impl StageArg {
    fn stage(self) -> Stage {
        match self {
            StageArg::Folded => Stage::Folded,
            StageArg::Refined => Stage::Refined,
            StageArg::Optimized => Stage::Optimized,
        }
    }
}

fn parse_widths<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected {N} comma-separated widths, got {}", v.len()))
}

impl PipelineArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            train: TrainConfig {
                iterations: self.iterations,
                learning_rate: self.learning_rate,
                seed: self.seed,
                dims: ModelDims {
                    encoder: self.encoder_widths,
                    folding_hidden: self.folding_widths,
                },
                ..TrainConfig::default()
            },
            refine: RefineConfig {
                alpha: self.alpha,
                iterations: self.refine_iterations,
            },
            k: self.k,
            delta_min: self.delta_min,
            max_rounds: self.max_rounds,
            codec: match self.codec {
                CodecArg::Lossless => CodecChoice::LosslessBaseline,
                CodecArg::Bpg => CodecChoice::ExternalBpg { qp: self.qp },
            },
            max_points: self.max_points,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return EXIT_FAILURE;
    };
    match e.root() {
        Error::PlyParse { .. } | Error::NoAttributes | Error::Bitstream(_) | Error::CorruptPayload(_) | Error::InvalidArgument(_) => EXIT_PARSE,
        Error::ChecksumMismatch { .. } => EXIT_CHECKSUM,
        Error::CodecMissing { .. } | Error::CodecFailed { .. } => EXIT_CODEC,
        Error::DeterminismViolation { .. } => EXIT_DETERMINISM,
        _ => EXIT_FAILURE,
    }
}

fn json_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "null".into()
    }
}

fn csv_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

fn cmd_encode(input: PathBuf, output: PathBuf, args: PipelineArgs) -> anyhow::Result<()> {
    let start = Instant::now();
    let pc = load_ply(&input)?;
    let cfg = args.config();
    let (bs, patches) = encode_detailed(&pc, &cfg, &ExternalCodec::from_env())?;
    let bytes = bs.to_bytes()?;
    std::fs::write(&output, &bytes).with_context(|| format!("writing {}", output.display()))?;
    let lossless = patches.iter().all(|p| p.state.expansion.table.is_lossless());
    println!(
        "{{\"points\":{},\"patches\":{},\"bytes\":{},\"bpp\":{},\"lossless_mapping\":{},\"seconds\":{}}}",
        pc.len(),
        patches.len(),
        bytes.len(),
        json_number(bits_per_point(bytes.len(), pc.len())?),
        lossless,
        json_number(start.elapsed().as_secs_f64())
    );
    Ok(())
}

fn cmd_decode(geometry: PathBuf, bitstream: PathBuf, output: PathBuf, format: OutFormat) -> anyhow::Result<()> {
    let start = Instant::now();
    let geo = load_geometry(&geometry)?;
    let bytes = std::fs::read(&bitstream).with_context(|| format!("reading {}", bitstream.display()))?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let (colors, _) = decode_detailed(&geo, &bs, &ExternalCodec::from_env())?;
    let pc = foldpc::PointCloud::new(geo, colors)?;
    let format = match format {
        OutFormat::Ascii => PlyFormat::Ascii,
        OutFormat::Binary => PlyFormat::BinaryLittleEndian,
    };
    save_ply(&pc, &output, format)?;
    println!(
        "{{\"points\":{},\"seconds\":{}}}",
        pc.len(),
        json_number(start.elapsed().as_secs_f64())
    );
    Ok(())
}

/// Geometry only; colors in the file, if any, are ignored.
fn load_geometry(path: &PathBuf) -> anyhow::Result<Vec<foldpc::Point3>> {
    match load_ply(path) {
        Ok(pc) => Ok(pc.into_parts().0),
        Err(Error::NoAttributes) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(foldpc::ply::read_ply_geometry(&bytes)?)
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_sweep(input: PathBuf, qps: Vec<u8>, stages: Vec<StageArg>, args: PipelineArgs) -> anyhow::Result<bool> {
    let pc = load_ply(&input)?;
    let cfg = args.config();
    let states = reconstruct_all(&pc, &cfg)?;
    let ext = ExternalCodec::from_env();
    let jobs: Vec<(StageArg, u8)> = stages.iter().flat_map(|&s| qps.iter().map(move |&q| (s, q))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(s, qp)| {
            let codec = CodecChoice::ExternalBpg { qp };
            codec.validate().and_then(|_| evaluate_stage(&pc, &cfg, &states, s.stage(), codec, &ext))
        })
        .collect();
    println!("qp,bpp,y_psnr,stage");
    let mut all_ok = true;
    for ((s, qp), r) in jobs.iter().zip(results) {
        match r {
            Ok(rd) => println!("{qp},{},{},{}", csv_number(rd.bpp), csv_number(rd.y_psnr), s.stage().label()),
            Err(e) => {
                all_ok = false;
                eprintln!("qp {qp} stage {}: {e}", s.stage().label());
            }
        }
    }
    Ok(all_ok)
}

fn cmd_ablate(input: PathBuf, args: PipelineArgs) -> anyhow::Result<()> {
    let pc = load_ply(&input)?;
    let cfg = args.config();
    let states = reconstruct_all(&pc, &cfg)?;
    let report = ablation_from_states(&pc, &states)?;
    println!("stage,y_psnr,cells,occupancy_histogram");
    for s in &report.stages {
        let hist: Vec<String> = s.histogram.iter().map(|c| c.to_string()).collect();
        println!("{},{},{},{}", s.stage.label(), csv_number(s.y_psnr), s.cells, hist.join(";"));
    }
    Ok(())
}

fn cmd_selftest() -> bool {
    let results = foldpc::selftest::run_all();
    for r in &results {
        println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    results.iter().all(|r| r.passed)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring worker threads")?;
    match cli.command {
        Command::Encode { input, output, pipeline } => cmd_encode(input, output, pipeline).map(|_| true),
        Command::Decode {
            geometry,
            bitstream,
            output,
            format,
        } => cmd_decode(geometry, bitstream, output, format).map(|_| true),
        Command::Sweep {
            input,
            qps,
            stages,
            pipeline,
        } => cmd_sweep(input, qps, stages, pipeline),
        Command::Ablate { input, pipeline } => cmd_ablate(input, pipeline).map(|_| true),
        Command::Selftest => Ok(cmd_selftest()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILURE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
