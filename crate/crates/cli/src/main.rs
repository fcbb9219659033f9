use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aumn::data::{generate_synthetic, load_manifest, Stream, Subset, MANIFEST_FILE};
use aumn::evaluation::write_report;
use aumn::inference::{read_proposals, write_proposals};
use aumn::losses::VideoLabel;
use aumn::model::{FeatureSequence, ModelDims, ModelParams};
use aumn::numerics::Matrix;
use aumn::training::{finite_difference_check, TrainingVideo};
use aumn::{Error, Result};
use aumn_cli::pipeline::{
    ablate, evaluate, foreground_auc, load_streams, run_inference, save_stream, train_stream,
};
use aumn_cli::RunConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "aumn", version, about = "Action unit memory network for weakly supervised temporal action localization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation and training (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Feature streams to use.
    #[arg(long, global = true, value_enum, default_value_t = StreamArg::Both)]
    stream: StreamArg,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StreamArg {
    Rgb,
    Flow,
    Both,
}

impl StreamArg {
    fn streams(self) -> Vec<Stream> {
        match self {
            StreamArg::Rgb => vec![Stream::Rgb],
            StreamArg::Flow => vec![Stream::Flow],
            StreamArg::Both => vec![Stream::Rgb, Stream::Flow],
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into the output directory.
    Synth,
    /// Train one model per stream on the training split.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Audit analytic gradients against central finite differences.
    Gradcheck {
        /// Number of random videos in the batch.
        #[arg(long, default_value_t = 3)]
        videos: usize,
        /// Segments per video.
        #[arg(long, default_value_t = 6)]
        length: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Localize actions in the test split with trained checkpoints.
    Infer {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `<stream>.ckpt` files.
        #[arg(long)]
        checkpoints: PathBuf,
    },
    /// Score a proposal file against the test split's ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        /// Attention file written by `infer`, for the foreground AUC.
        #[arg(long)]
        attention: Option<PathBuf>,
    },
    /// Train and score every row of the loss/self-attention ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}

enum Failure {
    Error(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(seed) = g.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("synthetic.seed={seed}"));
    }
    overrides.extend(g.overrides.iter().cloned());
    RunConfig::load(g.config.as_deref(), &overrides)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    f(&mut buf).map_err(io)?;
    std::fs::write(path, buf).map_err(io)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let g = &cli.global;
    let config = load_config(g)?;
    if config.runtime.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.runtime.threads)
            .build_global()
            .map_err(|e| Error::invalid("runtime", e.to_string()))?;
    }
    let streams = g.stream.streams();
    match &cli.command {
        Command::Synth => {
            create_dir(&g.out)?;
            let m = generate_synthetic(&config.synthetic, &g.out)?;
            println!("wrote {} videos to {}", m.records.len(), g.out.join(MANIFEST_FILE).display());
        }
        Command::Train { data } => {
            let ds = load_manifest(data)?;
            create_dir(&g.out)?;
            write_file(&g.out.join("config.toml"), |b| b.write_all(config.to_toml().as_bytes()))?;
            for &s in &streams {
                let outcome = train_stream(&ds, s, &config)?;
                save_stream(&g.out, s, &outcome)?;
                if let Some(last) = outcome.history.last() {
                    println!("{s}: {} steps, final total loss {:.6}", outcome.history.len(), last.total);
                }
            }
        }
        Command::Gradcheck {
            videos,
            length,
            step,
            tolerance,
        } => {
            let report = gradcheck(&config, *videos, *length, *step, *tolerance)?;
            println!("{report}");
            if !report.passed() {
                return Err(Failure::Check(format!(
                    "gradient check failed: max relative error {:.3e} >= {:e}",
                    report.max_rel_error(),
                    tolerance
                )));
            }
        }
        Command::Infer { data, checkpoints } => {
            let ds = load_manifest(data)?;
            let models = load_streams(checkpoints, &streams)?;
            let out = run_inference(&ds, &models, &config, Subset::Test)?;
            create_dir(&g.out)?;
            write_file(&g.out.join("proposals.tsv"), |b| write_proposals(&out.proposals, b))?;
            write_file(&g.out.join("attention.tsv"), |b| {
                writeln!(b, "video_id\tsegment\tattention")?;
                for (id, a) in &out.attention {
                    for (t, v) in a.iter().enumerate() {
                        writeln!(b, "{id}\t{t}\t{v}")?;
                    }
                }
                Ok(())
            })?;
            println!("{} proposals over {} videos", out.proposals.len(), out.attention.len());
        }
        Command::Eval {
            data,
            proposals,
            attention,
        } => {
            let ds = load_manifest(data)?;
            let file = std::fs::File::open(proposals).map_err(|e| Error::Io {
                path: proposals.clone(),
                source: e,
            })?;
            let records = read_proposals(std::io::BufReader::new(file))?;
            let table = evaluate(&ds, &records, Subset::Test)?;
            let rows = vec![("eval".to_string(), table)];
            create_dir(&g.out)?;
            write_file(&g.out.join("eval.tsv"), |b| write_report(&rows, b))?;
            write_report(&rows, std::io::stdout().lock()).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })?;
            if let Some(path) = attention {
                let att = read_attention(path)?;
                match foreground_auc(&ds, &att) {
                    Some(auc) => {
                        println!("attention_auc\t{auc:.6}");
                        write_file(&g.out.join("attention_auc.tsv"), |b| writeln!(b, "attention_auc\t{auc:.6}"))?;
                    }
                    None => log::warn!("no segment masks for the attention AUC"),
                }
            }
        }
        Command::Ablate { data } => {
            let ds = load_manifest(data)?;
            let rows = ablate(&ds, &config, &streams)?;
            create_dir(&g.out)?;
            let means: Vec<(String, _)> = rows.iter().map(|r| (r.name.to_string(), r.mean.clone())).collect();
            let seeds: Vec<(String, _)> = rows
                .iter()
                .flat_map(|r| {
                    r.per_seed
                        .iter()
                        .map(move |(s, t)| (format!("{}/seed={s}", r.name), t.clone()))
                })
                .collect();
            write_file(&g.out.join("ablation.tsv"), |b| write_report(&means, b))?;
            write_file(&g.out.join("ablation_seeds.tsv"), |b| write_report(&seeds, b))?;
            write_report(&means, std::io::stdout().lock()).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })?;
        }
    }
    Ok(())
}

/// Random small instance built from the configured model section and losses.
fn gradcheck(
    config: &RunConfig,
    videos: usize,
    length: usize,
    step: f64,
    tolerance: f64,
) -> Result<aumn::training::GradCheckReport> {
    if videos == 0 || length == 0 {
        return Err(Error::invalid("gradcheck", "videos and length must be >= 1"));
    }
    let m = &config.model;
    let dims = ModelDims {
        input_dim: 8,
        embed_dim: m.embed_dim,
        classes: 2,
        templates: m.templates,
        key_reduction: m.key_reduction,
        bottleneck: m.bottleneck,
        kernel: m.kernel,
    };
    let seed = config.train.seed;
    let params = ModelParams::init(dims, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = (0..videos)
        .map(|i| {
            Ok(TrainingVideo {
                features: FeatureSequence::new(Matrix::from_fn(length, dims.input_dim, |_, _| {
                    rng.random_range(-1.0..1.0)
                }))?,
                label: VideoLabel::from_classes(dims.classes, &[i % dims.classes])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TrainingVideo> = batch.iter().collect();
    finite_difference_check(&params, &refs, &config.train_config(Stream::Rgb), step, tolerance)
}

fn read_attention(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::invalid("attention file", format!("line {}: expected video_id, segment, value", i + 1));
        let mut f = line.split('\t');
        let (Some(id), Some(t), Some(v), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        let t: usize = t.parse().map_err(|_| bad())?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        match out.last_mut() {
            Some((last, a)) if last == id && a.len() == t => a.push(v),
            _ if t == 0 => out.push((id.to_string(), vec![v])),
            _ => return Err(bad()),
        }
    }
    Ok(out)
}
