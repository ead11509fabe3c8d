use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use residual_probe_cli::config::{parse_metrics, parse_window, ConfigMap, ExperimentConfig};
use residual_probe_cli::{cmd_analyze, cmd_gen_seq, cmd_probe, AnalyzeOptions, CliError, CliResult, LayerSel, Mode};

/// Single-token perturbation probes of the residual stream.
///
/// Exit codes: 0 ok, 2 config error, 3 load error, 4 numeric error.
#[derive(Parser)]
#[command(name = "residual-probe", version)]
struct Cli {
    /// Log progress to stderr (or set RUST_LOG).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a batch of repeated random-token sequences as JSON.
    GenSeq {
        #[command(flatten)]
        common: Common,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe a model at one or more strengths and write result containers.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Model dtype: f32 or f64.
        #[arg(long)]
        dtype: Option<String>,
        /// Read tokens from a gen-seq batch file instead of generating them.
        #[arg(long)]
        sequences: Option<String>,
        /// Comma-separated strengths in (0, 1].
        #[arg(long)]
        eps: Option<String>,
        /// Reference strength; must be one of --eps.
        #[arg(long)]
        eps0: Option<String>,
        /// all | stride:<n> | list:<i,j,..>
        #[arg(long)]
        positions: Option<String>,
        /// Token id prepended to every sequence and never perturbed.
        #[arg(long)]
        bos: Option<String>,
        /// Output directory (default probe-out).
        #[arg(long)]
        out: Option<String>,
    },
    /// Analyze probe results (files or probe output directories).
    Analyze {
        /// response-fn | scaling | increments | onset | orthogonality
        #[arg(long)]
        mode: String,
        /// Reads eps0, metrics, dj_window and out from a config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of delta, phi, theta.
        #[arg(long)]
        metrics: Option<String>,
        /// Reference strength (default: the largest present).
        #[arg(long)]
        eps0: Option<String>,
        /// Offset for increments (default T0-1).
        #[arg(long)]
        dj: Option<usize>,
        /// Residual positions for scaling: final | all | <index>.
        #[arg(long, default_value = "final")]
        layer: String,
        /// Offset window for onset as lo,hi (default T0-5,T0+5).
        #[arg(long)]
        dj_window: Option<String>,
        /// Smallest offset entering the orthogonality maximum.
        #[arg(long, default_value_t = 1)]
        min_dj: usize,
        /// Output directory (default analysis).
        #[arg(long)]
        out: Option<String>,
        /// Result files or probe output directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// toy[:V[,beta[,copy_gain[,onehot]]]]
    #[arg(long, conflicts_with = "weights")]
    model: Option<String>,
    /// GPT-2 checkpoint; relative paths also resolve under $RESIDUAL_PROBE_CACHE.
    #[arg(long)]
    weights: Option<String>,
    /// Head count for checkpoints (default d_model / 64).
    #[arg(long)]
    n_heads: Option<String>,
    /// Length of the random half; sequences have length 2*t0 (default 16).
    #[arg(long)]
    t0: Option<String>,
    /// Number of sequences (default 8).
    #[arg(long)]
    batch: Option<String>,
    /// RNG seed (default 0).
    #[arg(long)]
    seed: Option<String>,
    /// Token vocabulary (default: the model vocabulary).
    #[arg(long)]
    vocab: Option<String>,
    /// Sample ids below this bound only, e.g. to skip special tokens.
    #[arg(long)]
    vocab_limit: Option<String>,
}

impl Common {
    fn into_map(self) -> CliResult<ConfigMap> {
        let mut map = match &self.config {
            Some(p) => ConfigMap::load(p)?,
            None => ConfigMap::default(),
        };
        if self.model.is_some() || self.weights.is_some() {
            // a model flag replaces whichever model the file named
            map.remove("model");
            map.remove("weights");
        }
        map.set("model", self.model);
        map.set("weights", self.weights);
        map.set("n_heads", self.n_heads);
        map.set("t0", self.t0);
        map.set("batch", self.batch);
        map.set("seed", self.seed);
        map.set("vocab", self.vocab);
        map.set("vocab_limit", self.vocab_limit);
        Ok(map)
    }
}

/// Writes a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenSeq { common, out } => {
            let batch = cmd_gen_seq(&common.into_map()?, out.as_deref())?;
            if out.is_none() {
                emit(&batch.to_json()?);
            }
        }
        Command::Probe {
            common,
            dtype,
            sequences,
            eps,
            eps0,
            positions,
            bos,
            out,
        } => {
            let mut map = common.into_map()?;
            map.set("dtype", dtype);
            map.set("sequences", sequences);
            map.set("eps", eps);
            map.set("eps0", eps0);
            map.set("positions", positions);
            map.set("bos", bos);
            map.set("out", out);
            let cfg = ExperimentConfig::from_map(&map)?;
            let manifest = cmd_probe(&cfg)?;
            for r in &manifest.results {
                emit(&cfg.out.join(&r.file).display().to_string());
            }
            eprintln!("wall time {:.2}s", manifest.wall_time_s);
        }
        Command::Analyze {
            mode,
            config,
            metrics,
            eps0,
            dj,
            layer,
            dj_window,
            min_dj,
            out,
            inputs,
        } => {
            let mut map = match &config {
                Some(p) => ConfigMap::load(p)?,
                None => ConfigMap::default(),
            };
            map.set("metrics", metrics);
            map.set("eps0", eps0);
            map.set("dj_window", dj_window);
            map.set("out", out);
            let mut opts = AnalyzeOptions::new(Mode::parse(&mode)?, map.get("out").unwrap_or("analysis"));
            opts.metrics = map.get("metrics").map(parse_metrics).transpose()?;
            opts.eps0 = map
                .get("eps0")
                .map(|e| e.parse::<f64>().map_err(|_| CliError::Config(format!("bad eps0 `{e}`"))))
                .transpose()?;
            opts.dj = dj;
            opts.layer = LayerSel::parse(&layer)?;
            opts.dj_window = map.get("dj_window").map(parse_window).transpose()?;
            opts.min_dj = min_dj;
            for path in cmd_analyze(&inputs, &opts)? {
                emit(&path.display().to_string());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
