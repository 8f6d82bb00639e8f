//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input. Failures print
//! a JSON [`ErrorBody`] on stderr.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use pfbdiff_core::denoiser::{UNetConfig, Weights};
use pfbdiff_core::oracle::{GaussianComponent, GaussianMixture};
use pfbdiff_core::pipeline::{reconstruct, validate_request, EditMode, EditRequest};
use pfbdiff_core::textcond::encode_prompt;

use crate::config::{defaults_dump, load_doc, EditConfigDoc};
use crate::engine::Engine;
use crate::error::ErrorBody;
use crate::service::{self, ServiceConfig};
use crate::{image_io, selftest, weights_file};

#[derive(Debug, Parser)]
#[command(name = "pfbdiff", version, about = "Training-free, mask-guided, text-driven image editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Object,
    Background,
}

impl From<ModeArg> for EditMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Object => EditMode::Object,
            ModeArg::Background => EditMode::Background,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Edit the masked region of an image to match a target prompt.
    Edit {
        /// Input image (binary PPM).
        #[arg(long)]
        image: PathBuf,
        /// Edit mask (binary PGM; values >= 128 are edited).
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        source_prompt: String,
        #[arg(long)]
        target_prompt: String,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        encode_ratio: Option<f64>,
        /// Target-prompt word whose attention is confined to the mask
        /// (repeatable).
        #[arg(long = "am-word")]
        am_words: Vec<String>,
        /// JSON document with EditConfig fields; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weights file; defaults to the built-in seeded weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode an image with DDIM and decode it again.
    Reconstruct {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write freshly seeded model weights.
    MakeWeights {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the sampler against closed-form Gaussian-mixture oracles.
    Selftest {
        /// Sampler runs per oracle check.
        #[arg(long, default_value_t = 10_000)]
        runs: usize,
        /// Extra mixture to check: a JSON list of {weight, mean, variance}.
        #[arg(long)]
        mixture: Vec<PathBuf>,
    },
    /// Print the per-mode default configurations as JSON.
    Defaults,
    /// Run the HTTP edit-job service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = service::DEFAULT_WORKERS)]
        workers: usize,
        #[arg(long, default_value_t = service::DEFAULT_QUEUE_BOUND)]
        queue: usize,
        /// Directory for result images; defaults to a fresh temporary one.
        #[arg(long)]
        results_dir: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub exit_code: i32,
    pub body: ErrorBody,
}

impl Failure {
    fn invalid(body: ErrorBody) -> Self {
        Self { exit_code: 2, body }
    }

    fn runtime(code: &str, message: impl Into<String>) -> Self {
        Self { exit_code: 1, body: ErrorBody::new(code, message) }
    }

    fn from_core(err: pfbdiff_core::Error) -> Self {
        let body = ErrorBody::from_core(err);
        Self { exit_code: if body.is_validation() { 2 } else { 1 }, body }
    }
}

fn read_image(field: &str, path: &Path, mask: bool) -> Result<pfbdiff_core::Tensor, Failure> {
    let r = if mask { image_io::read_mask(path) } else { image_io::read_image(path) };
    r.map_err(|e| match e {
        image_io::ImageError::Io(e) => Failure::runtime("io", format!("{}: {e}", path.display())),
        other => Failure::invalid(ErrorBody::field(field, "image_format", format!("{}: {other}", path.display()))),
    })
}

fn write_image(path: &Path, t: &pfbdiff_core::Tensor) -> Result<(), Failure> {
    image_io::write_image(path, t).map_err(|e| Failure::runtime("io", format!("{}: {e}", path.display())))
}

fn engine(weights: Option<&Path>) -> Result<Engine, Failure> {
    Engine::from_option(weights).map_err(|e| Failure::invalid(ErrorBody::field("weights", "weights", e.to_string())))
}

fn load_mixture(path: &Path) -> Result<GaussianMixture, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::runtime("io", format!("{}: {e}", path.display())))?;
    let comps: Vec<GaussianComponent> = serde_json::from_str(&text)
        .map_err(|e| Failure::invalid(ErrorBody::field("mixture", "bad_json", e.to_string())))?;
    GaussianMixture::new(comps).map_err(|e| Failure::invalid(ErrorBody::field("mixture", "config", e.to_string())))
}

/// Runs one command; `Ok` carries text for stdout.
pub fn execute(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::Edit {
            image,
            mask,
            source_prompt,
            target_prompt,
            mode,
            steps,
            seed,
            encode_ratio,
            am_words,
            config,
            weights,
            out,
        } => {
            let mut doc = match &config {
                Some(path) => load_doc(path).map_err(|e| Failure::invalid(ErrorBody::field("config", "bad_config", e.to_string())))?,
                None => EditConfigDoc::default(),
            };
            if let Some(m) = mode {
                doc.mode = Some(m.into());
            }
            let mut cfg = doc.resolve(EditMode::Object);
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.encode_ratio = encode_ratio.unwrap_or(cfg.encode_ratio);
            if !am_words.is_empty() {
                cfg.am_words = am_words;
            }
            let req = EditRequest {
                image: read_image("image", &image, false)?,
                mask: read_image("mask", &mask, true)?,
                source_prompt,
                target_prompt,
                config: cfg,
            };
            let engine = engine(weights.as_deref())?;
            validate_request(&req, &engine.text).map_err(|r| Failure::invalid(ErrorBody::from_report(r)))?;
            let result = engine.edit(&req).map_err(Failure::from_core)?;
            write_image(&out, &result)?;
            Ok(format!("wrote {}", out.display()))
        }
        Command::Reconstruct { image, prompt, steps, weights, out } => {
            let img = read_image("image", &image, false)?;
            let engine = engine(weights.as_deref())?;
            let cond = encode_prompt(&prompt, &engine.text).map_err(Failure::from_core)?;
            let schedule = pfbdiff_core::schedule::ScheduleConfig::default().build().map_err(Failure::from_core)?;
            let result = reconstruct(&img, &cond, steps, &engine.model, &schedule).map_err(Failure::from_core)?;
            let err = result.max_abs_diff(&img).map_err(Failure::from_core)?;
            write_image(&out, &result)?;
            Ok(format!("wrote {} (L-inf reconstruction error {err:.6})", out.display()))
        }
        Command::MakeWeights { seed, out } => {
            let w = Weights::init(&UNetConfig::default(), seed);
            weights_file::write_weights(&out, &w).map_err(|e| Failure::runtime("io", e.to_string()))?;
            Ok(format!("wrote {} tensors to {}", w.len(), out.display()))
        }
        Command::Selftest { runs, mixture } => {
            let extra = mixture
                .iter()
                .map(|p| Ok((format!("oracle-{}", p.display()), load_mixture(p)?)))
                .collect::<Result<Vec<_>, Failure>>()?;
            let results = selftest::run(runs, &extra);
            let lines: Vec<String> = results.iter().map(ToString::to_string).collect();
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                println!("{}", lines.join("\n"));
                return Err(Failure::runtime("selftest", format!("{failed} of {} checks failed", results.len())));
            }
            Ok(format!("{}\nall {} checks passed", lines.join("\n"), results.len()))
        }
        Command::Defaults => Ok(serde_json::to_string_pretty(&defaults_dump()).expect("defaults serialize")),
        Command::Serve { addr, workers, queue, results_dir, weights } => {
            let engine = Arc::new(engine(weights.as_deref())?);
            let results_dir = results_dir.unwrap_or_else(|| std::env::temp_dir().join(format!("pfbdiff-results-{}", std::process::id())));
            let cfg = ServiceConfig { workers, queue_bound: queue, results_dir };
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| Failure::runtime("io", e.to_string()))?;
            rt.block_on(service::bind_and_serve(addr, engine, cfg)).map_err(|e| Failure::runtime("io", e.to_string()))?;
            Ok(String::new())
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(text) => {
            if !text.is_empty() {
                println!("{text}");
            }
            0
        }
        Err(f) => {
            eprintln!("{}", f.body.to_json());
            f.exit_code
        }
    }
}
