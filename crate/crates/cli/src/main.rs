//! `cce`: data generation, training, NSD evaluation, inpainting and
//! gradient checks for cascade context encoders.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ExperimentConfig, UsageError};

#[derive(Parser, Debug)]
#[command(name = "cce", version, about)]
struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,

    /// Output directory (config key `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Dataset directory (config key `data_dir`).
    #[arg(long)]
    data: Option<PathBuf>,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Common {
    fn load(&self, extra: &[(&str, String)]) -> anyhow::Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(out) = &self.out {
            overrides.push(("out_dir".into(), toml_string(out)));
        }
        if let Some(data) = &self.data {
            overrides.push(("data_dir".into(), toml_string(data)));
        }
        overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn toml_string(p: &std::path::Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as PNGs plus manifest.json.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train stage 1, the cascade and/or the single-stage baseline.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: `1`, `2`, `baseline`. `2` alone needs `--stage1`.
        #[arg(long, default_value = "1,2")]
        stages: String,
        /// Existing stage-1 checkpoint to freeze under stage 2.
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Epochs (config key `epochs`).
        #[arg(long)]
        epochs: Option<usize>,
        /// Training seed (config key `train_seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Normalized squared-distortion of one or more encoders.
    EvalNsd {
        #[command(flatten)]
        common: Common,
        /// Checkpoint (`.cepk`) or cascade (`.ccas`); repeat to compare.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Reference encoder that ignores its input.
        #[arg(long, value_enum)]
        stub: Vec<Stub>,
        /// Latent dimension of stub encoders.
        #[arg(long, default_value_t = 64)]
        stub_dim: usize,
        /// Evaluate existing latent dumps listed in a manifest.
        #[arg(long = "latent-manifest")]
        latent_manifests: Vec<PathBuf>,
        /// Standardize latents per dimension first (config key `standardize`).
        #[arg(long)]
        standardize: bool,
    },
    /// Four-column PNGs: original | masked input | coarse fill | result.
    Inpaint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// PNG files or directories of PNGs; defaults to the validation split.
        #[arg(long)]
        images: Vec<PathBuf>,
        /// Number of validation images when `--images` is absent.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Mask kind; defaults to the configured training masks.
        #[arg(long, value_enum)]
        mask: Option<MaskKind>,
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate the analytic gradient of this layer index (self-test).
        #[arg(long)]
        mutate: Option<usize>,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sample masks and write them as PNGs.
    MaskPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Preview the evaluation masks instead of the training masks.
        #[arg(long)]
        eval: bool,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stub {
    /// Same latent for every input.
    Constant,
    /// Fresh standard-normal latent on every call.
    Noise,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Central,
    RandomBlocks,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()?;
    }
    let command_line = std::env::args().collect::<Vec<_>>().join(" ");
    match cli.command {
        Command::GenData { common } => commands::gen_data(&common.load(&[])?, &command_line),
        Command::Train {
            common,
            stages,
            stage1,
            epochs,
            seed,
        } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                extra.push(("epochs", e.to_string()));
            }
            if let Some(s) = seed {
                extra.push(("train_seed", s.to_string()));
            }
            let cfg = common.load(&extra)?;
            commands::train(&cfg, &stages, stage1.as_deref(), &command_line)
        }
        Command::EvalNsd {
            common,
            models,
            stub,
            stub_dim,
            latent_manifests,
            standardize,
        } => {
            let extra = if standardize {
                vec![("standardize", "true".to_string())]
            } else {
                vec![]
            };
            let cfg = common.load(&extra)?;
            commands::eval_nsd(
                &cfg,
                &commands::EvalInputs {
                    models,
                    stubs: stub,
                    stub_dim,
                    latent_manifests,
                },
                &command_line,
            )
        }
        Command::Inpaint {
            common,
            model,
            images,
            count,
            mask,
            mask_seed,
        } => commands::inpaint(
            &common.load(&[])?,
            &model,
            &images,
            count,
            mask,
            mask_seed,
            &command_line,
        ),
        Command::GradCheck {
            seed,
            mutate,
            report,
        } => commands::grad_check(seed, mutate, report.as_deref()),
        Command::MaskPreview {
            common,
            count,
            seed,
            eval,
        } => commands::mask_preview(&common.load(&[])?, count, seed, eval, &command_line),
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || matches!(
                e.downcast_ref::<cce_core::Error>(),
                Some(
                    cce_core::Error::InvalidConfig(_)
                        | cce_core::Error::InvalidSpec(_)
                        | cce_core::Error::OddDimension { .. }
                )
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_usage(&err) { 1 } else { 2 })
        }
    }
}
