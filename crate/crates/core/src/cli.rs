//! The `subeq` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::env::{EnvConfig, RMode};
use crate::error::Result;
use crate::morphology::registry;
use crate::set::SetConfig;
use crate::td3::{evaluate, evaluate_random, evaluate_rotated, Td3Config, Td3Trainer};
use crate::variants::{make_variant, Variant, VariantKind};
use crate::verify::run_suite;

#[derive(Debug, Parser)]
#[command(name = "subeq", version, about = "Gravity-aware transformer policies for modular locomotion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy with TD3 and write a checkpoint and metrics.
    Train(TrainArgs),
    /// Mean return of a saved policy.
    Eval(EvalArgs),
    /// Run the symmetry, gradient and environment checks.
    Verify(VerifyArgs),
    /// Parse and validate a morphology description.
    MorphCheck(MorphArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// The full-size network.
    Paper,
    /// A small network that trains in minutes on one core.
    Desk,
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    /// Registry name or path to a morphology file.
    #[arg(long, default_value = "3d_hopper_5_full")]
    pub morph: String,
    /// Target placement: `far` or `v2`.
    #[arg(long, default_value = "far")]
    pub r_mode: RMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluation episodes.
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "SET")]
    pub variant: VariantKind,
    /// Wrap the policy in heading normalisation.
    #[arg(long)]
    pub hn: bool,
    #[arg(long, default_value_t = 0.0)]
    pub hn_bias_deg: f64,
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub qk_width: Option<usize>,
    #[arg(long)]
    pub matrix_side: Option<usize>,
    #[arg(long)]
    pub matrix_hidden: Option<usize>,
    #[arg(long)]
    pub c_m: Option<usize>,
    #[arg(long)]
    pub c_u: Option<usize>,
    /// Constant attention logit added between neighbouring limbs.
    #[arg(long)]
    pub edge_bias: Option<f64>,
}

impl ModelArgs {
    pub fn set_config(&self) -> SetConfig {
        let mut c = match self.preset {
            Preset::Paper => SetConfig::default(),
            Preset::Desk => SetConfig::desk(),
        };
        let pick = |v: Option<usize>, d: usize| v.unwrap_or(d);
        c.layers = pick(self.layers, c.layers);
        c.heads = pick(self.heads, c.heads);
        c.width = pick(self.width, c.width);
        c.qk_width = pick(self.qk_width, c.qk_width);
        c.matrix_side = pick(self.matrix_side, c.matrix_side);
        c.matrix_hidden = pick(self.matrix_hidden, c.matrix_hidden);
        c.c_m = pick(self.c_m, c.c_m);
        c.c_u = pick(self.c_u, c.c_u);
        c.edge_bias = self.edge_bias.unwrap_or(c.edge_bias);
        c
    }

    pub fn variant(&self) -> Variant {
        Variant { kind: self.variant, hn: self.hn, hn_bias: self.hn_bias_deg.to_radians() }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 50_000)]
    pub steps: u64,
    #[arg(long, value_parser = checkpoint_path)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.005)]
    pub tau: f64,
    #[arg(long, default_value_t = 2)]
    pub policy_delay: u64,
    #[arg(long, default_value_t = 0.1)]
    pub expl_noise: f64,
    #[arg(long, default_value_t = 0.2)]
    pub target_noise: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_clip: f64,
    #[arg(long, default_value_t = 1000)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0.1)]
    pub grad_clip: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, value_parser = checkpoint_path, required = true)]
    pub checkpoint: PathBuf,
    /// Rotate every initial state about gravity by this many degrees.
    #[arg(long, default_value_t = 0.0)]
    pub rotate_deg: f64,
    /// Also report the uniform-random baseline.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "SET")]
    pub variant: VariantKind,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MorphArgs {
    #[arg(long)]
    pub morph: String,
}

fn checkpoint_path(s: &str) -> std::result::Result<PathBuf, String> {
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        Err(format!("`{s}` is not a checkpoint path"))
    } else {
        Ok(PathBuf::from(s))
    }
}

impl EnvArgs {
    fn env_config(&self) -> Result<EnvConfig> {
        let mut cfg = EnvConfig::new(registry::resolve(&self.morph)?);
        cfg.r_mode = self.r_mode;
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let env_cfg = a.env.env_config()?;
    let spec = make_variant(a.model.variant(), &a.model.set_config())?;
    let td3 = Td3Config {
        lr: a.lr,
        grad_clip: a.grad_clip,
        batch: a.batch,
        gamma: a.gamma,
        tau: a.tau,
        policy_delay: a.policy_delay,
        expl_noise: a.expl_noise,
        target_noise: a.target_noise,
        noise_clip: a.noise_clip,
        warmup: a.warmup,
        total_steps: a.steps,
        eval_episodes: a.env.episodes,
        seed: a.env.seed,
        ..Td3Config::default()
    };
    let mut trainer = Td3Trainer::new(env_cfg.clone(), spec, td3)?;
    let episodes = match &a.metrics_out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            let m = trainer.run(Some(&mut w))?;
            w.flush()?;
            m
        }
        None => trainer.run(None)?,
    };
    if let Some(path) = &a.checkpoint {
        Checkpoint::from_trainer(&trainer).save(path)?;
        writeln!(out, "checkpoint {}", path.display())?;
    }
    let eval = evaluate(&trainer.actor, &env_cfg, a.env.episodes, a.env.seed)?;
    writeln!(out, "steps {} episodes {} eval_mean_return {:.4}", trainer.step, episodes.len(), eval.mean)?;
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let env_cfg = a.env.env_config()?;
    let actor = Checkpoint::load(&a.checkpoint)?.restore_actor()?;
    let r = evaluate_rotated(&actor, &env_cfg, a.env.episodes, a.env.seed, a.rotate_deg.to_radians())?;
    for (k, ret) in r.returns.iter().enumerate() {
        writeln!(out, "episode {k} return {ret:.6}")?;
    }
    writeln!(out, "mean_return {:.6}", r.mean)?;
    if a.baseline {
        let b = evaluate_random(&env_cfg, a.env.episodes, a.env.seed)?;
        writeln!(out, "random_mean_return {:.6}", b.mean)?;
    }
    Ok(())
}

fn morph_check(a: &MorphArgs, out: &mut dyn Write) -> Result<()> {
    let g = registry::resolve(&a.morph)?;
    writeln!(out, "{}: {} limbs, {} edges, ok", g.name(), g.len(), g.edges().len())?;
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit status:
/// 0 on success, 1 on a failed run or verification, 2 on a usage error.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{}", e.render());
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::MorphCheck(a) => morph_check(a, out),
        Command::Verify(a) => match run_suite(a.variant, a.trials, a.seed) {
            Ok(report) => {
                let _ = write!(out, "variant {}\n{report}", a.variant);
                return if report.passed() { 0 } else { 1 };
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
