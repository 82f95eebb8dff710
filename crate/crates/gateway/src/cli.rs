//! The `bcomm` command line.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use bcomm_core::atlas::{neighbor_label_agreement, AtlasConfig, AtlasSelector, EmbeddingAtlas};
use bcomm_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use bcomm_core::config::RunConfig;
use bcomm_core::dataset::save_atlas;
use bcomm_core::probes::{append_probe_csv, build_probe_dataset, run_probe, ProbeConfig, ProbeKind, ProbeRow};
use bcomm_core::trainer::{
    evaluate_with, init_params, streams, train, AgentMessages, EvalStats, MessageSelector, MetricsWriter,
    RandomMessages,
};
use bcomm_core::{ppo_loss_gradcheck, AttentionMode, Protocol};
use bcomm_grad::rng::{stream, stream_id};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::api::{serve, AppState};
use crate::registry::{Registry, ATLAS_FILE};
use crate::store::DEFAULT_IDLE_TIMEOUT;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "bcomm", version, about = "Train, analyse and serve broadcast-and-listen communication policies")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location; its meaning depends on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; `--out` is the checkpoint directory.
    Train,
    /// Greedy evaluation of a checkpoint; prints JSON statistics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Agents whose broadcasts are replaced by uniform vocabulary draws.
        #[arg(long, value_delimiter = ',')]
        random_agents: Vec<usize>,
        /// Agents whose broadcasts come from the checkpoint's atlas recommendation.
        #[arg(long, value_delimiter = ',')]
        atlas_agents: Vec<usize>,
    },
    /// Train and evaluate every listed protocol; `--out` is a directory.
    Sweep {
        /// Protocol labels such as no, c16, o8, b4.
        #[arg(long, value_delimiter = ',', required = true)]
        protocols: Vec<String>,
        /// Seeds per protocol, counting up from `--seed`.
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
    /// Listening, signaling and majority probes; `--out` is a CSV file.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Build the observation atlas; `--out` defaults to the checkpoint directory.
    Atlas {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Serve sessions over HTTP; `--out` is unused.
    Serve {
        /// Directory whose subdirectories are checkpoints.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = DEFAULT_IDLE_TIMEOUT.as_secs())]
        idle_timeout_secs: u64,
    },
    /// Finite-difference checks of every primitive and the full policy loss.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub protocol: String,
    pub bandwidth: usize,
    pub vocab_size: Option<u64>,
    pub mean_return: f64,
    pub std_error: Option<f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    match cli.command {
        Command::Train => {
            let cfg = run_config(&c)?;
            let out = c.out.context("train needs --out <checkpoint dir>")?;
            let ck = train_run(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&ck.manifest)?);
        }
        Command::Eval { checkpoint, episodes, random_agents, atlas_agents } => {
            let stats = eval_run(&checkpoint, episodes, c.seed.unwrap_or(0), &random_agents, &atlas_agents)?;
            emit(&stats, c.out.as_deref())?;
        }
        Command::Sweep { protocols, runs } => {
            let cfg = run_config(&c)?;
            let out = c.out.context("sweep needs --out <dir>")?;
            let protocols = protocols
                .iter()
                .map(|p| Protocol::parse_label(p))
                .collect::<Result<Vec<_>, _>>()?;
            let seed = c.seed.unwrap_or(cfg.train.seed);
            let rows = sweep_run(&cfg, &protocols, seed, runs, &out)?;
            for r in rows {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Probe { checkpoint, episodes } => {
            let probe = optional_config(&c)?.map(|r| r.probe).unwrap_or_default();
            let probe = ProbeConfig { seed: c.seed.unwrap_or(probe.seed), ..probe };
            let out = c.out.unwrap_or_else(|| checkpoint.join("probes.csv"));
            for r in probe_run(&checkpoint, episodes, &probe, &out)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Atlas { checkpoint, episodes } => {
            let atlas = optional_config(&c)?.map(|r| r.atlas).unwrap_or_default();
            let atlas = AtlasConfig { seed: c.seed.unwrap_or(atlas.seed), ..atlas };
            let out = c.out.unwrap_or_else(|| checkpoint.join(ATLAS_FILE));
            let built = atlas_run(&checkpoint, episodes, &atlas, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "path": out,
                    "entries": built.entries.len(),
                    "initial_kl": built.initial_kl,
                    "final_kl": built.final_kl,
                    "neighbor_label_agreement": neighbor_label_agreement(&built, 5)?,
                })
            );
        }
        Command::Serve { checkpoints, addr, idle_timeout_secs } => {
            let state = AppState::new(Registry::new(checkpoints), Duration::from_secs(idle_timeout_secs));
            tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
        }
        Command::Gradcheck { instances } => {
            let worst = gradcheck_run(instances, c.seed.unwrap_or(0))?;
            if worst >= 1e-4 {
                bail!("gradient check failed: max relative error {worst:.3e}");
            }
        }
    }
    Ok(())
}

fn optional_config(c: &Common) -> Result<Option<RunConfig>> {
    c.config
        .as_deref()
        .map(|p| RunConfig::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = optional_config(c)?.context("this command needs --config <run config>")?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Train per `cfg`, writing the checkpoint, `metrics.csv` and `config.json` into `out`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let metrics_path = out.join(METRICS_FILE);
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    let mut metrics = MetricsWriter::open(&metrics_path)?;
    let (policy, value) = init_params(&cfg.env, cfg.protocol, cfg.attention_mode, &cfg.train);
    let every = (cfg.train.iterations / 20).max(1);
    let outcome = train(&cfg.env, policy, value, &cfg.train, |m| {
        if m.iteration % every == 0 || m.iteration + 1 == cfg.train.iterations {
            tracing::info!(
                "{} iteration {} return {:.3} entropy {:.3}",
                cfg.protocol,
                m.iteration,
                m.mean_return,
                m.entropy
            );
        }
        metrics.append(m)
    })?;
    save_checkpoint(
        out,
        &outcome.policy,
        outcome.value.as_ref(),
        &cfg.env,
        cfg.train.iterations,
        cfg.train.seed,
    )?;
    Ok(load_checkpoint(out)?)
}

pub fn eval_run(
    checkpoint: &Path,
    episodes: usize,
    seed: u64,
    random_agents: &[usize],
    atlas_agents: &[usize],
) -> Result<EvalStats> {
    let ck = load_checkpoint(checkpoint)?;
    let n = ck.policy.arch.n_agents;
    if let Some(a) = random_agents.iter().chain(atlas_agents).find(|&&a| a >= n) {
        bail!("agent {a} does not exist (the checkpoint has {n})");
    }
    if random_agents.iter().any(|a| atlas_agents.contains(a)) {
        bail!("an agent cannot be both random and atlas-driven");
    }
    let atlas = if atlas_agents.is_empty() {
        None
    } else {
        let path = checkpoint.join(ATLAS_FILE);
        Some(bcomm_core::dataset::load_atlas(&path).with_context(|| format!("loading {}", path.display()))?)
    };
    let mut selector = Combined {
        random: (!random_agents.is_empty())
            .then(|| RandomMessages::new(ck.policy.arch.protocol, random_agents.to_vec(), seed))
            .transpose()?,
        atlas: atlas.as_ref().map(|a| AtlasSelector { atlas: a, agents: atlas_agents.to_vec(), k: 5 }),
    };
    Ok(evaluate_with(&ck.manifest.env, &ck.policy, episodes, seed, &mut selector)?)
}

struct Combined<'a> {
    random: Option<RandomMessages>,
    atlas: Option<AtlasSelector<'a>>,
}

impl MessageSelector for Combined<'_> {
    fn select(
        &mut self,
        episode: usize,
        agent: usize,
        observation: &[f64],
    ) -> Result<Option<Vec<f64>>, bcomm_core::CoreError> {
        if let Some(r) = &mut self.random {
            if let Some(m) = r.select(episode, agent, observation)? {
                return Ok(Some(m));
            }
        }
        match &mut self.atlas {
            Some(a) => a.select(episode, agent, observation),
            None => AgentMessages.select(episode, agent, observation),
        }
    }
}

pub fn sweep_run(base: &RunConfig, protocols: &[Protocol], seed: u64, runs: u64, out: &Path) -> Result<Vec<SweepRow>> {
    if runs == 0 {
        bail!("a sweep needs at least one run per protocol");
    }
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &protocol in protocols {
        let mut means = Vec::new();
        let mut last = None;
        for k in 0..runs {
            let mut cfg = RunConfig { protocol, ..*base };
            cfg.train.seed = seed + k;
            let dir = out.join(format!("{}-seed{}", protocol.label(), cfg.train.seed));
            let ck = train_run(&cfg, &dir)?;
            let stats = evaluate_with(
                &cfg.env,
                &ck.policy,
                cfg.train.eval_episodes,
                cfg.train.seed,
                &mut AgentMessages,
            )?;
            means.push(stats.mean_return);
            last = Some(stats);
        }
        let single = last.expect("at least one run");
        let (mean_return, std_error) = if runs == 1 {
            (single.mean_return, single.std_error)
        } else {
            let s = EvalStats::from_returns(means, None);
            (s.mean_return, s.std_error)
        };
        rows.push(SweepRow {
            protocol: protocol.label(),
            bandwidth: protocol.bandwidth,
            vocab_size: protocol.vocab_size().filter(|_| protocol.is_discrete()),
            mean_return,
            std_error,
        });
    }
    let path = out.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn probe_run(checkpoint: &Path, episodes: usize, config: &ProbeConfig, out: &Path) -> Result<Vec<ProbeRow>> {
    let ck = load_checkpoint(checkpoint)?;
    let records = build_probe_dataset(&ck.policy, &ck.manifest.env, episodes, config.seed)?;
    let classes = ck.policy.arch.n_actions;
    let rows = [ProbeKind::Listening, ProbeKind::Signaling, ProbeKind::Majority]
        .into_iter()
        .map(|kind| {
            let r = run_probe(&records, kind, classes, config)?;
            Ok(ProbeRow::new(&ck.policy.arch.protocol, &r, config.seed))
        })
        .collect::<Result<Vec<_>>>()?;
    append_probe_csv(out, &rows)?;
    Ok(rows)
}

pub fn atlas_run(checkpoint: &Path, episodes: usize, config: &AtlasConfig, out: &Path) -> Result<EmbeddingAtlas> {
    let ck = load_checkpoint(checkpoint)?;
    let records = build_probe_dataset(&ck.policy, &ck.manifest.env, episodes, config.seed)?;
    let pairs: Vec<_> = records
        .into_iter()
        .map(|r| (r.observation, r.message))
        .collect();
    let atlas = EmbeddingAtlas::build(&pairs, ck.policy.arch.protocol, config, ck.manifest.id.clone())?;
    save_atlas(out, &atlas)?;
    Ok(atlas)
}

/// Run both gradient suites, print one line per check, return the worst error.
pub fn gradcheck_run(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, stream_id(streams::INIT, 1, 0));
    let mut worst = 0.0f64;
    for (name, err) in bcomm_grad::check::primitive_suite(instances, &mut rng)? {
        println!("{name:<28} {err:.3e}");
        worst = worst.max(err);
    }
    let cases = [
        (Protocol::none(), AttentionMode::Learned),
        (Protocol::continuous(4), AttentionMode::Learned),
        (Protocol::onehot(4), AttentionMode::Learned),
        (Protocol::bitstring(3), AttentionMode::Learned),
        (Protocol::bitstring(3), AttentionMode::Uniform),
    ];
    for (protocol, mode) in cases {
        for _ in 0..instances {
            let r = ppo_loss_gradcheck(protocol, mode, 1e-5, &mut rng)?;
            println!("{:<28} {:.3e}", format!("policy loss {protocol} {mode:?}"), r.max_rel_error);
            worst = worst.max(r.max_rel_error);
        }
    }
    Ok(worst)
}
