//! Command-line entry points: demonstrator datasets, Phase-1 pretraining,
//! adversarial arms, evaluation protocols, mode reports and comparison tables.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on runtime faults.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use advcurric::coordinator::{pretrain, run_arm, ArmConfig, Mode, Pretrained};
use advcurric::env::{gen_passive_dataset, DemoKind};
use advcurric::evalsuite::{read_eval_csv, report, run_protocols, write_eval_csv, write_report_csv, ArmArtifacts, ProtocolPlan};
use advcurric::fingerprint::{count_modes, mode_rows, novel_modes, write_mode_report, ModeCounts};
use advcurric::pat_buffer::PatBuffer;
use advcurric::trajectory::{load_dataset, save_dataset, Trajectory};
use advcurric::wm::WmParams;
use advcurric::Error;

#[derive(Parser)]
#[command(name = "advcurric", version, about = "Adversarial curriculum for a diffusion-forcing world model")]
struct Cli {
    /// Log progress at info level (debug with -vv).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scripted demonstrator dataset.
    GenDemos {
        #[arg(long, default_value = "walker")]
        kind: String,
        #[arg(long, default_value_t = 256)]
        episodes: usize,
        #[arg(long, default_value_t = 12)]
        len: usize,
        #[arg(long, default_value_t = 100)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 1: passive pretraining of the world model and the reference policy.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 2: one arm of the adversarial loop.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output of `pretrain`; pretrains in-process when absent.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score Phase 1 and every arm under all evaluation protocols.
    Eval {
        #[arg(long)]
        pretrained: PathBuf,
        /// NAME=RUN_DIR, repeatable.
        #[arg(long = "arm", value_parser = parse_named)]
        arms: Vec<(String, PathBuf)>,
        #[arg(long, default_value = "run0")]
        run_id: String,
        #[arg(long, default_value_t = ProtocolPlan::default().heldout)]
        heldout: usize,
        #[arg(long, default_value_t = ProtocolPlan::default().reference)]
        reference: usize,
        #[arg(long, default_value_t = ProtocolPlan::default().long)]
        long: usize,
        #[arg(long, default_value_t = ProtocolPlan::default().seed)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count action-fingerprint modes and list strictly novel ones.
    Fingerprint {
        /// Passive trajectory directory.
        #[arg(long)]
        passive: PathBuf,
        /// NAME=RUN_DIR, repeatable; the buffer of each run is fingerprinted.
        #[arg(long = "arm", value_parser = parse_named)]
        arms: Vec<(String, PathBuf)>,
        /// Arms whose modes count as already known, besides passive data.
        #[arg(long = "known", default_values_t = ["frozen_ref".to_string()])]
        known: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare arms against a baseline arm from one or more eval CSVs.
    Report {
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
        #[arg(long, default_value = "phase1")]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` arm configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// KEY=VALUE override applied after the file, repeatable.
    #[arg(long = "set", value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

impl ConfigArgs {
    fn resolve(&self) -> advcurric::Result<ArmConfig> {
        let mut cfg = match &self.config {
            Some(p) => ArmConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
                other => other,
            })?,
            None => ArmConfig::default(),
        };
        let unknown: Vec<&str> = self
            .set
            .iter()
            .filter_map(|(k, v)| match cfg.set(k, v) {
                Ok(true) => None,
                Ok(false) => Some(Ok(k.as_str())),
                Err(e) => Some(Err(e)),
            })
            .collect::<advcurric::Result<_>>()?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    parse_kv(s).map(|(k, v)| (k, PathBuf::from(v)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(2),
                Some(Error::Aborted { path, .. }) => {
                    eprintln!("state persisted to {}", path.display());
                    ExitCode::from(3)
                }
                _ => ExitCode::from(3),
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenDemos {
            kind,
            episodes,
            len,
            seed,
            out,
        } => {
            let kind: DemoKind = kind.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
            let data = gen_passive_dataset(kind, episodes, len, seed)?;
            save_dataset(&out, &data)?;
            println!("wrote {} {} episodes to {}", data.len(), kind.name(), out.display());
        }
        Command::Pretrain { cfg, out } => {
            let cfg = cfg.resolve()?;
            let pre = pretrain(&cfg)?;
            pre.save(&out)?;
            report_pretrain(&pre, &out);
        }
        Command::Run { cfg, pretrained, out } => {
            let cfg = cfg.resolve()?;
            let pre = match &pretrained {
                Some(dir) => Pretrained::load(dir).with_context(|| format!("loading {}", dir.display()))?,
                None => {
                    let pre = pretrain(&cfg)?;
                    pre.save(&out.join("pretrained"))?;
                    pre
                }
            };
            if cfg.mode == Mode::Phase1 {
                pre.save(&out)?;
                report_pretrain(&pre, &out);
                return Ok(());
            }
            let outcome = run_arm(&cfg, &pre, &out)?;
            let last = outcome.state.metrics.last();
            println!(
                "arm {} finished {} iterations; buffer {} entries, mean regret {:.4}; artifacts in {}",
                cfg.arm,
                outcome.state.iteration,
                outcome.state.buffer.len(),
                last.map_or(0.0, |r| r.buffer_mean_regret),
                out.display()
            );
        }
        Command::Eval {
            pretrained,
            arms,
            run_id,
            heldout,
            reference,
            long,
            seed,
            out,
        } => {
            let pre = Pretrained::load(&pretrained)?;
            let loaded = arms
                .iter()
                .map(|(name, dir)| Ok((name.clone(), load_wm(dir)?, load_buffer(dir)?)))
                .collect::<Result<Vec<_>>>()?;
            let artifacts: Vec<ArmArtifacts> = loaded
                .iter()
                .map(|(name, wm, buf)| ArmArtifacts {
                    name,
                    wm,
                    buffer: Some(buf.as_slice()),
                })
                .collect();
            let plan = ProtocolPlan {
                heldout,
                reference,
                long,
                episode_len: ProtocolPlan::default().episode_len,
                seed,
            };
            let rows = run_protocols(&run_id, &pre.wm, &artifacts, pre.reference.params(), &pre.codec, &plan)?;
            write_eval_csv(&out, &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Fingerprint {
            passive,
            arms,
            known,
            out,
        } => {
            let passive_modes = count_modes(&load_dataset(&passive)?)?;
            let counted = arms
                .iter()
                .map(|(name, dir)| Ok((name.clone(), count_modes(&load_buffer(dir)?)?)))
                .collect::<Result<Vec<(String, ModeCounts)>>>()?;
            for k in &known {
                if !counted.iter().any(|(n, _)| n == k) {
                    log::warn!("known arm {k} was not supplied");
                }
            }
            let mut sources: Vec<(&str, &ModeCounts)> = vec![("passive", &passive_modes)];
            sources.extend(counted.iter().map(|(n, m)| (n.as_str(), m)));
            write_mode_report(&out, &mode_rows(&sources))?;
            let mut references = vec![&passive_modes];
            references.extend(counted.iter().filter(|(n, _)| known.contains(n)).map(|(_, m)| m));
            let candidates: Vec<(&str, &ModeCounts)> = counted
                .iter()
                .filter(|(n, _)| !known.contains(n))
                .map(|(n, m)| (n.as_str(), m))
                .collect();
            let novel = novel_modes(&candidates, &references);
            for (label, by_arm) in &novel {
                let parts: Vec<String> = by_arm.iter().map(|(a, c)| format!("{a}={c}")).collect();
                println!("novel {label}: {}", parts.join(" "));
            }
            println!("{} novel modes; report in {}", novel.len(), out.display());
        }
        Command::Report { evals, baseline, out } => {
            let mut rows = Vec::new();
            for p in &evals {
                rows.extend(read_eval_csv(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let table = report(&rows, &baseline)?;
            write_report_csv(&out, &table)?;
            println!(
                "{:<20} {:<8} {:<10} {:<12} {:>12} {:>12} {:>9}",
                "dataset", "subset", "metric", "arm", baseline, "arm value", "delta %"
            );
            for r in &table {
                println!(
                    "{:<20} {:<8} {:<10} {:<12} {:>12.5} {:>12.5} {:>+9.2}",
                    r.dataset, r.subset_tag, r.metric, r.arm, r.baseline_value, r.arm_value, r.delta_pct
                );
            }
        }
    }
    Ok(())
}

fn report_pretrain(pre: &Pretrained, out: &Path) {
    if let (Some(first), Some(last)) = (pre.eval_log.first(), pre.eval_log.last()) {
        println!(
            "phase 1 held-out loss {:.4} at step {} -> {:.4} at step {}; artifacts in {}",
            first.1,
            first.0,
            last.1,
            last.0,
            out.display()
        );
    }
}

fn load_wm(run_dir: &Path) -> Result<WmParams> {
    let p = run_dir.join("wm.bin");
    WmParams::load(&p).with_context(|| format!("loading {}", p.display()))
}

fn load_buffer(run_dir: &Path) -> Result<Vec<Trajectory>> {
    let p = run_dir.join("buffer");
    if !p.is_dir() {
        bail!("{} has no buffer snapshot", run_dir.display());
    }
    let buf = PatBuffer::load_snapshot(&p).with_context(|| format!("loading {}", p.display()))?;
    Ok(buf.entries().iter().map(|e| e.trajectory.clone()).collect())
}
