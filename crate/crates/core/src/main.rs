use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sccan::checks::{self, SuiteConfig};
use sccan::config::{EpisodeSource, RunConfig};
use sccan::cost::{cost_report, CostConfig};
use sccan::episodes::Episode;
use sccan::gradcheck::GradCheckOptions;
use sccan::model::Sccan;
use sccan::train::{
    check_compatible, compare_pseudo_masks, episode_pma, evaluate, load_checkpoint,
    load_episode_dirs, save_checkpoint, synth_eval_episode, train, EpisodeSets,
};
use sccan::{sctf, Error, Result};

#[derive(Parser)]
#[command(
    name = "sccan",
    version,
    about = "Few-shot segmentation with self-calibrated cross attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on episodes, write a checkpoint and a metrics report.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval(Common),
    /// Compute aggregated and max-similarity pseudo masks.
    Pma(Common),
    /// Finite-difference gradient checks of every trainable group.
    Gradcheck(Common),
    /// Analytic FLOP and memory counts.
    Cost(CostArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    mlp_ratio: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    dtype: Option<String>,
    #[arg(long)]
    pma_threshold: Option<f64>,
    /// Episode directory, or `synth:c=..,h=..,w=..,classes=..,blob=..,noise=..,count=..,holdout=..`.
    #[arg(long)]
    episodes: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CostArgs {
    #[command(flatten)]
    common: Common,
    /// Feature map height; defaults to the synthetic spec's.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags: [(&str, Option<String>); 14] = [
            ("blocks", self.blocks.map(|v| v.to_string())),
            ("window", self.window.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("dim", self.dim.map(|v| v.to_string())),
            ("mlp_ratio", self.mlp_ratio.map(|v| v.to_string())),
            ("shots", self.shots.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("dtype", self.dtype.clone()),
            ("pma_threshold", self.pma_threshold.map(|v| v.to_string())),
            ("episodes", self.episodes.clone()),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            (
                "checkpoint",
                self.checkpoint.as_ref().map(|p| p.display().to_string()),
            ),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        Ok(cfg)
    }
}

/// Prints `key=value` lines and writes them to `out/<name>`.
fn report(cfg: &RunConfig, name: &str, lines: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in cfg.to_key_values().iter().chain(lines) {
        text.push_str(&format!("{k}={v}\n"));
    }
    print!("{text}");
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join(name);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let sets = EpisodeSets::from_config(cfg)?;
    let (model, mut store) = Sccan::new(cfg.model(sets.channels), cfg.seed)?;
    store.to_dtype(cfg.dtype);
    let r = train(cfg, &model, &mut store, &sets, |s| {
        let miou = s
            .train_miou
            .map_or("undefined".into(), |v| format!("{v:.6}"));
        eprintln!(
            "epoch {} loss {:.6} train_miou {miou}",
            s.epoch, s.mean_loss
        );
    })?;
    let ckpt = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("checkpoint"));
    save_checkpoint(&ckpt, &model, &store)?;
    let mut lines = vec![
        ("checkpoint".to_string(), ckpt.display().to_string()),
        ("steps".to_string(), r.losses.len().to_string()),
    ];
    for s in &r.epochs {
        lines.push((
            format!("epoch_{}.loss", s.epoch),
            format!("{:.6}", s.mean_loss),
        ));
        let miou = s
            .train_miou
            .map_or("undefined".into(), |v| format!("{v:.6}"));
        lines.push((format!("epoch_{}.train_miou", s.epoch), miou));
    }
    lines.extend(
        r.eval
            .key_values()
            .into_iter()
            .map(|(k, v)| (format!("eval.{k}"), v)),
    );
    report(cfg, "train_report.txt", &lines)
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let ckpt = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let sets = EpisodeSets::from_config(cfg)?;
    let (model, store) = load_checkpoint(ckpt)?;
    check_compatible(&model, cfg, sets.channels)?;
    let acc = evaluate(&model, &store, &sets.eval)?;
    report(cfg, "eval_report.txt", &acc.key_values())
}

fn pma_episodes(cfg: &RunConfig) -> Result<Vec<(String, Episode)>> {
    match (&cfg.episodes, cfg.synth()) {
        (_, Some(src)) => (0..src.count as u64)
            .map(|i| {
                Ok((
                    format!("synth_{i:04}"),
                    synth_eval_episode(&src, cfg.seed, i)?,
                ))
            })
            .collect(),
        (EpisodeSource::Dir(dir), None) => {
            let eps = load_episode_dirs(dir)?;
            Ok(eps
                .into_iter()
                .enumerate()
                .map(|(i, e)| (format!("episode_{i:04}"), e))
                .collect())
        }
        (EpisodeSource::Synth(_), None) => unreachable!("synthetic sources always yield a spec"),
    }
}

fn cmd_pma(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let episodes = pma_episodes(cfg)?;
    let mut lines = Vec::new();
    let write_masks = matches!(cfg.episodes, EpisodeSource::Dir(_));
    for (name, ep) in &episodes {
        let r = episode_pma(ep, cfg.pma_threshold)?;
        if write_masks {
            let dir = cfg.out.join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            sctf::save(&r.aggregated.values, dir.join("pma_aggregated.mask"))?;
            sctf::save(
                &r.max_similarity.values,
                dir.join("pma_max_similarity.mask"),
            )?;
            sctf::save(&r.aggregated_binary, dir.join("pma_aggregated_binary.mask"))?;
            sctf::save(
                &r.max_similarity_binary,
                dir.join("pma_max_similarity_binary.mask"),
            )?;
            lines.push((
                format!("{name}.aggregated_iou"),
                format!("{:.6}", r.aggregated_iou),
            ));
            lines.push((
                format!("{name}.max_similarity_iou"),
                format!("{:.6}", r.max_similarity_iou),
            ));
        }
    }
    let cmp = compare_pseudo_masks(episodes.iter().map(|(_, e)| e), cfg.pma_threshold)?;
    lines.extend([
        ("episodes".to_string(), cmp.episodes.to_string()),
        (
            "aggregated_mean_iou".to_string(),
            format!("{:.6}", cmp.aggregated_iou),
        ),
        (
            "max_similarity_mean_iou".to_string(),
            format!("{:.6}", cmp.max_similarity_iou),
        ),
    ]);
    report(cfg, "pma_report.txt", &lines)
}

/// Returns whether every group passed.
fn cmd_gradcheck(cfg: &RunConfig) -> Result<bool> {
    let (channels, side) = match cfg.synth() {
        Some(src) if src.spec.height == src.spec.width => (src.spec.channels, src.spec.height),
        Some(_) => {
            return Err(Error::Config(
                "gradient checks need a square map (h = w)".into(),
            ))
        }
        None => {
            return Err(Error::Config(
                "gradient checks need a synthetic episode source".into(),
            ))
        }
    };
    let suite = SuiteConfig {
        channels,
        side,
        window: cfg.window,
        dim: cfg.dim,
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
        seed: cfg.seed,
    };
    let groups = checks::run_all(&suite, GradCheckOptions::default())?;
    let mut lines = Vec::new();
    for g in &groups {
        let s = g.summary();
        lines.push((
            format!("{}.max_rel_error", g.group),
            format!("{:e}", s.max_rel_error),
        ));
        lines.push((format!("{}.checked", g.group), s.checked.to_string()));
        lines.push((format!("{}.passed", g.group), g.passed().to_string()));
    }
    let passed = groups.iter().all(|g| g.passed());
    lines.push(("passed".into(), passed.to_string()));
    report(cfg, "gradcheck_report.txt", &lines)?;
    Ok(passed)
}

fn cmd_cost(args: &CostArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let (h, w) = cfg
        .synth()
        .map_or((64, 64), |s| (s.spec.height, s.spec.width));
    let cost = CostConfig {
        height: args.height.unwrap_or(h),
        width: args.width.unwrap_or(w),
        window: cfg.window,
        dim: cfg.dim,
        heads: cfg.heads,
        blocks: cfg.blocks,
        mlp_ratio: cfg.mlp_ratio,
        dtype: cfg.dtype,
    };
    let r = cost_report(&cost)?;
    let mut lines = vec![
        ("height".to_string(), cost.height.to_string()),
        ("width".to_string(), cost.width.to_string()),
    ];
    lines.extend(r.key_values());
    report(&cfg, "cost_report.txt", &lines)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => cmd_train(&c.resolve()?).map(|_| true),
        Command::Eval(c) => cmd_eval(&c.resolve()?).map(|_| true),
        Command::Pma(c) => cmd_pma(&c.resolve()?).map(|_| true),
        Command::Gradcheck(c) => cmd_gradcheck(&c.resolve()?),
        Command::Cost(a) => cmd_cost(&a).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded tolerance");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
