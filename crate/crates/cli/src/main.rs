use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cnav_core::pipeline::{
    ablation_runs, cmd_eval, cmd_gen, cmd_report, cmd_train, read_manifest, stage_limit, write_manifest,
    PipelineError, RunConfig, RunLayout, RunLock, RunReport, EXPERT_RUN,
};

#[derive(Parser)]
#[command(name = "cnav", version, about = "Continual object-goal navigation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, expert demonstrations and evaluation episodes.
    Gen(Common),
    /// Train one run (or every configured run) stage by stage.
    Train(TrainArgs),
    /// Evaluate saved checkpoints over the cumulative category sets.
    Eval(Common),
    /// Combine per-run evaluations into summary tables.
    Report(Common),
    /// gen, train, eval and report in one go.
    Bench(Common),
    /// Print the resolved configuration as JSON.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults to the run directory's manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run name, or "all"; `eval` also accepts "expert".
    #[arg(long, default_value = "all")]
    strategy: String,
    /// Process only the first K stages.
    #[arg(long, value_name = "K")]
    stages: Option<usize>,
    /// Add the sampling, retention and loss-weight ablation runs.
    #[arg(long)]
    ablations: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Continue from the checkpoint and buffer saved after stage K.
    #[arg(long, value_name = "K")]
    resume_from: Option<usize>,
}

fn resolve(c: &Common, truncate: bool) -> Result<RunConfig, PipelineError> {
    let default_out = RunConfig::default().output_dir;
    let mut cfg = match (&c.config, &c.out) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, out) => {
            let layout = RunLayout::new(out.clone().unwrap_or(default_out));
            read_manifest(&layout)?.map_or_else(RunConfig::default, |m| m.config)
        }
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if c.ablations {
        for r in ablation_runs() {
            if cfg.runs.iter().all(|x| x.name != r.name) {
                cfg.runs.push(r);
            }
        }
    }
    if truncate {
        if let Some(k) = c.stages {
            stage_limit(&cfg, Some(k))?;
            cfg.benchmark = cfg.benchmark.truncated(k);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn selected_runs(cfg: &RunConfig, which: &str, with_expert: bool) -> Result<Vec<String>, PipelineError> {
    if which == "all" {
        let mut names: Vec<String> = cfg.runs.iter().map(|r| r.name.clone()).collect();
        if with_expert {
            names.push(EXPERT_RUN.into());
        }
        return Ok(names);
    }
    if !(with_expert && which == EXPERT_RUN) {
        cfg.run(which)?;
    }
    Ok(vec![which.to_string()])
}

fn gen(layout: &RunLayout, cfg: &RunConfig) -> Result<(), PipelineError> {
    write_manifest(layout, cfg)?;
    let counts = cmd_gen(layout, cfg)?;
    println!(
        "dataset: {} training scenes, {} evaluation scenes",
        counts.train_scenes, counts.eval_scenes
    );
    for (k, per_cat) in counts.stage_trajectories.iter().enumerate() {
        let total: usize = per_cat.values().sum();
        let cats: Vec<String> = per_cat.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        println!("stage {}: {total} trajectories ({})", k + 1, cats.join(" "));
    }
    let eval: usize = counts.eval_episodes.values().sum();
    println!("evaluation: {eval} episodes");
    Ok(())
}

fn train(layout: &RunLayout, cfg: &RunConfig, c: &Common, resume_from: Option<usize>) -> Result<(), PipelineError> {
    let upto = stage_limit(cfg, c.stages)?;
    let resume_after = match resume_from {
        Some(0) => return Err(PipelineError::Validation("--resume-from counts stages from 1".into())),
        k => k.map(|k| k - 1),
    };
    for name in selected_runs(cfg, &c.strategy, false)? {
        let run_spec = cfg.run(&name)?;
        cmd_train(layout, cfg, run_spec, upto, resume_after, |k, steps| {
            println!("{name}: stage {}/{upto} trained ({steps} optimizer steps)", k + 1);
        })?;
    }
    Ok(())
}

fn print_eval(r: &RunReport) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for s in &r.stages {
        println!(
            "{}: stage {} SR {:.3} SPL {:.3} old SR {} new SR {:.3}",
            r.name,
            s.stage + 1,
            s.mean_sr,
            s.mean_spl,
            fmt(s.old_sr),
            s.new_sr
        );
    }
}

fn eval(layout: &RunLayout, cfg: &RunConfig, c: &Common) -> Result<(), PipelineError> {
    let upto = stage_limit(cfg, c.stages)?;
    for name in selected_runs(cfg, &c.strategy, true)? {
        print_eval(&cmd_eval(layout, cfg, &name, upto)?);
    }
    Ok(())
}

fn report(layout: &RunLayout, cfg: &RunConfig, c: &Common) -> Result<(), PipelineError> {
    let only = (c.strategy != "all").then_some(c.strategy.as_str());
    let summary = cmd_report(layout, cfg, only)?;
    println!("{:<20} {:>7} {:>7} {:>7} {:>7}", "run", "avg SR", "avg SPL", "last SR", "last SPL");
    for (name, row) in &summary.runs {
        println!(
            "{name:<20} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            row.avg_sr, row.avg_spl, row.last_sr, row.last_spl
        );
    }
    println!("tables written to {}", layout.reports_root().display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (common, truncate) = match &cli.command {
        Command::Gen(c) | Command::Bench(c) | Command::Config(c) => (c, true),
        Command::Train(t) => (&t.common, false),
        Command::Eval(c) | Command::Report(c) => (c, false),
    };
    let cfg = resolve(common, truncate)?;
    if let Command::Config(_) = cli.command {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    let layout = RunLayout::new(&cfg.output_dir);
    let _lock = RunLock::acquire(Path::new(&cfg.output_dir))?;
    match &cli.command {
        Command::Gen(_) => gen(&layout, &cfg),
        Command::Train(t) => train(&layout, &cfg, &t.common, t.resume_from),
        Command::Eval(c) => eval(&layout, &cfg, c),
        Command::Report(c) => report(&layout, &cfg, c),
        Command::Bench(c) => {
            gen(&layout, &cfg)?;
            train(&layout, &cfg, c, None)?;
            eval(&layout, &cfg, c)?;
            report(&layout, &cfg, c)
        }
        Command::Config(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
