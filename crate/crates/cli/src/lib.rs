//! Command-line front end: `dsseg <verb> [flags]`.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Arg, ArgAction};
use dsseg_core::harness::{
    gradcheck_suite, run_evaluation, run_report, run_training, synthesize, ExperimentConfig, Layout, CONFIG_KEYS,
    SUITE_TOL,
};
use dsseg_core::metrics::fmt_metric;
use dsseg_core::Error;

pub const USAGE: &str = "\
usage: dsseg <verb> [flags]

verbs:
  synth       generate the synthetic cohort (manifest + volume store)
  train       train every selected variant on every fold and seed
  eval        evaluate trained models and write the method summary
  gradcheck   run the finite-difference gradient suite
  report      merge evaluation outputs and run the domain probe

flags:
  --config PATH       key = value configuration file
  --out DIR           output directory (default: dsseg-out)
  --set KEY=VALUE     override one configuration key (repeatable)
  --seed N            shorthand for --set seeds=N
  --variant V[,V..]   shorthand for --set variant=V (BM, BDM, PC, RAND, DU)
  --KEY VALUE         any configuration key, e.g. --n_sites 4
  -h, --help          show this text

environment:
  DSSEG_THREADS       maximum number of parallel training or evaluation sessions
";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verb {
    Synth,
    Train,
    Eval,
    Gradcheck,
    Report,
}

impl Verb {
    fn parse(s: &str) -> Option<Verb> {
        Some(match s {
            "synth" => Verb::Synth,
            "train" => Verb::Train,
            "eval" => Verb::Eval,
            "gradcheck" => Verb::Gradcheck,
            "report" => Verb::Report,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Command {
    pub verb: Verb,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    /// Applied in order after the config file.
    pub overrides: Vec<(String, String)>,
}

/// Parse failures carry the message shown above the usage text.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn cli() -> clap::Command {
    let mut cmd = clap::Command::new("dsseg")
        .override_help(USAGE)
        .disable_version_flag(true)
        .arg(
            Arg::new("verb")
                .required(true)
                .value_parser(["synth", "train", "eval", "gradcheck", "report"]),
        )
        .arg(Arg::new("config").long("config"))
        .arg(Arg::new("out").long("out").default_value("dsseg-out"))
        .arg(Arg::new("set").long("set").action(ArgAction::Append))
        .arg(Arg::new("seeds").long("seeds").alias("seed").action(ArgAction::Append));
    for &key in CONFIG_KEYS.iter().filter(|&&k| k != "seeds") {
        cmd = cmd.arg(Arg::new(key).long(key).action(ArgAction::Append));
    }
    cmd
}

pub fn parse_args(args: &[String]) -> Result<Option<Command>, UsageError> {
    let argv = std::iter::once("dsseg".to_string()).chain(args.iter().cloned());
    let m = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) if e.kind() == ErrorKind::DisplayHelp => return Ok(None),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return Err(UsageError(first.trim_start_matches("error: ").to_string()));
        }
    };
    let verb = Verb::parse(m.get_one::<String>("verb").expect("required")).expect("validated by clap");
    let mut indexed = Vec::new();
    for key in std::iter::once("set").chain(CONFIG_KEYS.iter().copied()) {
        let (Some(values), Some(idx)) = (m.get_many::<String>(key), m.indices_of(key)) else {
            continue;
        };
        for (v, i) in values.zip(idx) {
            let pair = if key == "set" {
                let Some((k, v)) = v.split_once('=') else {
                    return Err(UsageError(format!("--set expects KEY=VALUE, got {v:?}")));
                };
                if !CONFIG_KEYS.contains(&k.trim()) {
                    return Err(UsageError(format!("unknown config key {:?}", k.trim())));
                }
                (k.trim().to_string(), v.trim().to_string())
            } else {
                (key.to_string(), v.clone())
            };
            indexed.push((i, pair));
        }
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(Some(Command {
        verb,
        config: m.get_one::<String>("config").map(PathBuf::from),
        out: PathBuf::from(m.get_one::<String>("out").expect("has default")),
        overrides: indexed.into_iter().map(|(_, kv)| kv).collect(),
    }))
}

/// Reads `--config` (or the configuration saved in the output directory
/// by an earlier verb), applies overrides and validates.
pub fn resolve_config(cmd: &Command) -> anyhow::Result<ExperimentConfig> {
    let saved = Layout::new(&cmd.out).config();
    let source = cmd.config.clone().or_else(|| saved.exists().then_some(saved));
    let mut cfg = match &source {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for (k, v) in &cmd.overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parallel session cap from `DSSEG_THREADS` (default 1).
pub fn threads_from_env() -> anyhow::Result<usize> {
    match std::env::var("DSSEG_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::InvalidArgument(format!("DSSEG_THREADS must be a positive integer, got {v:?}")).into()),
        },
        Err(_) => Ok(1),
    }
}

fn execute(cmd: &Command) -> anyhow::Result<bool> {
    let threads = threads_from_env()?;
    let layout = Layout::new(&cmd.out);
    if cmd.verb == Verb::Gradcheck {
        let reports = gradcheck_suite(0, SUITE_TOL)?;
        let mut csv = String::from("check,max_rel_error,components,tol,passed\n");
        for r in &reports {
            println!("{r}");
            let _ = writeln!(csv, "{},{:.3e},{},{:e},{}", r.label, r.max_rel_error, r.checked, r.tol, r.passed);
        }
        fs::create_dir_all(&cmd.out)?;
        fs::write(cmd.out.join("gradcheck.csv"), csv)?;
        let failed = reports.iter().filter(|r| !r.passed).count();
        println!("{} checks, {failed} failed", reports.len());
        return Ok(failed == 0);
    }
    let cfg = resolve_config(cmd)?;
    match cmd.verb {
        Verb::Synth => {
            let ds = synthesize(&cfg, &layout)?;
            println!(
                "wrote {} subjects ({:?} voxels) to {}",
                ds.samples.len(),
                ds.dims,
                layout.manifest().display()
            );
        }
        Verb::Train => {
            let sessions = run_training(&cfg, &layout, threads)?;
            for s in &sessions {
                println!(
                    "trained seed={} variant={} fold={} lambda={} best_epoch={}",
                    s.seed,
                    s.variant,
                    s.fold,
                    s.lambda,
                    s.best_epoch.map_or("none".into(), |e| e.to_string())
                );
            }
        }
        Verb::Eval => {
            let summaries = run_evaluation(&cfg, &layout, threads)?;
            print!("{}", fs::read_to_string(layout.eval_dir().join("summary.csv"))?);
            for s in &summaries {
                println!(
                    "{}: seen DSC {} / unseen DSC {} over {} runs",
                    s.variant,
                    fmt_metric(s.seen.dsc()),
                    fmt_metric(s.unseen.dsc()),
                    s.reports
                );
            }
        }
        Verb::Report => {
            let report = run_report(&cfg, &layout, threads)?;
            print!("{}", fs::read_to_string(layout.report_dir().join("report.md"))?);
            for v in &cfg.variants {
                println!("{v}: mean probe accuracy {}", fmt_metric(report.mean_probe(*v)));
            }
        }
        Verb::Gradcheck => unreachable!("handled above"),
    }
    Ok(true)
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_)) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// Runs one command; `args` excludes the program name.
pub fn run(args: &[String]) -> i32 {
    let cmd = match parse_args(args) {
        Ok(Some(cmd)) => cmd,
        Ok(None) => {
            print!("{USAGE}");
            return EXIT_OK;
        }
        Err(e) => {
            eprintln!("error: {e}\n\n{USAGE}");
            return EXIT_VALIDATION;
        }
    };
    match execute(&cmd) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
