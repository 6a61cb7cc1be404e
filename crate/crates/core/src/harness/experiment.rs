//! File-backed experiment stages shared by the command line and tests.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.txt                      resolved configuration
//! cohort.manifest, cohort.vol     synthetic cohort
//! seed{S}/folds.csv               fold plan
//! seed{S}/lambda_{V}.csv          grid-search scores (when tuning)
//! seed{S}/{V}/fold{F}/            model.bin, session.txt, history_steps.csv,
//!                                 history_epochs.csv, metrics.csv
//! eval/                           summary.csv, seen_unseen.csv
//! report/                         probe.csv, probe_summary.csv, report.md
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::evaluate::{evaluate, EvalSettings};
use super::folds::{folds_csv, make_folds, FoldPlan};
use super::probe::{probe_domain_accuracy, ProbeConfig};
use super::train::{grid_search_lambda, lookup, train_model};
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    fmt_metric, seen_unseen_table, summary_table, Aggregate, MetricsReport, SubjectMetrics, SUBJECT_HEADER,
};
use crate::networks::{build_model, ModelBundle, Variant};
use crate::synthdata::{gen_cohort, read_manifest, write_manifest, Dataset};

pub const AGGREGATION: &str = "fold_mean";

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("cohort.manifest")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed{seed}"))
    }

    pub fn run_dir(&self, seed: u64, variant: Variant, fold: usize) -> PathBuf {
        self.seed_dir(seed).join(variant.as_str()).join(format!("fold{fold}"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Runs `f` over `items` on up to `threads` workers; results keep input order.
pub fn parallel_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    let n = items.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return items.into_iter().map(f).collect();
    }
    let slots: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<Result<R>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let item = slots[i].lock().expect("slot lock").take().expect("each slot taken once");
                *results[i].lock().expect("result lock") = Some(f(item));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result lock").expect("every slot filled"))
        .collect()
}

/// Generates the cohort and writes manifest, store and configuration.
pub fn synthesize(cfg: &ExperimentConfig, layout: &Layout) -> Result<Dataset> {
    cfg.validate()?;
    fs::create_dir_all(&layout.root)?;
    let (_, samples) = gen_cohort(cfg.n_sites, cfg.subjects_per_site, cfg.data_seed, cfg.dims())?;
    write_manifest(&samples, &layout.manifest())?;
    write(&layout.config(), &cfg.to_text())?;
    Dataset::new(samples)
}

pub fn load_dataset(layout: &Layout) -> Result<Dataset> {
    let path = layout.manifest();
    if !path.exists() {
        return Err(Error::invalid(format!(
            "no cohort at {}; run synth first",
            path.display()
        )));
    }
    read_manifest(&path)
}

/// Fold plans for one seed; `k` is capped by the cohort size.
pub fn plan_folds(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<Vec<FoldPlan>> {
    let ids = dataset.subject_ids();
    let k = cfg.folds.min(ids.len());
    make_folds(&ids, k, seed)
}

/// Metadata needed to reload a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub seed: u64,
    pub variant: Variant,
    pub fold: usize,
    pub lambda: f64,
    pub domain_sites: Vec<u32>,
    pub best_epoch: Option<usize>,
}

impl Session {
    fn to_text(&self) -> String {
        let sites: Vec<String> = self.domain_sites.iter().map(u32::to_string).collect();
        format!(
            "seed = {}\nvariant = {}\nfold = {}\nlambda = {}\ndomain_sites = {}\nbest_epoch = {}\n",
            self.seed,
            self.variant,
            self.fold,
            self.lambda,
            sites.join(","),
            self.best_epoch.map_or("none".into(), |e| e.to_string())
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<String> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| Error::invalid(format!("session file lacks {key}")))
        };
        let bad = |k: &str| Error::invalid(format!("session file: bad {k}"));
        let best = get("best_epoch")?;
        Ok(Session {
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            variant: Variant::from_str(&get("variant")?)?,
            fold: get("fold")?.parse().map_err(|_| bad("fold"))?,
            lambda: get("lambda")?.parse().map_err(|_| bad("lambda"))?,
            domain_sites: get("domain_sites")?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse().map_err(|_| bad("domain_sites")))
                .collect::<Result<_>>()?,
            best_epoch: if best == "none" {
                None
            } else {
                Some(best.parse().map_err(|_| bad("best_epoch"))?)
            },
        })
    }
}

fn fold_count(cfg: &ExperimentConfig, plans: &[FoldPlan]) -> usize {
    cfg.folds_to_run.min(plans.len())
}

/// Trains every (seed, variant, fold) session and writes models and histories.
pub fn run_training(cfg: &ExperimentConfig, layout: &Layout, threads: usize) -> Result<Vec<Session>> {
    cfg.validate()?;
    let dataset = load_dataset(layout)?;
    write(&layout.config(), &cfg.to_text())?;
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        let plans = plan_folds(cfg, &dataset, seed)?;
        write(&layout.seed_dir(seed).join("folds.csv"), &folds_csv(&plans))?;
        for &variant in &cfg.variants {
            let mut lambda = cfg.lambda_for(variant);
            if variant.has_head() && !cfg.lambda_grid.is_empty() {
                // fold 0 is the tuning fold
                let tc = cfg.train_config(variant, seed, lambda);
                let (best, scores) = grid_search_lambda(&tc, &cfg.lambda_grid, &plans[0], &dataset)?;
                let mut csv = String::from("lambda,val_dsc\n");
                for (l, s) in scores {
                    let _ = writeln!(csv, "{l},{}", fmt_metric(s));
                }
                write(&layout.seed_dir(seed).join(format!("lambda_{variant}.csv")), &csv)?;
                lambda = best;
            }
            for plan in plans.iter().take(fold_count(cfg, &plans)) {
                jobs.push((seed, variant, lambda, plan.clone()));
            }
        }
    }
    parallel_map(jobs, threads, |(seed, variant, lambda, plan)| {
        let tc = cfg.train_config(variant, seed, lambda);
        let (model, history) = train_model(&tc, &plan, &dataset)?;
        let dir = layout.run_dir(seed, variant, plan.fold_id);
        fs::create_dir_all(&dir)?;
        model.save(dir.join("model.bin"))?;
        write(&dir.join("history_steps.csv"), &history.steps_csv())?;
        write(&dir.join("history_epochs.csv"), &history.epochs_csv())?;
        let session = Session {
            seed,
            variant,
            fold: plan.fold_id,
            lambda,
            domain_sites: history.domain_sites.clone(),
            best_epoch: history.best_epoch,
        };
        write(&dir.join("session.txt"), &session.to_text())?;
        Ok(session)
    })
}

/// Rebuilds a trained model from its run directory.
pub fn load_session(cfg: &ExperimentConfig, dir: &Path) -> Result<(Session, ModelBundle<f32>)> {
    let session = Session::parse(&fs::read_to_string(dir.join("session.txt"))?)?;
    let tc = cfg.train_config(session.variant, session.seed, session.lambda);
    let mut model = build_model(&tc.arch(session.domain_sites.len().max(1)), session.variant, 0, 0.0)?;
    model.load_into(dir.join("model.bin"))?;
    model.head_active = false;
    Ok((session, model))
}

fn trained_runs(cfg: &ExperimentConfig, layout: &Layout, dataset: &Dataset) -> Result<Vec<(u64, Variant, FoldPlan)>> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let plans = plan_folds(cfg, dataset, seed)?;
        for &variant in &cfg.variants {
            for plan in plans.iter().take(fold_count(cfg, &plans)) {
                let dir = layout.run_dir(seed, variant, plan.fold_id);
                if !dir.join("model.bin").exists() {
                    return Err(Error::invalid(format!(
                        "no trained model in {}; run train first",
                        dir.display()
                    )));
                }
                out.push((seed, variant, plan.clone()));
            }
        }
    }
    Ok(out)
}

fn training_sites(dataset: &Dataset, plan: &FoldPlan) -> Result<BTreeSet<u32>> {
    Ok(lookup(dataset, &plan.train_ids)?.iter().map(|s| s.site_id).collect())
}

/// Per-variant aggregates over all (seed, fold) reports.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub overall: Aggregate,
    pub seen: Aggregate,
    pub unseen: Aggregate,
    pub reports: usize,
}

fn summarize(runs: &[(Variant, MetricsReport)], variants: &[Variant]) -> Vec<VariantSummary> {
    variants
        .iter()
        .map(|&v| {
            let reports: Vec<&MetricsReport> = runs.iter().filter(|(k, _)| *k == v).map(|(_, r)| r).collect();
            let pick = |f: fn(&MetricsReport) -> Aggregate| {
                Aggregate::fold_mean(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            VariantSummary {
                variant: v,
                overall: pick(|r| r.overall),
                seen: pick(|r| r.seen),
                unseen: pick(|r| r.unseen),
                reports: reports.len(),
            }
        })
        .collect()
}

fn write_tables(dir: &Path, summaries: &[VariantSummary]) -> Result<()> {
    let rows: Vec<(Variant, Aggregate)> = summaries.iter().map(|s| (s.variant, s.overall)).collect();
    write(&dir.join("summary.csv"), &summary_table(&rows, AGGREGATION))?;
    let split: Vec<(Variant, Aggregate, Aggregate)> =
        summaries.iter().map(|s| (s.variant, s.seen, s.unseen)).collect();
    write(&dir.join("seen_unseen.csv"), &seen_unseen_table(&split))?;
    Ok(())
}

/// Evaluates every trained model on its fold's test subjects.
pub fn run_evaluation(cfg: &ExperimentConfig, layout: &Layout, threads: usize) -> Result<Vec<VariantSummary>> {
    cfg.validate()?;
    let dataset = load_dataset(layout)?;
    let runs = trained_runs(cfg, layout, &dataset)?;
    let settings = EvalSettings::from(&cfg.train);
    let reports = parallel_map(runs, threads, |(seed, variant, plan)| {
        let dir = layout.run_dir(seed, variant, plan.fold_id);
        let (_, model) = load_session(cfg, &dir)?;
        let test = lookup(&dataset, &plan.test_ids)?;
        let report = evaluate(&model, &test, &training_sites(&dataset, &plan)?, &settings)?;
        write(&dir.join("metrics.csv"), &report.to_csv())?;
        Ok((variant, report))
    })?;
    let summaries = summarize(&reports, &cfg.variants);
    write_tables(&layout.eval_dir(), &summaries)?;
    Ok(summaries)
}

/// Parses the per-subject block of a metrics CSV.
pub fn read_metrics_csv(text: &str) -> Result<MetricsReport> {
    let mut lines = text.lines();
    if lines.next() != Some(SUBJECT_HEADER) {
        return Err(Error::invalid("metrics file lacks the expected header"));
    }
    let mut rows = Vec::new();
    for line in lines.take_while(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::invalid(format!("bad metrics row {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad()) };
        rows.push(SubjectMetrics::new(
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[2] == "1",
            [num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?],
        ));
    }
    Ok(MetricsReport::new(rows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub seed: u64,
    pub variant: Variant,
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub summaries: Vec<VariantSummary>,
    pub probes: Vec<ProbeResult>,
}

impl ExperimentReport {
    /// Mean probe accuracy of one variant over all its runs.
    pub fn mean_probe(&self, variant: Variant) -> f64 {
        let v: Vec<f64> = self.probes.iter().filter(|p| p.variant == variant).map(|p| p.accuracy).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Merges evaluation outputs and adds the domain-probe diagnostic.
pub fn run_report(cfg: &ExperimentConfig, layout: &Layout, threads: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dataset = load_dataset(layout)?;
    let runs = trained_runs(cfg, layout, &dataset)?;
    let probe_cfg = ProbeConfig {
        seed: cfg.probe_seed,
        hidden: cfg.probe_hidden,
        epochs: cfg.probe_epochs,
        ..ProbeConfig::default()
    };
    let results = parallel_map(runs, threads, |(seed, variant, plan)| {
        let dir = layout.run_dir(seed, variant, plan.fold_id);
        let metrics = dir.join("metrics.csv");
        if !metrics.exists() {
            return Err(Error::invalid(format!("{} missing; run eval first", metrics.display())));
        }
        let report = read_metrics_csv(&fs::read_to_string(metrics)?)?;
        let (_, model) = load_session(cfg, &dir)?;
        let train = lookup(&dataset, &plan.train_ids)?;
        let accuracy = probe_domain_accuracy(&model, &train, cfg.train.patch_extent, cfg.train.overlap, &probe_cfg)?;
        Ok((
            (variant, report),
            ProbeResult {
                seed,
                variant,
                fold: plan.fold_id,
                accuracy,
            },
        ))
    })?;
    let (reports, probes): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let summaries = summarize(&reports, &cfg.variants);
    let dir = layout.report_dir();
    write_tables(&dir, &summaries)?;

    let mut csv = String::from("seed,variant,fold,probe_accuracy\n");
    for p in &probes {
        let _ = writeln!(csv, "{},{},{},{}", p.seed, p.variant, p.fold, fmt_metric(p.accuracy));
    }
    write(&dir.join("probe.csv"), &csv)?;
    let report = ExperimentReport { summaries, probes };
    let mut csv = String::from("variant,mean_probe_accuracy,runs\n");
    for &v in &cfg.variants {
        let n = report.probes.iter().filter(|p| p.variant == v).count();
        let _ = writeln!(csv, "{v},{},{n}", fmt_metric(report.mean_probe(v)));
    }
    write(&dir.join("probe_summary.csv"), &csv)?;
    write(&dir.join("report.md"), &render_markdown(cfg, &report))?;
    Ok(report)
}

fn render_markdown(cfg: &ExperimentConfig, report: &ExperimentReport) -> String {
    let mut s = String::from("# Experiment report\n\n");
    let _ = writeln!(
        s,
        "Cohort: {} sites x {} subjects, {}^3 voxels. Seeds: {:?}. Means are {AGGREGATION}.\n",
        cfg.n_sites, cfg.subjects_per_site, cfg.volume_extent, cfg.seeds
    );
    s.push_str("| method | group | DSC | LTPR | LFPR | PPV | probe acc. |\n|---|---|---|---|---|---|---|\n");
    for sm in &report.summaries {
        for (group, agg) in [("all", &sm.overall), ("seen", &sm.seen), ("unseen", &sm.unseen)] {
            let m: Vec<String> = agg.means.iter().map(|&v| fmt_metric(v)).collect();
            let probe = if group == "all" { fmt_metric(report.mean_probe(sm.variant)) } else { String::new() };
            let _ = writeln!(s, "| {} | {group} | {} | {probe} |", sm.variant, m.join(" | "));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let out = parallel_map((0..17).collect(), 4, |i: u32| Ok(i * i)).unwrap();
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
        let err = parallel_map(vec![1, 2, 3], 2, |i: u32| {
            if i == 2 {
                Err(Error::invalid("two"))
            } else {
                Ok(i)
            }
        });
        assert!(err.is_err());
    }

    #[test]
    fn session_round_trip() {
        let s = Session {
            seed: 2,
            variant: Variant::Du,
            fold: 1,
            lambda: 0.3,
            domain_sites: vec![0, 4, 9],
            best_epoch: Some(3),
        };
        assert_eq!(Session::parse(&s.to_text()).unwrap(), s);
        let none = Session { best_epoch: None, ..s };
        assert_eq!(Session::parse(&none.to_text()).unwrap(), none);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let r = MetricsReport::new(vec![
            SubjectMetrics::new(0, 0, true, [0.5, 1.0, f64::NAN, 0.25]),
            SubjectMetrics::new(1, 1, false, [0.125, 0.0, 0.5, 1.0]),
        ]);
        let back = read_metrics_csv(&r.to_csv()).unwrap();
        assert_eq!(back.to_csv(), r.to_csv());
    }

    #[test]
    fn pipeline_on_a_tiny_cohort() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = ExperimentConfig::parse(
            "variant = BM,DU\nn_sites = 4\nvolume_extent = 16\npatch_extent = 16\nstages = 2\n\
             base_channels = 2\nreg_hidden = 4,4\nepochs = 1\nsteps_per_epoch = 2\nbatch_size = 1\n\
             folds = 4\nfolds_to_run = 2\nprobe_epochs = 20\nlr = 0.001\n",
        )
        .unwrap();
        synthesize(&cfg, &layout).unwrap();
        let sessions = run_training(&cfg, &layout, 1).unwrap();
        assert_eq!(sessions.len(), 4);
        let summaries = run_evaluation(&cfg, &layout, 2).unwrap();
        assert_eq!(summaries.len(), 2);
        assert!(summaries.iter().all(|s| s.reports == 2));
        let report = run_report(&cfg, &layout, 1).unwrap();
        assert_eq!(report.probes.len(), 4);
        let table = fs::read_to_string(layout.eval_dir().join("summary.csv")).unwrap();
        assert_eq!(table.lines().count(), 7);
        assert!(layout.report_dir().join("report.md").exists());
    }
}
