use std::fmt::Write as _;

use crate::networks::Variant;

pub const SUBJECT_HEADER: &str = "subject_id,site_id,seen,dsc,ltpr,lfpr,ppv";
pub const SUMMARY_HEADER: &str = "method,DSC,LTPR,LFPR,PPV";
pub const METRIC_NAMES: [&str; 4] = ["dsc", "ltpr", "lfpr", "ppv"];

/// Fixed-precision formatting used by every CSV writer.
pub fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.6}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectMetrics {
    pub subject_id: u32,
    pub site_id: u32,
    pub seen: bool,
    pub dsc: f64,
    pub ltpr: f64,
    pub lfpr: f64,
    pub ppv: f64,
}

impl SubjectMetrics {
    pub fn new(subject_id: u32, site_id: u32, seen: bool, v: [f64; 4]) -> Self {
        SubjectMetrics {
            subject_id,
            site_id,
            seen,
            dsc: v[0],
            ltpr: v[1],
            lfpr: v[2],
            ppv: v[3],
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.dsc, self.ltpr, self.lfpr, self.ppv]
    }
}

/// NaN-excluding means of the four measures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub means: [f64; 4],
    /// Rows that contributed to each mean.
    pub counts: [usize; 4],
    /// Rows skipped because the value was NaN.
    pub excluded: [usize; 4],
}

impl Aggregate {
    pub fn empty() -> Self {
        Aggregate {
            means: [f64::NAN; 4],
            counts: [0; 4],
            excluded: [0; 4],
        }
    }

    pub fn over<'a>(rows: impl IntoIterator<Item = &'a [f64; 4]>) -> Self {
        let mut sums = [0.0; 4];
        let mut agg = Aggregate::empty();
        for row in rows {
            for k in 0..4 {
                if row[k].is_nan() {
                    agg.excluded[k] += 1;
                } else {
                    sums[k] += row[k];
                    agg.counts[k] += 1;
                }
            }
        }
        for k in 0..4 {
            if agg.counts[k] > 0 {
                agg.means[k] = sums[k] / agg.counts[k] as f64;
            }
        }
        agg
    }

    /// Mean of per-fold means; counts and exclusions are summed.
    pub fn fold_mean(folds: &[Aggregate]) -> Self {
        let means: Vec<[f64; 4]> = folds.iter().map(|a| a.means).collect();
        let mut out = Aggregate::over(&means);
        for k in 0..4 {
            out.counts[k] = folds.iter().map(|a| a.counts[k]).sum();
            out.excluded[k] = folds.iter().map(|a| a.excluded[k]).sum();
        }
        out
    }

    pub fn dsc(&self) -> f64 {
        self.means[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Sorted by subject id.
    pub per_subject: Vec<SubjectMetrics>,
    pub overall: Aggregate,
    pub seen: Aggregate,
    pub unseen: Aggregate,
}

impl MetricsReport {
    pub fn new(mut rows: Vec<SubjectMetrics>) -> Self {
        rows.sort_by_key(|r| r.subject_id);
        let vals: Vec<([f64; 4], bool)> = rows.iter().map(|r| (r.values(), r.seen)).collect();
        MetricsReport {
            overall: Aggregate::over(vals.iter().map(|(v, _)| v)),
            seen: Aggregate::over(vals.iter().filter(|(_, s)| *s).map(|(v, _)| v)),
            unseen: Aggregate::over(vals.iter().filter(|(_, s)| !*s).map(|(v, _)| v)),
            per_subject: rows,
        }
    }

    pub fn len(&self) -> usize {
        self.per_subject.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_subject.is_empty()
    }

    /// Per-subject rows followed by commented aggregate lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(SUBJECT_HEADER);
        s.push('\n');
        for r in &self.per_subject {
            let _ = write!(s, "{},{},{}", r.subject_id, r.site_id, r.seen as u8);
            for v in r.values() {
                let _ = write!(s, ",{}", fmt_metric(v));
            }
            s.push('\n');
        }
        s.push_str("# group,dsc,ltpr,lfpr,ppv,excluded_dsc,excluded_ltpr,excluded_lfpr,excluded_ppv\n");
        for (name, agg) in [("all", &self.overall), ("seen", &self.seen), ("unseen", &self.unseen)] {
            s.push_str(&aggregate_line(&format!("# {name}"), agg));
        }
        s
    }
}

fn aggregate_line(label: &str, agg: &Aggregate) -> String {
    let mut s = label.to_string();
    for v in agg.means {
        let _ = write!(s, ",{}", fmt_metric(v));
    }
    for e in agg.excluded {
        let _ = write!(s, ",{e}");
    }
    s.push('\n');
    s
}

/// Method-by-measure table with one row per variant in table order.
/// Variants without an entry are written as NaN.
pub fn summary_table(entries: &[(Variant, Aggregate)], aggregation: &str) -> String {
    let mut s = format!("# aggregation={aggregation}\n{SUMMARY_HEADER}\n");
    for v in Variant::ALL {
        let agg = entries
            .iter()
            .find(|(k, _)| *k == v)
            .map(|(_, a)| *a)
            .unwrap_or_else(Aggregate::empty);
        let _ = write!(s, "{v}");
        for m in agg.means {
            let _ = write!(s, ",{}", fmt_metric(m));
        }
        s.push('\n');
    }
    s
}

/// Seen versus unseen breakdown, one row per (variant, group).
pub fn seen_unseen_table(entries: &[(Variant, Aggregate, Aggregate)]) -> String {
    let mut s = String::from("method,group,DSC,LTPR,LFPR,PPV\n");
    for (v, seen, unseen) in entries {
        for (name, agg) in [("seen", seen), ("unseen", unseen)] {
            let _ = write!(s, "{v},{name}");
            for m in agg.means {
                let _ = write!(s, ",{}", fmt_metric(m));
            }
            s.push('\n');
        }
    }
    s
}
