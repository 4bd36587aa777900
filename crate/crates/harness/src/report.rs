//! Summary CSVs, paired t-tests and the markdown report.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use tsd_core::checkpoint::write_atomic;
use tsd_core::distillation::Variant;
use tsd_core::metrics::paired_t_test;

use crate::plot::{line_chart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    MinAde,
    MinFde,
    MissRate,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::MinAde, Metric::MinFde, Metric::MissRate];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MinAde => "min_ade",
            Metric::MinFde => "min_fde",
            Metric::MissRate => "miss_rate",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Metric::MinAde => "minADE",
            Metric::MinFde => "minFDE",
            Metric::MissRate => "MR",
        }
    }

    pub fn of(self, r: &SummaryRow) -> f64 {
        match self {
            Metric::MinAde => r.min_ade,
            Metric::MinFde => r.min_fde,
            Metric::MissRate => r.miss_rate,
        }
    }
}

/// One (variant, seed, cell) result.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub seed: u64,
    pub pattern: String,
    pub parameter: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub n: usize,
    pub status: String,
}

impl SummaryRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

const SUMMARY_HEADER: &str =
    "variant,seed,mask_pattern,parameter,min_ade,min_fde,miss_rate,n,status";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{},{}",
            r.variant,
            r.seed,
            r.pattern,
            r.parameter,
            r.min_ade,
            r.min_fde,
            r.miss_rate,
            r.n,
            r.status
        );
    }
    s
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        bail!("summary.csv has an unexpected header");
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.splitn(9, ',').collect();
            if f.len() != 9 {
                bail!("summary.csv line {}: expected 9 fields", i + 2);
            }
            Ok(SummaryRow {
                variant: f[0].parse()?,
                seed: f[1].parse()?,
                pattern: f[2].to_string(),
                parameter: f[3].to_string(),
                min_ade: f[4].parse()?,
                min_fde: f[5].parse()?,
                miss_rate: f[6].parse()?,
                n: f[7].parse()?,
                status: f[8].to_string(),
            })
        })
        .collect()
}

/// Distinct (pattern, parameter) cells in first-seen order.
pub fn cells_of(rows: &[SummaryRow], pattern: &str) -> Vec<String> {
    let mut seen = Vec::new();
    for r in rows.iter().filter(|r| r.pattern == pattern) {
        if !seen.contains(&r.parameter) {
            seen.push(r.parameter.clone());
        }
    }
    seen
}

pub fn variants_of(rows: &[SummaryRow]) -> Vec<Variant> {
    let mut seen = Vec::new();
    for r in rows {
        if !seen.contains(&r.variant) {
            seen.push(r.variant);
        }
    }
    seen
}

/// Value for one seed, or the mean over successful seeds when `seed` is `None`.
pub fn metric_value(
    rows: &[SummaryRow],
    variant: Variant,
    pattern: &str,
    parameter: &str,
    metric: Metric,
    seed: Option<u64>,
) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| {
            r.ok()
                && r.variant == variant
                && r.pattern == pattern
                && r.parameter == parameter
                && seed.is_none_or(|s| r.seed == s)
        })
        .map(|r| metric.of(r))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TTestRow {
    pub family: String,
    /// A seed, or `mean` for the seed-averaged comparison.
    pub seed: String,
    pub metric: Metric,
    pub t: f64,
    pub p: f64,
    pub mean_diff: f64,
    pub n: usize,
    pub status: String,
}

/// Paired tests of baseline against tsd across the mask conditions of each
/// pattern family, per seed and on seed means.
pub fn paired_tests(rows: &[SummaryRow], seeds: &[u64]) -> Vec<TTestRow> {
    let mut out = Vec::new();
    let vs = variants_of(rows);
    if !(vs.contains(&Variant::Baseline) && vs.contains(&Variant::Tsd)) {
        return out;
    }
    let mut seed_opts: Vec<Option<u64>> = seeds.iter().map(|s| Some(*s)).collect();
    seed_opts.push(None);
    for family in ["random", "continuous"] {
        let cells = cells_of(rows, family);
        if cells.is_empty() {
            continue;
        }
        for seed in &seed_opts {
            for metric in Metric::ALL {
                let collect = |v: Variant| -> Option<Vec<f64>> {
                    cells
                        .iter()
                        .map(|c| metric_value(rows, v, family, c, metric, *seed))
                        .collect()
                };
                let label = seed.map_or("mean".to_string(), |s| s.to_string());
                let mut row = TTestRow {
                    family: family.into(),
                    seed: label,
                    metric,
                    t: f64::NAN,
                    p: f64::NAN,
                    mean_diff: f64::NAN,
                    n: cells.len(),
                    status: "ok".into(),
                };
                match (collect(Variant::Baseline), collect(Variant::Tsd)) {
                    (Some(a), Some(b)) => match paired_t_test(&a, &b) {
                        Ok(t) => {
                            row.t = t.t;
                            row.p = t.p;
                            row.mean_diff = t.mean_diff;
                        }
                        Err(e) => row.status = e.to_string().replace(',', ";"),
                    },
                    _ => row.status = "missing results".into(),
                }
                out.push(row);
            }
        }
    }
    out
}

const TTEST_HEADER: &str = "family,seed,metric,t,p,mean_diff_baseline_minus_tsd,n,status";

pub fn ttests_csv(rows: &[TTestRow]) -> String {
    let mut s = format!("{TTEST_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{},{}",
            r.family,
            r.seed,
            r.metric.name(),
            r.t,
            r.p,
            r.mean_diff,
            r.n,
            r.status
        );
    }
    s
}

pub fn parse_ttests(text: &str) -> Result<Vec<TTestRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TTEST_HEADER) {
        bail!("ttests.csv has an unexpected header");
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.splitn(8, ',').collect();
            if f.len() != 8 {
                bail!("ttests.csv: malformed line {l:?}");
            }
            let metric = Metric::ALL
                .into_iter()
                .find(|m| m.name() == f[2])
                .with_context(|| format!("unknown metric {}", f[2]))?;
            Ok(TTestRow {
                family: f[0].into(),
                seed: f[1].into(),
                metric,
                t: f[3].parse()?,
                p: f[4].parse()?,
                mean_diff: f[5].parse()?,
                n: f[6].parse()?,
                status: f[7].into(),
            })
        })
        .collect()
}

fn column_title(pattern: &str, parameter: &str, t_obs: Option<&str>) -> String {
    match pattern {
        "random" => {
            let r: f64 = parameter.parse().unwrap_or(f64::NAN);
            if r == 0.0 {
                "Fully Obs.".into()
            } else {
                format!("Mask Rate {:.0}%", r * 100.0)
            }
        }
        "continuous" if Some(parameter) == t_obs => format!("Obs. = {parameter} (full)"),
        "continuous" => format!("Obs. = {parameter}"),
        other => format!("{other} {parameter}"),
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3}"))
}

/// Markdown tables: variants as rows, mask conditions as columns,
/// minADE / minFDE / MR in each cell (means over seeds).
pub fn build_report(rows: &[SummaryRow], ttests: &[TTestRow]) -> String {
    let variants = variants_of(rows);
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    let mut md = String::from("# Forecasting under partial observation\n\n");
    let _ = writeln!(
        md,
        "Cells show minADE / minFDE / MR (meters, meters, fraction), averaged over {} seed(s): {}.\n",
        seeds.len(),
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ")
    );
    let longest = cells_of(rows, "continuous")
        .into_iter()
        .max_by_key(|p| p.parse::<usize>().unwrap_or(0));
    for (pattern, heading) in [
        ("random", "Random frame drops"),
        ("continuous", "Continuous observation length"),
    ] {
        let cells = cells_of(rows, pattern);
        if cells.is_empty() {
            continue;
        }
        let _ = writeln!(md, "## {heading}\n");
        md.push_str("| Method |");
        for c in &cells {
            let _ = write!(md, " {} |", column_title(pattern, c, longest.as_deref()));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(cells.len()));
        md.push('\n');
        for v in &variants {
            let _ = write!(md, "| {v} |");
            for c in &cells {
                let m = |metric| metric_value(rows, *v, pattern, c, metric, None);
                let _ = write!(
                    md,
                    " {} / {} / {} |",
                    fmt(m(Metric::MinAde)),
                    fmt(m(Metric::MinFde)),
                    fmt(m(Metric::MissRate))
                );
            }
            md.push('\n');
        }
        md.push('\n');
    }
    let failed: Vec<&SummaryRow> = rows.iter().filter(|r| !r.ok()).collect();
    if !failed.is_empty() {
        md.push_str("## Failed runs\n\n");
        let mut seen = BTreeSet::new();
        for r in failed {
            if seen.insert((r.variant, r.seed)) {
                let _ = writeln!(md, "- {} seed {}: {}", r.variant, r.seed, r.status);
            }
        }
        md.push('\n');
    }
    if !ttests.is_empty() {
        md.push_str("## Paired t-tests, baseline minus tsd across mask conditions\n\n");
        md.push_str(
            "| Pattern | Seed | Metric | t | p | mean diff | n |\n|---|---|---|---|---|---|---|\n",
        );
        for t in ttests {
            if t.status == "ok" {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {:.3} | {:.4} | {:.4} | {} |",
                    t.family,
                    t.seed,
                    t.metric.title(),
                    t.t,
                    t.p,
                    t.mean_diff,
                    t.n
                );
            } else {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | - | - | - | {} ({}) |",
                    t.family,
                    t.seed,
                    t.metric.title(),
                    t.n,
                    t.status
                );
            }
        }
        md.push('\n');
    }
    md
}

/// Writes `report.md` and `plots/*.svg` under `out`; returns the markdown.
pub fn write_report(out: &Path, rows: &[SummaryRow], ttests: &[TTestRow]) -> Result<String> {
    let md = build_report(rows, ttests);
    write_atomic(&out.join("report.md"), md.as_bytes())?;
    let plots = out.join("plots");
    fs::create_dir_all(&plots)?;
    let variants = variants_of(rows);
    for pattern in ["random", "continuous"] {
        let cells = cells_of(rows, pattern);
        if cells.is_empty() {
            continue;
        }
        for metric in Metric::ALL {
            let series: Vec<Series> = variants
                .iter()
                .map(|v| Series {
                    name: v.name().to_string(),
                    values: cells
                        .iter()
                        .map(|c| metric_value(rows, *v, pattern, c, metric, None))
                        .collect(),
                })
                .collect();
            let x_title = if pattern == "random" {
                "mask rate"
            } else {
                "observed steps"
            };
            let svg = line_chart(
                &format!("{} vs {x_title}", metric.title()),
                x_title,
                metric.title(),
                &cells,
                &series,
            );
            write_atomic(
                &plots.join(format!("{}_{pattern}.svg", metric.name())),
                svg.as_bytes(),
            )?;
        }
    }
    Ok(md)
}

/// Rebuilds the report from `summary.csv` (and `ttests.csv` if present) in `dir`.
pub fn report_from_dir(dir: &Path) -> Result<String> {
    let path = dir.join("summary.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows = parse_summary(&text)?;
    let tpath = dir.join("ttests.csv");
    let ttests = if tpath.exists() {
        parse_ttests(&fs::read_to_string(&tpath)?)?
    } else {
        Vec::new()
    };
    write_report(dir, &rows, &ttests)
}
