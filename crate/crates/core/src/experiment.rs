//! Multi-seed with/without-IMA comparisons and parameter sweeps.
//!
//! Seeds are `base_seed + index`. Runs execute on scoped threads but
//! results are always assembled in seed order, so outputs do not depend on
//! scheduling.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{run_scenario, Scenario, SensorConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, format_sig9, MetricsReport, Subject, TimeSeries};

/// Index of the WBAN whose IMA setting is toggled.
pub const SUBJECT_WBAN: u16 = 0;

/// Grid key that resizes the sensor list of a WBAN rather than naming a field.
const SENSOR_COUNT_KEY: &str = "sensor_count";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub sop: u64,
    pub final_avgre_mj: f64,
    pub avgre: TimeSeries,
    pub cts_per_superframe: f64,
    pub mean_candidate_pool: f64,
    /// `(threshold_db, probability)` for the subject WBAN.
    pub outage: Vec<(f64, Option<f64>)>,
}

impl SeedOutcome {
    pub fn from_report(report: &MetricsReport) -> Result<Self> {
        let stats = report
            .stats(SUBJECT_WBAN)
            .ok_or_else(|| Error::Internal("report lacks the subject WBAN".into()))?;
        let avgre = report
            .avgre_series(SUBJECT_WBAN)
            .cloned()
            .ok_or_else(|| Error::Internal("report lacks an AVGRE series".into()))?;
        let outage = report
            .meta
            .outage_thresholds_db
            .iter()
            .map(|&thr| {
                (
                    thr,
                    metrics::compute_outage(report, Subject::Wban(SUBJECT_WBAN), thr),
                )
            })
            .collect();
        Ok(SeedOutcome {
            seed: report.meta.seed,
            sop: report.final_sop(SUBJECT_WBAN),
            final_avgre_mj: avgre.last().unwrap_or(f64::NAN),
            avgre,
            cts_per_superframe: stats.cts_per_superframe(),
            mean_candidate_pool: stats.mean_candidate_pool(),
            outage,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub uses_ima: bool,
    pub runs: Vec<SeedOutcome>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl ArmSummary {
    pub fn mean_sop(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.sop as f64))
    }

    pub fn mean_final_avgre(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.final_avgre_mj))
    }

    pub fn mean_cts_per_superframe(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.cts_per_superframe))
    }

    pub fn mean_candidate_pool(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.mean_candidate_pool))
    }

    /// Mean outage per threshold, over the seeds where it is available.
    pub fn mean_outage(&self) -> Vec<(f64, Option<f64>)> {
        let Some(first) = self.runs.first() else {
            return Vec::new();
        };
        first
            .outage
            .iter()
            .enumerate()
            .map(|(k, &(thr, _))| {
                let vals: Vec<f64> = self.runs.iter().filter_map(|r| r.outage[k].1).collect();
                let m = if vals.is_empty() {
                    None
                } else {
                    Some(mean(vals.into_iter()))
                };
                (thr, m)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub base_seed: u64,
    pub with_ima: ArmSummary,
    pub without_ima: ArmSummary,
}

impl Comparison {
    /// Ratio of mean SoPs; `None` when the baseline delivered nothing.
    pub fn sop_ratio(&self) -> Option<f64> {
        let base = self.without_ima.mean_sop();
        (base > 0.0).then(|| self.with_ima.mean_sop() / base)
    }

    pub fn avgre_ratio(&self) -> Option<f64> {
        let base = self.without_ima.mean_final_avgre();
        (base > 0.0).then(|| self.with_ima.mean_final_avgre() / base)
    }

    /// Seeds where IMA delivered at least as many packets.
    pub fn sop_wins(&self) -> usize {
        self.pairs().filter(|(w, wo)| w.sop >= wo.sop).count()
    }

    /// Seeds where IMA's AVGRE is at least the baseline's at every sample.
    pub fn avgre_wins(&self) -> usize {
        self.pairs()
            .filter(|(w, wo)| {
                w.avgre.samples.len() == wo.avgre.samples.len()
                    && w.avgre
                        .samples
                        .iter()
                        .zip(&wo.avgre.samples)
                        .all(|(a, b)| a.1 >= b.1)
            })
            .count()
    }

    pub fn seeds(&self) -> usize {
        self.with_ima.runs.len()
    }

    fn pairs(&self) -> impl Iterator<Item = (&SeedOutcome, &SeedOutcome)> {
        self.with_ima.runs.iter().zip(&self.without_ima.runs)
    }
}

/// Reports of every run in a comparison, in seed order.
#[derive(Debug, Clone)]
pub struct ComparisonRuns {
    pub comparison: Comparison,
    pub with_ima: Vec<MetricsReport>,
    pub without_ima: Vec<MetricsReport>,
}

/// Runs `scenario` once per seed, in parallel, returning reports in seed order.
pub fn run_seeds(scenario: &Scenario, seeds: &[u64]) -> Result<Vec<MetricsReport>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .clamp(1, seeds.len().max(1));
    let mut slots: Vec<Option<Result<MetricsReport>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk_seeds, chunk_slots) in seeds
            .chunks(seeds.len().div_ceil(workers).max(1))
            .zip(slots.chunks_mut(seeds.len().div_ceil(workers).max(1)))
        {
            scope.spawn(move || {
                for (&seed, slot) in chunk_seeds.iter().zip(chunk_slots) {
                    let mut sc = scenario.clone();
                    sc.seed = seed;
                    *slot = Some(run_scenario(&sc));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every seed ran"))
        .collect()
}

/// The subject WBAN's two variants; everything else is left as configured.
pub fn variants(scenario: &Scenario) -> Result<(Scenario, Scenario)> {
    if scenario.wbans.is_empty() {
        return Err(Error::config("wbans: at least one WBAN is required"));
    }
    let mut with = scenario.clone();
    with.wbans[SUBJECT_WBAN as usize].uses_ima = true;
    let mut without = scenario.clone();
    without.wbans[SUBJECT_WBAN as usize].uses_ima = false;
    Ok((with, without))
}

pub fn compare(scenario: &Scenario, base_seed: u64, seeds: usize) -> Result<ComparisonRuns> {
    if seeds == 0 {
        return Err(Error::invalid("at least one seed is required"));
    }
    scenario.validate()?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| base_seed + i).collect();
    let (with, without) = variants(scenario)?;
    let with_reports = run_seeds(&with, &seed_list)?;
    let without_reports = run_seeds(&without, &seed_list)?;
    let arm = |uses_ima, reports: &[MetricsReport]| -> Result<ArmSummary> {
        Ok(ArmSummary {
            uses_ima,
            runs: reports
                .iter()
                .map(SeedOutcome::from_report)
                .collect::<Result<_>>()?,
        })
    };
    Ok(ComparisonRuns {
        comparison: Comparison {
            base_seed,
            with_ima: arm(true, &with_reports)?,
            without_ima: arm(false, &without_reports)?,
        },
        with_ima: with_reports,
        without_ima: without_reports,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(format_sig9).unwrap_or_else(|| "n/a".into())
}

/// Per-seed rows followed by means and ratios.
pub fn comparison_csv(c: &Comparison) -> String {
    let mut out = String::from(
        "seed,sop_with,sop_without,avgre_with_mj,avgre_without_mj,cts_per_superframe_with,candidate_pool_with\n",
    );
    for (w, wo) in c.pairs() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            w.seed,
            w.sop,
            wo.sop,
            format_sig9(w.final_avgre_mj),
            format_sig9(wo.final_avgre_mj),
            format_sig9(w.cts_per_superframe),
            format_sig9(w.mean_candidate_pool),
        );
    }
    let _ = writeln!(
        out,
        "mean,{},{},{},{},{},{}",
        format_sig9(c.with_ima.mean_sop()),
        format_sig9(c.without_ima.mean_sop()),
        format_sig9(c.with_ima.mean_final_avgre()),
        format_sig9(c.without_ima.mean_final_avgre()),
        format_sig9(c.with_ima.mean_cts_per_superframe()),
        format_sig9(c.with_ima.mean_candidate_pool()),
    );
    out
}

pub fn comparison_summary(c: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "compare: {} seed(s) starting at {}, subject WBAN {}",
        c.seeds(),
        c.base_seed,
        SUBJECT_WBAN
    );
    let _ = writeln!(
        out,
        "{:>8} {:>10} {:>10} {:>12} {:>12}",
        "seed", "SoP+IMA", "SoP-IMA", "AVGRE+IMA", "AVGRE-IMA"
    );
    for (w, wo) in c.pairs() {
        let _ = writeln!(
            out,
            "{:>8} {:>10} {:>10} {:>12.3} {:>12.3}",
            w.seed, w.sop, wo.sop, w.final_avgre_mj, wo.final_avgre_mj
        );
    }
    let _ = writeln!(
        out,
        "{:>8} {:>10.1} {:>10.1} {:>12.3} {:>12.3}",
        "mean",
        c.with_ima.mean_sop(),
        c.without_ima.mean_sop(),
        c.with_ima.mean_final_avgre(),
        c.without_ima.mean_final_avgre()
    );
    let _ = writeln!(out, "SoP ratio (with/without): {}", opt(c.sop_ratio()));
    let _ = writeln!(out, "AVGRE ratio (with/without): {}", opt(c.avgre_ratio()));
    let _ = writeln!(
        out,
        "seeds with SoP(with) >= SoP(without): {}/{}",
        c.sop_wins(),
        c.seeds()
    );
    let _ = writeln!(
        out,
        "seeds with AVGRE(with) >= AVGRE(without) at every sample: {}/{}",
        c.avgre_wins(),
        c.seeds()
    );
    let _ = writeln!(
        out,
        "CTS per superframe with IMA: {}",
        format_sig9(c.with_ima.mean_cts_per_superframe())
    );
    let _ = writeln!(out, "outage (subject WBAN, mean over seeds):");
    let _ = writeln!(out, "{:>10} {:>12} {:>12}", "thr_db", "with", "without");
    for ((thr, w), (_, wo)) in c
        .with_ima
        .mean_outage()
        .into_iter()
        .zip(c.without_ima.mean_outage())
    {
        let _ = writeln!(
            out,
            "{:>10} {:>12} {:>12}",
            format_sig9(thr),
            opt(w),
            opt(wo)
        );
    }
    out
}

/// Writes per-run exports and the comparison tables under `dir`.
pub fn export_comparison(runs: &ComparisonRuns, dir: &Path) -> Result<()> {
    for (label, reports) in [
        ("with_ima", &runs.with_ima),
        ("without_ima", &runs.without_ima),
    ] {
        for r in reports.iter() {
            metrics::export(r, &dir.join(label).join(format!("seed_{}", r.meta.seed)))?;
        }
    }
    write_file(
        &dir.join("comparison.csv"),
        &comparison_csv(&runs.comparison),
    )?;
    write_file(
        &dir.join("summary.txt"),
        &comparison_summary(&runs.comparison),
    )
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Final SoP and AVGRE per WBAN plus the outage table of one run.
pub fn run_summary(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "run: seed {}, {} s, scenario {}",
        report.meta.seed,
        format_sig9(report.meta.duration_s),
        report.meta.scenario_digest
    );
    let _ = writeln!(
        out,
        "{:>6} {:>4} {:>10} {:>10} {:>12}",
        "wban", "ima", "generated", "SoP", "AVGRE_mJ"
    );
    for s in &report.wban_stats {
        let avgre = report.avgre_series(s.wban).and_then(TimeSeries::last);
        let _ = writeln!(
            out,
            "{:>6} {:>4} {:>10} {:>10} {:>12}",
            s.wban,
            if s.uses_ima { "yes" } else { "no" },
            s.generated,
            report.final_sop(s.wban),
            opt(avgre)
        );
    }
    let _ = writeln!(out, "outage:");
    let _ = writeln!(
        out,
        "{:>8} {:>10} {:>14}",
        "subject", "thr_db", "probability"
    );
    for e in &report.outage {
        let _ = writeln!(
            out,
            "{:>8} {:>10} {:>14}",
            e.subject.to_string(),
            format_sig9(e.threshold_db),
            opt(e.probability)
        );
    }
    out
}

/// Writes the metrics files and `summary.txt` of one run under `dir`.
pub fn export_run(report: &MetricsReport, dir: &Path) -> Result<()> {
    metrics::export(report, dir)?;
    write_file(&dir.join("summary.txt"), &run_summary(report))
}

// ----------------------------------------------------------------- sweeps

/// Parses one `--param` value: JSON if it parses, otherwise a bare string
/// (so `inf` reaches the fields that accept it).
pub fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Splits `key=v1,v2,...`.
pub fn parse_param(param: &str) -> Result<(String, Vec<Value>)> {
    let (key, values) = param.split_once('=').ok_or_else(|| {
        Error::config(format!("--param {param:?}: expected key=value[,value...]"))
    })?;
    let key = key.trim();
    if key.is_empty() || values.trim().is_empty() {
        return Err(Error::config(format!(
            "--param {param:?}: empty key or value list"
        )));
    }
    Ok((
        key.to_string(),
        values.split(',').map(|v| parse_value(v.trim())).collect(),
    ))
}

/// Sets the dotted field path `path` (array indices as numbers) to `value`.
/// `wbans.N.sensor_count` resizes that WBAN's sensor list instead.
pub fn apply_param(scenario: &Scenario, path: &str, value: &Value) -> Result<Scenario> {
    let mut doc = serde_json::to_value(scenario).expect("scenario serializes");
    let parts: Vec<&str> = path.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = &mut doc;
    for p in parents {
        cur = match cur {
            Value::Object(m) => m.get_mut(*p),
            Value::Array(a) => p.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(format!("unknown parameter path {path:?}")))?;
    }
    if *last == SENSOR_COUNT_KEY && cur.get("sensors").is_some() {
        let n = value.as_u64().ok_or_else(|| {
            Error::config(format!("{path}: expected a sensor count, got {value}"))
        })?;
        let sensors = cur["sensors"].as_array_mut().expect("sensors is a list");
        let template = sensors
            .first()
            .cloned()
            .unwrap_or_else(|| serde_json::to_value(SensorConfig::random()).expect("serializes"));
        sensors.resize(n as usize, template);
    } else {
        let slot = match cur {
            Value::Object(m) => m.get_mut(*last),
            Value::Array(a) => last.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(format!("unknown parameter path {path:?}")))?;
        *slot = value.clone();
    }
    Scenario::from_json_value(doc).map_err(|e| match e {
        Error::Config(msg) => Error::config(format!("{path}={value}: {msg}")),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub assignments: Vec<(String, Value)>,
    pub comparison: Comparison,
}

/// Cartesian product of the grid, in the order given; an empty grid is a
/// single plain comparison.
pub fn grid_points(grid: &[(String, Vec<Value>)]) -> Vec<Vec<(String, Value)>> {
    let mut points = vec![Vec::new()];
    for (key, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

pub fn sweep(
    scenario: &Scenario,
    grid: &[(String, Vec<Value>)],
    base_seed: u64,
    seeds: usize,
) -> Result<Vec<SweepPoint>> {
    let points = grid_points(grid);
    // Resolve every point before running anything so bad paths fail fast.
    let scenarios = points
        .iter()
        .map(|p| {
            p.iter()
                .try_fold(scenario.clone(), |sc, (k, v)| apply_param(&sc, k, v))
        })
        .collect::<Result<Vec<_>>>()?;
    points
        .into_iter()
        .zip(scenarios)
        .map(|(assignments, sc)| {
            Ok(SweepPoint {
                assignments,
                comparison: compare(&sc, base_seed, seeds)?.comparison,
            })
        })
        .collect()
}

pub fn sweep_csv(grid_keys: &[String], points: &[SweepPoint]) -> String {
    let mut out = String::new();
    for k in grid_keys {
        out.push_str(k);
        out.push(',');
    }
    out.push_str(
        "mean_sop_with,mean_sop_without,sop_ratio,mean_avgre_with_mj,mean_avgre_without_mj,cts_per_superframe_with,candidate_pool_with\n",
    );
    for p in points {
        for (_, v) in &p.assignments {
            match v {
                Value::String(s) => out.push_str(s),
                other => out.push_str(&other.to_string()),
            }
            out.push(',');
        }
        let c = &p.comparison;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            format_sig9(c.with_ima.mean_sop()),
            format_sig9(c.without_ima.mean_sop()),
            opt(c.sop_ratio()),
            format_sig9(c.with_ima.mean_final_avgre()),
            format_sig9(c.without_ima.mean_final_avgre()),
            format_sig9(c.with_ima.mean_cts_per_superframe()),
            format_sig9(c.with_ima.mean_candidate_pool()),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn short() -> Scenario {
        let mut sc = Scenario::paper_like();
        sc.duration_s = 20.0;
        sc
    }

    #[test]
    fn param_parsing() {
        let (k, v) = parse_param("protocol.diff_margin_db=5,10,inf").unwrap();
        assert_eq!(k, "protocol.diff_margin_db");
        assert_eq!(v, vec![json!(5), json!(10), json!("inf")]);
        assert!(parse_param("novalue").is_err());
        assert!(parse_param("=1").is_err());
    }

    #[test]
    fn apply_known_and_unknown_paths() {
        let sc = short();
        let m = apply_param(&sc, "protocol.diff_margin_db", &json!("inf")).unwrap();
        assert!(m.protocol.diff_margin_db.is_infinite());
        let m = apply_param(&sc, "wbans.0.sensor_count", &json!(2)).unwrap();
        assert_eq!(m.wbans[0].sensors.len(), 2);
        assert_eq!(m.wbans[1].sensors.len(), 8);
        let m = apply_param(&sc, "wbans.1.uses_ima", &json!(true)).unwrap();
        assert!(m.wbans[1].uses_ima);
        for bad in ["protocol.nope", "nope", "wbans.7.uses_ima", "duration_s.x"] {
            assert!(
                matches!(apply_param(&sc, bad, &json!(1)), Err(Error::Config(_))),
                "{bad}"
            );
        }
        // Values are validated like a config file.
        assert!(apply_param(&sc, "duration_s", &json!(-1)).is_err());
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        assert_eq!(grid_points(&[]), vec![Vec::new()]);
        let g = vec![
            ("a".to_string(), vec![json!(1), json!(2)]),
            ("b".to_string(), vec![json!(3), json!(4), json!(5)]),
        ];
        let pts = grid_points(&g);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![("a".into(), json!(1)), ("b".into(), json!(3))]);
        assert_eq!(pts[5], vec![("a".into(), json!(2)), ("b".into(), json!(5))]);
    }

    #[test]
    fn parallel_runs_match_serial_runs() {
        let sc = short();
        let seeds = [3, 4, 5];
        let par = run_seeds(&sc, &seeds).unwrap();
        for (r, &seed) in par.iter().zip(&seeds) {
            let mut one = sc.clone();
            one.seed = seed;
            assert_eq!(r, &run_scenario(&one).unwrap());
        }
    }

    #[test]
    fn single_seed_comparison_has_one_row() {
        let runs = compare(&short(), 7, 1).unwrap();
        let csv = comparison_csv(&runs.comparison);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("7,"));
        assert!(comparison_summary(&runs.comparison).contains("SoP ratio"));
        assert!(compare(&short(), 7, 0).is_err());
    }

    #[test]
    fn variants_only_touch_the_subject() {
        let sc = short();
        let (w, wo) = variants(&sc).unwrap();
        assert!(w.wbans[0].uses_ima && !wo.wbans[0].uses_ima);
        assert_eq!(w.wbans[1], sc.wbans[1]);
        assert_eq!(wo.wbans[1], sc.wbans[1]);
    }
}
