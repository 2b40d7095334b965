//! Run metrics: residual energy, WBAN lifetime, delivered-packet count
//! (SoP), SINR logs and outage probability, plus CSV/JSON export.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel;
use crate::error::{Error, Result};
use crate::ima::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub metric: String,
    pub unit: String,
    /// `(time_s, value)` with strictly increasing times.
    pub samples: Vec<(f64, f64)>,
}

impl TimeSeries {
    pub fn new(metric: &str, unit: &str) -> Self {
        TimeSeries {
            metric: metric.to_string(),
            unit: unit.to_string(),
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, time_s: f64, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.samples.last() {
            if time_s <= last {
                return Err(Error::Internal(format!(
                    "{}: sample time {time_s} s not after {last} s",
                    self.metric
                )));
            }
        }
        self.samples.push((time_s, value));
        Ok(())
    }

    /// Value at the sample nearest `time_s`; earlier sample wins ties.
    pub fn nearest(&self, time_s: f64) -> Option<f64> {
        self.samples
            .iter()
            .min_by(|a, b| (a.0 - time_s).abs().total_cmp(&(b.0 - time_s).abs()))
            .map(|s| s.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.samples.last().map(|s| s.1)
    }
}

/// What a row of metrics refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subject {
    Wban(u16),
    Node(NodeId),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Wban(w) => write!(f, "w{w}"),
            Subject::Node(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSeries {
    pub node: NodeId,
    pub series: TimeSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WbanSeries {
    pub wban: u16,
    pub series: TimeSeries,
}

/// SINR of every reception attempt at one node, `(time_s, sinr_db)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrLog {
    pub node: NodeId,
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageEntry {
    pub subject: Subject,
    pub threshold_db: f64,
    /// `None` when the subject logged no SINR samples.
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub node: NodeId,
    pub initial_mj: f64,
    pub final_mj: f64,
    pub drained_mj: f64,
    pub unconstrained: bool,
}

/// Protocol and traffic counters of one WBAN.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WbanStats {
    pub wban: u16,
    pub uses_ima: bool,
    pub superframes: u64,
    pub generated: u64,
    pub delivered: u64,
    pub delivered_relayed: u64,
    pub delivered_direct: u64,
    pub duplicates: u64,
    pub dropped: u64,
    pub rts_sent: u64,
    pub cts_sent: u64,
    pub winners_announced: u64,
    pub fallbacks: u64,
    pub candidates_admitted: u64,
    pub frames_sent: Vec<(String, u64)>,
    pub receptions_lost: u64,
    pub cts_audited: u64,
    pub cts_audit_violations: u64,
}

impl WbanStats {
    pub fn cts_per_superframe(&self) -> f64 {
        if self.superframes == 0 {
            0.0
        } else {
            self.cts_sent as f64 / self.superframes as f64
        }
    }

    /// Mean number of admitted relay candidates per relay-mode RTS.
    pub fn mean_candidate_pool(&self) -> f64 {
        if self.rts_sent == 0 {
            0.0
        } else {
            self.candidates_admitted as f64 / self.rts_sent as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub scenario_digest: String,
    pub duration_s: f64,
    pub metric_sample_period_s: f64,
    pub outage_thresholds_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub residual_energy: Vec<NodeSeries>,
    pub lifetime: Vec<WbanSeries>,
    pub sop: Vec<WbanSeries>,
    pub avgre: Vec<WbanSeries>,
    pub sinr_log: Vec<SinrLog>,
    pub outage: Vec<OutageEntry>,
    pub energy_ledger: Vec<EnergyLedger>,
    pub wban_stats: Vec<WbanStats>,
}

/// Counts coordinator deliveries once per `(origin, seq)`.
#[derive(Debug, Clone, Default)]
pub struct DeliveryCounter {
    seen: BTreeSet<(NodeId, u64)>,
}

impl DeliveryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` when this packet was not delivered before.
    pub fn record_delivery(&mut self, origin: NodeId, seq: u64) -> bool {
        self.seen.insert((origin, seq))
    }

    pub fn sop(&self) -> u64 {
        self.seen.len() as u64
    }
}

impl MetricsReport {
    pub fn wbans(&self) -> impl Iterator<Item = u16> + '_ {
        self.wban_stats.iter().map(|s| s.wban)
    }

    pub fn stats(&self, wban: u16) -> Option<&WbanStats> {
        self.wban_stats.iter().find(|s| s.wban == wban)
    }

    fn wban_series(list: &[WbanSeries], wban: u16) -> Option<&TimeSeries> {
        list.iter().find(|s| s.wban == wban).map(|s| &s.series)
    }

    pub fn sop_series(&self, wban: u16) -> Option<&TimeSeries> {
        Self::wban_series(&self.sop, wban)
    }

    pub fn avgre_series(&self, wban: u16) -> Option<&TimeSeries> {
        Self::wban_series(&self.avgre, wban)
    }

    pub fn lifetime_series(&self, wban: u16) -> Option<&TimeSeries> {
        Self::wban_series(&self.lifetime, wban)
    }

    pub fn final_sop(&self, wban: u16) -> u64 {
        self.sop_series(wban).and_then(|s| s.last()).unwrap_or(0.0) as u64
    }

    pub fn residual_series(&self, node: NodeId) -> Option<&TimeSeries> {
        self.residual_energy
            .iter()
            .find(|s| s.node == node)
            .map(|s| &s.series)
    }

    fn sinr_samples(&self, subject: Subject) -> Vec<f64> {
        self.sinr_log
            .iter()
            .filter(|l| match subject {
                Subject::Node(n) => l.node == n,
                Subject::Wban(w) => l.node.wban == w,
            })
            .flat_map(|l| l.samples.iter().map(|s| s.1))
            .collect()
    }
}

/// Mean sensor residual energy of `wban` at the sample nearest `time_s`.
/// Coordinators are excluded.
pub fn average_residual_energy(report: &MetricsReport, wban: u16, time_s: f64) -> Option<f64> {
    let values: Vec<f64> = report
        .residual_energy
        .iter()
        .filter(|s| s.node.wban == wban && !s.node.is_coordinator())
        .filter_map(|s| s.series.nearest(time_s))
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// `Pr(SINR <= threshold)` over every logged attempt; `None` if nothing was logged.
pub fn compute_outage(report: &MetricsReport, subject: Subject, threshold_db: f64) -> Option<f64> {
    let samples = report.sinr_samples(subject);
    channel::outage_probability(&samples, threshold_db).ok()
}

/// Outage entries for every WBAN and node at every threshold.
pub fn outage_table(report: &MetricsReport) -> Vec<OutageEntry> {
    let mut subjects: Vec<Subject> = report.wbans().map(Subject::Wban).collect();
    subjects.extend(report.sinr_log.iter().map(|l| Subject::Node(l.node)));
    subjects.sort();
    subjects.dedup();
    let mut out = Vec::new();
    for s in subjects {
        for &t in &report.meta.outage_thresholds_db {
            out.push(OutageEntry {
                subject: s,
                threshold_db: t,
                probability: compute_outage(report, s, t),
            });
        }
    }
    out
}

/// `value` with 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(value: f64) -> String {
    if value == 0.0 {
        return "0".to_string();
    }
    if !value.is_finite() {
        return if value.is_nan() {
            "nan".into()
        } else if value > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{value:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let text = if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{value:.decimals$}")
    } else {
        format!("{mantissa}e{exp}")
    };
    trim_zeros(text)
}

fn trim_zeros(s: String) -> String {
    let (num, exp) = match s.find('e') {
        Some(i) => (s[..i].to_string(), s[i..].to_string()),
        None => (s.clone(), String::new()),
    };
    if !num.contains('.') {
        return s;
    }
    let trimmed = num.trim_end_matches('0').trim_end_matches('.');
    format!("{trimmed}{exp}")
}

/// One CSV table: header `time_s,<subject>,value`, rows sorted by (time, subject).
pub fn render_csv(subject_col: &str, rows: &mut [(f64, Subject, f64)]) -> String {
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = format!("time_s,{subject_col},value\n");
    for (t, s, v) in rows.iter() {
        out.push_str(&format!("{},{},{}\n", format_sig9(*t), s, format_sig9(*v)));
    }
    out
}

/// Parses a table written by [`render_csv`] back to `(time, subject, value)` text triples.
pub fn parse_csv(text: &str) -> Result<Vec<(f64, String, f64)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty CSV"))?;
    if !header.starts_with("time_s,") || !header.ends_with(",value") {
        return Err(Error::invalid(format!("unexpected CSV header {header:?}")));
    }
    lines
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::invalid(format!("bad CSV row {line:?}")));
            }
            let t = parts[0]
                .parse()
                .map_err(|_| Error::invalid(format!("bad time in {line:?}")))?;
            let v = parts[2]
                .parse()
                .map_err(|_| Error::invalid(format!("bad value in {line:?}")))?;
            Ok((t, parts[1].to_string(), v))
        })
        .collect()
}

/// Every CSV file of a report as `(file name, contents)`, in a fixed order.
pub fn csv_files(report: &MetricsReport) -> Vec<(String, String)> {
    let mut files = Vec::new();
    for w in report.wbans() {
        let wname = format!("w{w}");

        let mut rows: Vec<_> = report
            .residual_energy
            .iter()
            .filter(|s| s.node.wban == w)
            .flat_map(|s| {
                s.series
                    .samples
                    .iter()
                    .map(move |&(t, v)| (t, Subject::Node(s.node), v))
            })
            .collect();
        files.push((
            format!("residual_energy_{wname}.csv"),
            render_csv("node", &mut rows),
        ));

        for (metric, list) in [
            ("lifetime", &report.lifetime),
            ("sop", &report.sop),
            ("avgre", &report.avgre),
        ] {
            let mut rows: Vec<_> = list
                .iter()
                .filter(|s| s.wban == w)
                .flat_map(|s| {
                    s.series
                        .samples
                        .iter()
                        .map(move |&(t, v)| (t, Subject::Wban(w), v))
                })
                .collect();
            files.push((
                format!("{metric}_{wname}.csv"),
                render_csv("wban", &mut rows),
            ));
        }

        let mut rows: Vec<_> = report
            .sinr_log
            .iter()
            .filter(|l| l.node.wban == w)
            .flat_map(|l| {
                l.samples
                    .iter()
                    .map(move |&(t, v)| (t, Subject::Node(l.node), v))
            })
            .collect();
        files.push((format!("sinr_{wname}.csv"), render_csv("node", &mut rows)));

        for &thr in &report.meta.outage_thresholds_db {
            let mut rows: Vec<_> = report
                .outage
                .iter()
                .filter(|o| o.threshold_db == thr)
                .filter(|o| match o.subject {
                    Subject::Wban(x) => x == w,
                    Subject::Node(n) => n.wban == w,
                })
                .filter_map(|o| {
                    o.probability
                        .map(|p| (report.meta.duration_s, o.subject, p))
                })
                .collect();
            files.push((
                format!("outage_{}db_{wname}.csv", format_sig9(thr)),
                render_csv("subject", &mut rows),
            ));
        }
    }
    files
}

pub fn to_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `<metric>_<wban>.csv` files and `report.json` under `dir`.
pub fn export(report: &MetricsReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, contents) in csv_files(report) {
        let p = dir.join(name);
        write_file(&p, &contents)?;
        written.push(p);
    }
    let p = dir.join("report.json");
    write_file(&p, &to_json(report))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> RunMeta {
        RunMeta {
            seed: 1,
            scenario_digest: "x".into(),
            duration_s: 10.0,
            metric_sample_period_s: 10.0,
            outage_thresholds_db: vec![17.3],
        }
    }

    fn series(metric: &str, samples: &[(f64, f64)]) -> TimeSeries {
        let mut s = TimeSeries::new(metric, "mJ");
        for &(t, v) in samples {
            s.push(t, v).unwrap();
        }
        s
    }

    fn report() -> MetricsReport {
        let n1 = NodeId::new(0, 1);
        let n2 = NodeId::new(0, 2);
        MetricsReport {
            meta: meta(),
            residual_energy: vec![
                NodeSeries {
                    node: n1,
                    series: series("residual_energy", &[(0.0, 150.0), (10.0, 100.0)]),
                },
                NodeSeries {
                    node: n2,
                    series: series("residual_energy", &[(0.0, 150.0), (10.0, 140.0)]),
                },
            ],
            lifetime: vec![WbanSeries {
                wban: 0,
                series: series("lifetime", &[(0.0, 300.0), (10.0, 240.0)]),
            }],
            sop: vec![WbanSeries {
                wban: 0,
                series: series("sop", &[(0.0, 0.0), (10.0, 3.0)]),
            }],
            avgre: vec![WbanSeries {
                wban: 0,
                series: series("avgre", &[(0.0, 150.0), (10.0, 120.0)]),
            }],
            sinr_log: vec![
                SinrLog {
                    node: n1,
                    samples: vec![(1.0, 15.0)],
                },
                SinrLog {
                    node: n2,
                    samples: vec![(2.0, 25.0)],
                },
            ],
            outage: Vec::new(),
            energy_ledger: Vec::new(),
            wban_stats: vec![WbanStats {
                wban: 0,
                ..WbanStats::default()
            }],
        }
    }

    #[test]
    fn series_times_strictly_increase() {
        let mut s = TimeSeries::new("m", "u");
        s.push(0.0, 1.0).unwrap();
        assert!(s.push(0.0, 2.0).is_err());
        s.push(1.0, 2.0).unwrap();
        assert_eq!(s.nearest(0.4), Some(1.0));
        assert_eq!(s.nearest(0.5), Some(1.0));
        assert_eq!(s.nearest(0.6), Some(2.0));
    }

    #[test]
    fn delivery_counting() {
        let mut c = DeliveryCounter::new();
        assert_eq!(c.sop(), 0);
        let n = NodeId::new(0, 1);
        for seq in 0..3 {
            assert!(c.record_delivery(n, seq));
        }
        assert_eq!(c.sop(), 3);
        assert!(!c.record_delivery(n, 1));
        assert_eq!(c.sop(), 3);
    }

    #[test]
    fn avgre_examples() {
        let r = report();
        assert_eq!(average_residual_energy(&r, 0, 0.0), Some(150.0));
        assert_eq!(average_residual_energy(&r, 0, 10.0), Some(120.0));
        assert_eq!(average_residual_energy(&r, 3, 0.0), None);
    }

    #[test]
    fn outage_examples() {
        let r = report();
        assert_eq!(compute_outage(&r, Subject::Wban(0), 17.3), Some(0.5));
        assert_eq!(compute_outage(&r, Subject::Wban(0), 10.0), Some(0.0));
        assert_eq!(
            compute_outage(&r, Subject::Wban(0), f64::INFINITY),
            Some(1.0)
        );
        assert_eq!(
            compute_outage(&r, Subject::Node(NodeId::new(0, 7)), 17.3),
            None
        );
        let table = outage_table(&r);
        assert_eq!(table.len(), 3);
        assert_eq!(table[0].subject, Subject::Wban(0));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(150.0), "150");
        assert_eq!(format_sig9(149.8767), "149.8767");
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e9");
        assert_eq!(format_sig9(-2.5e-7), "-2.5e-7");
        assert_eq!(format_sig9(17.3), "17.3");
    }

    #[test]
    fn csv_fixture() {
        let r = report();
        let files = csv_files(&r);
        let names: Vec<_> = files.iter().map(|f| f.0.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "residual_energy_w0.csv",
                "lifetime_w0.csv",
                "sop_w0.csv",
                "avgre_w0.csv",
                "sinr_w0.csv",
                "outage_17.3db_w0.csv",
            ]
        );
        assert_eq!(
            files[0].1,
            "time_s,node,value\n0,w0n1,150\n0,w0n2,150\n10,w0n1,100\n10,w0n2,140\n"
        );
        assert_eq!(files[2].1, "time_s,wban,value\n0,w0,0\n10,w0,3\n");
        assert_eq!(files[4].1, "time_s,node,value\n1,w0n1,15\n2,w0n2,25\n");
    }

    #[test]
    fn empty_report_has_headers_only() {
        let mut r = report();
        for s in &mut r.residual_energy {
            s.series.samples.clear();
        }
        for s in r.lifetime.iter_mut().chain(&mut r.sop).chain(&mut r.avgre) {
            s.series.samples.clear();
        }
        r.sinr_log.clear();
        for (_, contents) in csv_files(&r) {
            assert_eq!(contents.lines().count(), 1, "{contents}");
        }
    }

    #[test]
    fn csv_reparses() {
        let r = report();
        let (_, text) = &csv_files(&r)[0];
        let rows = parse_csv(text).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3], (10.0, "w0n2".to_string(), 140.0));
    }

    #[test]
    fn export_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let written = export(&report(), dir.path()).unwrap();
        assert_eq!(written.len(), 7);
        let json = fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report());
    }

    #[test]
    fn export_reports_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = export(&report(), &blocker.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("file"));
    }
}
