use std::collections::BTreeSet;

use wban_ima::experiment::{self, SUBJECT_WBAN};
use wban_ima::metrics::{self, MetricsReport};
use wban_ima::{run_scenario, Error, Scenario};

fn short_run() -> MetricsReport {
    let mut sc = Scenario::paper_like();
    sc.duration_s = 60.0;
    sc.seed = 5;
    run_scenario(&sc).unwrap()
}

fn close_to_9_digits(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-8 * a.abs().max(b.abs())
}

#[test]
fn csv_reparses_to_the_report_series() {
    let report = short_run();
    let files = metrics::csv_files(&report);
    let sop = &files.iter().find(|(n, _)| n == "sop_w0.csv").unwrap().1;
    let rows = metrics::parse_csv(sop).unwrap();
    let series = report.sop_series(SUBJECT_WBAN).unwrap();
    assert_eq!(rows.len(), series.samples.len());
    for ((t, subject, v), &(st, sv)) in rows.iter().zip(&series.samples) {
        assert_eq!(subject, "w0");
        assert!(
            close_to_9_digits(*t, st) && close_to_9_digits(*v, sv),
            "{t},{v} vs {st},{sv}"
        );
    }

    let residual = &files
        .iter()
        .find(|(n, _)| n == "residual_energy_w0.csv")
        .unwrap()
        .1;
    let rows = metrics::parse_csv(residual).unwrap();
    for s in report.residual_energy.iter().filter(|s| s.node.wban == 0) {
        let name = s.node.to_string();
        let mine: Vec<_> = rows.iter().filter(|r| r.1 == name).collect();
        assert_eq!(mine.len(), s.series.samples.len(), "{name}");
        for (r, &(t, v)) in mine.iter().zip(&s.series.samples) {
            assert!(close_to_9_digits(r.0, t) && close_to_9_digits(r.2, v));
        }
    }
}

#[test]
fn json_round_trips() {
    let report = short_run();
    let text = metrics::to_json(&report);
    let back: MetricsReport = serde_json::from_str(&text).unwrap();
    assert_eq!(metrics::to_json(&back), text);
}

#[test]
fn export_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    experiment::export_run(&short_run(), a.path()).unwrap();
    experiment::export_run(&short_run(), b.path()).unwrap();
    let names: BTreeSet<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(names.len() > 3);
    for name in names {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
}

#[test]
fn unwritable_destination_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = experiment::export_run(&short_run(), &blocker.join("out")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn sweep_yields_one_point_per_grid_cell() {
    let mut sc = Scenario::paper_like();
    sc.duration_s = 5.0;
    let grid = vec![experiment::parse_param("wbans.0.sensor_count=2,4").unwrap()];
    let points = experiment::sweep(&sc, &grid, 1, 2).unwrap();
    assert_eq!(points.len(), 2);
    let csv = experiment::sweep_csv(&["wbans.0.sensor_count".into()], &points);
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn unknown_sweep_key_is_a_config_error() {
    let sc = Scenario::paper_like();
    let err = experiment::apply_param(&sc, "protocol.nope", &serde_json::json!(1)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
