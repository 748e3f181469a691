use sumgp_core::bench::{emit_outputs, mean_std, run_experiment, ExperimentConfig, ModelKind, Report, REPORT_HEADER};

fn read_rows(path: &std::path::Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    (header, r.records().map(|x| x.unwrap()).collect())
}

fn small_run(figures: bool) -> Report {
    let cfg = ExperimentConfig { replicates: 2, seed: 5, figures, ..ExperimentConfig::new("ho", "constrained,unconstrained") };
    run_experiment(&cfg).unwrap()
}

#[test]
fn empty_report_has_header_only() {
    let report = Report {
        config: ExperimentConfig::new("ho", "constrained"),
        config_hash: "0".into(),
        replicates: Vec::new(),
        seconds: 0.0,
    };
    let dir = tempfile::tempdir().unwrap();
    let written = emit_outputs(&report, dir.path()).unwrap();
    let (header, rows) = read_rows(&dir.path().join("report.csv"));
    assert_eq!(header, REPORT_HEADER.to_vec());
    assert!(rows.is_empty());
    assert!(written.iter().all(|p| p.extension().is_none_or(|e| e != "svg")));
}

#[test]
fn two_replicates_give_rows_figures_and_aggregates() {
    let report = small_run(true);
    let dir = tempfile::tempdir().unwrap();
    let written = emit_outputs(&report, dir.path()).unwrap();
    let svgs = written.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).count();
    assert_eq!(svgs, 2);
    let (_, rows) = read_rows(&dir.path().join("report.csv"));
    for kind in [ModelKind::Constrained, ModelKind::Unconstrained] {
        let per: Vec<_> = rows.iter().filter(|r| &r[0] == "replicate" && &r[1] == kind.key()).collect();
        let agg: Vec<_> = rows.iter().filter(|r| &r[0] == "aggregate" && &r[1] == kind.key()).collect();
        assert_eq!(per.len(), 2);
        assert_eq!(agg.len(), 1);
        let rmse: Vec<f64> = per.iter().map(|r| r[6].parse().unwrap()).collect();
        let dc: Vec<f64> = per.iter().map(|r| r[8].parse().unwrap()).collect();
        let (rm, rs) = mean_std(&rmse);
        let (dm, ds) = mean_std(&dc);
        for (col, want) in [(6, rm), (7, rs), (8, dm), (9, ds)] {
            let got: f64 = agg[0][col].parse().unwrap();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-12), "column {col}: {got} vs {want}");
        }
    }
}

#[test]
fn identical_seeds_give_identical_reports() {
    let a = small_run(false);
    let b = small_run(false);
    for kind in [ModelKind::Constrained, ModelKind::Unconstrained] {
        let ra = a.results_for(kind);
        let rb = b.results_for(kind);
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.rmse.to_bits(), y.rmse.to_bits());
            assert_eq!(x.delta_c.to_bits(), y.delta_c.to_bits());
            assert_eq!(x.prediction.mean, y.prediction.mean);
            assert_eq!(format!("{:?}", x.trace), format!("{:?}", y.trace));
        }
    }
    assert_eq!(a.config_hash, b.config_hash);
}
