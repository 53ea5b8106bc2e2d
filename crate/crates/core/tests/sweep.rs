use std::fs;
use std::path::Path;

use approx::assert_relative_eq;
use lipscan::data::ProbeKind;
use lipscan::loss::LossKind;
use lipscan::sweep::*;
use lipscan::Error;
use proptest::prelude::*;

fn tiny(dir: &Path) -> SweepConfig {
    let mut c = SweepConfig {
        widths: vec![2, 4, 8],
        seeds: vec![0, 1],
        probe_epochs: vec![0, 10],
        probe_test_split: true,
        probe_sets: vec![ProbeKind::Gaussian, ProbeKind::Jitter],
        probe_set_size: 20,
        bounds: vec!["thm1".into(), "cor1".into(), "cor2".into(), "duality".into()],
        output_dir: dir.to_path_buf(),
        ..SweepConfig::default()
    };
    c.dataset.n_train = 60;
    c.dataset.n_test = 30;
    c.dataset.width = 6;
    c.dataset.classes = 3;
    c.train.epochs = 20;
    c.train.batch_size = 16;
    c.probe.hutchinson.num_probes = 5;
    c.probe.lanczos_steps = 5;
    c.probe.noise.batch_size = 8;
    c.probe.noise.num_batches = 5;
    c
}

/// `results.csv` without the trailing wall-time column.
fn without_wall_time(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn default_config_runs_the_smoke_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig { output_dir: dir.path().to_path_buf(), ..serde_json::from_str("{}").unwrap() };
    let result = run_sweep_with_workers(&cfg, 2).unwrap();
    assert_eq!(cfg.widths.len(), 3);
    assert_eq!(cfg.train.epochs, 50);
    assert!(result.failed.is_empty());
    // widths x seeds x {0, 50} x {train, probe:gaussian}
    assert_eq!(result.rows.len(), 3 * 2 * 2);
    for r in result.rows.iter().filter(|r| r.split == "train") {
        for m in METRIC_COLUMNS {
            assert!(column_f64(r, m).unwrap().is_some(), "{m} missing at width {} epoch {}", r.width, r.epoch);
        }
        assert!(r.dist_init.is_some());
    }
    let summary = emit_reports(&result, dir.path()).unwrap();
    assert_eq!(summary.cells, 3);
    assert_eq!(summary.bounds.violations, 0);
    assert!(summary.bounds.asserted > 0);
    for f in ["results.csv", "bounds.jsonl", "epochwise.csv", "history.csv", "summary.json", "charts/test_err.svg"] {
        assert!(dir.path().join(f).is_file(), "{f} not written");
    }
}

#[test]
fn results_schema_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let result = run_sweep_with_workers(&cfg, 1).unwrap();
    // widths x seeds x epochs {0, 10, 20} x {train, test, two probe sets}
    assert_eq!(result.rows.len(), 3 * 2 * 3 * 4);
    let mut sorted = result.rows.clone();
    sort_rows(&mut sorted);
    assert_eq!(sorted, result.rows);
    let splits: Vec<&str> = result.rows[..4].iter().map(|r| r.split.as_str()).collect();
    assert_eq!(splits, ["train", "test", "probe:gaussian", "probe:jitter"]);
    assert!(result.bounds.iter().all(|b| b.passes()));
    // thm1 and cor2 (B = 1) emit two reports each.
    assert_eq!(result.bounds.len(), 3 * 2 * 3 * 6);

    emit_reports(&result, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        "width,params,seed,epoch,split,train_err,test_err,train_loss,test_loss,emp_lipschitz,\
         emp_lipschitz_max,lip_upper,loss_jac_norm_sq,param_grad_norm_sq,hessian_trace,\
         hessian_trace_stderr,lambda_max_H,lambda_min_H,lambda_min_nonzero_H,noise_top_eig,\
         confidence,stability_margin,dist_init_json,wall_s"
    );
    let back = read_results_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(back.len(), result.rows.len());
    for (a, b) in back.iter().zip(&result.rows) {
        let b = lipscan::probes::ProbeReport {
            emp_lipschitz_mean: None,
            emp_lipschitz_median: None,
            lipschitz_skipped: None,
            lip_upper_pool_corrected: None,
            stability_satisfied: None,
            ..b.clone()
        };
        assert_eq!(a, &b);
    }
    let lines = fs::read_to_string(dir.path().join("bounds.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), result.bounds.len());
    for l in lines.lines() {
        let b: lipscan::bounds::BoundReport = serde_json::from_str(l).unwrap();
        assert!(b.width.is_some() && b.seed.is_some() && b.epoch.is_some());
    }
}

#[test]
fn svg_charts_are_well_formed_and_span_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let result = run_sweep_with_workers(&tiny(dir.path()), 1).unwrap();
    let paths = write_charts(&result.rows, &DEFAULT_CHARTS, &dir.path().join("charts")).unwrap();
    assert!(!paths.is_empty());
    for path in paths {
        let metric = path.file_stem().unwrap().to_str().unwrap().to_string();
        let text = fs::read_to_string(&path).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let root = doc.root_element();
        assert_eq!(root.tag_name().name(), "svg");
        assert_eq!(root.attribute("data-metric"), Some(metric.as_str()));
        let series = chart_series(&result.rows, &metric).unwrap();
        let values: Vec<f64> = series.values().flatten().map(|p| p.1).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ymin: f64 = root.attribute("data-ymin").unwrap().parse().unwrap();
        let ymax: f64 = root.attribute("data-ymax").unwrap().parse().unwrap();
        assert_eq!((ymin, ymax), (lo, hi), "{metric}");
        let polylines: Vec<_> = root.descendants().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(polylines.len(), series.len() + 1);
        // Plotted points stay inside the plot area, extremes on its edges.
        let ys: Vec<f64> = polylines
            .iter()
            .flat_map(|p| p.attribute("points").unwrap().split(' ').map(|xy| xy.split_once(',').unwrap().1.parse().unwrap()))
            .collect();
        let top = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let bottom = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            assert_relative_eq!(top, 60.0, epsilon = 0.01);
            assert_relative_eq!(bottom, 340.0, epsilon = 0.01);
        }
    }
    // Empty input still yields a valid document.
    let empty = render_chart("x", &Default::default());
    roxmltree::Document::parse(&empty).unwrap();
}

#[test]
fn resume_and_worker_count_do_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_sweep_with_workers(&tiny(a.path()), 1).unwrap();
    emit_reports(&first, a.path()).unwrap();
    let fresh = run_sweep_with_workers(&tiny(b.path()), 3).unwrap();
    emit_reports(&fresh, b.path()).unwrap();
    assert_eq!(fresh.resumed, 0);
    assert_eq!(without_wall_time(&a.path().join("results.csv")), without_wall_time(&b.path().join("results.csv")));
    for f in ["bounds.jsonl", "epochwise.csv", "summary.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }

    // Simulate a crash that lost two cells.
    let cells = a.path().join("cells");
    let mut files: Vec<_> = fs::read_dir(&cells).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    fs::remove_file(&files[0]).unwrap();
    fs::remove_file(&files[3]).unwrap();
    let resumed = run_sweep_with_workers(&tiny(a.path()), 2).unwrap();
    assert_eq!(resumed.resumed, 4);
    emit_reports(&resumed, a.path()).unwrap();
    assert_eq!(without_wall_time(&a.path().join("results.csv")), without_wall_time(&b.path().join("results.csv")));

    // A different configuration does not reuse the stored cells.
    let mut changed = tiny(a.path());
    changed.train.epochs = 19;
    assert_eq!(run_sweep_with_workers(&changed, 1).unwrap().resumed, 0);
}

#[test]
fn single_width_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig { widths: vec![4], seeds: vec![3], probe_sets: vec![], ..tiny(dir.path()) };
    let result = run_sweep_with_workers(&cfg, 1).unwrap();
    assert_eq!(result.histories.len(), 1);
    assert_eq!(result.histories[0].2.epochs.len(), 20);
    assert_eq!(result.rows.len(), 3 * 2);
    assert!(matches!(correlate(&result.rows, 20, "emp_lipschitz", "test_err"), Err(Error::InsufficientData(_))));
}

#[test]
fn diverging_cells_fail_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.loss = LossKind::Mse;
    cfg.train.lr = 1e4;
    cfg.train.warmup_epochs = 0;
    match run_sweep_with_workers(&cfg, 1) {
        Err(Error::SweepFailed { failed, total }) => assert_eq!((failed, total), (6, 6)),
        other => panic!("expected SweepFailed, got {other:?}"),
    }
    assert!(!dir.path().join("cells").exists() || fs::read_dir(dir.path().join("cells")).unwrap().count() == 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spearman_properties(xs in prop::collection::vec(-1e3f64..1e3, 4..20), seed in 0u64..1000) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| (x * 0.37 + ((i as u64 * 31 + seed) % 17) as f64).sin()).collect();
        if let Ok(r) = spearman(&xs, &ys) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert!((r - spearman(&ys, &xs).unwrap()).abs() < 1e-12);
            // Invariant under strictly increasing transforms.
            let t: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            prop_assert!((r - spearman(&t, &ys).unwrap()).abs() < 1e-12);
        }
    }
}
