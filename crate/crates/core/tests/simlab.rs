//! The simulation pipeline: determinism, bookkeeping, shared datasets and
//! the emitted tables.

use std::collections::BTreeMap;

use splinesel::simlab::{
    df_histogram, emit_tables, error_table, read_runs, run_simulation, simulate_to_dir, RunRecord,
    SigmaMode, SimConfig, TruthCurve,
};
use splinesel::spectrum::{DesignKind, SpectrumStore};
use splinesel::{Criterion, Executor};

fn collect(cfg: &SimConfig, exec: &Executor) -> Vec<RunRecord> {
    let store = SpectrumStore::in_memory();
    let mut out = Vec::new();
    run_simulation(cfg, &store, exec, &mut |r| {
        out.push(r.clone());
        Ok(())
    })
    .unwrap();
    out
}

fn small(n_list: Vec<usize>, replicates: usize) -> SimConfig {
    SimConfig {
        n_list,
        replicates,
        seed: 42,
        ..SimConfig::default()
    }
}

#[test]
fn output_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (name, exec) in [
        ("one", Executor::sequential()),
        ("two", Executor::parallel(2)),
        ("eight", Executor::parallel(8)),
    ] {
        let cfg = SimConfig {
            output_dir: dir.path().join(name),
            ..small(vec![41, 61], 300)
        };
        let (path, _) = simulate_to_dir(&cfg, &SpectrumStore::in_memory(), &exec).unwrap();
        files.push(std::fs::read(path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
}

#[test]
fn records_arrive_in_cell_order_with_full_counts() {
    let cfg = small(vec![31, 61], 70);
    let recs = collect(&cfg, &Executor::parallel(3));
    assert_eq!(recs.len(), 2 * 70 * 3);
    let mut counts: BTreeMap<(usize, String), usize> = BTreeMap::new();
    for r in &recs {
        *counts.entry((r.n, r.criterion.clone())).or_default() += 1;
    }
    assert!(counts.values().all(|&c| c == 70));
    let keys: Vec<(usize, usize)> = recs.iter().map(|r| (r.n, r.replicate)).collect();
    assert!(keys.windows(2).all(|w| w[0] <= w[1]));
    for r in &recs {
        assert!(r.sqerr >= 0.0 && r.df_hat > 2.0 && r.df_hat < r.n as f64);
        assert!((r.sqerr_response - r.sqerr).abs() < 1e-12 * r.sqerr.max(1.0));
    }
}

#[test]
fn single_replicate_reproduces_in_isolation() {
    // Replicate r does not depend on how many replicates follow it.
    let full = collect(&small(vec![61], 20), &Executor::sequential());
    let shorter = collect(&small(vec![61], 5), &Executor::sequential());
    assert_eq!(&full[..15], &shorter[..]);
}

#[test]
fn response_scale_error_uses_sigma_squared() {
    let cfg = SimConfig {
        sigma: 0.5,
        ..small(vec![41], 10)
    };
    for r in collect(&cfg, &Executor::sequential()) {
        assert!((r.sqerr_response - 0.25 * r.sqerr).abs() < 1e-12 * r.sqerr.max(1.0));
    }
}

#[test]
fn pure_noise_concentrates_near_two_df() {
    let cfg = SimConfig {
        truth: TruthCurve::Zero,
        ..small(vec![61], 200)
    };
    let recs = collect(&cfg, &Executor::sequential());
    for c in ["cp", "gml", "ee"] {
        let dfs: Vec<f64> = recs.iter().filter(|r| r.criterion == c).map(|r| r.df_hat).collect();
        let near = dfs.iter().filter(|&&d| d < 3.0).count();
        assert!(near * 2 > dfs.len(), "{c}: {near} of {} below 3 df", dfs.len());
    }
}

#[test]
fn estimated_sigma_mode_runs() {
    let cfg = SimConfig {
        sigma_mode: SigmaMode::Estimated { window: None },
        ..small(vec![121], 60)
    };
    let recs = collect(&cfg, &Executor::sequential());
    assert!(recs.iter().all(|r| !r.is_error()));
    let known = collect(&small(vec![121], 60), &Executor::sequential());
    let mean = |v: &[RunRecord]| v.iter().map(|r| r.df_hat).sum::<f64>() / v.len() as f64;
    assert!((mean(&recs) - mean(&known)).abs() < 1.0);
}

#[test]
fn failed_spectrum_skips_only_that_n() {
    let cfg = SimConfig {
        design: DesignKind::Explicit {
            x: (0..20).map(|i| i as f64).collect(),
        },
        n_list: vec![20, 25],
        replicates: 4,
        ..SimConfig::default()
    };
    let store = SpectrumStore::in_memory();
    let mut recs = Vec::new();
    let summary = run_simulation(&cfg, &store, &Executor::sequential(), &mut |r| {
        recs.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(summary.failed_n, vec![25]);
    assert_eq!(recs.len(), 4 * 3);
}

#[test]
fn tables_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        output_dir: dir.path().to_path_buf(),
        criteria: vec![Criterion::cp(), Criterion::gml()],
        ..small(vec![41, 61], 50)
    };
    let store = SpectrumStore::in_memory();
    let (path, _) = simulate_to_dir(&cfg, &store, &Executor::sequential()).unwrap();
    let recs = read_runs(&path).unwrap();
    assert_eq!(recs.len(), 2 * 50 * 2);
    let files = emit_tables(&recs, &cfg, &store, dir.path()).unwrap();
    let table1 = std::fs::read_to_string(&files.table1).unwrap();
    assert_eq!(table1.lines().count(), 1 + 4);
    let bars = std::fs::read_to_string(&files.df0_bars).unwrap();
    for line in bars.lines().skip(1) {
        let df0: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(df0 > 2.0 && df0 < 61.0);
    }

    let labels = vec!["cp".to_string(), "gml".to_string()];
    let hist = df_histogram(&recs, &labels, &cfg.n_list);
    for c in &labels {
        for &n in &cfg.n_list {
            let mass: usize = hist.iter().filter(|h| &h.criterion == c && h.n == n).map(|h| h.count).sum();
            assert_eq!(mass, 50);
        }
    }
    let table = error_table(&recs, &labels, &cfg.n_list);
    assert!(table.iter().all(|row| row.count == 50 && row.note.is_empty()));
}

#[test]
fn cp_spreads_more_than_gml_and_ee() {
    let recs = collect(&small(vec![61, 121], 400), &Executor::parallel(0));
    for n in [61, 121] {
        let sd = |c: &str| {
            let v: Vec<f64> = recs.iter().filter(|r| r.n == n && r.criterion == c).map(|r| r.df_hat).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
        };
        assert!(sd("cp") > sd("gml") && sd("cp") > sd("ee"), "n = {n}");
    }
}
