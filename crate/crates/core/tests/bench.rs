// SPDX-License-Identifier: Apache-2.0

use opcvault::bench::{normalize, run_matrix, summary_csv, BenchPlan, ConfigName, RowStatus, DEFAULT_ALTERNATE};
use opcvault::layout::{gen_random, GenParams, Rect};

fn plan(dir: &std::path::Path) -> BenchPlan {
    let l = gen_random(&GenParams {
        n_polys: 10,
        bbox: Rect::new(0, 0, 2000, 2000),
        ..GenParams::regression(3)
    })
    .unwrap();
    let mut p = BenchPlan::new(l, dir.join("work"));
    p.workers = 2;
    p.repeats = 2;
    p.tile_size = 1000;
    p
}

#[test]
fn full_ladder_shares_one_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let p = plan(tmp.path());
    let mut seen = Vec::new();
    let samples = run_matrix(&p, |s| seen.push(s.config)).unwrap();
    assert_eq!(samples.len(), 8);
    // round-robin: each repeat visits every config before the next repeat
    assert_eq!(
        &seen[..4],
        &[
            ConfigName::Baseline,
            ConfigName::StorageSidecar,
            ConfigName::StorageEncrypted,
            ConfigName::EndToEnd
        ]
    );
    assert_eq!(seen[..4], seen[4..]);
    assert!(samples.iter().all(|s| s.output_digest == samples[0].output_digest));
    assert!(samples.iter().all(|s| s.wall_seconds > 0.0));
    let r = normalize(&samples, DEFAULT_ALTERNATE).unwrap();
    assert_eq!(r.rows.iter().filter(|r| r.status == RowStatus::Measured).count(), 4);
    assert_eq!(r.rows.iter().filter(|r| r.status == RowStatus::NotAvailable).count(), 2);
    assert_eq!(summary_csv(&r).unwrap().iter().filter(|&&b| b == b'\n').count(), 7);
}

#[test]
fn only_unavailable_and_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = plan(tmp.path());
    p.repeats = 1;
    p.configs = vec![ConfigName::Baseline, ConfigName::KataVm];
    let samples = run_matrix(&p, |_| {}).unwrap();
    assert_eq!(samples.len(), 1);
    let r = normalize(&samples, DEFAULT_ALTERNATE).unwrap();
    assert_eq!(r.rows[0].overhead_pct, Some(0.0));
}

#[test]
fn non_empty_work_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let p = plan(tmp.path());
    std::fs::create_dir_all(p.work_dir.join("junk")).unwrap();
    let e = run_matrix(&p, |_| {}).unwrap_err();
    assert!(e.samples.is_empty());
}
