// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::sync::{Arc, Mutex};

use opcvault::cluster::{run_local, run_worker, LocalWorker, Primary, RunConfig, WorkerConfig};
use opcvault::layout::{gen_random, write_layout, GenParams, Layout, Rect};
use opcvault::litho::OpticalModel;
use opcvault::opc::{correct_tile, OpcParams, DEFAULT_FRAG_LEN};
use opcvault::secure_store::{ObjectStore, PlainStore};
use opcvault::transport::{gen_workload_credentials, load_credentials, Credentials, SecurityMode};

fn layout() -> Layout {
    gen_random(&GenParams {
        n_polys: 18,
        bbox: Rect::new(0, 0, 3000, 3000),
        ..GenParams::regression(11)
    })
    .unwrap()
}

fn monolithic(l: &Layout) -> Vec<u8> {
    let c = correct_tile(l, &OpticalModel::default(), &OpcParams::default(), DEFAULT_FRAG_LEN).unwrap();
    write_layout(&c.layout).into_bytes()
}

fn store_with(dir: &Path, l: &Layout) -> PlainStore {
    let s = PlainStore::open(dir).unwrap();
    s.put("in.lay", write_layout(l).as_bytes()).unwrap();
    s
}

fn creds(dir: &Path, workload: &str, n: u32) -> Vec<Credentials> {
    gen_workload_credentials(&dir.join(workload), workload, n, b"test")
        .unwrap()
        .iter()
        .map(|p| load_credentials(p).unwrap())
        .collect()
}

#[test]
fn sixteen_tiles_four_workers_match_monolithic() {
    let tmp = tempfile::tempdir().unwrap();
    let l = layout();
    let store = store_with(tmp.path(), &l);
    let run = run_local(
        RunConfig::new("in.lay", "out.lay", 750),
        None,
        Box::new(store.clone()),
        vec![LocalWorker::default(); 4],
    )
    .unwrap();
    assert_eq!(run.summary.tiles.len(), 16);
    assert_eq!(run.summary.workers_observed, 4);
    let done: usize = run.workers.iter().map(|w| w.as_ref().unwrap().tiles).sum();
    assert_eq!(done, 16);
    assert_eq!(store.get("out.lay").unwrap(), monolithic(&l));
}

#[test]
fn killed_worker_tile_is_redone() {
    let tmp = tempfile::tempdir().unwrap();
    let l = layout();
    let store = store_with(tmp.path(), &l);
    let mut workers = vec![LocalWorker::default(); 4];
    workers[1].fail_after = Some(1);
    let run = run_local(RunConfig::new("in.lay", "out.lay", 750), None, Box::new(store.clone()), workers).unwrap();
    assert!(run.workers[1].is_err());
    assert!(run.summary.redispatches >= 1);
    assert!(run.summary.queue_checks > 16);
    assert_eq!(store.get("out.lay").unwrap(), monolithic(&l));
}

#[test]
fn mutual_mode_hides_protocol_and_matches_plain() {
    let tmp = tempfile::tempdir().unwrap();
    let c = creds(tmp.path(), "wl", 3);
    let l = layout();
    let store = store_with(tmp.path(), &l);
    let taps: Vec<_> = (0..2).map(|_| Arc::new(Mutex::new(Vec::new()))).collect();
    let workers = (0..2)
        .map(|i| LocalWorker {
            creds: Some(c[i + 1].clone()),
            tap: Some(taps[i].clone()),
            fail_after: None,
        })
        .collect();
    let mut cfg = RunConfig::new("in.lay", "out.lay", 1500);
    cfg.security = SecurityMode::Mutual;
    let run = run_local(cfg, Some(&c[0]), Box::new(store.clone()), workers).unwrap();
    assert_eq!(store.get("out.lay").unwrap(), monolithic(&l));
    for (w, tap) in run.workers.iter().zip(&taps) {
        assert_eq!(w.as_ref().unwrap().peer.as_ref().unwrap().member, 0);
        let wire = tap.lock().unwrap();
        assert!(wire.len() > 1000);
        for needle in [&b"EDAC"[..], b"LAYOUTv1"] {
            assert!(!wire.windows(needle.len()).any(|w| w == needle));
        }
    }
}

#[test]
fn plain_tap_sees_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let l = layout();
    let store = store_with(tmp.path(), &l);
    let tap = Arc::new(Mutex::new(Vec::new()));
    let w = LocalWorker {
        tap: Some(tap.clone()),
        ..LocalWorker::default()
    };
    run_local(RunConfig::new("in.lay", "out.lay", 3000), None, Box::new(store), vec![w]).unwrap();
    let wire = tap.lock().unwrap();
    assert!(wire.windows(4).any(|w| w == b"EDAC"));
    assert!(wire.windows(8).any(|w| w == b"LAYOUTv1"));
}

#[test]
fn foreign_workload_worker_gets_no_work() {
    let tmp = tempfile::tempdir().unwrap();
    let ours = creds(tmp.path(), "wl", 2);
    let theirs = creds(tmp.path(), "other", 2);
    let l = layout();
    let store = store_with(tmp.path(), &l);
    let mut cfg = RunConfig::new("in.lay", "out.lay", 3000);
    cfg.security = SecurityMode::Mutual;
    let primary = Primary::bind(cfg, Some(&ours[0]), Box::new(store.clone())).unwrap();
    let addr = primary.local_addr().unwrap().to_string();
    let running = std::thread::spawn(move || primary.run());

    let tap = Arc::new(Mutex::new(Vec::new()));
    let intruder = WorkerConfig {
        tap: Some(tap.clone()),
        ..WorkerConfig::new(addr.clone(), SecurityMode::Mutual, Some(theirs[1].clone()))
    };
    assert!(run_worker(&intruder).is_err());
    let plain = WorkerConfig::new(addr.clone(), SecurityMode::Plain, None);
    assert!(run_worker(&plain).is_err());

    let good = run_worker(&WorkerConfig::new(addr, SecurityMode::Mutual, Some(ours[1].clone()))).unwrap();
    assert_eq!(good.tiles, 1);
    let summary = running.join().unwrap().unwrap();
    assert_eq!(summary.workers_observed, 1);
    assert_eq!(store.get("out.lay").unwrap(), monolithic(&l));
}
