use std::fs;

use prosima::config::ExperimentConfig;
use prosima::corpus::phantom_corpus;
use prosima::imaging::corrupt_gaussian;
use prosima::ledger::{RetrievalMode, Scope};
use prosima::reconstruction::{image_cosine, reconstruct_image};
use prosima::rundir::{anchor_run, load_archive, verify_dir, VerifyOutcome};

fn cfg() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 64,
        anchor_batch: 3,
        ..ExperimentConfig::default()
    }
}

#[test]
fn anchor_reconstruct_and_verify_from_disk() {
    let cfg = cfg();
    let dir = tempfile::tempdir().unwrap();
    let images = phantom_corpus(8, 64, 64, 31);
    let summary = anchor_run(&cfg, &images, dir.path()).unwrap();
    assert_eq!(summary.traces.len(), 3);

    let archive = load_archive(dir.path()).unwrap();
    assert_eq!(archive.ledger(&Scope::Global).unwrap().height(), 3);
    let rc = cfg.reconstruction();
    let mut own = 0;
    for (i, original) in images.iter().enumerate() {
        let noisy = corrupt_gaussian(original, 0.05, i as u64);
        let out = reconstruct_image(&noisy, &archive, &rc, Some(original)).unwrap();
        assert!(out.verified);
        assert!(out
            .provenance
            .iter()
            .all(|p| p.mode == RetrievalMode::Nearest));
        let id = original.id().to_hex();
        own += out
            .provenance
            .iter()
            .filter(|p| p.source_image == id)
            .count();
        let before = image_cosine(&noisy, original, rc.grid, &rc.encoder).unwrap();
        assert!(out.metrics.unwrap().cosine > before);
    }
    // noise can make a sibling phantom's shard the nearest one; it is rare
    assert!(own >= 120, "own-image retrievals {own}/128");
    assert!(matches!(verify_dir(dir.path()).unwrap(), VerifyOutcome::Report(r) if r.all_ok()));
}

#[test]
fn one_bad_replica_is_reported_but_a_good_copy_still_serves() {
    let cfg = cfg();
    let dir = tempfile::tempdir().unwrap();
    let images = phantom_corpus(3, 64, 64, 5);
    anchor_run(&cfg, &images, dir.path()).unwrap();

    let mut replicas: Vec<_> = fs::read_dir(dir.path().join("nodes"))
        .unwrap()
        .map(|e| e.unwrap().path().join("cell-2-1.pslg"))
        .filter(|p| p.exists())
        .collect();
    replicas.sort();
    assert!(replicas.len() >= 2);
    let mut bytes = fs::read(&replicas[0]).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x80;
    fs::write(&replicas[0], bytes).unwrap();

    match verify_dir(dir.path()).unwrap() {
        VerifyOutcome::Report(r) => {
            assert!(!r.all_ok());
            let bad: Vec<_> = r
                .scopes
                .iter()
                .filter(|s| !s.ok)
                .map(|s| s.scope.as_str())
                .collect();
            assert_eq!(bad, ["cell-2-1"]);
        }
        other => panic!("{other:?}"),
    }
    let archive = load_archive(dir.path()).unwrap();
    let out = reconstruct_image(&images[1], &archive, &cfg.reconstruction(), None).unwrap();
    assert!(out.verified);
}
