mod common;

use std::fs;

use fantasy_core::vector::{load_fvecs, load_ivecs, save_fvecs, save_ivecs};
use fantasy_core::{BuildParams, ClusterTopology, Error, IndexBundle};

#[test]
fn fvecs_and_ivecs_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (db, _) = common::small_corpus(50, 0, 9);
    let fp = dir.path().join("db.fvecs");
    save_fvecs(&db, &fp).unwrap();
    assert_eq!(fs::metadata(&fp).unwrap().len(), 50 * (4 + 16 * 4));
    assert_eq!(load_fvecs(&fp).unwrap(), db);

    let rows = vec![vec![1, -2, 3], vec![4, 5, 6]];
    let ip = dir.path().join("gt.ivecs");
    save_ivecs(&rows, &ip).unwrap();
    assert_eq!(load_ivecs(&ip).unwrap(), rows);
}

#[test]
fn truncated_fvecs_file_reports_record() {
    let dir = tempfile::tempdir().unwrap();
    let (db, _) = common::small_corpus(5, 0, 10);
    let fp = dir.path().join("db.fvecs");
    save_fvecs(&db, &fp).unwrap();
    let bytes = fs::read(&fp).unwrap();
    fs::write(&fp, &bytes[..bytes.len() - 3]).unwrap();
    match load_fvecs(&fp) {
        Err(Error::VecsFormat { record, .. }) => assert_eq!(record, 4),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(load_fvecs(dir.path().join("missing.fvecs")), Err(Error::Io(_))));
}

#[test]
fn index_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let (db, _) = common::small_corpus(300, 0, 11);
    let topo = ClusterTopology::reference();
    let p = BuildParams {
        num_clusters: 16,
        out_degree: 6,
        max_iters: 15,
        seed: 5,
    };
    let bundle = IndexBundle::build(&db, &p, &topo).unwrap();
    let path = dir.path().join("a.fnsy");
    bundle.save(&path).unwrap();
    let loaded = IndexBundle::load(&path).unwrap();
    assert_eq!(loaded, bundle);
    assert_eq!(loaded.database(), db);

    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"FNSY");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(IndexBundle::load(&path), Err(Error::IndexFormat { offset: 0, .. })));
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(IndexBundle::load(&path), Err(Error::IndexFormat { .. })));
}
