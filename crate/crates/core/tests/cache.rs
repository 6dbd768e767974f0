mod common;

use std::fs;

use common::{caches_bit_equal, clients_for, small_config};
use fedshard::engine::{blob_path, load_cache, manifest_path, run_training, save_cache, FlCache};
use fedshard::unlearn::unlearn;
use fedshard::Error;

fn trained() -> (FlCache, Vec<fedshard::datagen::ClientData>) {
    let config = small_config(8, 2, 21);
    let clients = clients_for(&config);
    (run_training(&config, &clients).unwrap(), clients)
}

#[test]
fn round_trip_is_lossless() {
    let (cache, clients) = trained();
    let dir = tempfile::tempdir().unwrap();
    save_cache(&cache, dir.path()).unwrap();
    let back = load_cache(dir.path()).unwrap();
    assert!(caches_bit_equal(&cache, &back));
    assert_eq!(back.client_alphas, cache.client_alphas);
    assert_eq!(back.config, cache.config);
    assert_eq!(back.config_digest, cache.config_digest);
    for (a, b) in cache
        .stages
        .iter()
        .flatten()
        .zip(back.stages.iter().flatten())
    {
        assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.rounds, b.rounds);
    }

    // unlearning from the reloaded cache gives the same model
    let direct = unlearn(&cache, &clients, &[5]).unwrap().cache;
    let reloaded = unlearn(&back, &clients, &[5]).unwrap().cache;
    assert!(caches_bit_equal(&direct, &reloaded));

    let dir2 = tempfile::tempdir().unwrap();
    save_cache(&direct, dir2.path()).unwrap();
    let again = load_cache(dir2.path()).unwrap();
    assert!(caches_bit_equal(&direct, &again));
    assert_eq!(again.removed, vec![5]);
    assert!(!dir2.path().join("params.tmp").exists());
}

#[test]
fn blob_count_is_linear_in_clients() {
    let (cache, _) = trained();
    assert!(cache.blob_count() <= 2 * cache.num_clients());
    assert_eq!(cache.stage_blob_count(), 4 + 2 + 1);
}

#[test]
fn flipped_byte_is_detected() {
    let (cache, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    save_cache(&cache, dir.path()).unwrap();
    let path = blob_path(dir.path());
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, &bytes).unwrap();
    let err = load_cache(dir.path()).unwrap_err();
    assert!(matches!(err, Error::CacheDigest { .. }), "{err}");
    assert!(err.is_cache_error());
}

#[test]
fn truncated_blob_file_is_detected() {
    let (cache, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    save_cache(&cache, dir.path()).unwrap();
    let path = blob_path(dir.path());
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        load_cache(dir.path()),
        Err(Error::CacheTruncated(_))
    ));
}

fn edit_manifest(dir: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let path = manifest_path(dir);
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn manifest_tampering_is_detected() {
    let (cache, _) = trained();

    let dir = tempfile::tempdir().unwrap();
    save_cache(&cache, dir.path()).unwrap();
    edit_manifest(dir.path(), |v| v["format_version"] = 99.into());
    assert!(matches!(
        load_cache(dir.path()),
        Err(Error::CacheVersion {
            found: 99,
            expected: 1
        })
    ));

    let dir = tempfile::tempdir().unwrap();
    save_cache(&cache, dir.path()).unwrap();
    edit_manifest(dir.path(), |v| v["config"]["master_seed"] = 12345.into());
    assert!(matches!(
        load_cache(dir.path()),
        Err(Error::CacheDigest { .. })
    ));

    let dir = tempfile::tempdir().unwrap();
    save_cache(&cache, dir.path()).unwrap();
    edit_manifest(dir.path(), |v| v["surprise"] = true.into());
    assert!(matches!(load_cache(dir.path()), Err(Error::CacheFormat(_))));

    let dir = tempfile::tempdir().unwrap();
    save_cache(&cache, dir.path()).unwrap();
    fs::write(manifest_path(dir.path()), "{ not json").unwrap();
    assert!(load_cache(dir.path()).unwrap_err().is_cache_error());
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_cache(dir.path()), Err(Error::Io(_))));
}
