//! Replays the fuzz corpus through the same round-trip properties as the
//! fuzz targets, so regressions show up without a nightly toolchain.

use std::path::PathBuf;

use qbsde::config::RunConfig;
use qbsde::paths::PathEnsemble;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn config_seeds_parse_and_round_trip() {
    let seeds = corpus("config_parse");
    assert!(!seeds.is_empty());
    for (name, bytes) in seeds {
        let cfg = RunConfig::parse(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg, "{name}");
    }
}

#[test]
fn ensemble_seeds_decode_and_round_trip() {
    let mut decoded = 0;
    for (name, bytes) in corpus("ensemble_decode") {
        match PathEnsemble::decode_with_budget(&bytes, 1 << 20) {
            Ok(ens) => {
                // Increments are rebuilt from cumulated levels, so only the
                // second round is exact.
                let once = ens.encode();
                assert_eq!(once.len(), bytes.len());
                assert_eq!(once[..44], bytes[..44], "{name}");
                assert_eq!(PathEnsemble::decode(&once).unwrap().encode(), once, "{name}");
                decoded += 1;
            }
            Err(e) => assert!(name.starts_with("reject_"), "{name}: {e}"),
        }
    }
    assert_eq!(decoded, 3);
}

#[test]
fn truncated_and_corrupted_dumps_are_rejected() {
    let (_, bytes) = corpus("ensemble_decode").into_iter().find(|(n, _)| n == "small_2x3").unwrap();
    for cut in [0, 7, 43, 44, bytes.len() - 1] {
        assert!(PathEnsemble::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[44..52].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(PathEnsemble::decode(&bad).is_err());
    let mut huge = bytes.clone();
    huge[28..36].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(PathEnsemble::decode(&huge).is_err());
    let mut steps = bytes;
    steps[20..28].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(PathEnsemble::decode(&steps), Err(qbsde::error::Error::ResourceLimit { .. })));
}
