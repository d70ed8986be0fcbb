//! Replays the checked-in fuzz corpus through the same properties the fuzz
//! targets assert, and feeds mutated seeds to the decoders.

use std::fs;
use std::path::{Path, PathBuf};

use forgeloc::checkpoint::Checkpoint;
use forgeloc::config::RunConfig;
use forgeloc::data::io::decode_png;
use forgeloc::data::manifest::DatasetManifest;
use forgeloc::metrics::Perturbation;
use forgeloc::train::PhaseRecord;
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus {}", dir.display());
    files.into_iter().map(|p| (p.clone(), fs::read(p).unwrap())).collect()
}

fn check_checkpoint(data: &[u8]) -> bool {
    match Checkpoint::decode(data) {
        Ok(ck) => {
            assert_eq!(ck.encode(), data);
            true
        }
        Err(_) => false,
    }
}

fn check_png(data: &[u8]) -> bool {
    match decode_png(data) {
        Ok(r) => {
            assert_eq!(r.data.len(), r.width * r.height * r.channels);
            true
        }
        Err(_) => false,
    }
}

fn check_manifest(text: &str) -> bool {
    match DatasetManifest::parse(text) {
        Ok(m) => {
            assert_eq!(DatasetManifest::parse(&m.to_string()).unwrap().entries, m.entries);
            true
        }
        Err(_) => false,
    }
}

fn check_config(text: &str) -> bool {
    match RunConfig::parse(text) {
        Ok(c) => {
            let printed = c.to_string();
            assert_eq!(RunConfig::parse(&printed).unwrap().to_string(), printed);
            true
        }
        Err(_) => false,
    }
}

fn check_record(text: &str) -> bool {
    match text.parse::<PhaseRecord>() {
        Ok(r) => {
            let printed = r.to_string();
            assert_eq!(printed.parse::<PhaseRecord>().unwrap().to_string(), printed);
            true
        }
        Err(_) => false,
    }
}

fn check_perturbation(text: &str) -> bool {
    match text.parse::<Perturbation>() {
        Ok(p) => {
            assert_eq!(p.to_string().parse::<Perturbation>().unwrap(), p);
            true
        }
        Err(_) => false,
    }
}

fn utf8(data: &[u8]) -> &str {
    std::str::from_utf8(data).unwrap()
}

#[test]
fn binary_corpora_replay() {
    let accepted: Vec<bool> = corpus("checkpoint_decode")
        .iter()
        .map(|(_, d)| check_checkpoint(d))
        .collect();
    // the truncated seed is there to exercise error paths
    assert_eq!(accepted.iter().filter(|a| **a).count(), accepted.len() - 1);
    for (path, data) in corpus("png_decode") {
        assert!(check_png(&data), "{}", path.display());
    }
}

#[test]
fn text_corpora_replay() {
    for (name, check) in [
        ("manifest_parse", check_manifest as fn(&str) -> bool),
        ("config_parse", check_config),
        ("phase_record_parse", check_record),
        ("perturbation_parse", check_perturbation),
    ] {
        for (path, data) in corpus(name) {
            assert!(check(utf8(&data)), "{} rejected", path.display());
        }
    }
}

/// Flips, overwrites or truncates a seed at positions chosen by proptest.
fn mutate(seed: &[u8], edits: &[(usize, u8)], cut: usize) -> Vec<u8> {
    let mut out = seed.to_vec();
    for &(pos, byte) in edits {
        let i = pos % out.len();
        out[i] ^= byte;
    }
    out.truncate(out.len() - cut % out.len().max(1));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mutated_binary_seeds_never_panic(
        edits in proptest::collection::vec((any::<usize>(), 1u8..=255), 0..6),
        cut in 0usize..64,
        pick in any::<usize>(),
    ) {
        let ck = corpus("checkpoint_decode");
        check_checkpoint(&mutate(&ck[pick % ck.len()].1, &edits, cut));
        let png = corpus("png_decode");
        check_png(&mutate(&png[pick % png.len()].1, &edits, cut));
    }

    #[test]
    fn mutated_text_seeds_never_panic(
        edits in proptest::collection::vec((any::<usize>(), 1u8..=127), 0..4),
        cut in 0usize..16,
        pick in any::<usize>(),
    ) {
        for (name, check) in [
            ("manifest_parse", check_manifest as fn(&str) -> bool),
            ("config_parse", check_config),
            ("phase_record_parse", check_record),
            ("perturbation_parse", check_perturbation),
        ] {
            let seeds = corpus(name);
            let bytes = mutate(&seeds[pick % seeds.len()].1, &edits, cut);
            if let Ok(text) = std::str::from_utf8(&bytes) {
                check(text);
            }
        }
    }

    #[test]
    fn arbitrary_text_never_panics(text in "\\PC{0,80}") {
        check_manifest(&text);
        check_config(&text);
        check_record(&text);
        check_perturbation(&text);
    }
}
