//! Replays the checked-in fuzz corpus, plus cheap deterministic mutations
//! of every seed, through the same checks the fuzz targets run.

#[path = "../../../fuzz/fuzz_targets/harness.rs"]
mod harness;

use std::path::PathBuf;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn replay(target: &str, check: fn(&[u8])) {
    for (_, bytes) in seeds(target) {
        check(&bytes);
        for i in 0..bytes.len() {
            let mut flipped = bytes.clone();
            flipped[i] ^= 1 << (i % 8);
            check(&flipped);
            check(&bytes[..i]);
        }
    }
}

#[test]
fn container() {
    replay("container", harness::container);
}

#[test]
fn packed_codes() {
    replay("packed_codes", harness::packed_codes);
}

#[test]
fn manifest() {
    replay("manifest", harness::manifest);
}

#[test]
fn plan() {
    replay("plan", harness::plan);
}

#[test]
fn artifacts() {
    replay("artifacts", harness::artifacts);
}

#[test]
fn weight() {
    replay("weight", harness::weight);
}

#[test]
fn valid_seeds_decode() {
    use compot::allocator::AllocationPlan;
    use compot::artifact::Artifacts;
    use compot::tensorio::{Manifest, TensorContainer};

    assert!(TensorContainer::from_bytes(&seeds("container")[2].1).is_ok());
    assert!(Manifest::from_json_slice(&seeds("manifest")[0].1).is_ok());
    assert!(AllocationPlan::from_json_slice(&seeds("plan")[0].1).is_ok());
    let framed = &seeds("artifacts")[0].1;
    let len = u32::from_le_bytes(framed[..4].try_into().unwrap()) as usize;
    let c = TensorContainer::from_bytes(&framed[4 + len..]).unwrap();
    assert_eq!(Artifacts::from_parts(&c, &framed[4..4 + len]).unwrap().layers.len(), 3);
}
