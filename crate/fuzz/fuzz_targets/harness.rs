//! Decoder checks shared by the fuzz targets and the corpus replay test.
//! Errors are fine; panics and broken round trips are not.
#![allow(dead_code)]

use compot::allocator::AllocationPlan;
use compot::artifact::Artifacts;
use compot::packing::{pack, unpack, PackedCodes};
use compot::tensorio::{load_f64_matrix, weight_from_tensor, Manifest, Orientation, TensorContainer};
use half::f16;

pub fn container(data: &[u8]) {
    let Ok(c) = TensorContainer::from_bytes(data) else { return };
    let names: Vec<String> = c.names().map(str::to_string).collect();
    for name in &names {
        let t = c.tensor(name).expect("listed tensor must load");
        assert_eq!(t.bytes().len(), t.numel() * t.dtype().width());
    }
    let encoded = c.to_tensor_set().encode().expect("parsed set re-encodes");
    let again = TensorContainer::from_bytes(&encoded).expect("canonical encoding parses");
    assert_eq!(again.to_tensor_set(), c.to_tensor_set());
}

/// `[k, n, s, mask length, mask..., f16 values...]`, sizes as single bytes.
pub fn packed_codes(data: &[u8]) {
    let [k, n, s, mask_len, rest @ ..] = data else { return };
    let mask_len = (*mask_len as usize).min(rest.len());
    let (mask, values) = rest.split_at(mask_len);
    let values: Vec<f16> = values
        .chunks_exact(2)
        .map(|c| f16::from_le_bytes([c[0], c[1]]))
        .collect();
    let Ok(p) = PackedCodes::from_parts(*k as usize, *n as usize, *s as usize, values, mask.to_vec()) else {
        return;
    };
    let codes = unpack(&p).expect("validated parts unpack");
    assert!((0..codes.n()).all(|j| codes.column(j).count() <= codes.s()));
    // explicit zeros are dropped on repacking, so compare supports of nonzeros
    let repacked = unpack(&pack(&codes)).expect("repacked parts unpack");
    for j in 0..codes.n() {
        let nz: Vec<_> = codes.column(j).filter(|e| e.1 != 0.0).collect();
        assert_eq!(nz, repacked.column(j).collect::<Vec<_>>());
    }
}

pub fn manifest(data: &[u8]) {
    let Ok(m) = Manifest::from_json_slice(data) else { return };
    let text = m.to_json_pretty().expect("manifest serializes");
    assert_eq!(Manifest::from_json_slice(text.as_bytes()).expect("round trip"), m);
}

pub fn plan(data: &[u8]) {
    let Ok(p) = AllocationPlan::from_json_slice(data) else { return };
    let text = p.to_json_pretty().expect("plan serializes");
    assert_eq!(AllocationPlan::from_json_slice(text.as_bytes()).expect("round trip"), p);
}

/// `[sidecar length: u32 LE][sidecar JSON][container bytes]`.
pub fn artifacts(data: &[u8]) {
    let Some((len, rest)) = data.split_first_chunk::<4>() else { return };
    let len = (u32::from_le_bytes(*len) as usize).min(rest.len());
    let (sidecar, container) = rest.split_at(len);
    let Ok(c) = TensorContainer::from_bytes(container) else { return };
    let Ok(a) = Artifacts::from_parts(&c, sidecar) else { return };
    let recon = a.reconstruct().expect("validated artifacts reconstruct");
    assert_eq!(recon.len(), a.layers.len());
    let (container2, sidecar2) = a.encode().expect("artifacts re-encode");
    let c2 = TensorContainer::from_bytes(&container2).expect("re-encoded container parses");
    Artifacts::from_parts(&c2, &sidecar2).expect("re-encoded artifacts parse");
}

pub fn weight(data: &[u8]) {
    let Ok(c) = TensorContainer::from_bytes(data) else { return };
    let names: Vec<String> = c.names().map(str::to_string).collect();
    for name in &names {
        let t = c.tensor(name).expect("listed tensor must load");
        for o in [Orientation::InputByOutput, Orientation::OutputByInput] {
            if let Ok(w) = weight_from_tensor(name, &t, o) {
                assert_eq!(w.rows() * w.cols(), t.numel());
            }
        }
        let _ = load_f64_matrix(&c, name);
    }
}
