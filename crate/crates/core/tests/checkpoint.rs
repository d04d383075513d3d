use std::collections::BTreeMap;

use spatial_contrast::checkpoint::*;
use spatial_contrast::model::{init_params, ModelSpec, ModelState};

fn meta() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("phase".into(), "pretrain".into()),
        ("seed".into(), "3".into()),
    ])
}

#[test]
fn save_load_is_bit_identical_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ModelSpec::reference(3, 32, 10);
    spec.channel_mean = Some(vec![0.1, 0.2, 0.30000000000000004]);
    let mut s32 = init_params::<f32>(&spec, 1).unwrap();
    s32.step_count = 123;
    let s64 = init_params::<f64>(&spec, 1).unwrap();

    let p = dir.path().join("a.ck");
    save(&p, &spec, &s32, &meta()).unwrap();
    let ck = load(&p).unwrap();
    assert_eq!(ck.spec, spec);
    assert_eq!(ck.meta, meta());
    assert_eq!(
        ck.state.elem_type(),
        spatial_contrast::tensor::ElemType::F32
    );
    let back: ModelState<f32> = ck.state.to_precision();
    assert_eq!(back, s32);
    for (a, b) in back.params.values().zip(s32.params.values()) {
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let q = dir.path().join("b.ck");
    save(&q, &spec, &s64, &meta()).unwrap();
    let again: ModelState<f64> = load(&q).unwrap().state.to_precision();
    assert_eq!(again, s64);
    save(&p, &spec, &again, &meta()).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn corrupt_files_fail_with_a_named_reason() {
    let spec = ModelSpec::reference(3, 16, 4);
    let state = init_params::<f32>(&spec, 0).unwrap();
    let bytes = encode(&spec, &state, &meta());
    assert!(decode(&bytes).is_ok());
    let mut bad = bytes.clone();
    bad[7] = b'9';
    assert!(matches!(decode(&bad), Err(CheckpointError::Version { .. })));
    for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode(&long).is_err());
}
