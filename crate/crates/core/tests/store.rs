use ndarray::Array2;
use proptest::prelude::*;
use subspace_probe::store::{
    align, encode_f32, ActivationStore, LayerSource, PromptSetting, StoreError, StoreHeader, TokenRole, MANIFEST_FILE,
};

fn header(n: usize) -> StoreHeader {
    StoreHeader {
        model_name: "toy".into(),
        layer_count: 3,
        prompt_setting: PromptSetting::InQuestionNoun,
        attribute_id: Some("area".into()),
        token_role: TokenRole::FinalToken,
        entities: (0..n).map(|i| format!("Q{}", i + 1)).collect(),
        token_indices: Some((0..n as u32).map(|i| 7 + i % 3).collect()),
    }
}

fn layer(n: usize, h: usize, shift: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, h), |(i, j)| ((i * h + j) as f64 * 0.25 - shift) as f32 as f64)
}

fn toy_store(dir: &std::path::Path) -> ActivationStore {
    let layers = [layer(5, 4, 0.0), layer(5, 4, 1.5), layer(5, 4, -3.0)];
    ActivationStore::create(dir, header(5), layers.iter().enumerate().map(|(i, m)| (i as u32, m.view()))).unwrap()
}

#[test]
fn round_trip_preserves_values_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    toy_store(dir.path());
    let store = ActivationStore::open(dir.path()).unwrap();
    store.validate().unwrap();
    let m = store.manifest();
    assert_eq!((m.n(), m.hidden_dim, m.layer_count), (5, 4, 3));
    assert_eq!(m.attribute_id.as_deref(), Some("area"));
    assert_eq!(m.token_indices.as_ref().unwrap()[4], 8);
    assert_eq!(store.layer_indices(), vec![0, 1, 2]);
    for (i, shift) in [0.0, 1.5, -3.0].into_iter().enumerate() {
        assert_eq!(store.load_layer(i as u32).unwrap().data, layer(5, 4, shift));
        assert_eq!(*store.layer(i as u32).unwrap(), layer(5, 4, shift));
    }
    assert!(matches!(store.load_layer(9), Err(StoreError::MissingLayer(9))));
}

#[test]
fn refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    toy_store(dir.path());
    let m = layer(5, 4, 0.0);
    let again = ActivationStore::create(dir.path(), header(5), [(0, m.view())]);
    assert!(matches!(again, Err(StoreError::AlreadyExists(_))));
}

#[test]
fn rejects_bad_shapes_and_non_finite_values() {
    let dir = tempfile::tempdir().unwrap();
    let short = layer(4, 4, 0.0);
    assert!(matches!(
        ActivationStore::create(dir.path().join("a"), header(5), [(0, short.view())]),
        Err(StoreError::InvalidManifest(_))
    ));
    let mut bad = layer(5, 4, 0.0);
    bad[[3, 1]] = f64::NAN;
    assert!(matches!(
        ActivationStore::create(dir.path().join("b"), header(5), [(0, bad.view())]),
        Err(StoreError::NonFiniteValue { layer: 0, row: 3 })
    ));
}

#[test]
fn truncated_layer_is_a_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    toy_store(dir.path());
    let path = dir.path().join("layer_1.f32");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    let store = ActivationStore::open(dir.path()).unwrap();
    assert!(matches!(store.load_layer(1), Err(StoreError::ShapeMismatch { expected: 80, actual: 76, .. })));
    assert!(store.load_layer(0).is_ok());
}

#[test]
fn monolithic_export_matches_per_layer_create() {
    let dir = tempfile::tempdir().unwrap();
    let layers = [layer(5, 4, 0.0), layer(5, 4, 1.5), layer(5, 4, -3.0)];
    let raw: Vec<u8> = layers.iter().flat_map(|m| encode_f32(m.view())).collect();
    let mono = ActivationStore::from_monolithic(dir.path().join("mono"), header(5), &raw, 4).unwrap();
    let split = toy_store(&dir.path().join("split"));
    assert_eq!(mono.manifest(), split.manifest());
    assert!(ActivationStore::from_monolithic(dir.path().join("bad"), header(5), &raw[..raw.len() - 1], 4).is_err());
}

#[test]
fn alignment_keeps_left_order() {
    let left = ["c", "a", "x", "b"];
    let right = ["a", "b", "c", "d"];
    let al = align(&left, &right).unwrap();
    assert_eq!(al.left(), vec![0, 1, 3]);
    assert_eq!(al.right(), vec![2, 0, 1]);
    assert_eq!((al.dropped_left, al.dropped_right), (1, 1));
    assert!(matches!(align(&["p"], &["q"]), Err(StoreError::EmptyIntersection)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_flipped_byte_is_detected(pos in 0usize..80, mask in 1u8..=255) {
        let dir = tempfile::tempdir().unwrap();
        toy_store(dir.path());
        let path = dir.path().join("layer_2.f32");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[pos] ^= mask;
        std::fs::write(&path, bytes).unwrap();
        let store = ActivationStore::open(dir.path()).unwrap();
        let digest_error = matches!(store.validate(), Err(StoreError::DigestMismatch { .. }));
        prop_assert!(digest_error);
    }

    #[test]
    fn mangled_manifest_never_panics(cut in 0usize..400, junk in "[ -~]{0,8}") {
        let dir = tempfile::tempdir().unwrap();
        toy_store(dir.path());
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = cut.min(text.len());
        std::fs::write(&path, format!("{}{junk}{}", &text[..cut], &text[(cut + junk.len()).min(text.len())..])).unwrap();
        if let Ok(store) = ActivationStore::open(dir.path()) {
            let _ = store.validate();
        }
    }
}
