mod common;

use facecnn::model_io::{encoded_len, from_bytes, load_model, save_model, to_bytes};
use facecnn::{build_paper_cnn, Error, ModelFormatError, Tensor};

#[test]
fn file_round_trip_preserves_predictions_at_several_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = common::rng(3);
    for (size, seed) in [(22, 0), (37, 1), (64, 2)] {
        let model = build_paper_cnn(size, seed).unwrap();
        let path = dir.path().join(format!("m{size}.bin"));
        assert_eq!(save_model(&model, &path).unwrap(), encoded_len(&model));
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
        for _ in 0..5 {
            let x: Tensor<f32> = common::uniform(&mut r, &[3, size, size], 0.0, 1.0);
            let a = model.predict(&x).unwrap();
            let b = loaded.predict(&x).unwrap();
            assert_eq!(a.class, b.class);
            assert_eq!(a.probability.to_bits(), b.probability.to_bits());
        }
    }
}

#[test]
fn corrupted_bytes_are_rejected() {
    let bytes = to_bytes(&build_paper_cnn(22, 0).unwrap());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(from_bytes(&bad), Err(Error::ModelFormat(ModelFormatError::BadMagic(_)))));
    assert!(matches!(
        from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::ModelFormat(ModelFormatError::Truncated { .. }))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(
        from_bytes(&long),
        Err(Error::ModelFormat(ModelFormatError::TrailingBytes { actual: 1 }))
    ));
    // A layer table claiming 48 filters in the first convolution.
    let mut arch = bytes.clone();
    arch[10 + 5..10 + 9].copy_from_slice(&48u32.to_le_bytes());
    assert!(matches!(from_bytes(&arch), Err(Error::ModelFormat(ModelFormatError::Architecture(_)))));
}

#[test]
fn missing_file_error_names_the_path() {
    let err = load_model(std::path::Path::new("/no/such/model.bin")).unwrap_err();
    assert!(err.to_string().contains("/no/such/model.bin"));
}
