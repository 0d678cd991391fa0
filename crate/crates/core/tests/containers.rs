use bdrfsq::bitstream::{read_tokens, write_tokens, TokenStream};
use bdrfsq::feature_io::{gaussian_features, read_feature_file, write_feature_file, FeatureMatrix};
use bdrfsq::{LevelSpec, Rng, TokenGrid};
use proptest::prelude::*;

fn stream(frames: usize, stages: usize, seed: u64) -> TokenStream {
    let levels = LevelSpec::standard();
    let mut rng = Rng::new(seed);
    let data = (0..frames * stages).map(|_| rng.below(32768) as u32).collect();
    TokenStream::new(levels, 50, TokenGrid::new(frames, stages, data).unwrap()).unwrap()
}

#[test]
fn feature_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.afct");
    let m = gaussian_features(&mut Rng::new(1), 37, 5, 3.0).unwrap().to_f32_precision();
    write_feature_file(&m, &path).unwrap();
    let back = read_feature_file(&path).unwrap();
    let bits = |m: &FeatureMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&m));
    let before = std::fs::read(&path).unwrap();
    write_feature_file(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn token_file_prefix_reads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.aftk");
    let ts = stream(10, 8, 4);
    write_tokens(&ts, &path).unwrap();
    assert_eq!(read_tokens(&path, None).unwrap(), ts);
    for k in 1..=8 {
        let part = read_tokens(&path, Some(k)).unwrap();
        assert_eq!(part.tokens(), &ts.tokens().prefix(k).unwrap());
    }
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_tokens(dir.path().join("none"), None), Err(bdrfsq::Error::Io { .. })));
    assert!(matches!(read_feature_file(dir.path().join("none")), Err(bdrfsq::Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_bytes_round_trip(frames in 0usize..20, stages in 1usize..9, seed in any::<u64>()) {
        let ts = stream(frames, stages, seed);
        let bytes = bdrfsq::bitstream::encode_token_bytes(&ts);
        prop_assert_eq!(bdrfsq::bitstream::decode_token_bytes(&bytes, None).unwrap(), ts);
    }

    #[test]
    fn feature_bytes_round_trip(frames in 0usize..20, dim in 1usize..6, seed in any::<u64>()) {
        let m = gaussian_features(&mut Rng::new(seed), frames, dim, 10.0).unwrap().to_f32_precision();
        let bytes = bdrfsq::feature_io::encode_feature_bytes(&m).unwrap();
        prop_assert_eq!(bdrfsq::feature_io::decode_feature_bytes(&bytes).unwrap(), m);
    }
}
