use std::time::Instant;

use bdrfsq::feature_io::gaussian_features;
use bdrfsq::quantizer::{encode, init_params, EncodeOptions};
use bdrfsq::selftest::{block_separation_suite, decode_exactness_suite, index_round_trip, random_case};
use bdrfsq::{LevelSpec, QuantizerConfig, Rng};
use proptest::prelude::*;

#[test]
fn block_separation_thousand_cases() {
    let start = Instant::now();
    assert_eq!(block_separation_suite(1000, 42).unwrap(), 0);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn index_only_decoding_is_bit_exact() {
    assert_eq!(decode_exactness_suite(500, 7).unwrap(), 0);
}

#[test]
fn every_standard_index_round_trips() {
    index_round_trip(&LevelSpec::standard()).unwrap();
}

#[test]
fn fresh_scales_sit_at_softplus_zero_plus_floor() {
    let cfg = QuantizerConfig::standard();
    let p = init_params(&cfg, &mut Rng::new(3), (32, 32)).unwrap();
    for s in p.stages() {
        for v in s.scale(cfg.epsilon()) {
            assert!((v - (2f64.ln() + 0.1)).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncated_tokens_are_a_prefix(seed in 0u64..1_000_000) {
        let mut rng = Rng::new(seed);
        let (cfg, params) = random_case(&mut rng, 10, 5).unwrap();
        let (de, da) = params.input_dims();
        let e = gaussian_features(&mut rng, 12, de, 1.5).unwrap();
        let a = gaussian_features(&mut rng, 12, da, 1.5).unwrap();
        let full = encode(&e, &a, &params, &cfg, &EncodeOptions::default()).unwrap();
        for m in 1..=5 {
            let part = encode(&e, &a, &params, &cfg, &EncodeOptions::stages(m)).unwrap();
            prop_assert_eq!(part.tokens, full.tokens.prefix(m).unwrap());
        }
    }

    #[test]
    fn cumulative_latents_match_truncated_encodes(seed in 0u64..1_000_000) {
        let mut rng = Rng::new(seed);
        let (cfg, params) = random_case(&mut rng, 8, 4).unwrap();
        let (de, da) = params.input_dims();
        let e = gaussian_features(&mut rng, 6, de, 1.0).unwrap();
        let a = gaussian_features(&mut rng, 6, da, 1.0).unwrap();
        let opts = EncodeOptions { cumulative_at: vec![1, 3], ..EncodeOptions::default() };
        let full = encode(&e, &a, &params, &cfg, &opts).unwrap();
        for (m, latent) in &full.cumulative {
            let part = encode(&e, &a, &params, &cfg, &EncodeOptions::stages(*m)).unwrap();
            prop_assert_eq!(&part.quantized, latent);
        }
    }
}
