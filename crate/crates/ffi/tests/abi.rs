use std::ffi::{c_char, CString};
use std::ptr;

use bdrfsq::feature_io::gaussian_features;
use bdrfsq::param_file::load_params;
use bdrfsq::quantizer::{encode, EncodeOptions};
use bdrfsq::Rng;
use bdrfsq_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { bdrfsq_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn default_model(seed: u64) -> *mut BdrfsqModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { bdrfsq_model_init_default(seed, 4, 6, &mut m) }, BdrfsqStatus::Ok);
    m
}

fn info(m: *const BdrfsqModel) -> BdrfsqModelInfo {
    let mut i = BdrfsqModelInfo::default();
    assert_eq!(unsafe { bdrfsq_model_info(m, &mut i) }, BdrfsqStatus::Ok);
    i
}

#[test]
fn model_info_matches_default_config() {
    let m = default_model(1);
    let i = info(m);
    assert_eq!(
        (i.stages, i.emotion_input_dim, i.acoustic_input_dim, i.latent_dim, i.fsq_dim, i.codes_per_stage, i.frame_rate_hz),
        (8, 4, 6, 1024, 9, 32768, 50)
    );
    unsafe { bdrfsq_model_free(m) };
}

#[test]
fn encode_decode_agree_with_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    let m = default_model(2);
    let (config, params) = {
        // Round trip through a file to exercise the loader as well.
        let cfg = bdrfsq::QuantizerConfig::standard();
        let p = bdrfsq::quantizer::init_params(&cfg, &mut Rng::new(2), (4, 6)).unwrap();
        bdrfsq::param_file::save_params(&cfg, &p, &path).unwrap();
        load_params(&path).unwrap()
    };
    let mut loaded = ptr::null_mut();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bdrfsq_model_load(cpath.as_ptr(), &mut loaded) }, BdrfsqStatus::Ok);

    let frames = 9;
    let mut rng = Rng::new(3);
    let e = gaussian_features(&mut rng, frames, 4, 1.0).unwrap().to_f32_precision();
    let a = gaussian_features(&mut rng, frames, 6, 1.0).unwrap().to_f32_precision();
    let ef: Vec<f32> = e.as_slice().iter().map(|&v| v as f32).collect();
    let af: Vec<f32> = a.as_slice().iter().map(|&v| v as f32).collect();
    let want = encode(&e, &a, &params, &config, &EncodeOptions::stages(3)).unwrap();

    for handle in [m, loaded] {
        let mut tokens = vec![0u16; frames * 3];
        let s = unsafe { bdrfsq_encode(handle, ef.as_ptr(), af.as_ptr(), frames, 3, tokens.as_mut_ptr(), tokens.len()) };
        assert_eq!(s, BdrfsqStatus::Ok, "{}", last_error());
        let got: Vec<u32> = tokens.iter().map(|&t| u32::from(t)).collect();
        assert_eq!(got, want.tokens.as_slice());

        let mut out = vec![0f32; frames * 1024];
        let s = unsafe { bdrfsq_decode(handle, tokens.as_ptr(), frames, 3, out.as_mut_ptr(), out.len()) };
        assert_eq!(s, BdrfsqStatus::Ok);
        let expect: Vec<f32> = want.quantized.as_slice().iter().map(|&v| v as f32).collect();
        assert_eq!(out, expect);
    }
    unsafe {
        bdrfsq_model_free(m);
        bdrfsq_model_free(loaded);
    }
}

#[test]
fn zero_stages_means_all() {
    let m = default_model(4);
    let e = [0.1f32; 4];
    let a = [0.2f32; 6];
    let mut tokens = [0u16; 8];
    assert_eq!(unsafe { bdrfsq_encode(m, e.as_ptr(), a.as_ptr(), 1, 0, tokens.as_mut_ptr(), 8) }, BdrfsqStatus::Ok);
    let mut short = [0u16; 7];
    assert_eq!(unsafe { bdrfsq_encode(m, e.as_ptr(), a.as_ptr(), 1, 0, short.as_mut_ptr(), 7) }, BdrfsqStatus::BufferTooSmall);
    unsafe { bdrfsq_model_free(m) };
}

#[test]
fn error_codes_and_messages() {
    let m = default_model(5);
    let mut tokens = [0u16; 16];
    let e = [0f32; 4];
    let s = unsafe { bdrfsq_encode(m, e.as_ptr(), e.as_ptr(), 1, 9, tokens.as_mut_ptr(), 16) };
    assert_eq!(s, BdrfsqStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { bdrfsq_encode(m, ptr::null(), e.as_ptr(), 1, 1, tokens.as_mut_ptr(), 16) }, BdrfsqStatus::NullPointer);
    assert_eq!(unsafe { bdrfsq_encode(ptr::null(), e.as_ptr(), e.as_ptr(), 1, 1, tokens.as_mut_ptr(), 16) }, BdrfsqStatus::NullPointer);

    let bad = [40000u16];
    let mut out = [0f32; 1024];
    assert_eq!(unsafe { bdrfsq_decode(m, bad.as_ptr(), 1, 1, out.as_mut_ptr(), 1024) }, BdrfsqStatus::OutOfRange);
    assert!(last_error().contains("40000"));

    let mut small = [0f32; 10];
    assert_eq!(unsafe { bdrfsq_decode(m, bad.as_ptr(), 1, 1, small.as_mut_ptr(), 10) }, BdrfsqStatus::BufferTooSmall);

    let missing = CString::new("/nonexistent/params.json").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { bdrfsq_model_load(missing.as_ptr(), &mut h) }, BdrfsqStatus::Io);
    assert!(h.is_null());
    let garbage = CString::new("{not json").unwrap();
    assert_eq!(unsafe { bdrfsq_model_from_json(garbage.as_ptr(), &mut h) }, BdrfsqStatus::Format);

    let mut bps = 0.0;
    assert_eq!(unsafe { bdrfsq_bitrate(m, 2, &mut bps) }, BdrfsqStatus::Ok);
    assert_eq!(bps, 1500.0);
    assert_eq!(last_error(), "");
    unsafe { bdrfsq_model_free(m) };
    unsafe { bdrfsq_model_free(ptr::null_mut()) };
}

#[test]
fn pack_and_unpack() {
    let m = default_model(6);
    let mut codes = [0u32; 9];
    assert_eq!(unsafe { bdrfsq_unpack(m, 5, codes.as_mut_ptr(), 9) }, BdrfsqStatus::Ok);
    assert_eq!(&codes[..3], &[1, 0, 1]);
    let mut token = 0;
    for t in [0u32, 5, 12345, 32767] {
        assert_eq!(unsafe { bdrfsq_unpack(m, t, codes.as_mut_ptr(), 9) }, BdrfsqStatus::Ok);
        assert_eq!(unsafe { bdrfsq_pack(m, codes.as_ptr(), 9, &mut token) }, BdrfsqStatus::Ok);
        assert_eq!(token, t);
    }
    assert_eq!(unsafe { bdrfsq_unpack(m, 32768, codes.as_mut_ptr(), 9) }, BdrfsqStatus::OutOfRange);
    assert_eq!(unsafe { bdrfsq_pack(m, codes.as_ptr(), 8, &mut token) }, BdrfsqStatus::InvalidArgument);
    unsafe { bdrfsq_model_free(m) };
}
