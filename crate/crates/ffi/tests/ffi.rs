use std::ffi::{CStr, CString};
use std::ptr;

use casnet::chanenc::{ChannelEncoderConfig, EmbeddingSource};
use casnet::evalkit::separate;
use casnet::film::{Model, ModelConfig};
use casnet::separator::SeparatorConfig;
use casnet_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    unsafe { CStr::from_ptr(casnet_last_error()) }.to_str().unwrap().to_string()
}

fn saved_model(dir: &std::path::Path) -> (CString, Model, casnet::gradcore::ParamStore) {
    let sep = SeparatorConfig { enc_dim: 8, chunk_size: 10, hidden: 4, n_blocks: 1, ..Default::default() };
    let ce = ChannelEncoderConfig { n_blocks: 1, width: 4, embed_dim: 4, n_channel_classes: 3, se_reduction: 2 };
    let (m, s) = Model::new(&ModelConfig::casnet(sep, ce), 5).unwrap();
    let p = dir.join("m.ckpt");
    m.to_checkpoint(&s).unwrap().save(&p).unwrap();
    (CString::new(p.to_str().unwrap()).unwrap(), m, s)
}

fn signal(n: usize, f: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * f).sin() * 0.3).collect()
}

#[test]
fn separate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model, store) = saved_model(dir.path());
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { casnet_model_load(path.as_ptr(), &mut h) }, CasnetStatus::Ok);
    assert_eq!(unsafe { casnet_model_num_sources(h) }, 2);
    assert_eq!(unsafe { casnet_model_has_channel_encoder(h) }, 1);

    let x = signal(300, 0.07);
    let aux = signal(250, 0.31);
    let cases = [
        (CasnetEmbeddingSource::Same, EmbeddingSource::SameMixture, Some(x.as_slice())),
        (CasnetEmbeddingSource::Aux, EmbeddingSource::OtherChannel, Some(aux.as_slice())),
        (CasnetEmbeddingSource::Gaussian, EmbeddingSource::GaussianNoise, None),
        (CasnetEmbeddingSource::NoFilm, EmbeddingSource::Bypass, None),
    ];
    for (c_src, src, a) in cases {
        let mut out = vec![0.0; 600];
        let st = unsafe {
            casnet_separate(h, x.as_ptr(), x.len(), c_src as i32, aux.as_ptr(), aux.len(), 11, out.as_mut_ptr(), out.len())
        };
        assert_eq!(st, CasnetStatus::Ok, "{}", last_error());
        let want = separate(&model, &store, &x, src, a, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(&out[..300], want[0].as_slice());
        assert_eq!(&out[300..], want[1].as_slice());
    }
    unsafe { casnet_model_free(h) };
}

#[test]
fn errors_are_reported() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { casnet_model_load(ptr::null(), &mut h) }, CasnetStatus::NullPointer);
    assert!(!last_error().is_empty());

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { casnet_model_load(missing.as_ptr(), &mut h) }, CasnetStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { casnet_model_load(junk.as_ptr(), &mut h) }, CasnetStatus::Checkpoint);

    let (path, _, _) = saved_model(dir.path());
    assert_eq!(unsafe { casnet_model_load(path.as_ptr(), &mut h) }, CasnetStatus::Ok);
    assert_eq!(last_error(), "");
    let x = signal(100, 0.1);
    let mut out = vec![0.0; 200];
    let call = |src: i32, out_len: usize, aux: *const f64| unsafe {
        casnet_separate(h, x.as_ptr(), x.len(), src, aux, 0, 0, out.as_ptr() as *mut f64, out_len)
    };
    assert_eq!(call(9, 200, ptr::null()), CasnetStatus::InvalidArgument);
    assert_eq!(call(0, 150, ptr::null()), CasnetStatus::InvalidArgument);
    assert_eq!(call(1, 200, ptr::null()), CasnetStatus::NullPointer);
    let short = [0.1; 3];
    let st = unsafe { casnet_separate(h, short.as_ptr(), 3, 4, ptr::null(), 0, 0, out.as_mut_ptr(), 6) };
    assert_eq!(st, CasnetStatus::InvalidArgument);
    assert!(last_error().contains("at least"), "{}", last_error());
    unsafe {
        casnet_model_free(h);
        casnet_model_free(ptr::null_mut());
        assert_eq!(casnet_model_num_sources(ptr::null()), 0);
    }
}

#[test]
fn si_snr_through_c_abi() {
    let t = [1.0, 0.0, -1.0, 0.0];
    let e = [1.0, 1.0, -1.0, -1.0];
    let mut v = f64::NAN;
    assert_eq!(unsafe { casnet_si_snr(e.as_ptr(), t.as_ptr(), 4, &mut v) }, CasnetStatus::Ok);
    assert!(v.abs() < 1e-6);
    let z = [0.0; 4];
    assert_eq!(unsafe { casnet_si_snr(e.as_ptr(), z.as_ptr(), 4, &mut v) }, CasnetStatus::InvalidArgument);
    assert_eq!(unsafe { casnet_si_snr(ptr::null(), t.as_ptr(), 4, &mut v) }, CasnetStatus::NullPointer);
    let ver = unsafe { CStr::from_ptr(casnet_version()) }.to_str().unwrap();
    assert_eq!(ver, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_interface_and_compiles() {
    let hdr = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/casnet.h");
    let text = std::fs::read_to_string(&hdr).unwrap();
    for sym in [
        "casnet_model_load",
        "casnet_model_free",
        "casnet_separate",
        "casnet_si_snr",
        "casnet_last_error",
        "typedef struct CasnetModel CasnetModel",
        "CASNET_STATUS_OK = 0",
        "CASNET_EMBEDDING_SOURCE_NO_FILM = 4",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    // Syntax check with the system C compiler when one is installed.
    if let Ok(o) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&hdr).output() {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}
