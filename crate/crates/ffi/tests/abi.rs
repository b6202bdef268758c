use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::ptr;

use cotkit::tinylm::{io, lora_attach, Model, ModelConfig};
use cotkit_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    cotkit_string_free(p);
    s
}

fn last_error() -> String {
    let p = cotkit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn metrics_match_hand_values() {
    let (a, b) = (c("a b c"), c("a c"));
    let mut v = 0.0;
    unsafe {
        assert_eq!(cotkit_rouge_l(a.as_ptr(), b.as_ptr(), &mut v), CotkitStatus::Ok);
        // P = 2/3, R = 1, beta = 1.2
        let (p, r, b2) = (2.0 / 3.0, 1.0, 1.44);
        assert!((v - (1.0 + b2) * p * r / (r + b2 * p)).abs() < 1e-12);

        let (x, y) = (c("the the the"), c("the cat"));
        assert_eq!(cotkit_bleu(x.as_ptr(), y.as_ptr(), 1, &mut v), CotkitStatus::Ok);
        // clipped precision 1/3, brevity penalty 1 since c > r
        assert!((v - 1.0 / 3.0).abs() < 1e-12);

        assert_eq!(cotkit_meteor(a.as_ptr(), a.as_ptr(), &mut v), CotkitStatus::Ok);
        // 3 matches in 1 chunk: penalty 0.5 * (1/3)^3
        assert!((v - (1.0 - 0.5 / 27.0)).abs() < 1e-12);
    }
}

#[test]
fn errors_are_reported_not_panicked() {
    let mut v = 0.0;
    let a = c("x");
    unsafe {
        assert_eq!(cotkit_bleu(ptr::null(), a.as_ptr(), 1, &mut v), CotkitStatus::NullPointer);
        assert!(last_error().contains("candidate"));
        assert_eq!(cotkit_bleu(a.as_ptr(), a.as_ptr(), 5, &mut v), CotkitStatus::InvalidArgument);
        assert_eq!(cotkit_bleu(a.as_ptr(), a.as_ptr(), 1, ptr::null_mut()), CotkitStatus::NullPointer);
        let bad = [0xffu8 as c_char, 0];
        assert_eq!(cotkit_meteor(bad.as_ptr(), a.as_ptr(), &mut v), CotkitStatus::InvalidUtf8);
        assert_eq!(cotkit_improvement(0.0, 10.0, &mut v), CotkitStatus::Undefined);
        assert_eq!(cotkit_improvement(26.22, 42.68, &mut v), CotkitStatus::Ok);
        assert_eq!(v, 62.78);
        assert!(cotkit_last_error().is_null());
    }
}

#[test]
fn prompt_rendering_matches_core() {
    let code = c("def f():\n    return 1\n");
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(
            cotkit_render_prompt(CotkitTemplate::Quality as u32, code.as_ptr(), ptr::null(), &mut out),
            CotkitStatus::Ok
        );
        assert_eq!(take(out), cotkit::agents::render_quality_prompt("def f():\n    return 1\n"));
        assert_eq!(
            cotkit_render_prompt(CotkitTemplate::Consistency as u32, code.as_ptr(), ptr::null(), &mut out),
            CotkitStatus::NullPointer
        );
        assert_eq!(cotkit_render_prompt(99, code.as_ptr(), ptr::null(), &mut out), CotkitStatus::InvalidArgument);
        let p = c("def add(a, b):");
        assert_eq!(
            cotkit_render_prompt(CotkitTemplate::Instruction as u32, p.as_ptr(), ptr::null(), &mut out),
            CotkitStatus::Ok
        );
        assert_eq!(take(out), cotkit::tinylm::render_instruction("def add(a, b):"));
    }
}

#[test]
fn corpus_stats_json() {
    let jsonl = c(concat!(
        r#"{"id":"a","prompt":"one two","cot":"How to solve: x","code":"pass"}"#,
        "\n",
        r#"{"id":"b","prompt":"one two three four","cot":"How to solve: y z","code":"pass"}"#,
        "\n"
    ));
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(cotkit_corpus_stats_json(jsonl.as_ptr(), &mut out), CotkitStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["count"], 2);
        assert_eq!(v["prompt"]["avg"], 3.0);
        assert_eq!(v["cot"]["median"], 4.5);
        let broken = c("{not json");
        assert_eq!(cotkit_corpus_stats_json(broken.as_ptr(), &mut out), CotkitStatus::Format);
    }
}

#[test]
fn model_handle_lifecycle() {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_kv_groups: 1,
        d_ff: 8,
        vocab: 259,
        n_layers: 1,
        eos_id: Some(257),
        ..Default::default()
    };
    let model = Model::init(cfg, 3).unwrap();
    let ad = lora_attach(&model, 2, 4.0, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    io::save(&path, &model, Some(&ad)).unwrap();

    let p = c(path.to_str().unwrap());
    let mut handle = ptr::null_mut();
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(cotkit_model_load(p.as_ptr(), &mut handle), CotkitStatus::Ok);
        assert_eq!(cotkit_model_checksum(handle, &mut out), CotkitStatus::Ok);
        assert_eq!(take(out), model.checksum());
        let prompt = c("ab");
        assert_eq!(cotkit_model_generate_greedy(handle, prompt.as_ptr(), 4, &mut out), CotkitStatus::Ok);
        let got = take(out);
        let ids = cotkit::tinylm::decode_greedy(
            &cotkit::tinylm::Adapted { model: &model, adapters: Some(&ad) },
            &[97, 98],
            4,
        )
        .unwrap();
        assert_eq!(got, cotkit::tinylm::ByteTokenizer.decode(&ids));
        let empty = c("");
        assert_eq!(
            cotkit_model_generate_greedy(handle, empty.as_ptr(), 4, &mut out),
            CotkitStatus::InvalidArgument
        );
        cotkit_model_free(handle);
        cotkit_model_free(ptr::null_mut());

        let missing = c(dir.path().join("nope").to_str().unwrap());
        assert_eq!(cotkit_model_load(missing.as_ptr(), &mut handle), CotkitStatus::Io);
        std::fs::write(&path, b"garbage").unwrap();
        assert_eq!(cotkit_model_load(p.as_ptr(), &mut handle), CotkitStatus::Format);
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(cotkit_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cotkit.h")).unwrap();
    for f in [
        "cotkit_last_error",
        "cotkit_version",
        "cotkit_string_free",
        "cotkit_bleu",
        "cotkit_meteor",
        "cotkit_rouge_l",
        "cotkit_improvement",
        "cotkit_render_prompt",
        "cotkit_corpus_stats_json",
        "cotkit_model_load",
        "cotkit_model_free",
        "cotkit_model_checksum",
        "cotkit_model_generate_greedy",
        "typedef struct CotkitModel CotkitModel",
        "COTKIT_STATUS_OK = 0",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
}

/// Compiles the header as C when a compiler is on PATH.
#[test]
fn header_compiles_as_c() {
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cotkit.h"))
        .status()
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(status.success());
}
