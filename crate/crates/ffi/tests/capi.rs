use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use promptsmith::gateway::mock::{mock_gateway, synthetic_image};
use promptsmith::injector::{inject, InjectConfig};
use promptsmith_ffi::*;

struct Handles {
    gw: *mut PsGateway,
    img: *mut PsImage,
}

impl Handles {
    fn new() -> Self {
        let (mut gw, mut img) = (ptr::null_mut(), ptr::null_mut());
        unsafe {
            assert_eq!(ps_gateway_new_mock(0, &mut gw), PsStatus::Ok);
            assert_eq!(ps_image_synthetic(1000, 64, 64, &mut img), PsStatus::Ok);
        }
        Self { gw, img }
    }
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            ps_image_free(self.img);
            ps_gateway_free(self.gw);
        }
    }
}

fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { ps_string_free(s) };
    out
}

fn last_error() -> String {
    let p = ps_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn inject_matches_the_library() {
    let h = Handles::new();
    let mut out = ptr::null_mut();
    let status = unsafe { ps_inject(h.gw, h.img, c("cat").as_ptr(), ptr::null(), &mut out) };
    assert_eq!(status, PsStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    let lib = inject(&synthetic_image(1000, 64, 64), &["cat".into()], &mock_gateway(0), &InjectConfig::default()).unwrap();
    assert_eq!(v, serde_json::to_value(lib).unwrap());
    assert!(ps_last_error().is_null());
}

#[test]
fn optimize_filter_and_score() {
    let h = Handles::new();
    let mut out = ptr::null_mut();
    let cfg = c(r#"{"steps": 25, "seed": 4}"#);
    assert_eq!(unsafe { ps_optimize(h.gw, h.img, c("cat").as_ptr(), cfg.as_ptr(), &mut out) }, PsStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(v["trace"].as_array().unwrap().len(), 25);

    let prompt = c("a small cat on the old sofa");
    assert_eq!(
        unsafe { ps_filter(h.gw, h.img, prompt.as_ptr(), c("cat").as_ptr(), &mut out) },
        PsStatus::Ok
    );
    let f: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert!(f["prompt"]["text"].as_str().unwrap().split(' ').any(|w| w == "cat"));

    let mut score = f64::NAN;
    assert_eq!(unsafe { ps_clip_score(h.gw, h.img, prompt.as_ptr(), &mut score) }, PsStatus::Ok);
    assert!(score.abs() <= 100.0);
}

#[test]
fn prompt_helpers() {
    let h = Handles::new();
    let mut out = ptr::null_mut();
    let status = unsafe {
        ps_edited_prompt(h.gw, c("a cat on the sofa").as_ptr(), c("cat").as_ptr(), c("dog").as_ptr(), &mut out)
    };
    assert_eq!(status, PsStatus::Ok);
    assert_eq!(take(out), "a dog on the sofa");

    let mut level = PsPromptLevel::FullNouns;
    let status = unsafe { ps_classify_level(c("the cat").as_ptr(), c("cat").as_ptr(), c("dog").as_ptr(), &mut level) };
    assert_eq!(status, PsStatus::Ok);
    assert_eq!(level, PsPromptLevel::OneNoun);

    let v = unsafe { CStr::from_ptr(ps_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn errors_map_to_status_codes() {
    let h = Handles::new();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { ps_inject(h.gw, h.img, c("zebra").as_ptr(), ptr::null(), &mut out) },
        PsStatus::Vocabulary
    );
    assert!(last_error().contains("zebra"));
    assert!(out.is_null());

    assert_eq!(
        unsafe { ps_inject(ptr::null(), h.img, c("cat").as_ptr(), ptr::null(), &mut out) },
        PsStatus::NullArgument
    );
    assert_eq!(
        unsafe { ps_inject(h.gw, h.img, c("cat").as_ptr(), c("{\"bogus\": ").as_ptr(), &mut out) },
        PsStatus::Config
    );
    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { ps_inject(h.gw, h.img, bad.as_ptr().cast(), ptr::null(), &mut out) },
        PsStatus::InvalidUtf8
    );
    let mut level = PsPromptLevel::OneNoun;
    assert_eq!(
        unsafe { ps_classify_level(c("cat").as_ptr(), c("cat").as_ptr(), c("cat").as_ptr(), &mut level) },
        PsStatus::Contract
    );
    let mut img = ptr::null_mut();
    assert_eq!(unsafe { ps_image_load(c("/nonexistent.png").as_ptr(), &mut img) }, PsStatus::Io);
    assert_eq!(unsafe { ps_image_synthetic(1, 0, 4, &mut img) }, PsStatus::Contract);

    let mut gw = ptr::null_mut();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = c(&format!("http://127.0.0.1:{port}"));
    assert_eq!(unsafe { ps_gateway_connect(url.as_ptr(), &mut gw) }, PsStatus::Gateway);
}

#[test]
fn png_round_trip_through_handles() {
    let png = synthetic_image(9, 20, 12).to_png_bytes().unwrap();
    let mut img = ptr::null_mut();
    assert_eq!(unsafe { ps_image_from_png(png.as_ptr(), png.len(), &mut img) }, PsStatus::Ok);
    let (mut w, mut hgt) = (0, 0);
    assert_eq!(unsafe { ps_image_size(img, &mut w, &mut hgt) }, PsStatus::Ok);
    assert_eq!((w, hgt), (20, 12));
    unsafe { ps_image_free(img) };
    assert_eq!(unsafe { ps_image_from_png(png.as_ptr(), 3, &mut img) }, PsStatus::Io);
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "promptsmith.h"

int main(void) {
    PsGateway *gw = NULL;
    PsImage *img = NULL;
    char *json = NULL;
    if (ps_gateway_new_mock(0, &gw) != PS_STATUS_OK) return 1;
    if (ps_image_synthetic(1000, 64, 64, &img) != PS_STATUS_OK) return 2;
    if (ps_inject(gw, img, "cat", NULL, &json) != PS_STATUS_OK) return 3;
    if (strstr(json, "\"chosen\"") == NULL) return 4;
    ps_string_free(json);
    if (ps_inject(gw, img, "zebra", NULL, &json) != PS_STATUS_VOCABULARY) return 5;
    printf("%s\n", ps_last_error());
    ps_image_free(img);
    ps_gateway_free(gw);
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile_dir();
    let src = dir.join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = root.join("include");
    let syntax = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output();
    let Ok(syntax) = syntax else {
        eprintln!("no C compiler; header check skipped");
        return;
    };
    assert!(syntax.status.success(), "{}", String::from_utf8_lossy(&syntax.stderr));

    // The cdylib sits next to the test binary's deps directory.
    let libdir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    if !libdir.join("libpromptsmith_ffi.so").exists() {
        eprintln!("cdylib not built; link check skipped");
        return;
    }
    let exe = dir.join("main");
    let build = Command::new("cc")
        .args(["-std=c99", "-I"])
        .arg(&include)
        .arg(&src)
        .arg("-L")
        .arg(&libdir)
        .args(["-lpromptsmith_ffi", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).env("LD_LIBRARY_PATH", &libdir).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).contains("zebra"));
    let _ = std::fs::remove_dir_all(&dir);
}

fn tempfile_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("promptsmith-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
