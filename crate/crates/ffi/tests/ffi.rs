use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use sgcn::ink::Trajectory;
use sgcn::network::{ModelConfig, SgcnModel};
use sgcn::serve::top_scores;
use sgcn::trainer::save_model;
use sgcn_ffi::*;

fn model_file(dir: &tempfile::TempDir) -> (PathBuf, SgcnModel<f32>) {
    let mut config = ModelConfig::small(4);
    config.class_names = ["A", "B", "C", "D"].map(String::from).to_vec();
    let model = SgcnModel::<f32>::new(config, 11).unwrap();
    let path = dir.path().join("m.sgcn");
    save_model(&model, &path).unwrap();
    (path, model)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sgcn_last_error_message()) }.to_string_lossy().into_owned()
}

const POINTS: [f64; 10] = [0.1, 0.1, 0.5, 0.9, 0.9, 0.1, 0.3, 0.5, 0.7, 0.5];
const LENGTHS: [usize; 2] = [3, 2];

#[test]
fn load_and_recognize_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = model_file(&dir);
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sgcn_model_load(c_path.as_ptr(), &mut h) }, SgcnStatus::Ok);
    assert!(!h.is_null());
    assert_eq!(unsafe { sgcn_model_num_classes(h) }, 4);

    let (mut classes, mut scores) = ([0usize; 3], [0f64; 3]);
    let st = unsafe { sgcn_recognize(h, POINTS.as_ptr(), LENGTHS.as_ptr(), 2, 3, classes.as_mut_ptr(), scores.as_mut_ptr()) };
    assert_eq!(st, SgcnStatus::Ok, "{}", last_error());
    let traj = Trajectory::new(vec![
        vec![[0.1, 0.1], [0.5, 0.9], [0.9, 0.1]],
        vec![[0.3, 0.5], [0.7, 0.5]],
    ])
    .unwrap();
    let (expect, _) = top_scores(&model, &traj, 3).unwrap();
    for (i, (c, s)) in expect.into_iter().enumerate() {
        assert_eq!(classes[i], c);
        assert_eq!(scores[i].to_bits(), s.to_bits());
    }

    let mut need = 0usize;
    let st = unsafe { sgcn_model_class_name(h, 2, ptr::null_mut(), 0, &mut need) };
    assert_eq!((st, need), (SgcnStatus::BufferTooSmall, 2));
    let mut buf = [0 as std::ffi::c_char; 8];
    assert_eq!(unsafe { sgcn_model_class_name(h, 2, buf.as_mut_ptr(), buf.len(), ptr::null_mut()) }, SgcnStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "C");
    assert_eq!(unsafe { sgcn_model_class_name(h, 4, buf.as_mut_ptr(), buf.len(), ptr::null_mut()) }, SgcnStatus::InvalidArgument);
    unsafe { sgcn_model_free(h) };
}

#[test]
fn load_from_memory_and_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = model_file(&dir);
    let mut bytes = std::fs::read(&path).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sgcn_model_load_bytes(bytes.as_ptr(), bytes.len(), &mut h) }, SgcnStatus::Ok);

    let (mut c, mut s) = ([0usize; 1], [0f64; 1]);
    let empty = [0usize; 1];
    let st = unsafe { sgcn_recognize(h, POINTS.as_ptr(), empty.as_ptr(), 1, 1, c.as_mut_ptr(), s.as_mut_ptr()) };
    assert_eq!(st, SgcnStatus::EmptyTrajectory);
    assert!(last_error().contains("empty trajectory"));
    let st = unsafe { sgcn_recognize(h, POINTS.as_ptr(), LENGTHS.as_ptr(), 2, 0, c.as_mut_ptr(), s.as_mut_ptr()) };
    assert_eq!(st, SgcnStatus::InvalidArgument);
    let st = unsafe { sgcn_recognize(ptr::null(), POINTS.as_ptr(), LENGTHS.as_ptr(), 2, 1, c.as_mut_ptr(), s.as_mut_ptr()) };
    assert_eq!(st, SgcnStatus::NullPointer);
    unsafe { sgcn_model_free(h) };
    unsafe { sgcn_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { sgcn_model_num_classes(ptr::null()) }, 0);

    let mut out = ptr::null_mut();
    let junk = b"not a model at all";
    assert_eq!(unsafe { sgcn_model_load_bytes(junk.as_ptr(), junk.len(), &mut out) }, SgcnStatus::NotACheckpoint);
    bytes[4] = 9;
    assert_eq!(unsafe { sgcn_model_load_bytes(bytes.as_ptr(), bytes.len(), &mut out) }, SgcnStatus::UnsupportedVersion);
    bytes[4] = 1;
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    assert_eq!(unsafe { sgcn_model_load_bytes(bytes.as_ptr(), n, &mut out) }, SgcnStatus::CorruptCheckpoint);
    let missing = CString::new(dir.path().join("none.sgcn").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sgcn_model_load(missing.as_ptr(), &mut out) }, SgcnStatus::Io);
    assert_eq!(unsafe { sgcn_model_load(ptr::null(), &mut out) }, SgcnStatus::NullPointer);
    assert!(out.is_null());
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sgcn.h")).unwrap();
    for f in [
        "sgcn_version",
        "sgcn_last_error_message",
        "sgcn_model_load",
        "sgcn_model_load_bytes",
        "sgcn_model_free",
        "sgcn_model_num_classes",
        "sgcn_model_class_name",
        "sgcn_recognize",
        "sgcn_cost_ratio",
        "typedef struct SgcnHandle SgcnHandle",
        "SGCN_STATUS_PANIC = 9",
    ] {
        assert!(header.contains(f), "header lacks {f}");
    }
}

/// Compiles the C smoke program against the header and shared library.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("cc not found, skipping");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap().to_path_buf();
    let so = lib_dir.join(format!("{}sgcn_ffi{}", std::env::consts::DLL_PREFIX, std::env::consts::DLL_SUFFIX));
    assert!(so.exists(), "{} missing", so.display());
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = model_file(&dir);
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let bin = dir.path().join("smoke");
    let o = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .args(["-lsgcn_ffi", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = Command::new(&bin).arg(&model).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "exit {:?}: {}{}", o.status.code(), out, String::from_utf8_lossy(&o.stderr));
    assert!(out.starts_with("ratio=122.88 classes=4 top="), "{out}");
}
