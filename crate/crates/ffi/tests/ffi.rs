use std::ffi::CString;
use std::ptr;

use dd_core::nn::TransformerConfig;
use dd_core::sampler::{sample, SamplePath};
use dd_core::student::{StudentModel, StudentSpec, TimestepSchedule};
use dd_core::teacher::{AnyTeacher, Teacher};
use dd_core::trajgen::generate_pair;
use dd_core::{toy, Codebook, NoiseSeq};
use dd_ffi::*;

fn last_error() -> String {
    let len = unsafe { dd_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0u8; len + 1];
    unsafe { dd_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
    String::from_utf8(buf[..len].to_vec()).unwrap()
}

fn sticky() -> *mut DdTeacher {
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { dd_teacher_sticky(3, 4, 0.8, &mut t) }, DdStatus::Ok);
    t
}

fn line_codebook() -> *mut DdCodebook {
    let entries = [-1.0f32, -1.0 / 3.0, 1.0 / 3.0, 1.0];
    let mut cb = ptr::null_mut();
    assert_eq!(unsafe { dd_codebook_new(entries.as_ptr(), 4, 1, &mut cb) }, DdStatus::Ok);
    cb
}

#[test]
fn next_dist_matches_core() {
    let t = sticky();
    assert_eq!(unsafe { dd_teacher_seq_len(t) }, 3);
    assert_eq!(unsafe { dd_teacher_vocab_size(t) }, 4);
    let mut probs = [0.0f64; 4];
    let prefix = [2u32];
    let s = unsafe { dd_teacher_next_dist(t, 0, prefix.as_ptr(), 1, probs.as_mut_ptr(), 4) };
    assert_eq!(s, DdStatus::Ok);
    let expected = toy::sticky_markov(3, 4, 0.8).unwrap().next_dist(0, &[2]).unwrap();
    assert_eq!(&probs, expected.probs());

    let mut small = [0.0f64; 2];
    let s = unsafe { dd_teacher_next_dist(t, 0, prefix.as_ptr(), 1, small.as_mut_ptr(), 2) };
    assert_eq!(s, DdStatus::BufferTooSmall);
    assert!(last_error().contains("needs 4"));

    let long = [0u32; 3];
    let s = unsafe { dd_teacher_next_dist(t, 0, long.as_ptr(), 3, probs.as_mut_ptr(), 4) };
    assert_eq!(s, DdStatus::InvalidArgument);
    unsafe { dd_teacher_free(t) };
}

#[test]
fn null_handles_are_reported() {
    let mut probs = [0.0f64; 4];
    let s = unsafe { dd_teacher_next_dist(ptr::null(), 0, ptr::null(), 0, probs.as_mut_ptr(), 4) };
    assert_eq!(s, DdStatus::NullPointer);
    assert!(last_error().contains("teacher"));
    assert_eq!(unsafe { dd_teacher_seq_len(ptr::null()) }, 0);
    unsafe {
        dd_teacher_free(ptr::null_mut());
        dd_codebook_free(ptr::null_mut());
        dd_student_free(ptr::null_mut());
    }
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dd_teacher_load(ptr::null(), &mut out) }, DdStatus::NullPointer);
}

#[test]
fn missing_file_status() {
    let path = CString::new("/nonexistent/teacher.ddtc").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dd_teacher_load(path.as_ptr(), &mut out) }, DdStatus::MissingInput);
    assert!(out.is_null());
}

#[test]
fn fm_map_and_pairs_match_core() {
    let cb = line_codebook();
    let solver = dd_solver_default();
    let probs = [0.1, 0.2, 0.3, 0.4];
    let core_cb = Codebook::new(vec![-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0], 1).unwrap();
    for e in [-2.0f64, -0.3, 0.0, 0.7, 1.9] {
        let mut id = u32::MAX;
        assert_eq!(unsafe { dd_fm_map(cb, &e, probs.as_ptr(), 4, solver, &mut id) }, DdStatus::Ok);
        let dist = dd_core::teacher::NextTokenDist::from_probs(probs.to_vec()).unwrap();
        let expected = dd_core::flowmatch::fm_map(&[e], &dist, &core_cb, &solver.into()).unwrap();
        assert_eq!(id, expected);
    }
    let bad = [0.5, 0.6, 0.0, 0.0];
    let mut id = 0;
    assert_eq!(unsafe { dd_fm_map(cb, &0.0, bad.as_ptr(), 4, solver, &mut id) }, DdStatus::InvalidArgument);

    let t = sticky();
    let mut noise = [0.0f32; 3];
    let mut data = [0u32; 3];
    let s = unsafe { dd_generate_pair(t, cb, 0, 42, solver, noise.as_mut_ptr(), 3, data.as_mut_ptr(), 3) };
    assert_eq!(s, DdStatus::Ok);
    let pair = generate_pair(&toy::sticky_markov(3, 4, 0.8).unwrap(), &core_cb, 0, 42, &solver.into()).unwrap();
    assert_eq!(&noise[..], pair.noise.values());
    assert_eq!(&data[..], &pair.data.ids[..]);
    unsafe {
        dd_teacher_free(t);
        dd_codebook_free(cb);
    }
}

#[test]
fn teacher_and_student_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let t = sticky();
    let tpath = CString::new(dir.path().join("t.ddtc").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dd_teacher_save(t, tpath.as_ptr()) }, DdStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { dd_teacher_load(tpath.as_ptr(), &mut loaded) }, DdStatus::Ok);
    let (mut a, mut b) = ([0u8; 32], [0u8; 32]);
    unsafe {
        assert_eq!(dd_teacher_fingerprint(t, a.as_mut_ptr()), DdStatus::Ok);
        assert_eq!(dd_teacher_fingerprint(loaded, b.as_mut_ptr()), DdStatus::Ok);
    }
    assert_eq!(a, b);
    let core_teacher = AnyTeacher::from(toy::sticky_markov(3, 4, 0.8).unwrap());
    assert_eq!(a, core_teacher.fingerprint());

    let spec = StudentSpec {
        n: 3,
        classes: 1,
        arch: TransformerConfig { width: 16, heads: 2, layers: 1, mlp_ratio: 2 },
        schedule: TimestepSchedule::uniform(vec![1, 2, 3]).unwrap(),
        split: 2,
        codebook: Codebook::line(4).unwrap(),
    };
    let model = StudentModel::init(spec, None, 5).unwrap();
    let spath = dir.path().join("s.ddtc");
    model.to_container(&hex::encode(a)).save(&spath).unwrap();
    let spath = CString::new(spath.to_str().unwrap()).unwrap();
    let mut student = ptr::null_mut();
    assert_eq!(unsafe { dd_student_load(spath.as_ptr(), &mut student) }, DdStatus::Ok);
    assert_eq!(unsafe { dd_student_seq_len(student) }, 3);
    assert_eq!(unsafe { dd_student_noise_dim(student) }, 1);
    for path in [vec![1u32], vec![1, 2]] {
        let mut out = [0u32; 3];
        let s = unsafe { dd_student_sample(student, path.as_ptr(), path.len(), 0, 9, out.as_mut_ptr(), 3) };
        assert_eq!(s, DdStatus::Ok);
        let steps = SamplePath::new(path.iter().map(|&t| t as usize).collect()).unwrap();
        let (expected, _) = sample(&model, &steps, 0, &NoiseSeq::from_seed(9, 3, 1)).unwrap();
        assert_eq!(&out[..], &expected.ids[..]);
    }
    let bad_path = [2u32];
    let mut out = [0u32; 3];
    let s = unsafe { dd_student_sample(student, bad_path.as_ptr(), 1, 0, 9, out.as_mut_ptr(), 3) };
    assert_eq!(s, DdStatus::InvalidArgument);
    unsafe {
        dd_student_free(student);
        dd_teacher_free(t);
        dd_teacher_free(loaded);
    }
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dd.h")).unwrap();
    for name in [
        "dd_last_error_message",
        "dd_teacher_load",
        "dd_teacher_next_dist",
        "dd_fm_map",
        "dd_generate_pair",
        "dd_student_sample",
        "DD_STATUS_OK",
        "typedef struct DdTeacher DdTeacher",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/dd.h");
    match std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("no C compiler on PATH; skipping"),
    }
}
