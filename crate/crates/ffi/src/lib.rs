//! C ABI over `dd-core`.
//!
//! Objects cross the boundary as opaque handles created by `dd_*_new` /
//! `dd_*_load` and released by the matching `dd_*_free`. Every fallible call
//! returns a [`DdStatus`]; on failure [`dd_last_error_message`] describes the
//! problem for the calling thread. Output buffers are caller-allocated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use dd_core::flowmatch::{fm_map, Scheme, SolverConfig, DEFAULT_T_END};
use dd_core::sampler::{sample, SamplePath};
use dd_core::student::StudentModel;
use dd_core::teacher::{AnyTeacher, NextTokenDist, Teacher};
use dd_core::trajgen::generate_pair;
use dd_core::{toy, Codebook, DdError, NoiseSeq, TokenId};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Config = 4,
    MissingInput = 5,
    FingerprintMismatch = 6,
    Io = 7,
    Numerical = 8,
    Format = 9,
    Panic = 10,
}

/// ODE scheme selector for [`DdSolver`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdScheme {
    Euler = 0,
    Heun = 1,
}

/// Flow-matching ODE settings.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdSolver {
    pub scheme: DdScheme,
    pub steps: u32,
    pub t_end: f64,
}

impl From<DdSolver> for SolverConfig {
    fn from(s: DdSolver) -> Self {
        SolverConfig {
            scheme: match s.scheme {
                DdScheme::Euler => Scheme::Euler,
                DdScheme::Heun => Scheme::Heun,
            },
            steps: s.steps,
            t_end: s.t_end,
        }
    }
}

/// Opaque codebook handle.
pub struct DdCodebook(Codebook);
/// Opaque teacher handle.
pub struct DdTeacher(AnyTeacher);
/// Opaque student handle.
pub struct DdStudent(StudentModel);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &DdError) -> DdStatus {
    match err.root() {
        DdError::Config(_) => DdStatus::Config,
        DdError::MissingInput(_) => DdStatus::MissingInput,
        DdError::FingerprintMismatch { .. } => DdStatus::FingerprintMismatch,
        DdError::Io(_) => DdStatus::Io,
        DdError::Solver { .. } | DdError::NonFiniteGradient(_) | DdError::Training(_) | DdError::Domain(_) => DdStatus::Numerical,
        DdError::Format(_) => DdStatus::Format,
        _ => DdStatus::InvalidArgument,
    }
}

/// Internal failure carrying its own status.
struct Fail(DdStatus, String);

impl From<DdError> for Fail {
    fn from(e: DdError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DdStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DdStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail(DdStatus::BufferTooSmall, format!("`{what}` holds {len}, needs {need}")));
    }
    Ok(unsafe { slice::from_raw_parts_mut(p, need) })
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn path_in<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(DdStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len`, into `buf`. Returns the full message length in bytes
/// (excluding the terminator); pass a null `buf` to query it.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Default solver: Heun, 64 steps, integration stopped just short of t = 1.
#[no_mangle]
pub extern "C" fn dd_solver_default() -> DdSolver {
    DdSolver {
        scheme: DdScheme::Heun,
        steps: 64,
        t_end: DEFAULT_T_END,
    }
}

/// Codebook from `vocab * dim` row-major entries.
///
/// # Safety
/// `entries` must hold `vocab * dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_codebook_new(entries: *const f32, vocab: usize, dim: usize, out: *mut *mut DdCodebook) -> DdStatus {
    guard(|| {
        let data = unsafe { slice_in(entries, vocab * dim, "entries") }?;
        let cb = Codebook::new(data.to_vec(), dim)?;
        unsafe { store(out, DdCodebook(cb)) }
    })
}

/// # Safety
/// `cb` must come from [`dd_codebook_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dd_codebook_free(cb: *mut DdCodebook) {
    if !cb.is_null() {
        drop(unsafe { Box::from_raw(cb) });
    }
}

/// Loads a teacher container.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_teacher_load(path: *const c_char, out: *mut *mut DdTeacher) -> DdStatus {
    guard(|| {
        let t = AnyTeacher::load(unsafe { path_in(path) }?)?;
        unsafe { store(out, DdTeacher(t)) }
    })
}

/// Built-in sticky Markov teacher: uniform first token, then the previous
/// token repeats with probability `stay`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_teacher_sticky(n: usize, vocab: usize, stay: f64, out: *mut *mut DdTeacher) -> DdStatus {
    guard(|| {
        let t = toy::sticky_markov(n, vocab, stay)?;
        unsafe { store(out, DdTeacher(t.into())) }
    })
}

/// Writes a teacher container.
///
/// # Safety
/// `teacher` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dd_teacher_save(teacher: *const DdTeacher, path: *const c_char) -> DdStatus {
    guard(|| {
        let t = unsafe { handle(teacher, "teacher") }?;
        t.0.save(unsafe { path_in(path) }?)?;
        Ok(())
    })
}

/// # Safety
/// `teacher` must come from a `dd_teacher_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dd_teacher_free(teacher: *mut DdTeacher) {
    if !teacher.is_null() {
        drop(unsafe { Box::from_raw(teacher) });
    }
}

/// Sequence length `n`, or 0 for a null handle.
///
/// # Safety
/// `teacher` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_teacher_seq_len(teacher: *const DdTeacher) -> usize {
    unsafe { teacher.as_ref() }.map_or(0, |t| t.0.seq_len())
}

/// Vocabulary size `V`, or 0 for a null handle.
///
/// # Safety
/// `teacher` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_teacher_vocab_size(teacher: *const DdTeacher) -> usize {
    unsafe { teacher.as_ref() }.map_or(0, |t| t.0.vocab_size())
}

/// 32-byte SHA-256 of the teacher's serialized form.
///
/// # Safety
/// `teacher` must be a live handle; `out` must hold 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn dd_teacher_fingerprint(teacher: *const DdTeacher, out: *mut u8) -> DdStatus {
    guard(|| {
        let t = unsafe { handle(teacher, "teacher") }?;
        unsafe { slice_out(out, 32, 32, "out") }?.copy_from_slice(&t.0.fingerprint());
        Ok(())
    })
}

/// Next-token distribution after `prefix` under `condition`, written to `probs[0..V]`.
///
/// # Safety
/// `prefix` must hold `prefix_len` ids; `probs` must hold `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dd_teacher_next_dist(
    teacher: *const DdTeacher,
    condition: u32,
    prefix: *const u32,
    prefix_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> DdStatus {
    guard(|| {
        let t = unsafe { handle(teacher, "teacher") }?;
        let prefix: &[TokenId] = unsafe { slice_in(prefix, prefix_len, "prefix") }?;
        let d = t.0.next_dist(condition, prefix)?;
        unsafe { slice_out(probs, probs_len, d.len(), "probs") }?.copy_from_slice(d.probs());
        Ok(())
    })
}

/// Maps one noise vector `eps[0..C]` to a token under the categorical `probs[0..V]`.
///
/// # Safety
/// `eps` must hold the codebook dimension, `probs` must hold `vocab` doubles,
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_fm_map(
    cb: *const DdCodebook,
    eps: *const f64,
    probs: *const f64,
    vocab: usize,
    solver: DdSolver,
    out: *mut u32,
) -> DdStatus {
    guard(|| {
        let cb = unsafe { handle(cb, "codebook") }?;
        let eps = unsafe { slice_in(eps, cb.0.dim(), "eps") }?;
        let probs = unsafe { slice_in(probs, vocab, "probs") }?;
        let dist = NextTokenDist::from_probs(probs.to_vec())?;
        let id = fm_map(eps, &dist, &cb.0, &solver.into())?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = id;
        Ok(())
    })
}

/// One noise/data pair from `seed`: `noise[0..n*C]` and `data[0..n]`.
///
/// # Safety
/// Handles must be live; `noise` and `data` must hold `noise_len` and `data_len` elements.
#[no_mangle]
pub unsafe extern "C" fn dd_generate_pair(
    teacher: *const DdTeacher,
    cb: *const DdCodebook,
    condition: u32,
    seed: u64,
    solver: DdSolver,
    noise: *mut f32,
    noise_len: usize,
    data: *mut u32,
    data_len: usize,
) -> DdStatus {
    guard(|| {
        let t = unsafe { handle(teacher, "teacher") }?;
        let cb = unsafe { handle(cb, "codebook") }?;
        let pair = generate_pair(&t.0, &cb.0, condition, seed, &solver.into())?;
        unsafe { slice_out(noise, noise_len, pair.noise.values().len(), "noise") }?.copy_from_slice(pair.noise.values());
        unsafe { slice_out(data, data_len, pair.data.len(), "data") }?.copy_from_slice(&pair.data.ids);
        Ok(())
    })
}

/// Loads a student container.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_student_load(path: *const c_char, out: *mut *mut DdStudent) -> DdStatus {
    guard(|| {
        let c = dd_core::container::Container::load(unsafe { path_in(path) }?)?;
        let s = StudentModel::from_container(&c)?;
        unsafe { store(out, DdStudent(s)) }
    })
}

/// # Safety
/// `student` must come from [`dd_student_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dd_student_free(student: *mut DdStudent) {
    if !student.is_null() {
        drop(unsafe { Box::from_raw(student) });
    }
}

/// Sequence length `n`, or 0 for a null handle.
///
/// # Safety
/// `student` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_student_seq_len(student: *const DdStudent) -> usize {
    unsafe { student.as_ref() }.map_or(0, |s| s.0.seq_len())
}

/// Noise dimension `C`, or 0 for a null handle.
///
/// # Safety
/// `student` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_student_noise_dim(student: *const DdStudent) -> usize {
    unsafe { student.as_ref() }.map_or(0, |s| s.0.codebook().dim())
}

/// Few-step sample along the jump points `path[0..path_len]` (starting at 1),
/// from the standard-normal noise drawn from `seed`. Writes `n` ids to `out`.
///
/// # Safety
/// `student` must be live; `path` must hold `path_len` entries; `out` must hold `out_len` ids.
#[no_mangle]
pub unsafe extern "C" fn dd_student_sample(
    student: *const DdStudent,
    path: *const u32,
    path_len: usize,
    condition: u32,
    seed: u64,
    out: *mut u32,
    out_len: usize,
) -> DdStatus {
    guard(|| {
        let s = unsafe { handle(student, "student") }?;
        let steps: Vec<usize> = unsafe { slice_in(path, path_len, "path") }?.iter().map(|&t| t as usize).collect();
        let path = SamplePath::new(steps)?;
        let x1 = NoiseSeq::from_seed(seed, s.0.seq_len(), s.0.codebook().dim());
        let (seq, _) = sample(&s.0, &path, condition, &x1)?;
        unsafe { slice_out(out, out_len, seq.len(), "out") }?.copy_from_slice(&seq.ids);
        Ok(())
    })
}
