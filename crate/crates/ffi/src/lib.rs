//! C ABI for fgmine.
//!
//! Objects cross the boundary as opaque handles created by `fgm_*_new` or
//! `fgm_*_load` and released by the matching `fgm_*_free`. Every fallible
//! call returns an [`FgmStatus`]; on failure a message for the calling
//! thread is available from [`fgm_last_error`] until the next failing call.
//! Handles are not thread-safe; use one per thread or lock externally.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use fgmine::config::RunConfig;
use fgmine::encoder::{encode_instruction, encode_trajectory, score, EncoderParams};
use fgmine::forge::Mask;
use fgmine::ranking::{pr_loss, ScoredEpisode};
use fgmine::rng::{self, Rng};
use fgmine::tpe::{propose, TpeConfig, TrialHistory};
use fgmine::world::{generate_world, Frame, Instruction, Trajectory, World};
use fgmine::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Bad configuration, argument or index.
    InvalidArgument = 2,
    /// Non-finite input or result.
    Numeric = 3,
    /// File system, parse or load failure.
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// A generated world.
pub struct FgmWorld(World);

/// Encoder and scorer parameters.
pub struct FgmEncoder(EncoderParams);

/// One TPE session over fixed-cardinality frame masks.
pub struct FgmTpe {
    history: TrialHistory,
    traj_len: usize,
    n_rep: usize,
    rng: Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FgmStatus {
    match e.exit_code() {
        2 => FgmStatus::InvalidArgument,
        3 => FgmStatus::Numeric,
        _ => FgmStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FgmStatus, String)>) -> FgmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FgmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FgmStatus::Internal
        }
    }
}

fn lift(e: Error) -> (FgmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FgmStatus, String) {
    (FgmStatus::NullArgument, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (FgmStatus, String) {
    (FgmStatus::InvalidArgument, msg.into())
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FgmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{what}` is not UTF-8")))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (FgmStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (FgmStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (FgmStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failing call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fgm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fgm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `-log softmax([s_pos, negs...])[0]`.
///
/// # Safety
/// `negs` must point to `n_negs` doubles and `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn fgm_pr_loss(s_pos: f64, negs: *const f64, n_negs: usize, out: *mut f64) -> FgmStatus {
    guard(|| {
        let negs = as_slice(negs, n_negs, "negs")?;
        let out = as_mut(out, "out")?;
        *out = pr_loss(&ScoredEpisode::from_scores(s_pos, negs)).map_err(lift)?;
        Ok(())
    })
}

/// Generates a world from `key=value` lines (`world.*` keys; other
/// sections are accepted and ignored). `config` may be null or empty for
/// the defaults.
///
/// # Safety
/// `config` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgm_world_new(config: *const c_char, out: *mut *mut FgmWorld) -> FgmStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        *out = ptr::null_mut();
        let text = if config.is_null() { "" } else { as_str(config, "config")? };
        let cfg = RunConfig::default().apply_flat(text).map_err(lift)?;
        let world = generate_world(&cfg.world).map_err(lift)?;
        *out = Box::into_raw(Box::new(FgmWorld(world)));
        Ok(())
    })
}

/// # Safety
/// `world` must come from [`fgm_world_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fgm_world_free(world: *mut FgmWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Frame feature dimension of a world.
///
/// # Safety
/// `world` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fgm_world_frame_dim(world: *const FgmWorld, out: *mut usize) -> FgmStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(world, "world")?.0.config.frame_dim;
        Ok(())
    })
}

/// Vocabulary size of a world.
///
/// # Safety
/// `world` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fgm_world_vocab_size(world: *const FgmWorld, out: *mut usize) -> FgmStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(world, "world")?.0.config.vocab_size;
        Ok(())
    })
}

/// Loads encoder parameters from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgm_encoder_load(path: *const c_char, out: *mut *mut FgmEncoder) -> FgmStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        *out = ptr::null_mut();
        let path = as_str(path, "path")?;
        let (_, params) = fgmine::checkpoint::load(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(FgmEncoder(params)));
        Ok(())
    })
}

/// Freshly initialized encoder for a world, with the default layer sizes.
///
/// # Safety
/// `world` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgm_encoder_init(world: *const FgmWorld, seed: u64, out: *mut *mut FgmEncoder) -> FgmStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        *out = ptr::null_mut();
        let world = &as_ref(world, "world")?.0;
        let dims = fgmine::adversarial::EncoderConfig::default().dims_for(world);
        let params = EncoderParams::init(dims, &mut rng::stream(seed, &[rng::tag::INIT])).map_err(lift)?;
        *out = Box::into_raw(Box::new(FgmEncoder(params)));
        Ok(())
    })
}

/// # Safety
/// `encoder` must come from an `fgm_encoder_*` constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn fgm_encoder_free(encoder: *mut FgmEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Compatibility score of one trajectory and one instruction.
///
/// `frames` holds `n_frames * frame_dim` doubles, frame-major; `tokens`
/// holds `n_tokens` token ids.
///
/// # Safety
/// Pointers must be valid for the given lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgm_encoder_score(
    encoder: *const FgmEncoder,
    frames: *const f64,
    n_frames: usize,
    frame_dim: usize,
    tokens: *const u32,
    n_tokens: usize,
    out: *mut f64,
) -> FgmStatus {
    guard(|| {
        let params = &as_ref(encoder, "encoder")?.0;
        let out = as_mut(out, "out")?;
        if frame_dim != params.dims.frame_dim {
            return Err(invalid(format!(
                "frame_dim {frame_dim} does not match the encoder's {}",
                params.dims.frame_dim
            )));
        }
        if n_frames == 0 || n_tokens == 0 {
            return Err(invalid("need at least one frame and one token"));
        }
        let len = n_frames
            .checked_mul(frame_dim)
            .ok_or_else(|| invalid("frame buffer size overflows"))?;
        let flat = as_slice(frames, len, "frames")?;
        let traj = Trajectory {
            frames: flat.chunks(frame_dim).map(|c| Frame { features: c.to_vec() }).collect(),
            room_sequence: vec![0; n_frames],
            house_id: 0,
        };
        let instr = Instruction {
            tokens: as_slice(tokens, n_tokens, "tokens")?.to_vec(),
        };
        let h_v = encode_trajectory(params, &traj).map_err(lift)?;
        let h_l = encode_instruction(params, &instr).map_err(lift)?;
        *out = score(params, &h_v, &h_l).map_err(lift)?;
        Ok(())
    })
}

/// Opens a TPE session over masks of `n_rep` positions out of `traj_len`,
/// with `n_startup` uniform proposals before the density model is used.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgm_tpe_new(
    traj_len: usize,
    n_rep: usize,
    n_startup: usize,
    seed: u64,
    out: *mut *mut FgmTpe,
) -> FgmStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        *out = ptr::null_mut();
        if n_rep == 0 || n_rep >= traj_len {
            return Err(invalid(format!("n_rep must lie in 1..{traj_len}, got {n_rep}")));
        }
        let config = TpeConfig {
            n_startup,
            ..TpeConfig::default()
        };
        let history = TrialHistory::new(config).map_err(lift)?;
        *out = Box::into_raw(Box::new(FgmTpe {
            history,
            traj_len,
            n_rep,
            rng: rng::stream(seed, &[]),
        }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from [`fgm_tpe_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fgm_tpe_free(session: *mut FgmTpe) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Writes the next proposal's `n_rep` sorted frame positions to `indices`.
///
/// # Safety
/// `session` must be live; `indices` must hold `capacity` writable slots.
#[no_mangle]
pub unsafe extern "C" fn fgm_tpe_propose(session: *mut FgmTpe, indices: *mut usize, capacity: usize) -> FgmStatus {
    guard(|| {
        let s = as_mut(session, "session")?;
        if capacity < s.n_rep {
            return Err(invalid(format!("capacity {capacity} is below n_rep {}", s.n_rep)));
        }
        if indices.is_null() {
            return Err(null("indices"));
        }
        let mask = propose(&s.history, s.traj_len, s.n_rep, &mut s.rng).map_err(lift)?;
        let dst = slice::from_raw_parts_mut(indices, s.n_rep);
        dst.copy_from_slice(mask.indices());
        Ok(())
    })
}

/// Records the objective of a mask given as `n` frame positions.
///
/// # Safety
/// `session` must be live; `indices` must point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn fgm_tpe_observe(
    session: *mut FgmTpe,
    indices: *const usize,
    n: usize,
    objective: f64,
) -> FgmStatus {
    guard(|| {
        let s = as_mut(session, "session")?;
        if n != s.n_rep {
            return Err(invalid(format!("mask has {n} positions, session uses {}", s.n_rep)));
        }
        let mask = Mask::new(s.traj_len, as_slice(indices, n, "indices")?.to_vec()).map_err(lift)?;
        s.history.observe(mask, objective).map_err(lift)
    })
}

/// Number of observed trials and the best objective so far (NaN when no
/// trial has been observed).
///
/// # Safety
/// `session` must be live; `n_trials` and `best` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fgm_tpe_best(session: *const FgmTpe, n_trials: *mut usize, best: *mut f64) -> FgmStatus {
    guard(|| {
        let s = as_ref(session, "session")?;
        *as_mut(n_trials, "n_trials")? = s.history.len();
        *as_mut(best, "best")? = s.history.best_so_far().unwrap_or(f64::NAN);
        Ok(())
    })
}
