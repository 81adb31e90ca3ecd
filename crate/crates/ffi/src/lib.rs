//! C interface to the `cog3dmap` token map.
//!
//! A map lives behind an opaque `C3dMap` pointer obtained from one of the
//! constructors and released with [`c3d_map_free`]. Every fallible call
//! returns a [`C3dStatus`]; on failure [`c3d_last_error`] holds a message
//! for the calling thread. Panics never cross the boundary and surface as
//! `C3D_STATUS_PANIC`.
//!
//! Arrays are flat, row-major `float` buffers: positions are `n * 3`,
//! semantic features `n * dim_f`, geometric features `n * dim_g`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cog3dmap::patching::{pool_patches, FrameBundle, GeomPatchEncoder, PatchTokenSet};
use cog3dmap::persistence::{load_map, save_map};
use cog3dmap::{Error, MemoryState, StepReport, ThresholdPolicy};

/// Opaque map handle.
pub struct C3dMap {
    state: MemoryState,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum C3dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidFrame = 2,
    InvalidInput = 3,
    Config = 4,
    Format = 5,
    CorruptFile = 6,
    Version = 7,
    Io = 8,
    /// An internal consistency check failed. The map is unchanged.
    Internal = 9,
    Panic = 10,
    /// The output buffer is smaller than the data to copy.
    BufferTooSmall = 11,
}

/// Counts from one map update.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct C3dStepReport {
    pub step: u32,
    /// Nonzero when the frame had no usable patch and the map is unchanged.
    pub skipped: u8,
    pub retained: u64,
    pub updated: u64,
    pub added: u64,
    pub total_before: u64,
    pub total_after: u64,
    pub delta_used: f64,
}

impl From<&StepReport> for C3dStepReport {
    fn from(r: &StepReport) -> Self {
        C3dStepReport {
            step: r.step,
            skipped: r.skipped as u8,
            retained: r.retained as u64,
            updated: r.updated as u64,
            added: r.added as u64,
            total_before: r.total_before as u64,
            total_after: r.total_after as u64,
            delta_used: r.delta_used,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

/// Message for the last failed call on this thread, or NULL if there was
/// none. The pointer stays valid until the next failing call on the same
/// thread.
#[no_mangle]
pub extern "C" fn c3d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

struct Failure(C3dStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidFrame(_) => C3dStatus::InvalidFrame,
            Error::InvalidInput(_) => C3dStatus::InvalidInput,
            Error::Config(_) => C3dStatus::Config,
            Error::InternalInvariantViolation(_) => C3dStatus::Internal,
            Error::Format { .. } => C3dStatus::Format,
            Error::CorruptFile(_) => C3dStatus::CorruptFile,
            Error::Version { .. } => C3dStatus::Version,
            Error::Io(_) => C3dStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(C3dStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> C3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => C3dStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            C3dStatus::Panic
        }
    }
}

fn count(n: usize, width: usize) -> Result<usize, Failure> {
    n.checked_mul(width)
        .ok_or_else(|| Failure(C3dStatus::InvalidInput, format!("{n} x {width} overflows")))
}

/// Borrows `len` elements; NULL is accepted only when `len` is zero.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn map_ref<'a>(map: *const C3dMap) -> Result<&'a C3dMap, Failure> {
    map.as_ref().ok_or_else(|| null("map"))
}

unsafe fn map_mut<'a>(map: *mut C3dMap) -> Result<&'a mut C3dMap, Failure> {
    map.as_mut().ok_or_else(|| null("map"))
}

unsafe fn out_param<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn new_map(dim_f: u32, dim_g: u32, policy: ThresholdPolicy, seed: u64, out: *mut *mut C3dMap) -> C3dStatus {
    guard(|| {
        let out = unsafe { out_param(out, "out")? };
        let state = MemoryState::new(dim_f as usize, dim_g as usize, policy, seed)?;
        *out = Box::into_raw(Box::new(C3dMap { state }));
        Ok(())
    })
}

/// Creates an empty map with a fixed distance threshold `delta`.
#[no_mangle]
pub extern "C" fn c3d_map_new_static(dim_f: u32, dim_g: u32, delta: f64, seed: u64, out: *mut *mut C3dMap) -> C3dStatus {
    new_map(dim_f, dim_g, ThresholdPolicy::Static { value: delta }, seed, out)
}

/// Creates an empty map whose threshold is `clamp(ratio * diagonal, min, max)`
/// over the scene bounds seen so far.
#[no_mangle]
pub extern "C" fn c3d_map_new_dynamic(
    dim_f: u32,
    dim_g: u32,
    ratio: f64,
    min: f64,
    max: f64,
    seed: u64,
    out: *mut *mut C3dMap,
) -> C3dStatus {
    new_map(dim_f, dim_g, ThresholdPolicy::Dynamic { ratio, min, max }, seed, out)
}

/// Releases a map. NULL is ignored.
///
/// # Safety
/// `map` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_free(map: *mut C3dMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

fn finish_step(map: &mut C3dMap, tokens: &PatchTokenSet, report: *mut C3dStepReport) -> Result<(), Failure> {
    let r = map.state.step(tokens)?;
    if let Some(out) = unsafe { report.as_mut() } {
        *out = C3dStepReport::from(&r);
    }
    Ok(())
}

/// Integrates `n` already pooled patch observations taken at `timestep`.
/// `report` may be NULL.
///
/// # Safety
/// Array pointers must cover `n * 3`, `n * dim_f` and `n * dim_g` floats.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_step_patches(
    map: *mut C3dMap,
    n: usize,
    positions: *const f32,
    semantic: *const f32,
    geometric: *const f32,
    timestep: u32,
    report: *mut C3dStepReport,
) -> C3dStatus {
    guard(|| {
        let map = map_mut(map)?;
        let (df, dg) = (map.state.dim_f, map.state.dim_g);
        let pos = slice(positions, count(n, 3)?, "positions")?;
        let sem = slice(semantic, count(n, df)?, "semantic")?;
        let geo = slice(geometric, count(n, dg)?, "geometric")?;
        let tokens = PatchTokenSet::from_triples(
            df,
            dg,
            timestep,
            (0..n).map(|i| {
                (
                    [pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]],
                    sem[i * df..(i + 1) * df].to_vec(),
                    geo[i * dg..(i + 1) * dg].to_vec(),
                )
            }),
        );
        finish_step(map, &tokens, report)
    })
}

/// Pools a dense `height x width` frame into patches of `patch_size` pixels
/// (masked mean for both feature kinds) and integrates them. `valid` holds
/// one byte per pixel; zero marks a pixel to ignore. `report` may be NULL.
///
/// # Safety
/// Array pointers must cover `height * width` times 3, `dim_f`, `dim_g`
/// and 1 elements respectively.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_step_frame(
    map: *mut C3dMap,
    height: u32,
    width: u32,
    patch_size: u32,
    pointmap: *const f32,
    semantic: *const f32,
    geometric: *const f32,
    valid: *const u8,
    timestep: u32,
    report: *mut C3dStepReport,
) -> C3dStatus {
    guard(|| {
        let map = map_mut(map)?;
        let (df, dg) = (map.state.dim_f, map.state.dim_g);
        let px = count(height as usize, width as usize)?;
        let frame = FrameBundle {
            height: height as usize,
            width: width as usize,
            dim_f: df,
            dim_g: dg,
            pointmap: slice(pointmap, count(px, 3)?, "pointmap")?.to_vec(),
            semantic: slice(semantic, count(px, df)?, "semantic")?.to_vec(),
            geometric: slice(geometric, count(px, dg)?, "geometric")?.to_vec(),
            valid: slice(valid, px, "valid")?.iter().map(|&b| b != 0).collect(),
            timestep,
            patch_size: patch_size as usize,
        };
        let tokens = pool_patches(&frame, &GeomPatchEncoder::MaskedMean)?;
        finish_step(map, &tokens, report)
    })
}

/// Number of tokens, or 0 for NULL.
///
/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_len(map: *const C3dMap) -> usize {
    map.as_ref().map_or(0, |m| m.state.len())
}

/// Number of frames integrated so far, or 0 for NULL.
///
/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_step(map: *const C3dMap) -> u32 {
    map.as_ref().map_or(0, |m| m.state.step)
}

/// # Safety
/// `map` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_dims(map: *const C3dMap, dim_f: *mut u32, dim_g: *mut u32) -> C3dStatus {
    guard(|| {
        let map = map_ref(map)?;
        *out_param(dim_f, "dim_f")? = map.state.dim_f as u32;
        *out_param(dim_g, "dim_g")? = map.state.dim_g as u32;
        Ok(())
    })
}

unsafe fn copy_out<T: Copy>(
    map: *const C3dMap,
    out: *mut T,
    capacity: usize,
    width: impl Fn(&MemoryState) -> usize,
    fill: impl Fn(&MemoryState, &mut [T]),
) -> C3dStatus {
    guard(|| {
        let state = &map_ref(map)?.state;
        let need = count(state.len(), width(state))?;
        if capacity < need {
            return Err(Failure(C3dStatus::BufferTooSmall, format!("need {need} elements, got {capacity}")));
        }
        if need == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        fill(state, std::slice::from_raw_parts_mut(out, need));
        Ok(())
    })
}

/// Copies token positions (`len * 3` floats) in map order.
///
/// # Safety
/// `out` must be writable for `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_copy_positions(map: *const C3dMap, out: *mut f32, capacity: usize) -> C3dStatus {
    copy_out(map, out, capacity, |_| 3, |s, buf| {
        for (dst, t) in buf.chunks_exact_mut(3).zip(&s.tokens) {
            dst.copy_from_slice(&t.position);
        }
    })
}

/// Copies semantic features (`len * dim_f` floats) in map order.
///
/// # Safety
/// `out` must be writable for `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_copy_semantic(map: *const C3dMap, out: *mut f32, capacity: usize) -> C3dStatus {
    copy_out(map, out, capacity, |s| s.dim_f, |s, buf| {
        for (dst, t) in buf.chunks_exact_mut(s.dim_f.max(1)).zip(&s.tokens) {
            dst.copy_from_slice(&t.semantic);
        }
    })
}

/// Copies geometric features (`len * dim_g` floats) in map order.
///
/// # Safety
/// `out` must be writable for `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_copy_geometric(map: *const C3dMap, out: *mut f32, capacity: usize) -> C3dStatus {
    copy_out(map, out, capacity, |s| s.dim_g, |s, buf| {
        for (dst, t) in buf.chunks_exact_mut(s.dim_g.max(1)).zip(&s.tokens) {
            dst.copy_from_slice(&t.geometric);
        }
    })
}

/// Copies `(created_step, updated_step)` pairs (`len * 2` values).
///
/// # Safety
/// `out` must be writable for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_copy_steps(map: *const C3dMap, out: *mut u32, capacity: usize) -> C3dStatus {
    copy_out(map, out, capacity, |_| 2, |s, buf| {
        for (dst, t) in buf.chunks_exact_mut(2).zip(&s.tokens) {
            dst[0] = t.created_step;
            dst[1] = t.updated_step;
        }
    })
}

unsafe fn path_arg(path: *const c_char) -> Result<String, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(C3dStatus::InvalidInput, "path is not UTF-8".into()))
}

/// Writes the map to `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_save(map: *const C3dMap, path: *const c_char) -> C3dStatus {
    guard(|| {
        let map = map_ref(map)?;
        save_map(&map.state, path_arg(path)?)?;
        Ok(())
    })
}

/// Reads a map from `path` into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_load(path: *const c_char, out: *mut *mut C3dMap) -> C3dStatus {
    guard(|| {
        let out = out_param(out, "out")?;
        let state = load_map(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(C3dMap { state }));
        Ok(())
    })
}

/// Creates a new handle holding at most `budget` tokens drawn uniformly
/// with `seed`, in their original order. The source map is unchanged.
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn c3d_map_subsample(map: *const C3dMap, budget: usize, seed: u64, out: *mut *mut C3dMap) -> C3dStatus {
    guard(|| {
        let map = map_ref(map)?;
        let out = out_param(out, "out")?;
        let state = map.state.subsample(budget, seed)?;
        *out = Box::into_raw(Box::new(C3dMap { state }));
        Ok(())
    })
}
