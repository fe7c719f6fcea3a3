//! C ABI over the promptseg core.
//!
//! Every fallible function returns a [`PsStatus`]; on failure a human-readable
//! message is available from [`ps_last_error_message`] on the same thread.
//! Objects are exposed as opaque handles created by `*_new` / `*_open` /
//! `*_load` functions and released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use promptseg::dataset::{read_dataset, Dataset};
use promptseg::grpo::{compute_advantages, compute_reward, RewardWeights};
use promptseg::mask::{iou, rle_decode, rle_encode, union, BinaryMask, RleMask};
use promptseg::policy::{
    featurize, greedy_decode, ActionSpace, Checkpoint, FeatureConfig, PolicyParams,
};
use promptseg::protocol::{format_reward, parse_response, PromptMode, PromptSchema};
use promptseg::segmenter::{SegmenterBackend, SyntheticSegmenter};
use promptseg::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    InvalidRle = 4,
    BufferTooSmall = 5,
    Io = 6,
    Malformed = 7,
    Policy = 8,
    Internal = 9,
    Panic = 10,
}

/// A binary mask.
pub struct PsMask(BinaryMask);

/// A dataset directory loaded into memory.
pub struct PsDataset(Dataset);

/// A checkpointed policy ready for greedy decoding.
pub struct PsPolicy {
    params: PolicyParams,
    space: ActionSpace,
    features: FeatureConfig,
}

/// Reward components of one scored response.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PsReward {
    pub r_format: u8,
    pub r_iou: f64,
    pub total: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> PsStatus {
    match e {
        Error::DimensionMismatch { .. } => PsStatus::DimensionMismatch,
        Error::InvalidRle(_) => PsStatus::InvalidRle,
        Error::Io { .. } => PsStatus::Io,
        Error::Malformed { .. } => PsStatus::Malformed,
        Error::Policy(_) => PsStatus::Policy,
        Error::InvalidMask(_) | Error::Config(_) | Error::Schema(_) | Error::Query(_) => {
            PsStatus::InvalidArgument
        }
        _ => PsStatus::Internal,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (PsStatus, String)>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PsStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, (PsStatus, String)>;
}

impl<T> OrStatus<T> for promptseg::Result<T> {
    fn or_status(self) -> Result<T, (PsStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (PsStatus, String) {
    (PsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (PsStatus, String) {
    (PsStatus::InvalidArgument, msg.into())
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (PsStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), (PsStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

fn schema_of(mode: &str, width: usize, height: usize) -> Result<PromptSchema, (PsStatus, String)> {
    let mode: PromptMode = mode.parse().or_status()?;
    Ok(PromptSchema::new(mode, width, height))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates an all-background `width`×`height` mask.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_new(
    width: usize,
    height: usize,
    out: *mut *mut PsMask,
) -> PsStatus {
    guard(|| {
        let m = BinaryMask::new(width, height).or_status()?;
        write_out(out, Box::into_raw(Box::new(PsMask(m))), "out")
    })
}

/// Creates a mask from `width * height` row-major bytes (nonzero = foreground).
///
/// # Safety
/// `bits` must point to `width * height` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_from_bytes(
    width: usize,
    height: usize,
    bits: *const u8,
    out: *mut *mut PsMask,
) -> PsStatus {
    guard(|| {
        if bits.is_null() {
            return Err(null("bits"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| invalid("canvas too large"))?;
        let bools: Vec<bool> = std::slice::from_raw_parts(bits, n)
            .iter()
            .map(|&b| b != 0)
            .collect();
        let m = BinaryMask::from_bools(width, height, &bools).or_status()?;
        write_out(out, Box::into_raw(Box::new(PsMask(m))), "out")
    })
}

/// Releases a mask; null is ignored.
///
/// # Safety
/// `mask` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_free(mask: *mut PsMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Writes width, height and foreground count.
///
/// # Safety
/// `mask` must be a live handle; each out pointer may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_info(
    mask: *const PsMask,
    width: *mut usize,
    height: *mut usize,
    count: *mut usize,
) -> PsStatus {
    guard(|| {
        let m = &as_ref(mask, "mask")?.0;
        for (p, v) in [(width, m.width()), (height, m.height()), (count, m.count())] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Reads pixel `(x, y)` into `out` (0 or 1).
///
/// # Safety
/// `mask` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_get(
    mask: *const PsMask,
    x: usize,
    y: usize,
    out: *mut u8,
) -> PsStatus {
    guard(|| {
        let m = &as_ref(mask, "mask")?.0;
        if x >= m.width() || y >= m.height() {
            return Err(invalid(format!(
                "pixel ({x}, {y}) outside {}x{}",
                m.width(),
                m.height()
            )));
        }
        write_out(out, u8::from(m.get(x, y)), "out")
    })
}

/// Sets pixel `(x, y)` to foreground when `value` is nonzero.
///
/// # Safety
/// `mask` must be a live handle not aliased by another thread.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_set(mask: *mut PsMask, x: usize, y: usize, value: u8) -> PsStatus {
    guard(|| {
        let m = &mut mask.as_mut().ok_or_else(|| null("mask"))?.0;
        if x >= m.width() || y >= m.height() {
            return Err(invalid(format!(
                "pixel ({x}, {y}) outside {}x{}",
                m.width(),
                m.height()
            )));
        }
        m.set(x, y, value != 0);
        Ok(())
    })
}

/// Intersection over union; two empty masks score 1.
///
/// # Safety
/// `a` and `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_iou(
    a: *const PsMask,
    b: *const PsMask,
    out: *mut f64,
) -> PsStatus {
    guard(|| {
        let v = iou(&as_ref(a, "a")?.0, &as_ref(b, "b")?.0).or_status()?;
        write_out(out, v, "out")
    })
}

/// Pixelwise OR of `n` masks into a new handle. With `n == 0` the result is
/// an all-background `width`×`height` mask; otherwise `width`/`height` must
/// match the inputs.
///
/// # Safety
/// `masks` must point to `n` live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_union(
    masks: *const *const PsMask,
    n: usize,
    width: usize,
    height: usize,
    out: *mut *mut PsMask,
) -> PsStatus {
    guard(|| {
        let owned = if n == 0 {
            Vec::new()
        } else {
            if masks.is_null() {
                return Err(null("masks"));
            }
            std::slice::from_raw_parts(masks, n)
                .iter()
                .map(|&p| as_ref(p, "masks[i]").map(|m| m.0.clone()))
                .collect::<Result<Vec<_>, _>>()?
        };
        let u = union(&owned, Some((width, height))).or_status()?;
        write_out(out, Box::into_raw(Box::new(PsMask(u))), "out")
    })
}

/// Run-length encodes a mask (row-major, background run first). Writes the
/// number of runs to `len`; if `capacity` is too small nothing else is
/// written and `BufferTooSmall` is returned, so callers may probe with a
/// null buffer.
///
/// # Safety
/// `counts` must have room for `capacity` values; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_rle_encode(
    mask: *const PsMask,
    counts: *mut u64,
    capacity: usize,
    len: *mut usize,
) -> PsStatus {
    guard(|| {
        let r = rle_encode(&as_ref(mask, "mask")?.0);
        write_out(len, r.counts.len(), "len")?;
        if capacity < r.counts.len() {
            return Err((
                PsStatus::BufferTooSmall,
                format!("need {} slots, got {capacity}", r.counts.len()),
            ));
        }
        if counts.is_null() {
            return Err(null("counts"));
        }
        for (i, &c) in r.counts.iter().enumerate() {
            counts.add(i).write(c);
        }
        Ok(())
    })
}

/// Decodes run lengths whose sum must equal `width * height`.
///
/// # Safety
/// `counts` must point to `n` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_mask_rle_decode(
    width: usize,
    height: usize,
    counts: *const u64,
    n: usize,
    out: *mut *mut PsMask,
) -> PsStatus {
    guard(|| {
        let runs = if n == 0 {
            Vec::new()
        } else {
            if counts.is_null() {
                return Err(null("counts"));
            }
            std::slice::from_raw_parts(counts, n).to_vec()
        };
        let m = rle_decode(&RleMask {
            width,
            height,
            counts: runs,
        })
        .or_status()?;
        write_out(out, Box::into_raw(Box::new(PsMask(m))), "out")
    })
}

/// Format reward (1 parseable, 0 otherwise) of `text` under prompt mode
/// `mode` (e.g. "bbox_pos2") on a `width`×`height` canvas.
///
/// # Safety
/// `text` and `mode` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_format_reward(
    text: *const c_char,
    mode: *const c_char,
    width: usize,
    height: usize,
    out: *mut u8,
) -> PsStatus {
    guard(|| {
        let schema = schema_of(as_str(mode, "mode")?, width, height)?;
        let r = parse_response(as_str(text, "text")?, &schema);
        write_out(out, format_reward(&r), "out")
    })
}

/// Group-standardized advantages of `n >= 2` rewards, written to `out[0..n]`.
///
/// # Safety
/// `rewards` must point to `n` readable values and `out` to `n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn ps_advantages(rewards: *const f64, n: usize, out: *mut f64) -> PsStatus {
    guard(|| {
        if rewards.is_null() {
            return Err(null("rewards"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let g = compute_advantages(std::slice::from_raw_parts(rewards, n)).or_status()?;
        std::ptr::copy_nonoverlapping(g.advantages.as_ptr(), out, n);
        Ok(())
    })
}

/// Loads a dataset directory written by `promptseg gen`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_open(
    path: *const c_char,
    out: *mut *mut PsDataset,
) -> PsStatus {
    guard(|| {
        let ds = read_dataset(Path::new(as_str(path, "path")?)).or_status()?;
        write_out(out, Box::into_raw(Box::new(PsDataset(ds))), "out")
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_free(ds: *mut PsDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of samples (queries) in the dataset.
///
/// # Safety
/// `ds` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_len(ds: *const PsDataset, out: *mut usize) -> PsStatus {
    guard(|| write_out(out, as_ref(ds, "ds")?.0.len(), "out"))
}

fn sample(
    ds: &PsDataset,
    index: usize,
) -> Result<(&promptseg::scene::Scene, &promptseg::scene::Query), (PsStatus, String)> {
    let s = ds.0.samples.get(index).ok_or_else(|| {
        invalid(format!(
            "sample {index} out of range ({} samples)",
            ds.0.len()
        ))
    })?;
    Ok((&ds.0.scenes[s.scene], &s.query))
}

/// Copy of the ground-truth mask of sample `index`.
///
/// # Safety
/// `ds` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_gt_mask(
    ds: *const PsDataset,
    index: usize,
    out: *mut *mut PsMask,
) -> PsStatus {
    guard(|| {
        let (_, q) = sample(as_ref(ds, "ds")?, index)?;
        write_out(
            out,
            Box::into_raw(Box::new(PsMask(q.gt_mask.clone()))),
            "out",
        )
    })
}

/// Scores a response against sample `index` with the synthetic segmenter and
/// default reward weights (format 1, IoU 2).
///
/// # Safety
/// `ds` must be a live handle, `text`/`mode` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ps_score_response(
    ds: *const PsDataset,
    index: usize,
    text: *const c_char,
    mode: *const c_char,
    out: *mut PsReward,
) -> PsStatus {
    guard(|| {
        let (scene, query) = sample(as_ref(ds, "ds")?, index)?;
        let schema = schema_of(as_str(mode, "mode")?, scene.width, scene.height)?;
        let parsed = parse_response(as_str(text, "text")?, &schema);
        let pred = match &parsed {
            Ok(p) if !p.prompts.is_empty() => Some(
                SyntheticSegmenter::default()
                    .execute_set(scene, &p.prompts, &schema)
                    .or_status()?,
            ),
            _ => None,
        };
        let r = compute_reward(
            &parsed,
            pred.as_ref(),
            &query.gt_mask,
            &RewardWeights::default(),
        )
        .or_status()?;
        write_out(
            out,
            PsReward {
                r_format: r.r_format,
                r_iou: r.r_iou,
                total: r.total,
            },
            "out",
        )
    })
}

/// Loads a policy checkpoint written by `promptseg train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_policy_load(path: *const c_char, out: *mut *mut PsPolicy) -> PsStatus {
    guard(|| {
        let ck = Checkpoint::load(Path::new(as_str(path, "path")?)).or_status()?;
        let policy = PsPolicy {
            params: ck.params().or_status()?,
            space: ck.action_space().or_status()?,
            features: ck.features,
        };
        write_out(out, Box::into_raw(Box::new(policy)), "out")
    })
}

/// Releases a policy; null is ignored.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_policy_free(policy: *mut PsPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Greedy response text of the policy for sample `index`, NUL-terminated.
/// `len` receives the text length excluding the terminator; when `capacity`
/// is not larger than that, `BufferTooSmall` is returned and `buf` is left
/// untouched.
///
/// # Safety
/// `buf` must have room for `capacity` bytes; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_policy_respond(
    policy: *const PsPolicy,
    ds: *const PsDataset,
    index: usize,
    buf: *mut c_char,
    capacity: usize,
    len: *mut usize,
) -> PsStatus {
    guard(|| {
        let p = as_ref(policy, "policy")?;
        let (scene, query) = sample(as_ref(ds, "ds")?, index)?;
        if (scene.width, scene.height) != (p.space.schema.width, p.space.schema.height) {
            return Err(invalid("scene canvas differs from the policy canvas"));
        }
        let phi = featurize(scene, query, &p.features);
        let text = greedy_decode(&p.params, &phi, &p.space).or_status()?.text;
        write_out(len, text.len(), "len")?;
        if capacity <= text.len() {
            return Err((
                PsStatus::BufferTooSmall,
                format!("need {} bytes, got {capacity}", text.len() + 1),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        buf.add(text.len()).write(0);
        Ok(())
    })
}
