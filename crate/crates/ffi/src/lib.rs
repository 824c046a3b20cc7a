//! C ABI over `relay-mining`.
//!
//! Conventions:
//! - every fallible call returns an [`RmStatus`] and writes results through out-pointers;
//! - digests and hashes are 32-byte buffers;
//! - handles come from `rm_*_new` / producers and must be released with the matching `rm_*_free`;
//! - the last error message is kept per thread and read with [`rm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use relay_mining::difficulty::{DifficultyParams, DifficultyState};
use relay_mining::estimator::estimate_volume;
use relay_mining::primitives::{check_collision, digest, Difficulty, Digest};
use relay_mining::smst::{verify_proof, MembershipProof, SmstError, SumHash, SumTrie};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    Duplicate = 4,
    NotFound = 5,
    EmptyTrie = 6,
    Parse = 7,
    Internal = 8,
}

/// Opaque sparse Merkle sum trie.
pub struct RmTrie(SumTrie);

/// Opaque membership proof.
pub struct RmProof(MembershipProof);

/// Opaque per-service difficulty controller.
pub struct RmDifficulty(DifficultyState);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

type Res<T> = Result<T, RmStatus>;

fn fail<T>(status: RmStatus, msg: impl Into<String>) -> Res<T> {
    set_error(msg);
    Err(status)
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Res<()>) -> RmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RmStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("panic inside relay-mining");
            RmStatus::Internal
        }
    }
}

fn smst_status(e: SmstError) -> RmStatus {
    let status = match e {
        SmstError::Duplicate(_) => RmStatus::Duplicate,
        SmstError::NotFound(_) => RmStatus::NotFound,
        SmstError::EmptyTrie => RmStatus::EmptyTrie,
        SmstError::Parse { .. } => RmStatus::Parse,
        SmstError::InvalidKeyWidth(_) | SmstError::Overflow => RmStatus::InvalidArgument,
        _ => RmStatus::Internal,
    };
    set_error(e.to_string());
    status
}

unsafe fn get<'a, T>(p: *const T, name: &str) -> Res<&'a T> {
    p.as_ref().map_or_else(|| fail(RmStatus::NullPointer, format!("{name} is null")), Ok)
}

unsafe fn get_mut<'a, T>(p: *mut T, name: &str) -> Res<&'a mut T> {
    p.as_mut().map_or_else(|| fail(RmStatus::NullPointer, format!("{name} is null")), Ok)
}

/// Null is accepted only when `len` is 0.
unsafe fn bytes<'a>(p: *const u8, len: usize, name: &str) -> Res<&'a [u8]> {
    if len == 0 {
        Ok(&[])
    } else if p.is_null() {
        fail(RmStatus::NullPointer, format!("{name} is null"))
    } else {
        Ok(slice::from_raw_parts(p, len))
    }
}

unsafe fn read_digest(p: *const u8, name: &str) -> Res<Digest> {
    let b = get(p as *const [u8; 32], name)?;
    Ok(Digest(*b))
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Res<()> {
    if out.is_null() {
        return fail(RmStatus::NullPointer, format!("{name} is null"));
    }
    out.write(value);
    Ok(())
}

/// Static description of a status code. Never null; do not free.
#[no_mangle]
pub extern "C" fn rm_status_str(status: RmStatus) -> *const c_char {
    let s: &'static CStr = match status {
        RmStatus::Ok => c"ok",
        RmStatus::NullPointer => c"null pointer argument",
        RmStatus::InvalidArgument => c"invalid argument",
        RmStatus::InvalidUtf8 => c"string is not valid UTF-8",
        RmStatus::Duplicate => c"key already present",
        RmStatus::NotFound => c"key not found",
        RmStatus::EmptyTrie => c"trie is empty",
        RmStatus::Parse => c"parse error",
        RmStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

/// Detail for the most recent failure on this thread; empty after a success.
/// Valid until the next `rm_*` call on the same thread.
#[no_mangle]
pub extern "C" fn rm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Relay digest of a request/response pair into `out` (32 bytes).
///
/// # Safety
/// Buffers must be valid for their stated lengths; `out` must hold 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn rm_digest(
    request: *const u8,
    request_len: usize,
    response: *const u8,
    response_len: usize,
    out: *mut u8,
) -> RmStatus {
    guard(|| {
        let req = bytes(request, request_len, "request")?;
        let resp = bytes(response, response_len, "response")?;
        let d = digest(req, resp).or_else(|e| fail(RmStatus::InvalidArgument, e.to_string()))?;
        write(out as *mut [u8; 32], d.0, "out")
    })
}

/// Whether `digest` (32 bytes) collides under collision probability `probability`.
///
/// # Safety
/// `digest` must point to 32 readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_check_collision(digest: *const u8, probability: f64, out: *mut bool) -> RmStatus {
    guard(|| {
        let d = read_digest(digest, "digest")?;
        let diff = Difficulty::new(probability).or_else(|e| fail(RmStatus::InvalidArgument, e.to_string()))?;
        write(out, check_collision(&d, &diff), "out")
    })
}

/// Volume estimate `claims / probability`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_estimate_volume(claims: u64, probability: f64, out: *mut f64) -> RmStatus {
    guard(|| {
        let e = estimate_volume(claims, probability).or_else(|e| fail(RmStatus::InvalidArgument, e.to_string()))?;
        write(out, e.estimate, "out")
    })
}

/// New in-memory trie over `key_bits`-bit keys (1..=256).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_trie_new(key_bits: u32, out: *mut *mut RmTrie) -> RmStatus {
    guard(|| {
        let trie = SumTrie::new(key_bits as usize).map_err(smst_status)?;
        write(out, Box::into_raw(Box::new(RmTrie(trie))), "out")
    })
}

/// # Safety
/// `trie` must come from `rm_trie_new` and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rm_trie_free(trie: *mut RmTrie) {
    if !trie.is_null() {
        drop(Box::from_raw(trie));
    }
}

/// Inserts a weight-1 leaf. Re-inserting a key returns `Duplicate`.
///
/// # Safety
/// `key` must point to 32 bytes; `value` must be valid for `value_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn rm_trie_insert(trie: *mut RmTrie, key: *const u8, value: *const u8, value_len: usize) -> RmStatus {
    guard(|| {
        let t = get_mut(trie, "trie")?;
        let k = read_digest(key, "key")?;
        let v = bytes(value, value_len, "value")?;
        t.0.insert(&k, v).map_err(smst_status)?;
        Ok(())
    })
}

/// Root hash (32 bytes into `hash_out`) and sum.
///
/// # Safety
/// `hash_out` must hold 32 bytes; `sum_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_trie_root(trie: *const RmTrie, hash_out: *mut u8, sum_out: *mut u64) -> RmStatus {
    guard(|| {
        let root = get(trie, "trie")?.0.root();
        write(hash_out as *mut [u8; 32], root.hash.0, "hash_out")?;
        write(sum_out, root.sum, "sum_out")
    })
}

/// Membership proof for `key`.
///
/// # Safety
/// `key` must point to 32 bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_trie_prove(trie: *const RmTrie, key: *const u8, out: *mut *mut RmProof) -> RmStatus {
    guard(|| {
        let t = get(trie, "trie")?;
        let k = read_digest(key, "key")?;
        let proof = t.0.prove_membership(&k).map_err(smst_status)?;
        write(out, Box::into_raw(Box::new(RmProof(proof))), "out")
    })
}

/// Proof of the leaf closest to `target` (the claim challenge path).
///
/// # Safety
/// `target` must point to 32 bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_trie_closest_proof(trie: *const RmTrie, target: *const u8, out: *mut *mut RmProof) -> RmStatus {
    guard(|| {
        let t = get(trie, "trie")?;
        let target = read_digest(target, "target")?;
        let proof = t.0.closest_proof(&target).map_err(smst_status)?;
        write(out, Box::into_raw(Box::new(RmProof(proof))), "out")
    })
}

/// # Safety
/// `proof` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rm_proof_free(proof: *mut RmProof) {
    if !proof.is_null() {
        drop(Box::from_raw(proof));
    }
}

/// Checks `proof` against a root. When `target` is non-null the proof must
/// also be for the leaf closest to it.
///
/// # Safety
/// `root_hash` must point to 32 bytes, `target` to 32 bytes or be null; `valid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_proof_verify(
    proof: *const RmProof,
    root_hash: *const u8,
    root_sum: u64,
    target: *const u8,
    valid: *mut bool,
) -> RmStatus {
    guard(|| {
        let p = &get(proof, "proof")?.0;
        let root = SumHash { hash: read_digest(root_hash, "root_hash")?, sum: root_sum };
        let mut ok = verify_proof(&root, p);
        if !target.is_null() {
            ok = ok && p.follows_closest_path(&read_digest(target, "target")?);
        }
        write(valid, ok, "valid")
    })
}

/// Leaf key (32 bytes into `key_out`) and weight of the proven leaf.
///
/// # Safety
/// `key_out` must hold 32 bytes; `weight_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_proof_leaf(proof: *const RmProof, key_out: *mut u8, weight_out: *mut u64) -> RmStatus {
    guard(|| {
        let p = &get(proof, "proof")?.0;
        write(key_out as *mut [u8; 32], p.key.0, "key_out")?;
        write(weight_out, p.weight, "weight_out")
    })
}

/// Text form of a proof. Release the string with `rm_string_free`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_proof_to_text(proof: *const RmProof, out: *mut *mut c_char) -> RmStatus {
    guard(|| {
        let text = get(proof, "proof")?.0.to_text();
        let c = CString::new(text).or_else(|_| fail(RmStatus::Internal, "proof text contains NUL"))?;
        write(out, c.into_raw(), "out")
    })
}

/// Parses the text form produced by `rm_proof_to_text`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_proof_from_text(text: *const c_char, out: *mut *mut RmProof) -> RmStatus {
    guard(|| {
        if text.is_null() {
            return fail(RmStatus::NullPointer, "text is null");
        }
        let s = CStr::from_ptr(text).to_str().or_else(|e| fail(RmStatus::InvalidUtf8, e.to_string()))?;
        let proof = MembershipProof::from_text(s).map_err(smst_status)?;
        write(out, Box::into_raw(Box::new(RmProof(proof))), "out")
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// New controller starting at `p = 1`, height 0.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_difficulty_new(
    target_claims: u64,
    ema_alpha: f64,
    update_interval: u64,
    out: *mut *mut RmDifficulty,
) -> RmStatus {
    guard(|| {
        let params = DifficultyParams { target_claims, ema_alpha, update_interval };
        let state = DifficultyState::new(params).or_else(|e| fail(RmStatus::InvalidArgument, e.to_string()))?;
        write(out, Box::into_raw(Box::new(RmDifficulty(state))), "out")
    })
}

/// # Safety
/// `state` must come from `rm_difficulty_new` and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rm_difficulty_free(state: *mut RmDifficulty) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Feeds one block's claim count; writes the probability for the next block.
///
/// # Safety
/// `next_probability` may be null.
#[no_mangle]
pub unsafe extern "C" fn rm_difficulty_observe(state: *mut RmDifficulty, claims: u64, next_probability: *mut f64) -> RmStatus {
    guard(|| {
        let obs = get_mut(state, "state")?.0.observe_block(claims);
        if !next_probability.is_null() {
            next_probability.write(obs.next_probability);
        }
        Ok(())
    })
}

/// Current probability, EMA of estimated relays and block height.
///
/// # Safety
/// Each out-pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn rm_difficulty_get(
    state: *const RmDifficulty,
    probability: *mut f64,
    r_ema: *mut f64,
    height: *mut u64,
) -> RmStatus {
    guard(|| {
        let s = &get(state, "state")?.0;
        if let Some(p) = probability.as_mut() {
            *p = s.probability();
        }
        if let Some(r) = r_ema.as_mut() {
            *r = s.r_ema();
        }
        if let Some(h) = height.as_mut() {
            *h = s.height();
        }
        Ok(())
    })
}

