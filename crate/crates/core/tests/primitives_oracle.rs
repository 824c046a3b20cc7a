use num_bigint::BigUint;
use rand::Rng;
use serde::Deserialize;
use sha2::{Digest as _, Sha256};

use relay_mining::primitives::{check_collision, digest, Difficulty, Digest};
use relay_mining::rng::substream;

#[derive(Deserialize)]
struct Vector {
    request: String,
    response: String,
    digest: String,
}

fn vectors() -> Vec<Vector> {
    serde_json::from_str(include_str!("../fixtures/digest_vectors.json")).unwrap()
}

/// Independent rebuild of the relay digest construction.
fn naive_digest(req: &[u8], resp: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"relay-mining/relay/v1");
    h.update((req.len() as u64).to_be_bytes());
    h.update(req);
    h.update((resp.len() as u64).to_be_bytes());
    h.update(resp);
    h.finalize().into()
}

#[test]
fn golden_digests() {
    for v in vectors() {
        let d = digest(v.request.as_bytes(), v.response.as_bytes()).unwrap();
        assert_eq!(d.to_hex(), v.digest);
        assert_eq!(d.0, naive_digest(v.request.as_bytes(), v.response.as_bytes()));
    }
}

#[test]
fn halves_are_length_delimited() {
    let a = digest(b"ab", b"c").unwrap();
    let b = digest(b"a", b"bc").unwrap();
    assert_ne!(a, b);
    assert!(digest(b"", b"x").is_err());
    assert!(digest(b"x", b"").is_err());
}

fn big(d: &Digest) -> BigUint {
    BigUint::from_bytes_be(&d.0)
}

/// `d < floor(p * 2^256)` computed with arbitrary precision from the exact
/// binary expansion of `p`.
fn oracle_collides(d: &Digest, p: f64) -> bool {
    if p >= 1.0 {
        return true;
    }
    let bits = p.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = (bits & ((1u64 << 52) - 1)) | if exp == 0 { 0 } else { 1 << 52 };
    let e = if exp == 0 { -1074 } else { exp - 1075 };
    let shift = 256 + e;
    let threshold = if shift >= 0 { BigUint::from(mantissa) << shift as usize } else { BigUint::from(mantissa) >> (-shift) as usize };
    big(d) < threshold
}

#[test]
fn threshold_matches_big_integer_oracle() {
    let mut rng = substream(11, "threshold-oracle", &[]);
    for &p in &[1e-6, 0.001, 0.01, 0.036231884057971016, 0.1, 0.25, 0.5, 0.999999, 2f64.powi(-64)] {
        let diff = Difficulty::new(p).unwrap();
        for _ in 0..2_000 {
            let mut bytes = [0u8; 32];
            rng.fill(&mut bytes);
            // Push some digests near the threshold.
            if rng.random_bool(0.5) {
                if let Some(t) = diff.threshold() {
                    bytes = *t;
                    let i = rng.random_range(16..32);
                    bytes[i] ^= rng.random::<u8>();
                }
            }
            let d = Digest(bytes);
            assert_eq!(check_collision(&d, &diff), oracle_collides(&d, p), "p={p} d={d}");
        }
    }
}

#[test]
fn threshold_edges() {
    let half = Difficulty::new(0.5).unwrap();
    let mut below = [0xffu8; 32];
    below[0] = 0x7f;
    assert!(check_collision(&Digest(below), &half));
    let mut at = [0u8; 32];
    at[0] = 0x80;
    assert!(!check_collision(&Digest(at), &half));
    assert!(check_collision(&Digest([0xff; 32]), &Difficulty::FULL));
    assert!(check_collision(&Digest::ZERO, &Difficulty::new(2f64.powi(-64)).unwrap()));
    assert!(Difficulty::new(0.0).is_err());
    assert!(Difficulty::new(1.5).is_err());
    assert!(Difficulty::new(f64::NAN).is_err());
}

#[test]
fn collision_fraction_at_one_tenth() {
    let diff = Difficulty::new(0.1).unwrap();
    let n = 100_000;
    let hits = (0..n as u64)
        .filter(|i| {
            let req = format!("{{\"id\":{i}}}");
            check_collision(&digest(req.as_bytes(), b"ok").unwrap(), &diff)
        })
        .count();
    let frac = hits as f64 / n as f64;
    assert!((0.094..=0.106).contains(&frac), "fraction {frac}");
}
