//! Canonical wire formats for parameter updates.
//!
//! Two payload kinds exist:
//!
//! * `sign-bits`: one bit per parameter, `1` for `delta >= 0` and `0` for
//!   negative, packed MSB-first into bytes with zero padding, then standard
//!   base64 (with `=` padding).
//! * `float32`: each parameter as IEEE-754 binary32 little-endian, in flat
//!   index order, carried as lowercase hex text.
//!
//! The canonical bytes (packed sign bytes, or raw float32 bytes) are the
//! SHA-256 preimage for commitments. Chunking never affects the digest.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::ParamVector;

/// Per-call upload size used by default, in payload characters.
pub const DEFAULT_CHUNK_CHARS: usize = 13_300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("invalid base64: {0}")]
    Base64(String),
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("payload length {actual}, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("sign payload has non-zero padding bits")]
    NonZeroPadding,
    #[error("missing batch {index}")]
    MissingBatch { index: usize },
    #[error("batches disagree on {0}")]
    InconsistentBatches(&'static str),
    #[error("not a 64-character lowercase hex digest: {0:?}")]
    InvalidDigest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadKind {
    #[serde(rename = "sign-bits")]
    SignBits,
    #[serde(rename = "float32")]
    Float32,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::SignBits => "sign-bits",
            PayloadKind::Float32 => "float32",
        }
    }
}

impl std::fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A packed bit array, MSB-first within each byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignBits {
    len: usize,
    bytes: Vec<u8>,
}

impl SignBits {
    pub fn from_bools(bits: &[bool]) -> Self {
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 0x80 >> (i % 8);
            }
        }
        Self {
            len: bits.len(),
            bytes,
        }
    }

    /// Rejects byte strings of the wrong length or with stray padding bits.
    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Self, CodecError> {
        if bytes.len() != len.div_ceil(8) {
            return Err(CodecError::Length {
                expected: len.div_ceil(8),
                actual: bytes.len(),
            });
        }
        if !len.is_multiple_of(8) {
            let mask = 0xffu8 >> (len % 8);
            if bytes[bytes.len() - 1] & mask != 0 {
                return Err(CodecError::NonZeroPadding);
            }
        }
        Ok(Self { len, bytes })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    /// `+1.0` for a set bit, `-1.0` otherwise.
    pub fn to_signs(&self) -> ParamVector {
        ParamVector::new(self.iter().map(|b| if b { 1.0 } else { -1.0 }).collect())
    }
}

/// Bit `i` is set iff `delta[i] >= 0`; zero maps to the positive symbol.
pub fn pack_signs(delta: &ParamVector) -> SignBits {
    let bools: Vec<bool> = delta.as_slice().iter().map(|&v| v >= 0.0).collect();
    SignBits::from_bools(&bools)
}

pub fn encode_base64(bits: &SignBits) -> String {
    STANDARD.encode(&bits.bytes)
}

pub fn decode_base64(text: &str, len: usize) -> Result<SignBits, CodecError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| CodecError::Base64(e.to_string()))?;
    SignBits::from_bytes(bytes, len)
}

/// Base64 characters needed for `dim` sign bits.
pub const fn base64_len(dim: u64) -> u64 {
    4 * dim.div_ceil(8).div_ceil(3)
}

/// Hex characters needed for `dim` sign bits (two per packed byte).
pub const fn sign_hex_len(dim: u64) -> u64 {
    2 * dim.div_ceil(8)
}

/// Characters of a float32 update carried as hex.
pub const fn float32_hex_len(dim: u64) -> u64 {
    8 * dim
}

/// Payload characters for an update of `dim` parameters.
pub const fn payload_len(kind: PayloadKind, dim: u64) -> u64 {
    match kind {
        PayloadKind::SignBits => base64_len(dim),
        PayloadKind::Float32 => float32_hex_len(dim),
    }
}

pub fn serialize_float32(delta: &ParamVector) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(delta.dim() * 4);
    for (index, v) in delta.as_slice().iter().enumerate() {
        if !v.is_finite() {
            return Err(CodecError::NonFinite { index });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn deserialize_float32(bytes: &[u8]) -> Result<ParamVector, CodecError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(CodecError::Length {
            expected: bytes.len().next_multiple_of(4),
            actual: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite { index });
    }
    Ok(ParamVector::new(values))
}

/// The hash preimage for `delta` under `kind`.
pub fn canonical_bytes(delta: &ParamVector, kind: PayloadKind) -> Result<Vec<u8>, CodecError> {
    match kind {
        PayloadKind::SignBits => Ok(pack_signs(delta).bytes),
        PayloadKind::Float32 => serialize_float32(delta),
    }
}

/// Text payload for `delta` under `kind`.
pub fn encode_payload(delta: &ParamVector, kind: PayloadKind) -> Result<String, CodecError> {
    match kind {
        PayloadKind::SignBits => Ok(encode_base64(&pack_signs(delta))),
        PayloadKind::Float32 => Ok(hex::encode(serialize_float32(delta)?)),
    }
}

/// Recovers canonical bytes from a full payload, validating its length for `dim`.
pub fn payload_to_canonical_bytes(
    text: &str,
    kind: PayloadKind,
    dim: usize,
) -> Result<Vec<u8>, CodecError> {
    let expected = payload_len(kind, dim as u64) as usize;
    if text.len() != expected {
        return Err(CodecError::Length {
            expected,
            actual: text.len(),
        });
    }
    match kind {
        PayloadKind::SignBits => Ok(decode_base64(text, dim)?.bytes),
        PayloadKind::Float32 => {
            if text.bytes().any(|b| b.is_ascii_uppercase()) {
                return Err(CodecError::Hex("uppercase digits are not canonical".into()));
            }
            let bytes = hex::decode(text).map_err(|e| CodecError::Hex(e.to_string()))?;
            deserialize_float32(&bytes)?;
            Ok(bytes)
        }
    }
}

/// Decodes a full payload into the vector the aggregator consumes: the
/// float32 update itself, or `+-1` per coordinate for sign payloads.
pub fn decode_payload(text: &str, kind: PayloadKind, dim: usize) -> Result<ParamVector, CodecError> {
    let bytes = payload_to_canonical_bytes(text, kind, dim)?;
    match kind {
        PayloadKind::SignBits => Ok(SignBits::from_bytes(bytes, dim)?.to_signs()),
        PayloadKind::Float32 => deserialize_float32(&bytes),
    }
}

/// A lowercase hex SHA-256 digest.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HashDigest(String);

impl HashDigest {
    pub fn parse(hex: &str) -> Result<Self, CodecError> {
        if hex.len() == 64 && hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Self(hex.to_string()))
        } else {
            Err(CodecError::InvalidDigest(hex.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for HashDigest {
    type Error = CodecError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<HashDigest> for String {
    fn from(d: HashDigest) -> Self {
        d.0
    }
}

impl std::fmt::Display for HashDigest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn hash_bytes(bytes: &[u8]) -> HashDigest {
    HashDigest(hex::encode(Sha256::digest(bytes)))
}

pub fn hash_params(delta: &ParamVector, kind: PayloadKind) -> Result<HashDigest, CodecError> {
    Ok(hash_bytes(&canonical_bytes(delta, kind)?))
}

/// One upload call's worth of payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireBatch {
    pub worker_id: String,
    pub epoch_index: u64,
    pub batch_index: usize,
    /// Number of batches in this worker's upload for the epoch.
    pub batch_count: usize,
    /// Self-declared training-set size, used as the FedAvg weight.
    pub sample_count: u64,
    pub payload_kind: PayloadKind,
    pub payload: String,
}

/// Splits `payload` into pieces of at most `max_chars` characters. An empty
/// payload yields no pieces.
pub fn chunk(payload: &str, max_chars: usize) -> Vec<&str> {
    assert!(max_chars >= 1, "max_chars must be >= 1");
    let mut out = Vec::new();
    let mut rest = payload;
    while !rest.is_empty() {
        let cut = rest
            .char_indices()
            .nth(max_chars)
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let (head, tail) = rest.split_at(cut);
        out.push(head);
        rest = tail;
    }
    out
}

impl WireBatch {
    /// Chunks a full payload into dense, zero-based batches.
    pub fn split(
        worker_id: &str,
        epoch_index: u64,
        sample_count: u64,
        payload_kind: PayloadKind,
        payload: &str,
        max_chars: usize,
    ) -> Vec<WireBatch> {
        let pieces = chunk(payload, max_chars);
        let batch_count = pieces.len();
        pieces
            .into_iter()
            .enumerate()
            .map(|(batch_index, piece)| WireBatch {
                worker_id: worker_id.to_string(),
                epoch_index,
                batch_index,
                batch_count,
                sample_count,
                payload_kind,
                payload: piece.to_string(),
            })
            .collect()
    }
}

/// Concatenates batches in index order; every index in `0..batch_count` must
/// be present exactly once.
pub fn reassemble(batches: &[WireBatch]) -> Result<String, CodecError> {
    let Some(first) = batches.first() else {
        return Ok(String::new());
    };
    let count = first.batch_count;
    let mut slots: Vec<Option<&str>> = vec![None; count];
    for b in batches {
        if b.batch_count != count {
            return Err(CodecError::InconsistentBatches("batch_count"));
        }
        if b.worker_id != first.worker_id || b.epoch_index != first.epoch_index {
            return Err(CodecError::InconsistentBatches("owner"));
        }
        if b.payload_kind != first.payload_kind {
            return Err(CodecError::InconsistentBatches("payload_kind"));
        }
        match slots.get_mut(b.batch_index) {
            Some(slot @ None) => *slot = Some(&b.payload),
            _ => return Err(CodecError::InconsistentBatches("batch_index")),
        }
    }
    let mut out = String::new();
    for (index, s) in slots.into_iter().enumerate() {
        out.push_str(s.ok_or(CodecError::MissingBatch { index })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_positive_packs_to_all_ones() {
        let bits = pack_signs(&ParamVector::new(vec![0.5; 8]));
        assert_eq!(bits.bytes(), &[0xff]);
    }

    #[test]
    fn zero_coordinate_packs_as_positive() {
        let bits = pack_signs(&ParamVector::new(vec![-1.0, 0.0, -0.0, -2.0]));
        assert_eq!(bits.iter().collect::<Vec<_>>(), vec![false, true, true, false]);
        assert_eq!(bits.bytes(), &[0b0110_0000]);
    }

    #[test]
    fn twenty_four_bits_are_four_chars_without_padding() {
        let bits = pack_signs(&ParamVector::new(vec![1.0; 24]));
        let text = encode_base64(&bits);
        assert_eq!(text, "////");
        assert_eq!(base64_len(24), 4);
    }

    #[test]
    fn base64_arithmetic_at_full_scale() {
        assert_eq!(300_000_000u64.div_ceil(8), 37_500_000);
        assert_eq!(base64_len(300_000_000), 50_000_000);
        assert_eq!(sign_hex_len(300_000_000), 75_000_000);
    }

    #[test]
    fn one_point_zero_is_canonical_ieee_bytes() {
        let bytes = serialize_float32(&ParamVector::new(vec![1.0])).unwrap();
        assert_eq!(bytes, vec![0x00, 0x00, 0x80, 0x3f]);
        assert_eq!(
            encode_payload(&ParamVector::new(vec![1.0]), PayloadKind::Float32).unwrap(),
            "0000803f"
        );
    }

    #[test]
    fn non_finite_values_do_not_serialize() {
        let v = ParamVector::new(vec![0.0, f32::NAN]);
        assert_eq!(serialize_float32(&v), Err(CodecError::NonFinite { index: 1 }));
        assert!(hash_params(&v, PayloadKind::Float32).is_err());
    }

    #[test]
    fn empty_input_hashes_to_published_constant() {
        assert_eq!(
            hash_bytes(&[]).as_str(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash_params(&ParamVector::zeros(0), PayloadKind::Float32)
                .unwrap()
                .as_str(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn flipping_one_sign_changes_the_digest() {
        let a = ParamVector::new(vec![1.0, -1.0, 2.0, 3.0]);
        let mut b = a.clone();
        b.as_mut_slice()[1] = 1.0;
        let da = hash_params(&a, PayloadKind::SignBits).unwrap();
        let db = hash_params(&b, PayloadKind::SignBits).unwrap();
        assert_ne!(da, db);
        // 1011 0000 vs 1111 0000, checked against the reference SHA-256 vectors
        assert_eq!(da, hash_bytes(&[0xb0]));
        assert_eq!(db, hash_bytes(&[0xf0]));
    }

    #[test]
    fn chunking_edge_cases() {
        assert!(chunk("", 5).is_empty());
        assert_eq!(chunk("abc", 5), vec!["abc"]);
        assert_eq!(chunk("abcdef", 2), vec!["ab", "cd", "ef"]);
        assert_eq!(chunk("abcdefg", 3), vec!["abc", "def", "g"]);
    }

    #[test]
    fn reassembly_detects_missing_and_duplicate_batches() {
        let b = WireBatch::split("A", 0, 10, PayloadKind::Float32, "abcdefgh", 3);
        assert_eq!(b.len(), 3);
        assert_eq!(reassemble(&b).unwrap(), "abcdefgh");
        let mut shuffled = b.clone();
        shuffled.reverse();
        assert_eq!(reassemble(&shuffled).unwrap(), "abcdefgh");
        assert_eq!(
            reassemble(&b[..2]),
            Err(CodecError::MissingBatch { index: 2 })
        );
        let dup = vec![b[0].clone(), b[0].clone(), b[2].clone()];
        assert!(reassemble(&dup).is_err());
    }

    #[test]
    fn decode_rejects_wrong_length_and_padding() {
        // 9 bits -> 2 bytes; the 7 trailing bits must be zero
        assert_eq!(
            decode_base64(&STANDARD.encode([0xff, 0x81]), 9),
            Err(CodecError::NonZeroPadding)
        );
        assert!(decode_base64(&STANDARD.encode([0xff, 0x80]), 9).is_ok());
        assert!(decode_base64("////", 8).is_err());
        assert!(payload_to_canonical_bytes("0000803F", PayloadKind::Float32, 1).is_err());
        assert!(payload_to_canonical_bytes("0000803f00", PayloadKind::Float32, 1).is_err());
    }

    #[test]
    fn digest_parsing() {
        assert!(HashDigest::parse(&"a".repeat(64)).is_ok());
        assert!(HashDigest::parse(&"A".repeat(64)).is_err());
        assert!(HashDigest::parse(&"a".repeat(63)).is_err());
    }

    proptest! {
        #[test]
        fn sign_payload_round_trips(values in prop::collection::vec(-10.0f32..10.0, 0..300)) {
            let v = ParamVector::new(values);
            let bits = pack_signs(&v);
            let text = encode_base64(&bits);
            prop_assert_eq!(text.len() as u64, base64_len(v.dim() as u64));
            let back = decode_base64(&text, v.dim()).unwrap();
            prop_assert_eq!(&back, &bits);
            prop_assert_eq!(pack_signs(&back.to_signs()), bits);
        }

        #[test]
        fn float32_round_trip_is_within_quantization(values in prop::collection::vec(-1e6f64..1e6, 0..200)) {
            let v = ParamVector::from_f64(&values);
            let bytes = serialize_float32(&v).unwrap();
            prop_assert_eq!(bytes.len(), 4 * values.len());
            let back = deserialize_float32(&bytes).unwrap();
            for (orig, got) in values.iter().zip(back.as_slice()) {
                // independent cast as the oracle
                prop_assert_eq!(*got, *orig as f32);
                prop_assert!((f64::from(*got) - orig).abs() <= orig.abs() * f64::powi(2.0, -23));
            }
        }

        #[test]
        fn chunk_then_reassemble_is_identity(payload in "[A-Za-z0-9+/=]{0,500}", max in 1usize..64) {
            let batches = WireBatch::split("w", 3, 1, PayloadKind::SignBits, &payload, max);
            prop_assert!(batches.iter().all(|b| b.payload.len() <= max));
            prop_assert_eq!(batches.len(), payload.len().div_ceil(max));
            prop_assert_eq!(reassemble(&batches).unwrap(), payload);
        }
    }
}
