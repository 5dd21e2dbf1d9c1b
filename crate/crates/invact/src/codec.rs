//! Encodings of the branch indicator: bit-packed boolean arrays, sign-bit
//! embedding, and mantissa-LSB embedding.
//!
//! The bit-packed form stores one bit per element in `u8` storage, with bit
//! `i` living at bit `(i mod 8)` of byte `(i div 8)`. The two embedded forms
//! hide the indicator inside the saved scalar itself: the sign-bit variant
//! stores `y - C ≥ 0` with the freed sign bit carrying the indicator, and the
//! LSB variant overwrites the least significant mantissa bit of `y`.

use crate::{Error, Result};

/// A boolean tensor packed one bit per element into bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBits {
    storage: Vec<u8>,
    len: usize,
}

impl PackedBits {
    /// Packs a slice of booleans; bit `i` becomes bit `(i % 8)` of byte
    /// `(i / 8)`. Bits past `len` in the final byte stay zero.
    pub fn pack(bits: &[bool]) -> PackedBits {
        let mut storage = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                storage[i / 8] |= 1 << (i % 8);
            }
        }
        PackedBits {
            storage,
            len: bits.len(),
        }
    }

    /// Wraps already-packed bytes; `storage` must hold `⌈len/8⌉` bytes with
    /// the padding bits clear.
    pub(crate) fn from_raw(storage: Vec<u8>, len: usize) -> PackedBits {
        debug_assert_eq!(storage.len(), len.div_ceil(8));
        PackedBits { storage, len }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bytes of backing storage (`⌈len/8⌉`).
    pub fn storage_bytes(&self) -> usize {
        self.storage.len()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.storage
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range ({} bits)", self.len);
        (self.storage[i / 8] >> (i % 8)) & 1 == 1
    }

    /// Unpacks to booleans. `n` must equal the packed length; this mirrors
    /// the packing formula exactly and round-trips [`PackedBits::pack`].
    pub fn unpack(&self, n: usize) -> Result<Vec<bool>> {
        if n != self.len {
            return Err(Error::Argument(format!(
                "requested {n} bits from a {}-bit array",
                self.len
            )));
        }
        Ok((0..n).map(|i| self.get(i)).collect())
    }

    /// Serialized layout: the logical bit count as a little-endian `u64`,
    /// then the raw storage bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.storage.len());
        out.extend_from_slice(&(self.len as u64).to_le_bytes());
        out.extend_from_slice(&self.storage);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PackedBits> {
        if bytes.len() < 8 {
            return Err(Error::Parse("PackedBits header truncated".to_string()));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let want = len.div_ceil(8);
        let storage = &bytes[8..];
        if storage.len() != want {
            return Err(Error::Parse(format!(
                "PackedBits with {len} bits needs {want} bytes, found {}",
                storage.len()
            )));
        }
        if !len.is_multiple_of(8) {
            if let Some(&last) = storage.last() {
                if last >> (len % 8) != 0 {
                    return Err(Error::Parse(
                        "PackedBits trailing bits beyond length are set".to_string(),
                    ));
                }
            }
        }
        Ok(PackedBits {
            storage: storage.to_vec(),
            len,
        })
    }
}

/// Floating-point formats an indicator can be embedded into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarFormat {
    Binary32,
    Binary16,
}

/// Which trick an [`EncodedScalar`] carries its indicator with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndicatorCarrier {
    SignBit,
    Lsb,
}

/// One stored scalar whose bit pattern carries the branch indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedScalar {
    bits: u32,
    pub format: ScalarFormat,
    pub carries: IndicatorCarrier,
}

impl EncodedScalar {
    /// The stored value, widened to f64.
    pub fn value(&self) -> f64 {
        match self.format {
            ScalarFormat::Binary32 => f32::from_bits(self.bits) as f64,
            ScalarFormat::Binary16 => half::f16::from_bits(self.bits as u16).to_f64(),
        }
    }

    pub fn to_bits(&self) -> u32 {
        self.bits
    }
}

fn round_to_format(v: f64, format: ScalarFormat) -> u32 {
    match format {
        ScalarFormat::Binary32 => (v as f32).to_bits(),
        ScalarFormat::Binary16 => half::f16::from_f64(v).to_bits() as u32,
    }
}

fn sign_mask(format: ScalarFormat) -> u32 {
    match format {
        ScalarFormat::Binary32 => 0x8000_0000,
        ScalarFormat::Binary16 => 0x8000,
    }
}

/// Embeds the indicator in the sign bit: stores `y - C ≥ 0` with the sign
/// bit set to `s`. `C` is the activation's minimum, so the magnitude is
/// nonnegative for every valid output; `y = C` with `s = 1` produces a
/// negative zero, which still decodes correctly.
///
/// The `(y - C) + C` round trip is lossy up to 1 ulp of the target format;
/// the indicator itself is always exact.
pub fn encode_sign_bit(y: f64, s: bool, c: f64, format: ScalarFormat) -> Result<EncodedScalar> {
    if y < c - 1e-9 {
        return Err(Error::Domain(format!(
            "y = {y} below the activation minimum {c}"
        )));
    }
    let magnitude = (y - c).max(0.0);
    let mut bits = round_to_format(magnitude, format);
    if s {
        bits |= sign_mask(format);
    }
    Ok(EncodedScalar {
        bits,
        format,
        carries: IndicatorCarrier::SignBit,
    })
}

/// Recovers `(y, s)` from a sign-bit encoding: `y = |v| + C`, `s` from the
/// sign bit.
pub fn decode_sign_bit(e: EncodedScalar, c: f64) -> (f64, bool) {
    let s = e.bits & sign_mask(e.format) != 0;
    let magnitude = e.value().abs();
    (magnitude + c, s)
}

/// Embeds the indicator in the least significant mantissa bit of `y`'s
/// representation. Perturbs the value by at most 1 ulp; the sign and
/// exponent fields are untouched.
pub fn encode_lsb(y: f64, s: bool, format: ScalarFormat) -> EncodedScalar {
    let mut bits = round_to_format(y, format);
    if s {
        bits |= 1;
    } else {
        bits &= !1;
    }
    EncodedScalar {
        bits,
        format,
        carries: IndicatorCarrier::Lsb,
    }
}

/// Returns the encoded value unchanged together with the mantissa bit.
pub fn decode_lsb(e: EncodedScalar) -> (f64, bool) {
    (e.value(), e.bits & 1 == 1)
}

/// One ulp of `v` in the given format, used by the perturbation bounds in
/// tests.
pub fn ulp(v: f64, format: ScalarFormat) -> f64 {
    match format {
        ScalarFormat::Binary32 => {
            let v = v.abs() as f32;
            let next = f32::from_bits(v.to_bits() + 1);
            (next - v) as f64
        }
        ScalarFormat::Binary16 => {
            let v = half::f16::from_f64(v.abs());
            let next = half::f16::from_bits(v.to_bits() + 1);
            (next.to_f64() - v.to_f64()).abs()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_forced_examples() {
        let p = PackedBits::pack(&[true, false, true, true]);
        assert_eq!(p.as_bytes(), &[13]);
        assert_eq!(p.len(), 4);

        let empty = PackedBits::pack(&[]);
        assert_eq!(empty.storage_bytes(), 0);
        assert_eq!(empty.len(), 0);

        let nine = PackedBits::pack(&[true; 9]);
        assert_eq!(nine.as_bytes(), &[255, 1]);
    }

    #[test]
    fn unpack_forced_examples() {
        let p = PackedBits::pack(&[true, false, true, true]);
        assert_eq!(p.unpack(4).unwrap(), vec![true, false, true, true]);
        let zeros = PackedBits::pack(&[false; 8]);
        assert_eq!(zeros.as_bytes(), &[0]);
        assert_eq!(zeros.unpack(8).unwrap(), vec![false; 8]);
        assert!(p.unpack(5).is_err());
    }

    #[test]
    fn serialized_layout_is_pinned() {
        let p = PackedBits::pack(&[true, false, true, true]);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], &4u64.to_le_bytes());
        assert_eq!(&bytes[8..], &[13]);
        assert_eq!(PackedBits::from_bytes(&bytes).unwrap(), p);
        // corrupt padding bits must be rejected
        let mut bad = bytes;
        bad[8] |= 0xF0;
        assert!(PackedBits::from_bytes(&bad).is_err());
    }

    #[test]
    fn sign_bit_negative_zero_at_the_minimum() {
        let c = -0.16997;
        let e = encode_sign_bit(c, true, c, ScalarFormat::Binary32).unwrap();
        assert_eq!(e.to_bits(), 0x8000_0000); // -0.0
        let (y, s) = decode_sign_bit(e, c);
        assert!(s);
        assert_eq!(y, c);
    }

    #[test]
    fn sign_bit_zero_input_example() {
        let c = -0.16997246666667;
        let e = encode_sign_bit(0.0, false, c, ScalarFormat::Binary32).unwrap();
        assert!(e.to_bits() & 0x8000_0000 == 0);
        assert!((e.value() - 0.16997246666667).abs() < 1e-7);
        let (y, s) = decode_sign_bit(e, c);
        assert!(!s);
        assert!(y.abs() <= ulp(0.17, ScalarFormat::Binary32));
    }

    #[test]
    fn sign_bit_rejects_below_minimum() {
        assert!(encode_sign_bit(-0.3, false, -0.17, ScalarFormat::Binary32).is_err());
    }

    #[test]
    fn lsb_examples() {
        // 1.0f32 already has a zero mantissa LSB
        let e = encode_lsb(1.0, false, ScalarFormat::Binary32);
        assert_eq!(e.value(), 1.0);
        // setting it moves to the next float up
        let e = encode_lsb(1.0, true, ScalarFormat::Binary32);
        assert_eq!(e.value() as f32, f32::from_bits(1.0f32.to_bits() + 1));
        let (v, s) = decode_lsb(e);
        assert!(s);
        assert!((v - 1.0).abs() <= ulp(1.0, ScalarFormat::Binary32));
    }

    proptest! {
        #[test]
        fn pack_round_trips(bits in proptest::collection::vec(any::<bool>(), 0..1025)) {
            let packed = PackedBits::pack(&bits);
            prop_assert_eq!(packed.storage_bytes(), bits.len().div_ceil(8));
            prop_assert_eq!(packed.unpack(bits.len()).unwrap(), bits.clone());
            // direct per-bit formula agrees
            for (i, &b) in bits.iter().enumerate() {
                prop_assert_eq!((packed.as_bytes()[i / 8] >> (i % 8)) & 1 == 1, b);
            }
            let reparsed = PackedBits::from_bytes(&packed.to_bytes()).unwrap();
            prop_assert_eq!(reparsed, packed);
        }

        #[test]
        fn sign_bit_recovers_indicator_and_value(
            y in -0.16f64..100.0,
            s in any::<bool>(),
        ) {
            let c = -0.16997246666667;
            let e = encode_sign_bit(y, s, c, ScalarFormat::Binary32).unwrap();
            let (decoded, s2) = decode_sign_bit(e, c);
            prop_assert_eq!(s2, s);
            let tol = ulp(y.abs().max(y - c), ScalarFormat::Binary32);
            prop_assert!((decoded - y).abs() <= tol, "y={y} decoded={decoded}");
        }

        #[test]
        fn lsb_perturbs_at_most_one_ulp(
            y in prop_oneof![(-100.0f64..100.0), (-1e-3f64..1e-3)],
            s in any::<bool>(),
        ) {
            for format in [ScalarFormat::Binary32, ScalarFormat::Binary16] {
                let e = encode_lsb(y, s, format);
                let (v, s2) = decode_lsb(e);
                prop_assert_eq!(s2, s);
                let stored = match format {
                    ScalarFormat::Binary32 => (y as f32) as f64,
                    ScalarFormat::Binary16 => half::f16::from_f64(y).to_f64(),
                };
                prop_assert!((v - stored).abs() <= ulp(stored, format));
                // sign and exponent untouched
                prop_assert_eq!(v.is_sign_negative(), stored.is_sign_negative());
            }
        }
    }
}
