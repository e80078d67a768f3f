//! Ristretto255 backend, a prime-order group built on Curve25519.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoBasepointTable, RistrettoPoint};
use curve25519_dalek::traits::Identity;
use curve25519_dalek::Scalar;
use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use sha2::Sha512;

use super::{GroupError, GroupId, PrimeOrderGroup};

/// 2^252 + 27742317777372353535851937790883648493
const ORDER_DECIMAL: &str =
    "7237005577332262213973186563042994240857116359379907606001950938285454250989";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ristretto255;

impl PrimeOrderGroup for Ristretto255 {
    type Scalar = Scalar;
    type Element = RistrettoPoint;
    type FixedBase = RistrettoBasepointTable;

    const ID: GroupId = GroupId::Ristretto255;
    const ELEMENT_BYTES: usize = 32;
    const SCALAR_BYTES: usize = 32;

    fn order() -> BigUint {
        ORDER_DECIMAL.parse().expect("valid constant")
    }

    fn generator() -> RistrettoPoint {
        RISTRETTO_BASEPOINT_POINT
    }

    fn identity() -> RistrettoPoint {
        RistrettoPoint::identity()
    }

    fn hash_to_element(input: &[u8]) -> RistrettoPoint {
        RistrettoPoint::hash_from_bytes::<Sha512>(input)
    }

    fn mul(a: &RistrettoPoint, b: &RistrettoPoint) -> RistrettoPoint {
        a + b
    }

    fn exp(a: &RistrettoPoint, k: &Scalar) -> RistrettoPoint {
        a * k
    }

    fn invert(a: &RistrettoPoint) -> RistrettoPoint {
        -a
    }

    fn precompute(base: &RistrettoPoint) -> RistrettoBasepointTable {
        RistrettoBasepointTable::create(base)
    }

    fn exp_fixed(base: &RistrettoBasepointTable, k: &Scalar) -> RistrettoPoint {
        base * k
    }

    fn scalar_from_u64(v: u64) -> Scalar {
        Scalar::from(v)
    }

    fn scalar_add(a: &Scalar, b: &Scalar) -> Scalar {
        a + b
    }

    fn scalar_mul(a: &Scalar, b: &Scalar) -> Scalar {
        a * b
    }

    fn scalar_neg(a: &Scalar) -> Scalar {
        -a
    }

    fn scalar_invert(a: &Scalar) -> Option<Scalar> {
        (*a != Scalar::ZERO).then(|| a.invert())
    }

    fn scalar_random<R: RngCore + CryptoRng>(rng: &mut R) -> Scalar {
        Scalar::random(rng)
    }

    fn scalar_to_bytes(s: &Scalar) -> Vec<u8> {
        let mut out = s.to_bytes().to_vec();
        out.reverse();
        out
    }

    fn scalar_from_bytes(bytes: &[u8]) -> Result<Scalar, GroupError> {
        let mut le: [u8; 32] = bytes.try_into().map_err(|_| GroupError::MalformedScalar)?;
        le.reverse();
        Option::from(Scalar::from_canonical_bytes(le)).ok_or(GroupError::MalformedScalar)
    }

    fn element_to_bytes(e: &RistrettoPoint) -> Vec<u8> {
        e.compress().to_bytes().to_vec()
    }

    fn element_from_bytes(bytes: &[u8]) -> Result<RistrettoPoint, GroupError> {
        let compressed =
            CompressedRistretto::from_slice(bytes).map_err(|_| GroupError::MalformedElement)?;
        compressed.decompress().ok_or(GroupError::NotInSubgroup)
    }
}
