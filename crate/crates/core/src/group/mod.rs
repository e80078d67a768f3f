//! Prime-order group abstraction used as the substrate for Pedersen commitments.
//!
//! Two backends implement [`PrimeOrderGroup`]:
//!
//! * [`Ristretto255`]: the production group, order ~2^252.
//! * [`TestGroup23`]: the order-11 subgroup of the integers mod 23. Every
//!   protocol value in this group can be checked by hand.
//!
//! Exponentiation is not constant time in the test group, and no effort is
//! made to harden either backend against side channels.

mod ristretto;
mod test23;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use thiserror::Error;

pub use ristretto::Ristretto255;
pub use test23::{TestElement, TestGroup23, TestScalar};

/// Domain separation tag used when deriving the second generator `h`.
pub const DEFAULT_DOMAIN_TAG: &[u8] = b"privbill/pedersen-generator-h/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("unknown group id `{0}`")]
    UnknownGroup(String),
    #[error("group id mismatch: expected {expected}, got {actual}")]
    GroupMismatch { expected: GroupId, actual: GroupId },
    #[error("malformed element encoding")]
    MalformedElement,
    #[error("encoding is not a member of the prime-order subgroup")]
    NotInSubgroup,
    #[error("malformed scalar encoding")]
    MalformedScalar,
    #[error("derived generator is degenerate (identity or equal to g)")]
    DegenerateGenerator,
}

/// Registry of supported named groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupId {
    Ristretto255,
    TestGroup23,
}

impl GroupId {
    pub const ALL: [GroupId; 2] = [GroupId::Ristretto255, GroupId::TestGroup23];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupId::Ristretto255 => "ristretto255",
            GroupId::TestGroup23 => "test23",
        }
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupId {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| GroupError::UnknownGroup(s.to_string()))
    }
}

/// A cyclic group of prime order `q` together with its scalar field.
///
/// Implementors are zero-sized markers; all operations are associated
/// functions so protocol code can be written once, generic over the group.
/// Scalars are always reduced mod `q`. Encodings are fixed length and
/// big-endian for scalars.
pub trait PrimeOrderGroup:
    Copy + Clone + fmt::Debug + PartialEq + Eq + Default + Send + Sync + 'static
{
    type Scalar: Copy + Clone + fmt::Debug + PartialEq + Eq + Send + Sync;
    type Element: Copy + Clone + fmt::Debug + PartialEq + Eq + Send + Sync;
    /// Precomputed data for repeated exponentiation of one fixed base.
    type FixedBase: Send + Sync;

    const ID: GroupId;
    const ELEMENT_BYTES: usize;
    const SCALAR_BYTES: usize;

    /// The group order `q`.
    fn order() -> BigUint;
    fn generator() -> Self::Element;
    fn identity() -> Self::Element;
    /// One-way map from arbitrary bytes onto the group.
    fn hash_to_element(input: &[u8]) -> Self::Element;

    fn mul(a: &Self::Element, b: &Self::Element) -> Self::Element;
    fn exp(a: &Self::Element, k: &Self::Scalar) -> Self::Element;
    fn invert(a: &Self::Element) -> Self::Element;
    fn precompute(base: &Self::Element) -> Self::FixedBase;
    fn exp_fixed(base: &Self::FixedBase, k: &Self::Scalar) -> Self::Element;

    fn scalar_from_u64(v: u64) -> Self::Scalar;
    fn scalar_add(a: &Self::Scalar, b: &Self::Scalar) -> Self::Scalar;
    fn scalar_mul(a: &Self::Scalar, b: &Self::Scalar) -> Self::Scalar;
    fn scalar_neg(a: &Self::Scalar) -> Self::Scalar;
    /// Multiplicative inverse, `None` for zero.
    fn scalar_invert(a: &Self::Scalar) -> Option<Self::Scalar>;
    /// Uniform sample from `[0, q)`.
    fn scalar_random<R: RngCore + CryptoRng>(rng: &mut R) -> Self::Scalar;

    fn scalar_to_bytes(s: &Self::Scalar) -> Vec<u8>;
    /// Accepts only canonical (fully reduced) encodings of exactly
    /// `SCALAR_BYTES` bytes.
    fn scalar_from_bytes(bytes: &[u8]) -> Result<Self::Scalar, GroupError>;
    fn element_to_bytes(e: &Self::Element) -> Vec<u8>;
    /// Rejects malformed, non-canonical and out-of-subgroup encodings.
    fn element_from_bytes(bytes: &[u8]) -> Result<Self::Element, GroupError>;

    fn scalar_zero() -> Self::Scalar {
        Self::scalar_from_u64(0)
    }

    fn scalar_one() -> Self::Scalar {
        Self::scalar_from_u64(1)
    }

    fn scalar_sub(a: &Self::Scalar, b: &Self::Scalar) -> Self::Scalar {
        Self::scalar_add(a, &Self::scalar_neg(b))
    }

    /// Reduces an arbitrary non-negative integer mod `q`.
    fn scalar_from_biguint(v: &BigUint) -> Self::Scalar {
        let reduced = (v % Self::order()).to_bytes_be();
        let mut buf = vec![0u8; Self::SCALAR_BYTES];
        buf[Self::SCALAR_BYTES - reduced.len()..].copy_from_slice(&reduced);
        Self::scalar_from_bytes(&buf).expect("reduced value is canonical")
    }

    fn scalar_to_biguint(s: &Self::Scalar) -> BigUint {
        BigUint::from_bytes_be(&Self::scalar_to_bytes(s))
    }

    fn element_random<R: RngCore + CryptoRng>(rng: &mut R) -> Self::Element {
        Self::exp(&Self::generator(), &Self::scalar_random(rng))
    }

    /// The group order as a `u64` when it is small enough to enumerate.
    fn small_order() -> Option<u64> {
        let q = Self::order();
        if q.bits() <= 16 {
            q.to_u64_digits().first().copied().or(Some(0))
        } else {
            None
        }
    }
}

/// Public commitment parameters: the group, generators `g`, `h` and the tag
/// `h` was derived from.
pub struct GroupParams<G: PrimeOrderGroup> {
    g: G::Element,
    h: G::Element,
    domain_tag: Vec<u8>,
    g_table: Arc<G::FixedBase>,
    h_table: Arc<G::FixedBase>,
}

impl<G: PrimeOrderGroup> Clone for GroupParams<G> {
    fn clone(&self) -> Self {
        Self {
            g: self.g,
            h: self.h,
            domain_tag: self.domain_tag.clone(),
            g_table: Arc::clone(&self.g_table),
            h_table: Arc::clone(&self.h_table),
        }
    }
}

impl<G: PrimeOrderGroup> fmt::Debug for GroupParams<G> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupParams")
            .field("group_id", &G::ID)
            .field("g", &hex::encode(G::element_to_bytes(&self.g)))
            .field("h", &hex::encode(G::element_to_bytes(&self.h)))
            .field("domain_tag", &String::from_utf8_lossy(&self.domain_tag))
            .finish()
    }
}

impl<G: PrimeOrderGroup> PartialEq for GroupParams<G> {
    fn eq(&self, other: &Self) -> bool {
        self.g == other.g && self.h == other.h && self.domain_tag == other.domain_tag
    }
}

impl<G: PrimeOrderGroup> GroupParams<G> {
    /// Derives `h = hash_to_element(encode(g) || domain_tag)`.
    pub fn derive(domain_tag: &[u8]) -> Result<Self, GroupError> {
        let g = G::generator();
        let mut input = G::element_to_bytes(&g);
        input.extend_from_slice(domain_tag);
        let h = G::hash_to_element(&input);
        if h == g || h == G::identity() {
            return Err(GroupError::DegenerateGenerator);
        }
        Ok(Self {
            g,
            h,
            domain_tag: domain_tag.to_vec(),
            g_table: Arc::new(G::precompute(&g)),
            h_table: Arc::new(G::precompute(&h)),
        })
    }

    /// Parameters derived with [`DEFAULT_DOMAIN_TAG`].
    pub fn standard() -> Self {
        Self::derive(DEFAULT_DOMAIN_TAG).expect("default tag yields valid generators")
    }

    pub fn group_id(&self) -> GroupId {
        G::ID
    }

    pub fn order(&self) -> BigUint {
        G::order()
    }

    pub fn g(&self) -> &G::Element {
        &self.g
    }

    pub fn h(&self) -> &G::Element {
        &self.h
    }

    pub fn domain_tag(&self) -> &[u8] {
        &self.domain_tag
    }

    pub fn exp_g(&self, k: &G::Scalar) -> G::Element {
        G::exp_fixed(&self.g_table, k)
    }

    pub fn exp_h(&self, k: &G::Scalar) -> G::Element {
        G::exp_fixed(&self.h_table, k)
    }
}

/// Checked constructor keyed by a runtime group id.
pub fn derive_params<G: PrimeOrderGroup>(
    group_id: GroupId,
    domain_tag: &[u8],
) -> Result<GroupParams<G>, GroupError> {
    if group_id != G::ID {
        return Err(GroupError::GroupMismatch {
            expected: G::ID,
            actual: group_id,
        });
    }
    GroupParams::derive(domain_tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_ids_round_trip() {
        for id in GroupId::ALL {
            assert_eq!(id.as_str().parse::<GroupId>().unwrap(), id);
        }
        assert_eq!(
            "p256".parse::<GroupId>(),
            Err(GroupError::UnknownGroup("p256".into()))
        );
    }

    #[test]
    fn derive_params_rejects_mismatched_id() {
        let err = derive_params::<TestGroup23>(GroupId::Ristretto255, DEFAULT_DOMAIN_TAG);
        assert!(matches!(err, Err(GroupError::GroupMismatch { .. })));
    }

    #[test]
    fn derivation_is_deterministic() {
        let a = GroupParams::<TestGroup23>::derive(b"some tag").unwrap();
        let b = GroupParams::<TestGroup23>::derive(b"some tag").unwrap();
        assert_eq!(a, b);
        let a = GroupParams::<Ristretto255>::derive(b"some tag").unwrap();
        let b = GroupParams::<Ristretto255>::derive(b"some tag").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn production_generators_are_distinct_and_nontrivial() {
        let p = GroupParams::<Ristretto255>::standard();
        assert_ne!(p.h(), p.g());
        assert_ne!(*p.h(), Ristretto255::identity());
        assert_ne!(*p.g(), Ristretto255::identity());
    }

    #[test]
    fn production_order_exceeds_price_headroom() {
        assert!(Ristretto255::order().bits() > 192);
        assert_eq!(Ristretto255::small_order(), None);
        assert_eq!(TestGroup23::small_order(), Some(11));
    }

    #[test]
    fn fixed_base_matches_plain_exponentiation() {
        let p = GroupParams::<Ristretto255>::standard();
        let k = Ristretto255::scalar_from_u64(123_456_789);
        assert_eq!(p.exp_g(&k), Ristretto255::exp(p.g(), &k));
        assert_eq!(p.exp_h(&k), Ristretto255::exp(p.h(), &k));
    }

    #[test]
    fn biguint_reduction_wraps_mod_order() {
        let q = TestGroup23::order();
        let v = &q * 3u32 + 7u32;
        assert_eq!(TestGroup23::scalar_from_biguint(&v), TestGroup23::scalar_from_u64(7));
        let q = Ristretto255::order();
        let v = &q + 5u32;
        assert_eq!(Ristretto255::scalar_from_biguint(&v), Ristretto255::scalar_from_u64(5));
    }
}
