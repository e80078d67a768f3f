//! The order-11 subgroup of `(Z/23Z)*`, generated by 4.
//!
//! The subgroup is exactly the set of quadratic residues mod 23, so squaring
//! any unit lands in it. Elements and scalars encode as a single byte.

use num_bigint::BigUint;
use rand::{CryptoRng, Rng, RngCore};
use sha2::{Digest, Sha256};

use super::{GroupError, GroupId, PrimeOrderGroup};

const MODULUS: u64 = 23;
const ORDER: u64 = 11;
const GENERATOR: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TestGroup23;

/// Residue mod 23 inside the order-11 subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TestElement(u64);

impl TestElement {
    /// Returns `None` when `v` is not a member of the subgroup.
    pub fn new(v: u64) -> Option<Self> {
        (v > 0 && v < MODULUS && pow_mod(v, ORDER) == 1).then_some(Self(v))
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

/// Exponent mod 11.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TestScalar(u64);

impl TestScalar {
    pub fn new(v: u64) -> Self {
        Self(v % ORDER)
    }

    pub fn value(&self) -> u64 {
        self.0
    }
}

fn pow_mod(base: u64, mut exp: u64) -> u64 {
    let mut acc = 1;
    let mut b = base % MODULUS;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % MODULUS;
        }
        b = b * b % MODULUS;
        exp >>= 1;
    }
    acc
}

impl PrimeOrderGroup for TestGroup23 {
    type Scalar = TestScalar;
    type Element = TestElement;
    type FixedBase = TestElement;

    const ID: GroupId = GroupId::TestGroup23;
    const ELEMENT_BYTES: usize = 1;
    const SCALAR_BYTES: usize = 1;

    fn order() -> BigUint {
        BigUint::from(ORDER)
    }

    fn generator() -> TestElement {
        TestElement(GENERATOR)
    }

    fn identity() -> TestElement {
        TestElement(1)
    }

    fn hash_to_element(input: &[u8]) -> TestElement {
        // Try-and-increment: square a hashed unit, skip the identity.
        for counter in 0u32.. {
            let digest = Sha256::new()
                .chain_update(input)
                .chain_update(counter.to_be_bytes())
                .finalize();
            let x = BigUint::from_bytes_be(&digest) % MODULUS;
            let x = x.to_u64_digits().first().copied().unwrap_or(0);
            if x == 0 {
                continue;
            }
            let y = x * x % MODULUS;
            if y != 1 {
                return TestElement(y);
            }
        }
        unreachable!("counter space exhausted")
    }

    fn mul(a: &TestElement, b: &TestElement) -> TestElement {
        TestElement(a.0 * b.0 % MODULUS)
    }

    fn exp(a: &TestElement, k: &TestScalar) -> TestElement {
        TestElement(pow_mod(a.0, k.0))
    }

    fn invert(a: &TestElement) -> TestElement {
        // a^(q-1) = a^-1 in a group of order q.
        TestElement(pow_mod(a.0, ORDER - 1))
    }

    fn precompute(base: &TestElement) -> TestElement {
        *base
    }

    fn exp_fixed(base: &TestElement, k: &TestScalar) -> TestElement {
        Self::exp(base, k)
    }

    fn scalar_from_u64(v: u64) -> TestScalar {
        TestScalar::new(v)
    }

    fn scalar_add(a: &TestScalar, b: &TestScalar) -> TestScalar {
        TestScalar((a.0 + b.0) % ORDER)
    }

    fn scalar_mul(a: &TestScalar, b: &TestScalar) -> TestScalar {
        TestScalar(a.0 * b.0 % ORDER)
    }

    fn scalar_neg(a: &TestScalar) -> TestScalar {
        TestScalar((ORDER - a.0) % ORDER)
    }

    fn scalar_invert(a: &TestScalar) -> Option<TestScalar> {
        if a.0 == 0 {
            return None;
        }
        // Fermat: a^(q-2) mod q.
        let mut acc = 1;
        for _ in 0..ORDER - 2 {
            acc = acc * a.0 % ORDER;
        }
        Some(TestScalar(acc))
    }

    fn scalar_random<R: RngCore + CryptoRng>(rng: &mut R) -> TestScalar {
        TestScalar(rng.gen_range(0..ORDER))
    }

    fn scalar_to_bytes(s: &TestScalar) -> Vec<u8> {
        vec![s.0 as u8]
    }

    fn scalar_from_bytes(bytes: &[u8]) -> Result<TestScalar, GroupError> {
        match bytes {
            [b] if u64::from(*b) < ORDER => Ok(TestScalar(u64::from(*b))),
            _ => Err(GroupError::MalformedScalar),
        }
    }

    fn element_to_bytes(e: &TestElement) -> Vec<u8> {
        vec![e.0 as u8]
    }

    fn element_from_bytes(bytes: &[u8]) -> Result<TestElement, GroupError> {
        match bytes {
            [b] => TestElement::new(u64::from(*b)).ok_or(GroupError::NotInSubgroup),
            _ => Err(GroupError::MalformedElement),
        }
    }
}
