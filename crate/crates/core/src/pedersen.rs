//! Pedersen commitments `c = g^x h^r` and their two homomorphic identities:
//!
//! ```text
//! Commit(x, r) * Commit(y, s) = Commit(x + y, r + s)
//! Commit(x, r) ^ t            = Commit(x t, r t)
//! ```
//!
//! Inputs are scalars already reduced mod `q`; conversion from raw integers
//! happens in the metering and backend layers.

use std::fmt;

use crate::group::{GroupParams, PrimeOrderGroup};

/// A commitment, i.e. a group element.
pub struct Commitment<G: PrimeOrderGroup>(pub G::Element);

impl<G: PrimeOrderGroup> Clone for Commitment<G> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<G: PrimeOrderGroup> Copy for Commitment<G> {}

impl<G: PrimeOrderGroup> PartialEq for Commitment<G> {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl<G: PrimeOrderGroup> Eq for Commitment<G> {}

impl<G: PrimeOrderGroup> fmt::Debug for Commitment<G> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Commitment({})", hex::encode(self.to_bytes()))
    }
}

impl<G: PrimeOrderGroup> Commitment<G> {
    pub fn element(&self) -> &G::Element {
        &self.0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        G::element_to_bytes(&self.0)
    }

    pub fn identity() -> Self {
        Self(G::identity())
    }
}

/// The values a commitment opens to.
pub struct Opening<G: PrimeOrderGroup> {
    pub x: G::Scalar,
    pub r: G::Scalar,
}

impl<G: PrimeOrderGroup> Clone for Opening<G> {
    fn clone(&self) -> Self {
        Self { x: self.x, r: self.r }
    }
}

impl<G: PrimeOrderGroup> fmt::Debug for Opening<G> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Opening").field("x", &self.x).field("r", &self.r).finish()
    }
}

pub fn commit<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    x: &G::Scalar,
    r: &G::Scalar,
) -> Commitment<G> {
    Commitment(G::mul(&params.exp_g(x), &params.exp_h(r)))
}

pub fn open<G: PrimeOrderGroup>(
    params: &GroupParams<G>,
    c: &Commitment<G>,
    x: &G::Scalar,
    r: &G::Scalar,
) -> bool {
    commit(params, x, r) == *c
}

/// Product of two commitments; commits to the sum of the openings.
pub fn hom_combine<G: PrimeOrderGroup>(a: &Commitment<G>, b: &Commitment<G>) -> Commitment<G> {
    Commitment(G::mul(&a.0, &b.0))
}

/// Commitment raised to `t`; commits to the opening scaled by `t`.
pub fn hom_scale<G: PrimeOrderGroup>(a: &Commitment<G>, t: &G::Scalar) -> Commitment<G> {
    Commitment(G::exp(&a.0, t))
}

/// `prod_k c_k ^ t_k`, folded left to right from the identity.
///
/// Panics if the slices differ in length.
pub fn weighted_product<G: PrimeOrderGroup>(
    commitments: &[Commitment<G>],
    weights: &[G::Scalar],
) -> Commitment<G> {
    assert_eq!(commitments.len(), weights.len(), "one weight per commitment");
    commitments
        .iter()
        .zip(weights)
        .fold(Commitment::identity(), |acc, (c, t)| hom_combine(&acc, &hom_scale(c, t)))
}
