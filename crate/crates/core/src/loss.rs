//! The three-term clustering objective.
//!
//! Assignment matrices are batch-by-k tensors whose rows live on the
//! probability simplex (softmax outputs), or in (0,1]^k after the corner
//! transform. The total loss is the sum of
//!
//!   l1: averaged pairwise Cauchy-Schwarz ratios between soft cluster
//!       densities estimated through the hidden-representation kernel,
//!   l2: the strictly-upper-triangular mass of A A^T, normalized by the
//!       number of row pairs (keeps the term batch-size invariant and on
//!       the same scale as l1 and l3),
//!   l3: the l1 form evaluated on simplex-corner closeness scores instead
//!       of raw assignments.
//!
//! All three terms are differentiable end to end; a small epsilon inside
//! each denominator square root guards empty soft clusters, which occur
//! in early training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::{cast, dbl, Scalar};

/// Guard added inside each denominator square root.
pub const DENOM_EPSILON: f64 = 1e-9;

/// Which loss terms are active; the ablation grid toggles these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFlags {
    pub l1: bool,
    pub l2: bool,
    pub l3: bool,
}

impl TermFlags {
    pub fn all() -> Self {
        TermFlags { l1: true, l2: true, l3: true }
    }

    pub fn none_enabled(&self) -> bool {
        !(self.l1 || self.l2 || self.l3)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.l1 {
            parts.push("l1");
        }
        if self.l2 {
            parts.push("l2");
        }
        if self.l3 {
            parts.push("l3");
        }
        parts.join("+")
    }

    /// Parse labels like "l1", "l2+l3", "l1,l2,l3".
    pub fn parse(s: &str) -> Result<Self> {
        let mut flags = TermFlags { l1: false, l2: false, l3: false };
        for part in s.split(['+', ',']) {
            match part.trim() {
                "l1" => flags.l1 = true,
                "l2" => flags.l2 = true,
                "l3" => flags.l3 = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown loss term '{}' (expected l1, l2, l3)",
                        other
                    )))
                }
            }
        }
        if flags.none_enabled() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(flags)
    }
}

impl Default for TermFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl std::fmt::Display for TermFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// The three term values and their sum, widened to f64 for logging.
/// Disabled terms report exact zeros.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn nan() -> Self {
        LossBreakdown { l1: f64::NAN, l2: f64::NAN, l3: f64::NAN, total: f64::NAN }
    }
}

/// Graph nodes for the enabled terms plus their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l1: Option<NodeId>,
    pub l2: Option<NodeId>,
    pub l3: Option<NodeId>,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let read = |n: Option<NodeId>| n.map(|id| dbl(tape.value(id).scalar_value())).unwrap_or(0.0);
        let l1 = read(self.l1);
        let l2 = read(self.l2);
        let l3 = read(self.l3);
        LossBreakdown { l1, l2, l3, total: l1 + l2 + l3 }
    }
}

/// Averaged pairwise Cauchy-Schwarz ratio between cluster densities:
/// (1/k) sum_{i<j} (a_i^T K a_j) / sqrt(a_i^T K a_i * a_j^T K a_j + eps),
/// where a_i are the columns of the assignment matrix. Each ratio lies in
/// [0,1] for a positive semidefinite K.
pub fn cs_term<T: Scalar>(tape: &mut Tape<T>, kernel: NodeId, assign: NodeId) -> NodeId {
    let m = tape.value(kernel).rows();
    let (am, k) = (tape.value(assign).rows(), tape.value(assign).cols());
    assert_eq!(m, am, "cs_term: kernel batch {} vs assignment batch {}", m, am);
    assert!(k >= 2, "cs_term: need at least 2 clusters, got {}", k);

    let ka = tape.matmul(kernel, assign); // [m,k]
    let at = tape.transpose(assign); // [k,m]
    let gram = tape.matmul(at, ka); // [k,k], entry (i,j) = a_i^T K a_j
    let diag = tape.diag_part(gram); // [k]
    let denom_sq = tape.outer(diag, diag); // [k,k], d_i d_j
    let guarded = tape.add_scalar(denom_sq, cast::<T>(DENOM_EPSILON));
    let denom = tape.sqrt(guarded);
    let ratios = tape.div(gram, denom);
    let upper = tape.triu_sum(ratios);
    tape.mul_scalar(upper, T::one() / cast::<T>(k as f64))
}

/// Strictly-upper-triangular mass of A A^T divided by the pair count
/// m(m-1)/2. Zero iff assignment rows are pairwise orthogonal.
pub fn triu_term<T: Scalar>(tape: &mut Tape<T>, assign: NodeId) -> NodeId {
    let m = tape.value(assign).rows();
    assert!(m >= 2, "triu_term: need a batch of at least 2, got {}", m);
    let at = tape.transpose(assign);
    let gram = tape.matmul(assign, at); // [m,m]
    let upper = tape.triu_sum(gram);
    let pairs = (m * (m - 1) / 2) as f64;
    tape.mul_scalar(upper, T::one() / cast::<T>(pairs))
}

/// Simplex-corner closeness: entry (q,i) = exp(-||a_q - e_i||^2), computed
/// via ||a_q - e_i||^2 = ||a_q||^2 + 1 - 2 a_{q,i}. Values are in (0,1], and
/// reach 1 only when row q sits exactly on corner i.
pub fn corner_transform<T: Scalar>(tape: &mut Tape<T>, assign: NodeId) -> NodeId {
    let sq = tape.mul(assign, assign);
    let row_norms = tape.row_sums(sq); // [m], ||a_q||^2
    let shifted = tape.add_scalar(row_norms, T::one());
    let scaled = tape.mul_scalar(assign, cast::<T>(-2.0));
    let dist_sq = tape.add_col(scaled, shifted); // [m,k]
    let negated = tape.mul_scalar(dist_sq, -T::one());
    tape.exp(negated)
}

/// Assemble the full objective over a kernel node and an assignment node.
/// Disabled terms are absent from the graph and report exact zeros in the
/// breakdown. Errors if every term is disabled.
pub fn clustering_loss<T: Scalar>(
    tape: &mut Tape<T>,
    kernel: NodeId,
    assign: NodeId,
    flags: TermFlags,
) -> Result<LossNodes> {
    if flags.none_enabled() {
        return Err(Error::Config("loss requires at least one enabled term".into()));
    }
    let l1 = flags.l1.then(|| cs_term(tape, kernel, assign));
    let l2 = flags.l2.then(|| triu_term(tape, assign));
    let l3 = flags.l3.then(|| {
        let corners = corner_transform(tape, assign);
        cs_term(tape, kernel, corners)
    });
    let mut total: Option<NodeId> = None;
    for term in [l1, l2, l3].into_iter().flatten() {
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    Ok(LossNodes { l1, l2, l3, total: total.expect("at least one term") })
}
