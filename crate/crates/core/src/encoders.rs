//! Hyperedge scorers: map member-node embeddings to a positive intensity.
//!
//! Three encoders share the same output convention: a strictly positive
//! score together with the per-node dynamic embeddings that the interaction
//! update stage consumes.
//!
//! * homogeneous self-attention over the member set (peers only, no self
//!   term, single head, no sqrt(d) scaling),
//! * bipartite cross-attention where each side attends over the opposite
//!   side with its own parameters,
//! * the pairwise dot-product scorer used by the clique-decomposition
//!   baselines, wrapped in softplus so it is a valid intensity.

use thiserror::Error;

use crate::tensor::{ParamId, ParamSet, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("self-attention needs at least 2 member nodes, got {0}")]
    TooFewNodes(usize),
    #[error("bipartite encoder needs both sides nonempty (left {left}, right {right})")]
    EmptySide { left: usize, right: usize },
    #[error("embedding has dimension {got}, expected {expect}")]
    DimensionMismatch { expect: usize, got: usize },
    #[error("clique decomposition needs at least 2 nodes, got {0}")]
    TooSmallForPairs(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Score and per-node dynamic embeddings of one candidate hyperedge.
/// Homogeneous encoders fill only `left_dynamic`.
pub struct EncodeResult {
    pub score: Tensor,
    pub left_dynamic: Vec<Tensor>,
    pub right_dynamic: Vec<Tensor>,
}

/// Attention, static-projection, and output parameters of the homogeneous
/// scorer. `w_o` is d x 1 and `b_o` a scalar.
#[derive(Clone, Copy)]
pub struct HomogeneousEncoderParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_s: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl HomogeneousEncoderParams {
    /// Register freshly initialized encoder parameters under `prefix`.
    pub fn define<R: rand::Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let mat = |name: &str, params: &mut ParamSet, rng: &mut R| {
            params.define(
                &format!("{prefix}{name}"),
                Tensor::uniform(vec![dim, dim], bound, rng),
            )
        };
        Ok(HomogeneousEncoderParams {
            w_q: mat("W_Q", params, rng)?,
            w_k: mat("W_K", params, rng)?,
            w_v: mat("W_V", params, rng)?,
            w_s: mat("W_s", params, rng)?,
            w_o: params.define(
                &format!("{prefix}W_o"),
                Tensor::uniform(vec![dim, 1], bound, rng),
            )?,
            b_o: params.define(&format!("{prefix}b_o"), Tensor::scalar(0.0))?,
        })
    }
}

/// Per-side parameters of the bipartite scorer; the two sides share nothing.
#[derive(Clone, Copy)]
pub struct BipartiteEncoderParams {
    pub left: HomogeneousEncoderParams,
    pub right: HomogeneousEncoderParams,
}

impl BipartiteEncoderParams {
    pub fn define<R: rand::Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BipartiteEncoderParams {
            left: HomogeneousEncoderParams::define(params, &format!("{prefix}left."), dim, rng)?,
            right: HomogeneousEncoderParams::define(params, &format!("{prefix}right."), dim, rng)?,
        })
    }
}

fn check_dims(embeddings: &[Tensor], dim: usize) -> Result<()> {
    for e in embeddings {
        if e.shape() != [dim] {
            return Err(EncoderError::DimensionMismatch {
                expect: dim,
                got: e.len(),
            });
        }
    }
    Ok(())
}

/// Self-attention scorer for a homogeneous hyperedge of k >= 2 nodes.
///
/// For each member i: attention logits against every peer j != i, a softmax
/// over the peers, a tanh-squashed value sum as the dynamic embedding, a
/// static projection of the member's own embedding, and a linear read-out of
/// the squared difference. The score averages softplus read-outs over the
/// members.
pub fn encode_homogeneous(
    tape: &mut Tape,
    params: &ParamSet,
    enc: &HomogeneousEncoderParams,
    embeddings: &[Tensor],
) -> Result<EncodeResult> {
    let k = embeddings.len();
    if k < 2 {
        return Err(EncoderError::TooFewNodes(k));
    }
    let dim = params.value(enc.w_q).shape()[0];
    check_dims(embeddings, dim)?;

    let w_q = tape.param(params, enc.w_q);
    let w_k = tape.param(params, enc.w_k);
    let w_v = tape.param(params, enc.w_v);
    let w_s = tape.param(params, enc.w_s);
    let w_o = tape.param(params, enc.w_o);
    let b_o = tape.param(params, enc.b_o);

    // W^T v realized as the vector-matrix product v W.
    let queries: Vec<Tensor> = embeddings
        .iter()
        .map(|v| tape.matmul(v, &w_q))
        .collect::<std::result::Result<_, _>>()?;
    let keys: Vec<Tensor> = embeddings
        .iter()
        .map(|v| tape.matmul(v, &w_k))
        .collect::<std::result::Result<_, _>>()?;
    let values: Vec<Tensor> = embeddings
        .iter()
        .map(|v| tape.matmul(v, &w_v))
        .collect::<std::result::Result<_, _>>()?;

    let mut dynamic = Vec::with_capacity(k);
    let mut readouts = Vec::with_capacity(k);
    for i in 0..k {
        let mut logits = Vec::with_capacity(k - 1);
        let mut peer_values = Vec::with_capacity(k - 1);
        for j in 0..k {
            if j == i {
                continue;
            }
            logits.push(tape.dot(&queries[i], &keys[j])?);
            peer_values.push(&values[j]);
        }
        let logit_refs: Vec<&Tensor> = logits.iter().collect();
        let logit_vec = tape.concat(&logit_refs)?;
        let weights = tape.softmax(&logit_vec)?;
        let stacked = tape.stack_rows(&peer_values)?;
        let mixed = tape.matmul(&weights, &stacked)?;
        let d_i = tape.tanh(&mixed)?;

        let s_i = tape.matmul(&w_s, &embeddings[i])?;
        let diff = tape.sub(&d_i, &s_i)?;
        let sq = tape.square(&diff)?;
        let lin = tape.matmul(&sq, &w_o)?;
        let o_i = tape.add(&lin, &b_o)?;
        readouts.push(tape.softplus(&o_i)?);
        dynamic.push(d_i);
    }
    let readout_refs: Vec<&Tensor> = readouts.iter().collect();
    let score = tape.mean(&readout_refs)?;
    Ok(EncodeResult {
        score,
        left_dynamic: dynamic,
        right_dynamic: Vec::new(),
    })
}

/// Cross-attention scorer for a bipartite hyperedge: left nodes attend over
/// the right side and vice versa, each side with its own parameters. The
/// score sums the two per-side softplus averages.
pub fn encode_bipartite(
    tape: &mut Tape,
    params: &ParamSet,
    enc: &BipartiteEncoderParams,
    left: &[Tensor],
    right: &[Tensor],
) -> Result<EncodeResult> {
    if left.is_empty() || right.is_empty() {
        return Err(EncoderError::EmptySide {
            left: left.len(),
            right: right.len(),
        });
    }
    let dim = params.value(enc.left.w_q).shape()[0];
    check_dims(left, dim)?;
    check_dims(right, dim)?;

    let side = |tape: &mut Tape,
                    own: &HomogeneousEncoderParams,
                    other: &HomogeneousEncoderParams,
                    members: &[Tensor],
                    opposite: &[Tensor]|
     -> Result<(Vec<Tensor>, Tensor)> {
        let w_q = tape.param(params, own.w_q);
        let w_k_opp = tape.param(params, other.w_k);
        let w_v_opp = tape.param(params, other.w_v);
        let w_s = tape.param(params, own.w_s);
        let w_o = tape.param(params, own.w_o);
        let b_o = tape.param(params, own.b_o);

        let keys: Vec<Tensor> = opposite
            .iter()
            .map(|v| tape.matmul(v, &w_k_opp))
            .collect::<std::result::Result<_, _>>()?;
        let values: Vec<Tensor> = opposite
            .iter()
            .map(|v| tape.matmul(v, &w_v_opp))
            .collect::<std::result::Result<_, _>>()?;
        let value_refs: Vec<&Tensor> = values.iter().collect();
        let stacked = tape.stack_rows(&value_refs)?;

        let mut dynamic = Vec::with_capacity(members.len());
        let mut readouts = Vec::with_capacity(members.len());
        for v in members {
            let q = tape.matmul(v, &w_q)?;
            let logits: Vec<Tensor> = keys
                .iter()
                .map(|k| tape.dot(&q, k))
                .collect::<std::result::Result<_, _>>()?;
            let logit_refs: Vec<&Tensor> = logits.iter().collect();
            let logit_vec = tape.concat(&logit_refs)?;
            let weights = tape.softmax(&logit_vec)?;
            let mixed = tape.matmul(&weights, &stacked)?;
            let d = tape.tanh(&mixed)?;

            let s = tape.matmul(&w_s, v)?;
            let diff = tape.sub(&d, &s)?;
            let sq = tape.square(&diff)?;
            let lin = tape.matmul(&sq, &w_o)?;
            let o = tape.add(&lin, &b_o)?;
            readouts.push(tape.softplus(&o)?);
            dynamic.push(d);
        }
        let readout_refs: Vec<&Tensor> = readouts.iter().collect();
        let avg = tape.mean(&readout_refs)?;
        Ok((dynamic, avg))
    };

    // Left queries attend over right keys/values (the right side's W_K, W_V),
    // and symmetrically for the right side.
    let (left_dynamic, left_avg) = side(tape, &enc.left, &enc.right, left, right)?;
    let (right_dynamic, right_avg) = side(tape, &enc.right, &enc.left, right, left)?;
    let score = tape.add(&left_avg, &right_avg)?;
    Ok(EncodeResult {
        score,
        left_dynamic,
        right_dynamic,
    })
}

/// Pairwise-edge intensity softplus(v1 . v2). The raw dot product can be
/// negative, which is not a valid intensity, hence the softplus wrapper.
pub fn encode_pairwise(tape: &mut Tape, v1: &Tensor, v2: &Tensor) -> Result<Tensor> {
    if v1.shape() != v2.shape() {
        return Err(EncoderError::DimensionMismatch {
            expect: v1.len(),
            got: v2.len(),
        });
    }
    let d = tape.dot(v1, v2)?;
    Ok(tape.softplus(&d)?)
}

/// All unordered node pairs of a hyperedge, canonically ordered.
pub fn clique_decompose(nodes: &[usize]) -> Result<Vec<(usize, usize)>> {
    if nodes.len() < 2 {
        return Err(EncoderError::TooSmallForPairs(nodes.len()));
    }
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    let mut pairs = Vec::with_capacity(sorted.len() * (sorted.len() - 1) / 2);
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            pairs.push((sorted[i], sorted[j]));
        }
    }
    Ok(pairs)
}

/// All left-right node pairs of a bipartite hyperedge.
pub fn bipartite_decompose(left: &[usize], right: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(left.len() * right.len());
    for &l in left {
        for &r in right {
            pairs.push((l, r));
        }
    }
    pairs
}
