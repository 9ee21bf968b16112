//! Feature-induced ordering: a learned scalar score per point decides the
//! order in which points are fed to the sequence model.

use alloc::vec::Vec;
use core::cmp::Ordering;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bindings, Init, Mlp, ParamStore};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Scores are kept at least this far inside `(-1, 1)`; `tanh` itself rounds
/// to `±1` for inputs beyond about 19.
pub const SCORE_MARGIN: f64 = 1e-15;

/// One score per point, each in `(-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingScores(pub Vec<f64>);

impl OrderingScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `tanh(MLP([cf, mf, h]))`, hidden width `C`, SiLU inside.
#[derive(Debug, Clone, PartialEq)]
pub struct FioScorer {
    pub mlp: Mlp,
}

impl FioScorer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        context: usize,
        motion: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let inputs = context + motion + hidden;
        FioScorer {
            mlp: Mlp::new(
                store,
                name,
                &[inputs, hidden, 1],
                Some(Activation::Silu),
                false,
                Init::FanIn,
                rng,
            ),
        }
    }
}

/// Scores every point from its context, motion and hidden features.
///
/// The scores only drive a sort, so they carry no gradient; they are still
/// computed on the tape so that parameters are read from one place.
pub fn score_points(
    tape: &mut Tape,
    p: &Bindings,
    scorer: &FioScorer,
    cf: Var,
    mf: Var,
    h: Var,
) -> Result<OrderingScores> {
    let n = tape.value(cf).rows();
    for v in [mf, h] {
        if tape.value(v).rows() != n {
            return Err(Error::dim(
                "score_points",
                tape.value(cf).shape(),
                tape.value(v).shape(),
            ));
        }
    }
    let x = tape.concat_cols(&[cf, mf, h])?;
    let raw = scorer.mlp.forward(tape, p, x)?;
    let s = tape.activation(raw, Activation::Tanh);
    let bound = 1.0 - SCORE_MARGIN;
    Ok(OrderingScores(
        tape.value(s).data().iter().map(|v| v.clamp(-bound, bound)).collect(),
    ))
}

/// A bijection on `0..n` and its inverse.
///
/// `forward[i]` is the original index of the point placed at sequence
/// position `i`; `inverse[j]` is the position of original point `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            forward: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = alloc::vec![usize::MAX; n];
        for (pos, &src) in forward.iter().enumerate() {
            if src >= n || inverse[src] != usize::MAX {
                return Err(Error::Contract("not a permutation".into()));
            }
            inverse[src] = pos;
        }
        Ok(Permutation { forward, inverse })
    }

    /// Ascending stable sort by score; ties keep the original order.
    pub fn from_scores(scores: &OrderingScores) -> Self {
        let s = &scores.0;
        let mut forward: Vec<usize> = (0..s.len()).collect();
        forward.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap_or(Ordering::Equal));
        Permutation::from_forward(forward).expect("sorted indices form a permutation")
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(i, &f)| i == f)
    }

    /// Rows in sequence order.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.gather_rows(x, &self.forward)
    }

    /// Rows back in original point order.
    pub fn restore(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.gather_rows(x, &self.inverse)
    }

    pub fn apply_tensor(&self, x: &Tensor) -> Tensor {
        x.gather_rows(&self.forward)
    }

    pub fn restore_tensor(&self, x: &Tensor) -> Tensor {
        x.gather_rows(&self.inverse)
    }
}

/// Sorts `seq` by `scores`, returning the ordered sequence and the
/// permutation that undoes it.
pub fn order_and_restore(tape: &mut Tape, seq: Var, scores: &OrderingScores) -> Result<(Var, Permutation)> {
    if tape.value(seq).rows() != scores.len() {
        return Err(Error::dim(
            "order_and_restore",
            tape.value(seq).shape(),
            &[scores.len()],
        ));
    }
    let perm = Permutation::from_scores(scores);
    let ordered = perm.apply(tape, seq)?;
    Ok((ordered, perm))
}
