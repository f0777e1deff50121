//! Bidirectional reconstruction losses plus token cross-entropy.
//!
//! The two mapping perceptrons are scored by rebuilding each space from the
//! other: text rebuilt from the jointly-encoded text features, and the raw
//! patch embedding rebuilt from the mapped vision features. Both use a
//! cosine loss in [0, 2]; the total adds them to the cross-entropy term
//! under a balancing weight.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mlp2, Model};
use crate::tensor::tape::{NodeId, Tape, COSINE_NORM_EPS};

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Loss components for one step. The total always satisfies
/// `l_total == l_ce + lambda * (l_v2t + l_t2v)` as one arithmetic expression.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_v2t: f64,
    pub l_t2v: f64,
    pub l_ce: f64,
    pub l_total: f64,
    pub lambda: f64,
}

/// Tape nodes behind a [`LossBundle`], for backprop.
pub struct LossNodes {
    pub l_v2t: NodeId,
    pub l_t2v: NodeId,
    pub l_ce: NodeId,
    pub l_total: NodeId,
    pub lambda: f64,
}

impl LossNodes {
    pub fn bundle(&self, tape: &Tape) -> LossBundle {
        LossBundle {
            l_v2t: tape.value(self.l_v2t).item(),
            l_t2v: tape.value(self.l_t2v).item(),
            l_ce: tape.value(self.l_ce).item(),
            l_total: tape.value(self.l_total).item(),
            lambda: self.lambda,
        }
    }
}

/// One minus the mean row cosine between two token matrices.
fn cosine_loss(tape: &mut Tape, target: NodeId, rebuilt: NodeId) -> Result<NodeId> {
    if tape.value(target).rows() == 0 {
        return Err(Error::invalid("cosine loss over an empty batch of tokens"));
    }
    let cos = tape.cosine_rows(target, rebuilt, COSINE_NORM_EPS)?;
    let mean = tape.mean_all(cos);
    Ok(tape.affine(mean, -1.0, 1.0))
}

/// Text-side reconstruction: the jointly-encoded text features are mapped
/// back into the decoder space through the shared vision-to-text perceptron
/// and compared, row by row, against the original text embeddings.
pub fn loss_v2t(tape: &mut Tape, model: &Model, e_txt: NodeId, v_f_txt: NodeId) -> Result<NodeId> {
    let expect = 2 * model.cfg.encoder.vision_dim;
    if tape.value(v_f_txt).cols() != expect {
        return Err(Error::shape(format!(
            "v_f_txt width {} != {expect}",
            tape.value(v_f_txt).cols()
        )));
    }
    let rebuilt = mlp2(tape, v_f_txt, &model.store, model.mlp_v2t());
    cosine_loss(tape, e_txt, rebuilt)
}

/// Vision-side reconstruction: the mapped vision features are pushed back
/// through the shared text-to-vision perceptron and compared against the
/// raw patch embedding.
pub fn loss_t2v(tape: &mut Tape, model: &Model, e_img: NodeId, v_img: NodeId) -> Result<NodeId> {
    let rebuilt = mlp2(tape, e_img, &model.store, model.mlp_t2v());
    cosine_loss(tape, v_img, rebuilt)
}

/// Mean negative log-likelihood of the targets at the supervised positions.
pub fn loss_ce(
    tape: &mut Tape,
    logits: NodeId,
    targets: Vec<usize>,
    supervision: Vec<bool>,
) -> Result<NodeId> {
    tape.cross_entropy(logits, Arc::new(targets), Arc::new(supervision))
}

/// Combines the three components: `l_ce + lambda * (l_v2t + l_t2v)`.
pub fn loss_total(
    tape: &mut Tape,
    l_ce: NodeId,
    l_v2t: NodeId,
    l_t2v: NodeId,
    lambda: f64,
) -> LossNodes {
    let recon = tape.add(l_v2t, l_t2v);
    let weighted = tape.scale(recon, lambda);
    let l_total = tape.add(l_ce, weighted);
    LossNodes { l_v2t, l_t2v, l_ce, l_total, lambda }
}
