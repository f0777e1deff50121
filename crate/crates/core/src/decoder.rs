//! Causal decoding with per-question latent token groups.
//!
//! The input sequence interleaves global vision tokens with one group per
//! question: an n*n grid of latent slots, the question tokens, then the
//! answer tokens. Selected decoder layers are followed by an interaction
//! step that rebuilds each group's latents from the hidden state at the end
//! of its question via windowed attention over the auxiliary grid, and
//! writes them back into the sequence for the remaining layers.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{integer_sqrt, linear, mlp2, transformer_block, Model};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Mask, Tensor};

/// One dialogue turn as token ids.
#[derive(Debug, Clone)]
pub struct GroupTokens {
    pub question_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
}

/// Absolute positions of one latent/question/answer group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    pub latent_start: usize,
    pub latent_len: usize,
    pub question_start: usize,
    pub question_len: usize,
    pub answer_start: usize,
    pub answer_len: usize,
    /// Position of the final question token, the source of `H_P`.
    pub end_of_question: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub global_len: usize,
    pub groups: Vec<GroupLayout>,
    pub total_len: usize,
}

/// Sequence order: global vision tokens, then per group latents, question,
/// answer.
pub fn build_layout(global_len: usize, latent_count: usize, groups: &[GroupTokens]) -> Result<SequenceLayout> {
    let mut cursor = global_len;
    let mut out = Vec::with_capacity(groups.len());
    for (gi, g) in groups.iter().enumerate() {
        if g.question_ids.is_empty() {
            return Err(Error::invalid(format!("group {gi} has an empty question")));
        }
        let latent_start = cursor;
        cursor += latent_count;
        let question_start = cursor;
        cursor += g.question_ids.len();
        let answer_start = cursor;
        cursor += g.answer_ids.len();
        out.push(GroupLayout {
            latent_start,
            latent_len: latent_count,
            question_start,
            question_len: g.question_ids.len(),
            answer_start,
            answer_len: g.answer_ids.len(),
            end_of_question: question_start + g.question_ids.len() - 1,
        });
    }
    Ok(SequenceLayout { global_len, groups: out, total_len: cursor })
}

/// Next-token supervision over answer positions only: the row before each
/// answer token predicts it; everything else is loss-masked.
pub fn supervision_targets(layout: &SequenceLayout, groups: &[GroupTokens]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = vec![0usize; layout.total_len];
    let mut mask = vec![false; layout.total_len];
    for (g, gl) in groups.iter().zip(&layout.groups) {
        for (ai, &tok) in g.answer_ids.iter().enumerate() {
            let pos = gl.answer_start + ai;
            targets[pos - 1] = tok as usize;
            mask[pos - 1] = true;
        }
    }
    (targets, mask)
}

/// Latent grid initialization: the auxiliary grid interpolated down to the
/// `(n, n)` latent resolution. Input `[(n*w)^2, D]`, output `[n^2, D]`.
pub fn init_latents(tape: &mut Tape, aux: NodeId, n: usize, w: usize) -> Result<NodeId> {
    let d = tape.value(aux).cols();
    let side = n * w;
    if tape.value(aux).rows() != side * side {
        return Err(Error::shape(format!(
            "aux has {} rows, expected {}",
            tape.value(aux).rows(),
            side * side
        )));
    }
    let grid = tape.reshape(aux, vec![side, side, d])?;
    let small = tape.bilinear_resize(grid, n, n)?;
    tape.reshape(small, vec![n * n, d])
}

/// Row indices of the `(i, j)` window in a row-major `(n*w, n*w)` grid.
pub fn patch_row_indices(n: usize, w: usize, i: usize, j: usize) -> Result<Vec<usize>> {
    if i >= n || j >= n {
        return Err(Error::invalid(format!("patch index ({i},{j}) outside {n}x{n} grid")));
    }
    let side = n * w;
    let mut rows = Vec::with_capacity(w * w);
    for r in i * w..(i + 1) * w {
        for c in j * w..(j + 1) * w {
            rows.push(r * side + c);
        }
    }
    Ok(rows)
}

/// The `(i, j)` window of the auxiliary grid, flattened row-major to `w^2`
/// rows.
pub fn patch(aux: &Tensor, n: usize, w: usize, i: usize, j: usize) -> Result<Tensor> {
    let rows = patch_row_indices(n, w, i, j)?;
    let d = aux.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(aux.row(r));
    }
    Tensor::new(vec![w * w, d], data)
}

/// Context-aware queries: `H_P` concatenated with each latent cell, pushed
/// through the interaction perceptron cell by cell.
pub fn form_queries(tape: &mut Tape, model: &Model, h_p: NodeId, latents: NodeId) -> Result<NodeId> {
    let cells = tape.value(latents).rows();
    assert_eq!(tape.value(h_p).rows(), 1, "H_P must be a single row");
    let broadcast = tape.gather_rows(h_p, Arc::new(vec![0; cells]))?;
    let joined = tape.concat_cols(&[broadcast, latents]);
    Ok(mlp2(tape, joined, &model.store, model.layout().query_mlp))
}

/// Windowed refresh: every latent cell attends, with its projected query,
/// over the projected `w^2` keys/values of its own auxiliary window. The
/// result replaces the latent values.
pub fn refresh_latents(
    tape: &mut Tape,
    model: &Model,
    queries: NodeId,
    aux: NodeId,
    n: usize,
    w: usize,
) -> Result<NodeId> {
    let side = n * w;
    if tape.value(aux).rows() != side * side {
        return Err(Error::shape(format!(
            "aux extent {} != (n*w)^2 = {}",
            tape.value(aux).rows(),
            side * side
        )));
    }
    if tape.value(queries).rows() != n * n {
        return Err(Error::shape("queries must have n^2 rows"));
    }
    let l = model.layout();
    let wq = tape.param(&model.store, l.inter_w_q);
    let wk = tape.param(&model.store, l.inter_w_k);
    let wv = tape.param(&model.store, l.inter_w_v);

    let q = tape.matmul(queries, wq);

    // Gather every cell's window rows back to back, project once, and use a
    // block mask so each query only sees its own window.
    let mut all_rows = Vec::with_capacity(n * n * w * w);
    for i in 0..n {
        for j in 0..n {
            all_rows.extend(patch_row_indices(n, w, i, j)?);
        }
    }
    let patches = tape.gather_rows(aux, Arc::new(all_rows))?;
    let k = tape.matmul(patches, wk);
    let v = tape.matmul(patches, wv);

    let cells = n * n;
    let per = w * w;
    let mut mask = Mask::new(cells, cells * per, vec![false; cells * cells * per])?;
    for c in 0..cells {
        for p in 0..per {
            mask.set(c, c * per + p, true);
        }
    }
    tape.masked_attention(q, k, v, Arc::new(mask))
}

/// Uniform draw from the configured latent-count set.
pub fn sample_latent_count(rng: &mut impl Rng, set: &[usize]) -> Result<usize> {
    if set.is_empty() {
        return Err(Error::config("latent count set is empty"));
    }
    Ok(set[rng.gen_range(0..set.len())])
}

/// Resamples a square grid of vision tokens to a smaller (or equal) square
/// count; the inference-time token reduction knob.
pub fn interpolate_vision_tokens(tape: &mut Tape, tokens: NodeId, target_count: usize) -> Result<NodeId> {
    let rows = tape.value(tokens).rows();
    let d = tape.value(tokens).cols();
    let side = integer_sqrt(rows)
        .ok_or_else(|| Error::invalid(format!("token count {rows} is not a perfect square")))?;
    let target_side = integer_sqrt(target_count)
        .ok_or_else(|| Error::invalid(format!("target count {target_count} is not a perfect square")))?;
    let grid = tape.reshape(tokens, vec![side, side, d])?;
    let resized = tape.bilinear_resize(grid, target_side, target_side)?;
    tape.reshape(resized, vec![target_count, d])
}

/// One latent rebuild that happened during decoding, for diagnostics.
#[derive(Debug, Clone)]
pub struct RefreshEvent {
    pub layer: usize,
    pub group: usize,
    pub l2_norm: f64,
}

pub struct DecodeOutput {
    /// Next-token logits, `[total_len, vocab]`.
    pub logits: NodeId,
    pub layout: SequenceLayout,
    pub refresh_events: Vec<RefreshEvent>,
    /// Final refreshed latent values per group, if any interaction ran.
    pub final_latents: Vec<(usize, Tensor)>,
}

/// Full-sequence causal decode with interaction layers.
///
/// After each configured layer, every group's latents are rebuilt from that
/// layer's hidden state at the group's end-of-question position and written
/// back; later layers consume the overwritten states.
pub fn decode_forward(
    tape: &mut Tape,
    model: &Model,
    global_vision: NodeId,
    groups: &[GroupTokens],
    latent_init: NodeId,
    aux: NodeId,
    interaction_layers: &[usize],
) -> Result<DecodeOutput> {
    let cfg = &model.cfg.decoder;
    let n = integer_sqrt(tape.value(latent_init).rows())
        .ok_or_else(|| Error::invalid("latent count must be a perfect square"))?;
    let w = cfg.window;
    for &li in interaction_layers {
        if li == 0 || li > cfg.num_layers {
            return Err(Error::config(format!(
                "interaction layer {li} outside 1..={}",
                cfg.num_layers
            )));
        }
    }

    let layout = build_layout(tape.value(global_vision).rows(), n * n, groups)?;
    if layout.total_len > cfg.max_seq_len {
        return Err(Error::config(format!(
            "sequence length {} exceeds max_seq_len {}",
            layout.total_len, cfg.max_seq_len
        )));
    }

    // Assemble embeddings: vision, then latents/question/answer per group.
    let embed = tape.param(&model.store, model.layout().dec_embed);
    let mut parts = vec![global_vision];
    for g in groups {
        parts.push(latent_init);
        let q_ids: Vec<usize> = g.question_ids.iter().map(|&t| t as usize).collect();
        parts.push(tape.gather_rows(embed, Arc::new(q_ids))?);
        if !g.answer_ids.is_empty() {
            let a_ids: Vec<usize> = g.answer_ids.iter().map(|&t| t as usize).collect();
            parts.push(tape.gather_rows(embed, Arc::new(a_ids))?);
        }
    }
    let mut h = tape.concat_rows(&parts);

    let pos_table = tape.param(&model.store, model.layout().dec_pos);
    let pos = tape.gather_rows(pos_table, Arc::new((0..layout.total_len).collect()))?;
    h = tape.add(h, pos);

    let causal = Arc::new(Mask::causal(layout.total_len));
    let mut events = Vec::new();
    let mut final_latents: Vec<(usize, Tensor)> = Vec::new();
    for (i, block) in model.layout().dec_layers.iter().enumerate() {
        let layer_index = i + 1;
        h = transformer_block(tape, h, &model.store, block, &causal, cfg.num_heads)?;
        if interaction_layers.contains(&layer_index) {
            for (gi, gl) in layout.groups.iter().enumerate() {
                let h_p = tape.gather_rows(h, Arc::new(vec![gl.end_of_question]))?;
                let slots: Vec<usize> = (gl.latent_start..gl.latent_start + gl.latent_len).collect();
                let latents_cur = tape.gather_rows(h, Arc::new(slots.clone()))?;
                let queries = form_queries(tape, model, h_p, latents_cur)?;
                let refreshed = refresh_latents(tape, model, queries, aux, n, w)?;
                let value = tape.value(refreshed).clone();
                let norm = value.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                events.push(RefreshEvent { layer: layer_index, group: gi, l2_norm: norm });
                if let Some(slot) = final_latents.iter_mut().find(|(g, _)| *g == gi) {
                    slot.1 = value;
                } else {
                    final_latents.push((gi, value));
                }
                h = tape.scatter_rows(h, &slots, refreshed);
            }
        }
    }

    let l = model.layout();
    let g = tape.param(&model.store, l.dec_ln_f_gamma);
    let b = tape.param(&model.store, l.dec_ln_f_beta);
    let normed = tape.layer_norm(h, g, b);
    let logits = linear(tape, normed, &model.store, l.dec_out_w, l.dec_out_b);
    Ok(DecodeOutput { logits, layout, refresh_events: events, final_latents })
}
