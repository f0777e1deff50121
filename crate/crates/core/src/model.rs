//! Model configuration and the flat named-parameter store holding every
//! learnable group: vision embedding, joint encoder stack, the two mapping
//! perceptrons, the causal decoder, and the interaction-layer weights.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Mask, Tensor};

pub const DEFAULT_MAX_TEXT_LEN: usize = 256;
pub const DEFAULT_WINDOW: usize = 3;
pub const DEFAULT_LATENT_COUNTS: [usize; 5] = [4, 16, 64, 144, 256];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Layer count N; must be even so the stack splits into exact halves.
    pub num_layers: usize,
    pub vision_dim: usize,
    pub text_dim: usize,
    /// Images become `patch_grid_side^2` vision tokens.
    pub patch_grid_side: usize,
    pub num_heads: usize,
    pub max_text_len: usize,
    /// Images are resampled to this square side before patch extraction, so
    /// full images and upscaled quadrants share one patch projection.
    pub input_side: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            vision_dim: 16,
            text_dim: 32,
            patch_grid_side: 4,
            num_heads: 2,
            max_text_len: DEFAULT_MAX_TEXT_LEN,
            input_side: 32,
            ffn_mult: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    /// Decoder width D; equals the text embedding width.
    pub model_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    /// Side of the attention window over the auxiliary grid.
    pub window: usize,
    /// Candidate latent-token counts; every entry is a perfect square.
    pub latent_count_set: Vec<usize>,
    /// 1-based decoder layers after which latents are refreshed.
    pub interaction_layer_indices: Vec<usize>,
    pub max_seq_len: usize,
    pub ffn_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: 4,
            model_dim: 32,
            num_heads: 2,
            vocab_size: 64,
            window: DEFAULT_WINDOW,
            latent_count_set: DEFAULT_LATENT_COUNTS.to_vec(),
            // One interaction step at mid-depth, one after the last layer.
            interaction_layer_indices: vec![2, 4],
            // Three turns at the largest latent count still fit.
            max_seq_len: 1024,
            ffn_mult: 2,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

pub fn integer_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if e.num_layers == 0 || e.num_layers % 2 != 0 {
            return Err(Error::config(format!(
                "encoder num_layers must be even and positive, got {}",
                e.num_layers
            )));
        }
        if e.num_heads == 0 || e.vision_dim % e.num_heads != 0 {
            return Err(Error::config("vision_dim must divide by num_heads"));
        }
        if d.num_heads == 0 || d.model_dim % d.num_heads != 0 {
            return Err(Error::config("model_dim must divide by num_heads"));
        }
        if d.model_dim != e.text_dim {
            return Err(Error::config(format!(
                "decoder model_dim {} must equal encoder text_dim {}",
                d.model_dim, e.text_dim
            )));
        }
        if e.patch_grid_side == 0 || e.input_side == 0 || e.input_side % e.patch_grid_side != 0 {
            return Err(Error::config("input_side must be positive and divide by patch_grid_side"));
        }
        if e.input_side % 2 != 0 {
            return Err(Error::config("input_side must be even for quadrant splitting"));
        }
        if e.ffn_mult == 0 || d.ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be positive"));
        }
        if d.window == 0 {
            return Err(Error::config("window must be positive"));
        }
        if d.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if d.latent_count_set.is_empty() {
            return Err(Error::config("latent_count_set must not be empty"));
        }
        for &c in &d.latent_count_set {
            if integer_sqrt(c).is_none() {
                return Err(Error::config(format!("latent count {c} is not a perfect square")));
            }
        }
        for &i in &d.interaction_layer_indices {
            if i == 0 || i > d.num_layers {
                return Err(Error::config(format!(
                    "interaction layer index {i} outside 1..={}",
                    d.num_layers
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Flat store of named parameter tensors.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Group label: the name segment before the first dot.
    pub fn group(&self, id: ParamId) -> &str {
        self.names[id.0].split('.').next().unwrap()
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut groups: Vec<String> = self
            .ids()
            .map(|id| self.group(id).to_string())
            .collect();
        groups.dedup();
        groups.sort();
        groups.dedup();
        groups
    }
}

/// Two-layer perceptron parameter handles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// One pre-norm transformer block: attention + feed-forward, each behind a
/// layer norm with a residual connection.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub vis_proj_w: ParamId,
    pub vis_proj_b: ParamId,
    pub vis_pos: ParamId,
    pub enc_layers: Vec<BlockParams>,
    pub mlp_t2v: MlpParams,
    pub mlp_v2t: MlpParams,
    pub dec_embed: ParamId,
    pub dec_pos: ParamId,
    pub dec_layers: Vec<BlockParams>,
    pub dec_ln_f_gamma: ParamId,
    pub dec_ln_f_beta: ParamId,
    pub dec_out_w: ParamId,
    pub dec_out_b: ParamId,
    pub inter_w_q: ParamId,
    pub inter_w_k: ParamId,
    pub inter_w_v: ParamId,
    pub query_mlp: MlpParams,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn register_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, dim: usize, ffn_mult: usize) -> BlockParams {
    let hidden = dim * ffn_mult;
    let mut mat = |name: &str, r: usize, c: usize| store.register(&format!("{prefix}.{name}"), xavier(rng, r, c));
    let w_q = mat("attn.w_q", dim, dim);
    let w_k = mat("attn.w_k", dim, dim);
    let w_v = mat("attn.w_v", dim, dim);
    let w_o = mat("attn.w_o", dim, dim);
    let ff_w1 = mat("ffn.w1", dim, hidden);
    let ff_w2 = mat("ffn.w2", hidden, dim);
    let mut vecp = |name: &str, n: usize, fill: f64| {
        store.register(&format!("{prefix}.{name}"), Tensor::new(vec![n], vec![fill; n]).unwrap())
    };
    BlockParams {
        ln1_gamma: vecp("ln1.gamma", dim, 1.0),
        ln1_beta: vecp("ln1.beta", dim, 0.0),
        w_q,
        b_q: vecp("attn.b_q", dim, 0.0),
        w_k,
        b_k: vecp("attn.b_k", dim, 0.0),
        w_v,
        b_v: vecp("attn.b_v", dim, 0.0),
        w_o,
        b_o: vecp("attn.b_o", dim, 0.0),
        ln2_gamma: vecp("ln2.gamma", dim, 1.0),
        ln2_beta: vecp("ln2.beta", dim, 0.0),
        ff_w1,
        ff_b1: vecp("ffn.b1", hidden, 0.0),
        ff_w2,
        ff_b2: vecp("ffn.b2", dim, 0.0),
    }
}

fn register_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> MlpParams {
    MlpParams {
        w1: store.register(&format!("{prefix}.fc1.weight"), xavier(rng, d_in, hidden)),
        b1: store.register(&format!("{prefix}.fc1.bias"), Tensor::zeros(vec![hidden])),
        w2: store.register(&format!("{prefix}.fc2.weight"), xavier(rng, hidden, d_out)),
        b2: store.register(&format!("{prefix}.fc2.bias"), Tensor::zeros(vec![d_out])),
    }
}

impl Model {
    /// Builds a model with parameters drawn deterministically from `seed`.
    /// Positional embeddings start at zero; weights use uniform Xavier init.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = &cfg.encoder;
        let d = &cfg.decoder;

        let patch_pixels = e.input_side / e.patch_grid_side;
        let patch_dim = patch_pixels * patch_pixels * 3;
        let num_patches = e.patch_grid_side * e.patch_grid_side;

        let vis_proj_w = store.register("vision_embed.proj.weight", xavier(&mut rng, patch_dim, e.vision_dim));
        let vis_proj_b = store.register("vision_embed.proj.bias", Tensor::zeros(vec![e.vision_dim]));
        let vis_pos = store.register("vision_embed.pos", Tensor::zeros(vec![num_patches, e.vision_dim]));

        let enc_layers = (0..e.num_layers)
            .map(|i| register_block(&mut store, &mut rng, &format!("encoder.layer{i}"), e.vision_dim, e.ffn_mult))
            .collect();

        let mlp_t2v = register_mlp(&mut store, &mut rng, "mlp_t2v", e.text_dim, e.vision_dim, e.vision_dim);
        let mlp_v2t = register_mlp(&mut store, &mut rng, "mlp_v2t", 2 * e.vision_dim, e.text_dim, e.text_dim);

        let dec_embed = store.register("decoder.embed", xavier(&mut rng, d.vocab_size, d.model_dim));
        let dec_pos = store.register("decoder.pos", Tensor::zeros(vec![d.max_seq_len, d.model_dim]));
        let dec_layers = (0..d.num_layers)
            .map(|i| register_block(&mut store, &mut rng, &format!("decoder.layer{i}"), d.model_dim, d.ffn_mult))
            .collect();
        let dec_ln_f_gamma = store.register("decoder.ln_f.gamma", Tensor::new(vec![d.model_dim], vec![1.0; d.model_dim]).unwrap());
        let dec_ln_f_beta = store.register("decoder.ln_f.beta", Tensor::zeros(vec![d.model_dim]));
        let dec_out_w = store.register("decoder.out.weight", xavier(&mut rng, d.model_dim, d.vocab_size));
        let dec_out_b = store.register("decoder.out.bias", Tensor::zeros(vec![d.vocab_size]));

        let dim = d.model_dim;
        let inter_w_q = store.register("interaction.w_q", xavier(&mut rng, dim, dim));
        let inter_w_k = store.register("interaction.w_k", xavier(&mut rng, dim, dim));
        let inter_w_v = store.register("interaction.w_v", xavier(&mut rng, dim, dim));
        let query_mlp = register_mlp(&mut store, &mut rng, "interaction.query_mlp", 2 * dim, dim, dim);

        let layout = Layout {
            vis_proj_w,
            vis_proj_b,
            vis_pos,
            enc_layers,
            mlp_t2v,
            mlp_v2t,
            dec_embed,
            dec_pos,
            dec_layers,
            dec_ln_f_gamma,
            dec_ln_f_beta,
            dec_out_w,
            dec_out_b,
            inter_w_q,
            inter_w_k,
            inter_w_v,
            query_mlp,
        };
        Ok(Model { cfg, store, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// The single text-to-vision perceptron instance, shared between text
    /// projection and image rebuilding.
    pub fn mlp_t2v(&self) -> MlpParams {
        self.layout.mlp_t2v
    }

    /// The single vision-to-text perceptron instance, shared between vision
    /// mapping and text rebuilding.
    pub fn mlp_v2t(&self) -> MlpParams {
        self.layout.mlp_v2t
    }
}

/// `x @ W + b` on the tape.
pub fn linear(tape: &mut Tape, x: NodeId, store: &ParamStore, w: ParamId, b: ParamId) -> NodeId {
    let wn = tape.param(store, w);
    let bn = tape.param(store, b);
    let y = tape.matmul(x, wn);
    tape.add_row_broadcast(y, bn)
}

/// Row-wise two-layer perceptron with a GELU between the layers.
pub fn mlp2(tape: &mut Tape, x: NodeId, store: &ParamStore, p: MlpParams) -> NodeId {
    let h = linear(tape, x, store, p.w1, p.b1);
    let h = tape.gelu(h);
    linear(tape, h, store, p.w2, p.b2)
}

/// Multi-head attention where every head shares one boolean mask.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: NodeId,
    store: &ParamStore,
    p: &BlockParams,
    mask: &Arc<Mask>,
    num_heads: usize,
) -> Result<NodeId> {
    let q = linear(tape, x, store, p.w_q, p.b_q);
    let k = linear(tape, x, store, p.w_k, p.b_k);
    let v = linear(tape, x, store, p.w_v, p.b_v);
    let dim = tape.value(q).cols();
    let head_dim = dim / num_heads;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        heads.push(tape.masked_attention(qh, kh, vh, mask.clone())?);
    }
    let cat = tape.concat_cols(&heads);
    Ok(linear(tape, cat, store, p.w_o, p.b_o))
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `h + FFN(LN(h))`.
pub fn transformer_block(
    tape: &mut Tape,
    x: NodeId,
    store: &ParamStore,
    p: &BlockParams,
    mask: &Arc<Mask>,
    num_heads: usize,
) -> Result<NodeId> {
    let g1 = tape.param(store, p.ln1_gamma);
    let b1 = tape.param(store, p.ln1_beta);
    let normed = tape.layer_norm(x, g1, b1);
    let attn = multi_head_attention(tape, normed, store, p, mask, num_heads)?;
    let h = tape.add(x, attn);

    let g2 = tape.param(store, p.ln2_gamma);
    let b2 = tape.param(store, p.ln2_beta);
    let normed2 = tape.layer_norm(h, g2, b2);
    let w1 = tape.param(store, p.ff_w1);
    let bb1 = tape.param(store, p.ff_b1);
    let ff = tape.matmul(normed2, w1);
    let ff = tape.add_row_broadcast(ff, bb1);
    let ff = tape.gelu(ff);
    let w2 = tape.param(store, p.ff_w2);
    let bb2 = tape.param(store, p.ff_b2);
    let ff = tape.matmul(ff, w2);
    let ff = tape.add_row_broadcast(ff, bb2);
    Ok(tape.add(h, ff))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn odd_encoder_depth_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.num_layers = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_square_latent_count_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.decoder.latent_count_set = vec![5];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn interaction_index_out_of_range_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.decoder.interaction_layer_indices = vec![9];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_init_is_deterministic() {
        let a = Model::new(ModelConfig::default(), 42).unwrap();
        let b = Model::new(ModelConfig::default(), 42).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.tensor(id).data(), b.store.tensor(id).data());
        }
        let c = Model::new(ModelConfig::default(), 43).unwrap();
        let w = a.store.lookup("decoder.embed").unwrap();
        assert_ne!(a.store.tensor(w).data(), c.store.tensor(w).data());
    }

    #[test]
    fn param_groups_cover_expected_set() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        let groups = m.store.group_names();
        assert_eq!(
            groups,
            vec!["decoder", "encoder", "interaction", "mlp_t2v", "mlp_v2t", "vision_embed"]
        );
    }

    #[test]
    fn shared_mlp_handles_are_single_instances() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        assert_eq!(m.mlp_t2v(), m.layout().mlp_t2v);
        assert_eq!(m.mlp_v2t(), m.layout().mlp_v2t);
        // Two calls return the same parameter ids: one parameter set each.
        assert_eq!(m.mlp_t2v().w1, m.mlp_t2v().w1);
    }
}
