//! Three-stage toy training over procedural samples, plus the
//! finite-difference verification runner used as the build's main oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, GenOptions, ToySample};
use crate::decoder::{decode_forward, init_latents, interpolate_vision_tokens, supervision_targets, GroupTokens};
use crate::encoder::{encode_auxiliary, encode_full};
use crate::error::{Error, Result};
use crate::loss::{loss_ce, loss_t2v, loss_total, loss_v2t, LossBundle, LossNodes, DEFAULT_LAMBDA};
use crate::model::{integer_sqrt, Model, ParamId};
use crate::tensor::gradcheck::relative_error;
use crate::tensor::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Stage1,
    Stage1_5,
    Stage2,
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageName::Stage1 => write!(f, "stage1"),
            StageName::Stage1_5 => write!(f, "stage1_5"),
            StageName::Stage2 => write!(f, "stage2"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub name: StageName,
    pub peak_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Data mix emulating the stage's caption/QA/instruction ratios.
    pub template_weights: [f64; 4],
    pub all_params_trainable: bool,
    pub lambda: f64,
    pub grad_clip: f64,
    /// Pin the latent count instead of sampling it per batch.
    pub fixed_latent_count: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage1()
    }
}

impl StageConfig {
    /// Foundational alignment: caption-heavy data, peak LR 1e-4.
    pub fn stage1() -> Self {
        StageConfig {
            name: StageName::Stage1,
            peak_lr: 1e-4,
            steps: 50,
            batch_size: 8,
            template_weights: [0.1, 0.1, 0.1, 0.7],
            all_params_trainable: true,
            lambda: DEFAULT_LAMBDA,
            grad_clip: 1.0,
            fixed_latent_count: None,
        }
    }

    /// Contextual fusion: mixed QA and caption data, LR 2e-5.
    pub fn stage1_5() -> Self {
        StageConfig {
            name: StageName::Stage1_5,
            peak_lr: 2e-5,
            batch_size: 4,
            template_weights: [0.25, 0.25, 0.25, 0.25],
            ..StageConfig::stage1()
        }
    }

    /// Instruction tuning: QA-heavy data, LR 1e-5.
    pub fn stage2() -> Self {
        StageConfig {
            name: StageName::Stage2,
            peak_lr: 1e-5,
            batch_size: 4,
            template_weights: [0.3, 0.3, 0.3, 0.1],
            ..StageConfig::stage1()
        }
    }

    /// Aggressive-rate preset for the small-corpus memorization check.
    pub fn memorization() -> Self {
        StageConfig { peak_lr: 3e-3, steps: 500, fixed_latent_count: Some(4), ..StageConfig::stage1() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.all_params_trainable {
            return Err(Error::config("all components stay trainable in every stage"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.peak_lr < 0.0 || !self.peak_lr.is_finite() {
            return Err(Error::config("peak_lr must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn gen_options(&self, image_side: usize) -> GenOptions {
        GenOptions { image_side, template_weights: self.template_weights, max_turns: 3 }
    }
}

/// Per-batch latent count, derived from `(seed, step)` alone so a resumed
/// run replays the same draws.
pub fn sample_latent_count_for_step(seed: u64, step: usize, set: &[usize]) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    crate::decoder::sample_latent_count(&mut rng, set)
}

/// Cosine-decayed learning rate: `peak` at step 0, annealing to zero at
/// `total_steps`.
pub fn cosine_lr(peak: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    let frac = (step as f64 / total_steps as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adaptive moment estimation state, one slot per parameter.
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let m = model.store.ids().map(|id| vec![0.0; model.store.tensor(id).numel()]).collect();
        let v = model.store.ids().map(|id| vec![0.0; model.store.tensor(id).numel()]).collect();
        AdamState { m, v, step: 0 }
    }

    fn apply(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, id) in model.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let tensor = model.store.tensor_mut(id);
            for (j, g) in grads[i].iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                tensor.data_mut()[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Knobs for one end-to-end forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Latent grid cell count; must be a perfect square.
    pub latent_count: usize,
    /// Reduce global vision tokens to this count before decoding.
    pub global_token_count: Option<usize>,
    pub interaction_layers: Option<Vec<usize>>,
    pub lambda: f64,
}

impl ForwardOptions {
    pub fn with_latents(latent_count: usize) -> Self {
        ForwardOptions { latent_count, global_token_count: None, interaction_layers: None, lambda: DEFAULT_LAMBDA }
    }
}

pub struct ForwardOutput {
    pub tape: Tape,
    pub losses: LossNodes,
    pub decode: crate::decoder::DecodeOutput,
}

/// Full pipeline for one sample: joint encoding, auxiliary grid, sequence
/// assembly with sampled latents, causal decode with interaction layers,
/// and the three losses.
pub fn forward_sample(model: &Model, sample: &ToySample, opts: &ForwardOptions) -> Result<ForwardOutput> {
    let e = &model.cfg.encoder;
    let d = &model.cfg.decoder;
    let n = integer_sqrt(opts.latent_count)
        .ok_or_else(|| Error::invalid(format!("latent count {} is not a perfect square", opts.latent_count)))?;
    let w = d.window;

    let mut tape = Tape::new();

    // The encoder conditions on the dialogue's question text.
    let question_text: Vec<String> = sample.turns.iter().map(|t| t.question.clone()).collect();
    let question_ids = tokenize(&question_text.join(" "), d.vocab_size);

    let image = if sample.image.height() == e.input_side && sample.image.width() == e.input_side {
        sample.image.clone()
    } else {
        sample.image.resized(e.input_side, e.input_side)?
    };
    let enc = encode_full(&mut tape, model, &image, &question_ids)?;
    let aux = encode_auxiliary(&mut tape, model, &sample.image, n, w)?;

    let global = match opts.global_token_count {
        Some(count) => interpolate_vision_tokens(&mut tape, enc.e_img, count)?,
        None => enc.e_img,
    };
    let latents = init_latents(&mut tape, aux, n, w)?;

    let groups: Vec<GroupTokens> = sample
        .turns
        .iter()
        .map(|t| GroupTokens {
            question_ids: tokenize(&t.question, d.vocab_size),
            answer_ids: tokenize(&t.answer, d.vocab_size),
        })
        .collect();

    let interaction = opts
        .interaction_layers
        .clone()
        .unwrap_or_else(|| d.interaction_layer_indices.clone());
    let decode = decode_forward(&mut tape, model, global, &groups, latents, aux, &interaction)?;

    let (targets, mask) = supervision_targets(&decode.layout, &groups);
    let ce = loss_ce(&mut tape, decode.logits, targets, mask)?;
    let v2t = loss_v2t(&mut tape, model, enc.e_txt, enc.fused.v_f_txt)?;
    let t2v = loss_t2v(&mut tape, model, enc.e_img, enc.v_img)?;
    let losses = loss_total(&mut tape, ce, v2t, t2v, opts.lambda);
    Ok(ForwardOutput { tape, losses, decode })
}

/// Per-group simulation outcome: what the model would emit after the
/// question, plus the latent refresh trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReportSim {
    pub question: String,
    /// Argmax token id at the end-of-question position (the first answer
    /// token the model would generate).
    pub predicted_first_token: u32,
    /// Argmax token ids over the provided answer span, if any.
    pub answer_span_argmax: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateReport {
    pub latent_side: usize,
    pub latent_count: usize,
    pub global_tokens: usize,
    pub groups: Vec<GroupReportSim>,
    /// `(layer, group, l2_norm)` per latent rebuild.
    pub refresh_norms: Vec<(usize, usize, f64)>,
}

/// Loss-free forward pass for inspection: encodes the image, assembles the
/// multi-turn sequence, decodes, and reports per-turn argmax tokens and
/// latent-refresh norms.
pub fn simulate_dialogue(
    model: &Model,
    image: &crate::image::PixelGrid,
    turns: &[crate::data::DialogueTurn],
    opts: &ForwardOptions,
) -> Result<SimulateReport> {
    let e = &model.cfg.encoder;
    let d = &model.cfg.decoder;
    let n = integer_sqrt(opts.latent_count)
        .ok_or_else(|| Error::invalid(format!("latent count {} is not a perfect square", opts.latent_count)))?;
    let w = d.window;

    let mut tape = Tape::new();
    let question_text: Vec<String> = turns.iter().map(|t| t.question.clone()).collect();
    let question_ids = tokenize(&question_text.join(" "), d.vocab_size);
    let resized = if image.height() == e.input_side && image.width() == e.input_side {
        image.clone()
    } else {
        image.resized(e.input_side, e.input_side)?
    };
    let enc = encode_full(&mut tape, model, &resized, &question_ids)?;
    let aux = encode_auxiliary(&mut tape, model, image, n, w)?;
    let global = match opts.global_token_count {
        Some(count) => interpolate_vision_tokens(&mut tape, enc.e_img, count)?,
        None => enc.e_img,
    };
    let global_tokens = tape.value(global).rows();
    let latents = init_latents(&mut tape, aux, n, w)?;
    let groups: Vec<GroupTokens> = turns
        .iter()
        .map(|t| GroupTokens {
            question_ids: tokenize(&t.question, d.vocab_size),
            answer_ids: tokenize(&t.answer, d.vocab_size),
        })
        .collect();
    let interaction = opts
        .interaction_layers
        .clone()
        .unwrap_or_else(|| d.interaction_layer_indices.clone());
    let decode = decode_forward(&mut tape, model, global, &groups, latents, aux, &interaction)?;

    let logits = tape.value(decode.logits);
    let vocab = d.vocab_size;
    let argmax = |pos: usize| -> u32 {
        let row = &logits.data()[pos * vocab..(pos + 1) * vocab];
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best as u32
    };
    let mut group_reports = Vec::new();
    for (turn, gl) in turns.iter().zip(&decode.layout.groups) {
        let answer_span_argmax = (0..gl.answer_len)
            .map(|i| argmax(gl.answer_start + i - 1))
            .collect();
        group_reports.push(GroupReportSim {
            question: turn.question.clone(),
            predicted_first_token: argmax(gl.end_of_question),
            answer_span_argmax,
        });
    }
    Ok(SimulateReport {
        latent_side: n,
        latent_count: opts.latent_count,
        global_tokens,
        groups: group_reports,
        refresh_norms: decode
            .refresh_events
            .iter()
            .map(|e| (e.layer, e.group, e.l2_norm))
            .collect(),
    })
}

/// Per-step JSON-lines metrics record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_ce: f64,
    pub l_v2t: f64,
    pub l_t2v: f64,
    pub l_total: f64,
}

impl StepRecord {
    pub fn new(step: usize, b: &LossBundle) -> Self {
        StepRecord { step, l_ce: b.l_ce, l_v2t: b.l_v2t, l_t2v: b.l_t2v, l_total: b.l_total }
    }
}

/// One optimization step over a batch: forward/backward per sample, mean
/// gradients, global-norm clipping, Adam update under a cosine-decayed rate.
pub fn train_step(
    model: &mut Model,
    batch: &[ToySample],
    stage: &StageConfig,
    adam: &mut AdamState,
    step: usize,
    total_steps: usize,
    latent_count: usize,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step needs a non-empty batch"));
    }
    stage.validate()?;

    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut grad_acc: Vec<Vec<f64>> =
        ids.iter().map(|&id| vec![0.0; model.store.tensor(id).numel()]).collect();
    let (mut ce, mut v2t, mut t2v) = (0.0, 0.0, 0.0);
    let scale = 1.0 / batch.len() as f64;

    let opts = ForwardOptions { lambda: stage.lambda, ..ForwardOptions::with_latents(latent_count) };
    for sample in batch {
        let out = forward_sample(model, sample, &opts)?;
        let bundle = out.losses.bundle(&out.tape);
        if !bundle.l_total.is_finite() {
            let culprit = out
                .tape
                .first_non_finite()
                .map(|(i, op)| format!("tape node {i} ({op})"))
                .unwrap_or_else(|| "loss scalar".to_string());
            return Err(Error::NonFinite(culprit));
        }
        ce += bundle.l_ce * scale;
        v2t += bundle.l_v2t * scale;
        t2v += bundle.l_t2v * scale;
        let mut tape = out.tape;
        let grads = tape.backward(out.losses.l_total);
        for (i, &id) in ids.iter().enumerate() {
            if let Some(g) = grads.of_param(id) {
                for (acc, gi) in grad_acc[i].iter_mut().zip(g) {
                    *acc += gi * scale;
                }
            }
        }
    }

    if stage.grad_clip > 0.0 {
        let norm: f64 = grad_acc.iter().flat_map(|g| g.iter().map(|v| v * v)).sum::<f64>().sqrt();
        if norm > stage.grad_clip {
            let s = stage.grad_clip / norm;
            for g in &mut grad_acc {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
    }

    let lr = cosine_lr(stage.peak_lr, step, total_steps);
    adam.apply(model, &grad_acc, lr);

    Ok(LossBundle {
        l_v2t: v2t,
        l_t2v: t2v,
        l_ce: ce,
        l_total: ce + stage.lambda * (v2t + t2v),
        lambda: stage.lambda,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub latent_count: usize,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tolerance)
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Compares analytic gradients of the total loss against central finite
/// differences on a deterministic subsample of each parameter group.
pub fn run_gradcheck(
    model: &mut Model,
    sample: &ToySample,
    eps: f64,
    subsample_per_group: usize,
    latent_count: usize,
) -> Result<GradCheckReport> {
    run_gradcheck_inner(model, sample, eps, subsample_per_group, latent_count, None)
}

/// Gradcheck with a deliberately sign-flipped analytic gradient for one
/// group; a negative-control fixture that must fail.
pub fn run_gradcheck_corrupted(
    model: &mut Model,
    sample: &ToySample,
    eps: f64,
    subsample_per_group: usize,
    latent_count: usize,
    corrupt_group: &str,
) -> Result<GradCheckReport> {
    run_gradcheck_inner(model, sample, eps, subsample_per_group, latent_count, Some(corrupt_group))
}

fn run_gradcheck_inner(
    model: &mut Model,
    sample: &ToySample,
    eps: f64,
    subsample_per_group: usize,
    latent_count: usize,
    corrupt_group: Option<&str>,
) -> Result<GradCheckReport> {
    use rand::Rng;
    if eps <= 0.0 {
        return Err(Error::invalid("gradcheck eps must be positive"));
    }
    let opts = ForwardOptions::with_latents(latent_count);

    let analytic: Vec<Vec<f64>> = {
        let out = forward_sample(model, sample, &opts)?;
        let mut tape = out.tape;
        let grads = tape.backward(out.losses.l_total);
        model
            .store
            .ids()
            .map(|id| grads.of_param_or_zeros(id, model.store.tensor(id).numel()))
            .collect()
    };

    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut groups: Vec<GroupReport> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);

    for group in model.store.group_names() {
        let members: Vec<ParamId> = ids
            .iter()
            .copied()
            .filter(|&id| model.store.group(id) == group)
            .collect();
        // Deterministic subsample across the group's flattened elements.
        let total: usize = members.iter().map(|&id| model.store.tensor(id).numel()).sum();
        let picks = subsample_per_group.min(total);
        let mut report = GroupReport {
            group: group.clone(),
            checked: picks,
            max_rel_err: 0.0,
            worst_param: String::new(),
        };
        for _ in 0..picks {
            let mut flat = rng.gen_range(0..total);
            let mut chosen = members[0];
            for &id in &members {
                let n = model.store.tensor(id).numel();
                if flat < n {
                    chosen = id;
                    break;
                }
                flat -= n;
            }
            let orig = model.store.tensor(chosen).data()[flat];
            model.store.tensor_mut(chosen).data_mut()[flat] = orig + eps;
            let plus = {
                let out = forward_sample(model, sample, &opts)?;
                out.losses.bundle(&out.tape).l_total
            };
            model.store.tensor_mut(chosen).data_mut()[flat] = orig - eps;
            let minus = {
                let out = forward_sample(model, sample, &opts)?;
                out.losses.bundle(&out.tape).l_total
            };
            model.store.tensor_mut(chosen).data_mut()[flat] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let mut a = analytic[chosen.0][flat];
            if corrupt_group.is_some_and(|c| c == group) {
                a = -a;
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{}[{}]", model.store.name(chosen), flat);
            }
        }
        groups.push(report);
    }

    Ok(GradCheckReport { eps, tolerance: GRADCHECK_TOLERANCE, latent_count, groups })
}
