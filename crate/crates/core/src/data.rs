//! Procedural image/dialogue samples and the byte-level toy tokenizer.
//!
//! Every sample is a pure function of `(seed, index)`: a synthetic scene
//! (one colored square at a cardinal position plus a stripe pattern) with
//! question/answer turns whose answers read straight off the scene
//! parameters, so they are answerable from pixels.

use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PixelGrid;

/// Byte-level tokenizer: each byte hashes into one of `vocab_size` buckets.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    text.bytes().map(|b| (b as usize % vocab_size) as u32).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DialogueTurn {
    pub question: String,
    pub answer: String,
}

/// One JSON-lines dialogue record: an image reference plus turns.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub image: String,
    pub turns: Vec<DialogueTurn>,
}

pub fn load_dialogues(reader: impl BufRead) -> Result<Vec<DialogueRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("dialogue line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Parses a `toy:<seed>:<index>` image reference.
pub fn parse_toy_ref(s: &str) -> Option<(u64, u64)> {
    let rest = s.strip_prefix("toy:")?;
    let (seed, index) = rest.split_once(':')?;
    Some((seed.parse().ok()?, index.parse().ok()?))
}

const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.85, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.15]),
    ("blue", [0.12, 0.2, 0.85]),
    ("yellow", [0.9, 0.85, 0.1]),
];

const POSITIONS: [&str; 4] = ["left", "right", "top", "bottom"];

/// Question template families; the per-stage data mix weights these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Color,
    Count,
    Position,
    Caption,
}

pub const TEMPLATES: [Template; 4] = [Template::Color, Template::Count, Template::Position, Template::Caption];

#[derive(Debug, Clone)]
pub struct GenOptions {
    /// Square image side in pixels; keep it matched to the encoder input.
    pub image_side: usize,
    /// Relative draw weights for color/count/position/caption questions.
    pub template_weights: [f64; 4],
    pub max_turns: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions { image_side: 32, template_weights: [1.0; 4], max_turns: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    pub image: PixelGrid,
    pub turns: Vec<DialogueTurn>,
    /// Which template produced each turn.
    pub templates: Vec<Template>,
}

/// Scene parameters behind one sample.
struct Scene {
    color_idx: usize,
    position_idx: usize,
    stripes: usize,
}

fn render(scene: &Scene, side: usize) -> PixelGrid {
    let mut img = PixelGrid::filled(side, side, [0.2, 0.2, 0.2]);
    let rgb = COLORS[scene.color_idx].1;
    let sq = side / 4;
    // Square centered inside its half of the image.
    let (cy, cx) = match POSITIONS[scene.position_idx] {
        "left" => (side / 2, side / 4),
        "right" => (side / 2, 3 * side / 4),
        "top" => (side / 4, side / 2),
        _ => (3 * side / 4, side / 2),
    };
    for y in cy.saturating_sub(sq / 2)..(cy + sq / 2).min(side) {
        for x in cx.saturating_sub(sq / 2)..(cx + sq / 2).min(side) {
            img.set_pixel(y, x, rgb);
        }
    }
    // Stripes: thin white bars along the top edge.
    for s in 0..scene.stripes {
        let x0 = 2 + s * (side / 5);
        for y in 0..2 {
            for x in x0..(x0 + 2).min(side) {
                img.set_pixel(y, x, [1.0, 1.0, 1.0]);
            }
        }
    }
    img
}

fn weighted_template(rng: &mut ChaCha8Rng, weights: &[f64; 4]) -> Template {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (t, &w) in TEMPLATES.iter().zip(weights) {
        if draw < w {
            return *t;
        }
        draw -= w;
    }
    Template::Caption
}

fn turn_for(template: Template, scene: &Scene) -> DialogueTurn {
    let color = COLORS[scene.color_idx].0;
    let position = POSITIONS[scene.position_idx];
    match template {
        Template::Color => DialogueTurn {
            question: "what color is the square?".into(),
            answer: color.into(),
        },
        Template::Count => DialogueTurn {
            question: "how many stripes are there?".into(),
            answer: scene.stripes.to_string(),
        },
        Template::Position => DialogueTurn {
            question: "where is the square?".into(),
            answer: position.into(),
        },
        Template::Caption => DialogueTurn {
            question: "describe the image".into(),
            answer: format!("{color} square {position}"),
        },
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Deterministic sample `index` of the dataset keyed by `seed`.
pub fn gen_toy_sample(seed: u64, index: u64, opts: &GenOptions) -> ToySample {
    let mut rng = sample_rng(seed, index);
    let scene = Scene {
        color_idx: rng.gen_range(0..COLORS.len()),
        position_idx: rng.gen_range(0..POSITIONS.len()),
        stripes: rng.gen_range(1..=4),
    };
    let image = render(&scene, opts.image_side);
    let num_turns = rng.gen_range(1..=opts.max_turns.max(1));
    let mut turns = Vec::with_capacity(num_turns);
    let mut templates = Vec::with_capacity(num_turns);
    for _ in 0..num_turns {
        let t = weighted_template(&mut rng, &opts.template_weights);
        templates.push(t);
        turns.push(turn_for(t, &scene));
    }
    ToySample { image, turns, templates }
}

/// Renders only the image of sample `(seed, index)`.
pub fn gen_toy_image(seed: u64, index: u64, image_side: usize) -> PixelGrid {
    gen_toy_sample(seed, index, &GenOptions { image_side, ..GenOptions::default() }).image
}

pub fn gen_toy_dataset(seed: u64, count: usize, opts: &GenOptions) -> Result<Vec<ToySample>> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    Ok((0..count as u64).map(|i| gen_toy_sample(seed, i, opts)).collect())
}
