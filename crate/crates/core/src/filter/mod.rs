//! Rule-based caption quality filtering.
//!
//! Ratios are computed over unicode scalar values and whitespace-split
//! words. Boundary semantics: a metric exactly at a minimum bound passes
//! and strictly below fails; dually for maximum bounds. Repetition ratios
//! use the distinct-gram deficit: `(total n-grams - distinct n-grams) /
//! total n-grams`, zero when the text is too short for a single gram.
//! "Special" characters are everything non-alphanumeric, whitespace
//! included.

pub mod image;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::UnigramLm;

/// Words that immediately disqualify a caption; the flagged-ratio bound of
/// zero tolerates none.
const FLAGGED_WORDS: &[&str] = &[
    "fuck", "shit", "bitch", "asshole", "bastard", "dick", "cunt", "slut", "whore", "nigger",
];

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FilterThresholds {
    pub alnum_min: f64,
    pub char_rep_len: usize,
    pub char_rep_max: f64,
    pub word_rep_len: usize,
    pub word_rep_max: f64,
    pub special_min: f64,
    pub special_max: f64,
    pub flagged_max: f64,
    pub perplexity_max: f64,
    pub itm_min: f64,
    pub clip_sim_min: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            alnum_min: 0.60,
            char_rep_len: 10,
            char_rep_max: 0.09373663,
            word_rep_len: 10,
            word_rep_max: 0.03085751,
            special_min: 0.16534802,
            special_max: 0.42023757,
            flagged_max: 0.0,
            perplexity_max: 5500.0,
            itm_min: 0.8,
            clip_sim_min: 0.28,
        }
    }
}

/// Reject reasons in filter-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Alphanumeric,
    CharRepetition,
    FlaggedWords,
    Perplexity,
    SpecialCharacters,
    WordRepetition,
    ImageTextMatching,
    ImageTextSimilarity,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TextRatios {
    pub alnum_ratio: f64,
    pub char_rep_ratio: f64,
    pub word_rep_ratio: f64,
    pub special_ratio: f64,
    pub flagged_ratio: f64,
}

fn gram_repetition<T: std::hash::Hash + Eq>(items: &[T], len: usize) -> f64 {
    if items.len() < len {
        return 0.0;
    }
    let total = items.len() - len + 1;
    let distinct: HashSet<&[T]> = items.windows(len).collect();
    (total - distinct.len()) as f64 / total as f64
}

fn words_of(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Character/word statistics driving the rule-based filters.
pub fn text_ratios(text: &str, char_rep_len: usize, word_rep_len: usize) -> Result<TextRatios> {
    if text.is_empty() {
        return Err(Error::invalid("text must be non-empty"));
    }
    let chars: Vec<char> = text.chars().collect();
    let total = chars.len() as f64;
    let alnum = chars.iter().filter(|c| c.is_alphanumeric()).count() as f64;

    let words = words_of(text);
    let flagged = words.iter().filter(|w| FLAGGED_WORDS.contains(&w.as_str())).count();
    let flagged_ratio = if words.is_empty() { 0.0 } else { flagged as f64 / words.len() as f64 };

    Ok(TextRatios {
        alnum_ratio: alnum / total,
        char_rep_ratio: gram_repetition(&chars, char_rep_len),
        word_rep_ratio: gram_repetition(&words, word_rep_len),
        special_ratio: (total - alnum) / total,
        flagged_ratio,
    })
}

/// Unigram perplexity: `exp(-mean log p(word))` under the supplied model.
pub fn perplexity(text: &str, lm: &UnigramLm) -> Result<f64> {
    let words = words_of(text);
    if words.is_empty() {
        return Err(Error::invalid("perplexity needs at least one word"));
    }
    let mean_log: f64 = words.iter().map(|w| lm.prob(w).ln()).sum::<f64>() / words.len() as f64;
    Ok((-mean_log).exp())
}

/// Image-derived scores feeding the caption filter; absent when the record
/// carries no image.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CaptionSignals {
    pub itm_score: Option<f64>,
    pub clip_similarity: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    /// Every violated rule, in filter-table order.
    pub reasons: Vec<RejectReason>,
    pub metrics: BTreeMap<String, f64>,
}

/// Applies every rule; a record is kept only when no bound is violated.
pub fn filter_caption(
    text: &str,
    signals: &CaptionSignals,
    thresholds: &FilterThresholds,
    lm: &UnigramLm,
) -> Result<FilterDecision> {
    let ratios = text_ratios(text, thresholds.char_rep_len, thresholds.word_rep_len)?;
    let ppl = perplexity(text, lm)?;

    let mut reasons = Vec::new();
    let mut metrics = BTreeMap::new();
    metrics.insert("alnum_ratio".into(), ratios.alnum_ratio);
    metrics.insert("char_rep_ratio".into(), ratios.char_rep_ratio);
    metrics.insert("word_rep_ratio".into(), ratios.word_rep_ratio);
    metrics.insert("special_ratio".into(), ratios.special_ratio);
    metrics.insert("flagged_ratio".into(), ratios.flagged_ratio);
    metrics.insert("perplexity".into(), ppl);

    if ratios.alnum_ratio < thresholds.alnum_min {
        reasons.push(RejectReason::Alphanumeric);
    }
    if ratios.char_rep_ratio > thresholds.char_rep_max {
        reasons.push(RejectReason::CharRepetition);
    }
    if ratios.flagged_ratio > thresholds.flagged_max {
        reasons.push(RejectReason::FlaggedWords);
    }
    if ppl > thresholds.perplexity_max {
        reasons.push(RejectReason::Perplexity);
    }
    if ratios.special_ratio < thresholds.special_min || ratios.special_ratio > thresholds.special_max {
        reasons.push(RejectReason::SpecialCharacters);
    }
    if ratios.word_rep_ratio > thresholds.word_rep_max {
        reasons.push(RejectReason::WordRepetition);
    }
    if let Some(itm) = signals.itm_score {
        metrics.insert("itm_score".into(), itm);
        if itm < thresholds.itm_min {
            reasons.push(RejectReason::ImageTextMatching);
        }
    }
    if let Some(sim) = signals.clip_similarity {
        metrics.insert("clip_similarity".into(), sim);
        if sim < thresholds.clip_sim_min {
            reasons.push(RejectReason::ImageTextSimilarity);
        }
    }

    Ok(FilterDecision { keep: reasons.is_empty(), reasons, metrics })
}
