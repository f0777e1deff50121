//! Pluggable similarity and language-model scorers.
//!
//! The bundled implementations are deterministic stand-ins: a hashed
//! bag-of-characters embedder for text/image similarity and an add-one
//! smoothed unigram table for perplexity. Real embedding or matching models
//! slot in behind the same traits.

use std::collections::BTreeMap;

use crate::image::PixelGrid;

/// Embeds text and images into one space; similarity is the cosine of the
/// unit-norm embeddings.
pub trait SimilarityScorer {
    fn embed_text(&self, text: &str) -> Vec<f64>;
    fn embed_image(&self, image: &PixelGrid) -> Vec<f64>;

    fn similarity(&self, text: &str, image: &PixelGrid) -> f64 {
        dot(&self.embed_text(text), &self.embed_image(image))
    }
}

/// Image-text matching score in [0, 1]; interface slot for an ITM model.
pub trait MatchScorer {
    fn match_score(&self, text: &str, image: &PixelGrid) -> f64;
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        // Empty content embeds as a fixed unit basis vector.
        v[0] = 1.0;
    }
    v
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Deterministic toy scorer: character trigrams hash into a signed bag for
/// text; coarse luminance buckets hash into the same space for images.
#[derive(Debug, Clone)]
pub struct HashScorer {
    pub dim: usize,
}

impl Default for HashScorer {
    fn default() -> Self {
        HashScorer { dim: 64 }
    }
}

impl SimilarityScorer for HashScorer {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        for gram in chars.windows(3.min(chars.len().max(1))) {
            let h = fnv1a(gram.iter().flat_map(|c| {
                let mut buf = [0u8; 4];
                c.encode_utf8(&mut buf).as_bytes().to_vec()
            }));
            let slot = (h % self.dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[slot] += sign;
        }
        normalize(v)
    }

    fn embed_image(&self, image: &PixelGrid) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let gray = image.to_gray();
        // 4x4 grid of mean-luminance buckets, quantized then hashed.
        let (h, w) = (image.height(), image.width());
        for by in 0..4usize {
            for bx in 0..4usize {
                let (y0, y1) = (by * h / 4, ((by + 1) * h / 4).max(by * h / 4 + 1).min(h));
                let (x0, x1) = (bx * w / 4, ((bx + 1) * w / 4).max(bx * w / 4 + 1).min(w));
                let mut sum = 0.0;
                let mut count = 0.0_f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += gray.data()[y * w + x];
                        count += 1.0;
                    }
                }
                let level = ((sum / count.max(1.0)) * 8.0).floor() as u8;
                let hsh = fnv1a([by as u8, bx as u8, level]);
                let slot = (hsh % self.dim as u64) as usize;
                let sign = if (hsh >> 32) & 1 == 0 { 1.0 } else { -1.0 };
                v[slot] += sign;
            }
        }
        normalize(v)
    }
}

impl MatchScorer for HashScorer {
    fn match_score(&self, text: &str, image: &PixelGrid) -> f64 {
        (self.similarity(text, image) + 1.0) / 2.0
    }
}

/// Test scorer with preset per-text similarities.
#[derive(Debug, Default, Clone)]
pub struct TableScorer {
    pub by_text: BTreeMap<String, f64>,
}

impl SimilarityScorer for TableScorer {
    fn embed_text(&self, _text: &str) -> Vec<f64> {
        vec![1.0]
    }

    fn embed_image(&self, _image: &PixelGrid) -> Vec<f64> {
        vec![1.0]
    }

    fn similarity(&self, text: &str, _image: &PixelGrid) -> f64 {
        *self.by_text.get(text).unwrap_or(&0.0)
    }
}

/// Add-one smoothed unigram model over a frequency table. The vocabulary
/// size is the number of distinct table words; unseen words share the
/// minimum probability `1 / (total + vocab)`.
#[derive(Debug, Clone)]
pub struct UnigramLm {
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl UnigramLm {
    pub fn from_counts(counts: BTreeMap<String, u64>) -> Self {
        let total = counts.values().sum();
        UnigramLm { counts, total }
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.len()
    }

    pub fn prob(&self, word: &str) -> f64 {
        let c = self.counts.get(&word.to_lowercase()).copied().unwrap_or(0);
        (c as f64 + 1.0) / (self.total as f64 + self.counts.len() as f64)
    }
}

/// Built-in English frequency table, Zipf-weighted so common prose lands
/// well under the perplexity ceiling while out-of-vocabulary strings score
/// in the tens of thousands.
pub fn default_unigram_lm() -> UnigramLm {
    const TABLE: &[(&str, u64)] = &[
        ("the", 12000), ("a", 8000), ("of", 6000), ("and", 5500), ("to", 5000),
        ("in", 4500), ("is", 4000), ("on", 3500), ("with", 3000), ("an", 2500),
        ("are", 2200), ("at", 2000), ("it", 1900), ("for", 1800), ("there", 1600),
        ("this", 1500), ("that", 1400), ("image", 1300), ("picture", 1200), ("photo", 1200),
        ("man", 1000), ("woman", 1000), ("person", 1000), ("people", 950), ("two", 900),
        ("three", 850), ("four", 800), ("one", 800), ("white", 750), ("black", 750),
        ("red", 700), ("green", 700), ("blue", 700), ("yellow", 650), ("square", 600),
        ("circle", 600), ("small", 550), ("large", 550), ("standing", 500), ("sitting", 500),
        ("table", 480), ("street", 460), ("dog", 450), ("cat", 450), ("car", 440),
        ("left", 420), ("right", 420), ("top", 400), ("bottom", 400), ("next", 380),
        ("near", 360), ("wearing", 350), ("holding", 340), ("group", 320), ("field", 300),
        ("grass", 290), ("sky", 280), ("water", 270), ("building", 260), ("stripes", 250),
        ("color", 250), ("background", 240), ("front", 230), ("side", 220), ("many", 210),
        ("how", 200), ("what", 200), ("where", 200), ("describe", 180),
    ];
    UnigramLm::from_counts(TABLE.iter().map(|(w, c)| (w.to_string(), *c)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_scorer_is_deterministic_and_unit_norm() {
        let s = HashScorer::default();
        let a = s.embed_text("a red square on the left");
        let b = s.embed_text("a red square on the left");
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let img = PixelGrid::filled(8, 8, [0.3, 0.6, 0.1]);
        let e1 = s.embed_image(&img);
        let e2 = s.embed_image(&img);
        assert_eq!(e1, e2);
        let sim = s.similarity("text", &img);
        assert!((-1.0..=1.0).contains(&sim));
        let m = s.match_score("text", &img);
        assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn unigram_uniform_table_is_exactly_uniform() {
        let counts: BTreeMap<String, u64> =
            ["a", "b", "c", "d"].iter().map(|w| (w.to_string(), 7u64)).collect();
        let lm = UnigramLm::from_counts(counts);
        for w in ["a", "b", "c", "d"] {
            assert!((lm.prob(w) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn default_lm_prefers_common_words() {
        let lm = default_unigram_lm();
        assert!(lm.prob("the") > lm.prob("stripes"));
        assert!(lm.prob("stripes") > lm.prob("zzzgibberish"));
    }
}
