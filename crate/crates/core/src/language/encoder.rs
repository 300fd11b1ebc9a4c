//! Deterministic stand-in for a frozen text tower.
//!
//! A prompt is split into lowercase words, each word is canonicalized through
//! a [`SynonymMap`] and mapped to a Gaussian vector seeded by a stable hash of
//! `(word, seed)`. The sentence embedding is the L2-normalized mean of the
//! word vectors, so prompts that share canonical words land close together.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::conjugate_ing;
use crate::error::{Error, Result};

const SYNONYM_FILE: &str = include_str!("../../data/synonyms.tsv");

/// Many-to-one word map. Canonical words always map to themselves.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymMap {
    map: BTreeMap<String, String>,
}

impl SynonymMap {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a map from `(word, canonical)` pairs. Chains are rejected: a
    /// canonical word may not itself be an alias of something else.
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: AsRef<str>,
    {
        let mut map = BTreeMap::new();
        for (w, c) in pairs {
            let w = w.as_ref().trim().to_lowercase();
            let c = c.as_ref().trim().to_lowercase();
            if w.is_empty() || c.is_empty() {
                return Err(Error::InvalidArgument {
                    arg: "synonyms",
                    reason: "empty word".into(),
                });
            }
            if let Some(prev) = map.insert(w.clone(), c.clone()) {
                if prev != c {
                    return Err(Error::InvalidArgument {
                        arg: "synonyms",
                        reason: format!("`{w}` maps to both `{prev}` and `{c}`"),
                    });
                }
            }
        }
        for (w, c) in &map {
            if let Some(cc) = map.get(c) {
                if cc != c {
                    return Err(Error::InvalidArgument {
                        arg: "synonyms",
                        reason: format!("chain `{w}` -> `{c}` -> `{cc}`"),
                    });
                }
            }
        }
        Ok(Self { map })
    }

    /// Parses `word<TAB>canonical` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (w, c) = line.split_once('\t').ok_or_else(|| Error::InvalidArgument {
                arg: "synonyms",
                reason: format!("line {} has no tab separator", i + 1),
            })?;
            pairs.push((w.to_string(), c.to_string()));
        }
        Self::from_pairs(pairs)
    }

    /// The map shipped for the synthetic vocabularies.
    pub fn bundled() -> &'static SynonymMap {
        static MAP: OnceLock<SynonymMap> = OnceLock::new();
        MAP.get_or_init(|| SynonymMap::parse(SYNONYM_FILE).expect("bundled synonym file is valid"))
    }

    pub fn to_tsv(&self) -> String {
        self.map.iter().map(|(w, c)| format!("{w}\t{c}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Canonical form of a single lowercase word. Present participles of
    /// mapped verbs are rewritten to the participle of the canonical verb.
    pub fn canonical(&self, word: &str) -> String {
        if let Some(c) = self.map.get(word) {
            return c.clone();
        }
        if let Some(stem) = word.strip_suffix("ing") {
            let mut bases = vec![stem.to_string(), format!("{stem}e")];
            if let Some(s) = stem.strip_suffix('y') {
                bases.push(format!("{s}ie"));
            }
            let b = stem.as_bytes();
            if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] {
                bases.push(stem[..stem.len() - 1].to_string());
            }
            for base in bases {
                if let Some(c) = self.map.get(&base) {
                    if conjugate_ing(&base) == word {
                        return conjugate_ing(c);
                    }
                }
            }
        }
        word.to_string()
    }
}

/// Lowercase word split; surrounding punctuation is stripped.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// A prompt and its unit-norm embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextQuery {
    pub prompt: String,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub seed: u64,
    pub dim: usize,
    pub synonyms: SynonymMap,
}

const EMPTY_TOKEN: &str = "<empty>";

impl TextEncoder {
    pub fn new(seed: u64, dim: usize, synonyms: SynonymMap) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { seed, dim, synonyms }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn encode(&self, prompt: &str) -> Vec<f64> {
        let mut tokens: Vec<String> = tokenize(prompt)
            .iter()
            .map(|t| self.synonyms.canonical(t))
            .collect();
        if tokens.is_empty() {
            tokens.push(EMPTY_TOKEN.to_string());
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        for a in &mut acc {
            *a /= norm;
        }
        acc
    }

    pub fn query(&self, prompt: impl Into<String>) -> TextQuery {
        let prompt = prompt.into();
        let embedding = self.encode(&prompt);
        TextQuery { prompt, embedding }
    }
}

/// Free-function form of [`TextEncoder::encode`].
pub fn encode_text(prompt: &str, seed: u64, dim: usize, synonyms: &SynonymMap) -> Vec<f64> {
    TextEncoder::new(seed, dim, synonyms.clone()).encode(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;
    use proptest::prelude::*;

    #[test]
    fn bundled_map_is_idempotent() {
        let m = SynonymMap::bundled();
        assert_eq!(m.canonical("rhombus"), "diamond");
        assert_eq!(m.canonical("diamond"), "diamond");
        assert_eq!(m.canonical("contacting"), "touching");
        for (_, c) in m.map.iter() {
            assert_eq!(&m.canonical(c), c);
        }
    }

    #[test]
    fn chains_are_rejected() {
        assert!(SynonymMap::from_pairs([("a", "b"), ("b", "c")]).is_err());
        assert!(SynonymMap::from_pairs([("a", "b"), ("a", "c")]).is_err());
        assert!(SynonymMap::parse("nosep\n").is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let enc = TextEncoder::new(7, 64, SynonymMap::empty());
        assert_eq!(enc.encode("a photo of a person"), enc.encode("a photo of a person"));
        let other = TextEncoder::new(8, 64, SynonymMap::empty());
        assert_ne!(enc.encode("a photo of a person"), other.encode("a photo of a person"));
    }

    #[test]
    fn synonym_prompts_are_close() {
        // The watched/looked prompts share 5 canonical tokens with weights
        // (2,1,1,1) and one side adds "at": expected cosine sqrt(7/8) ~ 0.935.
        let map = SynonymMap::from_pairs([("watch", "look")]).unwrap();
        let enc = TextEncoder::new(3, 512, map);
        let a = enc.encode("a person watching a television");
        let b = enc.encode("a person looking at a television");
        let c = cosine(&a, &b);
        assert!(c >= 0.9, "cos = {c}");
        assert!((c - (7.0f64 / 8.0).sqrt()).abs() < 0.05);
    }

    #[test]
    fn unrelated_words_are_nearly_orthogonal() {
        // |cos| < 0.3 over 1000 seeds at the default text width.
        let mut hits = 0;
        for seed in 0..1000 {
            let enc = TextEncoder::new(seed, 128, SynonymMap::empty());
            if cosine(&enc.encode("horse"), &enc.encode("television")).abs() < 0.3 {
                hits += 1;
            }
        }
        assert!(hits >= 990, "{hits}/1000");
    }

    proptest! {
        #[test]
        fn unit_norm_for_any_prompt(s in ".{1,40}", seed in 0u64..1000) {
            let enc = TextEncoder::new(seed, 32, SynonymMap::bundled().clone());
            let e = enc.encode(&s);
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
            prop_assert_eq!(e, enc.encode(&s));
        }
    }
}
