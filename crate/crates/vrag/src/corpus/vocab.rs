use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

/// Reserved marker strings, in id order. These ids are stable across every
/// vocabulary this crate builds.
pub const MARKERS: [&str; 10] = [
    "[CLS]", "[SEP]", "<s1>", "<s2>", "<rsep>", "<bos>", "<eos>", "<ksep>", "<unk>", "<pad>",
];

/// Fixed ids for the reserved markers.
pub mod marker {
    use super::TokenId;

    pub const CLS: TokenId = 0;
    pub const SEP: TokenId = 1;
    pub const S1: TokenId = 2;
    pub const S2: TokenId = 3;
    pub const RSEP: TokenId = 4;
    pub const BOS: TokenId = 5;
    pub const EOS: TokenId = 6;
    pub const KSEP: TokenId = 7;
    pub const UNK: TokenId = 8;
    pub const PAD: TokenId = 9;
}

/// Token-to-id mapping with the ten reserved markers pinned to ids 0..10.
///
/// Built deterministically: tokens at or above the min-count threshold are
/// sorted lexicographically and assigned ids from 10 upward. Lookup of an
/// out-of-vocabulary token yields `<unk>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "Vec<String>", from = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds from an iterator of corpus tokens with a min-count threshold
    /// (tokens seen fewer times map to `<unk>`).
    pub fn build<'a, I>(tokens: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut kept: Vec<String> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !MARKERS.contains(t))
            .map(|(t, _)| t.to_string())
            .collect();
        kept.sort();
        Vocabulary::from_words(kept)
    }

    fn from_words(words: Vec<String>) -> Self {
        let mut ids = HashMap::with_capacity(words.len() + MARKERS.len());
        for (i, m) in MARKERS.iter().enumerate() {
            ids.insert(m.to_string(), i);
        }
        for (i, w) in words.iter().enumerate() {
            ids.insert(w.clone(), MARKERS.len() + i);
        }
        Vocabulary { words, ids }
    }

    /// Total number of ids, markers included.
    pub fn len(&self) -> usize {
        MARKERS.len() + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(marker::UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        if id < MARKERS.len() {
            MARKERS[id]
        } else {
            &self.words[id - MARKERS.len()]
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.words
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Vocabulary {
        Vocabulary::from_words(words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers_occupy_the_first_ten_ids_in_order() {
        let v = Vocabulary::build(["a"].into_iter(), 1);
        for (i, m) in MARKERS.iter().enumerate() {
            assert_eq!(v.id_of(m), i);
            assert_eq!(v.token(i), *m);
        }
        assert_eq!(marker::PAD, 9);
        assert_eq!(v.id_of("a"), 10);
        assert_eq!(v.len(), 11);
    }

    #[test]
    fn build_is_deterministic_and_sorted() {
        let a = Vocabulary::build(["zebra", "apple", "mango", "apple"].into_iter(), 1);
        let b = Vocabulary::build(["apple", "mango", "apple", "zebra"].into_iter(), 1);
        assert_eq!(a.token(10), "apple");
        assert_eq!(a.token(11), "mango");
        assert_eq!(a.token(12), "zebra");
        for id in 10..13 {
            assert_eq!(a.token(id), b.token(id));
        }
    }

    #[test]
    fn below_min_count_maps_to_unk() {
        let v = Vocabulary::build(["rare", "common", "common"].into_iter(), 2);
        assert_eq!(v.id_of("rare"), marker::UNK);
        assert_ne!(v.id_of("common"), marker::UNK);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = Vocabulary::build(["a"].into_iter(), 1);
        assert_eq!(v.id_of("never-seen"), marker::UNK);
    }

    #[test]
    fn serde_round_trip_preserves_ids() {
        let v = Vocabulary::build(["b", "a", "c"].into_iter(), 1);
        let json = serde_json::to_string(&v).unwrap();
        let w: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v.len(), w.len());
        for id in 0..v.len() {
            assert_eq!(v.token(id), w.token(id));
        }
    }
}
