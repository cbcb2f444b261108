//! Synthetic bilingual grammar with gold dependency graphs, and the shared
//! vocabulary.
//!
//! Source: `Det (Adj) Noun Verb Det (Adj) Noun`. Target: word-for-word
//! dictionary translation with the verb moved to the end.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{CorpusExample, Head, SyntacticGraph};

pub const UNK: usize = 0;
pub const SPECIALS: [&str; 3] = ["<unk>", "<s>", "</s>"];

/// Source word and its target translation.
type Entry = (&'static str, &'static str);

const DETS: [Entry; 2] = [("the", "el"), ("a", "un")];
const NOUNS: [Entry; 6] = [
    ("cat", "gato"),
    ("dog", "perro"),
    ("bird", "pajaro"),
    ("child", "nino"),
    ("teacher", "maestro"),
    ("farmer", "granjero"),
];
const VERBS: [Entry; 4] = [("sees", "ve"), ("likes", "quiere"), ("finds", "encuentra"), ("follows", "sigue")];
const ADJS: [Entry; 3] = [("small", "pequeno"), ("old", "viejo"), ("happy", "feliz")];

/// Longest sentence the grammar can emit.
pub const MAX_SENTENCE: usize = 7;

#[derive(Clone, Debug)]
pub struct ToyGrammar {
    pub seed: u64,
    pub adj_prob: f64,
}

impl ToyGrammar {
    pub fn new(seed: u64) -> Self {
        Self { seed, adj_prob: 0.5 }
    }

    fn lexicon() -> impl Iterator<Item = &'static Entry> {
        DETS.iter().chain(&NOUNS).chain(&VERBS).chain(&ADJS)
    }

    /// Source-to-target word dictionary.
    pub fn dictionary() -> BTreeMap<&'static str, &'static str> {
        Self::lexicon().copied().collect()
    }

    /// Specials, then every source word, then every target word.
    pub fn vocab() -> Vocab {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(Self::lexicon().map(|e| e.0.to_string()));
        words.extend(Self::lexicon().map(|e| e.1.to_string()));
        Vocab::from_tokens(words).expect("lexicon has no duplicates")
    }

    fn np(&self, rng: &mut ChaCha8Rng, words: &mut Vec<Entry>, heads: &mut Vec<Head>, head_of_noun: Option<usize>) -> usize {
        let base = words.len();
        let adj = rng.random_bool(self.adj_prob);
        let noun_at = base + 1 + adj as usize;
        words.push(DETS[rng.random_range(0..DETS.len())]);
        heads.push(Some(noun_at));
        if adj {
            words.push(ADJS[rng.random_range(0..ADJS.len())]);
            heads.push(Some(noun_at));
        }
        words.push(NOUNS[rng.random_range(0..NOUNS.len())]);
        heads.push(head_of_noun);
        noun_at
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> CorpusExample {
        let mut words = Vec::new();
        let mut heads: Vec<Head> = Vec::new();
        let subj = self.np(rng, &mut words, &mut heads, None);
        let verb = words.len();
        heads[subj] = Some(verb);
        words.push(VERBS[rng.random_range(0..VERBS.len())]);
        heads.push(None);
        self.np(rng, &mut words, &mut heads, Some(verb));
        let align = verb_final_alignment(&heads).expect("grammar emits one root");
        let n = words.len();
        let mut tgt = alloc::vec![String::new(); n];
        let mut tgt_heads: Vec<Head> = alloc::vec![None; n];
        for i in 0..n {
            tgt[align[i]] = words[i].1.to_string();
            tgt_heads[align[i]] = heads[i].map(|h| align[h]);
        }
        CorpusExample {
            src: words.iter().map(|w| w.0.to_string()).collect(),
            tgt,
            src_heads: heads,
            tgt_heads,
        }
    }

    /// `n` examples; rejects `max_len` below the longest grammatical sentence.
    pub fn generate(&self, n: usize, max_len: usize) -> Result<Vec<CorpusExample>> {
        if n == 0 {
            return Err(Error::Invalid("corpus size must be at least 1".into()));
        }
        if max_len < MAX_SENTENCE {
            return Err(Error::Invalid(format!(
                "max_len {max_len} is below the grammar's longest sentence ({MAX_SENTENCE})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..n).map(|_| self.sentence(&mut rng)).collect())
    }
}

/// Source position → target position when the root verb moves to the end.
pub fn verb_final_alignment(src_heads: &[Head]) -> Result<Vec<usize>> {
    let verb = src_heads
        .iter()
        .position(Option::is_none)
        .ok_or_else(|| Error::Invalid("sentence has no root".into()))?;
    let n = src_heads.len();
    Ok((0..n)
        .map(|i| match i.cmp(&verb) {
            core::cmp::Ordering::Less => i,
            core::cmp::Ordering::Equal => n - 1,
            core::cmp::Ordering::Greater => i - 1,
        })
        .collect())
}

/// Splits off the last `held` examples by index as the held-out set.
pub fn split_held_out<T: Clone>(examples: &[T], held: usize) -> (Vec<T>, Vec<T>) {
    let cut = examples.len().saturating_sub(held);
    (examples[..cut].to_vec(), examples[cut..].to_vec())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// The first three tokens must be the specials in order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Invalid(format!("vocab entry {i} must be {s}")));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocab entry {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Every id maps to one word, specials included, so positions stay
    /// aligned with head indices.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.word(i).to_string()).collect()
    }
}

/// An example mapped to ids, with its gold target graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub src_heads: Vec<Head>,
    pub tgt_heads: Vec<Head>,
    pub gold: SyntacticGraph,
}

impl EncodedExample {
    pub fn new(ex: &CorpusExample, vocab: &Vocab) -> Result<Self> {
        ex.validate()?;
        Ok(Self {
            src: vocab.encode(&ex.src),
            tgt: vocab.encode(&ex.tgt),
            src_heads: ex.src_heads.clone(),
            tgt_heads: ex.tgt_heads.clone(),
            gold: SyntacticGraph::gold(&ex.tgt_heads)?,
        })
    }
}

pub fn encode_all(examples: &[CorpusExample], vocab: &Vocab) -> Result<Vec<EncodedExample>> {
    examples.iter().map(|e| EncodedExample::new(e, vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_root_per_side() {
        let ex = &ToyGrammar::new(3).generate(1, 10).unwrap()[0];
        assert_eq!(ex.src_heads.iter().filter(|h| h.is_none()).count(), 1);
        assert_eq!(ex.tgt_heads.iter().filter(|h| h.is_none()).count(), 1);
        assert_eq!(ex.tgt_heads.last(), Some(&None));
    }

    #[test]
    fn verb_moves_last() {
        let g = ToyGrammar { seed: 0, adj_prob: 0.0 };
        let ex = &g.generate(1, 10).unwrap()[0];
        let dict = ToyGrammar::dictionary();
        assert_eq!(ex.src.len(), 5);
        let order = [0, 1, 3, 4, 2];
        for (ti, &si) in order.iter().enumerate() {
            assert_eq!(ex.tgt[ti], dict[ex.src[si].as_str()]);
        }
        assert!(VERBS.iter().any(|v| v.1 == ex.tgt[4]));
    }

    #[test]
    fn vocab_fits() {
        let v = ToyGrammar::vocab();
        assert!(v.len() <= 40);
        assert_eq!(v.id("<s>"), crate::decoder::BOS);
        assert_eq!(v.id("</s>"), crate::decoder::EOS);
        assert_eq!(v.id("nonsense"), UNK);
    }

    #[test]
    fn short_max_len_rejected() {
        assert!(ToyGrammar::new(0).generate(5, 6).is_err());
    }

    #[test]
    fn dictionary_is_bijective() {
        let d = ToyGrammar::dictionary();
        let mut targets: Vec<_> = d.values().collect();
        targets.sort();
        targets.dedup();
        assert_eq!(targets.len(), d.len());
    }

    #[test]
    fn split_takes_the_tail() {
        let v: Vec<u32> = (0..2200).collect();
        let (tr, ho) = split_held_out(&v, 200);
        assert_eq!((tr.len(), ho.len()), (2000, 200));
        assert_eq!(ho[0], 2000);
    }
}
