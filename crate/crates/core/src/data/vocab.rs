use std::collections::{BTreeMap, HashMap};

use super::RawDialog;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const START: usize = 2;
pub const END: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<start>", "<end>"];

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Dense token ↔ id map. Ids 0..4 are PAD, UNK, START, END; the remaining
/// words follow in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_words(std::iter::empty::<String>())
    }
}

impl Vocab {
    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words: all, index }
    }

    /// Words seen at least `min_count` times across the given texts.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in tokenize(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        Self::from_words(
            counts
                .into_iter()
                .filter(|(w, c)| *c >= min_count && !RESERVED.contains(&w.as_str()))
                .map(|(w, _)| w),
        )
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One word per line, reserved entries included.
    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    /// Inverse of [`Vocab::to_text`].
    pub fn from_text(text: &str) -> Option<Self> {
        let words: Vec<&str> = text.lines().collect();
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return None;
        }
        Some(Self::from_words(
            words[RESERVED.len()..].iter().map(|w| w.to_string()),
        ))
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined words, stopping at END and skipping PAD/START.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != END)
            .filter(|&&i| i != PAD && i != START)
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Vocabulary over captions, questions and answers of `train`.
pub fn build_vocab(train: &[RawDialog], min_count: usize) -> Vocab {
    let texts = train.iter().flat_map(|d| {
        std::iter::once(d.caption.as_str()).chain(
            d.rounds
                .iter()
                .flat_map(|r| [r.question.as_str(), r.answer.as_str()]),
        )
    });
    Vocab::from_texts(texts, min_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let v = Vocab::from_texts(["b a c a"], 1);
        assert_eq!(Vocab::from_text(&v.to_text()), Some(v));
        assert_eq!(Vocab::from_text("a\nb"), None);
    }

    #[test]
    fn reserved_ids_fixed() {
        let v = Vocab::default();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<end>"), END);
        assert_eq!(v.id("anything"), UNK);
    }

    #[test]
    fn min_count_threshold() {
        let once = ["alpha beta gamma", "delta"];
        assert_eq!(Vocab::from_texts(once, 5).len(), 4);
        let texts = vec!["red red red red red blue blue blue blue"];
        let v = Vocab::from_texts(texts, 5);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("red"), 4);
        assert_eq!(v.id("blue"), UNK);
    }

    #[test]
    fn tokenize_and_decode() {
        assert_eq!(
            tokenize("What color is the Circle?"),
            ["what", "color", "is", "the", "circle"]
        );
        let v = Vocab::from_texts(["a b a b a b a b a b"], 5);
        assert_eq!(
            v.decode(&[START, v.id("a"), v.id("b"), END, v.id("a")]),
            "a b"
        );
    }
}
