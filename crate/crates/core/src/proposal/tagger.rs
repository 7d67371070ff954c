//! Part-of-speech tagging for noun extraction.

use std::collections::{HashMap, HashSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosTag {
    Noun,
    Verb,
    Adjective,
    Adverb,
    Determiner,
    Pronoun,
    Preposition,
    Conjunction,
    Other,
}

pub trait PosTagger {
    fn tag(&self, tokens: &[String]) -> Vec<PosTag>;
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Nouns of `text` in order of first appearance, lowercased, without duplicates.
pub fn extract_nouns(text: &str, tagger: &dyn PosTagger) -> Vec<String> {
    let tokens = tokenize(text);
    let tags = tagger.tag(&tokens);
    let mut seen = HashSet::new();
    tokens
        .into_iter()
        .zip(tags)
        .filter(|(_, t)| *t == PosTag::Noun)
        .filter_map(|(w, _)| seen.insert(w.clone()).then_some(w))
        .collect()
}

const NOUNS: &str = "man woman person people boy girl child kid baby player men women \
    banana apple orange hotdog pizza donut sandwich cake carrot broccoli food fruit \
    dog cat horse sheep cow bird elephant giraffe zebra bear animal puppy kitten \
    car bus truck bicycle bike motorcycle train boat airplane plane vehicle \
    table chair plate bowl cup bottle knife fork spoon glass \
    tree grass street road sky water field snow beach building house wall floor \
    room kitchen bathroom bedroom sink toilet bed couch window door \
    ball racket bat frisbee kite skateboard surfboard umbrella \
    hat shirt picture photo image color sport game shelf clock phone laptop";

const NON_NOUNS: &[(&str, PosTag)] = &[
    ("the", PosTag::Determiner),
    ("a", PosTag::Determiner),
    ("an", PosTag::Determiner),
    ("this", PosTag::Determiner),
    ("that", PosTag::Determiner),
    ("these", PosTag::Determiner),
    ("those", PosTag::Determiner),
    ("some", PosTag::Determiner),
    ("there", PosTag::Pronoun),
    ("it", PosTag::Pronoun),
    ("he", PosTag::Pronoun),
    ("she", PosTag::Pronoun),
    ("they", PosTag::Pronoun),
    ("what", PosTag::Pronoun),
    ("which", PosTag::Pronoun),
    ("who", PosTag::Pronoun),
    ("his", PosTag::Pronoun),
    ("her", PosTag::Pronoun),
    ("is", PosTag::Verb),
    ("are", PosTag::Verb),
    ("was", PosTag::Verb),
    ("be", PosTag::Verb),
    ("has", PosTag::Verb),
    ("have", PosTag::Verb),
    ("eating", PosTag::Verb),
    ("eats", PosTag::Verb),
    ("holding", PosTag::Verb),
    ("shown", PosTag::Verb),
    ("parked", PosTag::Verb),
    ("see", PosTag::Verb),
    ("can", PosTag::Verb),
    ("on", PosTag::Preposition),
    ("in", PosTag::Preposition),
    ("at", PosTag::Preposition),
    ("of", PosTag::Preposition),
    ("near", PosTag::Preposition),
    ("next", PosTag::Adjective),
    ("to", PosTag::Preposition),
    ("with", PosTag::Preposition),
    ("because", PosTag::Conjunction),
    ("and", PosTag::Conjunction),
    ("or", PosTag::Conjunction),
    ("clearly", PosTag::Adverb),
    ("visible", PosTag::Adjective),
    ("red", PosTag::Adjective),
    ("big", PosTag::Adjective),
    ("small", PosTag::Adjective),
];

const NOUN_SUFFIXES: &[&str] = &[
    "tion", "sion", "ment", "ness", "ity", "ance", "ence", "ship", "hood", "ism",
];

/// Deterministic tagger: a bundled noun list and closed-class word list,
/// with suffix rules for unknown words.
#[derive(Clone, Debug)]
pub struct LexiconTagger {
    nouns: HashSet<String>,
    others: HashMap<String, PosTag>,
}

impl LexiconTagger {
    pub fn bundled() -> Self {
        LexiconTagger {
            nouns: NOUNS.split_whitespace().map(str::to_string).collect(),
            others: NON_NOUNS.iter().map(|&(w, t)| (w.to_string(), t)).collect(),
        }
    }

    pub fn with_nouns<I, S>(mut self, nouns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.nouns.extend(nouns.into_iter().map(Into::into));
        self
    }

    fn tag_word(&self, w: &str) -> PosTag {
        if let Some(&t) = self.others.get(w) {
            return t;
        }
        if self.nouns.contains(w) {
            return PosTag::Noun;
        }
        if let Some(stem) = w.strip_suffix('s') {
            if self.nouns.contains(stem) {
                return PosTag::Noun;
            }
        }
        if NOUN_SUFFIXES
            .iter()
            .any(|s| w.len() > s.len() + 2 && w.ends_with(s))
        {
            return PosTag::Noun;
        }
        if w.ends_with("ly") {
            PosTag::Adverb
        } else if w.ends_with("ing") || w.ends_with("ed") {
            PosTag::Verb
        } else {
            PosTag::Other
        }
    }
}

impl Default for LexiconTagger {
    fn default() -> Self {
        Self::bundled()
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Vec<PosTag> {
        tokens.iter().map(|w| self.tag_word(w)).collect()
    }
}
