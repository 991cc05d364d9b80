//! The recipe grammar, its word-level vocabulary and token sequences.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

const SPECIALS: [&str; 3] = ["[PAD]", "[BOS]", "[EOS]"];

pub const INGREDIENTS: [&str; 20] = [
    "tomato", "onion", "garlic", "basil", "carrot", "potato", "chicken", "beef", "rice", "bean",
    "pepper", "mushroom", "spinach", "cheese", "egg", "lemon", "ginger", "corn", "pea", "leek",
];

/// Dish name by number of ingredients, starting at two.
const DISHES: [&str; 4] = ["salad", "stew", "soup", "casserole"];
const QUANTITIES: [&str; 4] = ["one", "two", "three", "four"];
const UNITS: [&str; 6] = ["cup", "spoon", "pinch", "handful", "slice", "gram"];
const VERBS: [&str; 6] = ["chop", "slice", "dice", "stir", "roast", "boil"];
const GLUE: [&str; 6] = ["heat", "the", "pan", "cook", "and", "serve"];

pub const MIN_INGREDIENTS: usize = 2;
pub const MAX_INGREDIENTS: usize = 5;

/// Title, ingredient lines and instruction lines for an ingredient subset
/// (indices into [`INGREDIENTS`], sorted, 2..=5 entries).
pub fn render_recipe(subset: &[usize]) -> (String, Vec<String>, Vec<String>) {
    debug_assert!((MIN_INGREDIENTS..=MAX_INGREDIENTS).contains(&subset.len()));
    let dish = DISHES[subset.len() - MIN_INGREDIENTS];
    let title = format!("{} {dish}", INGREDIENTS[subset[0]]);
    let ingredients = subset
        .iter()
        .map(|&i| {
            format!(
                "{} {} {}",
                INGREDIENTS[i],
                QUANTITIES[i % QUANTITIES.len()],
                UNITS[i % UNITS.len()]
            )
        })
        .collect();
    let mut instructions = vec!["heat the pan".to_string()];
    instructions.extend(
        subset
            .iter()
            .map(|&i| format!("{} the {}", VERBS[i % VERBS.len()], INGREDIENTS[i])),
    );
    instructions.push("cook and serve".to_string());
    (title, ingredients, instructions)
}

/// Word-level vocabulary: specials, grammar words, then `m` [IMG] tokens.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    img_tokens: usize,
}

impl Vocab {
    fn base_words() -> Vec<&'static str> {
        let mut words: Vec<&str> = SPECIALS.to_vec();
        for w in INGREDIENTS
            .iter()
            .chain(&DISHES)
            .chain(&QUANTITIES)
            .chain(&UNITS)
            .chain(&VERBS)
            .chain(&GLUE)
        {
            if !words.contains(w) {
                words.push(w);
            }
        }
        words
    }

    /// Number of base tokens the grammar produces (V).
    pub fn grammar_size() -> usize {
        Self::base_words().len()
    }

    pub fn new(img_tokens: usize) -> Self {
        let mut words: Vec<String> = Self::base_words().into_iter().map(String::from).collect();
        for j in 1..=img_tokens {
            words.push(format!("[IMG{j}]"));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self {
            words,
            index,
            img_tokens,
        }
    }

    /// V: base vocabulary size.
    pub fn base_size(&self) -> usize {
        self.words.len() - self.img_tokens
    }

    /// V + m.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn img_tokens(&self) -> usize {
        self.img_tokens
    }

    /// Id of `[IMG_j]`, `j` counted from 1.
    pub fn img(&self, j: usize) -> TokenId {
        assert!((1..=self.img_tokens).contains(&j), "no [IMG{j}] token");
        (self.base_size() + j - 1) as TokenId
    }

    pub fn is_img(&self, id: TokenId) -> bool {
        (id as usize) >= self.base_size() && (id as usize) < self.len()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })
    }

    /// Lowercases and splits on whitespace; every word must be known.
    pub fn encode_words(&self, text: &str) -> Result<Vec<TokenId>> {
        text.to_lowercase()
            .split_whitespace()
            .map(|w| self.id(w))
            .collect()
    }

    /// `[BOS] words [EOS]`.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let words = self.encode_words(text)?;
        Ok(TokenSequence::framed(&words))
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| self.word(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

/// Token ids framed as `[BOS] t_1 .. t_N [EOS]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn framed(words: &[TokenId]) -> Self {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(words);
        ids.push(EOS);
        Self(ids)
    }

    /// Wraps raw ids as given; no framing is added.
    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The content tokens with any leading [BOS] and trailing [EOS] removed.
    pub fn words(&self) -> &[TokenId] {
        let mut ids = &self.0[..];
        if ids.first() == Some(&BOS) {
            ids = &ids[1..];
        }
        if ids.last() == Some(&EOS) {
            ids = &ids[..ids.len() - 1];
        }
        ids
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn img_ids_follow_base_vocab() {
        let v = Vocab::new(8);
        assert_eq!(v.base_size(), Vocab::grammar_size());
        assert_eq!(v.len(), v.base_size() + 8);
        for j in 1..=8 {
            assert_eq!(v.img(j) as usize, v.base_size() + j - 1);
            assert!(v.is_img(v.img(j)));
        }
        assert!(!v.is_img(EOS));
        assert_eq!(v.word(v.img(3)).unwrap(), "[IMG3]");
    }

    #[test]
    fn every_rendered_word_is_in_vocab() {
        let v = Vocab::new(2);
        let (title, ings, steps) = render_recipe(&[0, 7, 13, 19]);
        for line in std::iter::once(title).chain(ings).chain(steps) {
            v.encode_words(&line).unwrap();
        }
    }

    #[test]
    fn template_mentions_each_ingredient() {
        let (_, ings, steps) = render_recipe(&[2, 11]);
        for name in ["garlic", "mushroom"] {
            assert!(ings.iter().any(|l| l.contains(name)));
            assert!(steps.iter().any(|l| l.contains(name)));
        }
    }

    #[test]
    fn unknown_word_is_named() {
        let v = Vocab::new(2);
        match v.encode("Tomato Quinoa") {
            Err(Error::UnknownWord(w)) => assert_eq!(w, "quinoa"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn framing_and_words() {
        let s = TokenSequence::framed(&[5, 6]);
        assert_eq!(s.ids(), &[BOS, 5, 6, EOS]);
        assert_eq!(s.words(), &[5, 6]);
    }
}
