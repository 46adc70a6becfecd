//! Synthetic attribute-rich item corpus: records, the attribute-statement
//! template, tokenization, vocabulary, and model text input construction.

mod generator;
mod io;

pub use generator::{
    generate_corpus, render_image, GeneratorConfig, RenderJitter, CATEGORIES, COLORS,
    COMPOSITIONS, GENDERS, SEASONS, STYLES, SUBCATEGORIES,
};
pub use io::{load_corpus, load_vocabulary, save_corpus, save_vocabulary};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six attributes every item carries, in the fixed statement order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributeName {
    Title,
    Category,
    Subcategory,
    Gender,
    Composition,
    Season,
}

impl AttributeName {
    pub const ALL: [AttributeName; 6] = [
        AttributeName::Title,
        AttributeName::Category,
        AttributeName::Subcategory,
        AttributeName::Gender,
        AttributeName::Composition,
        AttributeName::Season,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeName::Title => "title",
            AttributeName::Category => "category",
            AttributeName::Subcategory => "subcategory",
            AttributeName::Gender => "gender",
            AttributeName::Composition => "composition",
            AttributeName::Season => "season",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|a| a.as_str() == name)
            .copied()
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|a| *a == self).expect("member")
    }
}

/// Values of the six attributes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub title: String,
    pub category: String,
    pub subcategory: String,
    pub gender: String,
    pub composition: String,
    pub season: String,
}

impl Attributes {
    pub fn get(&self, name: AttributeName) -> &str {
        match name {
            AttributeName::Title => &self.title,
            AttributeName::Category => &self.category,
            AttributeName::Subcategory => &self.subcategory,
            AttributeName::Gender => &self.gender,
            AttributeName::Composition => &self.composition,
            AttributeName::Season => &self.season,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (AttributeName, &str)> {
        AttributeName::ALL.iter().map(move |&n| (n, self.get(n)))
    }
}

/// HxWxC image with unit-interval intensities, row-major, channels innermost.
///
/// Pixel values are exactly representable in f32 so the on-disk format
/// round-trips losslessly.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Per-channel mean intensity, computed by a full pixel scan.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = (self.height * self.width) as f64;
        sums.iter().map(|s| s / n).collect()
    }
}

/// One fashion item: identifier, rendered image, free-text description, and
/// the six named attributes.
#[derive(Debug, Clone)]
pub struct ItemRecord {
    pub item_id: String,
    pub image: Image,
    pub description: String,
    pub attributes: Attributes,
}

/// Renders one attribute statement: `The image <name> is <value>.`
pub fn render_attribute_statement(attribute_name: &str, value: &str) -> Result<String> {
    let name = AttributeName::parse(attribute_name)?;
    if value.trim().is_empty() {
        return Err(Error::invalid(format!(
            "empty value for attribute `{}`",
            name.as_str()
        )));
    }
    Ok(format!("The image {} is {}.", name.as_str(), value))
}

/// Inverse of [`render_attribute_statement`]; returns `(name, value)` when
/// the statement matches the template exactly.
pub fn parse_attribute_statement(statement: &str) -> Option<(String, String)> {
    let rest = statement.strip_prefix("The image ")?;
    let rest = rest.strip_suffix('.')?;
    let (name, value) = rest.split_once(" is ")?;
    if name.contains(' ') || value.is_empty() {
        return None;
    }
    Some((name.to_string(), value.to_string()))
}

/// Word-level tokenizer: lowercase, whitespace split, terminal period split
/// off as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        if let Some(word) = lower.strip_suffix('.') {
            if !word.is_empty() {
                out.push(word.to_string());
            }
            out.push(".".to_string());
        } else {
            out.push(lower);
        }
    }
    out
}

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

const SPECIALS: [&str; 5] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN];

/// Token <-> id map with dense ids; specials occupy the first five ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk_id())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn cls_id(&self) -> usize {
        2
    }

    pub fn sep_id(&self) -> usize {
        3
    }

    pub fn mask_id(&self) -> usize {
        4
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }
}

/// Builds the vocabulary covering every word of every description and
/// rendered statement, ordered by first occurrence after the specials.
pub fn build_vocabulary(corpus: &[ItemRecord]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
    let add_text = |text: &str, tokens: &mut Vec<String>, seen: &mut HashMap<String, ()>| {
        for tok in tokenize(text) {
            if !seen.contains_key(&tok) {
                seen.insert(tok.clone(), ());
                tokens.push(tok);
            }
        }
    };
    for item in corpus {
        add_text(&item.description, &mut tokens, &mut seen);
        for (name, value) in item.attributes.iter() {
            let statement = render_attribute_statement(name.as_str(), value)?;
            add_text(&statement, &mut tokens, &mut seen);
        }
    }
    Vocabulary::from_tokens(tokens)
}

/// Half-open token index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.start..self.end
    }
}

/// The model's textual input: token ids plus span bookkeeping for the
/// description and each attribute's value words.
#[derive(Debug, Clone)]
pub struct TextInput {
    pub tokens: Vec<usize>,
    pub description_span: Span,
    pub attribute_spans: [Span; 6],
}

impl TextInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn attribute_span(&self, name: AttributeName) -> Span {
        self.attribute_spans[name.index()]
    }
}

/// Assembles `[CLS] description [SEP] statement x6` with value spans.
///
/// Statements follow the fixed attribute order; words missing from the
/// vocabulary map to the UNK id.
pub fn build_text_input(item: &ItemRecord, vocab: &Vocabulary) -> Result<TextInput> {
    let desc_words = tokenize(&item.description);
    if desc_words.is_empty() {
        return Err(Error::invalid(format!(
            "item `{}` has an empty description",
            item.item_id
        )));
    }
    let mut tokens = vec![vocab.cls_id()];
    let desc_start = tokens.len();
    for w in &desc_words {
        tokens.push(vocab.id_or_unk(w));
    }
    let description_span = Span {
        start: desc_start,
        end: tokens.len(),
    };
    tokens.push(vocab.sep_id());

    let mut attribute_spans = [Span { start: 0, end: 0 }; 6];
    for (name, value) in item.attributes.iter() {
        let statement = render_attribute_statement(name.as_str(), value)?;
        let words = tokenize(&statement);
        // template prefix: "the image <name> is", suffix: "."
        let value_len = words.len() - 5;
        let prefix = &words[..4];
        for w in prefix {
            tokens.push(vocab.id_or_unk(w));
        }
        let start = tokens.len();
        for w in &words[4..4 + value_len] {
            tokens.push(vocab.id_or_unk(w));
        }
        attribute_spans[name.index()] = Span {
            start,
            end: tokens.len(),
        };
        tokens.push(vocab.id_or_unk("."));
    }

    Ok(TextInput {
        tokens,
        description_span,
        attribute_spans,
    })
}


#[cfg(test)]
mod property_tests {
    use super::*;
    use proptest::prelude::*;

    fn word() -> impl Strategy<Value = String> {
        "[a-z]{1,10}"
    }

    proptest! {
        // parsing a rendered statement recovers (name, value) exactly
        #[test]
        fn template_round_trip(name_idx in 0usize..6, words in proptest::collection::vec(word(), 1..5)) {
            let name = AttributeName::ALL[name_idx];
            let value = words.join(" ");
            let statement = render_attribute_statement(name.as_str(), &value).unwrap();
            let (got_name, got_value) = parse_attribute_statement(&statement).unwrap();
            prop_assert_eq!(got_name, name.as_str());
            prop_assert_eq!(got_value, value);
        }

        // tokenization never produces empty tokens and keeps periods separate
        #[test]
        fn tokenizer_well_formed(words in proptest::collection::vec(word(), 1..8)) {
            let text = format!("{}.", words.join(" "));
            let tokens = tokenize(&text);
            prop_assert!(tokens.iter().all(|t| !t.is_empty()));
            prop_assert_eq!(tokens.last().map(|s| s.as_str()), Some("."));
            prop_assert_eq!(tokens.len(), words.len() + 1);
        }
    }

    #[test]
    fn template_idempotent_over_generated_corpus() {
        let corpus = generate_corpus(&GeneratorConfig::with_total(16, 16, 4), 99).unwrap();
        for item in &corpus {
            for (name, value) in item.attributes.iter() {
                let statement = render_attribute_statement(name.as_str(), value).unwrap();
                let (n, v) = parse_attribute_statement(&statement).unwrap();
                assert_eq!(n, name.as_str());
                assert_eq!(v, value);
            }
        }
    }
}
