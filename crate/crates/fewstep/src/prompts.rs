//! Toy prompt vocabulary and templates.
//!
//! Prompts are fixed token sequences of length 8 with exactly one placeholder
//! slot whose embedding is replaced by the concept embedding at conditioning
//! time. Non-placeholder tokens index a learned embedding table; the word
//! "sprite" is the domain's coarse descriptor and anchors the concept
//! embedding composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conditioning sequence length shared by every template.
pub const PROMPT_LEN: usize = 8;

/// Token vocabulary, indexed by position.
pub const VOCAB: &[&str] = &[
    "<pad>",
    "a",
    "photo",
    "of",
    "<concept>",
    "sprite",
    "on",
    "red",
    "green",
    "blue",
    "background",
    "rotated",
    "big",
    "small",
    "the",
];

pub const PAD: u16 = 0;
pub const CONCEPT_TOKEN: u16 = 4;
/// Index of the coarse domain descriptor ("sprite") in the vocabulary.
pub const DOMAIN_TOKEN: u16 = 5;

pub fn vocab_size() -> usize {
    VOCAB.len()
}

/// A fixed-length token sequence with a single concept slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: usize,
    pub token_ids: Vec<u16>,
    pub placeholder_index: usize,
}

impl PromptTemplate {
    fn new(id: usize, words: &[&str]) -> Self {
        let mut token_ids: Vec<u16> = words
            .iter()
            .map(|w| {
                VOCAB
                    .iter()
                    .position(|v| v == w)
                    .unwrap_or_else(|| panic!("word {w:?} missing from vocabulary")) as u16
            })
            .collect();
        token_ids.resize(PROMPT_LEN, PAD);
        let placeholder_index = token_ids
            .iter()
            .position(|&t| t == CONCEPT_TOKEN)
            .expect("template must contain the concept slot");
        let template = Self {
            id,
            token_ids,
            placeholder_index,
        };
        template.validate().expect("built-in template invalid");
        template
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_ids.len() != PROMPT_LEN {
            return Err(Error::contract(format!(
                "template length {} != {PROMPT_LEN}",
                self.token_ids.len()
            )));
        }
        let slots = self
            .token_ids
            .iter()
            .filter(|&&t| t == CONCEPT_TOKEN)
            .count();
        if slots != 1 {
            return Err(Error::contract(format!(
                "template must have exactly one concept slot, found {slots}"
            )));
        }
        if self.token_ids[self.placeholder_index] != CONCEPT_TOKEN {
            return Err(Error::contract("placeholder_index does not point at the slot"));
        }
        Ok(())
    }

    /// Background color this template asks for, when it names one.
    pub fn background_target(&self) -> Option<[f64; 3]> {
        match self.id {
            1 => Some([0.85, 0.1, 0.1]),
            2 => Some([0.1, 0.85, 0.1]),
            3 => Some([0.1, 0.1, 0.85]),
            _ => None,
        }
    }
}

/// The fixed pool of eight templates.
pub fn template_pool() -> Vec<PromptTemplate> {
    vec![
        PromptTemplate::new(0, &["a", "photo", "of", "<concept>"]),
        PromptTemplate::new(1, &["<concept>", "on", "red", "background"]),
        PromptTemplate::new(2, &["<concept>", "on", "green", "background"]),
        PromptTemplate::new(3, &["<concept>", "on", "blue", "background"]),
        PromptTemplate::new(4, &["rotated", "<concept>"]),
        PromptTemplate::new(5, &["a", "big", "<concept>"]),
        PromptTemplate::new(6, &["a", "small", "<concept>"]),
        PromptTemplate::new(7, &["the", "sprite", "<concept>"]),
    ]
}

pub fn template(id: usize) -> Result<PromptTemplate> {
    template_pool()
        .into_iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::contract(format!("unknown template id {id}")))
}
