//! Decomposed concept tokens and prompt handling.
//!
//! A personalized concept is represented by two learnable tokens appended to
//! the base vocabulary: `V_rand` (initialized as class embedding plus small
//! noise) and `V_class` (initialized as a copy of the class word embedding).
//! In prompt text a concept is written `<name>` and expands to the two-token
//! sequence. Base token ids never move when concepts are added.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Mat;
use crate::{Error, Result, Scalar};

/// Std of the Gaussian noise added to the class embedding for `V_rand`.
pub const V_RAND_NOISE_STD: f64 = 0.01;

/// Words the toy text encoder ships with.
pub const BASE_WORDS: &[&str] = &[
    "a", "an", "the", "of", "and", "on", "in", "at", "by", "to", "with", "next", "photo",
    "picture", "image", "advertising", "holding", "beside", "above", "background", "scene",
    "beach", "grass", "sky", "wall", "circle", "square", "triangle", "star", "cross", "ring",
    "glyph", "shape", "dog", "cat", "man", "woman", "clock", "red", "green", "blue", "yellow",
    "purple", "orange", "white", "black", "small", "large", "two", "plain",
];

/// Frozen base vocabulary with its embedding table.
pub struct Vocabulary<S> {
    words: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Mat<S>,
}

impl<S: Scalar> Vocabulary<S> {
    /// Builds the built-in vocabulary with a seeded embedding table.
    pub fn builtin(width: usize, seed: u64) -> Self {
        let words: Vec<String> = BASE_WORDS.iter().map(|w| w.to_string()).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = Mat::randn(words.len(), width, 0.0, 0.02, &mut rng);
        Vocabulary { words, index, embeddings }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Embedding width.
    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    /// Token id of a word, if present.
    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Embedding row of a base token as a `1 x width` matrix.
    pub fn embedding(&self, id: usize) -> Mat<S> {
        self.embeddings.row_mat(id)
    }

    /// The full base table, one row per token.
    pub fn table(&self) -> &Mat<S> {
        &self.embeddings
    }
}

/// The two learned tokens of one registered concept.
#[derive(Clone, Debug)]
pub struct ConceptTokenPair<S: Scalar> {
    pub name: String,
    pub class_word: String,
    /// Learnable "adjective" embedding, `1 x width`.
    pub v_rand: Mat<S>,
    /// Learnable "noun" embedding initialized from the class word, `1 x width`.
    pub v_class: Mat<S>,
    /// Token id of `V_rand` (above the base vocabulary).
    pub rand_id: usize,
    /// Token id of `V_class`.
    pub class_id: usize,
}

/// One token of a tokenized prompt.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Token {
    /// Base-vocabulary token id.
    Base(usize),
    /// `V_rand` of the concept at the given registry index.
    ConceptRand(usize),
    /// `V_class` of the concept at the given registry index.
    ConceptClass(usize),
}

/// A concept appearing in a prompt, with its token positions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConceptOccurrence {
    /// Registry index of the concept.
    pub concept: usize,
    /// Sequence position of the `V_rand` token.
    pub rand_pos: usize,
    /// Sequence position of the `V_class` token.
    pub class_pos: usize,
}

/// A tokenized prompt with resolved concept slots.
#[derive(Clone, Debug)]
pub struct PromptSpec {
    pub text: String,
    pub tokens: Vec<Token>,
    occurrences: Vec<ConceptOccurrence>,
}

impl PromptSpec {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Base vocabulary plus registered concepts.
pub struct ConceptRegistry<S: Scalar> {
    vocab: Vocabulary<S>,
    concepts: Vec<ConceptTokenPair<S>>,
}

impl<S: Scalar> ConceptRegistry<S> {
    pub fn new(vocab: Vocabulary<S>) -> Self {
        ConceptRegistry { vocab, concepts: Vec::new() }
    }

    pub fn vocab(&self) -> &Vocabulary<S> {
        &self.vocab
    }

    pub fn concepts(&self) -> &[ConceptTokenPair<S>] {
        &self.concepts
    }

    /// Total token count: base vocabulary plus two per concept.
    pub fn total_tokens(&self) -> usize {
        self.vocab.len() + 2 * self.concepts.len()
    }

    /// Registry index of a concept by name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ConceptTokenPair<S>> {
        self.concepts.iter().find(|c| c.name == name)
    }

    /// Adds a concept: two new tokens above the base vocabulary, `v_class`
    /// copying the class word embedding and `v_rand` jittered around it.
    pub fn register_concept(
        &mut self,
        name: &str,
        class_word: &str,
        seed: u64,
    ) -> Result<&ConceptTokenPair<S>> {
        if self.index_of(name).is_some() {
            return Err(Error::config(format!("concept '{name}' is already registered")));
        }
        let class_id = self
            .vocab
            .id_of(class_word)
            .ok_or_else(|| Error::config(format!("class word '{class_word}' not in vocabulary")))?;
        let v_class = self.vocab.embedding(class_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Mat::randn(1, self.vocab.width(), 0.0, V_RAND_NOISE_STD, &mut rng);
        let v_rand = v_class.add(&noise);
        let base = self.total_tokens();
        self.concepts.push(ConceptTokenPair {
            name: name.to_string(),
            class_word: class_word.to_string(),
            v_rand,
            v_class,
            rand_id: base,
            class_id: base + 1,
        });
        Ok(self.concepts.last().unwrap())
    }

    /// Restores a concept record from a checkpoint, keeping id assignment
    /// identical to a fresh registration order.
    pub fn restore_concept(
        &mut self,
        name: &str,
        class_word: &str,
        v_rand: Mat<S>,
        v_class: Mat<S>,
    ) -> Result<()> {
        if self.index_of(name).is_some() {
            return Err(Error::data(format!("concept '{name}' restored twice")));
        }
        if v_rand.shape() != (1, self.vocab.width()) || v_class.shape() != (1, self.vocab.width())
        {
            return Err(Error::data(format!(
                "concept '{name}' embeddings do not match encoder width {}",
                self.vocab.width()
            )));
        }
        let base = self.total_tokens();
        self.concepts.push(ConceptTokenPair {
            name: name.to_string(),
            class_word: class_word.to_string(),
            v_rand,
            v_class,
            rand_id: base,
            class_id: base + 1,
        });
        Ok(())
    }

    /// Writes back updated embeddings after an optimizer step.
    pub fn set_embeddings(&mut self, concept: usize, v_rand: Mat<S>, v_class: Mat<S>) {
        self.concepts[concept].v_rand = v_rand;
        self.concepts[concept].v_class = v_class;
    }

    /// Tokenizes whitespace-separated text; `<name>` expands to the
    /// concept's two tokens.
    pub fn tokenize(&self, text: &str) -> Result<PromptSpec> {
        let mut tokens = Vec::new();
        let mut occurrences = Vec::new();
        for piece in text.split_whitespace() {
            if let Some(name) = piece.strip_prefix('<').and_then(|p| p.strip_suffix('>')) {
                let concept = self.index_of(name).ok_or_else(|| {
                    Error::config(format!("prompt references unregistered concept '{name}'"))
                })?;
                occurrences.push(ConceptOccurrence {
                    concept,
                    rand_pos: tokens.len(),
                    class_pos: tokens.len() + 1,
                });
                tokens.push(Token::ConceptRand(concept));
                tokens.push(Token::ConceptClass(concept));
            } else {
                let id = self.vocab.id_of(piece).ok_or_else(|| {
                    Error::config(format!("word '{piece}' not in vocabulary"))
                })?;
                tokens.push(Token::Base(id));
            }
        }
        Ok(PromptSpec { text: text.to_string(), tokens, occurrences })
    }

    /// The literal reference prompt for one concept: `a photo of <name>`.
    pub fn make_reference_prompt(&self, name: &str) -> Result<PromptSpec> {
        if self.index_of(name).is_none() {
            return Err(Error::config(format!("concept '{name}' is not registered")));
        }
        self.tokenize(&format!("a photo of <{name}>"))
    }
}

/// Concepts appearing in the prompt, first-appearance order, deduplicated.
pub fn extract_concept_tokens(prompt: &PromptSpec) -> Vec<ConceptOccurrence> {
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for occ in &prompt.occurrences {
        if !seen.contains(&occ.concept) {
            seen.push(occ.concept);
            out.push(*occ);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> ConceptRegistry<f64> {
        ConceptRegistry::new(Vocabulary::builtin(16, 7))
    }

    #[test]
    fn register_grows_vocabulary_by_two() {
        let mut reg = registry();
        let before = reg.total_tokens();
        reg.register_concept("dogA", "dog", 1).unwrap();
        assert_eq!(reg.total_tokens(), before + 2);
    }

    #[test]
    fn v_class_copies_the_class_embedding() {
        let mut reg = registry();
        let dog = reg.vocab().embedding(reg.vocab().id_of("dog").unwrap());
        reg.register_concept("dogA", "dog", 1).unwrap();
        let pair = reg.get("dogA").unwrap();
        assert_eq!(pair.v_class, dog);
        // v_rand stays close to, but distinct from, the class embedding
        let dist = pair.v_rand.max_abs_diff(&dog);
        assert!(dist > 0.0 && dist < 0.1, "v_rand offset {dist}");
    }

    #[test]
    fn duplicate_and_unknown_registrations_fail() {
        let mut reg = registry();
        reg.register_concept("dogA", "dog", 1).unwrap();
        assert!(reg.register_concept("dogA", "dog", 2).is_err());
        assert!(reg.register_concept("x", "xylophone", 3).is_err());
    }

    #[test]
    fn extraction_preserves_appearance_order() {
        let mut reg = registry();
        reg.register_concept("manA", "man", 1).unwrap();
        reg.register_concept("clockB", "clock", 2).unwrap();
        let prompt = reg.tokenize("<manA> advertising <clockB>").unwrap();
        let found = extract_concept_tokens(&prompt);
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].concept, reg.index_of("manA").unwrap());
        assert_eq!(found[1].concept, reg.index_of("clockB").unwrap());
        assert_eq!((found[0].rand_pos, found[0].class_pos), (0, 1));
        assert_eq!((found[1].rand_pos, found[1].class_pos), (3, 4));
    }

    #[test]
    fn plain_prompt_extracts_nothing() {
        let mut reg = registry();
        reg.register_concept("dogA", "dog", 1).unwrap();
        let prompt = reg.tokenize("a photo of a beach").unwrap();
        assert!(extract_concept_tokens(&prompt).is_empty());
        assert_eq!(prompt.len(), 5);
    }

    #[test]
    fn reference_prompt_round_trips() {
        let mut reg = registry();
        reg.register_concept("dogA", "dog", 1).unwrap();
        reg.register_concept("catB", "cat", 2).unwrap();
        for name in ["dogA", "catB"] {
            let prompt = reg.make_reference_prompt(name).unwrap();
            let found = extract_concept_tokens(&prompt);
            assert_eq!(found.len(), 1);
            assert_eq!(found[0].concept, reg.index_of(name).unwrap());
            // "a photo of" + the two concept tokens
            assert_eq!(prompt.len(), 5);
        }
        assert!(reg.make_reference_prompt("ghost").is_err());
    }

    #[test]
    fn adding_concepts_never_moves_existing_ids() {
        let mut reg = registry();
        let photo_id = reg.vocab().id_of("photo").unwrap();
        reg.register_concept("dogA", "dog", 1).unwrap();
        let dog_rand = reg.get("dogA").unwrap().rand_id;
        reg.register_concept("catB", "cat", 2).unwrap();
        assert_eq!(reg.vocab().id_of("photo").unwrap(), photo_id);
        assert_eq!(reg.get("dogA").unwrap().rand_id, dog_rand);
        assert!(reg.get("catB").unwrap().rand_id > dog_rand);
    }

    #[test]
    fn unknown_placeholder_is_rejected() {
        let reg = registry();
        assert!(reg.tokenize("a photo of <ghost>").is_err());
    }
}
