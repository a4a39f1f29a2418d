//! Toy text encoder: token embeddings + positional table + two frozen
//! self-attention layers.
//!
//! Base-token embeddings come from the vocabulary; concept tokens pull their
//! (learnable) embeddings from the registry, or from tape parameters during
//! training so gradients reach them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::concepts::{ConceptRegistry, PromptSpec, Token};
use crate::graph::{Graph, Var};
use crate::tensor::Mat;
use crate::{Error, Result, Scalar};

use super::{derive_seed, HEADS, LN_EPS, MAX_PROMPT_LEN};

struct AttnWeights<S> {
    q: Mat<S>,
    k: Mat<S>,
    v: Mat<S>,
    o: Mat<S>,
}

/// Frozen two-layer self-attention text encoder.
pub struct TextEncoder<S> {
    width: usize,
    positional: Mat<S>,
    layers: Vec<AttnWeights<S>>,
}

/// Tape handles for one concept's trainable embeddings.
#[derive(Clone, Copy, Debug)]
pub struct ConceptVars {
    pub concept: usize,
    pub v_rand: Var,
    pub v_class: Var,
}

impl<S: Scalar> TextEncoder<S> {
    /// Builds a frozen encoder; all weights derive from `seed`.
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 101));
        let std = (1.0 / width as f64).sqrt();
        let positional = Mat::randn(MAX_PROMPT_LEN, width, 0.0, 0.02, &mut rng);
        let layers = (0..2)
            .map(|_| AttnWeights {
                q: Mat::randn(width, width, 0.0, std, &mut rng),
                k: Mat::randn(width, width, 0.0, std, &mut rng),
                v: Mat::randn(width, width, 0.0, std, &mut rng),
                o: Mat::randn(width, width, 0.0, std, &mut rng),
            })
            .collect();
        TextEncoder { width, positional, layers }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Registers every concept's embeddings as trainable tape parameters.
    pub fn concept_params(
        g: &mut Graph<S>,
        registry: &ConceptRegistry<S>,
    ) -> Vec<ConceptVars> {
        registry
            .concepts()
            .iter()
            .enumerate()
            .map(|(i, c)| ConceptVars {
                concept: i,
                v_rand: g.param(c.v_rand.clone()),
                v_class: g.param(c.v_class.clone()),
            })
            .collect()
    }

    /// Encodes a prompt on the tape; concept tokens use `concept_vars` when
    /// provided (training) and registry constants otherwise. Output is the
    /// `len x width` text feature sequence `f_s`.
    pub fn encode_graph(
        &self,
        g: &mut Graph<S>,
        registry: &ConceptRegistry<S>,
        prompt: &PromptSpec,
        concept_vars: &[ConceptVars],
    ) -> Result<Var> {
        if prompt.is_empty() {
            return Err(Error::config("cannot encode an empty prompt"));
        }
        if prompt.len() > MAX_PROMPT_LEN {
            return Err(Error::config(format!(
                "prompt has {} tokens; the encoder supports at most {MAX_PROMPT_LEN}",
                prompt.len()
            )));
        }
        let rows: Vec<Var> = prompt
            .tokens
            .iter()
            .map(|tok| match *tok {
                Token::Base(id) => g.constant(registry.vocab().embedding(id)),
                Token::ConceptRand(c) => concept_vars
                    .iter()
                    .find(|v| v.concept == c)
                    .map(|v| v.v_rand)
                    .unwrap_or_else(|| g.constant(registry.concepts()[c].v_rand.clone())),
                Token::ConceptClass(c) => concept_vars
                    .iter()
                    .find(|v| v.concept == c)
                    .map(|v| v.v_class)
                    .unwrap_or_else(|| g.constant(registry.concepts()[c].v_class.clone())),
            })
            .collect();
        let seq = g.vstack(&rows);
        let pos = g.constant(Mat::from_fn(prompt.len(), self.width, |i, j| {
            self.positional[(i, j)]
        }));
        let mut x = g.add(seq, pos);
        for layer in &self.layers {
            let normed = g.layer_norm_row(x, S::of(LN_EPS));
            let attended = self.self_attention(g, normed, layer);
            x = g.add(x, attended);
        }
        Ok(g.layer_norm_row(x, S::of(LN_EPS)))
    }

    /// Pure evaluation of [`Self::encode_graph`] with registry constants.
    pub fn encode(&self, registry: &ConceptRegistry<S>, prompt: &PromptSpec) -> Result<Mat<S>> {
        let mut g = Graph::new();
        let out = self.encode_graph(&mut g, registry, prompt, &[])?;
        Ok(g.value(out).clone())
    }

    fn self_attention(&self, g: &mut Graph<S>, x: Var, w: &AttnWeights<S>) -> Var {
        let head_dim = self.width / HEADS;
        let scale = S::of(1.0 / (head_dim as f64).sqrt());
        let wq = g.constant(w.q.transpose());
        let wk = g.constant(w.k.transpose());
        let wv = g.constant(w.v.transpose());
        let wo = g.constant(w.o.transpose());
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let mut heads = Vec::with_capacity(HEADS);
        for h in 0..HEADS {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let scaled = g.scale(logits, scale);
            let probs = g.row_softmax(scaled);
            heads.push(g.matmul(probs, vh));
        }
        let merged = g.concat_cols(&heads);
        g.matmul(merged, wo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::Vocabulary;

    fn setup() -> (TextEncoder<f64>, ConceptRegistry<f64>) {
        let encoder = TextEncoder::new(32, 11);
        let mut reg = ConceptRegistry::new(Vocabulary::builtin(32, 11));
        reg.register_concept("dogA", "dog", 1).unwrap();
        (encoder, reg)
    }

    #[test]
    fn encoding_is_deterministic_and_length_shaped() {
        let (enc, reg) = setup();
        let prompt = reg.tokenize("a photo of <dogA>").unwrap();
        let a = enc.encode(&reg, &prompt).unwrap();
        let b = enc.encode(&reg, &prompt).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (5, 32));
        assert!(a.all_finite());
    }

    #[test]
    fn concept_embedding_changes_propagate() {
        // the bump must not be a uniform row shift: layer norm removes those
        let (enc, mut reg) = setup();
        let prompt = reg.tokenize("a photo of <dogA>").unwrap();
        let before = enc.encode(&reg, &prompt).unwrap();
        let mut bumped = reg.concepts()[0].v_rand.clone();
        bumped[(0, 0)] += 0.5;
        let v_class = reg.concepts()[0].v_class.clone();
        reg.set_embeddings(0, bumped, v_class);
        let after = enc.encode(&reg, &prompt).unwrap();
        assert!(before.max_abs_diff(&after) > 1e-6);
    }

    #[test]
    fn trainable_embeddings_receive_gradient() {
        let (enc, reg) = setup();
        let prompt = reg.tokenize("a photo of <dogA>").unwrap();
        let mut g = Graph::new();
        let vars = TextEncoder::concept_params(&mut g, &reg);
        let f_s = enc.encode_graph(&mut g, &reg, &prompt, &vars).unwrap();
        let loss = g.frob_sq(f_s);
        let grads = g.backward(loss);
        assert!(grads.get(vars[0].v_rand).is_some());
        assert!(grads.get(vars[0].v_class).is_some());
        assert!(grads.wrt(vars[0].v_rand, (1, 32)).max_abs() > 0.0);
    }

    #[test]
    fn over_long_prompts_are_rejected() {
        let (enc, reg) = setup();
        let long = vec!["photo"; MAX_PROMPT_LEN + 1].join(" ");
        let prompt = reg.tokenize(&long).unwrap();
        assert!(enc.encode(&reg, &prompt).is_err());
    }
}
