//! Single-concept disentangled training.
//!
//! Optimizes exactly four parameter groups — the concept's two token
//! embeddings, the per-layer adapters, and the image adapter — while the
//! base model stays frozen (checked by fingerprint). Each step draws a
//! timestep and noise, then combines four terms:
//!
//!   total = mse(eps_full) + lambda_w * mse(eps_text_only)
//!         + lambda_con * cos(f_i, pool(f_s)) + attention regularization
//!
//! where the full condition adds the image feature `f_i` to every text
//! feature row and the attention term reads the text-only pass's
//! cross-attention maps.

use std::collections::BTreeMap;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{extract_concept_tokens, ConceptRegistry};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::objectives::{
    attention_reg_graph, binarize_mask, contrastive_loss_graph, denoise_loss_graph,
    image_descriptor, luminance_fallback_mask, total_loss_graph, weak_denoise_loss_graph,
    aggregate_token_map_graph, ImageAdapter, LossTerms,
};
use crate::pipeline::checkpoint::{AdapterCheckpoint, TrainedConcept};
use crate::pipeline::config::RunConfig;
use crate::tensor::Mat;
use crate::testbed::text_encoder::ConceptVars;
use crate::testbed::{
    derive_seed, latent_from_image, Denoiser, DenoiserGraph, Schedule, SynthConceptDataset,
    TextEncoder, LATENT_PIXELS, TRAIN_TIMESTEPS,
};
use crate::Scalar;

// ---------------------------------------------------------------------------
// inputs
// ---------------------------------------------------------------------------

/// One training example; a missing mask needs explicit fallback consent.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem<S: Scalar> {
    /// `256 x 3` RGB in `[0, 1]`.
    pub image: Mat<S>,
    /// `256 x 1` foreground mask, if the dataset provides one.
    pub mask: Option<Mat<S>>,
    pub prompt: String,
}

/// Pulls one concept's items out of a dataset.
pub fn items_from_dataset<S: Scalar>(
    dataset: &SynthConceptDataset<S>,
    concept: &str,
) -> Result<Vec<TrainItem<S>>> {
    let items: Vec<TrainItem<S>> = dataset
        .for_concept(concept)
        .into_iter()
        .map(|it| TrainItem {
            image: it.image.clone(),
            mask: Some(it.mask.clone()),
            prompt: it.prompt.clone(),
        })
        .collect();
    if items.is_empty() {
        return Err(Error::data(format!("dataset has no items for concept '{concept}'")));
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// outputs
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    /// Schedule timestep drawn for this step.
    pub timestep: usize,
    pub terms: LossTerms,
}

/// Everything a training run produces.
pub struct TrainOutput<S: Scalar> {
    pub checkpoint: AdapterCheckpoint<S>,
    pub log: Vec<TrainLogEntry>,
    /// Base-model fingerprint, identical before and after by construction.
    pub theta0: [u8; 32],
}

impl<S: Scalar> TrainOutput<S> {
    /// Plain-text loss table, one row per step.
    pub fn log_table(&self) -> String {
        let mut out =
            String::from("step\ttimestep\tdenoise\tweak\tcontrastive\tattention\ttotal\n");
        for e in &self.log {
            out.push_str(&format!(
                "{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\n",
                e.step,
                e.timestep,
                e.terms.denoise,
                e.terms.weak,
                e.terms.contrastive,
                e.terms.attention,
                e.terms.total
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with per-tensor state keyed by parameter name.
struct Adam<S: Scalar> {
    lr: S,
    step: usize,
    first: BTreeMap<String, Mat<S>>,
    second: BTreeMap<String, Mat<S>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> Adam<S> {
    fn new(lr: f64) -> Self {
        Adam { lr: S::of(lr), step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Marks the start of one optimizer step (advances bias correction).
    fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Returns the updated value of one named tensor.
    fn update(&mut self, name: &str, value: &Mat<S>, grad: &Mat<S>) -> Mat<S> {
        let (b1, b2, eps) = (S::of(ADAM_BETA1), S::of(ADAM_BETA2), S::of(ADAM_EPS));
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| Mat::zeros(value.rows(), value.cols()));
        *m = m.scale(b1).add(&grad.scale(S::one() - b1));
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| Mat::zeros(value.rows(), value.cols()));
        *v = v.scale(b2).add(&grad.hadamard(grad).scale(S::one() - b2));
        let c1 = S::one() - S::of(ADAM_BETA1.powi(self.step as i32));
        let c2 = S::one() - S::of(ADAM_BETA2.powi(self.step as i32));
        let (m, v, lr) = (&self.first[name], &self.second[name], self.lr);
        Mat::from_fn(value.rows(), value.cols(), |i, j| {
            let m_hat = m[(i, j)] / c1;
            let v_hat = v[(i, j)] / c2;
            value[(i, j)] - lr * m_hat / (v_hat.sqrt() + eps)
        })
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// Trains one concept; returns the adapter checkpoint and per-step log.
///
/// Side effects: detaches any prior adapters from `den` and attaches fresh
/// ones, registers `concept` in `registry` if absent, and leaves both
/// holding the trained state.
pub fn train_single<S: Scalar>(
    config: &RunConfig,
    den: &mut Denoiser<S>,
    registry: &mut ConceptRegistry<S>,
    encoder: &TextEncoder<S>,
    concept: &str,
    class_word: &str,
    items: &[TrainItem<S>],
) -> Result<TrainOutput<S>> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::data(format!("no training items for concept '{concept}'")));
    }

    // resolve masks up front so consent problems surface before any compute
    let masks = resolve_masks(config, items)?;

    let seeds = &config.seeds;
    if registry.index_of(concept).is_none() {
        registry.register_concept(concept, class_word, derive_seed(seeds.train, 999))?;
    }
    let concept_idx = registry.index_of(concept).expect("registered above");

    den.detach_all();
    den.init_adapters(config.adapter.kind, config.adapter.factor, derive_seed(seeds.train, 1_000))?;
    let theta0 = den.theta0_fingerprint();

    let schedule = Schedule::<S>::new();
    let mut image_adapter = ImageAdapter::<S>::new(encoder.width());
    let mut adam = Adam::new(config.train.learning_rate);
    let mut log = Vec::with_capacity(config.train.steps);

    let latents: Vec<Mat<S>> = items.iter().map(|it| latent_from_image(&it.image)).collect();
    let descriptors: Vec<Mat<S>> = items.iter().map(|it| image_descriptor(&it.image)).collect();
    let prompts: Vec<_> =
        items.iter().map(|it| registry.tokenize(&it.prompt)).collect::<Result<Vec<_>>>()?;

    for step in 0..config.train.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seeds.train, step as u64));
        let pick = step % items.len();
        let t = rng.gen_range(0..TRAIN_TIMESTEPS);
        let eps = Mat::randn(LATENT_PIXELS, crate::testbed::LATENT_CHANNELS, 0.0, 1.0, &mut rng);
        let z_t = schedule.add_noise(&latents[pick], &eps, t);

        let mut g = Graph::new();
        let dg = DenoiserGraph::build(&mut g, den, true);
        let pair = &registry.concepts()[concept_idx];
        let concept_vars = [ConceptVars {
            concept: concept_idx,
            v_rand: g.param(pair.v_rand.clone()),
            v_class: g.param(pair.v_class.clone()),
        }];
        let (ia_w, ia_b) = image_adapter.params(&mut g);

        let f_s = encoder.encode_graph(&mut g, registry, &prompts[pick], &concept_vars)?;
        let desc = g.constant(descriptors[pick].clone());
        let f_i = ImageAdapter::forward_graph(&mut g, ia_w, ia_b, desc);
        let f_full = g.add_row_broadcast(f_s, f_i);

        let zv = g.constant(z_t);
        let eps_true = g.constant(eps);

        let full_pass = dg.forward(&mut g, zv, t, f_full, None);
        let denoise = denoise_loss_graph(&mut g, full_pass.eps, eps_true);

        let weak_pass = dg.forward(&mut g, zv, t, f_s, None);
        let weak =
            weak_denoise_loss_graph(&mut g, weak_pass.eps, eps_true, S::of(config.loss.lambda_w));

        let contrastive = contrastive_loss_graph(&mut g, f_i, f_s, S::of(config.loss.lambda_con));

        // attention regularization reads the text-only pass's maps
        let occurrences = extract_concept_tokens(&prompts[pick]);
        let mut rand_maps = Vec::new();
        let mut class_maps = Vec::new();
        let mut occ_masks = Vec::new();
        let mask_const = g.constant(masks[pick].clone());
        for occ in &occurrences {
            rand_maps.push(aggregate_token_map_graph(
                &mut g,
                &weak_pass.cross_probs,
                occ.rand_pos,
            )?);
            class_maps.push(aggregate_token_map_graph(
                &mut g,
                &weak_pass.cross_probs,
                occ.class_pos,
            )?);
            occ_masks.push(mask_const);
        }
        let attention =
            attention_reg_graph(&mut g, &rand_maps, &class_maps, &occ_masks, &config.loss)?;

        let loss = total_loss_graph(&mut g, denoise, weak, contrastive, attention);
        let grads = g.backward(loss.total);

        adam.begin_step();
        let mut stepped = |name: String, var: Var, g: &Graph<S>| -> Mat<S> {
            let value = g.value(var);
            let grad = grads.wrt(var, value.shape());
            adam.update(&name, value, &grad)
        };

        for (layer, vars) in dg.adapter_vars().clone() {
            let updated = match vars {
                crate::adapters::AdapterVars::KronaWed { a, b, m } => {
                    crate::adapters::Adapter::KronaWed(crate::adapters::KronaWedAdapter {
                        a: stepped(format!("{layer}.kron.A"), a, &g),
                        b: stepped(format!("{layer}.kron.B"), b, &g),
                        m: stepped(format!("{layer}.m"), m, &g),
                    })
                }
                crate::adapters::AdapterVars::Krona { a, b } => {
                    crate::adapters::Adapter::Krona(crate::adapters::KronaAdapter {
                        a: stepped(format!("{layer}.kron.A"), a, &g),
                        b: stepped(format!("{layer}.kron.B"), b, &g),
                    })
                }
                crate::adapters::AdapterVars::Lora { b, a } => {
                    crate::adapters::Adapter::Lora(crate::adapters::LoraAdapter {
                        a: stepped(format!("{layer}.lora.A"), a, &g),
                        b: stepped(format!("{layer}.lora.B"), b, &g),
                    })
                }
            };
            den.attach_adapter(&layer, updated)?;
        }
        let new_v_rand =
            stepped(format!("concept.{concept}.v_rand"), concept_vars[0].v_rand, &g);
        let new_v_class =
            stepped(format!("concept.{concept}.v_class"), concept_vars[0].v_class, &g);
        registry.set_embeddings(concept_idx, new_v_rand, new_v_class);
        image_adapter.w = stepped("image_adapter.w".to_string(), ia_w, &g);
        image_adapter.b = stepped("image_adapter.b".to_string(), ia_b, &g);

        let terms = LossTerms::from_graph(&g, &loss);
        debug!(
            "step {step}: t={t} denoise={:.5} weak={:.5} con={:.5} attn={:.6} total={:.5}",
            terms.denoise, terms.weak, terms.contrastive, terms.attention, terms.total
        );
        log.push(TrainLogEntry { step, timestep: t, terms });
    }

    assert_eq!(den.theta0_fingerprint(), theta0, "frozen base weights must not change");

    let pair = &registry.concepts()[concept_idx];
    let checkpoint = AdapterCheckpoint {
        kind: config.adapter.kind,
        factor: config.adapter.factor,
        adapters: den.adapters().clone(),
        concepts: vec![TrainedConcept {
            name: concept.to_string(),
            class_word: class_word.to_string(),
            v_rand: pair.v_rand.clone(),
            v_class: pair.v_class.clone(),
        }],
        image_adapter,
    };
    Ok(TrainOutput { checkpoint, log, theta0 })
}

/// Binarizes provided masks or, with consent, substitutes luminance masks.
fn resolve_masks<S: Scalar>(config: &RunConfig, items: &[TrainItem<S>]) -> Result<Vec<Mat<S>>> {
    let masks: Vec<Mat<S>> = items
        .iter()
        .enumerate()
        .map(|(i, item)| match &item.mask {
            Some(m) => Ok(binarize_mask(m)),
            None if config.train.allow_mask_fallback => {
                warn!("item {i} has no mask; using the luminance-threshold fallback");
                Ok(luminance_fallback_mask(&item.image))
            }
            None => Err(Error::data(format!(
                "item {i} has no mask; enable train.allow_mask_fallback to substitute \
                 a luminance-threshold mask"
            ))),
        })
        .collect::<Result<_>>()?;
    for (i, mask) in masks.iter().enumerate() {
        if mask.shape() != (LATENT_PIXELS, 1) {
            return Err(Error::data(format!(
                "item {i} mask has shape {:?}, expected ({LATENT_PIXELS}, 1)",
                mask.shape()
            )));
        }
    }
    Ok(masks)
}

/// Computes the training objective at one step's exact noise draw without
/// updating anything.
///
/// Replays the step's RNG (item pick, timestep, noise), so the result is
/// directly comparable with the logged entry for that step: evaluating an
/// untrained model at step 0 reproduces `log[0]`, and evaluating a trained
/// model at step 0 measures progress on identical conditions.
pub fn evaluate_objective<S: Scalar>(
    config: &RunConfig,
    den: &Denoiser<S>,
    registry: &ConceptRegistry<S>,
    encoder: &TextEncoder<S>,
    concept: &str,
    image_adapter: &ImageAdapter<S>,
    items: &[TrainItem<S>],
    step: usize,
) -> Result<LossTerms> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::data(format!("no training items for concept '{concept}'")));
    }
    let concept_idx = registry
        .index_of(concept)
        .ok_or_else(|| Error::config(format!("concept '{concept}' is not registered")))?;
    let masks = resolve_masks(config, items)?;
    let schedule = Schedule::<S>::new();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.train, step as u64));
    let pick = step % items.len();
    let t = rng.gen_range(0..TRAIN_TIMESTEPS);
    let eps = Mat::randn(LATENT_PIXELS, crate::testbed::LATENT_CHANNELS, 0.0, 1.0, &mut rng);
    let z_t = schedule.add_noise(&latent_from_image(&items[pick].image), &eps, t);

    let mut g = Graph::new();
    let dg = DenoiserGraph::build(&mut g, den, false);
    let pair = &registry.concepts()[concept_idx];
    let concept_vars = [ConceptVars {
        concept: concept_idx,
        v_rand: g.constant(pair.v_rand.clone()),
        v_class: g.constant(pair.v_class.clone()),
    }];
    let prompt = registry.tokenize(&items[pick].prompt)?;
    let f_s = encoder.encode_graph(&mut g, registry, &prompt, &concept_vars)?;
    let desc = g.constant(image_descriptor(&items[pick].image));
    let ia_w = g.constant(image_adapter.w.clone());
    let ia_b = g.constant(image_adapter.b.clone());
    let f_i = ImageAdapter::forward_graph(&mut g, ia_w, ia_b, desc);
    let f_full = g.add_row_broadcast(f_s, f_i);

    let zv = g.constant(z_t);
    let eps_true = g.constant(eps);
    let full_pass = dg.forward(&mut g, zv, t, f_full, None);
    let denoise = denoise_loss_graph(&mut g, full_pass.eps, eps_true);
    let weak_pass = dg.forward(&mut g, zv, t, f_s, None);
    let weak =
        weak_denoise_loss_graph(&mut g, weak_pass.eps, eps_true, S::of(config.loss.lambda_w));
    let contrastive = contrastive_loss_graph(&mut g, f_i, f_s, S::of(config.loss.lambda_con));

    let occurrences = extract_concept_tokens(&prompt);
    let mut rand_maps = Vec::new();
    let mut class_maps = Vec::new();
    let mut occ_masks = Vec::new();
    let mask_const = g.constant(masks[pick].clone());
    for occ in &occurrences {
        rand_maps.push(aggregate_token_map_graph(&mut g, &weak_pass.cross_probs, occ.rand_pos)?);
        class_maps.push(aggregate_token_map_graph(&mut g, &weak_pass.cross_probs, occ.class_pos)?);
        occ_masks.push(mask_const);
    }
    let attention = attention_reg_graph(&mut g, &rand_maps, &class_maps, &occ_masks, &config.loss)?;
    let loss = total_loss_graph(&mut g, denoise, weak, contrastive, attention);
    Ok(LossTerms::from_graph(&g, &loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::Vocabulary;
    use crate::testbed::{make_dataset, DatasetSpec, MODEL_DIM};

    fn quick_config(steps: usize) -> RunConfig {
        let mut config = RunConfig::default();
        config.train.steps = steps;
        config
    }

    fn stack(seed: u64) -> (Denoiser<f64>, ConceptRegistry<f64>, TextEncoder<f64>) {
        (
            Denoiser::new(seed),
            ConceptRegistry::new(Vocabulary::builtin(MODEL_DIM, seed)),
            TextEncoder::new(MODEL_DIM, seed),
        )
    }

    #[test]
    fn training_runs_and_logs_every_term() {
        let ds = make_dataset::<f64>(&DatasetSpec::default_pair(2), 11).unwrap();
        let items = items_from_dataset(&ds, "ciroA").unwrap();
        let (mut den, mut registry, encoder) = stack(7);
        let out = train_single(
            &quick_config(3),
            &mut den,
            &mut registry,
            &encoder,
            "ciroA",
            "circle",
            &items,
        )
        .unwrap();
        assert_eq!(out.log.len(), 3);
        for e in &out.log {
            assert!(e.terms.total.is_finite());
            assert!(e.terms.denoise > 0.0);
            assert!(e.terms.attention >= 0.0);
        }
        assert_eq!(out.checkpoint.concepts[0].name, "ciroA");
        assert_eq!(out.checkpoint.adapters.len(), crate::testbed::layer_ids().len());
        let table = out.log_table();
        assert_eq!(table.lines().count(), 4);
        assert!(table.starts_with("step\t"));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = make_dataset::<f64>(&DatasetSpec::default_pair(2), 11).unwrap();
        let items = items_from_dataset(&ds, "ciroA").unwrap();
        let run = || {
            let (mut den, mut registry, encoder) = stack(7);
            train_single(
                &quick_config(2),
                &mut den,
                &mut registry,
                &encoder,
                "ciroA",
                "circle",
                &items,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn missing_masks_need_consent() {
        let ds = make_dataset::<f64>(&DatasetSpec::default_pair(1), 11).unwrap();
        let mut items = items_from_dataset(&ds, "ciroA").unwrap();
        items[0].mask = None;
        let (mut den, mut registry, encoder) = stack(7);
        let err = train_single(
            &quick_config(1),
            &mut den,
            &mut registry,
            &encoder,
            "ciroA",
            "circle",
            &items,
        )
        .err()
        .unwrap();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("allow_mask_fallback"), "{err}");

        let mut config = quick_config(1);
        config.train.allow_mask_fallback = true;
        let (mut den, mut registry, encoder) = stack(7);
        train_single(&config, &mut den, &mut registry, &encoder, "ciroA", "circle", &items)
            .unwrap();
    }

    #[test]
    fn theta0_fingerprint_survives_training() {
        let ds = make_dataset::<f64>(&DatasetSpec::default_pair(1), 11).unwrap();
        let items = items_from_dataset(&ds, "ciroA").unwrap();
        let (mut den, mut registry, encoder) = stack(7);
        let before = den.theta0_fingerprint();
        let out = train_single(
            &quick_config(2),
            &mut den,
            &mut registry,
            &encoder,
            "ciroA",
            "circle",
            &items,
        )
        .unwrap();
        assert_eq!(out.theta0, before);
        assert_eq!(den.theta0_fingerprint(), before);
    }

    #[test]
    fn every_parameter_group_moves() {
        let ds = make_dataset::<f64>(&DatasetSpec::default_pair(1), 11).unwrap();
        let items = items_from_dataset(&ds, "ciroA").unwrap();
        let (mut den, mut registry, encoder) = stack(7);
        let out = train_single(
            &quick_config(2),
            &mut den,
            &mut registry,
            &encoder,
            "ciroA",
            "circle",
            &items,
        )
        .unwrap();
        // embeddings moved away from their frozen initialization
        let mut fresh = ConceptRegistry::new(Vocabulary::builtin(MODEL_DIM, 7));
        fresh
            .register_concept("ciroA", "circle", derive_seed(RunConfig::default().seeds.train, 999))
            .unwrap();
        let trained = &out.checkpoint.concepts[0];
        let init = fresh.get("ciroA").unwrap();
        assert!(trained.v_rand.max_abs_diff(&init.v_rand) > 0.0);
        assert!(trained.v_class.max_abs_diff(&init.v_class) > 0.0);
        // image adapter left zero init
        assert!(out.checkpoint.image_adapter.w.max_abs() > 0.0);
        // at least one adapter factor moved: effective weight differs from base
        let layer = "dec.cross.v";
        let w0 = den.base_weight(layer).unwrap();
        let eff = out.checkpoint.adapters[layer].effective_weight(w0);
        assert!(eff.max_abs_diff(w0) > 0.0);
    }

    #[test]
    fn objective_evaluation_replays_a_logged_step() {
        let ds = make_dataset::<f64>(&DatasetSpec::default_pair(2), 11).unwrap();
        let items = items_from_dataset(&ds, "ciroA").unwrap();
        let config = quick_config(1);
        let (mut den, mut registry, encoder) = stack(7);
        let out = train_single(
            &config,
            &mut den,
            &mut registry,
            &encoder,
            "ciroA",
            "circle",
            &items,
        )
        .unwrap();

        // rebuild the exact pre-step-0 state on a fresh stack
        let (mut den2, mut registry2, encoder2) = stack(7);
        registry2
            .register_concept("ciroA", "circle", derive_seed(config.seeds.train, 999))
            .unwrap();
        den2.init_adapters(
            config.adapter.kind,
            config.adapter.factor,
            derive_seed(config.seeds.train, 1_000),
        )
        .unwrap();
        let fresh_ia = ImageAdapter::new(encoder2.width());
        let terms = evaluate_objective(
            &config, &den2, &registry2, &encoder2, "ciroA", &fresh_ia, &items, 0,
        )
        .unwrap();
        assert_eq!(terms, out.log[0].terms);

        // the trained model scores differently on the same draw
        let after = evaluate_objective(
            &config,
            &den,
            &registry,
            &encoder,
            "ciroA",
            &out.checkpoint.image_adapter,
            &items,
            0,
        )
        .unwrap();
        assert_ne!(after.total, terms.total);
    }
}
