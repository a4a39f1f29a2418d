//! Single- and multi-concept generation drivers.
//!
//! Multi-concept generation runs one plain reference branch per extracted
//! concept alongside the composite target branch, all on the same fused
//! model and timestep grid. Per step, in order:
//!
//! 1. layout guidance nudges the target latent so each concept's refined
//!    cross-attention map stays close to its anchor (captured at step 0),
//! 2. every branch runs a plain denoiser pass,
//! 3. inside the injection window, reference value features cached from the
//!    previous step are warped onto the target grid along the semantic flow
//!    and substituted into the decoder self-attention,
//! 4. all branches take their DDIM update.
//!
//! Concept masks come from the current target pass (min-max normalized
//! mean of the concept's two token maps); reference descriptors and values
//! come from the immediately preceding step.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::concepts::{extract_concept_tokens, ConceptOccurrence, ConceptRegistry};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layout::{
    decay_schedule, guidance_step, layout_loss, layout_loss_graph, refine_activation,
    refine_activation_graph,
};
use crate::objectives::{aggregate_token_map, aggregate_token_map_graph};
use crate::pipeline::config::RunConfig;
use crate::sama::{
    aggregate_values, concept_mask, concept_mask_graph, cost_volume, sama_active, semantic_flow,
    warp_values,
};
use crate::tensor::Mat;
use crate::testbed::{
    derive_seed, evaluate_denoiser, image_from_latent, latent_from_image, Denoiser, DenoiserGraph,
    Interventions, Sampler, Schedule, StepCaptures, TextEncoder, Trajectory, LATENT_CHANNELS,
    LATENT_PIXELS,
};
use crate::Scalar;

// ---------------------------------------------------------------------------
// single concept
// ---------------------------------------------------------------------------

/// A finished single-prompt generation.
pub struct SingleOutput<S: Scalar> {
    /// `256 x 3` RGB decode of the final latent.
    pub image: Mat<S>,
    pub trajectory: Trajectory<S>,
}

/// Plain deterministic sampling for one prompt.
pub fn generate_single<S: Scalar>(
    den: &Denoiser<S>,
    registry: &ConceptRegistry<S>,
    encoder: &TextEncoder<S>,
    prompt: &str,
    seed: u64,
    steps: usize,
) -> Result<SingleOutput<S>> {
    let spec = registry.tokenize(prompt)?;
    let f_s = encoder.encode(registry, &spec)?;
    let sampler = Sampler::new(steps)?;
    let trajectory = sampler.sample(den, &f_s, seed, &mut Interventions::none())?;
    Ok(SingleOutput { image: image_from_latent(&trajectory.final_latent), trajectory })
}

/// Fraction of the identity token's cross-attention mass falling outside a
/// foreground mask, averaged over concept occurrences and timesteps.
///
/// Evaluated on noised versions of a reference image so the mask stays
/// meaningful; lower is better-localized attention.
pub fn off_mask_attention_mass<S: Scalar>(
    den: &Denoiser<S>,
    registry: &ConceptRegistry<S>,
    encoder: &TextEncoder<S>,
    prompt: &str,
    image: &Mat<S>,
    mask: &Mat<S>,
    timesteps: &[usize],
    seed: u64,
) -> Result<f64> {
    let spec = registry.tokenize(prompt)?;
    let occurrences = extract_concept_tokens(&spec);
    if occurrences.is_empty() {
        return Err(Error::config("prompt contains no registered concepts"));
    }
    if timesteps.is_empty() {
        return Err(Error::config("need at least one evaluation timestep"));
    }
    if mask.shape() != (LATENT_PIXELS, 1) {
        return Err(Error::config(format!(
            "mask shape {:?} does not match the latent grid",
            mask.shape()
        )));
    }
    let f_s = encoder.encode(registry, &spec)?;
    let schedule = Schedule::<S>::new();
    let x0 = latent_from_image(image);
    let mut total = 0.0;
    let mut count = 0.0;
    for (j, &t) in timesteps.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, j as u64));
        let eps = Mat::randn(LATENT_PIXELS, LATENT_CHANNELS, 0.0, 1.0, &mut rng);
        let z_t = schedule.add_noise(&x0, &eps, t);
        let caps = evaluate_denoiser(den, &z_t, t, &f_s, None);
        for occ in &occurrences {
            let map = aggregate_token_map(&caps.cross_probs, occ.rand_pos)?;
            let all: S = map.sum();
            if all > S::zero() {
                let off: S = (0..map.rows())
                    .map(|x| map[(x, 0)] * (S::one() - mask[(x, 0)]))
                    .sum();
                total += (off / all).to_f64();
            }
            count += 1.0;
        }
    }
    Ok(total / count)
}

// ---------------------------------------------------------------------------
// multi-concept options and diagnostics
// ---------------------------------------------------------------------------

/// Which captured feature field drives the semantic matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescriptorField {
    /// Decoder block input (default).
    DecInput,
    /// Decoder self-attention queries.
    DecQ,
    /// Decoder self-attention keys.
    DecK,
}

impl DescriptorField {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "dec-input" => Ok(DescriptorField::DecInput),
            "dec-q" => Ok(DescriptorField::DecQ),
            "dec-k" => Ok(DescriptorField::DecK),
            other => Err(Error::config(format!(
                "descriptor field '{other}' is not one of {:?}",
                crate::pipeline::config::DESCRIPTOR_FIELDS
            ))),
        }
    }

    fn pick<'a, S: Scalar>(self, caps: &'a StepCaptures<S>) -> &'a Mat<S> {
        match self {
            DescriptorField::DecInput => &caps.dec_input,
            DescriptorField::DecQ => &caps.dec_q,
            DescriptorField::DecK => &caps.dec_k,
        }
    }
}

/// Knobs for one multi-concept generation run.
#[derive(Clone, Debug)]
pub struct MultiOptions {
    pub steps: usize,
    pub sama_enabled: bool,
    /// Injection window as fractions of the step count.
    pub window: (f64, f64),
    pub descriptor: DescriptorField,
    pub guidance_enabled: bool,
    pub lambda: f64,
    pub tau: f64,
    pub phi0: f64,
    /// Keep per-step masks and flows for debug dumps.
    pub collect_dumps: bool,
}

impl MultiOptions {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(MultiOptions {
            steps: config.sampler.steps,
            sama_enabled: config.sama.enabled,
            window: (config.sama.window_start, config.sama.window_end),
            descriptor: DescriptorField::parse(&config.sama.descriptor)?,
            guidance_enabled: config.guidance.enabled,
            lambda: config.guidance.lambda,
            tau: config.guidance.tau,
            phi0: config.guidance.phi0,
            collect_dumps: false,
        })
    }

    /// Same knobs with injection and guidance both switched off.
    pub fn disabled(mut self) -> Self {
        self.sama_enabled = false;
        self.guidance_enabled = false;
        self
    }
}

/// One row of the per-step diagnostic log.
#[derive(Clone, Debug)]
pub struct StepDiag {
    pub step: usize,
    /// Schedule timestep denoised at this step.
    pub timestep: usize,
    /// Guidance strength used (0 when disabled or at the anchor step).
    pub phi: f64,
    /// Whether the latent actually moved (false on skip or disable).
    pub guidance_applied: bool,
    /// Norm of the layout gradient; `None` when no gradient was computed
    /// or it was non-finite.
    pub grad_norm: Option<f64>,
    /// Layout loss of the post-guidance maps against the anchors.
    pub layout_loss: f64,
    /// Per-concept soft-IoU against the anchors.
    pub per_concept_iou: Vec<f64>,
    pub sama_injected: bool,
}

/// Optional per-step debug payload (masks, flows, substituted-value norm).
#[derive(Clone, Debug)]
pub struct StepDump<S: Scalar> {
    pub step: usize,
    /// Raw `[0,1]` concept masks on the target grid.
    pub masks: Vec<Mat<S>>,
    /// Argmax flow per concept (empty when no injection happened).
    pub flows: Vec<Vec<usize>>,
    /// Frobenius norm of the substituted value field, if any.
    pub v_w_norm: Option<f64>,
}

/// Everything observable about one multi-concept run.
#[derive(Clone, Debug, Default)]
pub struct MultiDiagnostics {
    /// Number of reference branches (K).
    pub reference_count: usize,
    pub steps: Vec<StepDiag>,
    /// Mean per-concept soft-IoU against the anchors at the final step.
    pub final_anchor_iou: Option<f64>,
    /// Set when the run fell back to plain sampling.
    pub notice: Option<String>,
}

impl MultiDiagnostics {
    /// Plain-text per-step table: step, timestep, phi, flags, loss, IoUs.
    pub fn to_table(&self) -> String {
        let mut out = String::from("step\ttimestep\tphi\tguided\tsama\tL_layout\tiou_per_concept\n");
        for d in &self.steps {
            let ious =
                d.per_concept_iou.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",");
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{}\t{}\t{:.6}\t{}\n",
                d.step, d.timestep, d.phi, d.guidance_applied, d.sama_injected, d.layout_loss, ious
            ));
        }
        out
    }
}

/// A finished multi-concept generation.
pub struct MultiOutput<S: Scalar> {
    pub image: Mat<S>,
    pub final_latent: Mat<S>,
    pub diagnostics: MultiDiagnostics,
    /// Refined anchor maps, one per concept occurrence.
    pub anchor_maps: Vec<Mat<S>>,
    /// Refined maps at the final step, same order.
    pub final_maps: Vec<Mat<S>>,
    /// Per-step debug payloads (empty unless requested).
    pub dumps: Vec<StepDump<S>>,
}

/// Replicates a `pixels x 1` map into a gray `pixels x 3` image in `[0,1]`.
pub fn map_to_image<S: Scalar>(map: &Mat<S>) -> Mat<S> {
    Mat::from_fn(map.rows(), 3, |i, _| map[(i, 0)].max(S::zero()).min(S::one()))
}

// ---------------------------------------------------------------------------
// multi-concept generation
// ---------------------------------------------------------------------------

struct RefBranch<S: Scalar> {
    f_ref: Mat<S>,
    z: Mat<S>,
}

struct RefCache<S: Scalar> {
    psi: Mat<S>,
    values: Mat<S>,
}

/// Raw `[0,1]` concept mask from a pass's cross-attention captures.
fn concept_map<S: Scalar>(
    caps: &StepCaptures<S>,
    occ: &ConceptOccurrence,
) -> Result<Mat<S>> {
    let rand = aggregate_token_map(&caps.cross_probs, occ.rand_pos)?;
    let class = aggregate_token_map(&caps.cross_probs, occ.class_pos)?;
    concept_mask(&[rand, class])
}

/// One layout-guided latent update; returns the new latent, the loss at the
/// old latent, and the gradient norm (`None` = skipped as non-finite).
fn guided_update<S: Scalar>(
    den: &Denoiser<S>,
    f_tgt: &Mat<S>,
    z: &Mat<S>,
    t: usize,
    occurrences: &[ConceptOccurrence],
    anchors: &[Mat<S>],
    lambda: f64,
    tau: f64,
    phi_t: f64,
) -> Result<(Mat<S>, f64, Option<f64>)> {
    let mut g = Graph::new();
    let dg = DenoiserGraph::build(&mut g, den, false);
    let zv = g.param(z.clone());
    let fv = g.constant(f_tgt.clone());
    let pass = dg.forward(&mut g, zv, t, fv, None);
    let mut current = Vec::with_capacity(occurrences.len());
    let mut anchor_vars = Vec::with_capacity(occurrences.len());
    for (occ, anchor) in occurrences.iter().zip(anchors) {
        let rand = aggregate_token_map_graph(&mut g, &pass.cross_probs, occ.rand_pos)?;
        let class = aggregate_token_map_graph(&mut g, &pass.cross_probs, occ.class_pos)?;
        let mask = concept_mask_graph(&mut g, &[rand, class])?;
        current.push(refine_activation_graph(&mut g, mask, S::of(lambda), S::of(tau)));
        anchor_vars.push(g.constant(anchor.clone()));
    }
    let loss = layout_loss_graph(&mut g, &current, &anchor_vars);
    let loss_val = g.value(loss)[(0, 0)].to_f64();
    let grads = g.backward(loss);
    let grad = grads.wrt(zv, z.shape());
    if !grad.all_finite() {
        warn!("layout guidance skipped at timestep {t}: non-finite gradient");
        return Ok((z.clone(), loss_val, None));
    }
    let norm = grad.frob_norm().to_f64();
    Ok((guidance_step(z, &grad, S::of(phi_t)), loss_val, Some(norm)))
}

/// Condition-free multi-concept generation with reference branches.
///
/// A prompt without registered concepts falls back to plain sampling and
/// says so in the diagnostics.
pub fn generate_multi<S: Scalar>(
    den: &Denoiser<S>,
    registry: &ConceptRegistry<S>,
    encoder: &TextEncoder<S>,
    prompt: &str,
    seed: u64,
    options: &MultiOptions,
) -> Result<MultiOutput<S>> {
    let spec = registry.tokenize(prompt)?;
    let occurrences = extract_concept_tokens(&spec);
    let f_tgt = encoder.encode(registry, &spec)?;
    let sampler = Sampler::<S>::new(options.steps)?;

    if occurrences.is_empty() {
        let notice =
            "prompt contains no registered concepts; falling back to plain sampling".to_string();
        warn!("{notice}");
        let trajectory = sampler.sample(den, &f_tgt, seed, &mut Interventions::none())?;
        return Ok(MultiOutput {
            image: image_from_latent(&trajectory.final_latent),
            final_latent: trajectory.final_latent,
            diagnostics: MultiDiagnostics { notice: Some(notice), ..Default::default() },
            anchor_maps: Vec::new(),
            final_maps: Vec::new(),
            dumps: Vec::new(),
        });
    }

    // one reference branch per occurrence, each with its own latent stream
    let mut branches: Vec<RefBranch<S>> = occurrences
        .iter()
        .enumerate()
        .map(|(k, occ)| {
            let name = &registry.concepts()[occ.concept].name;
            let ref_spec = registry.make_reference_prompt(name)?;
            Ok(RefBranch {
                f_ref: encoder.encode(registry, &ref_spec)?,
                z: sampler.init_latent(derive_seed(seed, 1 + k as u64)),
            })
        })
        .collect::<Result<_>>()?;

    let ts = sampler.timesteps();
    let mut z = sampler.init_latent(seed);
    let mut anchors: Vec<Mat<S>> = Vec::new();
    let mut caches: Option<Vec<RefCache<S>>> = None;
    let mut steps = Vec::with_capacity(ts.len());
    let mut dumps = Vec::new();
    let mut final_maps = Vec::new();

    for (i, &t) in ts.iter().enumerate() {
        let phi_t =
            if options.guidance_enabled { decay_schedule(i, ts.len(), options.phi0) } else { 0.0 };
        let mut grad_norm = None;
        let mut guidance_applied = false;
        if options.guidance_enabled && !anchors.is_empty() && phi_t > 0.0 {
            let (z_new, _, norm) = guided_update(
                den,
                &f_tgt,
                &z,
                t,
                &occurrences,
                &anchors,
                options.lambda,
                options.tau,
                phi_t,
            )?;
            z = z_new;
            grad_norm = norm;
            guidance_applied = norm.is_some();
        }

        let ref_caps: Vec<StepCaptures<S>> =
            branches.iter().map(|b| evaluate_denoiser(den, &b.z, t, &b.f_ref, None)).collect();
        let caps = evaluate_denoiser(den, &z, t, &f_tgt, None);

        let raw_masks: Vec<Mat<S>> = occurrences
            .iter()
            .map(|occ| concept_map(&caps, occ))
            .collect::<Result<_>>()?;
        let refined: Vec<Mat<S>> = raw_masks
            .iter()
            .map(|m| refine_activation(m, S::of(options.lambda), S::of(options.tau)))
            .collect();
        if i == 0 {
            anchors = refined.clone();
        }
        let layout_now = layout_loss(&refined, &anchors).to_f64();
        let per_concept_iou: Vec<f64> = refined
            .iter()
            .zip(&anchors)
            .map(|(a, b)| {
                1.0 - layout_loss(std::slice::from_ref(a), std::slice::from_ref(b)).to_f64()
            })
            .collect();

        let mut injected = false;
        let mut flows = Vec::new();
        let mut v_w_norm = None;
        let eps_used = if options.sama_enabled && sama_active(i, ts.len(), options.window) {
            match &caches {
                Some(cached) => {
                    let psi_trg = options.descriptor.pick(&caps);
                    let mut warped = Vec::with_capacity(cached.len());
                    for (cache, mask) in cached.iter().zip(&raw_masks) {
                        let cost = cost_volume(psi_trg, &cache.psi, mask)?;
                        let flow = semantic_flow(&cost);
                        warped.push(warp_values(&cache.values, &flow, mask));
                        flows.push(flow);
                    }
                    let v_w = aggregate_values(&warped, &caps.dec_v, &raw_masks)?;
                    v_w_norm = Some(v_w.frob_norm().to_f64());
                    injected = true;
                    evaluate_denoiser(den, &z, t, &f_tgt, Some(&v_w)).eps
                }
                None => caps.eps.clone(),
            }
        } else {
            caps.eps.clone()
        };

        let t_prev = ts.get(i + 1).copied();
        z = sampler.ddim_update(&z, &eps_used, t, t_prev);
        for (branch, rc) in branches.iter_mut().zip(&ref_caps) {
            branch.z = sampler.ddim_update(&branch.z, &rc.eps, t, t_prev);
        }
        caches = Some(
            branches
                .iter()
                .zip(&ref_caps)
                .map(|(_, rc)| RefCache {
                    psi: options.descriptor.pick(rc).clone(),
                    values: rc.dec_v.clone(),
                })
                .collect(),
        );

        if options.collect_dumps {
            dumps.push(StepDump { step: i, masks: raw_masks, flows, v_w_norm });
        }
        steps.push(StepDiag {
            step: i,
            timestep: t,
            phi: phi_t,
            guidance_applied,
            grad_norm,
            layout_loss: layout_now,
            per_concept_iou,
            sama_injected: injected,
        });
        final_maps = refined;
    }

    let final_anchor_iou = steps
        .last()
        .map(|d| d.per_concept_iou.iter().sum::<f64>() / d.per_concept_iou.len() as f64);

    Ok(MultiOutput {
        image: image_from_latent(&z),
        final_latent: z,
        diagnostics: MultiDiagnostics {
            reference_count: branches.len(),
            steps,
            final_anchor_iou,
            notice: None,
        },
        anchor_maps: anchors,
        final_maps,
        dumps,
    })
}
