//! Deterministic DDIM sampler with named intervention hook points.
//!
//! eta = 0 update on an evenly spaced timestep subset:
//!
//! ```text
//! x0_hat  = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
//! z_prev  = sqrt(abar_prev) x0_hat + sqrt(1-abar_prev) eps
//! ```
//!
//! Interventions attach to declared hook points: `latent.pre_step` may
//! rewrite the latent before the denoiser runs (layout guidance), and
//! `dec.self.values` may substitute the decoder self-attention value field
//! (SAMA injection). A step with no active hooks is identical to a plain
//! step, and capture is read-only, so hooked and unhooked runs of the same
//! seed agree bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::tensor::Mat;
use crate::{Error, Result, Scalar};

use super::denoiser::{Denoiser, DenoiserGraph, ForwardPass};
use super::{derive_seed, LATENT_CHANNELS, LATENT_PIXELS, TRAIN_TIMESTEPS};

/// Linear beta schedule over the training timesteps.
pub struct Schedule<S> {
    betas: Vec<S>,
    alpha_bar: Vec<S>,
}

impl<S: Scalar> Schedule<S> {
    pub fn new() -> Self {
        let t = TRAIN_TIMESTEPS;
        let (lo, hi) = (1e-3, 0.15);
        let mut betas = Vec::with_capacity(t);
        let mut alpha_bar = Vec::with_capacity(t);
        let mut prod = 1.0;
        for i in 0..t {
            let beta = lo + (hi - lo) * i as f64 / (t - 1) as f64;
            prod *= 1.0 - beta;
            betas.push(S::of(beta));
            alpha_bar.push(S::of(prod));
        }
        Schedule { betas, alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> S {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bar[t]
    }

    /// Forward-noises a clean latent to timestep `t`.
    pub fn add_noise(&self, x0: &Mat<S>, eps: &Mat<S>, t: usize) -> Mat<S> {
        let ab = self.alpha_bar[t];
        x0.scale(ab.sqrt()).add(&eps.scale((S::one() - ab).sqrt()))
    }
}

impl<S: Scalar> Default for Schedule<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// A declared intervention site in the sampling loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookPoint {
    /// Rewrite the latent before the denoiser runs (guidance).
    LatentPreStep,
    /// Substitute the decoder self-attention value field (SAMA).
    DecSelfValues,
}

impl HookPoint {
    pub const LATENT_PRE_STEP: &'static str = "latent.pre_step";
    pub const DEC_SELF_VALUES: &'static str = "dec.self.values";

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            Self::LATENT_PRE_STEP => Ok(HookPoint::LatentPreStep),
            Self::DEC_SELF_VALUES => Ok(HookPoint::DecSelfValues),
            other => Err(Error::config(format!(
                "unknown hook point '{other}' (declared: '{}', '{}')",
                Self::LATENT_PRE_STEP,
                Self::DEC_SELF_VALUES
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HookPoint::LatentPreStep => Self::LATENT_PRE_STEP,
            HookPoint::DecSelfValues => Self::DEC_SELF_VALUES,
        }
    }
}

/// Position of the current step in the sampling loop.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    /// Step index, 0-based from the noisiest step.
    pub step: usize,
    /// Total number of steps in this run.
    pub total: usize,
    /// Schedule timestep being denoised.
    pub t: usize,
}

/// Cross-attention probabilities of one block, one matrix per head.
#[derive(Clone)]
pub struct CrossProbs<S> {
    pub grid: (usize, usize),
    pub heads: Vec<Mat<S>>,
}

/// Plain-matrix snapshot of one denoiser evaluation.
#[derive(Clone)]
pub struct StepCaptures<S> {
    pub eps: Mat<S>,
    pub cross_probs: Vec<CrossProbs<S>>,
    pub dec_input: Mat<S>,
    pub dec_q: Mat<S>,
    pub dec_k: Mat<S>,
    pub dec_v: Mat<S>,
}

impl<S: Scalar> StepCaptures<S> {
    pub fn from_pass(g: &Graph<S>, pass: &ForwardPass) -> Self {
        StepCaptures {
            eps: g.value(pass.eps).clone(),
            cross_probs: pass
                .cross_probs
                .iter()
                .map(|b| CrossProbs {
                    grid: b.grid,
                    heads: b.heads.iter().map(|&h| g.value(h).clone()).collect(),
                })
                .collect(),
            dec_input: g.value(pass.dec_input).clone(),
            dec_q: g.value(pass.dec_q).clone(),
            dec_k: g.value(pass.dec_k).clone(),
            dec_v: g.value(pass.dec_v).clone(),
        }
    }
}

/// Runs the frozen (non-trainable) denoiser once and snapshots the pass.
pub fn evaluate_denoiser<S: Scalar>(
    den: &Denoiser<S>,
    z: &Mat<S>,
    t: usize,
    f_cond: &Mat<S>,
    substitute_dec_values: Option<&Mat<S>>,
) -> StepCaptures<S> {
    let mut g = Graph::new();
    let dg = DenoiserGraph::build(&mut g, den, false);
    let zv = g.constant(z.clone());
    let fv = g.constant(f_cond.clone());
    let sub = substitute_dec_values.map(|m| g.constant(m.clone()));
    let pass = dg.forward(&mut g, zv, t, fv, sub);
    StepCaptures::from_pass(&g, &pass)
}

type LatentHook<'a, S> = Box<dyn FnMut(&StepContext, &Mat<S>) -> Option<Mat<S>> + 'a>;
type ValuesHook<'a, S> = Box<dyn FnMut(&StepContext, &StepCaptures<S>) -> Option<Mat<S>> + 'a>;

/// Hooks installed at declared hook points. At most one hook per point.
#[derive(Default)]
pub struct Interventions<'a, S> {
    latent: Option<LatentHook<'a, S>>,
    values: Option<ValuesHook<'a, S>>,
}

impl<'a, S: Scalar> Interventions<'a, S> {
    pub fn none() -> Self {
        Interventions { latent: None, values: None }
    }

    /// Installs a latent hook; the point name must be `latent.pre_step`.
    pub fn set_latent_hook(
        &mut self,
        point: &str,
        hook: impl FnMut(&StepContext, &Mat<S>) -> Option<Mat<S>> + 'a,
    ) -> Result<()> {
        match HookPoint::parse(point)? {
            HookPoint::LatentPreStep => {
                self.latent = Some(Box::new(hook));
                Ok(())
            }
            other => Err(Error::config(format!(
                "hook point '{}' does not accept a latent hook",
                other.name()
            ))),
        }
    }

    /// Installs a value-substitution hook; the point name must be
    /// `dec.self.values`.
    pub fn set_values_hook(
        &mut self,
        point: &str,
        hook: impl FnMut(&StepContext, &StepCaptures<S>) -> Option<Mat<S>> + 'a,
    ) -> Result<()> {
        match HookPoint::parse(point)? {
            HookPoint::DecSelfValues => {
                self.values = Some(Box::new(hook));
                Ok(())
            }
            other => Err(Error::config(format!(
                "hook point '{}' does not accept a values hook",
                other.name()
            ))),
        }
    }
}

/// One completed sampling step.
pub struct StepTrace<S> {
    pub ctx: StepContext,
    /// Latent the denoiser saw (after any latent hook).
    pub z_in: Mat<S>,
    /// Latent after the DDIM update.
    pub z_out: Mat<S>,
    /// Snapshot of the plain (pre-substitution) pass.
    pub captures: StepCaptures<S>,
    /// Noise prediction actually used for the update.
    pub eps_used: Mat<S>,
}

/// Full sampling run.
pub struct Trajectory<S> {
    pub steps: Vec<StepTrace<S>>,
    pub final_latent: Mat<S>,
}

/// DDIM sampler over an evenly spaced subset of the schedule.
pub struct Sampler<S> {
    schedule: Schedule<S>,
    steps: usize,
}

impl<S: Scalar> Sampler<S> {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("sampler needs at least one step"));
        }
        Ok(Sampler { schedule: Schedule::new(), steps: steps.min(TRAIN_TIMESTEPS) })
    }

    pub fn schedule(&self) -> &Schedule<S> {
        &self.schedule
    }

    /// Descending schedule timesteps visited by this run.
    pub fn timesteps(&self) -> Vec<usize> {
        let t = self.schedule.len();
        let mut ts: Vec<usize> = (0..self.steps).map(|i| i * t / self.steps).collect();
        ts.dedup();
        ts.reverse();
        ts
    }

    /// Standard-normal starting latent.
    pub fn init_latent(&self, seed: u64) -> Mat<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        Mat::randn(LATENT_PIXELS, LATENT_CHANNELS, 0.0, 1.0, &mut rng)
    }

    /// One eta=0 update from timestep `t` to `t_prev` (`None` = clean).
    pub fn ddim_update(
        &self,
        z: &Mat<S>,
        eps: &Mat<S>,
        t: usize,
        t_prev: Option<usize>,
    ) -> Mat<S> {
        let ab = self.schedule.alpha_bar(t);
        let x0 = z.sub(&eps.scale((S::one() - ab).sqrt())).scale(S::one() / ab.sqrt());
        match t_prev {
            Some(p) => {
                let abp = self.schedule.alpha_bar(p);
                x0.scale(abp.sqrt()).add(&eps.scale((S::one() - abp).sqrt()))
            }
            None => x0,
        }
    }

    /// Runs the full loop with the given interventions.
    pub fn sample(
        &self,
        den: &Denoiser<S>,
        f_cond: &Mat<S>,
        seed: u64,
        interventions: &mut Interventions<'_, S>,
    ) -> Result<Trajectory<S>> {
        if f_cond.cols() != super::MODEL_DIM {
            return Err(Error::config(format!(
                "conditioning width {} does not match model width {}",
                f_cond.cols(),
                super::MODEL_DIM
            )));
        }
        let ts = self.timesteps();
        let mut z = self.init_latent(seed);
        let mut steps = Vec::with_capacity(ts.len());
        for (i, &t) in ts.iter().enumerate() {
            let ctx = StepContext { step: i, total: ts.len(), t };
            if let Some(hook) = interventions.latent.as_mut() {
                if let Some(z2) = hook(&ctx, &z) {
                    if z2.shape() != z.shape() {
                        return Err(Error::config(format!(
                            "latent hook returned shape {:?}, expected {:?}",
                            z2.shape(),
                            z.shape()
                        )));
                    }
                    z = z2;
                }
            }
            let captures = evaluate_denoiser(den, &z, t, f_cond, None);
            let eps_used = match interventions.values.as_mut() {
                Some(hook) => match hook(&ctx, &captures) {
                    Some(v_w) => {
                        if v_w.shape() != captures.dec_v.shape() {
                            return Err(Error::config(format!(
                                "values hook returned shape {:?}, expected {:?}",
                                v_w.shape(),
                                captures.dec_v.shape()
                            )));
                        }
                        evaluate_denoiser(den, &z, t, f_cond, Some(&v_w)).eps
                    }
                    None => captures.eps.clone(),
                },
                None => captures.eps.clone(),
            };
            let t_prev = ts.get(i + 1).copied();
            let z_out = self.ddim_update(&z, &eps_used, t, t_prev);
            steps.push(StepTrace { ctx, z_in: z.clone(), z_out: z_out.clone(), captures, eps_used });
            z = z_out;
        }
        Ok(Trajectory { steps, final_latent: z })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::{ConceptRegistry, Vocabulary};
    use crate::testbed::{TextEncoder, MODEL_DIM};

    type M = Mat<f64>;

    fn cond() -> M {
        let reg = ConceptRegistry::new(Vocabulary::builtin(MODEL_DIM, 5));
        let enc = TextEncoder::new(MODEL_DIM, 5);
        enc.encode(&reg, &reg.tokenize("a photo of a dog").unwrap()).unwrap()
    }

    #[test]
    fn schedule_is_monotone_and_bounded() {
        let s = Schedule::<f64>::new();
        assert_eq!(s.len(), TRAIN_TIMESTEPS);
        assert!((s.beta(0) - 1e-3).abs() < 1e-12);
        assert!((s.beta(TRAIN_TIMESTEPS - 1) - 0.15).abs() < 1e-12);
        for t in 1..s.len() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn add_noise_interpolates_endpoints() {
        let s = Schedule::<f64>::new();
        let x0 = M::filled(2, 2, 3.0);
        let eps = M::filled(2, 2, -1.0);
        let noised = s.add_noise(&x0, &eps, 0);
        let ab = s.alpha_bar(0);
        let want = 3.0 * ab.sqrt() - (1.0 - ab).sqrt();
        assert!((noised[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn hook_point_parsing() {
        assert_eq!(HookPoint::parse("latent.pre_step").unwrap(), HookPoint::LatentPreStep);
        assert_eq!(HookPoint::parse("dec.self.values").unwrap(), HookPoint::DecSelfValues);
        let err = HookPoint::parse("dec.self.value").unwrap_err();
        assert!(err.to_string().contains("dec.self.value"));
        let mut iv = Interventions::<f64>::none();
        assert!(iv.set_latent_hook("dec.self.values", |_, z| Some(z.clone())).is_err());
        assert!(iv.set_values_hook("nope", |_, c| Some(c.dec_v.clone())).is_err());
    }

    #[test]
    fn timestep_subset_is_descending_and_ends_at_zero() {
        let s = Sampler::<f64>::new(20).unwrap();
        let ts = s.timesteps();
        assert_eq!(ts.len(), 20);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(ts.iter().all(|&t| t < TRAIN_TIMESTEPS));
        assert!(Sampler::<f64>::new(0).is_err());
    }

    #[test]
    fn same_seed_gives_identical_trajectories() {
        let den = Denoiser::new(3);
        let f = cond();
        let s = Sampler::new(8).unwrap();
        let a = s.sample(&den, &f, 42, &mut Interventions::none()).unwrap();
        let b = s.sample(&den, &f, 42, &mut Interventions::none()).unwrap();
        assert_eq!(a.final_latent, b.final_latent);
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.z_out, y.z_out);
        }
        let c = s.sample(&den, &f, 43, &mut Interventions::none()).unwrap();
        assert!(c.final_latent.max_abs_diff(&a.final_latent) > 1e-9);
    }

    #[test]
    fn noop_hooks_reproduce_plain_trajectory_exactly() {
        let den = Denoiser::new(3);
        let f = cond();
        let s = Sampler::new(6).unwrap();
        let plain = s.sample(&den, &f, 7, &mut Interventions::none()).unwrap();

        // identity latent hook (guidance with zero strength)
        let mut iv = Interventions::none();
        iv.set_latent_hook("latent.pre_step", |_, z: &M| Some(z.clone())).unwrap();
        let hooked = s.sample(&den, &f, 7, &mut iv).unwrap();
        assert_eq!(hooked.final_latent, plain.final_latent);

        // values hook substituting the branch's own values (zero-mask SAMA)
        let mut iv = Interventions::none();
        iv.set_values_hook("dec.self.values", |_, c: &StepCaptures<f64>| Some(c.dec_v.clone()))
            .unwrap();
        let hooked = s.sample(&den, &f, 7, &mut iv).unwrap();
        assert_eq!(hooked.final_latent, plain.final_latent);

        // declining hooks
        let mut iv = Interventions::none();
        iv.set_latent_hook("latent.pre_step", |_, _: &M| None).unwrap();
        iv.set_values_hook("dec.self.values", |_, _: &StepCaptures<f64>| None).unwrap();
        let hooked = s.sample(&den, &f, 7, &mut iv).unwrap();
        assert_eq!(hooked.final_latent, plain.final_latent);
    }

    #[test]
    fn final_step_removes_predicted_noise_fully() {
        // with a perfect eps oracle the one-step update returns x0 exactly
        let s = Sampler::<f64>::new(1).unwrap();
        let sched = s.schedule();
        let x0 = M::filled(2, 2, 0.7);
        let eps = M::filled(2, 2, -0.3);
        let t = s.timesteps()[0];
        let z = sched.add_noise(&x0, &eps, t);
        let back = s.ddim_update(&z, &eps, t, None);
        assert!(back.max_abs_diff(&x0) < 1e-12);
    }
}
