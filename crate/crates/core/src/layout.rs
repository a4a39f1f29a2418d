//! Layout-consistency guidance.
//!
//! Early denoising steps already place concepts sensibly; later steps tend
//! to drift. Guidance counteracts the drift by (1) refining each concept's
//! attention map with a threshold shift, (2) anchoring the refined maps from
//! the very first step, (3) penalizing soft-IoU disagreement between the
//! current and anchor maps, and (4) nudging the latent down the loss
//! gradient with a linearly decaying strength.

use crate::graph::{Graph, Var};
use crate::tensor::Mat;
use crate::Scalar;

/// Floor applied to the soft-IoU denominator.
pub const IOU_EPS: f64 = 1e-8;

/// Default threshold applied to min-max normalized maps.
pub const DEFAULT_TAU: f64 = 0.3;
/// Default adjustment factor.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Default initial guidance strength, in latent units.
pub const DEFAULT_PHI0: f64 = 10.0;

/// Sharpened activation map: `M + λ` where `M > τ`, `M − λ` elsewhere,
/// clamped to `[0, 1]`.
pub fn refine_activation<S: Scalar>(m: &Mat<S>, lambda: S, tau: S) -> Mat<S> {
    m.map(|e| {
        let shifted = if e > tau { e + lambda } else { e - lambda };
        shifted.max(S::zero()).min(S::one())
    })
}

/// Tape version of [`refine_activation`] so guidance can differentiate
/// through the refinement.
pub fn refine_activation_graph<S: Scalar>(g: &mut Graph<S>, m: Var, lambda: S, tau: S) -> Var {
    let shifted = g.piecewise_shift(m, tau, lambda);
    g.clamp01(shifted)
}

/// Soft-IoU layout loss between current and anchor maps:
/// `Σ_k (1 − Σ A_k^t ⊙ A_k^T / (Σ max(A_k^t, A_k^T) + ε))`.
///
/// A concept whose maps are both all-zero contributes 0 (vacuously
/// consistent) and is logged.
pub fn layout_loss<S: Scalar>(current: &[Mat<S>], anchors: &[Mat<S>]) -> S {
    assert_eq!(current.len(), anchors.len(), "one anchor per current map");
    let mut total = S::zero();
    for (k, (a_t, a_anchor)) in current.iter().zip(anchors).enumerate() {
        assert_eq!(a_t.shape(), a_anchor.shape(), "map grid mismatch for concept {k}");
        if a_t.max_abs() == S::zero() && a_anchor.max_abs() == S::zero() {
            log::debug!("layout term {k} skipped: both maps all-zero");
            continue;
        }
        let inter = a_t.dot(a_anchor);
        let union = a_t.zip_map(a_anchor, S::max).sum();
        total += S::one() - inter / union.max(S::of(IOU_EPS));
    }
    total
}

/// Tape version of [`layout_loss`]; anchors are constants, current maps may
/// depend on the latent. Returns a `1 x 1` node.
pub fn layout_loss_graph<S: Scalar>(g: &mut Graph<S>, current: &[Var], anchors: &[Var]) -> Var {
    assert_eq!(current.len(), anchors.len(), "one anchor per current map");
    let mut total = g.constant(Mat::zeros(1, 1));
    for (k, (&a_t, &a_anchor)) in current.iter().zip(anchors).enumerate() {
        if g.value(a_t).max_abs() == S::zero() && g.value(a_anchor).max_abs() == S::zero() {
            log::debug!("layout term {k} skipped: both maps all-zero");
            continue;
        }
        let prod = g.mul(a_t, a_anchor);
        let inter = g.sum_all(prod);
        let elem_max = g.max_elem(a_t, a_anchor);
        let union = g.sum_all(elem_max);
        let eps = g.constant(Mat::filled(1, 1, S::of(IOU_EPS)));
        let union_guarded = g.max_elem(union, eps);
        let ratio = g.div(inter, union_guarded);
        let term = g.affine(ratio, -S::one(), S::one());
        total = g.add(total, term);
    }
    total
}

/// Linearly decaying guidance strength: `φ_t = φ_0 (1 − step/total)`.
pub fn decay_schedule(step_index: usize, total_steps: usize, phi0: f64) -> f64 {
    assert!(step_index < total_steps, "step {step_index} outside schedule {total_steps}");
    phi0 * (1.0 - step_index as f64 / total_steps as f64)
}

/// One guided latent update: `z' = z − φ_t ∇_z L`.
///
/// A non-finite gradient skips the update with a warning rather than
/// corrupt the latent.
pub fn guidance_step<S: Scalar>(z: &Mat<S>, loss_grad: &Mat<S>, phi_t: S) -> Mat<S> {
    if !loss_grad.all_finite() {
        log::warn!("layout guidance skipped: non-finite gradient");
        return z.clone();
    }
    z.sub(&loss_grad.scale(phi_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::finite_difference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Mat<f64>;

    #[test]
    fn refine_follows_the_piecewise_rule() {
        let m = M::from_rows(&[&[0.5, 0.3, 0.05]]);
        let a = refine_activation(&m, 0.1, 0.4);
        assert!((a[(0, 0)] - 0.6).abs() < 1e-12);
        assert!((a[(0, 1)] - 0.2).abs() < 1e-12);
        assert_eq!(a[(0, 2)], 0.0); // 0.05 - 0.1 clamps to 0
        // high side clamps to 1
        let a = refine_activation(&M::filled(1, 1, 0.95), 0.1, 0.4);
        assert_eq!(a[(0, 0)], 1.0);
    }

    #[test]
    fn refine_graph_matches_pure_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = M::randn(4, 4, 0.5, 0.3, &mut rng).map(|e| e.clamp(0.0, 1.0));
        let mut g = Graph::new();
        let mv = g.constant(m.clone());
        let refined = refine_activation_graph(&mut g, mv, 0.1, 0.3);
        assert_eq!(g.value(refined), &refine_activation(&m, 0.1, 0.3));
    }

    #[test]
    fn identical_binary_maps_score_exactly_zero() {
        let a = M::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = layout_loss(&[a.clone(), a.clone()], &[a.clone(), a.clone()]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn disjoint_binary_maps_score_k() {
        let a = M::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = M::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]);
        let loss = layout_loss(&[a.clone(), a], &[b.clone(), b]);
        assert_eq!(loss, 2.0);
    }

    #[test]
    fn worked_half_overlap_case() {
        let a_t = M::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let a_anchor = M::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let loss = layout_loss(&[a_t], &[a_anchor]);
        assert_eq!(loss, 0.5);
    }

    #[test]
    fn all_zero_pair_contributes_nothing() {
        let z = M::zeros(2, 2);
        let live = M::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let loss = layout_loss(&[z.clone(), live.clone()], &[z, live]);
        assert!(loss.abs() < 1e-7);
    }

    #[test]
    fn loss_bounded_by_concept_count_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = M::randn(3, 3, 0.5, 0.4, &mut rng).map(|e| e.clamp(0.0, 1.0));
            let b = M::randn(3, 3, 0.5, 0.4, &mut rng).map(|e| e.clamp(0.0, 1.0));
            let loss = layout_loss(&[a.clone(), b.clone()], &[b, a]);
            assert!((-1e-9..=2.0 + 1e-9).contains(&loss), "loss {loss} out of [0, K]");
        }
    }

    #[test]
    fn per_concept_term_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = M::randn(4, 4, 0.5, 0.3, &mut rng).map(|e| e.clamp(0.0, 1.0));
        let b = M::randn(4, 4, 0.5, 0.3, &mut rng).map(|e| e.clamp(0.0, 1.0));
        let lr = layout_loss(&[a.clone()], &[b.clone()]);
        let rl = layout_loss(&[b], &[a]);
        assert!((lr - rl).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_matches_pure_loss_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // keep entries away from max-ties so the subgradient choice is moot
        let a = M::from_fn(4, 4, |i, j| 0.1 + 0.05 * ((i * 4 + j) as f64));
        let b = M::randn(4, 4, 0.5, 0.2, &mut rng).map(|e| e.clamp(0.05, 0.95));

        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.constant(b.clone());
        let loss = layout_loss_graph(&mut g, &[av], &[bv]);
        assert!((g.value(loss)[(0, 0)] - layout_loss(&[a.clone()], &[b.clone()])).abs() < 1e-12);

        let analytic = g.backward(loss).wrt(av, (4, 4));
        let numeric = finite_difference(&a, 1e-6, |x| layout_loss(&[x.clone()], &[b.clone()]));
        let diff = analytic.max_abs_diff(&numeric);
        assert!(diff / numeric.max_abs().max(1e-6) < 1e-3, "gradient mismatch {diff:e}");
    }

    #[test]
    fn decay_is_linear() {
        assert_eq!(decay_schedule(0, 10, 5.0), 5.0);
        assert_eq!(decay_schedule(5, 10, 5.0), 2.5);
        assert!((decay_schedule(9, 10, 5.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn guidance_step_applies_and_skips_nonfinite() {
        let z = M::from_rows(&[&[1.0, 2.0]]);
        let grad = M::from_rows(&[&[0.5, -0.5]]);
        // φ = 0 leaves the latent untouched
        assert_eq!(guidance_step(&z, &grad, 0.0), z);
        let z2 = guidance_step(&z, &grad, 0.1);
        assert!((z2[(0, 0)] - 0.95).abs() < 1e-12);
        assert!((z2[(0, 1)] - 2.05).abs() < 1e-12);
        // quadratic loss ½||z − c||² has gradient z − c
        let c = M::from_rows(&[&[0.0, 0.0]]);
        let quad_grad = z.sub(&c);
        let stepped = guidance_step(&z, &quad_grad, 0.25);
        assert_eq!(stepped, z.sub(&z.scale(0.25)));
        // non-finite gradients are ignored
        let bad = M::from_rows(&[&[f64::NAN, 0.0]]);
        assert_eq!(guidance_step(&z, &bad, 0.1), z);
    }
}
