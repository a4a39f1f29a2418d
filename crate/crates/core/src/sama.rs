//! Subject-adaptive matching attention (SAMA).
//!
//! During multi-concept generation each concept runs its own reference
//! denoising branch. Per step, a dense cost volume of cosine similarities is
//! built between the mask-gated target descriptors and each reference's
//! descriptors; its per-row argmax defines a semantic flow along which
//! reference self-attention values are warped onto the target grid, gated by
//! the concept mask, and summed with the masked-out remainder of the target
//! values. The target's self-attention then runs with the substituted values:
//! `SAMA(Q, K, V^W) = softmax(Q K^T / sqrt(d)) V^W`.
//!
//! Everything here is a pure function over matrices whose rows are grid
//! locations; the sampler owns caching and injection timing.

use crate::graph::{Graph, Var};
use crate::tensor::Mat;
use crate::{Error, Result, Scalar};

/// Norm floor below which cosine similarities are defined as zero.
pub const COSINE_EPS: f64 = 1e-8;

/// Fraction of the schedule where injection starts (middle 60% window).
pub const DEFAULT_WINDOW_START: f64 = 0.2;
/// Fraction of the schedule where injection stops.
pub const DEFAULT_WINDOW_END: f64 = 0.8;

/// True when `step` (0-based) falls inside the injection window.
pub fn sama_active(step: usize, total_steps: usize, window: (f64, f64)) -> bool {
    let frac = step as f64 / total_steps as f64;
    frac >= window.0 && frac < window.1
}

/// Averages per-head/per-layer attention maps for one token and min-max
/// normalizes into `[0, 1]`.
///
/// A constant map carries no localization signal and normalizes to all
/// zeros, which downstream disables injection for that concept.
pub fn concept_mask<S: Scalar>(maps: &[Mat<S>]) -> Result<Mat<S>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::config("concept mask needs at least one attention map"))?;
    if maps.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::config("attention maps disagree on grid shape"));
    }
    let mut mean = Mat::zeros(first.rows(), first.cols());
    for m in maps {
        mean = mean.add(m);
    }
    let mean = mean.scale(S::of(1.0 / maps.len() as f64));
    let lo = mean.data().iter().copied().fold(S::infinity(), S::min);
    let hi = mean.data().iter().copied().fold(S::neg_infinity(), S::max);
    if hi <= lo {
        log::debug!("uniform attention map; concept mask degenerates to zeros");
        return Ok(Mat::zeros(first.rows(), first.cols()));
    }
    Ok(mean.map(|e| (e - lo) / (hi - lo)))
}

/// Tape version of [`concept_mask`], so guidance gradients can flow
/// through the normalization back to the latent.
///
/// The degenerate (constant-map) branch matches the pure twin and yields a
/// zero constant, cutting the gradient — a flat map carries no signal.
pub fn concept_mask_graph<S: Scalar>(g: &mut Graph<S>, maps: &[Var]) -> Result<Var> {
    let &first = maps
        .first()
        .ok_or_else(|| Error::config("concept mask needs at least one attention map"))?;
    let shape = g.shape(first);
    if maps.iter().any(|&m| g.shape(m) != shape) {
        return Err(Error::config("attention maps disagree on grid shape"));
    }
    let mut mean = first;
    for &m in &maps[1..] {
        mean = g.add(mean, m);
    }
    let mean = g.scale(mean, S::of(1.0 / maps.len() as f64));
    let lo = g.min_all(mean);
    let hi = g.max_all(mean);
    if g.value(hi)[(0, 0)] <= g.value(lo)[(0, 0)] {
        log::debug!("uniform attention map; concept mask degenerates to zeros");
        return Ok(g.constant(Mat::zeros(shape.0, shape.1)));
    }
    let shifted = g.sub_broadcast(mean, lo);
    let range = g.sub(hi, lo);
    Ok(g.div_broadcast(shifted, range))
}

/// Dense cost volume between mask-gated target descriptors and reference
/// descriptors.
///
/// Entry `(x, y)` is the cosine similarity between `(ψ^trg ⊙ M)(x)` and
/// `ψ^ref(y)`; rows or columns whose descriptor norm falls below
/// [`COSINE_EPS`] are zero. Shapes: descriptors are `locations x channels`,
/// the mask is `locations x 1`.
pub fn cost_volume<S: Scalar>(
    psi_trg: &Mat<S>,
    psi_ref: &Mat<S>,
    mask: &Mat<S>,
) -> Result<Mat<S>> {
    if psi_trg.cols() != psi_ref.cols() {
        return Err(Error::config(format!(
            "descriptor channel mismatch: target {} vs reference {}",
            psi_trg.cols(),
            psi_ref.cols()
        )));
    }
    if mask.shape() != (psi_trg.rows(), 1) {
        return Err(Error::config(format!(
            "mask shape {:?} does not match target grid {}",
            mask.shape(),
            psi_trg.rows()
        )));
    }
    let eps = S::of(COSINE_EPS);
    let gated = Mat::from_fn(psi_trg.rows(), psi_trg.cols(), |x, c| {
        psi_trg[(x, c)] * mask[(x, 0)]
    });
    let trg_norms: Vec<S> = (0..gated.rows())
        .map(|x| gated.row(x).iter().map(|&e| e * e).sum::<S>().sqrt())
        .collect();
    let ref_norms: Vec<S> = (0..psi_ref.rows())
        .map(|y| psi_ref.row(y).iter().map(|&e| e * e).sum::<S>().sqrt())
        .collect();
    let mut c = Mat::zeros(psi_trg.rows(), psi_ref.rows());
    for x in 0..gated.rows() {
        if trg_norms[x] < eps {
            continue;
        }
        for y in 0..psi_ref.rows() {
            if ref_norms[y] < eps {
                continue;
            }
            let dot: S = gated.row(x).iter().zip(psi_ref.row(y)).map(|(&a, &b)| a * b).sum();
            c[(x, y)] = dot / (trg_norms[x] * ref_norms[y]);
        }
    }
    Ok(c)
}

/// Per-row argmax of the cost volume; ties break to the lowest index.
pub fn semantic_flow<S: Scalar>(cost: &Mat<S>) -> Vec<usize> {
    (0..cost.rows())
        .map(|x| {
            let row = cost.row(x);
            let mut best = 0;
            for (y, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = y;
                }
            }
            best
        })
        .collect()
}

/// Warps reference values along the flow and gates by the mask:
/// `out(x) = V^ref(F(x)) * M(x)`.
pub fn warp_values<S: Scalar>(v_ref: &Mat<S>, flow: &[usize], mask: &Mat<S>) -> Mat<S> {
    assert_eq!(flow.len(), mask.rows(), "flow and mask disagree on grid size");
    Mat::from_fn(flow.len(), v_ref.cols(), |x, c| v_ref[(flow[x], c)] * mask[(x, 0)])
}

/// Combines warped reference values with the unclaimed target values:
/// `V^W = Σ_k warped_k + V^trg ⊙ (1 − clip(Σ_k M_k, 0, 1))`.
pub fn aggregate_values<S: Scalar>(
    warped: &[Mat<S>],
    v_trg: &Mat<S>,
    masks: &[Mat<S>],
) -> Result<Mat<S>> {
    if warped.len() != masks.len() {
        return Err(Error::config("one mask per warped field required"));
    }
    for (w, m) in warped.iter().zip(masks) {
        if w.shape() != v_trg.shape() || m.shape() != (v_trg.rows(), 1) {
            return Err(Error::config("warped field or mask grid mismatch"));
        }
    }
    let mut out = Mat::zeros(v_trg.rows(), v_trg.cols());
    for w in warped {
        out = out.add(w);
    }
    for x in 0..v_trg.rows() {
        let covered: S = masks.iter().map(|m| m[(x, 0)]).sum();
        let keep = S::one() - covered.max(S::zero()).min(S::one());
        for c in 0..v_trg.cols() {
            out[(x, c)] += v_trg[(x, c)] * keep;
        }
    }
    Ok(out)
}

/// Scaled-dot-product attention with substituted values:
/// `softmax(Q K^T / sqrt(d)) V^W`.
pub fn sama_attention<S: Scalar>(q: &Mat<S>, k: &Mat<S>, v_w: &Mat<S>) -> Result<Mat<S>> {
    if q.cols() != k.cols() {
        return Err(Error::config("query/key width mismatch"));
    }
    if k.rows() != v_w.rows() {
        return Err(Error::config("key/value length mismatch"));
    }
    if q.cols() == 0 {
        return Err(Error::config("attention head dim must be positive"));
    }
    let scale = S::of(1.0 / (q.cols() as f64).sqrt());
    let scores = q.matmul(&k.transpose()).scale(scale);
    let mut probs = scores;
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for e in row.iter_mut() {
            *e = (*e - mx).exp();
            z += *e;
        }
        for e in row.iter_mut() {
            *e = *e / z;
        }
    }
    Ok(probs.matmul(v_w))
}
