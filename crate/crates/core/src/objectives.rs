//! Training losses: disentangled-learning terms plus attention regularization.
//!
//! The attention term, per training image i with foreground mask M_i:
//!
//! ```text
//! L_attn = lambda_attn * sum_i 1/2 ( ||CA(V_rand) . (1 - M_i)||_F^2
//!                                  + ||CA(V_class) . M_i||_F^2 )
//! ```
//!
//! where `.` is the Hadamard product and CA(V) is the cross-attention map of
//! token V averaged over heads and blocks (coarser grids are upsampled to the
//! 16x16 latent grid before averaging). A `swap_masks` switch exchanges the
//! two masks, confining `V_rand` to the foreground instead; both pairings are
//! legitimate readings of the roles of the two tokens, so the choice is
//! configuration, not code.
//!
//! The disentangled terms: noise-prediction MSE under the combined condition
//! `f_s + f_i`, the same MSE under text-only conditioning scaled by
//! `lambda_w`, and `lambda_con * cos(f_i, mean-pooled f_s)` pushing the image
//! feature away from text semantics.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Mat;
use crate::testbed::denoiser::BlockProbs;
use crate::testbed::sampler::CrossProbs;
use crate::testbed::{LATENT_PIXELS, LATENT_SIDE};
use crate::{Error, Result, Scalar};

pub const DEFAULT_LAMBDA_ATTN: f64 = 0.001;
pub const DEFAULT_LAMBDA_W: f64 = 0.01;
pub const DEFAULT_LAMBDA_CON: f64 = 0.001;

/// Width of the global image descriptor fed to the image adapter.
pub const IMAGE_FEATS: usize = 8;

/// Squared-norm floor below which cosine similarity is defined as zero.
const COS_GUARD: f64 = 1e-24;

/// Loss weights and the attention-mask pairing switch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_attn: f64,
    pub lambda_w: f64,
    pub lambda_con: f64,
    /// Exchange the masks in the attention term: penalize `V_rand` outside
    /// the complement and `V_class` outside the foreground.
    pub swap_masks: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_attn: DEFAULT_LAMBDA_ATTN,
            lambda_w: DEFAULT_LAMBDA_W,
            lambda_con: DEFAULT_LAMBDA_CON,
            swap_masks: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_attn", self.lambda_attn),
            ("lambda_w", self.lambda_w),
            ("lambda_con", self.lambda_con),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// cross-attention map aggregation
// ---------------------------------------------------------------------------

/// Aggregates the cross-attention map of one token position on the tape:
/// mean over heads within each block, nearest upsampling to the 16x16 grid,
/// mean over blocks. Returns a `256 x 1` column.
pub fn aggregate_token_map_graph<S: Scalar>(
    g: &mut Graph<S>,
    blocks: &[BlockProbs],
    token_pos: usize,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::config("no cross-attention blocks captured"));
    }
    let mut acc: Option<Var> = None;
    for b in blocks {
        let (_, cols) = g.shape(b.heads[0]);
        if token_pos >= cols {
            return Err(Error::config(format!(
                "token position {token_pos} outside prompt of length {cols}"
            )));
        }
        let mut head_acc: Option<Var> = None;
        for &h in &b.heads {
            let col = g.slice_cols(h, token_pos, 1);
            head_acc = Some(match head_acc {
                Some(a) => g.add(a, col),
                None => col,
            });
        }
        let mut m = g.scale(head_acc.unwrap(), S::of(1.0 / b.heads.len() as f64));
        let (mut gh, mut gw) = b.grid;
        while gh * gw < LATENT_PIXELS {
            m = g.upsample_nearest_2x(m, gh, gw);
            gh *= 2;
            gw *= 2;
        }
        acc = Some(match acc {
            Some(a) => g.add(a, m),
            None => m,
        });
    }
    Ok(g.scale(acc.unwrap(), S::of(1.0 / blocks.len() as f64)))
}

/// Plain-matrix twin of [`aggregate_token_map_graph`] for sampling-time use.
pub fn aggregate_token_map<S: Scalar>(
    blocks: &[CrossProbs<S>],
    token_pos: usize,
) -> Result<Mat<S>> {
    if blocks.is_empty() {
        return Err(Error::config("no cross-attention blocks captured"));
    }
    let mut acc = Mat::zeros(LATENT_PIXELS, 1);
    for b in blocks {
        if token_pos >= b.heads[0].cols() {
            return Err(Error::config(format!(
                "token position {token_pos} outside prompt of length {}",
                b.heads[0].cols()
            )));
        }
        let (gh, gw) = b.grid;
        let scale_up = LATENT_SIDE / gh;
        let inv_heads = S::of(1.0 / b.heads.len() as f64);
        for y in 0..LATENT_SIDE {
            for x in 0..LATENT_SIDE {
                let src = (y / scale_up) * gw + x / scale_up;
                let mut v = S::zero();
                for h in &b.heads {
                    v += h[(src, token_pos)];
                }
                acc[(y * LATENT_SIDE + x, 0)] += v * inv_heads;
            }
        }
    }
    Ok(acc.scale(S::of(1.0 / blocks.len() as f64)))
}

// ---------------------------------------------------------------------------
// masks
// ---------------------------------------------------------------------------

/// Gates a soft mask at 0.5.
pub fn binarize_mask<S: Scalar>(soft: &Mat<S>) -> Mat<S> {
    soft.map(|v| if v >= S::of(0.5) { S::one() } else { S::zero() })
}

/// Area-averages a column-vector mask from one square grid to a coarser one.
pub fn downsample_mask_area<S: Scalar>(
    mask: &Mat<S>,
    from_side: usize,
    to_side: usize,
) -> Result<Mat<S>> {
    if mask.shape() != (from_side * from_side, 1) {
        return Err(Error::config(format!(
            "mask shape {:?} does not match grid {from_side}x{from_side}",
            mask.shape()
        )));
    }
    if to_side == 0 || from_side % to_side != 0 {
        return Err(Error::config(format!(
            "cannot downsample {from_side}x{from_side} mask to {to_side}x{to_side}"
        )));
    }
    let f = from_side / to_side;
    let inv = S::of(1.0 / (f * f) as f64);
    Ok(Mat::from_fn(to_side * to_side, 1, |i, _| {
        let (ty, tx) = (i / to_side, i % to_side);
        let mut s = S::zero();
        for dy in 0..f {
            for dx in 0..f {
                s += mask[((ty * f + dy) * from_side + tx * f + dx, 0)];
            }
        }
        s * inv
    }))
}

/// Foreground estimate from image luminance, for images that arrive without
/// a mask. Thresholds luminance at the midpoint of its range and takes the
/// smaller side as foreground (ties go to the brighter side). Callers must
/// emit a warning when falling back to this.
pub fn luminance_fallback_mask<S: Scalar>(image: &Mat<S>) -> Mat<S> {
    let lum: Vec<S> = (0..image.rows())
        .map(|i| {
            S::of(0.2126) * image[(i, 0)]
                + S::of(0.7152) * image[(i, 1)]
                + S::of(0.0722) * image[(i, 2)]
        })
        .collect();
    let lo = lum.iter().copied().fold(S::infinity(), S::min);
    let hi = lum.iter().copied().fold(S::neg_infinity(), S::max);
    let mid = (lo + hi) * S::of(0.5);
    let bright = lum.iter().filter(|&&v| v >= mid).count();
    let bright_is_fg = bright * 2 <= lum.len();
    Mat::from_fn(image.rows(), 1, |i, _| {
        if (lum[i] >= mid) == bright_is_fg {
            S::one()
        } else {
            S::zero()
        }
    })
}

// ---------------------------------------------------------------------------
// image adapter
// ---------------------------------------------------------------------------

/// Learnable linear map from a global image descriptor to the conditioning
/// width. Zero-initialized so `f_i = 0` before training.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageAdapter<S: Scalar> {
    /// `IMAGE_FEATS x width`.
    pub w: Mat<S>,
    /// `1 x width`.
    pub b: Mat<S>,
}

impl<S: Scalar> ImageAdapter<S> {
    pub fn new(width: usize) -> Self {
        ImageAdapter { w: Mat::zeros(IMAGE_FEATS, width), b: Mat::zeros(1, width) }
    }

    /// Registers the adapter's parameters on the tape.
    pub fn params(&self, g: &mut Graph<S>) -> (Var, Var) {
        (g.param(self.w.clone()), g.param(self.b.clone()))
    }

    /// `f_i = descriptor * w + b`, a `1 x width` row.
    pub fn forward_graph(g: &mut Graph<S>, w: Var, b: Var, descriptor: Var) -> Var {
        let lin = g.matmul(descriptor, w);
        g.add(lin, b)
    }
}

/// Global statistics of an RGB image (`pixels x 3`): per-channel mean and
/// standard deviation, mean luminance, and a constant bias input.
pub fn image_descriptor<S: Scalar>(image: &Mat<S>) -> Mat<S> {
    assert_eq!(image.cols(), 3, "descriptor expects RGB");
    let n = S::of(image.rows() as f64);
    let mut mean = [S::zero(); 3];
    for i in 0..image.rows() {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += image[(i, j)];
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    let mut var = [S::zero(); 3];
    for i in 0..image.rows() {
        for (j, v) in var.iter_mut().enumerate() {
            let d = image[(i, j)] - mean[j];
            *v += d * d;
        }
    }
    let lum =
        S::of(0.2126) * mean[0] + S::of(0.7152) * mean[1] + S::of(0.0722) * mean[2];
    Mat::from_vec(
        1,
        IMAGE_FEATS,
        vec![
            mean[0],
            mean[1],
            mean[2],
            (var[0] / n).sqrt(),
            (var[1] / n).sqrt(),
            (var[2] / n).sqrt(),
            lum,
            S::one(),
        ],
    )
}

// ---------------------------------------------------------------------------
// loss terms
// ---------------------------------------------------------------------------

/// Mean squared error between predicted and true noise.
pub fn denoise_loss_graph<S: Scalar>(g: &mut Graph<S>, eps_pred: Var, eps_true: Var) -> Var {
    let d = g.sub(eps_pred, eps_true);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Text-only-condition MSE scaled by `lambda_w`.
pub fn weak_denoise_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    eps_pred_weak: Var,
    eps_true: Var,
    lambda_w: S,
) -> Var {
    let mse = denoise_loss_graph(g, eps_pred_weak, eps_true);
    g.scale(mse, lambda_w)
}

/// `lambda_con * cos(f_i, mean-pooled f_s)`; a zero-norm operand makes the
/// term 0 (with a warning) rather than undefined.
pub fn contrastive_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    f_i: Var,
    f_s: Var,
    lambda_con: S,
) -> Var {
    let pooled = g.mean_rows(f_s);
    let fi_sq = g.square(f_i);
    let fi_norm2 = g.sum_all(fi_sq);
    let p_sq = g.square(pooled);
    let p_norm2 = g.sum_all(p_sq);
    let guard = S::of(COS_GUARD);
    if g.value(fi_norm2)[(0, 0)] < guard || g.value(p_norm2)[(0, 0)] < guard {
        warn!("contrastive loss: zero-norm feature, term defined as 0");
        return g.constant(Mat::zeros(1, 1));
    }
    let prod = g.mul(f_i, pooled);
    let dot = g.sum_all(prod);
    let n1 = g.sqrt(fi_norm2);
    let n2 = g.sqrt(p_norm2);
    let denom = g.mul(n1, n2);
    let cos = g.div(dot, denom);
    g.scale(cos, lambda_con)
}

/// Attention regularization over a batch of per-image aggregated maps.
///
/// `rand_maps[i]`/`class_maps[i]` are the maps of image i's two concept
/// tokens; `masks[i]` is its foreground mask on the same grid.
pub fn attention_reg_graph<S: Scalar>(
    g: &mut Graph<S>,
    rand_maps: &[Var],
    class_maps: &[Var],
    masks: &[Var],
    weights: &LossWeights,
) -> Result<Var> {
    if rand_maps.len() != masks.len() || class_maps.len() != masks.len() {
        return Err(Error::config(format!(
            "attention regularization needs one mask per map pair: {} / {} maps, {} masks",
            rand_maps.len(),
            class_maps.len(),
            masks.len()
        )));
    }
    let mut acc = g.constant(Mat::zeros(1, 1));
    for ((&rm, &cm), &mask) in rand_maps.iter().zip(class_maps).zip(masks) {
        for (what, var) in [("V_rand map", rm), ("V_class map", cm)] {
            if g.shape(var) != g.shape(mask) {
                return Err(Error::config(format!(
                    "{what} has shape {:?} but the mask is {:?}",
                    g.shape(var),
                    g.shape(mask)
                )));
            }
        }
        let inv_mask = g.affine(mask, -S::one(), S::one());
        let (rand_gate, class_gate) = if weights.swap_masks {
            (mask, inv_mask)
        } else {
            (inv_mask, mask)
        };
        let off_rand = g.mul(rm, rand_gate);
        let off_class = g.mul(cm, class_gate);
        let r2 = g.frob_sq(off_rand);
        let c2 = g.frob_sq(off_class);
        let sum = g.add(r2, c2);
        let half = g.scale(sum, S::of(0.5));
        acc = g.add(acc, half);
    }
    Ok(g.scale(acc, S::of(weights.lambda_attn)))
}

/// Pure-matrix oracle twin of [`attention_reg_graph`].
pub fn attention_reg_loss<S: Scalar>(
    rand_maps: &[Mat<S>],
    class_maps: &[Mat<S>],
    masks: &[Mat<S>],
    weights: &LossWeights,
) -> Result<S> {
    if rand_maps.len() != masks.len() || class_maps.len() != masks.len() {
        return Err(Error::config("attention regularization needs one mask per map pair"));
    }
    let mut total = S::zero();
    for ((rm, cm), mask) in rand_maps.iter().zip(class_maps).zip(masks) {
        if rm.shape() != mask.shape() || cm.shape() != mask.shape() {
            return Err(Error::config(format!(
                "map shape {:?}/{:?} does not match mask shape {:?}",
                rm.shape(),
                cm.shape(),
                mask.shape()
            )));
        }
        let mut r2 = S::zero();
        let mut c2 = S::zero();
        for i in 0..mask.rows() {
            for j in 0..mask.cols() {
                let m = mask[(i, j)];
                let (rand_gate, class_gate) =
                    if weights.swap_masks { (m, S::one() - m) } else { (S::one() - m, m) };
                let r = rm[(i, j)] * rand_gate;
                let c = cm[(i, j)] * class_gate;
                r2 += r * r;
                c2 += c * c;
            }
        }
        total += S::of(0.5) * (r2 + c2);
    }
    Ok(S::of(weights.lambda_attn) * total)
}

/// The four terms of the training objective plus their sum, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub denoise: Var,
    pub weak: Var,
    pub contrastive: Var,
    pub attention: Var,
    pub total: Var,
}

/// Sums pre-built terms; each stays individually retrievable for logging.
pub fn total_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    denoise: Var,
    weak: Var,
    contrastive: Var,
    attention: Var,
) -> TotalLoss {
    let a = g.add(denoise, weak);
    let b = g.add(a, contrastive);
    let total = g.add(b, attention);
    TotalLoss { denoise, weak, contrastive, attention, total }
}

/// Plain values of the four terms, for logging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub denoise: f64,
    pub weak: f64,
    pub contrastive: f64,
    pub attention: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn from_graph<S: Scalar>(g: &Graph<S>, loss: &TotalLoss) -> Self {
        let read = |v: Var| g.value(v)[(0, 0)].to_f64();
        LossTerms {
            denoise: read(loss.denoise),
            weak: read(loss.weak),
            contrastive: read(loss.contrastive),
            attention: read(loss.attention),
            total: read(loss.total),
        }
    }
}
