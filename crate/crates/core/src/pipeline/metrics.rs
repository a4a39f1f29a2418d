//! Metric arithmetic and pluggable embedding backends.
//!
//! Identity preservation and prompt alignment are cosine scores from an
//! [`EmbedBackend`]; their balance is the harmonic mean [`f1_score`] with
//! the alignment score rescaled by [`CLIP_T_SCALE`] to match the identity
//! score's range. Real vision/text networks plug in behind the trait; the
//! built-in [`StubEmbed`] keeps the suite hermetic.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::Scalar;

/// Factor matching the alignment score's range to the identity score's.
pub const CLIP_T_SCALE: f64 = 2.5;

/// Harmonic mean of identity (`dino`) and rescaled alignment (`2.5 * clip_t`).
///
/// Returns 0 when both inputs are 0.
pub fn f1_score(dino: f64, clip_t: f64) -> f64 {
    let a = dino;
    let b = CLIP_T_SCALE * clip_t;
    if a + b == 0.0 {
        return 0.0;
    }
    2.0 * a * b / (a + b)
}

/// Mean per-concept identity score for a multi-concept image.
pub fn dino_multi_average(per_concept: &[f64]) -> Result<f64> {
    if per_concept.is_empty() {
        return Err(Error::config("cannot average an empty list of identity scores"));
    }
    Ok(per_concept.iter().sum::<f64>() / per_concept.len() as f64)
}

/// Cosine similarity between two embedding vectors; 0 if either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "embedding lengths differ");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ---------------------------------------------------------------------------
// embedding backends
// ---------------------------------------------------------------------------

/// Deterministic image/text embedder; real networks implement this.
pub trait EmbedBackend<S: Scalar> {
    /// Backend identifier used in reports.
    fn name(&self) -> &str;
    /// Embeds a `pixels x 3` RGB image.
    fn embed_image(&self, image: &Mat<S>) -> Vec<f64>;
    /// Embeds a prompt string.
    fn embed_text(&self, text: &str) -> Vec<f64>;
}

/// Instantiates a registered backend by name.
pub fn make_backend<S: Scalar>(name: &str, seed: u64) -> Result<Box<dyn EmbedBackend<S>>> {
    match name {
        "stub" => Ok(Box::new(StubEmbed::new(seed))),
        other => Err(Error::config(format!(
            "embed backend '{other}' is not registered; known backends: stub"
        ))),
    }
}

/// Hermetic backend: a fixed, seed-pinned random projection of image pixel
/// statistics and text token statistics, normalized to unit length.
pub struct StubEmbed {
    seed: u64,
    image_proj: Mat<f64>,
    text_proj: Mat<f64>,
}

/// Embedding width the stub produces (projection plus anchor coordinate).
pub const STUB_DIM: usize = 25;
const PROJ_DIM: usize = 24;
const IMAGE_STATS: usize = 26;
const TEXT_BUCKETS: usize = 32;
/// Shared anchor weight; keeps cross-modal cosines in a positive band
/// (`cos = κ² + (1−κ²)·cos_raw`) the way real embedding spaces behave.
const ANCHOR: f64 = 0.5;

impl StubEmbed {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StubEmbed {
            seed,
            image_proj: Mat::randn(PROJ_DIM, IMAGE_STATS, 0.0, 1.0, &mut rng),
            text_proj: Mat::randn(PROJ_DIM, TEXT_BUCKETS, 0.0, 1.0, &mut rng),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Unit vector `[κ, √(1−κ²)·v]` from a unit vector `v`.
fn anchored(v: Vec<f64>) -> Vec<f64> {
    let scale = (1.0 - ANCHOR * ANCHOR).sqrt();
    let mut out = Vec::with_capacity(v.len() + 1);
    out.push(ANCHOR);
    out.extend(v.into_iter().map(|x| x * scale));
    out
}

/// Per-channel mean/std/min/max, luminance mean/std, and quadrant channel
/// means of a square RGB image.
fn image_stats<S: Scalar>(image: &Mat<S>) -> Vec<f64> {
    assert_eq!(image.cols(), 3, "image stats expect RGB rows");
    let n = image.rows() as f64;
    let side = (image.rows() as f64).sqrt() as usize;
    let mut stats = Vec::with_capacity(IMAGE_STATS);
    let mut lums = Vec::with_capacity(image.rows());
    for c in 0..3 {
        let col: Vec<f64> = (0..image.rows()).map(|i| image[(i, c)].to_f64()).collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        stats.extend([mean, var.sqrt(), min, max]);
    }
    for i in 0..image.rows() {
        lums.push(
            0.2126 * image[(i, 0)].to_f64()
                + 0.7152 * image[(i, 1)].to_f64()
                + 0.0722 * image[(i, 2)].to_f64(),
        );
    }
    let lmean = lums.iter().sum::<f64>() / n;
    let lvar = lums.iter().map(|x| (x - lmean) * (x - lmean)).sum::<f64>() / n;
    stats.extend([lmean, lvar.sqrt()]);
    // quadrant channel means localize where color mass sits
    for qr in 0..2 {
        for qc in 0..2 {
            let mut sums = [0.0f64; 3];
            let mut count = 0.0;
            for r in (qr * side / 2)..((qr + 1) * side / 2) {
                for c in (qc * side / 2)..((qc + 1) * side / 2) {
                    let i = r * side + c;
                    for ch in 0..3 {
                        sums[ch] += image[(i, ch)].to_f64();
                    }
                    count += 1.0;
                }
            }
            for s in sums {
                stats.push(if count > 0.0 { s / count } else { 0.0 });
            }
        }
    }
    debug_assert_eq!(stats.len(), IMAGE_STATS);
    stats
}

/// FNV-1a hash over a token's bytes.
fn token_bucket(token: &str) -> usize {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (h % TEXT_BUCKETS as u64) as usize
}

fn text_stats(text: &str) -> Vec<f64> {
    let mut stats = vec![0.0f64; TEXT_BUCKETS];
    let mut count = 0.0;
    for token in text.split_whitespace() {
        stats[token_bucket(token)] += 1.0;
        count += 1.0;
    }
    if count > 0.0 {
        for s in &mut stats {
            *s /= count;
        }
    }
    stats
}

impl<S: Scalar> EmbedBackend<S> for StubEmbed {
    fn name(&self) -> &str {
        "stub"
    }

    fn embed_image(&self, image: &Mat<S>) -> Vec<f64> {
        let stats = Mat::from_vec(IMAGE_STATS, 1, image_stats(image));
        anchored(normalize(self.image_proj.matmul(&stats).data().to_vec()))
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let stats = Mat::from_vec(TEXT_BUCKETS, 1, text_stats(text));
        anchored(normalize(self.text_proj.matmul(&stats).data().to_vec()))
    }
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

/// Scores for one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Backend that produced the embeddings.
    pub backend: String,
    /// Identity score per concept, keyed by concept name.
    pub per_concept_identity: BTreeMap<String, f64>,
    /// Mean of the per-concept identity scores.
    pub identity: f64,
    /// Raw prompt-alignment score.
    pub prompt_alignment: f64,
    /// Alignment rescaled by [`CLIP_T_SCALE`].
    pub scaled_alignment: f64,
    /// Harmonic mean of identity and scaled alignment.
    pub f1: f64,
    /// Face-identity score when a face backend is configured.
    pub face_identity: Option<f64>,
}

impl MetricReport {
    /// Recomputes F1 from the stored components (consistency invariant).
    pub fn recomputed_f1(&self) -> f64 {
        f1_score(self.identity, self.prompt_alignment)
    }

    /// Plain-text table, one `name<tab>value` row per score.
    pub fn to_table(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        for (name, score) in &self.per_concept_identity {
            out.push_str(&format!("identity[{name}]\t{score:.6}\n"));
        }
        out.push_str(&format!("identity\t{:.6}\n", self.identity));
        out.push_str(&format!("prompt_alignment\t{:.6}\n", self.prompt_alignment));
        out.push_str(&format!("scaled_alignment\t{:.6}\n", self.scaled_alignment));
        out.push_str(&format!("f1\t{:.6}\n", self.f1));
        if let Some(face) = self.face_identity {
            out.push_str(&format!("face_identity\t{face:.6}\n"));
        }
        out
    }
}

/// Scores one image against per-concept reference images and a prompt.
///
/// Identity per concept is the mean cosine between the image embedding and
/// each reference embedding; alignment is the image/text cosine. Negative
/// cosines clamp to 0 so every score lives in `[0, 1]`.
pub fn evaluate_image<S: Scalar>(
    backend: &dyn EmbedBackend<S>,
    image: &Mat<S>,
    references: &[(String, Vec<Mat<S>>)],
    prompt: &str,
) -> Result<MetricReport> {
    if references.is_empty() {
        return Err(Error::config("need at least one concept with reference images"));
    }
    let image_emb = backend.embed_image(image);
    let mut per_concept_identity = BTreeMap::new();
    for (name, refs) in references {
        if refs.is_empty() {
            return Err(Error::config(format!("concept '{name}' has no reference images")));
        }
        let mean = refs
            .iter()
            .map(|r| cosine(&image_emb, &backend.embed_image(r)).max(0.0))
            .sum::<f64>()
            / refs.len() as f64;
        per_concept_identity.insert(name.clone(), mean);
    }
    let scores: Vec<f64> = per_concept_identity.values().copied().collect();
    let identity = dino_multi_average(&scores)?;
    let prompt_alignment = cosine(&image_emb, &backend.embed_text(prompt)).max(0.0);
    Ok(MetricReport {
        backend: backend.name().to_string(),
        per_concept_identity,
        identity,
        prompt_alignment,
        scaled_alignment: CLIP_T_SCALE * prompt_alignment,
        f1: f1_score(identity, prompt_alignment),
        face_identity: None,
    })
}
