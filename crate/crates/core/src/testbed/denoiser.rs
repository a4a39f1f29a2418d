//! Toy noise-prediction network.
//!
//! Layout (rows are grid locations, channels in columns):
//!
//! ```text
//! z (256x4) -> in_proj -> +time -> [enc block @16x16]
//!     -> 2x2 mean pool -> [mid block @8x8] -> nearest 2x up -> +skip
//!     -> [dec block @16x16] -> out_proj -> eps (256x4)
//! ```
//!
//! Each block is pre-norm self-attention then cross-attention over the text
//! sequence, residual adds, no feed-forward. All 24 attention linears
//! (`{enc,mid,dec}.{self,cross}.{q,k,v,o}`) hold frozen base weights in the
//! `y = W x` convention and are adapter-wrappable; fused models attach dense
//! deltas instead. The forward builder records cross-attention probabilities,
//! decoder descriptors/Q/K/V, and every linear's input, so training losses,
//! SAMA, guidance, and fusion all read from one pass.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adapters::{
    adapter_from_vars, adapter_params, effective_weight_graph, Adapter, AdapterVars,
};
use crate::graph::{Graph, Var};
use crate::tensor::Mat;
use crate::{Error, Result, Scalar};

use super::{derive_seed, HEADS, LATENT_CHANNELS, LATENT_PIXELS, LN_EPS, MODEL_DIM};

/// Attention-linear layer ids in stable order.
pub fn layer_ids() -> Vec<String> {
    let mut ids = Vec::with_capacity(24);
    for block in ["enc", "mid", "dec"] {
        for attn in ["self", "cross"] {
            for proj in ["q", "k", "v", "o"] {
                ids.push(format!("{block}.{attn}.{proj}"));
            }
        }
    }
    ids
}

/// A fused dense update for one layer.
pub type LayerDelta<S> = Mat<S>;

/// Frozen base weights plus optional per-layer adapters or fused deltas.
pub struct Denoiser<S: Scalar> {
    in_proj: Mat<S>,
    time_w1: Mat<S>,
    time_w2: Mat<S>,
    out_proj: Mat<S>,
    attn: BTreeMap<String, Mat<S>>,
    adapters: BTreeMap<String, Adapter<S>>,
    deltas: BTreeMap<String, LayerDelta<S>>,
}

impl<S: Scalar> Denoiser<S> {
    /// Builds frozen base weights from `seed`.
    pub fn new(seed: u64) -> Self {
        let dim = MODEL_DIM;
        let std = (1.0 / dim as f64).sqrt();
        let mut proj_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 201));
        let in_proj = Mat::randn(dim, LATENT_CHANNELS, 0.0, 0.5, &mut proj_rng);
        let time_w1 = Mat::randn(dim, dim, 0.0, std, &mut proj_rng);
        let time_w2 = Mat::randn(dim, dim, 0.0, std, &mut proj_rng);
        let out_proj = Mat::randn(LATENT_CHANNELS, dim, 0.0, std, &mut proj_rng);
        let mut attn = BTreeMap::new();
        for (i, id) in layer_ids().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 300 + i as u64));
            attn.insert(id, Mat::randn(dim, dim, 0.0, std, &mut rng));
        }
        Denoiser {
            in_proj,
            time_w1,
            time_w2,
            out_proj,
            attn,
            adapters: BTreeMap::new(),
            deltas: BTreeMap::new(),
        }
    }

    /// Frozen base weight of an attention linear.
    pub fn base_weight(&self, layer_id: &str) -> Result<&Mat<S>> {
        self.attn
            .get(layer_id)
            .ok_or_else(|| Error::config(format!("unknown layer id '{layer_id}'")))
    }

    pub fn adapters(&self) -> &BTreeMap<String, Adapter<S>> {
        &self.adapters
    }

    pub fn deltas(&self) -> &BTreeMap<String, LayerDelta<S>> {
        &self.deltas
    }

    /// Attaches an adapter to one layer, replacing any previous one.
    pub fn attach_adapter(&mut self, layer_id: &str, adapter: Adapter<S>) -> Result<()> {
        let w0 = self.base_weight(layer_id)?;
        let got = adapter.effective_weight(w0).shape();
        if got != w0.shape() {
            return Err(Error::config(format!(
                "adapter for '{layer_id}' produces {got:?}, layer is {:?}",
                w0.shape()
            )));
        }
        self.adapters.insert(layer_id.to_string(), adapter);
        Ok(())
    }

    /// Attaches a fused dense delta to one layer.
    pub fn set_delta(&mut self, layer_id: &str, delta: LayerDelta<S>) -> Result<()> {
        let w0 = self.base_weight(layer_id)?;
        if delta.shape() != w0.shape() {
            return Err(Error::config(format!(
                "delta for '{layer_id}' has shape {:?}, layer is {:?}",
                delta.shape(),
                w0.shape()
            )));
        }
        self.deltas.insert(layer_id.to_string(), delta);
        Ok(())
    }

    /// Removes all adapters and deltas, restoring the frozen base model.
    pub fn detach_all(&mut self) {
        self.adapters.clear();
        self.deltas.clear();
    }

    /// Initializes adapters of one kind on every attention linear.
    pub fn init_adapters(
        &mut self,
        kind: crate::adapters::AdapterKind,
        rank_or_factor: usize,
        seed: u64,
    ) -> Result<()> {
        for (i, id) in layer_ids().into_iter().enumerate() {
            let w0 = self.base_weight(&id)?.clone();
            let adapter =
                crate::adapters::init_adapter(kind, &w0, rank_or_factor, derive_seed(seed, i as u64))?;
            self.attach_adapter(&id, adapter)?;
        }
        Ok(())
    }

    /// SHA-256 over every frozen weight, for freeze checks.
    pub fn theta0_fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        let mut eat = |m: &Mat<S>| {
            hasher.update((m.rows() as u64).to_le_bytes());
            hasher.update((m.cols() as u64).to_le_bytes());
            for &e in m.data() {
                hasher.update(e.to_f64().to_le_bytes());
            }
        };
        eat(&self.in_proj);
        eat(&self.time_w1);
        eat(&self.time_w2);
        eat(&self.out_proj);
        for w in self.attn.values() {
            eat(w);
        }
        hasher.finalize().into()
    }
}

/// Per-block cross-attention probabilities, one `locations x prompt_len`
/// matrix per head.
pub struct BlockProbs {
    pub grid: (usize, usize),
    pub heads: Vec<Var>,
}

/// Everything one forward pass exposes.
pub struct ForwardPass {
    /// Predicted noise, `256 x 4`.
    pub eps: Var,
    /// Cross-attention probabilities for the enc, mid, dec blocks.
    pub cross_probs: Vec<BlockProbs>,
    /// Decoder-block input features (the SAMA descriptor field), `256 x dim`.
    pub dec_input: Var,
    /// Decoder self-attention query/key/value fields, `256 x dim` each.
    pub dec_q: Var,
    pub dec_k: Var,
    /// The branch's own value field (pre-substitution).
    pub dec_v: Var,
    /// Input sequence of every attention linear, keyed by layer id.
    pub layer_inputs: BTreeMap<String, Var>,
}

/// Per-tape instantiation of the denoiser: effective weights are built once
/// and shared by every forward on the same tape.
pub struct DenoiserGraph<S> {
    eff_t: BTreeMap<String, Var>,
    adapter_vars: BTreeMap<String, AdapterVars>,
    in_proj_t: Var,
    time_w1_t: Var,
    time_w2_t: Var,
    out_proj_t: Var,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> DenoiserGraph<S> {
    /// Registers the model on the tape. With `trainable`, adapter matrices
    /// become parameters receiving gradients; base weights stay constants.
    pub fn build(g: &mut Graph<S>, den: &Denoiser<S>, trainable: bool) -> Self {
        let mut eff_t = BTreeMap::new();
        let mut adapter_vars = BTreeMap::new();
        for (id, w0) in &den.attn {
            let eff = if let Some(delta) = den.deltas.get(id) {
                g.constant(w0.add(delta))
            } else if let Some(adapter) = den.adapters.get(id) {
                if trainable {
                    let vars = adapter_params(g, adapter);
                    adapter_vars.insert(id.clone(), vars);
                    let w0v = g.constant(w0.clone());
                    effective_weight_graph(g, w0v, vars)
                } else {
                    g.constant(adapter.effective_weight(w0))
                }
            } else {
                g.constant(w0.clone())
            };
            eff_t.insert(id.clone(), g.transpose(eff));
        }
        DenoiserGraph {
            eff_t,
            adapter_vars,
            in_proj_t: g.constant(den.in_proj.transpose()),
            time_w1_t: g.constant(den.time_w1.transpose()),
            time_w2_t: g.constant(den.time_w2.transpose()),
            out_proj_t: g.constant(den.out_proj.transpose()),
            _marker: std::marker::PhantomData,
        }
    }

    /// Tape handles of the trainable adapter parameters, keyed by layer id.
    pub fn adapter_vars(&self) -> &BTreeMap<String, AdapterVars> {
        &self.adapter_vars
    }

    /// Reads trained adapters back off the tape.
    pub fn adapters_from_tape(&self, g: &Graph<S>) -> BTreeMap<String, Adapter<S>> {
        self.adapter_vars
            .iter()
            .map(|(id, &vars)| (id.clone(), adapter_from_vars(g, vars)))
            .collect()
    }

    /// One denoiser evaluation on the tape.
    ///
    /// `substitute_dec_values` replaces the decoder self-attention value
    /// field (the SAMA injection site); captured `dec_v` remains the
    /// branch's own values.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        z: Var,
        t: usize,
        f_cond: Var,
        substitute_dec_values: Option<Var>,
    ) -> ForwardPass {
        assert_eq!(g.shape(z), (LATENT_PIXELS, LATENT_CHANNELS), "latent shape");
        let mut layer_inputs = BTreeMap::new();

        let projected = g.matmul(z, self.in_proj_t);
        let temb = g.constant(sinusoidal_time::<S>(t, MODEL_DIM));
        let th = g.matmul(temb, self.time_w1_t);
        let th = g.silu(th);
        let tvec = g.matmul(th, self.time_w2_t);
        let mut x = g.add_row_broadcast(projected, tvec);

        let mut cross_probs = Vec::with_capacity(3);

        // enc @16x16
        let (enc_out, probs, _) =
            self.attn_pair(g, x, f_cond, "enc", (16, 16), None, &mut layer_inputs);
        cross_probs.push(probs);

        // mid @8x8
        let pooled = g.mean_pool_2x2(enc_out, 16, 16);
        let (mid_out, probs, _) =
            self.attn_pair(g, pooled, f_cond, "mid", (8, 8), None, &mut layer_inputs);
        cross_probs.push(probs);

        // dec @16x16 with skip connection; SAMA injection site
        let up = g.upsample_nearest_2x(mid_out, 8, 8);
        x = g.add(up, enc_out);
        let dec_input = x;
        let (dec_out, probs, (dec_q, dec_k, dec_v)) = self.attn_pair(
            g,
            x,
            f_cond,
            "dec",
            (16, 16),
            substitute_dec_values,
            &mut layer_inputs,
        );
        cross_probs.push(probs);

        let eps = g.matmul(dec_out, self.out_proj_t);
        ForwardPass { eps, cross_probs, dec_input, dec_q, dec_k, dec_v, layer_inputs }
    }

    /// Pre-norm self-attention + cross-attention with residuals. Returns the
    /// block output, its cross-attention probabilities, and the
    /// self-attention Q/K/V fields.
    #[allow(clippy::too_many_arguments)]
    fn attn_pair(
        &self,
        g: &mut Graph<S>,
        x: Var,
        f_cond: Var,
        block: &str,
        grid: (usize, usize),
        substitute_values: Option<Var>,
        layer_inputs: &mut BTreeMap<String, Var>,
    ) -> (Var, BlockProbs, (Var, Var, Var)) {
        let head_dim = MODEL_DIM / HEADS;
        let scale = S::of(1.0 / (head_dim as f64).sqrt());

        // self-attention
        let normed = g.layer_norm_row(x, S::of(LN_EPS));
        for proj in ["q", "k", "v"] {
            layer_inputs.insert(format!("{block}.self.{proj}"), normed);
        }
        let q = g.matmul(normed, self.eff_t[&format!("{block}.self.q")]);
        let k = g.matmul(normed, self.eff_t[&format!("{block}.self.k")]);
        let v = g.matmul(normed, self.eff_t[&format!("{block}.self.v")]);
        let v_used = substitute_values.unwrap_or(v);
        let mut heads = Vec::with_capacity(HEADS);
        for h in 0..HEADS {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v_used, h * head_dim, head_dim);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let scaled = g.scale(logits, scale);
            let probs = g.row_softmax(scaled);
            heads.push(g.matmul(probs, vh));
        }
        let merged = g.concat_cols(&heads);
        layer_inputs.insert(format!("{block}.self.o"), merged);
        let sa = g.matmul(merged, self.eff_t[&format!("{block}.self.o")]);
        let x = g.add(x, sa);

        // cross-attention over the text sequence
        let normed2 = g.layer_norm_row(x, S::of(LN_EPS));
        layer_inputs.insert(format!("{block}.cross.q"), normed2);
        layer_inputs.insert(format!("{block}.cross.k"), f_cond);
        layer_inputs.insert(format!("{block}.cross.v"), f_cond);
        let cq = g.matmul(normed2, self.eff_t[&format!("{block}.cross.q")]);
        let ck = g.matmul(f_cond, self.eff_t[&format!("{block}.cross.k")]);
        let cv = g.matmul(f_cond, self.eff_t[&format!("{block}.cross.v")]);
        let mut prob_heads = Vec::with_capacity(HEADS);
        let mut out_heads = Vec::with_capacity(HEADS);
        for h in 0..HEADS {
            let qh = g.slice_cols(cq, h * head_dim, head_dim);
            let kh = g.slice_cols(ck, h * head_dim, head_dim);
            let vh = g.slice_cols(cv, h * head_dim, head_dim);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let scaled = g.scale(logits, scale);
            let probs = g.row_softmax(scaled);
            prob_heads.push(probs);
            out_heads.push(g.matmul(probs, vh));
        }
        let merged = g.concat_cols(&out_heads);
        layer_inputs.insert(format!("{block}.cross.o"), merged);
        let ca = g.matmul(merged, self.eff_t[&format!("{block}.cross.o")]);
        let out = g.add(x, ca);

        (out, BlockProbs { grid, heads: prob_heads }, (q, k, v))
    }
}

/// Standard sinusoidal timestep embedding, `1 x dim`.
fn sinusoidal_time<S: Scalar>(t: usize, dim: usize) -> Mat<S> {
    Mat::from_fn(1, dim, |_, j| {
        let pair = (j / 2) as f64;
        let freq = 10000f64.powf(-2.0 * pair / dim as f64);
        let angle = t as f64 * freq;
        S::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
