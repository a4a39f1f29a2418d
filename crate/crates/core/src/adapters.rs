//! Weight-update parameterizations for attention linears.
//!
//! Three kinds are supported, all applied to a frozen base weight
//! `W0 (d x k)` acting on column vectors (`y = W x`, `x` of length `k`):
//!
//! - LoRA:      `W' = W0 + B A`, `B (d x r)` zero-init, `A (r x k)` He-init
//! - KronA:     `W' = W0 + A (x) B`, Kronecker-factored update
//! - KronA-WED: `W' = m ⊙_cols (W0 + A (x) B) / ||W0 + A (x) B||_c`
//!
//! where `||.||_c` takes the Euclidean norm of each column (floored at
//! [`NORM_EPS`]) and `m (1 x k)` is a trainable per-column magnitude,
//! initialized to `||W0||_c`. Every kind has its second factor zeroed at
//! init, so fresh adapters reproduce `W0` exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Mat;
use crate::{Error, Result, Scalar};

/// Floor applied to per-column norms before dividing.
pub const NORM_EPS: f64 = 1e-8;

/// Which update parameterization a layer carries.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    KronaWed,
    Krona,
    Lora,
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AdapterKind::KronaWed => "krona_wed",
            AdapterKind::Krona => "krona",
            AdapterKind::Lora => "lora",
        };
        f.write_str(s)
    }
}

/// Kronecker factor shapes for a `d x k` weight: `A (a1 x a2)`, `B (b1 x b2)`
/// with `a1*b1 = d` and `a2*b2 = k`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct KronFactors {
    pub a1: usize,
    pub a2: usize,
    pub b1: usize,
    pub b2: usize,
}

/// Picks Kronecker factor shapes for a `d x k` weight and factor size `f`:
/// `A (f x f)`, `B (d/f x k/f)`.
///
/// Errors when `f` divides neither dimension cleanly; layer-wrapping code
/// that must accept arbitrary shapes uses [`choose_factors_relaxed`].
pub fn choose_factors(d: usize, k: usize, f: usize) -> Result<KronFactors> {
    if d == 0 || k == 0 {
        return Err(Error::config(format!("degenerate weight shape {d}x{k}")));
    }
    if f == 0 {
        return Err(Error::config("factor size f must be at least 1"));
    }
    if d % f != 0 {
        return Err(Error::config(format!(
            "factor size {f} does not divide d = {d} of weight {d}x{k}"
        )));
    }
    if k % f != 0 {
        return Err(Error::config(format!(
            "factor size {f} does not divide k = {k} of weight {d}x{k}"
        )));
    }
    Ok(KronFactors { a1: f, a2: f, b1: d / f, b2: k / f })
}

/// Like [`choose_factors`], but non-divisible dimensions fall back to the
/// largest divisor of that dimension not exceeding `f`, with a log line.
pub fn choose_factors_relaxed(d: usize, k: usize, f: usize) -> Result<KronFactors> {
    if d == 0 || k == 0 {
        return Err(Error::config(format!("degenerate weight shape {d}x{k}")));
    }
    if f == 0 {
        return Err(Error::config("factor size f must be at least 1"));
    }
    let a1 = largest_divisor_at_most(d, f);
    let a2 = largest_divisor_at_most(k, f);
    if (a1, a2) != (f, f) {
        log::warn!("factor size {f} does not divide weight {d}x{k}; using A {a1}x{a2}");
    }
    Ok(KronFactors { a1, a2, b1: d / a1, b2: k / a2 })
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|c| n % c == 0).unwrap_or(1)
}

/// Trainable state of a KronA-WED adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct KronaWedAdapter<S: Scalar> {
    /// Kronecker factor `A (a1 x a2)`, He-initialized.
    pub a: Mat<S>,
    /// Kronecker factor `B (b1 x b2)`, zero-initialized.
    pub b: Mat<S>,
    /// Per-column magnitude `m (1 x k)` initialized to `||W0||_c`.
    pub m: Mat<S>,
}

/// Trainable state of a plain KronA adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct KronaAdapter<S: Scalar> {
    pub a: Mat<S>,
    pub b: Mat<S>,
}

/// Trainable state of a LoRA adapter (`W' = W0 + B A`).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S: Scalar> {
    /// `B (d x r)`, zero-initialized.
    pub b: Mat<S>,
    /// `A (r x k)`, He-initialized.
    pub a: Mat<S>,
}

/// A layer's adapter, any kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Adapter<S: Scalar> {
    KronaWed(KronaWedAdapter<S>),
    Krona(KronaAdapter<S>),
    Lora(LoraAdapter<S>),
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Initializes a KronA-WED adapter with precomputed factor shapes.
pub fn init_krona_wed_factors<S: Scalar>(
    w0: &Mat<S>,
    fac: KronFactors,
    seed: u64,
) -> KronaWedAdapter<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    KronaWedAdapter {
        a: Mat::randn(fac.a1, fac.a2, 0.0, he_std(fac.a2), &mut rng),
        b: Mat::zeros(fac.b1, fac.b2),
        m: w0.col_norms(S::zero()),
    }
}

/// Initializes a KronA-WED adapter for base weight `w0` with factor size `f`.
///
/// `A ~ N(0, 2/a2)`, `B = 0`, `m = ||W0||_c`, so the initial effective
/// weight equals `w0`.
pub fn init_krona_wed<S: Scalar>(w0: &Mat<S>, f: usize, seed: u64) -> Result<KronaWedAdapter<S>> {
    let (d, k) = w0.shape();
    Ok(init_krona_wed_factors(w0, choose_factors(d, k, f)?, seed))
}

/// Initializes a plain KronA adapter with precomputed factor shapes.
pub fn init_krona_factors<S: Scalar>(fac: KronFactors, seed: u64) -> KronaAdapter<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    KronaAdapter {
        a: Mat::randn(fac.a1, fac.a2, 0.0, he_std(fac.a2), &mut rng),
        b: Mat::zeros(fac.b1, fac.b2),
    }
}

/// Initializes a plain KronA adapter (`A` He, `B = 0`).
pub fn init_krona<S: Scalar>(w0: &Mat<S>, f: usize, seed: u64) -> Result<KronaAdapter<S>> {
    let (d, k) = w0.shape();
    Ok(init_krona_factors(choose_factors(d, k, f)?, seed))
}

/// Initializes a LoRA adapter of rank `r` (`B = 0`, `A` He).
pub fn init_lora<S: Scalar>(w0: &Mat<S>, r: usize, seed: u64) -> Result<LoraAdapter<S>> {
    let (d, k) = w0.shape();
    if r == 0 || r > d.min(k) {
        return Err(Error::config(format!("lora rank {r} invalid for weight {d}x{k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LoraAdapter { b: Mat::zeros(d, r), a: Mat::randn(r, k, 0.0, he_std(k), &mut rng) })
}

/// Initializes an adapter of the requested kind; `rank_or_factor` is the
/// LoRA rank or the Kronecker factor size depending on the kind. Kronecker
/// shapes use the relaxed factor choice so any layer can be wrapped.
pub fn init_adapter<S: Scalar>(
    kind: AdapterKind,
    w0: &Mat<S>,
    rank_or_factor: usize,
    seed: u64,
) -> Result<Adapter<S>> {
    let (d, k) = w0.shape();
    Ok(match kind {
        AdapterKind::KronaWed => {
            let fac = choose_factors_relaxed(d, k, rank_or_factor)?;
            Adapter::KronaWed(init_krona_wed_factors(w0, fac, seed))
        }
        AdapterKind::Krona => {
            let fac = choose_factors_relaxed(d, k, rank_or_factor)?;
            Adapter::Krona(init_krona_factors(fac, seed))
        }
        AdapterKind::Lora => Adapter::Lora(init_lora(w0, rank_or_factor, seed)?),
    })
}

impl<S: Scalar> KronaWedAdapter<S> {
    /// Effective weight `m ⊙_cols (W0 + A (x) B) / ||W0 + A (x) B||_c`.
    pub fn effective_weight(&self, w0: &Mat<S>) -> Mat<S> {
        let shifted = w0.add(&self.a.kron(&self.b));
        let norms = shifted.col_norms(S::of(NORM_EPS));
        Mat::from_fn(w0.rows(), w0.cols(), |i, j| {
            shifted[(i, j)] / norms[(0, j)] * self.m[(0, j)]
        })
    }
}

impl<S: Scalar> KronaAdapter<S> {
    /// Effective weight `W0 + A (x) B`.
    pub fn effective_weight(&self, w0: &Mat<S>) -> Mat<S> {
        w0.add(&self.a.kron(&self.b))
    }
}

impl<S: Scalar> LoraAdapter<S> {
    /// Effective weight `W0 + B A`.
    pub fn effective_weight(&self, w0: &Mat<S>) -> Mat<S> {
        w0.add(&self.b.matmul(&self.a))
    }
}

impl<S: Scalar> Adapter<S> {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::KronaWed(_) => AdapterKind::KronaWed,
            Adapter::Krona(_) => AdapterKind::Krona,
            Adapter::Lora(_) => AdapterKind::Lora,
        }
    }

    /// Effective weight for base `w0`.
    pub fn effective_weight(&self, w0: &Mat<S>) -> Mat<S> {
        match self {
            Adapter::KronaWed(a) => a.effective_weight(w0),
            Adapter::Krona(a) => a.effective_weight(w0),
            Adapter::Lora(a) => a.effective_weight(w0),
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        match self {
            Adapter::KronaWed(a) => a.a.len() + a.b.len() + a.m.len(),
            Adapter::Krona(a) => a.a.len() + a.b.len(),
            Adapter::Lora(a) => a.b.len() + a.a.len(),
        }
    }
}

/// Applies the adapted layer to column-stacked inputs: `W' x`, `x (k x n)`.
pub fn adapter_forward<S: Scalar>(w0: &Mat<S>, adapter: &Adapter<S>, x: &Mat<S>) -> Mat<S> {
    adapter.effective_weight(w0).matmul(x)
}

/// Trainable-parameter count of a KronA-WED adapter for a `d x k` weight.
pub fn krona_wed_param_count(d: usize, k: usize, f: usize) -> Result<usize> {
    let fac = choose_factors(d, k, f)?;
    Ok(fac.a1 * fac.a2 + fac.b1 * fac.b2 + k)
}

/// Trainable-parameter count of a rank-`r` LoRA for a `d x k` weight.
pub fn lora_param_count(d: usize, k: usize, r: usize) -> usize {
    r * (d + k)
}

/// Tape handles to a layer's adapter parameters.
#[derive(Clone, Copy, Debug)]
pub enum AdapterVars {
    KronaWed { a: Var, b: Var, m: Var },
    Krona { a: Var, b: Var },
    Lora { b: Var, a: Var },
}

/// Registers the adapter's matrices on the tape as trainable parameters.
pub fn adapter_params<S: Scalar>(g: &mut Graph<S>, adapter: &Adapter<S>) -> AdapterVars {
    match adapter {
        Adapter::KronaWed(a) => AdapterVars::KronaWed {
            a: g.param(a.a.clone()),
            b: g.param(a.b.clone()),
            m: g.param(a.m.clone()),
        },
        Adapter::Krona(a) => {
            AdapterVars::Krona { a: g.param(a.a.clone()), b: g.param(a.b.clone()) }
        }
        Adapter::Lora(a) => AdapterVars::Lora { b: g.param(a.b.clone()), a: g.param(a.a.clone()) },
    }
}

/// Builds the effective weight on the tape so gradients reach the adapter.
pub fn effective_weight_graph<S: Scalar>(g: &mut Graph<S>, w0: Var, vars: AdapterVars) -> Var {
    match vars {
        AdapterVars::KronaWed { a, b, m } => {
            let update = g.kron(a, b);
            let shifted = g.add(w0, update);
            let norms = g.col_norms(shifted, S::of(NORM_EPS));
            let unit = g.div_cols_vec(shifted, norms);
            g.mul_cols_vec(unit, m)
        }
        AdapterVars::Krona { a, b } => {
            let update = g.kron(a, b);
            g.add(w0, update)
        }
        AdapterVars::Lora { b, a } => {
            let update = g.matmul(b, a);
            g.add(w0, update)
        }
    }
}

/// Reads updated adapter values back off the tape after an optimizer step.
pub fn adapter_from_vars<S: Scalar>(g: &Graph<S>, vars: AdapterVars) -> Adapter<S> {
    match vars {
        AdapterVars::KronaWed { a, b, m } => Adapter::KronaWed(KronaWedAdapter {
            a: g.value(a).clone(),
            b: g.value(b).clone(),
            m: g.value(m).clone(),
        }),
        AdapterVars::Krona { a, b } => {
            Adapter::Krona(KronaAdapter { a: g.value(a).clone(), b: g.value(b).clone() })
        }
        AdapterVars::Lora { b, a } => {
            Adapter::Lora(LoraAdapter { b: g.value(b).clone(), a: g.value(a).clone() })
        }
    }
}
