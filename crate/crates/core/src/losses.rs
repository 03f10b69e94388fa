//! Contrastive, color-cycle, adversarial and frequency objectives.
//!
//! Each term has a tape builder (`*_var`) used in training and a value
//! function over plain tensors built on the same tape code.

use derain_tensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DerainError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Contrastive.
    pub lambda1: f64,
    /// Color cycle.
    pub lambda2: f64,
    /// Adversarial.
    pub lambda3: f64,
    /// Frequency.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 2.0, lambda2: 1.0, lambda3: 1.0, lambda4: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DerainError::Config(format!("loss weight {name} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("lambda4", self.lambda4)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub n_internal: usize,
    pub n_external: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { tau: 0.07, n_internal: 255, n_external: 256 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DerainError::Config(format!("tau = {} must be positive", self.tau)));
        }
        if self.n_internal + self.n_external == 0 {
            return Err(DerainError::Config("at least one negative is required".into()));
        }
        Ok(())
    }
}

/// Which negatives enter the contrastive denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesMode {
    InternalOnly,
    ExternalOnly,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    /// Log-likelihood form with the non-saturating generator objective.
    Log,
    /// Least-squares targets 1 (real) and 0 (fake).
    LeastSquares,
}

/// Reduction of the frequency term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyScale {
    /// Plain sum of squared magnitudes over one-sided bins.
    Sum,
    /// The sum divided by `(H·W)²`, i.e. with an orthonormal transform and a
    /// per-pixel mean; comparable in magnitude to the color term.
    PerPixel,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(DerainError::Dimension(format!("code lengths differ: {} vs {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(DerainError::Domain("cosine similarity needs finite nonzero codes".into()));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// `exp(cos∠(u, v) / tau)`.
pub fn sim(u: &[f64], v: &[f64], tau: f64) -> Result<f64> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(DerainError::Domain(format!("tau = {tau} must be positive")));
    }
    Ok((cosine(u, v)? / tau).exp())
}

/// Query, positive and negatives for one location.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSet {
    query: Vec<f64>,
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
}

impl ContrastiveSet {
    pub fn new(query: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>) -> Result<Self> {
        let d = query.len();
        if d == 0 || negatives.is_empty() {
            return Err(DerainError::Domain("a contrastive set needs codes and at least one negative".into()));
        }
        for code in std::iter::once(&positive).chain(&negatives).chain(std::iter::once(&query)) {
            if code.len() != d {
                return Err(DerainError::Dimension(format!("code length {} differs from {d}", code.len())));
            }
            let n = norm(code);
            if n == 0.0 || !n.is_finite() {
                return Err(DerainError::Domain("zero or non-finite code in contrastive set".into()));
            }
        }
        Ok(ContrastiveSet { query, positive, negatives })
    }

    pub fn query(&self) -> &[f64] {
        &self.query
    }

    pub fn positive(&self) -> &[f64] {
        &self.positive
    }

    pub fn negatives(&self) -> &[Vec<f64>] {
        &self.negatives
    }

    /// `−log(s⁺ / (s⁺ + Σ s⁻))`, evaluated with a shifted log-sum-exp.
    pub fn loss(&self, tau: f64) -> Result<f64> {
        let pos = cosine(&self.query, &self.positive)? / tau;
        let mut logits = vec![pos];
        for n in &self.negatives {
            logits.push(cosine(&self.query, n)? / tau);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(lse - pos)
    }
}

/// Mean of the per-set losses.
pub fn contrastive_loss(sets: &[ContrastiveSet], cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    if sets.is_empty() {
        return Err(DerainError::Domain("contrastive loss over an empty set list".into()));
    }
    let mut total = 0.0;
    for s in sets {
        total += s.loss(cfg.tau)?;
    }
    Ok(total / sets.len() as f64)
}

/// Batched contrastive loss over `S` queries.
///
/// `queries` and `keys` are raw `S×D` codes; row `i` of `keys` is the positive
/// of query `i` and the other rows are its internal negatives. `external` is
/// an `E×D` block shared by every query. Rows are normalized with `eps` added
/// to the norm.
pub fn info_nce_var<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    keys: Var,
    external: Option<Var>,
    mode: NegativesMode,
    tau: f64,
    eps: f64,
) -> Result<Var> {
    let s = g.shape(queries)[0];
    let q = g.row_normalize(queries, eps)?;
    let k = g.row_normalize(keys, eps)?;
    let ext = match external {
        Some(e) => Some(g.row_normalize(e, eps)?),
        None => None,
    };
    let (logits, targets): (Var, Vec<usize>) = match (mode, ext) {
        (NegativesMode::ExternalOnly, Some(e)) => {
            let pos = g.row_dot(q, k)?;
            let neg = g.matmul_nt(q, e)?;
            (g.concat_cols(pos, neg)?, vec![0; s])
        }
        (NegativesMode::ExternalOnly, None) => {
            return Err(DerainError::Config("external-only negatives need an external block".into()))
        }
        (NegativesMode::Both, Some(e)) => {
            let internal = g.matmul_nt(q, k)?;
            let neg = g.matmul_nt(q, e)?;
            (g.concat_cols(internal, neg)?, (0..s).collect())
        }
        _ => (g.matmul_nt(q, k)?, (0..s).collect()),
    };
    let scaled = g.scale(logits, 1.0 / tau);
    Ok(g.cross_entropy(scaled, &targets)?)
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(DerainError::Dimension(format!("shape mismatch: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    if g.shape(a).len() != 3 {
        return Err(DerainError::Dimension(format!("expected C×H×W, got {:?}", g.shape(a))));
    }
    Ok(())
}

/// `Σ_c mean_pixels |x_rec_c − x_c|`.
pub fn color_cycle_var<T: Real>(g: &mut Graph<T>, x: Var, x_rec: Var) -> Result<Var> {
    same_shape(g, x, x_rec)?;
    let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
    let d = g.sub(x_rec, x)?;
    let a = g.abs(d);
    let s = g.sum(a);
    Ok(g.scale(s, 1.0 / (h * w) as f64))
}

/// Per-channel one-sided 2-D DFT of `x_rec − x`, squared magnitudes summed over
/// bins and channels (unnormalized forward transform), optionally rescaled.
pub fn frequency_var<T: Real>(g: &mut Graph<T>, x: Var, x_rec: Var, scale: FrequencyScale) -> Result<Var> {
    same_shape(g, x, x_rec)?;
    let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
    let d = g.sub(x_rec, x)?;
    let e = g.spectral_energy(d, true)?;
    Ok(match scale {
        FrequencyScale::Sum => e,
        FrequencyScale::PerPixel => g.scale(e, 1.0 / ((h * w) as f64).powi(2)),
    })
}

/// Discriminator objective (minimized): `−[E log σ(real) + E log(1 − σ(fake))]`
/// or the least-squares counterpart.
pub fn adversarial_d_var<T: Real>(g: &mut Graph<T>, real: Var, fake: Var, kind: AdversarialKind) -> Result<Var> {
    Ok(match kind {
        AdversarialKind::Log => {
            let r = g.log_sigmoid_mean(real, 1.0);
            let f = g.log_sigmoid_mean(fake, -1.0);
            g.weighted_sum(&[(r, -1.0), (f, -1.0)])?
        }
        AdversarialKind::LeastSquares => {
            let r = g.squared_error_mean(real, 1.0);
            let f = g.squared_error_mean(fake, 0.0);
            g.weighted_sum(&[(r, 0.5), (f, 0.5)])?
        }
    })
}

/// Generator objective (minimized): `−E log σ(fake)` or `E (fake − 1)²`.
pub fn adversarial_g_var<T: Real>(g: &mut Graph<T>, fake: Var, kind: AdversarialKind) -> Var {
    match kind {
        AdversarialKind::Log => {
            let f = g.log_sigmoid_mean(fake, 1.0);
            g.scale(f, -1.0)
        }
        AdversarialKind::LeastSquares => g.squared_error_mean(fake, 1.0),
    }
}

fn eval_pair<T: Real>(x: &Tensor<T>, x_rec: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var, Var) -> Result<Var>) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(x_rec.clone());
    let out = f(&mut g, a, b)?;
    Ok(g.value(out).item())
}

pub fn color_cycle_term<T: Real>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<T> {
    eval_pair(x, x_rec, color_cycle_var)
}

/// One-sided frequency term with the plain bin sum.
pub fn frequency_term<T: Real>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<T> {
    eval_pair(x, x_rec, |g, a, b| frequency_var(g, a, b, FrequencyScale::Sum))
}

/// Same as [`frequency_term`] over the full two-sided spectrum.
pub fn frequency_term_two_sided<T: Real>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<T> {
    eval_pair(x, x_rec, |g, a, b| {
        same_shape(g, a, b)?;
        let d = g.sub(b, a)?;
        Ok(g.spectral_energy(d, false)?)
    })
}

fn check_logits(name: &str, logits: &[f64]) -> Result<()> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(DerainError::Numeric(format!("{name} logits must be finite and nonempty")));
    }
    Ok(())
}

fn mean_log_sigmoid(logits: &[f64], sign: f64) -> f64 {
    logits.iter().map(|&z| derain_tensor::log_sigmoid(sign * z)).sum::<f64>() / logits.len() as f64
}

/// The printed minimax value `E log σ(real) + E log(1 − σ(fake))`.
pub fn adversarial_value_d(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    check_logits("real", real_logits)?;
    check_logits("fake", fake_logits)?;
    Ok(mean_log_sigmoid(real_logits, 1.0) + mean_log_sigmoid(fake_logits, -1.0))
}

/// Non-saturating generator objective `−E log σ(fake)`.
pub fn adversarial_value_g(fake_logits: &[f64]) -> Result<f64> {
    check_logits("fake", fake_logits)?;
    Ok(-mean_log_sigmoid(fake_logits, 1.0))
}

/// Per-term values entering the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub cont: f64,
    pub colorcyc: f64,
    pub adv: f64,
    pub freq: f64,
}

/// `λ₁·cont + λ₂·colorcyc + λ₃·adv + λ₄·freq`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_cont", c.cont), ("l_colorcyc", c.colorcyc), ("l_adv", c.adv), ("l_freq", c.freq)] {
        if !v.is_finite() {
            return Err(DerainError::Numeric(format!("component {name} is not finite ({v})")));
        }
    }
    Ok(w.lambda1 * c.cont + w.lambda2 * c.colorcyc + w.lambda3 * c.adv + w.lambda4 * c.freq)
}
