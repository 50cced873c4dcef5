//! Training losses: reconstruction, KL divergence, the homothety loss with
//! its closed-form scale, softmax cross-entropy, and the asymmetrically
//! relaxed Wasserstein critic objective with gradient penalty.
//!
//! Each loss exists in two forms that share the same arithmetic: a tape
//! builder (`*_on`) used inside training steps, and a plain value function
//! matching the documented operation signatures (implemented by running a
//! throwaway tape, so both paths cannot drift apart).

use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of the alignment losses.
///
/// `alpha` scales the reversed discriminator gradient, `beta` the KL term,
/// `delta_w` relaxes the target side of the Wasserstein gap (values above 1
/// ask the target feature distribution to sit inside the source's support
/// without requiring mutual overlap), and `gp_weight` scales the gradient
/// penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub delta_w: f64,
    pub gp_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            delta_w: 1.0,
            gp_weight: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if self.delta_w < 1.0 {
            return Err(Error::Config(format!(
                "delta_w must be at least 1, got {}",
                self.delta_w
            )));
        }
        if self.gp_weight < 0.0 {
            return Err(Error::Config(format!(
                "gp_weight must be nonnegative, got {}",
                self.gp_weight
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reconstruction and KL
// ---------------------------------------------------------------------------

/// Mean squared error over batch and channels.
pub fn mse_on<F: Scalar>(tape: &mut Tape<F>, x: Var, xhat: Var) -> Result<Var> {
    let d = tape.sub(x, xhat)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

pub fn reconstruction_loss<F: Scalar>(x: &Tensor<F>, xhat: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::new();
    let a = tape.leaf(x.clone());
    let b = tape.leaf(xhat.clone());
    let l = mse_on(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

/// Closed-form KL between N(μ, σ²) and N(0, 1), batch-averaged:
/// mean over rows of ½·Σ_dim(exp(logvar) + μ² − 1 − logvar).
pub fn kl_on<F: Scalar>(tape: &mut Tape<F>, mu: Var, logvar: Var) -> Result<Var> {
    let n = tape.value(mu).nrows();
    if tape.value(mu).shape() != tape.value(logvar).shape() {
        return Err(Error::shape("kl", "mu/logvar shapes differ"));
    }
    let var = tape.exp(logvar)?;
    let mu2 = tape.square(mu)?;
    let s = tape.add(var, mu2)?;
    let s = tape.add_scalar(s, -F::one())?;
    let s = tape.sub(s, logvar)?;
    let total = tape.sum(s)?;
    tape.scale(total, F::cast(0.5) / F::from_usize_(n))
}

pub fn kl_loss<F: Scalar>(mu: &Tensor<F>, logvar: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::new();
    let m = tape.leaf(mu.clone());
    let lv = tape.leaf(logvar.clone());
    let l = kl_on(&mut tape, m, lv)?;
    Ok(tape.value(l).item())
}

// ---------------------------------------------------------------------------
// Homothety loss
// ---------------------------------------------------------------------------

/// Pairwise distances for one domain: input-space and feature-space lists
/// aligned by pair index.
#[derive(Clone, Debug)]
pub struct DomainPairs<F> {
    pub d_x: Vec<F>,
    pub d_f: Vec<F>,
}

/// One entry per domain (source, target); a single-domain batch is allowed.
#[derive(Clone, Debug)]
pub struct HomothetyBatch<F> {
    pub domains: Vec<DomainPairs<F>>,
}

impl<F: Scalar> HomothetyBatch<F> {
    fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::shape("homothety", "no domains"));
        }
        for d in &self.domains {
            if d.d_x.is_empty() || d.d_x.len() != d.d_f.len() {
                return Err(Error::shape("homothety", "empty or mismatched pair lists"));
            }
        }
        Ok(())
    }
}

/// Closed-form minimizer of the homothety objective: with per-domain means
/// of (d_X − η·d_F)² summed over domains, the optimum is
/// η = Σ_S (1/|S|)·Σ d_X·d_F  /  Σ_S (1/|S|)·Σ d_F². With equal pair counts
/// this reduces to the pooled ratio Σ d_X·d_F / Σ d_F².
pub fn optimal_eta<F: Scalar>(batch: &HomothetyBatch<F>) -> Result<F> {
    batch.validate()?;
    let mut num = F::zero();
    let mut den = F::zero();
    for d in &batch.domains {
        let m = F::from_usize_(d.d_x.len());
        let cross: F = d.d_x.iter().zip(&d.d_f).map(|(&x, &f)| x * f).sum();
        let ff: F = d.d_f.iter().map(|&f| f * f).sum();
        num += cross / m;
        den += ff / m;
    }
    if den <= F::zero() {
        return Err(Error::FeatureCollapse);
    }
    Ok(num / den)
}

/// Per-domain mean of (d_X − η·d_F)², summed over the domains.
pub fn homothety_loss<F: Scalar>(batch: &HomothetyBatch<F>, eta: F) -> Result<F> {
    batch.validate()?;
    let mut total = F::zero();
    for d in &batch.domains {
        let m = F::from_usize_(d.d_x.len());
        let s: F = d
            .d_x
            .iter()
            .zip(&d.d_f)
            .map(|(&x, &f)| {
                let r = x - eta * f;
                r * r
            })
            .sum();
        total += s / m;
    }
    Ok(total)
}

/// Pair index lists for within-batch distance sampling.
#[derive(Clone, Debug)]
pub struct PairIndices {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl PairIndices {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// All unordered within-batch pairs up to a 256-row batch; beyond that, a
/// random subsample of 256·255/2 pairs keeps the cost of a step flat.
pub const MAX_EXACT_PAIR_ROWS: usize = 256;

pub fn sample_pairs(n: usize, rng: &mut impl Rng) -> PairIndices {
    assert!(n >= 2, "need at least two rows to form pairs");
    if n <= MAX_EXACT_PAIR_ROWS {
        let mut a = Vec::with_capacity(n * (n - 1) / 2);
        let mut b = Vec::with_capacity(a.capacity());
        for i in 0..n {
            for j in i + 1..n {
                a.push(i);
                b.push(j);
            }
        }
        PairIndices { a, b }
    } else {
        let m = MAX_EXACT_PAIR_ROWS * (MAX_EXACT_PAIR_ROWS - 1) / 2;
        let mut a = Vec::with_capacity(m);
        let mut b = Vec::with_capacity(m);
        while a.len() < m {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                a.push(i.min(j));
                b.push(i.max(j));
            }
        }
        PairIndices { a, b }
    }
}

/// Input-space pair distances, computed outside the tape (they carry no
/// gradient).
pub fn input_distances<F: Scalar>(x: &Tensor<F>, pairs: &PairIndices) -> Vec<F> {
    pairs
        .a
        .iter()
        .zip(&pairs.b)
        .map(|(&i, &j)| x.row_distance(i, j))
        .collect()
}

/// Feature-space pair distances as a tape node (`n_pairs x 1`).
pub fn feature_distances_on<F: Scalar>(
    tape: &mut Tape<F>,
    features: Var,
    pairs: &PairIndices,
) -> Result<Var> {
    tape.pair_distances(features, pairs.a.clone(), pairs.b.clone())
}

/// One domain's homothety term on the tape: mean(square(d_X − η·d_F)).
/// η enters as a constant; the envelope theorem makes its gradient vanish
/// at the optimum, so no gradient flows through it.
pub fn homothety_term_on<F: Scalar>(
    tape: &mut Tape<F>,
    d_x: &[F],
    d_f: Var,
    eta: F,
) -> Result<Var> {
    let dx = tape.leaf(Tensor::new(vec![d_x.len(), 1], d_x.to_vec())?);
    let scaled = tape.scale(d_f, eta)?;
    let r = tape.sub(dx, scaled)?;
    let sq = tape.square(r)?;
    tape.mean(sq)
}

// ---------------------------------------------------------------------------
// Discriminator losses
// ---------------------------------------------------------------------------

/// Mean categorical cross-entropy on origin labels. A single-class batch
/// gives a degenerate adversarial signal; it is reported but not fatal.
pub fn softmax_discriminator_loss<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    if !labels.is_empty() {
        let first = labels[0];
        if labels.iter().all(|&l| l == first) {
            log::warn!("softmax discriminator batch contains a single class");
        }
    }
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let ce = tape.cross_entropy_with_logits(l, labels.to_vec())?;
    Ok(tape.value(ce).item())
}

/// Critic gap E[disc(F_source)] − δ_w·E[disc(F_target)] as a tape node.
/// The critic is trained to maximize this (the training step minimizes its
/// negation); the extractor receives the reversed gradient through the GRL.
pub fn wasserstein_gap_on<F: Scalar>(
    tape: &mut Tape<F>,
    critic_source: Var,
    critic_target: Var,
    delta_w: F,
) -> Result<Var> {
    let ms = tape.mean(critic_source)?;
    let mt = tape.mean(critic_target)?;
    let mt = tape.scale(mt, delta_w)?;
    tape.sub(ms, mt)
}

pub fn wasserstein_critic_loss<F: Scalar>(
    disc_source: &[F],
    disc_target: &[F],
    delta_w: F,
) -> Result<F> {
    if disc_source.is_empty() || disc_target.is_empty() {
        return Err(Error::shape("wasserstein", "empty critic outputs"));
    }
    if disc_source.iter().chain(disc_target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "wasserstein" });
    }
    let ms = disc_source.iter().copied().sum::<F>() / F::from_usize_(disc_source.len());
    let mt = disc_target.iter().copied().sum::<F>() / F::from_usize_(disc_target.len());
    Ok(ms - delta_w * mt)
}

// ---------------------------------------------------------------------------
// Gradient penalty
// ---------------------------------------------------------------------------

/// Random interpolates x̃ = u·F_s + (1−u)·F_t, u uniform per row; the larger
/// batch is subsampled so both sides contribute equally.
pub fn interpolate_rows<F: Scalar>(
    fs: &Tensor<F>,
    ft: &Tensor<F>,
    rng: &mut impl Rng,
) -> Result<Tensor<F>> {
    if fs.ncols() != ft.ncols() {
        return Err(Error::shape("interpolate", "feature widths differ"));
    }
    let m = fs.nrows().min(ft.nrows());
    let pick = |t: &Tensor<F>, rng: &mut dyn rand::RngCore| -> Tensor<F> {
        if t.nrows() == m {
            t.clone()
        } else {
            let idx = index_sample(rng, t.nrows(), m).into_vec();
            t.select_rows(&idx)
        }
    };
    let s = pick(fs, rng);
    let t = pick(ft, rng);
    let d = s.ncols();
    let mut data = Vec::with_capacity(m * d);
    for i in 0..m {
        let u = F::cast(rng.random_range(0.0..1.0));
        for j in 0..d {
            data.push(u * s.row(i)[j] + (F::one() - u) * t.row(i)[j]);
        }
    }
    Tensor::new(vec![m, d], data)
}

/// Two-sided gradient penalty mean((‖∇ₓ critic(x̃)‖₂ − 1)²) over the given
/// interpolates, built on the critic's parameter vars so its backward
/// reaches the weights.
pub fn gradient_penalty_on<F: Scalar>(
    tape: &mut Tape<F>,
    x_tilde: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    w3: Var,
) -> Result<Var> {
    let norms = tape.critic_grad_norm(x_tilde, w1, b1, w2, b2, w3)?;
    let shifted = tape.add_scalar(norms, -F::one())?;
    let sq = tape.square(shifted)?;
    tape.mean(sq)
}
