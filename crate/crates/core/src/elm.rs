//! One-class extreme learning machine and the hierarchical ELM baseline.
//!
//! The hidden layer is a random projection, drawn once and never trained;
//! only the output weights are learned, by ridge regression against an
//! all-ones target, so training is a single convex solve with a unique
//! solution. Deviations |1 − Y| of the output from 1 score anomaly, and the
//! decision threshold is a scaled percentile of validation residuals:
//! `gamma * percentile_p(|1 - Y_val|)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::percentile;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElmActivation {
    Sigmoid,
    Relu,
}

impl ElmActivation {
    fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            ElmActivation::Sigmoid => F::one() / (F::one() + (-z).exp()),
            ElmActivation::Relu => z.max(F::zero()),
        }
    }
}

/// Solves (HᵀH + λI)·B = HᵀT by Cholesky on the regularized normal
/// equations; λ > 0 keeps the system positive definite. `targets` is
/// `n x m` (m = 1 for the one-class head, m = input width for the
/// autoencoder). Returns `hidden x m`.
pub fn ridge_solve<F: Scalar>(hidden: &Tensor<F>, targets: &Tensor<F>, lambda: F) -> Result<Tensor<F>> {
    if lambda <= F::zero() {
        return Err(Error::Config(format!("ridge lambda must be positive, got {lambda}")));
    }
    let (n, h) = (hidden.nrows(), hidden.ncols());
    if targets.nrows() != n {
        return Err(Error::shape("ridge_solve", "target row count mismatch"));
    }
    let m = targets.ncols();
    // K = HᵀH + λI
    let mut k = vec![F::zero(); h * h];
    for r in 0..n {
        let row = hidden.row(r);
        for i in 0..h {
            let hi = row[i];
            if hi != F::zero() {
                for j in i..h {
                    k[i * h + j] += hi * row[j];
                }
            }
        }
    }
    for i in 0..h {
        for j in 0..i {
            k[i * h + j] = k[j * h + i];
        }
        k[i * h + i] += lambda;
    }
    // rhs = HᵀT
    let mut rhs = vec![F::zero(); h * m];
    for r in 0..n {
        let hrow = hidden.row(r);
        let trow = targets.row(r);
        for i in 0..h {
            let hi = hrow[i];
            if hi != F::zero() {
                for (c, &tv) in trow.iter().enumerate() {
                    rhs[i * m + c] += hi * tv;
                }
            }
        }
    }
    let l = cholesky(&k, h)?;
    let mut out = vec![F::zero(); h * m];
    let mut col = vec![F::zero(); h];
    for c in 0..m {
        for i in 0..h {
            col[i] = rhs[i * m + c];
        }
        let x = cholesky_solve(&l, &col, h);
        for i in 0..h {
            out[i * m + c] = x[i];
        }
    }
    Ok(Tensor::from_parts(vec![h, m], out))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// matrix in row-major order.
fn cholesky<F: Scalar>(k: &[F], n: usize) -> Result<Vec<F>> {
    let mut l = vec![F::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = k[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if s <= F::zero() {
                    return Err(Error::Data("ridge system lost positive definiteness".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve<F: Scalar>(l: &[F], b: &[F], n: usize) -> Vec<F> {
    // forward: L y = b
    let mut y = vec![F::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i * n + j] * y[j];
        }
        y[i] = s / l[i * n + i];
    }
    // backward: Lᵀ x = y
    let mut x = vec![F::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for j in i + 1..n {
            s -= l[j * n + i] * x[j];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

// ---------------------------------------------------------------------------
// One-class ELM
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct OneClassElm<F> {
    pub input_weights: Tensor<F>, // input_dim x hidden
    pub biases: Tensor<F>,        // hidden
    pub activation: ElmActivation,
    pub output_weights: Tensor<F>, // hidden x 1
    pub lambda: F,
    pub seed: u64,
}

impl<F: Scalar> OneClassElm<F> {
    /// Fits the output weights against an all-ones target on healthy
    /// features. Deterministic given the seed: the hidden projection is
    /// drawn uniform in [−1, 1] from a counter-based generator.
    pub fn train(
        features: &Tensor<F>,
        hidden_width: usize,
        lambda: F,
        activation: ElmActivation,
        seed: u64,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyDataset("one-class training features".into()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite { op: "one_class_train" });
        }
        let d = features.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<F> {
            (0..n).map(|_| F::cast(rng.random_range(-1.0..1.0))).collect()
        };
        let input_weights = Tensor::from_parts(vec![d, hidden_width], draw(d * hidden_width));
        let biases = Tensor::from_parts(vec![hidden_width], draw(hidden_width));
        let model = OneClassElm {
            input_weights,
            biases,
            activation,
            output_weights: Tensor::zeros(&[hidden_width, 1]),
            lambda,
            seed,
        };
        let h = model.hidden(features)?;
        let ones = Tensor::full(&[features.nrows(), 1], F::one());
        let beta = ridge_solve(&h, &ones, lambda)?;
        Ok(OneClassElm {
            output_weights: beta,
            ..model
        })
    }

    /// Hidden representation h(X) = act(X·W + b).
    pub fn hidden(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.ncols() != self.input_weights.shape()[0] {
            return Err(Error::shape("elm_hidden", "feature width mismatch"));
        }
        let (n, d) = (x.nrows(), x.ncols());
        let hw = self.input_weights.shape()[1];
        let mut out = vec![F::zero(); n * hw];
        for i in 0..n {
            let row = x.row(i);
            let o = &mut out[i * hw..(i + 1) * hw];
            o.copy_from_slice(self.biases.data());
            for j in 0..d {
                let xv = row[j];
                if xv != F::zero() {
                    let wrow = &self.input_weights.data()[j * hw..(j + 1) * hw];
                    for (ov, &wv) in o.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
            for ov in o.iter_mut() {
                *ov = self.activation.apply(*ov);
            }
        }
        Ok(Tensor::from_parts(vec![n, hw], out))
    }

    /// Y = h(F)·β, one value per sample; healthy points cluster near 1.
    pub fn score(&self, features: &Tensor<F>) -> Result<Vec<F>> {
        let h = self.hidden(features)?;
        let beta = self.output_weights.data();
        Ok((0..h.nrows())
            .map(|i| {
                h.row(i)
                    .iter()
                    .zip(beta)
                    .map(|(&a, &b)| a * b)
                    .sum::<F>()
            })
            .collect())
    }

    /// Anomaly residuals |1 − Y|.
    pub fn residuals(&self, features: &Tensor<F>) -> Result<Vec<F>> {
        Ok(self
            .score(features)?
            .into_iter()
            .map(|y| (F::one() - y).abs())
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Decision threshold
// ---------------------------------------------------------------------------

/// `value = gamma * percentile_p(|1 - Y_val|)`, exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub gamma: f64,
    pub p: f64,
    pub value: f64,
}

impl Threshold {
    pub const DEFAULT_GAMMA: f64 = 1.5;
    pub const DEFAULT_P: f64 = 99.5;
}

pub fn compute_threshold<F: Scalar>(
    model: &OneClassElm<F>,
    validation_features: &Tensor<F>,
    gamma: f64,
    p: f64,
) -> Result<Threshold> {
    if validation_features.nrows() == 0 {
        return Err(Error::EmptyDataset("validation features for threshold".into()));
    }
    let residuals = model.residuals(validation_features)?;
    let perc = percentile(&residuals, p)?;
    Ok(Threshold {
        gamma,
        p,
        value: gamma * perc.as_f64(),
    })
}

/// Per-sample exceedance flags plus the alarm rule: the alarm fires iff the
/// threshold is exceeded at least twice in a row.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub flags: Vec<bool>,
    pub alarm: bool,
}

pub fn detect<F: Scalar>(
    model: &OneClassElm<F>,
    threshold: &Threshold,
    features: &Tensor<F>,
) -> Result<Detection> {
    let flags: Vec<bool> = model
        .residuals(features)?
        .into_iter()
        .map(|r| r.as_f64() > threshold.value)
        .collect();
    let alarm = alarm_from_flags(&flags);
    Ok(Detection { flags, alarm })
}

pub fn detect_empty() -> Detection {
    Detection {
        flags: Vec::new(),
        alarm: false,
    }
}

pub fn alarm_from_flags(flags: &[bool]) -> bool {
    flags.windows(2).any(|w| w[0] && w[1])
}

// ---------------------------------------------------------------------------
// Hierarchical ELM baseline
// ---------------------------------------------------------------------------

/// ELM autoencoder layer: a random hidden projection whose output weights B
/// are ridge-solved to reconstruct the input; the learned Bᵀ then acts as
/// the encoder for the next stage, the usual stacking construction.
#[derive(Clone, Debug)]
pub struct ElmAutoencoder<F> {
    pub random_weights: Tensor<F>, // input x hidden
    pub random_biases: Tensor<F>,  // hidden
    pub output_weights: Tensor<F>, // hidden x input
    pub activation: ElmActivation,
}

impl<F: Scalar> ElmAutoencoder<F> {
    pub fn train(
        x: &Tensor<F>,
        hidden_width: usize,
        lambda: F,
        activation: ElmActivation,
        seed: u64,
    ) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyDataset("autoencoder training data".into()));
        }
        let d = x.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<F> {
            (0..n).map(|_| F::cast(rng.random_range(-1.0..1.0))).collect()
        };
        let random_weights = Tensor::from_parts(vec![d, hidden_width], draw(d * hidden_width));
        let random_biases = Tensor::from_parts(vec![hidden_width], draw(hidden_width));
        let h = hidden_of(x, &random_weights, &random_biases, activation);
        let output_weights = ridge_solve(&h, x, lambda)?;
        Ok(ElmAutoencoder {
            random_weights,
            random_biases,
            output_weights,
            activation,
        })
    }

    /// Learned representation act(X·Bᵀ).
    pub fn encode(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (h, d) = (
            self.output_weights.shape()[0],
            self.output_weights.shape()[1],
        );
        if x.ncols() != d {
            return Err(Error::shape("elm_ae_encode", "input width mismatch"));
        }
        let n = x.nrows();
        let mut out = vec![F::zero(); n * h];
        for i in 0..n {
            let row = x.row(i);
            let o = &mut out[i * h..(i + 1) * h];
            for k in 0..h {
                let brow = &self.output_weights.data()[k * d..(k + 1) * d];
                let mut s = F::zero();
                for (j, &xv) in row.iter().enumerate() {
                    s += xv * brow[j];
                }
                o[k] = self.activation.apply(s);
            }
        }
        Ok(Tensor::from_parts(vec![n, h], out))
    }
}

fn hidden_of<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    activation: ElmActivation,
) -> Tensor<F> {
    let (n, d) = (x.nrows(), x.ncols());
    let hw = w.shape()[1];
    let mut out = vec![F::zero(); n * hw];
    for i in 0..n {
        let row = x.row(i);
        let o = &mut out[i * hw..(i + 1) * hw];
        o.copy_from_slice(b.data());
        for j in 0..d {
            let xv = row[j];
            for k in 0..hw {
                o[k] += xv * w.data()[j * hw + k];
            }
        }
        for ov in o.iter_mut() {
            *ov = activation.apply(*ov);
        }
    }
    Tensor::from_parts(vec![n, hw], out)
}

/// Stacked autoencoder layers feeding a one-class head; the no-alignment
/// baseline (trained on pooled raw data, or on the target's short history
/// alone for the two-month variant).
#[derive(Clone, Debug)]
pub struct HelmModel<F> {
    pub layers: Vec<ElmAutoencoder<F>>,
    pub head: OneClassElm<F>,
}

impl<F: Scalar> HelmModel<F> {
    /// `sizes` lists the autoencoder hidden widths followed by the one-class
    /// hidden width; `lambdas` matches it in length.
    pub fn train(
        x_train: &Tensor<F>,
        sizes: &[usize],
        lambdas: &[F],
        activation: ElmActivation,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.len() != lambdas.len() {
            return Err(Error::Config(
                "HELM needs at least one autoencoder size plus the one-class size".into(),
            ));
        }
        let mut layers = Vec::new();
        let mut rep = x_train.clone();
        for (i, (&width, &lambda)) in sizes[..sizes.len() - 1]
            .iter()
            .zip(&lambdas[..sizes.len() - 1])
            .enumerate()
        {
            let ae = ElmAutoencoder::train(
                &rep,
                width,
                lambda,
                activation,
                crate::seed::derive(seed, &["helm_ae", &i.to_string()]),
            )?;
            rep = ae.encode(&rep)?;
            layers.push(ae);
        }
        let head = OneClassElm::train(
            &rep,
            sizes[sizes.len() - 1],
            lambdas[sizes.len() - 1],
            activation,
            crate::seed::derive(seed, &["helm_head"]),
        )?;
        Ok(HelmModel { layers, head })
    }

    pub fn features(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut rep = x.clone();
        for layer in &self.layers {
            rep = layer.encode(&rep)?;
        }
        Ok(rep)
    }

    pub fn residuals(&self, x: &Tensor<F>) -> Result<Vec<F>> {
        self.head.residuals(&self.features(x)?)
    }
}
