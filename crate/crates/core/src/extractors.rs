//! Feature encoders mapping normalized inputs to the shared feature space:
//! a deterministic two-layer relu MLP and a variational encoder/decoder
//! pair. Source and target batches always pass through the same instance,
//! so the latent space is shared by construction.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bound on log σ²; keeps `exp` finite and the KL term non-degenerate.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Fully connected layer, weight laid out `input x output`.
#[derive(Clone, Debug)]
pub struct Dense<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub activation: Activation,
}

/// Tape handles for one layer's parameters within a training step.
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl<F: Scalar> Dense<F> {
    /// Scale-stable init for relu at these widths: weights uniform in
    /// ±1/√fan_in, biases lifted slightly positive so no unit starts dead
    /// at these tiny widths.
    pub fn init(input: usize, output: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight: Vec<F> = (0..input * output)
            .map(|_| F::cast(rng.random_range(-bound..bound)))
            .collect();
        let bias_base = match activation {
            Activation::Relu => 0.1,
            Activation::Linear => 0.0,
        };
        let bias: Vec<F> = (0..output)
            .map(|_| F::cast(bias_base + rng.random_range(-bound..bound).abs() * 0.1))
            .collect();
        Dense {
            weight: Tensor::from_parts(vec![input, output], weight),
            bias: Tensor::from_parts(vec![output], bias),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> DenseVars {
        DenseVars {
            w: tape.param(&self.weight),
            b: tape.param(&self.bias),
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, vars: DenseVars, x: Var) -> Result<Var> {
        let z = tape.matmul(x, vars.w)?;
        let z = tape.add_bias(z, vars.b)?;
        match self.activation {
            Activation::Relu => tape.relu(z),
            Activation::Linear => Ok(z),
        }
    }

    /// Inference path without a tape; must agree with [`Self::forward`].
    pub fn forward_value(&self, x: &Tensor<F>) -> Tensor<F> {
        let (n, k) = (x.nrows(), x.ncols());
        let m = self.output_dim();
        debug_assert_eq!(k, self.input_dim());
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let row = x.row(i);
            let o = &mut out[i * m..(i + 1) * m];
            o.copy_from_slice(self.bias.data());
            for (j, &xv) in row.iter().enumerate() {
                if xv != F::zero() {
                    let wrow = &self.weight.data()[j * m..(j + 1) * m];
                    for (ov, &wv) in o.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
            if self.activation == Activation::Relu {
                for ov in o.iter_mut() {
                    *ov = ov.max(F::zero());
                }
            }
        }
        Tensor::from_parts(vec![n, m], out)
    }
}

// ---------------------------------------------------------------------------
// Deterministic encoder
// ---------------------------------------------------------------------------

/// Two relu layers; hidden and feature widths default to 10. All layers use
/// relu, including the output, so features are nonnegative.
#[derive(Clone, Debug)]
pub struct MlpEncoder<F> {
    pub l1: Dense<F>,
    pub l2: Dense<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMlp {
    pub l1: DenseVars,
    pub l2: DenseVars,
}

impl<F: Scalar> MlpEncoder<F> {
    pub fn new(input_dim: usize, hidden: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        MlpEncoder {
            l1: Dense::init(input_dim, hidden, Activation::Relu, rng),
            l2: Dense::init(hidden, feature_dim, Activation::Relu, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.l2.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> BoundMlp {
        BoundMlp {
            l1: self.l1.bind(tape),
            l2: self.l2.bind(tape),
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, vars: BoundMlp, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, vars.l1, x)?;
        self.l2.forward(tape, vars.l2, h)
    }

    pub fn features(&self, x: &Tensor<F>) -> Tensor<F> {
        self.l2.forward_value(&self.l1.forward_value(x))
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        vec![&self.l1.weight, &self.l1.bias, &self.l2.weight, &self.l2.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![
            &mut self.l1.weight,
            &mut self.l1.bias,
            &mut self.l2.weight,
            &mut self.l2.bias,
        ]
    }
}

impl BoundMlp {
    pub fn param_vars(&self) -> Vec<Var> {
        vec![self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}

// ---------------------------------------------------------------------------
// Variational encoder / decoder
// ---------------------------------------------------------------------------

/// Relu trunk shared with the deterministic encoder, plus linear μ and
/// log σ² heads (the mean must be sign-free, so the heads carry no relu).
#[derive(Clone, Debug)]
pub struct VariationalEncoder<F> {
    pub trunk: MlpEncoder<F>,
    pub mu_head: Dense<F>,
    pub logvar_head: Dense<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundVariational {
    pub trunk: BoundMlp,
    pub mu: DenseVars,
    pub logvar: DenseVars,
}

/// Tape handles produced by one variational forward pass.
pub struct VariationalForward {
    pub mu: Var,
    pub logvar: Var,
    /// μ + σ⊙ε during training, μ when no noise is supplied.
    pub feature: Var,
}

impl<F: Scalar> VariationalEncoder<F> {
    pub fn new(input_dim: usize, hidden: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        VariationalEncoder {
            trunk: MlpEncoder::new(input_dim, hidden, feature_dim, rng),
            mu_head: Dense::init(feature_dim, feature_dim, Activation::Linear, rng),
            logvar_head: Dense::init(feature_dim, feature_dim, Activation::Linear, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.mu_head.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> BoundVariational {
        BoundVariational {
            trunk: self.trunk.bind(tape),
            mu: self.mu_head.bind(tape),
            logvar: self.logvar_head.bind(tape),
        }
    }

    /// Forward pass with the reparameterization trick: the caller supplies
    /// the standard-normal draw `eps` (same shape as μ) as a constant, so
    /// gradients flow through μ and log σ² while the noise stays fixed.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        vars: BoundVariational,
        x: Var,
        eps: Option<&Tensor<F>>,
    ) -> Result<VariationalForward> {
        let h = self.trunk.forward(tape, vars.trunk, x)?;
        let mu = self.mu_head.forward(tape, vars.mu, h)?;
        let logvar_raw = self.logvar_head.forward(tape, vars.logvar, h)?;
        let clamp = F::cast(LOGVAR_CLAMP);
        let logvar = tape.clamp(logvar_raw, -clamp, clamp)?;
        let feature = match eps {
            None => mu,
            Some(eps) => {
                let half = tape.scale(logvar, F::cast(0.5))?;
                let sigma = tape.exp(half)?;
                let eps = tape.leaf(eps.clone());
                let noise = tape.mul(sigma, eps)?;
                tape.add(mu, noise)?
            }
        };
        Ok(VariationalForward { mu, logvar, feature })
    }

    /// Inference features: the posterior mean μ.
    pub fn mean_features(&self, x: &Tensor<F>) -> Tensor<F> {
        self.mu_head.forward_value(&self.trunk.features(x))
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut p = self.trunk.params();
        p.extend([
            &self.mu_head.weight,
            &self.mu_head.bias,
            &self.logvar_head.weight,
            &self.logvar_head.bias,
        ]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut p = self.trunk.params_mut();
        p.extend([
            &mut self.mu_head.weight,
            &mut self.mu_head.bias,
            &mut self.logvar_head.weight,
            &mut self.logvar_head.bias,
        ]);
        p
    }
}

impl BoundVariational {
    pub fn param_vars(&self) -> Vec<Var> {
        let mut v = self.trunk.param_vars();
        v.extend([self.mu.w, self.mu.b, self.logvar.w, self.logvar.b]);
        v
    }
}

/// Mirror of the encoder: relu hidden layer, linear output back to input
/// width (reconstructions must reach negative values).
#[derive(Clone, Debug)]
pub struct Decoder<F> {
    pub l1: Dense<F>,
    pub l2: Dense<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDecoder {
    pub l1: DenseVars,
    pub l2: DenseVars,
}

impl<F: Scalar> Decoder<F> {
    pub fn new(feature_dim: usize, hidden: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        Decoder {
            l1: Dense::init(feature_dim, hidden, Activation::Relu, rng),
            l2: Dense::init(hidden, output_dim, Activation::Linear, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> BoundDecoder {
        BoundDecoder {
            l1: self.l1.bind(tape),
            l2: self.l2.bind(tape),
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, vars: BoundDecoder, f: Var) -> Result<Var> {
        let h = self.l1.forward(tape, vars.l1, f)?;
        self.l2.forward(tape, vars.l2, h)
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        vec![&self.l1.weight, &self.l1.bias, &self.l2.weight, &self.l2.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![
            &mut self.l1.weight,
            &mut self.l1.bias,
            &mut self.l2.weight,
            &mut self.l2.bias,
        ]
    }
}

impl BoundDecoder {
    pub fn param_vars(&self) -> Vec<Var> {
        vec![self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}
