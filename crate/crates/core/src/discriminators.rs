//! Origin discriminators attached to the feature space: two relu layers of
//! widths 10 and 5, ending in either a 2-way softmax head or a scalar
//! Wasserstein critic head. The head itself is linear in both cases: the
//! softmax lives inside the log-sum-exp cross-entropy for stability, and a
//! critic must be unbounded.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::extractors::{Activation, Dense, DenseVars, MlpEncoder};
use crate::losses::{
    gradient_penalty_on, interpolate_rows, wasserstein_gap_on, LossWeights,
};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscriminatorKind {
    Softmax,
    Wasserstein,
}

#[derive(Clone, Debug)]
pub struct Discriminator<F> {
    pub kind: DiscriminatorKind,
    pub l1: Dense<F>,
    pub l2: Dense<F>,
    pub head: Dense<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDiscriminator {
    pub l1: DenseVars,
    pub l2: DenseVars,
    pub head: DenseVars,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(kind: DiscriminatorKind, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let head_width = match kind {
            DiscriminatorKind::Softmax => 2,
            DiscriminatorKind::Wasserstein => 1,
        };
        Discriminator {
            kind,
            l1: Dense::init(feature_dim, 10, Activation::Relu, rng),
            l2: Dense::init(10, 5, Activation::Relu, rng),
            head: Dense::init(5, head_width, Activation::Linear, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.l1.input_dim()
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> BoundDiscriminator {
        BoundDiscriminator {
            l1: self.l1.bind(tape),
            l2: self.l2.bind(tape),
            head: self.head.bind(tape),
        }
    }

    /// Per-sample origin scores: `n x 2` logits or `n x 1` critic values.
    pub fn forward(&self, tape: &mut Tape<F>, vars: BoundDiscriminator, f: Var) -> Result<Var> {
        if tape.value(f).ncols() != self.feature_dim() {
            return Err(Error::shape("discriminate", "feature width mismatch"));
        }
        let h = self.l1.forward(tape, vars.l1, f)?;
        let h = self.l2.forward(tape, vars.l2, h)?;
        self.head.forward(tape, vars.head, h)
    }

    pub fn forward_value(&self, f: &Tensor<F>) -> Tensor<F> {
        self.head
            .forward_value(&self.l2.forward_value(&self.l1.forward_value(f)))
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        vec![
            &self.l1.weight,
            &self.l1.bias,
            &self.l2.weight,
            &self.l2.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![
            &mut self.l1.weight,
            &mut self.l1.bias,
            &mut self.l2.weight,
            &mut self.l2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    /// Prediction accuracy of a softmax discriminator on labeled features.
    pub fn accuracy(&self, features: &Tensor<F>, labels: &[usize]) -> f64 {
        let logits = self.forward_value(features);
        let mut correct = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let pred = if row[1] > row[0] { 1 } else { 0 };
            if pred == label {
                correct += 1;
            }
        }
        correct as f64 / labels.len() as f64
    }
}

impl BoundDiscriminator {
    pub fn param_vars(&self) -> Vec<Var> {
        vec![
            self.l1.w, self.l1.b, self.l2.w, self.l2.b, self.head.w, self.head.b,
        ]
    }
}

/// Value returned by building the adversarial subgraph for one step.
pub struct AdversarialTerms<F> {
    /// The discriminator's minimized objective (cross-entropy, or
    /// −gap + gp_weight·penalty for a critic), as a tape node.
    pub objective: Var,
    /// Cross-entropy or critic gap value, for the loss history.
    pub discriminator_loss: F,
    pub penalty: Option<F>,
}

/// Wires features into the discriminator through a gradient-reversal node
/// and returns the discriminator's objective. Backward through this
/// objective gives the discriminator its true gradient while the extractor
/// behind `fs`/`ft` receives the reversed gradient scaled by `alpha`.
///
/// For a Wasserstein critic the gradient penalty is computed on detached
/// interpolates (input gradients of a relu critic carry no dependence on
/// the interpolation point almost everywhere, so nothing is lost).
pub fn adversarial_objective_on<F: Scalar>(
    tape: &mut Tape<F>,
    disc: &Discriminator<F>,
    dvars: BoundDiscriminator,
    fs: Var,
    ft: Var,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<AdversarialTerms<F>> {
    let alpha = F::cast(weights.alpha);
    let rs = tape.gradient_reversal(fs, alpha)?;
    let rt = tape.gradient_reversal(ft, alpha)?;
    match disc.kind {
        DiscriminatorKind::Softmax => {
            let ns = tape.value(fs).nrows();
            let nt = tape.value(ft).nrows();
            let cat = tape.concat(rs, rt)?;
            let logits = disc.forward(tape, dvars, cat)?;
            let mut labels = vec![0usize; ns];
            labels.extend(std::iter::repeat(1).take(nt));
            let ce = tape.cross_entropy_with_logits(logits, labels)?;
            Ok(AdversarialTerms {
                objective: ce,
                discriminator_loss: tape.value(ce).item(),
                penalty: None,
            })
        }
        DiscriminatorKind::Wasserstein => {
            let cs = disc.forward(tape, dvars, rs)?;
            let ct = disc.forward(tape, dvars, rt)?;
            let gap = wasserstein_gap_on(tape, cs, ct, F::cast(weights.delta_w))?;
            let x_tilde = interpolate_rows(tape.value(fs), tape.value(ft), rng)?;
            let xt_var = tape.leaf(x_tilde);
            let pen = gradient_penalty_on(
                tape, xt_var, dvars.l1.w, dvars.l1.b, dvars.l2.w, dvars.l2.b, dvars.head.w,
            )?;
            let neg_gap = tape.scale(gap, -F::one())?;
            let weighted_pen = tape.scale(pen, F::cast(weights.gp_weight))?;
            let objective = tape.add(neg_gap, weighted_pen)?;
            Ok(AdversarialTerms {
                objective,
                discriminator_loss: tape.value(gap).item(),
                penalty: Some(tape.value(pen).item()),
            })
        }
    }
}

/// Gradient penalty of a critic over fresh interpolates, as a value.
pub fn gradient_penalty<F: Scalar>(
    critic: &Discriminator<F>,
    f_source: &Tensor<F>,
    f_target: &Tensor<F>,
    rng: &mut impl Rng,
) -> Result<F> {
    if critic.kind != DiscriminatorKind::Wasserstein {
        return Err(Error::Config("gradient penalty needs a critic head".into()));
    }
    let mut tape = Tape::new();
    let dvars = critic.bind(&mut tape);
    let x_tilde = interpolate_rows(f_source, f_target, rng)?;
    let xv = tape.leaf(x_tilde);
    let pen = gradient_penalty_on(
        &mut tape, xv, dvars.l1.w, dvars.l1.b, dvars.l2.w, dvars.l2.b, dvars.head.w,
    )?;
    Ok(tape.value(pen).item())
}

/// One joint adversarial step with no other loss terms: the discriminator
/// descends its objective, the extractor ascends it through the reversal
/// node, and both are updated by their own optimizer states.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_update<F: Scalar>(
    extractor: &mut MlpEncoder<F>,
    disc: &mut Discriminator<F>,
    source_batch: &Tensor<F>,
    target_batch: &Tensor<F>,
    weights: &LossWeights,
    opt_extractor: &mut Adam<F>,
    opt_disc: &mut Adam<F>,
    rng: &mut impl Rng,
) -> Result<F> {
    if source_batch.nrows() == 0 || target_batch.nrows() == 0 {
        return Err(Error::EmptyDataset("adversarial batch".into()));
    }
    let mut tape = Tape::new();
    let evars = extractor.bind(&mut tape);
    let dvars = disc.bind(&mut tape);
    let xs = tape.leaf(source_batch.clone());
    let xt = tape.leaf(target_batch.clone());
    let fs = extractor.forward(&mut tape, evars, xs)?;
    let ft = extractor.forward(&mut tape, evars, xt)?;
    let terms = adversarial_objective_on(&mut tape, disc, dvars, fs, ft, weights, rng)?;
    tape.backward(terms.objective)?;
    apply_step(&tape, &evars.param_vars(), &mut extractor.params_mut(), opt_extractor)?;
    apply_step(&tape, &dvars.param_vars(), &mut disc.params_mut(), opt_disc)?;
    Ok(terms.discriminator_loss)
}

/// Reads gradients for `vars` off the tape and applies one optimizer step.
pub fn apply_step<F: Scalar>(
    tape: &Tape<F>,
    vars: &[Var],
    params: &mut [&mut Tensor<F>],
    opt: &mut Adam<F>,
) -> Result<()> {
    let grads: Vec<Option<&Tensor<F>>> = vars.iter().map(|&v| tape.grad(v)).collect();
    opt.step(params, &grads)
}

/// Freshly retrained probe discriminator on frozen features: the measurable
/// stand-in for "origin cannot be classified". Returns accuracy on a
/// held-out tail (20%) of each domain.
pub fn probe_accuracy<F: Scalar>(
    f_source: &Tensor<F>,
    f_target: &Tensor<F>,
    epochs: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if f_source.ncols() != f_target.ncols() {
        return Err(Error::shape("probe", "feature widths differ"));
    }
    let split = |t: &Tensor<F>| -> (Tensor<F>, Tensor<F>) {
        let n = t.nrows();
        let cut = (n * 4) / 5;
        let train: Vec<usize> = (0..cut).collect();
        let eval: Vec<usize> = (cut..n).collect();
        (t.select_rows(&train), t.select_rows(&eval))
    };
    let (train_s, eval_s) = split(f_source);
    let (train_t, eval_t) = split(f_target);
    let mut probe = Discriminator::new(DiscriminatorKind::Softmax, f_source.ncols(), rng);
    let mut opt = Adam::new(crate::optim::AdamConfig::with_lr(F::cast(lr)));
    let batch = 128.min(train_s.nrows()).min(train_t.nrows());
    for _ in 0..epochs {
        let pick = |t: &Tensor<F>, rng: &mut dyn rand::RngCore| {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..t.nrows())).collect();
            t.select_rows(&idx)
        };
        let bs = pick(&train_s, rng);
        let bt = pick(&train_t, rng);
        let mut tape = Tape::new();
        let dvars = probe.bind(&mut tape);
        let xs = tape.leaf(bs);
        let xt = tape.leaf(bt);
        let cat = tape.concat(xs, xt)?;
        let logits = probe.forward(&mut tape, dvars, cat)?;
        let mut labels = vec![0usize; batch];
        labels.extend(std::iter::repeat(1).take(batch));
        let ce = tape.cross_entropy_with_logits(logits, labels)?;
        tape.backward(ce)?;
        apply_step(&tape, &dvars.param_vars(), &mut probe.params_mut(), &mut opt)?;
    }
    let eval = eval_s.vstack(&eval_t)?;
    let mut labels = vec![0usize; eval_s.nrows()];
    labels.extend(std::iter::repeat(1).take(eval_t.nrows()));
    Ok(probe.accuracy(&eval, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zeroed<F: Scalar>(mut d: Discriminator<F>) -> Discriminator<F> {
        for p in d.params_mut() {
            for v in p.data_mut() {
                *v = F::zero();
            }
        }
        d
    }

    #[test]
    fn zero_weight_softmax_gives_even_odds() {
        let d = zeroed(Discriminator::<f64>::new(DiscriminatorKind::Softmax, 10, &mut rng(0)));
        let f = Tensor::full(&[4, 10], 0.3);
        let mut tape = Tape::new();
        let dv = d.bind(&mut tape);
        let fv = tape.leaf(f);
        let logits = d.forward(&mut tape, dv, fv).unwrap();
        let probs = tape.softmax(logits).unwrap();
        assert!(tape.value(probs).data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn zero_weight_critic_outputs_zero() {
        let d = zeroed(Discriminator::<f64>::new(
            DiscriminatorKind::Wasserstein,
            10,
            &mut rng(0),
        ));
        let f = Tensor::full(&[3, 10], -0.7);
        let out = d.forward_value(&f);
        assert_eq!(out.shape(), &[3, 1]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_contract() {
        let s = Discriminator::<f64>::new(DiscriminatorKind::Softmax, 10, &mut rng(1));
        let w = Discriminator::<f64>::new(DiscriminatorKind::Wasserstein, 10, &mut rng(2));
        let f = Tensor::full(&[6, 10], 0.2);
        assert_eq!(s.forward_value(&f).shape(), &[6, 2]);
        assert_eq!(w.forward_value(&f).shape(), &[6, 1]);
    }

    #[test]
    fn feature_width_is_checked() {
        let d = Discriminator::<f64>::new(DiscriminatorKind::Softmax, 10, &mut rng(1));
        let f = Tensor::full(&[2, 7], 0.1);
        let mut tape = Tape::new();
        let dv = d.bind(&mut tape);
        let fv = tape.leaf(f);
        assert!(d.forward(&mut tape, dv, fv).is_err());
    }

    fn gaussian_batch(n: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|j| {
                        let e: f64 = rng.sample(StandardNormal);
                        if j == 0 {
                            e + shift
                        } else {
                            e
                        }
                    })
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn tiny_alpha_freezes_the_extractor() {
        let mut r = rng(3);
        let mut enc = MlpEncoder::<f64>::new(4, 10, 10, &mut r);
        let mut disc = Discriminator::new(DiscriminatorKind::Softmax, 10, &mut r);
        let enc_before: Vec<Tensor<f64>> = enc.params().into_iter().cloned().collect();
        let disc_before: Vec<Tensor<f64>> = disc.params().into_iter().cloned().collect();
        let xs = gaussian_batch(64, 4, 1.5, &mut r);
        let xt = gaussian_batch(64, 4, -1.5, &mut r);
        let weights = LossWeights {
            alpha: 1e-9,
            ..LossWeights::default()
        };
        let mut oe = Adam::new(AdamConfig::with_lr(1e-3));
        let mut od = Adam::new(AdamConfig::with_lr(1e-3));
        for _ in 0..5 {
            adversarial_update(&mut enc, &mut disc, &xs, &xt, &weights, &mut oe, &mut od, &mut r)
                .unwrap();
        }
        let enc_delta: f64 = enc
            .params()
            .iter()
            .zip(&enc_before)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        let disc_delta: f64 = disc
            .params()
            .iter()
            .zip(&disc_before)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        // Adam normalizes step size, so a tiny alpha alone does not shrink
        // the first update; after a few steps the accumulated extractor
        // motion must still be orders of magnitude below the discriminator's.
        assert!(disc_delta > 1e-4, "discriminator did not train: {disc_delta}");
        assert!(
            enc_delta < disc_delta * 0.2,
            "extractor moved too much: {enc_delta} vs {disc_delta}"
        );
    }

    #[test]
    fn probe_separates_separable_clusters() {
        let mut r = rng(4);
        let fs = gaussian_batch(400, 10, 4.0, &mut r);
        let ft = gaussian_batch(400, 10, -4.0, &mut r);
        let acc = probe_accuracy(&fs, &ft, 150, 1e-2, &mut r).unwrap();
        assert!(acc >= 0.99, "accuracy {acc} on linearly separable clusters");
    }

    #[test]
    fn probe_cannot_separate_identical_distributions() {
        let mut r = rng(5);
        let fs = gaussian_batch(600, 10, 0.0, &mut r);
        let ft = gaussian_batch(600, 10, 0.0, &mut r);
        let acc = probe_accuracy(&fs, &ft, 150, 1e-2, &mut r).unwrap();
        assert!(
            (acc - 0.5).abs() <= 0.05,
            "accuracy {acc} should hover near chance"
        );
    }

    #[test]
    fn rigged_unit_gradient_critic_has_zero_penalty() {
        // critic(x) = <w, x> + const with ‖w‖ = 1, built inside the
        // relu architecture by keeping the first hidden unit active.
        let mut d = zeroed(Discriminator::<f64>::new(
            DiscriminatorKind::Wasserstein,
            4,
            &mut rng(6),
        ));
        let w = [0.5f64, -0.5, 0.5, 0.5]; // unit norm
        for (l, &wv) in w.iter().enumerate() {
            d.l1.weight.data_mut()[l * 10] = wv;
        }
        d.l1.bias.data_mut()[0] = 100.0; // keep relu active on the batch
        d.l2.weight.data_mut()[0] = 1.0; // h2_0 = h1_0
        d.l2.bias.data_mut()[0] = 0.0;
        d.head.weight.data_mut()[0] = 1.0;
        let mut r = rng(7);
        let fs = gaussian_batch(16, 4, 0.5, &mut r);
        let ft = gaussian_batch(16, 4, -0.5, &mut r);
        let pen = gradient_penalty(&d, &fs, &ft, &mut r).unwrap();
        assert!(pen < 1e-20, "penalty {pen}");
    }

    #[test]
    fn constant_gradient_two_critic_has_unit_penalty() {
        // critic(x) = 2·x_0 within the active region -> (2-1)^2 = 1
        let mut d = zeroed(Discriminator::<f64>::new(
            DiscriminatorKind::Wasserstein,
            4,
            &mut rng(8),
        ));
        d.l1.weight.data_mut()[0] = 2.0;
        d.l1.bias.data_mut()[0] = 100.0;
        d.l2.weight.data_mut()[0] = 1.0;
        d.head.weight.data_mut()[0] = 1.0;
        let mut r = rng(9);
        let fs = gaussian_batch(16, 4, 1.0, &mut r);
        let ft = gaussian_batch(16, 4, -1.0, &mut r);
        let pen = gradient_penalty(&d, &fs, &ft, &mut r).unwrap();
        approx::assert_relative_eq!(pen, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn critic_grad_norm_matches_finite_differences() {
        let d = Discriminator::<f64>::new(DiscriminatorKind::Wasserstein, 6, &mut rng(10));
        let mut r = rng(11);
        let x = gaussian_batch(5, 6, 0.3, &mut r);
        let mut tape = Tape::new();
        let dv = d.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let norms = tape
            .critic_grad_norm(xv, dv.l1.w, dv.l1.b, dv.l2.w, dv.l2.b, dv.head.w)
            .unwrap();
        let norms = tape.value(norms).clone();
        let h = 1e-6;
        for i in 0..x.nrows() {
            let mut sq = 0.0;
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp.data_mut()[i * x.ncols() + j] += h;
                let mut xm = x.clone();
                xm.data_mut()[i * x.ncols() + j] -= h;
                let fp = d.forward_value(&xp.select_rows(&[i])).item();
                let fm = d.forward_value(&xm.select_rows(&[i])).item();
                let g = (fp - fm) / (2.0 * h);
                sq += g * g;
            }
            let fd_norm = sq.sqrt();
            assert!(
                (fd_norm - norms.data()[i]).abs() < 1e-3,
                "row {i}: fd {fd_norm} vs op {}",
                norms.data()[i]
            );
        }
    }
}
