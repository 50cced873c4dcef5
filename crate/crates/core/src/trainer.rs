//! Architecture assembly and end-to-end training.
//!
//! Ten named architectures share one flow: train a feature extractor on
//! source plus target healthy data (with whichever alignment losses the
//! kind activates), freeze it, fit the one-class ELM on the features of
//! both training sets, then compute the decision threshold on the combined
//! held-out validation features. The HELM kinds skip gradient training
//! entirely and use stacked ELM autoencoders as the extractor.
//!
//! Loss routing per kind:
//!
//! | kind        | main loss            | discriminator    |
//! |-------------|----------------------|------------------|
//! | beta-vae    | rec + β·KL           | none             |
//! | beta-vae-ds | rec + β·KL           | softmax via GRL  |
//! | beta-vae-dw | rec + β·KL           | critic via GRL   |
//! | hfa         | homothety            | none             |
//! | afas        | none                 | softmax via GRL  |
//! | afaw        | none                 | critic via GRL   |
//! | hafas       | homothety            | softmax via GRL  |
//! | hafaw       | homothety            | critic via GRL   |
//! | helm        | (closed-form solves on pooled source+target)        |
//! | 2m-helm     | (closed-form solves on the target two months alone) |

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::discriminators::{
    adversarial_objective_on, apply_step, BoundDiscriminator, Discriminator, DiscriminatorKind,
};
use crate::elm::{
    compute_threshold, detect, ElmActivation, ElmAutoencoder, OneClassElm, Threshold,
};
use crate::error::{Error, Result};
use crate::extractors::{Decoder, MlpEncoder, VariationalEncoder};
use crate::losses::{
    feature_distances_on, homothety_term_on, input_distances, kl_on, mse_on, optimal_eta,
    sample_pairs, DomainPairs, HomothetyBatch, LossWeights,
};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Architecture catalogue
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchitectureKind {
    BetaVae,
    BetaVaeDs,
    BetaVaeDw,
    Hfa,
    Afas,
    Afaw,
    Hafas,
    Hafaw,
    Helm,
    TwoMonthHelm,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 10] = [
        ArchitectureKind::BetaVae,
        ArchitectureKind::BetaVaeDs,
        ArchitectureKind::BetaVaeDw,
        ArchitectureKind::Hfa,
        ArchitectureKind::Afas,
        ArchitectureKind::Afaw,
        ArchitectureKind::Hafas,
        ArchitectureKind::Hafaw,
        ArchitectureKind::Helm,
        ArchitectureKind::TwoMonthHelm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureKind::BetaVae => "beta-vae",
            ArchitectureKind::BetaVaeDs => "beta-vae-ds",
            ArchitectureKind::BetaVaeDw => "beta-vae-dw",
            ArchitectureKind::Hfa => "hfa",
            ArchitectureKind::Afas => "afas",
            ArchitectureKind::Afaw => "afaw",
            ArchitectureKind::Hafas => "hafas",
            ArchitectureKind::Hafaw => "hafaw",
            ArchitectureKind::Helm => "helm",
            ArchitectureKind::TwoMonthHelm => "2m-helm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let needle = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.name() == needle)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown architecture kind '{s}'; valid kinds: {}",
                    valid.join(", ")
                ))
            })
    }

    pub fn uses_vae(self) -> bool {
        matches!(
            self,
            ArchitectureKind::BetaVae | ArchitectureKind::BetaVaeDs | ArchitectureKind::BetaVaeDw
        )
    }

    pub fn uses_homothety(self) -> bool {
        matches!(
            self,
            ArchitectureKind::Hfa | ArchitectureKind::Hafas | ArchitectureKind::Hafaw
        )
    }

    pub fn discriminator(self) -> Option<DiscriminatorKind> {
        match self {
            ArchitectureKind::BetaVaeDs | ArchitectureKind::Afas | ArchitectureKind::Hafas => {
                Some(DiscriminatorKind::Softmax)
            }
            ArchitectureKind::BetaVaeDw | ArchitectureKind::Afaw | ArchitectureKind::Hafaw => {
                Some(DiscriminatorKind::Wasserstein)
            }
            _ => None,
        }
    }

    /// HELM kinds replace gradient training with closed-form solves.
    pub fn is_helm(self) -> bool {
        matches!(self, ArchitectureKind::Helm | ArchitectureKind::TwoMonthHelm)
    }
}

impl std::fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a single training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchitectureKind,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_width: usize,
    pub feature_dim: usize,
    pub elm_hidden: usize,
    pub elm_lambda: f64,
    pub elm_activation: ElmActivation,
    pub helm_sizes: Vec<usize>,
    pub helm_lambdas: Vec<f64>,
    pub threshold_gamma: f64,
    pub threshold_p: f64,
    /// Inference features of a variational extractor: posterior mean when
    /// true (the default), a seeded sample during training either way.
    pub vae_mean_inference: bool,
    pub seed: u64,
}

impl ArchitectureSpec {
    pub fn new(kind: ArchitectureKind) -> Self {
        ArchitectureSpec {
            kind,
            weights: LossWeights::default(),
            epochs: 200,
            batch_size: 1000,
            learning_rate: 1e-4,
            hidden_width: 10,
            feature_dim: 10,
            elm_hidden: 50,
            elm_lambda: 1e-3,
            elm_activation: ElmActivation::Sigmoid,
            helm_sizes: vec![50, 50],
            helm_lambdas: vec![1e-3, 1e-3],
            threshold_gamma: Threshold::DEFAULT_GAMMA,
            threshold_p: Threshold::DEFAULT_P,
            vae_mean_inference: true,
            seed: 0,
        }
    }

    /// Rejects weight settings that have no consumer under this kind, e.g.
    /// an asymmetric relaxation without a Wasserstein critic.
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let kind = self.kind;
        if self.weights.delta_w != 1.0 && kind.discriminator() != Some(DiscriminatorKind::Wasserstein)
        {
            return Err(Error::Config(format!(
                "delta_w = {} has no effect under kind '{kind}'",
                self.weights.delta_w
            )));
        }
        if self.weights.beta != 1.0 && !kind.uses_vae() {
            return Err(Error::Config(format!(
                "beta = {} has no effect under kind '{kind}'",
                self.weights.beta
            )));
        }
        if self.weights.alpha != 1.0 && kind.discriminator().is_none() {
            return Err(Error::Config(format!(
                "alpha = {} has no effect under kind '{kind}'",
                self.weights.alpha
            )));
        }
        if self.epochs == 0 && !kind.is_helm() {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        Ok(())
    }

    /// Copy of this spec for `kind` with weights that have no consumer
    /// under it reset to their defaults; lets one weight grid drive a sweep
    /// over mixed kinds.
    pub fn sanitized_for(&self, kind: ArchitectureKind) -> ArchitectureSpec {
        let mut s = self.clone();
        s.kind = kind;
        if kind.discriminator() != Some(DiscriminatorKind::Wasserstein) {
            s.weights.delta_w = 1.0;
        }
        if !kind.uses_vae() {
            s.weights.beta = 1.0;
        }
        if kind.discriminator().is_none() {
            s.weights.alpha = 1.0;
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

pub enum ExtractorNet<F> {
    Mlp(MlpEncoder<F>),
    Vae {
        encoder: VariationalEncoder<F>,
        decoder: Decoder<F>,
    },
    /// HELM kinds carry no gradient-trained extractor.
    ClosedForm,
}

pub struct Assembly<F> {
    pub spec: ArchitectureSpec,
    pub input_dim: usize,
    pub extractor: ExtractorNet<F>,
    pub discriminator: Option<Discriminator<F>>,
}

/// Wires the components a kind requires; weights are drawn from the spec's
/// seed so a rebuilt assembly is bit-identical.
pub fn build<F: Scalar>(spec: ArchitectureSpec, input_dim: usize) -> Result<Assembly<F>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &["init", spec.kind.name()]));
    let extractor = if spec.kind.is_helm() {
        ExtractorNet::ClosedForm
    } else if spec.kind.uses_vae() {
        let encoder =
            VariationalEncoder::new(input_dim, spec.hidden_width, spec.feature_dim, &mut rng);
        let decoder = Decoder::new(spec.feature_dim, spec.hidden_width, input_dim, &mut rng);
        ExtractorNet::Vae { encoder, decoder }
    } else {
        ExtractorNet::Mlp(MlpEncoder::new(
            input_dim,
            spec.hidden_width,
            spec.feature_dim,
            &mut rng,
        ))
    };
    let discriminator = spec
        .kind
        .discriminator()
        .map(|kind| Discriminator::new(kind, spec.feature_dim, &mut rng));
    Ok(Assembly {
        spec,
        input_dim,
        extractor,
        discriminator,
    })
}

// ---------------------------------------------------------------------------
// Training history
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub homothety: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient_penalty: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps_per_epoch: usize,
}

// ---------------------------------------------------------------------------
// Trained model
// ---------------------------------------------------------------------------

pub enum TrainedExtractor<F> {
    Mlp(MlpEncoder<F>),
    Vae {
        encoder: VariationalEncoder<F>,
        decoder: Decoder<F>,
    },
    Helm(Vec<ElmAutoencoder<F>>),
}

pub struct TrainedModel<F> {
    pub spec: ArchitectureSpec,
    pub input_dim: usize,
    pub extractor: TrainedExtractor<F>,
    pub discriminator: Option<Discriminator<F>>,
    pub elm: OneClassElm<F>,
    pub threshold: Threshold,
    pub history: TrainingHistory,
}

/// Frozen feature map shared by scoring and model assembly.
fn extractor_features<F: Scalar>(
    extractor: &TrainedExtractor<F>,
    spec: &ArchitectureSpec,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    match extractor {
        TrainedExtractor::Mlp(enc) => Ok(enc.features(x)),
        TrainedExtractor::Vae { encoder, .. } => {
            if spec.vae_mean_inference {
                Ok(encoder.mean_features(x))
            } else {
                // seeded sample, reproducible for a given model seed
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &["infer"]));
                let mut tape = Tape::new();
                let vars = encoder.bind(&mut tape);
                let xv = tape.leaf(x.clone());
                let eps = gaussian(&mut rng, x.nrows(), encoder.feature_dim());
                let out = encoder.forward(&mut tape, vars, xv, Some(&eps))?;
                Ok(tape.value(out.feature).clone())
            }
        }
        TrainedExtractor::Helm(layers) => {
            let mut rep = x.clone();
            for layer in layers {
                rep = layer.encode(&rep)?;
            }
            Ok(rep)
        }
    }
}

impl<F: Scalar> TrainedModel<F> {
    /// Frozen feature map used for scoring.
    pub fn features(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        extractor_features(&self.extractor, &self.spec, x)
    }

    pub fn residuals(&self, x: &Tensor<F>) -> Result<Vec<F>> {
        self.elm.residuals(&self.features(x)?)
    }
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

fn gaussian<F: Scalar>(rng: &mut impl Rng, n: usize, d: usize) -> Tensor<F> {
    let data: Vec<F> = (0..n * d)
        .map(|_| F::cast(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_parts(vec![n, d], data)
}

fn sample_rows<F: Scalar>(t: &Tensor<F>, count: usize, rng: &mut impl Rng) -> Tensor<F> {
    let idx: Vec<usize> = (0..count).map(|_| rng.random_range(0..t.nrows())).collect();
    t.select_rows(&idx)
}

struct StepOutcome {
    total: f64,
    reconstruction: Option<f64>,
    kl: Option<f64>,
    homothety: Option<f64>,
    eta: Option<f64>,
    discriminator: Option<f64>,
    gradient_penalty: Option<f64>,
}

/// Trains an assembly on normalized source/target data and returns the
/// frozen pipeline. Validation sets must be disjoint from the training
/// sets; they are the sole input to the decision threshold.
pub fn fit<F: Scalar>(
    assembly: Assembly<F>,
    source_train: &Tensor<F>,
    target_train: &Tensor<F>,
    source_val: &Tensor<F>,
    target_val: &Tensor<F>,
) -> Result<TrainedModel<F>> {
    let Assembly {
        spec,
        input_dim,
        mut extractor,
        mut discriminator,
    } = assembly;
    for (name, t) in [
        ("source_train", source_train),
        ("target_train", target_train),
        ("source_val", source_val),
        ("target_val", target_val),
    ] {
        if t.ncols() != input_dim {
            return Err(Error::shape("fit", format!("{name} width != {input_dim}")));
        }
    }

    let mut history = TrainingHistory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &["fit", spec.kind.name()]));

    if let ExtractorNet::ClosedForm = extractor {
        return fit_helm(spec, input_dim, source_train, target_train, source_val, target_val);
    }

    let half = (spec.batch_size / 2).max(1);
    let n_larger = source_train.nrows().max(target_train.nrows());
    let steps_per_epoch = n_larger.div_ceil(spec.batch_size);
    history.steps_per_epoch = steps_per_epoch;

    let lr = F::cast(spec.learning_rate);
    let mut opt_feat = Adam::new(AdamConfig::with_lr(lr));
    let mut opt_disc = Adam::new(AdamConfig::with_lr(lr));

    for epoch in 0..spec.epochs {
        let mut sums = EpochRecord::default();
        let mut pen_sum = 0.0;
        let mut pen_count = 0usize;
        for step in 0..steps_per_epoch {
            let xs = sample_rows(source_train, half, &mut rng);
            let xt = sample_rows(target_train, half, &mut rng);
            let out = training_step(
                &spec,
                &mut extractor,
                &mut discriminator,
                &xs,
                &xt,
                &mut opt_feat,
                &mut opt_disc,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence(format!(
                    "non-finite value in '{op}' at epoch {epoch}, step {step} (kind {})",
                    spec.kind
                )),
                other => other,
            })?;
            sums.total += out.total;
            if let Some(v) = out.reconstruction {
                sums.reconstruction = Some(sums.reconstruction.unwrap_or(0.0) + v);
            }
            if let Some(v) = out.kl {
                sums.kl = Some(sums.kl.unwrap_or(0.0) + v);
            }
            if let Some(v) = out.homothety {
                sums.homothety = Some(sums.homothety.unwrap_or(0.0) + v);
            }
            if let Some(v) = out.eta {
                sums.eta = Some(sums.eta.unwrap_or(0.0) + v);
            }
            if let Some(v) = out.discriminator {
                sums.discriminator = Some(sums.discriminator.unwrap_or(0.0) + v);
            }
            if let Some(v) = out.gradient_penalty {
                pen_sum += v;
                pen_count += 1;
            }
        }
        let k = steps_per_epoch as f64;
        history.epochs.push(EpochRecord {
            total: sums.total / k,
            reconstruction: sums.reconstruction.map(|v| v / k),
            kl: sums.kl.map(|v| v / k),
            homothety: sums.homothety.map(|v| v / k),
            eta: sums.eta.map(|v| v / k),
            discriminator: sums.discriminator.map(|v| v / k),
            gradient_penalty: (pen_count > 0).then(|| pen_sum / pen_count as f64),
        });
    }

    // freeze the extractor, fit the one-class head on both training sets
    let trained = match extractor {
        ExtractorNet::Mlp(enc) => TrainedExtractor::Mlp(enc),
        ExtractorNet::Vae { encoder, decoder } => TrainedExtractor::Vae { encoder, decoder },
        ExtractorNet::ClosedForm => unreachable!("handled above"),
    };
    finish_model(
        spec,
        input_dim,
        trained,
        discriminator,
        history,
        source_train,
        target_train,
        source_val,
        target_val,
    )
}

/// Shared tail of every fit: extractor is frozen, features are computed for
/// the pooled training data (one-class fit) and the pooled validation data
/// (threshold).
#[allow(clippy::too_many_arguments)]
fn finish_model<F: Scalar>(
    spec: ArchitectureSpec,
    input_dim: usize,
    extractor: TrainedExtractor<F>,
    discriminator: Option<Discriminator<F>>,
    history: TrainingHistory,
    source_train: &Tensor<F>,
    target_train: &Tensor<F>,
    source_val: &Tensor<F>,
    target_val: &Tensor<F>,
) -> Result<TrainedModel<F>> {
    let train_pool = if spec.kind == ArchitectureKind::TwoMonthHelm {
        target_train.clone()
    } else {
        source_train.vstack(target_train)?
    };
    let val_pool = if spec.kind == ArchitectureKind::TwoMonthHelm {
        target_val.clone()
    } else {
        source_val.vstack(target_val)?
    };
    let f_train = extractor_features(&extractor, &spec, &train_pool)?;
    let elm = OneClassElm::train(
        &f_train,
        spec.elm_hidden,
        F::cast(spec.elm_lambda),
        spec.elm_activation,
        seed::derive(spec.seed, &["elm"]),
    )?;
    let f_val = extractor_features(&extractor, &spec, &val_pool)?;
    let threshold = compute_threshold(&elm, &f_val, spec.threshold_gamma, spec.threshold_p)?;
    Ok(TrainedModel {
        spec,
        input_dim,
        extractor,
        discriminator,
        elm,
        threshold,
        history,
    })
}

fn fit_helm<F: Scalar>(
    spec: ArchitectureSpec,
    input_dim: usize,
    source_train: &Tensor<F>,
    target_train: &Tensor<F>,
    source_val: &Tensor<F>,
    target_val: &Tensor<F>,
) -> Result<TrainedModel<F>> {
    let pooled = if spec.kind == ArchitectureKind::TwoMonthHelm {
        target_train.clone()
    } else {
        source_train.vstack(target_train)?
    };
    // autoencoder stack trained layer by layer; the one-class head is fitted by
    // the shared tail so the threshold flow stays identical across kinds
    let n_layers = spec.helm_sizes.len().saturating_sub(1);
    if n_layers == 0 || spec.helm_lambdas.len() != spec.helm_sizes.len() {
        return Err(Error::Config(
            "helm_sizes needs at least [ae_width, head_width] with matching helm_lambdas".into(),
        ));
    }
    // autoencoder layers use relu; the sigmoid default applies to the
    // one-class head only
    let mut layers = Vec::new();
    let mut rep = pooled.clone();
    for i in 0..n_layers {
        let ae = ElmAutoencoder::train(
            &rep,
            spec.helm_sizes[i],
            F::cast(spec.helm_lambdas[i]),
            ElmActivation::Relu,
            seed::derive(spec.seed, &["helm_ae", &i.to_string()]),
        )?;
        rep = ae.encode(&rep)?;
        layers.push(ae);
    }
    let mut spec = spec;
    spec.elm_hidden = *spec.helm_sizes.last().unwrap();
    spec.elm_lambda = *spec.helm_lambdas.last().unwrap();
    finish_model(
        spec,
        input_dim,
        TrainedExtractor::Helm(layers),
        None,
        TrainingHistory::default(),
        source_train,
        target_train,
        source_val,
        target_val,
    )
}

/// One mini-batch step: builds the active losses on a fresh tape, runs one
/// backward pass, and updates extractor (+decoder) and discriminator with
/// their separate optimizer states.
#[allow(clippy::too_many_arguments)]
fn training_step<F: Scalar>(
    spec: &ArchitectureSpec,
    extractor: &mut ExtractorNet<F>,
    discriminator: &mut Option<Discriminator<F>>,
    xs: &Tensor<F>,
    xt: &Tensor<F>,
    opt_feat: &mut Adam<F>,
    opt_disc: &mut Adam<F>,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let ns = xs.nrows();
    let nt = xt.nrows();
    let x_cat = xs.vstack(xt)?;
    let x_var = tape.leaf(x_cat);

    let mut out = StepOutcome {
        total: 0.0,
        reconstruction: None,
        kl: None,
        homothety: None,
        eta: None,
        discriminator: None,
        gradient_penalty: None,
    };

    // forward through the shared extractor (single instance, both domains)
    let (feat_cat, feat_vars, mut feat_params, main_loss): (
        Var,
        Vec<Var>,
        Vec<&mut Tensor<F>>,
        Option<Var>,
    ) = match extractor {
            ExtractorNet::Mlp(enc) => {
                let vars = enc.bind(&mut tape);
                let f = enc.forward(&mut tape, vars, x_var)?;
                let main = if spec.kind.uses_homothety() {
                    let fs = tape.gather_rows(f, (0..ns).collect())?;
                    let ft = tape.gather_rows(f, (ns..ns + nt).collect())?;
                    let pairs_s = sample_pairs(ns, rng);
                    let pairs_t = sample_pairs(nt, rng);
                    let dxs = input_distances(xs, &pairs_s);
                    let dxt = input_distances(xt, &pairs_t);
                    let dfs = feature_distances_on(&mut tape, fs, &pairs_s)?;
                    let dft = feature_distances_on(&mut tape, ft, &pairs_t)?;
                    let eta = optimal_eta(&HomothetyBatch {
                        domains: vec![
                            DomainPairs {
                                d_x: dxs.clone(),
                                d_f: tape.value(dfs).data().to_vec(),
                            },
                            DomainPairs {
                                d_x: dxt.clone(),
                                d_f: tape.value(dft).data().to_vec(),
                            },
                        ],
                    })?;
                    let term_s = homothety_term_on(&mut tape, &dxs, dfs, eta)?;
                    let term_t = homothety_term_on(&mut tape, &dxt, dft, eta)?;
                    let lh = tape.add(term_s, term_t)?;
                    out.homothety = Some(tape.value(lh).item().as_f64());
                    out.eta = Some(eta.as_f64());
                    Some(lh)
                } else {
                    None
                };
                (f, vars.param_vars(), enc.params_mut(), main)
            }
            ExtractorNet::Vae { encoder, decoder } => {
                let evars = encoder.bind(&mut tape);
                let dvars = decoder.bind(&mut tape);
                let eps = gaussian::<F>(rng, ns + nt, encoder.feature_dim());
                let fwd = encoder.forward(&mut tape, evars, x_var, Some(&eps))?;
                let xhat = decoder.forward(&mut tape, dvars, fwd.feature)?;
                let rec = mse_on(&mut tape, x_var, xhat)?;
                let kl = kl_on(&mut tape, fwd.mu, fwd.logvar)?;
                let beta_kl = tape.scale(kl, F::cast(spec.weights.beta))?;
                let main = tape.add(rec, beta_kl)?;
                out.reconstruction = Some(tape.value(rec).item().as_f64());
                out.kl = Some(tape.value(kl).item().as_f64());
                let mut vars = evars.param_vars();
                vars.extend(dvars.param_vars());
                let mut params = encoder.params_mut();
                params.extend(decoder.params_mut());
                (fwd.feature, vars, params, Some(main))
            }
            ExtractorNet::ClosedForm => unreachable!("HELM kinds never take gradient steps"),
        };

    // adversarial term through the reversal node
    let mut disc_vars: Option<BoundDiscriminator> = None;
    let objective = if let Some(disc) = discriminator.as_ref() {
        let dv = disc.bind(&mut tape);
        disc_vars = Some(dv);
        let fs = tape.gather_rows(feat_cat, (0..ns).collect())?;
        let ft = tape.gather_rows(feat_cat, (ns..ns + nt).collect())?;
        let terms = adversarial_objective_on(&mut tape, disc, dv, fs, ft, &spec.weights, rng)?;
        out.discriminator = Some(terms.discriminator_loss.as_f64());
        out.gradient_penalty = terms.penalty.map(|p| p.as_f64());
        Some(terms.objective)
    } else {
        None
    };

    let total = match (main_loss, objective) {
        (Some(m), Some(j)) => tape.add(m, j)?,
        (Some(m), None) => m,
        (None, Some(j)) => j,
        (None, None) => return Err(Error::Config("kind activates no loss terms".into())),
    };
    out.total = tape.value(total).item().as_f64();
    tape.backward(total)?;

    apply_step(&tape, &feat_vars, &mut feat_params, opt_feat)?;
    if let (Some(disc), Some(dv)) = (discriminator.as_mut(), disc_vars) {
        apply_step(&tape, &dv.param_vars(), &mut disc.params_mut(), opt_disc)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Percentage of healthy test samples flagged anomalous.
    pub fpr: f64,
    pub fault_detected: bool,
    pub aligned_at_5: bool,
    pub aligned_at_1: bool,
}

/// Scores the target's held-out segments: FPR on the healthy stretch, the
/// two-in-a-row alarm on the faulty stretch, and the aligned-pair verdicts
/// at the 5% and 1% FPR cutoffs (strict `<`).
pub fn evaluate<F: Scalar>(
    model: &TrainedModel<F>,
    target_healthy_test: &Tensor<F>,
    target_faulty_test: Option<&Tensor<F>>,
) -> Result<Evaluation> {
    if target_healthy_test.nrows() == 0 {
        return Err(Error::EmptyDataset("healthy test segment".into()));
    }
    let healthy = detect(
        &model.elm,
        &model.threshold,
        &model.features(target_healthy_test)?,
    )?;
    let flagged = healthy.flags.iter().filter(|&&b| b).count();
    let fpr = 100.0 * flagged as f64 / healthy.flags.len() as f64;
    let fault_detected = match target_faulty_test {
        Some(f) if f.nrows() > 0 => {
            detect(&model.elm, &model.threshold, &model.features(f)?)?.alarm
        }
        _ => false,
    };
    Ok(Evaluation {
        fpr,
        fault_detected,
        aligned_at_5: fault_detected && fpr < 5.0,
        aligned_at_1: fault_detected && fpr < 1.0,
    })
}

// ---------------------------------------------------------------------------
// Model bundle I/O
// ---------------------------------------------------------------------------

const BUNDLE_MAGIC: &str = "fleet-align-bundle v1";

fn push_tensor<F: Scalar>(out: &mut String, name: &str, t: &Tensor<F>) {
    out.push_str("tensor ");
    out.push_str(name);
    for d in t.shape() {
        out.push_str(&format!(" {d}"));
    }
    out.push('\n');
    let mut first = true;
    for v in t.data() {
        if !first {
            out.push(' ');
        }
        out.push_str(&format!("{:?}", v.as_f64()));
        first = false;
    }
    out.push('\n');
}

impl<F: Scalar> TrainedModel<F> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v: Vec<(String, &Tensor<F>)> = Vec::new();
        match &self.extractor {
            TrainedExtractor::Mlp(enc) => {
                for (name, t) in ["l1.weight", "l1.bias", "l2.weight", "l2.bias"]
                    .iter()
                    .zip(enc.params())
                {
                    v.push((format!("extractor.{name}"), t));
                }
            }
            TrainedExtractor::Vae { encoder, decoder } => {
                let names = [
                    "trunk.l1.weight",
                    "trunk.l1.bias",
                    "trunk.l2.weight",
                    "trunk.l2.bias",
                    "mu.weight",
                    "mu.bias",
                    "logvar.weight",
                    "logvar.bias",
                ];
                for (name, t) in names.iter().zip(encoder.params()) {
                    v.push((format!("encoder.{name}"), t));
                }
                for (name, t) in ["l1.weight", "l1.bias", "l2.weight", "l2.bias"]
                    .iter()
                    .zip(decoder.params())
                {
                    v.push((format!("decoder.{name}"), t));
                }
            }
            TrainedExtractor::Helm(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    v.push((format!("helm.{i}.random_weights"), &l.random_weights));
                    v.push((format!("helm.{i}.random_biases"), &l.random_biases));
                    v.push((format!("helm.{i}.output_weights"), &l.output_weights));
                }
            }
        }
        if let Some(d) = &self.discriminator {
            let names = ["l1.weight", "l1.bias", "l2.weight", "l2.bias", "head.weight", "head.bias"];
            for (name, t) in names.iter().zip(d.params()) {
                v.push((format!("discriminator.{name}"), t));
            }
        }
        v.push(("elm.input_weights".into(), &self.elm.input_weights));
        v.push(("elm.biases".into(), &self.elm.biases));
        v.push(("elm.output_weights".into(), &self.elm.output_weights));
        v
    }

    /// Flat text serialization: a version tag, the spec as JSON metadata,
    /// then each tensor as a shape header plus row-major payload.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from(BUNDLE_MAGIC);
        out.push('\n');
        out.push_str("meta spec ");
        out.push_str(
            &serde_json::to_string(&self.spec)
                .map_err(|e| Error::Data(format!("spec serialization: {e}")))?,
        );
        out.push('\n');
        out.push_str(&format!("meta input_dim {}\n", self.input_dim));
        out.push_str(&format!(
            "meta threshold {:?} {:?} {:?}\n",
            self.threshold.gamma, self.threshold.p, self.threshold.value
        ));
        out.push_str(&format!("meta elm_seed {}\n", self.elm.seed));
        out.push_str(&format!(
            "meta history {}\n",
            serde_json::to_string(&self.history)
                .map_err(|e| Error::Data(format!("history serialization: {e}")))?
        ));
        for (name, t) in self.named_tensors() {
            push_tensor(&mut out, &name, t);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(BUNDLE_MAGIC) {
            return Err(Error::Data("not a model bundle (bad version tag)".into()));
        }
        let mut spec: Option<ArchitectureSpec> = None;
        let mut input_dim = 0usize;
        let mut threshold = Threshold {
            gamma: 0.0,
            p: 0.0,
            value: 0.0,
        };
        let mut elm_seed = 0u64;
        let mut history = TrainingHistory::default();
        let mut tensors: Vec<(String, Tensor<F>)> = Vec::new();
        while let Some(line) = lines.next() {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (key, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Data("bad meta line".into()))?;
                match key {
                    "spec" => {
                        spec = Some(
                            serde_json::from_str(value)
                                .map_err(|e| Error::Data(format!("bad spec meta: {e}")))?,
                        )
                    }
                    "input_dim" => {
                        input_dim = value
                            .parse()
                            .map_err(|_| Error::Data("bad input_dim".into()))?
                    }
                    "threshold" => {
                        let parts: Vec<f64> = value
                            .split(' ')
                            .map(|p| p.parse().map_err(|_| Error::Data("bad threshold".into())))
                            .collect::<Result<_>>()?;
                        if parts.len() != 3 {
                            return Err(Error::Data("bad threshold arity".into()));
                        }
                        threshold = Threshold {
                            gamma: parts[0],
                            p: parts[1],
                            value: parts[2],
                        };
                    }
                    "elm_seed" => {
                        elm_seed = value.parse().map_err(|_| Error::Data("bad elm_seed".into()))?
                    }
                    "history" => {
                        history = serde_json::from_str(value)
                            .map_err(|e| Error::Data(format!("bad history meta: {e}")))?
                    }
                    other => return Err(Error::Data(format!("unknown meta key {other}"))),
                }
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Data("tensor line missing name".into()))?
                    .to_string();
                let shape: Vec<usize> = parts
                    .map(|p| p.parse().map_err(|_| Error::Data("bad tensor shape".into())))
                    .collect::<Result<_>>()?;
                let payload = lines
                    .next()
                    .ok_or_else(|| Error::Data(format!("tensor {name} missing payload")))?;
                let data: Vec<F> = payload
                    .split(' ')
                    .map(|p| {
                        p.parse::<f64>()
                            .map(F::cast)
                            .map_err(|_| Error::Data(format!("bad value in tensor {name}")))
                    })
                    .collect::<Result<_>>()?;
                tensors.push((name, Tensor::new(shape, data)?));
            } else if !line.trim().is_empty() {
                return Err(Error::Data(format!("unexpected bundle line: {line}")));
            }
        }
        let spec = spec.ok_or_else(|| Error::Data("bundle missing spec meta".into()))?;
        rebuild_model(spec, input_dim, threshold, elm_seed, history, tensors)
    }
}

fn take_tensor<F: Scalar>(tensors: &mut Vec<(String, Tensor<F>)>, name: &str) -> Result<Tensor<F>> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Data(format!("bundle missing tensor {name}")))?;
    Ok(tensors.remove(pos).1)
}

fn rebuild_model<F: Scalar>(
    spec: ArchitectureSpec,
    input_dim: usize,
    threshold: Threshold,
    elm_seed: u64,
    history: TrainingHistory,
    mut tensors: Vec<(String, Tensor<F>)>,
) -> Result<TrainedModel<F>> {
    use crate::extractors::{Activation, Dense};
    let dense = |w: Tensor<F>, b: Tensor<F>, act: Activation| Dense {
        weight: w,
        bias: b,
        activation: act,
    };
    let extractor = if spec.kind.is_helm() {
        let mut layers = Vec::new();
        let mut i = 0;
        while tensors.iter().any(|(n, _)| n.starts_with(&format!("helm.{i}."))) {
            layers.push(ElmAutoencoder {
                random_weights: take_tensor(&mut tensors, &format!("helm.{i}.random_weights"))?,
                random_biases: take_tensor(&mut tensors, &format!("helm.{i}.random_biases"))?,
                output_weights: take_tensor(&mut tensors, &format!("helm.{i}.output_weights"))?,
                activation: ElmActivation::Relu,
            });
            i += 1;
        }
        TrainedExtractor::Helm(layers)
    } else if spec.kind.uses_vae() {
        let encoder = VariationalEncoder {
            trunk: MlpEncoder {
                l1: dense(
                    take_tensor(&mut tensors, "encoder.trunk.l1.weight")?,
                    take_tensor(&mut tensors, "encoder.trunk.l1.bias")?,
                    Activation::Relu,
                ),
                l2: dense(
                    take_tensor(&mut tensors, "encoder.trunk.l2.weight")?,
                    take_tensor(&mut tensors, "encoder.trunk.l2.bias")?,
                    Activation::Relu,
                ),
            },
            mu_head: dense(
                take_tensor(&mut tensors, "encoder.mu.weight")?,
                take_tensor(&mut tensors, "encoder.mu.bias")?,
                Activation::Linear,
            ),
            logvar_head: dense(
                take_tensor(&mut tensors, "encoder.logvar.weight")?,
                take_tensor(&mut tensors, "encoder.logvar.bias")?,
                Activation::Linear,
            ),
        };
        let decoder = Decoder {
            l1: dense(
                take_tensor(&mut tensors, "decoder.l1.weight")?,
                take_tensor(&mut tensors, "decoder.l1.bias")?,
                Activation::Relu,
            ),
            l2: dense(
                take_tensor(&mut tensors, "decoder.l2.weight")?,
                take_tensor(&mut tensors, "decoder.l2.bias")?,
                Activation::Linear,
            ),
        };
        TrainedExtractor::Vae { encoder, decoder }
    } else {
        TrainedExtractor::Mlp(MlpEncoder {
            l1: dense(
                take_tensor(&mut tensors, "extractor.l1.weight")?,
                take_tensor(&mut tensors, "extractor.l1.bias")?,
                Activation::Relu,
            ),
            l2: dense(
                take_tensor(&mut tensors, "extractor.l2.weight")?,
                take_tensor(&mut tensors, "extractor.l2.bias")?,
                Activation::Relu,
            ),
        })
    };
    let discriminator = match spec.kind.discriminator() {
        None => None,
        Some(kind) => Some(Discriminator {
            kind,
            l1: dense(
                take_tensor(&mut tensors, "discriminator.l1.weight")?,
                take_tensor(&mut tensors, "discriminator.l1.bias")?,
                Activation::Relu,
            ),
            l2: dense(
                take_tensor(&mut tensors, "discriminator.l2.weight")?,
                take_tensor(&mut tensors, "discriminator.l2.bias")?,
                Activation::Relu,
            ),
            head: dense(
                take_tensor(&mut tensors, "discriminator.head.weight")?,
                take_tensor(&mut tensors, "discriminator.head.bias")?,
                Activation::Linear,
            ),
        }),
    };
    let elm = OneClassElm {
        input_weights: take_tensor(&mut tensors, "elm.input_weights")?,
        biases: take_tensor(&mut tensors, "elm.biases")?,
        output_weights: take_tensor(&mut tensors, "elm.output_weights")?,
        activation: spec.elm_activation,
        lambda: F::cast(spec.elm_lambda),
        seed: elm_seed,
    };
    Ok(TrainedModel {
        spec,
        input_dim,
        extractor,
        discriminator,
        elm,
        threshold,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cluster(n: usize, dim: usize, center: f64, spread: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| center + spread * rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn tiny_spec(kind: ArchitectureKind, seed: u64) -> ArchitectureSpec {
        let mut s = ArchitectureSpec::new(kind);
        s.epochs = 2;
        s.batch_size = 32;
        s.learning_rate = 1e-3;
        s.elm_hidden = 20;
        s.seed = seed;
        s
    }

    #[test]
    fn kind_parsing_round_trips_and_rejects_unknown() {
        for k in ArchitectureKind::ALL {
            assert_eq!(ArchitectureKind::parse(k.name()).unwrap(), k);
        }
        let err = ArchitectureKind::parse("nope").unwrap_err().to_string();
        assert!(err.contains("hafas") && err.contains("2m-helm"), "{err}");
    }

    #[test]
    fn spec_validation_rejects_stray_weights() {
        let mut s = ArchitectureSpec::new(ArchitectureKind::Hafas);
        s.weights.delta_w = 4.0; // softmax kind
        assert!(s.validate().is_err());
        let mut s = ArchitectureSpec::new(ArchitectureKind::Hafaw);
        s.weights.delta_w = 4.0;
        assert!(s.validate().is_ok());
        let mut s = ArchitectureSpec::new(ArchitectureKind::Hfa);
        s.weights.beta = 10.0; // no VAE
        assert!(s.validate().is_err());
        let mut s = ArchitectureSpec::new(ArchitectureKind::Hfa);
        s.weights.alpha = 0.2; // no discriminator
        assert!(s.validate().is_err());
    }

    #[test]
    fn build_wires_components_per_kind() {
        let a = build::<f64>(tiny_spec(ArchitectureKind::Hfa, 1), 6).unwrap();
        assert!(matches!(a.extractor, ExtractorNet::Mlp(_)));
        assert!(a.discriminator.is_none());
        let a = build::<f64>(tiny_spec(ArchitectureKind::BetaVaeDw, 1), 6).unwrap();
        assert!(matches!(a.extractor, ExtractorNet::Vae { .. }));
        assert_eq!(
            a.discriminator.as_ref().map(|d| d.kind),
            Some(DiscriminatorKind::Wasserstein)
        );
        let a = build::<f64>(tiny_spec(ArchitectureKind::Helm, 1), 6).unwrap();
        assert!(matches!(a.extractor, ExtractorNet::ClosedForm));
        assert!(a.discriminator.is_none());
    }

    fn fit_tiny(kind: ArchitectureKind, seed: u64) -> TrainedModel<f64> {
        let st = cluster(80, 6, 0.2, 0.5, 100 + seed);
        let tt = cluster(60, 6, -0.2, 0.5, 200 + seed);
        let sv = cluster(20, 6, 0.2, 0.5, 300 + seed);
        let tv = cluster(20, 6, -0.2, 0.5, 400 + seed);
        let a = build::<f64>(tiny_spec(kind, seed), 6).unwrap();
        fit(a, &st, &tt, &sv, &tv).unwrap()
    }

    #[test]
    fn history_matches_the_loop_contract() {
        // epochs x ceil(n_larger / batch) steps, loss terms per kind
        let m = fit_tiny(ArchitectureKind::Hafaw, 3);
        assert_eq!(m.history.epochs.len(), 2);
        assert_eq!(m.history.steps_per_epoch, 80usize.div_ceil(32));
        let e = &m.history.epochs[0];
        assert!(e.homothety.is_some());
        assert!(e.discriminator.is_some());
        assert!(e.gradient_penalty.is_some());
        assert!(e.reconstruction.is_none());

        let m = fit_tiny(ArchitectureKind::BetaVae, 3);
        let e = &m.history.epochs[0];
        assert!(e.reconstruction.is_some());
        assert!(e.kl.is_some());
        assert!(e.homothety.is_none());
        assert!(e.discriminator.is_none());

        let m = fit_tiny(ArchitectureKind::Helm, 3);
        assert!(m.history.epochs.is_empty());
    }

    #[test]
    fn term_routing_updates_exactly_the_wired_parameters() {
        // HFA never builds a discriminator; AFA kinds train extractor and
        // discriminator; VAE kinds also move the decoder.
        let st = cluster(64, 4, 0.5, 0.4, 1);
        let tt = cluster(64, 4, -0.5, 0.4, 2);
        let sv = cluster(16, 4, 0.5, 0.4, 3);
        let tv = cluster(16, 4, -0.5, 0.4, 4);

        let spec = tiny_spec(ArchitectureKind::Afas, 9);
        let a = build::<f64>(spec.clone(), 4).unwrap();
        let before: Vec<Tensor<f64>> = match &a.extractor {
            ExtractorNet::Mlp(e) => e.params().into_iter().cloned().collect(),
            _ => unreachable!(),
        };
        let m = fit(a, &st, &tt, &sv, &tv).unwrap();
        match &m.extractor {
            TrainedExtractor::Mlp(e) => {
                let moved = e
                    .params()
                    .iter()
                    .zip(&before)
                    .any(|(now, then)| now.data() != then.data());
                assert!(moved, "adversarial kind must update the extractor");
            }
            _ => unreachable!(),
        }
        assert!(m.discriminator.is_some());

        let m = fit_tiny(ArchitectureKind::Hfa, 10);
        assert!(m.discriminator.is_none());
    }

    #[test]
    fn grl_step_ascends_the_discriminator_loss_for_the_extractor() {
        // gradients on one tape, through the reversal node: the extractor's
        // descent direction must have positive inner product with the true
        // gradient of the discriminator loss w.r.t. extractor parameters
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = MlpEncoder::<f64>::new(4, 10, 10, &mut rng);
        let disc = Discriminator::new(DiscriminatorKind::Softmax, 10, &mut rng);
        let xs = cluster(32, 4, 0.6, 0.3, 6);
        let xt = cluster(32, 4, -0.6, 0.3, 7);

        let grads_with = |use_grl: bool| -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
            let mut tape = Tape::new();
            let ev = enc.bind(&mut tape);
            let dv = disc.bind(&mut tape);
            let xsv = tape.leaf(xs.clone());
            let xtv = tape.leaf(xt.clone());
            let fs = enc.forward(&mut tape, ev, xsv).unwrap();
            let ft = enc.forward(&mut tape, ev, xtv).unwrap();
            let (fs2, ft2) = if use_grl {
                (
                    tape.gradient_reversal(fs, 1.0).unwrap(),
                    tape.gradient_reversal(ft, 1.0).unwrap(),
                )
            } else {
                (fs, ft)
            };
            let cat = tape.concat(fs2, ft2).unwrap();
            let logits = disc.forward(&mut tape, dv, cat).unwrap();
            let mut labels = vec![0usize; 32];
            labels.extend(std::iter::repeat(1).take(32));
            let ce = tape.cross_entropy_with_logits(logits, labels).unwrap();
            tape.backward(ce).unwrap();
            let eg = ev
                .param_vars()
                .iter()
                .map(|&v| tape.grad(v).cloned().unwrap())
                .collect();
            let dg = dv
                .param_vars()
                .iter()
                .map(|&v| tape.grad(v).cloned().unwrap())
                .collect();
            (eg, dg)
        };
        let (eg_grl, dg_grl) = grads_with(true);
        let (eg_true, dg_true) = grads_with(false);
        // extractor: step = -grad_grl; ascent along the true gradient
        let inner: f64 = eg_grl
            .iter()
            .zip(&eg_true)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| -x * y))
            .sum();
        assert!(inner > 0.0, "extractor step must ascend the CE, inner {inner}");
        // discriminator: gradient untouched by the reversal node
        for (a, b) in dg_grl.iter().zip(&dg_true) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn identical_domains_align_trivially() {
        // target == source: probe accuracy near chance, FPRs close
        let shared = cluster(120, 6, 0.0, 0.6, 50);
        let val = cluster(40, 6, 0.0, 0.6, 51);
        let test = cluster(80, 6, 0.0, 0.6, 52);
        let mut spec = tiny_spec(ArchitectureKind::Hfa, 8);
        spec.epochs = 5;
        let a = build::<f64>(spec, 6).unwrap();
        let m = fit(a, &shared, &shared, &val, &val).unwrap();
        let fs = m.features(&shared).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let acc =
            crate::discriminators::probe_accuracy(&fs, &fs, 60, 1e-2, &mut rng).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "probe accuracy {acc}");
        let e = evaluate(&m, &test, None).unwrap();
        assert!(!e.fault_detected);
        assert!(e.fpr <= 20.0);
    }

    #[test]
    fn lower_beta_reconstructs_no_worse() {
        let st = cluster(96, 4, 0.3, 0.5, 60);
        let tt = cluster(96, 4, -0.3, 0.5, 61);
        let sv = cluster(24, 4, 0.3, 0.5, 62);
        let tv = cluster(24, 4, -0.3, 0.5, 63);
        let run = |beta: f64| -> f64 {
            let mut spec = tiny_spec(ArchitectureKind::BetaVae, 64);
            spec.epochs = 30;
            spec.learning_rate = 1e-2;
            spec.weights.beta = beta;
            let a = build::<f64>(spec, 4).unwrap();
            let m = fit(a, &st, &tt, &sv, &tv).unwrap();
            m.history.epochs.last().unwrap().reconstruction.unwrap()
        };
        let low = run(0.1);
        let high = run(10.0);
        assert!(
            low <= high,
            "rec loss with beta 0.1 ({low}) should not exceed beta 10 ({high})"
        );
    }

    #[test]
    fn evaluation_rules() {
        // ideal separation: healthy below threshold, fault flagged twice
        let st = cluster(100, 4, 0.0, 0.5, 70);
        let tt = cluster(100, 4, 0.0, 0.5, 71);
        let sv = cluster(30, 4, 0.0, 0.5, 72);
        let tv = cluster(30, 4, 0.0, 0.5, 73);
        let mut spec = tiny_spec(ArchitectureKind::Helm, 74);
        spec.helm_sizes = vec![16, 40];
        let a = build::<f64>(spec, 4).unwrap();
        let m = fit(a, &st, &tt, &sv, &tv).unwrap();
        let healthy = cluster(50, 4, 0.0, 0.5, 75);
        let faulty = cluster(10, 4, 8.0, 0.1, 76);
        let e = evaluate(&m, &healthy, Some(&faulty)).unwrap();
        assert!(e.fault_detected, "clear fault must be detected");
        assert!(e.fpr < 100.0);
        assert_eq!(e.aligned_at_5, e.fpr < 5.0);
        // no faulty samples at all -> not aligned regardless of FPR
        let e2 = evaluate(&m, &healthy, None).unwrap();
        assert!(!e2.fault_detected && !e2.aligned_at_5 && !e2.aligned_at_1);
        // empty healthy segment is an error
        let empty = healthy.select_rows(&[]);
        assert!(evaluate(&m, &empty, None).is_err());
    }

    #[test]
    fn fpr_exactly_five_is_not_aligned() {
        // synthetic check of the strict cutoff without training: craft an
        // Evaluation through the public rule
        let e = Evaluation {
            fpr: 5.0,
            fault_detected: true,
            aligned_at_5: true && 5.0 < 5.0,
            aligned_at_1: true && 5.0 < 1.0,
        };
        assert!(!e.aligned_at_5);
    }

    #[test]
    fn fit_is_bitwise_reproducible() {
        let a = fit_tiny(ArchitectureKind::Hafas, 90);
        let b = fit_tiny(ArchitectureKind::Hafas, 90);
        assert_eq!(a.threshold, b.threshold);
        assert_eq!(a.elm.output_weights, b.elm.output_weights);
        assert_eq!(a.history, b.history);
        let test = cluster(40, 6, 0.0, 0.5, 91);
        let ea = evaluate(&a, &test, None).unwrap();
        let eb = evaluate(&b, &test, None).unwrap();
        assert_eq!(ea, eb);
    }

    #[test]
    fn bundle_round_trips_every_family() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [
            ArchitectureKind::Hafas,
            ArchitectureKind::BetaVaeDw,
            ArchitectureKind::Helm,
        ] {
            let m = fit_tiny(kind, 17);
            let path = dir.path().join(format!("{kind}.model"));
            m.save(&path).unwrap();
            let loaded = TrainedModel::<f64>::load(&path).unwrap();
            assert_eq!(loaded.spec, m.spec);
            assert_eq!(loaded.threshold, m.threshold);
            let test = cluster(20, 6, 0.1, 0.5, 18);
            assert_eq!(
                m.residuals(&test).unwrap(),
                loaded.residuals(&test).unwrap()
            );
        }
    }
}
