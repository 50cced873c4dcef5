//! Fleet-level experiment harness: the synthetic fleet generator, the
//! all-pairs training sweep, MMD-based source selection and the report
//! tables.
//!
//! The synthetic fleet stands in for a proprietary dataset. Every unit's
//! channels are a smooth function of a low-dimensional latent operating
//! state (per-unit regime center plus a seasonal sinusoid plus noise); the
//! generative family is identical across units and only the regime
//! parameters differ. Target units carry an injected fault: a persistent
//! drift on a channel subset starting at the detection row. The seasonal
//! period is on the order of the full observation span, so a target's
//! two-month training window covers only part of the cycle and is not
//! representative of later operation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_normalization, clean, fit_normalization, fit_normalization_pooled, split_dataset,
    SplitSpec, Splits, TimePoint, UnitDataset, Window,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::stats::median;
use crate::tensor::Tensor;
use crate::trainer::{build, evaluate, fit, ArchitectureKind, ArchitectureSpec};

// ---------------------------------------------------------------------------
// Fleet description
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitRole {
    Source,
    Target,
}

#[derive(Clone, Debug)]
pub struct UnitInfo {
    pub unit_id: String,
    pub role: UnitRole,
    /// Detection row in the cleaned dataset (targets only).
    pub detection: Option<TimePoint>,
    pub csv_path: Option<PathBuf>,
}

pub struct Fleet<F> {
    pub units: Vec<(UnitInfo, UnitDataset<F>)>,
}

impl<F: Scalar> Fleet<F> {
    pub fn targets(&self) -> impl Iterator<Item = &(UnitInfo, UnitDataset<F>)> {
        self.units.iter().filter(|(i, _)| i.role == UnitRole::Target)
    }

    pub fn sources(&self) -> impl Iterator<Item = &(UnitInfo, UnitDataset<F>)> {
        self.units.iter().filter(|(i, _)| i.role == UnitRole::Source)
    }

    pub fn unit(&self, id: &str) -> Result<&(UnitInfo, UnitDataset<F>)> {
        self.units
            .iter()
            .find(|(i, _)| i.unit_id == id)
            .ok_or_else(|| Error::Data(format!("unknown unit '{id}'")))
    }

    /// Writes one CSV per unit plus a manifest naming paths, roles and
    /// detection rows.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = csv::Writer::from_path(dir.join("fleet.csv"))?;
        manifest.write_record(["unit_id", "path", "role", "detection_row"])?;
        for (info, ds) in &self.units {
            let file = format!("{}.csv", info.unit_id);
            crate::data::write_csv(ds, &dir.join(&file))?;
            let det = match info.detection {
                Some(TimePoint::Row(r)) => r.to_string(),
                Some(TimePoint::Stamp(s)) => s.to_string(),
                None => String::new(),
            };
            let role = match info.role {
                UnitRole::Source => "source",
                UnitRole::Target => "target",
            };
            manifest.write_record([info.unit_id.as_str(), &file, role, &det])?;
        }
        manifest.flush()?;
        Ok(())
    }

    /// Loads a fleet from a manifest; paths are resolved relative to the
    /// manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Fleet<F>> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::Reader::from_path(manifest_path)?;
        let mut units = Vec::new();
        for record in reader.records() {
            let r = record?;
            let unit_id = r
                .get(0)
                .ok_or_else(|| Error::Data("manifest row missing unit_id".into()))?
                .to_string();
            let path = dir.join(r.get(1).unwrap_or_default());
            let role = match r.get(2).unwrap_or_default() {
                "source" => UnitRole::Source,
                "target" => UnitRole::Target,
                other => return Err(Error::Data(format!("bad role '{other}' in manifest"))),
            };
            let det = r.get(3).unwrap_or_default().trim();
            let detection = if det.is_empty() {
                None
            } else {
                Some(TimePoint::Row(det.parse().map_err(|_| {
                    Error::Data(format!("bad detection row '{det}' in manifest"))
                })?))
            };
            if role == UnitRole::Target && detection.is_none() {
                return Err(Error::Data(format!(
                    "target unit {unit_id} has no detection row"
                )));
            }
            let ds = crate::data::read_csv(&path, unit_id.clone())?;
            units.push((
                UnitInfo {
                    unit_id,
                    role,
                    detection,
                    csv_path: Some(path),
                },
                ds,
            ));
        }
        if units.is_empty() {
            return Err(Error::Data("manifest lists no units".into()));
        }
        Ok(Fleet { units })
    }
}

// ---------------------------------------------------------------------------
// Synthetic fleet generator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Fault onset as a fraction of the unit's rows; the detection row.
    pub onset_fraction: f64,
    /// Number of affected channels.
    pub channels: usize,
    /// Persistent additive drift on the affected channels after onset,
    /// ramping in over 5% of the span and then holding, in raw channel
    /// units (alternating sign across the affected channels).
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFleetConfig {
    pub units: usize,
    pub targets: usize,
    pub rows_per_unit: usize,
    pub channels: usize,
    /// Spread of per-unit regime centers in latent space.
    pub regime_spread: f64,
    /// Seasonal sinusoid amplitude in latent space. The period is on the
    /// order of the observation span, so a two-month window never sees the
    /// full cycle.
    pub seasonal_amplitude: f64,
    /// Amplitude of the fast operating cycle (load changes); its period is
    /// short enough that even the two-month window covers the full swing.
    pub fast_amplitude: f64,
    /// Fast-cycle period in rows.
    pub fast_period_rows: f64,
    /// Seasonal modulation of the fast-cycle amplitude: the swing scales by
    /// (1 + gain·sin(year phase)), so a window-fitted scale goes stale as
    /// the season turns.
    pub seasonal_gain: f64,
    /// Channel noise scale.
    pub noise_scale: f64,
    /// Weight of the nonlinear basis terms relative to the linear ones;
    /// higher values make units' seasonal responses less parallel and the
    /// alignment task harder.
    pub nonlinearity: f64,
    pub fault: FaultSpec,
    pub seed: u64,
}

impl Default for SyntheticFleetConfig {
    fn default() -> Self {
        SyntheticFleetConfig {
            units: 20,
            targets: 2,
            rows_per_unit: 8000,
            channels: 24,
            regime_spread: 2.0,
            seasonal_amplitude: 0.8,
            fast_amplitude: 1.2,
            fast_period_rows: 96.0,
            seasonal_gain: 0.4,
            noise_scale: 0.1,
            nonlinearity: 0.6,
            fault: FaultSpec {
                onset_fraction: 0.75,
                channels: 6,
                magnitude: 1.2,
            },
            seed: 0,
        }
    }
}

const LATENT_DIM: usize = 3;
const BASIS_DIM: usize = 6;

/// Per-unit generator parameters; exposed so tests can compare units in
/// generator space and craft controlled fleets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitParams {
    pub regime: [f64; LATENT_DIM],
    /// Seasonal swing along the fleet-shared direction; the phase is nearly
    /// common across units (one hemisphere, one year).
    pub seasonal_amplitude: f64,
    pub period_rows: f64,
    pub seasonal_phase: f64,
    pub fast_amplitude: f64,
    pub fast_period_rows: f64,
    pub fast_phases: [f64; LATENT_DIM],
    pub seasonal_gain: f64,
    pub noise_scale: f64,
    pub noise_seed: u64,
}

/// Fleet-wide generative family: a fixed nonlinear channel mixing shared by
/// every unit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FleetBasis {
    pub mixing: Vec<f64>,  // (channels-2) x BASIS_DIM
    pub offsets: Vec<f64>, // channels
    pub channels: usize,
    pub nonlinearity: f64,
    /// Unit vector in latent space along which the seasonal drift moves;
    /// shared by the whole fleet (the season is one physical driver).
    pub seasonal_dir: [f64; LATENT_DIM],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub basis: FleetBasis,
    pub units: Vec<UnitParams>,
    pub fault_channels: Vec<Vec<usize>>, // per target, affected channel indices
}

fn basis_features(s: &[f64; LATENT_DIM], nonlinearity: f64) -> [f64; BASIS_DIM] {
    [
        s[0],
        s[1],
        s[2],
        nonlinearity * (s[0] + s[1]).sin(),
        nonlinearity * 0.5 * s[1] * s[2],
        nonlinearity * (0.7 * s[0]).tanh(),
    ]
}

/// Generates one unit's dataset from explicit parameters. Channels 0 and 1
/// track the first two latent coordinates directly (the "representative"
/// channels used for pair selection); the rest mix the nonlinear basis.
pub fn generate_unit<F: Scalar>(
    basis: &FleetBasis,
    params: &UnitParams,
    rows: usize,
    unit_id: &str,
    fault: Option<(usize, &[usize], f64)>, // (onset_row, channels, magnitude)
) -> UnitDataset<F> {
    let c = basis.channels;
    // healthy dynamic part of every channel, one pass
    let mut dynamic = vec![0.0f64; rows * c];
    for t in 0..rows {
        let mut s = [0.0f64; LATENT_DIM];
        let slow = 2.0 * std::f64::consts::PI * t as f64 / params.period_rows;
        let fast = 2.0 * std::f64::consts::PI * t as f64 / params.fast_period_rows;
        let year = (slow + params.seasonal_phase).sin();
        let season = params.seasonal_amplitude * year;
        let swing = params.fast_amplitude * (1.0 + params.seasonal_gain * year);
        for k in 0..LATENT_DIM {
            s[k] = params.regime[k]
                + season * basis.seasonal_dir[k]
                + swing * (fast + params.fast_phases[k]).sin();
        }
        let g = basis_features(&s, basis.nonlinearity);
        let row = &mut dynamic[t * c..(t + 1) * c];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = if j < 2 {
                // representative channels track the latent state directly
                s[j]
            } else {
                let m = &basis.mixing[(j - 2) * BASIS_DIM..(j - 1) * BASIS_DIM];
                m.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
            };
        }
    }
    let ramp_rows = (rows as f64 * 0.05).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
    let mut data_rows: Vec<Vec<F>> = Vec::with_capacity(rows);
    for t in 0..rows {
        let mut row: Vec<f64> = (0..c)
            .map(|j| {
                let noise: f64 = rng.sample(StandardNormal);
                let scale = if j < 2 { 0.25 } else { 1.0 };
                basis.offsets[j] + dynamic[t * c + j] + scale * params.noise_scale * noise
            })
            .collect();
        if let Some((onset, channels, magnitude)) = fault {
            if t >= onset {
                let ramp = ((t - onset) as f64 / ramp_rows).min(1.0);
                for (pos, &ch) in channels.iter().enumerate() {
                    let dir = if pos % 2 == 0 { 1.0 } else { -1.0 };
                    row[ch] += dir * magnitude * ramp;
                }
            }
        }
        data_rows.push(row.into_iter().map(F::cast).collect());
    }
    UnitDataset::new(unit_id, channel_names(c), data_rows, None).expect("generator invariants")
}

pub fn channel_names(c: usize) -> Vec<String> {
    (0..c).map(|j| format!("c{j:02}")).collect()
}

/// Default representative channels for MMD pair selection.
pub const REPRESENTATIVE_CHANNELS: (&str, &str) = ("c00", "c01");

pub fn generate_fleet<F: Scalar>(
    config: &SyntheticFleetConfig,
) -> Result<(Fleet<F>, GeneratorMeta)> {
    if config.units < 2 || config.targets == 0 || config.targets >= config.units {
        return Err(Error::Config(
            "fleet needs at least one target and one source".into(),
        ));
    }
    if config.channels < 4 {
        return Err(Error::Config("fleet needs at least 4 channels".into()));
    }
    if config.noise_scale <= 0.0 && config.fault.magnitude <= 0.0 && config.seasonal_amplitude <= 0.0
    {
        return Err(Error::Config(
            "degenerate fleet: zero noise, zero drift and zero seasonality".into(),
        ));
    }
    if !(config.fault.onset_fraction > 0.0 && config.fault.onset_fraction < 1.0) {
        return Err(Error::Config("fault onset fraction must lie in (0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &["fleet_basis"]));
    let c = config.channels;
    let mixing: Vec<f64> = (0..(c - 2) * BASIS_DIM)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let offsets: Vec<f64> = (0..c).map(|_| rng.random_range(2.0..4.0)).collect();
    let mut seasonal_dir = [
        rng.random_range(-1.0..1.0f64),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let norm = seasonal_dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    for v in seasonal_dir.iter_mut() {
        *v /= norm;
    }
    let basis = FleetBasis {
        mixing,
        offsets,
        channels: c,
        nonlinearity: config.nonlinearity,
        seasonal_dir,
    };

    let mut units = Vec::new();
    let mut unit_params = Vec::new();
    let mut fault_channels = Vec::new();
    for u in 0..config.units {
        let unit_id = format!("unit{u:02}");
        let mut urng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &["unit", &unit_id]));
        let params = UnitParams {
            regime: [
                urng.random_range(-config.regime_spread..config.regime_spread),
                urng.random_range(-config.regime_spread..config.regime_spread),
                urng.random_range(-config.regime_spread..config.regime_spread),
            ],
            seasonal_amplitude: config.seasonal_amplitude * urng.random_range(0.85..1.15),
            period_rows: config.rows_per_unit as f64 * urng.random_range(0.95..1.1),
            seasonal_phase: urng.random_range(-0.25..0.25),
            fast_amplitude: config.fast_amplitude * urng.random_range(0.8..1.2),
            fast_period_rows: config.fast_period_rows * urng.random_range(0.8..1.25),
            fast_phases: [
                urng.random_range(0.0..std::f64::consts::TAU),
                urng.random_range(0.0..std::f64::consts::TAU),
                urng.random_range(0.0..std::f64::consts::TAU),
            ],
            seasonal_gain: config.seasonal_gain * urng.random_range(0.85..1.15),
            noise_scale: config.noise_scale,
            noise_seed: seed::derive(config.seed, &["noise", &unit_id]),
        };
        let is_target = u < config.targets;
        let (info, ds) = if is_target {
            let onset = (config.rows_per_unit as f64 * config.fault.onset_fraction) as usize;
            let n_fault = config.fault.channels.min(c - 2);
            let mut chans: Vec<usize> = (2..c).collect();
            // seeded pick of affected channels
            for i in (1..chans.len()).rev() {
                let j = urng.random_range(0..=i);
                chans.swap(i, j);
            }
            chans.truncate(n_fault);
            chans.sort_unstable();
            let ds = generate_unit::<F>(
                &basis,
                &params,
                config.rows_per_unit,
                &unit_id,
                Some((onset, &chans, config.fault.magnitude)),
            );
            fault_channels.push(chans);
            (
                UnitInfo {
                    unit_id: unit_id.clone(),
                    role: UnitRole::Target,
                    detection: Some(TimePoint::Row(onset)),
                    csv_path: None,
                },
                ds,
            )
        } else {
            let ds = generate_unit::<F>(&basis, &params, config.rows_per_unit, &unit_id, None);
            (
                UnitInfo {
                    unit_id: unit_id.clone(),
                    role: UnitRole::Source,
                    detection: None,
                    csv_path: None,
                },
                ds,
            )
        };
        unit_params.push(params);
        units.push((info, ds));
    }
    Ok((
        Fleet { units },
        GeneratorMeta {
            basis,
            units: unit_params,
            fault_channels,
        },
    ))
}

/// Euclidean distance between two units' regime centers in generator space.
pub fn regime_distance(a: &UnitParams, b: &UnitParams) -> f64 {
    a.regime
        .iter()
        .zip(&b.regime)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy
// ---------------------------------------------------------------------------

/// Unbiased squared-MMD estimator with a Gaussian kernel, clamped at zero.
pub fn mmd<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, bandwidth: F) -> Result<F> {
    if bandwidth <= F::zero() {
        return Err(Error::Config("MMD bandwidth must be positive".into()));
    }
    let (m, n) = (a.nrows(), b.nrows());
    if m < 2 || n < 2 {
        return Err(Error::Data("MMD needs at least two samples per set".into()));
    }
    let two = F::cast(2.0);
    let denom = two * bandwidth * bandwidth;
    let k = |x: &[F], y: &[F]| -> F {
        let d2: F = x
            .iter()
            .zip(y)
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        (-d2 / denom).exp()
    };
    let mut kxx = F::zero();
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += k(a.row(i), a.row(j));
            }
        }
    }
    let mut kyy = F::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += k(b.row(i), b.row(j));
            }
        }
    }
    let mut kxy = F::zero();
    for i in 0..m {
        for j in 0..n {
            kxy += k(a.row(i), b.row(j));
        }
    }
    let mf = F::from_usize_(m);
    let nf = F::from_usize_(n);
    let est = kxx / (mf * (mf - F::one())) + kyy / (nf * (nf - F::one()))
        - two * kxy / (mf * nf);
    Ok(est.max(F::zero()))
}

/// Median pairwise distance over the pooled sample; the usual
/// parameter-free bandwidth choice.
pub fn median_heuristic_bandwidth<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<F> {
    let pooled = a.vstack(b)?;
    let n = pooled.nrows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(pooled.row_distance(i, j));
        }
    }
    let med = median(&dists)?;
    if med <= F::zero() {
        // identical points; any positive bandwidth gives MMD 0
        return Ok(F::one());
    }
    Ok(med)
}

/// Rows used per unit when estimating MMD (kernel sums are quadratic).
pub const MMD_SAMPLE_CAP: usize = 2000;

fn subsample_rows<F: Scalar>(t: &Tensor<F>, cap: usize, seed_val: u64) -> Tensor<F> {
    if t.nrows() <= cap {
        return t.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed_val);
    let idx = rand::seq::index::sample(&mut rng, t.nrows(), cap).into_vec();
    t.select_rows(&idx)
}

/// Picks the source whose two-channel training-window marginal is closest
/// to the target's in MMD; ties break toward the lower unit id. Returns the
/// chosen id plus every candidate's statistic.
pub fn select_source_by_mmd<F: Scalar>(
    fleet: &Fleet<F>,
    target_id: &str,
    channels: (&str, &str),
    target_train_window: Window,
    source_train_window: Option<Window>,
    seed_val: u64,
) -> Result<(String, Vec<(String, f64)>)> {
    let (_, target_ds) = fleet.unit(target_id)?;
    let target_clean = clean(target_ds)?;
    let t_end = resolve_window(&target_clean, target_train_window)?;
    let t_marg = target_clean
        .slice_rows(0..t_end)
        .marginal2(channels.0, channels.1)?;
    let t_marg = subsample_rows(&t_marg, MMD_SAMPLE_CAP, seed::derive(seed_val, &["mmd", target_id]));

    let mut sources: Vec<&(UnitInfo, UnitDataset<F>)> = fleet.sources().collect();
    sources.sort_by(|a, b| a.0.unit_id.cmp(&b.0.unit_id));
    if sources.is_empty() {
        return Err(Error::Data("no source units in fleet".into()));
    }
    let mut stats = Vec::with_capacity(sources.len());
    let mut best: Option<(String, f64)> = None;
    for (info, ds) in sources {
        let s_clean = clean(ds)?;
        let s_end = match source_train_window {
            Some(w) => resolve_window(&s_clean, w)?,
            None => s_clean.nrows(),
        };
        let s_marg = s_clean
            .slice_rows(0..s_end)
            .marginal2(channels.0, channels.1)?;
        let s_marg = subsample_rows(
            &s_marg,
            MMD_SAMPLE_CAP,
            seed::derive(seed_val, &["mmd", &info.unit_id]),
        );
        let bw = median_heuristic_bandwidth(&t_marg, &s_marg)?;
        let value = mmd(&t_marg, &s_marg, bw)?.as_f64();
        stats.push((info.unit_id.clone(), value));
        let better = match &best {
            None => true,
            Some((_, b)) => value < *b, // strict: ties keep the earlier (lower) id
        };
        if better {
            best = Some((info.unit_id.clone(), value));
        }
    }
    Ok((best.unwrap().0, stats))
}

fn resolve_window<F: Scalar>(ds: &UnitDataset<F>, w: Window) -> Result<usize> {
    match w {
        Window::Rows(r) => {
            if r == 0 || r > ds.nrows() {
                Err(Error::Data(format!(
                    "window of {r} rows invalid for {} rows",
                    ds.nrows()
                )))
            } else {
                Ok(r)
            }
        }
        Window::Seconds(_) => {
            let spec = SplitSpec {
                train_window: w,
                validation_fraction: 0.06,
                blackout: Window::Rows(0),
                detection_time: None,
            };
            crate::data::split(ds, &spec).map(|idx| idx.validation.end)
        }
    }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NormalizationMode {
    PerUnit,
    Pooled,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub architectures: Vec<ArchitectureKind>,
    /// Template spec; per-run seed and kind are filled in by the sweep.
    pub template: ArchitectureSpec,
    /// Target training window ("two months").
    pub target_train_window: Window,
    /// Source training window; None = the source's full span.
    pub source_train_window: Option<Window>,
    pub validation_fraction: f64,
    pub blackout: Window,
    pub normalization: NormalizationMode,
    pub master_seed: u64,
    pub workers: usize,
}

impl SweepConfig {
    pub fn new(architectures: Vec<ArchitectureKind>, template: ArchitectureSpec) -> Self {
        SweepConfig {
            architectures,
            template,
            target_train_window: Window::Rows(1333),
            source_train_window: None,
            validation_fraction: 0.06,
            blackout: Window::Rows(0),
            normalization: NormalizationMode::PerUnit,
            master_seed: 0,
            workers: 0, // 0 = rayon default
        }
    }
}

/// One (source, target, architecture) outcome; the atom of the report
/// tables. Runtime is measured but excluded from the serialized record so
/// that result files are byte-reproducible under a fixed master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub target_id: String,
    pub source_id: String,
    pub architecture: ArchitectureKind,
    pub seed: u64,
    /// None when the run failed (divergence, collapse); such runs count as
    /// not aligned.
    pub fpr: Option<f64>,
    pub fault_detected: bool,
    pub aligned_at_5: bool,
    pub aligned_at_1: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub runtime_ms: u64,
}

/// Prepared (normalized, split) data for one unit under one run.
struct PreparedUnit<F> {
    splits: Splits<F>,
}

fn prepare_unit<F: Scalar>(
    ds: &UnitDataset<F>,
    detection: Option<TimePoint>,
    train_window: Window,
    validation_fraction: f64,
    blackout: Window,
    peer_train: Option<&UnitDataset<F>>, // pooled normalization partner
) -> Result<PreparedUnit<F>> {
    let cleaned = clean(ds)?;
    let spec = SplitSpec {
        train_window,
        validation_fraction,
        blackout,
        detection_time: detection,
    };
    let raw_splits = split_dataset(&cleaned, &spec)?;
    let params = match peer_train {
        None => fit_normalization(&raw_splits.train)?,
        Some(peer) => fit_normalization_pooled(&[&raw_splits.train, peer])?,
    };
    let norm = |d: &UnitDataset<F>| -> Result<UnitDataset<F>> {
        if d.nrows() == 0 {
            Ok(d.clone())
        } else {
            apply_normalization(d, &params)
        }
    };
    Ok(PreparedUnit {
        splits: Splits {
            indices: raw_splits.indices.clone(),
            train: norm(&raw_splits.train)?,
            validation: norm(&raw_splits.validation)?,
            healthy_test: norm(&raw_splits.healthy_test)?,
            faulty_test: norm(&raw_splits.faulty_test)?,
        },
    })
}

/// Trains and evaluates a single (source, target, architecture) triple.
pub fn run_pair<F: Scalar>(
    source: &UnitDataset<F>,
    target: &UnitDataset<F>,
    detection: Option<TimePoint>,
    kind: ArchitectureKind,
    cfg: &SweepConfig,
    run_seed: u64,
) -> Result<crate::trainer::Evaluation> {
    let (_, eval) = run_pair_model(source, target, detection, kind, cfg, run_seed)?;
    eval.ok_or_else(|| Error::EmptyDataset("healthy test segment".into()))
}

/// Like [`run_pair`] but hands back the trained model; the evaluation is
/// `None` when the target has no healthy test rows.
pub fn run_pair_model<F: Scalar>(
    source: &UnitDataset<F>,
    target: &UnitDataset<F>,
    detection: Option<TimePoint>,
    kind: ArchitectureKind,
    cfg: &SweepConfig,
    run_seed: u64,
) -> Result<(crate::trainer::TrainedModel<F>, Option<crate::trainer::Evaluation>)> {
    let target_prep = prepare_unit(
        target,
        detection,
        cfg.target_train_window,
        cfg.validation_fraction,
        cfg.blackout,
        None,
    )?;
    let source_window = match cfg.source_train_window {
        Some(w) => w,
        None => Window::Rows(clean(source)?.nrows()),
    };
    let source_prep = match cfg.normalization {
        NormalizationMode::PerUnit => prepare_unit(
            source,
            None,
            source_window,
            cfg.validation_fraction,
            cfg.blackout,
            None,
        )?,
        NormalizationMode::Pooled => {
            // fit on the pooled training rows of both units
            let target_clean = clean(target)?;
            let t_spec = SplitSpec {
                train_window: cfg.target_train_window,
                validation_fraction: cfg.validation_fraction,
                blackout: cfg.blackout,
                detection_time: detection,
            };
            let t_train = split_dataset(&target_clean, &t_spec)?.train;
            prepare_unit(
                source,
                None,
                source_window,
                cfg.validation_fraction,
                cfg.blackout,
                Some(&t_train),
            )?
        }
    };
    // threshold hygiene: validation rows never overlap training rows
    debug_assert!(
        target_prep.splits.indices.train.end <= target_prep.splits.indices.validation.start
    );

    let mut spec = cfg.template.sanitized_for(kind);
    spec.seed = run_seed;
    let assembly = build::<F>(spec, target.nchannels())?;
    let model = fit(
        assembly,
        &target_prep_tensor(&source_prep.splits.train)?,
        &target_prep_tensor(&target_prep.splits.train)?,
        &target_prep_tensor(&source_prep.splits.validation)?,
        &target_prep_tensor(&target_prep.splits.validation)?,
    )?;
    let evaluation = if target_prep.splits.healthy_test.nrows() > 0 {
        let healthy = target_prep_tensor(&target_prep.splits.healthy_test)?;
        let faulty = if target_prep.splits.faulty_test.nrows() > 0 {
            Some(target_prep_tensor(&target_prep.splits.faulty_test)?)
        } else {
            None
        };
        Some(evaluate(&model, &healthy, faulty.as_ref())?)
    } else {
        None
    };
    Ok((model, evaluation))
}

fn target_prep_tensor<F: Scalar>(d: &UnitDataset<F>) -> Result<Tensor<F>> {
    d.to_tensor()
}

/// Full sweep: every (target, source, architecture) triple, with
/// deterministic per-run seeds derived from the master seed. Individual
/// failures are recorded and the sweep continues; output order is fixed by
/// (target, source, architecture) regardless of scheduling.
pub fn sweep<F: Scalar>(fleet: &Fleet<F>, cfg: &SweepConfig) -> Vec<PairResult> {
    let mut jobs = Vec::new();
    for (t_info, t_ds) in fleet.targets() {
        for (s_info, s_ds) in fleet.sources() {
            for &kind in &cfg.architectures {
                jobs.push((t_info, t_ds, s_info, s_ds, kind));
            }
        }
    }
    let run = |(t_info, t_ds, s_info, s_ds, kind): &(
        &UnitInfo,
        &UnitDataset<F>,
        &UnitInfo,
        &UnitDataset<F>,
        ArchitectureKind,
    )| {
        let run_seed = seed::derive(
            cfg.master_seed,
            &[&t_info.unit_id, &s_info.unit_id, kind.name()],
        );
        let started = Instant::now();
        let outcome = run_pair(s_ds, t_ds, t_info.detection, *kind, cfg, run_seed);
        let runtime_ms = started.elapsed().as_millis() as u64;
        match outcome {
            Ok(eval) => PairResult {
                target_id: t_info.unit_id.clone(),
                source_id: s_info.unit_id.clone(),
                architecture: *kind,
                seed: run_seed,
                fpr: Some(eval.fpr),
                fault_detected: eval.fault_detected,
                aligned_at_5: eval.aligned_at_5,
                aligned_at_1: eval.aligned_at_1,
                error: None,
                runtime_ms,
            },
            Err(e) => PairResult {
                target_id: t_info.unit_id.clone(),
                source_id: s_info.unit_id.clone(),
                architecture: *kind,
                seed: run_seed,
                fpr: None,
                fault_detected: false,
                aligned_at_5: false,
                aligned_at_1: false,
                error: Some(e.to_string()),
                runtime_ms,
            },
        }
    };
    let mut results: Vec<PairResult> = if cfg.workers == 1 {
        jobs.iter().map(run).collect()
    } else if cfg.workers == 0 {
        jobs.par_iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("thread pool");
        pool.install(|| jobs.par_iter().map(run).collect())
    };
    results.sort_by(|a, b| {
        (&a.target_id, &a.source_id, a.architecture.name()).cmp(&(
            &b.target_id,
            &b.source_id,
            b.architecture.name(),
        ))
    });
    results
}

/// Serializes results as JSON lines in their deterministic order.
pub fn results_to_jsonl(results: &[PairResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).expect("result serialization"));
        out.push('\n');
    }
    out
}

pub fn results_from_jsonl(text: &str) -> Result<Vec<PairResult>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("bad results line: {e}")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Aggregated sweep tables: aligned-pair counts per target and architecture
/// (with mean aligned ratios at the 5% and 1% cutoffs), best FPR among
/// fault-detecting models, and the MMD-selected-pair table with empty cells
/// for missed faults.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub architectures: Vec<ArchitectureKind>,
    pub targets: Vec<String>,
    pub source_count: usize,
    /// aligned_counts[target][arch] at the 5% cutoff.
    pub aligned_counts_5: Vec<Vec<usize>>,
    pub aligned_counts_1: Vec<Vec<usize>>,
    /// Mean over targets of aligned/sources, in percent, per architecture.
    pub ratio_5: Vec<f64>,
    pub ratio_1: Vec<f64>,
    /// best_fpr[target][arch]: minimum FPR among fault-detecting runs.
    pub best_fpr: Vec<Vec<Option<f64>>>,
    /// MMD-selected source per target, when a selection was provided.
    pub selected_sources: Option<Vec<(String, String)>>,
    /// mmd_fpr[target][arch]: FPR of the selected pair; None = missed fault.
    pub mmd_fpr: Option<Vec<Vec<Option<f64>>>>,
    /// Per architecture, number of selected pairs with FPR below 5%.
    pub mmd_aligned_count: Option<Vec<usize>>,
}

pub fn report(results: &[PairResult], selection: Option<&[(String, String)]>) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Data("no results to report".into()));
    }
    let mut architectures: Vec<ArchitectureKind> = Vec::new();
    for r in results {
        if !architectures.contains(&r.architecture) {
            architectures.push(r.architecture);
        }
    }
    let mut targets: Vec<String> = Vec::new();
    let mut sources: Vec<String> = Vec::new();
    for r in results {
        if !targets.contains(&r.target_id) {
            targets.push(r.target_id.clone());
        }
        if !sources.contains(&r.source_id) {
            sources.push(r.source_id.clone());
        }
    }
    targets.sort();
    let source_count = sources.len();

    let find = |t: &str, s: &str, k: ArchitectureKind| -> Option<&PairResult> {
        results
            .iter()
            .find(|r| r.target_id == t && r.source_id == s && r.architecture == k)
    };

    let mut aligned_counts_5 = vec![vec![0usize; architectures.len()]; targets.len()];
    let mut aligned_counts_1 = vec![vec![0usize; architectures.len()]; targets.len()];
    let mut best_fpr: Vec<Vec<Option<f64>>> =
        vec![vec![None; architectures.len()]; targets.len()];
    for r in results {
        let ti = targets.iter().position(|t| t == &r.target_id).unwrap();
        let ai = architectures.iter().position(|a| *a == r.architecture).unwrap();
        if r.aligned_at_5 {
            aligned_counts_5[ti][ai] += 1;
        }
        if r.aligned_at_1 {
            aligned_counts_1[ti][ai] += 1;
        }
        if r.fault_detected {
            if let Some(f) = r.fpr {
                let cell = &mut best_fpr[ti][ai];
                if cell.map_or(true, |b| f < b) {
                    *cell = Some(f);
                }
            }
        }
    }
    let ratio = |counts: &Vec<Vec<usize>>| -> Vec<f64> {
        (0..architectures.len())
            .map(|ai| {
                let mean: f64 = counts
                    .iter()
                    .map(|row| row[ai] as f64 / source_count as f64)
                    .sum::<f64>()
                    / targets.len() as f64;
                100.0 * mean
            })
            .collect()
    };
    let ratio_5 = ratio(&aligned_counts_5);
    let ratio_1 = ratio(&aligned_counts_1);

    let (selected_sources, mmd_fpr, mmd_aligned_count) = match selection {
        None => (None, None, None),
        Some(sel) => {
            let mut table = vec![vec![None; architectures.len()]; targets.len()];
            let mut counts = vec![0usize; architectures.len()];
            for (t, s) in sel {
                let ti = match targets.iter().position(|x| x == t) {
                    Some(i) => i,
                    None => continue,
                };
                for (ai, &k) in architectures.iter().enumerate() {
                    if let Some(r) = find(t, s, k) {
                        if r.fault_detected {
                            table[ti][ai] = r.fpr;
                            if r.fpr.map_or(false, |f| f < 5.0) {
                                counts[ai] += 1;
                            }
                        }
                    }
                }
            }
            (Some(sel.to_vec()), Some(table), Some(counts))
        }
    };

    Ok(Report {
        architectures,
        targets,
        source_count,
        aligned_counts_5,
        aligned_counts_1,
        ratio_5,
        ratio_1,
        best_fpr,
        selected_sources,
        mmd_fpr,
        mmd_aligned_count,
    })
}

impl Report {
    fn header(&self) -> String {
        let mut h = String::from("unit");
        for a in &self.architectures {
            h.push(',');
            h.push_str(a.name());
        }
        h.push('\n');
        h
    }

    /// Aligned-pair counts with the mean-ratio rows.
    pub fn aligned_counts_csv(&self) -> String {
        let mut out = self.header();
        for (ti, t) in self.targets.iter().enumerate() {
            out.push_str(t);
            for c in &self.aligned_counts_5[ti] {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out.push_str("R%(5%)");
        for r in &self.ratio_5 {
            out.push_str(&format!(",{r:.1}"));
        }
        out.push('\n');
        out.push_str("R%(1%)");
        for r in &self.ratio_1 {
            out.push_str(&format!(",{r:.1}"));
        }
        out.push('\n');
        out
    }

    /// Lowest FPR among fault-detecting models, per unit and architecture.
    pub fn best_fpr_csv(&self) -> String {
        let mut out = self.header();
        for (ti, t) in self.targets.iter().enumerate() {
            out.push_str(t);
            for cell in &self.best_fpr[ti] {
                match cell {
                    Some(f) => out.push_str(&format!(",{f:.2}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// FPR of the MMD-selected pair; empty cells are missed faults.
    pub fn mmd_selection_csv(&self) -> Option<String> {
        let table = self.mmd_fpr.as_ref()?;
        let counts = self.mmd_aligned_count.as_ref()?;
        let mut out = self.header();
        for (ti, t) in self.targets.iter().enumerate() {
            out.push_str(t);
            for cell in &table[ti] {
                match cell {
                    Some(f) => out.push_str(&format!(",{f:.2}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out.push_str("#AP");
        for c in counts {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_config(seed_val: u64) -> SyntheticFleetConfig {
        SyntheticFleetConfig {
            units: 4,
            targets: 1,
            rows_per_unit: 700,
            channels: 8,
            regime_spread: 2.0,
            seasonal_amplitude: 1.0,
            fast_amplitude: 0.8,
            fast_period_rows: 60.0,
            seasonal_gain: 0.4,
            noise_scale: 0.08,
            nonlinearity: 0.3,
            fault: FaultSpec {
                onset_fraction: 0.8,
                channels: 3,
                magnitude: 1.5,
            },
            seed: seed_val,
        }
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let v = mmd(&a, &a, 1.0).unwrap();
        assert_eq!(v, 0.0); // unbiased estimator is <= 0 and clamps
    }

    #[test]
    fn mmd_of_distant_point_masses_approaches_two() {
        let a = Tensor::full(&[20, 2], 0.0f64);
        let b = Tensor::full(&[20, 2], 1000.0f64);
        let v = mmd(&a, &b, 1.0).unwrap();
        assert_relative_eq!(v, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn mmd_is_symmetric_and_respects_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = |rng: &mut ChaCha8Rng, n: usize, shift: f64| -> Tensor<f64> {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    vec![
                        rng.sample::<f64, _>(StandardNormal) + shift,
                        rng.sample::<f64, _>(StandardNormal),
                    ]
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let a = draw(&mut rng, 250, 0.0);
        let b = draw(&mut rng, 250, 0.0);
        let bw = median_heuristic_bandwidth(&a, &b).unwrap();
        let ab = mmd(&a, &b, bw).unwrap();
        let ba = mmd(&b, &a, bw).unwrap();
        assert_relative_eq!(ab, ba, epsilon = 1e-12);

        // permutation null band: the observed statistic on same-distribution
        // samples should not exceed the upper tail of the permutation null
        let pooled = a.vstack(&b).unwrap();
        let n = a.nrows();
        let mut exceed = 0usize;
        let perms = 200;
        for _ in 0..perms {
            let idx = rand::seq::index::sample(&mut rng, pooled.nrows(), pooled.nrows()).into_vec();
            let pa = pooled.select_rows(&idx[..n]);
            let pb = pooled.select_rows(&idx[n..]);
            if mmd(&pa, &pb, bw).unwrap() >= ab {
                exceed += 1;
            }
        }
        let p_value = exceed as f64 / perms as f64;
        assert!(p_value > 0.05, "same-distribution MMD rejected: p = {p_value}");

        // and a clearly shifted alternative is detected
        let c = draw(&mut rng, 250, 3.0);
        let bw2 = median_heuristic_bandwidth(&a, &c).unwrap();
        assert!(mmd(&a, &c, bw2).unwrap() > ab * 10.0);
    }

    #[test]
    fn generator_units_share_the_family() {
        // identical regime parameters, different noise seeds: the two-sample
        // statistic on a marginal stays inside the permutation null band
        let cfg = small_config(3);
        let (_, meta) = generate_fleet::<f64>(&cfg).unwrap();
        let params_a = meta.units[1].clone();
        let mut params_b = params_a.clone();
        params_b.noise_seed = 12345;
        let a = generate_unit::<f64>(&meta.basis, &params_a, 600, "a", None);
        let b = generate_unit::<f64>(&meta.basis, &params_b, 600, "b", None);
        let ma = a.marginal2("c02", "c03").unwrap();
        let mb = b.marginal2("c02", "c03").unwrap();
        let bw = median_heuristic_bandwidth(&ma, &mb).unwrap();
        let observed = mmd(&ma, &mb, bw).unwrap();
        let pooled = ma.vstack(&mb).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut exceed = 0usize;
        let perms = 100;
        for _ in 0..perms {
            let idx = rand::seq::index::sample(&mut rng, pooled.nrows(), pooled.nrows()).into_vec();
            let pa = pooled.select_rows(&idx[..ma.nrows()]);
            let pb = pooled.select_rows(&idx[ma.nrows()..]);
            if mmd(&pa, &pb, bw).unwrap() >= observed {
                exceed += 1;
            }
        }
        assert!(
            exceed as f64 / perms as f64 > 0.05,
            "same-parameter units should be indistinguishable"
        );
    }

    #[test]
    fn zero_magnitude_fault_changes_nothing() {
        let cfg = small_config(4);
        let (_, meta) = generate_fleet::<f64>(&cfg).unwrap();
        let p = &meta.units[0];
        let chans = vec![2usize, 3];
        let healthy = generate_unit::<f64>(&meta.basis, p, 400, "u", None);
        let nulled = generate_unit::<f64>(&meta.basis, p, 400, "u", Some((200, &chans, 0.0)));
        assert_eq!(healthy.row(300), nulled.row(300));
    }

    #[test]
    fn generate_fleet_is_deterministic_and_structured() {
        let cfg = small_config(5);
        let (fleet_a, meta_a) = generate_fleet::<f64>(&cfg).unwrap();
        let (fleet_b, _) = generate_fleet::<f64>(&cfg).unwrap();
        assert_eq!(fleet_a.units.len(), 4);
        assert_eq!(fleet_a.targets().count(), 1);
        assert_eq!(fleet_a.sources().count(), 3);
        for ((ia, da), (ib, db)) in fleet_a.units.iter().zip(&fleet_b.units) {
            assert_eq!(ia.unit_id, ib.unit_id);
            assert_eq!(da.row(17), db.row(17));
        }
        // fault channels recorded per target
        assert_eq!(meta_a.fault_channels.len(), 1);
        assert_eq!(meta_a.fault_channels[0].len(), 3);
        // detection row sits at the onset fraction
        let (t_info, _) = fleet_a.targets().next().unwrap();
        assert_eq!(t_info.detection, Some(TimePoint::Row(560)));
    }

    #[test]
    fn identical_source_wins_selection_and_ties_break_low() {
        // craft a fleet: target, an identical-parameter source, a distant
        // source, and a duplicate of the identical one with a higher id
        let cfg = small_config(6);
        let (_, meta) = generate_fleet::<f64>(&cfg).unwrap();
        let base = &meta.units[0];
        let mut far = base.clone();
        far.regime = [6.0, -6.0, 6.0];
        far.noise_seed = 777;
        let mk = |p: &UnitParams, id: &str, fault: Option<(usize, &[usize], f64)>| {
            generate_unit::<f64>(&meta.basis, p, 500, id, fault)
        };
        let chans = vec![2usize, 3, 4];
        let fleet = Fleet {
            units: vec![
                (
                    UnitInfo {
                        unit_id: "t".into(),
                        role: UnitRole::Target,
                        detection: Some(TimePoint::Row(400)),
                        csv_path: None,
                    },
                    mk(base, "t", Some((400, &chans, 1.0))),
                ),
                (
                    UnitInfo {
                        unit_id: "s1".into(),
                        role: UnitRole::Source,
                        detection: None,
                        csv_path: None,
                    },
                    mk(base, "s1", None),
                ),
                (
                    UnitInfo {
                        unit_id: "s2".into(),
                        role: UnitRole::Source,
                        detection: None,
                        csv_path: None,
                    },
                    mk(&far, "s2", None),
                ),
                (
                    UnitInfo {
                        unit_id: "s3".into(),
                        role: UnitRole::Source,
                        detection: None,
                        csv_path: None,
                    },
                    mk(base, "s3", None), // identical data to s1
                ),
            ],
        };
        let (chosen, stats) = select_source_by_mmd(
            &fleet,
            "t",
            REPRESENTATIVE_CHANNELS,
            Window::Rows(100),
            None,
            0,
        )
        .unwrap();
        assert_eq!(chosen, "s1", "stats: {stats:?}");
        let s1 = stats.iter().find(|(s, _)| s == "s1").unwrap().1;
        let s3 = stats.iter().find(|(s, _)| s == "s3").unwrap().1;
        let s2 = stats.iter().find(|(s, _)| s == "s2").unwrap().1;
        assert_eq!(s1, s3, "identical sources must tie exactly");
        assert!(s2 > s1, "distant source must score higher");
        // unknown channel is surfaced
        assert!(select_source_by_mmd(&fleet, "t", ("c00", "zz"), Window::Rows(100), None, 0)
            .is_err());
    }

    fn tiny_sweep_config(archs: Vec<ArchitectureKind>, master: u64) -> SweepConfig {
        let mut template = ArchitectureSpec::new(ArchitectureKind::Hfa);
        template.epochs = 2;
        template.batch_size = 64;
        template.learning_rate = 1e-3;
        template.elm_hidden = 20;
        template.helm_sizes = vec![16, 20];
        template.helm_lambdas = vec![1e-3, 1e-3];
        let mut cfg = SweepConfig::new(archs, template);
        cfg.target_train_window = Window::Rows(120);
        cfg.blackout = Window::Rows(10);
        cfg.master_seed = master;
        cfg.workers = 1;
        cfg
    }

    #[test]
    fn sweep_enumerates_targets_sources_architectures() {
        let (fleet, _) = generate_fleet::<f64>(&small_config(7)).unwrap();
        let cfg = tiny_sweep_config(
            vec![ArchitectureKind::Helm, ArchitectureKind::Hfa],
            11,
        );
        let results = sweep(&fleet, &cfg);
        assert_eq!(results.len(), 1 * 3 * 2);
        for r in &results {
            assert!(r.error.is_none(), "{:?}", r.error);
            // aligned at 1% implies aligned at 5%
            assert!(!r.aligned_at_1 || r.aligned_at_5);
        }
    }

    #[test]
    fn sweep_is_deterministic_down_to_bytes() {
        let (fleet, _) = generate_fleet::<f64>(&small_config(8)).unwrap();
        let cfg = tiny_sweep_config(vec![ArchitectureKind::Hafas], 21);
        let a = results_to_jsonl(&sweep(&fleet, &cfg));
        let b = results_to_jsonl(&sweep(&fleet, &cfg));
        assert_eq!(a, b);
        let parsed = results_from_jsonl(&a).unwrap();
        assert_eq!(parsed.len(), 3);
    }

    #[test]
    fn report_tables_follow_the_rules() {
        let mk = |t: &str, s: &str, k: ArchitectureKind, fpr: Option<f64>, det: bool| PairResult {
            target_id: t.into(),
            source_id: s.into(),
            architecture: k,
            seed: 0,
            fpr,
            fault_detected: det,
            aligned_at_5: det && fpr.map_or(false, |f| f < 5.0),
            aligned_at_1: det && fpr.map_or(false, |f| f < 1.0),
            error: None,
            runtime_ms: 0,
        };
        let k = ArchitectureKind::Hfa;
        let results = vec![
            mk("t1", "s1", k, Some(0.5), true),
            mk("t1", "s2", k, Some(12.0), true),
            mk("t2", "s1", k, Some(3.0), true),
            mk("t2", "s2", k, None, false),
        ];
        let rep = report(&results, None).unwrap();
        assert_eq!(rep.aligned_counts_5, vec![vec![1], vec![1]]);
        assert_eq!(rep.aligned_counts_1, vec![vec![1], vec![0]]);
        // R% = mean over targets of count/sources*100
        assert_relative_eq!(rep.ratio_5[0], 50.0);
        assert_relative_eq!(rep.ratio_1[0], 25.0);
        assert_eq!(rep.best_fpr[0][0], Some(0.5));
        assert_eq!(rep.best_fpr[1][0], Some(3.0));

        // MMD table: selected pair with missed fault leaves an empty cell
        let selection = vec![("t1".to_string(), "s1".to_string()), ("t2".to_string(), "s2".to_string())];
        let rep = report(&results, Some(&selection)).unwrap();
        let table = rep.mmd_fpr.as_ref().unwrap();
        assert_eq!(table[0][0], Some(0.5));
        assert_eq!(table[1][0], None);
        assert_eq!(rep.mmd_aligned_count.as_ref().unwrap()[0], 1);
        let csv = rep.mmd_selection_csv().unwrap();
        assert!(csv.contains("t2,\n"), "empty cell for missed fault:\n{csv}");

        // single aligned result counts once
        let one = vec![mk("t", "s", k, Some(0.1), true)];
        let rep = report(&one, None).unwrap();
        assert_eq!(rep.aligned_counts_5, vec![vec![1]]);
    }

    #[test]
    fn fleet_round_trips_through_manifest_and_csvs() {
        let (fleet, _) = generate_fleet::<f64>(&small_config(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        fleet.save(dir.path()).unwrap();
        let loaded = Fleet::<f64>::load(&dir.path().join("fleet.csv")).unwrap();
        assert_eq!(loaded.units.len(), fleet.units.len());
        for ((ia, da), (ib, db)) in fleet.units.iter().zip(&loaded.units) {
            assert_eq!(ia.unit_id, ib.unit_id);
            assert_eq!(ia.role, ib.role);
            assert_eq!(ia.detection, ib.detection);
            assert_eq!(da.nrows(), db.nrows());
            for (x, y) in da.row(5).iter().zip(db.row(5)) {
                assert_relative_eq!(x, y, max_relative = 1e-12);
            }
        }
    }
}
