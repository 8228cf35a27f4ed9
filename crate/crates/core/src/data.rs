//! Synthetic ensemble simulators, dataset splitting and on-disk persistence.
//!
//! The bundled generator ("bumps") produces a scalar field made of two smooth
//! Gaussian bumps whose centres, widths and amplitudes move with the input
//! parameters. Noise models attach a known ground-truth uncertainty so the
//! evidential estimates can be checked against it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{format_shape, parse_shape, GridIndexer};

pub const DATASET_FORMAT: &str = "evisurro-dataset";
pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Default generator name.
pub const BUMPS: &str = "bumps";

/// Number of perturbed replicas in parameter-perturbation mode.
pub const PERTURBATION_REPLICAS: usize = 8;
/// Half-width of the perturbation, as a fraction of each parameter range.
pub const PERTURBATION_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "calibration" => Ok(Split::Calibration),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split label '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ParamRange {
    pub fn contains(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    /// Maps `v` from `[min, max]` to `[0, 1]`.
    pub fn unit(&self, v: f64) -> f64 {
        (v - self.min) / self.width()
    }
}

/// Default parameter space: `d` parameters `x0..x{d-1}`, each in `[0, 1]`.
pub fn default_param_ranges(d: usize) -> Vec<ParamRange> {
    (0..d)
        .map(|i| ParamRange {
            name: format!("x{i}"),
            min: 0.0,
            max: 1.0,
        })
        .collect()
}

pub fn check_params(ranges: &[ParamRange], x: &[f64]) -> Result<()> {
    if x.len() != ranges.len() {
        return Err(Error::Shape(format!(
            "parameter vector has length {}, expected {}",
            x.len(),
            ranges.len()
        )));
    }
    for (r, &v) in ranges.iter().zip(x) {
        if !v.is_finite() || !r.contains(v) {
            return Err(Error::domain(
                "parameters",
                format!("{} = {v} outside [{}, {}]", r.name, r.min, r.max),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub member_id: u64,
    pub params: Vec<f64>,
    /// Simulation output in original units, row-major.
    pub field: Vec<f32>,
    /// Known noise variance per element (synthetic data only).
    pub truth_noise_var: Option<Vec<f32>>,
}

impl EnsembleMember {
    pub fn field_f64(&self) -> Vec<f64> {
        self.field.iter().map(|&v| v as f64).collect()
    }

    pub fn noise_var_f64(&self) -> Option<Vec<f64>> {
        self.truth_noise_var
            .as_ref()
            .map(|v| v.iter().map(|&x| x as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDataset {
    members: Vec<EnsembleMember>,
    split_labels: BTreeMap<u64, Split>,
    param_ranges: Vec<ParamRange>,
    grid_shape: Vec<usize>,
}

impl EnsembleDataset {
    /// Validates that labels partition the member ids, parameters sit inside
    /// their ranges and every field matches the grid.
    pub fn new(
        mut members: Vec<EnsembleMember>,
        split_labels: BTreeMap<u64, Split>,
        param_ranges: Vec<ParamRange>,
        grid_shape: Vec<usize>,
    ) -> Result<Self> {
        let n_elem: usize = grid_shape.iter().product();
        if grid_shape.is_empty() || n_elem == 0 {
            return Err(Error::Config(format!("invalid grid shape {grid_shape:?}")));
        }
        for r in &param_ranges {
            if !(r.min.is_finite() && r.max.is_finite() && r.max > r.min) {
                return Err(Error::Config(format!(
                    "invalid range for {}: [{}, {}]",
                    r.name, r.min, r.max
                )));
            }
        }
        members.sort_by_key(|m| m.member_id);
        for w in members.windows(2) {
            if w[0].member_id == w[1].member_id {
                return Err(Error::Split(format!("duplicate member id {}", w[0].member_id)));
            }
        }
        if members.len() != split_labels.len() {
            return Err(Error::Split(format!(
                "{} members but {} split labels",
                members.len(),
                split_labels.len()
            )));
        }
        for m in &members {
            if !split_labels.contains_key(&m.member_id) {
                return Err(Error::Split(format!("member {} has no split label", m.member_id)));
            }
            check_params(&param_ranges, &m.params)?;
            if m.field.len() != n_elem {
                return Err(Error::Shape(format!(
                    "member {} field has {} values, grid holds {n_elem}",
                    m.member_id,
                    m.field.len()
                )));
            }
            if m.field.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(
                    "EnsembleDataset",
                    format!("member {} field is not finite", m.member_id),
                ));
            }
            if let Some(nv) = &m.truth_noise_var {
                if nv.len() != n_elem || nv.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Shape(format!(
                        "member {} has an invalid noise grid",
                        m.member_id
                    )));
                }
            }
        }
        Ok(Self {
            members,
            split_labels,
            param_ranges,
            grid_shape,
        })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn split_labels(&self) -> &BTreeMap<u64, Split> {
        &self.split_labels
    }

    pub fn param_ranges(&self) -> &[ParamRange] {
        &self.param_ranges
    }

    pub fn grid_shape(&self) -> &[usize] {
        &self.grid_shape
    }

    pub fn grid_len(&self) -> usize {
        self.grid_shape.iter().product()
    }

    pub fn input_dim(&self) -> usize {
        self.param_ranges.len()
    }

    pub fn label(&self, member_id: u64) -> Option<Split> {
        self.split_labels.get(&member_id).copied()
    }

    /// Members of one split, in id order.
    pub fn split(&self, split: Split) -> Vec<&EnsembleMember> {
        self.members
            .iter()
            .filter(|m| self.split_labels[&m.member_id] == split)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split_labels.values().filter(|&&s| s == split).count()
    }

    /// Asserts that every given member carries `expected` as its only label.
    pub fn ensure_split(&self, members: &[&EnsembleMember], expected: Split) -> Result<()> {
        for m in members {
            match self.label(m.member_id) {
                Some(s) if s == expected => {}
                Some(s) => {
                    return Err(Error::Split(format!(
                        "member {} is labelled {s}, expected {expected}",
                        m.member_id
                    )))
                }
                None => return Err(Error::Split(format!("member {} is unlabelled", m.member_id))),
            }
        }
        Ok(())
    }

    /// Global (min, max) of all field values in one split.
    pub fn value_range(&self, split: Split) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in self.split(split) {
            for &v in &m.field {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    /// Deterministic mean field, zero noise variance.
    None,
    /// Gaussian noise with std 0.05 + 0.15 * normalized bump intensity.
    Heteroscedastic,
    /// Output evaluated at slightly perturbed inputs.
    ParameterPerturbation,
    /// Clean field; variance across four downsampling variants as the reference.
    ResolutionVariants { factor: usize },
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseModel::None => f.write_str("none"),
            NoiseModel::Heteroscedastic => f.write_str("heteroscedastic"),
            NoiseModel::ParameterPerturbation => f.write_str("parameter-perturbation"),
            NoiseModel::ResolutionVariants { factor } => write!(f, "resolution-variants:{factor}"),
        }
    }
}

impl FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseModel::None),
            "heteroscedastic" => Ok(NoiseModel::Heteroscedastic),
            "parameter-perturbation" => Ok(NoiseModel::ParameterPerturbation),
            other => {
                if let Some(f) = other.strip_prefix("resolution-variants") {
                    let factor = match f.strip_prefix(':') {
                        Some(v) => v
                            .parse()
                            .map_err(|_| Error::Config(format!("bad resolution factor in '{other}'")))?,
                        None if f.is_empty() => 2,
                        None => return Err(Error::Config(format!("unknown noise model '{other}'"))),
                    };
                    Ok(NoiseModel::ResolutionVariants { factor })
                } else {
                    Err(Error::Config(format!("unknown noise model '{other}'")))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorSpec {
    pub name: String,
    pub d: usize,
    pub grid_shape: Vec<usize>,
    pub noise_model: NoiseModel,
    pub seed: u64,
}

impl Default for SimulatorSpec {
    fn default() -> Self {
        Self {
            name: BUMPS.to_string(),
            d: 3,
            grid_shape: vec![32, 32],
            noise_model: NoiseModel::Heteroscedastic,
            seed: 0,
        }
    }
}

impl SimulatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name != BUMPS {
            return Err(Error::Config(format!(
                "unknown simulator '{}' (available: {BUMPS})",
                self.name
            )));
        }
        if self.d == 0 {
            return Err(Error::Config("simulator needs at least one parameter".into()));
        }
        if !(self.grid_shape.len() == 2 || self.grid_shape.len() == 3) || self.grid_shape.contains(&0) {
            return Err(Error::Config(format!(
                "grid must be 2D or 3D with positive extents, got {:?}",
                self.grid_shape
            )));
        }
        if let NoiseModel::ResolutionVariants { factor } = self.noise_model {
            if factor == 0 || self.grid_shape.iter().any(|&n| n % factor != 0) {
                return Err(Error::Config(format!(
                    "grid {:?} is not divisible by resolution factor {factor}",
                    self.grid_shape
                )));
            }
        }
        Ok(())
    }

    pub fn param_ranges(&self) -> Vec<ParamRange> {
        default_param_ranges(self.d)
    }
}

/// SplitMix64 finalizer, used to derive independent per-member seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Bump {
    center: Vec<f64>,
    width: f64,
    amplitude: f64,
}

/// Bump geometry as a function of unit-scaled parameters `u` in `[0, 1]^d`.
fn bumps_for(u: &[f64], ndim: usize) -> [Bump; 2] {
    let d = u.len();
    let p = |i: usize| u[i % d];
    let s = |i: usize| (2.0 * PI * u[i % d]).sin();
    let make = |j: usize, base: f64, sign: f64, amp0: f64| Bump {
        center: (0..ndim)
            .map(|k| base + sign * 0.2 * (p(j + k) - 0.5) + 0.05 * s(j + k + 1))
            .collect(),
        width: 0.10 + 0.06 * p(j + 2) + 0.02 * s(j),
        amplitude: amp0 + 0.5 * p(j + 1) + 0.1 * s(j + 2),
    };
    [make(0, 0.35, 1.0, 1.0), make(1, 0.65, -1.0, 0.7)]
}

/// Noise-free field of the bumps generator at unit-scaled parameters.
fn mean_field(u: &[f64], grid_shape: &[usize]) -> Vec<f64> {
    let idx = GridIndexer::new(grid_shape);
    let bumps = bumps_for(u, grid_shape.len());
    let mut coord = vec![0usize; grid_shape.len()];
    (0..idx.len())
        .map(|flat| {
            idx.unravel_into(flat, &mut coord);
            bumps
                .iter()
                .map(|b| {
                    let r2: f64 = coord
                        .iter()
                        .zip(grid_shape)
                        .zip(&b.center)
                        .map(|((&i, &n), &c)| {
                            let s = (i as f64 + 0.5) / n as f64;
                            (s - c) * (s - c)
                        })
                        .sum();
                    b.amplitude * (-r2 / (2.0 * b.width * b.width)).exp()
                })
                .sum()
        })
        .collect()
}

/// Noise std at each element: 0.05 + 0.15 * (m / max m).
fn heteroscedastic_std(mean: &[f64]) -> Vec<f64> {
    let peak = mean.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    mean.iter().map(|&m| 0.05 + 0.15 * (m / peak)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn unit_params(ranges: &[ParamRange], x: &[f64]) -> Vec<f64> {
    ranges.iter().zip(x).map(|(r, &v)| r.unit(v)).collect()
}

/// Runs the simulator once.
pub fn simulate_member(spec: &SimulatorSpec, x: &[f64], member_id: u64, member_seed: u64) -> Result<EnsembleMember> {
    spec.validate()?;
    let ranges = spec.param_ranges();
    check_params(&ranges, x)?;
    let u = unit_params(&ranges, x);
    let mean = mean_field(&u, &spec.grid_shape);
    let n = mean.len();
    let (field, noise_var) = match spec.noise_model {
        NoiseModel::None => (mean, vec![0.0; n]),
        NoiseModel::Heteroscedastic => {
            let std = heteroscedastic_std(&mean);
            let mut rng = ChaCha8Rng::seed_from_u64(member_seed);
            let field = mean
                .iter()
                .zip(&std)
                .map(|(&m, &s)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + s * z
                })
                .collect();
            (field, std.iter().map(|s| s * s).collect())
        }
        NoiseModel::ParameterPerturbation => {
            let replicas = perturbation_replicas(spec, x, member_seed)?;
            let var = replica_variance(&replicas);
            (replicas.into_iter().next().expect("at least one replica"), var)
        }
        NoiseModel::ResolutionVariants { factor } => {
            let rv = resolution_variants_of(&mean, &spec.grid_shape, factor)?;
            let var = rv.upsampled_variance(&spec.grid_shape, factor);
            (mean, var)
        }
    };
    Ok(EnsembleMember {
        member_id,
        params: x.to_vec(),
        field: to_f32(&field),
        truth_noise_var: Some(to_f32(&noise_var)),
    })
}

/// Mean fields at `x + eps_r`, `eps_r` uniform within +-1e-3 of each range.
/// Perturbed inputs are clamped to the parameter box.
pub fn perturbation_replicas(spec: &SimulatorSpec, x: &[f64], member_seed: u64) -> Result<Vec<Vec<f64>>> {
    let ranges = spec.param_ranges();
    check_params(&ranges, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(member_seed, 0x5045_5254));
    Ok((0..PERTURBATION_REPLICAS)
        .map(|_| {
            let xp: Vec<f64> = ranges
                .iter()
                .zip(x)
                .map(|(r, &v)| {
                    let h = PERTURBATION_FRACTION * r.width();
                    (v + rng.random_range(-h..=h)).clamp(r.min, r.max)
                })
                .collect();
            mean_field(&unit_params(&ranges, &xp), &spec.grid_shape)
        })
        .collect())
}

fn replica_variance(replicas: &[Vec<f64>]) -> Vec<f64> {
    let n = replicas[0].len();
    let k = replicas.len() as f64;
    (0..n)
        .map(|i| {
            let mean = replicas.iter().map(|r| r[i]).sum::<f64>() / k;
            replicas.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / k
        })
        .collect()
}

/// Member-level reference uncertainty: mean absolute deviation of the
/// replicas from their element-wise mean, averaged over the grid.
pub fn mean_absolute_deviation(replicas: &[Vec<f64>]) -> f64 {
    let n = replicas[0].len();
    let k = replicas.len() as f64;
    let total: f64 = (0..n)
        .map(|i| {
            let mean = replicas.iter().map(|r| r[i]).sum::<f64>() / k;
            replicas.iter().map(|r| (r[i] - mean).abs()).sum::<f64>() / k
        })
        .sum();
    total / n as f64
}

/// Axis-aligned parameter box excluded from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SparseRegion {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&lo, &hi))| lo <= v && v <= hi)
    }
}

/// Draws `n_train + n_cal + n_test` i.i.d. parameter vectors from one seeded
/// stream, assigns split labels by a seeded shuffle, and simulates every
/// member. With `sparse` set, training draws landing inside the region are
/// redrawn from a separate stream, leaving calibration and test members
/// identical to the unflagged dataset.
pub fn generate_dataset(
    spec: &SimulatorSpec,
    n_train: usize,
    n_cal: usize,
    n_test: usize,
    seed: u64,
    sparse: Option<&SparseRegion>,
) -> Result<EnsembleDataset> {
    spec.validate()?;
    if n_train == 0 {
        return Err(Error::Config("n_train must be at least 1".into()));
    }
    let ranges = spec.param_ranges();
    if let Some(region) = sparse {
        if region.lo.len() != spec.d || region.hi.len() != spec.d {
            return Err(Error::Config(format!(
                "sparse region must have {} bounds per side",
                spec.d
            )));
        }
        let full = ranges
            .iter()
            .zip(region.lo.iter().zip(&region.hi))
            .all(|(r, (&lo, &hi))| lo <= r.min && hi >= r.max);
        if full {
            return Err(Error::Config("sparse region covers the whole parameter space".into()));
        }
    }
    let total = n_train + n_cal + n_test;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(seed);
    let draw =
        |rng: &mut ChaCha8Rng| -> Vec<f64> { ranges.iter().map(|r| r.min + r.width() * rng.random::<f64>()).collect() };
    let mut params: Vec<Vec<f64>> = (0..total).map(|_| draw(&mut draw_rng)).collect();

    let mut labels: Vec<Split> = std::iter::repeat_n(Split::Train, n_train)
        .chain(std::iter::repeat_n(Split::Calibration, n_cal))
        .chain(std::iter::repeat_n(Split::Test, n_test))
        .collect();
    let mut label_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x4C41_4245));
    labels.shuffle(&mut label_rng);

    if let Some(region) = sparse {
        let mut redraw_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5350_5253));
        for (p, label) in params.iter_mut().zip(&labels) {
            if *label == Split::Train {
                while region.contains(p) {
                    *p = draw(&mut redraw_rng);
                }
            }
        }
    }

    let members: Vec<EnsembleMember> = params
        .par_iter()
        .enumerate()
        .map(|(i, x)| simulate_member(spec, x, i as u64, mix_seed(spec.seed, i as u64)))
        .collect::<Result<_>>()?;
    let split_labels = labels.into_iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
    EnsembleDataset::new(members, split_labels, ranges, spec.grid_shape.clone())
}

/// Four reduced-resolution versions of a field and their spread.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionVariants {
    pub shape: Vec<usize>,
    /// Multilinear interpolation at each block centre.
    pub interpolated: Vec<f64>,
    /// First (lowest-index) element of each block.
    pub nearest: Vec<f64>,
    pub max_pool: Vec<f64>,
    pub min_pool: Vec<f64>,
    /// Population variance across the four variants, per reduced element.
    pub variance: Vec<f64>,
}

impl ResolutionVariants {
    /// Nearest-neighbour upsampling of `variance` back to the full grid.
    pub fn upsampled_variance(&self, full_shape: &[usize], factor: usize) -> Vec<f64> {
        let full = GridIndexer::new(full_shape);
        let reduced = GridIndexer::new(&self.shape);
        let mut coord = vec![0usize; full_shape.len()];
        (0..full.len())
            .map(|flat| {
                full.unravel_into(flat, &mut coord);
                for c in coord.iter_mut() {
                    *c /= factor;
                }
                self.variance[reduced.ravel(&coord)]
            })
            .collect()
    }
}

pub fn resolution_variants(member: &EnsembleMember, grid_shape: &[usize], factor: usize) -> Result<ResolutionVariants> {
    resolution_variants_of(&member.field_f64(), grid_shape, factor)
}

pub fn resolution_variants_of(field: &[f64], grid_shape: &[usize], factor: usize) -> Result<ResolutionVariants> {
    let full = GridIndexer::new(grid_shape);
    if field.len() != full.len() {
        return Err(Error::Shape(format!(
            "field has {} values, grid holds {}",
            field.len(),
            full.len()
        )));
    }
    if factor == 0 || grid_shape.iter().any(|&n| n % factor != 0) {
        return Err(Error::Shape(format!(
            "grid {grid_shape:?} is not divisible by factor {factor}"
        )));
    }
    let shape: Vec<usize> = grid_shape.iter().map(|&n| n / factor).collect();
    let reduced = GridIndexer::new(&shape);
    let ndim = shape.len();
    let mut out = ResolutionVariants {
        shape: shape.clone(),
        interpolated: Vec::with_capacity(reduced.len()),
        nearest: Vec::with_capacity(reduced.len()),
        max_pool: Vec::with_capacity(reduced.len()),
        min_pool: Vec::with_capacity(reduced.len()),
        variance: Vec::with_capacity(reduced.len()),
    };
    let mut rc = vec![0usize; ndim];
    let mut fc = vec![0usize; ndim];
    let block = GridIndexer::new(&vec![factor; ndim]);
    let mut bc = vec![0usize; ndim];
    for flat in 0..reduced.len() {
        reduced.unravel_into(flat, &mut rc);
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for b in 0..block.len() {
            block.unravel_into(b, &mut bc);
            for k in 0..ndim {
                fc[k] = rc[k] * factor + bc[k];
            }
            let v = field[full.ravel(&fc)];
            hi = hi.max(v);
            lo = lo.min(v);
        }
        for k in 0..ndim {
            fc[k] = rc[k] * factor;
        }
        let nearest = field[full.ravel(&fc)];
        let centre: Vec<f64> = rc
            .iter()
            .map(|&r| (r * factor) as f64 + 0.5 * (factor as f64 - 1.0))
            .collect();
        let interp = multilinear(field, &full, grid_shape, &centre);
        let vals = [interp, nearest, hi, lo];
        let mean = vals.iter().sum::<f64>() / 4.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        out.interpolated.push(interp);
        out.nearest.push(nearest);
        out.max_pool.push(hi);
        out.min_pool.push(lo);
        out.variance.push(var);
    }
    Ok(out)
}

/// Multilinear interpolation at continuous index coordinates.
fn multilinear(field: &[f64], idx: &GridIndexer, shape: &[usize], at: &[f64]) -> f64 {
    let ndim = shape.len();
    let base: Vec<usize> = at
        .iter()
        .zip(shape)
        .map(|(&c, &n)| (c.floor() as usize).min(n - 1))
        .collect();
    let frac: Vec<f64> = at.iter().zip(&base).map(|(&c, &b)| c - b as f64).collect();
    let mut acc = 0.0;
    let mut corner = vec![0usize; ndim];
    for mask in 0..(1usize << ndim) {
        let mut weight = 1.0;
        for k in 0..ndim {
            let up = (mask >> k) & 1 == 1;
            weight *= if up { frac[k] } else { 1.0 - frac[k] };
            corner[k] = if up { (base[k] + 1).min(shape[k] - 1) } else { base[k] };
        }
        if weight != 0.0 {
            acc += weight * field[idx.ravel(&corner)];
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Persistence

fn member_file(id: u64) -> String {
    format!("member_{id:06}.f32")
}

fn noise_file(id: u64) -> String {
    format!("member_{id:06}.noise.f32")
}

fn write_f32s(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32s(path: &Path, expected: usize, member_id: u64) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::corrupt(
            path,
            format!(
                "size mismatch for member {member_id}: {} bytes, expected {}",
                bytes.len(),
                expected * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes `manifest.txt` plus one raw little-endian f32 file per member
/// (and per noise grid). The directory is created if needed.
///
/// Manifest layout:
///
/// ```text
/// format = evisurro-dataset
/// schema_version = 1
/// d = 3
/// grid_shape = 32x32
/// members = 428
///
/// [params]
/// x0 0 1
/// ...
///
/// [members]
/// # id split field_file noise_file params...
/// 0 train member_000000.f32 member_000000.noise.f32 0.1 0.2 0.3
/// ```
///
/// `noise_file` is `-` when the member carries no noise grid.
pub fn save_dataset(ds: &EnsembleDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("format = {DATASET_FORMAT}\n"));
    manifest.push_str(&format!("schema_version = {DATASET_SCHEMA_VERSION}\n"));
    manifest.push_str(&format!("d = {}\n", ds.input_dim()));
    manifest.push_str(&format!("grid_shape = {}\n", format_shape(&ds.grid_shape)));
    manifest.push_str(&format!("members = {}\n", ds.members.len()));
    manifest.push_str("\n[params]\n");
    for r in &ds.param_ranges {
        manifest.push_str(&format!("{} {:?} {:?}\n", r.name, r.min, r.max));
    }
    manifest.push_str("\n[members]\n# id split field_file noise_file params...\n");
    for m in &ds.members {
        let fname = member_file(m.member_id);
        write_f32s(&dir.join(&fname), &m.field)?;
        let nname = match &m.truth_noise_var {
            Some(nv) => {
                let n = noise_file(m.member_id);
                write_f32s(&dir.join(&n), nv)?;
                n
            }
            None => "-".to_string(),
        };
        let params: Vec<String> = m.params.iter().map(|v| format!("{v:?}")).collect();
        manifest.push_str(&format!(
            "{} {} {} {} {}\n",
            m.member_id,
            ds.split_labels[&m.member_id],
            fname,
            nname,
            params.join(" ")
        ));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// member_id, split, field file, noise file, params
type ManifestRow = (u64, Split, String, Option<String>, Vec<f64>);

pub fn load_dataset(dir: &Path) -> Result<EnsembleDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |detail: String| Error::corrupt(&path, detail);

    let mut keys: BTreeMap<String, String> = BTreeMap::new();
    let mut section = "";
    let mut ranges = Vec::new();
    let mut rows: Vec<ManifestRow> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = match line {
                "[params]" => "params",
                "[members]" => "members",
                other => return Err(bad(format!("line {}: unknown section {other}", lineno + 1))),
            };
            continue;
        }
        match section {
            "" => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: expected key = value", lineno + 1)))?;
                keys.insert(k.trim().to_string(), v.trim().to_string());
            }
            "params" => {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(bad(format!("line {}: expected 'name min max'", lineno + 1)));
                }
                let num = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|_| bad(format!("line {}: bad number '{s}'", lineno + 1)))
                };
                ranges.push(ParamRange {
                    name: parts[0].to_string(),
                    min: num(parts[1])?,
                    max: num(parts[2])?,
                });
            }
            _ => {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() < 4 {
                    return Err(bad(format!("line {}: truncated member row", lineno + 1)));
                }
                let id = parts[0]
                    .parse::<u64>()
                    .map_err(|_| bad(format!("line {}: bad member id", lineno + 1)))?;
                let split = parts[1].parse::<Split>()?;
                let noise = (parts[3] != "-").then(|| parts[3].to_string());
                let params = parts[4..]
                    .iter()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("line {}: bad parameter value", lineno + 1)))?;
                rows.push((id, split, parts[2].to_string(), noise, params));
            }
        }
    }

    let get = |k: &str| keys.get(k).ok_or_else(|| bad(format!("missing key '{k}'")));
    if get("format")? != DATASET_FORMAT {
        return Err(bad(format!("not a dataset manifest (format = {})", get("format")?)));
    }
    let version = get("schema_version")?;
    if version != &DATASET_SCHEMA_VERSION.to_string() {
        return Err(Error::Version {
            path: path.clone(),
            found: version.clone(),
            expected: DATASET_SCHEMA_VERSION.to_string(),
        });
    }
    let d: usize = get("d")?.parse().map_err(|_| bad("bad d".into()))?;
    let grid_shape = parse_shape(get("grid_shape")?).map_err(|e| bad(e.to_string()))?;
    if ranges.len() != d {
        return Err(bad(format!("d = {d} but {} parameter ranges listed", ranges.len())));
    }
    if let Some(count) = keys.get("members") {
        let count: usize = count.parse().map_err(|_| bad("bad member count".into()))?;
        if count != rows.len() {
            return Err(bad(format!(
                "manifest declares {count} members but lists {}",
                rows.len()
            )));
        }
    }
    let n_elem: usize = grid_shape.iter().product();
    let mut labels = BTreeMap::new();
    let mut members = Vec::with_capacity(rows.len());
    for (id, split, fname, noise, params) in rows {
        if labels.insert(id, split).is_some() {
            return Err(Error::Split(format!("member {id} appears more than once")));
        }
        let field = read_f32s(&dir.join(&fname), n_elem, id)?;
        let truth_noise_var = match noise {
            Some(n) => Some(read_f32s(&dir.join(&n), n_elem, id)?),
            None => None,
        };
        members.push(EnsembleMember {
            member_id: id,
            params,
            field,
            truth_noise_var,
        });
    }
    EnsembleDataset::new(members, labels, ranges, grid_shape)
}
