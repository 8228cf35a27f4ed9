//! Fitting the evidential network on the training split, plus checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, PayloadReader, PayloadWriter};
use crate::data::{mix_seed, EnsembleDataset, ParamRange, Split};
use crate::error::{Error, Result};
use crate::evidential::{loss_gradients, loss_terms, mean_terms, EvidentialField, LossTerms, LossWeights};
use crate::grid::format_shape;
use crate::network::{head_params, EvidentialNet, Layer, NetConfig};

pub const CHECKPOINT_KIND: &str = "checkpoint";

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many epochs without improvement of the epoch loss;
    /// 0 disables early stopping.
    pub early_stopping_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stopping_patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        LossWeights::new(self.weights.lambda_reg, self.weights.xi_reg)?;
        Ok(())
    }
}

/// Global min-max map of the training targets onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTransform {
    pub y_min: f64,
    pub y_max: f64,
}

impl NormalizationTransform {
    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !(y_min.is_finite() && y_max.is_finite() && y_max > y_min) {
            return Err(Error::Config(format!(
                "normalization needs y_max > y_min, got [{y_min}, {y_max}]"
            )));
        }
        Ok(Self { y_min, y_max })
    }

    /// Transform fitted to the training split only.
    pub fn fit(ds: &EnsembleDataset) -> Result<Self> {
        let (lo, hi) = ds.value_range(Split::Train).ok_or(Error::EmptySplit("train"))?;
        Self::new(lo, hi)
    }

    /// Half-width of the original range; the factor from normalized to original units.
    pub fn half_range(&self) -> f64 {
        0.5 * (self.y_max - self.y_min)
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.y_min) / self.half_range() - 1.0
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        self.y_min + (z + 1.0) * self.half_range()
    }

    pub fn denormalize_variance(&self, v: f64) -> f64 {
        v * self.half_range() * self.half_range()
    }
}

/// Affine map of each parameter range onto `[-1, 1]` for the network input.
pub fn scale_inputs(ranges: &[ParamRange], x: &[f64]) -> Vec<f64> {
    ranges.iter().zip(x).map(|(r, &v)| 2.0 * r.unit(v) - 1.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: EvidentialNet,
    pub transform: NormalizationTransform,
    pub param_ranges: Vec<ParamRange>,
    pub train_config: TrainConfig,
    /// Mean total loss per epoch.
    pub loss_history: Vec<f64>,
    /// Every member id the network has been fitted on; calibration and
    /// evaluation refuse to reuse them.
    pub train_member_ids: Vec<u64>,
}

impl Checkpoint {
    pub fn grid_shape(&self) -> &[usize] {
        &self.net.config().grid_shape
    }

    /// Evidential field in normalized units for raw (unscaled) parameters.
    pub fn forward(&self, params: &[f64]) -> Result<EvidentialField> {
        crate::data::check_params(&self.param_ranges, params)?;
        self.net.forward(&scale_inputs(&self.param_ranges, params))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nll: f64,
    pub reg: f64,
    pub u: f64,
    pub total: f64,
}

/// First and second moment estimates for Adam, one buffer per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_net(net: &EvidentialNet) -> Self {
        let sizes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        Self::new(&sizes)
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameter tensors, {} gradient tensors, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[k].len() {
            return Err(Error::Shape(format!("adam: tensor {k} size mismatch")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Per-member loss and upstream gradient rows for one batch.
fn batch_terms(head: &Array2<f64>, ys: &[&[f64]], w: &LossWeights, scale: f64) -> (Array2<f64>, Vec<LossTerms>) {
    let (rows, cols) = head.dim();
    let results: Vec<(Vec<f64>, LossTerms)> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let z = head.row(r);
            let z = z.as_slice().expect("standard layout");
            let y = ys[r];
            let mut up = Vec::with_capacity(cols);
            let mut terms = Vec::with_capacity(y.len());
            for (zc, &yi) in z.chunks_exact(4).zip(y) {
                let m = head_params([zc[0], zc[1], zc[2], zc[3]]);
                terms.push(loss_terms(&m, yi, w));
                let g = loss_gradients(&m, yi, w);
                up.extend(g.as_array().iter().map(|v| v * scale));
            }
            (up, mean_terms(&terms))
        })
        .collect();
    let mut upstream = Array2::zeros((rows, cols));
    let mut terms = Vec::with_capacity(rows);
    for (r, (up, t)) in results.into_iter().enumerate() {
        upstream.row_mut(r).assign(&Array1::from(up));
        terms.push(t);
    }
    (upstream, terms)
}

fn non_finite(t: &LossTerms) -> bool {
    !(t.nll.is_finite() && t.reg.is_finite() && t.u.is_finite() && t.total.is_finite())
}

/// Trains a fresh network on the training split.
pub fn fit(ds: &EnsembleDataset, net_config: NetConfig, train_config: TrainConfig) -> Result<Checkpoint> {
    fit_with_log(ds, net_config, train_config, |_| {})
}

pub fn fit_with_log(
    ds: &EnsembleDataset,
    net_config: NetConfig,
    train_config: TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    if net_config.input_dim != ds.input_dim() || net_config.grid_shape != ds.grid_shape() {
        return Err(Error::Shape(format!(
            "network expects d={} grid {:?}, dataset has d={} grid {:?}",
            net_config.input_dim,
            net_config.grid_shape,
            ds.input_dim(),
            ds.grid_shape()
        )));
    }
    let transform = NormalizationTransform::fit(ds)?;
    let net = EvidentialNet::init(net_config)?;
    let ckpt = Checkpoint {
        net,
        transform,
        param_ranges: ds.param_ranges().to_vec(),
        train_config,
        loss_history: Vec::new(),
        train_member_ids: Vec::new(),
    };
    continue_training(ckpt, ds, on_epoch)
}

/// Runs `ckpt.train_config.epochs` further epochs, appending to the loss
/// history. The target transform stored in the checkpoint is reused.
/// Optimizer moments are not persisted and restart from zero.
pub fn continue_training(
    mut ckpt: Checkpoint,
    ds: &EnsembleDataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    let cfg = ckpt.train_config.clone();
    cfg.validate()?;
    if ckpt.param_ranges != ds.param_ranges() || ckpt.grid_shape() != ds.grid_shape() {
        return Err(Error::Shape(
            "checkpoint and dataset disagree on parameters or grid".into(),
        ));
    }
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let n_elem = ds.grid_len();
    for m in &train {
        if let Err(pos) = ckpt.train_member_ids.binary_search(&m.member_id) {
            ckpt.train_member_ids.insert(pos, m.member_id);
        }
    }
    let xs: Vec<Vec<f64>> = train
        .iter()
        .map(|m| scale_inputs(&ckpt.param_ranges, &m.params))
        .collect();
    let ys: Vec<Vec<f64>> = train
        .iter()
        .map(|m| m.field.iter().map(|&v| ckpt.transform.normalize(v as f64)).collect())
        .collect();
    if ys.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("fit", "training targets are not finite"));
    }

    let d = ds.input_dim();
    let epoch_offset = ckpt.loss_history.len();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SHUFFLE_STREAM ^ epoch_offset as u64));
    let mut adam = AdamState::for_net(&ckpt.net);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in epoch_offset + 1..=epoch_offset + cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut member_terms = Vec::with_capacity(order.len());
        for (b, chunk) in (1..).zip(order.chunks(cfg.batch_size)) {
            let mut xb = Array2::zeros((chunk.len(), d));
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&Array1::from(xs[i].clone()));
            }
            let yb: Vec<&[f64]> = chunk.iter().map(|&i| ys[i].as_slice()).collect();
            let cache = ckpt.net.forward_cached(xb.view())?;
            let scale = 1.0 / (chunk.len() * n_elem) as f64;
            let (upstream, terms) = batch_terms(cache.head(), &yb, &cfg.weights, scale);
            if let Some((r, t)) = terms.iter().enumerate().find(|(_, t)| non_finite(t)) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("member {} produced {t:?}", train[chunk[r]].member_id),
                });
            }
            let grads = ckpt.net.backward_cached(&cache, &upstream)?;
            if !grads.max_abs().is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "non-finite parameter gradient".into(),
                });
            }
            let grad_slices = grads.slices();
            adam_step(&mut ckpt.net.param_slices_mut(), &grad_slices, &mut adam, &cfg)?;
            member_terms.extend(terms);
        }
        let t = mean_terms(&member_terms);
        let record = EpochRecord {
            epoch,
            nll: t.nll,
            reg: t.reg,
            u: t.u,
            total: t.total,
        };
        if non_finite(&t) {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: 0,
                detail: format!("epoch mean {t:?}"),
            });
        }
        ckpt.loss_history.push(t.total);
        on_epoch(&record);

        if cfg.early_stopping_patience > 0 {
            if t.total < best - 1e-6 * best.abs().max(1.0) {
                best = t.total;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stopping_patience {
                    break;
                }
            }
        }
    }
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Checkpoint persistence

fn write_net_config(c: &NetConfig) -> PayloadWriter {
    PayloadWriter::new()
        .u64(c.input_dim as u64)
        .usizes(&c.hidden_sizes)
        .usizes(&c.grid_shape)
        .u64(c.seed)
}

fn read_net_config(r: &mut PayloadReader<'_>) -> Result<NetConfig> {
    Ok(NetConfig {
        input_dim: r.usize()?,
        hidden_sizes: r.usizes()?,
        grid_shape: r.usizes()?,
        seed: r.u64()?,
    })
}

fn write_train_config(c: &TrainConfig) -> PayloadWriter {
    PayloadWriter::new()
        .u64(c.epochs as u64)
        .u64(c.batch_size as u64)
        .f64(c.learning_rate)
        .f64(c.weights.lambda_reg)
        .f64(c.weights.xi_reg)
        .u64(c.seed)
        .f64(c.adam_beta1)
        .f64(c.adam_beta2)
        .f64(c.adam_eps)
        .u64(c.early_stopping_patience as u64)
}

fn read_train_config(r: &mut PayloadReader<'_>) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: r.usize()?,
        batch_size: r.usize()?,
        learning_rate: r.f64()?,
        weights: LossWeights {
            lambda_reg: r.f64()?,
            xi_reg: r.f64()?,
        },
        seed: r.u64()?,
        adam_beta1: r.f64()?,
        adam_beta2: r.f64()?,
        adam_eps: r.f64()?,
        early_stopping_patience: r.usize()?,
    })
}

pub(crate) fn write_param_ranges(ranges: &[ParamRange]) -> PayloadWriter {
    let mut w = PayloadWriter::new().u64(ranges.len() as u64);
    for r in ranges {
        w = w.str(&r.name).f64(r.min).f64(r.max);
    }
    w
}

pub(crate) fn read_param_ranges(r: &mut PayloadReader<'_>) -> Result<Vec<ParamRange>> {
    let n = r.usize()?;
    (0..n)
        .map(|_| {
            Ok(ParamRange {
                name: r.str()?,
                min: r.f64()?,
                max: r.f64()?,
            })
        })
        .collect()
}

pub fn checkpoint_to_container(ckpt: &Checkpoint) -> Container {
    let mut c = Container::new(CHECKPOINT_KIND);
    c.push(b"NCFG", write_net_config(ckpt.net.config()));
    c.push(b"TCFG", write_train_config(&ckpt.train_config));
    c.push(
        b"NORM",
        PayloadWriter::new().f64(ckpt.transform.y_min).f64(ckpt.transform.y_max),
    );
    c.push(b"PRNG", write_param_ranges(&ckpt.param_ranges));
    for layer in ckpt.net.layers() {
        let (rows, cols) = layer.weights.dim();
        c.push(
            b"LAYR",
            PayloadWriter::new()
                .u64(rows as u64)
                .u64(cols as u64)
                .f64s(layer.weights.as_slice().expect("standard layout"))
                .f64s(layer.bias.as_slice().expect("standard layout")),
        );
    }
    c.push(b"HIST", PayloadWriter::new().f64s(&ckpt.loss_history));
    let ids: Vec<usize> = ckpt.train_member_ids.iter().map(|&i| i as usize).collect();
    c.push(b"TRID", PayloadWriter::new().usizes(&ids));
    c
}

pub fn checkpoint_from_container(c: &Container, path: &Path) -> Result<Checkpoint> {
    c.expect_kind(CHECKPOINT_KIND, path)?;
    let need = |tag: &'static [u8; 4]| {
        c.section(tag)
            .ok_or_else(|| Error::corrupt(path, format!("missing section {}", String::from_utf8_lossy(tag))))
    };
    let mut r = PayloadReader::section(need(b"NCFG")?, path);
    let net_config = read_net_config(&mut r)?;
    r.finish()?;
    let mut r = PayloadReader::section(need(b"TCFG")?, path);
    let train_config = read_train_config(&mut r)?;
    r.finish()?;
    let mut r = PayloadReader::section(need(b"NORM")?, path);
    let transform = NormalizationTransform::new(r.f64()?, r.f64()?)?;
    r.finish()?;
    let mut r = PayloadReader::section(need(b"PRNG")?, path);
    let param_ranges = read_param_ranges(&mut r)?;
    r.finish()?;
    let mut layers = Vec::new();
    for s in c.sections_tagged(b"LAYR") {
        let mut r = PayloadReader::section(s, path);
        let rows = r.usize()?;
        let cols = r.usize()?;
        let w = r.f64s()?;
        let b = r.f64s()?;
        r.finish()?;
        let weights = Array2::from_shape_vec((rows, cols), w)
            .map_err(|_| Error::corrupt(path, "layer weight count does not match its shape header"))?;
        layers.push(Layer {
            weights,
            bias: Array1::from(b),
        });
    }
    let mut r = PayloadReader::section(need(b"HIST")?, path);
    let loss_history = r.f64s()?;
    r.finish()?;
    let mut r = PayloadReader::section(need(b"TRID")?, path);
    let train_member_ids: Vec<u64> = r.usizes()?.into_iter().map(|i| i as u64).collect();
    r.finish()?;
    let net = EvidentialNet::from_layers(net_config, layers)?;
    if param_ranges.len() != net.config().input_dim {
        return Err(Error::corrupt(path, "parameter ranges do not match the network input"));
    }
    Ok(Checkpoint {
        net,
        transform,
        param_ranges,
        train_config,
        loss_history,
        train_member_ids,
    })
}

/// Sidecar path holding the human-readable manifest: `<file>.manifest`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn checkpoint_manifest(ckpt: &Checkpoint) -> String {
    let nc = ckpt.net.config();
    let tc = &ckpt.train_config;
    let mut s = String::new();
    let _ = writeln!(s, "kind = {CHECKPOINT_KIND}");
    let _ = writeln!(s, "format_version = {}", crate::container::FORMAT_VERSION);
    let _ = writeln!(s, "input_dim = {}", nc.input_dim);
    let hidden: Vec<String> = nc.hidden_sizes.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(s, "hidden_sizes = {}", hidden.join(","));
    let _ = writeln!(s, "grid_shape = {}", format_shape(&nc.grid_shape));
    let _ = writeln!(s, "net_seed = {}", nc.seed);
    let _ = writeln!(s, "parameters = {}", ckpt.net.param_count());
    let _ = writeln!(s, "y_min = {:?}", ckpt.transform.y_min);
    let _ = writeln!(s, "y_max = {:?}", ckpt.transform.y_max);
    for r in &ckpt.param_ranges {
        let _ = writeln!(s, "param.{} = [{:?}, {:?}]", r.name, r.min, r.max);
    }
    let _ = writeln!(s, "epochs_trained = {}", ckpt.loss_history.len());
    let _ = writeln!(s, "train_members = {}", ckpt.train_member_ids.len());
    let _ = writeln!(s, "batch_size = {}", tc.batch_size);
    let _ = writeln!(s, "learning_rate = {:?}", tc.learning_rate);
    let _ = writeln!(s, "lambda = {:?}", tc.weights.lambda_reg);
    let _ = writeln!(s, "xi = {:?}", tc.weights.xi_reg);
    let _ = writeln!(s, "train_seed = {}", tc.seed);
    if let Some(last) = ckpt.loss_history.last() {
        let _ = writeln!(s, "final_loss = {last:?}");
    }
    s
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint_to_container(ckpt).write(path)?;
    let mpath = manifest_path(path);
    fs::write(&mpath, checkpoint_manifest(ckpt)).map_err(|e| Error::io(&mpath, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_container(&Container::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trip() {
        let t = NormalizationTransform::new(-3.0, 5.0).unwrap();
        assert_eq!(t.normalize(-3.0), -1.0);
        assert_eq!(t.normalize(5.0), 1.0);
        for y in [-3.0, 0.123, 4.9] {
            assert!((t.denormalize(t.normalize(y)) - y).abs() < 1e-12);
        }
        assert!(NormalizationTransform::new(1.0, 1.0).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.5, -2.0];
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0][..]], &mut state, &cfg).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn adam_hand_computed_first_step() {
        // Step 1: m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2,
        // update = lr * g / (|g| + eps).
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut p = [1.0, 1.0];
        let g = [2.0, -0.5];
        let mut state = AdamState::new(&[2]);
        adam_step(&mut [&mut p[..]], &[&g[..]], &mut state, &cfg).unwrap();
        assert!((p[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (1.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((state.m[0][0] - 0.2).abs() < 1e-15);
        assert!((state.v[0][1] - 0.001 * 0.25).abs() < 1e-18);
    }

    #[test]
    fn adam_constant_gradient_asymptote() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut p = [0.0];
        let mut state = AdamState::new(&[1]);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            adam_step(&mut [&mut p[..]], &[&[-3.0][..]], &mut state, &cfg).unwrap();
            last = p[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-6, "step {last}");
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let cfg = TrainConfig::default();
        let mut p = [0.0; 3];
        let mut state = AdamState::new(&[2]);
        assert!(adam_step(&mut [&mut p[..]], &[&[0.0; 3][..]], &mut state, &cfg).is_err());
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            adam_beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
