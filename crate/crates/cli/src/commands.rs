use std::fs;
use std::io::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::Path;

use serde::Serialize;

use evisurro_core::conformal::{
    build_table, coverage_audit, CalibrationOptions, CalibrationTable, MiscoverageLevel, TailAllocation,
};
use evisurro_core::data::{
    generate_dataset, load_dataset, save_dataset, NoiseModel, SimulatorSpec, SparseRegion, Split,
};
use evisurro_core::evidential::LossWeights;
use evisurro_core::grid::{format_shape, parse_shape};
use evisurro_core::metrics::{abs_error, correlation_report, psnr, ssim, CorrelationReport};
use evisurro_core::network::NetConfig;
use evisurro_core::predict::{interval_field, predict as predict_field};
use evisurro_core::training::{
    continue_training, fit_with_log, load_checkpoint, save_checkpoint, EpochRecord, TrainConfig,
};

use crate::config::{self, require, CalibrateOpts, EvaluateOpts, PredictOpts, ServeOpts, SimulateOpts, TrainOpts};
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn levels_from(raw: &[f64]) -> Result<Vec<MiscoverageLevel>, CliError> {
    raw.iter()
        .map(|&a| MiscoverageLevel::new(a).map_err(|_| CliError::Config(format!("level {a} is outside (0, 1)"))))
        .collect()
}

/// Files this tool writes into a dataset directory.
fn is_dataset_file(name: &str) -> bool {
    name == "manifest.txt" || (name.starts_with("member_") && name.ends_with(".f32"))
}

/// Refuses a non-empty directory unless `force`; with `force`, removes only
/// the files `owned` recognizes and fails if anything else remains.
fn prepare_out_dir(dir: &Path, force: bool, owned: fn(&str) -> bool) -> Result<(), CliError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e.collect::<Result<Vec<_>, _>>().map_err(|e| io_err(dir, e))?,
        Err(_) => return fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
    };
    if entries.is_empty() {
        return Ok(());
    }
    if !force {
        return Err(CliError::Config(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        if owned(&name) {
            fs::remove_file(e.path()).map_err(|err| io_err(&e.path(), err))?;
        } else {
            return Err(CliError::Config(format!(
                "refusing to overwrite {}: it contains unrelated file {name}",
                dir.display()
            )));
        }
    }
    Ok(())
}

pub fn simulate(o: SimulateOpts) -> Result<(), CliError> {
    eprint!("{}", config::echo("simulate", &o));
    let out = require(&o.out, "out")?;
    let noise: NoiseModel = o.noise.as_deref().unwrap_or_default().parse()?;
    let spec = SimulatorSpec {
        name: "bumps".into(),
        d: o.d.unwrap_or(3),
        grid_shape: parse_shape(o.grid.as_deref().unwrap_or_default())?,
        noise_model: noise,
        seed: o.noise_seed.unwrap_or(0),
    };
    spec.validate()?;
    let sparse = match (&o.sparse_lo, &o.sparse_hi) {
        (Some(lo), Some(hi)) => Some(SparseRegion {
            lo: lo.clone(),
            hi: hi.clone(),
        }),
        (None, None) => None,
        _ => {
            return Err(CliError::Config(
                "sparse_lo and sparse_hi must be given together".into(),
            ))
        }
    };
    prepare_out_dir(&out, o.force.unwrap_or(false), is_dataset_file)?;
    let ds = generate_dataset(
        &spec,
        o.train.unwrap_or(0),
        o.cal.unwrap_or(0),
        o.test.unwrap_or(0),
        o.seed.unwrap_or(0),
        sparse.as_ref(),
    )?;
    save_dataset(&ds, &out)?;
    println!(
        "wrote {} members to {} (train {}, calibration {}, test {}), grid {}",
        ds.members().len(),
        out.display(),
        ds.count(Split::Train),
        ds.count(Split::Calibration),
        ds.count(Split::Test),
        format_shape(ds.grid_shape())
    );
    Ok(())
}

pub fn train(o: TrainOpts) -> Result<(), CliError> {
    eprint!("{}", config::echo("train", &o));
    let data = require(&o.data, "data")?;
    let out = require(&o.out, "out")?;
    let log_path = require(&o.log, "log")?;
    let ds = load_dataset(&data)?;
    let d = TrainConfig::default();
    let train_config = TrainConfig {
        epochs: o.epochs.unwrap_or(d.epochs),
        batch_size: o.batch_size.unwrap_or(d.batch_size),
        learning_rate: o.lr.unwrap_or(d.learning_rate),
        weights: LossWeights::new(
            o.lambda.unwrap_or(d.weights.lambda_reg),
            o.xi.unwrap_or(d.weights.xi_reg),
        )
        .map_err(|e| CliError::Config(e.to_string()))?,
        seed: o.seed.unwrap_or(d.seed),
        early_stopping_patience: o.patience.unwrap_or(d.early_stopping_patience),
        ..d
    };
    train_config.validate()?;

    let mut log = String::new();
    if let Some(path) = &o.resume {
        // A resumed run continues the previous log as well as the loss history.
        if let Ok(prev) = fs::read_to_string(config::suffixed(path, ".log.jsonl")) {
            log.push_str(&prev);
        }
    }
    let mut last = None;
    let mut on_epoch = |r: &EpochRecord| {
        log.push_str(&serde_json::to_string(r).expect("record serializes"));
        log.push('\n');
        if r.epoch.is_multiple_of(50) || r.epoch == 1 {
            eprintln!(
                "epoch {:>6}  nll {:+.5}  reg {:.5}  u {:.5}  total {:+.5}",
                r.epoch, r.nll, r.reg, r.u, r.total
            );
        }
        last = Some(*r);
    };
    let result = match &o.resume {
        Some(path) => {
            let mut ckpt = load_checkpoint(path)?;
            ckpt.train_config = train_config;
            continue_training(ckpt, &ds, &mut on_epoch)
        }
        None => {
            let net = NetConfig {
                input_dim: ds.input_dim(),
                hidden_sizes: o.hidden.clone().unwrap_or_default(),
                grid_shape: ds.grid_shape().to_vec(),
                seed: o.net_seed.unwrap_or(0),
            };
            net.validate()?;
            fit_with_log(&ds, net, train_config, &mut on_epoch)
        }
    };
    // Keep the partial log for diagnosis even when training aborts.
    write_file(&log_path, &log)?;
    let ckpt = result?;
    save_checkpoint(&ckpt, &out)?;
    if let Some(r) = last {
        println!(
            "trained {} epochs ({} total); final loss {:.6}; checkpoint {}",
            ckpt.train_config.epochs,
            ckpt.loss_history.len(),
            r.total,
            out.display()
        );
    }
    Ok(())
}

pub fn calibrate(o: CalibrateOpts) -> Result<(), CliError> {
    eprint!("{}", config::echo("calibrate", &o));
    let ckpt = load_checkpoint(&require(&o.checkpoint, "checkpoint")?)?;
    let ds = load_dataset(&require(&o.data, "data")?)?;
    let out = require(&o.out, "out")?;
    let tails: TailAllocation = o.tails.as_deref().unwrap_or("split").parse()?;
    let options = CalibrationOptions {
        pooled: o.pooled.unwrap_or(false),
        tails,
    };
    let table = build_table(&ckpt, &ds, o.delta.unwrap_or(0.1), options)?;
    table.save(&out)?;
    println!(
        "calibration table {}: n = {}, delta = {}, tails = {}, pooled = {}",
        out.display(),
        table.n(),
        table.delta(),
        tails,
        options.pooled
    );
    println!("max attainable confidence: {:.6}", table.max_attainable_confidence());
    for l in levels_from(o.levels.as_deref().unwrap_or_default())? {
        if !table.is_attainable(l) {
            println!(
                "warning: level {} (confidence {}) is unattainable with n = {}",
                l.value(),
                l.confidence(),
                table.n()
            );
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct QualitySummary {
    data_range: f64,
    psnr_mean: f64,
    ssim_mean: Option<f64>,
    per_member: Vec<MemberQuality>,
}

#[derive(Debug, Serialize)]
struct MemberQuality {
    member_id: u64,
    psnr: f64,
    ssim: Option<f64>,
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    quality: QualitySummary,
    epistemic_vs_abs_error: CorrelationReport,
    aleatoric_vs_abs_error: CorrelationReport,
    /// Only for datasets that carry the true noise variance.
    aleatoric_vs_true_noise_var: Option<CorrelationReport>,
}

fn is_report_file(name: &str) -> bool {
    matches!(
        name,
        "coverage.jsonl" | "coverage.txt" | "coverage_maps.json" | "metrics.json" | "config.toml"
    )
}

pub fn evaluate(o: EvaluateOpts) -> Result<(), CliError> {
    let echo = config::echo("evaluate", &o);
    eprint!("{echo}");
    let ckpt = load_checkpoint(&require(&o.checkpoint, "checkpoint")?)?;
    let table = o.table.as_deref().map(CalibrationTable::load).transpose()?;
    let ds = load_dataset(&require(&o.data, "data")?)?;
    let out = require(&o.out, "out")?;
    let levels = levels_from(o.levels.as_deref().unwrap_or_default())?;
    if ds.count(Split::Test) == 0 {
        return Err(CliError::Data(
            "the dataset has no test split; nothing to evaluate".into(),
        ));
    }
    prepare_out_dir(&out, o.force.unwrap_or(false), is_report_file)?;

    let report = coverage_audit(&ckpt, table.as_ref(), &ds, &levels)?;

    let data_range = o.data_range.unwrap_or(ckpt.transform.y_max - ckpt.transform.y_min);
    let shape = ds.grid_shape().to_vec();
    let ssim_ok = shape.iter().all(|&n| n >= 11);
    let (mut epi, mut ale, mut err, mut noise) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut per_member = Vec::new();
    for m in ds.split(Split::Test) {
        let p = predict_field(&ckpt, &m.params)?;
        let truth = m.field_f64();
        per_member.push(MemberQuality {
            member_id: m.member_id,
            psnr: psnr(&p.mean, &truth, data_range)?,
            ssim: if ssim_ok {
                Some(ssim(&p.mean, &truth, &shape, data_range)?)
            } else {
                None
            },
        });
        err.push(abs_error(&p.mean, &truth));
        epi.push(p.epistemic);
        ale.push(p.aleatoric);
        if let Some(nv) = m.noise_var_f64() {
            noise.push(nv);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let psnrs: Vec<f64> = per_member.iter().map(|m| m.psnr).collect();
    let ssims: Vec<f64> = per_member.iter().filter_map(|m| m.ssim).collect();
    let metrics = MetricsReport {
        quality: QualitySummary {
            data_range,
            psnr_mean: mean(&psnrs),
            ssim_mean: (!ssims.is_empty()).then(|| mean(&ssims)),
            per_member,
        },
        epistemic_vs_abs_error: correlation_report(&epi, &err)?,
        aleatoric_vs_abs_error: correlation_report(&ale, &err)?,
        aleatoric_vs_true_noise_var: if noise.len() == ale.len() {
            correlation_report(&ale, &noise).ok()
        } else {
            None
        },
    };

    write_file(&out.join("coverage.jsonl"), report.to_jsonl())?;
    write_file(&out.join("coverage.txt"), report.summary_table())?;
    write_file(&out.join("coverage_maps.json"), to_json(&report.maps))?;
    write_file(&out.join("metrics.json"), to_json(&metrics))?;
    write_file(&out.join("config.toml"), &echo)?;
    print!("{}", report.summary_table());
    println!(
        "PSNR {:.3} dB{}; voxel corr(epistemic, |err|) {:.4}",
        metrics.quality.psnr_mean,
        metrics
            .quality
            .ssim_mean
            .map(|s| format!(", SSIM {s:.4}"))
            .unwrap_or_default(),
        metrics.epistemic_vs_abs_error.voxel_level
    );
    println!("reports written to {}", out.display());
    Ok(())
}

pub fn predict(o: PredictOpts) -> Result<(), CliError> {
    eprint!("{}", config::echo("predict", &o));
    let ckpt = load_checkpoint(&require(&o.checkpoint, "checkpoint")?)?;
    let table = o.table.as_deref().map(CalibrationTable::load).transpose()?;
    let params = require(&o.params, "params")?;
    if params.len() != ckpt.param_ranges.len() {
        return Err(CliError::Config(format!(
            "expected {} parameters, got {}",
            ckpt.param_ranges.len(),
            params.len()
        )));
    }
    for (r, &v) in ckpt.param_ranges.iter().zip(&params) {
        if !r.contains(v) {
            return Err(CliError::Config(format!(
                "{} = {v} lies outside [{}, {}]",
                r.name, r.min, r.max
            )));
        }
    }
    let prediction = predict_field(&ckpt, &params)?;
    let mut doc = serde_json::to_value(&prediction).expect("prediction serializes");
    if let Some(level) = o.level {
        let a = MiscoverageLevel::new(1.0 - level)
            .map_err(|_| CliError::Config(format!("level {level} is outside (0, 1)")))?;
        let calibrated = o.calibrated.unwrap_or(false);
        if calibrated {
            let t = table
                .as_ref()
                .ok_or_else(|| CliError::Config("--calibrated needs --table".into()))?;
            if !t.is_attainable(a) {
                return Err(CliError::Config(format!(
                    "confidence {level} is unattainable with {} calibration members; max attainable confidence is {}",
                    t.n(),
                    t.max_attainable_confidence()
                )));
            }
        }
        let iv = interval_field(&ckpt, table.as_ref(), &params, a, calibrated)?;
        doc["interval"] = serde_json::to_value(&iv).expect("interval serializes");
    }
    let text = serde_json::to_string(&doc).expect("document serializes");
    match &o.out {
        Some(path) => write_file(path, text + "\n"),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| CliError::Data(e.to_string()))
        }
    }
}

pub fn serve(o: ServeOpts) -> Result<(), CliError> {
    eprint!("{}", config::echo("serve", &o));
    let host: IpAddr = o
        .host
        .as_deref()
        .unwrap_or("127.0.0.1")
        .parse()
        .map_err(|e| CliError::Config(format!("invalid host: {e}")))?;
    let cfg = evisurro_server::ServeConfig {
        addr: SocketAddr::new(host, o.port.unwrap_or(8080)),
        checkpoint: require(&o.checkpoint, "checkpoint")?,
        table: o.table.clone(),
        cors_origin: o.cors.clone(),
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Config(e.to_string()))?;
    rt.block_on(evisurro_server::serve(cfg))
        .map_err(|e| CliError::Data(format!("server stopped: {e}")))
}
