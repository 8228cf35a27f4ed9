//! End-to-end run on the synthetic bumps ensemble: simulate, train,
//! calibrate and audit coverage.
//!
//! ```text
//! cargo run --release -p evisurro-core --example pipeline -- [epochs] [hidden]
//! ```

use std::time::Instant;

use evisurro_core::conformal::{
    build_table, coverage_audit, Aggregation, CalibrationOptions, IntervalKind, MiscoverageLevel,
};
use evisurro_core::data::{generate_dataset, SimulatorSpec, Split};
use evisurro_core::metrics::correlation_report;
use evisurro_core::network::NetConfig;
use evisurro_core::predict::predict;
use evisurro_core::training::{fit_with_log, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(Ok(300), |s| s.parse())?;
    let hidden: usize = args.get(2).map_or(Ok(64), |s| s.parse())?;
    let t0 = Instant::now();
    let spec = SimulatorSpec::default();
    let ds = generate_dataset(&spec, 128, 200, 200, 7, None)?;
    println!("simulated {} members in {:.1?}", ds.members().len(), t0.elapsed());

    let net = NetConfig {
        input_dim: spec.d,
        hidden_sizes: vec![hidden, hidden],
        grid_shape: spec.grid_shape.clone(),
        seed: 1,
    };
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let ckpt = fit_with_log(&ds, net, cfg, |r| {
        if r.epoch % 50 == 0 || r.epoch == 1 {
            println!(
                "epoch {:5} nll {:.4} reg {:.4} u {:.4} total {:.4}",
                r.epoch, r.nll, r.reg, r.u, r.total
            );
        }
    })?;
    println!("trained in {:.1?}", t1.elapsed());

    let table = build_table(&ckpt, &ds, 0.1, CalibrationOptions::default())?;
    let levels: Vec<MiscoverageLevel> = [0.05, 0.1, 0.2]
        .iter()
        .map(|&a| MiscoverageLevel::new(a))
        .collect::<Result<_, _>>()?;
    let report = coverage_audit(&ckpt, Some(&table), &ds, &levels)?;
    print!("{}", report.summary_table());
    for l in &levels {
        let r = report
            .record(l.value(), IntervalKind::Calibrated, Aggregation::Overall)
            .unwrap();
        println!("level {} calibrated coverage {:.4}", l.value(), r.coverage);
    }

    let mut u = Vec::new();
    let mut s = Vec::new();
    for m in ds.split(Split::Test) {
        u.push(predict(&ckpt, &m.params)?.aleatoric);
        s.push(m.noise_var_f64().unwrap());
    }
    let c = correlation_report(&u, &s)?;
    println!(
        "aleatoric vs true noise variance: voxel {:.3} member {:?}",
        c.voxel_level, c.member_level
    );
    println!("total {:.1?}", t0.elapsed());
    Ok(())
}
