// scratch: desk-scale training probe
use std::time::Instant;
use veloreg::diffeo::IntegrationConfig;
use veloreg::harness::{evaluate_pairs, generate_dataset, SyntheticSpec};
use veloreg::losses::LossConfig;
use veloreg::network::BackboneConfig;
use veloreg::optimizer::{train, NoiseSchedule, TrainConfig};
use veloreg::posterior::PosteriorConfig;
use veloreg::volume::Volume;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lambda: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let n_train: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);

    let t0 = Instant::now();
    let spec = SyntheticSpec::desk(1000);
    let all = generate_dataset::<f64>(&spec, n_train + 6 + 10).unwrap();
    println!("dataset generated in {:.1?}", t0.elapsed());

    let train_pairs: Vec<(Volume<f64>, Volume<f64>)> = all[..n_train]
        .iter()
        .map(|p| (p.moving.clone(), p.fixed.clone()))
        .collect();
    let val_pairs: Vec<(Volume<f64>, Volume<f64>)> = all[n_train..n_train + 6]
        .iter()
        .map(|p| (p.moving.clone(), p.fixed.clone()))
        .collect();
    let test = &all[n_train + 6..];

    let backbone = BackboneConfig::default_2d();
    let loss_cfg = LossConfig {
        lambda_smooth: lambda,
        ..LossConfig::default()
    };
    let mut tc = TrainConfig::desk_default(iters);
    tc.seed = 7;
    tc.schedule = NoiseSchedule::fixed_from_lr(tc.eta);
    tc.val_subset = 2;
    tc.val_every = 10;
    if let Some(lr) = std::env::args().nth(4).and_then(|s| s.parse::<f64>().ok()) {
        tc.eta = lr;
        tc.schedule = NoiseSchedule::fixed_from_lr(lr);
    }

    let t1 = Instant::now();
    let out = train::<f64, _, _>(
        &backbone,
        train_pairs.as_slice(),
        val_pairs.as_slice(),
        &loss_cfg,
        &IntegrationConfig::default(),
        &tc,
    )
    .unwrap();
    let dt = t1.elapsed();
    println!(
        "trained {} iters in {:.1?} ({:.0} ms/iter)",
        iters,
        dt,
        dt.as_millis() as f64 / iters as f64
    );
    for r in out.curves.iter().step_by((iters / 10).max(1)) {
        println!(
            "  it {:5}  train {:+.4}  val {:+.4}  step {:.2e}",
            r.iteration, r.train_loss, r.val_loss, r.step_size
        );
    }
    let last = out.curves.last().unwrap();
    println!("  final: train {:+.4} val {:+.4}", last.train_loss, last.val_loss);

    let rows = evaluate_pairs(
        &backbone,
        &out.store,
        test,
        &IntegrationConfig::default(),
        &PosteriorConfig::default(),
    )
    .unwrap();
    let n = rows.len() as f64;
    let mean_before: f64 = rows.iter().map(|r| r.dice_before).sum::<f64>() / n;
    let mean_after: f64 = rows.iter().map(|r| r.dice_after).sum::<f64>() / n;
    let mean_fold: f64 = rows.iter().map(|r| r.fold_pct).sum::<f64>() / n;
    println!(
        "eval on {} pairs: dice {:.3} -> {:.3}, fold {:.4}%  (lambda {})",
        test.len(),
        mean_before,
        mean_after,
        mean_fold,
        lambda
    );
}
