// scratch: isolate the loss path by optimizing a raw velocity field
use veloreg::diffeo::{integrate, IntegrationConfig};
use veloreg::harness::{generate_pair, SyntheticSpec};
use veloreg::losses::{lcc, loss_from_velocity, LossConfig};
use veloreg::metrics::{dice, warp_mask};
use veloreg::optimizer::{adam_step, AdamState};
use veloreg::network::{Param, WeightSet};
use veloreg::tensor::Tape;

fn main() {
    let pair = generate_pair::<f64>(&SyntheticSpec::desk(42)).unwrap();
    println!(
        "lcc(moving, fixed) = {:.4}",
        lcc(&pair.moving, &pair.fixed, 9).unwrap()
    );
    println!(
        "lcc(fixed, fixed)  = {:.6}",
        lcc(&pair.fixed, &pair.fixed, 9).unwrap()
    );
    // oracle: warp moving by the true field, should be ~1
    let warped = veloreg::diffeo::warp(&pair.moving, &pair.ground_truth).unwrap();
    println!(
        "lcc(warp(moving, gt), fixed) = {:.6}",
        lcc(&warped, &pair.fixed, 9).unwrap()
    );

    // direct optimization of the velocity field
    let n = 64usize;
    let mut vel = WeightSet::<f64> {
        params: vec![Param {
            name: "v".into(),
            shape: vec![2, n, n],
            data: vec![0.0; 2 * n * n],
        }],
    };
    let mut adam = AdamState::new(&vel, 0.25, 0.9, 0.999, 1e-8);
    let cfg = LossConfig::default();
    let ic = IntegrationConfig::default();
    for it in 0..120 {
        let mut tape = Tape::new();
        let v = tape
            .leaf(vec![2, n, n], vel.params[0].data.clone(), true)
            .unwrap();
        let graph =
            loss_from_velocity(&mut tape, &pair.moving, &pair.fixed, v, &[], &cfg, &ic).unwrap();
        let loss = tape.scalar_value(graph.loss);
        let gm = tape.backward(graph.loss).unwrap();
        let g = gm.grad(v).unwrap().to_vec();
        if it % 20 == 0 {
            let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!("it {:3}: loss {:+.4} |g| {:.3e}", it, loss, gn);
        }
        adam_step(&mut vel, &[g], &mut adam).unwrap();
    }
    let field = veloreg::volume::VectorField::new(vec![n, n], 2, vel.params[0].data.clone()).unwrap();
    let phi = integrate(&field, ic.steps).unwrap();
    let mut before = 0.0;
    let mut after = 0.0;
    for (mm, fm) in pair.moving_masks.iter().zip(&pair.fixed_masks) {
        before += dice(mm, fm).unwrap();
        after += dice(&warp_mask(mm, &phi).unwrap(), fm).unwrap();
    }
    let k = pair.moving_masks.len() as f64;
    println!("direct-opt dice: {:.3} -> {:.3}", before / k, after / k);
}
