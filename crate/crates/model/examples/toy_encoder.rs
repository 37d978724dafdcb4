//! Trains a toy encoder against a saved toy generator and compares its
//! projections with the average-style baseline on held-out faces.
//!
//! cargo run --release -p cforge-model --example toy_encoder -- gen.json [steps] [lr] [train_iters]

use std::time::Instant;

use cforge_core::metrics::l2_metric;
use cforge_model::encoder::{iterative_project, projection_noise, EncoderTrainConfig};
use cforge_model::{toy, GeneratorCheckpoint};

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("usage: toy_encoder gen.json [steps] [lr] [train_iters]");
    let defaults = EncoderTrainConfig::toy();
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(defaults.steps);
    let lr = args.next().and_then(|s| s.parse().ok()).unwrap_or(defaults.lr);
    let train_iters = args.next().and_then(|s| s.parse().ok()).unwrap_or(defaults.train_iters);
    let cfg = EncoderTrainConfig { steps, lr, train_iters, ..defaults };
    let generator = GeneratorCheckpoint::load(path.as_ref()).unwrap().generator::<f32>().unwrap();

    let t0 = Instant::now();
    let trained = toy::train_toy_encoder(&generator, &cfg).unwrap();
    println!("trained {steps} steps in {:.1?}", t0.elapsed());
    let n = trained.log.len();
    let mean = |rows: &[cforge_model::encoder::EncoderLogRow]| rows.iter().map(|r| r.loss.total).sum::<f64>() / rows.len() as f64;
    println!("total loss first-20 {:.5} last-20 {:.5}", mean(&trained.log[..20]), mean(&trained.log[n - 20..]));

    let held_out = toy::held_out_faces::<f32>(50);
    let baseline = generator.synthesize(&generator.average_codes().unwrap(), &projection_noise()).unwrap();
    let (mut wins, mut refine) = (0, 0);
    let mut sums = [0.0f32; 3];
    for x in &held_out {
        let p = iterative_project(x, &trained.encoder, &generator, 2).unwrap();
        let l_base = l2_metric(x, &baseline).unwrap();
        let l1 = l2_metric(x, &p.intermediates[0]).unwrap();
        let l2 = l2_metric(x, &p.final_image).unwrap();
        sums[0] += l_base;
        sums[1] += l1;
        sums[2] += l2;
        wins += (l2 < l_base) as usize;
        refine += (l2 <= l1) as usize;
    }
    let k = held_out.len() as f32;
    println!("mean L2 average style {:.5} first pass {:.5} second pass {:.5}", sums[0] / k, sums[1] / k, sums[2] / k);
    println!("beats average style on {wins}/{}, second pass no worse on {refine}/{}", held_out.len(), held_out.len());
}
