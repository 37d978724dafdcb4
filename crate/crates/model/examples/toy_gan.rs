//! Trains the 16x16 toy generator on synthetic faces and reports how well
//! the discriminator separates real from generated images.
//!
//! cargo run --release -p cforge-model --example toy_gan -- [steps] [out.json]

use std::time::Instant;

use cforge_model::stylegen::{GeneratorConfig, TrainConfig};
use cforge_model::{toy, GeneratorCheckpoint, Noise, StyleCodes, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let out = args.next();
    let faces = toy::training_faces::<f32>();
    let cfg = GeneratorConfig::toy();
    let t0 = Instant::now();
    let gan = toy::train_toy_gan::<f32>(steps).expect("training failed");
    println!("trained {steps} steps in {:.1?}", t0.elapsed());
    if let Some(last) = gan.log.last() {
        println!("final L_G {:.4} L_D {:.4} R1 {:.6}", last.g_loss, last.d_loss, last.r1);
    }

    let reals: Vec<_> = faces.iter().take(64).collect();
    let real_logits = gan.discriminator.logits(&Tensor::from_images(&reals).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = gan.generator.map_latent(&Tensor::randn(&[64, cfg.d_latent], 1.0, &mut rng)).unwrap();
    let codes: Vec<_> = w.data.chunks(cfg.d_latent).map(|r| StyleCodes::broadcast(r, cfg.n_styles())).collect();
    let refs: Vec<_> = codes.iter().collect();
    let fakes = gan.generator.synthesize_batch(&refs, &Noise::Seeded(2)).unwrap();
    let fake_logits = gan.discriminator.logits(&fakes);
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    println!(
        "mean logit real {:.3} fake {:.3} gap {:.3}",
        mean(&real_logits),
        mean(&fake_logits),
        mean(&real_logits) - mean(&fake_logits)
    );
    if let Some(path) = out {
        GeneratorCheckpoint::from_models(&gan.generator, Some(&gan.discriminator), steps, TrainConfig::toy().seed)
            .save(path.as_ref())
            .expect("cannot save checkpoint");
        println!("checkpoint written to {path}");
    }
}
