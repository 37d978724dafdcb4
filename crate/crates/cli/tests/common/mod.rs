#![allow(dead_code)]

use std::path::Path;

use cforge::models::Models;
use cforge_core::imaging::encode_png;
use cforge_core::ImageBuffer;
use cforge_model::{toy, Encoder, EncoderCheckpoint, EncoderConfig, Generator, GeneratorCheckpoint, GeneratorConfig};

/// Untrained toy generator with an estimated average style.
pub fn generator(seed: u64) -> Generator<f64> {
    let mut g = Generator::<f64>::new(GeneratorConfig::toy(), seed).unwrap();
    g.w_avg = Some(g.estimate_w_avg(64, seed).unwrap());
    g
}

pub fn encoder(g: &Generator<f64>, seed: u64) -> Encoder<f64> {
    Encoder::<f64>::new(EncoderConfig::toy(), &g.config, seed).unwrap()
}

pub fn models() -> Models {
    let g = generator(3);
    let e = encoder(&g, 4);
    Models::from_parts(g, e).unwrap()
}

/// Writes a bound generator and encoder checkpoint pair into `dir`.
pub fn write_checkpoints(dir: &Path, gen_seed: u64) -> (std::path::PathBuf, std::path::PathBuf) {
    let g = generator(gen_seed);
    let e = encoder(&g, 4);
    let gp = dir.join(format!("generator-{gen_seed}.json"));
    let ep = dir.join(format!("encoder-{gen_seed}.json"));
    GeneratorCheckpoint::from_models(&g, None, 0, gen_seed).save(&gp).unwrap();
    EncoderCheckpoint::from_model(&e, g.params.hash(), 0, 4).save(&ep).unwrap();
    (gp, ep)
}

pub fn face(i: usize) -> ImageBuffer<f64> {
    toy::held_out_faces::<f64>(i + 1).pop().unwrap()
}

pub fn face_png(i: usize) -> Vec<u8> {
    encode_png(&face(i)).unwrap()
}
