//! The 16x16 toy setup shared by examples, tests and the CLI: synthetic
//! training faces, a trained generator and a trained encoder.

use cforge_core::synthetic::toy_faces;
use cforge_core::{ImageBuffer, Result};

use crate::encoder::{train_encoder, EncoderConfig, EncoderTrainConfig, LossAdapters, TrainedEncoder};
use crate::real::Real;
use crate::stylegen::{train_generator, Generator, GeneratorConfig, TrainConfig, TrainedGan};

pub const TOY_RESOLUTION: usize = 16;
pub const TOY_TRAIN_SEED: u64 = 7;
pub const TOY_HELD_OUT_SEED: u64 = 99;
pub const TOY_ADAPTER_SEED: u64 = 5;

/// 256 faces, alternating real-like and caricature-like.
pub fn training_faces<T: Real>() -> Vec<ImageBuffer<T>> {
    toy_faces(256, TOY_RESOLUTION, TOY_TRAIN_SEED).into_iter().map(|(i, _)| i).collect()
}

/// Faces never seen in training.
pub fn held_out_faces<T: Real>(count: usize) -> Vec<ImageBuffer<T>> {
    toy_faces(count, TOY_RESOLUTION, TOY_HELD_OUT_SEED).into_iter().map(|(i, _)| i).collect()
}

pub fn train_toy_gan<T: Real>(steps: usize) -> Result<TrainedGan<T>> {
    let train = TrainConfig {
        steps,
        ..TrainConfig::toy()
    };
    train_generator(&training_faces(), &GeneratorConfig::toy(), &train, None)
}

pub fn adapters<T: Real>() -> LossAdapters<T> {
    LossAdapters::stub(TOY_ADAPTER_SEED)
}

pub fn train_toy_encoder<T: Real>(generator: &Generator<T>, train: &EncoderTrainConfig) -> Result<TrainedEncoder<T>> {
    train_encoder(&training_faces(), generator, &EncoderConfig::toy(), train, &adapters(), None)
}
