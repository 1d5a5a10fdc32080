// shared fixtures for the integration tests
#![allow(dead_code)]

use detail_core::material::default_vocabulary;
use detail_core::procedural::{generate_pair_sequence, MapPair, ProceduralSpec};
use detail_nets::backbone::{Backbone, BackboneSource};
use detail_nets::gram::{LayerConfig, LossNetwork};
use detail_nets::train::TrainSequence;

pub fn loss_network() -> LossNetwork<f32> {
    LossNetwork::new(Backbone::<f32>::load(&BackboneSource::default()).unwrap(), &LayerConfig::default()).unwrap()
}

pub fn pairs(material: &str, size: usize, frames: usize, seed: u64) -> Vec<MapPair> {
    let spec = ProceduralSpec::preset(material, size, size, frames, seed).unwrap();
    generate_pair_sequence(&spec, &default_vocabulary()).unwrap()
}

/// Training sequence over a two-material vocabulary.
pub fn sequence(material: &str, index: usize, size: usize, frames: usize, seed: u64) -> TrainSequence {
    let label = detail_core::MaterialLabel::new(index, 2).unwrap();
    let pp: Vec<_> = pairs(material, size, frames, seed).into_iter().map(|p| (p.coarse, p.fine)).collect();
    TrainSequence::new(label, &pp).unwrap()
}
