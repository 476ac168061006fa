//! Deterministic inputs shared by the benchmarks.

use ser_core::labels::{EmotionClass, NUM_CLASSES};
use ser_core::model::{HeadParams, ModelConfig};
use ser_core::EmbeddingSequence;

/// xorshift64; good enough for filling buffers.
pub struct Fill(u64);

impl Fill {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1)
    }

    pub fn next_f64(&mut self) -> f64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

pub fn embedding(layers: usize, frames: usize, dim: usize, seed: u64) -> EmbeddingSequence {
    let mut e = EmbeddingSequence::zeros(layers, frames, dim, 50.0);
    let mut f = Fill::new(seed);
    for x in e.data.iter_mut() {
        *x = (f.next_f64() * 2.0 - 1.0) as f32;
    }
    e
}

pub fn head(layers: usize, dim: usize, channels: usize, hidden: usize) -> HeadParams {
    let cfg = ModelConfig {
        speech_layers: layers,
        speech_dim: dim,
        conv_channels: channels,
        mlp_hidden: hidden,
        ..ModelConfig::default()
    };
    HeadParams::init(cfg, 0).expect("valid head")
}

/// `n` gold labels over the scored classes with random score rows.
pub fn scored(n: usize, seed: u64) -> (Vec<EmotionClass>, Vec<[f64; NUM_CLASSES]>) {
    let mut f = Fill::new(seed);
    let gold = (0..n).map(|i| EmotionClass::from_index(i % 8).unwrap()).collect();
    let probs = (0..n)
        .map(|_| {
            let mut row = [0.0; NUM_CLASSES];
            for x in &mut row {
                *x = f.next_f64() + 1e-3;
            }
            let z: f64 = row.iter().sum();
            row.map(|x| x / z)
        })
        .collect();
    (gold, probs)
}
