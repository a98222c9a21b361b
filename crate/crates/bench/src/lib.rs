//! Benchmark fixtures shared by the criterion benches.

use sarnas_core::data::{synth_generate, Batch, SynthConfig};

/// A synthetic desk-sized batch: (B, 3, 16, 12).
pub fn desk_batch(batch: usize) -> Batch<f32> {
    let data = synth_generate(&SynthConfig::new(3, batch.div_ceil(3), 16, 7)).expect("synthetic data");
    let idx: Vec<usize> = (0..batch).collect();
    data.batch(&idx).expect("batch")
}
