//! Peak-memory and throughput measurement of training runs.
//!
//! Memory is the high-water mark of live tensor payload bytes on the
//! measuring thread, counted from just before the model is constructed, so
//! it covers parameters, optimizer moments, activations, gradients and conv
//! scratch buffers, and excludes anything the caller already holds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BatchSource, TrainConfig, TrainError, Trainer};
use crate::models::{ModelBundle, ModelConfig, Variant};
use crate::tensor::{memory, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub peak_bytes: usize,
    /// Bytes held by parameters and persistent state alone.
    pub param_bytes: usize,
    pub steps: u64,
    pub batch_size: usize,
}

/// Builds a fresh model and trainer and runs `steps` steps, reporting the
/// maximum number of concurrently live bytes. Warm-up is included.
pub fn measure_peak_memory<T: Scalar, S: BatchSource<T>>(
    model: &ModelConfig,
    variant: Variant,
    train: &TrainConfig,
    source: &mut S,
    steps: u64,
) -> Result<MemoryReport, TrainError> {
    let start = memory::live_bytes();
    memory::reset_peak();
    let peak = {
        let bundle = ModelBundle::<T>::new(model.clone(), variant)?;
        let param_bytes = bundle.store.bytes();
        let mut trainer = Trainer::new(bundle, train.clone())?;
        trainer.run(source, steps)?;
        (memory::peak_bytes().saturating_sub(start), param_bytes)
    };
    Ok(MemoryReport {
        peak_bytes: peak.0,
        param_bytes: peak.1,
        steps,
        batch_size: train.batch_size,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub warmup_steps: u64,
    pub timed_steps: u64,
    pub chunks: usize,
    /// Mean iterations per second over the timed window.
    pub iters_per_sec: f64,
    /// Standard deviation of per-chunk iterations per second.
    pub iters_per_sec_std: f64,
    pub seconds: f64,
}

/// Runs `warmup` untimed steps, then `steps` timed steps split into
/// `chunks` equal windows.
pub fn measure_throughput<T: Scalar, S: BatchSource<T>>(
    trainer: &mut Trainer<T>,
    source: &mut S,
    warmup: u64,
    steps: u64,
    chunks: usize,
) -> Result<ThroughputReport, TrainError> {
    if steps == 0 || chunks == 0 || steps % chunks as u64 != 0 {
        return Err(TrainError::Config(format!(
            "timed steps ({steps}) must be a positive multiple of chunks ({chunks})"
        )));
    }
    trainer.run(source, warmup)?;
    let per_chunk = steps / chunks as u64;
    let mut rates = Vec::with_capacity(chunks);
    let total_start = Instant::now();
    for _ in 0..chunks {
        let t0 = Instant::now();
        trainer.run(source, per_chunk)?;
        rates.push(per_chunk as f64 / t0.elapsed().as_secs_f64());
    }
    let seconds = total_start.elapsed().as_secs_f64();
    let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = if rates.len() > 1 {
        rates.iter().map(|r| (r - mean_rate).powi(2)).sum::<f64>() / (rates.len() - 1) as f64
    } else {
        0.0
    };
    Ok(ThroughputReport {
        warmup_steps: warmup,
        timed_steps: steps,
        chunks,
        iters_per_sec: steps as f64 / seconds,
        iters_per_sec_std: var.sqrt(),
        seconds,
    })
}
