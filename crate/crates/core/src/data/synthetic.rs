//! Deterministic synthetic series for tests, benchmarks and smoke runs.

use crate::tensor::{Rng, Tensor};

use super::RawSeries;

/// Sum-of-sinusoids channels that share one multi-tone driver at
/// different time offsets.
///
/// Channel `c` is `sin(2π t / period + c) + driver(t + offset_c) + noise`.
/// The driver is itself a sum of `tones` sinusoids with random frequencies
/// in `band` (cycles per step), so a channel's future driver is partly
/// visible in a leading channel's past but not in its own.
#[derive(Clone, Debug, PartialEq)]
pub struct LaggedSinusoids {
    pub steps: usize,
    pub period: f64,
    pub offsets: Vec<i64>,
    pub tones: usize,
    pub band: (f64, f64),
    pub driver_amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for LaggedSinusoids {
    fn default() -> Self {
        Self {
            steps: 3000,
            period: 24.0,
            offsets: vec![0, 16, -16],
            tones: 20,
            band: (1.0 / 150.0, 1.0 / 20.0),
            driver_amplitude: 0.8,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl LaggedSinusoids {
    pub fn generate(&self) -> RawSeries {
        let mut rng = Rng::substream(self.seed, "synthetic");
        let tones: Vec<(f64, f64, f64)> = (0..self.tones)
            .map(|_| {
                let f = rng.uniform_in(self.band.0, self.band.1);
                let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
                let amp = rng.normal() * self.driver_amplitude / (self.tones as f64).sqrt();
                (f, phase, amp)
            })
            .collect();
        let driver = |t: f64| -> f64 {
            tones
                .iter()
                .map(|(f, ph, a)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum()
        };
        let c = self.offsets.len();
        let mut data = Vec::with_capacity(self.steps * c);
        for t in 0..self.steps {
            for (ch, &off) in self.offsets.iter().enumerate() {
                let tf = t as f64;
                let seasonal = (std::f64::consts::TAU * tf / self.period + ch as f64).sin();
                data.push(seasonal + driver(tf + off as f64) + self.noise * rng.normal());
            }
        }
        let values = Tensor::new(vec![self.steps, c], data).expect("synthetic shape");
        let names = (0..c).map(|i| format!("ch{i}")).collect();
        RawSeries::new(values, names).expect("synthetic series is finite")
    }
}

/// Independent noisy sinusoids, one per channel, with distinct periods.
pub fn noisy_sines(steps: usize, periods: &[f64], noise: f64, seed: u64) -> RawSeries {
    let mut rng = Rng::substream(seed, "sines");
    let c = periods.len();
    let mut data = Vec::with_capacity(steps * c);
    for t in 0..steps {
        for (ch, p) in periods.iter().enumerate() {
            let v = (std::f64::consts::TAU * t as f64 / p + ch as f64).sin();
            data.push(v + noise * rng.normal());
        }
    }
    let values = Tensor::new(vec![steps, c], data).expect("synthetic shape");
    RawSeries::new(values, (0..c).map(|i| format!("s{i}")).collect()).expect("finite")
}

/// A ramp `value[t][c] = t * channels + c`, handy for index checks.
pub fn ramp(steps: usize, channels: usize) -> RawSeries {
    let data = (0..steps * channels).map(|v| v as f64).collect();
    let values = Tensor::new(vec![steps, channels], data).expect("ramp shape");
    RawSeries::new(values, (0..channels).map(|i| format!("r{i}")).collect()).expect("finite")
}
