use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{default_class_names, Dataset, EegSample};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Oscillation added to alert-class samples only, with a random phase per
/// sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTone {
    pub frequency_hz: f64,
    pub amplitude: f64,
}

/// Every domain shares the class signal; domains differ only by a
/// per-channel gain and offset applied to signal plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_domains: usize,
    pub samples_per_domain_per_class: usize,
    pub channels: usize,
    pub timesteps: usize,
    pub sample_rate_hz: f64,
    /// DC offset added to every channel of alert-class samples.
    pub class_mean_offset: f64,
    pub class_tone: ClassTone,
    pub domain_gain_range: [f64; 2],
    pub domain_offset_range: [f64; 2],
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_domains: 6,
            samples_per_domain_per_class: 100,
            channels: 8,
            timesteps: 128,
            sample_rate_hz: 128.0,
            class_mean_offset: 0.5,
            class_tone: ClassTone {
                frequency_hz: 10.0,
                amplitude: 0.5,
            },
            domain_gain_range: [0.5, 2.0],
            domain_offset_range: [-1.0, 1.0],
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.num_domains == 0
            || self.samples_per_domain_per_class == 0
            || self.channels == 0
            || self.timesteps == 0
        {
            return bad("synthetic domains, samples, channels and timesteps must be positive".into());
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad(format!("sample rate {} must be positive", self.sample_rate_hz));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be nonnegative", self.noise_std));
        }
        for (name, [lo, hi]) in [
            ("domain_gain_range", self.domain_gain_range),
            ("domain_offset_range", self.domain_offset_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("{name} [{lo}, {hi}] is not an interval"));
            }
        }
        if !self.class_mean_offset.is_finite()
            || !self.class_tone.amplitude.is_finite()
            || !self.class_tone.frequency_hz.is_finite()
        {
            return bad("class signal parameters must be finite".into());
        }
        Ok(())
    }

    pub fn domain_id(i: usize) -> String {
        format!("d{i:02}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTruth {
    pub id: String,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub domains: Vec<DomainTruth>,
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Deterministic under `config.seed`. Within each domain, labels alternate
/// drowsy, alert, drowsy, ... Values are rounded to `f32` so a written and
/// reloaded dataset is bitwise identical.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let (c, t) = (config.channels, config.timesteps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let domains: Vec<DomainTruth> = (0..config.num_domains)
        .map(|i| DomainTruth {
            id: SyntheticConfig::domain_id(i),
            gain: (0..c).map(|_| draw(&mut rng, config.domain_gain_range)).collect(),
            offset: (0..c).map(|_| draw(&mut rng, config.domain_offset_range)).collect(),
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::Configuration(format!("noise distribution: {e}")))?;
    let omega = 2.0 * std::f64::consts::PI * config.class_tone.frequency_hz / config.sample_rate_hz;

    let mut samples = Vec::with_capacity(2 * config.num_domains * config.samples_per_domain_per_class);
    for d in &domains {
        for n in 0..2 * config.samples_per_domain_per_class {
            let label = n % 2;
            let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            let mut v = Vec::with_capacity(c * t);
            for ch in 0..c {
                for step in 0..t {
                    let mut clean = 0.0;
                    if label == 1 {
                        clean = config.class_mean_offset
                            + config.class_tone.amplitude * (omega * step as f64 + phase).sin();
                    }
                    let x = d.gain[ch] * (clean + noise.sample(&mut rng)) + d.offset[ch];
                    v.push(x as f32 as f64);
                }
            }
            samples.push(EegSample {
                signal: Tensor::new(vec![c, t], v)?,
                label,
                subject: d.id.clone(),
            });
        }
    }
    Ok((
        Dataset {
            channels: c,
            timesteps: t,
            sample_rate_hz: config.sample_rate_hz,
            class_names: default_class_names(),
            samples,
        },
        GroundTruth { domains },
    ))
}
