//! Deterministic synthetic skeleton actions.
//!
//! Every joint coordinate is a sinusoid. Amplitudes and frequencies are
//! shared by all classes; classes differ only in the phase pattern across
//! joints and coordinates, each class deviating from a shared base pattern
//! by at most `separation` radians per coordinate. No single frame
//! identifies a class while the joint-to-joint timing does. Each instance
//! adds a common phase offset, per-coordinate phase jitter and gaussian
//! noise proportional to the joint's amplitude.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::clip::{encode, Layout, SkeletonClip, PERSONS_MAX};
use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub layout: Layout,
    pub seed: u64,
    /// Noise standard deviation relative to each joint's amplitude.
    pub noise: f64,
    /// Half-width (radians) of the class-specific phase deviation around
    /// the shared phase of each coordinate.
    pub separation: f64,
    /// Standard deviation (radians) of per-instance, per-coordinate phase
    /// jitter.
    pub jitter: f64,
    /// Index of the first generated instance of each class.
    pub first_instance: usize,
}

impl SynthConfig {
    pub fn new(classes: usize, per_class: usize, frames: usize, seed: u64) -> Self {
        SynthConfig {
            classes,
            per_class,
            frames,
            layout: Layout::Custom { joints: 6 },
            seed,
            noise: 0.05,
            separation: 0.3,
            jitter: 0.3,
            first_instance: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.frames == 0 {
            return Err(Error::Config("frame count must be at least 1".into()));
        }
        for (name, v) in [("noise", self.noise), ("separation", self.separation), ("jitter", self.jitter)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, a, b))
}

struct Template {
    amplitude: Vec<f64>,
    frequency: Vec<f64>,
    /// Per class, per coordinate.
    phase: Vec<Vec<f64>>,
}

fn template(cfg: &SynthConfig) -> Template {
    let coords = PERSONS_MAX * cfg.layout.joints_per_person() * 3;
    let mut shared = stream(cfg.seed, u64::MAX, 0);
    let amplitude = (0..coords).map(|_| shared.gen_range(0.5..1.0)).collect();
    let frequency = (0..coords).map(|_| shared.gen_range(1..=3) as f64).collect();
    let base: Vec<f64> = (0..coords).map(|_| shared.gen_range(0.0..TAU)).collect();
    let phase = (0..cfg.classes)
        .map(|k| {
            let mut r = stream(cfg.seed, k as u64, u64::MAX);
            base.iter().map(|&b| b + cfg.separation * r.gen_range(-1.0..1.0)).collect()
        })
        .collect();
    Template {
        amplitude,
        frequency,
        phase,
    }
}

/// Raw clips, class-major: `per_class` instances of class 0, then class 1...
pub fn synth_clips(cfg: &SynthConfig) -> Result<Vec<SkeletonClip>> {
    cfg.validate()?;
    let tpl = template(cfg);
    let joints = cfg.layout.joints_per_person();
    let coords = PERSONS_MAX * joints * 3;
    let mut clips = Vec::with_capacity(cfg.classes * cfg.per_class);
    for k in 0..cfg.classes {
        for i in cfg.first_instance..cfg.first_instance + cfg.per_class {
            let mut r = stream(cfg.seed, k as u64, i as u64);
            let offset = r.gen_range(0.0..TAU);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let jitter: Vec<f64> = (0..coords)
                .map(|_| if cfg.jitter > 0.0 { cfg.jitter * normal.sample(&mut r) } else { 0.0 })
                .collect();
            let mut data = Vec::with_capacity(cfg.frames * coords);
            for t in 0..cfg.frames {
                let time = t as f64 / cfg.frames as f64;
                for c in 0..coords {
                    let a = tpl.amplitude[c];
                    let signal = a * (TAU * tpl.frequency[c] * time + tpl.phase[k][c] + offset + jitter[c]).sin();
                    let noise = if cfg.noise > 0.0 {
                        cfg.noise * a * normal.sample(&mut r)
                    } else {
                        0.0
                    };
                    data.push((signal + noise) as f32);
                }
            }
            clips.push(SkeletonClip::new(cfg.frames, PERSONS_MAX, joints, 3, data, k)?);
        }
    }
    Ok(clips)
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    let samples = synth_clips(cfg)?
        .iter()
        .map(|clip| {
            Ok(Sample {
                tensor: encode(clip, cfg.layout)?,
                label: clip.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        classes: cfg.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_balanced() {
        let cfg = SynthConfig::new(3, 5, 16, 7);
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            assert_eq!(a.samples.iter().filter(|s| s.label == k).count(), 5);
        }
        assert_eq!(a.samples[0].tensor.dims(), [3, 16, 12]);
        let other = synth_generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn noiseless_instances_differ_only_by_phase_offset() {
        let cfg = SynthConfig {
            noise: 0.0,
            jitter: 0.0,
            ..SynthConfig::new(2, 3, 32, 1)
        };
        let clips = synth_clips(&cfg).unwrap();
        let tpl = template(&cfg);
        for clip in &clips {
            // recover the offset from the first coordinate at t = 0, then
            // every value must follow the template with that offset
            let k = clip.label;
            let a0 = tpl.amplitude[0];
            let s0 = (clip.data[0] as f64 / a0).clamp(-1.0, 1.0);
            let s1 = clip.data[clip.data.len() / clip.frames] as f64;
            let candidates = [s0.asin() - tpl.phase[k][0], std::f64::consts::PI - s0.asin() - tpl.phase[k][0]];
            let offset = candidates
                .iter()
                .copied()
                .min_by(|x, y| {
                    let f = |o: f64| (a0 * (TAU * tpl.frequency[0] / 32.0 + tpl.phase[k][0] + o).sin() - s1).abs();
                    f(*x).total_cmp(&f(*y))
                })
                .unwrap();
            let coords = tpl.amplitude.len();
            for t in 0..32 {
                for c in 0..coords {
                    let want = tpl.amplitude[c]
                        * (TAU * tpl.frequency[c] * t as f64 / 32.0 + tpl.phase[k][c] + offset).sin();
                    assert!((clip.data[t * coords + c] as f64 - want).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn first_instance_continues_the_stream() {
        let all = synth_clips(&SynthConfig::new(2, 5, 8, 3)).unwrap();
        let tail = synth_clips(&SynthConfig {
            first_instance: 3,
            ..SynthConfig::new(2, 2, 8, 3)
        })
        .unwrap();
        assert_eq!(tail[0], all[3]);
        assert_eq!(tail[3], all[9]);
    }

    #[test]
    fn rejects_single_class() {
        assert!(matches!(synth_generate(&SynthConfig::new(1, 5, 16, 0)), Err(Error::Config(_))));
    }
}
