//! Skeleton clips, their tensor encoding, on-disk format and datasets.

pub mod clip;
pub mod io;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use clip::{encode, select_persons, uniform_sample, ActionTensor, Layout, SkeletonClip, PERSONS_MAX};
pub use synth::{synth_clips, synth_generate, SynthConfig};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tensor: ActionTensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
}

/// A stacked mini-batch in (B, 3, T, N) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub x: Vec<S>,
    pub dims: [usize; 4],
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Input dims (3, T, N) shared by every sample.
    pub fn input_dims(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| s.tensor.dims())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            classes: self.classes,
        }
    }

    /// Seeded shuffle, then the first `round(fraction * len)` samples go to
    /// the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction must be in [0, 1], got {fraction}")));
        }
        let order = shuffled(self.len(), seed);
        let cut = (fraction * self.len() as f64).round() as usize;
        Ok((self.subset(&order[..cut]), self.subset(&order[cut..])))
    }

    pub fn batch<S: Real>(&self, indices: &[usize]) -> Result<Batch<S>> {
        let first = indices
            .first()
            .ok_or_else(|| Error::Input("cannot build an empty batch".into()))?;
        let [c, t, n] = self.samples[*first].tensor.dims();
        let mut x = Vec::with_capacity(indices.len() * c * t * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            if s.tensor.dims() != [c, t, n] {
                return Err(Error::Input(format!(
                    "sample {i} has dims {:?}, batch expects {:?}",
                    s.tensor.dims(),
                    [c, t, n]
                )));
            }
            if s.label >= self.classes {
                return Err(Error::Input(format!("sample {i} has label {} >= {} classes", s.label, self.classes)));
            }
            x.extend(s.tensor.data.iter().map(|&v| S::of(v as f64)));
            labels.push(s.label);
        }
        Ok(Batch {
            x,
            dims: [indices.len(), c, t, n],
            labels,
        })
    }

    /// Index chunks of at most `size`, in seeded shuffled order.
    pub fn batch_indices(&self, size: usize, seed: u64) -> Vec<Vec<usize>> {
        shuffled(self.len(), seed).chunks(size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Loads every clip listed in `dir/manifest.tsv`. Clips with more than
    /// two persons keep the two most confident; all are resampled to
    /// `frames`. With `center`, each clip's per-channel mean over present
    /// values is subtracted before encoding.
    pub fn load_dir(dir: &Path, frames: usize, layout: Layout, center: bool) -> Result<Dataset> {
        let manifest = io::read_manifest(dir)?;
        if manifest.is_empty() {
            return Err(Error::Input(format!("{} lists no clips", dir.join(io::MANIFEST).display())));
        }
        let mut samples = Vec::with_capacity(manifest.len());
        let mut classes = 0;
        for entry in &manifest {
            let path = dir.join(&entry.path);
            let mut clip = io::load_clip(&path, entry.label)?;
            if clip.persons > PERSONS_MAX {
                clip = select_persons(&clip)?.0;
            }
            let mut clip = uniform_sample(&clip, frames)?;
            if center {
                center_clip(&mut clip);
            }
            let tensor = encode(&clip, layout).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
            classes = classes.max(entry.label + 1);
            samples.push(Sample {
                tensor,
                label: entry.label,
            });
        }
        Ok(Dataset {
            samples,
            classes: classes.max(2),
        })
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn center_clip(clip: &mut SkeletonClip) {
    let c = clip.channels;
    let mut sum = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for (i, &v) in clip.data.iter().enumerate() {
        if v != 0.0 {
            sum[i % c] += v as f64;
            count[i % c] += 1;
        }
    }
    for (i, v) in clip.data.iter_mut().enumerate() {
        let ch = i % c;
        if *v != 0.0 && count[ch] > 0 {
            *v -= (sum[ch] / count[ch] as f64) as f32;
        }
    }
}

/// Writes clips as `clip_<i>.skl` plus a manifest.
pub fn save_dir(dir: &Path, clips: &[SkeletonClip]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.skl");
        io::save_clip(clip, &dir.join(&name))?;
        entries.push(io::ManifestEntry {
            path: name.into(),
            label: clip.label,
        });
    }
    io::write_manifest(dir, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        synth_generate(&SynthConfig::new(2, 5, 8, 3)).unwrap()
    }

    #[test]
    fn split_partitions() {
        let d = tiny();
        let (a, b) = d.split(0.5, 9).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let mut all: Vec<_> = a.samples.iter().chain(&b.samples).map(|s| s.tensor.data[0].to_bits()).collect();
        let mut orig: Vec<_> = d.samples.iter().map(|s| s.tensor.data[0].to_bits()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(d.split(0.5, 9).unwrap(), (a, b));
    }

    #[test]
    fn batch_stacks_in_order() {
        let d = tiny();
        let b: Batch<f32> = d.batch(&[3, 7]).unwrap();
        assert_eq!(b.dims, [2, 3, 8, 12]);
        let per = 3 * 8 * 12;
        assert_eq!(&b.x[..per], &d.samples[3].tensor.data[..]);
        assert_eq!(&b.x[per..], &d.samples[7].tensor.data[..]);
        assert_eq!(b.labels, vec![d.samples[3].label, d.samples[7].label]);
        assert!(d.batch::<f32>(&[]).is_err());
    }

    #[test]
    fn batch_indices_cover_everything_once() {
        let d = tiny();
        let chunks = d.batch_indices(3, 1);
        assert_eq!(chunks.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut flat: Vec<usize> = chunks.concat();
        flat.sort();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(2, 2, 8, 4);
        save_dir(dir.path(), &synth_clips(&cfg).unwrap()).unwrap();
        let loaded = Dataset::load_dir(dir.path(), 8, cfg.layout, false).unwrap();
        let direct = synth_generate(&cfg).unwrap();
        assert_eq!(loaded.len(), 4);
        for (a, b) in loaded.samples.iter().zip(&direct.samples) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
    }
}
