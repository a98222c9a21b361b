use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Maximum number of persons encoded per clip.
pub const PERSONS_MAX: usize = 2;

/// A skeleton sequence: `frames x persons x joints x channels` values,
/// row-major. Absent persons in a frame are stored as zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonClip {
    pub frames: usize,
    pub persons: usize,
    pub joints: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub label: usize,
}

impl SkeletonClip {
    pub fn new(frames: usize, persons: usize, joints: usize, channels: usize, data: Vec<f32>, label: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Input("clip has no frames".into()));
        }
        if joints == 0 || channels == 0 {
            return Err(Error::Input("clip needs at least one joint and one channel".into()));
        }
        let want = frames * persons * joints * channels;
        if data.len() != want {
            return Err(Error::Input(format!("clip expects {want} values, found {}", data.len())));
        }
        Ok(SkeletonClip {
            frames,
            persons,
            joints,
            channels,
            data,
            label,
        })
    }

    fn person_len(&self) -> usize {
        self.joints * self.channels
    }

    fn frame_len(&self) -> usize {
        self.persons * self.person_len()
    }

    /// Values of one person in one frame, joint-major.
    pub fn person(&self, frame: usize, person: usize) -> &[f32] {
        let start = frame * self.frame_len() + person * self.person_len();
        &self.data[start..start + self.person_len()]
    }

    pub fn value(&self, frame: usize, person: usize, joint: usize, channel: usize) -> f32 {
        self.person(frame, person)[joint * self.channels + channel]
    }
}

/// Joint-column layout of an encoded action tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// 25 joints per person, N = 50.
    Ntu,
    /// 18 joints per person with (x, y, confidence), N = 36.
    Kinetics,
    Custom { joints: usize },
}

impl Layout {
    pub fn joints_per_person(self) -> usize {
        match self {
            Layout::Ntu => 25,
            Layout::Kinetics => 18,
            Layout::Custom { joints } => joints,
        }
    }

    /// Width N of the joint axis.
    pub fn columns(self) -> usize {
        PERSONS_MAX * self.joints_per_person()
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Ntu => f.write_str("ntu"),
            Layout::Kinetics => f.write_str("kinetics"),
            Layout::Custom { joints } => write!(f, "custom{joints}"),
        }
    }
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ntu" => Ok(Layout::Ntu),
            "kinetics" => Ok(Layout::Kinetics),
            _ => s
                .strip_prefix("custom")
                .and_then(|j| j.parse().ok())
                .filter(|&j: &usize| j > 0)
                .map(|joints| Layout::Custom { joints })
                .ok_or_else(|| format!("unknown layout '{s}' (expected ntu, kinetics or custom<J>)")),
        }
    }
}

/// One encoded action instance: (3, T, N) values.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTensor {
    pub frames: usize,
    pub columns: usize,
    pub layout: Layout,
    pub data: Vec<f32>,
}

impl ActionTensor {
    pub const CHANNELS: usize = 3;

    pub fn dims(&self) -> [usize; 3] {
        [Self::CHANNELS, self.frames, self.columns]
    }

    pub fn at(&self, channel: usize, frame: usize, column: usize) -> f32 {
        self.data[(channel * self.frames + frame) * self.columns + column]
    }
}

/// Source frame indices chosen when resampling `source` frames to `target`.
pub fn sample_indices(source: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| i * source / target).collect()
}

/// Resamples a clip to exactly `target` frames by picking frame
/// floor(i * F / T) for output frame i.
pub fn uniform_sample(clip: &SkeletonClip, target: usize) -> Result<SkeletonClip> {
    if clip.frames == 0 {
        return Err(Error::Input("cannot resample an empty clip".into()));
    }
    if target == 0 {
        return Err(Error::Input("target frame count must be at least 1".into()));
    }
    let fl = clip.frame_len();
    let mut data = Vec::with_capacity(target * fl);
    for src in sample_indices(clip.frames, target) {
        data.extend_from_slice(&clip.data[src * fl..(src + 1) * fl]);
    }
    SkeletonClip::new(target, clip.persons, clip.joints, clip.channels, data, clip.label)
}

/// Lays a clip out as (channel, frame, person * J + joint); persons beyond
/// those present stay zero.
pub fn encode(clip: &SkeletonClip, layout: Layout) -> Result<ActionTensor> {
    let j = layout.joints_per_person();
    if clip.joints != j {
        return Err(Error::Input(format!("layout {layout} expects {j} joints per person, clip has {}", clip.joints)));
    }
    if clip.channels != ActionTensor::CHANNELS {
        return Err(Error::Input(format!("expected 3 channels, clip has {}", clip.channels)));
    }
    if clip.persons > PERSONS_MAX {
        return Err(Error::Input(format!(
            "clip has {} persons, at most {PERSONS_MAX} can be encoded",
            clip.persons
        )));
    }
    let (t, n) = (clip.frames, layout.columns());
    let mut data = vec![0.0f32; ActionTensor::CHANNELS * t * n];
    for f in 0..t {
        for p in 0..clip.persons {
            let person = clip.person(f, p);
            for joint in 0..j {
                for c in 0..ActionTensor::CHANNELS {
                    data[(c * t + f) * n + p * j + joint] = person[joint * clip.channels + c];
                }
            }
        }
    }
    Ok(ActionTensor {
        frames: t,
        columns: n,
        layout,
        data,
    })
}

/// Keeps the (at most) two persons with the highest mean confidence
/// (channel 2) over the whole clip, ordered by decreasing confidence; ties
/// favor the lower original index. Returns the clip and the kept indices.
pub fn select_persons(clip: &SkeletonClip) -> Result<(SkeletonClip, Vec<usize>)> {
    if clip.channels < 3 {
        return Err(Error::Input("person selection needs a confidence channel".into()));
    }
    let scores = person_confidences(clip);
    let mut order: Vec<usize> = (0..clip.persons).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(PERSONS_MAX);
    let pl = clip.person_len();
    let mut data = Vec::with_capacity(clip.frames * order.len() * pl);
    for f in 0..clip.frames {
        for &p in &order {
            data.extend_from_slice(clip.person(f, p));
        }
    }
    let out = SkeletonClip::new(clip.frames, order.len(), clip.joints, clip.channels, data, clip.label)?;
    Ok((out, order))
}

/// Mean of channel 2 over all frames and joints, per person.
pub fn person_confidences(clip: &SkeletonClip) -> Vec<f64> {
    let count = (clip.frames * clip.joints) as f64;
    (0..clip.persons)
        .map(|p| {
            let mut total = 0.0f64;
            for f in 0..clip.frames {
                let person = clip.person(f, p);
                for j in 0..clip.joints {
                    total += person[j * clip.channels + 2] as f64;
                }
            }
            total / count
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_clip(frames: usize, persons: usize, joints: usize) -> SkeletonClip {
        let n = frames * persons * joints * 3;
        SkeletonClip::new(frames, persons, joints, 3, (0..n).map(|v| v as f32 + 1.0).collect(), 0).unwrap()
    }

    #[test]
    fn sampling_indices() {
        assert_eq!(sample_indices(5, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_indices(8, 4), vec![0, 2, 4, 6]);
        assert_eq!(sample_indices(3, 6), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn single_person_ntu_is_zero_padded() {
        let clip = ramp_clip(4, 1, 25);
        let t = encode(&clip, Layout::Ntu).unwrap();
        assert_eq!(t.dims(), [3, 4, 50]);
        for c in 0..3 {
            for f in 0..4 {
                assert!((25..50).all(|col| t.at(c, f, col) == 0.0));
                assert!((0..25).all(|col| t.at(c, f, col) != 0.0));
            }
        }
    }

    #[test]
    fn swapping_persons_swaps_column_blocks() {
        let clip = ramp_clip(3, 2, 25);
        let mut swapped = clip.clone();
        let pl = 25 * 3;
        for f in 0..3 {
            let base = f * 2 * pl;
            let (a, b) = swapped.data[base..base + 2 * pl].split_at_mut(pl);
            a.swap_with_slice(b);
        }
        let x = encode(&clip, Layout::Ntu).unwrap();
        let y = encode(&swapped, Layout::Ntu).unwrap();
        for c in 0..3 {
            for f in 0..3 {
                for j in 0..25 {
                    assert_eq!(x.at(c, f, j), y.at(c, f, 25 + j));
                    assert_eq!(x.at(c, f, 25 + j), y.at(c, f, j));
                }
            }
        }
    }

    #[test]
    fn too_many_persons_rejected() {
        assert!(matches!(encode(&ramp_clip(2, 3, 18), Layout::Kinetics), Err(Error::Input(_))));
    }

    fn with_confidences(conf: &[f32]) -> SkeletonClip {
        let persons = conf.len();
        let mut data = Vec::new();
        for _ in 0..2 {
            for &c in conf {
                for _ in 0..18 {
                    data.extend_from_slice(&[0.1, 0.2, c]);
                }
            }
        }
        SkeletonClip::new(2, persons, 18, 3, data, 0).unwrap()
    }

    #[test]
    fn person_selection() {
        let (_, kept) = select_persons(&with_confidences(&[0.9, 0.5, 0.7])).unwrap();
        assert_eq!(kept, vec![0, 2]);
        let (_, kept) = select_persons(&with_confidences(&[0.4, 0.4, 0.4])).unwrap();
        assert_eq!(kept, vec![0, 1]);
        let (one, kept) = select_persons(&with_confidences(&[0.3])).unwrap();
        assert_eq!(kept, vec![0]);
        let t = encode(&one, Layout::Kinetics).unwrap();
        assert!((18..36).all(|col| t.at(2, 0, col) == 0.0));
    }

    #[test]
    fn layout_names() {
        for l in [Layout::Ntu, Layout::Kinetics, Layout::Custom { joints: 6 }] {
            assert_eq!(l.to_string().parse::<Layout>().unwrap(), l);
        }
        assert!("custom0".parse::<Layout>().is_err());
    }

    proptest! {
        #[test]
        fn sampling_is_idempotent(frames in 1usize..40, target in 1usize..40) {
            let clip = ramp_clip(frames, 1, 2);
            let once = uniform_sample(&clip, target).unwrap();
            let twice = uniform_sample(&once, target).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn encoded_shape_law(frames in 1usize..12, persons in 0usize..3, joints in 1usize..8) {
            let clip = ramp_clip(frames, persons, joints);
            let t = encode(&clip, Layout::Custom { joints }).unwrap();
            prop_assert_eq!(t.dims(), [3, frames, 2 * joints]);
            prop_assert_eq!(t.data.len(), 3 * frames * 2 * joints);
        }

        #[test]
        fn encoding_commutes_with_channel_permutation(frames in 1usize..6, joints in 1usize..5, perm in Just([2usize, 0, 1])) {
            let clip = ramp_clip(frames, 2, joints);
            let mut permuted = clip.clone();
            for chunk in permuted.data.chunks_exact_mut(3) {
                let orig = [chunk[0], chunk[1], chunk[2]];
                for c in 0..3 {
                    chunk[c] = orig[perm[c]];
                }
            }
            let a = encode(&clip, Layout::Custom { joints }).unwrap();
            let b = encode(&permuted, Layout::Custom { joints }).unwrap();
            for c in 0..3 {
                for f in 0..frames {
                    for col in 0..2 * joints {
                        prop_assert_eq!(b.at(c, f, col), a.at(perm[c], f, col));
                    }
                }
            }
        }
    }
}
