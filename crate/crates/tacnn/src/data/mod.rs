//! Dataset ingestion, preprocessing, synthetic generation and on-disk
//! sample stores.

pub mod jsonl;
pub mod manifest;
pub mod ntu;
pub mod skb1;
pub mod synth;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use manifest::{DatasetManifest, Split};
pub use ntu::{parse_ntu_skeleton, NtuBody, NtuClip, NtuFrame};
pub use synth::SynthSpec;

/// One labeled action clip: a (possibly soft) label vector and one
/// `(1, C, T, V)` coordinate tensor per tracked person.
#[derive(Debug, Clone)]
pub struct SkeletonSample {
    pub id: String,
    pub label: Vec<f32>,
    pub persons: Vec<Tensor4<f32>>,
}

impl SkeletonSample {
    pub fn new(id: String, label: Vec<f32>, persons: Vec<Tensor4<f32>>) -> Result<Self> {
        if persons.is_empty() {
            return Err(Error::input(format!("sample {id}: needs at least one person")));
        }
        let dims = persons[0].dims();
        if dims[0] != 1 {
            return Err(Error::input(format!(
                "sample {id}: person tensors are (1, C, T, V), got {dims:?}"
            )));
        }
        for p in &persons {
            if p.dims() != dims {
                return Err(Error::input(format!(
                    "sample {id}: persons disagree in shape ({:?} vs {dims:?})",
                    p.dims()
                )));
            }
            if !p.is_finite() {
                return Err(Error::input(format!("sample {id}: non-finite coordinates")));
            }
        }
        if label.is_empty() {
            return Err(Error::input(format!("sample {id}: empty label vector")));
        }
        let mut sum = 0.0f64;
        for &v in &label {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::input(format!("sample {id}: label entry {v} invalid")));
            }
            sum += v as f64;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!("sample {id}: label sums to {sum}, expected 1")));
        }
        Ok(SkeletonSample { id, label, persons })
    }

    pub fn one_hot(k: usize, class: usize) -> Result<Vec<f32>> {
        if class >= k {
            return Err(Error::input(format!("class {class} out of range for {k} classes")));
        }
        let mut label = vec![0.0; k];
        label[class] = 1.0;
        Ok(label)
    }

    /// `(1, C, T, V)` of each person tensor.
    pub fn dims(&self) -> [usize; 4] {
        self.persons[0].dims()
    }

    pub fn coords(&self) -> usize {
        self.dims()[1]
    }

    pub fn frames(&self) -> usize {
        self.dims()[2]
    }

    pub fn joints(&self) -> usize {
        self.dims()[3]
    }

    pub fn classes(&self) -> usize {
        self.label.len()
    }

    /// Index of the largest label entry (first on ties).
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.label.iter().enumerate() {
            if v > self.label[best] {
                best = i;
            }
        }
        best
    }
}

/// Knobs of the raw-clip to sample pipeline.
#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    /// Output temporal length after resampling.
    pub frames: usize,
    /// Keep at most this many bodies, ranked by joint-motion energy.
    pub max_persons: usize,
    /// Joint subtracted from all coordinates (the spine base).
    pub center_joint: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { frames: 64, max_persons: 2, center_joint: 0 }
    }
}

/// Per-body dense track extracted from a clip: `[frame][joint][coord]`,
/// zero-filled where the body is missing.
struct BodyTrack {
    frames: Vec<Vec<[f32; 3]>>,
    present: Vec<bool>,
    first_seen: usize,
}

fn body_tracks(clip: &NtuClip, joints: usize) -> Vec<(String, BodyTrack)> {
    let total = clip.frames.len();
    let mut order: Vec<String> = Vec::new();
    let mut tracks: Vec<BodyTrack> = Vec::new();
    for (f, frame) in clip.frames.iter().enumerate() {
        for body in &frame.bodies {
            let idx = match order.iter().position(|id| *id == body.id) {
                Some(i) => i,
                None => {
                    order.push(body.id.clone());
                    tracks.push(BodyTrack {
                        frames: vec![vec![[0.0; 3]; joints]; total],
                        present: vec![false; total],
                        first_seen: f,
                    });
                    order.len() - 1
                }
            };
            tracks[idx].frames[f] = body.joints.clone();
            tracks[idx].present[f] = true;
        }
    }
    order.into_iter().zip(tracks).collect()
}

/// Motion energy of a track: summed squared displacement between
/// consecutive frames, used to rank bodies when clipping persons.
fn track_energy(track: &BodyTrack) -> f64 {
    let mut energy = 0.0;
    for w in track.frames.windows(2) {
        for (a, b) in w[0].iter().zip(w[1].iter()) {
            for c in 0..3 {
                let d = (b[c] - a[c]) as f64;
                energy += d * d;
            }
        }
    }
    energy
}

/// Turns a parsed clip into a fixed-length sample:
/// 1. translate all coordinates so the first body's center joint (at its
///    first visible frame) sits at the origin (absent frames stay zero);
/// 2. resample each body to exactly `frames` frames by linear
///    interpolation at source positions `t * F / T`;
/// 3. keep the `max_persons` bodies with the highest motion energy.
pub fn preprocess(
    clip: &NtuClip,
    opts: &PreprocessOptions,
    id: String,
    label: Vec<f32>,
) -> Result<SkeletonSample> {
    if opts.frames == 0 {
        return Err(Error::config("preprocess: frames must be >= 1".to_string()));
    }
    let joints = clip
        .frames
        .iter()
        .flat_map(|f| f.bodies.iter())
        .map(|b| b.joints.len())
        .next()
        .ok_or_else(|| Error::input("preprocess: clip contains no bodies".to_string()))?;
    if joints == 0 {
        return Err(Error::input("preprocess: zero joints".to_string()));
    }
    if opts.center_joint >= joints {
        return Err(Error::config(format!(
            "preprocess: center joint {} out of range for {joints} joints",
            opts.center_joint
        )));
    }
    let mut tracks = body_tracks(clip, joints);

    // (a) translate
    let reference = {
        let first = &tracks[0].1;
        first.frames[first.first_seen][opts.center_joint]
    };
    for (_, track) in tracks.iter_mut() {
        for (f, frame) in track.frames.iter_mut().enumerate() {
            if !track.present[f] {
                continue;
            }
            for joint in frame.iter_mut() {
                for c in 0..3 {
                    joint[c] -= reference[c];
                }
            }
        }
    }

    // (c) rank by energy before resampling so the raw dynamics decide.
    let mut ranked: Vec<usize> = (0..tracks.len()).collect();
    let energies: Vec<f64> = tracks.iter().map(|(_, t)| track_energy(t)).collect();
    ranked.sort_by(|&a, &b| {
        energies[b].partial_cmp(&energies[a]).unwrap().then(a.cmp(&b))
    });
    ranked.truncate(opts.max_persons);
    ranked.sort_unstable(); // keep appearance order among the survivors

    // (b) resample
    let src_len = clip.frames.len();
    let t_out = opts.frames;
    let mut persons = Vec::with_capacity(ranked.len());
    for &ti in &ranked {
        let track = &tracks[ti].1;
        let mut tensor = Tensor4::zeros([1, 3, t_out, joints]);
        for t in 0..t_out {
            let pos = t as f64 * src_len as f64 / t_out as f64;
            let i = (pos.floor() as usize).min(src_len - 1);
            let frac = (pos - i as f64) as f32;
            let nxt = (i + 1).min(src_len - 1);
            for j in 0..joints {
                for c in 0..3 {
                    let a = track.frames[i][j][c];
                    let b = track.frames[nxt][j][c];
                    tensor.set([0, c, t, j], a + frac * (b - a));
                }
            }
        }
        persons.push(tensor);
    }
    SkeletonSample::new(id, label, persons)
}

/// Bone-vector transform: each joint becomes its offset from its parent
/// (`parents[j] == j` marks a root, whose bone is zero). Labels are kept.
pub fn bone_transform(sample: &SkeletonSample, parents: &[usize]) -> Result<SkeletonSample> {
    let dims = sample.dims();
    if parents.len() != dims[3] {
        return Err(Error::input(format!(
            "bone transform: {} parents for {} joints",
            parents.len(),
            dims[3]
        )));
    }
    if let Some(&bad) = parents.iter().find(|&&p| p >= dims[3]) {
        return Err(Error::input(format!("bone transform: parent index {bad} out of range")));
    }
    let persons = sample
        .persons
        .iter()
        .map(|p| {
            let mut out = Tensor4::zeros(dims);
            for c in 0..dims[1] {
                for t in 0..dims[2] {
                    for (j, &parent) in parents.iter().enumerate() {
                        let v = p.at([0, c, t, j]) - p.at([0, c, t, parent]);
                        out.set([0, c, t, j], v);
                    }
                }
            }
            out
        })
        .collect();
    SkeletonSample::new(sample.id.clone(), sample.label.clone(), persons)
}

/// Reads a dataset file, dispatching on extension (`.skb1` or `.jsonl`).
pub fn read_samples(path: &Path) -> Result<Vec<SkeletonSample>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let file = BufReader::new(File::open(path)?);
    match ext {
        "skb1" => skb1::read_skb1(file),
        "jsonl" => jsonl::read_jsonl(file),
        other => Err(Error::format(format!(
            "unknown dataset extension '{other}' (expected skb1 or jsonl)"
        ))),
    }
}

/// Writes a dataset file, dispatching on extension.
pub fn write_samples(path: &Path, samples: &[SkeletonSample]) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let mut file = BufWriter::new(File::create(path)?);
    match ext {
        "skb1" => skb1::write_skb1(&mut file, samples),
        "jsonl" => jsonl::write_jsonl(&mut file, samples),
        other => Err(Error::format(format!(
            "unknown dataset extension '{other}' (expected skb1 or jsonl)"
        ))),
    }
}

/// Data-pipeline parallelism cap from `TACNN_THREADS` (defaults to 1).
pub fn thread_budget() -> usize {
    std::env::var("TACNN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map_or(1, |n| n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_from(frames: Vec<Vec<(&str, Vec<[f32; 3]>)>>) -> NtuClip {
        NtuClip {
            frames: frames
                .into_iter()
                .map(|bodies| NtuFrame {
                    bodies: bodies
                        .into_iter()
                        .map(|(id, joints)| NtuBody { id: id.to_string(), joints })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn sample_validation() {
        let p = vec![Tensor4::zeros([1, 3, 4, 5])];
        assert!(SkeletonSample::new("s".into(), vec![1.0], p.clone()).is_ok());
        assert!(SkeletonSample::new("s".into(), vec![0.5, 0.4], p.clone()).is_err());
        assert!(SkeletonSample::new("s".into(), vec![1.0], vec![]).is_err());
        let nan = vec![Tensor4::full([1, 1, 1, 1], f32::NAN)];
        assert!(SkeletonSample::new("s".into(), vec![1.0], nan).is_err());
    }

    #[test]
    fn preprocess_identity_when_already_conformant() {
        // 4 frames, centered at the spine base of frame 0.
        let joints = vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        let clip = clip_from(vec![
            vec![("b0", joints.clone())],
            vec![("b0", vec![[0.1, 0.0, 0.0], [1.1, 2.0, 3.0]])],
            vec![("b0", vec![[0.2, 0.0, 0.0], [1.2, 2.0, 3.0]])],
            vec![("b0", vec![[0.3, 0.0, 0.0], [1.3, 2.0, 3.0]])],
        ]);
        let opts = PreprocessOptions { frames: 4, max_persons: 2, center_joint: 0 };
        let s = preprocess(&clip, &opts, "x".into(), vec![1.0]).unwrap();
        assert_eq!(s.dims(), [1, 3, 4, 2]);
        assert_eq!(s.persons.len(), 1);
        // Frame 0 joint 0 at the origin; geometry otherwise unchanged.
        assert_eq!(s.persons[0].at([0, 0, 0, 0]), 0.0);
        assert_eq!(s.persons[0].at([0, 0, 1, 1]), 1.1);
        assert_eq!(s.persons[0].at([0, 2, 3, 1]), 3.0);
    }

    #[test]
    fn preprocess_exact_stride_resampling() {
        // 8 -> 4 frames: output frame t must equal input frame 2t.
        let frames: Vec<Vec<(&str, Vec<[f32; 3]>)>> = (0..8)
            .map(|f| vec![("b0", vec![[f as f32, 0.0, 0.0]])])
            .collect();
        let clip = clip_from(frames);
        let opts = PreprocessOptions { frames: 4, max_persons: 1, center_joint: 0 };
        let s = preprocess(&clip, &opts, "x".into(), vec![1.0]).unwrap();
        for t in 0..4 {
            assert_eq!(s.persons[0].at([0, 0, t, 0]), 2.0 * t as f32);
        }
    }

    #[test]
    fn preprocess_linear_interpolation_matches_loop_oracle() {
        let src = 10;
        let dst = 7;
        let frames: Vec<Vec<(&str, Vec<[f32; 3]>)>> = (0..src)
            .map(|f| vec![("b0", vec![[(f * f) as f32, 0.0, 0.0]])])
            .collect();
        let clip = clip_from(frames);
        let opts = PreprocessOptions { frames: dst, max_persons: 1, center_joint: 0 };
        let s = preprocess(&clip, &opts, "x".into(), vec![1.0]).unwrap();
        for t in 0..dst {
            let pos = t as f64 * src as f64 / dst as f64;
            let i = pos.floor() as usize;
            let frac = (pos - i as f64) as f32;
            let a = (i * i) as f32;
            let b = ((i + 1).min(src - 1).pow(2)) as f32;
            let want = a + frac * (b - a);
            assert!((s.persons[0].at([0, 0, t, 0]) - want).abs() < 1e-5);
        }
    }

    #[test]
    fn preprocess_clips_to_highest_energy_bodies() {
        // b0 is static, b1 and b2 move; keep 2 -> b1, b2 survive.
        let frames: Vec<Vec<(&str, Vec<[f32; 3]>)>> = (0..4)
            .map(|f| {
                vec![
                    ("b0", vec![[0.0, 0.0, 0.0]]),
                    ("b1", vec![[f as f32 * 2.0, 0.0, 0.0]]),
                    ("b2", vec![[0.0, f as f32, 0.0]]),
                ]
            })
            .collect();
        let clip = clip_from(frames);
        let opts = PreprocessOptions { frames: 4, max_persons: 2, center_joint: 0 };
        let s = preprocess(&clip, &opts, "x".into(), vec![1.0]).unwrap();
        assert_eq!(s.persons.len(), 2);
        // b1 kept with its large stride; appearance order preserved.
        assert_eq!(s.persons[0].at([0, 0, 1, 0]), 2.0);
        assert_eq!(s.persons[1].at([0, 1, 1, 0]), 1.0);
    }

    #[test]
    fn bone_transform_offsets_from_parents() {
        let mut t = Tensor4::zeros([1, 3, 1, 3]);
        // joints at x = 0, 1, 3; parents: 0 root, 1 <- 0, 2 <- 1.
        t.set([0, 0, 0, 1], 1.0);
        t.set([0, 0, 0, 2], 3.0);
        let s = SkeletonSample::new("b".into(), vec![1.0], vec![t]).unwrap();
        let bones = bone_transform(&s, &[0, 0, 1]).unwrap();
        assert_eq!(bones.persons[0].at([0, 0, 0, 0]), 0.0);
        assert_eq!(bones.persons[0].at([0, 0, 0, 1]), 1.0);
        assert_eq!(bones.persons[0].at([0, 0, 0, 2]), 2.0);
    }
}
