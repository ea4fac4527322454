//! Skeleton-specific data augmentation.
//!
//! `skeleton_mix` builds a new sample by taking one sample's upper-body
//! joints and another's lower-body joints, mixing the labels linearly;
//! `vanilla_mixup` blends whole skeletons elementwise (kept as the
//! baseline it is); `scale_coordinates` multiplies each coordinate
//! channel by a factor for the coordinate-sensitivity harness.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::SkeletonSample;
use crate::error::{Error, Result};

/// Disjoint upper/lower joint index sets covering `0..joints`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPartition {
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

impl BodyPartition {
    pub fn new(upper: Vec<usize>, lower: Vec<usize>) -> Result<Self> {
        let p = BodyPartition { upper, lower };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.upper.is_empty() || self.lower.is_empty() {
            return Err(Error::config("body partition: both sets must be nonempty".to_string()));
        }
        let v = self.joints();
        let mut seen = vec![false; v];
        for &j in self.upper.iter().chain(self.lower.iter()) {
            if seen[j] {
                return Err(Error::config(format!(
                    "body partition: joint {j} appears in both sets or twice"
                )));
            }
            seen[j] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::config(
                "body partition: upper and lower sets must cover every joint".to_string(),
            ));
        }
        Ok(())
    }

    /// Number of joints covered (max index + 1).
    pub fn joints(&self) -> usize {
        self.upper.iter().chain(self.lower.iter()).max().map_or(0, |&m| m + 1)
    }

    pub fn is_lower(&self, joint: usize) -> bool {
        self.lower.contains(&joint)
    }

    /// 25-joint layout: the lower body is the spine base plus both legs
    /// (joints 0 and 12-19); everything else is upper body.
    pub fn ntu25() -> Self {
        let lower: Vec<usize> = std::iter::once(0).chain(12..=19).collect();
        let upper = (0..25).filter(|j| !lower.contains(j)).collect();
        BodyPartition { upper, lower }
    }

    /// 20-joint layout: hip center plus both legs (joints 0 and 12-19).
    pub fn kinect20() -> Self {
        let lower: Vec<usize> = std::iter::once(0).chain(12..=19).collect();
        let upper = (0..20).filter(|j| !lower.contains(j)).collect();
        BodyPartition { upper, lower }
    }

    /// 15-joint layout: hips, knees and feet (joints 9-14).
    pub fn sbu15() -> Self {
        let lower: Vec<usize> = (9..=14).collect();
        let upper = (0..15).filter(|j| !lower.contains(j)).collect();
        BodyPartition { upper, lower }
    }

    /// Documented default partition for a joint count, when one exists.
    pub fn default_for_joints(v: usize) -> Option<Self> {
        match v {
            25 => Some(Self::ntu25()),
            20 => Some(Self::kinect20()),
            15 => Some(Self::sbu15()),
            _ => None,
        }
    }
}

/// Which mixing operation a batch pass applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    Skeleton,
    Mixup,
}

/// Mixing hyperparameters: label weight `lambda`, fraction `alpha` of a
/// batch that gets mixed, and the RNG seed for victim/partner selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixPolicy {
    #[serde(default = "MixPolicy::default_lambda")]
    pub lambda: f64,
    #[serde(default = "MixPolicy::default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "MixPolicy::default_kind")]
    pub kind: MixKind,
}

impl MixPolicy {
    fn default_lambda() -> f64 {
        0.6
    }
    fn default_alpha() -> f64 {
        1.0 / 16.0
    }
    fn default_kind() -> MixKind {
        MixKind::Skeleton
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("mix lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("mix alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

impl Default for MixPolicy {
    fn default() -> Self {
        MixPolicy {
            lambda: Self::default_lambda(),
            alpha: Self::default_alpha(),
            seed: 0,
            kind: Self::default_kind(),
        }
    }
}

fn check_same_layout(a: &SkeletonSample, b: &SkeletonSample) -> Result<()> {
    if a.persons.len() != b.persons.len() || a.dims() != b.dims() || a.label.len() != b.label.len()
    {
        return Err(Error::input(format!(
            "mix: samples disagree in layout ({} persons {:?} K={} vs {} persons {:?} K={})",
            a.persons.len(),
            a.dims(),
            a.label.len(),
            b.persons.len(),
            b.dims(),
            b.label.len()
        )));
    }
    Ok(())
}

fn mix_labels(a: &[f32], b: &[f32], lambda: f64) -> Vec<f32> {
    a.iter()
        .zip(b.iter())
        .map(|(&ya, &yb)| (lambda * ya as f64 + (1.0 - lambda) * yb as f64) as f32)
        .collect()
}

/// Joint-level mix: upper-body joints from `a`, lower-body joints from
/// `b`, labels blended as `lambda * y_a + (1 - lambda) * y_b`. Joint rows
/// are copied bitwise; every person of the sample is mixed the same way.
pub fn skeleton_mix(
    a: &SkeletonSample,
    b: &SkeletonSample,
    partition: &BodyPartition,
    lambda: f64,
) -> Result<SkeletonSample> {
    check_same_layout(a, b)?;
    partition.validate()?;
    let dims = a.dims();
    if partition.joints() != dims[3] {
        return Err(Error::config(format!(
            "partition covers {} joints, samples have {}",
            partition.joints(),
            dims[3]
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let mut persons = Vec::with_capacity(a.persons.len());
    for (pa, pb) in a.persons.iter().zip(b.persons.iter()) {
        let mut out = pa.clone();
        for &j in &partition.lower {
            for c in 0..dims[1] {
                for t in 0..dims[2] {
                    out.set([0, c, t, j], pb.at([0, c, t, j]));
                }
            }
        }
        persons.push(out);
    }
    SkeletonSample::new(
        format!("{}+{}", a.id, b.id),
        mix_labels(&a.label, &b.label, lambda),
        persons,
    )
}

/// Elementwise blend `lambda * x_a + (1 - lambda) * x_b` of skeletons and
/// labels.
pub fn vanilla_mixup(a: &SkeletonSample, b: &SkeletonSample, lambda: f64) -> Result<SkeletonSample> {
    check_same_layout(a, b)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let l = lambda as f32;
    let persons = a
        .persons
        .iter()
        .zip(b.persons.iter())
        .map(|(pa, pb)| {
            pa.scale(l)
                .add(&pb.scale(1.0 - l))
                .expect("layouts already checked")
        })
        .collect();
    SkeletonSample::new(
        format!("{}~{}", a.id, b.id),
        mix_labels(&a.label, &b.label, lambda),
        persons,
    )
}

/// Replaces `floor(alpha * batch_len)` seeded-randomly chosen samples with
/// mixes against random distinct partners (drawn from the unmixed batch).
/// Returns the mixed batch and how many samples were replaced; when
/// `alpha * batch_len < 1` the batch is returned unchanged.
pub fn apply_batch_mix(
    batch: &[SkeletonSample],
    policy: &MixPolicy,
    partition: &BodyPartition,
) -> Result<(Vec<SkeletonSample>, usize)> {
    policy.validate()?;
    if batch.len() < 2 {
        return Err(Error::input("batch mix needs at least two samples".to_string()));
    }
    let count = (policy.alpha * batch.len() as f64).floor() as usize;
    let mut out = batch.to_vec();
    if count == 0 {
        return Ok((out, 0));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(policy.seed);
    let mut indices: Vec<usize> = (0..batch.len()).collect();
    indices.shuffle(&mut rng);
    let victims = &indices[..count];
    for &i in victims {
        // Partner from the pre-mix snapshot, never the victim itself.
        let mut j = rng.gen_range(0..batch.len() - 1);
        if j >= i {
            j += 1;
        }
        out[i] = match policy.kind {
            MixKind::Skeleton => skeleton_mix(&batch[i], &batch[j], partition, policy.lambda)?,
            MixKind::Mixup => vanilla_mixup(&batch[i], &batch[j], policy.lambda)?,
        };
    }
    Ok((out, count))
}

/// Multiplies coordinate channel `c` by `factors[c]` across all persons,
/// frames and joints; the label is untouched. Factors outside `[0, 1]`
/// are allowed (with a warning) so the harness can explore.
pub fn scale_coordinates(x: &SkeletonSample, factors: &[f32]) -> Result<SkeletonSample> {
    let dims = x.dims();
    if factors.len() != dims[1] {
        return Err(Error::input(format!(
            "scale_coordinates: {} factors for {} coordinate channels",
            factors.len(),
            dims[1]
        )));
    }
    if factors.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        log::warn!("coordinate scale factors {factors:?} leave [0, 1]; applying anyway");
    }
    let persons = x
        .persons
        .iter()
        .map(|p| {
            let mut out = p.clone();
            for (c, &f) in factors.iter().enumerate() {
                for t in 0..dims[2] {
                    for v in 0..dims[3] {
                        let val = out.at([0, c, t, v]) * f;
                        out.set([0, c, t, v], val);
                    }
                }
            }
            out
        })
        .collect();
    SkeletonSample::new(x.id.clone(), x.label.clone(), persons)
}

/// Per-coordinate factors drawn uniformly from `[0, 1]`.
pub fn random_scale_factors(coords: usize, rng: &mut ChaCha20Rng) -> Vec<f32> {
    (0..coords).map(|_| rng.gen_range(0.0..=1.0)).collect()
}
