//! Dataset manifests: class/joint metadata, the default body partition,
//! the bone parent table, and the benchmark split lists, all as data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::BodyPartition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: usize,
    pub joints: usize,
    #[serde(default)]
    pub joint_names: Vec<String>,
    pub partition: BodyPartition,
    /// `parents[j] == j` marks a root joint.
    pub bone_parents: Vec<usize>,
    /// Split name (cross_subject, cross_view, cross_setup, ...) to id lists.
    #[serde(default)]
    pub splits: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.joints == 0 {
            return Err(Error::config("manifest: classes and joints must be >= 1".to_string()));
        }
        if !self.joint_names.is_empty() && self.joint_names.len() != self.joints {
            return Err(Error::config(format!(
                "manifest: {} joint names for {} joints",
                self.joint_names.len(),
                self.joints
            )));
        }
        self.partition.validate()?;
        if self.partition.joints() != self.joints {
            return Err(Error::config(format!(
                "manifest: partition covers {} joints, dataset has {}",
                self.partition.joints(),
                self.joints
            )));
        }
        if self.bone_parents.len() != self.joints {
            return Err(Error::config(format!(
                "manifest: {} bone parents for {} joints",
                self.bone_parents.len(),
                self.joints
            )));
        }
        if let Some(&bad) = self.bone_parents.iter().find(|&&p| p >= self.joints) {
            return Err(Error::config(format!("manifest: bone parent {bad} out of range")));
        }
        for (name, split) in &self.splits {
            for id in &split.train {
                if split.test.contains(id) {
                    return Err(Error::config(format!(
                        "manifest: split '{name}' lists '{id}' in both train and test"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(json)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// 25-joint, 60-class manifest with the usual joint ordering.
    pub fn ntu25() -> Self {
        let names = [
            "spine_base", "spine_mid", "neck", "head",
            "shoulder_left", "elbow_left", "wrist_left", "hand_left",
            "shoulder_right", "elbow_right", "wrist_right", "hand_right",
            "hip_left", "knee_left", "ankle_left", "foot_left",
            "hip_right", "knee_right", "ankle_right", "foot_right",
            "spine_shoulder",
            "hand_tip_left", "thumb_left", "hand_tip_right", "thumb_right",
        ];
        // Rooted at the spine-shoulder joint (20).
        let parents = vec![
            1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 20, 7, 7, 11, 11,
        ];
        DatasetManifest {
            name: "ntu25".to_string(),
            classes: 60,
            joints: 25,
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            partition: BodyPartition::ntu25(),
            bone_parents: parents,
            splits: BTreeMap::new(),
        }
    }

    /// 20-joint, 10-class manifest (first-generation depth sensor layout).
    pub fn nucla20() -> Self {
        let names = [
            "hip_center", "spine", "shoulder_center", "head",
            "shoulder_left", "elbow_left", "wrist_left", "hand_left",
            "shoulder_right", "elbow_right", "wrist_right", "hand_right",
            "hip_left", "knee_left", "ankle_left", "foot_left",
            "hip_right", "knee_right", "ankle_right", "foot_right",
        ];
        let parents = vec![0, 0, 1, 2, 2, 4, 5, 6, 2, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18];
        DatasetManifest {
            name: "nucla20".to_string(),
            classes: 10,
            joints: 20,
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            partition: BodyPartition::kinect20(),
            bone_parents: parents,
            splits: BTreeMap::new(),
        }
    }

    /// 15-joint, 8-class two-person interaction manifest.
    pub fn sbu15() -> Self {
        let names = [
            "head", "neck", "torso",
            "shoulder_left", "elbow_left", "hand_left",
            "shoulder_right", "elbow_right", "hand_right",
            "hip_left", "knee_left", "foot_left",
            "hip_right", "knee_right", "foot_right",
        ];
        let parents = vec![1, 2, 2, 1, 3, 4, 1, 6, 7, 2, 9, 10, 2, 12, 13];
        DatasetManifest {
            name: "sbu15".to_string(),
            classes: 8,
            joints: 15,
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            partition: BodyPartition::sbu15(),
            bone_parents: parents,
            splits: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_manifests_validate() {
        for m in [DatasetManifest::ntu25(), DatasetManifest::nucla20(), DatasetManifest::sbu15()] {
            m.validate().unwrap();
        }
    }

    #[test]
    fn json_roundtrip() {
        let mut m = DatasetManifest::ntu25();
        m.splits.insert(
            "cross_subject".to_string(),
            Split { train: vec!["a".into()], test: vec!["b".into()] },
        );
        let json = m.to_json().unwrap();
        let back = DatasetManifest::from_json(&json).unwrap();
        assert_eq!(back.name, m.name);
        assert_eq!(back.splits, m.splits);
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let mut m = DatasetManifest::sbu15();
        m.splits.insert(
            "cross_subject".to_string(),
            Split { train: vec!["dup".into()], test: vec!["dup".into()] },
        );
        assert!(matches!(m.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_partition_is_rejected() {
        let mut m = DatasetManifest::ntu25();
        m.partition = BodyPartition::sbu15();
        assert!(m.validate().is_err());
    }
}
