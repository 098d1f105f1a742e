use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    /// Parent joint index, `-1` for the root.
    pub parents: Vec<i64>,
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, parents: Vec<i64>) -> Result<Self> {
        let s = Self { joint_names, parents };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if n == 0 || self.joint_names.len() != n {
            return Err(Error::Layout(format!(
                "skeleton has {} names for {n} parents",
                self.joint_names.len()
            )));
        }
        let roots = self.parents.iter().filter(|&&p| p == -1).count();
        if roots != 1 {
            return Err(Error::Layout(format!("skeleton needs exactly one root, found {roots}")));
        }
        for (j, &p) in self.parents.iter().enumerate() {
            if p != -1 && (p < 0 || p as usize >= n || p as usize == j) {
                return Err(Error::Layout(format!("joint {j} has invalid parent {p}")));
            }
        }
        // every joint must reach the root without revisiting a joint
        for start in 0..n {
            let mut seen = BTreeSet::new();
            let mut j = start as i64;
            while j != -1 {
                if !seen.insert(j) {
                    return Err(Error::Layout(format!("parent cycle through joint {start}")));
                }
                j = self.parents[j as usize];
            }
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(|&p| p == -1).expect("validated")
    }

    /// Nine joints: a pelvis root plus two joints per limb.
    pub fn toy() -> Self {
        let names = [
            "pelvis",
            "left_shoulder",
            "left_hand",
            "right_shoulder",
            "right_hand",
            "left_hip",
            "left_foot",
            "right_hip",
            "right_foot",
        ];
        Self {
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            parents: vec![-1, 0, 1, 0, 3, 0, 5, 0, 7],
        }
    }

    /// The 22-joint SMPL-style skeleton used by HumanML3D.
    pub fn humanml3d() -> Self {
        let names = [
            "pelvis",
            "left_hip",
            "right_hip",
            "spine1",
            "left_knee",
            "right_knee",
            "spine2",
            "left_ankle",
            "right_ankle",
            "spine3",
            "left_foot",
            "right_foot",
            "neck",
            "left_collar",
            "right_collar",
            "head",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
        ];
        Self {
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            parents: vec![-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BodyPart {
    Torso,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl BodyPart {
    pub const ALL: [BodyPart; 5] = [
        BodyPart::Torso,
        BodyPart::LeftArm,
        BodyPart::RightArm,
        BodyPart::LeftLeg,
        BodyPart::RightLeg,
    ];
}

impl fmt::Display for BodyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BodyPart::Torso => "Torso",
            BodyPart::LeftArm => "Left Arm",
            BodyPart::RightArm => "Right Arm",
            BodyPart::LeftLeg => "Left Leg",
            BodyPart::RightLeg => "Right Leg",
        };
        f.write_str(s)
    }
}

/// Assignment of every joint to exactly one body part, plus the parts the
/// foot-contact token belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPartition {
    part_of: Vec<BodyPart>,
    contact_parts: BTreeSet<BodyPart>,
}

impl BodyPartition {
    /// `parts` lists the joints of each part; every joint in `0..n` must appear exactly once.
    pub fn new(n: usize, parts: &[(BodyPart, Vec<usize>)], contact_parts: &[BodyPart]) -> Result<Self> {
        let mut part_of: Vec<Option<BodyPart>> = vec![None; n];
        let mut seen_parts = BTreeSet::new();
        for (part, joints) in parts {
            if !seen_parts.insert(*part) {
                return Err(Error::Layout(format!("part {part} listed twice")));
            }
            for &j in joints {
                if j >= n {
                    return Err(Error::Layout(format!("part {part} names joint {j} but n = {n}")));
                }
                if let Some(prev) = part_of[j] {
                    return Err(Error::Layout(format!("joint {j} is in both {prev} and {part}")));
                }
                part_of[j] = Some(*part);
            }
        }
        let part_of = part_of
            .into_iter()
            .enumerate()
            .map(|(j, p)| p.ok_or_else(|| Error::Layout(format!("joint {j} belongs to no part"))))
            .collect::<Result<Vec<_>>>()?;
        if contact_parts.is_empty() {
            return Err(Error::Layout("contact token needs at least one part".into()));
        }
        Ok(Self {
            part_of,
            contact_parts: contact_parts.iter().copied().collect(),
        })
    }

    pub fn joint_count(&self) -> usize {
        self.part_of.len()
    }

    pub fn part_of(&self, joint: usize) -> BodyPart {
        self.part_of[joint]
    }

    pub fn contact_parts(&self) -> &BTreeSet<BodyPart> {
        &self.contact_parts
    }

    pub fn joints_in(&self, part: BodyPart) -> Vec<usize> {
        (0..self.part_of.len()).filter(|&j| self.part_of[j] == part).collect()
    }

    /// Parts of token `t`, where tokens `0..n` are joints and token `n` is foot contact.
    pub fn token_parts(&self, t: usize) -> BTreeSet<BodyPart> {
        if t == self.part_of.len() {
            self.contact_parts.clone()
        } else {
            BTreeSet::from([self.part_of[t]])
        }
    }

    pub fn toy() -> Self {
        Self::new(
            9,
            &[
                (BodyPart::Torso, vec![0]),
                (BodyPart::LeftArm, vec![1, 2]),
                (BodyPart::RightArm, vec![3, 4]),
                (BodyPart::LeftLeg, vec![5, 6]),
                (BodyPart::RightLeg, vec![7, 8]),
            ],
            &[BodyPart::LeftLeg, BodyPart::RightLeg],
        )
        .expect("toy partition is valid")
    }

    pub fn humanml3d() -> Self {
        Self::new(
            22,
            &[
                (BodyPart::Torso, vec![0, 3, 6, 9, 12, 15]),
                (BodyPart::LeftArm, vec![13, 16, 18, 20]),
                (BodyPart::RightArm, vec![14, 17, 19, 21]),
                (BodyPart::LeftLeg, vec![1, 4, 7, 10]),
                (BodyPart::RightLeg, vec![2, 5, 8, 11]),
            ],
            &[BodyPart::LeftLeg, BodyPart::RightLeg],
        )
        .expect("humanml3d partition is valid")
    }
}

/// Widths of the root, ordinary joint and foot-contact feature slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub root_dim: usize,
    pub joint_dim: usize,
    pub contact_dim: usize,
}

impl TokenLayout {
    pub fn width(&self, n: usize) -> usize {
        self.root_dim + (n - 1) * self.joint_dim + self.contact_dim
    }

    /// Common token width after zero right-padding.
    pub fn token_width(&self) -> usize {
        self.root_dim.max(self.joint_dim).max(self.contact_dim)
    }

    pub fn toy() -> Self {
        Self {
            root_dim: 4,
            joint_dim: 3,
            contact_dim: 2,
        }
    }

    /// 7 + 21·12 + 4 = 263 features for the 22-joint skeleton.
    ///
    /// This is a reconstruction of the per-joint grouping; use
    /// [`humanml3d_gather_index`] to reorder a raw 263-d vector into it.
    pub fn humanml3d() -> Self {
        Self {
            root_dim: 7,
            joint_dim: 12,
            contact_dim: 4,
        }
    }
}

/// For each slot of the per-joint layout, the index into a HumanML3D feature
/// vector (root 4 | ric 21·3 | rot 21·6 | local velocity 22·3 | feet 4).
pub fn humanml3d_gather_index() -> Vec<usize> {
    const RIC: usize = 4;
    const ROT: usize = RIC + 21 * 3;
    const VEL: usize = ROT + 21 * 6;
    const FEET: usize = VEL + 22 * 3;
    let mut idx: Vec<usize> = (0..4).collect();
    idx.extend(VEL..VEL + 3);
    for j in 1..22 {
        idx.extend(RIC + (j - 1) * 3..RIC + j * 3);
        idx.extend(ROT + (j - 1) * 6..ROT + j * 6);
        idx.extend(VEL + j * 3..VEL + (j + 1) * 3);
    }
    idx.extend(FEET..FEET + 4);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        Skeleton::toy().validate().unwrap();
        Skeleton::humanml3d().validate().unwrap();
        assert_eq!(TokenLayout::humanml3d().width(22), 263);
        assert_eq!(BodyPartition::humanml3d().joint_count(), 22);
        let mut idx = humanml3d_gather_index();
        assert_eq!(idx.len(), 263);
        idx.sort_unstable();
        assert_eq!(idx, (0..263).collect::<Vec<_>>());
    }

    #[test]
    fn skeleton_rejects_two_roots_and_cycles() {
        let names = |n: usize| (0..n).map(|i| format!("j{i}")).collect::<Vec<_>>();
        assert!(Skeleton::new(names(3), vec![-1, -1, 0]).is_err());
        assert!(Skeleton::new(names(3), vec![-1, 2, 1]).is_err());
        assert!(Skeleton::new(names(2), vec![-1, 5]).is_err());
    }

    #[test]
    fn partition_must_cover_and_be_disjoint() {
        let overlap = BodyPartition::new(
            3,
            &[(BodyPart::Torso, vec![0, 1]), (BodyPart::LeftArm, vec![1, 2])],
            &[BodyPart::Torso],
        );
        assert!(overlap.is_err());
        let gap = BodyPartition::new(3, &[(BodyPart::Torso, vec![0, 1])], &[BodyPart::Torso]);
        assert!(gap.is_err());
        let no_contact = BodyPartition::new(1, &[(BodyPart::Torso, vec![0])], &[]);
        assert!(no_contact.is_err());
    }
}
