use crate::error::{Error, Result};

/// Joint count of the Kinect-V2 skeleton.
pub const KINECT_JOINTS: usize = 25;

/// Skeleton topology: per-joint parent, root is its own parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonLayout {
    parent: Vec<usize>,
    center_joint: usize,
}

// 1-indexed parents of the 25 Kinect-V2 joints, rooted at spine-shoulder (21).
const KINECT_PARENTS_1: [usize; KINECT_JOINTS] = [
    2, 21, 21, 3, 21, 5, 6, 7, 21, 9, 10, 11, 1, 13, 14, 15, 1, 17, 18, 19, 21, 23, 8, 25, 12,
];

impl SkeletonLayout {
    pub fn new(parent: Vec<usize>, center_joint: usize) -> Result<Self> {
        let v = parent.len();
        if center_joint >= v {
            return Err(Error::IndexOutOfRange {
                what: "center joint",
                index: center_joint,
                len: v,
            });
        }
        if let Some(&p) = parent.iter().find(|&&p| p >= v) {
            return Err(Error::IndexOutOfRange {
                what: "parent joint",
                index: p,
                len: v,
            });
        }
        // Every chain must end in a self-parented root within V steps.
        for j in 0..v {
            let mut cur = j;
            let mut steps = 0;
            while parent[cur] != cur {
                cur = parent[cur];
                steps += 1;
                if steps > v {
                    return Err(Error::config(format!(
                        "parent table has a cycle through joint {j}"
                    )));
                }
            }
        }
        Ok(SkeletonLayout {
            parent,
            center_joint,
        })
    }

    /// Kinect-V2 layout, centered on the mid-spine (joint 2, 1-indexed).
    pub fn kinect_v2() -> Self {
        let parent = KINECT_PARENTS_1.iter().map(|p| p - 1).collect();
        Self::new(parent, 1).expect("static layout is valid")
    }

    pub fn joints(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, j: usize) -> usize {
        self.parent[j]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn center_joint(&self) -> usize {
        self.center_joint
    }

    /// Joints from `j` up to (and including) its root.
    pub fn path_to_root(&self, j: usize) -> Vec<usize> {
        let mut path = vec![j];
        let mut cur = j;
        while self.parent[cur] != cur {
            cur = self.parent[cur];
            path.push(cur);
        }
        path
    }
}

/// Assignment of joints to parts, each part padded to `max_joints` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    parts: Vec<Vec<usize>>,
    max_joints: usize,
    joints: usize,
}

// 1-indexed Kinect-V2 joints per part.
const TORSO: [usize; 5] = [1, 2, 3, 4, 21];
const LEFT_ARM: [usize; 6] = [5, 6, 7, 8, 22, 23];
const RIGHT_ARM: [usize; 6] = [9, 10, 11, 12, 24, 25];
const LEFT_LEG: [usize; 4] = [13, 14, 15, 16];
const RIGHT_LEG: [usize; 4] = [17, 18, 19, 20];

impl PartitionMap {
    /// Build a map over `joints` joints; every joint must appear exactly once.
    pub fn new(parts: Vec<Vec<usize>>, joints: usize) -> Result<Self> {
        let mut seen = vec![false; joints];
        for part in &parts {
            if part.is_empty() {
                return Err(Error::config("partition map has an empty part"));
            }
            for &j in part {
                if j >= joints {
                    return Err(Error::IndexOutOfRange {
                        what: "partition joint",
                        index: j,
                        len: joints,
                    });
                }
                if std::mem::replace(&mut seen[j], true) {
                    return Err(Error::config(format!("joint {j} assigned to two parts")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!(
                "joint {missing} assigned to no part"
            )));
        }
        let max_joints = parts.iter().map(Vec::len).max().unwrap_or(0);
        Ok(PartitionMap {
            parts,
            max_joints,
            joints,
        })
    }

    /// Five anatomical parts of the Kinect-V2 skeleton: torso, left arm, right
    /// arm, left leg, right leg.
    pub fn default_kinect() -> Self {
        let parts = [&TORSO[..], &LEFT_ARM, &RIGHT_ARM, &LEFT_LEG, &RIGHT_LEG]
            .iter()
            .map(|p| p.iter().map(|j| j - 1).collect())
            .collect();
        Self::new(parts, KINECT_JOINTS).expect("static map is valid")
    }

    /// One singleton part per joint (no partition encoding).
    pub fn identity(joints: usize) -> Self {
        Self::new((0..joints).map(|j| vec![j]).collect(), joints).expect("identity map is valid")
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn max_joints(&self) -> usize {
        self.max_joints
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn part(&self, p: usize) -> &[usize] {
        &self.parts[p]
    }

    pub fn parts(&self) -> &[Vec<usize>] {
        &self.parts
    }

    /// Joint in slot `m` of part `p`, `None` for padding.
    pub fn slot(&self, p: usize, m: usize) -> Option<usize> {
        self.parts[p].get(m).copied()
    }

    pub fn pad_slots(&self) -> usize {
        self.parts.iter().map(|p| self.max_joints - p.len()).sum()
    }

    pub fn part_of(&self, joint: usize) -> Option<usize> {
        self.parts.iter().position(|p| p.contains(&joint))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinect_layout_is_a_tree() {
        let l = SkeletonLayout::kinect_v2();
        assert_eq!(l.joints(), 25);
        let roots: Vec<_> = (0..25).filter(|&j| l.parent(j) == j).collect();
        assert_eq!(roots, vec![20]);
        assert_eq!(l.center_joint(), 1);
        assert!(l.path_to_root(15).ends_with(&[0, 1, 20]));
    }

    #[test]
    fn cyclic_parents_rejected() {
        assert!(SkeletonLayout::new(vec![1, 0], 0).is_err());
    }

    #[test]
    fn default_map_shape() {
        let m = PartitionMap::default_kinect();
        assert_eq!(m.num_parts(), 5);
        assert_eq!(m.max_joints(), 6);
        assert!(m.num_parts() * m.max_joints() >= m.joints());
        let mut all: Vec<usize> = m.parts().iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
        assert_eq!(m.part(1).len(), 6);
        assert_eq!(m.part(0).len(), 5);
        assert_eq!(m.slot(0, 5), None);
        assert_eq!(m.pad_slots(), 5);
        assert_eq!(m.part(3), &[12, 13, 14, 15]);
    }

    #[test]
    fn identity_map() {
        let m = PartitionMap::identity(25);
        assert_eq!((m.num_parts(), m.max_joints(), m.pad_slots()), (25, 1, 0));
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(PartitionMap::new(vec![vec![0, 1], vec![1]], 2).is_err());
        assert!(PartitionMap::new(vec![vec![0]], 2).is_err());
        assert!(PartitionMap::new(vec![vec![0, 2]], 2).is_err());
    }
}
