use nalgebra::Vector3;

use crate::lie::Pose;

/// Absolute world poses indexed densely by frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        Self { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.poses.iter().map(|p| p.translation)
    }

    /// Accumulated path length up to each frame.
    pub fn cumulative_distance(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut total = 0.0;
        for (k, p) in self.poses.iter().enumerate() {
            if k > 0 {
                total += (p.translation - self.poses[k - 1].translation).norm();
            }
            out.push(total);
        }
        out
    }

    pub fn path_length(&self) -> f64 {
        self.cumulative_distance().last().copied().unwrap_or(0.0)
    }

    /// `G · T_k` for every frame.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self { poses: self.poses.iter().map(|p| g.compose(p)).collect() }
    }
}

impl From<Vec<Pose>> for Trajectory {
    fn from(poses: Vec<Pose>) -> Self {
        Self { poses }
    }
}
