//! Trajectory alignment and KITTI-style error metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::lie::{Pose, Rotation};
use crate::trajectory::Trajectory;

/// Segment lengths in meters.
pub const SEGMENT_LENGTHS: [u32; 8] = [100, 200, 300, 400, 500, 600, 700, 800];

/// Spread (RMS distance from the best-fit line) below which a point set counts as collinear.
const COLLINEAR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("trajectories differ in length: estimate {est}, ground truth {gt}")]
    LengthMismatch { est: usize, gt: usize },
    #[error("trajectories are empty")]
    Empty,
    #[error("positions are collinear, rotation about the line is undetermined")]
    Degenerate,
}

fn check_lengths(est: &Trajectory, gt: &Trajectory) -> Result<(), EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    if est.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Least-squares rigid `G` minimizing `Σ |G·p_est − p_gt|²` (no scale), plus whether the
/// estimated positions were collinear.
pub fn align_se3_with_flag(est: &Trajectory, gt: &Trajectory) -> Result<(Pose, bool), EvalError> {
    check_lengths(est, gt)?;
    let n = est.len() as f64;
    let mean_e = est.positions().sum::<Vector3<f64>>() / n;
    let mean_g = gt.positions().sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (e, g) in est.positions().zip(gt.positions()) {
        let de = e - mean_e;
        cross += de * (g - mean_g).transpose();
        spread += de * de.transpose();
    }
    let mut eig = spread.symmetric_eigenvalues().as_slice().to_vec();
    eig.sort_by(f64::total_cmp);
    // variance across the two smaller principal directions
    let degenerate = ((eig[0] + eig[1]).max(0.0) / n).sqrt() < COLLINEAR_TOL;

    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut fix = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * fix * u.transpose();
    let rotation = Rotation::orthonormalized(&r).expect("finite SVD factors");
    let t = mean_g - rotation.rotate(&mean_e);
    Ok((Pose::new(rotation, t), degenerate))
}

/// Like [`align_se3_with_flag`] but refuses collinear inputs.
pub fn align_se3(est: &Trajectory, gt: &Trajectory) -> Result<Pose, EvalError> {
    match align_se3_with_flag(est, gt)? {
        (_, true) => Err(EvalError::Degenerate),
        (g, false) => Ok(g),
    }
}

/// Root mean squared position difference, without any alignment.
pub fn rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    check_lengths(est, gt)?;
    let sum: f64 = est.positions().zip(gt.positions()).map(|(e, g)| (e - g).norm_squared()).sum();
    Ok((sum / est.len() as f64).sqrt())
}

/// RMSE after the optimal rigid alignment of `est` onto `gt`.
pub fn aligned_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    let (g, _) = align_se3_with_flag(est, gt)?;
    rmse(&est.transformed(&g), gt)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelativeErrors {
    /// Mean translational error, percent.
    pub t_rel: f64,
    /// Mean rotational error, degrees per 100 m.
    pub r_rel: f64,
    /// Per segment length: `(t_rel %, r_rel deg/100 m)`.
    pub per_length: BTreeMap<u32, (f64, f64)>,
    pub segments: usize,
    /// No segment of even the shortest length fits in the trajectory.
    pub too_short: bool,
}

/// Segment errors of the KITTI odometry protocol. Each start frame (every `stride` frames)
/// is paired with the first frame whose accumulated ground-truth distance reaches the start's
/// plus `L`, for each `L` in [`SEGMENT_LENGTHS`].
pub fn kitti_rel_errors(est: &Trajectory, gt: &Trajectory, stride: usize) -> Result<RelativeErrors, EvalError> {
    check_lengths(est, gt)?;
    let stride = stride.max(1);
    let dist = gt.cumulative_distance();
    let mut per: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
    let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
    for first in (0..gt.len()).step_by(stride) {
        let mut last = first;
        for &len in &SEGMENT_LENGTHS {
            let target = dist[first] + len as f64;
            // lengths ascend, so the search resumes where the previous one stopped
            while last < gt.len() && dist[last] < target {
                last += 1;
            }
            if last == gt.len() {
                break;
            }
            let gt_rel = gt.poses[first].between(&gt.poses[last]);
            let est_rel = est.poses[first].between(&est.poses[last]);
            let err = gt_rel.between(&est_rel);
            let t_err = err.translation.norm() / len as f64;
            let r_err = err.rotation.angle() / len as f64;
            let slot = per.entry(len).or_insert((0.0, 0.0, 0));
            slot.0 += t_err;
            slot.1 += r_err;
            slot.2 += 1;
            t_sum += t_err;
            r_sum += r_err;
            count += 1;
        }
    }
    let t_scale = 100.0;
    let r_scale = 100.0 * 180.0 / std::f64::consts::PI;
    if count == 0 {
        return Ok(RelativeErrors { too_short: true, ..RelativeErrors::default() });
    }
    Ok(RelativeErrors {
        t_rel: t_sum / count as f64 * t_scale,
        r_rel: r_sum / count as f64 * r_scale,
        per_length: per
            .into_iter()
            .map(|(len, (t, r, k))| (len, (t / k as f64 * t_scale, r / k as f64 * r_scale)))
            .collect(),
        segments: count,
        too_short: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub t_rel: f64,
    pub r_rel: f64,
    /// Aligned RMSE, meters.
    pub rmse: f64,
    pub per_length: BTreeMap<u32, (f64, f64)>,
    pub alignment: Pose,
    pub degenerate_alignment: bool,
    pub too_short: bool,
}

pub fn evaluate(est: &Trajectory, gt: &Trajectory, stride: usize) -> Result<EvalReport, EvalError> {
    let (alignment, degenerate) = align_se3_with_flag(est, gt)?;
    let rmse = rmse(&est.transformed(&alignment), gt)?;
    let rel = kitti_rel_errors(est, gt, stride)?;
    Ok(EvalReport {
        t_rel: rel.t_rel,
        r_rel: rel.r_rel,
        rmse,
        per_length: rel.per_length,
        alignment,
        degenerate_alignment: degenerate,
        too_short: rel.too_short,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,length_m,value\n");
        let _ = writeln!(out, "t_rel_percent,all,{:.9}", self.t_rel);
        let _ = writeln!(out, "r_rel_deg_per_100m,all,{:.9}", self.r_rel);
        let _ = writeln!(out, "rmse_m,all,{:.9}", self.rmse);
        for (len, (t, r)) in &self.per_length {
            let _ = writeln!(out, "t_rel_percent,{len},{t:.9}");
            let _ = writeln!(out, "r_rel_deg_per_100m,{len},{r:.9}");
        }
        let _ = writeln!(out, "degenerate_alignment,all,{}", self.degenerate_alignment as u8);
        let _ = writeln!(out, "too_short,all,{}", self.too_short as u8);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>12} {:>16}", "length", "t_rel (%)", "r_rel (deg/100m)");
        for (len, (t, r)) in &self.per_length {
            let _ = writeln!(out, "{:<10} {t:>12.4} {r:>16.4}", format!("{len} m"));
        }
        let _ = writeln!(out, "{:<10} {:>12.4} {:>16.4}", "mean", self.t_rel, self.r_rel);
        let _ = writeln!(out, "aligned RMSE: {:.4} m", self.rmse);
        if self.too_short {
            let _ = writeln!(out, "note: trajectory shorter than 100 m, no segment errors");
        }
        if self.degenerate_alignment {
            let _ = writeln!(out, "note: positions are collinear, alignment rotation is not unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::se3_exp;
    use crate::lie::testing::{random_pose, random_twist};
    use crate::sim::{generate_ground_truth, PathSpec, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wiggly(rng: &mut ChaCha8Rng, frames: usize) -> Trajectory {
        let mut poses = vec![Pose::identity()];
        for _ in 1..frames {
            let mut step = random_twist(rng, 0.05, 0.2);
            step.rho.z += 1.0;
            poses.push(poses.last().unwrap().compose(&se3_exp(&step)));
        }
        Trajectory::new(poses)
    }

    #[test]
    fn identical_trajectories_align_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = wiggly(&mut rng, 200);
        let g = align_se3(&gt, &gt).unwrap();
        assert!(g.log().norm() < 1e-10);
        let report = evaluate(&gt, &gt, 1).unwrap();
        assert!(report.t_rel.abs() < 1e-12 && report.r_rel.abs() < 1e-12 && report.rmse < 1e-10);
    }

    #[test]
    fn recovers_the_inverse_of_a_rigid_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let gt = Trajectory::new((0..100).map(|_| random_pose(&mut rng)).collect());
            let g0 = random_pose(&mut rng);
            let est = gt.transformed(&g0);
            let g = align_se3(&est, &gt).unwrap();
            assert!(g.compose(&g0).log().norm() < 1e-9, "{}", g.compose(&g0).log().norm());
        }
    }

    #[test]
    fn alignment_never_hurts_and_beats_random_alternatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = wiggly(&mut rng, 150);
        let est = Trajectory::new(
            gt.poses
                .iter()
                .map(|p| {
                    let noise = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    Pose::new(p.rotation, p.translation + noise * 0.5)
                })
                .collect(),
        );
        let best = aligned_rmse(&est, &gt).unwrap();
        assert!(best <= rmse(&est, &gt).unwrap());
        let g = align_se3(&est, &gt).unwrap();
        for _ in 0..100 {
            let other = g.compose(&se3_exp(&random_twist(&mut rng, 0.1, 1.0)));
            assert!(best <= rmse(&est.transformed(&other), &gt).unwrap());
        }
    }

    #[test]
    fn collinear_points_are_flagged() {
        let cfg = SimConfig { path: PathSpec::Straight { length: 50.0 }, ..SimConfig::default() };
        let gt = generate_ground_truth(&cfg).unwrap();
        assert_eq!(align_se3(&gt, &gt), Err(EvalError::Degenerate));
        let report = evaluate(&gt, &gt, 1).unwrap();
        assert!(report.degenerate_alignment);
        assert!(report.too_short);
    }

    #[test]
    fn constant_offset_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = wiggly(&mut rng, 50);
        let d = Vector3::new(0.3, -0.4, 1.2);
        let est = Trajectory::new(gt.poses.iter().map(|p| Pose::new(p.rotation, p.translation + d)).collect());
        assert!((rmse(&est, &gt).unwrap() - d.norm()).abs() < 1e-12);
    }

    #[test]
    fn uniform_scale_on_a_straight_path() {
        let cfg = SimConfig { path: PathSpec::Straight { length: 1000.0 }, ..SimConfig::default() };
        let gt = generate_ground_truth(&cfg).unwrap();
        let est = Trajectory::new(gt.poses.iter().map(|p| Pose::new(p.rotation, p.translation * 1.01)).collect());
        let rel = kitti_rel_errors(&est, &gt, 1).unwrap();
        assert!((rel.t_rel - 1.0).abs() < 1e-6, "{}", rel.t_rel);
        assert_eq!(rel.r_rel, 0.0);
        assert_eq!(rel.per_length.len(), 8);
    }

    #[test]
    fn rigid_motion_of_both_leaves_relative_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = wiggly(&mut rng, 400);
        let est = wiggly(&mut rng, 400);
        let g = random_pose(&mut rng);
        let a = kitti_rel_errors(&est, &gt, 1).unwrap();
        let b = kitti_rel_errors(&est.transformed(&g), &gt.transformed(&g), 1).unwrap();
        assert!((a.t_rel - b.t_rel).abs() < 1e-9 * a.t_rel.max(1.0));
        assert!((a.r_rel - b.r_rel).abs() < 1e-9 * a.r_rel.max(1.0));
    }

    #[test]
    fn stationary_tail_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = wiggly(&mut rng, 300);
        let est = wiggly(&mut rng, 300);
        let base = kitti_rel_errors(&est, &gt, 1).unwrap();
        let mut gt2 = gt.clone();
        let mut est2 = est.clone();
        for _ in 0..20 {
            gt2.poses.push(*gt.poses.last().unwrap());
            est2.poses.push(*est.poses.last().unwrap());
        }
        assert_eq!(kitti_rel_errors(&est2, &gt2, 1).unwrap(), base);
    }

    #[test]
    fn short_and_mismatched_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = wiggly(&mut rng, 50);
        assert!(kitti_rel_errors(&gt, &gt, 1).unwrap().too_short);
        let shorter = Trajectory::new(gt.poses[..40].to_vec());
        assert_eq!(kitti_rel_errors(&shorter, &gt, 1), Err(EvalError::LengthMismatch { est: 40, gt: 50 }));
    }

    #[test]
    fn csv_and_table_mention_every_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = wiggly(&mut rng, 900);
        let est = wiggly(&mut rng, 900);
        let report = evaluate(&est, &gt, 10).unwrap();
        let csv = report.to_csv();
        let table = report.to_table();
        for len in SEGMENT_LENGTHS {
            assert!(csv.contains(&format!("t_rel_percent,{len},")));
            assert!(table.contains(&format!("{len} m")));
        }
    }
}
