use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{content_lines, parse_error, parse_float, push_floats, read_text, write_text, IoError};
use crate::lie::{Pose, Rotation};
use crate::trajectory::Trajectory;

/// Rotation blocks further than this from orthonormal are projected back onto SO(3).
const REPROJECT_ABOVE: f64 = 1e-10;
const WARN_ABOVE: f64 = 1e-6;

/// One pose per line: the 3×4 matrix `[R | t]` in row-major order.
pub fn parse_kitti(text: &str) -> Result<Trajectory, IoError> {
    let mut poses = Vec::new();
    for (line, content) in content_lines(text) {
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(parse_error(line, format!("expected 12 numbers, found {}", fields.len())));
        }
        let v = fields.iter().map(|f| parse_float(f, line)).collect::<Result<Vec<_>, _>>()?;
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        let deviation = (r * r.transpose() - Matrix3::identity()).abs().max().max((r.determinant() - 1.0).abs());
        let rotation = if deviation > REPROJECT_ABOVE {
            if deviation > WARN_ABOVE {
                log::warn!("line {line}: rotation is {deviation:.2e} from orthonormal, re-orthonormalizing");
            }
            if r.determinant() <= 0.0 {
                return Err(parse_error(line, "rotation block has nonpositive determinant"));
            }
            Rotation::orthonormalized(&r).map_err(|e| parse_error(line, e.to_string()))?
        } else {
            Rotation::from_matrix(r).map_err(|e| parse_error(line, e.to_string()))?
        };
        poses.push(Pose::new(rotation, t));
    }
    Ok(Trajectory::new(poses))
}

pub fn format_kitti(t: &Trajectory) -> String {
    let mut out = String::new();
    for p in &t.poses {
        let r = p.rotation.matrix();
        let x = &p.translation;
        push_floats(
            &mut out,
            [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                x.x,
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                x.y,
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
                x.z,
            ],
        );
        out.push('\n');
    }
    out
}

pub fn load_kitti_poses(path: &Path) -> Result<Trajectory, IoError> {
    parse_kitti(&read_text(path)?)
}

pub fn save_kitti_poses(t: &Trajectory, path: &Path) -> Result<(), IoError> {
    write_text(path, &format_kitti(t))
}
