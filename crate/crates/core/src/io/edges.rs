use std::fmt::Write as _;

use nalgebra::Vector3;

use super::{content_lines, parse_error, parse_float, parse_index, push_floats, IoError};
use crate::graph::NodeId;
use crate::lie::{euler_edge_from_pose, pose_from_euler_edge, EulerEdge, EULER_CONVENTION};
use crate::loops::LoopDetection;
use crate::window::WindowedPoseGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Sliding window over consecutive frames.
    Local,
    /// Crossed window around a loop; its first frame is spliced in.
    Loop,
}

impl WindowKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Loop => "loop",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeFile {
    pub n: usize,
    pub windows: Vec<(WindowKind, WindowedPoseGraph)>,
}

impl EdgeFile {
    pub fn local_windows(&self) -> impl Iterator<Item = &WindowedPoseGraph> {
        self.windows.iter().filter(|(k, _)| *k == WindowKind::Local).map(|(_, w)| w)
    }

    pub fn loop_windows(&self) -> impl Iterator<Item = &WindowedPoseGraph> {
        self.windows.iter().filter(|(k, _)| *k == WindowKind::Loop).map(|(_, w)| w)
    }
}

/// ```text
/// WINDOWS n=3 euler=ZYX-intrinsic(roll_x,pitch_y,yaw_z)
/// WINDOW local 0 1 2
/// 0 1 r1 r2 r3 tx ty tz        (n·(n−1) records per window)
/// ```
pub fn format_edge_file(n: usize, windows: &[(WindowKind, &WindowedPoseGraph)]) -> Result<String, IoError> {
    let mut out = format!("WINDOWS n={n} euler={EULER_CONVENTION}\n");
    for (kind, w) in windows {
        if w.n() != n {
            return Err(IoError::Format(format!("window of size {} in a file declaring n={n}", w.n())));
        }
        let _ = write!(out, "WINDOW {}", kind.as_str());
        for f in w.frame_ids() {
            let _ = write!(out, " {f}");
        }
        out.push('\n');
        let ids = w.frame_ids();
        for (a, b, rel) in w.edges() {
            let e = euler_edge_from_pose(rel)
                .map_err(|e| IoError::Format(format!("edge {} -> {}: {e}", ids[a], ids[b])))?;
            let _ = write!(out, "{} {} ", ids[a], ids[b]);
            push_floats(&mut out, [e.euler.x, e.euler.y, e.euler.z, e.translation.x, e.translation.y, e.translation.z]);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn parse_edge_file(text: &str) -> Result<EdgeFile, IoError> {
    let mut lines = content_lines(text);
    let (line, header) = lines.next().ok_or_else(|| parse_error(1, "missing WINDOWS header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&"WINDOWS") || fields.len() != 3 {
        return Err(parse_error(line, "expected 'WINDOWS n=<size> euler=<convention>'"));
    }
    let n = fields[1]
        .strip_prefix("n=")
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 2)
        .ok_or_else(|| parse_error(line, format!("bad window size '{}'", fields[1])))?;
    match fields[2].strip_prefix("euler=") {
        Some(EULER_CONVENTION) => {}
        _ => return Err(parse_error(line, format!("unsupported Euler convention '{}'", fields[2]))),
    }

    let mut windows = Vec::new();
    let records = n * (n - 1);
    while let Some((line, head)) = lines.next() {
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.first() != Some(&"WINDOW") || fields.len() != 2 + n {
            return Err(parse_error(line, format!("expected 'WINDOW local|loop' and {n} frame ids")));
        }
        let kind = match fields[1] {
            "local" => WindowKind::Local,
            "loop" => WindowKind::Loop,
            other => return Err(parse_error(line, format!("unknown window kind '{other}'"))),
        };
        let frames = fields[2..].iter().map(|f| parse_index(f, line)).collect::<Result<Vec<NodeId>, _>>()?;
        let view = |f: NodeId, line: usize| {
            frames
                .iter()
                .position(|&x| x == f)
                .ok_or_else(|| parse_error(line, format!("frame {f} is not in the window")))
        };
        let mut edges = Vec::with_capacity(records);
        for _ in 0..records {
            let (line, rec) = lines.next().ok_or_else(|| parse_error(line, "window ends early"))?;
            let f: Vec<&str> = rec.split_whitespace().collect();
            if f.len() != 8 {
                return Err(parse_error(line, format!("edge record needs 8 fields, found {}", f.len())));
            }
            let (a, b) = (view(parse_index(f[0], line)?, line)?, view(parse_index(f[1], line)?, line)?);
            let v = f[2..].iter().map(|t| parse_float(t, line)).collect::<Result<Vec<_>, _>>()?;
            let edge = EulerEdge { euler: Vector3::new(v[0], v[1], v[2]), translation: Vector3::new(v[3], v[4], v[5]) };
            edges.push(((a, b), pose_from_euler_edge(&edge)));
        }
        let w = WindowedPoseGraph::build(frames.clone(), edges).map_err(|e| parse_error(line, e.to_string()))?;
        windows.push((kind, w));
    }
    Ok(EdgeFile { n, windows })
}

/// Lines `query_frame match_frame score`.
pub fn format_detections(detections: &[LoopDetection]) -> String {
    let mut out = String::new();
    for d in detections {
        let _ = write!(out, "{} {} ", d.query_frame, d.match_frame);
        super::push_float(&mut out, d.score);
        out.push('\n');
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<LoopDetection>, IoError> {
    content_lines(text)
        .map(|(line, content)| {
            let f: Vec<&str> = content.split_whitespace().collect();
            if f.len() != 3 {
                return Err(parse_error(line, format!("expected 'query match score', found {} fields", f.len())));
            }
            Ok(LoopDetection {
                query_frame: parse_index(f[0], line)?,
                match_frame: parse_index(f[1], line)?,
                score: parse_float(f[2], line)?,
            })
        })
        .collect()
}

/// Lines `i j`, one per closed loop.
pub fn format_loop_log(loops: &[(NodeId, NodeId)]) -> String {
    loops.iter().map(|(i, j)| format!("{i} {j}\n")).collect()
}

pub fn parse_loop_log(text: &str) -> Result<Vec<(NodeId, NodeId)>, IoError> {
    content_lines(text)
        .map(|(line, content)| {
            let f: Vec<&str> = content.split_whitespace().collect();
            if f.len() != 2 {
                return Err(parse_error(line, "expected 'i j'"));
            }
            Ok((parse_index(f[0], line)?, parse_index(f[1], line)?))
        })
        .collect()
}
