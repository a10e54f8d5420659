use std::fmt::Write as _;

use nalgebra::Vector3;

use super::{parse_error, parse_float, parse_index, push_floats, IoError};
use crate::graph::{Constraint, ConstraintKind, GlobalPoseGraph, KindWeights};
use crate::lie::{Pose, Rotation};

const VERTEX: &str = "VERTEX_SE3:QUAT";
const EDGE: &str = "EDGE_SE3:QUAT";
const LOOP_MARK: &str = "# loop";

fn push_pose(out: &mut String, p: &Pose) {
    let q = p.rotation.quaternion();
    push_floats(out, [p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w]);
}

/// Writes vertices, edges (with a scalar information matrix equal to the kind weight) and
/// `FIX` lines. Loop edges end in `# loop`.
pub fn format_g2o(graph: &GlobalPoseGraph) -> String {
    let mut out = String::new();
    for (id, p) in graph.poses().iter().enumerate() {
        let _ = write!(out, "{VERTEX} {id} ");
        push_pose(&mut out, p);
        out.push('\n');
    }
    for c in graph.constraints() {
        let _ = write!(out, "{EDGE} {} {} ", c.from, c.to);
        push_pose(&mut out, &c.relative);
        let w = graph.weights().weight(c.kind);
        for r in 0..6 {
            for col in r..6 {
                out.push(' ');
                super::push_float(&mut out, if r == col { w } else { 0.0 });
            }
        }
        if c.kind == ConstraintKind::Loop {
            let _ = write!(out, " {LOOP_MARK}");
        }
        out.push('\n');
    }
    for id in graph.fixed() {
        let _ = writeln!(out, "FIX {id}");
    }
    out
}

fn parse_pose(fields: &[&str], line: usize) -> Result<Pose, IoError> {
    let v = fields.iter().map(|f| parse_float(f, line)).collect::<Result<Vec<_>, _>>()?;
    let rotation = Rotation::from_wxyz(v[6], v[3], v[4], v[5]).map_err(|e| parse_error(line, e.to_string()))?;
    Ok(Pose::new(rotation, Vector3::new(v[0], v[1], v[2])))
}

/// Reads the subset written by [`format_g2o`]. Vertex ids must be `0, 1, 2, …` in order and
/// every information matrix must be a multiple of the identity shared by its edge kind.
pub fn parse_g2o(text: &str) -> Result<GlobalPoseGraph, IoError> {
    let mut graph = GlobalPoseGraph::new();
    let mut edges = Vec::new();
    let mut fixed = Vec::new();
    let mut weights: [Option<f64>; 2] = [None, None];
    for (line, content) in text.lines().enumerate().map(|(k, l)| (k + 1, l.trim())) {
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let (body, is_loop) = match content.strip_suffix(LOOP_MARK) {
            Some(body) => (body.trim_end(), true),
            None => (content, false),
        };
        let fields: Vec<&str> = body.split_whitespace().collect();
        match fields[0] {
            VERTEX => {
                if fields.len() != 9 {
                    return Err(parse_error(line, format!("vertex needs 8 values, found {}", fields.len() - 1)));
                }
                let id = parse_index(fields[1], line)?;
                if id != graph.len() {
                    return Err(parse_error(line, format!("expected vertex {}, found {id}", graph.len())));
                }
                graph.add_node(parse_pose(&fields[2..9], line)?);
            }
            EDGE => {
                if fields.len() != 3 + 7 + 21 {
                    return Err(parse_error(line, format!("edge needs 30 values, found {}", fields.len() - 1)));
                }
                let from = parse_index(fields[1], line)?;
                let to = parse_index(fields[2], line)?;
                let relative = parse_pose(&fields[3..10], line)?;
                let info = fields[10..].iter().map(|f| parse_float(f, line)).collect::<Result<Vec<_>, _>>()?;
                let w = info[0];
                let mut k = 0;
                for r in 0..6 {
                    for c in r..6 {
                        let expected = if r == c { w } else { 0.0 };
                        if info[k] != expected {
                            return Err(parse_error(line, "only scalar information matrices are supported"));
                        }
                        k += 1;
                    }
                }
                if w <= 0.0 {
                    return Err(parse_error(line, "information must be positive"));
                }
                let slot = &mut weights[is_loop as usize];
                match slot {
                    Some(prev) if *prev != w => {
                        return Err(parse_error(line, "information differs between edges of the same kind"));
                    }
                    _ => *slot = Some(w),
                }
                let c = if is_loop {
                    Constraint::loop_closure(from, to, relative)
                } else {
                    Constraint::local(from, to, relative)
                };
                edges.push((line, c));
            }
            "FIX" => {
                if fields.len() != 2 {
                    return Err(parse_error(line, "FIX takes one vertex id"));
                }
                fixed.push((line, parse_index(fields[1], line)?));
            }
            other => return Err(parse_error(line, format!("unsupported record '{other}'"))),
        }
    }
    for (line, c) in edges {
        graph.add_constraint(c).map_err(|e| parse_error(line, e.to_string()))?;
    }
    for (line, id) in fixed {
        graph.fix(id).map_err(|e| parse_error(line, e.to_string()))?;
    }
    graph.set_weights(KindWeights { local: weights[0].unwrap_or(1.0), loop_closure: weights[1].unwrap_or(1.0) });
    Ok(graph)
}
