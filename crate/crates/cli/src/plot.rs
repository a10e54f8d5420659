//! Bird's-eye SVG overlay of trajectories in the x–z plane.

use std::fmt::Write;

use posegraph_slam::Trajectory;

use crate::error::CliError;

const WIDTH: f64 = 800.0;
const MARGIN: f64 = 40.0;
const LEGEND_ROW: f64 = 18.0;
const COLORS: [&str; 6] = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd"];
const DASHES: [&str; 4] = ["none", "8 4", "2 3", "10 3 2 3"];

/// Stroke colour and dash pattern of the `k`-th track; distinct for the first 12.
pub fn style(k: usize) -> (&'static str, &'static str) {
    (COLORS[k % COLORS.len()], DASHES[(k / COLORS.len() + k) % DASHES.len()])
}

/// An SVG with one polyline per trajectory plus a legend. The view keeps x and z at the same
/// scale with z pointing up.
pub fn render_svg(tracks: &[(String, &Trajectory)]) -> Result<String, CliError> {
    if tracks.is_empty() {
        return Err(CliError::Usage("nothing to plot".into()));
    }
    let (mut x0, mut x1, mut z0, mut z1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (name, t) in tracks {
        if t.is_empty() {
            return Err(CliError::Data(format!("trajectory '{name}' is empty")));
        }
        for p in t.positions() {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            z0 = z0.min(p.z);
            z1 = z1.max(p.z);
        }
    }
    let span = (x1 - x0).max(z1 - z0).max(1e-9);
    let scale = (WIDTH - 2.0 * MARGIN) / span;
    let plot_h = (z1 - z0) * scale;
    let legend_h = LEGEND_ROW * tracks.len() as f64;
    let height = plot_h + 2.0 * MARGIN + legend_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, (name, t)) in tracks.iter().enumerate() {
        let (color, dash) = style(k);
        let _ = write!(
            out,
            r#"<polyline id="track{k}" fill="none" stroke="{color}" stroke-width="1.5" stroke-dasharray="{dash}" points=""#
        );
        for (n, p) in t.positions().enumerate() {
            let sx = MARGIN + (p.x - x0) * scale;
            let sy = MARGIN + (z1 - p.z) * scale;
            let _ = write!(out, "{}{sx:.3},{sy:.3}", if n > 0 { " " } else { "" });
        }
        let _ = writeln!(out, r#""><title>{}</title></polyline>"#, escape(name));
    }
    let _ = writeln!(out, r#"<g id="legend" font-family="sans-serif" font-size="12">"#);
    for (k, (name, _)) in tracks.iter().enumerate() {
        let (color, dash) = style(k);
        let y = plot_h + 2.0 * MARGIN + LEGEND_ROW * k as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{MARGIN:.0}" y1="{y:.1}" x2="{:.0}" y2="{y:.1}" stroke="{color}" stroke-width="1.5" stroke-dasharray="{dash}"/><text x="{:.0}" y="{:.1}">{}</text>"#,
            MARGIN + 30.0,
            MARGIN + 36.0,
            y + 4.0,
            escape(name)
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, "</svg>");
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// `track,frame,x,y,z` for every pose of every trajectory.
pub fn tracks_csv(tracks: &[(String, &Trajectory)]) -> String {
    let mut out = String::from("track,frame,x,y,z\n");
    for (name, t) in tracks {
        for (k, p) in t.positions().enumerate() {
            let _ = writeln!(out, "{name},{k},{:.9},{:.9},{:.9}", p.x, p.y, p.z);
        }
    }
    out
}

/// Screen-space points of the `k`-th polyline of an SVG written by [`render_svg`].
pub fn polyline_points(svg: &str, k: usize) -> Option<Vec<(f64, f64)>> {
    let start = svg.find(&format!(r#"id="track{k}""#))?;
    let rest = &svg[start..];
    let p = rest.find(r#"points=""#)? + 8;
    let end = rest[p..].find('"')? + p;
    rest[p..end]
        .split_whitespace()
        .map(|pair| {
            let (x, y) = pair.split_once(',')?;
            Some((x.parse().ok()?, y.parse().ok()?))
        })
        .collect()
}
