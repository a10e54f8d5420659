//! Flat `key = value` configuration covering the simulator, optimizer and loop detector.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use posegraph_slam::graph::KindWeights;
use posegraph_slam::lie::Twist;
use posegraph_slam::loops::DetectorConfig;
use posegraph_slam::optimizer::{JacobianMode, LmConfig};
use posegraph_slam::sim::{PathSpec, SimConfig};

use crate::error::CliError;

/// Every setting a command may read.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub sim: SimConfig,
    pub lm: LmConfig,
    pub detector: DetectorConfig,
    pub weights: KindWeights,
    /// Start-frame stride of the relative-error evaluation.
    pub eval_stride: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            lm: LmConfig::default(),
            detector: DetectorConfig::default(),
            weights: KindWeights::default(),
            eval_stride: 1,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "window_size",
    "path",
    "radius",
    "laps",
    "length",
    "waypoints",
    "step",
    "noise_rot",
    "noise_trans",
    "drift_bias",
    "loop_radius",
    "min_loop_separation",
    "max_iterations",
    "initial_lambda",
    "lambda_up",
    "lambda_down",
    "absolute_chi2_tol",
    "relative_decrease_tol",
    "step_norm_tol",
    "max_lambda",
    "jacobians",
    "required_consecutive",
    "match_band",
    "cooldown",
    "local_weight",
    "loop_weight",
    "eval_stride",
];

fn bad(key: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {reason}"))
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, format!("'{value}' is not a valid number")))
}

fn floats(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    value.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).map(|s| number(key, s)).collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", k + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Config(format!("line {}: unknown key '{key}'", k + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: key '{key}' given twice", k + 1)));
            }
        }
        Self::from_entries(&entries)
    }

    fn from_entries(e: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        let get = |key: &str| e.get(key).map(String::as_str);

        macro_rules! set {
            ($key:literal => $target:expr) => {
                if let Some(v) = get($key) {
                    $target = number($key, v)?;
                }
            };
        }
        set!("seed" => cfg.sim.seed);
        set!("window_size" => cfg.sim.window_size);
        set!("step" => cfg.sim.step);
        set!("noise_rot" => cfg.sim.noise_rot);
        set!("noise_trans" => cfg.sim.noise_trans);
        set!("loop_radius" => cfg.sim.loop_radius);
        set!("min_loop_separation" => cfg.sim.min_loop_separation);
        set!("max_iterations" => cfg.lm.max_iterations);
        set!("initial_lambda" => cfg.lm.initial_lambda);
        set!("lambda_up" => cfg.lm.lambda_up);
        set!("lambda_down" => cfg.lm.lambda_down);
        set!("absolute_chi2_tol" => cfg.lm.absolute_chi2_tol);
        set!("relative_decrease_tol" => cfg.lm.relative_decrease_tol);
        set!("step_norm_tol" => cfg.lm.step_norm_tol);
        set!("max_lambda" => cfg.lm.max_lambda);
        set!("required_consecutive" => cfg.detector.required_consecutive);
        set!("match_band" => cfg.detector.match_band);
        set!("cooldown" => cfg.detector.cooldown);
        set!("local_weight" => cfg.weights.local);
        set!("loop_weight" => cfg.weights.loop_closure);
        set!("eval_stride" => cfg.eval_stride);

        if let Some(v) = get("jacobians") {
            cfg.lm.jacobians = match v {
                "exact" => JacobianMode::Exact,
                "first_order" => JacobianMode::FirstOrder,
                other => return Err(bad("jacobians", format!("'{other}' is not exact or first_order"))),
            };
        }
        if let Some(v) = get("drift_bias") {
            let x = floats("drift_bias", v)?;
            cfg.sim.drift_bias = match x.as_slice() {
                // a single number is forward (z) translation per frame
                [forward] => Twist::new(Vector3::new(0.0, 0.0, *forward), Vector3::zeros()),
                [a, b, c, d, e, f] => Twist::new(Vector3::new(*a, *b, *c), Vector3::new(*d, *e, *f)),
                _ => return Err(bad("drift_bias", "give one forward translation or six twist components")),
            };
        }

        let radius = get("radius").map(|v| number::<f64>("radius", v)).transpose()?;
        let laps = get("laps").map(|v| number::<f64>("laps", v)).transpose()?;
        let length = get("length").map(|v| number::<f64>("length", v)).transpose()?;
        let path = get("path").unwrap_or("circle");
        let unused = |key: &str, present: bool| {
            if present {
                Err(bad(key, format!("not used by path = {path}")))
            } else {
                Ok(())
            }
        };
        cfg.sim.path = match path {
            "circle" | "figure_eight" => {
                unused("length", length.is_some())?;
                unused("waypoints", get("waypoints").is_some())?;
                let radius = radius.unwrap_or(50.0);
                let laps = laps.unwrap_or(1.1);
                if path == "circle" {
                    PathSpec::Circle { radius, laps }
                } else {
                    PathSpec::FigureEight { radius, laps }
                }
            }
            "straight" => {
                unused("radius", radius.is_some())?;
                unused("laps", laps.is_some())?;
                unused("waypoints", get("waypoints").is_some())?;
                PathSpec::Straight { length: length.unwrap_or(100.0) }
            }
            "waypoints" => {
                unused("radius", radius.is_some())?;
                unused("laps", laps.is_some())?;
                unused("length", length.is_some())?;
                let text = get("waypoints").ok_or_else(|| bad("waypoints", "required for path = waypoints"))?;
                let points = text
                    .split(';')
                    .map(|p| match floats("waypoints", p)?.as_slice() {
                        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
                        _ => Err(bad("waypoints", format!("'{}' is not 'x y z'", p.trim()))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                PathSpec::Waypoints(points)
            }
            other => return Err(bad("path", format!("'{other}' is not circle, figure_eight, straight or waypoints"))),
        };

        cfg.sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
        cfg.lm.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.detector.required_consecutive == 0 {
            return Err(bad("required_consecutive", "must be positive"));
        }
        for (key, w) in [("local_weight", cfg.weights.local), ("loop_weight", cfg.weights.loop_closure)] {
            if !(w.is_finite() && w > 0.0) {
                return Err(bad(key, "must be positive"));
            }
        }
        Ok(cfg)
    }

    /// Only the optimizer, detector, weight and evaluation settings; what `run` reads.
    pub fn backend_text(&self) -> String {
        let sim_keys = &KEYS[..KEYS.iter().position(|&k| k == "max_iterations").unwrap()];
        self.to_text()
            .lines()
            .filter(|l| !sim_keys.contains(&l.split(" = ").next().unwrap_or("")))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// Every setting, one `key = value` per line in a fixed order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let s = &self.sim;
        let mut lines: Vec<(String, String)> =
            vec![("seed".into(), s.seed.to_string()), ("window_size".into(), s.window_size.to_string())];
        match &s.path {
            PathSpec::Circle { radius, laps } => {
                lines.push(("path".into(), "circle".into()));
                lines.push(("radius".into(), radius.to_string()));
                lines.push(("laps".into(), laps.to_string()));
            }
            PathSpec::FigureEight { radius, laps } => {
                lines.push(("path".into(), "figure_eight".into()));
                lines.push(("radius".into(), radius.to_string()));
                lines.push(("laps".into(), laps.to_string()));
            }
            PathSpec::Straight { length } => {
                lines.push(("path".into(), "straight".into()));
                lines.push(("length".into(), length.to_string()));
            }
            PathSpec::Waypoints(points) => {
                lines.push(("path".into(), "waypoints".into()));
                let pts: Vec<String> = points.iter().map(|p| format!("{} {} {}", p.x, p.y, p.z)).collect();
                lines.push(("waypoints".into(), pts.join("; ")));
            }
        }
        let b = s.drift_bias.to_vector();
        let jac = match self.lm.jacobians {
            JacobianMode::Exact => "exact",
            JacobianMode::FirstOrder => "first_order",
        };
        lines.extend([
            ("step".into(), s.step.to_string()),
            ("noise_rot".into(), s.noise_rot.to_string()),
            ("noise_trans".into(), s.noise_trans.to_string()),
            ("drift_bias".into(), b.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")),
            ("loop_radius".into(), s.loop_radius.to_string()),
            ("min_loop_separation".into(), s.min_loop_separation.to_string()),
            ("max_iterations".into(), self.lm.max_iterations.to_string()),
            ("initial_lambda".into(), self.lm.initial_lambda.to_string()),
            ("lambda_up".into(), self.lm.lambda_up.to_string()),
            ("lambda_down".into(), self.lm.lambda_down.to_string()),
            ("absolute_chi2_tol".into(), self.lm.absolute_chi2_tol.to_string()),
            ("relative_decrease_tol".into(), self.lm.relative_decrease_tol.to_string()),
            ("step_norm_tol".into(), self.lm.step_norm_tol.to_string()),
            ("max_lambda".into(), self.lm.max_lambda.to_string()),
            ("jacobians".into(), jac.into()),
            ("required_consecutive".into(), self.detector.required_consecutive.to_string()),
            ("match_band".into(), self.detector.match_band.to_string()),
            ("cooldown".into(), self.detector.cooldown.to_string()),
            ("local_weight".into(), self.weights.local.to_string()),
            ("loop_weight".into(), self.weights.loop_closure.to_string()),
            ("eval_stride".into(), self.eval_stride.to_string()),
        ]);
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
