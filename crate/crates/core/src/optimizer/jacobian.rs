//! Linearization of the edge residual under right-multiplicative perturbations
//! `T_i ← T_i·exp(δ_i)`, `T_j ← T_j·exp(δ_j)`.

use nalgebra::Matrix6;

use crate::graph::{edge_error_of, Constraint, GlobalPoseGraph};
use crate::lie::{se3_ad, se3_exp, se3_right_jacobian_inv, Pose, Twist};

/// How the inverse right Jacobian of the residual is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianMode {
    /// Closed form.
    #[default]
    Exact,
    /// `I + ½·ad(e)`, accurate only for small residuals.
    FirstOrder,
}

/// `(∂e/∂δ_i, ∂e/∂δ_j)` at the graph's current poses.
pub fn analytic_jacobians(graph: &GlobalPoseGraph, c: &Constraint) -> (Matrix6<f64>, Matrix6<f64>) {
    let (_, ji, jj) = linearize(&graph.poses()[c.from], &graph.poses()[c.to], &c.relative, JacobianMode::Exact);
    (ji, jj)
}

/// Residual and both Jacobian blocks for explicit poses.
pub fn linearize(t_i: &Pose, t_j: &Pose, t_ij: &Pose, mode: JacobianMode) -> (Twist, Matrix6<f64>, Matrix6<f64>) {
    let e = edge_error_of(t_i, t_j, t_ij);
    let jr_inv = match mode {
        JacobianMode::Exact => se3_right_jacobian_inv(&e),
        JacobianMode::FirstOrder => Matrix6::identity() + se3_ad(&e) * 0.5,
    };
    let jj = jr_inv;
    let ji = -jr_inv * t_j.between(t_i).adjoint();
    (e, ji, jj)
}

/// Central finite differences of the residual over each local coordinate, step `h`.
pub fn numeric_jacobians(graph: &GlobalPoseGraph, c: &Constraint, h: f64) -> (Matrix6<f64>, Matrix6<f64>) {
    assert!(h > 0.0, "finite-difference step must be positive");
    let t_i = graph.poses()[c.from];
    let t_j = graph.poses()[c.to];
    numeric_jacobians_of(&t_i, &t_j, &c.relative, h)
}

pub fn numeric_jacobians_of(t_i: &Pose, t_j: &Pose, t_ij: &Pose, h: f64) -> (Matrix6<f64>, Matrix6<f64>) {
    let nudge = |t: &Pose, k: usize, s: f64| {
        let mut d = nalgebra::Vector6::zeros();
        d[k] = s;
        t.compose(&se3_exp(&Twist::from_vector(&d)))
    };
    let mut ji = Matrix6::zeros();
    let mut jj = Matrix6::zeros();
    for k in 0..6 {
        let plus = edge_error_of(&nudge(t_i, k, h), t_j, t_ij).to_vector();
        let minus = edge_error_of(&nudge(t_i, k, -h), t_j, t_ij).to_vector();
        ji.set_column(k, &((plus - minus) / (2.0 * h)));
        let plus = edge_error_of(t_i, &nudge(t_j, k, h), t_ij).to_vector();
        let minus = edge_error_of(t_i, &nudge(t_j, k, -h), t_ij).to_vector();
        jj.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    (ji, jj)
}
