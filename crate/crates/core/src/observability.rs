//! Fisher-information assembly and numerical rank / null-space analysis.
//!
//! This module turns the gauge-freedom arguments about the embedded
//! deformation energy into executable checks: analytic Jacobians verified
//! against a central-difference oracle, singular-value rank reports, the
//! block-row dependency of the single-point Hessian, and the three-step toy
//! problem whose information matrix loses exactly one rank when the feature
//! is static.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::ed_graph::{self, reg_residual, rot_residuals, EdEnergyWeights, EdGraph, GlobalPose};
use crate::error::{CoreError, Result};
use crate::lie::{log_so3, right_jacobian_inv_so3, skew, Rotation};

/// Default relative tolerance separating gauge null directions from
/// small-but-informative singular values.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Default central-difference step for the numeric Jacobian oracle.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Singular-value spectrum, numerical rank and null space of an information
/// matrix.
#[derive(Debug, Clone)]
pub struct FimReport {
    /// Singular values sorted descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub nullity: usize,
    /// Columns span the numerical null space (dim x nullity).
    pub null_basis: DMatrix<f64>,
    /// Relative tolerance used: sigma > tol * sigma_max counts toward rank.
    pub tolerance_used: f64,
}

impl FimReport {
    pub fn state_dim(&self) -> usize {
        self.rank + self.nullity
    }

    /// Compact JSON summary (spectrum, rank, nullity) for CLI reports.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "singular_values": self.singular_values,
            "rank": self.rank,
            "nullity": self.nullity,
            "tolerance_used": self.tolerance_used,
        })
    }
}

/// Central-difference Jacobian of `residual` over local coordinates.
///
/// `residual` receives a perturbation vector in local coordinates (zero means
/// the current state); callers are responsible for retracting rotation
/// coordinates through the exponential map inside the closure, which keeps
/// this oracle agnostic of the state's manifold structure.
pub fn numeric_jacobian<F>(state_dim: usize, step: f64, residual: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let r0 = residual(&DVector::zeros(state_dim))?;
    if r0.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFiniteResidual);
    }
    let mut jac = DMatrix::zeros(r0.len(), state_dim);
    for k in 0..state_dim {
        let mut delta = DVector::zeros(state_dim);
        delta[k] = step;
        let plus = residual(&delta)?;
        delta[k] = -step;
        let minus = residual(&delta)?;
        if plus.len() != r0.len() || minus.len() != r0.len() {
            return Err(CoreError::DimensionMismatch(
                "residual dimension changed under perturbation".into(),
            ));
        }
        let col = (plus - minus) / (2.0 * step);
        if col.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::NonFiniteResidual);
        }
        jac.set_column(k, &col);
    }
    Ok(jac)
}

/// Gauss-Newton information matrix `J^T J`.
pub fn fim(jacobian: &DMatrix<f64>) -> DMatrix<f64> {
    jacobian.transpose() * jacobian
}

/// Numerical rank and null space via SVD.
///
/// Rank counts singular values above `rel_tol * sigma_max`; the null basis
/// collects the right singular vectors of the remaining directions. An
/// all-zero matrix reports rank 0 (not an error).
pub fn rank_analysis(matrix: &DMatrix<f64>, rel_tol: f64) -> FimReport {
    let dim = matrix.ncols();
    let svd = matrix.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let rank = if sigma_max == 0.0 {
        0
    } else {
        singular_values
            .iter()
            .filter(|&&s| s > rel_tol * sigma_max)
            .count()
    };
    let nullity = dim - rank;
    let mut null_basis = DMatrix::zeros(dim, nullity);
    for (col, &i) in order[rank..].iter().enumerate() {
        null_basis.set_column(col, &v_t.row(i).transpose());
    }
    FimReport {
        singular_values,
        rank,
        nullity,
        null_basis,
        tolerance_used: rel_tol,
    }
}

/// Single-point data-term instance in matrix coordinates.
///
/// State ordering for Jacobians and Hessians:
/// `[vec(Lambda) (9m, column-major per node), vec(T) (3m), omega (3), Tc (3)]`
/// where `omega` is a right-multiplicative tangent of `Rc`.
#[derive(Debug, Clone)]
pub struct EdPointInstance {
    /// Weighted offsets `m_j = w_j (v - g_j)` (columns of M).
    pub m: Vec<Vector3<f64>>,
    /// Weights `c_j` (column of C).
    pub c: Vec<f64>,
    /// Per-node affine blocks `A_j` (columns of Lambda).
    pub lambda: Vec<Matrix3<f64>>,
    /// Per-node `t_j + g_j` (columns of T).
    pub tau: Vec<Vector3<f64>>,
    pub rc: Rotation,
    pub tc: Vector3<f64>,
    pub target: Vector3<f64>,
}

impl EdPointInstance {
    /// Builds the instance for an actual point/graph/pose triple.
    pub fn from_point(
        v: &Vector3<f64>,
        graph: &EdGraph,
        pose: &GlobalPose,
        target: &Vector3<f64>,
    ) -> Result<Self> {
        let weights = ed_graph::compute_weights(v, graph)?;
        let m_nodes = graph.node_count();
        let mut m = vec![Vector3::zeros(); m_nodes];
        let mut c = vec![0.0; m_nodes];
        for (j, w) in weights {
            m[j] = (v - graph.nodes()[j].g) * w;
            c[j] = w;
        }
        Ok(Self {
            m,
            c,
            lambda: graph.nodes().iter().map(|n| n.a).collect(),
            tau: graph.nodes().iter().map(|n| n.t + n.g).collect(),
            rc: pose.rc,
            tc: pose.tc,
            target: *target,
        })
    }

    pub fn node_count(&self) -> usize {
        self.m.len()
    }

    pub fn state_dim(&self) -> usize {
        12 * self.node_count() + 6
    }

    /// `Lambda M + T C` for this single column.
    pub fn deformed(&self) -> Vector3<f64> {
        let mut u = Vector3::zeros();
        for j in 0..self.node_count() {
            u += self.lambda[j] * self.m[j] + self.tau[j] * self.c[j];
        }
        u
    }

    pub fn residual(&self) -> Vector3<f64> {
        self.rc.matrix() * self.deformed() + self.tc - self.target
    }

    /// Residual after a local perturbation in the documented state ordering.
    pub fn residual_with(&self, delta: &DVector<f64>) -> Vector3<f64> {
        let m = self.node_count();
        assert_eq!(delta.len(), self.state_dim());
        let mut u = Vector3::zeros();
        for j in 0..m {
            let mut a = self.lambda[j];
            for b in 0..3 {
                for r in 0..3 {
                    a[(r, b)] += delta[9 * j + 3 * b + r];
                }
            }
            let tau = self.tau[j]
                + Vector3::new(
                    delta[9 * m + 3 * j],
                    delta[9 * m + 3 * j + 1],
                    delta[9 * m + 3 * j + 2],
                );
            u += a * self.m[j] + tau * self.c[j];
        }
        let omega = Vector3::new(delta[12 * m], delta[12 * m + 1], delta[12 * m + 2]);
        let tc = self.tc + Vector3::new(delta[12 * m + 3], delta[12 * m + 4], delta[12 * m + 5]);
        self.rc.retract(&omega).matrix() * u + tc - self.target
    }
}

/// Analytic Jacobian of the single-point data residual.
///
/// Block structure: `[(m_j)_b Rc]` for the affine columns, `[c_j Rc]` for the
/// node translations, `-Rc S` with `S = skew(Lambda M + T C)` for the
/// rotation tangent, and the identity for `Tc`.
pub fn assemble_ed_jacobian(instance: &EdPointInstance) -> DMatrix<f64> {
    let m = instance.node_count();
    let rc = instance.rc.matrix();
    let mut jac = DMatrix::zeros(3, instance.state_dim());
    for j in 0..m {
        for b in 0..3 {
            let block = rc * instance.m[j][b];
            jac.fixed_view_mut::<3, 3>(0, 9 * j + 3 * b)
                .copy_from(&block);
        }
        let block = rc * instance.c[j];
        jac.fixed_view_mut::<3, 3>(0, 9 * m + 3 * j)
            .copy_from(&block);
    }
    let s = skew(&instance.deformed());
    jac.fixed_view_mut::<3, 3>(0, 12 * m).copy_from(&(-rc * s));
    jac.fixed_view_mut::<3, 3>(0, 12 * m + 3)
        .copy_from(&Matrix3::identity());
    jac
}

/// Outcome of the Hessian block-row dependency check.
#[derive(Debug, Clone)]
pub struct HessianLawReport {
    /// Max abs error of the node-translation rows `H2(j) = c_j (Rc^T H4)`.
    pub h2_max_err: f64,
    /// Max abs error of the affine rows `P H1(j,b) = (m_j)_b (-(S^T)+ H3)`,
    /// with `P` the projector onto the row space of `S^T`.
    pub h1_max_err: f64,
    /// Nullity of `J^T J`; at least `state_dim - 3` for a single point.
    pub nullity: usize,
    pub state_dim: usize,
    pub passed: bool,
}

/// Verifies the block-row dependency of the single-point Hessian.
///
/// With `H = J^T J` every block row is a scalar multiple of `X = Rc^T H4`
/// (`H4` the `Tc` rows): the translation rows are `c_j X` exactly, and the
/// affine rows are `(m_j)_b X`, recoverable from the rotation rows
/// `H3 = -S^T X` only up to the kernel of `S^T` — hence the projector and
/// pseudo-inverse. Also confirms the implied rank deficiency.
pub fn check_hessian_law(instance: &EdPointInstance, tol: f64) -> HessianLawReport {
    let m = instance.node_count();
    let jac = assemble_ed_jacobian(instance);
    let h = fim(&jac);
    let dim = instance.state_dim();
    let rc = instance.rc.matrix();

    let h3 = h.rows(12 * m, 3).into_owned();
    let h4 = h.rows(12 * m + 3, 3).into_owned();
    let x = rc.transpose() * &h4;

    let mut h2_max_err: f64 = 0.0;
    for j in 0..m {
        let recipe = &x * instance.c[j];
        let diff = h.rows(9 * m + 3 * j, 3) - recipe;
        h2_max_err = h2_max_err.max(diff.abs().max());
    }

    let s = skew(&instance.deformed());
    let st = s.transpose();
    let st_pinv = st
        .pseudo_inverse(1e-12)
        .expect("pseudo-inverse of a 3x3 matrix");
    let projector = st_pinv * st;
    let reconstructed = -(st_pinv * &h3);
    let mut h1_max_err: f64 = 0.0;
    for j in 0..m {
        for b in 0..3 {
            let lhs = projector * h.rows(9 * j + 3 * b, 3).into_owned();
            let rhs = &reconstructed * instance.m[j][b];
            h1_max_err = h1_max_err.max((lhs - rhs).abs().max());
        }
    }

    let report = rank_analysis(&h, DEFAULT_RANK_TOL);
    let nullity = report.nullity;
    HessianLawReport {
        h2_max_err,
        h1_max_err,
        nullity,
        state_dim: dim,
        passed: h2_max_err <= tol && h1_max_err <= tol && nullity >= dim - 3,
    }
}

/// Full ED energy (rotation + regularization + data) over a graph, a global
/// pose and a point set, as a stacked residual for observability analysis.
///
/// State ordering: `[A_j entries (9m, column-major per node), t_j (3m),
/// omega (3), Tc (3)]`.
#[derive(Debug, Clone)]
pub struct EdEnergyInstance {
    pub graph: EdGraph,
    pub pose: GlobalPose,
    pub points: Vec<Vector3<f64>>,
    pub targets: Vec<Vector3<f64>>,
    pub weights: EdEnergyWeights,
}

impl EdEnergyInstance {
    pub fn state_dim(&self) -> usize {
        12 * self.graph.node_count() + 6
    }

    fn perturbed(&self, delta: &DVector<f64>) -> (EdGraph, GlobalPose) {
        let m = self.graph.node_count();
        assert_eq!(delta.len(), self.state_dim());
        let params = self
            .graph
            .nodes()
            .iter()
            .enumerate()
            .map(|(j, node)| {
                let mut a = node.a;
                for b in 0..3 {
                    for r in 0..3 {
                        a[(r, b)] += delta[9 * j + 3 * b + r];
                    }
                }
                let t = node.t
                    + Vector3::new(
                        delta[9 * m + 3 * j],
                        delta[9 * m + 3 * j + 1],
                        delta[9 * m + 3 * j + 2],
                    );
                (a, t)
            })
            .collect();
        let graph = self.graph.with_parameters(params).expect("same node count");
        let omega = Vector3::new(delta[12 * m], delta[12 * m + 1], delta[12 * m + 2]);
        let pose = GlobalPose {
            rc: self.pose.rc.retract(&omega),
            tc: self.pose.tc
                + Vector3::new(delta[12 * m + 3], delta[12 * m + 4], delta[12 * m + 5]),
        };
        (graph, pose)
    }

    /// Stacked residual vector: sqrt-weighted rotation, regularization and
    /// data terms, so that its squared norm is the total energy.
    pub fn residual_vector(&self, delta: &DVector<f64>) -> Result<DVector<f64>> {
        let (graph, pose) = self.perturbed(delta);
        let m = graph.node_count();
        let n_edges: usize = graph.neighbors().iter().map(|a| a.len()).sum();
        let n = self.points.len();
        let mut out = DVector::zeros(6 * m + 3 * n_edges + 3 * n);
        let mut row = 0;
        let w_rot = self.weights.w_rot.sqrt();
        for node in graph.nodes() {
            for r in rot_residuals(&node.a) {
                out[row] = w_rot * r;
                row += 1;
            }
        }
        let w_reg = self.weights.w_reg.sqrt();
        for (j, adj) in graph.neighbors().iter().enumerate() {
            for (idx, &k) in adj.iter().enumerate() {
                let r = reg_residual(&graph, j, k, graph.alpha()[j][idx]) * w_reg;
                out.fixed_rows_mut::<3>(row).copy_from(&r);
                row += 3;
            }
        }
        let (data, _) = ed_graph::e_data(&self.points, &graph, &pose, &self.targets)?;
        let w_data = self.weights.w_data.sqrt();
        for i in 0..n {
            let r = data.fixed_view::<3, 1>(0, i) * w_data;
            out.fixed_rows_mut::<3>(row).copy_from(&r);
            row += 3;
        }
        Ok(out)
    }

    /// Numeric Jacobian of the stacked residual (central differences).
    pub fn jacobian(&self) -> Result<DMatrix<f64>> {
        numeric_jacobian(self.state_dim(), DEFAULT_FD_STEP, |d| {
            self.residual_vector(d)
        })
    }

    /// Tangent directions of the two gauge maps, obtained by central
    /// differencing the maps themselves (3 rotation + 3 translation).
    pub fn gauge_tangent_directions(&self) -> Vec<DVector<f64>> {
        let eps = 1e-6;
        let mut directions = Vec::with_capacity(6);
        for axis in 0..3 {
            let mut w = Vector3::zeros();
            w[axis] = eps;
            let plus = ed_graph::gauge_rotate(&self.pose, &self.graph, &Rotation::exp(&w));
            let minus = ed_graph::gauge_rotate(&self.pose, &self.graph, &Rotation::exp(&(-w)));
            directions.push(self.state_difference(&plus, &minus) / (2.0 * eps));
        }
        for axis in 0..3 {
            let mut dt = Vector3::zeros();
            dt[axis] = eps;
            let plus = ed_graph::gauge_translate(&self.pose, &self.graph, &dt);
            let minus = ed_graph::gauge_translate(&self.pose, &self.graph, &(-dt));
            directions.push(self.state_difference(&plus, &minus) / (2.0 * eps));
        }
        directions
    }

    /// Difference of two transformed states in local coordinates.
    fn state_difference(
        &self,
        a: &(GlobalPose, EdGraph),
        b: &(GlobalPose, EdGraph),
    ) -> DVector<f64> {
        let m = self.graph.node_count();
        let mut out = DVector::zeros(self.state_dim());
        for j in 0..m {
            let da = a.1.nodes()[j].a - b.1.nodes()[j].a;
            for bcol in 0..3 {
                for r in 0..3 {
                    out[9 * j + 3 * bcol + r] = da[(r, bcol)];
                }
            }
            let dt = a.1.nodes()[j].t - b.1.nodes()[j].t;
            out.fixed_rows_mut::<3>(9 * m + 3 * j).copy_from(&dt);
        }
        // Rotation difference mapped into the right tangent at the base Rc.
        let base = self.pose.rc.matrix();
        let wa = log_so3(&(base.transpose() * a.0.rc.matrix())).expect("small angle");
        let wb = log_so3(&(base.transpose() * b.0.rc.matrix())).expect("small angle");
        out.fixed_rows_mut::<3>(12 * m).copy_from(&(wa - wb));
        out.fixed_rows_mut::<3>(12 * m + 3)
            .copy_from(&(a.0.tc - b.0.tc));
        out
    }
}

/// Result of probing the Jacobian with the six gauge tangent directions.
#[derive(Debug, Clone)]
pub struct GaugeNullReport {
    /// `||J v|| / (||J|| ||v||)` for the 3 rotation then 3 translation
    /// directions.
    pub ratios: [f64; 6],
    pub jacobian_norm: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Confirms that the six gauge tangent directions lie in the kernel of the
/// full-energy Jacobian at a zero-residual state.
///
/// Errors when the state is not at (numerically) zero residual; the rotation
/// directions are only null there, while the translation directions are null
/// at any state.
pub fn verify_gauge_null_directions(instance: &EdEnergyInstance) -> Result<GaugeNullReport> {
    let r0 = instance.residual_vector(&DVector::zeros(instance.state_dim()))?;
    if r0.norm() > 1e-8 {
        return Err(CoreError::InvalidConfig(format!(
            "gauge null check requires a zero-residual state (||r|| = {:.3e})",
            r0.norm()
        )));
    }
    let jac = instance.jacobian()?;
    let jac_norm = jac.norm();
    let tolerance = 1e-8;
    let mut ratios = [0.0; 6];
    for (i, v) in instance.gauge_tangent_directions().iter().enumerate() {
        ratios[i] = (&jac * v).norm() / (jac_norm * v.norm());
    }
    let passed = ratios.iter().all(|&r| r <= tolerance);
    Ok(GaugeNullReport {
        ratios,
        jacobian_norm: jac_norm,
        tolerance,
        passed,
    })
}

/// Three-step, one-feature toy problem with a window-2 motion prior.
///
/// State ordering: `[omega1 p1 omega2 p2 omega3 p3 (18), f1 f2 f3 (9),
/// delta1 delta2 (2)]`, 29 dimensions.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub rotations: [Rotation; 3],
    pub positions: [Vector3<f64>; 3],
    pub features: [Vector3<f64>; 3],
    pub observations: [Vector3<f64>; 3],
    pub delta: [f64; 2],
}

pub const TOY_STATE_DIM: usize = 29;
pub const TOY_RESIDUAL_DIM: usize = 30;

impl ToyInstance {
    /// State after a local perturbation (rotations retracted on the right).
    fn perturbed(&self, delta: &DVector<f64>) -> ToyInstance {
        assert_eq!(delta.len(), TOY_STATE_DIM);
        let mut out = self.clone();
        for j in 0..3 {
            let w = Vector3::new(delta[6 * j], delta[6 * j + 1], delta[6 * j + 2]);
            out.rotations[j] = self.rotations[j].retract(&w);
            out.positions[j] += Vector3::new(delta[6 * j + 3], delta[6 * j + 4], delta[6 * j + 5]);
            out.features[j] += Vector3::new(
                delta[18 + 3 * j],
                delta[18 + 3 * j + 1],
                delta[18 + 3 * j + 2],
            );
        }
        out.delta[0] += delta[27];
        out.delta[1] += delta[28];
        out
    }
}

/// Stacked toy residual: three observation rows, the window-2 prior
/// `f3 - delta1 f1 - delta2 f2`, and identity/origin anchors on all three
/// poses (30 rows).
///
/// Anchoring every pose (rather than only the first window) makes the
/// moving-feature information matrix genuinely full rank; with a 24-row
/// stack the 29-dimensional state could never be fully constrained.
pub fn toy_objective(instance: &ToyInstance) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(TOY_RESIDUAL_DIM);
    for j in 0..3 {
        let r = instance.rotations[j].matrix() * (instance.features[j] - instance.positions[j])
            - instance.observations[j];
        out.fixed_rows_mut::<3>(3 * j).copy_from(&r);
    }
    let prior = instance.features[2]
        - instance.features[0] * instance.delta[0]
        - instance.features[1] * instance.delta[1];
    out.fixed_rows_mut::<3>(9).copy_from(&prior);
    for j in 0..3 {
        let w = instance.rotations[j].log()?;
        out.fixed_rows_mut::<3>(12 + 3 * j).copy_from(&w);
        out.fixed_rows_mut::<3>(21 + 3 * j)
            .copy_from(&instance.positions[j]);
    }
    Ok(out)
}

/// Residual of the toy objective at a locally perturbed state; the numeric
/// counterpart of [`toy_jacobian`].
pub fn toy_objective_with(instance: &ToyInstance, delta: &DVector<f64>) -> Result<DVector<f64>> {
    toy_objective(&instance.perturbed(delta))
}

/// Analytic 30x29 Jacobian of [`toy_objective`].
pub fn toy_jacobian(instance: &ToyInstance) -> Result<DMatrix<f64>> {
    let mut jac = DMatrix::zeros(TOY_RESIDUAL_DIM, TOY_STATE_DIM);
    for j in 0..3 {
        let r = instance.rotations[j].matrix();
        let u = instance.features[j] - instance.positions[j];
        // Observation rows.
        jac.fixed_view_mut::<3, 3>(3 * j, 6 * j)
            .copy_from(&(-r * skew(&u)));
        jac.fixed_view_mut::<3, 3>(3 * j, 6 * j + 3)
            .copy_from(&(-r));
        jac.fixed_view_mut::<3, 3>(3 * j, 18 + 3 * j).copy_from(r);
        // Anchor rows: rotation residual log(R_j) and position residual p_j.
        let phi = instance.rotations[j].log()?;
        jac.fixed_view_mut::<3, 3>(12 + 3 * j, 6 * j)
            .copy_from(&right_jacobian_inv_so3(&phi));
        jac.fixed_view_mut::<3, 3>(21 + 3 * j, 6 * j + 3)
            .copy_from(&Matrix3::identity());
    }
    // Prior row block.
    jac.fixed_view_mut::<3, 3>(9, 18)
        .copy_from(&(Matrix3::identity() * -instance.delta[0]));
    jac.fixed_view_mut::<3, 3>(9, 21)
        .copy_from(&(Matrix3::identity() * -instance.delta[1]));
    jac.fixed_view_mut::<3, 3>(9, 24)
        .copy_from(&Matrix3::identity());
    jac.fixed_view_mut::<3, 1>(9, 27)
        .copy_from(&(-instance.features[0]));
    jac.fixed_view_mut::<3, 1>(9, 28)
        .copy_from(&(-instance.features[1]));
    Ok(jac)
}

/// Information matrix of the toy objective and its rank report.
pub fn toy_fim(instance: &ToyInstance, rel_tol: f64) -> Result<FimReport> {
    let jac = toy_jacobian(instance)?;
    Ok(rank_analysis(&fim(&jac), rel_tol))
}
