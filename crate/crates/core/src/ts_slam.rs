//! Time-series-prior deformable SLAM back-end and the two baselines used for
//! comparison (rigid least-squares SLAM and ED-node visual odometry).
//!
//! The state is `[R^1, p^1, ..., R^F, p^F, B, c]`: one rotation/position per
//! step, the 3N x F feature-history matrix `B`, and a window-`t` coefficient
//! vector `c` shared by all features. Three energies are minimized jointly:
//! observation residuals `R^j (f_i^j - p^j) - m_i^j`, the linear motion prior
//! `f^e - sum_k delta_k f^{e-k}` over fully observed windows, and soft
//! anchors pinning the first `t` poses.
//!
//! The solver is Levenberg-Marquardt with a per-feature Schur complement:
//! given the poses and `c`, features are mutually independent, and their
//! Hessian blocks have the Kronecker form `D_i (x) I_3` with `D_i` an F x F
//! scalar matrix, so elimination works on per-axis F-dimensional systems.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::ed_graph::{EdEnergyWeights, EdGraph, EdNode, GlobalPose, DEFAULT_K_INFLUENCE};
use crate::error::{CoreError, Result};
use crate::lie::{right_jacobian_inv_so3, skew, Rotation};
use crate::observability::EdEnergyInstance;
use crate::par::maybe_par_map;

/// Feature-history matrix `B` (3N x F) with its per-entry validity mask.
#[derive(Debug, Clone)]
pub struct ShapeMatrix {
    /// Stacked feature positions: rows `3i..3i+3` hold feature `i`, columns
    /// index steps.
    pub b: DMatrix<f64>,
    /// `valid[i][j]` is true iff feature `i` is observed at step `j`.
    pub valid: Vec<Vec<bool>>,
}

impl ShapeMatrix {
    pub fn zeros(n_features: usize, n_steps: usize) -> Self {
        Self {
            b: DMatrix::zeros(3 * n_features, n_steps),
            valid: vec![vec![false; n_steps]; n_features],
        }
    }

    pub fn n_features(&self) -> usize {
        self.valid.len()
    }

    pub fn n_steps(&self) -> usize {
        self.b.ncols()
    }

    pub fn feature(&self, i: usize, j: usize) -> Vector3<f64> {
        self.b.fixed_view::<3, 1>(3 * i, j).into_owned()
    }

    pub fn set_feature(&mut self, i: usize, j: usize, f: &Vector3<f64>) {
        self.b.fixed_view_mut::<3, 1>(3 * i, j).copy_from(f);
    }

    /// True iff the prior window ending at step `e` (steps `e-t ..= e`) is
    /// fully observed for feature `i`.
    pub fn window_valid(&self, i: usize, e: usize, t: usize) -> bool {
        e >= t && (e - t..=e).all(|s| self.valid[i][s])
    }
}

/// Full time-series SLAM state.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub rotations: Vec<Rotation>,
    pub positions: Vec<Vector3<f64>>,
    pub shapes: ShapeMatrix,
    /// Coefficients `[delta_1 ... delta_t]`; `delta_1` multiplies the most
    /// recent shape.
    pub coeffs: DVector<f64>,
}

impl TrajectoryState {
    pub fn n_steps(&self) -> usize {
        self.rotations.len()
    }

    pub fn n_features(&self) -> usize {
        self.shapes.n_features()
    }

    pub fn window(&self) -> usize {
        self.coeffs.len()
    }

    /// State dimension in local coordinates: 6 per pose, 3NF features, t
    /// coefficients.
    pub fn dim(&self) -> usize {
        6 * self.n_steps() + 3 * self.n_features() * self.n_steps() + self.window()
    }

    /// Applies a local step `[d_omega/d_p per pose, d_B, d_c]`.
    pub fn retract(&self, delta: &DVector<f64>) -> TrajectoryState {
        assert_eq!(delta.len(), self.dim());
        let f = self.n_steps();
        let n = self.n_features();
        let mut out = self.clone();
        for j in 0..f {
            let w = Vector3::new(delta[6 * j], delta[6 * j + 1], delta[6 * j + 2]);
            out.rotations[j] = self.rotations[j].retract(&w);
            out.positions[j] += Vector3::new(delta[6 * j + 3], delta[6 * j + 4], delta[6 * j + 5]);
        }
        let base = 6 * f;
        for i in 0..n {
            for j in 0..f {
                let d = Vector3::new(
                    delta[base + 3 * (i * f + j)],
                    delta[base + 3 * (i * f + j) + 1],
                    delta[base + 3 * (i * f + j) + 2],
                );
                let updated = self.shapes.feature(i, j) + d;
                out.shapes.set_feature(i, j, &updated);
            }
        }
        let cbase = base + 3 * n * f;
        for k in 0..self.window() {
            out.coeffs[k] += delta[cbase + k];
        }
        out
    }
}

/// Per-feature observations; `None` where the feature was not visible.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    /// `z[i][j]`: observation of feature `i` at step `j`.
    pub z: Vec<Vec<Option<Vector3<f64>>>>,
}

impl ObservationSet {
    pub fn n_features(&self) -> usize {
        self.z.len()
    }

    pub fn n_steps(&self) -> usize {
        self.z.first().map_or(0, |row| row.len())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Vector3<f64>> {
        self.z[i][j].as_ref()
    }

    /// Features observed at both steps of a consecutive pair.
    pub fn covisible(&self, a: usize, b: usize) -> Vec<usize> {
        (0..self.n_features())
            .filter(|&i| self.z[i][a].is_some() && self.z[i][b].is_some())
            .collect()
    }
}

/// Levenberg-Marquardt settings and energy weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    pub gradient_tol: f64,
    pub step_tol: f64,
    /// Prior window length `t`.
    pub window: usize,
    /// Poses soft-anchored to the identity/origin at the start of the run.
    pub anchor_steps: usize,
    /// Ridge on the coefficient vector keeping the normal equations
    /// invertible when `c` is unobservable.
    pub eps_c: f64,
    pub w_obs: f64,
    pub w_f: f64,
    /// Soft anchor weight on the first `window` poses.
    pub w_ini: f64,
    /// Hold `c` at its current value during optimization.
    pub fix_c: bool,
    /// Evaluate per-feature blocks on parallel workers (reduction order is
    /// fixed, so results do not depend on this flag).
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 60,
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            lambda_max: 1e12,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            window: 3,
            anchor_steps: 3,
            eps_c: 1e-8,
            w_obs: 1.0,
            w_f: 100.0,
            w_ini: 1e6,
            fix_c: false,
            parallel: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(CoreError::InvalidConfig("window must be >= 1".into()));
        }
        if self.anchor_steps == 0 {
            return Err(CoreError::InvalidConfig("anchor_steps must be >= 1".into()));
        }
        if self.gradient_tol <= 0.0 || self.step_tol <= 0.0 || self.lambda0 <= 0.0 {
            return Err(CoreError::InvalidConfig(
                "tolerances and damping must be positive".into(),
            ));
        }
        if self.w_obs < 0.0 || self.w_f < 0.0 || self.w_ini < 0.0 || self.eps_c < 0.0 {
            return Err(CoreError::InvalidConfig(
                "energy weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Gradient,
    Step,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Accepted-step energies (monotone non-increasing).
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

/// Estimated observation `R (f - p)`.
pub fn observe_model(r: &Rotation, p: &Vector3<f64>, f: &Vector3<f64>) -> Vector3<f64> {
    r.matrix() * (f - p)
}

/// Linear motion prior: predicts the next shape from `t` historical shapes.
///
/// `history` is chronological (oldest first); `delta_1 = c[0]` multiplies the
/// most recent entry.
pub fn predict_feature(history: &[Vector3<f64>], c: &DVector<f64>) -> Result<Vector3<f64>> {
    let t = c.len();
    if history.len() != t {
        return Err(CoreError::DimensionMismatch(format!(
            "history length {} != window {t}",
            history.len()
        )));
    }
    let mut out = Vector3::zeros();
    for k in 1..=t {
        out += history[t - k] * c[k - 1];
    }
    Ok(out)
}

/// Observation energy over all valid (feature, step) pairs; unweighted.
pub fn e_obs(state: &TrajectoryState, obs: &ObservationSet) -> (f64, Vec<Vector3<f64>>) {
    let mut residuals = Vec::new();
    let mut total = 0.0;
    for j in 0..state.n_steps() {
        for i in 0..state.n_features() {
            if let Some(z) = obs.get(i, j) {
                let r = observe_model(
                    &state.rotations[j],
                    &state.positions[j],
                    &state.shapes.feature(i, j),
                ) - z;
                total += r.norm_squared();
                residuals.push(r);
            }
        }
    }
    (total, residuals)
}

/// Motion-prior energy over all fully observed windows; unweighted.
pub fn e_f(state: &TrajectoryState) -> (f64, Vec<Vector3<f64>>) {
    let t = state.window();
    let mut residuals = Vec::new();
    let mut total = 0.0;
    for i in 0..state.n_features() {
        for e in t..state.n_steps() {
            if !state.shapes.window_valid(i, e, t) {
                continue;
            }
            let mut r = state.shapes.feature(i, e);
            for k in 1..=t {
                r -= state.shapes.feature(i, e - k) * state.coeffs[k - 1];
            }
            total += r.norm_squared();
            residuals.push(r);
        }
    }
    (total, residuals)
}

/// Anchor energy on the first `t` poses (identity/origin anchor); unweighted.
pub fn e_ini(state: &TrajectoryState, window: usize) -> Result<(f64, Vec<Vector3<f64>>)> {
    let t = window.min(state.n_steps());
    let mut residuals = Vec::new();
    let mut total = 0.0;
    for j in 0..t {
        let w = state.rotations[j].log()?;
        total += w.norm_squared() + state.positions[j].norm_squared();
        residuals.push(w);
        residuals.push(state.positions[j]);
    }
    Ok((total, residuals))
}

/// Weighted total energy minimized by [`solve`].
pub fn total_energy(
    state: &TrajectoryState,
    obs: &ObservationSet,
    config: &SolverConfig,
) -> Result<f64> {
    let (obs_e, _) = e_obs(state, obs);
    let (f_e, _) = e_f(state);
    let (ini_e, _) = e_ini(state, config.anchor_steps)?;
    Ok(config.w_obs * obs_e
        + config.w_f * f_e
        + config.w_ini * ini_e
        + config.eps_c * state.coeffs.norm_squared())
}

/// Stacked sqrt-weighted residual of `E_obs + E_f + E_ini` (no coefficient
/// ridge), in the documented row order; used for observability analysis and
/// as the numeric-Jacobian reference.
pub fn residual_stack(
    state: &TrajectoryState,
    obs: &ObservationSet,
    config: &SolverConfig,
) -> Result<DVector<f64>> {
    let t = state.window();
    let mut rows: Vec<f64> = Vec::new();
    let sw_obs = config.w_obs.sqrt();
    for j in 0..state.n_steps() {
        for i in 0..state.n_features() {
            if let Some(z) = obs.get(i, j) {
                let r = (observe_model(
                    &state.rotations[j],
                    &state.positions[j],
                    &state.shapes.feature(i, j),
                ) - z)
                    * sw_obs;
                rows.extend_from_slice(r.as_slice());
            }
        }
    }
    let sw_f = config.w_f.sqrt();
    for i in 0..state.n_features() {
        for e in t..state.n_steps() {
            if !state.shapes.window_valid(i, e, t) {
                continue;
            }
            let mut r = state.shapes.feature(i, e);
            for k in 1..=t {
                r -= state.shapes.feature(i, e - k) * state.coeffs[k - 1];
            }
            rows.extend_from_slice((r * sw_f).as_slice());
        }
    }
    let sw_ini = config.w_ini.sqrt();
    for j in 0..config.anchor_steps.min(state.n_steps()) {
        let w = state.rotations[j].log()? * sw_ini;
        rows.extend_from_slice(w.as_slice());
        let p = state.positions[j] * sw_ini;
        rows.extend_from_slice(p.as_slice());
    }
    Ok(DVector::from_vec(rows))
}

/// Analytic Jacobian of [`residual_stack`] in the state layout of
/// [`TrajectoryState::retract`]; dense, intended for analysis and tests.
pub fn dense_jacobian(
    state: &TrajectoryState,
    obs: &ObservationSet,
    config: &SolverConfig,
) -> Result<DMatrix<f64>> {
    let f = state.n_steps();
    let n = state.n_features();
    let t = state.window();
    let fbase = 6 * f;
    let cbase = fbase + 3 * n * f;
    let r0 = residual_stack(state, obs, config)?;
    let mut jac = DMatrix::zeros(r0.len(), state.dim());
    let mut row = 0;
    let sw_obs = config.w_obs.sqrt();
    for j in 0..f {
        let rm = state.rotations[j].matrix();
        for i in 0..n {
            if obs.get(i, j).is_some() {
                let u = state.shapes.feature(i, j) - state.positions[j];
                jac.fixed_view_mut::<3, 3>(row, 6 * j)
                    .copy_from(&(-(rm * skew(&u)) * sw_obs));
                jac.fixed_view_mut::<3, 3>(row, 6 * j + 3)
                    .copy_from(&(-rm * sw_obs));
                jac.fixed_view_mut::<3, 3>(row, fbase + 3 * (i * f + j))
                    .copy_from(&(rm * sw_obs));
                row += 3;
            }
        }
    }
    let sw_f = config.w_f.sqrt();
    for i in 0..n {
        for e in t..f {
            if !state.shapes.window_valid(i, e, t) {
                continue;
            }
            jac.fixed_view_mut::<3, 3>(row, fbase + 3 * (i * f + e))
                .copy_from(&(Matrix3::identity() * sw_f));
            for k in 1..=t {
                jac.fixed_view_mut::<3, 3>(row, fbase + 3 * (i * f + e - k))
                    .copy_from(&(Matrix3::identity() * (-state.coeffs[k - 1] * sw_f)));
                jac.fixed_view_mut::<3, 1>(row, cbase + k - 1)
                    .copy_from(&(-state.shapes.feature(i, e - k) * sw_f));
            }
            row += 3;
        }
    }
    let sw_ini = config.w_ini.sqrt();
    for j in 0..config.anchor_steps.min(f) {
        let phi = state.rotations[j].log()?;
        jac.fixed_view_mut::<3, 3>(row, 6 * j)
            .copy_from(&(right_jacobian_inv_so3(&phi) * sw_ini));
        row += 3;
        jac.fixed_view_mut::<3, 3>(row, 6 * j + 3)
            .copy_from(&(Matrix3::identity() * sw_ini));
        row += 3;
    }
    Ok(jac)
}

/// Per-feature normal-equation blocks for the Schur elimination.
struct FeatureBlocks {
    /// Steps at which the feature is observed (sorted).
    pose_steps: Vec<usize>,
    /// F x F scalar matrix; the feature Hessian is `d (x) I_3`.
    d: DMatrix<f64>,
    /// Gradient over the feature's 3F coordinates.
    g: DVector<f64>,
    /// Compact coupling block, rows = 6 * |pose_steps| + t, cols = 3F.
    w: DMatrix<f64>,
}

struct Assembly {
    h_pc: DMatrix<f64>,
    g_pc: DVector<f64>,
    features: Vec<FeatureBlocks>,
}

/// Assembles the Gauss-Newton system of the deformable model at `state`.
fn assemble(state: &TrajectoryState, obs: &ObservationSet, config: &SolverConfig) -> Assembly {
    let f = state.n_steps();
    let n = state.n_features();
    let t = state.window();
    let n_pc = 6 * f + t;
    let mut h_pc = DMatrix::zeros(n_pc, n_pc);
    let mut g_pc = DVector::zeros(n_pc);

    // Pose anchors.
    let sw_ini = config.w_ini.sqrt();
    for j in 0..config.anchor_steps.min(f) {
        let phi = state.rotations[j]
            .log()
            .expect("anchored pose near identity");
        let jr = right_jacobian_inv_so3(&phi) * sw_ini;
        let block = jr.transpose() * jr;
        let mut hv = h_pc.fixed_view_mut::<3, 3>(6 * j, 6 * j);
        hv += block;
        let g_rot = jr.transpose() * (phi * sw_ini);
        let mut gv = g_pc.fixed_rows_mut::<3>(6 * j);
        gv += g_rot;
        for d in 0..3 {
            h_pc[(6 * j + 3 + d, 6 * j + 3 + d)] += config.w_ini;
        }
        let g_pos = state.positions[j] * config.w_ini;
        let mut gp = g_pc.fixed_rows_mut::<3>(6 * j + 3);
        gp += g_pos;
    }
    // Coefficient ridge.
    for k in 0..t {
        h_pc[(6 * f + k, 6 * f + k)] += config.eps_c;
        g_pc[6 * f + k] += config.eps_c * state.coeffs[k];
    }

    // Per-feature blocks (independent given poses and c).
    let features = maybe_par_map(config.parallel, n, |i| {
        assemble_feature(state, obs, config, i)
    });

    // Pose and coefficient contributions from each feature's rows, reduced
    // sequentially in feature order for bit-reproducibility.
    let sw_obs = config.w_obs.sqrt();
    for i in 0..n {
        for &j in &features[i].pose_steps {
            let z = obs.get(i, j).expect("pose_steps lists observed steps");
            let rm = state.rotations[j].matrix();
            let u = state.shapes.feature(i, j) - state.positions[j];
            let mut jpose = Matrix3x6::zeros();
            jpose
                .fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&(-(rm * skew(&u)) * sw_obs));
            jpose
                .fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&(-rm * sw_obs));
            let r = (rm * u - z) * sw_obs;
            let block: Matrix6<f64> = jpose.transpose() * jpose;
            let mut hv = h_pc.fixed_view_mut::<6, 6>(6 * j, 6 * j);
            hv += block;
            let g: Vector6<f64> = jpose.transpose() * r;
            let mut gv = g_pc.fixed_rows_mut::<6>(6 * j);
            gv += g;
        }
        // Prior rows couple c with itself.
        for e in t..f {
            if !state.shapes.window_valid(i, e, t) {
                continue;
            }
            let mut r = state.shapes.feature(i, e);
            for k in 1..=t {
                r -= state.shapes.feature(i, e - k) * state.coeffs[k - 1];
            }
            for k in 1..=t {
                let fk = state.shapes.feature(i, e - k);
                g_pc[6 * f + k - 1] += -config.w_f * fk.dot(&r);
                for l in 1..=t {
                    let fl = state.shapes.feature(i, e - l);
                    h_pc[(6 * f + k - 1, 6 * f + l - 1)] += config.w_f * fk.dot(&fl);
                }
            }
        }
    }

    Assembly {
        h_pc,
        g_pc,
        features,
    }
}

fn assemble_feature(
    state: &TrajectoryState,
    obs: &ObservationSet,
    config: &SolverConfig,
    i: usize,
) -> FeatureBlocks {
    let f = state.n_steps();
    let t = state.window();
    let pose_steps: Vec<usize> = (0..f).filter(|&j| obs.get(i, j).is_some()).collect();
    let mut step_row = vec![usize::MAX; f];
    for (k, &j) in pose_steps.iter().enumerate() {
        step_row[j] = 6 * k;
    }
    let n_rows = 6 * pose_steps.len() + t;
    let c_row = 6 * pose_steps.len();
    let mut d = DMatrix::zeros(f, f);
    let mut g = DVector::zeros(3 * f);
    let mut w = DMatrix::zeros(n_rows, 3 * f);

    let sw_obs = config.w_obs.sqrt();
    for &j in &pose_steps {
        let z = obs.get(i, j).unwrap();
        let rm = state.rotations[j].matrix();
        let u = state.shapes.feature(i, j) - state.positions[j];
        let r = (rm * u - z) * sw_obs;
        let jf = rm * sw_obs;
        d[(j, j)] += config.w_obs;
        let gf = jf.transpose() * r;
        let mut gv = g.fixed_rows_mut::<3>(3 * j);
        gv += gf;
        // Pose-feature coupling.
        let mut jpose = Matrix3x6::zeros();
        jpose
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-(rm * skew(&u)) * sw_obs));
        jpose
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-rm * sw_obs));
        let cross = jpose.transpose() * jf;
        w.view_mut((step_row[j], 3 * j), (6, 3)).copy_from(&cross);
    }

    let sw_f = config.w_f.sqrt();
    for e in t..f {
        if !state.shapes.window_valid(i, e, t) {
            continue;
        }
        let mut r = state.shapes.feature(i, e);
        // Scalar row coefficients on the involved steps: +1 at e, -delta_k at
        // e-k.
        let mut a = vec![(e, 1.0)];
        for k in 1..=t {
            r -= state.shapes.feature(i, e - k) * state.coeffs[k - 1];
            a.push((e - k, -state.coeffs[k - 1]));
        }
        let rw = r * sw_f;
        for &(s, as_) in &a {
            for &(s2, as2) in &a {
                d[(s, s2)] += config.w_f * as_ * as2;
            }
            let gs = rw * (as_ * sw_f);
            let mut gv = g.fixed_rows_mut::<3>(3 * s);
            gv += gs;
        }
        for k in 1..=t {
            let fk = state.shapes.feature(i, e - k);
            for &(s, as_) in &a {
                for axis in 0..3 {
                    w[(c_row + k - 1, 3 * s + axis)] += -config.w_f * as_ * fk[axis];
                }
            }
        }
    }

    FeatureBlocks {
        pose_steps,
        d,
        g,
        w,
    }
}

/// One damped Schur-complement solve; returns the full state step, or `None`
/// when a factorization fails at this damping level.
fn schur_step(
    state: &TrajectoryState,
    assembly: &Assembly,
    config: &SolverConfig,
    lambda: f64,
) -> Option<DVector<f64>> {
    let f = state.n_steps();
    let n = state.n_features();
    let t = state.window();
    let n_pc = 6 * f + t;

    // Damp the feature systems and eliminate them.
    let mut chols = Vec::with_capacity(n);
    let mut h_red = assembly.h_pc.clone();
    let mut rhs = -assembly.g_pc.clone();
    for blocks in &assembly.features {
        let mut d = blocks.d.clone();
        let ridge = 1e-9 * (1.0 + d.diagonal().max());
        for s in 0..f {
            d[(s, s)] = d[(s, s)] * (1.0 + lambda) + ridge;
        }
        let chol = nalgebra::Cholesky::new(d)?;
        // Per-axis gradient solve: y = (D (x) I)^-1 g.
        let mut y = DVector::zeros(3 * f);
        for axis in 0..3 {
            let ga = DVector::from_fn(f, |s, _| blocks.g[3 * s + axis]);
            let ya = chol.solve(&ga);
            for s in 0..f {
                y[3 * s + axis] = ya[s];
            }
        }
        // rhs += W (D x I)^-1 g, scattered to global rows.
        let wy = &blocks.w * &y;
        scatter_add_vec(&mut rhs, &wy, blocks, f, t);
        // S = W (D x I)^-1 W^T via per-axis solves.
        let n_rows = blocks.w.nrows();
        let mut x = DMatrix::zeros(3 * f, n_rows);
        for axis in 0..3 {
            let mut wa = DMatrix::zeros(f, n_rows);
            for s in 0..f {
                wa.set_row(s, &blocks.w.column(3 * s + axis).transpose());
            }
            let xa = chol.solve(&wa);
            for s in 0..f {
                x.set_row(3 * s + axis, &xa.row(s));
            }
        }
        let s_c = &blocks.w * x;
        scatter_sub_mat(&mut h_red, &s_c, blocks, f, t);
        chols.push(chol);
    }

    // Damp the reduced system.
    for k in 0..n_pc {
        h_red[(k, k)] += lambda * assembly.h_pc[(k, k)] + 1e-12;
    }
    if config.fix_c {
        for k in 6 * f..n_pc {
            for l in 0..n_pc {
                h_red[(k, l)] = 0.0;
                h_red[(l, k)] = 0.0;
            }
            h_red[(k, k)] = 1.0;
            rhs[k] = 0.0;
        }
    }
    let chol_red = nalgebra::Cholesky::new(h_red)?;
    let dx_pc = chol_red.solve(&rhs);

    // Back-substitute features.
    let mut dx = DVector::zeros(state.dim());
    dx.rows_mut(0, 6 * f).copy_from(&dx_pc.rows(0, 6 * f));
    dx.rows_mut(6 * f + 3 * n * f, t)
        .copy_from(&dx_pc.rows(6 * f, t));
    for (i, blocks) in assembly.features.iter().enumerate() {
        let dx_compact = gather(&dx_pc, blocks, f, t);
        let rhs_f = &blocks.g + blocks.w.transpose() * dx_compact;
        let chol = &chols[i];
        for axis in 0..3 {
            let ra = DVector::from_fn(f, |s, _| rhs_f[3 * s + axis]);
            let sol = chol.solve(&ra);
            for s in 0..f {
                dx[6 * f + 3 * (i * f + s) + axis] = -sol[s];
            }
        }
    }
    Some(dx)
}

fn scatter_add_vec(
    rhs: &mut DVector<f64>,
    wy: &DVector<f64>,
    blocks: &FeatureBlocks,
    f: usize,
    t: usize,
) {
    for (k, &j) in blocks.pose_steps.iter().enumerate() {
        for d in 0..6 {
            rhs[6 * j + d] += wy[6 * k + d];
        }
    }
    for k in 0..t {
        rhs[6 * f + k] += wy[6 * blocks.pose_steps.len() + k];
    }
}

fn scatter_sub_mat(
    h: &mut DMatrix<f64>,
    s_c: &DMatrix<f64>,
    blocks: &FeatureBlocks,
    f: usize,
    t: usize,
) {
    let rows = global_rows(blocks, f, t);
    for (a, &ga) in rows.iter().enumerate() {
        for (b, &gb) in rows.iter().enumerate() {
            h[(ga, gb)] -= s_c[(a, b)];
        }
    }
}

fn gather(dx_pc: &DVector<f64>, blocks: &FeatureBlocks, f: usize, t: usize) -> DVector<f64> {
    let rows = global_rows(blocks, f, t);
    DVector::from_fn(rows.len(), |k, _| dx_pc[rows[k]])
}

fn global_rows(blocks: &FeatureBlocks, f: usize, t: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(6 * blocks.pose_steps.len() + t);
    for &j in &blocks.pose_steps {
        for d in 0..6 {
            rows.push(6 * j + d);
        }
    }
    for k in 0..t {
        rows.push(6 * f + k);
    }
    rows
}

fn check_solvable(obs: &ObservationSet, config: &SolverConfig) -> Result<()> {
    let f = obs.n_steps();
    let t = config.window;
    if obs.n_features() == 0 || f == 0 {
        return Err(CoreError::UnsolvableInstance(
            "empty observation set".into(),
        ));
    }
    if f < t + 1 {
        return Err(CoreError::UnsolvableInstance(format!(
            "{f} steps cannot support a window of {t}"
        )));
    }
    let any_window =
        (0..obs.n_features()).any(|i| (t..f).any(|e| (e - t..=e).all(|s| obs.get(i, s).is_some())));
    if !any_window {
        return Err(CoreError::UnsolvableInstance(
            "no feature has a fully observed prior window".into(),
        ));
    }
    Ok(())
}

/// Levenberg-Marquardt minimization of the deformable objective starting
/// from `initialize_state`.
pub fn solve(
    obs: &ObservationSet,
    config: &SolverConfig,
) -> Result<(TrajectoryState, SolveReport)> {
    let init = initialize_state(obs, config)?;
    solve_from(init, obs, config)
}

/// As [`solve`], but starting from a caller-provided state.
pub fn solve_from(
    state: TrajectoryState,
    obs: &ObservationSet,
    config: &SolverConfig,
) -> Result<(TrajectoryState, SolveReport)> {
    config.validate()?;
    check_solvable(obs, config)?;
    lm_loop(
        state,
        obs,
        config,
        |st, cfg| Ok(assemble(st, obs, cfg)),
        |st, cfg| total_energy(st, obs, cfg),
    )
}

/// Generic LM driver shared by the deformable and rigid solvers.
fn lm_loop<A, E>(
    mut state: TrajectoryState,
    _obs: &ObservationSet,
    config: &SolverConfig,
    assemble_fn: A,
    energy_fn: E,
) -> Result<(TrajectoryState, SolveReport)>
where
    A: Fn(&TrajectoryState, &SolverConfig) -> Result<Assembly>,
    E: Fn(&TrajectoryState, &SolverConfig) -> Result<f64>,
{
    let mut energy = energy_fn(&state, config)?;
    if !energy.is_finite() {
        return Err(CoreError::NonFiniteResidual);
    }
    let initial_energy = energy;
    let mut trace = vec![energy];
    let mut lambda = config.lambda0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    'outer: for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let assembly = assemble_fn(&state, config)?;
        if assembly.g_pc.amax() <= config.gradient_tol
            && assembly
                .features
                .iter()
                .all(|b| b.g.amax() <= config.gradient_tol)
        {
            termination = Termination::Gradient;
            iterations = iter;
            break;
        }
        loop {
            let Some(dx) = schur_step(&state, &assembly, config, lambda) else {
                lambda *= config.lambda_up;
                if lambda > config.lambda_max {
                    termination = Termination::Diverged;
                    break 'outer;
                }
                continue;
            };
            let candidate = state.retract(&dx);
            let new_energy = energy_fn(&candidate, config)?;
            if new_energy.is_finite() && new_energy <= energy {
                let step_norm = dx.norm();
                state = candidate;
                energy = new_energy;
                trace.push(energy);
                lambda = (lambda * config.lambda_down).max(1e-15);
                if step_norm <= config.step_tol {
                    termination = Termination::Step;
                    break 'outer;
                }
                break;
            }
            lambda *= config.lambda_up;
            if lambda > config.lambda_max {
                termination = Termination::Diverged;
                break 'outer;
            }
        }
    }

    Ok((
        state,
        SolveReport {
            initial_energy,
            final_energy: energy,
            energy_trace: trace,
            iterations,
            termination,
        },
    ))
}

/// Closed-form rigid alignment `dst ~ R src + t` (Kabsch / Procrustes).
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<(Rotation, Vector3<f64>)> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(CoreError::DimensionMismatch(
            "rigid alignment needs >= 3 paired points".into(),
        ));
    }
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * s * u.transpose();
    let rot = Rotation::from_matrix_unchecked(r);
    let t = cd - r * cs;
    Ok((rot, t))
}

/// Chained rigid-alignment initialization.
///
/// Consecutive steps are aligned on their co-visible observations, poses are
/// chained from the identity/origin anchor, features are back-projected into
/// the world frame (gaps filled from the nearest observed step) and `c`
/// starts at the static prior `[1, 0, ..., 0]`.
pub fn initialize_state(obs: &ObservationSet, config: &SolverConfig) -> Result<TrajectoryState> {
    check_solvable(obs, config)?;
    let f = obs.n_steps();
    let n = obs.n_features();
    let mut rotations = vec![Rotation::identity(); f];
    let mut positions = vec![Vector3::zeros(); f];
    for j in 1..f {
        let covis = obs.covisible(j - 1, j);
        if covis.len() < 3 {
            return Err(CoreError::InitializationGap {
                from: j - 1,
                to: j,
                covisible: covis.len(),
            });
        }
        let prev: Vec<_> = covis.iter().map(|&i| *obs.get(i, j - 1).unwrap()).collect();
        let next: Vec<_> = covis.iter().map(|&i| *obs.get(i, j).unwrap()).collect();
        // z_next = Rc z_prev + Tc with Rc = R_j R_{j-1}^T and
        // Tc = R_j (p_{j-1} - p_j).
        let (rc, tc) = kabsch(&prev, &next)?;
        rotations[j] = rc.compose(&rotations[j - 1]);
        positions[j] = positions[j - 1] - rotations[j].matrix().transpose() * tc;
    }

    let mut shapes = ShapeMatrix::zeros(n, f);
    for i in 0..n {
        for j in 0..f {
            if let Some(z) = obs.get(i, j) {
                shapes.valid[i][j] = true;
                let w = positions[j] + rotations[j].matrix().transpose() * z;
                shapes.set_feature(i, j, &w);
            }
        }
        // Fill unobserved steps from the nearest observed one.
        let observed: Vec<usize> = (0..f).filter(|&j| shapes.valid[i][j]).collect();
        if observed.is_empty() {
            continue;
        }
        for j in 0..f {
            if !shapes.valid[i][j] {
                let nearest = *observed
                    .iter()
                    .min_by_key(|&&o| (o as isize - j as isize).unsigned_abs())
                    .unwrap();
                let v = shapes.feature(i, nearest);
                shapes.set_feature(i, j, &v);
            }
        }
    }

    let mut coeffs = DVector::zeros(config.window);
    coeffs[0] = 1.0;
    Ok(TrajectoryState {
        rotations,
        positions,
        shapes,
        coeffs,
    })
}

/// Rigid-SLAM baseline: the same pipeline with every feature constrained to
/// a single static position.
///
/// Internally optimizes `[poses, one 3-vector per feature]` and returns a
/// [`TrajectoryState`] with the static estimate replicated across steps.
pub fn rigid_slam_solve(
    obs: &ObservationSet,
    config: &SolverConfig,
) -> Result<(TrajectoryState, SolveReport)> {
    config.validate()?;
    check_solvable(obs, config)?;
    let init = initialize_state(obs, config)?;
    let f = obs.n_steps();
    let n = obs.n_features();

    // Static init: mean of the back-projections over observed steps.
    let mut statics = vec![Vector3::zeros(); n];
    for i in 0..n {
        let observed: Vec<usize> = (0..f).filter(|&j| init.shapes.valid[i][j]).collect();
        if observed.is_empty() {
            continue;
        }
        statics[i] = observed
            .iter()
            .map(|&j| init.shapes.feature(i, j))
            .sum::<Vector3<f64>>()
            / observed.len() as f64;
    }

    let mut state = RigidState {
        rotations: init.rotations.clone(),
        positions: init.positions.clone(),
        features: statics,
    };
    let mut energy = rigid_energy(&state, obs, config)?;
    let initial_energy = energy;
    let mut trace = vec![energy];
    let mut lambda = config.lambda0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    'outer: for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let (h, g) = rigid_normal_equations(&state, obs, config);
        if g.amax() <= config.gradient_tol {
            termination = Termination::Gradient;
            iterations = iter;
            break;
        }
        loop {
            let mut hd = h.clone();
            for k in 0..hd.nrows() {
                hd[(k, k)] += lambda * h[(k, k)] + 1e-12;
            }
            let step = nalgebra::Cholesky::new(hd).map(|c| c.solve(&(-&g)));
            let Some(dx) = step else {
                lambda *= config.lambda_up;
                if lambda > config.lambda_max {
                    termination = Termination::Diverged;
                    break 'outer;
                }
                continue;
            };
            let candidate = state.retract(&dx);
            let new_energy = rigid_energy(&candidate, obs, config)?;
            if new_energy.is_finite() && new_energy <= energy {
                let step_norm = dx.norm();
                state = candidate;
                energy = new_energy;
                trace.push(energy);
                lambda = (lambda * config.lambda_down).max(1e-15);
                if step_norm <= config.step_tol {
                    termination = Termination::Step;
                    break 'outer;
                }
                break;
            }
            lambda *= config.lambda_up;
            if lambda > config.lambda_max {
                termination = Termination::Diverged;
                break 'outer;
            }
        }
    }

    // Expand into a full trajectory state (static shapes, static prior).
    let mut shapes = ShapeMatrix::zeros(n, f);
    for i in 0..n {
        for j in 0..f {
            shapes.valid[i][j] = obs.get(i, j).is_some();
            shapes.set_feature(i, j, &state.features[i]);
        }
    }
    let mut coeffs = DVector::zeros(config.window);
    coeffs[0] = 1.0;
    Ok((
        TrajectoryState {
            rotations: state.rotations,
            positions: state.positions,
            shapes,
            coeffs,
        },
        SolveReport {
            initial_energy,
            final_energy: energy,
            energy_trace: trace,
            iterations,
            termination,
        },
    ))
}

struct RigidState {
    rotations: Vec<Rotation>,
    positions: Vec<Vector3<f64>>,
    features: Vec<Vector3<f64>>,
}

impl RigidState {
    fn retract(&self, dx: &DVector<f64>) -> RigidState {
        let f = self.rotations.len();
        let mut out = RigidState {
            rotations: self.rotations.clone(),
            positions: self.positions.clone(),
            features: self.features.clone(),
        };
        for j in 0..f {
            let w = Vector3::new(dx[6 * j], dx[6 * j + 1], dx[6 * j + 2]);
            out.rotations[j] = self.rotations[j].retract(&w);
            out.positions[j] += Vector3::new(dx[6 * j + 3], dx[6 * j + 4], dx[6 * j + 5]);
        }
        for i in 0..self.features.len() {
            out.features[i] += Vector3::new(
                dx[6 * f + 3 * i],
                dx[6 * f + 3 * i + 1],
                dx[6 * f + 3 * i + 2],
            );
        }
        out
    }
}

fn rigid_energy(state: &RigidState, obs: &ObservationSet, config: &SolverConfig) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..state.rotations.len() {
        for i in 0..state.features.len() {
            if let Some(z) = obs.get(i, j) {
                let r =
                    observe_model(&state.rotations[j], &state.positions[j], &state.features[i]) - z;
                total += config.w_obs * r.norm_squared();
            }
        }
    }
    let t = config.anchor_steps.min(state.rotations.len());
    for j in 0..t {
        let w = state.rotations[j].log()?;
        total += config.w_ini * (w.norm_squared() + state.positions[j].norm_squared());
    }
    Ok(total)
}

fn rigid_normal_equations(
    state: &RigidState,
    obs: &ObservationSet,
    config: &SolverConfig,
) -> (DMatrix<f64>, DVector<f64>) {
    let f = state.rotations.len();
    let n = state.features.len();
    let dim = 6 * f + 3 * n;
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    let sw = config.w_obs.sqrt();
    for j in 0..f {
        let rm = state.rotations[j].matrix();
        for i in 0..n {
            let Some(z) = obs.get(i, j) else { continue };
            let u = state.features[i] - state.positions[j];
            let r = (rm * u - z) * sw;
            let mut jrow = DMatrix::zeros(3, 9);
            jrow.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&(-(rm * skew(&u)) * sw));
            jrow.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rm * sw));
            jrow.fixed_view_mut::<3, 3>(0, 6).copy_from(&(rm * sw));
            let idx = [
                6 * j,
                6 * j + 1,
                6 * j + 2,
                6 * j + 3,
                6 * j + 4,
                6 * j + 5,
                6 * f + 3 * i,
                6 * f + 3 * i + 1,
                6 * f + 3 * i + 2,
            ];
            let ht = jrow.transpose() * &jrow;
            let gt = jrow.transpose() * r;
            for a in 0..9 {
                g[idx[a]] += gt[a];
                for b in 0..9 {
                    h[(idx[a], idx[b])] += ht[(a, b)];
                }
            }
        }
    }
    let sw_ini = config.w_ini.sqrt();
    let t = config.anchor_steps.min(f);
    for j in 0..t {
        let phi = state.rotations[j]
            .log()
            .expect("anchored pose near identity");
        let jr = right_jacobian_inv_so3(&phi) * sw_ini;
        let block = jr.transpose() * jr;
        for a in 0..3 {
            for b in 0..3 {
                h[(6 * j + a, 6 * j + b)] += block[(a, b)];
            }
            h[(6 * j + 3 + a, 6 * j + 3 + a)] += config.w_ini;
            g[6 * j + 3 + a] += config.w_ini * state.positions[j][a];
        }
        let grot = jr.transpose() * (phi * sw_ini);
        for a in 0..3 {
            g[6 * j + a] += grot[a];
        }
    }
    (h, g)
}

/// Settings of the ED-node visual-odometry baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EdVoConfig {
    pub weights: EdEnergyWeights,
    /// Deformation nodes fitted per frame pair.
    pub n_nodes: usize,
    pub max_iterations: usize,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
}

impl Default for EdVoConfig {
    fn default() -> Self {
        Self {
            weights: EdEnergyWeights::default(),
            n_nodes: 6,
            max_iterations: 12,
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            lambda_max: 1e10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdVoReport {
    /// Frame pairs where the previous increment was reused (too few
    /// co-visible features or a degenerate node set).
    pub skipped_pairs: usize,
    pub pairs: usize,
}

/// ED-node visual odometry: per frame pair, fits an ED deformation plus a
/// global pose between the co-visible observation sets and chains the pose
/// increments into a trajectory.
pub fn ed_vo_solve(
    obs: &ObservationSet,
    config: &EdVoConfig,
) -> Result<(Vec<(Rotation, Vector3<f64>)>, EdVoReport)> {
    let f = obs.n_steps();
    if f == 0 {
        return Err(CoreError::UnsolvableInstance(
            "empty observation set".into(),
        ));
    }
    let mut poses = vec![(Rotation::identity(), Vector3::zeros())];
    let mut last_increment = (Rotation::identity(), Vector3::zeros());
    let mut skipped = 0;
    for j in 1..f {
        let covis = obs.covisible(j - 1, j);
        let increment = if covis.len() < DEFAULT_K_INFLUENCE + 1 {
            skipped += 1;
            last_increment
        } else {
            let prev: Vec<_> = covis.iter().map(|&i| *obs.get(i, j - 1).unwrap()).collect();
            let next: Vec<_> = covis.iter().map(|&i| *obs.get(i, j).unwrap()).collect();
            match fit_ed_pair(&prev, &next, config) {
                Ok(inc) => inc,
                Err(CoreError::DegenerateGraph(_)) => {
                    skipped += 1;
                    last_increment
                }
                Err(e) => return Err(e),
            }
        };
        last_increment = increment;
        let (rc, tc) = increment;
        let (r_prev, p_prev) = poses[j - 1];
        let r_new = rc.compose(&r_prev);
        let p_new = p_prev - r_new.matrix().transpose() * tc;
        poses.push((r_new, p_new));
    }
    Ok((
        poses,
        EdVoReport {
            skipped_pairs: skipped,
            pairs: f - 1,
        },
    ))
}

/// Fits deformation nodes plus a global pose mapping `prev` onto `next`.
fn fit_ed_pair(
    prev: &[Vector3<f64>],
    next: &[Vector3<f64>],
    config: &EdVoConfig,
) -> Result<(Rotation, Vector3<f64>)> {
    let (rc0, tc0) = kabsch(prev, next)?;
    let m = config.n_nodes.min(prev.len()).max(DEFAULT_K_INFLUENCE + 1);
    // Evenly spaced sample of the co-visible points as node positions.
    let nodes: Vec<EdNode> = (0..m)
        .map(|k| EdNode {
            g: prev[k * (prev.len() - 1) / (m - 1).max(1)],
            a: Matrix3::identity(),
            t: Vector3::zeros(),
        })
        .collect();
    let neighbors = (0..m)
        .map(|k| {
            let mut adj = Vec::new();
            if k > 0 {
                adj.push(k - 1);
            }
            if k + 1 < m {
                adj.push(k + 1);
            }
            adj
        })
        .collect();
    let graph = EdGraph::new(nodes, neighbors, DEFAULT_K_INFLUENCE)?;

    let mut instance = EdEnergyInstance {
        graph,
        pose: GlobalPose { rc: rc0, tc: tc0 },
        points: prev.to_vec(),
        targets: next.to_vec(),
        weights: config.weights,
    };
    // Probe once: a degenerate node set errors here, before the LM loop.
    let dim = instance.state_dim();
    let mut residual = instance.residual_vector(&DVector::zeros(dim))?;
    let mut energy = residual.norm_squared();
    let mut lambda = config.lambda0;
    for _ in 0..config.max_iterations {
        let jac = instance.jacobian()?;
        let h = jac.transpose() * &jac;
        let g = jac.transpose() * &residual;
        if g.amax() <= 1e-12 {
            break;
        }
        loop {
            let mut hd = h.clone();
            for k in 0..dim {
                hd[(k, k)] += lambda * h[(k, k)] + 1e-12;
            }
            let Some(chol) = nalgebra::Cholesky::new(hd) else {
                lambda *= config.lambda_up;
                if lambda > config.lambda_max {
                    return Ok((instance.pose.rc, instance.pose.tc));
                }
                continue;
            };
            let dx = chol.solve(&(-&g));
            let candidate = apply_ed_delta(&instance, &dx);
            let cand_residual = candidate.residual_vector(&DVector::zeros(dim))?;
            let cand_energy = cand_residual.norm_squared();
            if cand_energy.is_finite() && cand_energy <= energy {
                instance = candidate;
                residual = cand_residual;
                energy = cand_energy;
                lambda = (lambda * config.lambda_down).max(1e-15);
                break;
            }
            lambda *= config.lambda_up;
            if lambda > config.lambda_max {
                return Ok((instance.pose.rc, instance.pose.tc));
            }
        }
    }
    Ok((instance.pose.rc, instance.pose.tc))
}

/// Rebuilds an [`EdEnergyInstance`] at a perturbed state.
fn apply_ed_delta(instance: &EdEnergyInstance, delta: &DVector<f64>) -> EdEnergyInstance {
    let m = instance.graph.node_count();
    let params = instance
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
    let graph = instance
        .graph
        .with_parameters(params)
        .expect("same node count");
    let omega = Vector3::new(delta[12 * m], delta[12 * m + 1], delta[12 * m + 2]);
    EdEnergyInstance {
        graph,
        pose: GlobalPose {
            rc: instance.pose.rc.retract(&omega),
            tc: instance.pose.tc
                + Vector3::new(delta[12 * m + 3], delta[12 * m + 4], delta[12 * m + 5]),
        },
        points: instance.points.clone(),
        targets: instance.targets.clone(),
        weights: instance.weights,
    }
}

/// JSON form of a solved trajectory (rotations row-major).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionSchema {
    pub schema_version: u32,
    pub poses: Vec<PoseSchema>,
    /// `shapes[i][j]` is feature `i` at step `j`.
    pub shapes: Vec<Vec<[f64; 3]>>,
    pub coefficients: Vec<f64>,
    pub energy_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseSchema {
    pub r: [f64; 9],
    pub p: [f64; 3],
}

impl SolutionSchema {
    pub fn from_state(state: &TrajectoryState, report: &SolveReport) -> Self {
        let poses = state
            .rotations
            .iter()
            .zip(&state.positions)
            .map(|(r, p)| {
                let m = r.matrix();
                PoseSchema {
                    r: [
                        m[(0, 0)],
                        m[(0, 1)],
                        m[(0, 2)],
                        m[(1, 0)],
                        m[(1, 1)],
                        m[(1, 2)],
                        m[(2, 0)],
                        m[(2, 1)],
                        m[(2, 2)],
                    ],
                    p: (*p).into(),
                }
            })
            .collect();
        let shapes = (0..state.n_features())
            .map(|i| {
                (0..state.n_steps())
                    .map(|j| state.shapes.feature(i, j).into())
                    .collect()
            })
            .collect();
        SolutionSchema {
            schema_version: 1,
            poses,
            shapes,
            coefficients: state.coeffs.iter().copied().collect(),
            energy_trace: report.energy_trace.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_rotation, random_vec3};
    use crate::observability::numeric_jacobian;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Noiseless dataset whose features obey an order-3 recurrence
    /// `(z - 1)(z^2 - 2 cos w z + 1)` shared by all features, with the first
    /// three poses held at the identity/origin anchor.
    fn synthetic(
        rng: &mut ChaCha12Rng,
        f: usize,
        n: usize,
        amplitude: f64,
    ) -> (TrajectoryState, ObservationSet, DVector<f64>) {
        let t = 3;
        let omega = 0.7;
        let c2 = 2.0 * f64::cos(omega);
        let c_true = DVector::from_vec(vec![1.0 + c2, -(1.0 + c2), 1.0]);

        let mut rotations = Vec::new();
        let mut positions = Vec::new();
        for j in 0..f {
            if j < t {
                rotations.push(Rotation::identity());
                positions.push(Vector3::zeros());
            } else {
                let s = (j - t + 1) as f64;
                rotations.push(Rotation::exp(&Vector3::new(0.01 * s, -0.005 * s, 0.04 * s)));
                positions.push(Vector3::new(0.05 * s, 0.02 * s, -0.03 * s));
            }
        }

        let mut shapes = ShapeMatrix::zeros(n, f);
        for i in 0..n {
            let base = random_vec3(rng, 1.0) + Vector3::new(2.0, 0.0, 0.0);
            let a = if amplitude > 0.0 {
                random_vec3(rng, amplitude)
            } else {
                Vector3::zeros()
            };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for j in 0..f {
                let p = base + a * f64::sin(omega * j as f64 + phase);
                shapes.set_feature(i, j, &p);
                shapes.valid[i][j] = true;
            }
        }

        let z = (0..n)
            .map(|i| {
                (0..f)
                    .map(|j| {
                        Some(observe_model(
                            &rotations[j],
                            &positions[j],
                            &shapes.feature(i, j),
                        ))
                    })
                    .collect()
            })
            .collect();

        (
            TrajectoryState {
                rotations,
                positions,
                shapes,
                coeffs: c_true.clone(),
            },
            ObservationSet { z },
            c_true,
        )
    }

    use rand::Rng;

    /// Generic inconsistent instance (nonzero residuals) with a few missing
    /// observations, for Jacobian and solver-algebra tests.
    fn random_instance(rng: &mut ChaCha12Rng) -> (TrajectoryState, ObservationSet, SolverConfig) {
        let f = 7;
        let n = 3;
        let t = 2;
        let config = SolverConfig {
            window: t,
            w_obs: 1.3,
            w_f: 0.7,
            w_ini: 10.0,
            eps_c: 1e-8,
            ..SolverConfig::default()
        };
        let rotations: Vec<Rotation> = (0..f).map(|_| random_rotation(rng, 0.8)).collect();
        let positions: Vec<Vector3<f64>> = (0..f).map(|_| random_vec3(rng, 1.0)).collect();
        let mut shapes = ShapeMatrix::zeros(n, f);
        let mut z = vec![vec![None; f]; n];
        for i in 0..n {
            for j in 0..f {
                shapes.set_feature(i, j, &random_vec3(rng, 1.5));
                // Drop a couple of observations to exercise the masks.
                if (i, j) != (0, 2) && (i, j) != (2, 5) {
                    shapes.valid[i][j] = true;
                    z[i][j] = Some(random_vec3(rng, 1.0));
                }
            }
        }
        let coeffs = DVector::from_fn(t, |_, _| rng.gen_range(-1.0..1.0));
        (
            TrajectoryState {
                rotations,
                positions,
                shapes,
                coeffs,
            },
            ObservationSet { z },
            config,
        )
    }

    #[test]
    fn predict_feature_weights_recent_first() {
        let h = [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let c = DVector::from_vec(vec![0.5, -0.25, 2.0]);
        let p = predict_feature(&h, &c).unwrap();
        // delta_1 = 0.5 multiplies the newest entry h[2].
        assert_relative_eq!(p, Vector3::new(2.0, -0.25, 0.5), epsilon = 1e-15);
        assert!(predict_feature(&h[..2], &c).is_err());
    }

    #[test]
    fn energies_vanish_on_consistent_data() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (state, obs, _) = synthetic(&mut rng, 10, 4, 0.05);
        let (eo, _) = e_obs(&state, &obs);
        let (ef, _) = e_f(&state);
        let (ei, _) = e_ini(&state, 3).unwrap();
        assert!(eo < 1e-20, "E_obs = {eo}");
        assert!(ef < 1e-20, "E_f = {ef}");
        assert!(ei < 1e-20, "E_ini = {ei}");
    }

    #[test]
    fn total_energy_matches_residual_stack() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let (state, obs, config) = random_instance(&mut rng);
        let r = residual_stack(&state, &obs, &config).unwrap();
        let expected = r.norm_squared() + config.eps_c * state.coeffs.norm_squared();
        let total = total_energy(&state, &obs, &config).unwrap();
        assert_relative_eq!(total, expected, max_relative = 1e-12);
    }

    #[test]
    fn dense_jacobian_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..5 {
            let (state, obs, config) = random_instance(&mut rng);
            let analytic = dense_jacobian(&state, &obs, &config).unwrap();
            let numeric = numeric_jacobian(state.dim(), 1e-6, |d| {
                residual_stack(&state.retract(d), &obs, &config)
            })
            .unwrap();
            let err = (&analytic - &numeric).amax();
            assert!(err < 1e-5, "max Jacobian error {err}");
        }
    }

    #[test]
    fn schur_step_matches_dense_normal_equations() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let (state, obs, config) = random_instance(&mut rng);
        let lambda = 0.37;
        let assembly = assemble(&state, &obs, &config);
        let dx_schur = schur_step(&state, &assembly, &config, lambda).unwrap();

        let jac = dense_jacobian(&state, &obs, &config).unwrap();
        let r = residual_stack(&state, &obs, &config).unwrap();
        let dim = state.dim();
        let f = state.n_steps();
        let n = state.n_features();
        let t = state.window();
        let mut h = jac.transpose() * &jac;
        let mut g = jac.transpose() * &r;
        for k in 0..t {
            let idx = 6 * f + 3 * n * f + k;
            h[(idx, idx)] += config.eps_c;
            g[idx] += config.eps_c * state.coeffs[k];
        }
        // Reproduce the solver's damping rule exactly.
        for i in 0..n {
            let base = 6 * f + 3 * i * f;
            let dmax = (0..f)
                .map(|s| h[(base + 3 * s, base + 3 * s)])
                .fold(0.0f64, f64::max);
            let ridge = 1e-9 * (1.0 + dmax);
            for k in base..base + 3 * f {
                h[(k, k)] = h[(k, k)] * (1.0 + lambda) + ridge;
            }
        }
        for j in 0..6 * f {
            h[(j, j)] += lambda * (h[(j, j)]) / (1.0 + 0.0) * 0.0 + lambda * h[(j, j)] / 1.0 * 0.0;
        }
        // Pose and coefficient rows: additive damping plus the tiny ridge.
        let mut pc_rows: Vec<usize> = (0..6 * f).collect();
        pc_rows.extend(6 * f + 3 * n * f..dim);
        for &k in &pc_rows {
            h[(k, k)] += lambda * h[(k, k)] + 1e-12;
        }
        let dx_dense = nalgebra::Cholesky::new(h).unwrap().solve(&(-g));
        let err = (&dx_schur - &dx_dense).amax() / dx_dense.amax().max(1e-12);
        assert!(err < 1e-6, "Schur vs dense step error {err}");
    }

    #[test]
    fn kabsch_recovers_rigid_motion() {
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        for _ in 0..20 {
            let r = random_rotation(&mut rng, 2.0);
            let t = random_vec3(&mut rng, 3.0);
            let src: Vec<_> = (0..8).map(|_| random_vec3(&mut rng, 2.0)).collect();
            let dst: Vec<_> = src.iter().map(|p| r.matrix() * p + t).collect();
            let (re, te) = kabsch(&src, &dst).unwrap();
            assert!((re.matrix() - r.matrix()).norm() < 1e-10);
            assert!((te - t).norm() < 1e-10);
        }
    }

    #[test]
    fn initialization_recovers_rigid_trajectory() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let (gt, obs, _) = synthetic(&mut rng, 10, 5, 0.0);
        let config = SolverConfig {
            window: 3,
            ..SolverConfig::default()
        };
        let init = initialize_state(&obs, &config).unwrap();
        for j in 0..gt.n_steps() {
            assert!((init.rotations[j].matrix() - gt.rotations[j].matrix()).norm() < 1e-9);
            assert!((init.positions[j] - gt.positions[j]).norm() < 1e-9);
        }
        for i in 0..gt.n_features() {
            for j in 0..gt.n_steps() {
                assert!((init.shapes.feature(i, j) - gt.shapes.feature(i, j)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn initialization_reports_covisibility_gaps() {
        let mut rng = ChaCha12Rng::seed_from_u64(71);
        let (_, mut obs, _) = synthetic(&mut rng, 8, 4, 0.02);
        for i in 0..2 {
            obs.z[i][4] = None;
        }
        let config = SolverConfig {
            window: 3,
            ..SolverConfig::default()
        };
        match initialize_state(&obs, &config) {
            Err(CoreError::InitializationGap {
                from,
                to,
                covisible,
            }) => {
                assert_eq!((from, to), (3, 4));
                assert_eq!(covisible, 2);
            }
            other => panic!("expected initialization gap, got {other:?}"),
        }
    }

    #[test]
    fn solve_reaches_ground_truth_on_noiseless_deforming_data() {
        let mut rng = ChaCha12Rng::seed_from_u64(81);
        let (gt, obs, _) = synthetic(&mut rng, 12, 6, 0.05);
        let config = SolverConfig {
            window: 3,
            ..SolverConfig::default()
        };
        let (est, report) = solve(&obs, &config).unwrap();
        // The final energy bottoms out at the coefficient ridge
        // eps_c * |c|^2; the model residual itself should vanish.
        let model_energy = residual_stack(&est, &obs, &config).unwrap().norm_squared();
        assert!(model_energy < 1e-10, "model energy {model_energy}");
        for w in report.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "non-monotone trace");
        }
        let mut worst = 0.0f64;
        for i in 0..gt.n_features() {
            for j in 0..gt.n_steps() {
                worst = worst.max((est.shapes.feature(i, j) - gt.shapes.feature(i, j)).norm());
            }
        }
        assert!(worst < 1e-4, "worst feature error {worst}");
        for j in 0..gt.n_steps() {
            assert!((est.positions[j] - gt.positions[j]).norm() < 1e-4);
        }
    }

    #[test]
    fn rigid_solver_recovers_static_scene() {
        let mut rng = ChaCha12Rng::seed_from_u64(91);
        let (gt, obs, _) = synthetic(&mut rng, 10, 5, 0.0);
        let config = SolverConfig {
            window: 3,
            ..SolverConfig::default()
        };
        let (est, report) = rigid_slam_solve(&obs, &config).unwrap();
        assert!(report.final_energy < 1e-12);
        for i in 0..gt.n_features() {
            assert!((est.shapes.feature(i, 0) - gt.shapes.feature(i, 0)).norm() < 1e-6);
        }
        assert_eq!(est.coeffs[0], 1.0);
    }

    #[test]
    fn fix_c_holds_coefficients() {
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let (_, obs, _) = synthetic(&mut rng, 12, 6, 0.05);
        let config = SolverConfig {
            window: 3,
            fix_c: true,
            ..SolverConfig::default()
        };
        let init = initialize_state(&obs, &config).unwrap();
        let frozen = init.coeffs.clone();
        let (est, _) = solve_from(init, &obs, &config).unwrap();
        assert_eq!(est.coeffs, frozen);
    }

    #[test]
    fn ed_vo_matches_rigid_ground_truth() {
        let mut rng = ChaCha12Rng::seed_from_u64(111);
        let (gt, obs, _) = synthetic(&mut rng, 8, 8, 0.0);
        let (poses, report) = ed_vo_solve(&obs, &EdVoConfig::default()).unwrap();
        assert_eq!(poses.len(), 8);
        assert_eq!(report.skipped_pairs, 0);
        for j in 0..8 {
            assert!((poses[j].0.matrix() - gt.rotations[j].matrix()).norm() < 1e-6);
            assert!((poses[j].1 - gt.positions[j]).norm() < 1e-6);
        }
    }

    #[test]
    fn unsolvable_inputs_are_rejected() {
        let config = SolverConfig::default();
        let empty = ObservationSet { z: vec![] };
        assert!(matches!(
            solve(&empty, &config),
            Err(CoreError::UnsolvableInstance(_))
        ));
        // Too few steps to ever close a window.
        let short = ObservationSet {
            z: vec![vec![Some(Vector3::zeros()); 3]; 4],
        };
        assert!(matches!(
            solve(&short, &config),
            Err(CoreError::UnsolvableInstance(_))
        ));
    }

    #[test]
    fn solution_schema_round_trips() {
        let mut rng = ChaCha12Rng::seed_from_u64(121);
        let (state, _, _) = synthetic(&mut rng, 8, 3, 0.03);
        let report = SolveReport {
            initial_energy: 2.0,
            final_energy: 1.0,
            energy_trace: vec![2.0, 1.0],
            iterations: 1,
            termination: Termination::Gradient,
        };
        let schema = SolutionSchema::from_state(&state, &report);
        let text = serde_json::to_string(&schema).unwrap();
        let back: SolutionSchema = serde_json::from_str(&text).unwrap();
        assert_eq!(back.schema_version, 1);
        assert_eq!(back.poses.len(), 8);
        assert_eq!(back.shapes.len(), 3);
        for j in 0..8 {
            assert_eq!(back.poses[j].r, schema.poses[j].r);
            assert_eq!(back.poses[j].p, schema.poses[j].p);
        }
        assert_eq!(back.coefficients, schema.coefficients);
    }
}
