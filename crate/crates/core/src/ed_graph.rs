//! Embedded-deformation graphs: nearest-node warping, the rotation /
//! regularization / data energies, their matrix formulation, and the two
//! gauge maps that transform a solution into a different solution with the
//! same energy.
//!
//! Units are millimetres for positions and translations; affine blocks are
//! dimensionless.

use nalgebra::{DMatrix, Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::lie::Rotation;

/// One deformation node: position `g`, local affine block `a`, translation `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdNode {
    pub g: Vector3<f64>,
    pub a: Matrix3<f64>,
    pub t: Vector3<f64>,
}

/// Sparse node set with symmetric neighbor topology and per-edge weights.
#[derive(Debug, Clone)]
pub struct EdGraph {
    nodes: Vec<EdNode>,
    neighbors: Vec<Vec<usize>>,
    alpha: Vec<Vec<f64>>,
    k_influence: usize,
}

pub const DEFAULT_K_INFLUENCE: usize = 4;

impl EdGraph {
    /// Builds a graph with all edge weights set to 1.
    pub fn new(nodes: Vec<EdNode>, neighbors: Vec<Vec<usize>>, k_influence: usize) -> Result<Self> {
        let alpha = neighbors.iter().map(|n| vec![1.0; n.len()]).collect();
        Self::with_alpha(nodes, neighbors, alpha, k_influence)
    }

    pub fn with_alpha(
        nodes: Vec<EdNode>,
        neighbors: Vec<Vec<usize>>,
        alpha: Vec<Vec<f64>>,
        k_influence: usize,
    ) -> Result<Self> {
        if neighbors.len() != nodes.len() || alpha.len() != nodes.len() {
            return Err(CoreError::InvalidGraph(
                "topology arrays must have one entry per node".into(),
            ));
        }
        if k_influence == 0 {
            return Err(CoreError::InvalidGraph("k_influence must be >= 1".into()));
        }
        for (j, adj) in neighbors.iter().enumerate() {
            if alpha[j].len() != adj.len() {
                return Err(CoreError::InvalidGraph(format!(
                    "node {j}: alpha list does not match neighbor list"
                )));
            }
            for (&k, &a) in adj.iter().zip(&alpha[j]) {
                if k >= nodes.len() {
                    return Err(CoreError::InvalidGraph(format!(
                        "node {j}: neighbor index {k} out of range"
                    )));
                }
                if a <= 0.0 {
                    return Err(CoreError::InvalidGraph(format!(
                        "edge ({j},{k}): alpha must be positive"
                    )));
                }
                if !neighbors[k].contains(&j) {
                    return Err(CoreError::InvalidGraph(format!(
                        "edge ({j},{k}) is not symmetric"
                    )));
                }
            }
        }
        Ok(Self {
            nodes,
            neighbors,
            alpha,
            k_influence,
        })
    }

    pub fn nodes(&self) -> &[EdNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn alpha(&self) -> &[Vec<f64>] {
        &self.alpha
    }

    pub fn k_influence(&self) -> usize {
        self.k_influence
    }

    /// Replaces the deformation parameters, keeping positions and topology.
    pub fn with_parameters(&self, params: Vec<(Matrix3<f64>, Vector3<f64>)>) -> Result<Self> {
        if params.len() != self.nodes.len() {
            return Err(CoreError::DimensionMismatch(
                "parameter list does not match node count".into(),
            ));
        }
        let nodes = self
            .nodes
            .iter()
            .zip(params)
            .map(|(n, (a, t))| EdNode { g: n.g, a, t })
            .collect();
        Ok(Self {
            nodes,
            neighbors: self.neighbors.clone(),
            alpha: self.alpha.clone(),
            k_influence: self.k_influence,
        })
    }

    pub fn to_schema(&self) -> EdGraphSchema {
        EdGraphSchema {
            schema_version: 1,
            k_influence: self.k_influence,
            nodes: self
                .nodes
                .iter()
                .map(|n| EdNodeSchema {
                    g: n.g.into(),
                    a: [
                        n.a[(0, 0)],
                        n.a[(0, 1)],
                        n.a[(0, 2)],
                        n.a[(1, 0)],
                        n.a[(1, 1)],
                        n.a[(1, 2)],
                        n.a[(2, 0)],
                        n.a[(2, 1)],
                        n.a[(2, 2)],
                    ],
                    t: n.t.into(),
                })
                .collect(),
            neighbors: self.neighbors.clone(),
            alpha: self.alpha.clone(),
        }
    }

    pub fn from_schema(schema: &EdGraphSchema) -> Result<Self> {
        let nodes = schema
            .nodes
            .iter()
            .map(|n| EdNode {
                g: Vector3::from(n.g),
                a: Matrix3::new(
                    n.a[0], n.a[1], n.a[2], n.a[3], n.a[4], n.a[5], n.a[6], n.a[7], n.a[8],
                ),
                t: Vector3::from(n.t),
            })
            .collect();
        Self::with_alpha(
            nodes,
            schema.neighbors.clone(),
            schema.alpha.clone(),
            schema.k_influence,
        )
    }
}

/// JSON form of a deformation graph: affine blocks row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdGraphSchema {
    pub schema_version: u32,
    pub k_influence: usize,
    pub nodes: Vec<EdNodeSchema>,
    pub neighbors: Vec<Vec<usize>>,
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdNodeSchema {
    pub g: [f64; 3],
    pub a: [f64; 9],
    pub t: [f64; 3],
}

/// Relative rigid rotation and translation shared by the whole point set.
#[derive(Debug, Clone, Copy)]
pub struct GlobalPose {
    pub rc: Rotation,
    pub tc: Vector3<f64>,
}

impl GlobalPose {
    pub fn identity() -> Self {
        Self {
            rc: Rotation::identity(),
            tc: Vector3::zeros(),
        }
    }
}

/// Hyper-parameters weighting the three energy terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EdEnergyWeights {
    pub w_rot: f64,
    pub w_reg: f64,
    pub w_data: f64,
}

impl EdEnergyWeights {
    pub fn new(w_rot: f64, w_reg: f64, w_data: f64) -> Result<Self> {
        if w_rot < 0.0 || w_reg < 0.0 || w_data < 0.0 || w_rot + w_reg + w_data == 0.0 {
            return Err(CoreError::InvalidConfig(
                "energy weights must be non-negative and not all zero".into(),
            ));
        }
        Ok(Self {
            w_rot,
            w_reg,
            w_data,
        })
    }
}

impl Default for EdEnergyWeights {
    fn default() -> Self {
        Self {
            w_rot: 1.0,
            w_reg: 1.0,
            w_data: 1.0,
        }
    }
}

/// Matrix formulation of the warp: `Rc (Lambda M + T C) + Tc x 1`.
///
/// `m` is 3m x n with weighted offset blocks, `c` is m x n with the bare
/// weights; `lambda` (3 x 3m) and `t_stack` (3 x m) hold the per-node affine
/// blocks and `t_j + g_j` columns.
#[derive(Debug, Clone)]
pub struct InfluenceMatrices {
    pub m: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub t_stack: DMatrix<f64>,
}

impl InfluenceMatrices {
    /// Applies the deformation (no global pose): `Lambda M + T C`, 3 x n.
    pub fn deform(&self) -> DMatrix<f64> {
        &self.lambda * &self.m + &self.t_stack * &self.c
    }
}

/// Nearest-node blending weights for a point.
///
/// The `k_influence` nearest nodes get raw weights `1 - d / d_max` with
/// `d_max` the distance to the (k+1)-th nearest node, then the weights are
/// normalized to sum to 1. Ties break toward the lower node index.
pub fn compute_weights(v: &Vector3<f64>, graph: &EdGraph) -> Result<Vec<(usize, f64)>> {
    let k = graph.k_influence();
    if graph.node_count() < k + 1 {
        return Err(CoreError::InvalidGraph(format!(
            "need at least {} nodes for k_influence {k}",
            k + 1
        )));
    }
    let mut order: Vec<(usize, f64)> = graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(j, n)| (j, (v - n.g).norm()))
        .collect();
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let d_max = order[k].1;
    if d_max <= f64::EPSILON {
        return Err(CoreError::DegenerateGraph(format!(
            "distance to ({})-th nearest node is zero (duplicate node positions?)",
            k + 1
        )));
    }
    let mut weights: Vec<(usize, f64)> = order[..k]
        .iter()
        .map(|&(j, d)| (j, 1.0 - d / d_max))
        .collect();
    let sum: f64 = weights.iter().map(|&(_, w)| w).sum();
    if sum <= 1e-12 {
        return Err(CoreError::DegenerateGraph(
            "all raw weights vanish; cannot normalize".into(),
        ));
    }
    for w in &mut weights {
        w.1 /= sum;
    }
    Ok(weights)
}

/// Warps a point through its nearest nodes and the global pose:
/// `Rc * sum_j w_j [A_j (v - g_j) + g_j + t_j] + Tc`.
pub fn warp_point(v: &Vector3<f64>, graph: &EdGraph, pose: &GlobalPose) -> Result<Vector3<f64>> {
    let weights = compute_weights(v, graph)?;
    let mut blended = Vector3::zeros();
    for (j, w) in weights {
        let n = &graph.nodes()[j];
        blended += (n.a * (v - n.g) + n.g + n.t) * w;
    }
    Ok(pose.rc.matrix() * blended + pose.tc)
}

/// Assembles the influence matrices for a point set.
pub fn build_influence_matrices(
    points: &[Vector3<f64>],
    graph: &EdGraph,
) -> Result<InfluenceMatrices> {
    let m_nodes = graph.node_count();
    let n = points.len();
    let mut m = DMatrix::zeros(3 * m_nodes, n);
    let mut c = DMatrix::zeros(m_nodes, n);
    for (i, v) in points.iter().enumerate() {
        for (j, w) in compute_weights(v, graph)? {
            let offset = (v - graph.nodes()[j].g) * w;
            m.fixed_view_mut::<3, 1>(3 * j, i).copy_from(&offset);
            c[(j, i)] = w;
        }
    }
    let mut lambda = DMatrix::zeros(3, 3 * m_nodes);
    let mut t_stack = DMatrix::zeros(3, m_nodes);
    for (j, node) in graph.nodes().iter().enumerate() {
        lambda.fixed_view_mut::<3, 3>(0, 3 * j).copy_from(&node.a);
        t_stack
            .fixed_view_mut::<3, 1>(0, j)
            .copy_from(&(node.t + node.g));
    }
    Ok(InfluenceMatrices {
        m,
        c,
        lambda,
        t_stack,
    })
}

/// Data term in matrix form: residual `Rc (Lambda M + T C) + Tc x 1 - targets`
/// and its squared Frobenius norm.
pub fn e_data(
    points: &[Vector3<f64>],
    graph: &EdGraph,
    pose: &GlobalPose,
    targets: &[Vector3<f64>],
) -> Result<(Matrix3xX<f64>, f64)> {
    if points.len() != targets.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "{} points vs {} targets",
            points.len(),
            targets.len()
        )));
    }
    let matrices = build_influence_matrices(points, graph)?;
    let mut residual = pose.rc.matrix() * matrices.deform();
    for (i, target) in targets.iter().enumerate() {
        let col = residual.fixed_view::<3, 1>(0, i) + pose.tc - target;
        residual.fixed_view_mut::<3, 1>(0, i).copy_from(&col);
    }
    let scalar = residual.norm_squared();
    Ok((residual, scalar))
}

/// The six scalar residuals of the rotation penalty for one affine block:
/// pairwise column dot products and unit-norm defects.
pub fn rot_residuals(a: &Matrix3<f64>) -> [f64; 6] {
    let c1 = a.column(0);
    let c2 = a.column(1);
    let c3 = a.column(2);
    [
        c1.dot(&c2),
        c1.dot(&c3),
        c2.dot(&c3),
        c1.dot(&c1) - 1.0,
        c2.dot(&c2) - 1.0,
        c3.dot(&c3) - 1.0,
    ]
}

/// Rotation penalty summed over all nodes.
pub fn e_rot(graph: &EdGraph) -> f64 {
    graph
        .nodes()
        .iter()
        .map(|n| rot_residuals(&n.a).iter().map(|r| r * r).sum::<f64>())
        .sum()
}

/// Residual of one directed regularization edge `(j, k)`:
/// `sqrt(alpha) * [A_j (g_k - g_j) + g_j + t_j - (g_k + t_k)]`.
pub fn reg_residual(graph: &EdGraph, j: usize, k: usize, alpha: f64) -> Vector3<f64> {
    let nj = &graph.nodes()[j];
    let nk = &graph.nodes()[k];
    (nj.a * (nk.g - nj.g) + nj.g + nj.t - nk.g - nk.t) * alpha.sqrt()
}

/// Regularization penalty over all directed edges.
pub fn e_reg(graph: &EdGraph) -> f64 {
    let mut total = 0.0;
    for (j, adj) in graph.neighbors().iter().enumerate() {
        for (&k, &alpha) in adj.iter().zip(&graph.alpha()[j]) {
            total += reg_residual(graph, j, k, alpha).norm_squared();
        }
    }
    total
}

/// Weighted total energy `w_rot E_rot + w_reg E_reg + w_data E_data`.
pub fn total_energy(
    points: &[Vector3<f64>],
    graph: &EdGraph,
    pose: &GlobalPose,
    targets: &[Vector3<f64>],
    weights: &EdEnergyWeights,
) -> Result<f64> {
    let (_, data) = e_data(points, graph, pose, targets)?;
    Ok(weights.w_rot * e_rot(graph) + weights.w_reg * e_reg(graph) + weights.w_data * data)
}

/// Rotation gauge: `[Rc V0, Tc, V0^T A_j, V0^T (t_j + g_j) - g_j]`.
///
/// Leaves the data residual, `e_rot` and `e_reg` unchanged; the counter
/// rotation of the node parameters absorbs the extra global rotation.
pub fn gauge_rotate(pose: &GlobalPose, graph: &EdGraph, v0: &Rotation) -> (GlobalPose, EdGraph) {
    let v0t = v0.matrix().transpose();
    let params = graph
        .nodes()
        .iter()
        .map(|n| (v0t * n.a, v0t * (n.t + n.g) - n.g))
        .collect();
    let new_graph = graph.with_parameters(params).expect("same node count");
    let new_pose = GlobalPose {
        rc: pose.rc.compose(v0),
        tc: pose.tc,
    };
    (new_pose, new_graph)
}

/// Translation gauge: `[Rc, Tc - dT, A_j, t_j + Rc^T dT]`.
///
/// The common node offset cancels in `e_reg`, and because the weight columns
/// sum to 1 the data term absorbs `dT` exactly.
pub fn gauge_translate(
    pose: &GlobalPose,
    graph: &EdGraph,
    dt: &Vector3<f64>,
) -> (GlobalPose, EdGraph) {
    let offset = pose.rc.matrix().transpose() * dt;
    let params = graph.nodes().iter().map(|n| (n.a, n.t + offset)).collect();
    let new_graph = graph.with_parameters(params).expect("same node count");
    let new_pose = GlobalPose {
        rc: pose.rc,
        tc: pose.tc - dt,
    };
    (new_pose, new_graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{consistent_graph, random_graph, random_pose, random_vec3};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn line_graph(positions: &[f64]) -> EdGraph {
        let nodes = positions
            .iter()
            .map(|&x| EdNode {
                g: Vector3::new(x, 0.0, 0.0),
                a: Matrix3::identity(),
                t: Vector3::zeros(),
            })
            .collect();
        let n = positions.len();
        let neighbors = (0..n)
            .map(|j| {
                let mut adj = Vec::new();
                if j > 0 {
                    adj.push(j - 1);
                }
                if j + 1 < n {
                    adj.push(j + 1);
                }
                adj
            })
            .collect();
        EdGraph::new(nodes, neighbors, DEFAULT_K_INFLUENCE).unwrap()
    }

    /// Independent weight oracle: exhaustive distance sort + raw formula.
    fn weight_oracle(v: &Vector3<f64>, graph: &EdGraph) -> Vec<(usize, f64)> {
        let k = graph.k_influence();
        let mut dists: Vec<(usize, f64)> = graph
            .nodes()
            .iter()
            .enumerate()
            .map(|(j, n)| (j, (v - n.g).norm()))
            .collect();
        dists.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let d_max = dists[k].1;
        let raw: Vec<(usize, f64)> = dists[..k]
            .iter()
            .map(|&(j, d)| (j, 1.0 - d / d_max))
            .collect();
        let sum: f64 = raw.iter().map(|x| x.1).sum();
        raw.into_iter().map(|(j, w)| (j, w / sum)).collect()
    }

    #[test]
    fn node_coincident_point_gets_largest_weight() {
        let graph = line_graph(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = compute_weights(&Vector3::new(1.0, 0.0, 0.0), &graph).unwrap();
        let (best, best_w) = *w
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(best, 1);
        for &(j, wj) in &w {
            if j != best {
                assert!(best_w > wj);
            }
        }
    }

    #[test]
    fn point_at_dmax_gets_zero_raw_weight() {
        // v = 0 with nodes at -2,-1,0,1,2: the 4th nearest (index 0, d=2)
        // sits exactly at d_max=2, so its normalized weight is 0.
        let graph = line_graph(&[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let w = compute_weights(&Vector3::zeros(), &graph).unwrap();
        let w0 = w.iter().find(|&&(j, _)| j == 0).unwrap().1;
        assert_eq!(w0, 0.0);
        let sum: f64 = w.iter().map(|x| x.1).sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicate_nodes_are_degenerate() {
        let graph = line_graph(&[0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            compute_weights(&Vector3::zeros(), &graph),
            Err(CoreError::DegenerateGraph(_))
        ));
    }

    #[test]
    fn weights_match_exhaustive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let graph = random_graph(&mut rng, 10, 0.3);
            let v = random_vec3(&mut rng, 4.0);
            let got = compute_weights(&v, &graph).unwrap();
            let want = weight_oracle(&v, &graph);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.0, w.0);
                assert_relative_eq!(g.1, w.1, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn identity_configuration_warps_to_itself() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let graph = consistent_graph(&mut rng, 8, Vector3::zeros());
        let v = Vector3::new(2.5, 0.4, 0.1);
        let warped = warp_point(&v, &graph, &GlobalPose::identity()).unwrap();
        assert_relative_eq!(warped, v, epsilon = 1e-12);
    }

    #[test]
    fn uniform_node_translation_shifts_point() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let delta = Vector3::new(0.3, -0.8, 0.5);
        let graph = consistent_graph(&mut rng, 8, delta);
        let v = Vector3::new(1.2, 0.9, -0.2);
        let warped = warp_point(&v, &graph, &GlobalPose::identity()).unwrap();
        assert_relative_eq!(warped, v + delta, epsilon = 1e-12);
    }

    #[test]
    fn warp_matches_scalar_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let graph = random_graph(&mut rng, 9, 0.4);
            let pose = random_pose(&mut rng);
            let v = random_vec3(&mut rng, 3.0);
            // Direct transcription of the warp as a scalar loop.
            let mut acc = Vector3::zeros();
            for (j, w) in compute_weights(&v, &graph).unwrap() {
                let n = &graph.nodes()[j];
                for r in 0..3 {
                    let mut comp = n.g[r] + n.t[r];
                    for c in 0..3 {
                        comp += n.a[(r, c)] * (v[c] - n.g[c]);
                    }
                    acc[r] += w * comp;
                }
            }
            let expected = pose.rc.matrix() * acc + pose.tc;
            let warped = warp_point(&v, &graph, &pose).unwrap();
            assert_relative_eq!(warped, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn influence_matrix_invariants() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let graph = random_graph(&mut rng, 5, 0.3);
        let points = vec![random_vec3(&mut rng, 2.0)];
        let mats = build_influence_matrices(&points, &graph).unwrap();
        let nonzero = mats.c.column(0).iter().filter(|&&w| w != 0.0).count();
        assert_eq!(nonzero, graph.k_influence());
        assert_relative_eq!(mats.c.column(0).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn matrix_deform_matches_pointwise_warp() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let graph = random_graph(&mut rng, 12, 0.4);
        let points: Vec<_> = (0..20).map(|_| random_vec3(&mut rng, 4.0)).collect();
        let mats = build_influence_matrices(&points, &graph).unwrap();
        let deformed = mats.deform();
        for (i, v) in points.iter().enumerate() {
            let expected = warp_point(v, &graph, &GlobalPose::identity()).unwrap();
            assert_relative_eq!(
                Vector3::from(deformed.fixed_view::<3, 1>(0, i)),
                expected,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn node_permutation_leaves_deformation_unchanged() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let graph = random_graph(&mut rng, 8, 0.4);
        let points: Vec<_> = (0..10).map(|_| random_vec3(&mut rng, 3.0)).collect();
        let base = build_influence_matrices(&points, &graph).unwrap().deform();

        // Reverse node storage order (topology remapped accordingly).
        let m = graph.node_count();
        let perm = |j: usize| m - 1 - j;
        let nodes: Vec<_> = (0..m).map(|j| graph.nodes()[perm(j)].clone()).collect();
        let neighbors: Vec<Vec<usize>> = (0..m)
            .map(|j| {
                graph.neighbors()[perm(j)]
                    .iter()
                    .map(|&k| perm(k))
                    .collect()
            })
            .collect();
        let permuted = EdGraph::new(nodes, neighbors, graph.k_influence()).unwrap();
        let other = build_influence_matrices(&points, &permuted)
            .unwrap()
            .deform();
        assert_relative_eq!(base, other, epsilon = 1e-12);
    }

    #[test]
    fn e_data_zero_on_self_consistent_targets() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let graph = random_graph(&mut rng, 7, 0.3);
        let pose = random_pose(&mut rng);
        let points: Vec<_> = (0..6).map(|_| random_vec3(&mut rng, 3.0)).collect();
        let targets: Vec<_> = points
            .iter()
            .map(|v| warp_point(v, &graph, &pose).unwrap())
            .collect();
        let (_, scalar) = e_data(&points, &graph, &pose, &targets).unwrap();
        assert!(scalar <= 1e-20);
    }

    #[test]
    fn e_data_matches_stacked_warp_residuals() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..5 {
            let graph = random_graph(&mut rng, 10, 0.4);
            let pose = random_pose(&mut rng);
            let points: Vec<_> = (0..15).map(|_| random_vec3(&mut rng, 4.0)).collect();
            let targets: Vec<_> = (0..15).map(|_| random_vec3(&mut rng, 4.0)).collect();
            let (residual, scalar) = e_data(&points, &graph, &pose, &targets).unwrap();
            let mut acc = 0.0;
            for i in 0..points.len() {
                let expected = warp_point(&points[i], &graph, &pose).unwrap() - targets[i];
                assert_relative_eq!(
                    Vector3::from(residual.fixed_view::<3, 1>(0, i)),
                    expected,
                    epsilon = 1e-12
                );
                acc += expected.norm_squared();
            }
            assert_relative_eq!(scalar, acc, max_relative = 1e-12);
        }
    }

    #[test]
    fn e_rot_zero_for_rotation_blocks() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut graph = random_graph(&mut rng, 6, 0.3);
        let params = graph
            .nodes()
            .iter()
            .map(|_| {
                (
                    *Rotation::exp(&random_vec3(&mut rng, 1.0)).matrix(),
                    Vector3::zeros(),
                )
            })
            .collect();
        graph = graph.with_parameters(params).unwrap();
        assert!(e_rot(&graph) <= 1e-24);
    }

    #[test]
    fn e_rot_scaled_identity() {
        // A = 2I: three (4-1)^2 terms, zero cross terms.
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut graph = random_graph(&mut rng, 5, 0.1);
        let mut params: Vec<_> = graph
            .nodes()
            .iter()
            .map(|_| (Matrix3::identity(), Vector3::zeros()))
            .collect();
        params[0].0 = Matrix3::identity() * 2.0;
        graph = graph.with_parameters(params).unwrap();
        assert_relative_eq!(e_rot(&graph), 27.0, epsilon = 1e-12);
    }

    #[test]
    fn rot_penalty_invariant_under_common_rotation() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..10 {
            let a = Matrix3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let v0 = Rotation::exp(&random_vec3(&mut rng, 1.5));
            let before: f64 = rot_residuals(&a).iter().map(|r| r * r).sum();
            let after: f64 = rot_residuals(&(v0.matrix().transpose() * a))
                .iter()
                .map(|r| r * r)
                .sum();
            assert_relative_eq!(before, after, max_relative = 1e-10);
        }
    }

    #[test]
    fn e_reg_zero_for_consistent_graphs() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let rigid = consistent_graph(&mut rng, 8, Vector3::zeros());
        assert!(e_reg(&rigid) <= 1e-24);
        let offset = consistent_graph(&mut rng, 8, Vector3::new(1.0, -2.0, 0.5));
        assert!(e_reg(&offset) <= 1e-20);
    }

    #[test]
    fn e_reg_matches_double_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let graph = random_graph(&mut rng, 9, 0.5);
        let mut oracle = 0.0;
        for j in 0..graph.node_count() {
            for (idx, &k) in graph.neighbors()[j].iter().enumerate() {
                let alpha = graph.alpha()[j][idx];
                let nj = &graph.nodes()[j];
                let nk = &graph.nodes()[k];
                let mut term = 0.0;
                for r in 0..3 {
                    let mut comp = nj.g[r] + nj.t[r] - nk.g[r] - nk.t[r];
                    for c in 0..3 {
                        comp += nj.a[(r, c)] * (nk.g[c] - nj.g[c]);
                    }
                    term += comp * comp;
                }
                oracle += alpha * term;
            }
        }
        assert_relative_eq!(e_reg(&graph), oracle, max_relative = 1e-12);
    }

    #[test]
    fn total_energy_is_weighted_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let graph = random_graph(&mut rng, 8, 0.4);
        let pose = random_pose(&mut rng);
        let points: Vec<_> = (0..8).map(|_| random_vec3(&mut rng, 3.0)).collect();
        let targets: Vec<_> = (0..8).map(|_| random_vec3(&mut rng, 3.0)).collect();
        let weights = EdEnergyWeights::new(0.7, 1.3, 2.1).unwrap();
        let total = total_energy(&points, &graph, &pose, &targets, &weights).unwrap();
        let (_, data) = e_data(&points, &graph, &pose, &targets).unwrap();
        let expected = 0.7 * e_rot(&graph) + 1.3 * e_reg(&graph) + 2.1 * data;
        assert_relative_eq!(total, expected, max_relative = 1e-12);

        let data_only = EdEnergyWeights::new(0.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(
            total_energy(&points, &graph, &pose, &targets, &data_only).unwrap(),
            data,
            max_relative = 1e-12
        );
    }

    #[test]
    fn gauge_rotate_identity_is_noop() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let graph = random_graph(&mut rng, 7, 0.4);
        let pose = random_pose(&mut rng);
        let (p2, g2) = gauge_rotate(&pose, &graph, &Rotation::identity());
        assert_eq!(p2.rc.matrix(), pose.rc.matrix());
        assert_eq!(p2.tc, pose.tc);
        for (a, b) in graph.nodes().iter().zip(g2.nodes()) {
            assert_relative_eq!(a.a, b.a, epsilon = 1e-15);
            assert_relative_eq!(a.t, b.t, epsilon = 1e-15);
        }
    }

    #[test]
    fn gauge_maps_preserve_total_energy() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let weights = EdEnergyWeights::default();
        for _ in 0..100 {
            let graph = random_graph(&mut rng, 8, 0.5);
            let pose = random_pose(&mut rng);
            let points: Vec<_> = (0..10).map(|_| random_vec3(&mut rng, 3.0)).collect();
            let targets: Vec<_> = (0..10).map(|_| random_vec3(&mut rng, 3.0)).collect();
            let before = total_energy(&points, &graph, &pose, &targets, &weights).unwrap();

            let v0 = Rotation::exp(&random_vec3(&mut rng, 1.5));
            let (pr, gr) = gauge_rotate(&pose, &graph, &v0);
            let rotated = total_energy(&points, &gr, &pr, &targets, &weights).unwrap();
            assert_relative_eq!(rotated, before, max_relative = 1e-10);
            // e_rot is preserved term by term, not just in total.
            for (a, b) in graph.nodes().iter().zip(gr.nodes()) {
                let ra = rot_residuals(&a.a);
                let rb = rot_residuals(&b.a);
                for (x, y) in ra.iter().zip(&rb) {
                    assert_relative_eq!(x, y, epsilon = 1e-10);
                }
            }

            let dt = random_vec3(&mut rng, 2.0);
            let (pt, gt) = gauge_translate(&pose, &graph, &dt);
            let translated = total_energy(&points, &gt, &pt, &targets, &weights).unwrap();
            assert_relative_eq!(translated, before, max_relative = 1e-10);
        }
    }

    #[test]
    fn gauge_translate_preserves_reg_term_by_term() {
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let graph = random_graph(&mut rng, 8, 0.5);
        let pose = random_pose(&mut rng);
        let (_, shifted) = gauge_translate(&pose, &graph, &Vector3::new(0.4, -1.1, 0.9));
        for j in 0..graph.node_count() {
            for (idx, &k) in graph.neighbors()[j].iter().enumerate() {
                let alpha = graph.alpha()[j][idx];
                assert_relative_eq!(
                    reg_residual(&graph, j, k, alpha),
                    reg_residual(&shifted, j, k, alpha),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn gauge_translate_zero_is_noop() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let graph = random_graph(&mut rng, 6, 0.4);
        let pose = random_pose(&mut rng);
        let (p2, g2) = gauge_translate(&pose, &graph, &Vector3::zeros());
        assert_eq!(p2.tc, pose.tc);
        for (a, b) in graph.nodes().iter().zip(g2.nodes()) {
            assert_eq!(a.t, b.t);
        }
    }

    #[test]
    fn gauge_rotate_composes_as_group_action() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let graph = random_graph(&mut rng, 6, 0.4);
        let pose = random_pose(&mut rng);
        let v0 = Rotation::exp(&random_vec3(&mut rng, 1.0));
        let w0 = Rotation::exp(&random_vec3(&mut rng, 1.0));
        let (p1, g1) = gauge_rotate(&pose, &graph, &v0);
        let (p2, _) = gauge_rotate(&p1, &g1, &w0);
        let (p12, _) = gauge_rotate(&pose, &graph, &v0.compose(&w0));
        assert_relative_eq!(*p2.rc.matrix(), *p12.rc.matrix(), epsilon = 1e-12);
    }

    #[test]
    fn graph_schema_round_trips() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let graph = random_graph(&mut rng, 6, 0.4);
        let json = serde_json::to_string(&graph.to_schema()).unwrap();
        let schema: EdGraphSchema = serde_json::from_str(&json).unwrap();
        let back = EdGraph::from_schema(&schema).unwrap();
        for (a, b) in graph.nodes().iter().zip(back.nodes()) {
            assert_eq!(a.g, b.g);
            assert_eq!(a.a, b.a);
            assert_eq!(a.t, b.t);
        }
        assert_eq!(graph.neighbors(), back.neighbors());
    }

    #[test]
    fn asymmetric_topology_is_rejected() {
        let nodes: Vec<_> = (0..5)
            .map(|j| EdNode {
                g: Vector3::new(j as f64, 0.0, 0.0),
                a: Matrix3::identity(),
                t: Vector3::zeros(),
            })
            .collect();
        let neighbors = vec![vec![1], vec![], vec![], vec![], vec![]];
        assert!(matches!(
            EdGraph::new(nodes, neighbors, 4),
            Err(CoreError::InvalidGraph(_))
        ));
    }
}
