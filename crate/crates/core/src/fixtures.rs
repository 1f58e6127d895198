//! Seeded random fixtures shared by unit tests, the acceptance suite and the
//! CLI's built-in observability reports.
//!
//! Everything here is deterministic given the RNG state; no fixture touches
//! global randomness.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::ed_graph::{EdEnergyWeights, EdGraph, EdNode, GlobalPose, DEFAULT_K_INFLUENCE};
use crate::lie::Rotation;
use crate::observability::{EdEnergyInstance, EdPointInstance, ToyInstance};

pub fn random_vec3(rng: &mut ChaCha12Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
    )
}

/// Random rotation with angle up to `scale` radians (keep below pi).
pub fn random_rotation(rng: &mut ChaCha12Rng, scale: f64) -> Rotation {
    Rotation::exp(&random_vec3(rng, scale / 3f64.sqrt()))
}

pub fn random_pose(rng: &mut ChaCha12Rng) -> GlobalPose {
    GlobalPose {
        rc: random_rotation(rng, 1.5),
        tc: random_vec3(rng, 2.0),
    }
}

/// Ring-topology graph with jittered node positions and random parameters.
pub fn random_graph(rng: &mut ChaCha12Rng, m: usize, perturb: f64) -> EdGraph {
    assert!(m >= 5);
    let nodes = (0..m)
        .map(|j| {
            let base = Vector3::new(j as f64, (j % 3) as f64 * 0.7, (j % 2) as f64 * 0.5);
            let jitter = if perturb > 0.0 {
                Matrix3::from_fn(|_, _| rng.gen_range(-perturb..perturb))
            } else {
                Matrix3::zeros()
            };
            EdNode {
                g: base + random_vec3(rng, 0.3),
                a: Matrix3::identity() + jitter,
                t: if perturb > 0.0 {
                    random_vec3(rng, perturb)
                } else {
                    Vector3::zeros()
                },
            }
        })
        .collect();
    let neighbors = (0..m).map(|j| vec![(j + m - 1) % m, (j + 1) % m]).collect();
    EdGraph::new(nodes, neighbors, DEFAULT_K_INFLUENCE).unwrap()
}

/// Graph with `A_j = I` and a common node translation `delta`: zero rotation
/// and regularization energy, and a warp equal to `v + delta`.
pub fn consistent_graph(rng: &mut ChaCha12Rng, m: usize, delta: Vector3<f64>) -> EdGraph {
    let graph = random_graph(rng, m, 0.2);
    let params = graph
        .nodes()
        .iter()
        .map(|_| (Matrix3::identity(), delta))
        .collect();
    graph.with_parameters(params).unwrap()
}

/// Single-point instance with unit-scale entries; generic position with
/// probability one.
pub fn random_ed_point_instance(rng: &mut ChaCha12Rng, m: usize) -> EdPointInstance {
    let mut c: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = c.iter().sum();
    for w in &mut c {
        *w /= sum;
    }
    EdPointInstance {
        m: (0..m).map(|_| random_vec3(rng, 1.0)).collect(),
        c,
        lambda: (0..m)
            .map(|_| Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
            .collect(),
        tau: (0..m).map(|_| random_vec3(rng, 1.0)).collect(),
        rc: random_rotation(rng, 1.5),
        tc: random_vec3(rng, 1.0),
        target: random_vec3(rng, 1.0),
    }
}

/// Noiseless, fully consistent full-energy instance: the node field encodes a
/// global rigid motion `v -> V v + b`, so every residual (rotation,
/// regularization and data) is exactly zero.
pub fn consistent_ed_energy_instance(
    rng: &mut ChaCha12Rng,
    m: usize,
    n: usize,
) -> EdEnergyInstance {
    let v0 = random_rotation(rng, 1.2);
    let b = random_vec3(rng, 1.0);
    let graph = random_graph(rng, m, 0.2);
    let params = graph
        .nodes()
        .iter()
        .map(|node| {
            (
                *v0.matrix(),
                (v0.matrix() - Matrix3::identity()) * node.g + b,
            )
        })
        .collect();
    let graph = graph.with_parameters(params).unwrap();
    let pose = random_pose(rng);
    let points: Vec<_> = (0..n).map(|_| random_vec3(rng, 3.0)).collect();
    let targets = points
        .iter()
        .map(|p| pose.rc.matrix() * (v0.matrix() * p + b) + pose.tc)
        .collect();
    EdEnergyInstance {
        graph,
        pose,
        points,
        targets,
        weights: EdEnergyWeights::default(),
    }
}

fn toy_base(rng: &mut ChaCha12Rng) -> ([Rotation; 3], [Vector3<f64>; 3]) {
    let rotations = [
        random_rotation(rng, 1.0),
        random_rotation(rng, 1.0),
        random_rotation(rng, 1.0),
    ];
    let positions = [
        random_vec3(rng, 1.0),
        random_vec3(rng, 1.0),
        random_vec3(rng, 1.0),
    ];
    (rotations, positions)
}

/// Toy instance whose feature positions at the three steps are affinely
/// independent (a generic moving feature); observations are consistent.
pub fn toy_instance_moving(rng: &mut ChaCha12Rng) -> ToyInstance {
    let (rotations, positions) = toy_base(rng);
    let features = [
        random_vec3(rng, 1.0),
        random_vec3(rng, 1.0),
        random_vec3(rng, 1.0),
    ];
    let observations =
        std::array::from_fn(|j| rotations[j].matrix() * (features[j] - positions[j]));
    ToyInstance {
        rotations,
        positions,
        features,
        observations,
        delta: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
    }
}

/// Toy instance with a static feature and coefficients summing to 1, so the
/// motion-prior residual vanishes.
pub fn toy_instance_static(rng: &mut ChaCha12Rng) -> ToyInstance {
    let (rotations, positions) = toy_base(rng);
    let f = random_vec3(rng, 1.0);
    let observations = std::array::from_fn(|j| rotations[j].matrix() * (f - positions[j]));
    let d1 = rng.gen_range(-1.0..2.0);
    ToyInstance {
        rotations,
        positions,
        features: [f, f, f],
        observations,
        delta: [d1, 1.0 - d1],
    }
}
