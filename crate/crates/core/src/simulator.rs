//! Seeded synthetic worlds: a deforming feature cloud observed by a camera
//! orbiting it, with per-run field-of-view and noise levels.
//!
//! All lengths are millimetres. Deformation is a sum of sinusoidal modes
//! whose periods are shared by every feature in a run (amplitudes and phases
//! are per feature), so a single global coefficient vector annihilates all
//! feature histories: the sampled recurrence `(z - 1) prod_k (z^2 -
//! 2 cos(2 pi / T_k) z + 1)` has order `1 + 2 K <= 5` for up to two modes.

use nalgebra::{DVector, Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::lie::Rotation;
use crate::ts_slam::{observe_model, ObservationSet, ShapeMatrix};

/// Organ-motion parameter bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Generic,
    Heart,
    Stomach,
    Lung,
}

impl Preset {
    /// Number of sinusoidal modes.
    pub fn modes(&self) -> usize {
        match self {
            Preset::Heart => 2,
            _ => 1,
        }
    }

    /// Uniform sampling ranges for each mode's period (steps).
    fn period_ranges(&self) -> Vec<(f64, f64)> {
        match self {
            Preset::Generic => vec![(8.0, 14.0)],
            Preset::Heart => vec![(6.0, 10.0), (20.0, 30.0)],
            Preset::Stomach => vec![(25.0, 40.0)],
            Preset::Lung => vec![(15.0, 25.0)],
        }
    }

    /// Baseline deformation amplitude (mm).
    fn base_amplitude(&self) -> f64 {
        match self {
            Preset::Generic => 10.0,
            Preset::Heart => 12.0,
            Preset::Stomach => 8.0,
            Preset::Lung => 15.0,
        }
    }
}

/// Scene and sensing parameters; all randomized quantities are drawn from
/// the per-run RNG, so a `(config, seed)` pair fully determines a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_features: usize,
    pub n_steps: usize,
    pub preset: Preset,
    /// Restrict motion and deformation to the z = 0 plane.
    pub planar: bool,
    /// Steps the camera holds its initial pose (matches the solver window).
    pub hold_steps: usize,
    /// Workspace side length (mm); the feature cloud radius is 8% of it.
    pub workspace_mm: f64,
    /// Camera orbit radius around the cloud center (mm).
    pub orbit_radius_mm: f64,
    /// Total orbit arc swept after the hold (radians).
    pub arc_rad: f64,
    /// Replace the arc by a seeded random walk of the same scale.
    pub random_walk: bool,
    /// Full field-of-view sampling range (degrees).
    pub fov_range_deg: (f64, f64),
    /// Observation noise sigma sampling range (mm).
    pub sigma_range_mm: (f64, f64),
    /// Overrides random sampling of the field of view.
    pub fov_fixed_deg: Option<f64>,
    /// Overrides random sampling of the noise level.
    pub sigma_fixed_mm: Option<f64>,
    /// Overrides the preset's sampled periods.
    pub periods_fixed: Option<Vec<f64>>,
    /// Scales the preset's deformation amplitude (0 gives a static scene).
    pub amplitude_scale: f64,
    /// Spatial coherence of the deformation in [0, 1]: 1 is organ-like bulk
    /// motion (a common displacement direction and phase for the whole
    /// cloud, as under breathing), 0 is independent random per-feature
    /// motion.
    pub coherence: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_features: 20,
            n_steps: 60,
            preset: Preset::Generic,
            planar: true,
            hold_steps: 3,
            workspace_mm: 500.0,
            orbit_radius_mm: 150.0,
            arc_rad: 1.2,
            random_walk: false,
            fov_range_deg: (30.0, 90.0),
            sigma_range_mm: (1.0, 3.0),
            fov_fixed_deg: None,
            sigma_fixed_mm: None,
            periods_fixed: None,
            amplitude_scale: 1.0,
            coherence: 0.85,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_steps == 0 {
            return Err(CoreError::InvalidConfig(
                "n_features and n_steps must be positive".into(),
            ));
        }
        if self.workspace_mm <= 0.0 || self.orbit_radius_mm <= 0.0 {
            return Err(CoreError::InvalidConfig("geometry must be positive".into()));
        }
        if self.fov_range_deg.0 <= 0.0
            || self.fov_range_deg.0 > self.fov_range_deg.1
            || self.fov_range_deg.1 > 360.0
        {
            return Err(CoreError::InvalidConfig("invalid FOV range".into()));
        }
        if self.sigma_range_mm.0 < 0.0 || self.sigma_range_mm.0 > self.sigma_range_mm.1 {
            return Err(CoreError::InvalidConfig("invalid sigma range".into()));
        }
        if self.amplitude_scale < 0.0 {
            return Err(CoreError::InvalidConfig(
                "amplitude_scale must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return Err(CoreError::InvalidConfig(
                "coherence must lie in [0, 1]".into(),
            ));
        }
        if let Some(p) = &self.periods_fixed {
            if p.iter().any(|&t| t <= 2.0) {
                return Err(CoreError::InvalidConfig(
                    "periods must exceed 2 steps".into(),
                ));
            }
        }
        Ok(())
    }

    fn cloud_center(&self) -> Vector3<f64> {
        Vector3::new(self.orbit_radius_mm, 0.0, 0.0)
    }

    fn cloud_radius(&self) -> f64 {
        0.08 * self.workspace_mm
    }
}

/// Sinusoidal deformation field: periods shared across features, one
/// amplitude vector and phase per (feature, mode).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformationSpec {
    pub periods: Vec<f64>,
    /// Static feature positions.
    pub bases: Vec<[f64; 3]>,
    /// `amplitudes[i][k]`: mode-`k` displacement vector of feature `i`.
    pub amplitudes: Vec<Vec<[f64; 3]>>,
    pub phases: Vec<Vec<f64>>,
}

impl DeformationSpec {
    /// Position of feature `i` at step `j`.
    pub fn feature_position(&self, i: usize, j: usize) -> Vector3<f64> {
        let mut p = Vector3::from(self.bases[i]);
        for (k, &period) in self.periods.iter().enumerate() {
            let phase = 2.0 * std::f64::consts::PI * j as f64 / period + self.phases[i][k];
            p += Vector3::from(self.amplitudes[i][k]) * phase.sin();
        }
        p
    }
}

/// Exact annihilating coefficients of the sampled deformation model.
///
/// Returns `c` (oldest coefficient last) of the recurrence `f^e = sum_k
/// c[k-1] f^{e-k}` of order `1 + 2 * periods.len()`, from the polynomial
/// `(z - 1) prod_k (z^2 - 2 cos(2 pi / T_k) z + 1)`.
pub fn recurrence_coefficients(periods: &[f64]) -> DVector<f64> {
    // Monic polynomial coefficients, highest power first.
    let mut poly = vec![1.0, -1.0];
    for &t in periods {
        let c = 2.0 * (2.0 * std::f64::consts::PI / t).cos();
        let factor = [1.0, -c, 1.0];
        let mut next = vec![0.0; poly.len() + 2];
        for (a, &pa) in poly.iter().enumerate() {
            for (b, &fb) in factor.iter().enumerate() {
                next[a + b] += pa * fb;
            }
        }
        poly = next;
    }
    // z^d - sum_k delta_k z^{d-k} = poly  =>  delta_k = -poly[k].
    DVector::from_iterator(poly.len() - 1, poly[1..].iter().map(|&p| -p))
}

/// Ground truth plus noisy observations for one run.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub config: SimConfig,
    pub seed: u64,
    pub spec: DeformationSpec,
    pub rotations: Vec<Rotation>,
    pub positions: Vec<Vector3<f64>>,
    /// True feature positions per step (all entries valid).
    pub features: ShapeMatrix,
    pub observations: ObservationSet,
    /// Sampled full field-of-view (radians).
    pub fov_rad: f64,
    /// Sampled noise level (mm).
    pub sigma_mm: f64,
}

/// Samples the feature cloud and its deformation field.
pub fn generate_environment(config: &SimConfig, rng: &mut ChaCha12Rng) -> DeformationSpec {
    let center = config.cloud_center();
    let radius = config.cloud_radius();
    let periods = match &config.periods_fixed {
        Some(p) => p.clone(),
        None => config
            .preset
            .period_ranges()
            .iter()
            .map(|&(lo, hi)| rng.gen_range(lo..hi))
            .collect(),
    };
    let amp = config.preset.base_amplitude() * config.amplitude_scale;
    // Coherent component: one bulk displacement direction, magnitude factor
    // and phase per mode, shared by the whole cloud.
    let common: Vec<(Vector3<f64>, f64, f64)> = (0..periods.len())
        .map(|_| {
            let mut u = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if config.planar {
                u.z = 0.0;
            }
            if u.norm() < 1e-6 {
                u = Vector3::new(0.0, 1.0, 0.0);
            }
            (
                u.normalize(),
                rng.gen_range(0.7..1.0),
                rng.gen_range(0.0..2.0 * std::f64::consts::PI),
            )
        })
        .collect();
    let mut bases = Vec::new();
    let mut amplitudes = Vec::new();
    let mut phases = Vec::new();
    for _ in 0..config.n_features {
        // Rejection-sample the ball; planar scenes live on the disk z = 0.
        let p = loop {
            let mut v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if config.planar {
                v.z = 0.0;
            }
            if v.norm() <= 1.0 {
                break center + v * radius;
            }
        };
        bases.push(p.into());
        let mut mode_amps = Vec::new();
        let mut mode_phases = Vec::new();
        for (k, &(u, m_common, phase_common)) in common.iter().enumerate() {
            let _ = k;
            let mut random_dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if config.planar {
                random_dir.z = 0.0;
            }
            if random_dir.norm() < 1e-6 {
                random_dir = Vector3::new(1.0, 0.0, 0.0);
            }
            let dir = (config.coherence * u + (1.0 - config.coherence) * random_dir.normalize())
                .normalize();
            let magnitude = amp
                * (config.coherence * m_common
                    + (1.0 - config.coherence) * rng.gen_range(0.5..1.0));
            mode_amps.push((dir * magnitude).into());
            let jitter = (1.0 - config.coherence) * rng.gen_range(-1.0..1.0) * std::f64::consts::PI;
            mode_phases.push(phase_common + jitter);
        }
        amplitudes.push(mode_amps);
        phases.push(mode_phases);
    }
    DeformationSpec {
        periods,
        bases,
        amplitudes,
        phases,
    }
}

/// World-to-camera rotation with the camera's forward axis along `forward`.
fn look_rotation(forward: &Vector3<f64>) -> Rotation {
    let f = forward.normalize();
    let up_hint = if f.z.abs() > 0.99 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    let left = up_hint.cross(&f).normalize();
    let up = f.cross(&left);
    // Rows map world vectors into camera coordinates.
    let m = Matrix3::from_rows(&[f.transpose(), left.transpose(), up.transpose()]);
    Rotation::from_matrix_unchecked(m)
}

/// Camera trajectory: held at the identity/origin for `hold_steps`, then an
/// arc (or seeded random walk) around the cloud center, always looking at it.
pub fn generate_trajectory(
    config: &SimConfig,
    rng: &mut ChaCha12Rng,
) -> (Vec<Rotation>, Vec<Vector3<f64>>) {
    let center = config.cloud_center();
    let r = config.orbit_radius_mm;
    let moving = config.n_steps.saturating_sub(config.hold_steps);
    let mut rotations = Vec::with_capacity(config.n_steps);
    let mut positions = Vec::with_capacity(config.n_steps);
    let mut theta = std::f64::consts::PI;
    for j in 0..config.n_steps {
        if j >= config.hold_steps.max(1) {
            if config.random_walk {
                theta += rng.gen_range(-1.5..1.5) * config.arc_rad / moving.max(1) as f64;
            } else {
                theta += config.arc_rad / moving.max(1) as f64;
            }
        }
        let mut p = center + r * Vector3::new(theta.cos(), theta.sin(), 0.0);
        if !config.planar && j >= config.hold_steps {
            // Gentle out-of-plane bob.
            p.z = 0.05 * r * (0.3 * (j - config.hold_steps) as f64).sin();
        }
        let rot = look_rotation(&(center - p));
        rotations.push(rot);
        positions.push(p);
    }
    (rotations, positions)
}

/// Projects the true features into each camera, applies the FOV cone and
/// adds isotropic Gaussian noise (z-component zeroed in planar scenes).
pub fn observe(
    rotations: &[Rotation],
    positions: &[Vector3<f64>],
    features: &ShapeMatrix,
    fov_rad: f64,
    sigma_mm: f64,
    planar: bool,
    rng: &mut ChaCha12Rng,
) -> ObservationSet {
    let half_cos = (0.5 * fov_rad).cos();
    let n = features.n_features();
    let f = features.n_steps();
    let mut z = vec![vec![None; f]; n];
    for i in 0..n {
        for j in 0..f {
            let ray = features.feature(i, j) - positions[j];
            // Camera forward axis in world coordinates is the first row of R.
            let forward = rotations[j].matrix().row(0).transpose();
            let visible = ray.norm() > 1e-9 && ray.normalize().dot(&forward) >= half_cos;
            // Noise is always drawn so the stream does not depend on
            // visibility thresholds or the sigma value.
            let mut noise = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * sigma_mm;
            if planar {
                noise.z = 0.0;
            }
            if visible {
                let m = observe_model(&rotations[j], &positions[j], &features.feature(i, j));
                z[i][j] = Some(m + noise);
            }
        }
    }
    ObservationSet { z }
}

/// Builds a full dataset; `(config, seed)` determines every byte.
pub fn simulate(config: &SimConfig, seed: u64) -> Result<SimulatedDataset> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let fov_rad = config
        .fov_fixed_deg
        .unwrap_or_else(|| rng.gen_range(config.fov_range_deg.0..=config.fov_range_deg.1))
        .to_radians();
    let sigma_mm = config
        .sigma_fixed_mm
        .unwrap_or_else(|| rng.gen_range(config.sigma_range_mm.0..=config.sigma_range_mm.1));
    let spec = generate_environment(config, &mut rng);
    let (rotations, positions) = generate_trajectory(config, &mut rng);
    let mut features = ShapeMatrix::zeros(config.n_features, config.n_steps);
    for i in 0..config.n_features {
        for j in 0..config.n_steps {
            features.set_feature(i, j, &spec.feature_position(i, j));
            features.valid[i][j] = true;
        }
    }
    let observations = observe(
        &rotations,
        &positions,
        &features,
        fov_rad,
        sigma_mm,
        config.planar,
        &mut rng,
    );
    Ok(SimulatedDataset {
        config: config.clone(),
        seed,
        spec,
        rotations,
        positions,
        features,
        observations,
        fov_rad,
        sigma_mm,
    })
}

/// Per-axis position, heading and feature errors of an estimate against the
/// simulated ground truth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RmseReport {
    pub rmse_x: f64,
    pub rmse_y: f64,
    /// Radians; planar scenes compare wrapped yaw angles, otherwise the
    /// geodesic rotation distance.
    pub rmse_heading: f64,
    /// RMSE over the scalar coordinates of observed feature entries (mm).
    pub feature_rmse: f64,
}

/// Planar heading extracted from a world-to-camera rotation.
pub fn heading(r: &Rotation) -> f64 {
    let m = r.matrix();
    f64::atan2(m[(1, 0)], m[(0, 0)])
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * std::f64::consts::PI);
    if x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    if x < -std::f64::consts::PI {
        x += 2.0 * std::f64::consts::PI;
    }
    x
}

/// Compares estimated poses (and optionally shapes) to the ground truth.
pub fn evaluate_rmse(
    dataset: &SimulatedDataset,
    rotations: &[Rotation],
    positions: &[Vector3<f64>],
    shapes: Option<&ShapeMatrix>,
) -> Result<RmseReport> {
    let f = dataset.config.n_steps;
    if rotations.len() != f || positions.len() != f {
        return Err(CoreError::DimensionMismatch(
            "estimate length does not match dataset".into(),
        ));
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sh = 0.0;
    for j in 0..f {
        let dp = positions[j] - dataset.positions[j];
        sx += dp.x * dp.x;
        sy += dp.y * dp.y;
        if dataset.config.planar {
            let dh = wrap_angle(heading(&rotations[j]) - heading(&dataset.rotations[j]));
            sh += dh * dh;
        } else {
            let rel = rotations[j].ominus(&dataset.rotations[j])?;
            sh += rel.norm_squared();
        }
    }
    let nf = f as f64;
    let feature_rmse = match shapes {
        Some(est) => {
            let mut s = 0.0;
            let mut count = 0usize;
            for i in 0..dataset.config.n_features {
                for j in 0..f {
                    if dataset.observations.get(i, j).is_some() {
                        s += (est.feature(i, j) - dataset.features.feature(i, j)).norm_squared();
                        count += 3;
                    }
                }
            }
            if count == 0 {
                f64::NAN
            } else {
                (s / count as f64).sqrt()
            }
        }
        None => f64::NAN,
    };
    Ok(RmseReport {
        rmse_x: (sx / nf).sqrt(),
        rmse_y: (sy / nf).sqrt(),
        rmse_heading: (sh / nf).sqrt(),
        feature_rmse,
    })
}

/// JSON form of a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub schema_version: u32,
    pub planar: bool,
    pub sigma_mm: f64,
    pub fov_rad: f64,
    pub periods: Vec<f64>,
    pub true_poses: Vec<crate::ts_slam::PoseSchema>,
    /// `true_features[i][j]`.
    pub true_features: Vec<Vec<[f64; 3]>>,
    /// `observations[i][j]`, null where invisible.
    pub observations: Vec<Vec<Option<[f64; 3]>>>,
}

impl SimulatedDataset {
    pub fn to_schema(&self) -> DatasetSchema {
        let true_poses = self
            .rotations
            .iter()
            .zip(&self.positions)
            .map(|(r, p)| {
                let m = r.matrix();
                crate::ts_slam::PoseSchema {
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
        DatasetSchema {
            schema_version: 1,
            true_poses,
            planar: self.config.planar,
            sigma_mm: self.sigma_mm,
            fov_rad: self.fov_rad,
            periods: self.spec.periods.clone(),
            true_features: (0..self.config.n_features)
                .map(|i| {
                    (0..self.config.n_steps)
                        .map(|j| self.features.feature(i, j).into())
                        .collect()
                })
                .collect(),
            observations: self
                .observations
                .z
                .iter()
                .map(|row| row.iter().map(|z| z.map(Into::into)).collect())
                .collect(),
        }
    }
}

impl DatasetSchema {
    /// Rebuilds the observation set (for solving a stored dataset).
    pub fn observation_set(&self) -> ObservationSet {
        ObservationSet {
            z: self
                .observations
                .iter()
                .map(|row| row.iter().map(|z| z.map(Vector3::from)).collect())
                .collect(),
        }
    }
}
