//! Synthetic-world oracle: analytic trajectories, planar-patch worlds, and
//! IMU/LiDAR/feature measurement synthesis with configurable noise.
//!
//! The IMU synthesis inverts the filter's discrete propagation exactly, so
//! noiseless samples reconstruct the trajectory to machine precision.

use crate::geom::{so3_exp, so3_log, CameraModel, Pose, Rotation};
use crate::state::{ImuSample, NavState, NoiseParams};
use crate::sweep::LidarPoint;
use crate::vio::{FeatureProvider, FrameInput, SyntheticProvider};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time {0} outside trajectory duration {1}")]
    OutOfRange(f64, f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario: {0}")]
    Scenario(String),
}

/// Finite rectangular planar patch: corner plus two edge vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub corner: Vector3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
}

impl Patch {
    pub fn normal(&self) -> Vector3<f64> {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    pub fn point_at(&self, a: f64, b: f64) -> Vector3<f64> {
        self.corner + self.edge_u * a + self.edge_v * b
    }

    /// Ray-parameter of the intersection with the patch rectangle, if any.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.edge_u.cross(&self.edge_v);
        let denom = dir.dot(&n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.corner - origin).dot(&n) / denom;
        if t <= 1e-9 {
            return None;
        }
        let hit = origin + dir * t - self.corner;
        // Rectangle membership via the (generally non-orthogonal) edge basis.
        let (uu, uv, vv) = (
            self.edge_u.norm_squared(),
            self.edge_u.dot(&self.edge_v),
            self.edge_v.norm_squared(),
        );
        let (hu, hv) = (hit.dot(&self.edge_u), hit.dot(&self.edge_v));
        let det = uu * vv - uv * uv;
        let a = (hu * vv - hv * uv) / det;
        let b = (hv * uu - hu * uv) / det;
        if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
            Some(t)
        } else {
            None
        }
    }
}

/// Point landmark attached to a world patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
    pub patch: usize,
}

/// Planar-patch world with patch-attached landmarks.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub patches: Vec<Patch>,
    pub landmarks: Vec<Landmark>,
}

fn axis_box(min: Vector3<f64>, max: Vector3<f64>) -> Vec<Patch> {
    let d = max - min;
    let ex = Vector3::new(d.x, 0.0, 0.0);
    let ey = Vector3::new(0.0, d.y, 0.0);
    let ez = Vector3::new(0.0, 0.0, d.z);
    vec![
        Patch { corner: min, edge_u: ex, edge_v: ey },                       // floor
        Patch { corner: min + ez, edge_u: ex, edge_v: ey },                  // ceiling
        Patch { corner: min, edge_u: ex, edge_v: ez },                       // y = min
        Patch { corner: min + ey, edge_u: ex, edge_v: ez },                  // y = max
        Patch { corner: min, edge_u: ey, edge_v: ez },                       // x = min
        Patch { corner: min + ex, edge_u: ey, edge_v: ez },                  // x = max
    ]
}

impl WorldModel {
    /// Attach `count` landmarks uniformly over the patch surfaces,
    /// weighting by area, with an inset so landmarks avoid patch borders.
    pub fn scatter_landmarks(&mut self, count: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let areas: Vec<f64> = self
            .patches
            .iter()
            .map(|p| p.edge_u.cross(&p.edge_v).norm())
            .collect();
        let total: f64 = areas.iter().sum();
        self.landmarks.clear();
        for id in 0..count as u64 {
            let mut pick = rng.random_range(0.0..total);
            let mut idx = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            let a = rng.random_range(0.02..0.98);
            let b = rng.random_range(0.02..0.98);
            self.landmarks.push(Landmark {
                id,
                position: self.patches[idx].point_at(a, b),
                patch: idx,
            });
        }
    }

    /// Default world: 10 x 10 x 3 m room with two interior walls and 600
    /// landmarks scattered over all surfaces.
    pub fn box_room(seed: u64) -> Self {
        let mut patches = axis_box(Vector3::zeros(), Vector3::new(10.0, 10.0, 3.0));
        patches.push(Patch {
            corner: Vector3::new(3.5, 0.0, 0.0),
            edge_u: Vector3::new(0.0, 6.0, 0.0),
            edge_v: Vector3::new(0.0, 0.0, 3.0),
        });
        patches.push(Patch {
            corner: Vector3::new(6.5, 4.0, 0.0),
            edge_u: Vector3::new(0.0, 6.0, 0.0),
            edge_v: Vector3::new(0.0, 0.0, 3.0),
        });
        let mut world = Self {
            patches,
            landmarks: Vec::new(),
        };
        world.scatter_landmarks(600, seed);
        world
    }

    /// LiDAR-degenerate preset: a corridor much longer than the LiDAR
    /// range, so point-to-plane registration cannot observe motion along
    /// its axis. Landmarks on the side walls keep the camera constrained.
    pub fn corridor(seed: u64) -> Self {
        let patches = axis_box(Vector3::new(0.0, 0.0, 0.0), Vector3::new(120.0, 3.0, 3.0));
        let mut world = Self {
            patches,
            landmarks: Vec::new(),
        };
        world.scatter_landmarks(900, seed);
        // Dense texture on the side walls so a wall-facing camera always has
        // features to track; patch indices 2 and 3 are y = 0 and y = 3.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
        let base = world.landmarks.len() as u64;
        for i in 0..4000u64 {
            let x = rng.random_range(0.5..119.5);
            let z = rng.random_range(0.2..2.8);
            let (patch, y) = if rng.random_range(0..2) == 0 {
                (2, 0.0)
            } else {
                (3, 3.0)
            };
            world.landmarks.push(Landmark {
                id: base + i,
                position: Vector3::new(x, y, z),
                patch,
            });
        }
        world
    }

    /// Depth-spread preset: a long hall observed from one end, with a dense
    /// near landmark cluster (low ids) and sparse far landmarks (high ids).
    pub fn long_hall(seed: u64) -> Self {
        let patches = axis_box(Vector3::new(0.0, 0.0, 0.0), Vector3::new(90.0, 8.0, 4.0));
        let mut world = Self {
            patches,
            landmarks: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut id = 0u64;
        // Near cluster on the side walls a few meters from the start.
        for _ in 0..300 {
            let x = rng.random_range(4.0..8.0);
            let z = rng.random_range(0.5..3.5);
            let (patch, y) = if rng.random_range(0..2) == 0 {
                (2, 0.0)
            } else {
                (3, 8.0)
            };
            world.landmarks.push(Landmark {
                id,
                position: Vector3::new(x, y, z),
                patch,
            });
            id += 1;
        }
        // Far landmarks spread down the hall and on the far end wall.
        for _ in 0..300 {
            let x = rng.random_range(20.0..89.0);
            let z = rng.random_range(0.5..3.5);
            let (patch, y) = if rng.random_range(0..2) == 0 {
                (2, 0.0)
            } else {
                (3, 8.0)
            };
            world.landmarks.push(Landmark {
                id,
                position: Vector3::new(x, y, z),
                patch,
            });
            id += 1;
        }
        world
    }

    /// True when no patch blocks the segment from `origin` to `target`
    /// (the target's own surface point excluded).
    pub fn segment_clear(&self, origin: &Vector3<f64>, target: &Vector3<f64>) -> bool {
        let dir = target - origin;
        let dist = dir.norm();
        if dist < 1e-9 {
            return true;
        }
        let dir = dir / dist;
        for p in &self.patches {
            if let Some(t) = p.raycast(origin, &dir) {
                if t < dist - 1e-6 {
                    return false;
                }
            }
        }
        true
    }
}

/// Spinning-LiDAR emission pattern.
#[derive(Debug, Clone, Copy)]
pub struct LidarPattern {
    pub rings: usize,
    pub azimuths: usize,
    /// Elevation span in radians (down, up).
    pub elevation: (f64, f64),
    pub max_range: f64,
    /// Sweep (full revolution) period in seconds.
    pub period: f64,
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self {
            rings: 16,
            azimuths: 1024,
            elevation: (-15.0_f64.to_radians(), 15.0_f64.to_radians()),
            max_range: 30.0,
            period: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    Stationary,
    /// Horizontal circle with tangent heading.
    Circle { radius: f64, rate: f64 },
    /// Bounded quasi-periodic figure with oscillating yaw.
    Lissajous {
        amplitude: Vector3<f64>,
        rates: Vector3<f64>,
        yaw_amplitude: f64,
        yaw_rate: f64,
    },
}

/// Analytic trajectory with a stationary warmup and a smooth ramp into
/// motion (the filter initializes from the stationary segment).
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub center: Vector3<f64>,
    pub duration: f64,
    /// Fully stationary lead-in.
    pub warmup: f64,
    /// Smooth time-warp ramp length after the warmup.
    pub ramp: f64,
    pub imu_hz: f64,
    pub cam_hz: f64,
}

impl TrajectorySpec {
    pub fn new(kind: TrajectoryKind, center: Vector3<f64>, duration: f64) -> Self {
        Self {
            kind,
            center,
            duration,
            warmup: 1.2,
            ramp: 1.5,
            imu_hz: 400.0,
            cam_hz: 10.0,
        }
    }

    /// Pose at warped time `u`.
    fn pose_at_warped(&self, u: f64) -> Pose {
        match self.kind {
            TrajectoryKind::Stationary => Pose::new(Rotation::identity(), self.center),
            TrajectoryKind::Circle { radius, rate } => {
                let theta = rate * u;
                let p = self.center
                    + Vector3::new(radius * theta.cos(), radius * theta.sin(), 0.0);
                // Heading along the tangent.
                let yaw = theta + std::f64::consts::FRAC_PI_2;
                Pose::new(so3_exp(&Vector3::new(0.0, 0.0, yaw)), p)
            }
            TrajectoryKind::Lissajous {
                amplitude,
                rates,
                yaw_amplitude,
                yaw_rate,
            } => {
                let p = self.center
                    + Vector3::new(
                        amplitude.x * (rates.x * u).sin(),
                        amplitude.y * (rates.y * u).sin(),
                        amplitude.z * (rates.z * u).sin(),
                    );
                let yaw = yaw_amplitude * (yaw_rate * u).sin();
                Pose::new(so3_exp(&Vector3::new(0.0, 0.0, yaw)), p)
            }
        }
    }

    /// Ground-truth pose at time `t`.
    pub fn pose_at(&self, t: f64) -> Pose {
        self.pose_at_warped(self.warped_time(t))
    }

    /// C2 time warp: 0 during warmup, unit rate after the ramp.
    pub fn warped_time(&self, t: f64) -> f64 {
        let x = t - self.warmup;
        if x <= 0.0 {
            return 0.0;
        }
        if x >= self.ramp {
            // Integral of the quintic smoothstep over the ramp is ramp/2.
            return 0.5 * self.ramp + (x - self.ramp);
        }
        // Integral of 6s^5 - 15s^4 + 10s^3 from 0 to s, scaled by ramp.
        let s = x / self.ramp;
        self.ramp * (s.powi(6) - 3.0 * s.powi(5) + 2.5 * s.powi(4))
    }
}

/// Discrete ground truth at IMU rate: noiseless specific-force/rate samples
/// that exactly invert the filter's Euler propagation, plus the true state
/// after each step.
#[derive(Debug, Clone)]
pub struct ImuTrack {
    /// Sample k applies over [t_k, t_{k+1}).
    pub samples: Vec<ImuSample>,
    /// states[k] is the true state at samples[k].t; one extra entry at the
    /// end of the track.
    pub states: Vec<NavState>,
}

/// Build the exact-inverse IMU track over the full trajectory duration.
///
/// Rates come from the log of the discrete rotation increment; specific
/// forces are chosen so the trapezoid-free Euler step lands each position
/// sample exactly.
pub fn imu_track(traj: &TrajectorySpec, gravity_mag: f64) -> ImuTrack {
    let gravity = Vector3::new(0.0, 0.0, -gravity_mag);
    let dt = 1.0 / traj.imu_hz;
    let n = (traj.duration * traj.imu_hz).round() as usize;
    let mut samples = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n + 1);

    let pose0 = traj.pose_at(0.0);
    let mut state = NavState {
        rotation: pose0.rotation,
        position: pose0.translation,
        velocity: Vector3::zeros(),
        bias_gyro: Vector3::zeros(),
        bias_accel: Vector3::zeros(),
        gravity,
    };
    for k in 0..n {
        let t = k as f64 * dt;
        let next = traj.pose_at(t + dt);
        // Exact inverses of R+ = R Exp(w dt) and p+ = p + v dt + a dt^2/2.
        let omega = so3_log(&state.rotation.inverse().compose(&next.rotation)) / dt;
        let acc_world =
            (next.translation - state.position - state.velocity * dt) * (2.0 / (dt * dt));
        let accel = state.rotation.unrotate(&(acc_world - gravity));
        samples.push(ImuSample {
            t,
            gyro: omega,
            accel,
        });
        states.push(state);
        state = NavState {
            rotation: next.rotation,
            position: next.translation,
            velocity: state.velocity + acc_world * dt,
            ..state
        };
    }
    states.push(state);
    ImuTrack { samples, states }
}

/// One noiseless IMU sample at time `t` (a whole-track computation; prefer
/// `imu_track` when sampling many times).
pub fn sample_imu(
    traj: &TrajectorySpec,
    t: f64,
    noise: &NoiseParams,
    biases: (Vector3<f64>, Vector3<f64>),
    gravity_mag: f64,
    rng: &mut impl Rng,
) -> Result<ImuSample, SimError> {
    if !(0.0..=traj.duration).contains(&t) {
        return Err(SimError::OutOfRange(t, traj.duration));
    }
    let track = imu_track(traj, gravity_mag);
    let dt = 1.0 / traj.imu_hz;
    let k = ((t / dt).round() as usize).min(track.samples.len() - 1);
    let mut s = track.samples[k];
    let sqrt_dt = dt.sqrt();
    if noise.gyro_noise > 0.0 || noise.accel_noise > 0.0 {
        let ng = Normal::new(0.0, noise.gyro_noise / sqrt_dt).unwrap();
        let na = Normal::new(0.0, noise.accel_noise / sqrt_dt).unwrap();
        for i in 0..3 {
            s.gyro[i] += ng.sample(rng);
            s.accel[i] += na.sample(rng);
        }
    }
    s.gyro += biases.0;
    s.accel += biases.1;
    Ok(s)
}

/// Cast the spinning pattern from the LiDAR pose over one sweep starting at
/// `t0`; returns sensor-frame points with per-point timestamps spread
/// across the sweep.
///
/// `lidar_pose_at` maps a timestamp to the LiDAR pose in the world frame.
pub fn raycast_lidar(
    world: &WorldModel,
    lidar_pose_at: &dyn Fn(f64) -> Pose,
    pattern: &LidarPattern,
    t0: f64,
    range_sigma: f64,
    rng: &mut impl Rng,
) -> Vec<LidarPoint> {
    let mut out = Vec::new();
    let normal = Normal::new(0.0, range_sigma.max(1e-300)).unwrap();
    let total = pattern.azimuths * pattern.rings;
    for a in 0..pattern.azimuths {
        let az = 2.0 * std::f64::consts::PI * a as f64 / pattern.azimuths as f64;
        for r in 0..pattern.rings {
            let el = pattern.elevation.0
                + (pattern.elevation.1 - pattern.elevation.0)
                    * (r as f64 + 0.5)
                    / pattern.rings as f64;
            let idx = a * pattern.rings + r;
            let t = t0 + pattern.period * idx as f64 / total as f64;
            let pose = lidar_pose_at(t);
            let dir_sensor =
                Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let dir_world = pose.rotation.rotate(&dir_sensor);
            let mut best = f64::INFINITY;
            for p in &world.patches {
                if let Some(hit) = p.raycast(&pose.translation, &dir_world) {
                    if hit < best {
                        best = hit;
                    }
                }
            }
            if best <= pattern.max_range {
                let range = if range_sigma > 0.0 {
                    (best + normal.sample(rng)).max(0.01)
                } else {
                    best
                };
                out.push(LidarPoint {
                    t,
                    position: dir_sensor * range,
                    intensity: 100.0,
                });
            }
        }
    }
    out
}

/// Exact pixels of every visible (in-frustum, unoccluded) landmark from a
/// camera pose; noise/drop injection is the provider's job.
pub fn sample_features(
    world: &WorldModel,
    camera_pose: &Pose,
    camera: &CameraModel,
    t: f64,
) -> FrameInput {
    let inv = camera_pose.inverse();
    let mut landmarks = Vec::new();
    for lm in &world.landmarks {
        let p_c = inv.transform(&lm.position);
        if p_c.z <= 0.1 {
            continue;
        }
        let Ok(pixel) = crate::geom::project(camera, &p_c) else {
            continue;
        };
        if pixel.x < 0.0
            || pixel.y < 0.0
            || pixel.x >= camera.width as f64
            || pixel.y >= camera.height as f64
        {
            continue;
        }
        if !world.segment_clear(&camera_pose.translation, &lm.position) {
            continue;
        }
        landmarks.push((lm.id, pixel));
    }
    FrameInput { t, landmarks }
}

/// Noise configuration for dataset synthesis.
#[derive(Debug, Clone, Copy)]
pub struct SensorNoiseSpec {
    pub imu: NoiseParams,
    pub imu_bias_gyro: Vector3<f64>,
    pub imu_bias_accel: Vector3<f64>,
    pub lidar_range_sigma: f64,
    pub pixel_sigma: f64,
    pub drop_probability: f64,
    pub mismatch_probability: f64,
    pub seed: u64,
}

impl SensorNoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            imu: NoiseParams::zero(),
            imu_bias_gyro: Vector3::zeros(),
            imu_bias_accel: Vector3::zeros(),
            lidar_range_sigma: 0.0,
            pixel_sigma: 0.0,
            drop_probability: 0.0,
            mismatch_probability: 0.0,
            seed,
        }
    }

    /// Consumer-grade IMU, 2 cm LiDAR ranging, 1.5 px features.
    pub fn nominal(seed: u64) -> Self {
        Self {
            imu: NoiseParams::consumer_grade(),
            imu_bias_gyro: Vector3::new(2e-3, -1e-3, 1.5e-3),
            imu_bias_accel: Vector3::new(2e-2, 1e-2, -1.5e-2),
            lidar_range_sigma: 0.02,
            pixel_sigma: 1.5,
            drop_probability: 0.2,
            mismatch_probability: 0.0,
            seed,
        }
    }
}

/// Everything `generate_dataset` writes, kept in memory for tests that do
/// not need files.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub lidar: Vec<LidarPoint>,
    pub packets: Vec<crate::vio::FeaturePacket>,
    /// (t, pose) ground truth at camera timestamps.
    pub groundtruth: Vec<(f64, Pose)>,
}

/// Sensor rig: extrinsics shared by synthesis and estimation.
#[derive(Debug, Clone)]
pub struct Rig {
    pub t_l_i: Pose,
    pub t_c_i: Pose,
    pub camera: CameraModel,
    pub gravity_mag: f64,
}

impl Default for Rig {
    fn default() -> Self {
        // Camera optical axis along body +x: columns are the camera axes
        // expressed in the body frame.
        let r_c_i = Rotation::from_matrix(&nalgebra::Matrix3::new(
            0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0,
        ));
        Self {
            t_l_i: Pose::new(
                so3_exp(&Vector3::new(0.0, 0.0, 0.01)),
                Vector3::new(0.08, 0.0, 0.06),
            ),
            t_c_i: Pose::new(r_c_i, Vector3::new(0.1, 0.02, 0.0)),
            camera: CameraModel::pinhole(320.0, 320.0, 320.0, 240.0, 640, 480),
            gravity_mag: 9.81,
        }
    }
}

/// Synthesize the full measurement set for a scenario.
pub fn synthesize(
    world: &WorldModel,
    traj: &TrajectorySpec,
    noise: &SensorNoiseSpec,
    pattern: &LidarPattern,
    rig: &Rig,
) -> Dataset {
    let track = imu_track(traj, rig.gravity_mag);
    let dt = 1.0 / traj.imu_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);

    // IMU with noise and constant biases.
    let sqrt_dt = dt.sqrt();
    let ng = Normal::new(0.0, (noise.imu.gyro_noise / sqrt_dt).max(1e-300)).unwrap();
    let na = Normal::new(0.0, (noise.imu.accel_noise / sqrt_dt).max(1e-300)).unwrap();
    let imu: Vec<ImuSample> = track
        .samples
        .iter()
        .map(|s| {
            let mut out = *s;
            if noise.imu.gyro_noise > 0.0 {
                for i in 0..3 {
                    out.gyro[i] += ng.sample(&mut rng);
                }
            }
            if noise.imu.accel_noise > 0.0 {
                for i in 0..3 {
                    out.accel[i] += na.sample(&mut rng);
                }
            }
            out.gyro += noise.imu_bias_gyro;
            out.accel += noise.imu_bias_accel;
            out
        })
        .collect();

    // True pose interpolated at arbitrary t from the discrete track, so
    // every sensor sees the same world-consistent motion.
    let imu_pose_at = |t: f64| -> Pose {
        let k = ((t / dt).floor() as usize).min(track.samples.len() - 1);
        let s = &track.states[k];
        let frac = t - k as f64 * dt;
        let omega = track.samples[k].gyro;
        let acc = s.rotation.rotate(&track.samples[k].accel) + s.gravity;
        Pose::new(
            s.rotation.compose(&so3_exp(&(omega * frac))),
            s.position + s.velocity * frac + acc * (0.5 * frac * frac),
        )
    };

    // LiDAR sweeps.
    let mut lidar = Vec::new();
    let sweeps = (traj.duration / pattern.period).floor() as usize;
    let mut lidar_rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_add(1));
    for s in 0..sweeps {
        let t0 = s as f64 * pattern.period;
        let pose_fn = |t: f64| imu_pose_at(t).compose(&rig.t_l_i);
        lidar.extend(raycast_lidar(
            world,
            &pose_fn,
            pattern,
            t0,
            noise.lidar_range_sigma,
            &mut lidar_rng,
        ));
    }

    // Camera frames: exact projections -> provider noise -> packets.
    let mut provider = SyntheticProvider::new(
        noise.pixel_sigma,
        noise.drop_probability,
        noise.mismatch_probability,
        noise.seed.wrapping_add(2),
    );
    let mut packets = Vec::new();
    let mut groundtruth = Vec::new();
    let frames = (traj.duration * traj.cam_hz).floor() as usize;
    for f in 1..=frames {
        let t = f as f64 / traj.cam_hz;
        let imu_pose = imu_pose_at(t);
        let cam_pose = imu_pose.compose(&rig.t_c_i);
        let frame = sample_features(world, &cam_pose, &rig.camera, t);
        let features = provider
            .detect(&frame)
            .iter()
            .map(|d| crate::vio::PacketFeature {
                track_id: d.descriptor[0] as u64,
                pixel: d.pixel,
                score: d.score,
                descriptor: d.descriptor.clone(),
            })
            .collect();
        packets.push(crate::vio::FeaturePacket { t, features });
        groundtruth.push((t, imu_pose));
    }

    Dataset {
        imu,
        lidar,
        packets,
        groundtruth,
    }
}

/// Write the on-disk dataset layout: `imu.csv`, `lidar.bin`,
/// `features/packets.txt`, `calib.ini`, `groundtruth.tum`.
pub fn generate_dataset(
    world: &WorldModel,
    traj: &TrajectorySpec,
    noise: &SensorNoiseSpec,
    pattern: &LidarPattern,
    rig: &Rig,
    out_dir: &Path,
) -> Result<Dataset, SimError> {
    let data = synthesize(world, traj, noise, pattern, rig);
    fs::create_dir_all(out_dir.join("features"))?;

    let mut imu = BufWriter::new(fs::File::create(out_dir.join("imu.csv"))?);
    writeln!(imu, "t,gx,gy,gz,ax,ay,az")?;
    for s in &data.imu {
        writeln!(
            imu,
            "{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        )?;
    }
    imu.flush()?;

    let mut lidar = BufWriter::new(fs::File::create(out_dir.join("lidar.bin"))?);
    for p in &data.lidar {
        lidar.write_all(&p.t.to_le_bytes())?;
        lidar.write_all(&(p.position.x as f32).to_le_bytes())?;
        lidar.write_all(&(p.position.y as f32).to_le_bytes())?;
        lidar.write_all(&(p.position.z as f32).to_le_bytes())?;
        lidar.write_all(&p.intensity.to_le_bytes())?;
    }
    lidar.flush()?;

    let mut packets = BufWriter::new(fs::File::create(
        out_dir.join("features").join("packets.txt"),
    )?);
    crate::vio::write_packets(&data.packets, &mut packets)?;
    packets.flush()?;

    let mut calib = crate::ini::Ini::default();
    let rot_line = |r: &Rotation| -> String {
        let q = r.quaternion();
        format!("{} {} {} {}", q.i, q.j, q.k, q.w)
    };
    let vec_line =
        |v: &Vector3<f64>| -> String { format!("{} {} {}", v.x, v.y, v.z) };
    calib.set("extrinsics", "lidar_to_imu_rotation_xyzw", &rot_line(&rig.t_l_i.rotation));
    calib.set("extrinsics", "lidar_to_imu_translation", &vec_line(&rig.t_l_i.translation));
    calib.set("extrinsics", "camera_to_imu_rotation_xyzw", &rot_line(&rig.t_c_i.rotation));
    calib.set("extrinsics", "camera_to_imu_translation", &vec_line(&rig.t_c_i.translation));
    calib.set("camera", "model", "pinhole");
    calib.set("camera", "fx", &rig.camera.fx.to_string());
    calib.set("camera", "fy", &rig.camera.fy.to_string());
    calib.set("camera", "cx", &rig.camera.cx.to_string());
    calib.set("camera", "cy", &rig.camera.cy.to_string());
    calib.set("camera", "width", &rig.camera.width.to_string());
    calib.set("camera", "height", &rig.camera.height.to_string());
    calib.set("camera", "distortion", "0 0 0 0");
    calib.set("imu", "gravity", &rig.gravity_mag.to_string());
    calib.set("imu", "gyro_sigma", &noise.imu.gyro_noise.max(2e-3).to_string());
    calib.set("imu", "accel_sigma", &noise.imu.accel_noise.max(2e-2).to_string());
    calib.set("imu", "gyro_walk", &noise.imu.gyro_walk.max(5e-5).to_string());
    calib.set("imu", "accel_walk", &noise.imu.accel_walk.max(5e-4).to_string());
    calib.set("lidar", "range_sigma", &noise.lidar_range_sigma.max(0.005).to_string());
    fs::write(out_dir.join("calib.ini"), calib.to_text())?;

    let mut gt = BufWriter::new(fs::File::create(out_dir.join("groundtruth.tum"))?);
    for (t, pose) in &data.groundtruth {
        let q = pose.rotation.quaternion();
        writeln!(
            gt,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            t,
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
            q.i,
            q.j,
            q.k,
            q.w
        )?;
    }
    gt.flush()?;
    Ok(data)
}

/// Scenario presets addressable from scenario spec files and the CLI.
pub fn preset_world(name: &str, seed: u64) -> Result<WorldModel, SimError> {
    match name {
        "box_room" => Ok(WorldModel::box_room(seed)),
        "corridor" => Ok(WorldModel::corridor(seed)),
        "long_hall" => Ok(WorldModel::long_hall(seed)),
        other => Err(SimError::Scenario(format!("unknown world preset `{other}`"))),
    }
}

/// Parse a scenario spec file (INI sections [world], [trajectory], [noise],
/// [rates]) into a runnable scenario.
pub fn load_scenario(
    text: &str,
    seed: u64,
) -> Result<(WorldModel, TrajectorySpec, SensorNoiseSpec, LidarPattern), SimError> {
    let bad = |e: crate::ini::IniError| SimError::Scenario(e.to_string());
    let ini = crate::ini::Ini::parse(text).map_err(bad)?;
    let num = |s: &str, k: &str, d: f64| ini.f64_or(s, k, d).map_err(bad);

    let world_kind = ini.get("world", "kind").unwrap_or("box_room");
    let world = preset_world(world_kind, seed)?;

    let duration = num("trajectory", "duration", 30.0)?;
    let center_default = match world_kind {
        "corridor" => Vector3::new(20.0, 1.5, 1.5),
        "long_hall" => Vector3::new(6.0, 4.0, 1.7),
        _ => Vector3::new(5.0, 5.0, 1.5),
    };
    let center = match ini.get_f64_list("trajectory", "center").map_err(bad)? {
        Some(v) if v.len() == 3 => Vector3::new(v[0], v[1], v[2]),
        _ => center_default,
    };
    let kind = match ini.get("trajectory", "kind").unwrap_or("lissajous") {
        "stationary" => TrajectoryKind::Stationary,
        "circle" => TrajectoryKind::Circle {
            radius: num("trajectory", "radius", 2.0)?,
            rate: num("trajectory", "rate", 0.5)?,
        },
        "lissajous" => TrajectoryKind::Lissajous {
            amplitude: Vector3::new(
                num("trajectory", "amp_x", 2.0)?,
                num("trajectory", "amp_y", 1.5)?,
                num("trajectory", "amp_z", 0.3)?,
            ),
            rates: Vector3::new(
                num("trajectory", "rate_x", 0.9)?,
                num("trajectory", "rate_y", 0.7)?,
                num("trajectory", "rate_z", 1.1)?,
            ),
            yaw_amplitude: num("trajectory", "yaw_amplitude", 0.5)?,
            yaw_rate: num("trajectory", "yaw_rate", 0.6)?,
        },
        other => {
            return Err(SimError::Scenario(format!(
                "unknown trajectory kind `{other}`"
            )))
        }
    };
    let mut traj = TrajectorySpec::new(kind, center, duration);
    traj.imu_hz = num("rates", "imu_hz", 400.0)?;
    traj.cam_hz = num("rates", "cam_hz", 10.0)?;

    let mut noise = SensorNoiseSpec::noiseless(seed);
    noise.imu.gyro_noise = num("noise", "gyro_sigma", 0.0)?;
    noise.imu.accel_noise = num("noise", "accel_sigma", 0.0)?;
    noise.imu.gyro_walk = num("noise", "gyro_walk", 0.0)?;
    noise.imu.accel_walk = num("noise", "accel_walk", 0.0)?;
    noise.lidar_range_sigma = num("noise", "lidar_sigma", 0.0)?;
    noise.pixel_sigma = num("noise", "pixel_sigma", 0.0)?;
    noise.drop_probability = num("noise", "drop_probability", 0.0)?;
    noise.mismatch_probability = num("noise", "mismatch_probability", 0.0)?;

    let mut pattern = LidarPattern::default();
    pattern.rings = ini.usize_or("rates", "lidar_rings", pattern.rings).map_err(bad)?;
    pattern.azimuths = ini
        .usize_or("rates", "lidar_azimuths", pattern.azimuths)
        .map_err(bad)?;
    pattern.max_range = num("rates", "lidar_max_range", pattern.max_range)?;
    pattern.period = 1.0 / num("rates", "lidar_sweep_hz", 10.0)?;
    Ok((world, traj, noise, pattern))
}
