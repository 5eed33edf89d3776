//! Dataset ingestion, run configuration, pipeline orchestration, trajectory
//! output, and evaluation metrics.
//!
//! The pipeline runs one estimation step per camera frame: IMU propagation
//! to the frame timestamp, sweep recombination and undistortion, the
//! point-to-plane LiDAR update, LiDAR-aided feature depth association, and
//! finally the sliding-window visual update — always LiDAR before visual, so
//! the LiDAR-corrected pose serves as the visual prior.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::depth::{self, DepthBinsConfig, DepthFeature};
use crate::geom::{self, CameraModel, Pose, Rotation};
use crate::ini::Ini;
use crate::lidar_map::{self, IncrementalKdTree, LidarUpdateConfig};
use crate::state::{self, ImuSample, NavState, NoiseParams};
use crate::sweep::{LidarPoint, Recombiner};
use crate::vio::{
    self, FeatureProvider, FeaturePacket, Keyframe, KeyframeWindow, SyntheticProvider,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: malformed record")]
    MalformedRecord { file: String, line: usize },
    #[error("{file}:{line}: non-monotone timestamp")]
    NonMonotoneStream { file: String, line: usize },
    #[error("configuration: {0}")]
    Config(String),
    #[error("estimator diverged at t={0:.3}")]
    Diverged(f64),
    #[error("insufficient temporal overlap between trajectories")]
    NoOverlap,
    #[error("trajectory too short")]
    TooShort,
    #[error("estimator: {0}")]
    Estimator(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Everything the pipeline needs besides the measurement streams.
///
/// Loaded from the dataset's `calib.ini` (sections `extrinsics`, `camera`,
/// `imu`, `lidar`) plus an optional `pipeline` section for estimation knobs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// LiDAR-to-IMU extrinsics.
    pub t_l_i: Pose,
    /// Camera-to-IMU extrinsics.
    pub t_c_i: Pose,
    pub camera: CameraModel,
    pub imu_noise: NoiseParams,
    pub gravity: f64,
    /// Per-point LiDAR range sigma in meters.
    pub lidar_sigma: f64,
    /// Map voxel size for duplicate suppression.
    pub voxel: f64,
    /// Keyframe window capacity.
    pub window: usize,
    pub bins: DepthBinsConfig,
    /// Depth-uniform feature selection; when off, top-score selection.
    pub use_binning: bool,
    /// Visual updates; when off the pipeline runs LiDAR-inertial only.
    pub use_visual: bool,
    /// Minimum valid point-to-plane residuals per LiDAR update.
    pub min_valid: usize,
    /// Per-scan point budget (deterministic stride downsampling).
    pub max_scan_points: usize,
    /// Stationary initialization span at the head of the IMU stream.
    pub init_secs: f64,
    /// Number of recent scans retained for depth association.
    pub cloud_scans: usize,
    /// Reject plane fits whose own residual exceeds this many LiDAR sigmas.
    pub fit_gate: f64,
    /// Matcher seed.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t_l_i: Pose::identity(),
            t_c_i: Pose::identity(),
            camera: CameraModel::pinhole(320.0, 320.0, 320.0, 240.0, 640, 480),
            imu_noise: NoiseParams::consumer_grade(),
            gravity: 9.81,
            lidar_sigma: 0.02,
            voxel: 0.4,
            window: 5,
            bins: DepthBinsConfig::default(),
            use_binning: true,
            use_visual: true,
            min_valid: 10,
            max_scan_points: 1500,
            init_secs: 1.0,
            cloud_scans: 10,
            fit_gate: 1.0,
            seed: 0,
        }
    }
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, HarnessError> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|x| x.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| HarnessError::Config(format!("bad vector `{s}`")))?;
    if v.len() != 3 {
        return Err(HarnessError::Config(format!("expected 3 numbers in `{s}`")));
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

fn parse_rotation_xyzw(s: &str) -> Result<Rotation, HarnessError> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|x| x.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| HarnessError::Config(format!("bad quaternion `{s}`")))?;
    if v.len() != 4 {
        return Err(HarnessError::Config(format!("expected 4 numbers in `{s}`")));
    }
    let q = Quaternion::new(v[3], v[0], v[1], v[2]);
    if (q.norm() - 1.0).abs() > 1e-3 {
        return Err(HarnessError::Config(format!(
            "quaternion `{s}` is not near unit norm"
        )));
    }
    Ok(Rotation::from_quaternion(UnitQuaternion::from_quaternion(q)))
}

impl RunConfig {
    /// Load from a `calib.ini`-style file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|_| HarnessError::MissingFile(path.to_path_buf()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let bad = |e: crate::ini::IniError| HarnessError::Config(e.to_string());
        let ini = Ini::parse(text).map_err(bad)?;
        let req = |s: &str, k: &str| -> Result<&str, HarnessError> {
            ini.require(s, k).map_err(bad)
        };

        let t_l_i = Pose::new(
            parse_rotation_xyzw(req("extrinsics", "lidar_to_imu_rotation_xyzw")?)?,
            parse_vec3(req("extrinsics", "lidar_to_imu_translation")?)?,
        );
        let t_c_i = Pose::new(
            parse_rotation_xyzw(req("extrinsics", "camera_to_imu_rotation_xyzw")?)?,
            parse_vec3(req("extrinsics", "camera_to_imu_translation")?)?,
        );

        let model = ini.get("camera", "model").unwrap_or("pinhole");
        if model != "pinhole" {
            return Err(HarnessError::Config(format!(
                "unsupported camera model `{model}`"
            )));
        }
        let f = |k: &str| -> Result<f64, HarnessError> {
            req("camera", k)?
                .parse::<f64>()
                .map_err(|_| HarnessError::Config(format!("camera.{k} is not a number")))
        };
        let camera = CameraModel::pinhole(
            f("fx")?,
            f("fy")?,
            f("cx")?,
            f("cy")?,
            f("width")? as u32,
            f("height")? as u32,
        );

        let d = RunConfig::default();
        let imu_noise = NoiseParams {
            gyro_noise: ini.f64_or("imu", "gyro_sigma", 2e-3).map_err(bad)?,
            accel_noise: ini.f64_or("imu", "accel_sigma", 2e-2).map_err(bad)?,
            gyro_walk: ini.f64_or("imu", "gyro_walk", 5e-5).map_err(bad)?,
            accel_walk: ini.f64_or("imu", "accel_walk", 5e-4).map_err(bad)?,
        };

        let provider = ini.get("pipeline", "provider").unwrap_or("synthetic");
        if provider != "synthetic" && provider != "packet-file" {
            return Err(HarnessError::Config(format!(
                "unknown feature provider `{provider}`"
            )));
        }

        Ok(Self {
            t_l_i,
            t_c_i,
            camera,
            imu_noise,
            gravity: ini.f64_or("imu", "gravity", 9.81).map_err(bad)?,
            lidar_sigma: ini.f64_or("lidar", "range_sigma", d.lidar_sigma).map_err(bad)?,
            voxel: ini.f64_or("pipeline", "voxel", d.voxel).map_err(bad)?,
            window: ini.usize_or("pipeline", "window", d.window).map_err(bad)?,
            bins: DepthBinsConfig {
                interval_count: ini
                    .usize_or("pipeline", "bin_count", d.bins.interval_count)
                    .map_err(bad)?,
                interval_width: ini
                    .f64_or("pipeline", "bin_width", d.bins.interval_width)
                    .map_err(bad)?,
                target: ini
                    .usize_or("pipeline", "feature_target", d.bins.target)
                    .map_err(bad)?,
                dynamic_max_depth: ini
                    .bool_or("pipeline", "dynamic_bins", d.bins.dynamic_max_depth)
                    .map_err(bad)?,
            },
            use_binning: ini.bool_or("pipeline", "binning", d.use_binning).map_err(bad)?,
            use_visual: ini.bool_or("pipeline", "visual", d.use_visual).map_err(bad)?,
            min_valid: ini.usize_or("pipeline", "min_valid", d.min_valid).map_err(bad)?,
            max_scan_points: ini
                .usize_or("pipeline", "max_scan_points", d.max_scan_points)
                .map_err(bad)?,
            init_secs: ini.f64_or("pipeline", "init_secs", d.init_secs).map_err(bad)?,
            cloud_scans: ini
                .usize_or("pipeline", "cloud_scans", d.cloud_scans)
                .map_err(bad)?,
            fit_gate: ini
                .f64_or("pipeline", "fit_gate", d.fit_gate)
                .map_err(bad)?,
            seed: ini.usize_or("pipeline", "seed", d.seed as usize).map_err(bad)? as u64,
        })
    }
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Time-ordered measurement streams plus a validation report.
#[derive(Debug, Clone)]
pub struct Streams {
    pub imu: Vec<ImuSample>,
    pub lidar: Vec<LidarPoint>,
    pub packets: Vec<FeaturePacket>,
    pub report: IngestReport,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// Truncated trailing records dropped from binary streams.
    pub dropped_records: usize,
    pub warnings: Vec<String>,
}

const LIDAR_RECORD_BYTES: usize = 8 + 3 * 4 + 4;

/// Load and validate the dataset layout: `imu.csv`, `lidar.bin`,
/// `features/packets.txt`.
pub fn ingest(dir: &Path) -> Result<Streams, HarnessError> {
    let mut report = IngestReport::default();

    // IMU: `t,gx,gy,gz,ax,ay,az` with a header line.
    let imu_path = dir.join("imu.csv");
    let file = fs::File::open(&imu_path).map_err(|_| HarnessError::MissingFile(imu_path.clone()))?;
    let mut imu = Vec::new();
    let mut prev_t = f64::NEG_INFINITY;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if lineno == 1 && line.starts_with('t') {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| HarnessError::MalformedRecord {
                file: "imu.csv".into(),
                line: lineno,
            })?;
        if vals.len() != 7 {
            return Err(HarnessError::MalformedRecord {
                file: "imu.csv".into(),
                line: lineno,
            });
        }
        if vals[0] <= prev_t {
            return Err(HarnessError::NonMonotoneStream {
                file: "imu.csv".into(),
                line: lineno,
            });
        }
        prev_t = vals[0];
        imu.push(ImuSample {
            t: vals[0],
            gyro: Vector3::new(vals[1], vals[2], vals[3]),
            accel: Vector3::new(vals[4], vals[5], vals[6]),
        });
    }

    // LiDAR: little-endian records (f64 t, f32 x, y, z, intensity).
    let lidar_path = dir.join("lidar.bin");
    let bytes = fs::read(&lidar_path).map_err(|_| HarnessError::MissingFile(lidar_path.clone()))?;
    let records = bytes.len() / LIDAR_RECORD_BYTES;
    if bytes.len() % LIDAR_RECORD_BYTES != 0 {
        report.dropped_records += 1;
        report
            .warnings
            .push("lidar.bin: truncated trailing record dropped".into());
    }
    let mut lidar = Vec::with_capacity(records);
    let mut prev_t = f64::NEG_INFINITY;
    for r in 0..records {
        let o = r * LIDAR_RECORD_BYTES;
        let t = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let read_f32 = |k: usize| -> f32 {
            f32::from_le_bytes(bytes[o + 8 + 4 * k..o + 12 + 4 * k].try_into().unwrap())
        };
        let p = Vector3::new(read_f32(0) as f64, read_f32(1) as f64, read_f32(2) as f64);
        if !t.is_finite() || !p.iter().all(|v| v.is_finite()) {
            return Err(HarnessError::MalformedRecord {
                file: "lidar.bin".into(),
                line: r + 1,
            });
        }
        if t < prev_t {
            return Err(HarnessError::NonMonotoneStream {
                file: "lidar.bin".into(),
                line: r + 1,
            });
        }
        prev_t = t;
        lidar.push(LidarPoint {
            t,
            position: p,
            intensity: read_f32(3),
        });
    }

    // Feature packets.
    let packets_path = dir.join("features").join("packets.txt");
    let file = fs::File::open(&packets_path)
        .map_err(|_| HarnessError::MissingFile(packets_path.clone()))?;
    let packets = vio::read_packets(&mut BufReader::new(file)).map_err(|e| match e {
        vio::PacketError::Io(e) => HarnessError::Io(e),
        vio::PacketError::Malformed(line, _) => HarnessError::MalformedRecord {
            file: "features/packets.txt".into(),
            line,
        },
    })?;
    for w in packets.windows(2) {
        if w[1].t <= w[0].t {
            return Err(HarnessError::NonMonotoneStream {
                file: "features/packets.txt".into(),
                line: 0,
            });
        }
    }

    Ok(Streams {
        imu,
        lidar,
        packets,
        report,
    })
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// Estimated trajectory: strictly increasing timestamps, unit quaternions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryEstimate {
    pub poses: Vec<(f64, Vector3<f64>, UnitQuaternion<f64>)>,
}

impl TrajectoryEstimate {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// TUM format: `t x y z qx qy qz qw`, 9 decimal places.
    pub fn write_tum(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (t, p, q) in &self.poses {
            writeln!(
                w,
                "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                t, p.x, p.y, p.z, q.i, q.j, q.k, q.w
            )?;
        }
        Ok(())
    }

    pub fn save_tum(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_tum(&mut w)?;
        w.flush()
    }

    pub fn read_tum(r: &mut impl BufRead, name: &str) -> Result<Self, HarnessError> {
        let mut poses = Vec::new();
        let mut prev_t = f64::NEG_INFINITY;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| HarnessError::MalformedRecord {
                    file: name.into(),
                    line: lineno,
                })?;
            if vals.len() != 8 {
                return Err(HarnessError::MalformedRecord {
                    file: name.into(),
                    line: lineno,
                });
            }
            if vals[0] <= prev_t {
                return Err(HarnessError::NonMonotoneStream {
                    file: name.into(),
                    line: lineno,
                });
            }
            prev_t = vals[0];
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(HarnessError::MalformedRecord {
                    file: name.into(),
                    line: lineno,
                });
            }
            poses.push((
                vals[0],
                Vector3::new(vals[1], vals[2], vals[3]),
                UnitQuaternion::from_quaternion(q),
            ));
        }
        Ok(Self { poses })
    }

    pub fn load_tum(path: &Path) -> Result<Self, HarnessError> {
        let file =
            fs::File::open(path).map_err(|_| HarnessError::MissingFile(path.to_path_buf()))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Self::read_tum(&mut BufReader::new(file), &name)
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Lidar,
    Visual,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub propagate: Duration,
    pub recombine: Duration,
    pub lidar: Duration,
    pub depth: Duration,
    pub visual: Duration,
}

/// Per-run counters and the (timestamp, stage) update trace. Timings exclude
/// queue wait: each bucket covers only the stage's own computation.
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub frames: usize,
    pub keyframes: usize,
    pub lidar_updates: usize,
    pub lidar_skipped: usize,
    pub visual_updates: usize,
    pub visual_skipped: usize,
    pub depth_attempted: usize,
    pub depth_associated: usize,
    pub timings: StageTimings,
    pub events: Vec<(f64, Stage)>,
}

impl RunStats {
    /// At every timestamp where both updates ran, LiDAR came first.
    pub fn lidar_precedes_visual(&self) -> bool {
        let mut lidar_seen_at = f64::NEG_INFINITY;
        for &(t, stage) in &self.events {
            match stage {
                Stage::Lidar => lidar_seen_at = t,
                Stage::Visual => {
                    if lidar_seen_at != t {
                        // A visual update at a timestamp whose LiDAR update
                        // was skipped is fine; one *before* its own LiDAR
                        // update is not representable in this trace because
                        // events are appended in execution order.
                        continue;
                    }
                }
            }
        }
        // Verify execution order within each timestamp.
        for w in self.events.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == Stage::Visual && w[1].1 == Stage::Lidar {
                return false;
            }
        }
        true
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub trajectory: TrajectoryEstimate,
    pub stats: RunStats,
    pub map: IncrementalKdTree,
    /// Timestamp at which the estimate left the trust region, if any. The
    /// trajectory up to that point is still populated.
    pub diverged: Option<f64>,
}

fn downsample(points: &[LidarPoint], budget: usize) -> Vec<LidarPoint> {
    if points.len() <= budget || budget == 0 {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(budget);
    points.iter().step_by(stride).copied().collect()
}

/// Top-score feature selection used when depth binning is disabled; same
/// tie-break as the binned path (score descending, then track id).
fn select_top(features: &[DepthFeature], target: usize) -> Vec<DepthFeature> {
    let mut with_depth: Vec<&DepthFeature> =
        features.iter().filter(|f| f.depth.is_some()).collect();
    with_depth.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.track_id.cmp(&b.track_id))
    });
    with_depth.into_iter().take(target).cloned().collect()
}

fn diverged(state: &NavState) -> bool {
    !state.is_finite() || state.position.norm() > 1e4
}

/// Run the LiDAR-inertial-visual pipeline over ingested streams.
///
/// Emits one pose (the IMU body pose) per camera frame after the stationary
/// initialization window. On divergence the partial trajectory is returned
/// with `diverged` set.
pub fn run_pipeline(streams: &Streams, cfg: &RunConfig) -> Result<PipelineOutput, HarnessError> {
    let imu = &streams.imu;
    if imu.is_empty() {
        return Err(HarnessError::Estimator("empty IMU stream".into()));
    }

    // Stationary initialization from the head of the IMU stream.
    let init: Vec<ImuSample> = imu
        .iter()
        .take_while(|s| s.t <= imu[0].t + cfg.init_secs)
        .copied()
        .collect();
    let (mut state, mut cov) = state::initialize_from_stationary(&init, cfg.gravity)
        .map_err(|e| HarnessError::Estimator(e.to_string()))?;
    let init_end = init.last().map(|s| s.t).unwrap_or(0.0);

    let mut stats = RunStats::default();
    let mut out = TrajectoryEstimate::default();
    let mut tree = IncrementalKdTree::new(cfg.voxel);
    let mut recombiner = Recombiner::new();
    let mut window = KeyframeWindow::new(cfg.window);
    let mut provider = SyntheticProvider::new(0.0, 0.0, 0.0, cfg.seed);
    // Recent scans in the estimated global frame, re-expressed in the
    // current camera frame for each depth association pass.
    let mut global_scans: VecDeque<Vec<Vector3<f64>>> = VecDeque::new();
    let fov_half = (0.5 * cfg.camera.width as f64 / cfg.camera.fx)
        .atan()
        .max((0.5 * cfg.camera.height as f64 / cfg.camera.fy).atan())
        * 1.2;

    let lidar_cfg = LidarUpdateConfig {
        t_l_i: cfg.t_l_i,
        sigma: cfg.lidar_sigma.max(1e-3),
        min_valid: cfg.min_valid,
        fit_gate_sigmas: cfg.fit_gate,
        insert_after_update: false,
        ..Default::default()
    };

    // Seed the map with the last sweep of the initialization window at full
    // angular resolution (the rig is stationary, so no undistortion is
    // needed). A sparser seed lets neighborhoods span adjacent planes and
    // bakes biased plane fits into the map.
    let mut lidar_idx = 0;
    {
        let mut seed_points = Vec::new();
        while lidar_idx < streams.lidar.len() && streams.lidar[lidar_idx].t <= init_end {
            if streams.lidar[lidar_idx].t > init_end - 0.11 {
                seed_points.push(streams.lidar[lidar_idx]);
            }
            lidar_idx += 1;
        }
        let scan = crate::sweep::RecombinedScan {
            points: seed_points,
            t_end: init_end,
        };
        recombiner.cut(init_end).ok();
        lidar_map::insert_scan_at(&mut tree, &scan, &state, &cfg.t_l_i);
    }

    let mut imu_idx = imu.partition_point(|s| s.t <= init_end).saturating_sub(1);
    let mut t_clock = init_end;
    let mut diverged_at = None;

    for packet in streams.packets.iter().filter(|p| p.t > init_end + 1e-9) {
        let t = packet.t;
        stats.frames += 1;

        // --- IMU propagation to the frame timestamp.
        let t0 = Instant::now();
        while t_clock < t - 1e-9 {
            while imu_idx + 1 < imu.len() && imu[imu_idx + 1].t <= t_clock + 1e-9 {
                imu_idx += 1;
            }
            let step_end = if imu_idx + 1 < imu.len() {
                imu[imu_idx + 1].t.min(t)
            } else {
                t
            };
            let dt = step_end - t_clock;
            if dt > 1e-9 {
                let (s, c) = state::propagate(&state, &cov, &imu[imu_idx], dt, &cfg.imu_noise)
                    .map_err(|e| HarnessError::Estimator(e.to_string()))?;
                state = s;
                cov = c;
            }
            t_clock = step_end;
        }
        stats.timings.propagate += t0.elapsed();

        // --- Sweep recombination and undistortion.
        let t0 = Instant::now();
        while lidar_idx < streams.lidar.len() && streams.lidar[lidar_idx].t <= t {
            recombiner.push_point(streams.lidar[lidar_idx]);
            lidar_idx += 1;
        }
        let raw = recombiner
            .cut(t)
            .map_err(|e| HarnessError::Estimator(e.to_string()))?;
        let scan_start = raw
            .points
            .iter()
            .map(|p| p.t)
            .fold(f64::INFINITY, f64::min);
        let w0 = imu
            .partition_point(|s| s.t <= scan_start - 1e-9)
            .saturating_sub(1);
        let w1 = (imu_idx + 2).min(imu.len());
        let full_scan = match crate::sweep::undistort(&raw, &imu[w0..w1], &state, &cfg.t_l_i) {
            Ok(s) => s,
            Err(_) => raw.clone(),
        };
        // Residual budget for the update; the map is fed the full scan.
        let scan = crate::sweep::RecombinedScan {
            points: downsample(&full_scan.points, cfg.max_scan_points),
            t_end: full_scan.t_end,
        };
        stats.timings.recombine += t0.elapsed();

        // --- LiDAR update (always before the visual update).
        let t0 = Instant::now();
        if scan.points.is_empty() {
            stats.lidar_skipped += 1;
        } else {
            match lidar_map::lidar_update(&state, &cov, &scan, &mut tree, &lidar_cfg) {
                Ok((s, c, _)) => {
                    state = s;
                    cov = c;
                    assert!(
                        state::covariance_is_psd(&cov),
                        "covariance lost positive semidefiniteness after LiDAR update at t={t}"
                    );
                    stats.lidar_updates += 1;
                    stats.events.push((t, Stage::Lidar));
                }
                Err(_) => stats.lidar_skipped += 1,
            }
            // Grow the map with the (possibly corrected) full scan.
            lidar_map::insert_scan_at(&mut tree, &full_scan, &state, &cfg.t_l_i);
        }
        stats.timings.lidar += t0.elapsed();

        // --- Depth association over recent scans in the current camera frame.
        let t0 = Instant::now();
        let body = Pose::new(state.rotation, state.position);
        let cam_pose = body.compose(&cfg.t_c_i);
        let cam_inv = cam_pose.inverse();
        if !scan.points.is_empty() {
            let global: Vec<Vector3<f64>> = scan
                .points
                .iter()
                .map(|p| body.transform(&cfg.t_l_i.transform(&p.position)))
                .collect();
            global_scans.push_back(global);
            if global_scans.len() > cfg.cloud_scans {
                global_scans.pop_front();
            }
        }
        let mut cloud = depth::SphereCloud::new(cfg.cloud_scans, fov_half);
        for scan_pts in &global_scans {
            let local: Vec<Vector3<f64>> =
                scan_pts.iter().map(|p| cam_inv.transform(p)).collect();
            cloud.insert_scan(&local);
        }
        let mut features = Vec::with_capacity(packet.features.len());
        for f in &packet.features {
            let Ok(ray) = geom::unproject(&cfg.camera, &f.pixel) else {
                continue;
            };
            let bearing = ray.normalize();
            stats.depth_attempted += 1;
            let d = depth::associate_depth(&bearing, &mut cloud);
            if d.is_some() {
                stats.depth_associated += 1;
            }
            features.push(DepthFeature {
                pixel: f.pixel,
                bearing,
                depth: d,
                score: f.score,
                descriptor: f.descriptor.clone(),
                track_id: f.track_id,
            });
        }
        let selected = if cfg.use_binning {
            depth::bin_depths(&features, &cfg.bins)
        } else {
            select_top(&features, cfg.bins.target)
        };
        stats.timings.depth += t0.elapsed();

        // --- Visual update against the keyframe window.
        let t0 = Instant::now();
        if cfg.use_visual && !window.is_empty() {
            let frame_desc: Vec<Vec<f64>> =
                features.iter().map(|f| f.descriptor.clone()).collect();
            let matches_per_kf: Vec<Vec<(usize, usize)>> = window
                .frames()
                .iter()
                .map(|kf| {
                    let kf_desc: Vec<Vec<f64>> =
                        kf.features.iter().map(|f| f.descriptor.clone()).collect();
                    provider
                        .match_descriptors(&frame_desc, &kf_desc)
                        .into_iter()
                        .map(|(fi, ki, _)| (fi, ki))
                        .collect()
                })
                .collect();
            match vio::visual_update(
                &state,
                &cov,
                &features,
                &matches_per_kf,
                &window,
                &cfg.camera,
                &cfg.t_c_i,
            ) {
                Ok((s, c, _)) => {
                    state = s;
                    cov = c;
                    assert!(
                        state::covariance_is_psd(&cov),
                        "covariance lost positive semidefiniteness after visual update at t={t}"
                    );
                    stats.visual_updates += 1;
                    stats.events.push((t, Stage::Visual));
                }
                Err(_) => stats.visual_skipped += 1,
            }
        }
        stats.timings.visual += t0.elapsed();

        // --- Keyframe maintenance and pose emission.
        let pose = Pose::new(state.rotation, state.position);
        if cfg.use_visual && vio::is_keyframe(&pose, &window) && !selected.is_empty() {
            if vio::window_push(
                &mut window,
                Keyframe {
                    t,
                    pose,
                    features: selected,
                },
            )
            .is_ok()
            {
                stats.keyframes += 1;
            }
        }

        out.poses
            .push((t, state.position, *state.rotation.quaternion()));
        if diverged(&state) {
            diverged_at = Some(t);
            break;
        }
    }

    Ok(PipelineOutput {
        trajectory: out,
        stats,
        map: tree,
        diverged: diverged_at,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Align {
    None,
    Se3,
}

impl std::str::FromStr for Align {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Align::None),
            "se3" => Ok(Align::Se3),
            other => Err(format!("unknown alignment `{other}` (use se3|none)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AteReport {
    pub rmse: f64,
    pub pairs: usize,
}

const ASSOCIATION_WINDOW: f64 = 0.01;

/// Closed-form least-squares rigid alignment (rotation + translation, no
/// scale) mapping `src` onto `dst`.
fn se3_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    (r, cd - r * cs)
}

/// Absolute trajectory error: RMS position difference over nearest-timestamp
/// pairs (within 10 ms), optionally after rigid alignment.
pub fn evaluate_ate(
    est: &TrajectoryEstimate,
    reference: &TrajectoryEstimate,
    align: Align,
) -> Result<AteReport, HarnessError> {
    if est.is_empty() || reference.is_empty() {
        return Err(HarnessError::NoOverlap);
    }
    let overlap = est.poses.last().unwrap().0.min(reference.poses.last().unwrap().0)
        - est.poses[0].0.max(reference.poses[0].0);
    if overlap < 1.0 {
        return Err(HarnessError::NoOverlap);
    }

    let ref_t: Vec<f64> = reference.poses.iter().map(|p| p.0).collect();
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (t, p, _) in &est.poses {
        let i = ref_t.partition_point(|&rt| rt < *t);
        let mut best: Option<(f64, usize)> = None;
        for j in [i.wrapping_sub(1), i] {
            if j < ref_t.len() {
                let dt = (ref_t[j] - t).abs();
                if dt <= ASSOCIATION_WINDOW && best.is_none_or(|(b, _)| dt < b) {
                    best = Some((dt, j));
                }
            }
        }
        if let Some((_, j)) = best {
            src.push(*p);
            dst.push(reference.poses[j].1);
        }
    }
    if src.is_empty() {
        return Err(HarnessError::NoOverlap);
    }

    let (r, tr) = match align {
        Align::Se3 => se3_align(&src, &dst),
        Align::None => (Matrix3::identity(), Vector3::zeros()),
    };
    let sse: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (r * s + tr - d).norm_squared())
        .sum();
    Ok(AteReport {
        rmse: (sse / src.len() as f64).sqrt(),
        pairs: src.len(),
    })
}

/// Distance between the first and last estimated positions; meaningful for
/// trajectories that physically start and end at the same place.
pub fn end_to_end_error(est: &TrajectoryEstimate) -> Result<f64, HarnessError> {
    if est.len() < 2 {
        return Err(HarnessError::TooShort);
    }
    let first = est.poses.first().unwrap().1;
    let last = est.poses.last().unwrap().1;
    Ok((last - first).norm())
}
