//! LiDAR-assisted depth recovery for visual features: a unit-sphere point
//! window around the camera, plane-based depth solving, uniform depth
//! binning, and the depth-sensitivity Jacobians.

use crate::geom::{skew, CameraModel, GeomError};
use crate::lidar_map::IncrementalKdTree;
use crate::plane;
use nalgebra::{Matrix2x3, Vector2, Vector3};
use std::collections::VecDeque;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("feature ray is parallel to the fitted plane")]
    RayParallelToPlane,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Residual threshold accepted when validating depth-association planes.
pub const DEPTH_PLANE_THRESHOLD: f64 = 0.05;
/// Nearest-neighbor angular gate for depth association.
pub const MAX_NEIGHBOR_ANGLE: f64 = 1.0 * std::f64::consts::PI / 180.0;
/// Accepted depth range in meters.
pub const DEPTH_RANGE: (f64, f64) = (0.1, 500.0);

/// Sliding window of camera-frame LiDAR points indexed by their unit-sphere
/// projections. Whole scans are evicted oldest-first once the point capacity
/// is exceeded.
#[derive(Debug, Clone)]
pub struct SphereCloud {
    capacity: usize,
    /// Cosine of the half-angle of the admitted forward cone.
    cos_fov: f64,
    scans: VecDeque<Vec<(Vector3<f64>, Vector3<f64>)>>, // (unit, camera point)
    len: usize,
    index: IncrementalKdTree,
    points: Vec<Vector3<f64>>,
    stale: bool,
}

impl SphereCloud {
    /// `fov_half_angle` bounds the admitted cone around the +z optical axis.
    pub fn new(capacity: usize, fov_half_angle: f64) -> Self {
        Self {
            capacity,
            cos_fov: fov_half_angle.cos(),
            scans: VecDeque::new(),
            len: 0,
            index: IncrementalKdTree::new(0.0),
            points: Vec::new(),
            stale: false,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Insert one scan of camera-frame points, discarding points behind the
    /// camera or outside the field-of-view cone.
    pub fn insert_scan(&mut self, points_camera: &[Vector3<f64>]) {
        let mut scan = Vec::new();
        for p in points_camera {
            let norm = p.norm();
            if norm < 1e-9 {
                continue;
            }
            let unit = p / norm;
            if p.z <= 0.0 || unit.z < self.cos_fov {
                continue;
            }
            scan.push((unit, *p));
        }
        self.len += scan.len();
        self.scans.push_back(scan);
        while self.len > self.capacity && self.scans.len() > 1 {
            if let Some(old) = self.scans.pop_front() {
                self.len -= old.len();
            }
        }
        self.stale = true;
    }

    fn refresh(&mut self) {
        if !self.stale {
            return;
        }
        self.index = IncrementalKdTree::new(0.0);
        self.points = Vec::new();
        for scan in &self.scans {
            for &(unit, p) in scan {
                self.index.insert(unit);
                self.points.push(p);
            }
        }
        self.stale = false;
    }

    /// Camera points whose unit projections are nearest to `bearing`,
    /// ordered by ascending angle, with the angle of the closest one.
    pub fn nearest_camera_points(
        &mut self,
        bearing: &Vector3<f64>,
        k: usize,
    ) -> Vec<(f64, Vector3<f64>)> {
        self.refresh();
        let Ok(neighbors) = self.index.knn(bearing, k) else {
            return Vec::new();
        };
        neighbors
            .iter()
            .map(|n| {
                let cosang = n.point.dot(bearing).clamp(-1.0, 1.0);
                (cosang.acos(), self.points[n.index])
            })
            .collect()
    }
}

/// Visual feature with an optionally recovered metric depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFeature {
    pub pixel: Vector2<f64>,
    /// Unit bearing through the pixel in the camera frame.
    pub bearing: Vector3<f64>,
    pub depth: Option<f64>,
    pub score: f64,
    pub descriptor: Vec<f64>,
    pub track_id: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct DepthBinsConfig {
    pub interval_count: usize,
    /// Static interval width in meters.
    pub interval_width: f64,
    /// Per-frame feature selection target.
    pub target: usize,
    /// Rescale the interval width to observed_max_depth / interval_count.
    pub dynamic_max_depth: bool,
}

impl Default for DepthBinsConfig {
    fn default() -> Self {
        Self {
            interval_count: 10,
            interval_width: 20.0,
            target: 50,
            dynamic_max_depth: false,
        }
    }
}

/// Least-squares plane through `points`, validated against a 0.05 m
/// per-point residual. Returns (unit normal, offset l with n.p + l = 0,
/// valid flag).
pub fn fit_plane_unit_sphere(points: &[Vector3<f64>]) -> (Vector3<f64>, f64, bool) {
    let fitted = plane::fit_plane_offset(points, DEPTH_PLANE_THRESHOLD);
    (fitted.normal, fitted.offset, fitted.valid)
}

/// Depth along `bearing` to the plane with normal `n` through `p_i_c`.
pub fn solve_depth(
    n: &Vector3<f64>,
    p_i_c: &Vector3<f64>,
    bearing: &Vector3<f64>,
) -> Result<f64, DepthError> {
    let denom = bearing.dot(n);
    if denom.abs() <= 1e-6 {
        return Err(DepthError::RayParallelToPlane);
    }
    Ok(p_i_c.dot(n) / denom)
}

/// Recover the depth of a feature bearing from the LiDAR point window, or
/// `None` when no trustworthy plane is available.
pub fn associate_depth(bearing: &Vector3<f64>, cloud: &mut SphereCloud) -> Option<f64> {
    let neighbors = cloud.nearest_camera_points(bearing, 5);
    if neighbors.len() < 5 || neighbors[0].0 > MAX_NEIGHBOR_ANGLE {
        return None;
    }
    let pts: Vec<Vector3<f64>> = neighbors.iter().map(|&(_, p)| p).collect();
    let (n, l, valid) = fit_plane_unit_sphere(&pts);
    if !valid {
        return None;
    }
    let d = solve_depth(&n, &pts[0], bearing).ok()?;
    if d <= DEPTH_RANGE.0 || d >= DEPTH_RANGE.1 {
        return None;
    }
    // Re-substitution guard: the reconstructed point must sit on the plane.
    if (n.dot(&(bearing * d)) + l).abs() > DEPTH_PLANE_THRESHOLD {
        return None;
    }
    Some(d)
}

/// Select up to `cfg.target` depth-carrying features spread uniformly over
/// depth intervals. Within a bin, higher detector score wins, then lower
/// track id.
pub fn bin_depths(features: &[DepthFeature], cfg: &DepthBinsConfig) -> Vec<DepthFeature> {
    let with_depth: Vec<&DepthFeature> =
        features.iter().filter(|f| f.depth.is_some()).collect();
    if with_depth.is_empty() || cfg.interval_count == 0 {
        return Vec::new();
    }
    let width = if cfg.dynamic_max_depth {
        let max_d = with_depth
            .iter()
            .map(|f| f.depth.unwrap())
            .fold(0.0f64, f64::max);
        (max_d / cfg.interval_count as f64).max(1e-9)
    } else {
        cfg.interval_width
    };
    let mut bins: Vec<Vec<&DepthFeature>> = vec![Vec::new(); cfg.interval_count];
    for f in &with_depth {
        let b = ((f.depth.unwrap() / width).floor() as usize).min(cfg.interval_count - 1);
        bins[b].push(f);
    }
    let quota = cfg.target.div_ceil(cfg.interval_count);
    let mut selected = Vec::new();
    for bin in &mut bins {
        bin.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.track_id.cmp(&b.track_id))
        });
        for f in bin.iter().take(quota) {
            if selected.len() >= cfg.target {
                return selected;
            }
            selected.push((**f).clone());
        }
    }
    selected
}

/// Bin index a depth falls into under `cfg` with a given interval width.
pub fn bin_of(depth: f64, width: f64, count: usize) -> usize {
    ((depth / width).floor() as usize).min(count.saturating_sub(1))
}

/// Write `pixel_u pixel_v depth bin` lines for the selected features.
pub fn dump_bins(
    features: &[DepthFeature],
    cfg: &DepthBinsConfig,
    w: &mut impl Write,
) -> io::Result<()> {
    let width = if cfg.dynamic_max_depth {
        let max_d = features
            .iter()
            .filter_map(|f| f.depth)
            .fold(0.0f64, f64::max);
        (max_d / cfg.interval_count.max(1) as f64).max(1e-9)
    } else {
        cfg.interval_width
    };
    for f in features {
        if let Some(d) = f.depth {
            writeln!(
                w,
                "{:.3} {:.3} {:.4} {}",
                f.pixel.x,
                f.pixel.y,
                d,
                bin_of(d, width, cfg.interval_count)
            )?;
        }
    }
    Ok(())
}

/// Jacobians of the reprojected pixel in frame k w.r.t. the relative
/// translation and rotation, for a feature pixel seen in frame j with
/// inverse depth `inv_depth`.
///
/// The translation Jacobian is the projection Jacobian at the predicted
/// camera-k point; the rotation Jacobian is its composition with the
/// negated skew of the rotated landmark. Far points keep rotation leverage
/// while translation sensitivity decays with depth.
pub fn depth_sensitivity(
    pixel_j: &Vector2<f64>,
    inv_depth: f64,
    r_j_k: &crate::geom::Rotation,
    p_j_k: &Vector3<f64>,
    camera: &CameraModel,
) -> Result<(Matrix2x3<f64>, Matrix2x3<f64>), DepthError> {
    let bearing = crate::geom::unproject(camera, pixel_j)?;
    let x_j = bearing / inv_depth;
    let rx = r_j_k.rotate(&x_j);
    let x_k = rx + p_j_k;
    let j_t = crate::geom::projection_jacobian(camera, &x_k)?;
    let j_rot = -j_t * skew(&rx);
    Ok((j_t, j_rot))
}
