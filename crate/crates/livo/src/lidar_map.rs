//! Incremental spatial index over the global point map, local plane
//! extraction, and the point-to-plane LiDAR measurement update.

use crate::geom::{skew, Pose};
use crate::plane::{self, FittedPlane};
use crate::state::{
    self, Covariance18, NavState, Residuals, StateError, UpdateStats, ERROR_DIM,
};
use crate::sweep::RecombinedScan;
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use std::collections::HashSet;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LidarError {
    #[error("nearest-neighbor query on an empty map")]
    EmptyMap,
    #[error("residual requested against an invalid plane")]
    InvalidPlane,
    #[error("scan produced only {0} valid residuals (< {1}); update skipped")]
    DegenerateScan(usize, usize),
    #[error(transparent)]
    Update(#[from] StateError),
}

const NONE: i32 = -1;
/// A subtree is rebuilt when one child holds more than this share of it.
const REBALANCE_RATIO: f64 = 0.7;
const REBALANCE_MIN_SIZE: u32 = 16;

#[derive(Debug, Clone, Copy)]
struct Node {
    left: i32,
    right: i32,
    axis: u8,
    size: u32,
}

/// Exact k-nearest-neighbor index with per-voxel downsampling on insert and
/// partial rebuilds when a subtree becomes lopsided.
#[derive(Debug, Clone)]
pub struct IncrementalKdTree {
    points: Vec<Vector3<f64>>,
    intensities: Vec<f32>,
    nodes: Vec<Node>,
    root: i32,
    voxel: f64,
    occupied: HashSet<(i64, i64, i64)>,
}

/// One k-nearest-neighbor result, ordered by ascending distance with ties
/// broken by insertion order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub point: Vector3<f64>,
    pub distance: f64,
}

impl IncrementalKdTree {
    /// `voxel <= 0` disables downsampling.
    pub fn new(voxel: f64) -> Self {
        Self {
            points: Vec::new(),
            intensities: Vec::new(),
            nodes: Vec::new(),
            root: NONE,
            voxel,
            occupied: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> Vector3<f64> {
        self.points[index]
    }

    fn voxel_cell(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            (p.x / self.voxel).floor() as i64,
            (p.y / self.voxel).floor() as i64,
            (p.z / self.voxel).floor() as i64,
        )
    }

    /// Insert one point; returns false when its voxel is already occupied.
    pub fn insert(&mut self, p: Vector3<f64>) -> bool {
        self.insert_with_intensity(p, 0.0)
    }

    pub fn insert_with_intensity(&mut self, p: Vector3<f64>, intensity: f32) -> bool {
        if self.voxel > 0.0 {
            let cell = self.voxel_cell(&p);
            if !self.occupied.insert(cell) {
                return false;
            }
        }
        let idx = self.points.len() as i32;
        self.points.push(p);
        self.intensities.push(intensity);
        self.nodes.push(Node {
            left: NONE,
            right: NONE,
            axis: 0,
            size: 1,
        });

        if self.root == NONE {
            self.root = idx;
            return true;
        }

        // Walk down, remembering the path for size updates and rebalancing.
        let mut path = Vec::new();
        let mut cur = self.root;
        let mut depth = 0usize;
        loop {
            path.push(cur);
            let axis = self.nodes[cur as usize].axis as usize;
            let go_left = p[axis] < self.points[cur as usize][axis];
            let next = if go_left {
                self.nodes[cur as usize].left
            } else {
                self.nodes[cur as usize].right
            };
            if next == NONE {
                self.nodes[idx as usize].axis = ((depth + 1) % 3) as u8;
                if go_left {
                    self.nodes[cur as usize].left = idx;
                } else {
                    self.nodes[cur as usize].right = idx;
                }
                break;
            }
            cur = next;
            depth += 1;
        }
        for &n in &path {
            self.nodes[n as usize].size += 1;
        }

        // Rebuild the highest unbalanced subtree on the path, if any.
        for (i, &n) in path.iter().enumerate() {
            let node = self.nodes[n as usize];
            if node.size < REBALANCE_MIN_SIZE {
                continue;
            }
            let ls = self.subtree_size(node.left);
            let rs = self.subtree_size(node.right);
            if (ls.max(rs) as f64) / (node.size as f64) > REBALANCE_RATIO {
                let parent = if i == 0 { NONE } else { path[i - 1] };
                self.rebuild_subtree(n, parent);
                break;
            }
        }
        true
    }

    fn subtree_size(&self, n: i32) -> u32 {
        if n == NONE {
            0
        } else {
            self.nodes[n as usize].size
        }
    }

    fn collect_indices(&self, n: i32, out: &mut Vec<i32>) {
        if n == NONE {
            return;
        }
        out.push(n);
        self.collect_indices(self.nodes[n as usize].left, out);
        self.collect_indices(self.nodes[n as usize].right, out);
    }

    fn rebuild_subtree(&mut self, n: i32, parent: i32) {
        let mut indices = Vec::with_capacity(self.subtree_size(n) as usize);
        self.collect_indices(n, &mut indices);
        let depth = 0;
        let new_root = self.build_balanced(&mut indices, depth);
        if parent == NONE {
            self.root = new_root;
        } else {
            let pn = &mut self.nodes[parent as usize];
            if pn.left == n {
                pn.left = new_root;
            } else {
                pn.right = new_root;
            }
        }
    }

    fn build_balanced(&mut self, indices: &mut [i32], depth: usize) -> i32 {
        if indices.is_empty() {
            return NONE;
        }
        let axis = depth % 3;
        indices.sort_by(|&a, &b| {
            self.points[a as usize][axis]
                .partial_cmp(&self.points[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mid = indices.len() / 2;
        let root = indices[mid];
        let (left_slice, rest) = indices.split_at_mut(mid);
        let right_slice = &mut rest[1..];
        let left = self.build_balanced(left_slice, depth + 1);
        let right = self.build_balanced(right_slice, depth + 1);
        let size = 1 + self.subtree_size(left) + self.subtree_size(right);
        self.nodes[root as usize] = Node {
            left,
            right,
            axis: axis as u8,
            size,
        };
        root
    }

    /// Exact k nearest neighbors of `q`, ties broken by insertion order.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Result<Vec<Neighbor>, LidarError> {
        if self.is_empty() {
            return Err(LidarError::EmptyMap);
        }
        let k = k.max(1);
        // Max-heap keyed on (distance^2, insertion index): the worst
        // candidate sits on top.
        let mut heap: Vec<(f64, i32)> = Vec::with_capacity(k + 1);
        self.knn_rec(self.root, q, k, &mut heap);
        let mut out: Vec<Neighbor> = heap
            .iter()
            .map(|&(d2, idx)| Neighbor {
                index: idx as usize,
                point: self.points[idx as usize],
                distance: d2.sqrt(),
            })
            .collect();
        out.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .unwrap()
                .then(a.index.cmp(&b.index))
        });
        Ok(out)
    }

    fn heap_push(heap: &mut Vec<(f64, i32)>, k: usize, item: (f64, i32)) {
        heap.push(item);
        heap.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        if heap.len() > k {
            heap.pop();
        }
    }

    fn knn_rec(&self, n: i32, q: &Vector3<f64>, k: usize, heap: &mut Vec<(f64, i32)>) {
        if n == NONE {
            return;
        }
        let node = self.nodes[n as usize];
        let p = self.points[n as usize];
        let d2 = (p - q).norm_squared();
        let admit = heap.len() < k || {
            let &(wd, wi) = heap.last().unwrap();
            d2 < wd || (d2 == wd && n < wi)
        };
        if admit {
            Self::heap_push(heap, k, (d2, n));
        }
        let axis = node.axis as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.knn_rec(near, q, k, heap);
        let worst = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.last().unwrap().0
        };
        if diff * diff <= worst {
            self.knn_rec(far, q, k, heap);
        }
    }

    /// Little-endian float32 records: x, y, z, intensity.
    pub fn write_binary(&self, w: &mut impl Write) -> io::Result<()> {
        for (p, &i) in self.points.iter().zip(&self.intensities) {
            for v in [p.x as f32, p.y as f32, p.z as f32, i] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// ASCII lines: `x y z intensity`.
    pub fn write_ascii(&self, w: &mut impl Write) -> io::Result<()> {
        for (p, &i) in self.points.iter().zip(&self.intensities) {
            writeln!(w, "{:.6} {:.6} {:.6} {:.4}", p.x, p.y, p.z, i)?;
        }
        Ok(())
    }
}

/// Local plane fitted to the k nearest map points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPlane {
    pub normal: Vector3<f64>,
    pub centroid: Vector3<f64>,
    pub valid: bool,
}

/// Residual threshold accepted for map planes.
pub const MAP_PLANE_THRESHOLD: f64 = 0.1;

/// Fit a plane to the five neighbors of a query point.
pub fn fit_plane_global(neighbors: &[Vector3<f64>]) -> LocalPlane {
    let centroid = neighbors.iter().sum::<Vector3<f64>>() / neighbors.len().max(1) as f64;
    let fitted: FittedPlane = plane::fit_plane_offset(neighbors, MAP_PLANE_THRESHOLD);
    LocalPlane {
        normal: fitted.normal,
        centroid,
        valid: fitted.valid,
    }
}

/// Point-to-plane residual and its Jacobian w.r.t. the error state.
///
/// `r = n . (R (R_li p + t_li) + t - p_c)`; only the attitude and position
/// blocks of H are nonzero.
pub fn lidar_residual(
    state: &NavState,
    t_l_i: &Pose,
    p_lidar: &Vector3<f64>,
    plane: &LocalPlane,
) -> Result<(f64, SMatrix<f64, 1, ERROR_DIM>), LidarError> {
    if !plane.valid {
        return Err(LidarError::InvalidPlane);
    }
    let q = t_l_i.transform(p_lidar); // IMU frame
    let p_global = state.rotation.rotate(&q) + state.position;
    let r = plane.normal.dot(&(p_global - plane.centroid));

    let mut h = SMatrix::<f64, 1, ERROR_DIM>::zeros();
    let rot = state.rotation.matrix();
    let h_theta = -(plane.normal.transpose() * rot * skew(&q));
    h.fixed_view_mut::<1, 3>(0, state::block::THETA)
        .copy_from(&h_theta);
    h.fixed_view_mut::<1, 3>(0, state::block::POS)
        .copy_from(&plane.normal.transpose());
    Ok((r, h))
}

#[derive(Debug, Clone, Copy)]
pub struct LidarUpdateConfig {
    /// LiDAR-to-IMU extrinsics.
    pub t_l_i: Pose,
    /// Per-residual measurement sigma in meters.
    pub sigma: f64,
    /// Minimum valid residuals to attempt an update.
    pub min_valid: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Insert the scan into the map after the update converges.
    pub insert_after_update: bool,
    /// Reject planes whose own fit residual exceeds this many sigmas; such
    /// neighborhoods straddle surface junctions and bias the constraint.
    pub fit_gate_sigmas: f64,
    /// Huber threshold in sigmas: rows beyond it get their variance
    /// inflated by |r|/(k sigma), limiting the pull of junction outliers
    /// while keeping every row's direction for recovery.
    pub huber_sigmas: f64,
}

impl Default for LidarUpdateConfig {
    fn default() -> Self {
        Self {
            t_l_i: Pose::identity(),
            sigma: 0.02,
            min_valid: 10,
            max_iter: 5,
            tol: 1e-6,
            insert_after_update: true,
            fit_gate_sigmas: f64::INFINITY,
            huber_sigmas: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LidarUpdateStats {
    pub valid: usize,
    pub invalid: usize,
    /// False when the valid plane normals span less than three directions
    /// (smallest-to-largest eigenvalue ratio of the normal scatter < 1e-2).
    pub diverse: bool,
    pub update: UpdateStats,
    pub inserted: usize,
}

fn build_residuals(
    state: &NavState,
    scan: &RecombinedScan,
    tree: &IncrementalKdTree,
    cfg: &LidarUpdateConfig,
) -> (Residuals, LidarUpdateStats) {
    let mut rows = Vec::new();
    let mut hs = Vec::new();
    let mut stats = LidarUpdateStats::default();
    let mut scatter = Matrix3::zeros();
    for p in &scan.points {
        let q = cfg.t_l_i.transform(&p.position);
        let p_global = state.rotation.rotate(&q) + state.position;
        let neighbors = match tree.knn(&p_global, 5) {
            Ok(n) if n.len() == 5 => n,
            _ => {
                stats.invalid += 1;
                continue;
            }
        };
        let pts: Vec<Vector3<f64>> = neighbors.iter().map(|n| n.point).collect();
        let plane = fit_plane_global(&pts);
        if !plane.valid {
            stats.invalid += 1;
            continue;
        }
        let fit_gate = (cfg.fit_gate_sigmas * cfg.sigma).min(MAP_PLANE_THRESHOLD);
        if pts
            .iter()
            .any(|pt| plane.normal.dot(&(pt - plane.centroid)).abs() > fit_gate)
        {
            stats.invalid += 1;
            continue;
        }
        match lidar_residual(state, &cfg.t_l_i, &p.position, &plane) {
            Ok((r, h)) => {
                rows.push(r);
                hs.push(h);
                scatter += plane.normal * plane.normal.transpose();
                stats.valid += 1;
            }
            Err(_) => stats.invalid += 1,
        }
    }
    let eig = scatter.symmetric_eigenvalues();
    let (mut emin, mut emax) = (f64::INFINITY, 0.0f64);
    for &e in eig.iter() {
        emin = emin.min(e);
        emax = emax.max(e);
    }
    stats.diverse = emax > 0.0 && emin / emax >= 1e-2;

    let m = rows.len();
    let mut h = DMatrix::<f64>::zeros(m, ERROR_DIM);
    for (i, hr) in hs.iter().enumerate() {
        for j in 0..ERROR_DIM {
            h[(i, j)] = hr[(0, j)];
        }
    }
    (
        Residuals {
            h,
            noise_var: DVector::from_fn(m, |i, _| {
                let base = cfg.sigma * cfg.sigma;
                let k = cfg.huber_sigmas * cfg.sigma;
                let a = rows[i].abs();
                if a > k {
                    base * (a / k)
                } else {
                    base
                }
            }),
            r: DVector::from_vec(rows),
        },
        stats,
    )
}

/// Iterated point-to-plane update, followed by map insertion of the scan.
///
/// The scan must already be undistorted to its end timestamp. Neighbor
/// association is redone at every filter iterate.
pub fn lidar_update(
    state: &NavState,
    cov: &Covariance18,
    scan: &RecombinedScan,
    tree: &mut IncrementalKdTree,
    cfg: &LidarUpdateConfig,
) -> Result<(NavState, Covariance18, LidarUpdateStats), LidarError> {
    let (probe, mut stats) = build_residuals(state, scan, tree, cfg);
    if probe.rows() < cfg.min_valid {
        return Err(LidarError::DegenerateScan(probe.rows(), cfg.min_valid));
    }

    let (post, post_cov, update_stats) = state::iterated_update(
        state,
        cov,
        |x| build_residuals(x, scan, tree, cfg).0,
        cfg.max_iter,
        cfg.tol,
    )?;
    stats.update = update_stats;

    if cfg.insert_after_update {
        for p in &scan.points {
            let q = cfg.t_l_i.transform(&p.position);
            let p_global = post.rotation.rotate(&q) + post.position;
            if tree.insert_with_intensity(p_global, p.intensity) {
                stats.inserted += 1;
            }
        }
    }
    Ok((post, post_cov, stats))
}

/// Seed the map from a scan at a known pose, bypassing the update.
pub fn insert_scan_at(
    tree: &mut IncrementalKdTree,
    scan: &RecombinedScan,
    state: &NavState,
    t_l_i: &Pose,
) -> usize {
    let mut inserted = 0;
    for p in &scan.points {
        let q = t_l_i.transform(&p.position);
        let p_global = state.rotation.rotate(&q) + state.position;
        if tree.insert_with_intensity(p_global, p.intensity) {
            inserted += 1;
        }
    }
    inserted
}
