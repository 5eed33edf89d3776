//! Sweep recombination and motion undistortion.
//!
//! Raw LiDAR points stream in continuously; they are re-partitioned into
//! scans whose end timestamp equals a camera frame timestamp, then each point
//! is re-expressed in the LiDAR frame at the scan-end instant by backward
//! propagation through the IMU window.

use crate::geom::{so3_exp, Pose, Rotation};
use crate::state::{ImuSample, NavState};
use nalgebra::Vector3;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SweepError {
    #[error("camera timestamps must be strictly increasing (got {0} after {1})")]
    NonMonotoneCamera(f64, f64),
    #[error("IMU coverage hole of {0:.3} s inside the scan window")]
    ImuGap(f64),
}

/// One raw LiDAR return with its absolute emission time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub t: f64,
    pub position: Vector3<f64>,
    pub intensity: f32,
}

/// Points recombined so that every `t <= t_end` and `t_end` is a camera
/// frame timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct RecombinedScan {
    pub points: Vec<LidarPoint>,
    pub t_end: f64,
}

/// Streaming recombiner. Owns a buffer of pending points; each camera
/// timestamp cuts the buffer at the half-open interval `(prev, t]`.
#[derive(Debug, Default)]
pub struct Recombiner {
    buffer: VecDeque<LidarPoint>,
    last_point_t: Option<f64>,
    last_camera_t: Option<f64>,
    /// Points rejected for going backwards in time.
    pub rejected: usize,
}

impl Recombiner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false (and counts) when the point violates monotonicity.
    pub fn push_point(&mut self, p: LidarPoint) -> bool {
        if let Some(last) = self.last_point_t {
            if p.t < last {
                self.rejected += 1;
                return false;
            }
        }
        self.last_point_t = Some(p.t);
        self.buffer.push_back(p);
        true
    }

    /// Emit the scan ending at `camera_t`. Empty scans are legal.
    pub fn cut(&mut self, camera_t: f64) -> Result<RecombinedScan, SweepError> {
        if let Some(last) = self.last_camera_t {
            if camera_t <= last {
                return Err(SweepError::NonMonotoneCamera(camera_t, last));
            }
        }
        self.last_camera_t = Some(camera_t);
        let mut points = Vec::new();
        while let Some(front) = self.buffer.front() {
            if front.t <= camera_t {
                points.push(self.buffer.pop_front().unwrap());
            } else {
                break;
            }
        }
        Ok(RecombinedScan {
            points,
            t_end: camera_t,
        })
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }
}

/// Pose/velocity node of the backward-propagated trajectory over a scan.
struct MotionNode {
    t: f64,
    rotation: Rotation,
    position: Vector3<f64>,
    velocity: Vector3<f64>,
    /// Rates governing the interval starting at `t`.
    gyro: Vector3<f64>,
    accel: Vector3<f64>,
}

const MAX_IMU_GAP: f64 = 0.02;

/// Undistort a recombined scan to the scan-end instant.
///
/// The IMU pose at each point's emission time is obtained by backward
/// integration from `state_at_end` with piecewise-constant rates between
/// samples; every point is then re-expressed in the LiDAR frame at `t_end`
/// through the extrinsics `t_l_i` (LiDAR-to-IMU).
pub fn undistort(
    scan: &RecombinedScan,
    imu_window: &[ImuSample],
    state_at_end: &NavState,
    t_l_i: &Pose,
) -> Result<RecombinedScan, SweepError> {
    if scan.points.is_empty() {
        return Ok(scan.clone());
    }
    let t_start = scan
        .points
        .iter()
        .map(|p| p.t)
        .fold(f64::INFINITY, f64::min);
    let t_end = scan.t_end;
    if t_end - t_start < 1e-12 {
        let mut out = scan.clone();
        for p in &mut out.points {
            p.t = t_end;
        }
        return Ok(out);
    }

    // Samples relevant to [t_start, t_end]; coverage and gap checks.
    let first_needed = imu_window
        .iter()
        .rev()
        .find(|s| s.t <= t_start)
        .ok_or(SweepError::ImuGap(f64::INFINITY))?;
    let mut prev_t = first_needed.t;
    for s in imu_window {
        if s.t <= prev_t || s.t > t_end {
            continue;
        }
        if s.t - prev_t > MAX_IMU_GAP {
            return Err(SweepError::ImuGap(s.t - prev_t));
        }
        prev_t = s.t;
    }
    if t_end - prev_t > MAX_IMU_GAP {
        return Err(SweepError::ImuGap(t_end - prev_t));
    }

    let bg = state_at_end.bias_gyro;
    let ba = state_at_end.bias_accel;
    let gravity = state_at_end.gravity;

    // Backward integration from the scan end to the scan start.
    let mut nodes: Vec<MotionNode> = Vec::new();
    let mut cur = MotionNode {
        t: t_end,
        rotation: state_at_end.rotation,
        position: state_at_end.position,
        velocity: state_at_end.velocity,
        gyro: Vector3::zeros(),
        accel: Vector3::zeros(),
    };

    let backward_step = |cur: &MotionNode, t_lo: f64, s: &ImuSample| -> MotionNode {
        let dt = cur.t - t_lo;
        let omega = s.gyro - bg;
        let acc_body = s.accel - ba;
        let rot_lo = cur.rotation.compose(&so3_exp(&(-omega * dt)));
        let acc = rot_lo.rotate(&acc_body) + gravity;
        let vel_lo = cur.velocity - acc * dt;
        let pos_lo = cur.position - vel_lo * dt - acc * (0.5 * dt * dt);
        MotionNode {
            t: t_lo,
            rotation: rot_lo,
            position: pos_lo,
            velocity: vel_lo,
            gyro: s.gyro,
            accel: s.accel,
        }
    };

    for s in imu_window
        .iter()
        .rev()
        .filter(|s| s.t < t_end && s.t > t_start)
    {
        let node = backward_step(&cur, s.t, s);
        nodes.push(std::mem::replace(&mut cur, node));
    }
    // Final partial segment down to the scan start.
    let node = backward_step(&cur, t_start, first_needed);
    nodes.push(std::mem::replace(&mut cur, node));
    nodes.push(cur);
    nodes.reverse(); // ascending in time

    let t_i_l = t_l_i.inverse();
    let end_pose_inv = Pose::new(state_at_end.rotation, state_at_end.position).inverse();

    let mut out_points = Vec::with_capacity(scan.points.len());
    for p in &scan.points {
        // Greatest node with node.t <= p.t.
        let idx = match nodes.binary_search_by(|n| n.t.partial_cmp(&p.t).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let node = &nodes[idx];
        let dt = (p.t - node.t).max(0.0);
        let omega = node.gyro - bg;
        let acc = node.rotation.rotate(&(node.accel - ba)) + gravity;
        let rot_pt = node.rotation.compose(&so3_exp(&(omega * dt)));
        let pos_pt = node.position + node.velocity * dt + acc * (0.5 * dt * dt);
        let imu_pose_pt = Pose::new(rot_pt, pos_pt);

        let p_world = imu_pose_pt.transform(&t_l_i.transform(&p.position));
        let p_lidar_end = t_i_l.transform(&end_pose_inv.transform(&p_world));
        out_points.push(LidarPoint {
            t: t_end,
            position: p_lidar_end,
            intensity: p.intensity,
        });
    }

    Ok(RecombinedScan {
        points: out_points,
        t_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(t: f64, x: f64) -> LidarPoint {
        LidarPoint {
            t,
            position: Vector3::new(x, 0.0, 0.0),
            intensity: 0.0,
        }
    }

    #[test]
    fn recombine_even_split() {
        let mut rec = Recombiner::new();
        for k in 1..=10 {
            rec.push_point(pt(0.01 * k as f64, k as f64));
        }
        let a = rec.cut(0.05).unwrap();
        let b = rec.cut(0.10).unwrap();
        assert_eq!(a.points.len(), 5);
        assert_eq!(b.points.len(), 5);
        assert_eq!(a.t_end, 0.05);
        assert!(a.points.iter().all(|p| p.t <= 0.05));
        assert!(b.points.iter().all(|p| p.t > 0.05 && p.t <= 0.10));
    }

    #[test]
    fn recombine_empty_scan() {
        let mut rec = Recombiner::new();
        rec.push_point(pt(0.01, 1.0));
        let a = rec.cut(0.05).unwrap();
        assert_eq!(a.points.len(), 1);
        let b = rec.cut(0.10).unwrap();
        assert_eq!(b.points.len(), 0);
        assert_eq!(b.t_end, 0.10);
    }

    #[test]
    fn recombine_rejects_backwards_points() {
        let mut rec = Recombiner::new();
        assert!(rec.push_point(pt(0.05, 1.0)));
        assert!(!rec.push_point(pt(0.04, 2.0)));
        assert_eq!(rec.rejected, 1);
        assert!(rec.cut(0.05).is_ok());
        assert!(matches!(
            rec.cut(0.05),
            Err(SweepError::NonMonotoneCamera(_, _))
        ));
    }

    /// Conservation and boundary rules against a brute-force re-partition.
    #[test]
    fn recombine_matches_brute_force_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut times: Vec<f64> = (0..100_000).map(|_| rng.random_range(0.0..10.0)).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut camera: Vec<f64> = (0..40).map(|_| rng.random_range(0.5..10.5)).collect();
        camera.sort_by(|a, b| a.partial_cmp(b).unwrap());
        camera.dedup();

        let mut rec = Recombiner::new();
        for (i, &t) in times.iter().enumerate() {
            rec.push_point(pt(t, i as f64));
        }
        let mut emitted = Vec::new();
        for &ct in &camera {
            emitted.push(rec.cut(ct).unwrap());
        }

        // Brute-force oracle over the half-open intervals (prev, ct].
        let mut prev = f64::NEG_INFINITY;
        for (scan, &ct) in emitted.iter().zip(&camera) {
            let expect: Vec<f64> = times
                .iter()
                .copied()
                .filter(|&t| t > prev && t <= ct)
                .collect();
            assert_eq!(scan.points.len(), expect.len());
            for (p, t) in scan.points.iter().zip(&expect) {
                assert_eq!(p.t, *t);
            }
            assert_eq!(scan.t_end, ct);
            prev = ct;
        }
        let consumed: usize = emitted.iter().map(|s| s.points.len()).sum();
        assert_eq!(consumed + rec.pending(), times.len());
    }

    fn stationary_imu(t0: f64, t1: f64, hz: f64) -> Vec<ImuSample> {
        let mut out = Vec::new();
        let dt = 1.0 / hz;
        let mut t = t0;
        while t <= t1 + 1e-9 {
            out.push(ImuSample {
                t,
                gyro: Vector3::zeros(),
                accel: Vector3::new(0.0, 0.0, 9.81),
            });
            t += dt;
        }
        out
    }

    #[test]
    fn undistort_identity_for_zero_motion() {
        let state = NavState::at_rest(9.81);
        let imu = stationary_imu(0.0, 0.2, 200.0);
        let scan = RecombinedScan {
            points: (0..20)
                .map(|k| LidarPoint {
                    t: 0.01 * k as f64 + 0.005,
                    position: Vector3::new(1.0 + k as f64 * 0.1, -2.0, 0.5),
                    intensity: 1.0,
                })
                .collect(),
            t_end: 0.2,
        };
        let out = undistort(&scan, &imu, &state, &Pose::identity()).unwrap();
        for (a, b) in scan.points.iter().zip(&out.points) {
            assert_relative_eq!(a.position, b.position, epsilon = 1e-9);
            assert_eq!(b.t, 0.2);
        }
    }

    #[test]
    fn undistort_constant_velocity_closed_form() {
        let v = Vector3::new(1.0, 0.0, 0.0);
        let mut state = NavState::at_rest(9.81);
        state.velocity = v;
        state.position = Vector3::new(10.0, 0.0, 0.0);
        let imu = stationary_imu(0.0, 0.2, 400.0);
        let scan = RecombinedScan {
            points: vec![LidarPoint {
                t: 0.15,
                position: Vector3::new(3.0, 1.0, 0.0),
                intensity: 0.0,
            }],
            t_end: 0.2,
        };
        let out = undistort(&scan, &imu, &state, &Pose::identity()).unwrap();
        // Sensor moved +0.05 m in x after emission, so the point shifts -0.05.
        assert_relative_eq!(
            out.points[0].position,
            Vector3::new(2.95, 1.0, 0.0),
            epsilon = 1e-9
        );

        // Same check with a nontrivial extrinsic: results must agree after
        // mapping through the lever arm.
        let t_l_i = Pose::new(
            so3_exp(&Vector3::new(0.0, 0.0, 0.3)),
            Vector3::new(0.1, -0.2, 0.05),
        );
        let world_expected = {
            // Ground truth: point emitted at t=0.15 from the lidar pose then,
            // re-expressed in the lidar pose at t_end.
            let imu_pose_at = |t: f64| {
                Pose::new(
                    state.rotation,
                    state.position - v * (0.2 - t),
                )
            };
            let pw = imu_pose_at(0.15)
                .compose(&t_l_i)
                .transform(&Vector3::new(3.0, 1.0, 0.0));
            imu_pose_at(0.2)
                .compose(&t_l_i)
                .inverse()
                .transform(&pw)
        };
        let out = undistort(&scan, &imu, &state, &t_l_i).unwrap();
        assert_relative_eq!(out.points[0].position, world_expected, epsilon = 1e-9);
    }

    #[test]
    fn undistort_detects_imu_gap() {
        let state = NavState::at_rest(9.81);
        let mut imu = stationary_imu(0.0, 0.2, 400.0);
        imu.retain(|s| !(0.05..0.11).contains(&s.t));
        let scan = RecombinedScan {
            points: vec![pt(0.02, 1.0)],
            t_end: 0.2,
        };
        assert!(matches!(
            undistort(&scan, &imu, &state, &Pose::identity()),
            Err(SweepError::ImuGap(_))
        ));
    }

    proptest::proptest! {
        /// Point-count conservation over random streams.
        #[test]
        fn conservation_property(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut times: Vec<f64> = (0..500).map(|_| rng.random_range(0.0f64..5.0)).collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut rec = Recombiner::new();
            for &t in &times {
                rec.push_point(pt(t, 0.0));
            }
            let mut total = 0;
            for k in 1..=10 {
                let scan = rec.cut(0.5 * k as f64 + 0.01).unwrap();
                proptest::prop_assert!(scan.points.iter().all(|p| p.t <= scan.t_end));
                total += scan.points.len();
            }
            proptest::prop_assert_eq!(total + rec.pending() + rec.rejected, times.len());
        }
    }
}
