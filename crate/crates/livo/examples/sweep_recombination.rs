//! Sweep recombination and motion undistortion.
//!
//! Raycasts one LiDAR sweep from a moving platform (each point is cast from
//! the true pose at its emission time), cuts the stream at two camera
//! timestamps mid-sweep, and undistorts the second half-scan to its end
//! instant. Errors are measured against the exact re-projection of the true
//! world hit points into the scan-end LiDAR frame.

use livo::geom::Pose;
use livo::sim::{imu_track, LidarPattern, Rig, TrajectoryKind, TrajectorySpec, WorldModel};
use livo::sweep::{undistort, RecombinedScan, Recombiner};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Max/mean distance between scan points (interpreted at the scan-end pose)
/// and the true world hit points.
fn scan_error(
    scan: &RecombinedScan,
    pose_at: &dyn Fn(f64) -> Pose,
) -> (f64, f64) {
    let at_end = pose_at(scan.t_end);
    let mut max = 0.0f64;
    let mut sum = 0.0f64;
    for p in &scan.points {
        let world = pose_at(p.t).transform(&p.position);
        let err = (at_end.transform(&p.position) - world).norm();
        max = max.max(err);
        sum += err;
    }
    (max, sum / scan.points.len() as f64)
}

fn main() {
    let world = WorldModel::box_room(7);
    let traj = TrajectorySpec::new(
        TrajectoryKind::Lissajous {
            amplitude: Vector3::new(1.0, 2.5, 0.15),
            rates: Vector3::new(0.35, 0.25, 0.45),
            yaw_amplitude: 0.4,
            yaw_rate: 0.3,
        },
        Vector3::new(5.0, 5.0, 0.9),
        10.0,
    );
    let rig = Rig::default();
    let pattern = LidarPattern::default();
    let lidar_pose = |t: f64| traj.pose_at(t).compose(&rig.t_l_i);

    // One full sweep starting mid-trajectory, where the platform is moving.
    let t0 = 5.0;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let points = livo::sim::raycast_lidar(&world, &lidar_pose, &pattern, t0, 0.0, &mut rng);
    println!("sweep at t={t0}: {} returns over {} s", points.len(), pattern.period);

    // Camera frames arrive mid-sweep; the recombiner cuts the point stream
    // at each frame so every scan ends exactly at a camera timestamp.
    let mut recombiner = Recombiner::new();
    for p in points {
        recombiner.push_point(p);
    }
    let first = recombiner.cut(t0 + 0.05).unwrap();
    let second = recombiner.cut(t0 + 0.10).unwrap();
    println!(
        "recombined: {} points ending at t={:.2}, {} points ending at t={:.2}",
        first.points.len(),
        first.t_end,
        second.points.len(),
        second.t_end
    );

    // Undistort the second half-scan: backward-integrate the IMU track from
    // the scan-end state and re-express every point at t_end.
    let track = imu_track(&traj, 9.81);
    let k_end = (second.t_end * traj.imu_hz).round() as usize;
    let window: Vec<_> = track
        .samples
        .iter()
        .filter(|s| s.t >= t0 - 0.01 && s.t <= second.t_end + 0.01)
        .cloned()
        .collect();
    let corrected = undistort(&second, &window, &track.states[k_end], &rig.t_l_i).unwrap();

    let (raw_max, raw_mean) = scan_error(&second, &lidar_pose);
    let (fix_max, fix_mean) = scan_error(&corrected, &lidar_pose);
    println!("distorted   : max error {raw_max:.4} m, mean {raw_mean:.4} m");
    println!("undistorted : max error {fix_max:.2e} m, mean {fix_mean:.2e} m");
}
