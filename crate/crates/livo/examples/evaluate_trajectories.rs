//! Trajectory file I/O and error metrics.
//!
//! Builds a reference trajectory, derives an "estimate" from it by adding
//! noise and a rigid offset, round-trips both through TUM files
//! (`t x y z qx qy qz qw`), and compares the raw and rigid-aligned absolute
//! trajectory errors. Alignment should absorb the offset and leave only
//! the noise.

use livo::harness::{end_to_end_error, evaluate_ate, Align, TrajectoryEstimate};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    // Reference: a closed circle sampled at 10 Hz.
    let mut reference = TrajectoryEstimate::default();
    for k in 0..=600 {
        let t = k as f64 * 0.1;
        let a = 2.0 * std::f64::consts::PI * t / 60.0;
        reference.poses.push((
            t,
            Vector3::new(3.0 * a.cos(), 3.0 * a.sin(), 1.0),
            UnitQuaternion::from_euler_angles(0.0, 0.0, a),
        ));
    }

    // Estimate: same path expressed in a rotated/shifted frame, plus 2 cm
    // position noise.
    let offset_rot = UnitQuaternion::from_euler_angles(0.0, 0.0, 0.4);
    let offset_t = Vector3::new(10.0, -5.0, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut estimate = TrajectoryEstimate::default();
    for (t, p, q) in &reference.poses {
        let jitter = Vector3::new(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        );
        estimate
            .poses
            .push((*t, offset_rot * p + offset_t + jitter, offset_rot * q));
    }

    // Round-trip both through TUM files.
    let dir = std::env::temp_dir().join("livo_evaluate_trajectories_example");
    std::fs::create_dir_all(&dir).unwrap();
    reference.save_tum(&dir.join("reference.tum")).unwrap();
    estimate.save_tum(&dir.join("estimate.tum")).unwrap();
    let reference = TrajectoryEstimate::load_tum(&dir.join("reference.tum")).unwrap();
    let estimate = TrajectoryEstimate::load_tum(&dir.join("estimate.tum")).unwrap();
    println!("round-tripped {} poses through {}", estimate.len(), dir.display());

    let raw = evaluate_ate(&estimate, &reference, Align::None).unwrap();
    let aligned = evaluate_ate(&estimate, &reference, Align::Se3).unwrap();
    println!("ATE without alignment : {:.4} m over {} pairs", raw.rmse, raw.pairs);
    println!("ATE rigid-aligned     : {:.4} m over {} pairs", aligned.rmse, aligned.pairs);
    println!(
        "loop closure gap (first vs last position): {:.4} m",
        end_to_end_error(&estimate).unwrap()
    );
}
