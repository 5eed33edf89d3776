//! Strapdown IMU propagation round trip: sample exact inverse-dynamics IMU
//! data from an analytic trajectory, propagate the error-state filter
//! through it, and report the reconstruction error against the analytic
//! ground truth.

use livo::sim::{imu_track, TrajectoryKind, TrajectorySpec};
use livo::state::{propagate, Covariance18, NoiseParams};
use nalgebra::Vector3;

fn round_trip(label: &str, spec: &TrajectorySpec) {
    let track = imu_track(spec, 9.81);
    let dt = 1.0 / spec.imu_hz;
    let noise = NoiseParams::zero();

    let mut state = track.states[0];
    let mut cov = Covariance18::zeros();
    let mut worst_pos = 0.0f64;
    let mut worst_rot = 0.0f64;
    for (k, sample) in track.samples.iter().enumerate() {
        (state, cov) = propagate(&state, &cov, sample, dt, &noise).unwrap();
        let truth = &track.states[k + 1];
        worst_pos = worst_pos.max((state.position - truth.position).norm());
        worst_rot = worst_rot.max(state.rotation.angle_to(&truth.rotation));
    }
    println!(
        "{label}: {} samples over {:.0} s -> max position error {:.2e} m, max rotation error {:.2e} deg",
        track.samples.len(),
        spec.duration,
        worst_pos,
        worst_rot.to_degrees()
    );
}

fn main() {
    let circle = TrajectorySpec::new(
        TrajectoryKind::Circle {
            radius: 2.0,
            rate: 0.5,
        },
        Vector3::new(5.0, 5.0, 1.5),
        10.0,
    );
    round_trip("circle   ", &circle);

    let lissajous = TrajectorySpec::new(
        TrajectoryKind::Lissajous {
            amplitude: Vector3::new(2.0, 1.5, 0.3),
            rates: Vector3::new(0.9, 0.7, 1.1),
            yaw_amplitude: 0.5,
            yaw_rate: 0.6,
        },
        Vector3::new(5.0, 5.0, 1.5),
        10.0,
    );
    round_trip("lissajous", &lissajous);
}
