//! LiDAR-assisted feature depth recovery and depth binning.
//!
//! From a static viewpoint in the box-room world: raycast one LiDAR sweep,
//! load its points into the camera-frame spherical window, project every
//! visible landmark to a pixel, and recover each feature's metric depth
//! from a local plane fit on its nearest LiDAR returns. Recovered depths
//! are checked against the true camera-to-landmark distance, then the
//! features are spread across depth bins and dumped in `u v depth bin`
//! form.

use livo::depth::{
    associate_depth, bin_depths, dump_bins, DepthBinsConfig, DepthFeature, SphereCloud,
};
use livo::geom::{unproject, Pose};
use livo::sim::{raycast_lidar, sample_features, LidarPattern, Rig, WorldModel};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let world = WorldModel::box_room(7);
    let rig = Rig::default();
    let body = Pose::new(livo::geom::Rotation::identity(), Vector3::new(5.0, 5.0, 1.2));
    let lidar_pose = body.compose(&rig.t_l_i);
    let camera_pose = body.compose(&rig.t_c_i);

    // One dense sweep (64 rings stands in for the multi-sweep window the
    // pipeline accumulates), re-expressed in the camera frame for bearing
    // lookups.
    let pattern = LidarPattern {
        rings: 64,
        ..LidarPattern::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sweep = raycast_lidar(&world, &|_| lidar_pose, &pattern, 0.0, 0.0, &mut rng);
    let cam_from_lidar = rig.t_c_i.inverse().compose(&rig.t_l_i);
    let points_camera: Vec<Vector3<f64>> = sweep
        .iter()
        .map(|p| cam_from_lidar.transform(&p.position))
        .collect();
    let mut cloud = SphereCloud::new(points_camera.len(), 80.0_f64.to_radians());
    cloud.insert_scan(&points_camera);
    println!("sphere window holds {} LiDAR points", cloud.len());

    // Project every unoccluded landmark and try to recover its depth.
    let frame = sample_features(&world, &camera_pose, &rig.camera, 0.0);
    let mut features = Vec::new();
    let mut worst = 0.0f64;
    for (id, pixel) in &frame.landmarks {
        let bearing = unproject(&rig.camera, pixel).unwrap();
        let Some(depth) = associate_depth(&bearing, &mut cloud) else {
            continue;
        };
        let truth = camera_pose
            .inverse()
            .transform(&world.landmarks[*id as usize].position)
            .norm();
        worst = worst.max((depth * bearing.norm() - truth).abs());
        features.push(DepthFeature {
            pixel: *pixel,
            bearing,
            depth: Some(depth),
            score: 1.0,
            descriptor: Vec::new(),
            track_id: *id,
        });
    }
    println!(
        "{} of {} visible landmarks got a depth; worst range error {:.4} m",
        features.len(),
        frame.landmarks.len(),
        worst
    );

    // Spread the selection uniformly over depth intervals. The room is
    // small, so rescale the bins to the observed depth range instead of the
    // default 20 m intervals.
    let cfg = DepthBinsConfig {
        target: 12,
        dynamic_max_depth: true,
        ..DepthBinsConfig::default()
    };
    let selected = bin_depths(&features, &cfg);
    println!("binned selection ({} features, 'u v depth bin'):", selected.len());
    let mut out = Vec::new();
    dump_bins(&selected, &cfg, &mut out).unwrap();
    print!("{}", String::from_utf8(out).unwrap());
}
