//! Visual frontend abstraction, keyframe sliding window, and the visual
//! measurement update minimizing tangent-plane reprojection residuals.

use crate::depth::DepthFeature;
use crate::geom::{tangent_basis, CameraModel, GeomError, Pose};
use crate::state::{
    self, Covariance18, NavState, Residuals, StateError, UpdateStats, ERROR_DIM,
};
use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2};
use std::io::{self, BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VioError {
    #[error("parallax requested over an empty match set")]
    NoMatches,
    #[error("keyframe timestamp {0} not newer than window tail {1}")]
    OutOfOrderKeyframe(f64, f64),
    #[error("feature has no associated depth")]
    MissingDepth,
    #[error("fewer than {0} residual rows; visual update skipped")]
    NoConstraints(usize),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Update(#[from] StateError),
}

/// Length of the descriptor vectors produced by the synthetic provider,
/// mirroring a learned 256-float descriptor.
pub const DESCRIPTOR_LEN: usize = 256;
/// Minimum mean pixel displacement before a keyframe's matches are used.
pub const PARALLAX_GATE_PX: f64 = 15.0;
/// Keyframe promotion thresholds relative to the oldest window keyframe.
pub const KEYFRAME_TRANSLATION_M: f64 = 0.3;
pub const KEYFRAME_ROTATION_RAD: f64 = 10.0 * std::f64::consts::PI / 180.0;
/// Pixel measurement noise mapped into tangent-plane units by the focal
/// length inside `visual_update`.
pub const PIXEL_SIGMA: f64 = 1.5;

/// One detected feature: pixel, detector score, descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub pixel: Vector2<f64>,
    pub score: f64,
    pub descriptor: Vec<f64>,
}

/// Ground-truth landmark observations handed to a provider; real frontends
/// would receive the raster instead.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub t: f64,
    /// (landmark id, exact pixel) pairs for everything in view.
    pub landmarks: Vec<(u64, Vector2<f64>)>,
}

/// Detection/matching frontend contract. Implementations must be
/// deterministic for identical inputs and return injective match sets.
pub trait FeatureProvider {
    fn detect(&mut self, frame: &FrameInput) -> Vec<Detection>;
    /// Index pairs (a, b, confidence); each index appears at most once per
    /// side.
    fn match_descriptors(
        &mut self,
        a: &[Vec<f64>],
        b: &[Vec<f64>],
    ) -> Vec<(usize, usize, f64)>;
}

/// Deterministic synthetic frontend keyed by landmark ids, with optional
/// pixel noise, detection drops, and mismatches.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    pub pixel_sigma: f64,
    pub drop_probability: f64,
    pub mismatch_probability: f64,
    seed: u64,
}

impl SyntheticProvider {
    pub fn new(pixel_sigma: f64, drop_probability: f64, mismatch_probability: f64, seed: u64) -> Self {
        Self {
            pixel_sigma,
            drop_probability,
            mismatch_probability,
            seed,
        }
    }

    pub fn noiseless(seed: u64) -> Self {
        Self::new(0.0, 0.0, 0.0, seed)
    }

    /// Descriptor carrying the landmark id exactly (slot 0) plus a one-hot
    /// hash; matching is exact so zero-noise runs match ground truth.
    pub fn descriptor_for(id: u64) -> Vec<f64> {
        let mut d = vec![0.0; DESCRIPTOR_LEN];
        d[0] = id as f64;
        d[1 + (id as usize % (DESCRIPTOR_LEN - 1))] = 1.0;
        d
    }

    fn frame_rng(&self, frame: &FrameInput) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        // Deterministic for identical input: seed from the base seed and
        // the frame timestamp bits.
        rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ frame.t.to_bits())
    }
}

impl FeatureProvider for SyntheticProvider {
    fn detect(&mut self, frame: &FrameInput) -> Vec<Detection> {
        use rand::Rng;
        use rand_distr::{Distribution, Normal};
        let mut rng = self.frame_rng(frame);
        let normal = Normal::new(0.0, self.pixel_sigma.max(1e-300)).unwrap();
        let mut out = Vec::new();
        for &(id, pixel) in &frame.landmarks {
            if self.drop_probability > 0.0 && rng.random_range(0.0..1.0) < self.drop_probability
            {
                continue;
            }
            let noisy = if self.pixel_sigma > 0.0 {
                pixel + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng))
            } else {
                pixel
            };
            out.push(Detection {
                pixel: noisy,
                score: 1.0,
                descriptor: Self::descriptor_for(id),
            });
        }
        out
    }

    fn match_descriptors(
        &mut self,
        a: &[Vec<f64>],
        b: &[Vec<f64>],
    ) -> Vec<(usize, usize, f64)> {
        use rand::{Rng, SeedableRng};
        let mut pairs = Vec::new();
        let mut used_b = vec![false; b.len()];
        for (i, da) in a.iter().enumerate() {
            for (j, db) in b.iter().enumerate() {
                if !used_b[j] && da[0] == db[0] {
                    pairs.push((i, j, 1.0));
                    used_b[j] = true;
                    break;
                }
            }
        }
        if self.mismatch_probability > 0.0 && pairs.len() >= 2 {
            let mut h = 0u64;
            for &(i, j, _) in &pairs {
                h = h.wrapping_mul(31).wrapping_add((i as u64) << 32 | j as u64);
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ h);
            for k in 0..pairs.len() - 1 {
                if rng.random_range(0.0..1.0) < self.mismatch_probability {
                    let (bk, bn) = (pairs[k].1, pairs[k + 1].1);
                    pairs[k].1 = bn;
                    pairs[k + 1].1 = bk;
                }
            }
        }
        pairs
    }
}

/// Past camera frame whose pose and feature depths are held fixed.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub t: f64,
    /// IMU pose T_i^g at the keyframe time.
    pub pose: Pose,
    pub features: Vec<DepthFeature>,
}

/// Chronologically ordered keyframes with bounded capacity.
#[derive(Debug, Clone)]
pub struct KeyframeWindow {
    frames: Vec<Keyframe>,
    capacity: usize,
}

impl KeyframeWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            frames: Vec::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Keyframe] {
        &self.frames
    }

    /// Oldest keyframe (the reference for the keyframe decision).
    pub fn first(&self) -> Option<&Keyframe> {
        self.frames.first()
    }
}

/// Promote a frame to keyframe when its prior pose has moved enough from
/// the newest keyframe in the window, so the window covers roughly
/// `capacity` thresholds of motion rather than collapsing to consecutive
/// frames under sustained movement.
pub fn is_keyframe(prior_pose: &Pose, window: &KeyframeWindow) -> bool {
    let Some(k1) = window.frames().last() else {
        return true;
    };
    let dt = (prior_pose.translation - k1.pose.translation).norm();
    let dr = prior_pose.rotation.angle_to(&k1.pose.rotation);
    dt > KEYFRAME_TRANSLATION_M || dr > KEYFRAME_ROTATION_RAD
}

/// Mean Euclidean pixel displacement over matched pixel pairs.
pub fn parallax(matches: &[(Vector2<f64>, Vector2<f64>)]) -> Result<f64, VioError> {
    if matches.is_empty() {
        return Err(VioError::NoMatches);
    }
    let sum: f64 = matches.iter().map(|(a, b)| (a - b).norm()).sum();
    Ok(sum / matches.len() as f64)
}

/// Append a keyframe, evicting the oldest past capacity.
pub fn window_push(window: &mut KeyframeWindow, kf: Keyframe) -> Result<(), VioError> {
    if let Some(tail) = window.frames.last() {
        if kf.t <= tail.t {
            return Err(VioError::OutOfOrderKeyframe(kf.t, tail.t));
        }
    }
    window.frames.push(kf);
    if window.frames.len() > window.capacity {
        window.frames.remove(0);
    }
    Ok(())
}

/// Tangent-plane reprojection residual of a depth-carrying keyframe feature
/// observed at `obs_pixel` in the current frame, and its Jacobian w.r.t.
/// the current error state.
///
/// The landmark is reconstructed from the fixed keyframe pose and fixed
/// depth; only the current attitude/position columns of H are nonzero.
pub fn reprojection_residual(
    state: &NavState,
    t_c_i: &Pose,
    kf: &Keyframe,
    feature: &DepthFeature,
    obs_pixel: &Vector2<f64>,
    camera: &CameraModel,
) -> Result<(Vector2<f64>, SMatrix<f64, 2, ERROR_DIM>), VioError> {
    let depth = feature.depth.ok_or(VioError::MissingDepth)?;
    // Landmark in the global frame through the fixed keyframe pose.
    let p_g = kf
        .pose
        .transform(&t_c_i.transform(&(feature.bearing * depth)));

    // Prediction in the current camera frame.
    let x_ik = state.rotation.unrotate(&(p_g - state.position));
    let t_i_c = t_c_i.inverse();
    let x_ck = t_i_c.transform(&x_ik);
    if x_ck.z <= 0.0 {
        return Err(VioError::Geom(GeomError::BehindCamera));
    }
    let norm = x_ck.norm();
    let pred_unit = x_ck / norm;
    let obs_unit = crate::geom::unproject(camera, obs_pixel)?;
    let (b1, b2) = tangent_basis(&pred_unit)?;

    let diff = obs_unit - pred_unit;
    let r = Vector2::new(b1.dot(&diff), b2.dot(&diff));

    // d(pred_unit)/d(x_ck), then chain through the state perturbation.
    let proj = (Matrix3::identity() - pred_unit * pred_unit.transpose()) / norm;
    let mut bt = Matrix2x3::zeros();
    bt.row_mut(0).copy_from(&b1.transpose());
    bt.row_mut(1).copy_from(&b2.transpose());
    let front = -bt * proj * t_i_c.rotation.matrix();

    // x_ik(δ) = Exp(-δθ) Rᵀ (p_g - p - δp).
    let d_theta = front * crate::geom::skew(&x_ik);
    let d_pos = -front * state.rotation.matrix().transpose();

    let mut h = SMatrix::<f64, 2, ERROR_DIM>::zeros();
    h.fixed_view_mut::<2, 3>(0, state::block::THETA)
        .copy_from(&d_theta);
    h.fixed_view_mut::<2, 3>(0, state::block::POS)
        .copy_from(&d_pos);
    Ok((r, h))
}

/// Matches of current-frame detections against one window keyframe:
/// (current index, keyframe feature index).
pub type KeyframeMatches = Vec<(usize, usize)>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeGate {
    pub matches: usize,
    pub parallax_px: f64,
    /// True when the keyframe's residuals entered the update.
    pub used: bool,
}

#[derive(Debug, Clone, Default)]
pub struct VisualUpdateStats {
    pub gates: Vec<KeyframeGate>,
    pub rows: usize,
    pub update: UpdateStats,
}

/// Stack Eq.-style tangent residuals against every window keyframe passing
/// the parallax gate and run the iterated update. Keyframe poses and
/// feature depths stay fixed; only the current pose is re-estimated.
pub fn visual_update(
    state: &NavState,
    cov: &Covariance18,
    frame_features: &[DepthFeature],
    matches_per_kf: &[KeyframeMatches],
    window: &KeyframeWindow,
    camera: &CameraModel,
    t_c_i: &Pose,
) -> Result<(NavState, Covariance18, VisualUpdateStats), VioError> {
    let mut stats = VisualUpdateStats::default();
    // (keyframe idx, feature idx, observed pixel) triples that survive the
    // gates; re-evaluated against the iterate inside the builder.
    let mut constraints: Vec<(usize, usize, Vector2<f64>)> = Vec::new();
    for (k, (kf, matches)) in window.frames().iter().zip(matches_per_kf).enumerate() {
        let pairs: Vec<(Vector2<f64>, Vector2<f64>)> = matches
            .iter()
            .map(|&(fi, ki)| (frame_features[fi].pixel, kf.features[ki].pixel))
            .collect();
        let px = parallax(&pairs).unwrap_or(0.0);
        let mut used = false;
        if px > PARALLAX_GATE_PX {
            for &(fi, ki) in matches {
                if kf.features[ki].depth.is_some() {
                    constraints.push((k, ki, frame_features[fi].pixel));
                    used = true;
                }
            }
        }
        stats.gates.push(KeyframeGate {
            matches: matches.len(),
            parallax_px: px,
            used,
        });
    }
    stats.rows = 2 * constraints.len();
    if stats.rows < 6 {
        return Err(VioError::NoConstraints(6));
    }

    let focal = 0.5 * (camera.fx + camera.fy);
    let noise_var = (PIXEL_SIGMA / focal).powi(2);
    let builder = |x: &NavState| -> Residuals {
        let mut rs = Vec::new();
        let mut hs = Vec::new();
        for &(k, ki, pixel) in &constraints {
            let kf = &window.frames()[k];
            if let Ok((r, h)) =
                reprojection_residual(x, t_c_i, kf, &kf.features[ki], &pixel, camera)
            {
                rs.push(r);
                hs.push(h);
            }
        }
        let m = 2 * rs.len();
        let mut r = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, ERROR_DIM);
        for (i, (rv, hv)) in rs.iter().zip(&hs).enumerate() {
            r.fixed_rows_mut::<2>(2 * i).copy_from(rv);
            h.view_mut((2 * i, 0), (2, ERROR_DIM)).copy_from(hv);
        }
        Residuals {
            r,
            h,
            noise_var: DVector::from_element(m, noise_var),
        }
    };

    let (post, post_cov, update_stats) = state::iterated_update(state, cov, builder, 5, 1e-8)?;
    stats.update = update_stats;
    Ok((post, post_cov, stats))
}

/// One frame of pre-extracted features in the packet file format.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePacket {
    pub t: f64,
    pub features: Vec<PacketFeature>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketFeature {
    pub track_id: u64,
    pub pixel: Vector2<f64>,
    pub score: f64,
    pub descriptor: Vec<f64>,
}

/// Write packets as `timestamp count` headers followed by
/// `track_id u v score d0 … d255` lines.
pub fn write_packets(packets: &[FeaturePacket], w: &mut impl Write) -> io::Result<()> {
    for p in packets {
        writeln!(w, "{:.9} {}", p.t, p.features.len())?;
        for f in &p.features {
            write!(w, "{} {:.6} {:.6} {:.6}", f.track_id, f.pixel.x, f.pixel.y, f.score)?;
            for d in &f.descriptor {
                write!(w, " {}", d)?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum PacketError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed packet line {0}: {1}")]
    Malformed(usize, String),
}

pub fn read_packets(r: &mut impl BufRead) -> Result<Vec<FeaturePacket>, PacketError> {
    let mut lines = r.lines().enumerate();
    let mut packets = Vec::new();
    while let Some((ln, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(t), Some(count)) = (it.next(), it.next()) else {
            return Err(PacketError::Malformed(ln + 1, line.clone()));
        };
        let t: f64 = t
            .parse()
            .map_err(|_| PacketError::Malformed(ln + 1, line.clone()))?;
        let count: usize = count
            .parse()
            .map_err(|_| PacketError::Malformed(ln + 1, line.clone()))?;
        let mut features = Vec::with_capacity(count);
        for _ in 0..count {
            let Some((ln2, fline)) = lines.next() else {
                return Err(PacketError::Malformed(ln + 1, "truncated packet".into()));
            };
            let fline = fline?;
            let vals: Vec<&str> = fline.split_whitespace().collect();
            if vals.len() < 4 {
                return Err(PacketError::Malformed(ln2 + 1, fline.clone()));
            }
            let parse = |s: &str| -> Result<f64, PacketError> {
                s.parse()
                    .map_err(|_| PacketError::Malformed(ln2 + 1, fline.clone()))
            };
            features.push(PacketFeature {
                track_id: vals[0]
                    .parse()
                    .map_err(|_| PacketError::Malformed(ln2 + 1, fline.clone()))?,
                pixel: Vector2::new(parse(vals[1])?, parse(vals[2])?),
                score: parse(vals[3])?,
                descriptor: vals[4..]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<_, _>>()?,
            });
        }
        packets.push(FeaturePacket { t, features });
    }
    Ok(packets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::so3_exp;
    use crate::state::{boxplus, ErrorVector};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> CameraModel {
        CameraModel::pinhole(320.0, 320.0, 320.0, 240.0, 640, 480)
    }

    fn feature_at(bearing: Vector3<f64>, depth: f64, camera: &CameraModel, id: u64) -> DepthFeature {
        let bearing = bearing.normalize();
        DepthFeature {
            pixel: crate::geom::project(&camera, &bearing).unwrap(),
            bearing,
            depth: Some(depth),
            score: 1.0,
            descriptor: Vec::new(),
            track_id: id,
        }
    }

    #[test]
    fn keyframe_decision_thresholds() {
        let window = KeyframeWindow::new(5);
        let pose = Pose::identity();
        assert!(is_keyframe(&pose, &window));

        let mut window = KeyframeWindow::new(5);
        window_push(
            &mut window,
            Keyframe {
                t: 0.0,
                pose,
                features: Vec::new(),
            },
        )
        .unwrap();
        assert!(!is_keyframe(&pose, &window));
        let moved = Pose::new(Rotation::identity(), Vector3::new(0.4, 0.0, 0.0));
        assert!(is_keyframe(&moved, &window));
        let rotated = Pose::new(so3_exp(&Vector3::new(0.0, 0.0, 0.2)), Vector3::zeros());
        assert!(is_keyframe(&rotated, &window));
    }

    #[test]
    fn parallax_cases() {
        assert!(matches!(parallax(&[]), Err(VioError::NoMatches)));
        let same = vec![(Vector2::new(3.0, 4.0), Vector2::new(3.0, 4.0))];
        assert_eq!(parallax(&same).unwrap(), 0.0);
        let shifted: Vec<_> = (0..4)
            .map(|k| {
                let a = Vector2::new(k as f64, 2.0 * k as f64);
                (a, a + Vector2::new(3.0, 4.0))
            })
            .collect();
        assert_relative_eq!(parallax(&shifted).unwrap(), 5.0, epsilon = 1e-12);
        let mixed = vec![
            (Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0)),
            (Vector2::new(0.0, 0.0), Vector2::new(0.0, 2.0)),
        ];
        assert_relative_eq!(parallax(&mixed).unwrap(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn window_push_order_and_eviction() {
        let mut window = KeyframeWindow::new(5);
        for k in 0..6 {
            window_push(
                &mut window,
                Keyframe {
                    t: k as f64,
                    pose: Pose::identity(),
                    features: Vec::new(),
                },
            )
            .unwrap();
        }
        assert_eq!(window.len(), 5);
        assert_eq!(window.first().unwrap().t, 1.0);
        assert!(matches!(
            window_push(
                &mut window,
                Keyframe {
                    t: 2.0,
                    pose: Pose::identity(),
                    features: Vec::new()
                }
            ),
            Err(VioError::OutOfOrderKeyframe(_, _))
        ));

        let mut tiny = KeyframeWindow::new(1);
        for k in 0..4 {
            window_push(
                &mut tiny,
                Keyframe {
                    t: k as f64,
                    pose: Pose::identity(),
                    features: Vec::new(),
                },
            )
            .unwrap();
            assert_eq!(tiny.len(), 1);
            assert_eq!(tiny.first().unwrap().t, k as f64);
        }
    }

    #[test]
    fn window_timestamps_increasing_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut window = KeyframeWindow::new(5);
        let mut t = 0.0;
        for _ in 0..200 {
            t += rng.random_range(0.01..1.0);
            window_push(
                &mut window,
                Keyframe {
                    t,
                    pose: Pose::identity(),
                    features: Vec::new(),
                },
            )
            .unwrap();
            for pair in window.frames().windows(2) {
                assert!(pair[0].t < pair[1].t);
            }
        }
    }

    #[test]
    fn synthetic_provider_exact_at_zero_noise() {
        let mut provider = SyntheticProvider::noiseless(7);
        let frame = FrameInput {
            t: 1.25,
            landmarks: vec![
                (10, Vector2::new(100.0, 100.0)),
                (20, Vector2::new(200.0, 150.0)),
                (30, Vector2::new(300.0, 200.0)),
            ],
        };
        let a = provider.detect(&frame);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].pixel, Vector2::new(100.0, 100.0));
        // Determinism for identical input.
        assert_eq!(provider.detect(&frame), a);

        let frame_b = FrameInput {
            t: 1.35,
            landmarks: vec![(30, Vector2::new(310.0, 205.0)), (10, Vector2::new(99.0, 101.0))],
        };
        let b = provider.detect(&frame_b);
        let da: Vec<Vec<f64>> = a.iter().map(|d| d.descriptor.clone()).collect();
        let db: Vec<Vec<f64>> = b.iter().map(|d| d.descriptor.clone()).collect();
        let pairs = provider.match_descriptors(&da, &db);
        assert_eq!(pairs.len(), 2);
        for &(i, j, _) in &pairs {
            assert_eq!(da[i][0], db[j][0]);
        }
        // Injectivity under mismatch injection.
        let mut noisy = SyntheticProvider::new(0.0, 0.0, 0.5, 9);
        let pairs = noisy.match_descriptors(&da, &db);
        let mut seen_a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut seen_b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        seen_a.sort_unstable();
        seen_b.sort_unstable();
        seen_a.dedup();
        seen_b.dedup();
        assert_eq!(seen_a.len(), pairs.len());
        assert_eq!(seen_b.len(), pairs.len());
    }

    #[test]
    fn residual_zero_at_ground_truth() {
        let camera = test_camera();
        let t_c_i = Pose::new(
            so3_exp(&Vector3::new(0.01, -0.02, 0.005)),
            Vector3::new(0.05, 0.0, 0.1),
        );
        let kf_pose = Pose::new(so3_exp(&Vector3::new(0.0, 0.1, 0.0)), Vector3::new(1.0, 0.0, 0.0));
        let feature = feature_at(Vector3::new(0.1, -0.05, 1.0), 8.0, &camera, 1);
        let kf = Keyframe {
            t: 0.0,
            pose: kf_pose,
            features: vec![feature.clone()],
        };

        // Current state at a different pose; observation from the exact
        // reprojection of the landmark.
        let mut state = NavState::at_rest(9.81);
        state.rotation = so3_exp(&Vector3::new(0.02, 0.05, -0.01));
        state.position = Vector3::new(0.5, 0.3, -0.1);
        let p_g = kf.pose.transform(&t_c_i.transform(&(feature.bearing * 8.0)));
        let x_ck = t_c_i
            .inverse()
            .transform(&state.rotation.unrotate(&(p_g - state.position)));
        let obs = crate::geom::project(&camera, &x_ck).unwrap();

        let (r, _) = reprojection_residual(&state, &t_c_i, &kf, &feature, &obs, &camera).unwrap();
        assert!(r.norm() < 1e-9, "r = {r:?}");
    }

    #[test]
    fn residual_small_angle_lateral_offset() {
        // Landmark 1 m ahead on the optical axis; shifting the camera 1 cm
        // sideways tilts the predicted bearing by ~0.01 rad.
        let camera = test_camera();
        let t_c_i = Pose::identity();
        let feature = feature_at(Vector3::z(), 1.0, &camera, 1);
        let kf = Keyframe {
            t: 0.0,
            pose: Pose::identity(),
            features: vec![feature.clone()],
        };
        let mut state = NavState::at_rest(9.81);
        state.position = Vector3::new(0.01, 0.0, 0.0);
        let obs = feature.pixel;
        let (r, _) = reprojection_residual(&state, &t_c_i, &kf, &feature, &obs, &camera).unwrap();
        assert_relative_eq!(r.norm(), 0.01, max_relative = 1e-3);
    }

    #[test]
    fn residual_jacobian_matches_finite_differences() {
        let camera = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let t_c_i = Pose::new(
            so3_exp(&Vector3::new(0.01, 0.03, -0.02)),
            Vector3::new(0.1, -0.05, 0.08),
        );
        let mut checked = 0;
        while checked < 1000 {
            let kf_pose = Pose::new(
                so3_exp(&Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                )),
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            );
            let bearing = Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.3..0.3),
                1.0,
            );
            let feature = feature_at(bearing, rng.random_range(2.0..50.0), &camera, 1);
            let kf = Keyframe {
                t: 0.0,
                pose: kf_pose,
                features: vec![feature.clone()],
            };
            let mut state = NavState::at_rest(9.81);
            state.rotation = so3_exp(&Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ));
            state.position = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let obs = Vector2::new(
                rng.random_range(100.0..540.0),
                rng.random_range(80.0..400.0),
            );
            let Ok((r0, h)) =
                reprojection_residual(&state, &t_c_i, &kf, &feature, &obs, &camera)
            else {
                continue;
            };

            // Residual with the tangent basis frozen at the evaluation
            // point, so finite differences see a smooth function.
            let p_g = kf
                .pose
                .transform(&t_c_i.transform(&(feature.bearing * feature.depth.unwrap())));
            let x_ck0 = t_c_i
                .inverse()
                .transform(&state.rotation.unrotate(&(p_g - state.position)));
            let (b1, b2) = tangent_basis(&(x_ck0 / x_ck0.norm())).unwrap();
            let obs_unit = crate::geom::unproject(&camera, &obs).unwrap();
            let frozen = |x: &NavState| -> Option<Vector2<f64>> {
                let x_ck = t_c_i
                    .inverse()
                    .transform(&x.rotation.unrotate(&(p_g - x.position)));
                if x_ck.z <= 0.0 {
                    return None;
                }
                let diff = obs_unit - x_ck / x_ck.norm();
                Some(Vector2::new(b1.dot(&diff), b2.dot(&diff)))
            };
            assert!((frozen(&state).unwrap() - r0).norm() < 1e-12);

            let eps = 1e-6;
            let mut ok = true;
            for c in 0..ERROR_DIM {
                let mut d = ErrorVector::zeros();
                d[c] = eps;
                let rp = frozen(&boxplus(&state, &d));
                d[c] = -eps;
                let rm = frozen(&boxplus(&state, &d));
                let (Some(rp), Some(rm)) = (rp, rm) else {
                    ok = false;
                    break;
                };
                let fd = (rp - rm) / (2.0 * eps);
                for row in 0..2 {
                    let scale = h[(row, c)].abs().max(1.0);
                    assert!(
                        (fd[row] - h[(row, c)]).abs() / scale < 1e-4,
                        "col {c} row {row}: {} vs {}",
                        fd[row],
                        h[(row, c)]
                    );
                }
            }
            if ok {
                checked += 1;
            }
        }
    }

    #[test]
    fn residual_norm_basis_independent_and_sparse_columns() {
        let camera = test_camera();
        let t_c_i = Pose::identity();
        let feature = feature_at(Vector3::new(0.2, -0.1, 1.0), 5.0, &camera, 1);
        let kf = Keyframe {
            t: 0.0,
            pose: Pose::identity(),
            features: vec![feature.clone()],
        };
        let mut state = NavState::at_rest(9.81);
        state.position = Vector3::new(0.05, 0.02, -0.03);
        state.rotation = so3_exp(&Vector3::new(0.01, 0.02, -0.01));
        let obs = Vector2::new(350.0, 210.0);
        let (r, h) = reprojection_residual(&state, &t_c_i, &kf, &feature, &obs, &camera).unwrap();

        // Any rotation of the tangent basis preserves ‖r‖: recompute with a
        // rotated basis and compare norms.
        let p_g = t_c_i.transform(&(feature.bearing * 5.0));
        let x_ck = t_c_i
            .inverse()
            .transform(&state.rotation.unrotate(&(p_g - state.position)));
        let unit = x_ck / x_ck.norm();
        let (b1, b2) = tangent_basis(&unit).unwrap();
        let angle: f64 = 0.7;
        let c1 = b1 * angle.cos() + b2 * angle.sin();
        let c2 = -b1 * angle.sin() + b2 * angle.cos();
        let diff = crate::geom::unproject(&camera, &obs).unwrap() - unit;
        let r_alt = Vector2::new(c1.dot(&diff), c2.dot(&diff));
        assert_relative_eq!(r.norm(), r_alt.norm(), epsilon = 1e-12);

        // Velocity, bias, and gravity columns are identically zero.
        for c in state::block::VEL..ERROR_DIM {
            assert_eq!(h[(0, c)], 0.0);
            assert_eq!(h[(1, c)], 0.0);
        }
    }

    /// Build a window keyframe and current-frame observations of shared
    /// landmarks; returns everything `visual_update` needs.
    fn two_view_fixture(
        camera: &CameraModel,
        landmark_depth_range: (f64, f64),
        count: usize,
        seed: u64,
    ) -> (KeyframeWindow, Vec<DepthFeature>, Vec<KeyframeMatches>, NavState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kf_features = Vec::new();
        let mut landmarks = Vec::new();
        for id in 0..count as u64 {
            let bearing = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.35..0.35),
                1.0,
            )
            .normalize();
            let depth = rng.random_range(landmark_depth_range.0..landmark_depth_range.1);
            landmarks.push(bearing * depth);
            kf_features.push(DepthFeature {
                pixel: crate::geom::project(&camera, &bearing).unwrap(),
                bearing,
                depth: Some(depth),
                score: 1.0,
                descriptor: Vec::new(),
                track_id: id,
            });
        }
        let mut window = KeyframeWindow::new(5);
        window_push(
            &mut window,
            Keyframe {
                t: 0.0,
                pose: Pose::identity(),
                features: kf_features,
            },
        )
        .unwrap();

        // True current pose: translated and slightly rotated, so even far
        // features show enough pixel displacement to pass the parallax gate.
        let mut truth = NavState::at_rest(9.81);
        truth.rotation = so3_exp(&Vector3::new(0.0, 0.08, 0.0));
        truth.position = Vector3::new(0.3, -0.1, 0.05);
        let mut frame_features = Vec::new();
        let mut matches = Vec::new();
        for (i, lm) in landmarks.iter().enumerate() {
            let x_c = truth.rotation.unrotate(&(lm - truth.position));
            let Ok(pixel) = crate::geom::project(&camera, &x_c) else {
                continue;
            };
            frame_features.push(DepthFeature {
                pixel,
                bearing: x_c.normalize(),
                depth: None,
                score: 1.0,
                descriptor: Vec::new(),
                track_id: i as u64,
            });
            matches.push((frame_features.len() - 1, i));
        }
        (window, frame_features, vec![matches], truth)
    }

    #[test]
    fn visual_update_fixed_point_at_truth() {
        let camera = test_camera();
        let (window, frame_features, matches, truth) =
            two_view_fixture(&camera, (3.0, 20.0), 60, 53);
        let cov = Covariance18::identity() * 1e-4;
        let (post, _, stats) = visual_update(
            &truth,
            &cov,
            &frame_features,
            &matches,
            &window,
            &camera,
            &Pose::identity(),
        )
        .unwrap();
        assert!(stats.gates[0].used);
        assert!((post.position - truth.position).norm() < 1e-8);
        assert!(post.rotation.angle_to(&truth.rotation) < 1e-8);
    }

    #[test]
    fn visual_update_corrects_yaw_with_far_features() {
        let camera = test_camera();
        let (window, frame_features, matches, truth) =
            two_view_fixture(&camera, (50.0, 120.0), 100, 54);
        let mut prior = truth;
        prior.rotation = truth
            .rotation
            .compose(&so3_exp(&Vector3::new(0.0, 0.0, 1.0_f64.to_radians())));
        let cov = Covariance18::identity() * 1e-3;
        let (post, _, _) = visual_update(
            &prior,
            &cov,
            &frame_features,
            &matches,
            &window,
            &camera,
            &Pose::identity(),
        )
        .unwrap();
        let yaw_err = post.rotation.angle_to(&truth.rotation).to_degrees();
        assert!(yaw_err < 0.05, "yaw error {yaw_err}°");
    }

    #[test]
    fn visual_update_gates_and_constraint_floor() {
        let camera = test_camera();
        let (window, mut frame_features, matches, truth) =
            two_view_fixture(&camera, (3.0, 20.0), 60, 55);
        let cov = Covariance18::identity() * 1e-4;

        // Copy keyframe pixels onto the frame features: zero parallax.
        for &(fi, ki) in &matches[0] {
            frame_features[fi].pixel = window.frames()[0].features[ki].pixel;
        }
        let err = visual_update(
            &truth,
            &cov,
            &frame_features,
            &matches,
            &window,
            &camera,
            &Pose::identity(),
        )
        .unwrap_err();
        assert!(matches!(err, VioError::NoConstraints(6)));
    }

    #[test]
    fn visual_update_contracts_pose_error() {
        let camera = test_camera();
        let (window, frame_features, matches, truth) =
            two_view_fixture(&camera, (3.0, 40.0), 80, 56);
        let cov = Covariance18::identity() * 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for _ in 0..100 {
            let mut d = ErrorVector::zeros();
            for i in 0..3 {
                d[state::block::THETA + i] = rng.random_range(-0.02..0.02);
                d[state::block::POS + i] = rng.random_range(-0.05..0.05);
            }
            let prior = boxplus(&truth, &d);
            let prior_err = (prior.position - truth.position).norm()
                + prior.rotation.angle_to(&truth.rotation);
            let (post, _, _) = visual_update(
                &prior,
                &cov,
                &frame_features,
                &matches,
                &window,
                &camera,
                &Pose::identity(),
            )
            .unwrap();
            let post_err = (post.position - truth.position).norm()
                + post.rotation.angle_to(&truth.rotation);
            assert!(post_err <= prior_err + 1e-12, "{post_err} > {prior_err}");
        }
    }

    #[test]
    fn packet_round_trip() {
        let packets = vec![
            FeaturePacket {
                t: 0.1,
                features: vec![PacketFeature {
                    track_id: 42,
                    pixel: Vector2::new(12.5, 300.25),
                    score: 0.75,
                    descriptor: SyntheticProvider::descriptor_for(42),
                }],
            },
            FeaturePacket {
                t: 0.2,
                features: Vec::new(),
            },
        ];
        let mut buf = Vec::new();
        write_packets(&packets, &mut buf).unwrap();
        let back = read_packets(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].features[0].track_id, 42);
        assert_relative_eq!(back[0].features[0].pixel.x, 12.5, epsilon = 1e-6);
        assert_eq!(back[0].features[0].descriptor.len(), DESCRIPTOR_LEN);
        assert!(read_packets(&mut &b"0.1 2\n1 2 3 4\n"[..]).is_err());
    }
}
