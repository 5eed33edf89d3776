//! Filter state, error-state algebra, IMU propagation with covariance, and
//! the iterated-update machinery shared by the LiDAR and visual updates.

use crate::geom::{skew, so3_exp, so3_log, so3_right_jacobian, Rotation};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

/// Error-state dimension: (dtheta, dp, dv, dbg, dba, dg), three each.
pub const ERROR_DIM: usize = 18;

pub type ErrorVector = SVector<f64, ERROR_DIM>;
pub type Covariance18 = SMatrix<f64, ERROR_DIM, ERROR_DIM>;

/// Offsets of the error-state blocks.
pub mod block {
    pub const THETA: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const GRAV: usize = 15;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("dt must lie in (0, 0.1], got {0}")]
    NonPositiveDt(f64),
    #[error("non-finite input to propagation")]
    NonFiniteInput,
    #[error("innovation system is numerically singular")]
    SingularInnovation,
    #[error("not enough stationary IMU samples to initialize")]
    InsufficientInitData,
}

/// Full filter state on its manifold: IMU-to-global rotation, position,
/// velocity, gyro/accel biases and the gravity vector in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    pub gravity: Vector3<f64>,
}

impl NavState {
    /// Identity pose at rest with gravity pointing down the global z axis.
    pub fn at_rest(gravity_magnitude: f64) -> Self {
        Self {
            rotation: Rotation::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            bias_accel: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -gravity_magnitude),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.bias_gyro.iter().all(|v| v.is_finite())
            && self.bias_accel.iter().all(|v| v.is_finite())
            && self.gravity.iter().all(|v| v.is_finite())
            && self.rotation.quaternion().coords.iter().all(|v| v.is_finite())
    }
}

/// One IMU measurement: body angular rate and specific force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Continuous-time IMU noise densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub gyro_walk: f64,
    pub accel_walk: f64,
}

impl NoiseParams {
    pub fn zero() -> Self {
        Self {
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_walk: 0.0,
            accel_walk: 0.0,
        }
    }

    /// Typical consumer-grade MEMS IMU.
    pub fn consumer_grade() -> Self {
        Self {
            gyro_noise: 2e-3,
            accel_noise: 2e-2,
            gyro_walk: 5e-5,
            accel_walk: 5e-4,
        }
    }
}

/// Manifold retraction: rotation on the right, vector blocks additively.
pub fn boxplus(state: &NavState, delta: &ErrorVector) -> NavState {
    let dtheta = delta.fixed_rows::<3>(block::THETA).into_owned();
    NavState {
        rotation: state.rotation.compose(&so3_exp(&dtheta)),
        position: state.position + delta.fixed_rows::<3>(block::POS),
        velocity: state.velocity + delta.fixed_rows::<3>(block::VEL),
        bias_gyro: state.bias_gyro + delta.fixed_rows::<3>(block::BG),
        bias_accel: state.bias_accel + delta.fixed_rows::<3>(block::BA),
        gravity: state.gravity + delta.fixed_rows::<3>(block::GRAV),
    }
}

/// Inverse of [`boxplus`]: `boxminus(boxplus(x, d), x) == d` for small d.
pub fn boxminus(lhs: &NavState, rhs: &NavState) -> ErrorVector {
    let mut delta = ErrorVector::zeros();
    let dr = rhs.rotation.inverse().compose(&lhs.rotation);
    delta
        .fixed_rows_mut::<3>(block::THETA)
        .copy_from(&so3_log(&dr));
    delta
        .fixed_rows_mut::<3>(block::POS)
        .copy_from(&(lhs.position - rhs.position));
    delta
        .fixed_rows_mut::<3>(block::VEL)
        .copy_from(&(lhs.velocity - rhs.velocity));
    delta
        .fixed_rows_mut::<3>(block::BG)
        .copy_from(&(lhs.bias_gyro - rhs.bias_gyro));
    delta
        .fixed_rows_mut::<3>(block::BA)
        .copy_from(&(lhs.bias_accel - rhs.bias_accel));
    delta
        .fixed_rows_mut::<3>(block::GRAV)
        .copy_from(&(lhs.gravity - rhs.gravity));
    delta
}

fn set_block(m: &mut Covariance18, row: usize, col: usize, b: &Matrix3<f64>) {
    m.fixed_view_mut::<3, 3>(row, col).copy_from(b);
}

/// State-transition Jacobian of the discrete mean map w.r.t. the error state.
pub fn transition_jacobian(state: &NavState, u: &ImuSample, dt: f64) -> Covariance18 {
    let omega = u.gyro - state.bias_gyro;
    let acc_body = u.accel - state.bias_accel;
    let r = state.rotation.matrix();
    let r_acc_skew = r * skew(&acc_body);
    let jr = so3_right_jacobian(&(omega * dt));

    let mut f = Covariance18::identity();
    set_block(
        &mut f,
        block::THETA,
        block::THETA,
        &so3_exp(&(omega * dt)).matrix().transpose(),
    );
    set_block(&mut f, block::THETA, block::BG, &(-jr * dt));
    set_block(&mut f, block::POS, block::THETA, &(-r_acc_skew * (0.5 * dt * dt)));
    set_block(&mut f, block::POS, block::VEL, &(Matrix3::identity() * dt));
    set_block(&mut f, block::POS, block::BA, &(-r * (0.5 * dt * dt)));
    set_block(
        &mut f,
        block::POS,
        block::GRAV,
        &(Matrix3::identity() * (0.5 * dt * dt)),
    );
    set_block(&mut f, block::VEL, block::THETA, &(-r_acc_skew * dt));
    set_block(&mut f, block::VEL, block::BA, &(-r * dt));
    set_block(&mut f, block::VEL, block::GRAV, &(Matrix3::identity() * dt));
    f
}

/// Forward-propagate mean and covariance through one IMU interval.
///
/// Discrete Euler integration of the strapdown dynamics with zero noise for
/// the mean; covariance F P F' + Q with Q built from the continuous noise
/// densities scaled by dt. Gravity carries zero process noise.
pub fn propagate(
    state: &NavState,
    cov: &Covariance18,
    u: &ImuSample,
    dt: f64,
    noise: &NoiseParams,
) -> Result<(NavState, Covariance18), StateError> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(StateError::NonPositiveDt(dt));
    }
    if !state.is_finite()
        || !u.gyro.iter().all(|v| v.is_finite())
        || !u.accel.iter().all(|v| v.is_finite())
    {
        return Err(StateError::NonFiniteInput);
    }

    let omega = u.gyro - state.bias_gyro;
    let acc_body = u.accel - state.bias_accel;
    let acc = state.rotation.rotate(&acc_body) + state.gravity;

    let next = NavState {
        rotation: state.rotation.compose(&so3_exp(&(omega * dt))),
        position: state.position + state.velocity * dt + acc * (0.5 * dt * dt),
        velocity: state.velocity + acc * dt,
        bias_gyro: state.bias_gyro,
        bias_accel: state.bias_accel,
        gravity: state.gravity,
    };

    let f = transition_jacobian(state, u, dt);

    // Noise input Jacobian, columns ordered (n_g, n_a, n_bg, n_ba).
    let r = state.rotation.matrix();
    let jr = so3_right_jacobian(&(omega * dt));
    let mut g = SMatrix::<f64, ERROR_DIM, 12>::zeros();
    g.fixed_view_mut::<3, 3>(block::THETA, 0).copy_from(&(-jr));
    g.fixed_view_mut::<3, 3>(block::POS, 3)
        .copy_from(&(-r * (0.5 * dt)));
    g.fixed_view_mut::<3, 3>(block::VEL, 3).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(block::BG, 6)
        .copy_from(&Matrix3::identity());
    g.fixed_view_mut::<3, 3>(block::BA, 9)
        .copy_from(&Matrix3::identity());

    let mut qn = SMatrix::<f64, 12, 12>::zeros();
    for i in 0..3 {
        qn[(i, i)] = noise.gyro_noise * noise.gyro_noise;
        qn[(3 + i, 3 + i)] = noise.accel_noise * noise.accel_noise;
        qn[(6 + i, 6 + i)] = noise.gyro_walk * noise.gyro_walk;
        qn[(9 + i, 9 + i)] = noise.accel_walk * noise.accel_walk;
    }
    let q = g * qn * g.transpose() * dt;

    let mut next_cov = f * cov * f.transpose() + q;
    next_cov = symmetrized(&next_cov);
    Ok((next, next_cov))
}

/// Residual stack produced by a measurement builder at one filter iterate.
pub struct Residuals {
    pub r: DVector<f64>,
    pub h: DMatrix<f64>,
    /// Per-row measurement variance.
    pub noise_var: DVector<f64>,
}

impl Residuals {
    pub fn empty() -> Self {
        Self {
            r: DVector::zeros(0),
            h: DMatrix::zeros(0, ERROR_DIM),
            noise_var: DVector::zeros(0),
        }
    }

    pub fn rows(&self) -> usize {
        self.r.len()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub iterations: usize,
    pub rows: usize,
    pub converged: bool,
}

pub fn symmetrized(m: &Covariance18) -> Covariance18 {
    (m + m.transpose()) * 0.5
}

/// True when all eigenvalues clear the floor `-1e-9 * trace`.
pub fn covariance_is_psd(cov: &Covariance18) -> bool {
    let sym = symmetrized(cov);
    let eig = sym.symmetric_eigenvalues();
    let floor = -1e-9 * cov.trace().abs();
    eig.iter().all(|&l| l >= floor)
}

/// Iterated Kalman step on the error state.
///
/// The builder is re-invoked at every iterate and returns the residual stack
/// `r`, its Jacobian `H = dr/d(delta)` and per-row noise variances. The prior
/// is pulled back to the current iterate; iteration stops when the correction
/// norm drops below `tol` or after `max_iter` rounds. The posterior
/// covariance is the information-form `(H' R^-1 H + P^-1)^-1`, which equals
/// `(I - K H) P`, symmetrized explicitly.
pub fn iterated_update<F>(
    state: &NavState,
    cov: &Covariance18,
    mut residual_builder: F,
    max_iter: usize,
    tol: f64,
) -> Result<(NavState, Covariance18, UpdateStats), StateError>
where
    F: FnMut(&NavState) -> Residuals,
{
    let prior = *state;
    let mut x = *state;
    let mut stats = UpdateStats::default();

    let p_inv = {
        let chol = nalgebra::Cholesky::new(symmetrized(cov))
            .ok_or(StateError::SingularInnovation)?;
        chol.inverse()
    };

    let mut posterior_cov = *cov;
    for iter in 0..max_iter.max(1) {
        let res = residual_builder(&x);
        stats.rows = res.rows();
        if res.rows() == 0 {
            // Nothing to do: keep the prior untouched.
            if iter == 0 {
                return Ok((prior, *cov, stats));
            }
            break;
        }
        stats.iterations = iter + 1;

        // H' R^-1 applied row-wise.
        let m = res.rows();
        let mut ht_rinv = DMatrix::<f64>::zeros(ERROR_DIM, m);
        for row in 0..m {
            let w = 1.0 / res.noise_var[row].max(1e-18);
            for col in 0..ERROR_DIM {
                ht_rinv[(col, row)] = res.h[(row, col)] * w;
            }
        }
        let mut a = Covariance18::zeros();
        let hth = &ht_rinv * &res.h;
        for i in 0..ERROR_DIM {
            for j in 0..ERROR_DIM {
                a[(i, j)] = hth[(i, j)] + p_inv[(i, j)];
            }
        }
        a = symmetrized(&a);

        let eig = a.symmetric_eigenvalues();
        let (mut lmin, mut lmax) = (f64::INFINITY, 0.0f64);
        for &l in eig.iter() {
            lmin = lmin.min(l);
            lmax = lmax.max(l);
        }
        if lmin <= 0.0 || lmax / lmin > 1e12 {
            return Err(StateError::SingularInnovation);
        }
        let a_chol = nalgebra::Cholesky::new(a).ok_or(StateError::SingularInnovation)?;

        let e = boxminus(&x, &prior);
        let htr = &ht_rinv * &res.r;
        let mut b = ErrorVector::zeros();
        for i in 0..ERROR_DIM {
            b[i] = htr[i] + (p_inv * e)[i];
        }
        let delta = -a_chol.solve(&b);
        x = boxplus(&x, &delta);
        posterior_cov = symmetrized(&a_chol.inverse());

        if delta.norm() < tol {
            stats.converged = true;
            break;
        }
    }

    Ok((x, posterior_cov, stats))
}

/// Initialize the filter from a stationary IMU window.
///
/// Averages fix the gravity direction and the gyro bias; the accel bias
/// starts at zero. The initial pose is the identity (global frame anchored at
/// the first body frame).
pub fn initialize_from_stationary(
    samples: &[ImuSample],
    gravity_magnitude: f64,
) -> Result<(NavState, Covariance18), StateError> {
    if samples.len() < 10 {
        return Err(StateError::InsufficientInitData);
    }
    let n = samples.len() as f64;
    let mean_gyro: Vector3<f64> = samples.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    let mean_accel: Vector3<f64> = samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    if mean_accel.norm() < 1e-6 {
        return Err(StateError::InsufficientInitData);
    }

    let state = NavState {
        rotation: Rotation::identity(),
        position: Vector3::zeros(),
        velocity: Vector3::zeros(),
        bias_gyro: mean_gyro,
        bias_accel: Vector3::zeros(),
        gravity: -mean_accel.normalize() * gravity_magnitude,
    };

    let mut cov = Covariance18::zeros();
    let diag = [1e-4, 1e-4, 1e-2, 1e-4, 1e-2, 1e-4];
    for (bi, &v) in diag.iter().enumerate() {
        for i in 0..3 {
            cov[(bi * 3 + i, bi * 3 + i)] = v;
        }
    }
    Ok((state, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec3(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn rand_state(rng: &mut impl Rng) -> NavState {
        NavState {
            rotation: so3_exp(&rand_vec3(rng, 2.0)),
            position: rand_vec3(rng, 10.0),
            velocity: rand_vec3(rng, 3.0),
            bias_gyro: rand_vec3(rng, 0.05),
            bias_accel: rand_vec3(rng, 0.2),
            gravity: Vector3::new(0.0, 0.0, -9.81) + rand_vec3(rng, 0.1),
        }
    }

    #[test]
    fn propagate_stationary_cancels_gravity() {
        let state = NavState::at_rest(9.81);
        let cov = Covariance18::identity() * 1e-6;
        let u = ImuSample {
            t: 0.0,
            gyro: Vector3::zeros(),
            accel: Vector3::new(0.0, 0.0, 9.81),
        };
        let (next, next_cov) =
            propagate(&state, &cov, &u, 0.01, &NoiseParams::consumer_grade()).unwrap();
        assert_relative_eq!(next.position, Vector3::zeros(), epsilon = 1e-15);
        assert_relative_eq!(next.velocity, Vector3::zeros(), epsilon = 1e-15);
        assert!(next.rotation.angle_to(&Rotation::identity()) < 1e-15);
        assert!(next_cov.trace() > cov.trace());
        assert!(covariance_is_psd(&next_cov));
    }

    #[test]
    fn propagate_free_fall() {
        let state = NavState::at_rest(9.81);
        let cov = Covariance18::zeros();
        let u = ImuSample {
            t: 0.0,
            gyro: Vector3::zeros(),
            accel: Vector3::zeros(),
        };
        let dt = 0.02;
        let (next, _) = propagate(&state, &cov, &u, dt, &NoiseParams::zero()).unwrap();
        assert_relative_eq!(next.velocity, state.gravity * dt, epsilon = 1e-12);
        assert_relative_eq!(
            next.position,
            state.gravity * (0.5 * dt * dt),
            epsilon = 1e-12
        );
    }

    #[test]
    fn propagate_constant_rotation_rate() {
        let mut state = NavState::at_rest(9.81);
        // Accel input that keeps the body still while it yaws in place.
        let cov = Covariance18::zeros();
        let dt = 0.001;
        for k in 0..1000 {
            let accel = state.rotation.unrotate(&-state.gravity);
            let u = ImuSample {
                t: k as f64 * dt,
                gyro: Vector3::new(0.0, 0.0, 1.0),
                accel,
            };
            let (next, _) = propagate(&state, &cov, &u, dt, &NoiseParams::zero()).unwrap();
            state = next;
        }
        let expect = so3_exp(&Vector3::new(0.0, 0.0, 1.0));
        assert!(state.rotation.angle_to(&expect) < 1e-4);
    }

    #[test]
    fn propagate_rejects_bad_dt() {
        let state = NavState::at_rest(9.81);
        let u = ImuSample {
            t: 0.0,
            gyro: Vector3::zeros(),
            accel: Vector3::zeros(),
        };
        let cov = Covariance18::zeros();
        assert!(matches!(
            propagate(&state, &cov, &u, 0.0, &NoiseParams::zero()),
            Err(StateError::NonPositiveDt(_))
        ));
        assert!(matches!(
            propagate(&state, &cov, &u, 0.5, &NoiseParams::zero()),
            Err(StateError::NonPositiveDt(_))
        ));
    }

    #[test]
    fn transition_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let state = rand_state(&mut rng);
            let u = ImuSample {
                t: 0.0,
                gyro: rand_vec3(&mut rng, 1.0),
                accel: rand_vec3(&mut rng, 5.0) + Vector3::new(0.0, 0.0, 9.81),
            };
            let dt = 0.01;
            let f = transition_jacobian(&state, &u, dt);
            let cov = Covariance18::zeros();
            let (base, _) = propagate(&state, &cov, &u, dt, &NoiseParams::zero()).unwrap();
            let eps = 1e-6;
            for c in 0..ERROR_DIM {
                let mut d = ErrorVector::zeros();
                d[c] = eps;
                let (plus, _) =
                    propagate(&boxplus(&state, &d), &cov, &u, dt, &NoiseParams::zero()).unwrap();
                d[c] = -eps;
                let (minus, _) =
                    propagate(&boxplus(&state, &d), &cov, &u, dt, &NoiseParams::zero()).unwrap();
                let fd = (boxminus(&plus, &base) - boxminus(&minus, &base)) / (2.0 * eps);
                let col = f.column(c).into_owned();
                let scale = col.norm().max(1.0);
                assert!(
                    (fd - col).norm() / scale < 1e-4,
                    "column {c}: fd={fd:?} vs analytic={col:?}"
                );
            }
        }
    }

    #[test]
    fn boxplus_boxminus_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let zero = ErrorVector::zeros();
        for _ in 0..200 {
            let x = rand_state(&mut rng);
            // boxplus(x, 0) = x
            let same = boxplus(&x, &zero);
            assert!(boxminus(&same, &x).norm() < 1e-12);

            let mut d = ErrorVector::zeros();
            for i in 0..ERROR_DIM {
                d[i] = rng.random_range(-0.3..0.3);
            }
            let y = boxplus(&x, &d);
            assert_relative_eq!(boxminus(&y, &x), d, epsilon = 1e-10);
        }
    }

    #[test]
    fn boxplus_position_only() {
        let x = NavState::at_rest(9.81);
        let mut d = ErrorVector::zeros();
        d[block::POS] = 1.0;
        let y = boxplus(&x, &d);
        assert_eq!(y.position, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(y.velocity, x.velocity);
        assert!(y.rotation.angle_to(&x.rotation) < 1e-15);
    }

    #[test]
    fn iterated_update_empty_residual_is_identity() {
        let state = NavState::at_rest(9.81);
        let cov = Covariance18::identity();
        let (post, post_cov, stats) =
            iterated_update(&state, &cov, |_| Residuals::empty(), 5, 1e-6).unwrap();
        assert!(boxminus(&post, &state).norm() == 0.0);
        assert_eq!(post_cov, cov);
        assert_eq!(stats.rows, 0);
    }

    #[test]
    fn iterated_update_huge_noise_barely_moves() {
        let state = NavState::at_rest(9.81);
        let cov = Covariance18::identity();
        let meas = 5.0; // measured p_x
        let builder = |x: &NavState| {
            let mut h = DMatrix::zeros(1, ERROR_DIM);
            h[(0, block::POS)] = 1.0;
            Residuals {
                r: DVector::from_element(1, x.position.x - meas),
                h,
                noise_var: DVector::from_element(1, 1e12),
            }
        };
        let (post, _, _) = iterated_update(&state, &cov, builder, 5, 1e-9).unwrap();
        assert!((post.position - state.position).norm() < 1e-6 * meas.abs());
    }

    #[test]
    fn iterated_update_linear_position_measurement() {
        let state = NavState::at_rest(9.81);
        let cov = Covariance18::identity();
        let z = Vector3::new(0.4, -0.2, 0.9);
        let builder = |x: &NavState| {
            let mut h = DMatrix::zeros(3, ERROR_DIM);
            for i in 0..3 {
                h[(i, block::POS + i)] = 1.0;
            }
            Residuals {
                r: DVector::from_iterator(3, (x.position - z).iter().copied()),
                h,
                noise_var: DVector::from_element(3, 1e-6),
            }
        };
        let (post, post_cov, stats) = iterated_update(&state, &cov, builder, 5, 1e-10).unwrap();
        assert!((post.position - z).norm() < 1e-4);
        assert!(stats.converged);
        assert!(covariance_is_psd(&post_cov));
    }

    /// One linear iteration must reproduce the textbook Kalman update.
    #[test]
    fn iterated_update_matches_one_step_kalman() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let state = rand_state(&mut rng);
        let mut cov = Covariance18::identity();
        for i in 0..ERROR_DIM {
            cov[(i, i)] = rng.random_range(0.1..2.0);
        }
        // Linear measurement of (p, v) with moderate noise.
        let m = 6;
        let mut h = DMatrix::zeros(m, ERROR_DIM);
        for i in 0..3 {
            h[(i, block::POS + i)] = 1.0;
            h[(3 + i, block::VEL + i)] = 1.0;
        }
        let noise = 0.01;
        let mut r0 = DVector::zeros(m);
        for i in 0..m {
            r0[i] = rng.random_range(-0.5..0.5);
        }

        let h2 = h.clone();
        let r2 = r0.clone();
        let builder = move |_x: &NavState| Residuals {
            r: r2.clone(),
            h: h2.clone(),
            noise_var: DVector::from_element(m, noise),
        };
        let (post, post_cov, _) = iterated_update(&state, &cov, builder, 1, 1e-30).unwrap();

        // Reference: K = P H' (H P H' + R)^-1, dx = -K r, P+ = (I-KH)P.
        let p = DMatrix::from_fn(ERROR_DIM, ERROR_DIM, |i, j| cov[(i, j)]);
        let s = &h * &p * h.transpose() + DMatrix::identity(m, m) * noise;
        let k = &p * h.transpose() * s.try_inverse().unwrap();
        let dx_ref = -&k * &r0;
        let p_ref = (DMatrix::identity(ERROR_DIM, ERROR_DIM) - &k * &h) * &p;

        let dx = boxminus(&post, &state);
        for i in 0..ERROR_DIM {
            assert!((dx[i] - dx_ref[i]).abs() < 1e-8, "dx[{i}]");
            for j in 0..ERROR_DIM {
                assert!((post_cov[(i, j)] - p_ref[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn stationary_initialization() {
        let mut samples = Vec::new();
        for k in 0..400 {
            samples.push(ImuSample {
                t: k as f64 / 400.0,
                gyro: Vector3::new(0.002, -0.001, 0.0005),
                accel: Vector3::new(0.1, 0.0, 9.8),
            });
        }
        let (state, cov) = initialize_from_stationary(&samples, 9.81).unwrap();
        assert_relative_eq!(
            state.bias_gyro,
            Vector3::new(0.002, -0.001, 0.0005),
            epsilon = 1e-12
        );
        let g = state.gravity.norm();
        assert!((9.6..=10.0).contains(&g));
        assert!(covariance_is_psd(&cov));
    }
}
