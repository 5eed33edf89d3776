//! Shared least-squares plane solver.
//!
//! Both the map planes and the unit-sphere depth planes use the same
//! convention: solve `A n' = -1` for the scaled normal, then
//! `n = n'/|n'|`, `l = 1/|n'|`, so the plane equation is `n.p + l = 0`.
//! That system degenerates when the plane passes near the origin (the
//! offset tends to zero), so a centered total-least-squares fit takes over
//! in that regime; collinear point sets stay invalid either way.

use nalgebra::{DMatrix, DVector, Vector3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub valid: bool,
}

impl FittedPlane {
    pub fn invalid() -> Self {
        Self {
            normal: Vector3::zeros(),
            offset: 0.0,
            valid: false,
        }
    }

    /// Signed point-to-plane distance.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

/// Minimum in-plane spread ratio (second-to-first centered singular value)
/// for a point set to define a trustworthy plane. Below this the points are
/// nearly collinear — e.g. neighbors from a single scan ring — and the
/// fitted normal is arbitrary around the line even though every defining
/// point sits exactly on the fit.
pub const MIN_PLANE_CONDITIONING: f64 = 0.03;

/// Centered total-least-squares plane: unit normal, centroid, and the
/// in-plane spread ratio `s1/s0`. Returns `None` for coincident points.
fn tls_fit(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>, f64)> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let centered = DMatrix::from_fn(points.len(), 3, |i, j| points[i][j] - centroid[j]);
    let svd = centered.svd(false, true);
    let s = &svd.singular_values;
    if s[0] <= 0.0 {
        return None;
    }
    let vt = svd.v_t.unwrap();
    let last = vt.nrows() - 1;
    let normal = Vector3::new(vt[(last, 0)], vt[(last, 1)], vt[(last, 2)]).normalize();
    Some((normal, centroid, s[1] / s[0]))
}

fn validated(plane: FittedPlane, points: &[Vector3<f64>], residual_threshold: f64) -> FittedPlane {
    for p in points {
        if plane.distance(p).abs() > residual_threshold {
            return FittedPlane {
                valid: false,
                ..plane
            };
        }
    }
    plane
}

/// Fit a plane to `points`, flagging it invalid when the points do not
/// define one or any defining point sits farther than `residual_threshold`
/// from the fit.
pub fn fit_plane_offset(points: &[Vector3<f64>], residual_threshold: f64) -> FittedPlane {
    let m = points.len();
    if m < 3 {
        return FittedPlane::invalid();
    }
    let Some((tls_normal, centroid, conditioning)) = tls_fit(points) else {
        return FittedPlane::invalid();
    };
    if conditioning < MIN_PLANE_CONDITIONING {
        return FittedPlane::invalid();
    }
    let a = DMatrix::from_fn(m, 3, |i, j| points[i][j]);
    let b = DVector::from_element(m, -1.0);
    let svd = a.svd(true, true);
    let smax = svd.singular_values[0];
    let smin = svd.singular_values[svd.singular_values.len() - 1];
    if smax > 0.0 && smin / smax >= 1e-6 {
        if let Ok(sol) = svd.solve(&b, 0.0) {
            let scaled = Vector3::new(sol[0], sol[1], sol[2]);
            let norm = scaled.norm();
            if norm.is_finite() && norm >= 1e-12 {
                let plane = FittedPlane {
                    normal: scaled / norm,
                    offset: 1.0 / norm,
                    valid: true,
                };
                return validated(plane, points, residual_threshold);
            }
        }
    }
    // Near-origin or otherwise ill-conditioned: total least squares.
    validated(
        FittedPlane {
            normal: tls_normal,
            offset: -tls_normal.dot(&centroid),
            valid: true,
        },
        points,
        residual_threshold,
    )
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    /// Independent total-least-squares plane fit: centroid plus the singular
    /// vector of the centered points with the smallest singular value.
    pub fn tls_plane(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
        let (n, c, _) = tls_fit(points).expect("oracle expects a plane-spanning point set");
        (n, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn plane_through_origin_uses_tls_fallback() {
        // Points on z = 0 force the offset to zero; A n' = -1 alone has no
        // solution, so the centered fit must take over.
        let pts = [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(-1.0, 0.5, 0.0),
            Vector3::new(0.3, -0.8, 0.0),
            Vector3::new(2.0, 2.0, 0.0),
        ];
        let plane = fit_plane_offset(&pts, 0.1);
        assert!(plane.valid);
        assert_relative_eq!(plane.normal.z.abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(plane.offset, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn collinear_points_invalid_in_both_regimes() {
        // Through the origin (TLS path) and away from it (direct path).
        let through: Vec<Vector3<f64>> = (0..5)
            .map(|k| Vector3::new(k as f64, 2.0 * k as f64, -k as f64))
            .collect();
        assert!(!fit_plane_offset(&through, 0.1).valid);
        let away: Vec<Vector3<f64>> = (0..5)
            .map(|k| Vector3::new(k as f64, 2.0 * k as f64, 1.0 + k as f64))
            .collect();
        assert!(!fit_plane_offset(&away, 0.1).valid);
    }
}
