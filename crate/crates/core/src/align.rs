//! Rigid alignment of planar point sets and circle fitting.
//!
//! Map estimates built without an absolute reference can be offset from the
//! truth by a rotation and translation that no measurement constrains. The
//! helpers here remove that offset before errors are compared.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};

use crate::error::{Result, SlamError};

/// Planar rigid transform `p -> R(angle) p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid2 {
    pub angle: f64,
    pub translation: Vector2<f64>,
}

impl Rigid2 {
    pub fn identity() -> Self {
        Self { angle: 0.0, translation: Vector2::zeros() }
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation() * p + self.translation
    }
}

fn xy(v: &DVector<f64>) -> Vector2<f64> {
    Vector2::new(v[0], v[1])
}

/// Least-squares rigid transform taking `source` onto `target`.
///
/// Only the first two coordinates of each point are used.
pub fn procrustes(source: &[DVector<f64>], target: &[DVector<f64>]) -> Result<Rigid2> {
    if source.len() != target.len() {
        return Err(SlamError::Dimension(format!(
            "alignment needs equal sizes, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    if source.is_empty() {
        return Err(SlamError::Dimension("alignment needs at least one point".into()));
    }
    let n = source.len() as f64;
    let cs = source.iter().map(xy).sum::<Vector2<f64>>() / n;
    let ct = target.iter().map(xy).sum::<Vector2<f64>>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (s, t) in source.iter().zip(target) {
        let a = xy(s) - cs;
        let b = xy(t) - ct;
        sxx += a.dot(&b);
        sxy += a.x * b.y - a.y * b.x;
    }
    let angle = if sxx == 0.0 && sxy == 0.0 { 0.0 } else { sxy.atan2(sxx) };
    let rot = Rigid2 { angle, translation: Vector2::zeros() }.rotation();
    Ok(Rigid2 { angle, translation: ct - rot * cs })
}

/// Per-point distances after aligning `estimate` onto `truth`.
pub fn aligned_errors(estimate: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<Vec<f64>> {
    let tf = procrustes(estimate, truth)?;
    Ok(estimate.iter().zip(truth).map(|(e, t)| (tf.apply(&xy(e)) - xy(t)).norm()).collect())
}

/// RMS distance left after alignment.
pub fn residual_rms(estimate: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    let e = aligned_errors(estimate, truth)?;
    Ok((e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt())
}

/// Algebraic circle fit through planar points. Returns `(center, radius)`.
pub fn fit_circle(points: &[DVector<f64>]) -> Result<(Vector2<f64>, f64)> {
    if points.len() < 3 {
        return Err(SlamError::Dimension("circle fit needs three points".into()));
    }
    let mut a = DMatrix::zeros(points.len(), 3);
    let mut b = DVector::zeros(points.len());
    for (i, p) in points.iter().enumerate() {
        a[(i, 0)] = p[0];
        a[(i, 1)] = p[1];
        a[(i, 2)] = 1.0;
        b[i] = p[0] * p[0] + p[1] * p[1];
    }
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    let sol: Vector3<f64> = ata
        .lu()
        .solve(&atb)
        .map(|s| Vector3::new(s[0], s[1], s[2]))
        .ok_or_else(|| SlamError::InvalidInput("collinear points in circle fit".into()))?;
    let center = Vector2::new(sol[0] / 2.0, sol[1] / 2.0);
    let r2 = sol[2] + center.norm_squared();
    if r2 <= 0.0 || !r2.is_finite() {
        return Err(SlamError::InvalidInput("degenerate circle fit".into()));
    }
    Ok((center, r2.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }

    #[test]
    fn recovers_known_transform() {
        let src = vec![pt(0.0, 0.0), pt(1.0, 0.0), pt(0.0, 2.0)];
        let tf = Rigid2 { angle: 0.3, translation: Vector2::new(1.0, -2.0) };
        let dst: Vec<_> = src.iter().map(|p| {
            let q = tf.apply(&xy(p));
            pt(q.x, q.y)
        }).collect();
        let est = procrustes(&src, &dst).unwrap();
        assert_relative_eq!(est.angle, 0.3, epsilon = 1e-12);
        assert_relative_eq!(est.translation, tf.translation, epsilon = 1e-12);
        for e in aligned_errors(&src, &dst).unwrap() {
            assert!(e < 1e-12);
        }
    }

    #[test]
    fn single_point_is_translation() {
        let est = procrustes(&[pt(1.0, 1.0)], &[pt(3.0, 0.0)]).unwrap();
        assert_eq!(est.angle, 0.0);
        assert_relative_eq!(est.translation, Vector2::new(2.0, -1.0));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(procrustes(&[pt(0.0, 0.0)], &[]).is_err());
        assert!(procrustes(&[], &[]).is_err());
    }

    #[test]
    fn residual_matches_angle_grid_search() {
        let truth = vec![pt(0.0, 0.0), pt(4.0, 1.0), pt(-2.0, 3.0), pt(1.0, -5.0), pt(3.0, 3.0)];
        let noise = [(0.1, -0.05), (-0.2, 0.1), (0.05, 0.15), (0.0, -0.1), (0.12, 0.02)];
        let tf = Rigid2 { angle: -0.7, translation: Vector2::new(2.0, 1.0) };
        let est: Vec<_> = truth
            .iter()
            .zip(noise)
            .map(|(p, n)| {
                let q = tf.apply(&xy(p));
                pt(q.x + n.0, q.y + n.1)
            })
            .collect();
        // For a fixed angle the best translation is the centroid difference.
        let rms_at = |a: f64| {
            let r = Rigid2 { angle: a, translation: Vector2::zeros() }.rotation();
            let n = truth.len() as f64;
            let ce = est.iter().map(xy).sum::<Vector2<f64>>() / n;
            let ct = truth.iter().map(xy).sum::<Vector2<f64>>() / n;
            (est.iter().zip(&truth).map(|(e, t)| (r * (xy(e) - ce) - (xy(t) - ct)).norm_squared()).sum::<f64>() / n).sqrt()
        };
        let mut best = f64::INFINITY;
        let mut a = -std::f64::consts::PI;
        while a < std::f64::consts::PI {
            best = best.min(rms_at(a));
            a += 1e-4;
        }
        let got = residual_rms(&est, &truth).unwrap();
        assert!(got <= best + 1e-12);
        assert!((got - best).abs() < 1e-6, "{got} vs {best}");
        assert_relative_eq!(procrustes(&est, &truth).unwrap().angle, 0.7, epsilon = 0.05);
    }

    #[test]
    fn residual_ignores_prior_rigid_motion() {
        let truth = vec![pt(0.0, 0.0), pt(4.0, 1.0), pt(-2.0, 3.0)];
        let est = vec![pt(0.1, 0.0), pt(4.0, 1.2), pt(-2.0, 2.9)];
        let moved: Vec<_> = est
            .iter()
            .map(|p| {
                let q = Rigid2 { angle: 2.0, translation: Vector2::new(-7.0, 3.0) }.apply(&xy(p));
                pt(q.x, q.y)
            })
            .collect();
        assert_relative_eq!(residual_rms(&est, &truth).unwrap(), residual_rms(&moved, &truth).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn circle_fit_exact() {
        let pts: Vec<_> = (0..7)
            .map(|k| {
                let a = k as f64 * 0.4;
                pt(2.0 + 5.0 * a.cos(), -1.0 + 5.0 * a.sin())
            })
            .collect();
        let (c, r) = fit_circle(&pts).unwrap();
        assert_relative_eq!(c, Vector2::new(2.0, -1.0), epsilon = 1e-9);
        assert_relative_eq!(r, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn circle_fit_rejects_collinear() {
        assert!(fit_circle(&[pt(0.0, 0.0), pt(1.0, 1.0), pt(2.0, 2.0)]).is_err());
    }

    proptest! {
        #[test]
        fn aligned_error_never_exceeds_raw(
            pts in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0, -0.5f64..0.5, -0.5f64..0.5), 2..8),
        ) {
            let truth: Vec<_> = pts.iter().map(|p| pt(p.0, p.1)).collect();
            let est: Vec<_> = pts.iter().map(|p| pt(p.0 + p.2, p.1 + p.3)).collect();
            let raw: f64 = est.iter().zip(&truth).map(|(e, t)| (e - t).norm_squared()).sum();
            let al: f64 = aligned_errors(&est, &truth).unwrap().iter().map(|e| e * e).sum();
            prop_assert!(al <= raw + 1e-9);
        }
    }
}
