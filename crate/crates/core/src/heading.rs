//! Heading estimation for global-frame filters.
//!
//! The heading is kept out of the filter state. Each visible landmark gives
//! body-frame rows `H_L T(beta) (x_i - x_v) = y`, and the desired heading
//! `beta_d` minimizes the squared residue of all of them. For pure bearing
//! rows the residue is a sinusoid in `2 beta`, which gives four analytic
//! candidates; the best one is then polished by Newton steps on the full
//! residue, which also covers range and rate rows.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::geom::{angle_diff, wrap_angle, Rotation2D};

/// Offsets below this norm carry no heading information.
pub const MIN_OFFSET: f64 = 1e-9;

/// Body-frame rows of one landmark together with its global offset from
/// the vehicle estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadingRows {
    /// `x_i - x_v` in global coordinates.
    pub offset: Vector2<f64>,
    /// Rows acting on the body-frame position (m x 2).
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl HeadingRows {
    pub fn new(offset: Vector2<f64>, h: DMatrix<f64>, y: DVector<f64>) -> Self {
        debug_assert_eq!(h.ncols(), 2);
        debug_assert_eq!(h.nrows(), y.len());
        Self { offset, h, y }
    }

    /// A single bearing row `h(theta) T(beta) d = 0`.
    pub fn bearing(offset: Vector2<f64>, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(offset, DMatrix::from_row_slice(1, 2, &[c, -s]), DVector::zeros(1))
    }

    /// Per row: `(a, b, y)` with `row(beta) = a cos(phi) + b sin(phi)`, `phi = pi/2 - beta`.
    fn coefficients(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let d = self.offset;
        let kd = Vector2::new(-d.y, d.x);
        (0..self.h.nrows()).map(move |i| {
            let g = Vector2::new(self.h[(i, 0)], self.h[(i, 1)]);
            (g.dot(&d), g.dot(&kd), self.y[i])
        })
    }
}

/// `sum ||y - H T(beta) d||^2`
pub fn residue(beta: f64, rows: &[HeadingRows]) -> f64 {
    let t: Matrix2<f64> = Rotation2D::body_from_global(beta).map(|r| r.matrix()).unwrap_or_else(|_| Matrix2::identity());
    rows.iter()
        .map(|r| {
            let body = t * r.offset;
            let pred = &r.h * DVector::from_column_slice(body.as_slice());
            (&r.y - pred).norm_squared()
        })
        .sum()
}

/// First and second derivative of the residue with respect to `beta`.
fn residue_derivatives(beta: f64, rows: &[HeadingRows]) -> (f64, f64) {
    let phi = FRAC_PI_2 - beta;
    let (s, c) = phi.sin_cos();
    let (mut d1, mut d2) = (0.0, 0.0);
    for r in rows {
        for (a, b, y) in r.coefficients() {
            let e = y - a * c - b * s;
            let de = a * s - b * c;
            // d/dphi of e^2 and its second derivative
            d1 += 2.0 * e * de;
            d2 += 2.0 * de * de + 2.0 * e * (a * c + b * s);
        }
    }
    // dphi/dbeta = -1
    (-d1, d2)
}

/// The four stationary headings of the bearing part of the residue.
pub fn analytic_candidates(rows: &[HeadingRows]) -> Option<[f64; 4]> {
    let (mut num, mut den) = (0.0, 0.0);
    for r in rows {
        for (a, b, y) in r.coefficients() {
            if y != 0.0 {
                continue;
            }
            num += 2.0 * a * b;
            den += a * a - b * b;
        }
    }
    if num.abs() < 1e-300 && den.abs() < 1e-300 {
        return None;
    }
    let phi0 = 0.5 * num.atan2(den);
    Some([0.0, 1.0, 2.0, 3.0].map(|k| wrap_angle(FRAC_PI_2 - (phi0 + k * FRAC_PI_2))))
}

fn newton_polish(beta0: f64, rows: &[HeadingRows]) -> f64 {
    let mut beta = beta0;
    let mut best = residue(beta, rows);
    for _ in 0..50 {
        let (g, h) = residue_derivatives(beta, rows);
        if g.abs() < 1e-15 {
            break;
        }
        let step = if h > 0.0 { -g / h } else { -g.signum() * 1e-3 };
        let mut trial = wrap_angle(beta + step);
        let mut res = residue(trial, rows);
        let mut shrink = 0;
        while res > best && shrink < 30 {
            trial = wrap_angle(beta + step * 0.5f64.powi(shrink + 1));
            res = residue(trial, rows);
            shrink += 1;
        }
        if res > best {
            break;
        }
        let moved = angle_diff(trial, beta).abs();
        beta = trial;
        best = res;
        if moved < 1e-14 {
            break;
        }
    }
    beta
}

/// Desired heading minimizing the residue of the visible rows. Returns
/// `beta_hat` when no offset is informative. Among equally good minima the
/// one closest to `beta_hat` wins.
pub fn beta_d_closed_form_2d(rows: &[HeadingRows], beta_hat: f64) -> f64 {
    let rows: Vec<HeadingRows> = rows.iter().filter(|r| r.offset.norm() > MIN_OFFSET).cloned().collect();
    if rows.is_empty() {
        return beta_hat;
    }
    let mut candidates: Vec<f64> = Vec::new();
    match analytic_candidates(&rows) {
        Some(c) => candidates.extend(c),
        None => candidates.extend((0..72).map(|k| -PI + k as f64 * TAU / 72.0)),
    }
    let scale = rows.iter().map(|r| r.y.norm_squared() + r.offset.norm_squared()).sum::<f64>().max(1.0);
    let tie = 1e-12 * scale;
    let pick = |cands: &[f64]| {
        let mut best = cands[0];
        let mut best_res = residue(best, &rows);
        for &c in &cands[1..] {
            let res = residue(c, &rows);
            let closer = angle_diff(c, beta_hat).abs() < angle_diff(best, beta_hat).abs();
            if res < best_res - tie || (res <= best_res + tie && closer) {
                best = c;
                best_res = res;
            }
        }
        best
    };
    let start = pick(&candidates);
    // polishing all candidates keeps the min-vs-max choice honest when range
    // rows bend the sinusoid
    let polished: Vec<f64> = candidates.iter().map(|&c| newton_polish(c, &rows)).collect();
    let best_polished = pick(&polished);
    if residue(best_polished, &rows) <= residue(start, &rows) {
        best_polished
    } else {
        start
    }
}

/// Convenience form for bearing-only rows from global estimates.
pub fn beta_d_from_bearings(landmarks: &[Vector2<f64>], vehicle: &Vector2<f64>, thetas: &[f64], beta_hat: f64) -> f64 {
    let rows: Vec<HeadingRows> = landmarks
        .iter()
        .zip(thetas)
        .map(|(x, &th)| HeadingRows::bearing(x - vehicle, th))
        .collect();
    beta_d_closed_form_2d(&rows, beta_hat)
}

/// One step of `beta' = omega + gamma (beta_d - beta)` along the shortest arc.
pub fn track_heading(beta_hat: f64, omega: f64, beta_d: f64, gamma: f64, dt: f64) -> f64 {
    wrap_angle(beta_hat + dt * (omega + gamma * angle_diff(beta_d, beta_hat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bearing_of(beta: f64, offset: Vector2<f64>) -> f64 {
        let body = Rotation2D::body_from_global(beta).unwrap().apply(&offset);
        body.x.atan2(body.y)
    }

    fn grid_min(rows: &[HeadingRows]) -> f64 {
        (0..62_832)
            .map(|k| residue(-PI + k as f64 * 1e-4, rows))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn consistent_single_landmark_has_zero_residue() {
        let offset = Vector2::new(3.0, -2.0);
        let beta = 0.8;
        let rows = vec![HeadingRows::bearing(offset, bearing_of(beta, offset))];
        let b = beta_d_closed_form_2d(&rows, 0.5);
        assert!(residue(b, &rows) < 1e-10);
        assert!(angle_diff(b, beta).abs() < 1e-9);
    }

    #[test]
    fn ambiguity_resolved_towards_current_estimate() {
        let offset = Vector2::new(3.0, -2.0);
        let beta = 0.8;
        let rows = vec![HeadingRows::bearing(offset, bearing_of(beta, offset))];
        let b = beta_d_closed_form_2d(&rows, beta + PI - 0.1);
        assert!(angle_diff(b, beta + PI).abs() < 1e-9);
    }

    #[test]
    fn matches_grid_search_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let beta = rng.random_range(-PI..PI);
            let rows: Vec<HeadingRows> = (0..5)
                .map(|_| {
                    let off = Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
                    HeadingRows::bearing(off, bearing_of(beta, off) + rng.random_range(-0.1..0.1))
                })
                .collect();
            let b = beta_d_closed_form_2d(&rows, rng.random_range(-PI..PI));
            assert!(residue(b, &rows) <= grid_min(&rows) + 2e-4);
        }
    }

    #[test]
    fn range_rows_are_handled() {
        let beta = -2.2;
        let rows: Vec<HeadingRows> = [Vector2::new(4.0, 1.0), Vector2::new(-2.0, 5.0)]
            .into_iter()
            .map(|off| {
                let th = bearing_of(beta, off);
                let (s, c) = th.sin_cos();
                HeadingRows::new(
                    off,
                    DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
                    DVector::from_vec(vec![0.0, off.norm() + 0.05]),
                )
            })
            .collect();
        let b = beta_d_closed_form_2d(&rows, 0.0);
        assert!(residue(b, &rows) <= grid_min(&rows) + 1e-9);
        assert!(angle_diff(b, beta).abs() < 0.05);
    }

    #[test]
    fn degenerate_offsets_return_current_heading() {
        let rows = vec![HeadingRows::bearing(Vector2::zeros(), 0.3)];
        assert_eq!(beta_d_closed_form_2d(&rows, 1.25), 1.25);
        assert_eq!(beta_d_closed_form_2d(&[], -0.5), -0.5);
    }

    #[test]
    fn tracking_examples() {
        assert_eq!(track_heading(0.4, 0.0, 0.4, 1.0, 0.01), 0.4);
        // first-order lag converges at rate gamma
        let mut b = 0.0;
        for _ in 0..100 {
            b = track_heading(b, 0.0, 1.0, 1.0, 0.01);
        }
        assert!((1.0 - b - (-1.0f64).exp()).abs() < 0.01);
        // shortest arc goes through pi
        let b = track_heading(3.1, 0.0, -3.1, 1.0, 0.01);
        assert!(!(-3.1..=3.1).contains(&b));
    }

    proptest! {
        #[test]
        fn never_worse_than_analytic_candidates(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<HeadingRows> = (0..rng.random_range(1..6))
                .map(|_| {
                    let off = Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
                    HeadingRows::bearing(off, rng.random_range(-PI..PI))
                })
                .collect();
            let b = beta_d_closed_form_2d(&rows, rng.random_range(-PI..PI));
            let res = residue(b, &rows);
            for c in analytic_candidates(&rows).unwrap() {
                let rc = residue(c, &rows);
                // equal minima differ only by rounding
                prop_assert!(res <= rc + 1e-12 * rc.max(1.0), "{res} vs {rc}");
            }
        }

        #[test]
        fn rotating_the_frame_shifts_the_heading(seed in 0u64..200, delta in -3.0..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let beta = rng.random_range(-PI..PI);
            let offs: Vec<Vector2<f64>> = (0..4)
                .map(|_| Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
                .collect();
            let rows: Vec<HeadingRows> = offs.iter().map(|&o| HeadingRows::bearing(o, bearing_of(beta, o) + rng.random_range(-0.05..0.05))).collect();
            let rot = Rotation2D::new(delta).unwrap();
            let rotated: Vec<HeadingRows> = rows.iter().map(|r| HeadingRows::new(rot.apply(&r.offset), r.h.clone(), r.y.clone())).collect();
            let b0 = beta_d_closed_form_2d(&rows, beta);
            let b1 = beta_d_closed_form_2d(&rotated, wrap_angle(beta + delta));
            prop_assert!(angle_diff(b1, b0 + delta).abs() < 1e-6);
        }
    }
}
