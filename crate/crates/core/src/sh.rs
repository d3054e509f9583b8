//! Real spherical harmonics up to degree 2 for view-dependent radiance.
//!
//! Both the octree radiance field and the Gaussian colors store 9
//! coefficients per channel (27 scalars, channel-major layout
//! `coeffs[ch * 9 + basis]`). Color is the clamped basis expansion.

use nalgebra::Vector3;

/// Number of basis functions (degree 2).
pub const NUM_BASIS: usize = 9;
/// Coefficients per color triple.
pub const NUM_COEFFS: usize = 27;

/// Y_0^0
pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2_XY: f64 = 1.092_548_430_592_079_2;
const C2_Z2: f64 = 0.315_391_565_252_520_05;
const C2_X2Y2: f64 = 0.546_274_215_296_039_6;

/// DC coefficient that evaluates to `value` from every direction.
pub fn dc_for_constant(value: f64) -> f64 {
    value / C0
}

/// Basis values at a unit direction, ordered
/// `[Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]`.
pub fn basis(dir: &Vector3<f64>) -> [f64; NUM_BASIS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2_XY * x * y,
        C2_XY * y * z,
        C2_Z2 * (3.0 * z * z - 1.0),
        C2_XY * x * z,
        C2_X2Y2 * (x * x - y * y),
    ]
}

/// Formal partial derivatives of each basis function w.r.t. (x, y, z).
///
/// Callers composing with a normalization (direction from a position) must
/// project through `(I - d d^T) / r` themselves.
pub fn basis_grad(dir: &Vector3<f64>) -> [Vector3<f64>; NUM_BASIS] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    [
        Vector3::zeros(),
        Vector3::new(0.0, C1, 0.0),
        Vector3::new(0.0, 0.0, C1),
        Vector3::new(C1, 0.0, 0.0),
        Vector3::new(C2_XY * y, C2_XY * x, 0.0),
        Vector3::new(0.0, C2_XY * z, C2_XY * y),
        Vector3::new(0.0, 0.0, 6.0 * C2_Z2 * z),
        Vector3::new(C2_XY * z, 0.0, C2_XY * x),
        Vector3::new(2.0 * C2_X2Y2 * x, -2.0 * C2_X2Y2 * y, 0.0),
    ]
}

/// Evaluate the RGB color of a 27-coefficient set along a unit direction.
///
/// Each channel is clamped to >= 0 after summation; the clamp mask per
/// channel is returned so backward passes can zero the blocked gradients.
pub fn eval(coeffs: &[f64; NUM_COEFFS], dir: &Vector3<f64>) -> ([f64; 3], [bool; 3]) {
    eval_basis(coeffs, &basis(dir))
}

/// Same as [`eval`] but with a precomputed basis.
pub fn eval_basis(coeffs: &[f64; NUM_COEFFS], b: &[f64; NUM_BASIS]) -> ([f64; 3], [bool; 3]) {
    let mut rgb = [0.0f64; 3];
    let mut clamped = [false; 3];
    for ch in 0..3 {
        let mut acc = 0.0;
        for (k, bk) in b.iter().enumerate() {
            acc += coeffs[ch * NUM_BASIS + k] * bk;
        }
        if acc < 0.0 {
            clamped[ch] = true;
            acc = 0.0;
        }
        rgb[ch] = acc;
    }
    (rgb, clamped)
}

/// Evaluate restricted to the first `(degree+1)^2` basis functions.
pub fn eval_degree(
    coeffs: &[f64; NUM_COEFFS],
    dir: &Vector3<f64>,
    degree: u8,
) -> ([f64; 3], [bool; 3]) {
    let n = ((degree as usize + 1) * (degree as usize + 1)).min(NUM_BASIS);
    let mut b = basis(dir);
    for bk in b.iter_mut().skip(n) {
        *bk = 0.0;
    }
    eval_basis(coeffs, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Independent oracle: real SH from associated Legendre polynomials in
    // spherical angles, Y_l^m(theta, phi) with the Condon-Shortley phase
    // folded out (matches the common graphics convention).
    fn oracle_basis(dir: &Vector3<f64>) -> [f64; 9] {
        let theta = dir.z.clamp(-1.0, 1.0).acos();
        let phi = dir.y.atan2(dir.x);
        let (ct, st) = (theta.cos(), theta.sin());
        let pi = std::f64::consts::PI;
        // K_l^m normalization.
        let k = |l: i32, m: i32| -> f64 {
            let num = (2 * l + 1) as f64 * factorial(l - m);
            let den = 4.0 * pi * factorial(l + m);
            (num / den).sqrt()
        };
        fn factorial(n: i32) -> f64 {
            (1..=n).map(|v| v as f64).product::<f64>().max(1.0)
        }
        // Associated Legendre P_l^m(cos theta) for l <= 2, with
        // Condon-Shortley phase.
        let p10 = ct;
        let p11 = -st;
        let p20 = 0.5 * (3.0 * ct * ct - 1.0);
        let p21 = -3.0 * ct * st;
        let p22 = 3.0 * st * st;
        let sqrt2 = 2.0f64.sqrt();
        // Real SH: m>0 -> sqrt2*K*cos(m phi)*P, m<0 -> sqrt2*K*sin(|m| phi)*P,
        // with (-1)^m to cancel the Condon-Shortley phase.
        [
            k(0, 0),
            sqrt2 * k(1, 1) * phi.sin() * -p11,
            k(1, 0) * p10,
            sqrt2 * k(1, 1) * phi.cos() * -p11,
            sqrt2 * k(2, 2) * (2.0 * phi).sin() * p22,
            sqrt2 * k(2, 1) * phi.sin() * -p21,
            k(2, 0) * p20,
            sqrt2 * k(2, 1) * phi.cos() * -p21,
            sqrt2 * k(2, 2) * (2.0 * phi).cos() * p22,
        ]
    }

    fn rand_dir(seed: u64) -> Vector3<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn dc_only_is_constant() {
        let mut coeffs = [0.0; NUM_COEFFS];
        coeffs[0] = 1.3;
        coeffs[9] = 0.7;
        coeffs[18] = 0.1;
        for seed in 0..8 {
            let d = rand_dir(seed);
            let (rgb, _) = eval(&coeffs, &d);
            assert_relative_eq!(rgb[0], 1.3 * C0, epsilon = 1e-12);
            assert_relative_eq!(rgb[1], 0.7 * C0, epsilon = 1e-12);
            assert_relative_eq!(rgb[2], 0.1 * C0, epsilon = 1e-12);
        }
    }

    #[test]
    fn degree_one_band_is_odd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut coeffs = [0.0; NUM_COEFFS];
        for ch in 0..3 {
            for k in 1..4 {
                coeffs[ch * 9 + k] = rng.gen_range(-1.0..1.0);
            }
        }
        for seed in 0..8 {
            let d = rand_dir(seed);
            let bp = basis(&d);
            let bm = basis(&-d);
            for ch in 0..3 {
                let fwd: f64 = (1..4).map(|k| coeffs[ch * 9 + k] * bp[k]).sum();
                let rev: f64 = (1..4).map(|k| coeffs[ch * 9 + k] * bm[k]).sum();
                assert_relative_eq!(fwd, -rev, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matches_legendre_oracle() {
        for seed in 0..64 {
            let d = rand_dir(seed);
            let ours = basis(&d);
            let oracle = oracle_basis(&d);
            for k in 0..9 {
                assert_relative_eq!(ours[k], oracle[k], epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn basis_grad_matches_fd() {
        let eps = 1e-6;
        for seed in 0..16 {
            let d = rand_dir(seed);
            let g = basis_grad(&d);
            for axis in 0..3 {
                let mut dp = d;
                let mut dm = d;
                dp[axis] += eps;
                dm[axis] -= eps;
                let bp = basis(&dp);
                let bm = basis(&dm);
                for k in 0..9 {
                    let fd = (bp[k] - bm[k]) / (2.0 * eps);
                    assert_relative_eq!(g[k][axis], fd, epsilon = 1e-6, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn clamp_masks_negative_channels() {
        let mut coeffs = [0.0; NUM_COEFFS];
        coeffs[0] = -1.0;
        coeffs[9] = 1.0;
        let (rgb, clamped) = eval(&coeffs, &Vector3::z());
        assert_eq!(rgb[0], 0.0);
        assert!(clamped[0]);
        assert!(rgb[1] > 0.0);
        assert!(!clamped[1]);
    }
}
