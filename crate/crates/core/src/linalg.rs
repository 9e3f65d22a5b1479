//! Small dense helpers shared by the per-voxel solvers.

use num_complex::Complex64;

#[inline]
pub fn cdot_re(a: &[Complex64], b: &[Complex64]) -> f64 {
    // Re <a, b> with <a, b> = sum conj(a_i) b_i
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

#[inline]
pub fn cnorm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

#[inline]
pub fn cnorm(a: &[Complex64]) -> f64 {
    cnorm_sqr(a).sqrt()
}

/// Solves the symmetric positive definite system `m x = b` by Cholesky.
/// Returns `None` when `m` is not numerically positive definite.
pub fn solve_spd3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let mut l = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut z = [0.0; 3];
    for i in 0..3 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let mut s = z[i];
        for k in i + 1..3 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

/// Inverse of a symmetric positive definite 3x3 matrix.
pub fn inv_spd3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let mut out = [[0.0; 3]; 3];
    for c in 0..3 {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let col = solve_spd3(m, e)?;
        for r in 0..3 {
            out[r][c] = col[r];
        }
    }
    Some(out)
}

/// `Re(J^H J)` and `Re(J^H r)` for a column-stored `L x 3` complex Jacobian.
pub fn normal_equations(cols: [&[Complex64]; 3], r: &[Complex64]) -> ([[f64; 3]; 3], [f64; 3]) {
    let mut g = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = cdot_re(cols[i], cols[j]);
            g[i][j] = v;
            g[j][i] = v;
        }
        b[i] = cdot_re(cols[i], r);
    }
    (g, b)
}
