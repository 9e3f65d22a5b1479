//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use qmri::bloch::default_grids;
use qmri::harness::PhantomSpec;

/// Desk phantom whose tissue relaxation times sit exactly on the default
/// dictionary grids.
pub fn on_grid_desk(n: usize) -> PhantomSpec {
    let (t1g, t2g) = default_grids();
    let nearest = |g: &[f64], v: f64| *g.iter().min_by(|a, b| (*a - v).abs().total_cmp(&(*b - v).abs())).unwrap();
    let mut spec = PhantomSpec::desk(n);
    for t in &mut spec.tissues {
        t.t1 = nearest(&t1g, t.t1);
        t.t2 = nearest(&t2g, t.t2);
    }
    spec
}

/// Exact 1D TV denoising `argmin 1/2 ||x - y||^2 + lambda sum |x_{k+1} - x_k|`
/// by the direct taut-string algorithm of Condat.
pub fn taut_string(y: &[f64], lambda: f64) -> Vec<f64> {
    let n = y.len();
    let mut x = vec![0.0; n];
    if n == 0 {
        return x;
    }
    let (mut k, mut k0, mut km, mut kp) = (0usize, 0usize, 0usize, 0usize);
    let mut vmin = y[0] - lambda;
    let mut vmax = y[0] + lambda;
    let mut umin = lambda;
    let mut umax = -lambda;
    loop {
        if k == n - 1 {
            if umin < 0.0 {
                loop {
                    x[k0] = vmin;
                    k0 += 1;
                    if k0 > km {
                        break;
                    }
                }
                k = k0;
                km = k0;
                vmin = y[k];
                umin = lambda;
                umax = vmin + umin - vmax;
            } else if umax > 0.0 {
                loop {
                    x[k0] = vmax;
                    k0 += 1;
                    if k0 > kp {
                        break;
                    }
                }
                k = k0;
                kp = k0;
                vmax = y[k];
                umax = -lambda;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / (k - k0 + 1) as f64;
                loop {
                    x[k0] = vmin;
                    k0 += 1;
                    if k0 > k {
                        break;
                    }
                }
                return x;
            }
            if k == n - 1 {
                x[k] = vmin + umin;
                return x;
            }
            continue;
        }
        umin += y[k + 1] - vmin;
        umax += y[k + 1] - vmax;
        if umin < -lambda {
            loop {
                x[k0] = vmin;
                k0 += 1;
                if k0 > km {
                    break;
                }
            }
            k = k0;
            km = k0;
            kp = k0;
            vmin = y[k];
            vmax = y[k] + 2.0 * lambda;
            umin = lambda;
            umax = -lambda;
        } else if umax > lambda {
            loop {
                x[k0] = vmax;
                k0 += 1;
                if k0 > kp {
                    break;
                }
            }
            k = k0;
            km = k0;
            kp = k0;
            vmax = y[k];
            vmin = y[k] - 2.0 * lambda;
            umin = lambda;
            umax = -lambda;
        } else {
            k += 1;
            if umin >= lambda {
                km = k;
                vmin += (umin - lambda) / (km - k0 + 1) as f64;
                umin = lambda;
            }
            if umax <= -lambda {
                kp = k;
                vmax += (umax + lambda) / (kp - k0 + 1) as f64;
                umax = -lambda;
            }
        }
    }
}
