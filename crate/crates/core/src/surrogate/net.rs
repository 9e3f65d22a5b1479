//! Feed-forward residual network standing in for the Bloch map
//! `(T1, T2) -> B(T1, T2)`.
//!
//! Inputs are mapped log-affinely from the admissible `(T1, T2)` box to
//! `[-1, 1]^2`. Hidden layers use `tanh`; a hidden layer whose input and
//! output widths agree adds its input (residual skip). The output layer is
//! linear and returns `2L` reals, read as `L` complex values `(re, im)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bloch::{SignalJacobian, SignalModel};
use crate::error::{invalid, shape, Result};
use crate::params::AdmissibleBox;
use crate::rawio::{self, DType, RawHeader};
use crate::rng::{domain, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Log-affine map of `[lo, hi]` onto `[-1, 1]` for T1 and T2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputMap {
    pub t1: (f64, f64),
    pub t2: (f64, f64),
}

impl InputMap {
    pub fn from_box(bx: &AdmissibleBox) -> Result<Self> {
        if !(bx.t1_min > 0.0) || !(bx.t2_min > 0.0) {
            return Err(invalid("network input map needs positive lower T1 and T2 bounds"));
        }
        Ok(InputMap { t1: (bx.t1_min, bx.t1_max), t2: (bx.t2_min, bx.t2_max) })
    }

    fn one(t: f64, (lo, hi): (f64, f64)) -> (f64, f64, bool) {
        let c = t.clamp(lo, hi);
        let s = 2.0 / (hi / lo).ln();
        let z = s * (c / lo).ln() - 1.0;
        // derivative of z with respect to t; zero when clamped
        let dz = if c == t { s / t } else { 0.0 };
        (z, dz, c != t || !t.is_finite())
    }

    /// Normalized input, its derivatives and whether clamping happened.
    pub fn apply(&self, t1: f64, t2: f64) -> ([f64; 2], [f64; 2], bool) {
        let (z1, d1, c1) = Self::one(t1, self.t1);
        let (z2, d2, c2) = Self::one(t2, self.t2);
        ([z1, z2], [d1, d2], c1 || c2)
    }

    pub fn invert(&self, z: [f64; 2]) -> (f64, f64) {
        let inv = |z: f64, (lo, hi): (f64, f64)| lo * ((z + 1.0) / 2.0 * (hi / lo).ln()).exp();
        (inv(z[0], self.t1), inv(z[1], self.t2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros(input: usize, output: usize) -> Self {
        Layer { w: DMatrix::zeros(output, input), b: DVector::zeros(output) }
    }
}

/// Architecture descriptor stored next to the raw weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input 2, hidden widths, output `2 * frames`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub residual: bool,
    pub input_map: InputMap,
    /// Hash of the sequence the net was trained for, if any.
    pub sequence_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateNet {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

/// Cached activations of a batch forward pass; column `j` is sample `j`.
pub(crate) struct Tape {
    /// Input of each layer (`acts[0]` is the normalized input).
    pub acts: Vec<DMatrix<f64>>,
    /// `tanh` outputs of hidden layers.
    pub hidden: Vec<DMatrix<f64>>,
    pub out: DMatrix<f64>,
}

impl SurrogateNet {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let w = &arch.widths;
        if w.len() < 2 || w[0] != 2 || w[w.len() - 1] == 0 || !w[w.len() - 1].is_multiple_of(2) || w.contains(&0) {
            return Err(invalid(format!("widths must run from 2 to an even output width, got {w:?}")));
        }
        let layers = w.windows(2).map(|p| Layer::zeros(p[0], p[1])).collect();
        Ok(SurrogateNet { arch, layers })
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn random(arch: Architecture, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let mut r = SeededRng::new(seed).stream(domain::TRAINING + 1);
        for layer in &mut net.layers {
            let d = Normal::new(0.0, (1.0 / layer.w.ncols() as f64).sqrt()).unwrap();
            layer.w.iter_mut().for_each(|v| *v = d.sample(&mut r));
        }
        Ok(net)
    }

    /// `2 -> hidden... -> 2 frames` with `tanh` and residual skips.
    pub fn architecture(hidden: &[usize], frames: usize, bx: &AdmissibleBox) -> Result<Architecture> {
        let mut widths = vec![2];
        widths.extend_from_slice(hidden);
        widths.push(2 * frames);
        Ok(Architecture {
            widths,
            activation: Activation::Tanh,
            residual: true,
            input_map: InputMap::from_box(bx)?,
            sequence_hash: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.arch.widths[self.arch.widths.len() - 1] / 2
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn skips(&self, k: usize) -> bool {
        self.arch.residual && self.layers[k].w.nrows() == self.layers[k].w.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Parameters flattened layer by layer, weights (column-major) then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(l.w.as_slice());
            v.extend_from_slice(l.b.as_slice());
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(shape(format!("expected {} parameters, got {}", self.param_count(), v.len())));
        }
        let mut o = 0;
        for l in &mut self.layers {
            let n = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&v[o..o + n]);
            o += n;
            let n = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&v[o..o + n]);
            o += n;
        }
        Ok(())
    }

    /// Batch forward pass on normalized inputs (`2 x batch`).
    pub(crate) fn forward_batch(&self, x: DMatrix<f64>) -> Tape {
        let last = self.layers.len() - 1;
        let mut acts = vec![x];
        let mut hidden = Vec::with_capacity(last);
        for (k, layer) in self.layers[..last].iter().enumerate() {
            let a = &acts[k];
            let mut h = &layer.w * a;
            for mut col in h.column_iter_mut() {
                col += &layer.b;
            }
            h.apply(|v| *v = v.tanh());
            let next = if self.skips(k) { &h + a } else { h.clone() };
            hidden.push(h);
            acts.push(next);
        }
        let layer = &self.layers[last];
        let mut out = &layer.w * &acts[last];
        for mut col in out.column_iter_mut() {
            col += &layer.b;
        }
        Tape { acts, hidden, out }
    }

    /// Gradient of `sum(g_out .* out)` with respect to all parameters,
    /// flattened like [`SurrogateNet::flatten`].
    pub(crate) fn backward(&self, tape: &Tape, g_out: &DMatrix<f64>) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        let mut g = g_out.clone();
        grads.push((&g * tape.acts[last].transpose(), g.column_sum()));
        let mut g_a = self.layers[last].w.transpose() * &g;
        for k in (0..last).rev() {
            let h = &tape.hidden[k];
            g = g_a.zip_map(h, |ga, hv| ga * (1.0 - hv * hv));
            grads.push((&g * tape.acts[k].transpose(), g.column_sum()));
            let back = self.layers[k].w.transpose() * &g;
            g_a = if self.skips(k) { back + g_a } else { back };
        }
        grads.reverse();
        let mut v = Vec::with_capacity(self.param_count());
        for (w, b) in grads {
            v.extend_from_slice(w.as_slice());
            v.extend_from_slice(b.as_slice());
        }
        v
    }

    fn to_complex(out: &[f64]) -> Vec<Complex64> {
        out.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
    }

    /// Network output at `(t1, t2)` and whether the input was clamped to the box.
    pub fn net_forward(&self, t1: f64, t2: f64) -> (Vec<Complex64>, bool) {
        let (z, _, clamped) = self.arch.input_map.apply(t1, t2);
        let tape = self.forward_batch(DMatrix::from_column_slice(2, 1, &z));
        (Self::to_complex(tape.out.as_slice()), clamped)
    }

    /// Output with its derivatives in `t1` and `t2` (forward-mode tangents).
    /// Derivatives in a clamped coordinate are zero.
    pub fn net_jacobian(&self, t1: f64, t2: f64) -> (SignalJacobian, bool) {
        let (z, dz, clamped) = self.arch.input_map.apply(t1, t2);
        let last = self.layers.len() - 1;
        let mut a = DVector::from_column_slice(&z);
        let mut t = DMatrix::from_diagonal(&DVector::from_column_slice(&dz));
        for (k, layer) in self.layers[..last].iter().enumerate() {
            let h = (&layer.w * &a + &layer.b).map(f64::tanh);
            let mut th = &layer.w * &t;
            for (r, hv) in h.iter().enumerate() {
                th.row_mut(r).scale_mut(1.0 - hv * hv);
            }
            if self.skips(k) {
                a = h + a;
                t = th + t;
            } else {
                a = h;
                t = th;
            }
        }
        let layer = &self.layers[last];
        let out = &layer.w * &a + &layer.b;
        let tout = &layer.w * &t;
        let jac = SignalJacobian {
            values: Self::to_complex(out.as_slice()),
            d_t1: Self::to_complex(tout.column(0).as_slice()),
            d_t2: Self::to_complex(tout.column(1).as_slice()),
        };
        (jac, clamped)
    }

    /// Writes `base.bin` (flat parameters) and `base.json` (architecture).
    pub fn save(&self, base: &Path) -> Result<()> {
        let header = RawHeader::new(DType::F64, vec![self.param_count()], false).with_meta(serde_json::json!({
            "kind": "surrogate_net",
            "architecture": self.arch,
        }));
        rawio::write_real(base, &header, &self.flatten())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (h, flat) = rawio::read_real(base)?;
        let arch: Architecture = h.meta_field("architecture")?;
        let mut net = Self::zeros(arch)?;
        net.set_flat(&flat)?;
        if !net.is_finite() {
            return Err(invalid("network file holds non-finite parameters"));
        }
        Ok(net)
    }
}

impl SignalModel for SurrogateNet {
    fn frames(&self) -> usize {
        SurrogateNet::frames(self)
    }

    fn signal(&self, t1: f64, t2: f64) -> Result<Vec<Complex64>> {
        Ok(self.net_forward(t1, t2).0)
    }

    fn signal_jacobian(&self, t1: f64, t2: f64) -> Result<SignalJacobian> {
        Ok(self.net_jacobian(t1, t2).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch(hidden: &[usize], frames: usize) -> Architecture {
        SurrogateNet::architecture(hidden, frames, &AdmissibleBox::default()).unwrap()
    }

    #[test]
    fn input_map_hits_the_corners_and_inverts() {
        let m = InputMap::from_box(&AdmissibleBox::default()).unwrap();
        let (z, _, c) = m.apply(0.05, 2.5);
        assert!(!c && (z[0] + 1.0).abs() < 1e-15 && (z[1] - 1.0).abs() < 1e-15);
        let (z, _, _) = m.apply(0.8, 0.07);
        let (t1, t2) = m.invert(z);
        assert!((t1 - 0.8).abs() < 1e-14 && (t2 - 0.07).abs() < 1e-15);
        let (z, dz, c) = m.apply(50.0, 0.07);
        assert!(c && (z[0] - 1.0).abs() < 1e-15 && dz[0] == 0.0);
    }

    #[test]
    fn zero_network_is_zero() {
        let net = SurrogateNet::zeros(arch(&[8, 8], 5)).unwrap();
        let (j, _) = net.net_jacobian(0.9, 0.1);
        assert!(j.values.iter().chain(&j.d_t1).chain(&j.d_t2).all(|z| *z == Complex64::new(0.0, 0.0)));
        assert_eq!(j.values.len(), 5);
    }

    #[test]
    fn single_linear_layer_has_constant_jacobian() {
        let mut net = SurrogateNet::random(arch(&[], 3), 4).unwrap();
        net.layers[0].b.iter_mut().enumerate().for_each(|(k, b)| *b = k as f64);
        let m = net.arch.input_map;
        for (t1, t2) in [(0.3, 0.05), (2.0, 1.1)] {
            let (j, _) = net.net_jacobian(t1, t2);
            let (_, dz, _) = m.apply(t1, t2);
            for l in 0..3 {
                let d1 = Complex64::new(net.layers[0].w[(2 * l, 0)], net.layers[0].w[(2 * l + 1, 0)]) * dz[0];
                let d2 = Complex64::new(net.layers[0].w[(2 * l, 1)], net.layers[0].w[(2 * l + 1, 1)]) * dz[1];
                assert!((j.d_t1[l] - d1).norm() <= 1e-15 * d1.norm().max(1.0));
                assert!((j.d_t2[l] - d2).norm() <= 1e-15 * d2.norm().max(1.0));
            }
        }
    }

    #[test]
    fn batch_and_single_forward_agree() {
        let net = SurrogateNet::random(arch(&[6, 6, 4], 3), 1).unwrap();
        let pts = [(0.3, 0.05), (2.0, 1.1), (0.9, 0.09)];
        let m = net.arch.input_map;
        let x = DMatrix::from_fn(2, 3, |r, c| m.apply(pts[c].0, pts[c].1).0[r]);
        let tape = net.forward_batch(x);
        for (c, p) in pts.iter().enumerate() {
            let (v, _) = net.net_forward(p.0, p.1);
            let (j, _) = net.net_jacobian(p.0, p.1);
            for l in 0..3 {
                assert_eq!(v[l], Complex64::new(tape.out[(2 * l, c)], tape.out[(2 * l + 1, c)]));
                assert!((j.values[l] - v[l]).norm() <= 1e-15);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = SurrogateNet::random(arch(&[5, 5], 2), 9).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[0.1, -0.5, 0.9, 0.3, 0.7, -0.2]);
        let g_out = DMatrix::from_fn(4, 3, |r, c| (r as f64 + 1.0) * 0.3 - c as f64 * 0.2);
        let f = |n: &SurrogateNet| n.forward_batch(x.clone()).out.component_mul(&g_out).sum();
        let grad = net.backward(&net.forward_batch(x.clone()), &g_out);
        let p = net.flatten();
        for k in 0..p.len() {
            let h = 1e-6;
            let (mut a, mut b) = (net.clone(), net.clone());
            let mut pa = p.clone();
            pa[k] += h;
            a.set_flat(&pa).unwrap();
            let mut pb = p.clone();
            pb[k] -= h;
            b.set_flat(&pb).unwrap();
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-7 * fd.abs().max(1.0), "{k}: {fd} {}", grad[k]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn jacobian_matches_central_differences(seed in 0u64..1_000_000, u1 in 0.05f64..0.95, u2 in 0.05f64..0.95) {
            let net = SurrogateNet::random(arch(&[16, 16], 4), seed).unwrap();
            let m = net.arch.input_map;
            let (t1, t2) = m.invert([2.0 * u1 - 1.0, 2.0 * u2 - 1.0]);
            let (j, _) = net.net_jacobian(t1, t2);
            let h = 1e-4;
            for (k, t) in [(0usize, t1), (1, t2)] {
                let step = h * t;
                let at = |s: f64| if k == 0 { net.net_forward(t1 + s, t2).0 } else { net.net_forward(t1, t2 + s).0 };
                let (p, n) = (at(step), at(-step));
                let fd: Vec<Complex64> = p.iter().zip(&n).map(|(a, b)| (a - b) / (2.0 * step)).collect();
                let an = if k == 0 { &j.d_t1 } else { &j.d_t2 };
                let err: f64 = fd.iter().zip(an).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
                let scale: f64 = an.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                prop_assert!(err <= 1e-4 * scale.max(1e-12), "err {err} scale {scale}");
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("net");
        let net = SurrogateNet::random(arch(&[4, 4], 3), 2).unwrap();
        net.save(&base).unwrap();
        assert_eq!(SurrogateNet::load(&base).unwrap(), net);
    }
}
