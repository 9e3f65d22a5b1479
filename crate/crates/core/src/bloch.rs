//! Signal models: discrete IR-bSSFP Bloch dynamics, the Ernst (FLASH)
//! equation, ESTATICS echo decay, and fingerprint dictionaries.

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, numerical, Result};
use crate::params::ParamMap;
use crate::rawio::{self, DType, RawHeader};
use crate::rng::{domain, SeededRng};
use crate::series::ImageSeries;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Seed of the built-in flip-angle train.
pub const DEFAULT_TRAIN_SEED: u64 = 0x5eed_0f1a;
/// Repetition time of the built-in train (seconds).
pub const DEFAULT_TR: f64 = 0.015;

fn default_m_eq() -> f64 {
    1.0
}

/// Excitation sequence: one flip angle (radians) and repetition time
/// (seconds) per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub flip_angles: Vec<f64>,
    pub tr: Vec<f64>,
    #[serde(default)]
    pub te: f64,
    pub inversion: bool,
    #[serde(default = "default_m_eq")]
    pub m_eq: f64,
    /// Negate the flip angle on every second excitation.
    #[serde(default)]
    pub alternating: bool,
}

impl SequenceSpec {
    pub fn new(flip_angles: Vec<f64>, tr: Vec<f64>, inversion: bool) -> Result<Self> {
        let s = SequenceSpec { flip_angles, tr, te: 0.0, inversion, m_eq: 1.0, alternating: false };
        s.validate()?;
        Ok(s)
    }

    /// Inversion-prepared train with pseudo-random flips in [10, 60] degrees
    /// and a constant 15 ms repetition time.
    pub fn default_mrf(frames: usize) -> Self {
        let mut r = SeededRng::new(DEFAULT_TRAIN_SEED).stream(domain::SEQUENCE);
        let flip_angles =
            (0..frames).map(|_| r.gen_range(10.0f64..=60.0).to_radians()).collect();
        SequenceSpec {
            flip_angles,
            tr: vec![DEFAULT_TR; frames],
            te: 0.0,
            inversion: true,
            m_eq: 1.0,
            alternating: false,
        }
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.flip_angles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.flip_angles.is_empty() {
            return Err(invalid("sequence needs at least one frame"));
        }
        if self.tr.len() != self.flip_angles.len() {
            return Err(invalid(format!(
                "sequence has {} flip angles but {} repetition times",
                self.flip_angles.len(),
                self.tr.len()
            )));
        }
        if self.flip_angles.iter().any(|a| !(0.0..=std::f64::consts::PI).contains(a)) {
            return Err(invalid("flip angles must lie in [0, pi]"));
        }
        if self.tr.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(invalid("repetition times must be positive"));
        }
        if !(self.te >= 0.0) || !(self.m_eq.is_finite()) {
            return Err(invalid("echo time must be nonnegative and m_eq finite"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding; ties dictionaries to sequences.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("sequence serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    #[inline]
    fn angle(&self, l: usize) -> f64 {
        let a = self.flip_angles[l];
        if self.alternating && l % 2 == 1 {
            -a
        } else {
            a
        }
    }
}

/// Transverse magnetization readouts for one `(T1, T2)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub values: Vec<Complex64>,
    pub norm: f64,
}

impl Fingerprint {
    pub fn new(values: Vec<Complex64>) -> Self {
        let norm = crate::linalg::cnorm(&values);
        Fingerprint { values, norm }
    }
}

/// Signal values with their sensitivities to T1 and T2.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalJacobian {
    pub values: Vec<Complex64>,
    pub d_t1: Vec<Complex64>,
    pub d_t2: Vec<Complex64>,
}

/// A parameter-to-signal map `(T1, T2) -> B(T1, T2)` acting voxelwise.
/// The proton density enters linearly outside the model.
pub trait SignalModel: Sync {
    fn frames(&self) -> usize;
    fn signal(&self, t1: f64, t2: f64) -> Result<Vec<Complex64>>;
    fn signal_jacobian(&self, t1: f64, t2: f64) -> Result<SignalJacobian>;
}

/// The exact Bloch recursion for a fixed sequence.
#[derive(Debug, Clone)]
pub struct BlochModel {
    pub seq: SequenceSpec,
}

impl BlochModel {
    pub fn new(seq: SequenceSpec) -> Result<Self> {
        seq.validate()?;
        Ok(BlochModel { seq })
    }
}

impl SignalModel for BlochModel {
    fn frames(&self) -> usize {
        self.seq.frames()
    }

    fn signal(&self, t1: f64, t2: f64) -> Result<Vec<Complex64>> {
        Ok(simulate_bloch(t1, t2, &self.seq)?.values)
    }

    fn signal_jacobian(&self, t1: f64, t2: f64) -> Result<SignalJacobian> {
        bloch_jacobian(t1, t2, &self.seq)
    }
}

fn check_times(t1: f64, t2: f64) -> Result<()> {
    if !(t1 > 0.0) || !(t2 > 0.0) || !t1.is_finite() || !t2.is_finite() {
        return Err(invalid(format!("relaxation times must be positive and finite, got T1={t1}, T2={t2}")));
    }
    Ok(())
}

#[inline]
fn rotate_x(m: [f64; 3], c: f64, s: f64) -> [f64; 3] {
    // Precession about +x as generated by dm/dt = m x (w, 0, 0).
    [m[0], c * m[1] + s * m[2], c * m[2] - s * m[1]]
}

/// Runs the recursion; when `jac` is set also propagates dm/dT1 and dm/dT2.
fn run_recursion(t1: f64, t2: f64, seq: &SequenceSpec, jac: bool) -> SignalJacobian {
    let l_count = seq.frames();
    let m_eq = seq.m_eq;
    let mut m = [0.0, 0.0, if seq.inversion { -m_eq } else { m_eq }];
    let mut d1 = [0.0; 3];
    let mut d2 = [0.0; 3];
    let mut values = Vec::with_capacity(l_count);
    let (mut out1, mut out2) = if jac {
        (Vec::with_capacity(l_count), Vec::with_capacity(l_count))
    } else {
        (Vec::new(), Vec::new())
    };
    for l in 0..l_count {
        let (s, c) = seq.angle(l).sin_cos();
        let mp = rotate_x(m, c, s);
        values.push(Complex64::new(mp[0], mp[1]));
        let tr = seq.tr[l];
        let e1 = (-tr / t1).exp();
        let e2 = (-tr / t2).exp();
        if jac {
            let d1p = rotate_x(d1, c, s);
            let d2p = rotate_x(d2, c, s);
            out1.push(Complex64::new(d1p[0], d1p[1]));
            out2.push(Complex64::new(d2p[0], d2p[1]));
            let de1 = e1 * tr / (t1 * t1);
            let de2 = e2 * tr / (t2 * t2);
            d1 = [e2 * d1p[0], e2 * d1p[1], de1 * (mp[2] - m_eq) + e1 * d1p[2]];
            d2 = [de2 * mp[0] + e2 * d2p[0], de2 * mp[1] + e2 * d2p[1], e1 * d2p[2]];
        }
        m = [e2 * mp[0], e2 * mp[1], m_eq + e1 * (mp[2] - m_eq)];
    }
    SignalJacobian { values, d_t1: out1, d_t2: out2 }
}

/// Readouts `m_x + i m_y` right after each excitation of the sequence.
pub fn simulate_bloch(t1: f64, t2: f64, seq: &SequenceSpec) -> Result<Fingerprint> {
    check_times(t1, t2)?;
    Ok(Fingerprint::new(run_recursion(t1, t2, seq, false).values))
}

/// Forward-mode derivatives of the readouts with respect to T1 and T2.
pub fn bloch_jacobian(t1: f64, t2: f64, seq: &SequenceSpec) -> Result<SignalJacobian> {
    check_times(t1, t2)?;
    Ok(run_recursion(t1, t2, seq, true))
}

/// Voxelwise `u = rho * B(T1, T2)` for any signal model.
pub fn signal_map<M: SignalModel + ?Sized>(model: &M, q: &ParamMap) -> Result<ImageSeries> {
    let frames = model.frames();
    let per_voxel: Vec<Vec<Complex64>> = (0..q.grid.len())
        .into_par_iter()
        .map(|i| {
            let [rho, t1, t2] = q.voxel(i);
            if rho == 0.0 {
                return Ok(vec![ZERO; frames]);
            }
            Ok(model.signal(t1, t2)?.into_iter().map(|z| z * rho).collect())
        })
        .collect::<Result<_>>()?;
    let vm: Vec<Complex64> = per_voxel.into_iter().flatten().collect();
    Ok(ImageSeries::from_voxel_major(q.grid, frames, &vm))
}

/// The Bloch solution map `q -> rho * B(T1, T2)`.
pub fn bloch_map(q: &ParamMap, seq: &SequenceSpec) -> Result<ImageSeries> {
    signal_map(&BlochModel::new(seq.clone())?, q)
}

/// Ernst steady-state FLASH signal.
pub fn ernst_signal(c: f64, a: f64, tr: f64, te: f64, r1: f64, r2star: f64) -> Result<f64> {
    if !(tr > 0.0) || !(te >= 0.0) {
        return Err(invalid(format!("Ernst signal needs tr > 0 and te >= 0, got tr={tr}, te={te}")));
    }
    let x = r1 * tr;
    let e1 = (-x).exp();
    let one_minus_e1 = -(-x).exp_m1();
    let denom = 1.0 - a.cos() * e1;
    if denom <= 0.0 {
        return Err(numerical(format!("Ernst denominator is {denom} (flip angle {a}, r1*tr {x})")));
    }
    Ok(c * a.sin() * one_minus_e1 / denom * (-r2star * te).exp())
}

/// ESTATICS echo model: shared exponential decay of a weighting intercept.
#[inline]
pub fn estatics_signal(u_w: f64, r2star: f64, te: f64) -> f64 {
    u_w * (-r2star * te).exp()
}

/// Precomputed fingerprints on a `(T1, T2)` grid (pairs with `T2 > T1` skipped).
#[derive(Debug, Clone)]
pub struct FingerprintDictionary {
    pub t1_grid: Vec<f64>,
    pub t2_grid: Vec<f64>,
    pub sequence: SequenceSpec,
    pub sequence_hash: String,
    /// `(T1, T2)` of each entry, T1-major then T2.
    pub params: Vec<(f64, f64)>,
    pub entries: Vec<Fingerprint>,
    normalized: Vec<Complex64>,
}

fn check_grid(name: &str, g: &[f64]) -> Result<()> {
    if g.is_empty() {
        return Err(invalid(format!("{name} grid is empty")));
    }
    if g.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid(format!("{name} grid values must be positive")));
    }
    if g.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(format!("{name} grid must be strictly increasing")));
    }
    Ok(())
}

/// `n` points geometrically spaced from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|k| if k == n - 1 { hi } else { lo * (r * k as f64).exp() }).collect()
}

/// Default dictionary grids: 40 geometric T1 steps in [0.1, 4.5] s and 40
/// geometric T2 steps in [0.01, 2] s.
pub fn default_grids() -> (Vec<f64>, Vec<f64>) {
    (geometric_grid(0.1, 4.5, 40), geometric_grid(0.01, 2.0, 40))
}

pub fn default_dictionary(seq: &SequenceSpec) -> Result<FingerprintDictionary> {
    let (t1, t2) = default_grids();
    build_dictionary(&t1, &t2, seq)
}

pub fn build_dictionary(t1_grid: &[f64], t2_grid: &[f64], seq: &SequenceSpec) -> Result<FingerprintDictionary> {
    check_grid("T1", t1_grid)?;
    check_grid("T2", t2_grid)?;
    seq.validate()?;
    let params: Vec<(f64, f64)> = t1_grid
        .iter()
        .flat_map(|&t1| t2_grid.iter().filter(move |&&t2| t2 <= t1).map(move |&t2| (t1, t2)))
        .collect();
    if params.is_empty() {
        return Err(invalid("no (T1, T2) pair with T2 <= T1 in the dictionary grids"));
    }
    let entries: Vec<Fingerprint> =
        params.par_iter().map(|&(t1, t2)| simulate_bloch(t1, t2, seq)).collect::<Result<_>>()?;
    FingerprintDictionary::from_parts(t1_grid.to_vec(), t2_grid.to_vec(), seq.clone(), params, entries)
}

impl FingerprintDictionary {
    fn from_parts(
        t1_grid: Vec<f64>,
        t2_grid: Vec<f64>,
        sequence: SequenceSpec,
        params: Vec<(f64, f64)>,
        entries: Vec<Fingerprint>,
    ) -> Result<Self> {
        if let Some(j) = entries.iter().position(|e| !(e.norm > 0.0)) {
            return Err(invalid(format!(
                "dictionary entry {j} (T1={}, T2={}) has zero norm; the flip train never excites",
                params[j].0, params[j].1
            )));
        }
        let normalized = entries.iter().flat_map(|e| e.values.iter().map(move |z| z / e.norm)).collect();
        let sequence_hash = sequence.hash();
        Ok(FingerprintDictionary { t1_grid, t2_grid, sequence, sequence_hash, params, entries, normalized })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.sequence.frames()
    }

    #[inline]
    pub fn normalized_entry(&self, j: usize) -> &[Complex64] {
        let l = self.frames();
        &self.normalized[j * l..(j + 1) * l]
    }

    /// All normalized entries, entry-major (`len() x frames()`).
    pub fn normalized(&self) -> &[Complex64] {
        &self.normalized
    }

    /// Largest `Re <b_j, b_k>` between normalized entries adjacent on the
    /// grid; values near 1 mean the train cannot tell neighbours apart.
    pub fn max_neighbor_coherence(&self) -> f64 {
        let index: std::collections::HashMap<(u64, u64), usize> =
            self.params.iter().enumerate().map(|(j, &(a, b))| ((a.to_bits(), b.to_bits()), j)).collect();
        let mut worst = f64::NEG_INFINITY;
        for (a, &t1) in self.t1_grid.iter().enumerate() {
            for (b, &t2) in self.t2_grid.iter().enumerate() {
                let Some(&j) = index.get(&(t1.to_bits(), t2.to_bits())) else { continue };
                let mut neighbors = Vec::new();
                if let Some(&t1n) = self.t1_grid.get(a + 1) {
                    neighbors.push((t1n, t2));
                }
                if let Some(&t2n) = self.t2_grid.get(b + 1) {
                    neighbors.push((t1, t2n));
                }
                for (x, y) in neighbors {
                    if let Some(&k) = index.get(&(x.to_bits(), y.to_bits())) {
                        let c = crate::linalg::cdot_re(self.normalized_entry(j), self.normalized_entry(k));
                        worst = worst.max(c);
                    }
                }
            }
        }
        worst
    }

    /// Writes `base.bin` (raw fingerprints, `len x frames` complex f64) and a
    /// header carrying the grids and the sequence with its hash.
    pub fn save(&self, base: &Path) -> Result<()> {
        let header = RawHeader::new(DType::F64, vec![self.len(), self.frames()], true).with_meta(serde_json::json!({
            "kind": "fingerprint_dictionary",
            "t1_grid": self.t1_grid,
            "t2_grid": self.t2_grid,
            "params": self.params,
            "sequence": self.sequence,
            "sequence_hash": self.sequence_hash,
        }));
        let flat: Vec<Complex64> = self.entries.iter().flat_map(|e| e.values.iter().copied()).collect();
        rawio::write_complex(base, &header, &flat)
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (h, flat) = rawio::read_complex(base)?;
        let t1_grid: Vec<f64> = h.meta_field("t1_grid")?;
        let t2_grid: Vec<f64> = h.meta_field("t2_grid")?;
        let params: Vec<(f64, f64)> = h.meta_field("params")?;
        let sequence: SequenceSpec = h.meta_field("sequence")?;
        let stored_hash: String = h.meta_field("sequence_hash")?;
        sequence.validate()?;
        if stored_hash != sequence.hash() {
            return Err(invalid("dictionary header hash does not match its sequence"));
        }
        let l = sequence.frames();
        if h.shape != [params.len(), l] {
            return Err(invalid("dictionary shape does not match its parameter list"));
        }
        let entries = flat.chunks_exact(l).map(|c| Fingerprint::new(c.to_vec())).collect();
        FingerprintDictionary::from_parts(t1_grid, t2_grid, sequence, params, entries)
    }
}
