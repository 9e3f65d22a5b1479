//! Supervised training of the surrogate on dictionary fingerprints:
//! `min mean squared mismatch + r ||theta||^2` with mini-batch Adam.
//!
//! After every epoch the full training loss is evaluated. An epoch that
//! increases it is undone (parameters and optimizer state) and the step size
//! is halved, so the recorded loss trace never increases; accepted epochs let
//! it grow back. With `refit_output` the linear output layer is re-solved
//! exactly after every epoch.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::net::{Architecture, SurrogateNet};
use crate::bloch::FingerprintDictionary;
use crate::error::{invalid, numerical, Result};
use crate::params::AdmissibleBox;
use crate::rng::{domain, SeededRng};

/// One normalized input with its fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: [f64; 2],
    pub target: Vec<Complex64>,
}

/// One pair per dictionary entry, in dictionary order. Targets are copied
/// bit for bit.
pub fn make_training_set(dict: &FingerprintDictionary, bx: &AdmissibleBox) -> Result<Vec<TrainingPair>> {
    if dict.is_empty() {
        return Err(invalid("empty dictionary"));
    }
    let map = super::net::InputMap::from_box(bx)?;
    Ok(dict
        .params
        .iter()
        .zip(&dict.entries)
        .map(|(&(t1, t2), e)| TrainingPair { input: map.apply(t1, t2).0, target: e.values.clone() })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Step size after the last epoch, as a fraction of the initial one
    /// (geometric decay in between).
    pub final_rate_fraction: f64,
    /// Weight penalty `r`.
    pub weight_penalty: f64,
    /// Refit the linear output layer by ridge least squares after every epoch.
    pub refit_output: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![64, 64],
            epochs: 300,
            batch_size: 4096,
            learning_rate: 1e-3,
            final_rate_fraction: 1e-2,
            weight_penalty: 0.0,
            refit_output: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.final_rate_fraction > 0.0 && self.final_rate_fraction <= 1.0) {
            return Err(invalid("learning rate must be positive and its final fraction in (0, 1]"));
        }
        if !(self.weight_penalty >= 0.0) || !self.weight_penalty.is_finite() {
            return Err(invalid("weight penalty must be nonnegative"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub net: SurrogateNet,
    /// Full training loss (mismatch plus penalty) before training and after
    /// every epoch.
    pub loss: Vec<f64>,
    /// Final mean squared mismatch per real output.
    pub mse: f64,
    /// Epochs that were undone.
    pub rejected: usize,
}

struct Data {
    x: DMatrix<f64>,
    t: DMatrix<f64>,
}

impl Data {
    fn new(pairs: &[TrainingPair], frames: usize) -> Result<Self> {
        if pairs.iter().any(|p| p.target.len() != frames) {
            return Err(invalid("training targets differ in length from the network output"));
        }
        let x = DMatrix::from_fn(2, pairs.len(), |r, c| pairs[c].input[r]);
        let t = DMatrix::from_fn(2 * frames, pairs.len(), |r, c| {
            let z = pairs[c].target[r / 2];
            if r % 2 == 0 {
                z.re
            } else {
                z.im
            }
        });
        Ok(Data { x, t })
    }

    fn columns(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.x.select_columns(idx), self.t.select_columns(idx))
    }
}

/// Mean squared mismatch per real output over all pairs.
pub fn training_mse(net: &SurrogateNet, pairs: &[TrainingPair]) -> Result<f64> {
    let d = Data::new(pairs, net.frames())?;
    Ok(mse(net, &d))
}

fn mse(net: &SurrogateNet, d: &Data) -> f64 {
    let out = net.forward_batch(d.x.clone()).out;
    (out - &d.t).norm_squared() / d.t.len() as f64
}

fn penalty(net: &SurrogateNet, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * net.flatten().iter().map(|v| v * v).sum::<f64>()
    }
}

/// Exact minimizer of the loss over the output layer with the hidden layers
/// fixed: `W~ = T H~^T (H~ H~^T + n r I)^-1` with `H~` the last hidden
/// features plus a row of ones.
fn refit_output(net: &mut SurrogateNet, d: &Data, r: f64) -> Result<()> {
    let tape = net.forward_batch(d.x.clone());
    let h = tape.acts.last().unwrap();
    let (k, n) = (h.nrows(), h.ncols());
    let ht = h.clone().insert_row(k, 1.0);
    let mut g = &ht * ht.transpose();
    let ridge = (d.t.len() as f64 * r).max(1e-13 * g.trace() / (k + 1) as f64);
    for i in 0..=k {
        g[(i, i)] += ridge;
    }
    let rhs = &ht * d.t.transpose();
    let chol = g.cholesky().ok_or_else(|| numerical("output refit system is not positive definite"))?;
    let sol = chol.solve(&rhs);
    let last = net.layers.last_mut().unwrap();
    last.w = sol.rows(0, k).transpose();
    last.b = sol.row(k).transpose();
    debug_assert_eq!(n, d.t.ncols());
    Ok(())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Updates the first `n` entries of `p`.
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, n: usize) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for k in 0..n {
            self.m[k] = BETA1 * self.m[k] + (1.0 - BETA1) * g[k];
            self.v[k] = BETA2 * self.v[k] + (1.0 - BETA2) * g[k] * g[k];
            p[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + EPS);
        }
    }
}

/// Trains a fresh network of the configured architecture.
pub fn train_surrogate(pairs: &[TrainingPair], bx: &AdmissibleBox, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let frames = pairs.first().ok_or_else(|| invalid("no training pairs"))?.target.len();
    if frames == 0 {
        return Err(invalid("training targets are empty"));
    }
    let arch = SurrogateNet::architecture(&cfg.hidden, frames, bx)?;
    let net = SurrogateNet::random(arch, cfg.seed)?;
    train_from(net, pairs, cfg)
}

/// Trains on every entry of `dict`; the net records the dictionary's
/// sequence hash.
pub fn train_on_dictionary(dict: &FingerprintDictionary, bx: &AdmissibleBox, cfg: &TrainConfig) -> Result<TrainResult> {
    let mut res = train_surrogate(&make_training_set(dict, bx)?, bx, cfg)?;
    res.net.arch.sequence_hash = Some(dict.sequence_hash.clone());
    Ok(res)
}

/// Continues training from `net`.
pub fn train_from(mut net: SurrogateNet, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let d = Data::new(pairs, net.frames())?;
    let n = pairs.len();
    let r = cfg.weight_penalty;
    let mut rng = SeededRng::new(cfg.seed).stream(domain::TRAINING);
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.refit_output {
        refit_output(&mut net, &d, r)?;
    }
    let mut params = net.flatten();
    let mut adam = Adam::new(params.len());
    // the refit owns the output layer, so Adam only moves the hidden ones
    let stepped = if cfg.refit_output {
        let out = net.layers.last().unwrap();
        params.len() - out.w.len() - out.b.len()
    } else {
        params.len()
    };
    let mut loss = vec![mse(&net, &d) + penalty(&net, r)];
    let decay = cfg.final_rate_fraction.powf(1.0 / cfg.epochs as f64);
    let mut backoff = 1.0;
    let mut rejected = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * decay.powi(epoch as i32) * backoff;
        let saved = (params.clone(), adam.m.clone(), adam.v.clone(), adam.t);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (x, t) = d.columns(batch);
            let tape = net.forward_batch(x);
            let scale = 2.0 / t.len() as f64;
            let g_out = (&tape.out - t) * scale;
            let mut g = net.backward(&tape, &g_out);
            if r > 0.0 {
                g.iter_mut().zip(&params).for_each(|(g, p)| *g += 2.0 * r * p);
            }
            adam.step(&mut params, &g, lr, stepped);
            net.set_flat(&params)?;
        }
        if cfg.refit_output {
            refit_output(&mut net, &d, r)?;
            params = net.flatten();
        }
        let l = mse(&net, &d) + penalty(&net, r);
        if !l.is_finite() {
            return Err(numerical(format!("training loss became {l} in epoch {epoch}")));
        }
        if l > *loss.last().unwrap() {
            (params, adam.m, adam.v, adam.t) = saved;
            net.set_flat(&params)?;
            backoff *= 0.5;
            rejected += 1;
            loss.push(*loss.last().unwrap());
        } else {
            backoff = (backoff * 1.25).min(1.0);
            loss.push(l);
        }
    }
    let mse = mse(&net, &d);
    Ok(TrainResult { net, loss, mse, rejected })
}

/// The architecture used by [`train_surrogate`] for `frames` outputs.
pub fn default_architecture(frames: usize, bx: &AdmissibleBox) -> Result<Architecture> {
    SurrogateNet::architecture(&TrainConfig::default().hidden, frames, bx)
}
