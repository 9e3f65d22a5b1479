//! End-to-end experiments: phantom, simulated acquisition, one
//! reconstruction method, metrics and artifacts.

use std::path::Path;

use serde_json::json;

use crate::bloch::{bloch_map, build_dictionary, BlochModel, FingerprintDictionary, SequenceSpec};
use crate::dictlearn::{bcs_qmri_reconstruct, bcs_series};
use crate::error::{config, shape, Result};
use crate::forward::{add_noise, apply_forward, make_cartesian_masks};
use crate::integrated::{lm_reconstruct_bloch, residual_norm, LmTraceRow};
use crate::metrics::{rel_error_map, RelErrors};
use crate::mrf::{blip_reconstruct, match_series, matches_to_map, mrf_reconstruct};
use crate::params::ParamMap;
use crate::rawio;
use crate::series::KSpaceData;
use crate::surrogate::{nn_reconstruct, train_on_dictionary, SurrogateNet};
use crate::varreg::two_step_reconstruct;

use super::config::{ExperimentConfig, Method};
use super::export::{export_csv, export_pgm, MetricsRow, Window};
use super::phantom::{make_phantom, Phantom};

/// Convergence record of one run, already formatted as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: String,
    pub rows: Vec<String>,
}

impl Trace {
    fn empty(header: &str) -> Self {
        Trace { header: header.to_string(), rows: Vec::new() }
    }

    fn from_lm(rows: &[LmTraceRow]) -> Self {
        Trace {
            header: "iter,residual,lambda,step_norm".into(),
            rows: rows
                .iter()
                .map(|r| format!("{},{:.17e},{:.17e},{:.17e}", r.iter, r.residual, r.lambda, r.step_norm))
                .collect(),
        }
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!("# config_hash={config_hash}\n{}\n", self.header);
        for r in &self.rows {
            s += r;
            s.push('\n');
        }
        s
    }
}

/// Simulated acquisition of an experiment.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub phantom: Phantom,
    pub sequence: SequenceSpec,
    pub data: KSpaceData,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config_hash: String,
    pub phantom: Phantom,
    pub estimate: ParamMap,
    pub errors: RelErrors,
    pub metrics: MetricsRow,
    pub trace: Trace,
}

pub fn load_phantom(cfg: &ExperimentConfig) -> Result<Phantom> {
    match &cfg.phantom_file {
        Some(p) => {
            let map = rawio::load_param_map(p).map_err(|e| e.context(format!("phantom file {}", p.display())))?;
            let labels = map.rho.iter().map(|&r| u8::from(r > 0.0)).collect();
            Ok(Phantom { map, labels })
        }
        None => make_phantom(&cfg.phantom),
    }
}

/// Phantom, Bloch series, masks and noise. Masks and noise both derive
/// from `cfg.seed` through separate streams.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Acquisition> {
    cfg.validate()?;
    let phantom = load_phantom(cfg)?;
    let sequence = cfg.sequence();
    let u = bloch_map(&phantom.map, &sequence).map_err(|e| e.context("simulating the phantom"))?;
    let pat = make_cartesian_masks(phantom.map.grid, cfg.factor, cfg.frames, cfg.seed, cfg.complementary)
        .map_err(|e| e.context("building sampling masks"))?;
    let data = add_noise(&apply_forward(&u, &pat)?, cfg.sigma, cfg.seed)?;
    Ok(Acquisition { phantom, sequence, data })
}

pub fn experiment_dictionary(cfg: &ExperimentConfig, seq: &SequenceSpec) -> Result<FingerprintDictionary> {
    build_dictionary(&cfg.dictionary.t1.values(), &cfg.dictionary.t2.values(), seq)
        .map_err(|e| e.context("building the dictionary"))
}

/// Runs the configured method on `y`. Returns the map and its trace.
pub fn reconstruct(
    cfg: &ExperimentConfig,
    seq: &SequenceSpec,
    dict: &FingerprintDictionary,
    y: &KSpaceData,
) -> Result<(ParamMap, Trace)> {
    let bx = &cfg.admissible_box;
    let ctx = cfg.method.name();
    let run = || -> Result<(ParamMap, Trace)> {
        Ok(match &cfg.method {
            Method::Mrf => (mrf_reconstruct(y, dict)?, Trace::empty("iter,residual")),
            Method::Blip(b) => {
                let r = blip_reconstruct(y, dict, *b, None)?;
                let rows = r.residuals.iter().enumerate().map(|(k, v)| format!("{k},{v:.17e}")).collect();
                (r.map, Trace { header: "iter,residual".into(), rows })
            }
            Method::Lm(c) => {
                let c = crate::integrated::LmConfig { sigma: c.sigma.or(Some(cfg.sigma)), ..*c };
                let q0 = mrf_reconstruct(y, dict)?;
                let r = lm_reconstruct_bloch(y, seq, &q0, bx, &c)?;
                (r.map, Trace::from_lm(&r.trace))
            }
            Method::TwoStep(t) => {
                let r = two_step_reconstruct(y, seq, dict, &t.weights(y.grid)?, bx, &t.solver())?;
                let trace = Trace { header: "fallbacks".into(), rows: vec![r.fallbacks.to_string()] };
                (r.map, trace)
            }
            Method::Bcs(c) => {
                let (u, frames) = bcs_series(y, c)?;
                let map = matches_to_map(&u, &match_series(&u, dict)?);
                let rows = frames
                    .iter()
                    .enumerate()
                    .flat_map(|(l, f)| f.objective.iter().enumerate().map(move |(k, v)| format!("{l},{k},{v:.17e}")))
                    .collect();
                (map, Trace { header: "frame,sweep,objective".into(), rows })
            }
            Method::BcsQmri(c) => {
                let q0 = mrf_reconstruct(y, dict)?;
                let r = bcs_qmri_reconstruct(y, &BlochModel::new(seq.clone())?, &q0, bx, c)?;
                let rows = r
                    .objective
                    .iter()
                    .enumerate()
                    .map(|(k, v)| match k.checked_sub(1).and_then(|j| r.lambda_q.get(j)) {
                        Some(l) => format!("{k},{v:.17e},{l:.17e}"),
                        None => format!("{k},{v:.17e},"),
                    })
                    .collect();
                (r.map, Trace { header: "sweep,objective,lambda_q".into(), rows })
            }
            Method::Nn(n) => {
                let net = surrogate_for(cfg, n, dict)?;
                let q0 = mrf_reconstruct(y, dict)?;
                let r = nn_reconstruct(y, &net, &q0, bx, &n.recon)?;
                (r.map, Trace::from_lm(&r.trace))
            }
        })
    };
    run().map_err(|e| e.context(format!("method {ctx}")))
}

fn surrogate_for(
    cfg: &ExperimentConfig,
    n: &super::config::NnParams,
    dict: &FingerprintDictionary,
) -> Result<SurrogateNet> {
    match &n.net_file {
        Some(p) => {
            let net = SurrogateNet::load(p).map_err(|e| e.context(format!("network {}", p.display())))?;
            if net.frames() != cfg.frames {
                return Err(shape(format!("network predicts {} frames, experiment has {}", net.frames(), cfg.frames)));
            }
            if let Some(h) = &net.arch.sequence_hash {
                if *h != dict.sequence_hash {
                    return Err(config("network was trained for a different sequence"));
                }
            }
            Ok(net)
        }
        None => Ok(train_on_dictionary(dict, &cfg.admissible_box, &n.train)?.net),
    }
}

/// Iterations (or sweeps) the method ran, read off its trace.
pub fn iteration_count(method: &Method, trace: &Trace) -> usize {
    match method {
        Method::Mrf | Method::TwoStep(_) => 0,
        Method::Bcs(c) => c.sweeps,
        // The first row records the starting point.
        Method::Blip(_) | Method::BcsQmri(_) | Method::Lm(_) | Method::Nn(_) => trace.rows.len().saturating_sub(1),
    }
}

/// Metrics of an estimate against the phantom.
pub fn evaluate(
    method: &str,
    phantom: &Phantom,
    estimate: &ParamMap,
    y: &KSpaceData,
    seq: &SequenceSpec,
    iterations: usize,
) -> Result<(RelErrors, MetricsRow)> {
    let fg = phantom.foreground();
    let errors = rel_error_map(estimate, &phantom.map, &fg)?;
    let row = MetricsRow {
        method: method.to_string(),
        foreground_voxels: fg.iter().filter(|&&m| m).count(),
        mean_rel_rho: errors.mean_rho,
        mean_rel_t1: errors.mean_t1,
        mean_rel_t2: errors.mean_t2,
        data_residual: residual_norm(estimate, y, seq)?,
        iterations,
    };
    Ok((errors, row))
}

/// Full pipeline. With `out`, writes `config.json`, `truth`, `estimate` and
/// `rel_error` raw maps, `metrics.csv`, `trace.csv` and PGM previews, all
/// tagged with the config hash. An `out` directory holding results of a
/// different config is rejected.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    if let Some(dir) = out {
        check_output_dir(dir, &hash)?;
    }
    let acq = simulate(cfg)?;
    let dict = experiment_dictionary(cfg, &acq.sequence)?;
    let (estimate, trace) = reconstruct(cfg, &acq.sequence, &dict, &acq.data)?;
    let iterations = iteration_count(&cfg.method, &trace);
    let (errors, metrics) = evaluate(cfg.method.name(), &acq.phantom, &estimate, &acq.data, &acq.sequence, iterations)?;
    let res = ExperimentOutput { config_hash: hash, phantom: acq.phantom, estimate, errors, metrics, trace };
    if let Some(dir) = out {
        write_artifacts(dir, cfg, &res).map_err(|e| e.context(format!("writing to {}", dir.display())))?;
    }
    Ok(res)
}

fn check_output_dir(dir: &Path, hash: &str) -> Result<()> {
    let existing = dir.join("config.json");
    if existing.exists() {
        let old = ExperimentConfig::load(&existing)?;
        if old.hash() != hash {
            return Err(config(format!(
                "{} holds results of config {}, refusing to mix in config {hash}",
                dir.display(),
                old.hash()
            )));
        }
    }
    Ok(())
}

fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, res: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let h = &res.config_hash;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let tag = |role: &str| json!({ "config_hash": h, "role": role });
    let truth = &res.phantom.map;
    rawio::save_param_map(&dir.join("truth"), truth, Some(tag("truth")))?;
    rawio::save_param_map(&dir.join("estimate"), &res.estimate, Some(tag("estimate")))?;
    let e = &res.errors;
    let err = ParamMap::new(truth.grid, e.rho.clone(), e.t1.clone(), e.t2.clone())?;
    rawio::save_param_map(&dir.join("rel_error"), &err, Some(tag("rel_error")))?;
    export_csv(&dir.join("metrics.csv"), std::slice::from_ref(&res.metrics), h)?;
    std::fs::write(dir.join("trace.csv"), res.trace.to_csv(h))?;
    let comment = format!("config_hash={h}");
    for (c, name) in ["rho", "t1", "t2"].iter().enumerate() {
        let w = Window::covering(truth.channel(c))?;
        export_pgm(&dir.join(format!("truth_{name}.pgm")), truth.grid, truth.channel(c), Some(w), Some(&comment))?;
        let est = res.estimate.channel(c);
        export_pgm(&dir.join(format!("estimate_{name}.pgm")), truth.grid, est, Some(w), Some(&comment))?;
        let w = Window::new(0.0, 1.0)?;
        export_pgm(&dir.join(format!("rel_error_{name}.pgm")), truth.grid, err.channel(c), Some(w), Some(&comment))?;
    }
    Ok(())
}
