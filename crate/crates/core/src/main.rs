use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use qmri::aws::{estatics_fit, smooth_qmaps, AwsConfig, EchoSet};
use qmri::bloch::FingerprintDictionary;
use qmri::forward::{load_kspace, save_kspace};
use qmri::harness::{
    evaluate, experiment_dictionary, export_csv, iteration_count, export_pgm, load_phantom, reconstruct, run_experiment, simulate,
    ExperimentConfig, Method, NnParams, Window,
};
use qmri::surrogate::train_on_dictionary;
use qmri::{rawio, Error, Grid, Result};

#[derive(Parser)]
#[command(name = "qmri", version, about = "Quantitative MRI reconstruction on synthetic phantoms")]
struct Cli {
    /// Experiment config (JSON); missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "qmri_out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes the phantom map and previews.
    Phantom,
    /// Simulates k-space data for the configured phantom and acquisition.
    Simulate,
    /// Builds the fingerprint dictionary of the configured sequence.
    Dictionary,
    /// Reconstructs parameter maps with one method.
    Recon(ReconArgs),
    /// Trains the Bloch-map surrogate network.
    TrainSurrogate(TrainArgs),
    /// Smoothing of multi-echo relaxometry fits.
    Smooth {
        #[command(subcommand)]
        cmd: SmoothCmd,
    },
    /// Relative-error metrics of an estimate against a reference map.
    Metrics(MetricsArgs),
    /// Exports one channel of a raw array as an 8-bit PGM.
    Export(ExportArgs),
    /// Runs the full configured experiment.
    Run,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodName {
    Mrf,
    Blip,
    Lm,
    Twostep,
    Bcs,
    BcsQmri,
    Nn,
}

impl MethodName {
    fn as_str(self) -> &'static str {
        match self {
            MethodName::Mrf => "mrf",
            MethodName::Blip => "blip",
            MethodName::Lm => "lm",
            MethodName::Twostep => "twostep",
            MethodName::Bcs => "bcs",
            MethodName::BcsQmri => "bcs-qmri",
            MethodName::Nn => "nn",
        }
    }
}

#[derive(Args)]
struct ReconArgs {
    #[arg(value_enum)]
    method: MethodName,
    /// k-space data written by `simulate`; simulated from the config if absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dictionary written by `dictionary`; built from the config if absent.
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Trained surrogate for `nn`.
    #[arg(long)]
    net: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dictionary to train on; built from the config if absent.
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Overrides the configured training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum SmoothCmd {
    /// ESTATICS fit followed by adaptive weights smoothing.
    Aws(AwsArgs),
}

#[derive(Args)]
struct AwsArgs {
    /// T1-weighted echoes, raw array of shape [echoes, ny, nx].
    #[arg(long)]
    t1w: PathBuf,
    /// PD-weighted echoes, raw array of shape [echoes, ny, nx].
    #[arg(long)]
    pdw: PathBuf,
    /// JSON with `te_t1`, `te_pd` (s), `a_t1`, `a_pd` (rad), `tr` (s), `sigma`.
    #[arg(long)]
    protocol: PathBuf,
    /// Adaptation parameter [default: 50].
    #[arg(long)]
    lambda: Option<f64>,
    /// Final bandwidth in voxels [default: 4].
    #[arg(long)]
    hmax: Option<f64>,
    /// Half-width of the comparison patch; 0 compares single voxels [default: 0].
    #[arg(long)]
    patch_radius: Option<usize>,
}

#[derive(Deserialize)]
struct Protocol {
    te_t1: Vec<f64>,
    te_pd: Vec<f64>,
    a_t1: f64,
    a_pd: f64,
    tr: f64,
    sigma: f64,
}

#[derive(Args)]
struct MetricsArgs {
    /// Estimated parameter map (raw).
    #[arg(long)]
    estimate: PathBuf,
    /// Reference parameter map (raw); its nonzero-density voxels form the foreground.
    #[arg(long)]
    truth: PathBuf,
    /// k-space data for the data residual column.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Raw array base path.
    input: PathBuf,
    /// Channel index along the leading axis of a [c, ny, nx] array.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Window; defaults to the value range.
    #[arg(long, requires = "hi")]
    lo: Option<f64>,
    /// Upper end of the window.
    #[arg(long, requires = "lo")]
    hi: Option<f64>,
    /// Output file; defaults to `<out>/<input name>_<channel>.pgm`.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qmri: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn tag(cfg: &ExperimentConfig, role: &str) -> serde_json::Value {
    json!({ "config_hash": cfg.hash(), "role": role })
}

fn out_path(cli: &Cli, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cli.out)?;
    Ok(cli.out.join(name))
}

fn write_config(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::write(out_path(cli, "config.json")?, serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

fn load_dict(path: Option<&Path>, cfg: &ExperimentConfig) -> Result<FingerprintDictionary> {
    let seq = cfg.sequence();
    let dict = match path {
        Some(p) => FingerprintDictionary::load(p)?,
        None => experiment_dictionary(cfg, &seq)?,
    };
    if dict.sequence_hash != seq.hash() {
        return Err(Error::Config("dictionary was built for a different sequence".into()));
    }
    Ok(dict)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Phantom => {
            cfg.validate()?;
            let p = load_phantom(&cfg)?;
            rawio::save_param_map(&out_path(&cli, "phantom")?, &p.map, Some(tag(&cfg, "truth")))?;
            let labels: Vec<f64> = p.labels.iter().map(|&l| l as f64).collect();
            rawio::save_image(&out_path(&cli, "labels")?, p.map.grid, &labels, tag(&cfg, "labels"))?;
            let comment = format!("config_hash={}", cfg.hash());
            for (c, name) in ["rho", "t1", "t2"].iter().enumerate() {
                export_pgm(&out_path(&cli, &format!("phantom_{name}.pgm"))?, p.map.grid, p.map.channel(c), None, Some(&comment))?;
            }
            write_config(&cli, &cfg)?;
        }
        Cmd::Simulate => {
            let acq = simulate(&cfg)?;
            save_kspace(&out_path(&cli, "kspace")?, &acq.data)?;
            rawio::save_param_map(&out_path(&cli, "truth")?, &acq.phantom.map, Some(tag(&cfg, "truth")))?;
            write_config(&cli, &cfg)?;
            println!("wrote {} k-space samples to {}", acq.data.sample_count(), cli.out.display());
        }
        Cmd::Dictionary => {
            cfg.validate()?;
            let dict = experiment_dictionary(&cfg, &cfg.sequence())?;
            dict.save(&out_path(&cli, "dictionary")?)?;
            println!("wrote {} fingerprints of length {}", dict.len(), dict.frames());
        }
        Cmd::Recon(a) => {
            if cfg.method.name() != a.method.as_str() {
                cfg.method = Method::from_name(a.method.as_str())?;
            }
            if let (Method::Nn(n), Some(p)) = (&mut cfg.method, &a.net) {
                *n = NnParams { net_file: Some(p.clone()), ..n.clone() };
            }
            cfg.validate()?;
            let seq = cfg.sequence();
            let (y, truth) = match &a.data {
                Some(p) => (load_kspace(p)?, None),
                None => {
                    let acq = simulate(&cfg)?;
                    (acq.data, Some(acq.phantom))
                }
            };
            let dict = load_dict(a.dict.as_deref(), &cfg)?;
            let (q, trace) = reconstruct(&cfg, &seq, &dict, &y)?;
            let h = cfg.hash();
            rawio::save_param_map(&out_path(&cli, "estimate")?, &q, Some(tag(&cfg, "estimate")))?;
            std::fs::write(out_path(&cli, "trace.csv")?, trace.to_csv(&h))?;
            if let Some(p) = truth {
                let (_, row) = evaluate(cfg.method.name(), &p, &q, &y, &seq, iteration_count(&cfg.method, &trace))?;
                export_csv(&out_path(&cli, "metrics.csv")?, std::slice::from_ref(&row), &h)?;
                print_row(&row);
            }
            write_config(&cli, &cfg)?;
        }
        Cmd::TrainSurrogate(a) => {
            let mut params = match &cfg.method {
                Method::Nn(n) => n.clone(),
                _ => NnParams::default(),
            };
            if let Some(e) = a.epochs {
                params.train.epochs = e;
            }
            cfg.method = Method::Nn(params.clone());
            cfg.validate()?;
            let dict = load_dict(a.dict.as_deref(), &cfg)?;
            let r = train_on_dictionary(&dict, &cfg.admissible_box, &params.train)?;
            r.net.save(&out_path(&cli, "surrogate")?)?;
            let mut s = String::from("epoch,loss\n");
            for (k, l) in r.loss.iter().enumerate() {
                s += &format!("{k},{l:.17e}\n");
            }
            std::fs::write(out_path(&cli, "training_loss.csv")?, s)?;
            println!("training mse {:.3e} over {} parameters", r.mse, r.net.param_count());
        }
        Cmd::Smooth { cmd: SmoothCmd::Aws(a) } => smooth_aws(&cli, a)?,
        Cmd::Metrics(a) => {
            let est = rawio::load_param_map(&a.estimate)?;
            let truth = rawio::load_param_map(&a.truth)?;
            let fg: Vec<bool> = truth.rho.iter().map(|&r| r > 0.0).collect();
            let phantom = qmri::harness::Phantom { labels: fg.iter().map(|&f| u8::from(f)).collect(), map: truth };
            let (row, hash) = match &a.data {
                Some(p) => {
                    let y = load_kspace(p)?;
                    (evaluate("estimate", &phantom, &est, &y, &cfg.sequence(), 0)?.1, cfg.hash())
                }
                None => {
                    let e = qmri::metrics::rel_error_map(&est, &phantom.map, &fg)?;
                    let row = qmri::harness::MetricsRow {
                        method: "estimate".into(),
                        foreground_voxels: fg.iter().filter(|&&f| f).count(),
                        mean_rel_rho: e.mean_rho,
                        mean_rel_t1: e.mean_t1,
                        mean_rel_t2: e.mean_t2,
                        data_residual: f64::NAN,
                        iterations: 0,
                    };
                    (row, cfg.hash())
                }
            };
            export_csv(&out_path(&cli, "metrics.csv")?, std::slice::from_ref(&row), &hash)?;
            print_row(&row);
        }
        Cmd::Export(a) => {
            let (h, v) = rawio::read_real(&a.input)?;
            let (c, ny, nx) = match h.shape[..] {
                [ny, nx] => (1, ny, nx),
                [c, ny, nx] => (c, ny, nx),
                _ => return Err(Error::ShapeMismatch(format!("cannot export an array of shape {:?}", h.shape))),
            };
            if a.channel >= c {
                return Err(Error::InvalidArgument(format!("channel {} out of range for {c} channels", a.channel)));
            }
            let grid = Grid::new(nx, ny)?;
            let img = &v[a.channel * grid.len()..(a.channel + 1) * grid.len()];
            let window = match (a.lo, a.hi) {
                (Some(lo), Some(hi)) => Some(Window::new(lo, hi)?),
                _ => None,
            };
            let path = match &a.pgm {
                Some(p) => p.clone(),
                None => {
                    let stem = a.input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    out_path(&cli, &format!("{stem}_{}.pgm", a.channel))?
                }
            };
            let comment = h.meta.as_ref().and_then(|m| m.get("config_hash")).and_then(|v| v.as_str());
            let comment = comment.map(|c| format!("config_hash={c}"));
            export_pgm(&path, grid, img, window, comment.as_deref())?;
        }
        Cmd::Run => {
            let r = run_experiment(&cfg, Some(&cli.out))?;
            print_row(&r.metrics);
        }
    }
    Ok(())
}

fn print_row(r: &qmri::harness::MetricsRow) {
    println!(
        "{}: mean relative error T1 {:.4}  T2 {:.4}  rho {:.4}  (residual {:.4e}, {} foreground voxels)",
        r.method, r.mean_rel_t1, r.mean_rel_t2, r.mean_rel_rho, r.data_residual, r.foreground_voxels
    );
}

fn read_echoes(base: &Path) -> Result<(Grid, Vec<Vec<f64>>)> {
    let (h, v) = rawio::read_real(base)?;
    let [e, ny, nx] = h.shape[..] else {
        return Err(Error::ShapeMismatch(format!("{}: echoes need shape [echoes, ny, nx]", base.display())));
    };
    let grid = Grid::new(nx, ny)?;
    Ok((grid, (0..e).map(|k| v[k * grid.len()..(k + 1) * grid.len()].to_vec()).collect()))
}

fn smooth_aws(cli: &Cli, a: &AwsArgs) -> Result<()> {
    let proto: Protocol = serde_json::from_str(&std::fs::read_to_string(&a.protocol)?)
        .map_err(|e| Error::Config(format!("{}: {e}", a.protocol.display())))?;
    let (grid, t1w) = read_echoes(&a.t1w)?;
    let (grid_pd, pdw) = read_echoes(&a.pdw)?;
    if grid != grid_pd {
        return Err(Error::ShapeMismatch("T1- and PD-weighted echoes differ in size".into()));
    }
    let echoes = EchoSet {
        grid,
        t1w,
        pdw,
        te_t1: proto.te_t1,
        te_pd: proto.te_pd,
        a_t1: proto.a_t1,
        a_pd: proto.a_pd,
        tr: proto.tr,
        sigma: proto.sigma,
    };
    let d = AwsConfig::default();
    let cfg = AwsConfig {
        lambda: a.lambda.unwrap_or(d.lambda),
        hmax: a.hmax.unwrap_or(d.hmax),
        patch_radius: a.patch_radius.unwrap_or(d.patch_radius),
        ..d
    };
    let fit = estatics_fit(&echoes)?;
    let s = smooth_qmaps(&fit, &cfg, echoes.a_t1, echoes.a_pd, echoes.tr)?;
    let meta = |role: &str| json!({ "role": role, "aws": cfg });
    let save = |name: &str, v: &[f64]| -> Result<()> { rawio::save_image(&out_path(cli, name)?, grid, v, meta(name)) };
    save("u_t1", &s.fit.u_t1)?;
    save("u_pd", &s.fit.u_pd)?;
    save("r2star", &s.fit.r2star)?;
    save("r1", &s.maps.r1)?;
    save("amplitude", &s.maps.amplitude)?;
    let flags: Vec<f64> = s.maps.out_of_range.iter().map(|&f| f as u8 as f64).collect();
    save("out_of_range", &flags)?;
    println!("smoothed {} voxels over {} bandwidth steps", grid.len(), s.smoothing.bandwidths.len());
    Ok(())
}
