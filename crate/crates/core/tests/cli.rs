use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qmri::rawio::{self, DType, RawHeader};

fn qmri(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmri")).arg("--out").arg(dir).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(dir: &Path, method: &str) -> String {
    let p = dir.join(format!("{method}.json"));
    let text = format!(
        r#"{{"phantom": {{"nx": 16, "ny": 16,
              "tissues": [{{"name": "a", "rho": 0.9, "t1": 1.2, "t2": 0.08}},
                          {{"name": "b", "rho": 0.6, "t1": 0.7, "t2": 0.05}}],
              "ellipses": [{{"cx": 0, "cy": 0, "a": 0.8, "b": 0.7, "label": 1}},
                           {{"cx": 0.2, "cy": 0, "a": 0.3, "b": 0.3, "label": 2}}]}},
            "frames": 16, "factor": 2, "sigma": 0.001,
            "method": {{"name": "{method}", "max_iters": 5, "steps": 5, "epochs": 5}}}}"#
    );
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn phantom_simulate_recon_metrics_export() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = small_config(d, "mrf");
    ok(&qmri(d, &["--config", &cfg, "phantom"]));
    assert!(d.join("phantom_t1.pgm").exists());
    let out = ok(&qmri(d, &["--config", &cfg, "simulate"]));
    assert!(out.contains("k-space samples"), "{out}");
    ok(&qmri(d, &["--config", &cfg, "dictionary"]));
    let data = d.join("kspace");
    let dict = d.join("dictionary");
    let rec = d.join("rec");
    let args = ["--config", &cfg, "recon", "mrf", "--data", data.to_str().unwrap(), "--dict", dict.to_str().unwrap()];
    ok(&qmri(&rec, &args));
    let est = rec.join("estimate");
    let truth = d.join("truth");
    let m = ok(&qmri(&rec, &["metrics", "--estimate", est.to_str().unwrap(), "--truth", truth.to_str().unwrap()]));
    assert!(m.contains("mean relative error"), "{m}");
    let (_, rows) = qmri::harness::read_metrics_csv(&rec.join("metrics.csv")).unwrap();
    assert!(rows[0].mean_rel_t1 < 0.5 && rows[0].data_residual.is_nan());
    let pgm = rec.join("t1.pgm");
    ok(&qmri(&rec, &["export", est.to_str().unwrap(), "--channel", "1", "--lo", "0", "--hi", "2", "--pgm", pgm.to_str().unwrap()]));
    let (w, h, comments, _) = qmri::harness::export::decode_pgm(&fs::read(&pgm).unwrap()).unwrap();
    assert_eq!((w, h), (16, 16));
    assert_eq!(comments.len(), 1);
}

#[test]
fn every_recon_method_runs_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    for method in ["mrf", "blip", "lm", "twostep", "bcs", "bcs-qmri", "nn"] {
        let cfg = small_config(tmp.path(), method);
        let dir = tmp.path().join(method);
        let out = ok(&qmri(&dir, &["--config", &cfg, "recon", method]));
        assert!(out.starts_with(&format!("{method}: mean relative error")), "{out}");
        assert!(dir.join("trace.csv").exists() && dir.join("metrics.csv").exists());
    }
}

#[test]
fn run_writes_artifacts_and_seed_flag_changes_the_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "lm");
    let dir = tmp.path().join("run");
    ok(&qmri(&dir, &["--config", &cfg, "run"]));
    let first = fs::read(dir.join("metrics.csv")).unwrap();
    ok(&qmri(&dir, &["--config", &cfg, "run"]));
    assert_eq!(fs::read(dir.join("metrics.csv")).unwrap(), first);
    // A different seed is a different experiment: the directory is refused.
    let out = qmri(&dir, &["--config", &cfg, "--seed", "99", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing"));
}

#[test]
fn train_surrogate_writes_a_loadable_network() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "nn");
    let out = ok(&qmri(tmp.path(), &["--config", &cfg, "train-surrogate", "--epochs", "3"]));
    assert!(out.contains("training mse"), "{out}");
    let net = qmri::surrogate::SurrogateNet::load(&tmp.path().join("surrogate")).unwrap();
    assert_eq!(net.frames(), 16);
    let loss = fs::read_to_string(tmp.path().join("training_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 4);
    let dir = tmp.path().join("rec");
    let p = tmp.path().join("surrogate");
    ok(&qmri(&dir, &["--config", &cfg, "recon", "nn", "--net", p.to_str().unwrap()]));
}

#[test]
fn smooth_aws_from_raw_echoes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (nx, ny) = (10, 8);
    let te = [0.004, 0.008, 0.012, 0.016];
    let (tr, a_t1, a_pd) = (0.025f64, 0.35f64, 0.09f64);
    let (r1, amp, r2s) = (1.1f64, 2.0f64, 20.0f64);
    let ernst = |a: f64| amp * a.sin() * (1.0 - (-r1 * tr).exp()) / (1.0 - a.cos() * (-r1 * tr).exp());
    for (name, a) in [("t1w", a_t1), ("pdw", a_pd)] {
        let v: Vec<f64> = te.iter().flat_map(|t| vec![ernst(a) * (-r2s * t).exp(); nx * ny]).collect();
        let h = RawHeader::new(DType::F64, vec![te.len(), ny, nx], false);
        rawio::write_real(&d.join(name), &h, &v).unwrap();
    }
    let proto = serde_json::json!({"te_t1": te, "te_pd": te, "a_t1": a_t1, "a_pd": a_pd, "tr": tr, "sigma": 0.01});
    fs::write(d.join("protocol.json"), proto.to_string()).unwrap();
    let s = |p: &str| d.join(p).to_string_lossy().into_owned();
    let args = ["smooth", "aws", "--t1w", &s("t1w"), "--pdw", &s("pdw"), "--protocol", &s("protocol.json"), "--hmax", "2"];
    let out = ok(&qmri(&d.join("aws"), &args));
    assert!(out.contains("bandwidth steps"), "{out}");
    let grid = qmri::Grid::new(nx, ny).unwrap();
    let r1_map = rawio::load_image(&d.join("aws/r1"), grid).unwrap();
    let r2_map = rawio::load_image(&d.join("aws/r2star"), grid).unwrap();
    assert!(r1_map.iter().all(|v| (v - r1).abs() <= 1e-8 * r1), "{:?}", &r1_map[..3]);
    assert!(r2_map.iter().all(|v| (v - r2s).abs() <= 1e-8 * r2s));
}

#[test]
fn exit_codes_distinguish_configuration_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"frames": 0}"#).unwrap();
    let out = qmri(tmp.path(), &["--config", bad.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frames"));
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(qmri(tmp.path(), &["--config", bad.to_str().unwrap(), "run"]).status.code(), Some(2));
    assert_eq!(qmri(tmp.path(), &["recon", "nope"]).status.code(), Some(2));
    let missing = tmp.path().join("missing");
    assert_eq!(qmri(tmp.path(), &["metrics", "--estimate", missing.to_str().unwrap(), "--truth", "x"]).status.code(), Some(2));
}
