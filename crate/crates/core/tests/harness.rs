mod common;

use std::fs;

use qmri::bloch::{bloch_map, default_dictionary, SequenceSpec};
use qmri::forward::{add_noise, apply_forward, make_cartesian_masks};
use qmri::harness::{export, run_experiment, ExperimentConfig, Method, MetricsRow, PhantomSpec};
use qmri::integrated::{lm_reconstruct_bloch, LmConfig};
use qmri::metrics::rel_error_map;
use qmri::mrf::{blip_reconstruct, mrf_reconstruct, BlipConfig};
use qmri::{rawio, AdmissibleBox};

fn small(method: Method) -> ExperimentConfig {
    ExperimentConfig { phantom: PhantomSpec::desk(32), frames: 20, method, ..Default::default() }
}

#[test]
fn noiseless_full_sampling_on_grid_mrf_has_zero_error() {
    let cfg = ExperimentConfig {
        phantom: common::on_grid_desk(32),
        factor: 1,
        sigma: 0.0,
        method: Method::Mrf,
        ..Default::default()
    };
    let m = run_experiment(&cfg, None).unwrap().metrics;
    assert_eq!((m.mean_rel_t1, m.mean_rel_t2), (0.0, 0.0));
    assert!(m.mean_rel_rho <= 1e-10, "{}", m.mean_rel_rho);
    assert!(m.data_residual <= 1e-10, "{}", m.data_residual);
}

#[test]
fn repeated_runs_write_identical_artifacts() {
    let cfg = small(Method::Blip(BlipConfig { steps: 5, mu: 1.0 }));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&cfg, Some(a.path())).unwrap();
    run_experiment(&cfg, Some(b.path())).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 17, "{names:?}");
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn every_artifact_carries_the_config_hash() {
    let cfg = small(Method::Mrf);
    let h = cfg.hash();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, Some(dir.path())).unwrap();
    for base in ["truth", "estimate", "rel_error"] {
        let header = rawio::read_header(&dir.path().join(base)).unwrap();
        assert_eq!(header.meta_field::<String>("config_hash").unwrap(), h);
    }
    for csv in ["metrics.csv", "trace.csv"] {
        let text = fs::read_to_string(dir.path().join(csv)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_hash={h}"));
    }
    for e in fs::read_dir(dir.path()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "pgm") {
            let (w, hgt, comments, _) = export::decode_pgm(&fs::read(&p).unwrap()).unwrap();
            assert_eq!((w, hgt), (32, 32));
            assert_eq!(comments, vec![format!("config_hash={h}")]);
        }
    }
    let stored = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(stored.hash(), h);
}

#[test]
fn reusing_an_output_directory_with_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Method::Mrf);
    run_experiment(&cfg, Some(dir.path())).unwrap();
    run_experiment(&cfg, Some(dir.path())).unwrap();
    let other = ExperimentConfig { seed: 8, ..cfg };
    let err = run_experiment(&other, Some(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("refusing"), "{err}");
}

#[test]
fn raw_phantom_file_replaces_the_ellipses() {
    let dir = tempfile::tempdir().unwrap();
    let spec = common::on_grid_desk(16);
    let p = qmri::harness::make_phantom(&spec).unwrap();
    let base = dir.path().join("phantom");
    rawio::save_param_map(&base, &p.map, None).unwrap();
    let from_spec = ExperimentConfig { phantom: spec, frames: 20, factor: 2, ..Default::default() };
    let from_file = ExperimentConfig { phantom_file: Some(base), ..from_spec.clone() };
    let a = run_experiment(&from_spec, None).unwrap();
    let b = run_experiment(&from_file, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
}

/// The orchestrator must add nothing to the modules it chains together.
#[test]
fn default_desk_metrics_match_direct_module_calls() {
    let cfg = ExperimentConfig::default();
    let p = qmri::harness::make_phantom(&PhantomSpec::desk(64)).unwrap();
    let seq = SequenceSpec::default_mrf(40);
    let pat = make_cartesian_masks(p.map.grid, 8, 40, 7, true).unwrap();
    let y = add_noise(&apply_forward(&bloch_map(&p.map, &seq).unwrap(), &pat).unwrap(), 0.005, 7).unwrap();
    let dict = default_dictionary(&seq).unwrap();
    let fg = p.foreground();
    let q_mrf = mrf_reconstruct(&y, &dict).unwrap();
    let blip = blip_reconstruct(&y, &dict, BlipConfig::default(), None).unwrap().map;
    let lm_cfg = LmConfig { sigma: Some(0.005), ..LmConfig::default() };
    let lm = lm_reconstruct_bloch(&y, &seq, &q_mrf, &AdmissibleBox::default(), &lm_cfg).unwrap().map;
    for (method, direct) in [
        (Method::Mrf, &q_mrf),
        (Method::Blip(BlipConfig::default()), &blip),
        (Method::Lm(LmConfig::default()), &lm),
    ] {
        let name = method.name();
        let out = run_experiment(&ExperimentConfig { method, ..cfg.clone() }, None).unwrap();
        let e = rel_error_map(direct, &p.map, &fg).unwrap();
        let MetricsRow { mean_rel_rho, mean_rel_t1, mean_rel_t2, .. } = out.metrics;
        assert_eq!((mean_rel_rho, mean_rel_t1, mean_rel_t2), (e.mean_rho, e.mean_t1, e.mean_t2), "{name}");
        assert_eq!(&out.estimate, direct, "{name}");
    }
}
