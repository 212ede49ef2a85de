use grnet::ablation::{preset, run_ablation_suite, PRESET_NAMES};
use grnet::checkpoint::Checkpoint;
use grnet::datamodel::{generate_synthetic, SamplePair, SynthSpec};
use grnet::model::{Grnet, ModelConfig};
use grnet::tensor::Tensor;
use grnet::trainer::{evaluate, evaluate_with_maps, gate_stats, infer, train, TrainConfig};
use grnet::Error;

fn tiny(name: &str) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        ..ModelConfig::tiny().with_flags(preset(name).unwrap())
    }
}

fn data(n: usize, seed: u64) -> Vec<SamplePair> {
    generate_synthetic(&SynthSpec {
        n_samples: n,
        image_size: 32,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        threads: Some(1),
        ..TrainConfig::desk()
    }
}

#[test]
fn every_preset_builds_and_predicts() {
    let d = data(2, 1);
    let rgb = Tensor::stack(&[d[0].rgb.clone(), d[1].rgb.clone()]);
    let depth = Tensor::stack(&[d[0].depth.clone(), d[1].depth.clone()]);
    for name in PRESET_NAMES {
        let cfg = tiny(name);
        let net = Grnet::new(&cfg).unwrap();
        let store = net.init_params(0);
        let pred = net.predict(&store, &rgb, &depth).unwrap();
        assert_eq!(pred.probs.shape(), [2, 1, 32, 32], "{name}");
        assert!(pred.probs.data().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(pred.gates.is_some(), cfg.flags.mgu_gating, "{name}");
        if let Some(g) = pred.gates {
            assert_eq!(g[0].gr.is_some(), cfg.flags.oegs_gating, "{name}");
        }
    }
}

#[test]
fn rgb_only_model_has_no_depth_parameters() {
    let net = Grnet::new(&tiny("w/o_depth")).unwrap();
    assert!(net.param_specs().iter().all(|s| !s.name.contains("depth")));
    let dual = Grnet::new(&tiny("en_fpn")).unwrap();
    assert!(dual.param_specs().iter().any(|s| s.name.starts_with("enc_depth")));
}

#[test]
fn forward_is_pure() {
    let net = Grnet::new(&tiny("grnet_mlp")).unwrap();
    let store = net.init_params(4);
    let d = &data(1, 2)[0];
    let a = net.predict(&store, &d.rgb, &d.depth).unwrap();
    let b = net.predict(&store, &d.rgb, &d.depth).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn mismatched_parameters_are_rejected() {
    let net = Grnet::new(&tiny("en_mix_de")).unwrap();
    let other = Grnet::new(&tiny("en_fpn")).unwrap();
    assert!(matches!(
        net.validate_params(&other.init_params(0)),
        Err(Error::CheckpointMismatch(_))
    ));
    net.validate_params(&net.init_params(0)).unwrap();
}

#[test]
fn rejects_bad_inputs() {
    let net = Grnet::new(&tiny("en_fpn")).unwrap();
    let store = net.init_params(0);
    let rgb = Tensor::zeros([1, 3, 32, 32]);
    assert!(net.predict(&store, &rgb, &Tensor::zeros([1, 1, 16, 16])).is_err());
    assert!(net.predict(&store, &Tensor::zeros([1, 3, 40, 40]), &Tensor::zeros([1, 1, 40, 40])).is_err());
}

#[test]
fn training_lowers_the_loss() {
    let out = train(&tiny("en_mix_fpn"), &quick(60), &data(8, 3)).unwrap();
    assert_eq!(out.log.len(), 60);
    let head: f64 = out.log[..10].iter().map(|l| l.loss.total).sum();
    let tail: f64 = out.log[50..].iter().map(|l| l.loss.total).sum();
    assert!(tail < head, "first {head}, last {tail}");
    assert_eq!(out.checkpoint.step, 60);
}

#[test]
fn saved_checkpoint_evaluates_identically() {
    let d = data(4, 6);
    let out = train(&tiny("grnet_mlp"), &quick(4), &d).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.grnet");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(evaluate(&back, &d).unwrap(), evaluate(&out.checkpoint, &d).unwrap());
}

#[test]
fn evaluation_resizes_to_the_model_input() {
    let d = data(3, 7);
    let out = train(&tiny("en_fpn"), &quick(2), &d).unwrap();
    let big: Vec<SamplePair> = d.iter().map(|s| s.resized(64)).collect();
    let (report, maps) = evaluate_with_maps(&out.checkpoint, &big).unwrap();
    assert_eq!(report.n_samples, 3);
    assert_eq!(maps[0].shape(), [1, 1, 32, 32]);
    assert!(matches!(evaluate(&out.checkpoint, &[]), Err(Error::EmptyInput(_))));
}

#[test]
fn gate_statistics_need_a_gated_model() {
    let d = data(3, 8);
    let plain = train(&tiny("en_fpn"), &quick(2), &d).unwrap();
    assert!(matches!(
        gate_stats(&plain.checkpoint, &[("s".into(), d.clone())]),
        Err(Error::GatingDisabled)
    ));
    let gated = train(&tiny("en_mix_de"), &quick(2), &d).unwrap();
    let report = gate_stats(&gated.checkpoint, &[("s".into(), d.clone())]).unwrap();
    assert_eq!(report.overall.n_samples, 3);
    let csv = report.to_csv();
    assert!(csv.starts_with("dataset,n,Ga1"));
    assert_eq!(csv.lines().count(), 3);
    let inf = infer(&gated.checkpoint, &d).unwrap();
    assert_eq!(inf.gates.unwrap().len(), 3);
}

#[test]
fn huge_learning_rate_diverges_with_last_checkpoint() {
    let cfg = TrainConfig {
        lr_backbone_max: 1e12,
        lr_other_max: 1e12,
        ..quick(40)
    };
    match train(&tiny("en_fpn"), &cfg, &data(4, 9)) {
        Err(Error::Diverged { step, last }) => {
            assert!(step > 0);
            assert_eq!(last.step, step);
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn ablation_suite_rejects_unknown_rows_and_keeps_order() {
    let d = data(2, 10);
    let base = tiny("en_fpn");
    let rows = ["en_fpn".to_string(), "bogus".to_string()];
    assert!(matches!(
        run_ablation_suite(&base, &quick(2), &d, &d, &rows),
        Err(Error::UnknownPreset { .. })
    ));
    let rows = ["2".to_string(), "1".to_string()];
    let table = run_ablation_suite(&base, &quick(2), &d, &d, &rows).unwrap();
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[1].starts_with("2,en_fpn,") && lines[2].starts_with("1,w/o_depth,"));
    assert!(lines[1].ends_with(",ok"));
}
