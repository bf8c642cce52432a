use adaflow_core::ensemble::{init_ensemble, EnsembleConfig, EnsembleState, UpdateInterval};
use adaflow_core::harness::{
    pretrain, read_csv, run_online_eval, scene_triplets, write_csv, PretrainSettings, SceneKind, SceneSpec,
    StreamScript, StreamSegment,
};
use adaflow_core::losses::{ConvFeatureExtractor, MuWeights, PretrainWeights};
use adaflow_core::networks::{ArchConfig, PredictionParams, WeightNetParams};
use adaflow_core::tensor::AdamConfig;

fn arch() -> ArchConfig {
    ArchConfig {
        edvf_depth: 2,
        edvf_base: 4,
        refine_depth: 1,
        refine_base: 3,
        weight_depth: 1,
        weight_base: 3,
        max_disp: 4.0,
    }
}

fn scene(kind: SceneKind, seed: u64, length: usize) -> SceneSpec {
    SceneSpec {
        kind,
        num_objects: 2,
        velocity_range: [1.0, 2.0],
        background: seed,
        size: [16, 16],
        length,
        seed,
        heading_deg: [0.0, 360.0],
    }
}

fn pretrained() -> PredictionParams {
    let triplets = scene_triplets(&[scene(SceneKind::CameraPan, 1, 8)], 1).unwrap();
    let settings = PretrainSettings {
        arch: arch(),
        weights: PretrainWeights::default(),
        mu: MuWeights::OFFLINE,
        optimizer: AdamConfig::default(),
        epochs: 2,
        seed: 0,
        extractor: Some(ConvFeatureExtractor::random(0, 3).unwrap()),
    };
    let mut seen = Vec::new();
    let out = pretrain(&triplets, PredictionParams::init(&arch(), 0), &settings, |e, l| {
        seen.push((e, l))
    })
    .unwrap();
    assert_eq!(out.loss_curve.len(), 2);
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), [0, 1]);
    assert!(out.loss_curve.iter().all(|l| l.is_finite()));
    out.params
}

fn ensemble(params: PredictionParams, interval: UpdateInterval) -> EnsembleState {
    let config = EnsembleConfig {
        arch: arch(),
        k: 1,
        update_interval: interval,
        lambda_c: 0.1,
        mu_online: MuWeights::ONLINE,
        optimizer: AdamConfig::default(),
    };
    init_ensemble(params, WeightNetParams::init(&arch(), 4), config).unwrap()
}

fn script() -> StreamScript {
    StreamScript {
        segments: vec![
            StreamSegment {
                scene: scene(SceneKind::CameraPan, 2, 6),
                repeat: 1,
            },
            StreamSegment {
                scene: scene(SceneKind::TranslatingShapes, 3, 6),
                repeat: 1,
            },
        ],
    }
}

#[test]
fn pretrained_network_streams_without_updates() {
    let mut state = ensemble(pretrained(), UpdateInterval::Never);
    let records = run_online_eval(script().render().unwrap(), &mut state, 0.9, |_, _| Ok(())).unwrap();
    // two scenes of six frames, the first two of each only fill history
    assert_eq!(records.len(), 8);
    assert_eq!(
        records.iter().map(|r| r.scene_id).collect::<Vec<_>>(),
        [0, 0, 0, 0, 1, 1, 1, 1]
    );
    for r in &records {
        assert!(!r.updated && r.loss.is_none());
        assert_eq!(r.ssim_continuous, r.ssim_pretrained);
        assert!((r.ssim_ensemble - r.ssim_pretrained).abs() < 1e-5);
    }
}

#[test]
fn adapted_state_survives_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = ensemble(pretrained(), UpdateInterval::Every(1));
    let before = state.theta_p().checksum();
    let records = run_online_eval(script().render().unwrap(), &mut state, 0.9, |_, _| Ok(())).unwrap();
    assert!(records.iter().all(|r| r.updated && r.loss.is_some_and(f64::is_finite)));
    assert_eq!(state.theta_p().checksum(), before);

    let csv = dir.path().join("metrics.csv");
    write_csv(&records, &csv).unwrap();
    assert_eq!(read_csv(&csv).unwrap().len(), records.len());

    state.save_checkpoint(dir.path()).unwrap();
    let loaded = EnsembleState::load_checkpoint(dir.path(), state.config.clone()).unwrap();
    assert_eq!(loaded.frame_clock(), state.frame_clock());
    let frames: Vec<_> = script().render().unwrap().into_iter().map(|(_, f)| f).collect();
    let (a, b) = (
        state.predict_ensemble(&frames[5], &frames[4]).unwrap(),
        loaded.predict_ensemble(&frames[5], &frames[4]).unwrap(),
    );
    assert_eq!(a.x_hat, b.x_hat);
    assert_eq!(a.w, b.w);
}
