//! Decoding behaviour on generated sessions: chance level without signal,
//! degradation under drift, and agreement between calibration and replay.

use startstop_core::decoder::DecoderId;
use startstop_core::pipeline::{calibrate, replay, PipelineConfig, SessionLog, SessionWindows};
use startstop_core::recenter::ReferenceKind;
use startstop_core::synth::{generate_session, SyntheticSessionSpec};
use startstop_core::analysis::run_auc;

fn windows(spec: &SyntheticSessionSpec, cfg: &PipelineConfig) -> SessionWindows {
    let (rec, truth) = generate_session(spec).unwrap();
    SessionWindows::from_recording(&rec, &truth, &cfg.stream).unwrap()
}

fn pooled_margins(log: &SessionLog, id: DecoderId) -> Vec<(f64, bool)> {
    log.runs.iter().flat_map(|r| log.run_margins(r.session, r.run, id)).collect()
}

fn noise_only(seed: u64) -> SyntheticSessionSpec {
    SyntheticSessionSpec {
        sources: Vec::new(),
        movement_broadband: 0.0,
        seed,
        ..SyntheticSessionSpec::default_spec()
    }
}

#[test]
fn noise_only_decoding_is_at_chance() {
    let mut cfg = PipelineConfig::new(16);
    cfg.replay.mode = ReferenceKind::Identity;
    let bundle = calibrate(&[windows(&noise_only(1), &cfg)], &cfg).unwrap();
    let online = SyntheticSessionSpec { n_trials: 40, trials_per_run: 2, ..noise_only(2) };
    let log = replay(&bundle, &[windows(&online, &cfg)], &cfg).unwrap();
    assert_eq!(log.runs.len(), 20);
    for id in [DecoderId::Onset, DecoderId::Offset] {
        let aucs: Vec<f64> = log.runs.iter().map(|r| log.run_auc(r.session, r.run, id).unwrap()).collect();
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.07, "{id:?}: mean run AUC {mean}");
    }
}

#[test]
fn accuracy_degrades_with_drift() {
    let mut cfg = PipelineConfig::new(16);
    cfg.replay.mode = ReferenceKind::Identity;
    let base = SyntheticSessionSpec::default_spec();
    let bundle = calibrate(&[windows(&SyntheticSessionSpec { seed: 100, ..base.clone() }, &cfg)], &cfg).unwrap();
    let accuracy = |strength: f64| {
        let spec = SyntheticSessionSpec { seed: 200, drift_strength: strength, drift_seed: 9, ..base.clone() };
        let log = replay(&bundle, &[windows(&spec, &cfg)], &cfg).unwrap();
        let margins: Vec<(f64, bool)> =
            [DecoderId::Onset, DecoderId::Offset].iter().flat_map(|&id| pooled_margins(&log, id)).collect();
        margins.iter().filter(|(m, pos)| (*m > 0.0) == *pos).count() as f64 / margins.len() as f64
    };
    let acc: Vec<f64> = [0.0, 0.25, 0.5, 1.0].iter().map(|&s| accuracy(s)).collect();
    assert!(acc[0] > 0.6, "{acc:?}");
    for w in acc.windows(2) {
        assert!(w[1] < w[0], "{acc:?}");
    }
}

#[test]
fn identity_replay_on_training_session_matches_cross_validation() {
    let mut cfg = PipelineConfig::new(16);
    cfg.replay.mode = ReferenceKind::Identity;
    let train = windows(&SyntheticSessionSpec { seed: 100, ..SyntheticSessionSpec::default_spec() }, &cfg);
    let bundle = calibrate(std::slice::from_ref(&train), &cfg).unwrap();
    let log = replay(&bundle, &[train], &cfg).unwrap();
    for id in [DecoderId::Onset, DecoderId::Offset] {
        let auc = run_auc(&pooled_margins(&log, id)).unwrap();
        let cv = bundle.decoder(id).cv_auc;
        assert!(auc >= cv - 0.05, "{id:?}: replay {auc} vs cross-validated {cv}");
    }
}
