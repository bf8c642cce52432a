use super::*;
use crate::losses::loss_adaptive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn config(interval: UpdateInterval) -> EnsembleConfig {
    EnsembleConfig {
        arch: arch(),
        k: 1,
        update_interval: interval,
        lambda_c: 0.1,
        mu_online: MuWeights::ONLINE,
        optimizer: AdamConfig::default(),
    }
}

fn noise(seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frame::from_fn(16, 16, |_, _, _| rng.gen_range(0.0..1.0))
}

/// Smooth pattern drifting right by one pixel per frame.
fn drifting(t: usize) -> Frame {
    Frame::from_fn(16, 16, |c, y, x| {
        let u = (x as f32 - t as f32) * 0.45 + c as f32;
        0.5 + 0.3 * u.sin() * (y as f32 * 0.3).cos()
    })
}

fn state(interval: UpdateInterval) -> EnsembleState {
    init_ensemble(
        PredictionParams::init(&arch(), 1),
        WeightNetParams::init(&arch(), 2),
        config(interval),
    )
    .unwrap()
}

fn randomize_gate(s: &mut EnsembleState, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, b) in s.theta_w.layers.iter_mut() {
        b.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
}

#[test]
fn init_copies_pretrained() {
    let mut s = state(UpdateInterval::Every(1));
    assert_eq!(s.theta_c, *s.theta_p());
    assert_eq!(s.frame_clock(), 0);
    let before = s.theta_p().checksum();
    s.theta_c.edvf.iter_mut().next().unwrap().1.data[0] += 1.0;
    assert_eq!(s.theta_p().checksum(), before);
    assert_ne!(s.theta_c, *s.theta_p());
}

#[test]
fn init_rejects_architecture_mismatch() {
    let other = ArchConfig { edvf_base: 5, ..arch() };
    let r = init_ensemble(
        PredictionParams::init(&other, 1),
        WeightNetParams::init(&arch(), 2),
        config(UpdateInterval::Never),
    );
    assert!(r.is_err());
}

#[test]
fn blend_degenerate_weights() {
    let (a, b) = (noise(1), noise(2));
    let n = 16 * 16;
    assert_eq!(blend(&a, &b, &vec![1.0; n]).unwrap(), a);
    assert_eq!(blend(&a, &b, &vec![0.0; n]).unwrap(), b);
    let half = blend(&a, &b, &vec![0.5; n]).unwrap();
    for ((m, x), y) in half.data().iter().zip(a.data()).zip(b.data()) {
        assert!((m - (x + y) / 2.0).abs() < 1e-7);
    }
    let mut bad = vec![0.5; n];
    bad[7] = 1.01;
    assert!(blend(&a, &b, &bad).is_err());
}

#[test]
fn equal_branches_give_pretrained_output_for_any_gate() {
    let mut s = state(UpdateInterval::Every(1));
    randomize_gate(&mut s, 4);
    let p = s.predict_ensemble(&noise(5), &noise(6)).unwrap();
    assert!(p.w.iter().any(|&w| (w - 0.5).abs() > 0.05));
    assert!(p.x_hat.max_abs_diff(&p.x_p) <= 1e-6);
    let again = s.predict_ensemble(&noise(5), &noise(6)).unwrap();
    assert_eq!(again.x_hat, p.x_hat);
}

#[test]
fn blended_pixels_lie_between_branches() {
    let mut s = state(UpdateInterval::Every(1));
    randomize_gate(&mut s, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (_, b) in s.theta_c.refine2.iter_mut() {
        b.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let p = s.predict_ensemble(&noise(10), &noise(11)).unwrap();
    assert!(p.x_p.max_abs_diff(&p.x_c) > 1e-3);
    for ((h, a), b) in p.x_hat.data().iter().zip(p.x_p.data()).zip(p.x_c.data()) {
        assert!(*h >= a.min(*b) - 1e-6 && *h <= a.max(*b) + 1e-6);
    }
}

#[test]
fn online_update_keeps_pretrained_frozen_and_reports_loss() {
    let mut s = state(UpdateInterval::Every(1));
    randomize_gate(&mut s, 12);
    let (f0, f1, f2) = (drifting(0), drifting(1), drifting(2));

    // independent recomputation from the pre-update parameters
    let a = &s.config.arch;
    let (x1, x0, gt) = (f1.to_tensor::<f32>(), f0.to_tensor::<f32>(), f2.to_tensor::<f32>());
    let xp = predict(&x1, &x0, &s.theta_p().leaves(false), a).unwrap().x_r2;
    let xc = predict(&x1, &x0, &s.theta_c.leaves(false), a).unwrap().x_r2;
    let w = weight_net_forward(&x1, &x0, &s.theta_w.layers.leaves(false), a).unwrap();
    let xh = convex_blend("test", &xp, &xc, &w).unwrap();
    let want = loss_adaptive(&xh, &xc, &gt, 0.1, &MuWeights::ONLINE).unwrap().item() as f64;

    let before_p = s.theta_p().checksum();
    let before_c = s.theta_c.checksum();
    let before_w = s.theta_w.layers.checksum();
    let loss = s.online_update(&f0, &f1, &f2).unwrap();
    assert_eq!(loss, want);
    assert_eq!(s.theta_p().checksum(), before_p);
    assert_ne!(s.theta_c.checksum(), before_c);
    // identical branches give the gate an exactly zero gradient
    assert_eq!(s.theta_w.layers.checksum(), before_w);
    assert_eq!(s.adam_c.step, 1);
    assert_eq!(s.adam_w.step, 1);
    s.online_update(&f0, &f1, &f2).unwrap();
    assert_ne!(s.theta_w.layers.checksum(), before_w);
}

#[test]
fn static_stream_loss_trends_down() {
    let mut s = state(UpdateInterval::Every(1));
    let f = drifting(0);
    let losses: Vec<f64> = (0..50).map(|_| s.online_update(&f, &f, &f).unwrap()).collect();
    let ma = crate::harness::moving_average(&losses, 10);
    assert!(ma[49] < ma[9], "{:?}", ma);
}

#[test]
fn warm_up_and_scoring_order() {
    let mut s = state(UpdateInterval::Every(1));
    let frames: Vec<Frame> = (0..6).map(drifting).collect();
    let outs: Vec<StepOutcome> = frames.iter().map(|f| s.step_stream(f).unwrap()).collect();
    assert!(outs[0].scored.is_none() && outs[1].scored.is_none());
    assert!(outs[2..].iter().all(|o| o.scored.is_some()));
    for (i, o) in outs.iter().enumerate().skip(2) {
        let sc = o.scored.as_ref().unwrap();
        assert_eq!(sc.target_clock, i as u64 + 1);
        assert_eq!(sc.repeat, frames[i - 1]);
    }
    assert!(outs[0].update_loss.is_none() && outs[1].update_loss.is_none());
    assert!(outs[2..].iter().all(|o| o.update_loss.is_some()));
    assert_eq!(s.frame_clock(), 6);
}

#[test]
fn never_updating_matches_pretrained_trajectory() {
    let mut s = state(UpdateInterval::Never);
    randomize_gate(&mut s, 3);
    let before = s.theta_p().checksum();
    for t in 0..8 {
        let o = s.step_stream(&drifting(t)).unwrap();
        assert!(o.update_loss.is_none());
        if let Some(sc) = o.scored {
            assert!(sc.prediction.x_hat.max_abs_diff(&sc.prediction.x_p) <= 1e-6);
        }
    }
    assert_eq!(s.theta_c, *s.theta_p());
    assert_eq!(s.theta_p().checksum(), before);
}

#[test]
fn interval_scheduler_counts() {
    for (interval, n) in [(3u64, 20usize), (5, 23), (1, 9), (4, 4)] {
        let mut s = state(UpdateInterval::Every(interval));
        let updates = (0..n)
            .filter(|&t| s.step_stream(&drifting(t)).unwrap().update_loss.is_some())
            .count();
        let base = (n - 2) / interval as usize;
        assert!(
            updates + 1 >= base && updates <= base + 1,
            "interval {interval}, n {n}: {updates}"
        );
        // exact: clocks that are multiples of the interval, once history is full
        assert_eq!(updates, (3..=n).filter(|c| c % interval as usize == 0).count());
    }
}

#[test]
fn flush_restarts_warm_up() {
    let mut s = state(UpdateInterval::Every(1));
    for t in 0..4 {
        s.step_stream(&drifting(t)).unwrap();
    }
    s.flush();
    assert_eq!(s.history_len(), 0);
    let a = s.step_stream(&noise(1)).unwrap();
    let b = s.step_stream(&noise(2)).unwrap();
    assert!(a.scored.is_none() && b.scored.is_none());
    assert!(s.step_stream(&noise(3)).unwrap().scored.is_some());
    assert_eq!(s.frame_clock(), 7);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = state(UpdateInterval::Every(2));
    for t in 0..5 {
        s.step_stream(&drifting(t)).unwrap();
    }
    s.save_checkpoint(dir.path()).unwrap();
    let r = EnsembleState::load_checkpoint(dir.path(), config(UpdateInterval::Every(2))).unwrap();
    assert_eq!(r.theta_p().checksum(), s.theta_p().checksum());
    assert_eq!(r.theta_c, s.theta_c);
    assert_eq!(r.theta_w, s.theta_w);
    assert_eq!(r.adam_c, s.adam_c);
    assert_eq!(r.adam_w, s.adam_w);
    assert_eq!(r.frame_clock(), 5);
    assert!(EnsembleState::load_checkpoint(dir.path(), config(UpdateInterval::Never)).is_err());
    let bad = EnsembleConfig {
        arch: ArchConfig {
            refine_base: 4,
            ..arch()
        },
        ..config(UpdateInterval::Every(2))
    };
    assert!(EnsembleState::load_checkpoint(dir.path(), bad).is_err());
}

#[test]
fn update_interval_json() {
    let every: UpdateInterval = serde_json::from_str("3").unwrap();
    assert_eq!(every, UpdateInterval::Every(3));
    let never: UpdateInterval = serde_json::from_str("\"never\"").unwrap();
    assert_eq!(never, UpdateInterval::Never);
    assert_eq!(serde_json::to_string(&never).unwrap(), "\"never\"");
    assert!(serde_json::from_str::<UpdateInterval>("0").is_err());
    assert!(serde_json::from_str::<UpdateInterval>("\"sometimes\"").is_err());
}
