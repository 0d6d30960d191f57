use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use signstitch_core::braid::*;
use signstitch_core::motion::{MotionSequence, PartGroup, PartLayout};
use signstitch_core::Result;

fn const_seq(t: usize, d: usize, v: f64) -> MotionSequence {
    MotionSequence::new(t, d, vec![v; t * d]).unwrap()
}

fn wave(t: usize, d: usize, phase: f64) -> MotionSequence {
    let data = (0..t * d)
        .map(|k| ((k / d) as f64 * 0.2 + (k % d) as f64 * 0.37 + phase).sin())
        .collect();
    MotionSequence::new(t, d, data).unwrap()
}

#[test]
fn mask_examples() {
    let m = make_boundary_mask(5, 5, 0).unwrap();
    assert_eq!(m.m.iter().filter(|&&b| b).count(), 1);
    assert!(m.m[5]);
    let m = make_boundary_mask(3, 3, 2).unwrap();
    let on: Vec<usize> = (0..6).filter(|&i| m.m[i]).collect();
    assert_eq!(on, vec![1, 2, 3, 4, 5]);
    assert!(make_boundary_mask(4, 3, 7).unwrap().m.iter().all(|&b| b));
}

#[test]
fn schedule_and_respacing() {
    let s = DiffusionSchedule::standard();
    assert_eq!(s.steps(), 1000);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
    let ts = s.respaced(3).unwrap();
    assert_eq!(ts, vec![0, 333, 667, 1000]);
    assert!(s.respaced(0).is_err());
    assert!(s.respaced(1001).is_err());
}

#[test]
fn q_sample_limits() {
    let s = DiffusionSchedule::linear(1000, 1e-9, 0.02).unwrap();
    let x0 = wave(6, 3, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = gaussian_like(6, 3, &mut rng);
    let xt = q_sample(&x0, 1, &noise, &s).unwrap();
    for (a, b) in xt.data().iter().zip(x0.data()) {
        assert!((a - b).abs() < 1e-3);
    }
    let std = DiffusionSchedule::standard();
    let zero = MotionSequence::zeros(6, 3);
    let xt = q_sample(&x0, 400, &zero, &std).unwrap();
    let sa = std.alpha_bar(400).sqrt();
    for (a, b) in xt.data().iter().zip(x0.data()) {
        assert_eq!(*a, sa * b);
    }
    assert!(q_sample(&x0, 0, &zero, &std).is_err());
}

#[test]
fn q_sample_moments_match_the_forward_marginal() {
    let s = DiffusionSchedule::standard();
    let t = 500;
    let x0 = const_seq(1, 1, 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            q_sample(&x0, t, &gaussian_like(1, 1, &mut rng), &s)
                .unwrap()
                .get(0, 0)
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let a = s.alpha_bar(t);
    assert!((mean - a.sqrt() * 0.8).abs() < 0.03);
    assert!((var / (1.0 - a) - 1.0).abs() < 0.05);
}

#[test]
fn min_snr_weights() {
    let s = DiffusionSchedule::standard();
    let late = 900;
    assert!(s.snr(late) <= 5.0);
    assert_eq!(min_snr_weight(late, &s, 5.0), 1.0);
    // Any γ equal to half the SNR halves the weight.
    let t = 100;
    let gamma = s.snr(t) / 2.0;
    assert!((min_snr_weight(t, &s, gamma) - 0.5).abs() < 1e-12);
}

#[test]
fn recon_loss_examples() {
    let x = wave(4, 2, 0.0);
    let all = make_boundary_mask(2, 2, 4).unwrap();
    assert_eq!(
        masked_recon_loss(&x, &x, &all, &[1.0, 3.0], 1.0).unwrap().0,
        0.0
    );

    let a = MotionSequence::new(3, 1, vec![0.0, 0.5, 9.0]).unwrap();
    let b = MotionSequence::new(3, 1, vec![0.0, 0.0, 0.0]).unwrap();
    let single = InpaintMask {
        m: vec![false, true, false],
        boundary: 1,
        radius: 0,
    };
    let (l, empty) = masked_recon_loss(&a, &b, &single, &[1.0], 1.0).unwrap();
    assert!(!empty);
    assert!((l - 0.125).abs() < 1e-7);

    let none = InpaintMask {
        m: vec![false; 3],
        boundary: 1,
        radius: 0,
    };
    assert_eq!(
        masked_recon_loss(&a, &b, &none, &[1.0], 1.0).unwrap(),
        (0.0, true)
    );
}

#[test]
fn unmasked_frames_do_not_affect_the_loss() {
    let x0 = wave(10, 3, 0.0);
    let x_hat = wave(10, 3, 0.4);
    let mask = make_boundary_mask(5, 5, 2).unwrap();
    let cfg = BraidLossConfig::default();
    let w = [1.0, 3.0, 15.0];
    let base = braid_loss_value(&x_hat, &x0, &mask, &w, 1.0, &cfg).unwrap();
    let mut perturbed = x_hat.clone();
    for i in (0..10).filter(|&i| !mask.m[i]) {
        perturbed.frame_mut(i).iter_mut().for_each(|v| *v += 10.0);
    }
    // Velocity pairs need both frames masked, so edges of the window are safe too.
    assert_eq!(
        base,
        braid_loss_value(&perturbed, &x0, &mask, &w, 1.0, &cfg).unwrap()
    );
}

#[test]
fn velocity_adjacency_rule() {
    let m = InpaintMask {
        m: vec![true, false, true],
        boundary: 1,
        radius: 1,
    };
    assert_eq!(m.delta(), vec![false, false]);
    let (l, empty) =
        velocity_loss(&wave(3, 2, 0.0), &wave(3, 2, 1.0), &m, &[1.0, 1.0], 1.0).unwrap();
    assert_eq!((l, empty), (0.0, true));
    let c = const_seq(5, 2, 0.3);
    let all = make_boundary_mask(2, 3, 5).unwrap();
    assert_eq!(
        velocity_loss(&c, &const_seq(5, 2, -1.0), &all, &[1.0, 1.0], 1.0)
            .unwrap()
            .0,
        0.0
    );
}

#[test]
fn hands_weigh_fifteen_times_body() {
    let layout = PartLayout::base();
    let w = layout.channel_weights(BraidLossConfig::default().part_weights);
    let x0 = MotionSequence::zeros(4, layout.dim());
    let mask = make_boundary_mask(2, 2, 4).unwrap();
    let with_error = |c: usize| {
        let mut x = x0.clone();
        x.frame_mut(1)[c] = 0.4;
        masked_recon_loss(&x, &x0, &mask, &w, 1.0).unwrap().0
    };
    let body = layout.group_ranges(PartGroup::Body)[0].start;
    let hand = layout.group_ranges(PartGroup::Hands)[0].start;
    let face = layout.group_ranges(PartGroup::Face)[0].start;
    assert!((with_error(hand) / with_error(body) - 15.0).abs() < 1e-9);
    assert!((with_error(face) / with_error(body) - 3.0).abs() < 1e-9);
}

#[test]
fn graph_loss_matches_scalar_loss() {
    use signstitch_nn::{Graph, Tensor};
    let x0 = wave(8, 3, 0.0);
    let x_hat = wave(8, 3, 0.9);
    let mask = make_boundary_mask(4, 4, 2).unwrap();
    let cfg = BraidLossConfig {
        lambda_latent: 0.3,
        ..BraidLossConfig::default()
    };
    let w = [1.0, 3.0, 15.0];
    let expect = braid_loss_value(&x_hat, &x0, &mask, &w, 0.7, &cfg).unwrap();
    let mut g: Graph<f64> = Graph::new();
    let v = g.constant(Tensor::new(vec![8, 3], x_hat.data().to_vec()).unwrap());
    let l = braid_loss_graph(&mut g, v, &x0, &mask, &w, 0.7, &cfg).unwrap();
    assert!((g.value(l).item() - expect).abs() < 1e-12);
}

/// Always returns a fixed target.
struct Oracle(MotionSequence);

impl Denoiser for Oracle {
    fn predict_x0(
        &self,
        _: &MotionSequence,
        _: usize,
        _: &MotionSequence,
        _: &InpaintMask,
    ) -> Result<MotionSequence> {
        Ok(self.0.clone())
    }
}

/// A denoiser that returns its noisy input, so outputs depend on the noise.
struct Echo;

impl Denoiser for Echo {
    fn predict_x0(
        &self,
        x_t: &MotionSequence,
        _: usize,
        _: &MotionSequence,
        _: &InpaintMask,
    ) -> Result<MotionSequence> {
        Ok(x_t.clone())
    }
}

#[test]
fn oracle_denoiser_gives_the_composed_target_for_any_step_count() {
    let sched = DiffusionSchedule::standard();
    let cond = wave(14, 4, 0.0);
    let target = wave(14, 4, 2.0);
    let mask = make_boundary_mask(7, 7, 3).unwrap();
    let expect = compose(&mask, &target, &cond);
    let mut outs = Vec::new();
    for s in [1, 10, 50] {
        let out = ddim_refine_seeded(&cond, &mask, &Oracle(target.clone()), &sched, s, 5).unwrap();
        assert_eq!(out, expect);
        outs.push(out);
    }
    assert_eq!(outs[0], outs[2]);
}

#[test]
fn unmasked_frames_survive_refinement_bitwise() {
    let sched = DiffusionSchedule::standard();
    let cond = wave(12, 3, 0.3);
    let mask = make_boundary_mask(6, 6, 2).unwrap();
    let out = ddim_refine_seeded(&cond, &mask, &Echo, &sched, 10, 9).unwrap();
    for i in 0..12 {
        if !mask.m[i] {
            assert_eq!(out.frame(i), cond.frame(i));
        }
    }
    assert_ne!(out, cond);
}

fn toy_pairs(layout: &PartLayout, n: usize) -> Vec<BraidPair> {
    (0..n)
        .map(|k| {
            let d = layout.dim();
            let target = wave(24, d, k as f64 * 0.5);
            let mut cond = target.clone();
            for i in 10..14 {
                cond.frame_mut(i).iter_mut().for_each(|v| *v *= 0.2);
            }
            BraidPair {
                cond,
                target,
                boundary: 12,
            }
        })
        .collect()
}

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        latent: 16,
        layers: 1,
        heads: 2,
        ffn: 32,
        hand_head_depth: 2,
        dropout: 0.0,
        cond_residual: false,
    }
}

#[test]
fn model_heads_follow_the_part_groups() {
    let m = BraidModel::new(tiny(), PartLayout::base(), 0).unwrap();
    let groups = m.head_groups();
    assert!(
        groups.contains(&PartGroup::Hands)
            && groups.contains(&PartGroup::Body)
            && groups.contains(&PartGroup::Face)
    );
}

#[test]
fn training_reduces_the_loss() {
    let layout = PartLayout::base();
    let pairs = toy_pairs(&layout, 6);
    let mut m = BraidModel::new(tiny(), layout, 1).unwrap();
    let cfg = BraidTrainConfig {
        steps: 200,
        batch_size: 4,
        lr: 3e-3,
        warmup: 10,
        seed: 2,
        ..BraidTrainConfig::default()
    };
    let losses = m
        .train(&pairs, &cfg, &DiffusionSchedule::standard(), |_, _| {})
        .unwrap();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.7 * head, "head {head}, tail {tail}");

    let sched = DiffusionSchedule::standard();
    let mask = make_boundary_mask(12, 12, INFERENCE_RADIUS).unwrap();
    let refined = m.refine_pair(&pairs[0].cond, &mask, &sched, 5, 3).unwrap();
    for i in (0..24).filter(|&i| !mask.m[i]) {
        assert_eq!(refined.frame(i), pairs[0].cond.frame(i));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("braid.nkcp");
    m.save(&path).unwrap();
    let back = BraidModel::load(&path).unwrap();
    assert_eq!(
        back.refine_pair(&pairs[0].cond, &mask, &sched, 5, 3)
            .unwrap(),
        refined
    );
}

#[test]
fn training_is_reproducible() {
    let layout = PartLayout::base();
    let pairs = toy_pairs(&layout, 3);
    let cfg = BraidTrainConfig {
        steps: 4,
        batch_size: 3,
        seed: 4,
        ..BraidTrainConfig::default()
    };
    let run = || {
        let mut m = BraidModel::new(
            DenoiserConfig {
                dropout: 0.1,
                ..tiny()
            },
            layout.clone(),
            1,
        )
        .unwrap();
        m.train(&pairs, &cfg, &DiffusionSchedule::standard(), |_, _| {})
            .unwrap()
    };
    assert_eq!(run(), run());
}
