//! Acceptance criteria AC-1 … AC-13. Runs without the libtest harness and
//! prints one `[PASS]` or `[FAIL]` line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signstitch_core::braid::*;
use signstitch_core::duration::*;
use signstitch_core::glossnorm::*;
use signstitch_core::metrics::*;
use signstitch_core::motion::{MotionSequence, PartLayout};
use signstitch_core::objectives::*;
use signstitch_core::pipeline::{run_pipeline, EvalReport, PipelineConfig};
use signstitch_core::retrieval::*;
use signstitch_core::stitch::*;
use signstitch_nn::gradcheck::{check_inputs, check_params, GradCheckReport};
use signstitch_nn::layers::{BlockConfig, BlockInputs, Linear, Mlp, TransformerBlock};
use signstitch_nn::{AttentionSpec, Graph, ParamStore, Tensor, Var};

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const AC1_BUDGET: Duration = Duration::from_secs(120);
const DTW_TOL: f64 = 1e-9;
const CTC_TOL: f64 = 1e-6;
const PROCRUSTES_TOL: f64 = 1e-9;
const BM25_TOL: f64 = 1e-9;
const FGD_IDENTICAL_TOL: f64 = 1e-6;
const FGD_CLOSED_FORM_TOL: f64 = 1e-9;
const AC11_BUDGET: Duration = Duration::from_secs(30 * 60);
const AC12_MIN_REDUCTION: f64 = 0.5;
const AC12_RATIO_RANGE: (f64, f64) = (0.9, 1.1);
const RANKING_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn to_nn(e: signstitch_core::CoreError) -> signstitch_nn::NnError {
    match e {
        signstitch_core::CoreError::Nn(e) => e,
        other => signstitch_nn::NnError::Format(other.to_string()),
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn contract(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, g.value(x).shape(), 1.0);
    let y = g.mul_const(x, &w).unwrap();
    g.sum(y)
}

/// Norm-wise relative error of an analytic gradient against central differences.
fn fd_report(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut num = Vec::with_capacity(x.len());
    let mut w = x.to_vec();
    for i in 0..x.len() {
        w[i] = x[i] + FD_STEP;
        let up = f(&w);
        w[i] = x[i] - FD_STEP;
        let down = f(&w);
        w[i] = x[i];
        num.push((up - down) / (2.0 * FD_STEP));
    }
    let diff: f64 = num
        .iter()
        .zip(analytic)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn ac1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, r: signstitch_nn::Result<GradCheckReport>| -> Result<(), String> {
        let r = r.map_err(|e| format!("{name}: {e}"))?;
        results.push((name.to_string(), r.rel_error));
        Ok(())
    };

    let (x, w, b) = (
        rand_t(&mut rng, &[4, 5], 1.0),
        rand_t(&mut rng, &[5, 3], 1.0),
        rand_t(&mut rng, &[3], 1.0),
    );
    push(
        "matmul+bias",
        check_inputs(
            &[x, w, b],
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_bias(h, v[2])?;
                Ok(contract(g, h, 1))
            },
            FD_STEP,
        ),
    )?;
    let (a, c) = (
        rand_t(&mut rng, &[3, 4], 1.0),
        rand_t(&mut rng, &[3, 4], 1.0),
    );
    push(
        "gelu/sigmoid/mul",
        check_inputs(
            &[a.clone(), c.clone()],
            |g, v| {
                let p = g.gelu(v[0]);
                let q = g.sigmoid(v[1]);
                let r = g.mul(p, q)?;
                Ok(contract(g, r, 2))
            },
            FD_STEP,
        ),
    )?;
    push(
        "huber/pinball",
        check_inputs(
            &[a.map(|v| 3.0 * v)],
            |g, v| {
                let h = g.huber(v[0], 1.0);
                let p = g.pinball(v[0], 0.55);
                let s = g.add(h, p)?;
                Ok(contract(g, s, 3))
            },
            FD_STEP,
        ),
    )?;
    push(
        "ln",
        check_inputs(
            &[c.map(|v| v.abs() + 0.2)],
            |g, v| {
                let l = g.ln(v[0], 1e-12);
                Ok(contract(g, l, 4))
            },
            FD_STEP,
        ),
    )?;
    let (x, gm, bt) = (
        rand_t(&mut rng, &[5, 6], 1.0),
        rand_t(&mut rng, &[6], 1.0),
        rand_t(&mut rng, &[6], 1.0),
    );
    push(
        "layer_norm",
        check_inputs(
            &[x, gm, bt],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                Ok(contract(g, y, 5))
            },
            FD_STEP,
        ),
    )?;
    push(
        "softmax",
        check_inputs(
            &[rand_t(&mut rng, &[4, 7], 4.0)],
            |g, v| {
                let y = g.softmax(v[0]);
                Ok(contract(g, y, 6))
            },
            FD_STEP,
        ),
    )?;
    let (q, k, vv) = (
        rand_t(&mut rng, &[5, 8], 1.0),
        rand_t(&mut rng, &[5, 8], 1.0),
        rand_t(&mut rng, &[5, 8], 1.0),
    );
    let specs = [
        AttentionSpec {
            heads: 2,
            causal: false,
            key_mask: None,
        },
        AttentionSpec {
            heads: 2,
            causal: true,
            key_mask: None,
        },
        AttentionSpec {
            heads: 4,
            causal: false,
            key_mask: Some(vec![true, false, true, true, false]),
        },
    ];
    for (i, spec) in specs.iter().enumerate() {
        push(
            &format!("attention[{i}]"),
            check_inputs(
                &[q.clone(), k.clone(), vv.clone()],
                |g, v| {
                    let o = g.attention(v[0], v[1], v[2], spec)?;
                    Ok(contract(g, o, 7 + i as u64))
                },
                FD_STEP,
            ),
        )?;
    }
    push(
        "cross attention",
        check_inputs(
            &[
                q.clone(),
                rand_t(&mut rng, &[3, 8], 1.0),
                rand_t(&mut rng, &[3, 8], 1.0),
            ],
            |g, v| {
                let o = g.attention(v[0], v[1], v[2], &specs[0])?;
                Ok(contract(g, o, 11))
            },
            FD_STEP,
        ),
    )?;
    push(
        "rope",
        check_inputs(
            &[rand_t(&mut rng, &[4, 8], 1.0)],
            |g, v| {
                let y = g.rope(v[0], 2, &[0.0, 1.0, 2.0, 3.0], 10_000.0)?;
                Ok(contract(g, y, 12))
            },
            FD_STEP,
        ),
    )?;
    push(
        "structural",
        check_inputs(
            &[
                rand_t(&mut rng, &[4, 3], 1.0),
                rand_t(&mut rng, &[4, 2], 1.0),
            ],
            |g, v| {
                let c = g.concat_cols(&[v[0], v[1]])?;
                let s = g.slice_cols(c, 1, 4)?;
                let t = g.transpose(s);
                let d = g.diff_rows(t)?;
                let m = g.mean_rows(d);
                let y = contract(g, m, 13);
                let mm = g.mean(c);
                g.add(y, mm)
            },
            FD_STEP,
        ),
    )?;

    let mut store = ParamStore::<f64>::new();
    let bc = BlockConfig {
        dim: 8,
        heads: 2,
        ffn: 12,
        cross: true,
        rope: true,
        dropout: 0.0,
    };
    let block = TransformerBlock::new(&mut store, &mut rng, "blk", bc);
    let head = Linear::new(&mut store, &mut rng, "head", 8, 2);
    let mlp = Mlp::new(&mut store, &mut rng, "mlp", &[2, 5, 1], 0.0);
    let (x, mem) = (
        rand_t(&mut rng, &[4, 8], 1.0),
        rand_t(&mut rng, &[3, 8], 1.0),
    );
    let (pos, mpos) = ([0.0, 1.0, 2.0, 3.0], [0.0, 1.5, 3.0]);
    push(
        "transformer block params",
        check_params(
            &store,
            |g, s| {
                let (xv, mv) = (g.constant(x.clone()), g.constant(mem.clone()));
                let inp = BlockInputs {
                    positions: &pos,
                    key_mask: None,
                    memory: Some(mv),
                    memory_positions: Some(&mpos),
                };
                let h = block.forward(g, s, xv, &inp)?;
                let h = head.forward(g, s, h)?;
                let h = mlp.forward(g, s, h)?;
                Ok(g.mean(h))
            },
            FD_STEP,
            6,
        ),
    )?;

    // Boundary-refinement loss through the denoiser, in f64.
    let layout = PartLayout::base();
    let d = layout.dim();
    let model = BraidModel::new(
        DenoiserConfig {
            latent: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            hand_head_depth: 2,
            dropout: 0.0,
            cond_residual: true,
        },
        layout.clone(),
        3,
    )
    .map_err(|e| e.to_string())?;
    let store64: ParamStore<f64> = model.store.cast();
    let wave = |ph: f64| {
        MotionSequence::new(
            12,
            d,
            (0..12 * d)
                .map(|k| ((k / d) as f64 * 0.3 + (k % d) as f64 * 0.11 + ph).sin())
                .collect(),
        )
        .unwrap()
    };
    let pair = BraidPair {
        cond: wave(0.0),
        target: wave(0.4),
        boundary: 6,
    };
    let mask = make_boundary_mask(6, 6, 3).map_err(|e| e.to_string())?;
    let noise = MotionSequence::new(
        12,
        d,
        (0..12 * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let sched = DiffusionSchedule::standard();
    let loss_cfg = BraidLossConfig::default();
    let r = check_params(
        &store64,
        |g, s| {
            model
                .loss_graph(g, s, &pair, &mask, 300, &noise, &sched, &loss_cfg)
                .map_err(to_nn)
        },
        FD_STEP,
        4,
    );
    push("braid loss params", r)?;

    // Duration loss.
    let samples: Vec<DurationSample> = (0..3)
        .map(|i| {
            let rows: Vec<Vec<f64>> = (0..6 + i)
                .map(|t| vec![(t as f64 * 0.4 + i as f64).sin(), 0.1 * t as f64])
                .collect();
            let a = MotionSequence::from_rows(&rows).unwrap();
            DurationSample {
                input: DurationInput::Pair(gloss_pair_features(&a, &a.reversed()).unwrap()),
                s: [0.3, -0.4, 0.2][i],
                w: vec![0.35, 0.65],
            }
        })
        .collect();
    let dm = DurationModel::new(
        DurationConfig {
            hidden: 8,
            layers: 2,
            dropout: 0.0,
            ..DurationConfig::gloss()
        },
        pair_feature_dim(2),
    );
    let ds: ParamStore<f64> = dm.store.cast();
    let refs: Vec<&DurationSample> = samples.iter().collect();
    let r = check_params(
        &ds,
        |g, s| dm.loss_graph(g, s, &refs).map_err(to_nn),
        FD_STEP,
        8,
    );
    push("duration loss params", r)?;

    // Flow-matching and boundary losses have closed-form gradients.
    let (x0, x1) = (wave(0.1), wave(0.9));
    let v = wave(2.0);
    let g = fm_loss_grad(&v, &x0, &x1, &layout, 1.3).map_err(|e| e.to_string())?;
    let fm = |vals: &[f64]| {
        fm_loss(
            &MotionSequence::new(12, d, vals.to_vec()).unwrap(),
            &x0,
            &x1,
            &layout,
            1.3,
        )
        .unwrap()
        .total
    };
    results.push(("fm loss".into(), fd_report(v.data(), g.data(), fm)));

    let logits: Vec<(f64, f64)> = (0..8)
        .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
        .collect();
    let targets: Vec<BoundaryTarget> = (0..8)
        .map(|i| BoundaryTarget {
            sent: i % 3 == 0,
            turn: i == 7,
            valid: i != 4,
        })
        .collect();
    let bcfg = BoundaryLossConfig::default();
    let bl = boundary_loss(&logits, &targets, &bcfg).map_err(|e| e.to_string())?;
    let flat: Vec<f64> = logits.iter().flat_map(|&(a, b)| [a, b]).collect();
    let an: Vec<f64> = bl.grad.iter().flat_map(|&(a, b)| [a, b]).collect();
    let bf = |z: &[f64]| {
        let l: Vec<(f64, f64)> = z.chunks(2).map(|c| (c[0], c[1])).collect();
        boundary_loss(&l, &targets, &bcfg).unwrap().total
    };
    results.push(("boundary loss".into(), fd_report(&flat, &an, bf)));

    let elapsed = t0.elapsed();
    let worst = results.iter().fold(("", 0.0f64), |acc, (n, e)| {
        if *e > acc.1 {
            (n.as_str(), *e)
        } else {
            acc
        }
    });
    ensure(results.iter().all(|(_, e)| *e < FD_REL_TOL), || {
        format!("{} rel error {:.3e}", worst.0, worst.1)
    })?;
    ensure(elapsed < AC1_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks, worst {} {:.2e}, {:.1}s",
        results.len(),
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    ))
}

fn random_points(rng: &mut ChaCha8Rng, t: usize, j: usize) -> PointSequence {
    PointSequence::new(
        t,
        j,
        (0..t * j)
            .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

/// Minimum cost over every monotone path, by enumeration.
fn exhaustive_dtw(a: &PointSequence, b: &PointSequence, s: &[usize]) -> f64 {
    fn paths(
        i: usize,
        j: usize,
        a: &PointSequence,
        b: &PointSequence,
        s: &[usize],
        acc: f64,
        best: &mut f64,
    ) {
        let acc = acc + frame_error(a.frame(i), b.frame(j), s);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            paths(i + 1, j + 1, a, b, s, acc, best);
        }
        if i + 1 < a.len() {
            paths(i + 1, j, a, b, s, acc, best);
        }
        if j + 1 < b.len() {
            paths(i, j + 1, a, b, s, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    paths(0, 0, a, b, s, 0.0, &mut best);
    best
}

fn ac2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (n, m, j) = (
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=4),
        );
        let (a, b) = (random_points(&mut rng, n, j), random_points(&mut rng, m, j));
        let subset: Vec<usize> = (0..j).collect();
        let dp = dtw_align(&a, &b, &subset).map_err(|e| e.to_string())?.cost;
        let ex = exhaustive_dtw(&a, &b, &subset);
        worst = worst.max((dp - ex).abs());
        ensure((dp - ex).abs() < DTW_TOL, || {
            format!("case {case}: dp {dp} vs exhaustive {ex}")
        })?;
    }
    Ok(format!("200 cases, max |Δ| {worst:.1e}"))
}

fn ctc_enumerate(lp: &[Vec<f64>], target: &[usize]) -> f64 {
    let (l, c) = (lp.len(), lp[0].len());
    let mut total = 0.0;
    for code in 0..c.pow(l as u32) {
        let mut path = Vec::with_capacity(l);
        let mut r = code;
        for _ in 0..l {
            path.push(r % c);
            r /= c;
        }
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &p in &path {
            if p != prev && p != CTC_BLANK {
                collapsed.push(p);
            }
            prev = p;
        }
        if collapsed == target {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &p)| lp[t][p])
                .sum::<f64>()
                .exp();
        }
    }
    -total.ln()
}

fn ac3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut infeasible) = (0.0f64, 0);
    for case in 0..200 {
        let l = rng.random_range(1..=6);
        let c = 4;
        let lp: Vec<Vec<f64>> = (0..l)
            .map(|_| {
                let z: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                z.iter().map(|v| v - lse).collect()
            })
            .collect();
        let g: Vec<usize> = (0..rng.random_range(1..=3))
            .map(|_| rng.random_range(1..c))
            .collect();
        let got = ctc_loss(&lp, &g).map_err(|e| e.to_string())?;
        let want = ctc_enumerate(&lp, &g);
        if want.is_infinite() {
            infeasible += 1;
            ensure(got.infeasible, || {
                format!("case {case}: expected infeasible")
            })?;
            continue;
        }
        worst = worst.max((got.loss - want).abs());
        ensure((got.loss - want).abs() < CTC_TOL, || {
            format!("case {case}: {} vs {want}", got.loss)
        })?;
    }
    Ok(format!(
        "200 cases ({infeasible} infeasible), max |Δ| {worst:.1e}"
    ))
}

fn ac4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_res = 0.0f64;
    for case in 0..100 {
        let p: Vec<[f64; 3]> = (0..12)
            .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let r: Matrix3<f64> =
            *Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).matrix();
        let s = rng.random_range(0.3..3.0);
        let t = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let q: Vec<[f64; 3]> = p
            .iter()
            .map(|&x| {
                let v = s * (r * Vector3::from(x)) + t;
                [v[0], v[1], v[2]]
            })
            .collect();
        let fit = procrustes(&p, &q).map_err(|e| e.to_string())?;
        let res = p.iter().zip(&q).map(|(&a, b)| {
            let y = fit.apply(a);
            ((y[0] - b[0]).powi(2) + (y[1] - b[1]).powi(2) + (y[2] - b[2]).powi(2)).sqrt()
        });
        let res = res.fold(0.0f64, f64::max);
        worst_res = worst_res.max(res);
        ensure(res < PROCRUSTES_TOL, || {
            format!("case {case}: residual {res:e}")
        })?;
    }
    let mut violations = Vec::new();
    let mut frames = 0;
    for case in 0..100 {
        let (t, j) = (rng.random_range(2..10), rng.random_range(3..20));
        let gt = random_points(&mut rng, t, j);
        let noise = rng.random_range(0.05..1.0);
        let pred = gt.map_points(|x| [x[0] + 0.3, x[1] * 1.2, x[2] - 0.1]);
        let pred = PointSequence::new(
            t,
            j,
            (0..t)
                .flat_map(|i| pred.frame(i).to_vec())
                .map(|x| [0, 1, 2].map(|k| x[k] + noise * rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let subset: Vec<usize> = (0..j).collect();
        for i in 0..t {
            frames += 1;
            let e = frame_error(pred.frame(i), gt.frame(i), &subset);
            let pa =
                pa_frame_error(pred.frame(i), gt.frame(i), &subset).map_err(|e| e.to_string())?;
            if pa > e + 1e-12 {
                violations.push(format!("pair {case} frame {i}: PA {pa:.6} > MPJPE {e:.6}"));
            }
        }
    }
    ensure(violations.is_empty(), || {
        format!(
            "{} of {frames} frames violate PA ≤ MPJPE; first: {}",
            violations.len(),
            violations[0]
        )
    })?;
    Ok(format!(
        "max residual {worst_res:.1e}; PA ≤ MPJPE on all {frames} frames"
    ))
}

struct Oracle(MotionSequence);

impl Denoiser for Oracle {
    fn predict_x0(
        &self,
        _: &MotionSequence,
        _: usize,
        _: &MotionSequence,
        _: &InpaintMask,
    ) -> signstitch_core::Result<MotionSequence> {
        Ok(self.0.clone())
    }
}

fn ac5() -> Outcome {
    let layout = PartLayout::base();
    let d = layout.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = |rng: &mut ChaCha8Rng| {
        MotionSequence::new(
            20,
            d,
            (0..20 * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let (cond, target) = (seq(&mut rng), seq(&mut rng));
    let sched = DiffusionSchedule::standard();
    let mask = make_boundary_mask(10, 10, INFERENCE_RADIUS).map_err(|e| e.to_string())?;
    let model = BraidModel::new(DenoiserConfig::default(), layout, 5).map_err(|e| e.to_string())?;
    let expect = compose(&mask, &target, &cond);
    for s in [1, 10, 50] {
        let out = model
            .refine_pair(&cond, &mask, &sched, s, 17)
            .map_err(|e| e.to_string())?;
        for i in (0..20).filter(|&i| !mask.m[i]) {
            ensure(out.frame(i) == cond.frame(i), || {
                format!("S={s}: frame {i} changed")
            })?;
        }
        let o = ddim_refine_seeded(&cond, &mask, &Oracle(target.clone()), &sched, s, 17)
            .map_err(|e| e.to_string())?;
        ensure(o == expect, || {
            format!("S={s}: oracle output differs from the composed target")
        })?;
    }
    Ok("M=0 frames bitwise equal; oracle exact for S = 1, 10, 50".into())
}

fn ac6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for draw in 0..10_000 {
        let k = rng.random_range(1..=8);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let (t_src, s, min_len) = (
            rng.random_range(1..400),
            rng.random_range(-2.0..2.0),
            rng.random_range(1..6),
        );
        let p = integer_plan(t_src, &DurationPrediction { s, w: w.clone() }, min_len)
            .map_err(|e| e.to_string())?;
        let expect_total = ((t_src as f64 * f64::exp(s)).round() as usize).max(k * min_len);
        ensure(p.total == expect_total, || {
            format!("draw {draw}: total {} vs {expect_total}", p.total)
        })?;
        ensure(p.lengths.iter().sum::<usize>() == p.total, || {
            format!("draw {draw}: lengths do not sum")
        })?;
        ensure(p.lengths.iter().all(|&l| l >= min_len), || {
            format!("draw {draw}: length below min")
        })?;
        if w.iter().all(|wk| wk * p.total as f64 >= min_len as f64) {
            for (l, wk) in p.lengths.iter().zip(&w) {
                ensure((*l as f64 - wk * p.total as f64).abs() < 1.0, || {
                    format!("draw {draw}: rounding off by ≥ 1")
                })?;
            }
        }
    }
    let mut notes = Vec::new();
    for tau in [0.55, 0.60] {
        let mut u: Vec<f64> = (0..401)
            .map(|_| rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0))
            .collect();
        u.sort_by(f64::total_cmp);
        let risk = |c: f64| u.iter().map(|&y| pinball_loss(y - c, tau)).sum::<f64>();
        let grid: Vec<f64> = (0..=40_000)
            .map(|i| -2.0 + 4.0 * i as f64 / 40_000.0)
            .collect();
        let best = grid
            .iter()
            .copied()
            .min_by(|a, b| risk(*a).total_cmp(&risk(*b)))
            .unwrap();
        let k = (tau * u.len() as f64).ceil() as usize - 1;
        let (lo, hi) = (u[k.saturating_sub(1)], u[(k + 1).min(u.len() - 1)]);
        ensure(lo - 1e-4 <= best && best <= hi + 1e-4, || {
            format!("τ={tau}: minimizer {best} outside [{lo}, {hi}]")
        })?;
        notes.push(format!("τ={tau}: {best:.4} vs q {:.4}", u[k]));
    }
    Ok(format!("10000 plans valid; {}", notes.join(", ")))
}

fn ac7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 6;
    for case in 0..1000 {
        let k = rng.random_range(2..=6);
        let pairs: Vec<RefinedPair> = (0..k - 1)
            .map(|_| {
                let (a, b) = (rng.random_range(1..15), rng.random_range(1..15));
                let t = a + b;
                RefinedPair {
                    motion: MotionSequence::new(
                        t,
                        d,
                        (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                    .unwrap(),
                    boundary: a,
                }
            })
            .collect();
        let lengths: Vec<usize> = (0..k).map(|_| rng.random_range(1..40)).collect();
        let plan = GlossPlan {
            total: lengths.iter().sum(),
            lengths,
        };
        let out = assemble_sentence(&pairs, &plan).map_err(|e| e.to_string())?;
        ensure(out.len() == plan.total, || {
            format!("plan {case}: {} frames vs {}", out.len(), plan.total)
        })?;
    }
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t = rng.random_range(1..30);
        let a = MotionSequence::new(
            t,
            d,
            (0..t * d).map(|_| rng.random_range(-10.0..10.0)).collect(),
        )
        .unwrap();
        let f = cosine_fuse(&a, &a).map_err(|e| e.to_string())?;
        ensure(f.len() == a.len(), || "fused length changed".into())?;
        for (x, y) in f.data().iter().zip(a.data()) {
            let rel = (x - y).abs() / y.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= f32::EPSILON as f64, || {
        format!("self-fusion error {worst:e}")
    })?;
    Ok(format!("1000 plans exact; self-fusion error {worst:.1e}"))
}

fn ac8() -> Outcome {
    let g = ClassifierGrammar::default();
    let table = [
        ("THANK-YOU", TokenKind::Lexical),
        ("fs-J-O-H-N", TokenKind::Fingerspell),
        ("#-E-A-R-L-Y", TokenKind::Loan),
        ("ns-P-A-R-I-S", TokenKind::Name),
        ("ns-fs-P-A-R-I-S", TokenKind::NameFingerspell),
        ("IX-1p", TokenKind::Pointer),
        ("IX-2p", TokenKind::Pointer),
        ("IX-3p", TokenKind::Pointer),
        ("POSS-1p", TokenKind::Possessive),
        ("POSS-2p", TokenKind::Possessive),
        ("POSS-3p", TokenKind::Possessive),
        ("SELF-1p", TokenKind::Reflexive),
        ("SELF-2p", TokenKind::Reflexive),
        ("SELF-3p", TokenKind::Reflexive),
    ];
    for (s, k) in table {
        let got = classify(s, &g).0;
        ensure(got == k, || format!("{s}: {got:?}, expected {k:?}"))?;
    }
    ensure(normalize_line("IX-3p:i") == "IX-3p", || {
        "IX-3p:i does not normalize to IX-3p".into()
    })?;
    let collapsed = detokenize(&collapse_fingerspell(&tokenize("ns-fs-P-A-R-I-S")));
    ensure(collapsed == "PARIS", || {
        format!("ns-fs-P-A-R-I-S collapsed to {collapsed}")
    })?;
    let pool = [
        "THANK-YOU",
        "IX-3p:i",
        "POSS-2p:j",
        "SELF-1p",
        "fs-J-O-H-N",
        "#-E-A-R-L-Y",
        "ns-P-A-R-I-S",
        "ns-fs-P-A-R-I-S",
        "DCL\"cup\"",
        "TCL:flat",
        "[laughs]",
        "\"wow\"",
        "NEXT-TOPIC",
        "CURRENT-TOPIC",
        "IX-loc:a",
        "IX-3p:",
        "BOOK",
        "A:B:C",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..1000 {
        let toks: Vec<String> = (0..rng.random_range(0..15))
            .map(|_| {
                if rng.random_bool(0.3) {
                    let alphabet = b"ABCXYZ-#:\"[]fsnpI13";
                    (0..rng.random_range(1..7))
                        .map(|_| alphabet[rng.random_range(0..alphabet.len())] as char)
                        .collect()
                } else {
                    pool[rng.random_range(0..pool.len())].to_string()
                }
            })
            .collect();
        let once = normalize(&tokenize(&toks.join(" ")));
        let twice = normalize(&tokenize(&detokenize(&once)));
        ensure(once == twice, || {
            format!("sequence {case} not idempotent: {toks:?}")
        })?;
    }
    Ok("convention table, examples and 1000 fuzzed sequences".into())
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn ac9() -> Outcome {
    let idx = Bm25Index::new(&[words("a b"), words("a c c"), words("d")]);
    let (k1, b) = (1.5, 0.75);
    let idf_a = (1.5f64 / 2.5 + 1.0).ln();
    let idf_c = (2.5f64 / 1.5 + 1.0).ln();
    let k_long = k1 * (1.0 - b + b * 1.5);
    let expect = [
        idf_a,
        idf_a * (k1 + 1.0) / (1.0 + k_long) + idf_c * 2.0 * (k1 + 1.0) / (2.0 + k_long),
        0.0,
    ];
    for (i, (got, want)) in idx.score_all(&words("a c")).iter().zip(expect).enumerate() {
        ensure((got - want).abs() < BM25_TOL, || {
            format!("doc {i}: {got} vs {want}")
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = RetrievalConfig::default();
    for case in 0..200 {
        let n = rng.random_range(2..40);
        let bm: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let sp: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let keys: Vec<String> = (0..n).map(|i| (i % 7).to_string()).collect();
        let rr = |d: usize| ((d * 37) % 11) as f64 / 11.0;
        let base = rank_candidates(&bm, &sp, rr, &keys, &cfg).map_err(|e| e.to_string())?;
        let (a, c) = (rng.random_range(0.1..5.0), rng.random_range(-3.0..3.0));
        let bm2: Vec<f64> = bm.iter().map(|v| a * v + c).collect();
        let sp2: Vec<f64> = sp.iter().map(|v| a * v + c).collect();
        let moved = rank_candidates(&bm2, &sp2, rr, &keys, &cfg).map_err(|e| e.to_string())?;
        let order = |r: &RetrievalResult| r.hits.iter().map(|h| h.doc).collect::<Vec<_>>();
        ensure(order(&base) == order(&moved), || {
            format!("case {case}: affine rescaling changed the ranking")
        })?;
        let uniq: std::collections::HashSet<&String> =
            base.hits.iter().map(|h| &keys[h.doc]).collect();
        ensure(uniq.len() == base.hits.len(), || {
            format!("case {case}: duplicate keys in hits")
        })?;
        ensure(base.hits.len() == cfg.k_out.min(n.min(7)), || {
            format!("case {case}: {} hits", base.hits.len())
        })?;
    }
    Ok("BM25 hand values, affine invariance, dedup and top-6".into())
}

fn ac10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let same = fgd(&a, &a).map_err(|e| e.to_string())?;
    ensure(same < FGD_IDENTICAL_TOL, || {
        format!("identical sets give {same:e}")
    })?;
    let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..3.0)).collect();
    let ys: Vec<f64> = (0..40).map(|_| 0.5 * rng.random_range(-1.0..1.0)).collect();
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (
            m,
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 + FGD_EPS,
        )
    };
    let ((m1, v1), (m2, v2)) = (stats(&xs), stats(&ys));
    let want = (m1 - m2).powi(2) + v1 + v2 - 2.0 * (v1 * v2).sqrt();
    let got = fgd(
        &xs.iter().map(|&x| vec![x]).collect::<Vec<_>>(),
        &ys.iter().map(|&y| vec![y]).collect::<Vec<_>>(),
    )
    .map_err(|e| e.to_string())?;
    ensure((got - want).abs() < FGD_CLOSED_FORM_TOL, || {
        format!("1-D: {got} vs {want}")
    })?;
    Ok(format!(
        "identical {same:.1e}; 1-D |Δ| {:.1e}",
        (got - want).abs()
    ))
}

struct DeskRun {
    report: Result<EvalReport, String>,
    elapsed: Duration,
}

fn desk() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().expect("temp dir");
        let cfg = PipelineConfig {
            out_dir: dir.path().join("run"),
            ..PipelineConfig::default()
        };
        let t0 = Instant::now();
        let report = run_pipeline(cfg).map_err(|e| e.to_string());
        DeskRun {
            report,
            elapsed: t0.elapsed(),
        }
    })
}

fn ac11() -> Outcome {
    let run = desk();
    let report = run.report.as_ref().map_err(|e| e.clone())?;
    ensure(!report.compose_fallback, || {
        "refinement model unavailable, linear fallback used".into()
    })?;
    let braid = report.method("braid").ok_or("no braid metrics")?;
    let lin = report
        .method("linear-baseline")
        .ok_or("no baseline metrics")?;
    let detail = format!(
        "DTW-MPJPE {:.5} vs {:.5}; |ratio−1| {:.4} vs {:.4}; {:.0}s",
        braid.dtw_mpjpe,
        lin.dtw_mpjpe,
        braid.length_deviation,
        lin.length_deviation,
        run.elapsed.as_secs_f64()
    );
    ensure(braid.dtw_mpjpe < lin.dtw_mpjpe, || detail.clone())?;
    ensure(braid.length_deviation < lin.length_deviation, || {
        detail.clone()
    })?;
    ensure(run.elapsed < AC11_BUDGET, || detail.clone())?;
    Ok(detail)
}

fn ac12() -> Outcome {
    let report = desk().report.as_ref().map_err(|e| e.clone())?;
    let dur = report.duration.as_ref().ok_or("no duration evaluation")?;
    let braid = report
        .method("braid")
        .or_else(|| report.method("composed-linear"))
        .ok_or("no composed metrics")?;
    let detail = format!(
        "|ŝ−s| {:.4} vs {:.4} (reduction {:.3}, {} pairs); length ratio {:.4}",
        dur.mae_model, dur.mae_zero, dur.reduction, dur.pairs, braid.length_ratio
    );
    ensure(dur.reduction >= AC12_MIN_REDUCTION, || detail.clone())?;
    ensure(
        (AC12_RATIO_RANGE.0..=AC12_RATIO_RANGE.1).contains(&braid.length_ratio),
        || detail.clone(),
    )?;
    Ok(detail)
}

fn ac13() -> Outcome {
    let mut ranks: Vec<Option<usize>> = Vec::with_capacity(1000);
    for (count, rank) in [
        (415, Some(1)),
        (134, Some(2)),
        (35, Some(5)),
        (60, Some(10)),
        (356, None),
    ] {
        ranks.extend(std::iter::repeat_n(rank, count));
    }
    let m = ranking_metrics(&ranks, &[1, 5, 10]);
    let checks = [
        ("MRR", m.mrr, 0.495),
        ("R@1", m.recall_at(1).unwrap_or(f64::NAN), 0.415),
        ("R@5", m.recall_at(5).unwrap_or(f64::NAN), 0.584),
        ("R@10", m.recall_at(10).unwrap_or(f64::NAN), 0.644),
    ];
    for (name, got, want) in checks {
        ensure((got - want).abs() < RANKING_TOL, || {
            format!("{name} {got} vs {want}")
        })?;
    }
    Ok(format!(
        "N={} MRR {:.3} R@1 {:.3} R@5 {:.3} R@10 {:.3}",
        m.n, m.mrr, checks[1].1, checks[2].1, checks[3].1
    ))
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("AC-1", ac1),
        ("AC-2", ac2),
        ("AC-3", ac3),
        ("AC-4", ac4),
        ("AC-5", ac5),
        ("AC-6", ac6),
        ("AC-7", ac7),
        ("AC-8", ac8),
        ("AC-9", ac9),
        ("AC-10", ac10),
        ("AC-11", ac11),
        ("AC-12", ac12),
        ("AC-13", ac13),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with("AC-"))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match r {
            Ok(detail) => println!("[PASS] {name} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name} {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
