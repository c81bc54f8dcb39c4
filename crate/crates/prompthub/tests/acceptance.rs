//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Every threshold and run budget is pinned below. The process exits 0
//! even when a criterion is red so the regular test run stays usable; set
//! `ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use prompthub::checkpoint::{backbone_checkpoint, load_backbone, Checkpoint};
use prompthub::config::{Preset, TrainConfig};
use prompthub::dataset::{read_png, Dataset};
use prompthub::eval::evaluate;
use prompthub::metrics_log::{self, Record};
use prompthub::train::{backbone_digest, train, TrainOutcome};
use prompthub_core::backbone::{pretrain, Backbone, BackboneConfig, PretrainConfig};
use prompthub_core::canvas::Quadrant;
use prompthub_core::data::{Image, PromptDatabase, PromptPair, TaskKind, TaskSpec};
use prompthub_core::fusion::{AttentionRecord, FusionConfig, FusionModule, FusionWeights};
use prompthub_core::locality::{
    adaptive_sigma, build_locality_matrix, psi, AdaptiveSigmaHead, LocalityConfig, PriorKind,
};
use prompthub_core::losses::{
    label_prediction_loss, semantic_integrity_loss, total_loss, utilization_loss, LossTargets,
    LossWeights,
};
use prompthub_core::metrics::iou;
use prompthub_core::pipeline::{example_gradients, loss_targets, objective, predict};
use prompthub_core::schedule::Schedule;
use prompthub_core::tensor::{cosine_similarity, cross_entropy_from_logits, sgd_step, COSINE_EPS};
use prompthub_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_SEED: u64 = 7;
const TRAIN_SEED: u64 = 7;
/// Epoch budget of every trend run, with one cosine cycle over the run.
const TREND_EPOCHS: usize = 8;
const TUNED_SIGMA: f64 = 0.65;
const COLLAPSE_MIOU: f64 = 0.15;
const TREND_MARGIN: f64 = 0.01;
const FIFTEEN_MIN: f64 = 900.0;
const MASKED_ACC_MIN: f64 = 0.6;
const RECON_MSE_MAX: f64 = 0.01;
const EXACT_PAIR_IOU: f64 = 0.8;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Collects named sub-checks; the criterion passes iff none failed.
#[derive(Default)]
struct Checks {
    total: usize,
    failed: Vec<String>,
}

impl Checks {
    fn ok(&mut self, name: &str, cond: bool) {
        self.total += 1;
        if !cond {
            self.failed.push(name.to_string());
        }
    }

    fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.total += 1;
        if !((got - want).abs() <= tol) {
            self.failed
                .push(format!("{name} (got {got}, want {want} ± {tol:e})"));
        }
    }

    fn verdict(self) -> Verdict {
        let detail = if self.failed.is_empty() {
            format!("{} checks", self.total)
        } else {
            format!(
                "{}/{} checks failed: {}",
                self.failed.len(),
                self.total,
                self.failed.join("; ")
            )
        };
        verdict(self.failed.is_empty(), detail)
    }
}

fn report(id: u32, name: &str, secs: f64, v: &Verdict) {
    println!(
        "{} criterion {id:>2} {name}: {} [{secs:.1}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_module(
    grid: (usize, usize),
    d: usize,
    n: usize,
    sigma: f64,
    seed: u64,
) -> FusionModule<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = FusionWeights::init(d, &mut rng);
    for t in w.tensors_mut() {
        *t = rand_t(&mut rng, &[d, d]);
    }
    let cfg = FusionConfig {
        num_prompts: n,
        locality: LocalityConfig::gaussian(sigma),
        patchwise: false,
    };
    FusionModule::from_parts(cfg, grid, w, None).unwrap()
}

fn features(seed: u64, n: usize, l: usize, d: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rand_t(&mut rng, &[l, d])).collect()
}

// ---------------------------------------------------------------- 1

fn formula_suite() -> Verdict {
    let mut c = Checks::default();
    let t = |shape: &[usize], v: &[f64]| Tensor::new(shape, v.to_vec()).unwrap();

    // matmul
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    c.ok(
        "identity matmul",
        Tensor::identity(2).matmul(&a).unwrap() == a,
    );
    let p = a.matmul(&t(&[2, 1], &[5.0, 6.0])).unwrap();
    c.ok("hand matmul", p.data() == [17.0, 39.0]);
    let z = Tensor::<f64>::zeros(&[3, 4])
        .matmul(&t(&[4, 2], &[1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]))
        .unwrap();
    c.ok(
        "zero matmul",
        z.shape() == [3, 2] && z.data().iter().all(|&v| v == 0.0),
    );

    // softmax
    let s = t(&[1, 4], &[0.0; 4]).softmax_lastdim().unwrap();
    s.data()
        .iter()
        .for_each(|&v| c.close("uniform softmax", v, 0.25, 1e-6));
    let s = t(&[1, 2], &[2f64.ln(), 0.0]).softmax_lastdim().unwrap();
    c.close("softmax ln2 a", s.data()[0], 2.0 / 3.0, 1e-6);
    c.close("softmax ln2 b", s.data()[1], 1.0 / 3.0, 1e-6);
    let s = t(&[1, 2], &[1000.0, 0.0]).softmax_lastdim().unwrap();
    c.ok(
        "softmax large logit",
        s.is_finite() && (s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] < 1e-6,
    );

    // cross-entropy
    let mut spike = vec![0.0; 32];
    spike[5] = 30.0;
    c.ok(
        "CE spike",
        cross_entropy_from_logits(&spike, 5).unwrap() < 1e-10,
    );
    c.close(
        "CE uniform",
        cross_entropy_from_logits(&[0.0; 32], 3).unwrap(),
        3.465736,
        1e-6,
    );
    let logits = [0.3, -1.2, 2.0, 0.7];
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[1, 4], &logits).with_grad());
    let l = tape.cross_entropy_rows(x, &[2]).unwrap();
    let g = tape.backward(l).unwrap();
    let g = g.get(x).unwrap().to_vec();
    for i in 0..4 {
        let (mut up, mut dn) = (logits, logits);
        up[i] += 1e-5;
        dn[i] -= 1e-5;
        let num = (cross_entropy_from_logits(&up, 2).unwrap()
            - cross_entropy_from_logits(&dn, 2).unwrap())
            / 2e-5;
        c.close("CE gradient vs FD", g[i], num, 1e-6);
    }

    // cosine
    let eps = COSINE_EPS;
    c.close(
        "cos self",
        cosine_similarity(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0], eps).unwrap(),
        1.0,
        1e-6,
    );
    c.close(
        "cos orth",
        cosine_similarity(&[1.0, 0.0], &[0.0, 1.0], eps).unwrap(),
        0.0,
        1e-6,
    );
    c.close(
        "cos anti",
        cosine_similarity(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0], eps).unwrap(),
        -1.0,
        1e-6,
    );

    // backward
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[3], &[0.5, -1.0, 2.0]).with_grad());
    let s = tape.sum(x).unwrap();
    c.ok(
        "grad of sum",
        tape.backward(s).unwrap().get(x).unwrap() == [1.0, 1.0, 1.0],
    );
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    c.ok(
        "grad of sum of squares",
        tape.backward(s).unwrap().get(x).unwrap() == [2.0, 4.0],
    );

    // sgd
    let mut p = t(&[1], &[1.0]).with_grad();
    p.accumulate_grad(&[1.0]).unwrap();
    sgd_step(&mut [&mut p], 0.04).unwrap();
    c.close("sgd step", p.data()[0], 0.96, 1e-12);
    let mut p = t(&[1], &[1.0]).with_grad();
    p.accumulate_grad(&[3.0]).unwrap();
    sgd_step(&mut [&mut p], 0.0).unwrap();
    c.ok("sgd lr 0", p.data()[0] == 1.0);
    let mut p = t(&[1], &[1.0]).with_grad();
    for _ in 0..2 {
        let v = p.data()[0];
        p.accumulate_grad(&[v]).unwrap();
        sgd_step(&mut [&mut p], 0.5).unwrap();
    }
    c.close("sgd two steps on quadratic", p.data()[0], 0.25, 1e-12);

    // locality prior
    let gauss = LocalityConfig::gaussian(1.0);
    let lap = LocalityConfig {
        kind: PriorKind::Laplacian,
        ..gauss
    };
    for cfg in [
        gauss,
        lap,
        LocalityConfig::gaussian(0.01),
        LocalityConfig::gaussian(37.0),
    ] {
        c.ok(
            "psi at centre",
            psi::<f64>(3, 4, 3, 4, &cfg).unwrap() == 1.0,
        );
    }
    c.close(
        "gaussian d=1",
        psi::<f64>(2, 2, 2, 3, &gauss).unwrap(),
        (-0.5f64).exp(),
        1e-12,
    );
    c.close(
        "laplacian 3-4-5",
        psi::<f64>(1, 1, 4, 5, &lap).unwrap(),
        (-5f64).exp(),
        1e-12,
    );
    let m = build_locality_matrix::<f64>(1, 1, 8, 8, &LocalityConfig::gaussian(0.65)).unwrap();
    c.close(
        "8x8 sigma 0.65 neighbour",
        m.at(1, 2),
        (-1.0f64 / (2.0 * 0.4225)).exp(),
        1e-12,
    );
    c.close(
        "8x8 sigma 0.65 neighbour rounded",
        m.at(1, 2),
        0.306226,
        1e-6,
    );
    let m = build_locality_matrix::<f64>(4, 4, 7, 7, &gauss).unwrap();
    let sym = (1..=7).all(|x| (1..=7).all(|y| m.at(x, y) == m.at(8 - x, 8 - y)));
    c.ok("odd grid rotation symmetry", sym);
    let m = build_locality_matrix::<f64>(2, 5, 8, 8, &LocalityConfig::gaussian(1e6)).unwrap();
    c.ok(
        "flat prior limit",
        m.weights.iter().all(|&v| (v - 1.0).abs() < 1e-9),
    );

    // adaptive sigma
    let fq = features(1, 1, 16, 6).remove(0);
    c.close(
        "zero head",
        adaptive_sigma(&fq, &AdaptiveSigmaHead::zeros(6)).unwrap(),
        0.5,
        1e-12,
    );
    let mut head = AdaptiveSigmaHead::<f64>::zeros(6);
    head.bias.data_mut()[0] = 30.0;
    let sat = adaptive_sigma(&fq, &head).unwrap();
    c.ok("saturated head", sat < 1.0 && sat > 1.0 - 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let head = AdaptiveSigmaHead {
        projection: rand_t(&mut rng, &[6, 1]),
        bias: rand_t(&mut rng, &[1]),
    };
    let mean: Vec<f64> = (0..6)
        .map(|j| (0..16).map(|r| fq.row(r)[j]).sum::<f64>() / 16.0)
        .collect();
    let z: f64 = mean
        .iter()
        .zip(head.projection.data())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        + head.bias.data()[0];
    c.close(
        "adaptive sigma oracle",
        adaptive_sigma(&fq, &head).unwrap(),
        1.0 / (1.0 + (-z).exp()),
        1e-6,
    );

    // locality attention
    let mut m = random_module((3, 3), 4, 2, 0.65, 5);
    m.weights.w_q = Tensor::zeros(&[4, 4]);
    let fx = features(6, 2, 9, 4);
    let a = m
        .locality_attention(&features(7, 1, 9, 4)[0], &fx, None)
        .unwrap();
    a.weights
        .data()
        .iter()
        .for_each(|&v| c.close("zero query uniform", v, 1.0 / 18.0, 1e-6));
    two_key_example(&mut c);
    triple_loop_example(&mut c);
    let m = random_module((2, 2), 3, 2, 0.65, 4);
    let (fx, fy) = (features(1, 2, 4, 3), features(2, 2, 4, 3));
    let rec = AttentionRecord {
        grid: (2, 2),
        num_prompts: 2,
        weights: Tensor::from_fn(
            &[4, 8],
            |i| if i % 8 == 4 + (3 - i / 8) { 1.0 } else { 0.0 },
        ),
    };
    let f = m.fuse(&rec, &fx, &fy).unwrap();
    let px = fx[1].matmul(&m.weights.w_vx).unwrap();
    c.ok(
        "one-hot selection",
        (0..4).all(|q| f.fx.row(q) == px.row(3 - q)),
    );

    // losses
    let targets: Vec<usize> = (0..4).map(|i| (i * 7) % 32).collect();
    let onehot = |rows: usize, tg: &[usize]| {
        Tensor::from_fn(
            &[rows, 32],
            |i| if tg[i / 32] == i % 32 { 30.0 } else { 0.0 },
        )
    };
    c.ok(
        "prediction confident",
        label_prediction_loss(&onehot(4, &targets), &targets).unwrap() < 1e-9,
    );
    let u = Tensor::<f64>::zeros(&[4, 32]);
    c.close(
        "prediction uniform",
        label_prediction_loss(&u, &targets).unwrap(),
        3.465736,
        1e-6,
    );
    let single = t(&[1, 3], &[0.2, -1.0, 0.5]);
    c.ok(
        "prediction single cell",
        label_prediction_loss(&single, &[2]).unwrap()
            == cross_entropy_from_logits(&[0.2, -1.0, 0.5], 2).unwrap(),
    );
    c.close(
        "semantic uniform",
        semantic_integrity_loss(&u, &u, &targets, &targets).unwrap(),
        6.931472,
        1e-6,
    );
    let o = onehot(4, &targets);
    c.ok(
        "semantic confident",
        semantic_integrity_loss(&o, &o, &targets, &targets).unwrap() < 1e-9,
    );
    let a = t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]);
    let orth = t(&[2, 2], &[0.0, 3.0, 1.0, 0.0]);
    let neg = t(&[2, 2], &[-1.0, 0.0, 0.0, -5.0]);
    c.close(
        "utilization identical",
        utilization_loss(&a, &a, &a, &a).unwrap(),
        -2.0,
        1e-6,
    );
    c.close(
        "utilization orthogonal",
        utilization_loss(&a, &a, &orth, &orth).unwrap(),
        0.0,
        1e-6,
    );
    c.close(
        "utilization anti-parallel",
        utilization_loss(&a, &a, &neg, &neg).unwrap(),
        2.0,
        1e-6,
    );
    c.close(
        "total 1.6",
        total_loss(1.0, 2.0, -2.0, &LossWeights::default())
            .unwrap()
            .total,
        1.6,
        1e-12,
    );
    let base_only = LossWeights {
        lambda: 0.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    c.ok(
        "total base only",
        total_loss(0.37, 9.0, 1.5, &base_only).unwrap().total == 0.37,
    );

    // schedule
    let s = Schedule::default();
    c.ok("lr step 0", s.lr_at(0, 32) == 0.04);
    c.close("lr midpoint", s.lr_at(160, 32), 0.02, 1e-12);
    c.ok("lr restart", s.lr_at(320, 32) == 0.04);

    // IoU
    let gt: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
    let comp: Vec<bool> = gt.iter().map(|b| !b).collect();
    let half: Vec<bool> = (0..16).map(|i| i % 4 == 0).collect();
    c.ok("iou identical", iou(&gt, &gt).unwrap() == 1.0);
    c.ok("iou complement", iou(&comp, &gt).unwrap() == 0.0);
    c.close("iou half", iou(&half, &gt).unwrap(), 0.5, 1e-12);

    c.verdict()
}

fn two_key_example(c: &mut Checks) {
    // scores [2, 2] before the prior, ψ = [1, 0.5]
    let sigma = 1.0 / (2.0 * 2f64.ln()).sqrt();
    let cfg = FusionConfig {
        num_prompts: 1,
        locality: LocalityConfig::gaussian(sigma),
        patchwise: false,
    };
    let one = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    let w = FusionWeights {
        w_q: one.clone(),
        w_k: one.clone(),
        w_vx: one.clone(),
        w_vy: one.clone(),
        sa_q: one.clone(),
        sa_k: one.clone(),
        sa_v: one.clone(),
        sa_o: one,
    };
    let m = FusionModule::from_parts(cfg, (1, 2), w, None).unwrap();
    let fq = Tensor::new(&[2, 1], vec![2.0, 0.0]).unwrap();
    let fx = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
    let a = m.locality_attention(&fq, &[fx], None).unwrap();
    c.close("two-key a", a.weights.row(0)[0], 0.731059, 1e-6);
    c.close("two-key b", a.weights.row(0)[1], 0.268941, 1e-6);
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

fn triple_loop_example(c: &mut Checks) {
    let (l, d, n) = (4, 3, 2);
    let m = random_module((2, 2), d, n, 0.65, 11);
    let fq = features(12, 1, l, d).remove(0);
    let (fx, fy) = (features(13, n, l, d), features(14, n, l, d));
    let a = m.locality_attention(&fq, &fx, None).unwrap();
    let f = m.fuse(&a, &fx, &fy).unwrap();
    let w = &m.weights;
    let q = naive_matmul(fq.data(), w.w_q.data(), l, d, d);
    let mut worst = 0f64;
    let mut att = vec![0.0; l * n * l];
    for qi in 0..l {
        let mut row = Vec::new();
        for p in &fx {
            let k = naive_matmul(p.data(), w.w_k.data(), l, d, d);
            for ki in 0..l {
                let s: f64 = (0..d).map(|t| q[qi * d + t] * k[ki * d + t]).sum();
                let prior: f64 = psi(
                    qi / 2 + 1,
                    qi % 2 + 1,
                    ki / 2 + 1,
                    ki % 2 + 1,
                    &m.cfg.locality,
                )
                .unwrap();
                row.push(s / (d as f64).sqrt() * prior);
            }
        }
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zsum: f64 = row.iter().map(|s| (s - mx).exp()).sum();
        for (j, s) in row.iter().enumerate() {
            att[qi * n * l + j] = (s - mx).exp() / zsum;
            worst = worst.max((att[qi * n * l + j] - a.weights.row(qi)[j]).abs());
        }
    }
    let mut oy = vec![0.0; l * d];
    for (pi, p) in fy.iter().enumerate() {
        let v = naive_matmul(p.data(), w.w_vy.data(), l, d, d);
        for qi in 0..l {
            for ki in 0..l {
                for t in 0..d {
                    oy[qi * d + t] += att[qi * n * l + pi * l + ki] * v[ki * d + t];
                }
            }
        }
    }
    for (x, y) in oy.iter().zip(f.fy.data()) {
        worst = worst.max((x - y).abs());
    }
    c.close("triple-loop oracle", worst, 0.0, 1e-6);
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Verdict {
    // Gradients of a few 1e-7 sit below the round-off of a two-point
    // difference at 1e-5, so the oracle is the fourth-order central stencil.
    const H4: f64 = 1e-3;
    const H2: f64 = 1e-5;
    let img = |rng: &mut ChaCha8Rng| {
        Image::new(8, 8, (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    };
    let mut worst = 0f64;
    let mut worst_two_point = 0f64;
    let mut entries = 0;
    let mut linear = 0f64;
    let w = LossWeights::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let bb = Backbone::<f64>::init(BackboneConfig::for_image(8, 4, 6).unwrap(), seed).unwrap();
        let kind = if seed % 2 == 0 {
            PriorKind::Gaussian
        } else {
            PriorKind::Laplacian
        };
        let cfg = FusionConfig {
            num_prompts: 3,
            locality: LocalityConfig {
                kind,
                sigma: TUNED_SIGMA,
                adaptive: true,
            },
            patchwise: false,
        };
        let mut module = FusionModule::<f64>::new(cfg, (2, 2), 6, seed).unwrap();
        for p in module.params_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let mut pair = |id| PromptPair {
            id,
            class_tag: 0,
            image: img(&mut rng),
            label: img(&mut rng),
        };
        let query = pair(99);
        let prompts: Vec<PromptPair> = (0..3).map(&mut pair).collect();
        let refs: Vec<&PromptPair> = prompts.iter().collect();
        let targets: LossTargets = loss_targets(&bb, &query).unwrap();
        let loss = |m: &FusionModule<f64>| {
            objective(&bb, m, &query.image, &refs, &targets, &w)
                .unwrap()
                .total
        };
        let (_, grads) =
            example_gradients(&bb, &module, &query.image, &refs, &targets, &w).unwrap();
        for (pi, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let at = |d: f64| {
                    let mut m = module.clone();
                    m.params_mut()[pi].data_mut()[j] += d;
                    loss(&m)
                };
                let rel = |num: f64| (g[j] - num).abs() / g[j].abs().max(num.abs()).max(1e-6);
                let two_point = (at(H2) - at(-H2)) / (2.0 * H2);
                let four_point =
                    (8.0 * (at(H4) - at(-H4)) - (at(2.0 * H4) - at(-2.0 * H4))) / (12.0 * H4);
                worst = worst.max(rel(four_point));
                worst_two_point = worst_two_point.max(rel(two_point));
                entries += 1;
            }
        }
        // the combined gradient is the weighted sum of the component ones
        let only = |p, l, g| LossWeights {
            prediction: p,
            lambda: l,
            gamma: g,
        };
        let comp = |w: LossWeights| {
            example_gradients(&bb, &module, &query.image, &refs, &targets, &w)
                .unwrap()
                .1
        };
        let (gp, gs, gu) = (
            comp(only(1.0, 0.0, 0.0)),
            comp(only(0.0, 1.0, 0.0)),
            comp(only(0.0, 0.0, 1.0)),
        );
        for i in 0..grads.len() {
            for j in 0..grads[i].len() {
                linear =
                    linear.max((grads[i][j] - (gp[i][j] + 0.5 * gs[i][j] + 0.2 * gu[i][j])).abs());
            }
        }
    }
    verdict(
        worst < 1e-4 && linear < 1e-6,
        format!(
            "20 instances, {entries} parameter entries, worst relative error {worst:.2e} (< 1e-4; two-point h=1e-5 gives {worst_two_point:.2e}), linearity {linear:.1e} (< 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn reduction_identities() -> Verdict {
    let mut worst_flat = 0f64;
    let mut worst_dup = 0f64;
    let mut worst_perm = 0f64;
    for seed in 0..10 {
        let m = random_module((4, 4), 5, 3, 1e6, seed);
        let fq = features(10 + seed, 1, 16, 5).remove(0);
        let (fx, fy) = (features(20 + seed, 3, 16, 5), features(30 + seed, 3, 16, 5));
        let a = m.locality_attention(&fq, &fx, None).unwrap();
        let f = m.fuse(&a, &fx, &fy).unwrap();
        // vanilla cross-attention over the stacked keys
        let stack = |ts: &[Tensor<f64>]| {
            Tensor::new(
                &[48, 5],
                ts.iter().flat_map(|t| t.data().to_vec()).collect(),
            )
            .unwrap()
        };
        let (x, y) = (stack(&fx), stack(&fy));
        let q = fq.matmul(&m.weights.w_q).unwrap();
        let k = x.matmul(&m.weights.w_k).unwrap();
        let kt = Tensor::from_fn(&[5, 48], |i| k.data()[(i % 48) * 5 + i / 48]);
        let s = q.matmul(&kt).unwrap();
        let s = Tensor::new(
            s.shape(),
            s.data().iter().map(|v| v / 5f64.sqrt()).collect(),
        )
        .unwrap();
        let va = s.softmax_lastdim().unwrap();
        let vx = va.matmul(&x.matmul(&m.weights.w_vx).unwrap()).unwrap();
        let vy = va.matmul(&y.matmul(&m.weights.w_vy).unwrap()).unwrap();
        worst_flat = worst_flat
            .max(max_diff(&f.fx, &vx))
            .max(max_diff(&f.fy, &vy))
            .max(max_diff(&a.weights, &va));

        let m = random_module((3, 3), 4, 2, TUNED_SIGMA, 100 + seed);
        let fq = features(40 + seed, 1, 9, 4).remove(0);
        let (mut fx, mut fy) = (features(50 + seed, 2, 9, 4), features(60 + seed, 2, 9, 4));
        let base = m
            .fuse(&m.locality_attention(&fq, &fx, None).unwrap(), &fx, &fy)
            .unwrap();
        let rep = |v: &[Tensor<f64>]| v.iter().cycle().take(6).cloned().collect::<Vec<_>>();
        let (dx, dy) = (rep(&fx), rep(&fy));
        let dup = m
            .fuse(&m.locality_attention(&fq, &dx, None).unwrap(), &dx, &dy)
            .unwrap();
        worst_dup = worst_dup
            .max(max_diff(&base.fx, &dup.fx))
            .max(max_diff(&base.fy, &dup.fy));
        fx.swap(0, 1);
        fy.swap(0, 1);
        let perm = m
            .fuse(&m.locality_attention(&fq, &fx, None).unwrap(), &fx, &fy)
            .unwrap();
        worst_perm = worst_perm
            .max(max_diff(&base.fx, &perm.fx))
            .max(max_diff(&base.fy, &perm.fy));
    }

    // label perturbation through the full forward pass
    let bb = Backbone::<f64>::init(BackboneConfig::for_image(12, 4, 6).unwrap(), 3).unwrap();
    let m = random_module((3, 3), 6, 3, TUNED_SIGMA, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = |rng: &mut ChaCha8Rng| {
        Image::new(
            12,
            12,
            (0..432).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    };
    let ps: Vec<PromptPair> = (0..3)
        .map(|i| PromptPair {
            id: i,
            class_tag: 0,
            image: img(&mut rng),
            label: img(&mut rng),
        })
        .collect();
    let query = img(&mut rng);
    let a = m
        .forward(&bb, &query, &ps.iter().collect::<Vec<_>>())
        .unwrap();
    let mut changed = ps.clone();
    for p in &mut changed {
        p.label = img(&mut rng);
    }
    let b = m
        .forward(&bb, &query, &changed.iter().collect::<Vec<_>>())
        .unwrap();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&a.attention.weights) == bits(&b.attention.weights);

    verdict(
        worst_flat < 1e-5 && worst_dup < 1e-5 && worst_perm < 1e-5 && same,
        format!(
            "flat prior vs vanilla {worst_flat:.1e}, duplicates {worst_dup:.1e}, permutation {worst_perm:.1e} (all < 1e-5), attention bitwise unchanged under label perturbation: {same}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn loss_arithmetic(logs: &[(&str, &[Record])]) -> Verdict {
    let mut worst = 0f64;
    let mut steps = 0;
    let mut detail = Vec::new();
    for (name, recs) in logs {
        let mut epochs = 0;
        for r in recs.iter() {
            match r {
                Record::Step {
                    l_p,
                    l_s,
                    l_u,
                    total,
                    ..
                } => {
                    worst = worst.max((total - (l_p + 0.5 * l_s + 0.2 * l_u)).abs());
                    steps += 1;
                }
                Record::Epoch { .. } => epochs += 1,
                _ => {}
            }
        }
        detail.push(format!("{name}: {epochs} epochs"));
    }
    verdict(
        worst < 1e-6 && steps > 0,
        format!(
            "{steps} logged steps ({}), worst |total − (l_p + 0.5·l_s + 0.2·l_u)| = {worst:.1e}",
            detail.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- shared runs

struct Run {
    name: String,
    outcome: TrainOutcome,
    final_miou: f64,
    secs: f64,
}

fn trend_config() -> TrainConfig {
    let mut cfg = TrainConfig::for_task(TaskKind::Segmentation, TRAIN_SEED);
    cfg.dataset = TaskSpec::new(TaskKind::Segmentation, DATA_SEED);
    cfg.epochs = TREND_EPOCHS;
    cfg.schedule.t0_epochs = TREND_EPOCHS as f64;
    cfg
}

fn run(name: &str, cfg: &TrainConfig, bb: &Backbone<f32>, data: &Dataset) -> Run {
    let t = Instant::now();
    let outcome = train(cfg, bb, &data.train, None, &mut |_| {}).expect("training run");
    let final_miou = evaluate(cfg.task, bb, &outcome.module, &data.train, &data.test)
        .unwrap()
        .value;
    let secs = t.elapsed().as_secs_f64();
    eprintln!("  run {name}: final test mIoU {final_miou:.4} ({secs:.0}s)");
    Run {
        name: name.to_string(),
        outcome,
        final_miou,
        secs,
    }
}

// ---------------------------------------------------------------- 8

struct BackboneGate {
    backbone: Backbone<f32>,
    masked_acc: f64,
    recon_mse: f64,
    probe_differs: bool,
    secs: f64,
}

fn pretrain_backbone(data: &Dataset) -> BackboneGate {
    let t = Instant::now();
    let cfg = BackboneConfig::for_image(data.spec.image_size, data.spec.patch_size, 32).unwrap();
    let (bb, _) =
        pretrain(&data.train, cfg, &PretrainConfig::default(), &mut |_| {}).expect("pretraining");
    let masked_acc = bb.masked_token_accuracy(&data.train, &data.test).unwrap();
    let recon_mse = bb
        .reconstruction_mse(data.test.iter().flat_map(|p| [&p.image, &p.label]))
        .unwrap();
    let probe_differs = masked_probe(&bb, data);
    BackboneGate {
        backbone: bb,
        masked_acc,
        recon_mse,
        probe_differs,
        secs: t.elapsed().as_secs_f64(),
    }
}

/// Two canvases that differ only in the answer quadrant give different
/// logits there.
fn masked_probe(bb: &Backbone<f32>, data: &Dataset) -> bool {
    let (p, q) = (&data.train.pairs()[0], &data.test[0]);
    let logits = |fill: Option<&Image>| {
        let mut tape = Tape::new();
        let vars = bb.bind(&mut tape);
        let ex = bb.embed_tape(&mut tape, &vars, &p.image).unwrap();
        let ey = bb.embed_tape(&mut tape, &vars, &p.label).unwrap();
        let eq = bb.embed_tape(&mut tape, &vars, &q.image).unwrap();
        let last = match fill {
            Some(im) => bb.embed_tape(&mut tape, &vars, im).unwrap(),
            None => bb.mask_tape(&mut tape, &vars).unwrap(),
        };
        let stack = tape.concat_rows(&[ex, ey, eq, last]).unwrap();
        let canvas = tape
            .gather_rows(stack, &bb.layout().assemble_permutation())
            .unwrap();
        let out = bb.encode_tape(&mut tape, &vars, canvas).unwrap();
        let v = tape.value(out);
        bb.layout()
            .quadrant_rows(Quadrant::Answer)
            .iter()
            .flat_map(|&r| v.row(r).to_vec())
            .collect::<Vec<f32>>()
    };
    logits(None) != logits(Some(&q.label))
}

// ---------------------------------------------------------------- 9 and 10

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prompthub"))
}

fn run_cli(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "{:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// gen-data, pretrain-backbone and train through the CLI into `root`.
// Paths are relative to each root so both runs see the same config bytes.
fn cli_pipeline(root: &Path) -> Result<(), String> {
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let cli = || {
        let mut c = bin();
        c.current_dir(root);
        c
    };
    run_cli(cli().args([
        "gen-data",
        "--task",
        "seg",
        "--seed",
        "21",
        "--train-size",
        "128",
        "--test-size",
        "16",
        "--out",
        "data",
    ]))?;
    run_cli(cli().args([
        "pretrain-backbone",
        "--task",
        "seg",
        "--seed",
        "21",
        "--epochs",
        "2",
        "--data",
        "data",
        "--out",
        "bb.ckpt",
    ]))?;
    let mut cfg = TrainConfig::for_task(TaskKind::Segmentation, 21);
    cfg.epochs = 5;
    cfg.queries_per_epoch = Some(48);
    cfg.dataset.train_size = 128;
    cfg.dataset.test_size = 16;
    cfg.paths.data = Some("data".into());
    cfg.paths.backbone = Some("bb.ckpt".into());
    cfg.paths.out = Some("run".into());
    std::fs::write(
        root.join("cfg.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    run_cli(cli().args(["train", "--config", "cfg.json"]))?;
    Ok(())
}

const PIPELINE_FILES: [&str; 4] = [
    "bb.ckpt",
    "run/best.ckpt",
    "run/final.ckpt",
    "run/metrics.ndjson",
];

fn determinism(a: &Path, b: &Path) -> Verdict {
    for root in [a, b] {
        if let Err(e) = cli_pipeline(root) {
            return verdict(false, format!("pipeline failed: {e}"));
        }
    }
    let mut differing = Vec::new();
    for f in PIPELINE_FILES {
        if std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() {
            differing.push(f);
        }
    }
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "two CLI pipeline runs: {} identical",
                PIPELINE_FILES.join(", ")
            )
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

fn exit_code(cmd: &mut Command) -> Option<i32> {
    cmd.output().ok().and_then(|o| o.status.code())
}

struct Probes {
    /// Self-prompted fused label vs quantizer reconstruction, and the
    /// reconstruction error itself.
    self_prompt: (f64, f64),
    exact_pair_iou: f64,
}

fn artifact_hygiene(
    root: &Path,
    data: &Dataset,
    gate: &BackboneGate,
    trained: &TrainOutcome,
    probes: &Probes,
) -> Verdict {
    let mut c = Checks::default();
    let scratch = root.join("hygiene");

    // dataset round trip
    data.write(&scratch.join("data")).unwrap();
    let back = Dataset::load(&scratch.join("data")).unwrap();
    c.ok(
        "dataset round trip",
        back.train.pairs() == data.train.pairs()
            && back.test == data.test
            && back.spec == data.spec,
    );

    // checkpoint round trips
    let ck = backbone_checkpoint(&gate.backbone, serde_json::Value::Null).unwrap();
    ck.save(&scratch.join("bb.ckpt")).unwrap();
    let loaded = Checkpoint::load(&scratch.join("bb.ckpt")).unwrap();
    let bb2 = load_backbone(&loaded).unwrap();
    c.ok(
        "backbone checkpoint round trip",
        backbone_digest(&bb2) == backbone_digest(&gate.backbone),
    );
    trained
        .final_checkpoint
        .save(&scratch.join("fusion.ckpt"))
        .unwrap();
    let fus = prompthub::checkpoint::load_fusion(
        &Checkpoint::load(&scratch.join("fusion.ckpt")).unwrap(),
    )
    .unwrap();
    c.ok(
        "fusion checkpoint round trip",
        fus.weights == trained.module.weights,
    );
    let mut bytes = std::fs::read(scratch.join("fusion.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    c.ok(
        "corruption detected",
        Checkpoint::from_bytes(&bytes).is_err(),
    );

    // exit codes
    let det = root.join("det_a");
    c.ok(
        "exit 0 on --help",
        exit_code(bin().arg("--help")) == Some(0),
    );
    c.ok(
        "exit 2 on unknown task",
        exit_code(bin().args(["config", "--task", "depth"])) == Some(2),
    );
    c.ok(
        "exit 2 on unknown flag",
        exit_code(bin().args(["train", "--nope"])) == Some(2),
    );
    c.ok(
        "exit 3 on missing data",
        exit_code(
            bin()
                .current_dir(&det)
                .args(["train", "--config", "cfg.json", "--data"])
                .arg(root.join("absent")),
        ) == Some(3),
    );
    std::fs::write(scratch.join("corrupt.ckpt"), &bytes).unwrap();
    c.ok(
        "exit 3 on corrupt checkpoint",
        exit_code(
            bin()
                .arg("eval")
                .arg("--checkpoint")
                .arg(scratch.join("corrupt.ckpt"))
                .arg("--backbone")
                .arg(det.join("bb.ckpt")),
        ) == Some(3),
    );
    if let Ok(text) = std::fs::read_to_string(det.join("cfg.json")) {
        let mut cfg: TrainConfig = serde_json::from_str(&text).unwrap();
        cfg.schedule.lr_init = 1e30;
        cfg.epochs = 1;
        std::fs::write(
            scratch.join("hot.json"),
            serde_json::to_string(&cfg).unwrap(),
        )
        .unwrap();
        c.ok(
            "exit 4 on divergence",
            exit_code(
                bin()
                    .current_dir(&det)
                    .arg("train")
                    .arg("--config")
                    .arg(scratch.join("hot.json"))
                    .arg("--out")
                    .arg(scratch.join("hot")),
            ) == Some(4),
        );
    } else {
        c.ok("pipeline config present", false);
    }

    // exports through the CLI on the determinism run
    let model = |cmd: &mut Command| {
        cmd.arg("--checkpoint")
            .arg(det.join("run/best.ckpt"))
            .arg("--backbone")
            .arg(det.join("bb.ckpt"));
    };
    let mut cmd = bin();
    cmd.current_dir(&det);
    cmd.args(["export-fused", "--query-id", "130", "--out"])
        .arg(scratch.join("fused.png"));
    model(&mut cmd);
    let fused_ok = run_cli(&mut cmd).is_ok()
        && read_png(&scratch.join("fused.png")).is_ok_and(|im| (im.height, im.width) == (32, 128))
        && scratch.join("fused.json").exists();
    c.ok("fused export H×4W with sidecar", fused_ok);
    let mut cmd = bin();
    cmd.current_dir(&det);
    cmd.args(["export-attn", "--query-id", "130", "--out"])
        .arg(scratch.join("attn"));
    model(&mut cmd);
    let attn_ok = run_cli(&mut cmd).is_ok() && {
        let side: serde_json::Value = serde_json::from_slice(
            &std::fs::read(scratch.join("attn/attention.json")).unwrap_or_default(),
        )
        .unwrap_or_default();
        let raw: Vec<Vec<f64>> =
            serde_json::from_value(side["raw_heat"].clone()).unwrap_or_default();
        let total: f64 = raw.iter().flatten().sum::<f64>() / 64.0;
        raw.len() == 4
            && (total - 1.0).abs() < 1e-4
            && (0..4).all(|i| {
                read_png(&scratch.join(format!("attn/attn_{i}.png"))).is_ok_and(|im| {
                    let lo = im.data.iter().cloned().fold(f32::INFINITY, f32::min);
                    let hi = im.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    (im.height, im.width) == (32, 32) && lo == 0.0 && hi == 1.0
                })
            })
    };
    c.ok("attention export heat in [0,1], mass 1", attn_ok);
    let mut cmd = bin();
    cmd.current_dir(&det);
    cmd.args(["infer", "--query-id", "131", "--out"])
        .arg(scratch.join("pred.png"));
    model(&mut cmd);
    c.ok(
        "infer output matches query size",
        run_cli(&mut cmd).is_ok()
            && read_png(&scratch.join("pred.png"))
                .is_ok_and(|im| (im.height, im.width) == (32, 32)),
    );

    // self-prompted fused label against the quantizer reconstruction
    let (fused_vs_recon, recon) = probes.self_prompt;
    c.ok(
        &format!("self-prompt fused label MSE {fused_vs_recon:.4} within reconstruction error {recon:.4}"),
        fused_vs_recon <= recon,
    );
    c.ok(
        &format!(
            "exact-pair probe IoU {:.3} > {EXACT_PAIR_IOU}",
            probes.exact_pair_iou
        ),
        probes.exact_pair_iou > EXACT_PAIR_IOU,
    );
    c.verdict()
}

/// Mean over test queries of the MSE between the decoded fused label (N=1,
/// the query pair itself as the only prompt) and decode(quantize(label)),
/// next to the quantizer's own reconstruction error on those labels.
fn self_prompt_probe(
    bb: &Backbone<f32>,
    module: &FusionModule<f32>,
    test: &[PromptPair],
) -> (f64, f64) {
    let mut fused_err = 0.0;
    let mut recon_err = 0.0;
    for q in test {
        let pred = predict(bb, module, &q.image, &[q]).unwrap();
        let fused = pred.decode_quadrant(bb, Quadrant::PromptLabel).unwrap();
        let recon = bb.decode(&bb.quantize(&q.label).unwrap()).unwrap();
        fused_err += mse(&fused, &recon);
        recon_err += mse(&recon, &q.label);
    }
    (fused_err / test.len() as f64, recon_err / test.len() as f64)
}

fn mse(a: &Image, b: &Image) -> f64 {
    prompthub_core::metrics::mse(a, b).unwrap()
}

/// A query whose exact pair sits in the database retrieves it and should
/// be answered almost perfectly.
fn exact_pair_probe(bb: &Backbone<f32>, module: &FusionModule<f32>, data: &Dataset) -> f64 {
    let mut pairs = data.train.pairs().to_vec();
    pairs.extend(data.test.iter().take(32).cloned());
    let db = PromptDatabase::new(pairs).unwrap();
    let mut total = 0.0;
    for q in data.test.iter().take(32) {
        let ranked = db
            .retrieve_ranked(&q.image, module.cfg.num_prompts, None)
            .unwrap();
        let prompts: Vec<&PromptPair> = ranked.iter().map(|r| db.get(r.index)).collect();
        let pred = predict(bb, module, &q.image, &prompts).unwrap();
        total += iou(&pred.label.binarize(0.5), &q.label.binarize(0.5)).unwrap();
    }
    total / 32.0
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failures = 0;
    let mut emit = |id: u32, name: &str, secs: f64, v: Verdict| {
        report(id, name, secs, &v);
        if !v.pass {
            failures += 1;
        }
    };

    let t = Instant::now();
    let v = formula_suite();
    let secs = t.elapsed().as_secs_f64();
    emit(
        1,
        "formula suite",
        secs,
        verdict(
            v.pass && secs < 10.0,
            format!("{}, {secs:.2}s (< 10s)", v.detail),
        ),
    );
    let t = Instant::now();
    let v = gradient_suite();
    let secs = t.elapsed().as_secs_f64();
    emit(
        2,
        "gradient suite",
        secs,
        verdict(
            v.pass && secs < 120.0,
            format!("{}, {secs:.1}s (< 120s)", v.detail),
        ),
    );
    let t = Instant::now();
    let v = reduction_identities();
    emit(3, "reduction identities", t.elapsed().as_secs_f64(), v);

    eprintln!("acceptance: generating data and pretraining the backbone");
    let data = Dataset::generate(&TaskSpec::new(TaskKind::Segmentation, DATA_SEED)).unwrap();
    let gate = pretrain_backbone(&data);
    let bb = &gate.backbone;
    let digest_before = backbone_digest(bb);

    eprintln!("acceptance: trend runs ({TREND_EPOCHS} epochs each)");
    let base = trend_config();
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let full = run("full", &base, bb, &data);
    let mut ablations = Vec::new();
    for preset in [Preset::NoLu, Preset::NoLs, Preset::NoAug, Preset::NoLp] {
        ablations.push(run(preset.name(), &with(&|c| c.apply(preset)), bb, &data));
    }
    let sharp = run(
        "sigma=0.01",
        &with(&|c| c.fusion.locality.sigma = 0.01),
        bb,
        &data,
    );
    let broad = run(
        "sigma=100",
        &with(&|c| c.fusion.locality.sigma = 100.0),
        bb,
        &data,
    );
    let single = run("N=1", &with(&|c| c.fusion.num_prompts = 1), bb, &data);

    let tmp = tempfile::tempdir().unwrap();
    let (det_a, det_b) = (tmp.path().join("det_a"), tmp.path().join("det_b"));
    let t = Instant::now();
    let det = determinism(&det_a, &det_b);
    let det_secs = t.elapsed().as_secs_f64();
    let det_log = metrics_log::read(&det_a.join("run/metrics.ndjson")).unwrap_or_default();

    let v = loss_arithmetic(&[
        ("CLI run", &det_log),
        ("full run", full.outcome.log.records()),
    ]);
    emit(4, "loss-combination arithmetic", 0.0, v);

    let no_lp = &ablations[3];
    let middle = &ablations[..3];
    let c5_secs = full.secs + ablations.iter().map(|r| r.secs).sum::<f64>();
    let ordered = middle
        .iter()
        .all(|r| full.final_miou > r.final_miou && r.final_miou > no_lp.final_miou);
    let collapsed = no_lp.final_miou < COLLAPSE_MIOU;
    let listing = std::iter::once(&full)
        .chain(&ablations)
        .map(|r| format!("{} {:.4}", r.name, r.final_miou))
        .collect::<Vec<_>>()
        .join(", ");
    emit(
        5,
        "ablation direction",
        c5_secs,
        verdict(
            ordered && collapsed && c5_secs < FIFTEEN_MIN,
            format!(
                "final test mIoU {listing}; ordering full > {{no_lu, no_ls, no_aug}} > no_lp: {ordered}; no_lp < {COLLAPSE_MIOU}: {collapsed}; {c5_secs:.0}s (< {FIFTEEN_MIN:.0}s)"
            ),
        ),
    );

    let c6_secs = full.secs + sharp.secs + broad.secs;
    let beats = |r: &Run| full.final_miou >= r.final_miou + TREND_MARGIN;
    emit(
        6,
        "locality trend",
        c6_secs,
        verdict(
            beats(&sharp) && beats(&broad) && c6_secs < FIFTEEN_MIN,
            format!(
                "sigma {TUNED_SIGMA} {:.4} vs sigma 0.01 {:.4} and sigma 100 {:.4} (margin {TREND_MARGIN}); {c6_secs:.0}s (< {FIFTEEN_MIN:.0}s)",
                full.final_miou, sharp.final_miou, broad.final_miou
            ),
        ),
    );

    emit(
        7,
        "multi-prompt trend",
        full.secs + single.secs,
        verdict(
            full.final_miou >= single.final_miou - TREND_MARGIN,
            format!(
                "N=4 {:.4} vs N=1 {:.4} (tolerance {TREND_MARGIN})",
                full.final_miou, single.final_miou
            ),
        ),
    );

    let digest_after = backbone_digest(bb);
    let recorded = std::iter::once(&full)
        .chain(&ablations)
        .chain([&sharp, &broad, &single])
        .all(|r| r.outcome.backbone_digest == digest_before);
    let untouched = digest_after == digest_before && recorded;
    emit(
        8,
        "backbone gate",
        gate.secs,
        verdict(
            gate.masked_acc > MASKED_ACC_MIN && gate.recon_mse < RECON_MSE_MAX && untouched && gate.probe_differs,
            format!(
                "held-out masked-token accuracy {:.3} (> {MASKED_ACC_MIN}), reconstruction MSE {:.5} (< {RECON_MSE_MAX}), weights bit-identical after {} runs: {untouched}, answer quadrant responds to its content: {}",
                gate.masked_acc,
                gate.recon_mse,
                9,
                gate.probe_differs
            ),
        ),
    );

    emit(9, "determinism", det_secs, det);

    let t = Instant::now();
    let probes = Probes {
        self_prompt: self_prompt_probe(bb, &single.outcome.module, &data.test),
        exact_pair_iou: exact_pair_probe(bb, &full.outcome.module, &data),
    };
    eprintln!(
        "  probes: self-prompt {:.4} vs {:.4}, exact pair IoU {:.3}",
        probes.self_prompt.0, probes.self_prompt.1, probes.exact_pair_iou
    );
    let v = artifact_hygiene(tmp.path(), &data, &gate, &full.outcome, &probes);
    emit(10, "artifact hygiene", t.elapsed().as_secs_f64(), v);

    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
