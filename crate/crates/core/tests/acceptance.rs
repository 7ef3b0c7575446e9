//! Acceptance gate. Every criterion prints one `[PASS]` / `[FAIL]` line
//! (`--nocapture` to see them). The three end-to-end criteria need a full
//! five-seed sweep; `sweep_and_check_end_to_end` runs it and is ignored by
//! default, while `end_to_end_from_existing_sweep` scores a sweep directory
//! named by `EXPAND_ACCEPTANCE_RUNS`, e.g. one produced by `expand train`.

use std::path::{Path, PathBuf};

use expand_core::agent::{q_feedback_grads, feedback_states, Algo, FeedbackPlan, LearnerConfig};
use expand_core::augment::{
    build_mask, combined_feedback_loss, gaussian_blur, invariance_loss, perturb_state, AugmentationPreset, GaussianFilter, LossWeights,
    SaliencyMask,
};
use expand_core::baselines::{explanation_loss, explanation_loss_grad};
use expand_core::dqn::{act, dqn_loss_and_grad, EpsilonSchedule, PrioritizedReplay, PrioritizedTransition};
use expand_core::env::Action;
use expand_core::feedback::{advantage_loss, BoundingBox, FeedbackRecord, FeedbackSource, Label};
use expand_core::nn::{Adam, AttentionNet, Maps, Parameters, QNetwork, QNetworkSpec};
use expand_core::orchestrator::metrics::{
    ablation_ordering, context_agnostic_negative, efficiency_claim, load_sweep, steps_to_threshold, CriterionResult, EpisodeMetrics,
    StepsToThreshold, RETURN_THRESHOLD, RUNNING_WINDOW,
};
use expand_core::orchestrator::{run_experiment, OracleProvider, RunConfig};
use expand_core::state::{Frame, StackedState, FRAME_LEN, FRAME_SIDE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const LOSS_TOL: f64 = 1e-6;
const PIXEL_TOL: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-3;
const SIGNIFICANCE: f64 = 0.01;
const MARGIN: f64 = 0.05;

fn report(name: &str, passed: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
}

fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    Frame::from_pixels((0..FRAME_LEN).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng) -> StackedState {
    StackedState::from_frames([random_frame(rng), random_frame(rng), random_frame(rng), random_frame(rng)])
}

fn random_boxes(rng: &mut ChaCha8Rng, max: usize) -> Vec<BoundingBox> {
    (0..rng.random_range(0..=max))
        .map(|_| BoundingBox {
            x: rng.random_range(0..84),
            y: rng.random_range(0..84),
            w: rng.random_range(1..=40),
            h: rng.random_range(1..=40),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Loss oracles
// ---------------------------------------------------------------------------

/// Good: max_a' Q - Q(a), zero when `a` is the (lowest-index) argmax.
/// Bad: Q(a) - (max_{a' != a} Q - margin), zero when `a` is not the argmax.
fn advantage_oracle(q: &[f64], a: usize, good: bool, margin: f64) -> f64 {
    let mut best = 0;
    for i in 0..q.len() {
        if q[i] > q[best] {
            best = i;
        }
    }
    if good {
        if best == a {
            0.0
        } else {
            q[best] - q[a]
        }
    } else if best != a {
        0.0
    } else {
        let second = (0..q.len()).filter(|&i| i != a).map(|i| q[i]).fold(f64::NEG_INFINITY, f64::max);
        q[a] - second + margin
    }
}

fn invariance_oracle(orig: &[f64], aug: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for copy in aug {
        let mut per = 0.0;
        for (o, c) in orig.iter().zip(copy) {
            per += (o - c).abs();
        }
        total += per / orig.len() as f64;
    }
    total / aug.len() as f64
}

fn explanation_oracle(pred: &[f64], boxes: &[BoundingBox]) -> f64 {
    let mut sum = 0.0;
    for row in 0..FRAME_SIDE as i32 {
        for col in 0..FRAME_SIDE as i32 {
            let inside = boxes.iter().any(|b| col >= b.x && col < b.x + b.w && row >= b.y && row < b.y + b.h);
            let target = if inside { 1.0 } else { 0.0 };
            let d = pred[(row * FRAME_SIDE as i32 + col) as usize] - target;
            sum += d * d;
        }
    }
    sum / FRAME_LEN as f64
}

#[test]
fn loss_oracles() {
    let mut failures = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if (got - want).abs() > LOSS_TOL {
            failures.push(format!("{what}: got {got}, want {want}"));
        }
    };

    // advantage loss: hand-evaluated cases, then constructed ones vs the oracle
    let hand: [(&[f64], usize, bool, f64); 12] = [
        (&[1.0, 2.0, 3.0], 2, true, 0.0),
        (&[1.0, 2.0, 3.0], 0, true, 2.0),
        (&[1.0, 2.0, 3.0], 1, true, 1.0),
        (&[1.0, 2.0, 3.0], 2, false, 1.05),
        (&[1.0, 2.0, 3.0], 0, false, 0.0),
        (&[0.5, 0.5, 0.1], 0, true, 0.0),
        (&[0.5, 0.5, 0.1], 1, true, 0.0),
        (&[0.5, 0.5, 0.1], 0, false, 0.05),
        (&[0.5, 0.5, 0.1], 1, false, 0.0),
        (&[-1.0, -3.0, -2.0, -0.5, -4.0, -1.5], 3, false, 0.55),
        (&[-1.0, -3.0, -2.0, -0.5, -4.0, -1.5], 4, true, 3.5),
        (&[0.2, 0.9, 0.3, 0.1, 0.0, 0.85], 1, false, 0.1),
    ];
    let mut adv_cases = 0;
    for (q, a, good, want) in hand {
        let label = if good { Label::Good } else { Label::Bad };
        check("advantage (hand)", advantage_loss(q, a, label, MARGIN).unwrap(), want);
        check("advantage oracle (hand)", advantage_oracle(q, a, good, MARGIN), want);
        adv_cases += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = rng.random_range(0..6);
        let good = rng.random_bool(0.5);
        let label = if good { Label::Good } else { Label::Bad };
        check("advantage", advantage_loss(&q, a, label, MARGIN).unwrap(), advantage_oracle(&q, a, good, MARGIN));
        // force the bad-label active branch too
        let mut qb = q.clone();
        qb[a] = qb.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.3;
        check("advantage (bad active)", advantage_loss(&qb, a, Label::Bad, MARGIN).unwrap(), advantage_oracle(&qb, a, false, MARGIN));
        adv_cases += 2;
    }

    // invariance loss
    let inv_hand: Vec<(Vec<f64>, Vec<Vec<f64>>, f64)> = vec![
        (vec![1.0, 2.0], vec![vec![1.5, 2.0]], 0.25),
        (vec![1.0, 2.0], vec![vec![1.0, 2.0]], 0.0),
        (vec![0.0, 0.0, 0.0], vec![vec![1.0, -1.0, 1.0], vec![0.0, 0.0, 3.0]], 1.0),
        (vec![0.3, -0.2], vec![vec![0.1, 0.2], vec![0.3, -0.2], vec![0.5, -0.6]], 0.2),
        (vec![2.0; 6], vec![vec![1.0; 6]; 5], 1.0),
    ];
    let mut inv_cases = 0;
    for (o, a, want) in &inv_hand {
        check("invariance (hand)", invariance_loss(o, a).unwrap(), *want);
        check("invariance oracle (hand)", invariance_oracle(o, a), *want);
        inv_cases += 1;
    }
    for _ in 0..20 {
        let o: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let aug: Vec<Vec<f64>> = (0..rng.random_range(1..=12))
            .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        check("invariance", invariance_loss(&o, &aug).unwrap(), invariance_oracle(&o, &aug));
        inv_cases += 1;
    }

    // combined loss
    let w = LossWeights::default();
    let comb_hand = [(0.0, 0.0, 0.0), (1.0, 0.0, 1.0), (0.0, 1.0, 0.1), (2.0, 3.0, 2.3), (0.05, 0.25, 0.075)];
    let mut comb_cases = 0;
    for (a, i, want) in comb_hand {
        check("combined (hand)", combined_feedback_loss(a, i, w), want);
        comb_cases += 1;
    }
    for _ in 0..20 {
        let (a, i) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let weights = LossWeights {
            advantage: rng.random_range(0.0..2.0),
            invariance: rng.random_range(0.0..2.0),
        };
        check("combined", combined_feedback_loss(a, i, weights), weights.advantage * a + weights.invariance * i);
        comb_cases += 1;
    }

    // explanation loss: a constant map c over a mask of k pixels gives
    // (k (1 - c)^2 + (N - k) c^2) / N
    let n = FRAME_LEN as f64;
    let expl_hand: [(Vec<BoundingBox>, f64); 5] = [
        (vec![], 0.5),
        (vec![BoundingBox { x: 0, y: 0, w: 84, h: 84 }], 0.5),
        (vec![BoundingBox { x: 0, y: 0, w: 12, h: 12 }], 0.0),
        (vec![BoundingBox { x: 24, y: 36, w: 12, h: 12 }], 1.0),
        (vec![BoundingBox { x: 80, y: 80, w: 12, h: 12 }], 0.25),
    ];
    let mut expl_cases = 0;
    for (boxes, c) in &expl_hand {
        let mask = build_mask(boxes);
        let k = mask.count() as f64;
        let want = (k * (1.0 - c) * (1.0 - c) + (n - k) * c * c) / n;
        check("explanation (hand)", explanation_loss(&vec![*c; FRAME_LEN], &mask).unwrap(), want);
        expl_cases += 1;
    }
    // the clipped corner box covers 4x4 pixels
    check("explanation (clipped corner)", build_mask(&expl_hand[4].0).count() as f64, 16.0);
    for _ in 0..20 {
        let boxes = random_boxes(&mut rng, 4);
        let pred: Vec<f64> = (0..FRAME_LEN).map(|_| rng.random_range(0.0..1.0)).collect();
        check("explanation", explanation_loss(&pred, &build_mask(&boxes)).unwrap(), explanation_oracle(&pred, &boxes));
        expl_cases += 1;
    }

    let counts = format!("cases: advantage {adv_cases}, invariance {inv_cases}, combined {comb_cases}, explanation {expl_cases}");
    let enough = [adv_cases, inv_cases, comb_cases, expl_cases].iter().all(|&c| c >= 20);
    let passed = failures.is_empty() && enough;
    report("loss-oracles", passed, &format!("{counts}; {} mismatches at tol {LOSS_TOL:e}", failures.len()));
    assert!(passed, "{counts}\n{}", failures.join("\n"));
}

// ---------------------------------------------------------------------------
// Augmentation oracles
// ---------------------------------------------------------------------------

/// Direct 2-D convolution with a full 2-D Gaussian kernel normalized over
/// the window and mirrored borders that do not repeat the edge sample.
fn blur_oracle(frame: &Frame, size: usize, sigma: f64) -> Vec<f64> {
    let n = FRAME_SIDE as i64;
    let half = (size / 2) as i64;
    let mut kernel = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - half as f64, j as f64 - half as f64);
            kernel[i][j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += kernel[i][j];
        }
    }
    let mirror = |i: i64| -> i64 {
        if i < 0 {
            -i
        } else if i >= n {
            2 * n - 2 - i
        } else {
            i
        }
    };
    let px = frame.pixels();
    let mut out = vec![0.0; FRAME_LEN];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for i in 0..size as i64 {
                for j in 0..size as i64 {
                    let sy = mirror(y + i - half);
                    let sx = mirror(x + j - half);
                    acc += kernel[i as usize][j as usize] / total * f64::from(px[(sy * n + sx) as usize]);
                }
            }
            out[(y * n + x) as usize] = acc;
        }
    }
    out
}

#[test]
fn augmentation_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mask_mismatch = 0usize;
    for _ in 0..100 {
        let boxes = random_boxes(&mut rng, 6);
        let mask = build_mask(&boxes);
        for row in 0..FRAME_SIDE as i32 {
            for col in 0..FRAME_SIDE as i32 {
                let inside = boxes.iter().any(|b| col >= b.x && col < b.x + b.w && row >= b.y && row < b.y + b.h);
                if mask.get(col as usize, row as usize) != inside {
                    mask_mismatch += 1;
                }
            }
        }
    }

    let mut filters: Vec<GaussianFilter> = Vec::new();
    for name in ["aug1", "aug5", "aug12"] {
        for f in AugmentationPreset::named(name).unwrap().filters {
            if !filters.contains(&f) {
                filters.push(f);
            }
        }
    }
    let mut blur_err = 0.0f64;
    let mut perturb_err = 0.0f64;
    for &filter in &filters {
        let state = random_state(&mut rng);
        let mask = build_mask(&random_boxes(&mut rng, 3));
        let perturbed = perturb_state(&state, &mask, filter);
        for (frame, out) in state.frames().iter().zip(perturbed.frames()) {
            let want = blur_oracle(frame, filter.size, filter.sigma);
            let got = gaussian_blur(frame, filter);
            for (g, w) in got.pixels().iter().zip(&want) {
                blur_err = blur_err.max((f64::from(*g) - w).abs());
            }
            for (i, (p, w)) in out.pixels().iter().zip(&want).enumerate() {
                let expected = if mask.bits()[i] { f64::from(frame.pixels()[i]) } else { *w };
                perturb_err = perturb_err.max((f64::from(*p) - expected).abs());
            }
        }
    }
    let passed = mask_mismatch == 0 && blur_err <= PIXEL_TOL && perturb_err <= PIXEL_TOL;
    report(
        "augmentation-oracles",
        passed,
        &format!(
            "build_mask mismatches {mask_mismatch} over 100 box sets; {} distinct preset filters, max blur error {blur_err:.2e}, max perturb error {perturb_err:.2e}",
            filters.len()
        ),
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// Learner numerics
// ---------------------------------------------------------------------------

/// Largest relative mismatch between analytic gradients and central
/// differences with step `h` over every parameter; near-zero pairs count as
/// matching.
fn fd_worst<P: Parameters<f64> + Clone>(params: &P, analytic: &P, h: f64, loss: impl Fn(&P) -> f64) -> (f64, usize) {
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = params.clone();
    for (ti, g) in grads.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let orig = probe.tensors()[ti].1[j];
            probe.tensors_mut()[ti].1[j] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[ti].1[j] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[ti].1[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-7 { 0.0 } else { (a - numeric).abs() / scale };
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

fn compensated_explanation_loss(map: &Maps<f64>, masks: &[&SaliencyMask]) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for (b, mask) in masks.iter().enumerate() {
        for (p, &m) in map.sample(b).iter().zip(mask.bits()) {
            let d = p - if m { 1.0 } else { 0.0 };
            let y = d * d - carry;
            let t = sum + y;
            carry = (t - sum) - y;
            sum = t;
        }
    }
    sum / (masks.len() * FRAME_LEN) as f64
}

fn transitions(rng: &mut ChaCha8Rng, n: usize, actions: usize, bootstrap: bool) -> Vec<PrioritizedTransition> {
    (0..n)
        .map(|_| PrioritizedTransition {
            state: random_state(rng),
            action: rng.random_range(0..actions),
            n_step_return: if rng.random_bool(0.3) { 1.0 } else { 0.0 },
            steps: 3,
            bootstrap_state: random_state(rng),
            bootstrap_valid: bootstrap && rng.random_bool(0.7),
            priority: 1.0,
        })
        .collect()
}

fn feedback_records(rng: &mut ChaCha8Rng, n: usize, actions: usize) -> Vec<FeedbackRecord> {
    (0..n)
        .map(|i| {
            let boxes = vec![BoundingBox {
                x: rng.random_range(0..60),
                y: rng.random_range(0..60),
                w: 12,
                h: 12,
            }];
            let label = if i % 2 == 0 { Label::Good } else { Label::Bad };
            FeedbackRecord::new(i, boxes, label, rng.random_range(0..actions), random_state(rng), None, FeedbackSource::Oracle).unwrap()
        })
        .collect()
}

fn fd_gradients() -> (bool, String) {
    let actions = Action::ALL.len();
    let spec = QNetworkSpec::tiny(actions);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut details = Vec::new();
    let mut ok = true;

    // DQN loss
    let online = QNetwork::<f64>::new(spec, &mut rng);
    let target = QNetwork::<f64>::new(spec, &mut rng);
    let batch = transitions(&mut rng, 4, actions, true);
    let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: Vec<&StackedState> = batch.iter().map(|t| &t.state).collect();
    let b: Vec<&StackedState> = batch.iter().map(|t| &t.bootstrap_state).collect();
    let (xs, xb) = (Maps::<f64>::from_states(&s), Maps::<f64>::from_states(&b));
    let mut grads = online.zeros_like();
    dqn_loss_and_grad(&online, &target, &xs, &xb, &batch, &weights, 0.99, &mut grads).unwrap();
    let (worst, n) = fd_worst(&online, &grads, 1e-6, |p| {
        let mut scratch = p.zeros_like();
        dqn_loss_and_grad(p, &target, &xs, &xb, &batch, &weights, 0.99, &mut scratch).unwrap().loss
    });
    ok &= worst <= FD_REL_TOL;
    details.push(format!("dqn {worst:.1e} ({n} params)"));

    // feedback loss with saliency augmentation (advantage + invariance)
    let plan = FeedbackPlan::for_algo(Algo::Expand, &LearnerConfig::new(actions)).unwrap();
    let records = feedback_records(&mut rng, 3, actions);
    let refs: Vec<&FeedbackRecord> = records.iter().collect();
    let states = feedback_states(&refs, &plan.augmenter, &mut rng);
    let state_refs: Vec<&StackedState> = states.iter().collect();
    let x = Maps::<f64>::from_states(&state_refs);
    let copies = plan.augmenter.copies();
    let mut grads = online.zeros_like();
    q_feedback_grads(&online, &x, &refs, copies, &plan, MARGIN, &mut grads).unwrap();
    let (worst, n) = fd_worst(&online, &grads, 1e-6, |p| {
        let mut scratch = p.zeros_like();
        q_feedback_grads(p, &x, &refs, copies, &plan, MARGIN, &mut scratch).unwrap().total
    });
    ok &= worst <= FD_REL_TOL;
    details.push(format!("feedback {worst:.1e} ({n} params)"));

    // explanation loss through the attention predictor
    let att = AttentionNet::<f64>::new(spec, &mut rng);
    let masks: Vec<&SaliencyMask> = refs.iter().map(|r| r.mask()).collect();
    let xo = Maps::<f64>::from_states(&refs.iter().map(|r| &r.state).collect::<Vec<_>>());
    let trace = att.forward(&xo);
    let (_, dmap) = explanation_loss_grad(&trace.map, &masks).unwrap();
    let mut agrads = att.zeros_like();
    att.backward(&trace, &dmap, &mut agrads);
    // the loss averages ~2e4 pixels and per-parameter gradients are ~1e-7,
    // so the probe recomputes it with compensated summation
    let (worst, n) = fd_worst(&att, &agrads, 1e-6, |p| compensated_explanation_loss(&p.predict(&xo), &masks));
    ok &= worst <= FD_REL_TOL;
    details.push(format!("explanation {worst:.1e} ({n} params)"));

    (ok, details.join(", "))
}

/// A fixed batch with terminal targets, fit by repeated Adam steps.
fn overfit_one_batch() -> (bool, String) {
    let actions = Action::ALL.len();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = QNetwork::<f32>::new(QNetworkSpec::standard(actions), &mut rng);
    let target = net.clone();
    let batch = transitions(&mut rng, 32, actions, false);
    let weights = vec![1.0; batch.len()];
    let s: Vec<&StackedState> = batch.iter().map(|t| &t.state).collect();
    let xs = Maps::<f32>::from_states(&s);
    let mut opt = Adam::new(1e-4);
    let mut loss = f64::INFINITY;
    let mut steps = 0;
    while steps < 500 {
        let mut grads = net.zeros_like();
        loss = dqn_loss_and_grad(&net, &target, &xs, &xs, &batch, &weights, 0.99, &mut grads).unwrap().loss;
        if loss < 1e-3 {
            break;
        }
        opt.step(&mut net, &grads).unwrap();
        steps += 1;
    }
    (loss < 1e-3, format!("loss {loss:.2e} after {steps} steps"))
}

fn chi_square(observed: &[f64], expected: &[f64]) -> (f64, f64) {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
    let critical = ChiSquared::new((observed.len() - 1) as f64).unwrap().inverse_cdf(1.0 - SIGNIFICANCE);
    (stat, critical)
}

fn sampling_tests() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    let mut details = Vec::new();

    // prioritized replay: draws follow p^alpha / sum p^alpha
    let alpha = 0.6;
    let mut replay = PrioritizedReplay::new(16, alpha, 1e-6);
    for t in transitions(&mut rng, 10, 6, false) {
        replay.push(t);
    }
    let priorities: Vec<f64> = (0..10).map(|i| 0.1 + 0.3 * i as f64).collect();
    for (i, &p) in priorities.iter().enumerate() {
        replay.set_priority(i, p);
    }
    let draws = 40_000;
    let sampled = replay.sample(draws, 0.4, &mut rng);
    let mut counts = vec![0.0; 10];
    for &i in &sampled.indices {
        counts[i] += 1.0;
    }
    let mass: f64 = priorities.iter().map(|p| p.powf(alpha)).sum();
    let expected: Vec<f64> = priorities.iter().map(|p| draws as f64 * p.powf(alpha) / mass).collect();
    let (stat, crit) = chi_square(&counts, &expected);
    ok &= stat < crit;
    details.push(format!("replay chi2 {stat:.1} < {crit:.1}"));
    // importance weights (N P)^-beta over the batch maximum
    let raw: Vec<f64> = sampled
        .indices
        .iter()
        .map(|&i| (10.0 * priorities[i].powf(alpha) / mass).powf(-0.4))
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let weight_err = raw
        .iter()
        .zip(&sampled.weights)
        .map(|(r, w)| (r / max - w).abs())
        .fold(0.0, f64::max);
    ok &= weight_err < 1e-9;
    details.push(format!("IS weight error {weight_err:.1e}"));

    // epsilon-greedy: epsilon / |A| everywhere plus 1 - epsilon on the argmax
    let q = [0.1f32, 0.4, 0.9, 0.3, -0.2, 0.0];
    for epsilon in [1.0, 0.3, 0.01] {
        let schedule = EpsilonSchedule {
            epsilon,
            ..EpsilonSchedule::new(0.99)
        };
        let n = 60_000;
        let mut counts = vec![0.0; 6];
        for _ in 0..n {
            counts[act(&q, &schedule, &mut rng)] += 1.0;
        }
        let expected: Vec<f64> = (0..6)
            .map(|a| n as f64 * (epsilon / 6.0 + if a == 2 { 1.0 - epsilon } else { 0.0 }))
            .collect();
        let (stat, crit) = chi_square(&counts, &expected);
        ok &= stat < crit;
        details.push(format!("eps {epsilon} chi2 {stat:.1} < {crit:.1}"));
    }
    (ok, details.join(", "))
}

#[test]
fn learner_numerics() {
    let (fd_ok, fd) = fd_gradients();
    let (fit_ok, fit) = overfit_one_batch();
    let (chi_ok, chi) = sampling_tests();
    let passed = fd_ok && fit_ok && chi_ok;
    report(
        "learner-numerics",
        passed,
        &format!("finite differences [{fd}] (tol {FD_REL_TOL:e}); overfit [{fit}]; sampling [{chi}]"),
    );
    assert!(fd_ok, "finite differences: {fd}");
    assert!(fit_ok, "overfit: {fit}");
    assert!(chi_ok, "sampling: {chi}");
}

// ---------------------------------------------------------------------------
// End-to-end criteria
// ---------------------------------------------------------------------------

const SWEEP_ENV: &str = "EXPAND_ACCEPTANCE_RUNS";
const SEEDS: u64 = 5;
const SWEEP_ALGOS: [Algo; 7] = [
    Algo::Expand,
    Algo::DqnFeedback,
    Algo::DqnOnly,
    Algo::ExpandNoInvariance,
    Algo::ExpandNoAugAdvantage,
    Algo::AugCrop,
    Algo::AugBlur,
];

fn steps_for(sweep: &std::collections::BTreeMap<String, Vec<Vec<EpisodeMetrics>>>, algo: Algo) -> Option<Vec<StepsToThreshold>> {
    let runs = sweep.get(algo.as_str())?;
    (runs.len() as u64 >= SEEDS).then(|| {
        runs.iter()
            .take(SEEDS as usize)
            .map(|m| steps_to_threshold(m, RETURN_THRESHOLD, RUNNING_WINDOW))
            .collect()
    })
}

/// Scores the three end-to-end criteria; missing algorithms are reported as
/// not run. The context-agnostic result is a finding, not a gate.
fn score_sweep(dir: &Path) -> Vec<(CriterionResult, bool)> {
    let sweep = load_sweep(dir).unwrap();
    let get = |a| steps_for(&sweep, a);
    let not_run = |name: &str, needs: &[Algo]| CriterionResult {
        name: name.into(),
        passed: false,
        detail: format!("not run: needs {SEEDS} seeds of {:?} under {}", needs.iter().map(|a| a.as_str()).collect::<Vec<_>>(), dir.display()),
    };
    let mut out = Vec::new();
    let eff = [Algo::Expand, Algo::DqnFeedback, Algo::DqnOnly];
    out.push((
        match (get(eff[0]), get(eff[1]), get(eff[2])) {
            (Some(e), Some(f), Some(d)) => efficiency_claim(&e, &f, &d, 0.2),
            _ => not_run("efficiency", &eff),
        },
        true,
    ));
    let abl = [Algo::Expand, Algo::ExpandNoInvariance, Algo::ExpandNoAugAdvantage, Algo::DqnFeedback];
    out.push((
        match (get(abl[0]), get(abl[1]), get(abl[2]), get(abl[3])) {
            (Some(e), Some(i), Some(a), Some(f)) => ablation_ordering(&e, &i, &a, &f),
            _ => not_run("ablation-ordering", &abl),
        },
        true,
    ));
    let ctx = [Algo::AugCrop, Algo::AugBlur, Algo::DqnFeedback];
    out.push((
        match (get(ctx[0]), get(ctx[1]), get(ctx[2])) {
            (Some(c), Some(b), Some(f)) => context_agnostic_negative(&c, &b, &f, 0.05),
            _ => not_run("context-agnostic-negative", &ctx),
        },
        false,
    ));
    out
}

fn print_and_gate(results: &[(CriterionResult, bool)]) -> Vec<String> {
    let mut gate_failures = Vec::new();
    for (r, gating) in results {
        let tag = if r.passed {
            "PASS"
        } else if r.detail.starts_with("not run") {
            "NOT RUN"
        } else if *gating {
            "FAIL"
        } else {
            "FINDING"
        };
        println!("[{tag}] {}: {}", r.name, r.detail);
        if *gating && !r.passed && !r.detail.starts_with("not run") {
            gate_failures.push(format!("{}: {}", r.name, r.detail));
        }
    }
    gate_failures
}

/// Scores a sweep produced elsewhere, e.g. by
/// `expand train --algo <a> --seeds 5 --out $EXPAND_ACCEPTANCE_RUNS` for
/// every algorithm above. Without the variable every criterion reports NOT RUN.
#[test]
fn end_to_end_from_existing_sweep() {
    let dir = std::env::var_os(SWEEP_ENV).map(PathBuf::from);
    let results = match &dir {
        Some(d) if d.is_dir() => score_sweep(d),
        _ => ["efficiency", "ablation-ordering", "context-agnostic-negative"]
            .iter()
            .map(|n| {
                (
                    CriterionResult {
                        name: n.to_string(),
                        passed: false,
                        detail: format!("not run: set {SWEEP_ENV} to a sweep directory or run the ignored sweep test"),
                    },
                    true,
                )
            })
            .collect(),
    };
    let failures = print_and_gate(&results);
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

/// Full protocol: default configuration (7x7 Pixel-Taxi, standard network,
/// synthetic oracle), five seeds for every compared algorithm. Completed
/// seeds under the output directory are reused, so the sweep can resume.
#[test]
#[ignore = "multi-hour training sweep"]
fn sweep_and_check_end_to_end() {
    let dir = std::env::var_os(SWEEP_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("target/acceptance-sweep"));
    for algo in SWEEP_ALGOS {
        let cfg = RunConfig {
            algo,
            seeds: (0..SEEDS).collect(),
            out: dir.clone(),
            ..RunConfig::default()
        };
        for seed in 0..SEEDS {
            let seed_dir = cfg.seed_dir(seed);
            let done = expand_core::orchestrator::metrics::read_metrics(&seed_dir.join("metrics.jsonl"))
                .map(|m| m.len() >= cfg.episodes)
                .unwrap_or(false);
            if done {
                continue;
            }
            if seed_dir.exists() {
                std::fs::remove_dir_all(&seed_dir).unwrap();
            }
            let mut oracle = OracleProvider {
                density: cfg.feedback_density,
            };
            run_experiment(&cfg, seed, &mut oracle, Some(&seed_dir)).unwrap();
        }
    }
    let failures = print_and_gate(&score_sweep(&dir));
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
