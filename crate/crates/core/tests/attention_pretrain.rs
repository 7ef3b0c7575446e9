//! Supervised pretraining of the standalone attention predictor on oracle
//! masks, scored by thresholded IoU on held-out Pixel-Taxi states.

use expand_core::augment::{build_mask, SaliencyMask};
use expand_core::baselines::{explanation_loss_grad, map_iou};
use expand_core::env::taxi::{reset, step};
use expand_core::env::{Action, TaxiConfig, TaxiState};
use expand_core::nn::{Adam, AttentionNet, Maps, QNetworkSpec};
use expand_core::oracle::{oracle_action, saliency_boxes};
use expand_core::state::{preprocess, StackedState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN: usize = 1000;
const HELD_OUT: usize = 200;
const BATCH: usize = 20;
const MAX_EPOCHS: usize = 80;

/// A state part-way through an episode: a random mix of scripted and
/// random moves, so both pickup and delivery phases appear.
fn sample_state(cfg: &TaxiConfig, layout: u64, rng: &mut ChaCha8Rng) -> (StackedState, SaliencyMask) {
    let (mut taxi, raw) = reset(cfg, layout).unwrap();
    let mut stack = StackedState::reset(preprocess(&raw));
    let moves = rng.random_range(0..24);
    for _ in 0..moves {
        let scripted = oracle_action(&taxi);
        let action = match scripted {
            Some(a) if rng.random_bool(0.6) => a,
            _ => Action::ALL[rng.random_range(0..4)],
        };
        let (next, out) = step(&taxi, action).unwrap();
        if out.terminal {
            break;
        }
        stack = stack.push_frame(preprocess(&out.frame));
        taxi = next;
    }
    let mask = mask_of(&taxi);
    (stack, mask)
}

fn mask_of(taxi: &TaxiState) -> SaliencyMask {
    build_mask(&saliency_boxes(taxi))
}

fn dataset(cfg: &TaxiConfig, layouts: std::ops::Range<u64>, rng: &mut ChaCha8Rng) -> Vec<(StackedState, SaliencyMask)> {
    layouts.map(|l| sample_state(cfg, l, rng)).collect()
}

fn mean_iou(net: &AttentionNet<f32>, data: &[(StackedState, SaliencyMask)]) -> f64 {
    let mut total = 0.0;
    for chunk in data.chunks(50) {
        let states: Vec<&StackedState> = chunk.iter().map(|(s, _)| s).collect();
        let maps = net.predict(&Maps::from_states(&states));
        for (b, (_, mask)) in chunk.iter().enumerate() {
            total += map_iou(&maps.sample(b), mask);
        }
    }
    total / data.len() as f64
}

#[test]
fn attention_net_learns_oracle_masks() {
    let cfg = TaxiConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train = dataset(&cfg, 0..TRAIN as u64, &mut rng);
    let held_out = dataset(&cfg, 1_000_000..1_000_000 + HELD_OUT as u64, &mut rng);

    let mut net = AttentionNet::<f32>::new(QNetworkSpec::standard(Action::ALL.len()), &mut rng);
    let mut opt = Adam::new(1e-3);
    let mut order: Vec<usize> = (0..TRAIN).collect();
    let mut iou = mean_iou(&net, &held_out);
    for epoch in 0..MAX_EPOCHS {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut loss = 0.0;
        for idx in order.chunks(BATCH) {
            let states: Vec<&StackedState> = idx.iter().map(|&i| &train[i].0).collect();
            let masks: Vec<&SaliencyMask> = idx.iter().map(|&i| &train[i].1).collect();
            let trace = net.forward(&Maps::from_states(&states));
            let (l, dmap) = explanation_loss_grad(&trace.map, &masks).unwrap();
            let mut grads = net.zeros_like();
            net.backward(&trace, &dmap, &mut grads);
            opt.step(&mut net, &grads).unwrap();
            loss += l;
        }
        iou = mean_iou(&net, &held_out);
        println!("epoch {epoch}: train loss {:.5}, held-out IoU {iou:.4}", loss / (TRAIN / BATCH) as f64);
        if iou >= 0.9 {
            break;
        }
    }
    assert!(iou >= 0.9, "held-out IoU {iou:.4} < 0.9");
}
