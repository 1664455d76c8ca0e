use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{synth_dataset, SynthSpec};
use crate::genome::{CellGenome, IdSource};
use crate::tensor::SgdState;

fn small_plan() -> ChannelPlan {
    ChannelPlan {
        in_channels: 3,
        height: 8,
        width: 8,
        stem_channels: 4,
        layers: vec![LayerPlan { channels: 4, stride: 1 }, LayerPlan { channels: 6, stride: 2 }],
        classes: 3,
    }
}

fn members(layers: usize, k: usize, seed: u64) -> Vec<Vec<Member>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = IdSource::new();
    (0..layers)
        .map(|_| {
            (0..k)
                .map(|_| Member::new(CellGenome::random(&mut rng, &mut ids), rng.random_range(-1.0..1.0), 0))
                .collect()
        })
        .collect()
}

/// Cells whose output depends on their input (no annihilating zero branch).
fn live_members(layers: usize, k: usize) -> Vec<Vec<Member>> {
    use crate::genome::{Aggregation, ChannelRatio, Genes, OperatorCode::*};
    let bodies = [
        [Conv1x1, DwConv3x3, Conv1x1, Zero, Zero, Zero],
        [Conv3x3, Identity, Identity, Identity, Identity, Identity],
        [Identity, DwConv3x3, Conv1x1, Conv1x1, Zero, Identity],
        [DwConv3x3, Conv1x1, Identity, Identity, Conv3x3, Identity],
    ];
    let mut ids = IdSource::new();
    (0..layers)
        .map(|l| {
            (0..k)
                .map(|i| {
                    let genes = Genes {
                        edges: bodies[(i + l) % bodies.len()],
                        ratio: ChannelRatio::ALL[i % 3],
                        agg: Aggregation::Add,
                    };
                    Member::new(CellGenome::new(genes, ids.fresh()), 0.4 * i as f64 - 0.5 * l as f64, 0)
                })
                .collect()
        })
        .collect()
}

fn batch(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..4 * 3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![4, 3, 8, 8], data).unwrap()
}

type NoRng = ChaCha8Rng;

fn logits(net: &Supernet<f64>, x: &Tensor<f64>, choice: PathChoice<'_, NoRng>) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let f = net.forward(&mut g, xv, BnMode::Batch, choice).unwrap();
    g.value(f.logits).to_vec()
}

#[test]
fn plan_shapes_follow_strides() {
    let plan = ChannelPlan::desk_default(3, 32, 32, 10);
    let shapes = plan.layer_shapes().unwrap();
    assert_eq!(shapes.len(), 6);
    assert_eq!(shapes[0], LayerShape::new(16, 16, 16, 16, 1));
    assert_eq!(shapes[2], LayerShape::new(16, 32, 8, 8, 1));
    assert_eq!(shapes[5], LayerShape::new(64, 64, 4, 4, 1));
    let mut bad = plan.clone();
    bad.height = 2;
    assert!(bad.layer_shapes().is_err());
}

#[test]
fn softmax_is_a_distribution() {
    let p = softmax(&[-3.0, 0.5, 700.0, 2.0]);
    assert!(p.iter().all(|&v| v >= 0.0));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn single_path_layer_is_the_cell() {
    let plan = small_plan();
    let sampled = members(2, 1, 1);
    let mut store = WeightStore::new(0);
    let net = assemble::<f64>(&sampled, &plan, &mut store, GateMode::FullSum, 0).unwrap();
    let x = batch(2);
    assert_eq!(logits(&net, &x, PathChoice::Mixture), logits(&net, &x, PathChoice::Fixed(&[0, 0])));
}

#[test]
fn mixture_matches_manual_recomputation() {
    let plan = ChannelPlan {
        layers: vec![LayerPlan { channels: 4, stride: 1 }],
        ..small_plan()
    };
    let sampled = members(1, 4, 3);
    let mut store = WeightStore::new(1);
    let net = assemble::<f64>(&sampled, &plan, &mut store, GateMode::FullSum, 0).unwrap();
    let x = batch(4);
    let mut g = Graph::new();
    let xv = g.input(x);
    let fwd = net.forward::<NoRng>(&mut g, xv, BnMode::Batch, PathChoice::Mixture).unwrap();
    // recompute the layer output by hand from the individual cells
    let stem = net.stem.forward(&mut g, xv, BnMode::Batch).unwrap();
    let p = net.layers[0].probabilities();
    let outs: Vec<Vec<f64>> = net.layers[0]
        .cells
        .iter()
        .map(|c| {
            let d = c.forward(&mut g, stem, BnMode::Batch).unwrap();
            g.value(d).to_vec()
        })
        .collect();
    let mixed: Vec<f64> = (0..outs[0].len()).map(|i| (0..4).map(|k| p[k] * outs[k][i]).sum()).collect();
    let mixed_t = g.input(Tensor::new(vec![4, 4, 4, 4], mixed).unwrap());
    let pooled = g.global_avg_pool(mixed_t).unwrap();
    let w = g.param(&net.head_w);
    let b = g.param(&net.head_b);
    let manual = g.linear(pooled, w, b).unwrap();
    for (a, b) in g.value(fwd.logits).iter().zip(g.value(manual)) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    // equal scores give the plain average
    let mut eq = sampled.clone();
    eq[0].iter_mut().for_each(|m| m.fitness = 0.3);
    let net = assemble::<f64>(&eq, &plan, &mut store, GateMode::FullSum, 0).unwrap();
    let mixed = logits(&net, &batch(4), PathChoice::Mixture);
    let avg: Vec<f64> = {
        let per: Vec<Vec<f64>> = (0..4).map(|k| logits(&net, &batch(4), PathChoice::Fixed(&[k]))).collect();
        // logits are affine in the layer output, so averaging them is equivalent
        (0..per[0].len()).map(|i| per.iter().map(|v| v[i]).sum::<f64>() / 4.0).collect()
    };
    for (a, b) in mixed.iter().zip(&avg) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn alpha_grad_examples() {
    let layer = MixedLayer::<f64> {
        cells: vec![],
        alpha: vec![0.0, 0.0],
        participation: vec![0, 0],
        gate_mode: GateMode::FullSum,
    };
    assert_eq!(layer.alpha_grad(&[1.0, 0.0], 10), vec![0.25, -0.25]);
    let three = MixedLayer::<f64> {
        alpha: vec![0.3, -1.0, 2.0],
        participation: vec![5, 1, 0],
        ..layer
    };
    assert!(three.alpha_grad(&[2.5, 2.5, 2.5], 10).iter().all(|g| g.abs() < 1e-15));
    let raw = softmax_backward(&three.probabilities(), &[1.0, -2.0, 0.5]);
    let scaled = three.alpha_grad(&[1.0, -2.0, 0.5], 10);
    assert_eq!(scaled[0], raw[0] * 2.0);
    assert_eq!(scaled[1], raw[1] * 10.0);
    assert_eq!(scaled[2], raw[2]);
    for (r, s) in raw.iter().zip(&scaled) {
        assert_eq!(r.signum(), s.signum());
    }
}

fn loss_at(net: &Supernet<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let f = net.forward::<NoRng>(&mut g, xv, BnMode::Batch, PathChoice::Mixture).unwrap();
    let l = g.softmax_cross_entropy(f.logits, labels).unwrap();
    g.value(l)[0]
}

#[test]
fn alpha_grad_matches_finite_differences() {
    let plan = small_plan();
    let sampled = live_members(2, 3);
    let mut store = WeightStore::new(2);
    let mut net = assemble::<f64>(&sampled, &plan, &mut store, GateMode::FullSum, 0).unwrap();
    let x = batch(6);
    let labels = [0, 1, 2, 1];
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let f = net.forward::<NoRng>(&mut g, xv, BnMode::Batch, PathChoice::Mixture).unwrap();
    let l = g.softmax_cross_entropy(f.logits, &labels).unwrap();
    let grads = g.backward(l).unwrap();
    let gg = f.gate_grads(&grads);
    let h = 1e-5;
    for l in 0..2 {
        let analytic = net.layers[l].alpha_grad(&gg[l], 0);
        for i in 0..3 {
            let a0 = net.layers[l].alpha[i];
            net.layers[l].alpha[i] = a0 + h;
            let up = loss_at(&net, &x, &labels);
            net.layers[l].alpha[i] = a0 - h;
            let down = loss_at(&net, &x, &labels);
            net.layers[l].alpha[i] = a0;
            let fd = (up - down) / (2.0 * h);
            assert!(fd.abs() > 1e-6, "degenerate check: layer {l} path {i}");
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs());
            assert!(rel < 1e-4, "layer {l} path {i}: fd {fd} analytic {}", analytic[i]);
        }
    }
}

fn synth() -> crate::data::DataSplits {
    synth_dataset(&SynthSpec::new(3, 20, 8, 8, 11)).unwrap()
}

#[test]
fn training_counts_and_freezes() {
    let data = synth();
    let plan = small_plan();
    let sampled = members(2, 3, 7);
    let mut store = WeightStore::<f32>::new(3);
    let mut net = assemble(&sampled, &plan, &mut store, GateMode::FullSum, 0).unwrap();
    assert_eq!(
        net.extract_alphas()[1].iter().map(|a| a.1).collect::<Vec<_>>(),
        sampled[1].iter().map(|m| m.fitness).collect::<Vec<_>>()
    );
    let mut batches = Batches::new(data.train.len(), 8, 0).unwrap();
    let mut opt = SgdState::new(0.9, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = StepSettings {
        steps: 3,
        lr: 0.05,
        alpha_lr: 0.0,
        lambda: 0.0,
    };
    let before = net.extract_alphas();
    let losses = net.train_steps(&data.train, &mut batches, &mut opt, &s, &mut rng).unwrap();
    assert_eq!(losses.len(), 3);
    assert_eq!(net.extract_alphas(), before);
    assert_eq!(net.iterations, 3);
    assert!(net.layers.iter().all(|l| l.participation == vec![3, 3, 3]));
    let zero = StepSettings { steps: 0, ..s };
    assert!(net.train_steps(&data.train, &mut batches, &mut opt, &zero, &mut rng).is_err());
}

#[test]
fn binary_gate_counts_only_sampled_paths() {
    let data = synth();
    let sampled = members(2, 3, 8);
    let mut store = WeightStore::<f32>::new(4);
    let mut net = assemble(&sampled, &small_plan(), &mut store, GateMode::BinaryGate, 0).unwrap();
    let mut batches = Batches::new(data.train.len(), 8, 0).unwrap();
    let mut opt = SgdState::new(0.9, 0.0);
    let s = StepSettings {
        steps: 5,
        lr: 0.05,
        alpha_lr: 0.1,
        lambda: 0.0,
    };
    net.train_steps(&data.train, &mut batches, &mut opt, &s, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    for l in &net.layers {
        assert_eq!(l.participation.iter().sum::<u64>(), 5);
    }
}

#[test]
fn loss_decreases_on_separable_data() {
    let data = synth();
    let sampled = members(2, 2, 9);
    let mut store = WeightStore::<f32>::new(5);
    let mut net = assemble(&sampled, &small_plan(), &mut store, GateMode::FullSum, 0).unwrap();
    let mut batches = Batches::new(data.train.len(), 12, 0).unwrap();
    let mut opt = SgdState::new(0.9, 0.0);
    let s = StepSettings {
        steps: 60,
        lr: 0.05,
        alpha_lr: 1e-3,
        lambda: 0.0,
    };
    let losses = net
        .train_steps(&data.train, &mut batches, &mut opt, &s, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn regeneration_inherits_weights() {
    let data = synth();
    let sampled = members(2, 3, 10);
    let mut store = WeightStore::<f32>::new(6);
    let mut net = assemble(&sampled, &small_plan(), &mut store, GateMode::FullSum, 0).unwrap();
    let keys_1: Vec<String> = store.keys().map(String::from).collect();
    let id = sampled[0][0].id().0;
    let key = format!("L0/G{id}/in.conv.w");
    let mut batches = Batches::new(data.train.len(), 8, 0).unwrap();
    let mut opt = SgdState::new(0.9, 0.0);
    let s = StepSettings {
        steps: 2,
        lr: 0.05,
        alpha_lr: 0.0,
        lambda: 0.0,
    };
    net.train_steps(&data.train, &mut batches, &mut opt, &s, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let trained = store.get(&key).unwrap().borrow().data().to_vec();
    drop(net);

    // a different sample in between, then the first one again
    let other = members(2, 3, 99);
    let renumbered: Vec<Vec<Member>> = other
        .into_iter()
        .map(|l| {
            l.into_iter()
                .map(|mut m| {
                    m.genome.id = GenomeId(m.genome.id.0 + 1000);
                    m
                })
                .collect()
        })
        .collect();
    assemble(&renumbered, &small_plan(), &mut store, GateMode::FullSum, 2).unwrap();
    let keys_2: Vec<String> = store.keys().map(String::from).collect();
    assert!(keys_1.iter().all(|k| keys_2.contains(k)));
    let again = assemble(&sampled, &small_plan(), &mut store, GateMode::FullSum, 2).unwrap();
    assert!(std::rc::Rc::ptr_eq(&again.layers[0].cells[0].expand_weight(), &store.get(&key).unwrap()));
    assert_eq!(store.get(&key).unwrap().borrow().data(), trained.as_slice());
}

#[test]
fn count_correct_uses_argmax() {
    assert_eq!(count_correct(&[0.1f32, 0.9, 0.8, 0.2], &[1, 1]), 1);
}
