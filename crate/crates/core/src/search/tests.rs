use super::*;
use crate::data::{synth_dataset, SynthSpec};
use crate::genome::{Aggregation, ChannelRatio, GenomeId, OperatorCode::*};
use crate::population::SpaceCell;
use crate::supernet::LayerPlan;

fn plan() -> ChannelPlan {
    ChannelPlan {
        in_channels: 3,
        height: 8,
        width: 8,
        stem_channels: 4,
        layers: vec![LayerPlan { channels: 4, stride: 1 }, LayerPlan { channels: 8, stride: 2 }],
        classes: 3,
    }
}

fn meta() -> SpaceMeta {
    SpaceMeta {
        seed: 0,
        iterations: 0,
        config_hash: "h".into(),
        tool_version: "t".into(),
    }
}

fn genes(edges: [crate::genome::OperatorCode; 6], ratio: ChannelRatio) -> Genes {
    Genes {
        edges,
        ratio,
        agg: Aggregation::Add,
    }
}

fn space(per_layer: &[Genes]) -> SearchSpace {
    let mut id = 0;
    let layers = (0..2)
        .map(|_| {
            per_layer
                .iter()
                .map(|g| {
                    id += 1;
                    SpaceCell {
                        genome: CellGenome::new(*g, GenomeId(id)),
                        fitness: 0.0,
                    }
                })
                .collect()
        })
        .collect();
    SearchSpace { layers, meta: meta() }
}

fn data() -> DataSplits {
    synth_dataset(&SynthSpec::new(3, 20, 8, 8, 4)).unwrap()
}

#[test]
fn total_madds_of_io_only_network() {
    let p = plan();
    let zero = genes([Zero; 6], ChannelRatio::R1);
    // stem 9*3*4*4*4, layer 0 io 2*(4*4*16), layer 1 at 2x2: 4*4*4 + 4*8*4, head 8*3
    let expect = 1728 + 512 + (64 + 128) + 24;
    assert_eq!(total_madds(&[zero, zero], &p).unwrap(), expect);
    let mut big = p.clone();
    big.height = 16;
    big.width = 16;
    let head = p.head_madds();
    assert_eq!(total_madds(&[zero, zero], &big).unwrap() - head, 4 * (expect - head));
    assert!(total_madds(&[zero], &p).is_err());
}

#[test]
fn architecture_json_round_trip() {
    let p = plan();
    let arch = Architecture::new(
        vec![
            CellGenome::new(Genes::INVERTED_RESIDUAL, GenomeId(0)),
            CellGenome::new(genes([Conv3x3; 6], ChannelRatio::R3), GenomeId(1)),
        ],
        &p,
    )
    .unwrap();
    let text = arch.to_json(&meta());
    let (back, m) = Architecture::from_json(text.as_bytes(), &p).unwrap();
    assert_eq!(back, arch);
    assert_eq!(m, meta());
    assert_eq!(back.to_json(&m), text);
    let tampered = text.replace(&format!("\"total_madds\": {}", arch.total_madds), "\"total_madds\": 1");
    assert!(Architecture::from_json(tampered.as_bytes(), &p).is_err());
}

#[test]
fn penalty_decomposes_and_vanishes_at_zero_lambda() {
    let sp = space(&[Genes::INVERTED_RESIDUAL, genes([Conv3x3, Identity, Zero, Conv1x1, Zero, Zero], ChannelRatio::R3)]);
    let members = space_members(&sp).unwrap();
    let mut store = WeightStore::<f64>::new(0);
    let mut net = assemble(&members, &plan(), &mut store, GateMode::FullSum, 0).unwrap();
    net.layers[0].alpha = vec![0.3, -0.2];
    let d = data();
    let (x, labels) = d.train.batch::<f64>(&(0..6).collect::<Vec<_>>());
    let base = objective(&net, &x, &labels, 0.0).unwrap();
    let lambda = 1e-7;
    let reg = objective(&net, &x, &labels, lambda).unwrap();
    assert!((reg.total - base.total - lambda * net.expected_madds()).abs() < 1e-9);
    assert!(net.penalty_grad(0.0).iter().flatten().all(|&g| g == 0.0));

    // uniform scores: per-layer mean of the cell costs plus the fixed part
    net.layers[0].alpha = vec![0.0, 0.0];
    let fixed = (plan().stem_madds() + plan().head_madds()) as f64;
    let mean: f64 = net
        .layers
        .iter()
        .map(|l| l.costs().iter().sum::<u64>() as f64 / 2.0)
        .sum();
    assert!((net.expected_madds() - fixed - mean).abs() < 1e-6);
}

#[test]
fn heavy_penalty_picks_the_cheaper_twin() {
    // same operators, ratio 1 vs ratio 6
    let body = [Conv1x1, DwConv3x3, Conv1x1, Zero, Zero, Zero];
    let sp = space(&[genes(body, ChannelRatio::R6), genes(body, ChannelRatio::R1)]);
    let cfg = SearchConfig {
        lambda: 1e-3,
        epochs: 2,
        batch_size: 12,
        ..SearchConfig::default()
    };
    let mut store = WeightStore::new(1);
    let out = gradient_search(&sp, &data(), &plan(), &cfg, &mut store).unwrap();
    assert_eq!(out.paths, vec![1, 1]);
    assert!(out.arch.cells.iter().all(|c| c.genes.ratio == ChannelRatio::R1));
}

#[test]
fn random_search_budget_and_determinism() {
    let sp = space(&[Genes::INVERTED_RESIDUAL, genes([Conv3x3, Zero, Zero, Identity, Zero, Zero], ChannelRatio::R1)]);
    let cfg = SearchConfig {
        algo: SearchAlgo::Random,
        epochs: 1,
        batch_size: 12,
        candidates: 4,
        ..SearchConfig::default()
    };
    let d = data();
    let (a, evals) = random_search(&sp, &d, &plan(), &cfg, &mut WeightStore::new(2)).unwrap();
    assert_eq!(evals.len(), 4);
    let best = evals.iter().map(|c| c.accuracy).fold(0.0, f64::max);
    assert_eq!(evals.iter().find(|c| c.paths == a.paths).unwrap().accuracy, best);
    let (b, _) = random_search(&sp, &d, &plan(), &cfg, &mut WeightStore::new(2)).unwrap();
    assert_eq!(a, b);
    let tight = SearchConfig {
        budget: Some(10),
        ..cfg
    };
    let err = random_search(&sp, &d, &plan(), &tight, &mut WeightStore::new(2)).unwrap_err();
    assert!(matches!(err, Error::BudgetInfeasible { min_madds } if min_madds > 10));
}

#[test]
fn enumeration_is_lexicographic() {
    let all = enumerate_paths(3, 2);
    assert_eq!(all.len(), 9);
    assert_eq!(all[0], vec![0, 0]);
    assert_eq!(all[5], vec![1, 2]);
}

#[test]
fn untrained_final_model_is_at_chance() {
    let d = data();
    let arch = Architecture::new(vec![CellGenome::new(Genes::INVERTED_RESIDUAL, GenomeId(0)); 2], &plan()).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let r = train_final(&arch, &plan(), &d, &cfg).unwrap();
    assert!((0.0..=1.0).contains(&r.accuracy));
    // binomial 3 sigma around 1/3 on 12 validation images
    let sigma = (12.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt() / 12.0;
    assert!((r.accuracy - 1.0 / 3.0).abs() <= 3.0 * sigma, "{}", r.accuracy);
    assert!(r.epochs.is_empty());
}

#[test]
fn rank_report_is_deterministic() {
    let cfg = RankConfig {
        depths: vec![1, 2],
        width: 4,
        data: crate::data::RelationalSpec {
            per_class: 20,
            height: 4,
            width: 8,
            max_offset: 4,
            noise: 0.05,
            seed: 1,
        },
        standalone_epochs: 1,
        max_epochs: 2,
        seeds: vec![3, 4],
        batch_size: 8,
        ..RankConfig::default()
    };
    let a = rank_test(&cfg).unwrap();
    assert_eq!(a, rank_test(&cfg).unwrap());
    assert_eq!(a.standalone.len(), 2);
    if a.valid {
        assert_eq!(a.rows.len(), 2);
    }
    let csv = a.to_csv("p");
    assert!(csv.contains("seed,alpha1,alpha2,rank_epoch"));
}
