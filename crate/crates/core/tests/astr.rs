mod common;

use common::{rand_tensor, rng};
use mire::astr::*;
use mire::nets::{MireNets, NetConfig};
use mire::pipeline::astr_objective;
use mire::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn topo_from(rows: Vec<Vec<f64>>) -> SemanticTopology {
    SemanticTopology::from_anchors(0, Tensor::from_rows(&rows).unwrap())
}

fn small_nets(dim: usize) -> MireNets {
    let mut cfg = NetConfig::new(2, None);
    cfg.feature_dim = dim;
    cfg.channels = [4, 4, 4];
    MireNets::new(cfg, 5).unwrap()
}

#[test]
fn one_sample_per_class_gives_exact_anchors() {
    let f = Tensor::from_rows(&[vec![0.3, -1.2, 2.5], vec![1.0 / 3.0, 7.0, -0.1]]).unwrap();
    let t = init_topology(2, &f, &[1, 0], 2).unwrap();
    assert_eq!(t.anchors.row(0), f.row(1));
    assert_eq!(t.anchors.row(1), f.row(0));
    assert_eq!(t.iteration, 0);
    assert!(t.prev_anchors.is_none());
}

#[test]
fn empty_class_cell_is_rejected() {
    let f = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    assert!(matches!(init_topology(0, &f, &[0, 0], 2), Err(mire::MireError::Contract(_))));
}

#[test]
fn rbf_edge_values() {
    let same = rbf_adjacency(&Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(), 0.7);
    assert_eq!(same.at2(0, 1), 1.0);
    let a = rbf_adjacency(&Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap(), 0.5);
    assert!((a.at2(0, 1) - (-1.0f64).exp()).abs() < 1e-10);
    assert!((a.at2(0, 1) - 0.367879).abs() < 1e-6);
}

#[test]
fn aggregation_with_unit_phi_is_identity() {
    let t = topo_from(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 1.0]]);
    let f = [0.4, -2.0];
    let (out, _) = aggregate_one(&f, 1, &t, 1.0, true).unwrap();
    assert_eq!(out, f.to_vec());
}

#[test]
fn aggregation_single_class() {
    let t = topo_from(vec![vec![2.0, -1.0]]);
    let f = [0.5, 3.0];
    let (out, w) = aggregate_one(&f, 0, &t, 0.5, true).unwrap();
    assert_eq!(w, vec![1.0]);
    assert!((out[0] - (0.25 + 1.0)).abs() < 1e-15);
    assert!((out[1] - (1.5 - 0.5)).abs() < 1e-15);
}

#[test]
fn aggregation_symmetric_weights() {
    // f bisects two orthogonal anchors; without the graph term the scores tie.
    let t = topo_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let (_, w) = aggregate_one(&[1.0, 1.0], 0, &t, 0.5, false).unwrap();
    assert_eq!(w, vec![0.5, 0.5]);
    let same = topo_from(vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
    let (_, w) = aggregate_one(&[3.0, -1.0], 1, &same, 0.5, true).unwrap();
    assert_eq!(w, vec![0.5, 0.5]);
}

#[test]
fn aggregation_matches_softmax_oracle() {
    let mut r = rng(41);
    for trial in 0..20 {
        let anchors = rand_tensor(&mut r, &[4, 6], -1.0, 1.0);
        let t = SemanticTopology::from_anchors(0, anchors.clone());
        let f = rand_tensor(&mut r, &[6], -1.0, 1.0).into_data();
        let k = trial % 4;
        let (out, w) = aggregate_one(&f, k, &t, 0.5, true).unwrap();
        let scores: Vec<f64> = (0..4).map(|j| (t.adjacency.at2(k, j) + cos(&f, anchors.row(j))) / 2.0).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..4 {
            assert!((w[j] - scores[j].exp() / z).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for d in 0..6 {
            let pulled: f64 = (0..4).map(|j| w[j] * anchors.at2(j, d)).sum();
            assert!((out[d] - (0.5 * f[d] + 0.5 * pulled)).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregation_rejects_bad_class() {
    let t = topo_from(vec![vec![1.0], vec![2.0]]);
    assert!(aggregate_one(&[1.0], 2, &t, 0.5, true).is_err());
}

#[test]
fn moving_average_examples() {
    let mut t = topo_from(vec![vec![1.0, 2.0], vec![-3.0, 0.5]]);
    let local = t.anchors.clone();
    update_anchors(&mut t, &local, &[0, 1], &[0, 0], 0.5).unwrap();
    assert_eq!(t.anchors, local);
    assert_eq!(t.iteration, 1);

    let mut t = topo_from(vec![vec![0.0], vec![0.0]]);
    let before = t.anchors.row(1).to_vec();
    update_anchors(&mut t, &Tensor::from_rows(&[vec![2.0]]).unwrap(), &[0], &[0], 0.5).unwrap();
    assert_eq!(t.anchors.row(0), &[1.0]);
    assert_eq!(t.anchors.row(1).iter().map(|v| v.to_bits()).collect::<Vec<_>>(), before.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(t.prev_anchors.unwrap().row(0), &[0.0]);
}

#[test]
fn moving_average_rejects_foreign_domain() {
    let mut t = topo_from(vec![vec![0.0], vec![1.0]]);
    let f = Tensor::from_rows(&[vec![2.0]]).unwrap();
    assert!(matches!(update_anchors(&mut t, &f, &[0], &[3], 0.5), Err(mire::MireError::Contract(_))));
}

#[test]
fn moving_average_contracts_geometrically() {
    let mut r = rng(9);
    let phi = 0.5;
    let start = rand_tensor(&mut r, &[3, 5], -2.0, 2.0);
    let target = rand_tensor(&mut r, &[3, 5], -2.0, 2.0);
    let mut t = SemanticTopology::from_anchors(0, start.clone());
    let dist = |a: &Tensor| {
        a.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let d0 = dist(&start);
    for i in 1..=10 {
        update_anchors(&mut t, &target, &[0, 1, 2], &[0, 0, 0], phi).unwrap();
        let expected = (1.0 - phi).powi(i) * d0;
        assert!((dist(&t.anchors) - expected).abs() < 1e-9);
    }
}

fn advanced(prev: Vec<Vec<f64>>, cur: Vec<Vec<f64>>) -> SemanticTopology {
    let mut t = topo_from(prev);
    t.advance(Tensor::from_rows(&cur).unwrap());
    t
}

#[test]
fn bipartite_with_static_anchors_is_cross_cosine() {
    let a = advanced(vec![vec![1.0, 2.0], vec![0.0, 1.0]], vec![vec![1.0, 2.0], vec![0.0, 1.0]]);
    let b = advanced(vec![vec![3.0, -1.0], vec![1.0, 1.0]], vec![vec![3.0, -1.0], vec![1.0, 1.0]]);
    let g = build_bipartite(&a, &b, true).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((g.at2(i, j) - cos(a.anchors.row(i), b.anchors.row(j))).abs() < 1e-12);
        }
    }
}

#[test]
fn bipartite_orthogonal_anchors_give_zero() {
    let a = advanced(vec![vec![1.0, 0.2], vec![1.0, 1.0]], vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
    let b = advanced(vec![vec![0.3, 1.0], vec![2.0, 1.0]], vec![vec![0.0, 1.0], vec![2.0, 1.0]]);
    assert_eq!(build_bipartite(&a, &b, true).unwrap().at2(0, 0), 0.0);
}

#[test]
fn bipartite_matches_three_cosine_oracle() {
    let mut r = rng(13);
    for _ in 0..10 {
        let mut a = SemanticTopology::from_anchors(0, rand_tensor(&mut r, &[3, 4], -1.0, 1.0));
        let mut b = SemanticTopology::from_anchors(1, rand_tensor(&mut r, &[3, 4], -1.0, 1.0));
        a.advance(rand_tensor(&mut r, &[3, 4], -1.0, 1.0));
        b.advance(rand_tensor(&mut r, &[3, 4], -1.0, 1.0));
        let g = build_bipartite(&a, &b, true).unwrap();
        let (pa, pb) = (a.prev_anchors.as_ref().unwrap(), b.prev_anchors.as_ref().unwrap());
        for i in 0..3 {
            for j in 0..3 {
                let want = 0.5
                    * (cos(pa.row(i), a.anchors.row(i)) + cos(pb.row(j), b.anchors.row(j)))
                    * cos(a.anchors.row(i), b.anchors.row(j));
                assert!((g.at2(i, j) - want).abs() < 1e-12);
            }
        }
        let plain = build_bipartite(&a, &b, false).unwrap();
        assert!((plain.at2(1, 2) - cos(a.anchors.row(1), b.anchors.row(2))).abs() < 1e-12);
    }
}

#[test]
fn bipartite_requires_matching_iterations() {
    let a = advanced(vec![vec![1.0], vec![2.0]], vec![vec![1.0], vec![3.0]]);
    let b = topo_from(vec![vec![1.0], vec![2.0]]);
    assert!(matches!(build_bipartite(&a, &b, true), Err(mire::MireError::Contract(_))));
    assert!(build_bipartite(&b, &b, true).is_err());
}

#[test]
fn bipartite_block_layout() {
    let tape = Tape::new();
    let aff = tape.constant(Tensor::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.9]]).unwrap());
    let blk = tape.value(bipartite_block(&tape, aff).unwrap());
    assert_eq!(blk.shape(), &[4, 4]);
    assert_eq!(blk.at2(0, 2), 0.5);
    assert_eq!(blk.at2(0, 3), 0.0);
    assert_eq!(blk.at2(3, 0), 0.0);
    assert_eq!(blk.at2(2, 1), 0.1);
    assert_eq!(blk.at2(1, 1), 0.0);
}

fn ccr_value(rows: Vec<Vec<f64>>, xi: f64) -> f64 {
    let tape = Tape::new();
    let z = tape.constant(Tensor::from_rows(&rows).unwrap());
    tape.value(ccr_loss(&tape, z, xi).unwrap()).item()
}

#[test]
fn ccr_examples() {
    assert_eq!(ccr_value(vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 0.0], vec![3.0, 0.0]], 2.0), 0.0);
    assert!((ccr_value(vec![vec![1.0, 2.0], vec![0.0, -1.0]], 2.0) - 10.0).abs() < 1e-12);
    assert!((ccr_value(vec![vec![0.0]; 4], 2.0) - 4.0).abs() < 1e-12);
}

#[test]
fn ccr_rejects_odd_rows() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(ccr_loss(&tape, z, 2.0), Err(mire::MireError::Contract(_))));
}

/// Loss of every pair, evaluated through `pair_loss`, plus the mean `astr_loss`.
fn pair_and_mean(nets: &MireNets, topos: &[SemanticTopology], cur: &[Tensor], cfg: &AstrConfig) -> (Vec<f64>, f64) {
    let tape = Tape::new();
    let bound = nets.bind(&tape, false);
    let layers: Vec<_> = nets.bgcn.layers.iter().map(|&id| bound.var(id)).collect();
    let vars: Vec<_> = cur.iter().map(|c| tape.constant(c.clone())).collect();
    let prev: Vec<&Tensor> = topos.iter().map(|t| &t.anchors).collect();
    let pairs: Vec<f64> = domain_pairs(cur.len(), true)
        .into_iter()
        .map(|(a, b)| {
            let l = pair_loss(&tape, &layers, (vars[a], vars[b]), (prev[a], prev[b]), cfg).unwrap();
            tape.value(l).item()
        })
        .collect();
    let mean = astr_loss(&tape, &bound, &nets.bgcn, &vars, &prev, cfg).unwrap();
    (pairs, tape.value(mean).item())
}

#[test]
fn loss_over_pairs_is_the_pair_mean() {
    let nets = small_nets(4);
    let mut r = rng(21);
    let cfg = AstrConfig::default();
    let topos: Vec<_> = (0..3).map(|d| SemanticTopology::from_anchors(d, rand_tensor(&mut r, &[2, 4], -1.0, 1.0))).collect();
    let cur: Vec<_> = (0..3).map(|_| rand_tensor(&mut r, &[2, 4], -1.0, 1.0)).collect();
    let (pairs, mean) = pair_and_mean(&nets, &topos, &cur, &cfg);
    assert_eq!(pairs.len(), 3);
    assert!((mean - pairs.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    let (pairs, mean) = pair_and_mean(&nets, &topos[..2], &cur[..2], &cfg);
    assert_eq!(pairs.len(), 1);
    assert_eq!(mean, pairs[0]);
}

#[test]
fn loss_needs_two_domains() {
    let nets = small_nets(4);
    let tape = Tape::new();
    let bound = nets.bind(&tape, false);
    let c = Tensor::zeros(&[2, 4]);
    let v = tape.constant(c.clone());
    assert!(astr_loss(&tape, &bound, &nets.bgcn, &[v], &[&c], &AstrConfig::default()).is_err());
}

struct Instance {
    nets: MireNets,
    images: Tensor,
    ys: Vec<usize>,
    slots: Vec<usize>,
    topos: Vec<SemanticTopology>,
}

fn instance() -> Instance {
    let mut r = rng(3);
    let nets = small_nets(4);
    let images = rand_tensor(&mut r, &[4, 3, 8, 8], 0.0, 1.0);
    let topos = (0..2)
        .map(|d| SemanticTopology::from_anchors(d, rand_tensor(&mut r, &[2, 4], -1.0, 1.0)))
        .collect();
    Instance {
        nets,
        images,
        ys: vec![0, 1, 1, 0],
        slots: vec![0, 0, 1, 1],
        topos,
    }
}

fn total_loss(inst: &Instance, nets: &MireNets, cfg: &AstrConfig) -> f64 {
    let tape = Tape::new();
    let bound = nets.bind(&tape, false);
    let x = tape.constant(inst.images.clone());
    let obj = astr_objective(&tape, &bound, nets, x, &inst.ys, &inst.slots, &inst.topos, cfg).unwrap();
    tape.value(obj.total).item()
}

#[test]
fn zero_weight_adds_nothing_to_objective() {
    let inst = instance();
    let cfg = AstrConfig {
        lambda: 0.0,
        ..AstrConfig::default()
    };
    let tape = Tape::new();
    let bound = inst.nets.bind(&tape, false);
    let x = tape.constant(inst.images.clone());
    let obj = astr_objective(&tape, &bound, &inst.nets, x, &inst.ys, &inst.slots, &inst.topos, &cfg).unwrap();
    assert!(tape.value(obj.loss_ccr).item() > 0.0);
    assert_eq!(tape.value(obj.total).item().to_bits(), tape.value(obj.loss_cls).item().to_bits());
}

#[test]
fn full_objective_matches_finite_differences() {
    let inst = instance();
    let cfg = AstrConfig::default();
    let tape = Tape::new();
    let bound = inst.nets.bind(&tape, true);
    let x = tape.constant(inst.images.clone());
    let obj = astr_objective(&tape, &bound, &inst.nets, x, &inst.ys, &inst.slots, &inst.topos, &cfg).unwrap();
    let grads = tape.backward(obj.total).unwrap();
    let mut analytic_nets = inst.nets.clone();
    analytic_nets.store.accumulate(&bound, &grads);
    analytic_nets.store.fill_missing_grads();

    let h = 1e-6;
    let (mut diff2, mut norm2) = (0.0, 0.0);
    let mut probe = inst.nets.clone();
    let ids: Vec<_> = (0..inst.nets.store.len()).map(mire::tensor::ParamId).collect();
    for id in ids {
        let name = inst.nets.store.get(id).name.clone();
        if name.starts_with("domain_head") {
            continue;
        }
        let g = analytic_nets.store.get(id).grad.clone().unwrap();
        for i in 0..g.len() {
            let orig = probe.store.get(id).value.data()[i];
            probe.store.get_mut(id).value.data_mut()[i] = orig + h;
            let fp = total_loss(&inst, &probe, &cfg);
            probe.store.get_mut(id).value.data_mut()[i] = orig - h;
            let fm = total_loss(&inst, &probe, &cfg);
            probe.store.get_mut(id).value.data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let a = g.data()[i];
            diff2 += (a - num) * (a - num);
            norm2 += a * a + num * num;
        }
    }
    let rel = diff2.sqrt() / norm2.sqrt();
    assert!(rel < 1e-4, "relative error {rel}");
}

#[test]
fn topology_snapshot_round_trip() {
    let mut r = rng(2);
    let mut a = SemanticTopology::from_anchors(3, rand_tensor(&mut r, &[3, 4], -1.0, 1.0));
    let b = SemanticTopology::from_anchors(5, rand_tensor(&mut r, &[3, 4], -1.0, 1.0));
    a.advance(rand_tensor(&mut r, &[3, 4], -1.0, 1.0));
    let dir = tempfile::tempdir().unwrap();
    save_topologies(dir.path(), &[a.clone(), b.clone()]).unwrap();
    assert_eq!(load_topologies(dir.path()).unwrap(), vec![a, b]);
}

fn matrix(k: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, k * d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_positive_and_normalized(anchors in matrix(5, 3), f in prop::collection::vec(-3.0f64..3.0, 3), k in 0usize..5) {
        let t = SemanticTopology::from_anchors(0, Tensor::new(&[5, 3], anchors).unwrap());
        let (_, w) = aggregate_one(&f, k, &t, 0.5, true).unwrap();
        prop_assert!(w.iter().all(|&v| v > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_ignore_feature_scale(anchors in matrix(4, 3), f in prop::collection::vec(0.1f64..3.0, 3), s in 0.01f64..100.0) {
        let t = SemanticTopology::from_anchors(0, Tensor::new(&[4, 3], anchors).unwrap());
        let scaled: Vec<f64> = f.iter().map(|v| v * s).collect();
        let (_, w1) = aggregate_one(&f, 2, &t, 0.5, true).unwrap();
        let (_, w2) = aggregate_one(&scaled, 2, &t, 0.5, true).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_stays_consistent(start in matrix(4, 3), batches in prop::collection::vec((matrix(3, 3), prop::collection::vec(0usize..4, 3)), 1..6)) {
        let mut t = SemanticTopology::from_anchors(1, Tensor::new(&[4, 3], start).unwrap());
        for (feats, ys) in batches {
            update_anchors(&mut t, &Tensor::new(&[3, 3], feats).unwrap(), &ys, &[1, 1, 1], 0.5).unwrap();
            let again = rbf_adjacency(&t.anchors, bandwidth(&t.anchors));
            for i in 0..4 {
                prop_assert_eq!(t.adjacency.at2(i, i), 1.0);
                for j in 0..4 {
                    prop_assert_eq!(t.adjacency.at2(i, j), t.adjacency.at2(j, i));
                    prop_assert!(t.adjacency.at2(i, j) >= 0.0 && t.adjacency.at2(i, j) <= 1.0);
                    prop_assert!((t.adjacency.at2(i, j) - again.at2(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ccr_is_nonnegative(z in matrix(6, 2), xi in 0.1f64..4.0) {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(&[6, 2], z).unwrap());
        prop_assert!(tape.value(ccr_loss(&tape, v, xi).unwrap()).item() >= 0.0);
    }
}
