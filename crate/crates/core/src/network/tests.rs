use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::chargraph::{batch_graphs, BatchedGraph, Topology};
use crate::ink::{synth_dataset, SynthSpec};
use crate::numcore::{gradcheck, GradcheckOptions, Mode, Tape, Tensor};
use crate::splineconv::pseudo_coords;

fn graphs(n: usize, seed: u64, cfg: &ModelConfig) -> Vec<crate::chargraph::CharGraph> {
    let ds = synth_dataset(
        &SynthSpec {
            samples_per_class: n.div_ceil(10),
            ..SynthSpec::default()
        },
        seed,
    )
    .unwrap();
    ds.samples.iter().take(n).map(|s| prepare_graph(&s.trajectory, cfg).unwrap()).collect()
}

fn tiny(num_classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::small(num_classes);
    cfg.width_multiplier = 0.125;
    cfg.stn_hidden = vec![4, 6, 5];
    cfg
}

fn chain_topology(n: usize) -> Topology {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    for i in 1..n {
        edges.push((i - 1, i));
        edges.push((i, i - 1));
    }
    Topology {
        num_nodes: n,
        edges,
        batch_id: vec![0; n],
        num_graphs: 1,
    }
}

fn block_vars(tape: &mut Tape<f64>, w1: Vec<f64>, w2: Vec<f64>, c: usize) -> RsGcbVars {
    let ones = |t: &mut Tape<f64>| t.variable(&[c], vec![1.0; c]).unwrap();
    let zeros = |t: &mut Tape<f64>| t.variable(&[c], vec![0.0; c]).unwrap();
    let slope = |t: &mut Tape<f64>| t.variable(&[c], vec![0.25; c]).unwrap();
    RsGcbVars {
        conv1: tape.variable(&[9, c, c], w1).unwrap(),
        bn1: (ones(tape), zeros(tape)),
        prelu1: slope(tape),
        conv2: tape.variable(&[9, c, c], w2).unwrap(),
        bn2: (ones(tape), zeros(tape)),
        prelu2: slope(tape),
        shortcut: None,
    }
}

const OPTS: BlockOpts = BlockOpts {
    kernel_size: 3,
    degree: 1,
    dropout: 0.2,
    bn_eps: 1e-5,
};

#[test]
fn null_conv_block_is_prelu_of_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, c) = (6, 3);
    let topo = chain_topology(n);
    let mut tape = Tape::<f64>::new();
    let x: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xv = tape.constant(&[n, c], x.clone()).unwrap();
    let p = tape.constant(&[n, 2], (0..2 * n).map(|i| i as f64 * 0.03).collect()).unwrap();
    let u = pseudo_coords(&mut tape, p, &topo, false).unwrap().u;
    let vars = block_vars(&mut tape, vec![0.0; 9 * c * c], vec![0.0; 9 * c * c], c);
    let running = [&[0.0; 3][..], &[1.0; 3], &[0.0; 3], &[1.0; 3]];
    let (y, _) = rs_gcb_forward(&mut tape, xv, &topo, u, &vars, running, Mode::Train, &OPTS, &mut rng).unwrap();
    for (a, b) in tape.value(y).iter().zip(&x) {
        let want = if *b > 0.0 { *b } else { 0.25 * b };
        assert!((a - want).abs() < 1e-12);
    }
    let (e1, _) = rs_gcb_forward(&mut tape, xv, &topo, u, &vars, running, Mode::Eval, &OPTS, &mut rng).unwrap();
    let (e2, _) = rs_gcb_forward(&mut tape, xv, &topo, u, &vars, running, Mode::Eval, &OPTS, &mut rng).unwrap();
    assert_eq!(tape.value(e1), tape.value(e2));
}

#[test]
fn block_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, c) = (7, 3);
    let topo = chain_topology(n);
    let rnd = |rng: &mut ChaCha8Rng, shape: &[usize], s: f64| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random_range(-s..s)).collect()).unwrap()
    };
    let mut inputs = vec![
        rnd(&mut rng, &[n, c], 1.0).with_grad(),
        rnd(&mut rng, &[9, c, c], 0.6).with_grad(),
        rnd(&mut rng, &[9, c, c], 0.6).with_grad(),
        rnd(&mut rng, &[n, c], 1.0),
    ];
    // irregular steps keep the largest offset unique
    let coords: Vec<f64> = (0..n)
        .flat_map(|i| [0.1 * i as f64 + 0.013 * (i * i) as f64, 0.05 * (i as f64).sin()])
        .collect();
    inputs.push(Tensor::new(&[n, 2], coords).unwrap().with_grad());
    let report = gradcheck(&inputs, GradcheckOptions { eps: 1e-6, ..Default::default() }, |t, v| {
        let u = pseudo_coords(t, v[4], &topo, false)?.u;
        let vars = RsGcbVars {
            conv1: v[1],
            conv2: v[2],
            ..block_vars(t, vec![0.0; 9 * c * c], vec![0.0; 9 * c * c], c)
        };
        let running = [&[0.0; 3][..], &[1.0; 3], &[0.0; 3], &[1.0; 3]];
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let (y, _) = rs_gcb_forward(t, v[0], &topo, u, &vars, running, Mode::Train, &OPTS, &mut mask_rng)?;
        let y = t.mul(y, v[3])?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn cos_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
    let k = 3755;
    let w = tape.constant(&[k, 3], [1.0, 2.0, 3.0].repeat(k)).unwrap();
    let l = cos_loss(&mut tape, e, w, &[0, 17], 16.0, 0.0).unwrap();
    assert!((tape.value(l)[0] - (k as f64).ln()).abs() < 1e-9);
    assert!((tape.value(l)[0] - 8.2309).abs() < 1e-4);

    let e = tape.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
    let w = tape.constant(&[2, 2], vec![2.0, 0.0, -3.0, 0.0]).unwrap();
    let l = cos_loss(&mut tape, e, w, &[0], 16.0, 0.0).unwrap();
    let want = (-32.0f64).exp().ln_1p();
    assert!((tape.value(l)[0] - want).abs() < 1e-20);
    assert!((tape.value(l)[0] - 1.27e-14).abs() < 1e-16);

    let e = tape.constant(&[1, 2], vec![1.0, 0.4]).unwrap();
    let w = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let losses: Vec<f64> = [0.0, 0.1, 0.35]
        .iter()
        .map(|&m| {
            let l = cos_loss(&mut tape, e, w, &[0], 16.0, m).unwrap();
            tape.value(l)[0]
        })
        .collect();
    assert!(losses[0] < losses[1] && losses[1] < losses[2]);
    assert!(cos_loss(&mut tape, e, w, &[2], 16.0, 0.0).is_err());
}

#[test]
fn cos_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rnd = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().with_grad()
    };
    let inputs = vec![rnd(&mut rng, &[4, 5]), rnd(&mut rng, &[3, 5])];
    let report = gradcheck(&inputs, GradcheckOptions { eps: 1e-6, ..Default::default() }, |t, v| {
        cos_loss(t, v[0], v[1], &[0, 2, 1, 2], 16.0, 0.2)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn single_node_graph_runs() {
    let cfg = tiny(4);
    let model = SgcnModel::<f64>::new(cfg.clone(), 1).unwrap();
    let g = prepare_graph(&crate::ink::Trajectory::new(vec![vec![[3.0, 3.0]]]).unwrap(), &cfg).unwrap();
    assert_eq!(g.num_nodes(), 1);
    let logits = model.predict(&batch_graphs([&g]).unwrap()).unwrap();
    assert_eq!(logits.shape(), &[1, 4]);
    assert!(logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn eval_is_pure_and_batch_independent() {
    let cfg = ModelConfig::small(10);
    let model = SgcnModel::<f32>::new(cfg.clone(), 2).unwrap();
    let gs = graphs(2, 5, &cfg);
    let both = model.predict(&batch_graphs(&gs).unwrap()).unwrap();
    assert_eq!(both, model.predict(&batch_graphs(&gs).unwrap()).unwrap());
    for (i, g) in gs.iter().enumerate() {
        let one = model.predict(&batch_graphs([g]).unwrap()).unwrap();
        for (a, b) in one.data().iter().zip(both.row(i)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn node_order_does_not_matter() {
    let cfg = ModelConfig::small(10);
    let model = SgcnModel::<f64>::new(cfg.clone(), 3).unwrap();
    let g = graphs(1, 6, &cfg).remove(0);
    let n = g.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let a = model.predict(&batch_graphs([&g]).unwrap()).unwrap();
    let b = model.predict(&batch_graphs([&g.permute(&perm)]).unwrap()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn argmax_ignores_embedding_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::<f64>::new();
    let e: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(&[5, 4], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let argmax = |tape: &mut Tape<f64>, scale: f64| {
        let ev = tape.constant(&[2, 4], e.iter().map(|v| v * scale).collect()).unwrap();
        let en = tape.l2_normalize_rows(ev, 1e-12).unwrap();
        let wn = tape.l2_normalize_rows(w, 1e-12).unwrap();
        let c = tape.matmul_nt(en, wn).unwrap();
        tape.value(c)
            .chunks(5)
            .map(|r| r.iter().enumerate().fold(0, |b, (i, v)| if *v > r[b] { i } else { b }))
            .collect::<Vec<_>>()
    };
    let base = argmax(&mut tape, 1.0);
    for s in [1e-3, 0.5, 7.0, 1e4] {
        assert_eq!(argmax(&mut tape, s), base);
    }
}

#[test]
fn param_counts_scale_with_width() {
    let conv = |m: f64| {
        let mut cfg = ModelConfig::small(10);
        cfg.width_multiplier = m;
        let model = SgcnModel::<f32>::new(cfg, 0).unwrap();
        model
            .params
            .iter()
            .filter(|(n, _)| n.contains(".conv"))
            .map(|(_, t)| t.len())
            .sum::<usize>()
    };
    let ratio = conv(2.0) as f64 / conv(1.0) as f64;
    assert!((3.5..=4.0).contains(&ratio), "{ratio}");

    let model = SgcnModel::<f32>::new(ModelConfig::small(10), 0).unwrap();
    let count = model.param_count();
    assert_eq!(count.num_params, model.params.num_elements());
    assert_eq!(count.storage_bytes, 4 * (count.num_params + model.buffers.num_elements()));
}

#[test]
fn large_config_gradchecks_on_three_classes() {
    let cfg = ModelConfig::large(3);
    let model = SgcnModel::<f64>::new(cfg.clone(), 7).unwrap();
    // nudge every node off the grid-cell boundaries the normalized box touches
    let shifted: Vec<_> = graphs(3, 8, &cfg)
        .into_iter()
        .map(|mut g| {
            g.coords.iter_mut().for_each(|p| *p = [p[0] + 0.0123, p[1] + 0.0071]);
            g
        })
        .collect();
    let batch: BatchedGraph = batch_graphs(&shifted).unwrap();
    let labels = [0, 1, 2];
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone().with_grad()).collect();
    let opts = GradcheckOptions {
        eps: 1e-6,
        max_probes_per_input: Some(2),
        seed: 1,
    };
    let report = gradcheck(&inputs, opts, |t, v| {
        let bound = model.params.bound_from(v.to_vec())?;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fwd = model.forward(t, &bound, &batch, Mode::Train, &mut rng)?;
        model.loss(t, &bound, &fwd, &labels)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

