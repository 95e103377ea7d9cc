use cellgrow::cells::*;
use cellgrow::gradcheck::{standard_suite, TOLERANCE};
use cellgrow::tensor::{softmax, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn randomize_alphas(state: &mut ModelState, rng: &mut ChaCha8Rng) {
    for a in state.alphas.values_mut() {
        for v in a.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
}

// Straight-line reference implementations on plain vectors, one sample at a time.

fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols())
        .map(|c| (0..m.rows()).map(|r| v[r] * m.get(r, c)).sum())
        .collect()
}

fn act(kind: OpKind, u: f64) -> f64 {
    match kind.activation().unwrap() {
        Activation::Sigmoid => 1.0 / (1.0 + (-u).exp()),
        Activation::Tanh => u.tanh(),
        Activation::Relu => u.max(0.0),
    }
}

fn reference_two_to_one(spec: &CellSpec, state: &ModelState, x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut prev = h.to_vec();
    for node in &spec.nodes {
        let e = &node.edges[0];
        let w = softmax(&state.alphas[&e.id]).unwrap();
        let mut o = vec![0.0; spec.n_h];
        for (k, op) in e.ops.iter().enumerate() {
            let p = |i: usize| &state.weights[&op.params[i]];
            let xw = vec_mat(x, p(0));
            let term: Vec<f64> = match op.kind {
                OpKind::Tt1Sum => xw.iter().zip(&prev).map(|(a, b)| a + b).collect(),
                OpKind::Tt1Prod => xw.iter().zip(&prev).map(|(a, b)| a * b).collect(),
                kind => {
                    let hw = vec_mat(&prev, p(1));
                    (0..spec.n_h)
                        .map(|j| act(kind, xw[j] + hw[j] + p(2).get(0, j)))
                        .collect()
                }
            };
            for j in 0..spec.n_h {
                o[j] += w[k] * term[j];
            }
        }
        prev = o;
    }
    prev
}

fn reference_darts(spec: &CellSpec, state: &ModelState, x: &[f64], h: &[f64]) -> Vec<f64> {
    let input: Vec<f64> = x.iter().chain(h).copied().collect();
    let mut outs: Vec<(NodeId, Vec<f64>)> = Vec::new();
    for node in &spec.nodes {
        let mut z = vec![0.0; spec.n_h];
        for e in &node.edges {
            let src: &[f64] = match e.source {
                EdgeSource::Input => &input,
                EdgeSource::Node(id) => &outs.iter().find(|(n, _)| *n == id).unwrap().1,
            };
            let w = softmax(&state.alphas[&e.id]).unwrap();
            for (k, op) in e.ops.iter().enumerate() {
                let term: Vec<f64> = match op.kind {
                    OpKind::DartsZero => vec![0.0; spec.n_h],
                    OpKind::DartsIdentity => match e.source {
                        EdgeSource::Input => h.to_vec(),
                        EdgeSource::Node(_) => src.to_vec(),
                    },
                    kind => vec_mat(src, &state.weights[&op.params[0]])
                        .into_iter()
                        .map(|u| act(kind, u))
                        .collect(),
                };
                for j in 0..spec.n_h {
                    z[j] += w[k] * term[j];
                }
            }
        }
        outs.push((node.id, z));
    }
    match spec.output_rule {
        OutputRule::Last => outs.last().unwrap().1.clone(),
        OutputRule::Mean => (0..spec.n_h)
            .map(|j| outs.iter().map(|(_, o)| o[j]).sum::<f64>() / outs.len() as f64)
            .collect(),
    }
}

#[test]
fn random_cells_match_straight_line_reference() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for backbone in [Backbone::TwoToOne, Backbone::Darts] {
            for rule in [OutputRule::Mean, OutputRule::Last] {
                let spec = CellSpec::new(backbone, 3, 4, 3).unwrap().with_output_rule(rule);
                let mut state = ModelState::for_spec(&spec, seed);
                randomize_alphas(&mut state, &mut rng);
                let x = random(&mut rng, 5, 3);
                let h = random(&mut rng, 5, 4);
                let got = evaluate_cell(&spec, &state, &x, &h).unwrap();
                for r in 0..5 {
                    let want = match backbone {
                        Backbone::TwoToOne => reference_two_to_one(&spec, &state, x.row_slice(r), h.row_slice(r)),
                        Backbone::Darts => reference_darts(&spec, &state, x.row_slice(r), h.row_slice(r)),
                    };
                    for (a, b) in got.row_slice(r).iter().zip(&want) {
                        assert!((a - b).abs() <= 1e-12, "{backbone} seed {seed}: {a} vs {b}");
                    }
                }
            }
        }
    }
}

/// Logits that put (numerically) all mass on op `k`.
fn force(state: &mut ModelState, edge: EdgeId, k: usize) {
    for (i, a) in state.alphas.get_mut(&edge).unwrap().iter_mut().enumerate() {
        *a = if i == k { 0.0 } else { -1000.0 };
    }
}

#[test]
fn two_to_one_sum_and_prod_limits() {
    let spec = CellSpec::new(Backbone::TwoToOne, 3, 4, 1).unwrap();
    let edge = spec.nodes[0].edges[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 6, 3);
    let h = random(&mut rng, 6, 4);

    let mut state = ModelState::for_spec(&spec, 3);
    force(&mut state, edge.id, 3);
    *state.weights.get_mut(&edge.ops[3].params[0]).unwrap() = Tensor::zeros(3, 4);
    assert!(forward_two_to_one(&spec, &state, &x, &h).unwrap().bit_eq(&h));

    force(&mut state, edge.id, 4);
    *state.weights.get_mut(&edge.ops[4].params[0]).unwrap() = Tensor::zeros(3, 4);
    let out = forward_two_to_one(&spec, &state, &x, &h).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn darts_identity_and_zero_ops() {
    // node 2's only edge comes from node 1; forcing identity copies node 1
    let spec = CellSpec::new(Backbone::Darts, 3, 4, 2).unwrap().with_output_rule(OutputRule::Last);
    let one = spec.clone();
    let mut one_spec = one;
    one_spec.nodes.truncate(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 4, 3);
    let h = random(&mut rng, 4, 4);
    let mut state = ModelState::for_spec(&spec, 4);
    randomize_alphas(&mut state, &mut rng);
    force(&mut state, spec.nodes[1].edges[0].id, 3);
    let node1 = forward_darts(&one_spec, &state, &x, &h).unwrap();
    let node2 = forward_darts(&spec, &state, &x, &h).unwrap();
    assert!(node1.bit_eq(&node2));

    // three nodes, every edge into node 3 forced to zero
    let spec = CellSpec::new(Backbone::Darts, 3, 4, 3).unwrap().with_output_rule(OutputRule::Last);
    let mut state = ModelState::for_spec(&spec, 4);
    randomize_alphas(&mut state, &mut rng);
    for e in &spec.nodes[2].edges {
        force(&mut state, e.id, 4);
    }
    let out = forward_darts(&spec, &state, &x, &h).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forcing_one_op_reproduces_it_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = CellSpec::new(Backbone::TwoToOne, 2, 3, 1).unwrap();
    let edge = spec.nodes[0].edges[0].clone();
    let state = ModelState::for_spec(&spec, 6);
    let x = random(&mut rng, 3, 2);
    let h = random(&mut rng, 3, 3);
    for k in 0..edge.ops.len() {
        let mut forced = state.clone();
        force(&mut forced, edge.id, k);
        let mut alone_spec = spec.clone();
        alone_spec.nodes[0].edges[0].ops = vec![edge.ops[k].clone()];
        let mut alone = state.clone();
        alone.alphas.insert(edge.id, vec![0.0]);
        let a = evaluate_cell(&spec, &forced, &x, &h).unwrap();
        let b = evaluate_cell(&alone_spec, &alone, &x, &h).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }
}

#[test]
fn alpha_shift_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for backbone in [Backbone::TwoToOne, Backbone::Darts] {
        let spec = CellSpec::new(backbone, 2, 3, 3).unwrap();
        let mut state = ModelState::for_spec(&spec, 1);
        randomize_alphas(&mut state, &mut rng);
        let x = random(&mut rng, 3, 2);
        let h = random(&mut rng, 3, 3);
        let before = evaluate_cell(&spec, &state, &x, &h).unwrap();
        for a in state.alphas.values_mut() {
            a.iter_mut().for_each(|v| *v += 0.75);
        }
        let after = evaluate_cell(&spec, &state, &x, &h).unwrap();
        assert!(before.max_abs_diff(&after).unwrap() <= 1e-12);
    }
}

#[test]
fn baselines_at_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, 2, 3);
    let h = random(&mut rng, 2, 4);
    let c = random(&mut rng, 2, 4);
    for kind in [BaselineKind::Gru, BaselineKind::Lstm] {
        let cell = Cell::Baseline { kind, n_x: 3, n_h: 4 };
        let mut state = cell.init_state(0);
        for t in state.weights.values_mut() {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let mut tape = Tape::new();
        let b = cell.bind(&mut tape, &state, GradMode::NONE).unwrap();
        let xv = tape.constant(x.clone());
        let hv = tape.constant(h.clone());
        let cv = tape.constant(c.clone());
        let out = cell.step(&mut tape, &b, xv, Hidden { h: hv, c: Some(cv) }, None).unwrap();
        match kind {
            BaselineKind::Gru => assert!(tape.value(out.h).bit_eq(&h.scale(0.5))),
            _ => {
                let c_t = c.scale(0.5);
                assert!(tape.value(out.c.unwrap()).max_abs_diff(&c_t).unwrap() < 1e-15);
                let h_t = c_t.map(|v| 0.5 * v.tanh());
                assert!(tape.value(out.h).max_abs_diff(&h_t).unwrap() < 1e-15);
            }
        }
    }
}

#[test]
fn unroll_fixed_point_and_single_step() {
    let spec = CellSpec::new(Backbone::TwoToOne, 2, 3, 2).unwrap();
    let mut state = ModelState::for_spec(&spec, 1);
    for node in &spec.nodes {
        let e = &node.edges[0];
        force(&mut state, e.id, 3);
        *state.weights.get_mut(&e.ops[3].params[0]).unwrap() = Tensor::zeros(2, 3);
    }
    let cell = Cell::Searched(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h0 = random(&mut rng, 2, 3);
    let mut tape = Tape::new();
    let b = cell.bind(&mut tape, &state, GradMode::NONE).unwrap();
    let xs: Vec<_> = (0..7).map(|_| tape.constant(random(&mut rng, 2, 2))).collect();
    let hv = tape.constant(h0.clone());
    let hs = cell.unroll(&mut tape, &b, &xs, Hidden { h: hv, c: None }, None).unwrap();
    assert!(tape.value(*hs.last().unwrap()).bit_eq(&h0));

    let one = cell.unroll(&mut tape, &b, &xs[..1], Hidden { h: hv, c: None }, None).unwrap();
    let direct = cell.step(&mut tape, &b, xs[0], Hidden { h: hv, c: None }, None).unwrap();
    assert!(tape.value(one[0]).bit_eq(tape.value(direct.h)));
    assert!(cell.unroll(&mut tape, &b, &[], Hidden { h: hv, c: None }, None).is_err());
}

#[test]
fn non_finite_weights_name_the_node() {
    let spec = CellSpec::new(Backbone::TwoToOne, 1, 1, 2).unwrap();
    let mut state = ModelState::for_spec(&spec, 0);
    let p = spec.nodes[1].edges[0].ops[0].params[0].clone();
    state.weights.insert(p, Tensor::new(1, 1, vec![1e300]).unwrap());
    let x = Tensor::new(1, 1, vec![1e300]).unwrap();
    let err = evaluate_cell(&spec, &state, &x, &Tensor::zeros(1, 1)).unwrap_err();
    assert!(err.is_numeric());
    assert!(err.to_string().contains(&spec.nodes[1].id.to_string()), "{err}");
}

#[test]
fn gradient_suite_short() {
    for r in standard_suite(3, 5, None).unwrap() {
        assert!(r.max_rel_err <= TOLERANCE, "{}: {}", r.name, r.max_rel_err);
    }
}
