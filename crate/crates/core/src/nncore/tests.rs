use ndarray::{array, s, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::topology::{build_graph, MetroGraph};

fn random(rng: &mut impl Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Central-difference check of `d loss / d leaf` for every leaf.
///
/// `build` records a scalar loss from the given leaves. The loss is projected
/// onto fixed random weights by the caller so every output entry matters.
fn check_gradients(leaves: Vec<Array2<f64>>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |values: &[Array2<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.variable(v.clone())).collect();
        let root = build(&mut tape, &vars);
        tape.scalar(root)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.variable(v.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);
    let h = 1e-6;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(vars[li]).cloned().unwrap_or_else(|| Array2::zeros(leaf.dim()));
        for idx in 0..leaf.len() {
            let (r, c) = (idx / leaf.ncols(), idx % leaf.ncols());
            let mut plus = leaves.clone();
            plus[li][[r, c]] += h;
            let mut minus = leaves.clone();
            minus[li][[r, c]] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[[r, c]];
            let rel = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-3);
            assert!(rel < 1e-5, "leaf {li} [{r},{c}]: analytic {a} numeric {numeric}");
        }
    }
}

/// `sum(out ⊙ P)` with a fixed projection `P`.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).dim();
    let p = tape.constant(random(&mut ChaCha8Rng::seed_from_u64(seed), shape));
    let prod = tape.mul(out, p);
    tape.sum(prod)
}

#[test]
fn elementwise_and_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let leaves = vec![random(&mut rng, (3, 4)), random(&mut rng, (4, 2)), random(&mut rng, (3, 4))];
    check_gradients(leaves, |t, v| {
        let prod = t.matmul(v[0], v[1]);
        let sig = t.sigmoid(prod);
        let m = t.mul(v[0], v[2]);
        let d = t.sub(m, v[2]);
        let th = t.tanh(d);
        let back = t.matmul_t(th, v[0]);
        let scaled = t.scale(back, 0.7);
        let a = project(t, sig, 10);
        let b = project(t, scaled, 11);
        t.add(a, b)
    });
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let leaves = vec![random(&mut rng, (3, 2)), random(&mut rng, (3, 3)), random(&mut rng, (1, 5))];
    check_gradients(leaves, |t, v| {
        let cat = t.concat_cols(&[v[0], v[1]]);
        let biased = t.add_row(cat, v[2]);
        let part = t.slice_cols(biased, 1, 3);
        let soft = t.softmax_rows(part);
        project(t, soft, 12)
    });
}

#[test]
fn prelu_and_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Keep entries away from the PReLU kink and from |a-b| = 0.
    let a = random(&mut rng, (4, 3)).mapv(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    let target = a.mapv(|x| x + 0.5);
    let slope = array![[0.25]];
    check_gradients(vec![a, slope, target], |t, v| {
        let act = t.prelu(v[0], v[1]);
        let l = t.mean_abs_diff(act, v[2]);
        let extra = project(t, act, 13);
        t.add(l, extra)
    });
}

#[test]
fn mean_abs_diff_value() {
    let mut t = Tape::new();
    let a = t.constant(array![[1.0, -2.0], [0.0, 4.0]]);
    let b = t.constant(array![[0.0, 0.0], [0.0, 1.0]]);
    let l = t.mean_abs_diff(a, b);
    assert!((t.scalar(l) - 1.5).abs() < 1e-12);
}

fn line3() -> MetroGraph {
    build_graph(&[(0, 1), (1, 2)], 3).unwrap()
}

#[test]
fn graph_conv_identity_and_aggregation() {
    let g = line3();
    let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
    let eye = Array2::eye(2);
    let zero = Array2::zeros((2, 2));
    assert_eq!(graph_conv(&x, &g, &eye, &zero).unwrap(), x);
    let nbr = graph_conv(&x, &g, &zero, &eye).unwrap();
    assert_eq!(nbr, array![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]]);
    assert!(graph_conv(&x.slice(s![..2, ..]).to_owned(), &g, &eye, &zero).is_err());
}

#[test]
fn graph_conv_isolated_node_uses_only_itself() {
    let g = build_graph(&[(0, 1)], 3).unwrap();
    let x = array![[1.0], [2.0], [7.0]];
    let out = graph_conv(&x, &g, &array![[2.0]], &array![[10.0]]).unwrap();
    assert_eq!(out, array![[22.0], [14.0], [14.0]]);
}

fn gcgru_fixture(input: usize, hidden: usize, seed: u64) -> (ParameterSet, Gcgru) {
    let mut ps = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = Gcgru::new(&mut ps, &mut rng, "cell", input, hidden);
    (ps, cell)
}

#[test]
fn gcgru_zero_is_a_fixed_point() {
    let (ps, cell) = gcgru_fixture(2, 4, 5);
    let g = line3();
    let out = cell.evaluate(&ps, &g, &Array2::zeros((3, 2)), &Array2::zeros((3, 4))).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn gcgru_saturated_update_gate_keeps_state() {
    let (mut ps, cell) = gcgru_fixture(2, 4, 6);
    ps.set("cell.update.bias", Array2::from_elem((1, 4), 50.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, (3, 2));
    let h = random(&mut rng, (3, 4)).mapv(|v| v * 0.9);
    let out = cell.evaluate(&ps, &line3(), &x, &h).unwrap();
    assert!(out.iter().zip(h.iter()).all(|(a, b)| (a - b).abs() < 1e-3));
}

#[test]
fn gcgru_matches_dense_formula() {
    let (mut ps, cell) = gcgru_fixture(3, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for name in ["cell.reset.bias", "cell.update.bias", "cell.candidate.bias"] {
        ps.set(name, random(&mut rng, (1, 2))).unwrap();
    }
    let g = build_graph(&[(0, 1), (1, 2), (1, 3)], 4).unwrap();
    let x = random(&mut rng, (4, 3));
    let h = random(&mut rng, (4, 2));
    let w = g.weights();
    let p = |n: &str| ps.by_name(n).unwrap().clone();
    let conv = |gate: &str, inp: &Array2<f64>| {
        inp.dot(&p(&format!("cell.{gate}.self_weight")))
            + w.dot(inp).dot(&p(&format!("cell.{gate}.neighbor_weight")))
            + &p(&format!("cell.{gate}.bias"))
    };
    let xh = ndarray::concatenate(Axis(1), &[x.view(), h.view()]).unwrap();
    let r = conv("reset", &xh).mapv(sigmoid);
    let z = conv("update", &xh).mapv(sigmoid);
    let rh = &r * &h;
    let xrh = ndarray::concatenate(Axis(1), &[x.view(), rh.view()]).unwrap();
    let c = conv("candidate", &xrh).mapv(f64::tanh);
    let expected = &z * &h + &(1.0 - &z) * &c;
    let out = cell.evaluate(&ps, &g, &x, &h).unwrap();
    assert!(out.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn gcgru_is_permutation_equivariant() {
    let (ps, cell) = gcgru_fixture(2, 3, 10);
    let g = build_graph(&[(0, 1), (1, 2), (2, 3), (1, 4)], 5).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let gp = g.permuted(&perm).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, (5, 2));
    let h = random(&mut rng, (5, 3));
    let out = cell.evaluate(&ps, &g, &x, &h).unwrap();
    // Row `perm[i]` of the permuted inputs carries old station `i`.
    let reorder = |m: &Array2<f64>| {
        let mut p = Array2::zeros(m.dim());
        for (i, &pi) in perm.iter().enumerate() {
            p.row_mut(pi).assign(&m.row(i));
        }
        p
    };
    let out_p = cell.evaluate(&ps, &gp, &reorder(&x), &reorder(&h)).unwrap();
    let expected = reorder(&out);
    assert!(out_p.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn gcgru_parameter_gradients() {
    let (ps, cell) = gcgru_fixture(2, 3, 12);
    let g = line3();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, (3, 2));
    let h = random(&mut rng, (3, 3));
    let mut leaves = ps.values().to_vec();
    leaves.push(x);
    leaves.push(h);
    let count = ps.len();
    check_gradients(leaves, |t, v| {
        let adjacency = t.constant(g.weights().clone());
        let mut cx = Ctx { tape: t, params: &v[..count], adjacency };
        let h1 = cell.step(&mut cx, v[count], v[count + 1]);
        let h2 = cell.step(&mut cx, v[count], h1);
        project(t, h2, 14)
    });
}

fn dit_fixture(dim: usize, heads: usize, seed: u64) -> (ParameterSet, Dit) {
    let mut ps = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dit = Dit::new(&mut ps, &mut rng, "dit", dim, heads, true).unwrap();
    (ps, dit)
}

#[test]
fn dit_rejects_indivisible_heads() {
    let mut ps = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(Dit::new(&mut ps, &mut rng, "dit", 6, 4, true).is_err());
}

#[test]
fn dit_identical_keys_give_uniform_attention() {
    let (ps, dit) = dit_fixture(4, 2, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let h_od = random(&mut rng, (5, 4));
    let row = random(&mut rng, (1, 4));
    let h_do = row.broadcast((5, 4)).unwrap().to_owned();
    let out = dit.evaluate(&ps, &h_od, &h_do).unwrap();
    for a in &out.attention_d2o {
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }
}

#[test]
fn dit_zero_output_projection_is_identity() {
    let (mut ps, dit) = dit_fixture(4, 1, 17);
    ps.set("dit.od.output", Array2::zeros((4, 4))).unwrap();
    ps.set("dit.do.output", Array2::zeros((4, 4))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let h_od = random(&mut rng, (3, 4));
    let h_do = random(&mut rng, (3, 4));
    let out = dit.evaluate(&ps, &h_od, &h_do).unwrap();
    assert_eq!(out.od, h_od);
    assert_eq!(out.do_, h_do);
}

#[test]
fn dit_two_station_hand_trace() {
    // d = 1, one head, identity projections: A_d2o[i,j] = softmax_j(h_od[i] * h_do[j]).
    let (mut ps, dit) = dit_fixture(1, 1, 19);
    for name in ["query", "key", "value", "output"] {
        ps.set(&format!("dit.od.{name}"), array![[1.0]]).unwrap();
        ps.set(&format!("dit.do.{name}"), array![[1.0]]).unwrap();
    }
    let h_od = array![[1.0], [2.0]];
    let h_do = array![[0.0], [1.0]];
    let out = dit.evaluate(&ps, &h_od, &h_do).unwrap();
    let e1 = 1.0f64.exp();
    let a0 = [1.0 / (1.0 + e1), e1 / (1.0 + e1)];
    assert!((out.attention_d2o[0][[0, 0]] - a0[0]).abs() < 1e-12);
    assert!((out.attention_d2o[0][[0, 1]] - a0[1]).abs() < 1e-12);
    assert!((out.od[[0, 0]] - (1.0 + a0[1])).abs() < 1e-12);
    // DO row 0 has zero query, so it averages OD values uniformly.
    assert!((out.do_[[0, 0]] - 1.5).abs() < 1e-12);
}

#[test]
fn dit_parameter_gradients() {
    let (ps, dit) = dit_fixture(4, 2, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut leaves = ps.values().to_vec();
    leaves.push(random(&mut rng, (3, 4)));
    leaves.push(random(&mut rng, (3, 4)));
    let count = ps.len();
    check_gradients(leaves, |t, v| {
        let adjacency = t.constant(Array2::zeros((0, 0)));
        let mut cx = Ctx { tape: t, params: &v[..count], adjacency };
        let out = dit.forward(&mut cx, v[count], v[count + 1]);
        let a = project(t, out.od, 22);
        let b = project(t, out.do_, 23);
        t.add(a, b)
    });
}

#[test]
fn single_station_is_local() {
    let mut ps = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let layer = SingleStation::new(&mut ps, &mut rng, "ss", 3);
    let h_od = random(&mut rng, (4, 3));
    let h_do = random(&mut rng, (4, 3));
    let run = |od: &Array2<f64>, do_: &Array2<f64>| {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let adjacency = tape.constant(Array2::zeros((0, 0)));
        let (a, b) = (tape.constant(od.clone()), tape.constant(do_.clone()));
        let mut cx = Ctx { tape: &mut tape, params: &bound, adjacency };
        let (o, d) = layer.forward(&mut cx, a, b);
        (tape.value(o).clone(), tape.value(d).clone())
    };
    let (base_od, base_do) = run(&h_od, &h_do);
    let mut changed = h_do.clone();
    changed.row_mut(2).fill(5.0);
    let (od2, do2) = run(&h_od, &changed);
    for i in [0, 1, 3] {
        assert_eq!(od2.row(i), base_od.row(i));
        assert_eq!(do2.row(i), base_do.row(i));
    }
    assert_ne!(od2.row(2), base_od.row(2));
}

#[test]
fn output_head_gradients() {
    let mut ps = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let head = OutputHead::new(&mut ps, &mut rng, "head", 3, 4);
    let mut leaves = ps.values().to_vec();
    leaves.push(random(&mut rng, (5, 3)));
    let count = ps.len();
    check_gradients(leaves, |t, v| {
        let adjacency = t.constant(Array2::zeros((0, 0)));
        let mut cx = Ctx { tape: t, params: &v[..count], adjacency };
        let y = head.forward(&mut cx, v[count]);
        project(t, y, 26)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_stochastic(n in 1usize..16, heads in 1usize..3, seed in any::<u64>()) {
        let (ps, dit) = dit_fixture(2 * heads, heads, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let h_od = random(&mut rng, (n, 2 * heads)).mapv(|v| v * 5.0);
        let h_do = random(&mut rng, (n, 2 * heads)).mapv(|v| v * 5.0);
        let out = dit.evaluate(&ps, &h_od, &h_do).unwrap();
        for a in out.attention_d2o.iter().chain(&out.attention_o2d) {
            for row in a.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn gcgru_state_stays_in_unit_interval(seed in any::<u64>(), steps in 1usize..8) {
        let (ps, cell) = gcgru_fixture(2, 3, seed);
        let g = build_graph(&[(0, 1), (1, 2), (2, 3)], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut h = Array2::zeros((4, 3));
        for _ in 0..steps {
            let x = random(&mut rng, (4, 2)).mapv(|v| v * 20.0);
            h = cell.evaluate(&ps, &g, &x, &h).unwrap();
            prop_assert!(h.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }
}
