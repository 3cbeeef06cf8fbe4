use proptest::prelude::*;

use super::*;

fn mat(g: &mut Graph, rows: usize, cols: usize, v: &[f64]) -> Tensor {
    g.variable(Shape::new(rows, cols), v.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let id = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let m = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let p = g.matmul(id, m).unwrap();
    assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = mat(&mut g, 1, 2, &[1.0, 2.0]);
    let b = mat(&mut g, 2, 1, &[3.0, 4.0]);
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[11.0]);

    let z = mat(&mut g, 2, 2, &[0.0; 4]);
    let any = mat(&mut g, 2, 3, &[1.5, -2.0, 3.0, 0.25, 7.0, -1.0]);
    let zz = g.matmul(z, any).unwrap();
    assert!(g.value(zz).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = mat(&mut g, 2, 3, &[0.0; 6]);
    let b = mat(&mut g, 2, 3, &[0.0; 6]);
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(2, 3)"), "{msg}");
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = mat(&mut g, 1, 3, &[0.0, 0.0, 0.0]);
    let p = g.softmax(x).unwrap();
    for v in g.value(p) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = mat(&mut g, 1, 2, &[2f64.ln(), 0.0]);
    let p = g.softmax(x).unwrap();
    assert!((g.value(p)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(p)[1] - 1.0 / 3.0).abs() < 1e-15);
    let x = mat(&mut g, 1, 2, &[1000.0, 0.0]);
    let p = g.softmax(x).unwrap();
    assert!((g.value(p)[0] - 1.0).abs() < 1e-15);
    assert!(g.value(p)[1] >= 0.0 && g.value(p)[1] < 1e-300);
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::new();
    let x = mat(&mut g, 1, 2, &[f64::NAN, 0.0]);
    assert!(matches!(g.softmax(x), Err(Error::Numeric { .. })));
}

#[test]
fn masked_softmax_examples() {
    let mut g = Graph::new();
    let x = mat(&mut g, 1, 4, &[0.0; 4]);
    let p = g.masked_softmax(x, &[true, true, false, false]).unwrap();
    assert_eq!(g.value(p)[2], 0.0);
    assert_eq!(g.value(p)[3], 0.0);
    assert!((g.value(p)[0] - 0.5).abs() < 1e-15);

    let x = mat(&mut g, 1, 4, &[2f64.ln(), 5.0, 0.0, 7.0]);
    let p = g.masked_softmax(x, &[true, false, true, false]).unwrap();
    let v = g.value(p);
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((v[2] - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!((v[1], v[3]), (0.0, 0.0));

    let x = mat(&mut g, 1, 4, &[1.0, 2.0, 3.0, 4.0]);
    assert!(matches!(
        g.masked_softmax(x, &[false; 4]),
        Err(Error::InvalidMask)
    ));
}

#[test]
fn masked_positions_get_no_gradient() {
    let mut g = Graph::new();
    let x = mat(&mut g, 2, 4, &[0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -2.0, 0.0]);
    let p = g.masked_softmax(x, &[false, true, true, false]).unwrap();
    let w = g
        .constant(
            Shape::new(2, 4),
            vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 1.0],
        )
        .unwrap();
    let loss = g.dot(p, w).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    for r in 0..2 {
        assert_eq!(grad[r * 4], 0.0);
        assert_eq!(grad[r * 4 + 3], 0.0);
        assert!(grad[r * 4 + 1] != 0.0);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let p = mat(&mut g, 1, 3, &[1.0, 0.0, 0.0]);
    let l = g.cross_entropy(p, &[0]).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let p = mat(&mut g, 1, 2, &[0.5, 0.5]);
    let l = g.cross_entropy(p, &[0]).unwrap();
    assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);
    let p = mat(&mut g, 1, 3, &[1.0 / 3.0; 3]);
    for y in 0..3 {
        let l = g.cross_entropy(p, &[y]).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);
    }
    // zero at the true index is floored rather than infinite
    let p = mat(&mut g, 1, 2, &[0.0, 1.0]);
    let l = g.cross_entropy(p, &[0]).unwrap();
    assert!((g.scalar(l) + LOG_FLOOR.ln()).abs() < 1e-9);
    g.backward(l).unwrap();
    assert!(g.grad(p).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn cross_entropy_averages_over_batch() {
    let mut g = Graph::new();
    let p = mat(&mut g, 2, 2, &[0.5, 0.5, 0.25, 0.75]);
    let l = g.cross_entropy(p, &[0, 1]).unwrap();
    let expected = (2f64.ln() - 0.75f64.ln()) / 2.0;
    assert!((g.scalar(l) - expected).abs() < 1e-15);
}

#[test]
fn mse_examples() {
    let mut g = Graph::new();
    let p = mat(&mut g, 1, 2, &[0.3, 0.7]);
    let l = g.mse(p, &[0.3, 0.7]).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let p = mat(&mut g, 1, 2, &[1.0, 0.0]);
    let l = g.mse(p, &[0.0, 1.0]).unwrap();
    assert_eq!(g.scalar(l), 2.0);
    let p = mat(&mut g, 1, 2, &[0.5, 0.5]);
    let l = g.mse(p, &[1.0, 0.0]).unwrap();
    assert_eq!(g.scalar(l), 0.5);
    assert!(matches!(g.mse(p, &[1.0]), Err(Error::Dimension { .. })));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = mat(&mut g, 1, 1, &[3.0]);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);

    let mut g = Graph::new();
    let x = mat(&mut g, 1, 1, &[2.0]);
    let y = mat(&mut g, 1, 1, &[5.0]);
    let f = g.mul(x, y).unwrap();
    g.backward(f).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[5.0]);
    assert_eq!(g.grad(y).unwrap(), &[2.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = mat(&mut g, 1, 1, &[3.0]);
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_needs_scalar_root() {
    let mut g = Graph::new();
    let x = mat(&mut g, 1, 2, &[3.0, 1.0]);
    let y = g.tanh(x);
    assert!(matches!(g.backward(y), Err(Error::Usage(_))));
}

#[test]
fn detach_cuts_gradient() {
    let mut g = Graph::new();
    let x = mat(&mut g, 1, 1, &[3.0]);
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0]);
}

fn quadratic_store() -> ParamStore {
    let mut store = ParamStore::new();
    store
        .add("w", Shape::new(2, 2), vec![0.5, -1.0, 2.0, 0.25])
        .unwrap();
    store.add("b", Shape::new(1, 2), vec![0.1, -0.3]).unwrap();
    store
}

fn quadratic_loss(g: &mut Graph, store: &ParamStore) -> Result<Tensor> {
    let w = g.param(store, ParamId(0));
    let b = g.param(store, ParamId(1));
    let x = g.constant(Shape::new(1, 2), vec![1.0, 2.0])?;
    let y = g.matmul(x, w)?;
    let y = g.add_row(y, b)?;
    g.dot(y, y)
}

#[test]
fn grad_check_quadratic_is_tight() {
    let mut store = quadratic_store();
    let report = grad_check(quadratic_loss, &mut store, 1e-5).unwrap();
    assert_eq!(report.checked, 6);
    assert!(report.max_relative_error < 1e-8, "{report:?}");
    assert!(report.flagged.is_empty());
}

#[test]
fn grad_check_detects_doubled_gradient() {
    let mut store = quadratic_store();
    let mut g = Graph::new();
    let loss = quadratic_loss(&mut g, &store).unwrap();
    g.backward(loss).unwrap();
    let mut grads = Gradients::zeros(&store);
    g.accumulate_param_grads(&mut grads);
    grads.scale(2.0);
    let report = compare_gradients(&grads, quadratic_loss, &mut store, 1e-5).unwrap();
    assert!((report.max_relative_error - 1.0).abs() < 1e-6, "{report:?}");
}

#[test]
fn grad_check_flags_missing_gradient() {
    let mut store = quadratic_store();
    let grads = Gradients::zeros(&store);
    let report = compare_gradients(&grads, quadratic_loss, &mut store, 1e-5).unwrap();
    assert!(report.max_relative_error.is_infinite());
    assert!(!report.flagged.is_empty());
}

#[test]
fn rmsprop_decreases_convex_quadratic() {
    let mut store = quadratic_store();
    let mut opt = OptimizerState::rmsprop(0.001);
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = quadratic_loss(&mut g, store).unwrap();
        g.backward(l).unwrap();
        let mut grads = Gradients::zeros(store);
        g.accumulate_param_grads(&mut grads);
        (g.scalar(l), grads)
    };
    let (l0, g0) = eval(&store);
    opt.step(&mut store, &g0).unwrap();
    let (l1, g1) = eval(&store);
    opt.step(&mut store, &g1).unwrap();
    let (l2, _) = eval(&store);
    assert!(l1 < l0 && l2 < l1, "{l0} {l1} {l2}");
    assert!(opt.accumulators().iter().flatten().all(|&a| a >= 0.0));
}

/// Central-difference gradient of `f` with respect to every entry of `x`.
fn numeric_grad(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let eps = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += eps;
            let mut m = x.to_vec();
            m[i] -= eps;
            (f(&p) - f(&m)) / (2.0 * eps)
        })
        .collect()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(a, n)| (a - n).abs() / n.abs().max(GRAD_SCALE_FLOOR))
        .fold(0.0, f64::max)
}

type UnaryCase = fn(&mut Graph, Tensor) -> Tensor;

/// Builds `sum(w * op(x))` so every output element matters.
fn check_op(x: &[f64], shape: Shape, op: UnaryCase) -> f64 {
    // irrational weights, so no output-gradient sum cancels exactly
    let weights: Vec<f64> = (0..64).map(|i| (1.3 * (i as f64 + 1.0)).sin()).collect();
    let run = |xv: &[f64], grad: bool| {
        let mut g = Graph::new();
        let t = g.variable(shape, xv.to_vec()).unwrap();
        let y = op(&mut g, t);
        let n = g.shape(y).len();
        let w = g.constant(g.shape(y), weights[..n].to_vec()).unwrap();
        let l = g.dot(y, w).unwrap();
        if grad {
            g.backward(l).unwrap();
            (g.scalar(l), g.grad(t).unwrap().to_vec())
        } else {
            (g.scalar(l), vec![])
        }
    };
    let (_, analytic) = run(x, true);
    let numeric = numeric_grad(x, &|xv| run(xv, false).0);
    rel_err(&analytic, &numeric)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn op_gradients_match_finite_differences(x in prop::collection::vec(-2.0f64..2.0, 12)) {
        let s = Shape::new(3, 4);
        let ops: Vec<(&str, UnaryCase)> = vec![
            ("tanh", |g, t| g.tanh(t)),
            ("sigmoid", |g, t| g.sigmoid(t)),
            ("softmax", |g, t| g.softmax(t).unwrap()),
            ("masked_softmax", |g, t| g.masked_softmax(t, &[true, false, true, true]).unwrap()),
            ("scale", |g, t| g.scale(t, -1.7)),
            ("mul_self", |g, t| g.mul(t, t).unwrap()),
            ("matmul", |g, t| {
                let w = g.constant(Shape::new(4, 2), vec![0.3, -1.0, 0.7, 0.2, -0.5, 1.1, 0.9, -0.4]).unwrap();
                g.matmul(t, w).unwrap()
            }),
            ("matmul_t_self", |g, t| g.matmul_t(t, t).unwrap()),
            ("concat_slice", |g, t| {
                let a = g.slice_cols(t, 1, 3).unwrap();
                let b = g.slice_rows(t, 0, 3).unwrap();
                let b = g.slice_cols(b, 0, 1).unwrap();
                g.concat(&[a, b, a]).unwrap()
            }),
            ("gather", |g, t| g.gather(t, &[2, 0, 2, 1]).unwrap()),
            ("blend", |g, t| {
                let sq = g.mul(t, t).unwrap();
                g.blend(t, sq, &[true, false, true]).unwrap()
            }),
            ("add_row", |g, t| {
                let r = g.slice_rows(t, 1, 2).unwrap();
                g.add_row(t, r).unwrap()
            }),
            ("sub_add", |g, t| {
                let th = g.tanh(t);
                let s = g.sub(t, th).unwrap();
                g.add(s, t).unwrap()
            }),
            ("mean_sum", |g, t| {
                let sq = g.mul(t, t).unwrap();
                let m = g.mean(sq);
                let s = g.sum(t);
                g.mul(m, s).unwrap()
            }),
            ("ce", |g, t| {
                let p = g.softmax(t).unwrap();
                g.cross_entropy(p, &[0, 3, 1]).unwrap()
            }),
            ("mse", |g, t| {
                let p = g.softmax(t).unwrap();
                g.mse(p, &[0.25; 12]).unwrap()
            }),
        ];
        for (name, op) in ops {
            let err = check_op(&x, s, op);
            prop_assert!(err < 1e-4, "{} rel err {}", name, err);
        }
    }

    #[test]
    fn relu_gradient_away_from_kink(x in prop::collection::vec(
        prop_oneof![-2.0f64..-0.01, 0.01f64..2.0], 12)) {
        let err = check_op(&x, Shape::new(3, 4), |g, t| g.relu(t));
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-50.0f64..50.0, 12),
                               mask in prop::collection::vec(any::<bool>(), 4)) {
        prop_assume!(mask.iter().any(|&m| m));
        let mut g = Graph::new();
        let t = g.variable(Shape::new(3, 4), x).unwrap();
        let p = g.softmax(t).unwrap();
        let q = g.masked_softmax(t, &mask).unwrap();
        for r in 0..3 {
            prop_assert!((g.row(p, r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let row = g.row(q, r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (v, m) in row.iter().zip(&mask) {
                if !m { prop_assert_eq!(*v, 0.0); } else { prop_assert!(*v >= 0.0); }
            }
        }
    }
}

/// A scalar expression DAG used as an independent oracle: the derivative of
/// the root with respect to a leaf is the sum over all paths of the product
/// of local partial derivatives.
#[derive(Clone, Copy)]
enum Sym {
    Leaf(f64),
    Add(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
}

fn sym_values(nodes: &[Sym]) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    for n in nodes {
        let x = match *n {
            Sym::Leaf(x) => x,
            Sym::Add(a, b) => v[a] + v[b],
            Sym::Mul(a, b) => v[a] * v[b],
            Sym::Tanh(a) => v[a].tanh(),
        };
        v.push(x);
    }
    v
}

fn path_sum(nodes: &[Sym], vals: &[f64], from: usize, to: usize) -> f64 {
    if from == to {
        return 1.0;
    }
    // local partials of `to` w.r.t. each of its inputs (one entry per edge)
    let edges: Vec<(usize, f64)> = match nodes[to] {
        Sym::Leaf(_) => vec![],
        Sym::Add(a, b) => vec![(a, 1.0), (b, 1.0)],
        Sym::Mul(a, b) => vec![(a, vals[b]), (b, vals[a])],
        Sym::Tanh(a) => vec![(a, 1.0 - vals[to] * vals[to])],
    };
    edges
        .into_iter()
        .map(|(input, d)| d * path_sum(nodes, vals, from, input))
        .sum()
}

fn build_engine(nodes: &[Sym]) -> (Graph, Vec<Tensor>) {
    let mut g = Graph::new();
    let mut ts: Vec<Tensor> = Vec::new();
    for n in nodes {
        let t = match *n {
            Sym::Leaf(x) => g.variable(Shape::scalar(), vec![x]).unwrap(),
            Sym::Add(a, b) => g.add(ts[a], ts[b]).unwrap(),
            Sym::Mul(a, b) => g.mul(ts[a], ts[b]).unwrap(),
            Sym::Tanh(a) => g.tanh(ts[a]),
        };
        ts.push(t);
    }
    (g, ts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn shared_subexpressions_sum_path_contributions(
        x in -2.0f64..2.0, y in -2.0f64..2.0,
        shape in prop::collection::vec((0u8..3, any::<prop::sample::Index>(), any::<prop::sample::Index>()), 4),
    ) {
        // two leaves plus four interior nodes referring to earlier nodes
        let mut nodes = vec![Sym::Leaf(x), Sym::Leaf(y)];
        for (kind, a, b) in shape {
            let n = nodes.len();
            let (a, b) = (a.index(n), b.index(n));
            nodes.push(match kind {
                0 => Sym::Add(a, b),
                1 => Sym::Mul(a, b),
                _ => Sym::Tanh(a),
            });
        }
        let vals = sym_values(&nodes);
        let root = nodes.len() - 1;
        let (mut g, ts) = build_engine(&nodes);
        g.backward(ts[root]).unwrap();
        for (leaf, &t) in ts.iter().enumerate().take(2) {
            let oracle = path_sum(&nodes, &vals, leaf, root);
            let got = g.grad(t).map(|v| v[0]).unwrap_or(0.0);
            prop_assert!((got - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()), "{} vs {}", got, oracle);
        }
    }
}

#[test]
fn one_hot_places_single_one() {
    assert_eq!(one_hot(1, 3), vec![0.0, 1.0, 0.0]);
}
