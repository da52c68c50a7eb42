use super::*;
use crate::field::grid::{FeatureGrid, Structure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Compares tape gradients against central differences for every input
/// element. `build` must reduce to a scalar.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let run = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
        let l = build(&mut t, &vars);
        (t, vars, l)
    };
    let (tape, vars, loss) = run(&inputs);
    let report = tape.backward(loss).unwrap();
    let h = 1e-6;
    for (k, var) in vars.iter().enumerate() {
        let grad = report.get(*var).unwrap();
        for e in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[e] -= h;
            let (tp, _, lp) = run(&plus);
            let (tm, _, lm) = run(&minus);
            let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let an = grad.data()[e];
            let tol = 1e-6 * an.abs().max(fd.abs()).max(1.0);
            assert!((an - fd).abs() <= tol, "input {k} elem {e}: analytic {an} vs fd {fd}");
        }
    }
}

#[test]
fn square_of_three() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.square(x);
    let r = t.backward(y).unwrap();
    assert_eq!(r.loss, 9.0);
    assert_eq!(r.get(x).unwrap().item(), 6.0);
}

#[test]
fn inactive_relu_has_zero_grad() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(-1.0));
    let y = t.relu(x);
    assert_eq!(t.backward(y).unwrap().get(x).unwrap().item(), 0.0);
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(0.0));
    let y = t.relu(x);
    assert_eq!(t.backward(y).unwrap().get(x).unwrap().item(), 0.0);
}

#[test]
fn loss_gradient_is_one() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.5));
    let r = t.backward(x).unwrap();
    assert_eq!(r.get(x).unwrap().item(), 1.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(2, 3));
    assert!(matches!(t.backward(x), Err(Error::NonScalarLoss { rows: 2, cols: 3, .. })));
}

#[test]
fn nan_gradient_names_node() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(0.0));
    let l = t.log(x);
    let y = t.tanh(l);
    assert_eq!(t.value(y).item(), -1.0);
    match t.backward(y) {
        Err(Error::NonFiniteGradient { node, op }) => {
            assert_eq!(op, "log");
            assert_eq!(node, l.index());
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(3, 4, 0.2, 2.0, &mut rng);
    let b = random(3, 4, 0.5, 1.5, &mut rng);
    check(vec![a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul(d, v[1]);
        let q = t.div(m, v[0]);
        let n = t.neg(q);
        let sc = t.scale(n, 1.7);
        let o = t.add_scalar(sc, 0.3);
        let sq = t.square(o);
        t.sum(sq)
    });
    check(vec![a.clone()], |t, v| {
        let l = t.log(v[0]);
        let e = t.exp(l);
        let th = t.tanh(e);
        let s = t.sqrt(v[0]);
        let p = t.mul(th, s);
        t.sum(p)
    });
    let z = random(2, 5, -2.5, 2.5, &mut rng);
    check(vec![z.clone()], |t, v| {
        let p = t.phi(v[0]);
        let d = t.pdf(v[0]);
        let m = t.mul(p, d);
        t.sum(m)
    });
}

#[test]
fn relu_and_clamp_away_from_kinks() {
    let z = Tensor::from_vec(1, 6, vec![-1.3, -0.4, 0.2, 0.9, 1.7, -2.0]);
    check(vec![z.clone()], |t, v| {
        let r = t.relu(v[0]);
        let c = t.clamp_min(v[0], 0.5);
        let m = t.mul(r, c);
        t.sum(m)
    });
}

#[test]
fn matmul_and_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(5, 3, -1.0, 1.0, &mut rng);
    let w = random(4, 3, -1.0, 1.0, &mut rng);
    let b = random(1, 4, -1.0, 1.0, &mut rng);
    let r = random(1, 4, -1.0, 1.0, &mut rng);
    check(vec![x, w, b, r], |t, v| {
        let y = t.matmul_t(v[0], v[1]);
        let y = t.add_row(y, v[2]);
        let y = t.mul_row(y, v[3]);
        let s = t.sum_rows(y);
        let q = t.square(s);
        t.sum(q)
    });
}

#[test]
fn shape_plumbing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(3, 2, -1.0, 1.0, &mut rng);
    let b = random(3, 3, -1.0, 1.0, &mut rng);
    let s = random(1, 1, -1.0, 1.0, &mut rng);
    check(vec![a, b, s], |t, v| {
        let c = t.concat_cols(&[v[0], v[1]]);
        let top = t.slice_rows(c, 0, 2);
        let bottom = t.slice_rows(c, 1, 2);
        let stacked = t.concat_rows(&[top, bottom]);
        let mid = t.slice_cols(stacked, 1, 3);
        let bs = t.broadcast(v[2], 4, 3);
        let p = t.mul(mid, bs);
        let q = t.square(p);
        t.sum(q)
    });
}

#[test]
fn gather_grads_to_store_and_coords() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in [Structure::Grid3d, Structure::PlaneXz, Structure::Line(0)] {
        let g = FeatureGrid::uniform(s, 4, 3, -1.0, 1.0, &mut rng);
        let d = g.ndim();
        // Keep coordinates away from vertices (multiples of 2/3).
        let coords: Vec<f64> = (0..5 * d).map(|i| -0.9 + 0.37 * ((i * 7) % 5) as f64 + 0.05).collect();
        let store = Tensor::from_f32(g.vertex_count(), 3, g.values());
        let c = Tensor::from_vec(5, d, coords.clone());
        let grid = g.clone();
        check(vec![store, c], move |t, v| {
            let flat = t.value(v[1]).data().to_vec();
            let plan = Arc::new(grid.gather_plan(&flat, &|a| a.to_string()).unwrap());
            let y = t.gather(v[0], Some(v[1]), plan);
            let q = t.square(y);
            t.sum(q)
        });
    }
}

#[test]
fn gather_matches_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = FeatureGrid::uniform(Structure::PlaneXy, 5, 2, -1.0, 1.0, &mut rng);
    let coords = [0.3, -0.2, -0.99, 0.71];
    let plan = Arc::new(g.gather_plan(&coords, &|a| a.to_string()).unwrap());
    let mut t = Tape::new();
    let s = t.constant(Tensor::from_f32(25, 2, g.values()));
    let y = t.gather(s, None, plan);
    for r in 0..2 {
        let want = g.interpolate(&coords[2 * r..2 * r + 2]).unwrap();
        assert_eq!(t.value(y).row(r), &want[..]);
    }
}

#[test]
fn replay_reproduces_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut t = Tape::new();
    let x = t.leaf(random(4, 3, -1.0, 1.0, &mut rng));
    let w = t.constant(random(2, 3, -1.0, 1.0, &mut rng));
    let y = t.matmul_t(x, w);
    let z = t.tanh(y);
    let p = t.phi(z);
    let _ = t.sum(p);
    let replayed = t.replay();
    for (i, v) in replayed.iter().enumerate() {
        assert_eq!(v, &t.nodes[i].value);
    }
}

#[test]
fn unreached_leaf_gets_zeros() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(2, 2));
    let b = t.leaf(Tensor::scalar(1.0));
    let r = t.backward(b).unwrap();
    assert_eq!(r.get(a).unwrap(), &Tensor::zeros(2, 2));
}

#[test]
fn reports_accumulate() {
    let build = |v: f64| {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(v));
        let y = t.square(x);
        t.backward(y).unwrap()
    };
    let mut a = build(2.0);
    a.accumulate(&build(3.0));
    assert_eq!(a.loss, 13.0);
    assert_eq!(a.leaves().next().unwrap().1.item(), 10.0);
}
