use hra_core::gradcheck::grad_check;
use hra_core::graph::{Graph, NodeId};
use hra_core::rng::SplitMix64;
use hra_core::tensor::Tensor;
use hra_core::Result;
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rand(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(shape, -1.5, 1.5, rng)
}

/// Entries bounded away from zero so finite differences never straddle a kink.
fn off_zero(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    rand(shape, rng).map(|v| if v < 0.0 { v - 0.05 } else { v + 0.05 })
}

/// `sum(x ⊙ w)` for a fixed random `w`, so every output entry gets its own
/// upstream weight.
fn weighted(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let w = g.constant(rand(g.value(x).shape(), &mut rng));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check<F>(build: F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    grad_check(build, params, EPS).expect("grad_check runs")
}

fn dim() -> impl Strategy<Value = usize> {
    1usize..=8
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_and_transposed_matmul(seed in any::<u64>(), m in dim(), k in dim(), n in dim()) {
        let mut rng = SplitMix64::new(seed);
        let a = rand(&[m, k], &mut rng);
        let b = rand(&[k, n], &mut rng);
        let bt = rand(&[n, k], &mut rng);
        let e1 = check(|g, p| { let y = g.matmul(p[0], p[1])?; weighted(g, y, seed) }, &[a.clone(), b]);
        let e2 = check(|g, p| { let y = g.matmul_t(p[0], p[1])?; weighted(g, y, seed) }, &[a, bt]);
        prop_assert!(e1 <= TOL, "matmul {e1}");
        prop_assert!(e2 <= TOL, "matmul_t {e2}");
    }

    #[test]
    fn add_and_mul_with_broadcast(seed in any::<u64>(), r in dim(), c in dim()) {
        let mut rng = SplitMix64::new(seed);
        let x = rand(&[r, c], &mut rng);
        let y = rand(&[r, c], &mut rng);
        let v = rand(&[c], &mut rng);
        for (rhs, name) in [(y, "same shape"), (v, "broadcast")] {
            let e_add = check(|g, p| { let s = g.add(p[0], p[1])?; weighted(g, s, seed) }, &[x.clone(), rhs.clone()]);
            let e_mul = check(|g, p| { let s = g.mul(p[0], p[1])?; weighted(g, s, seed) }, &[x.clone(), rhs]);
            prop_assert!(e_add <= TOL, "add {name} {e_add}");
            prop_assert!(e_mul <= TOL, "mul {name} {e_mul}");
        }
    }

    #[test]
    fn pointwise_ops(seed in any::<u64>(), r in dim(), c in dim(), scale in -3.0f64..3.0, shift in -1.0f64..1.0) {
        let mut rng = SplitMix64::new(seed);
        let x = off_zero(&[r, c], &mut rng);
        type Op = fn(&mut Graph, NodeId, f64, f64) -> NodeId;
        let ops: [(&str, Op); 5] = [
            ("relu", |g, x, _, _| g.relu(x)),
            ("tanh", |g, x, _, _| g.tanh(x)),
            ("sigmoid", |g, x, _, _| g.sigmoid(x)),
            ("scale", |g, x, s, _| g.scale(x, s)),
            ("affine", |g, x, s, t| g.affine(x, s, t)),
        ];
        for (name, op) in ops {
            let e = check(|g, p| { let y = op(g, p[0], scale, shift); weighted(g, y, seed) }, &[x.clone()]);
            prop_assert!(e <= TOL, "{name} {e}");
        }
    }

    #[test]
    fn reductions_and_selection(seed in any::<u64>(), r in dim(), c in dim(), k in 1usize..=5) {
        let mut rng = SplitMix64::new(seed);
        let x = rand(&[r, c], &mut rng);
        let e_sum = check(|g, p| { let t = g.tanh(p[0]); Ok(g.sum(t)) }, &[x.clone()]);
        let e_mean = check(|g, p| { let t = g.tanh(p[0]); let m = g.mean(t); Ok(g.scale(m, 3.0)) }, &[x.clone()]);
        let e_lsm = check(|g, p| { let y = g.log_softmax(p[0]); weighted(g, y, seed) }, &[x.clone()]);
        let idx = rng.below(r * c);
        let e_pick = check(|g, p| { let t = g.tanh(p[0]); let y = g.pick(t, idx)?; Ok(g.scale(y, 2.0)) }, &[x.clone()]);
        let e_lse = check(
            |g, p| {
                let picks = (0..k.min(r * c)).map(|i| g.pick(p[0], i)).collect::<Result<Vec<_>>>()?;
                g.log_sum_exp(&picks)
            },
            &[x.clone()],
        );
        let e_all = check(
            |g, p| {
                let a = g.pick(p[0], 0)?;
                let b = g.sum(p[0]);
                let b = g.tanh(b);
                g.add_all(&[a, b, a])
            },
            &[x],
        );
        for (name, e) in [("sum", e_sum), ("mean", e_mean), ("log_softmax", e_lsm), ("pick", e_pick), ("log_sum_exp", e_lse), ("add_all", e_all)] {
            prop_assert!(e <= TOL, "{name} {e}");
        }
    }

    #[test]
    fn ctc_loss_through_log_softmax(seed in any::<u64>(), t_len in 1usize..=6, vocab in 1usize..=3) {
        let mut rng = SplitMix64::new(seed);
        let max_s = t_len.min(3);
        let s = 1 + rng.below(max_s);
        let mut labels: Vec<usize> = (0..s).map(|_| rng.below(vocab)).collect();
        // shed repeats until the sequence fits the frames
        while hra_core::ctc::min_frames(&labels) > t_len {
            labels.pop();
        }
        let x = rand(&[t_len, vocab + 1], &mut rng);
        let e = check(|g, p| { let lp = g.log_softmax(p[0]); g.ctc_loss(lp, &labels) }, &[x]);
        prop_assert!(e <= TOL, "ctc {e}");
    }

    #[test]
    fn gradients_are_linear_across_graphs(seed in any::<u64>(), r in dim(), c in dim()) {
        let mut rng = SplitMix64::new(seed);
        let a = rand(&[r, c], &mut rng);
        let b = rand(&[c], &mut rng);
        // each parameter has a single consumer inside each subgraph
        let first = |g: &mut Graph, a: NodeId, _b: NodeId| -> Result<NodeId> {
            let t = g.tanh(a);
            weighted(g, t, seed)
        };
        let second = |g: &mut Graph, a: NodeId, b: NodeId| -> Result<NodeId> {
            let s = g.mul(a, b)?;
            let s = g.sigmoid(s);
            weighted(g, s, seed.wrapping_add(1))
        };
        let run = |both: bool, which: usize| {
            let mut g = Graph::new();
            let pa = g.param(a.clone());
            let pb = g.param(b.clone());
            let loss = if both {
                let l1 = first(&mut g, pa, pb).unwrap();
                let l2 = second(&mut g, pa, pb).unwrap();
                g.add(l1, l2).unwrap()
            } else if which == 0 {
                first(&mut g, pa, pb).unwrap()
            } else {
                second(&mut g, pa, pb).unwrap()
            };
            let grads = g.backward(loss).unwrap();
            (grads.get(pa).unwrap().clone(), grads.get(pb).unwrap().clone())
        };
        let (ja, jb) = run(true, 0);
        let (a1, b1) = run(false, 0);
        let (a2, b2) = run(false, 1);
        prop_assert_eq!(ja, a1.add(&a2).unwrap());
        prop_assert_eq!(jb, b1.add(&b2).unwrap());
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in any::<u64>(), r in dim(), c in dim()) {
        let mut rng = SplitMix64::new(seed);
        let x = rand(&[r, c], &mut rng);
        let w = rand(&[c, c], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let px = g.param(x.clone());
            let pw = g.param(w.clone());
            let h = g.matmul_t(px, pw).unwrap();
            let h = g.tanh(h);
            let y = g.log_softmax(h);
            let loss = weighted(&mut g, y, seed).unwrap();
            let grads = g.backward(loss).unwrap();
            let flat: Vec<u64> = [g.value(loss), grads.get(px).unwrap(), grads.get(pw).unwrap()]
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect();
            flat
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn outer_product_of_ones_and_input() {
    let x = Tensor::matrix(&[[0.5, -2.0, 3.0, 1.25]]);
    let mut g = Graph::new();
    let w = g.param(Tensor::zeros(&[3, 4]));
    let xc = g.constant(x.clone());
    let y = g.matmul_t(xc, w).unwrap();
    let loss = g.sum(y);
    let grad = g.backward(loss).unwrap().get(w).unwrap().clone();
    for i in 0..3 {
        assert_eq!(grad.row(i), x.row(0));
    }
}

#[test]
fn dead_relu_passes_no_gradient() {
    let mut rng = SplitMix64::new(9);
    let x = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng).map(|v| -v.abs());
    let mut g = Graph::new();
    let w = g.param(Tensor::uniform(&[3], 0.1, 1.0, &mut rng));
    let xc = g.constant(x);
    let p = g.mul(xc, w).unwrap();
    let r = g.relu(p);
    let loss = g.sum(r);
    assert_eq!(g.backward(loss).unwrap().get(w).unwrap(), &Tensor::zeros(&[3]));
}
