use super::*;
use crate::rng::{rand_normal, rand_uniform, Rng};

const TOL: f64 = 1e-5;

fn assert_fd<F>(params: &[Tensor], loss: F, seed: u64)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = Rng::new(seed);
    let r = check_gradients(params, loss, 200, &mut rng).unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rand_normal(rng, shape, 0.0, 1.0).unwrap()
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn probe<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = normal(&mut Rng::new(seed ^ 0xabc), &y.shape());
    y.mul(tape.leaf(w))?.sum().pipe(Ok)
}

trait Pipe: Sized {
    fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
        f(self)
    }
}
impl<T> Pipe for T {}

#[test]
fn linear_map_gradient_is_outer_pattern() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let x = tape.leaf(Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap());
    let loss = w.matmul(x).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    let dw = g.get(w).unwrap();
    assert_eq!(dw.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn sigmoid_slope_at_zero() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let g = tape.backward(x.sigmoid()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25]);
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x.exp()), Err(Error::Contract(_))));
}

#[test]
fn shared_subexpression_accumulates() {
    // f = sum(e^x · e^x) built once with a shared node and once as a tree.
    let x0 = normal(&mut Rng::new(1), &[4]);
    let shared = {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let e = x.exp();
        let g = tape.backward(e.mul(e).unwrap().sum()).unwrap();
        g.get(x).unwrap().clone()
    };
    let tree = {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.backward(x.exp().mul(x.exp()).unwrap().sum()).unwrap();
        g.get(x).unwrap().clone()
    };
    let exact = x0.map(|v| 2.0 * (2.0 * v).exp());
    assert!(shared.max_abs_diff(&tree).unwrap() < 1e-14);
    assert!(shared.max_abs_diff(&exact).unwrap() < 1e-12);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    for seed in 0..3 {
        let mut rng = Rng::new(seed);
        let ps = vec![normal(&mut rng, &[3, 4]), normal(&mut rng, &[3, 4])];
        assert_fd(
            &ps,
            |t, v| {
                let a = v[0].sigmoid().mul(v[1].silu())?;
                let b = v[0].softplus().sub(v[1].exp().affine(0.3, 1.0))?;
                probe(t, a.add(b)?.neg(), seed)
            },
            seed,
        );
    }
}

#[test]
fn matmul_and_broadcast_ops_match_finite_differences() {
    for seed in 0..3 {
        let mut rng = Rng::new(seed + 10);
        let ps = vec![
            normal(&mut rng, &[5, 3]),
            normal(&mut rng, &[3, 4]),
            normal(&mut rng, &[4]),
            normal(&mut rng, &[4]),
        ];
        assert_fd(
            &ps,
            |t, v| {
                let y = v[0].matmul(v[1])?.add_suffix(v[2])?.mul_suffix(v[3])?;
                probe(t, y.reshape(&[20])?, seed)
            },
            seed,
        );
    }
}

#[test]
fn rms_norm_matches_finite_differences_and_normalizes() {
    for seed in 0..3 {
        let mut rng = Rng::new(seed + 20);
        let ps = vec![normal(&mut rng, &[3, 8])];
        assert_fd(&ps, |t, v| probe(t, v[0].rms_norm(4, 1e-5)?, seed), seed);
    }
    let tape = Tape::new();
    let x = tape.leaf(normal(&mut Rng::new(3), &[2, 6]).scale(7.0));
    let y = x.rms_norm(6, 1e-12).unwrap();
    for row in y.value().data().chunks(6) {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 6.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-10);
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    for seed in 0..3 {
        let mut rng = Rng::new(seed + 30);
        let (m, h, k) = (6, 2, 3);
        let ps = vec![
            normal(&mut rng, &[5, k]),     // table
            normal(&mut rng, &[m, h]),     // delta
            normal(&mut rng, &[m, k]),     // theta
            normal(&mut rng, &[h, 2, k]),  // rank weights
            normal(&mut rng, &[k, 4]),     // conv kernel
            normal(&mut rng, &[k]),        // conv bias
        ];
        assert_fd(
            &ps,
            |t, v| {
                let rows = v[0].gather_rows(&[0, 3, 3, 1, 4, 2])?;
                let conv = rows.causal_conv(v[4], v[5], 2)?;
                let outer = v[1].head_outer(conv)?.cumsum_time(2)?;
                let wide = outer.rank_expand(v[3])?;
                let back = wide.silu().rank_contract(v[3])?;
                let bc = v[2].head_broadcast(h)?;
                probe(t, back.mul(bc)?, seed)
            },
            seed,
        );
    }
}

#[test]
fn rope_matches_finite_differences() {
    for seed in 0..3 {
        let mut rng = Rng::new(seed + 40);
        let ps = vec![normal(&mut rng, &[3, 2, 8]), normal(&mut rng, &[3, 2, 2])];
        for sign in [1.0, -1.0] {
            assert_fd(&ps, |t, v| probe(t, v[0].rope(v[1], sign)?, seed), seed);
        }
    }
}

#[test]
fn cross_entropy_matches_finite_differences() {
    for seed in 0..3 {
        let mut rng = Rng::new(seed + 50);
        let ps = vec![normal(&mut rng, &[4, 5])];
        assert_fd(&ps, |_, v| v[0].cross_entropy(&[0, 4, 2, 2]), seed);
    }
    let tape = Tape::new();
    let l = tape.leaf(Tensor::zeros(&[3, 7])).cross_entropy(&[1, 2, 3]).unwrap();
    assert!((l.item() - 7f64.ln()).abs() < 1e-14);
}

fn scan_params(rng: &mut Rng, d: ScanDims) -> Vec<Tensor> {
    let rows = d.batch * d.time;
    vec![
        rand_uniform(rng, &[rows, d.heads], 0.5, 1.0).unwrap(),
        rand_uniform(rng, &[rows, d.heads], 0.0, 0.4).unwrap(),
        rand_uniform(rng, &[rows, d.heads], 0.1, 0.6).unwrap(),
        normal(rng, &[rows, d.heads, d.rank * d.state]),
        normal(rng, &[rows, d.heads, d.rank * d.state]),
        normal(rng, &[rows, d.heads, d.rank * d.head_dim]),
    ]
}

fn run_scan<'t>(v: &[Var<'t>], d: ScanDims, three: bool) -> Result<Var<'t>> {
    ScanInputs {
        alpha: v[0],
        beta: three.then_some(v[1]),
        gamma: v[2],
        b: v[3],
        c: v[4],
        x: v[5],
    }
    .apply(d)
}

#[test]
fn scan_matches_reference_forward() {
    let mut rng = Rng::new(61);
    let d = ScanDims { batch: 2, time: 9, heads: 2, state: 4, head_dim: 3, rank: 1 };
    let ps = scan_params(&mut rng, d);
    let tape = Tape::new();
    let v: Vec<_> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
    let y = run_scan(&v, d, true).unwrap();
    let (bt, head) = (1, 1);
    let pick = |t: &Tensor, w: usize| {
        Tensor::from_fn(&[d.time, w], |k| {
            let (s, i) = (k / w, k % w);
            t.data()[((bt * d.time + s) * d.heads + head) * w + i]
        })
    };
    let co: Vec<_> = (0..d.time)
        .map(|s| {
            let k = (bt * d.time + s) * d.heads + head;
            crate::discretize::DiscreteCoeffs::new(ps[0].data()[k], ps[1].data()[k], ps[2].data()[k])
        })
        .collect();
    let want = crate::ssm::scan_three_term(&co, &pick(&ps[3], 4), &pick(&ps[4], 4), &pick(&ps[5], 3), None).unwrap();
    assert!(pick(&y.value(), 3).max_abs_diff(&want.y).unwrap() < 1e-12);
}

#[test]
fn scan_adjoint_matches_finite_differences() {
    for (seed, rank) in [(0, 1), (1, 1), (2, 3)] {
        let mut rng = Rng::new(seed + 70);
        let d = ScanDims { batch: 2, time: 7, heads: 2, state: 4, head_dim: 3, rank };
        let ps = scan_params(&mut rng, d);
        for three in [false, true] {
            assert_fd(&ps, |t, v| probe(t, run_scan(v, d, three)?, seed), seed);
        }
    }
}

#[test]
fn cumulative_sum_adjoint() {
    // α = γ = 1, β = 0, B = C = e₁: y_t = Σ_{s≤t} x_s, so ∂y_T/∂x_s = 1.
    let t = 6;
    let d = ScanDims { batch: 1, time: t, heads: 1, state: 2, head_dim: 1, rank: 1 };
    let e1 = Tensor::from_fn(&[t, 1, 2], |k| if k % 2 == 0 { 1.0 } else { 0.0 });
    let tape = Tape::new();
    let ones = tape.leaf(Tensor::ones(&[t, 1]));
    let zero = tape.leaf(Tensor::zeros(&[t, 1]));
    let b = tape.leaf(e1.clone());
    let c = tape.leaf(e1);
    let x = tape.leaf(normal(&mut Rng::new(2), &[t, 1, 1]));
    let y = ScanInputs { alpha: ones, beta: Some(zero), gamma: ones, b, c, x }.apply(d).unwrap();
    let last = y.reshape(&[t, 1]).unwrap().gather_rows(&[t - 1]).unwrap().sum();
    let g = tape.backward(last).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

    // Causality: ∂y_2/∂x_s = 0 for s > 2.
    let tape = Tape::new();
    let v: Vec<_> = scan_params(&mut Rng::new(5), d).into_iter().map(|p| tape.leaf(p)).collect();
    let y = run_scan(&v, d, true).unwrap();
    let g = tape.backward(y.reshape(&[t, 1]).unwrap().gather_rows(&[2]).unwrap().sum()).unwrap();
    let dx = g.get(v[5]).unwrap();
    assert!(dx.data()[3..].iter().all(|&z| z == 0.0));
    assert!(dx.data()[..3].iter().any(|&z| z != 0.0));
}

#[test]
fn rope_rotated_scan_theta_gradient() {
    // Angles Δθ accumulated in time, rotate B and C, then scan.
    let mut rng = Rng::new(81);
    let (bt, t, h, n, p) = (1, 6, 2, 4, 2);
    let d = ScanDims { batch: bt, time: t, heads: h, state: n, head_dim: p, rank: 1 };
    let mut ps = scan_params(&mut rng, d);
    ps.push(normal(&mut rng, &[t, n / 2])); // theta
    ps.push(rand_uniform(&mut rng, &[t, h], 0.1, 0.8).unwrap()); // delta
    assert_fd(
        &ps,
        |tape, v| {
            let cum = v[7].head_outer(v[6])?.cumsum_time(bt)?;
            let b = v[3].rope(cum, -1.0)?;
            let c = v[4].rope(cum, -1.0)?;
            let y = ScanInputs { alpha: v[0], beta: Some(v[1]), gamma: v[2], b, c, x: v[5] }.apply(d)?;
            probe(tape, y, 3)
        },
        81,
    );
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut p = Tensor::from_vec(vec![1.0, -2.0]);
    let g = Tensor::zeros(&[2]);
    let mut st = AdamState::new();
    adam_step(&mut [&mut p], &[g], &mut st, &AdamConfig::default()).unwrap();
    assert_eq!(p.data(), &[1.0, -2.0]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = Tensor::from_vec(vec![0.0, 0.0]);
    let g = Tensor::from_vec(vec![3.0, -0.2]);
    let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
    adam_step(&mut [&mut p], &[g], &mut AdamState::new(), &cfg).unwrap();
    assert!((p.data()[0] + 0.01).abs() < 1e-8);
    assert!((p.data()[1] - 0.01).abs() < 1e-7);
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let target = Tensor::from_vec(vec![1.5, -0.5, 3.0]);
    let mut p = Tensor::zeros(&[3]);
    let mut st = AdamState::new();
    let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
    for _ in 0..5000 {
        let g = p.zip_with(&target, |a, b| 2.0 * (a - b)).unwrap();
        adam_step(&mut [&mut p], &[g], &mut st, &cfg).unwrap();
    }
    let err = p.max_abs_diff(&target).unwrap();
    assert!(err < 1e-6, "{err}");
}
