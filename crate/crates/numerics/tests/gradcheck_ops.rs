//! Finite-difference checks for every tape op kind over 20 random seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlfb_numerics::gradcheck::check_gradients;
use rlfb_numerics::{Tape, Tensor, Var};

const SEEDS: u64 = 20;
const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn run<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, 1.0)).collect();
        let report = check_gradients(f, &inputs, STEP);
        assert!(
            report.max_rel_err < TOL,
            "{name} seed {seed}: {report:?}"
        );
    }
}

// A fixed random projection turns any tensor into a scalar with nonuniform
// upstream adjoints, so each op is checked against a generic cotangent.
fn weighted_sum<'t>(tape: &'t Tape, x: Var<'t>) -> Var<'t> {
    let v = x.value();
    let w: Vec<f64> = (0..v.numel()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    let w = tape.constant(Tensor::new(v.shape().to_vec(), w).unwrap());
    x.mul(&w).sum()
}

#[test]
fn matmul() {
    run("matmul", &[&[3, 4], &[4, 5]], |t, v| weighted_sum(t, v[0].matmul(&v[1])));
}

#[test]
fn matmul_nt() {
    run("matmul_nt", &[&[3, 4], &[5, 4]], |t, v| weighted_sum(t, v[0].matmul_nt(&v[1])));
}

#[test]
fn add_sub_mul() {
    run("add_sub_mul", &[&[2, 3], &[2, 3], &[2, 3]], |t, v| {
        weighted_sum(t, v[0].add(&v[1]).mul(&v[2]).sub(&v[1]))
    });
}

#[test]
fn add_row_and_scale() {
    run("add_row", &[&[4, 3], &[3]], |t, v| {
        weighted_sum(t, v[0].add_row(&v[1]).scale(-1.7).add_scalar(0.3))
    });
}

#[test]
fn tanh_exp_ln() {
    run("tanh_exp_ln", &[&[2, 4]], |t, v| {
        // exp keeps ln's input positive
        weighted_sum(t, v[0].tanh().exp().ln().add(&v[0].exp()))
    });
}

#[test]
fn log_sigmoid() {
    run("log_sigmoid", &[&[6]], |t, v| weighted_sum(t, v[0].scale(4.0).log_sigmoid()));
}

#[test]
fn softmax_rows() {
    run("softmax", &[&[3, 5]], |t, v| weighted_sum(t, v[0].scale(2.0).softmax_rows(false)));
}

#[test]
fn causal_softmax_rows() {
    run("causal_softmax", &[&[4, 4]], |t, v| weighted_sum(t, v[0].softmax_rows(true)));
}

#[test]
fn log_softmax_rows() {
    run("log_softmax", &[&[3, 6]], |t, v| weighted_sum(t, v[0].scale(3.0).log_softmax_rows()));
}

#[test]
fn gather_and_pick() {
    run("gather_pick", &[&[5, 4]], |t, v| {
        let g = v[0].gather_rows(&[4, 0, 4, 2]);
        weighted_sum(t, g.log_softmax_rows().pick(&[1, 3, 0, 0]))
    });
}

#[test]
fn concat_rows() {
    run("concat", &[&[2, 3], &[1, 3]], |t, v| {
        weighted_sum(t, Var::concat_rows(&[v[0], v[1], v[0]]).tanh())
    });
}

#[test]
fn sum_and_mean() {
    run("sum_mean", &[&[3, 3]], |_, v| {
        let a = v[0].mul(&v[0]).sum();
        let b = v[0].tanh().mean();
        a.add(&b)
    });
}

#[test]
fn minimum_and_clamp() {
    // random inputs land away from the kinks with probability one
    run("min_clamp", &[&[8], &[8]], |t, v| {
        let c = v[0].scale(2.0).clamp(-0.8, 0.9);
        weighted_sum(t, c.minimum(&v[1]))
    });
}

#[test]
fn composite_attention_block() {
    run("attention", &[&[4, 3], &[3, 3], &[3, 3], &[5, 3]], |t, v| {
        let q = v[0].matmul(&v[1]);
        let k = v[4 - 1].matmul(&v[2]);
        let a = q.matmul_nt(&k).softmax_rows(false);
        let ctx = a.matmul(&k).tanh();
        weighted_sum(t, ctx.log_softmax_rows())
    });
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let a = rand_tensor(&mut rng, &[4, 6], 1.0);
    let b = rand_tensor(&mut rng, &[6, 3], 1.0);
    let grads = || {
        let tape = Tape::new();
        let va = tape.param(std::sync::Arc::new(a.clone()));
        let vb = tape.param(std::sync::Arc::new(b.clone()));
        let loss = va.matmul(&vb).tanh().log_softmax_rows().pick(&[0, 1, 2, 0]).sum();
        let g = tape.backward(loss).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        (bits(g.wrt(va).unwrap()), bits(g.wrt(vb).unwrap()))
    };
    assert_eq!(grads(), grads());
}
