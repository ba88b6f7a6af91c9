mod common;

use common::{gradcheck, rand_tensor, rng};
use mire::tensor::{Tape, Tensor, Var};
use mire::{MireError, Result};

const TRIALS: u64 = 20;
const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn check<F>(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, f: F)
where
    F: Fn(&Tape, &[Var]) -> Result<Var> + Copy,
{
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut r = rng(1000 + trial);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut r, s, lo, hi)).collect();
        worst = worst.max(gradcheck(f, inputs, H));
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn gradcheck_elementwise() {
    check("add", &[&[2, 3], &[2, 3]], -1.0, 1.0, |t, v| t.add(v[0], v[1]));
    check("sub", &[&[2, 3], &[2, 3]], -1.0, 1.0, |t, v| t.sub(v[0], v[1]));
    check("mul", &[&[2, 3], &[2, 3]], -1.0, 1.0, |t, v| t.mul(v[0], v[1]));
    check("div", &[&[2, 3], &[2, 3]], 0.5, 2.0, |t, v| t.div(v[0], v[1]));
    check("exp", &[&[2, 3]], -1.0, 1.0, |t, v| t.exp(v[0]));
    check("relu", &[&[2, 3]], -1.0, 1.0, |t, v| t.relu(v[0]));
    check("scalar ops", &[&[2, 3]], -1.0, 1.0, |t, v| {
        let a = t.mul_scalar(v[0], -2.5)?;
        t.add_scalar(a, 0.75)
    });
}

#[test]
fn gradcheck_broadcast() {
    check("add_row", &[&[2, 3], &[3]], -1.0, 1.0, |t, v| t.add_row(v[0], v[1]));
    check("add_col", &[&[2, 3], &[2]], -1.0, 1.0, |t, v| t.add_col(v[0], v[1]));
    check("mul_row", &[&[2, 3], &[3]], -1.0, 1.0, |t, v| t.mul_row(v[0], v[1]));
    check("mul_col", &[&[2, 3], &[2]], -1.0, 1.0, |t, v| t.mul_col(v[0], v[1]));
}

#[test]
fn gradcheck_linear_algebra() {
    check("matmul", &[&[2, 3], &[3, 4]], -1.0, 1.0, |t, v| t.matmul(v[0], v[1]));
    check("transpose", &[&[2, 3]], -1.0, 1.0, |t, v| t.transpose(v[0]));
    check("reshape", &[&[2, 3]], -1.0, 1.0, |t, v| t.reshape(v[0], &[3, 2]));
    check("concat0", &[&[2, 3], &[1, 3]], -1.0, 1.0, |t, v| t.concat(&[v[0], v[1]], 0));
    check("concat1", &[&[2, 3], &[2, 2]], -1.0, 1.0, |t, v| t.concat(&[v[0], v[1]], 1));
    check("select_rows", &[&[3, 2]], -1.0, 1.0, |t, v| t.select_rows(v[0], &[2, 0, 2]));
    check("pick_per_row", &[&[2, 3]], -1.0, 1.0, |t, v| t.pick_per_row(v[0], &[1, 2]));
}

#[test]
fn gradcheck_reductions() {
    check("sum", &[&[2, 3]], -1.0, 1.0, |t, v| t.sum(v[0]));
    check("mean", &[&[2, 3]], -1.0, 1.0, |t, v| t.mean(v[0]));
    check("mean_axis0", &[&[2, 3]], -1.0, 1.0, |t, v| t.mean_axis(v[0], 0));
    check("mean_axis1", &[&[2, 3]], -1.0, 1.0, |t, v| t.mean_axis(v[0], 1));
    check("row_norm", &[&[2, 3]], -1.0, 1.0, |t, v| t.row_norm(v[0]));
}

#[test]
fn gradcheck_probabilistic() {
    check("softmax", &[&[2, 3]], -2.0, 2.0, |t, v| t.softmax(v[0]));
    check("log_softmax", &[&[2, 3]], -2.0, 2.0, |t, v| t.log_softmax(v[0]));
    check("cross_entropy", &[&[2, 3]], -2.0, 2.0, |t, v| t.cross_entropy(v[0], &[2, 0]));
}

#[test]
fn gradcheck_similarity() {
    check("cosine", &[&[2, 3], &[4, 3]], -1.0, 1.0, |t, v| t.cosine(v[0], v[1]));
    check("cosine_rows", &[&[2, 3], &[2, 3]], -1.0, 1.0, |t, v| t.cosine_rows(v[0], v[1]));
    check("sq_dist", &[&[2, 3], &[4, 3]], -1.0, 1.0, |t, v| t.sq_dist(v[0], v[1]));
    check("sym_normalize", &[&[4, 4]], 0.0, 1.0, |t, v| t.sym_normalize(v[0]));
}

#[test]
fn gradcheck_spatial() {
    check("conv2d pad1", &[&[2, 2, 5, 4], &[3, 2, 3, 3], &[3]], -1.0, 1.0, |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 1)
    });
    check("conv2d stride2", &[&[1, 2, 5, 5], &[2, 2, 3, 3], &[2]], -1.0, 1.0, |t, v| {
        t.conv2d(v[0], v[1], v[2], 2, 0)
    });
    check("maxpool2", &[&[2, 2, 4, 4]], -1.0, 1.0, |t, v| t.maxpool2(v[0]));
    check("global_avg_pool", &[&[2, 3, 2, 2]], -1.0, 1.0, |t, v| t.global_avg_pool(v[0]));
}

#[test]
fn gradcheck_composition() {
    check("mlp", &[&[2, 3], &[3, 4], &[4]], -1.0, 1.0, |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let h = t.relu(h)?;
        let s = t.softmax(h)?;
        t.cosine(s, h)
    });
}

#[test]
fn elementwise_mul_example() {
    let t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
    assert_eq!(t.value(t.mul(a, b).unwrap()).data(), &[3.0, 8.0]);
}

#[test]
fn softmax_uniform_and_normalized() {
    let t = Tape::new();
    let x = t.constant(Tensor::new(&[1, 3], vec![0.0; 3]).unwrap());
    let s = t.value(t.softmax(x).unwrap());
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let mut r = rng(5);
    for _ in 0..50 {
        let x = t.constant(rand_tensor(&mut r, &[4, 6], -30.0, 30.0));
        let s = t.value(t.softmax(x).unwrap());
        for i in 0..4 {
            let row = s.row(i);
            assert!(row.iter().all(|&v| v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn square_sum_gradient() {
    let t = Tape::new();
    let x = t.var(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = t.mul(x, x).unwrap();
    let root = t.sum(sq).unwrap();
    let g = t.backward(root).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn cross_entropy_uniform_logits_gradient() {
    // d CE / d logits = softmax - onehot = [1/3 - 1, 1/3, 1/3]
    let t = Tape::new();
    let x = t.var(Tensor::new(&[1, 3], vec![0.7; 3]).unwrap());
    let loss = t.cross_entropy(x, &[0]).unwrap();
    let g = t.backward(loss).unwrap();
    let expect = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
    for (a, b) in g.get(x).unwrap().data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((t.value(loss).item() - 3f64.ln()).abs() < 1e-14);
}

#[test]
fn backward_requires_scalar_root() {
    let t = Tape::new();
    let x = t.var(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(MireError::Contract(_))));
}

#[test]
fn shape_mismatch_names_op() {
    let t = Tape::new();
    let a = t.var(Tensor::zeros(&[2, 3]));
    let b = t.var(Tensor::zeros(&[3, 2]));
    match t.add(a, b) {
        Err(MireError::Shape { op, detail }) => {
            assert_eq!(op, "add");
            assert!(detail.contains("[2, 3]") && detail.contains("[3, 2]"));
        }
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
    assert!(t.matmul(a, a).is_err());
}

#[test]
fn overflow_is_numeric_error() {
    let t = Tape::new();
    let x = t.var(Tensor::from_vec(vec![1000.0]));
    assert!(matches!(t.exp(x), Err(MireError::Numeric { op: "exp", .. })));
}

#[test]
fn backward_is_linear_over_independent_graphs() {
    let mut r = rng(11);
    let a0 = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let b0 = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let build_a = |t: &Tape, a: Var| -> Var {
        let s = t.softmax(a).unwrap();
        let m = t.mul(s, a).unwrap();
        t.sum(m).unwrap()
    };
    let build_b = |t: &Tape, b: Var| -> Var {
        let e = t.exp(b).unwrap();
        t.mean(e).unwrap()
    };
    let t = Tape::new();
    let (a, b) = (t.var(a0.clone()), t.var(b0.clone()));
    let joint = t.add(build_a(&t, a), build_b(&t, b)).unwrap();
    let gj = t.backward(joint).unwrap();

    let ta = Tape::new();
    let a1 = ta.var(a0);
    let ra = build_a(&ta, a1);
    let ga = ta.backward(ra).unwrap();
    let tb = Tape::new();
    let b1 = tb.var(b0);
    let rb = build_b(&tb, b1);
    let gb = tb.backward(rb).unwrap();
    assert_eq!(gj.get(a).unwrap(), ga.get(a1).unwrap());
    assert_eq!(gj.get(b).unwrap(), gb.get(b1).unwrap());
}

#[test]
fn identical_inputs_are_bit_identical() {
    let run = || {
        let mut r = rng(99);
        let t = Tape::new();
        let x = t.var(rand_tensor(&mut r, &[2, 2, 6, 6], -1.0, 1.0));
        let w = t.var(rand_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0));
        let b = t.var(rand_tensor(&mut r, &[3], -1.0, 1.0));
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let y = t.maxpool2(y).unwrap();
        let y = t.global_avg_pool(y).unwrap();
        let root = t.cross_entropy(y, &[0, 2]).unwrap();
        let g = t.backward(root).unwrap();
        (t.value(root).item().to_bits(), g.get(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn cosine_guards_zero_vectors() {
    let t = Tape::new();
    let a = t.var(Tensor::zeros(&[1, 3]));
    let b = t.var(Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap());
    let c = t.cosine(a, b).unwrap();
    assert_eq!(t.value(c).item(), 0.0);
    let root = t.sum(c).unwrap();
    let g = t.backward(root).unwrap();
    assert!(g.get(a).unwrap().is_finite());
}
