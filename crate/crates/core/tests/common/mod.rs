#![allow(dead_code)]

use mire::tensor::{Tape, Tensor, Var};
use mire::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Scalar objective: builds the graph from fresh leaves and reduces any
/// non-scalar output with fixed random weights so the full Jacobian is probed.
pub fn objective<F>(f: &F, inputs: &[Tensor], weights_seed: u64) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let shape = tape.shape(out);
    let root = if shape.iter().product::<usize>() == 1 && shape.len() <= 1 {
        tape.sum(out)?
    } else {
        let mut r = rng(weights_seed);
        let w = rand_tensor(&mut r, &shape, -1.0, 1.0);
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv)?;
        tape.sum(prod)?
    };
    Ok((tape, vars, root))
}

/// Norm-wise relative error between the tape gradient and a central
/// difference with step `h`, over all inputs.
pub fn gradcheck<F>(f: F, inputs: Vec<Tensor>, h: f64) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, root) = objective(&f, &inputs, 77).unwrap();
    let grads = tape.backward(root).unwrap();
    let mut diff2 = 0.0;
    let mut norm2 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fp = eval(&f, &plus);
            let fm = eval(&f, &minus);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            diff2 += (a - numeric) * (a - numeric);
            norm2 += a * a + numeric * numeric;
        }
    }
    diff2.sqrt() / norm2.sqrt().max(1e-12)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, root) = objective(f, inputs, 77).unwrap();
    tape.value(root).item()
}
