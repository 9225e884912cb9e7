//! Test-only oracles that stay independent of the code they check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweetexit::{Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Elementwise relative error with a 1e-6 floor on the denominator, so
/// near-zero gradients are judged by absolute error.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Builds `sum(op(inputs) ⊙ w)` for a fixed random projection `w`, then
/// compares reverse-mode gradients of every input against central finite
/// differences. Returns the worst relative error over all inputs.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, op: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut r = rng(seed);
    let eval = |vals: &[Tensor], proj: Option<&Tensor>| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = op(&mut tape, &vars);
        let w = match proj {
            Some(w) => w.clone(),
            None => return (0.0, Some(tape.value(out).clone())),
        };
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        (tape.value(loss).data()[0], None)
    };
    let out_shape = eval(inputs, None).1.unwrap().shape().to_vec();
    let w = uniform_tensor(&mut r, &out_shape, -1.0, 1.0);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op(&mut tape, &vars);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Tensor::zeros(input.shape());
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            let fp = eval(&plus, Some(&w)).0;
            let fm = eval(&minus, Some(&w)).0;
            numeric.data_mut()[j] = (fp - fm) / (2.0 * FD_EPS);
        }
        let analytic = grads.get(vars[i]).unwrap();
        worst = worst.max(max_rel_err(analytic, &numeric));
    }
    worst
}

/// Finite-difference gradient of an arbitrary scalar function.
pub fn numeric_grad<F: Fn(&Tensor) -> f64>(x: &Tensor, f: F) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for j in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[j] += FD_EPS;
        let mut m = x.clone();
        m.data_mut()[j] -= FD_EPS;
        g.data_mut()[j] = (f(&p) - f(&m)) / (2.0 * FD_EPS);
    }
    g
}

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One randomized case per differentiable op family, with shapes drawn from
/// `seed`. Inputs are uniform in [-2, 2].
pub fn op_cases(seed: u64) -> Vec<(String, Vec<Tensor>, OpFn)> {
    let mut r = rng(seed);
    let mut dim = |lo: usize, hi: usize| r.random_range(lo..=hi);
    let (m, k, n, b) = (dim(1, 4), dim(1, 5), dim(1, 4), dim(1, 3));
    let rows = dim(1, 4);
    let cols = dim(2, 6);
    let classes = dim(2, 5);
    let batch = dim(1, 4);
    let labels: Vec<usize> = (0..batch).map(|i| (i * 7 + seed as usize) % classes).collect();
    let gather_src = dim(2, 8);
    let gather_index: Vec<usize> = (0..dim(1, 10)).map(|i| (i * 5 + 1) % gather_src).collect();
    let axis = dim(0, 1);

    let mut r = rng(seed ^ 0xABCD);
    let mut u = |shape: &[usize]| uniform_tensor(&mut r, shape, -2.0, 2.0);
    let mut gain = u(&[cols]);
    for g in gain.data_mut() {
        *g += if *g >= 0.0 { 0.5 } else { -0.5 };
    }
    let mut cases: Vec<(String, Vec<Tensor>, OpFn)> = vec![
        (
            format!("matmul {m}x{k}·{k}x{n}"),
            vec![u(&[m, k]), u(&[k, n])],
            Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            format!("batched matmul {b}x{m}x{k}·{b}x{k}x{n}"),
            vec![u(&[b, m, k]), u(&[b, k, n])],
            Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            format!("shared matmul {b}x{m}x{k}·{k}x{n}"),
            vec![u(&[b, m, k]), u(&[k, n])],
            Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap()),
        ),
        (
            format!("broadcast add {rows}x{cols}+{cols}"),
            vec![u(&[rows, cols]), u(&[cols])],
            Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap()),
        ),
        (
            format!("mul {rows}x{cols}"),
            vec![u(&[rows, cols]), u(&[rows, cols])],
            Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]).unwrap()),
        ),
        (
            format!("scale {rows}x{cols}"),
            vec![u(&[rows, cols])],
            Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7)),
        ),
        (
            format!("gelu {rows}x{cols}"),
            vec![u(&[rows, cols])],
            Box::new(|t: &mut Tape, v: &[Var]| t.gelu(v[0])),
        ),
        (
            format!("softmax axis {axis} of {rows}x{cols}"),
            vec![u(&[rows, cols])],
            Box::new(move |t: &mut Tape, v: &[Var]| t.softmax(v[0], axis).unwrap()),
        ),
        (
            format!("layernorm {rows}x{cols}"),
            vec![u(&[rows, cols]), gain, u(&[cols])],
            Box::new(|t: &mut Tape, v: &[Var]| t.layernorm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        (
            format!("gather {} of {gather_src}", gather_index.len()),
            vec![u(&[gather_src])],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let n = gather_index.len();
                t.gather(v[0], gather_index.clone(), vec![n]).unwrap()
            }),
        ),
        (
            format!("transpose {b}x{m}x{k}"),
            vec![u(&[b, m, k])],
            Box::new(|t: &mut Tape, v: &[Var]| t.transpose_last2(v[0]).unwrap()),
        ),
        (
            format!("cross-entropy {batch}x{classes}"),
            vec![u(&[batch, classes])],
            Box::new(move |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &labels).unwrap()),
        ),
        (
            format!("sum {rows}x{cols}"),
            vec![u(&[rows, cols])],
            Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0])),
        ),
    ];
    cases.push((
        format!("reshape {rows}x{cols}"),
        vec![u(&[rows, cols])],
        Box::new(move |t: &mut Tape, v: &[Var]| t.reshape(v[0], vec![cols, rows]).unwrap()),
    ));
    cases
}

use sweetexit::data::{generate_synthetic, CueStrength, Dataset, SyntheticTaskSpec};
use sweetexit::model::ModelConfig;

pub fn small_task(size: usize, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        n_classes: 2,
        vocab_size: 40,
        seq_len: 8,
        cue_strength: CueStrength { min: 0.1, max: 0.6 },
        distractor_rate: 0.3,
        cues_per_class: 3,
        seed,
        size,
    }
}

pub fn small_data(size: usize, seed: u64) -> Dataset {
    generate_synthetic(&small_task(size, seed), "train", 4).unwrap()
}

pub fn small_model(exits: Vec<usize>, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: *exits.last().unwrap(),
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 40,
        max_seq_len: 8,
        n_classes: 2,
        exit_layers: exits,
        init_seed: seed,
    }
}
