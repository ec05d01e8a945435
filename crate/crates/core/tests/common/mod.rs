#![allow(dead_code)]

use maria::data::Sample;
use maria::model::MariaModel;
use maria::numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Relative error with the denominator floored, so that entries whose true
/// gradient is zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

/// Uniform values kept at least `gap` away from zero, for kinked ops.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

pub type OpFn = Box<dyn Fn(&Tape, &[Var]) -> Var>;

/// A differentiable expression with its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// One case per primitive op of the tape (two for shape variants).
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let inf = f64::NEG_INFINITY;
    let mask = Tensor::new(
        vec![2, 3, 3],
        vec![
            0.0, inf, 0.0, 0.0, inf, 0.0, 0.0, inf, 0.0, //
            0.0, 0.0, 0.0, inf, inf, inf, 0.0, 0.0, inf,
        ],
    )
    .unwrap();
    vec![
        case(
            "matmul",
            vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[4, 5], -1.0, 1.0)],
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        ),
        case(
            "matmul_batched",
            vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[2, 4, 2], -1.0, 1.0)],
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        ),
        case("transpose", vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0)], |t, v| {
            t.transpose(v[0]).unwrap()
        }),
        case(
            "add",
            vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[4], -1.0, 1.0)],
            |t, v| t.add(v[0], v[1]).unwrap(),
        ),
        case("scale", vec![uniform(&mut r, &[3, 4], -1.0, 1.0)], |t, v| {
            t.scale(v[0], 0.37).unwrap()
        }),
        case("scale_rows", vec![uniform(&mut r, &[2, 3, 2], -1.0, 1.0)], |t, v| {
            t.scale_rows(v[0], &[1.0, 0.0, 2.5, -0.5, 1.0, 0.0]).unwrap()
        }),
        case("relu", vec![away_from_zero(&mut r, &[3, 5], 1e-2)], |t, v| t.relu(v[0]).unwrap()),
        case("masked_softmax", vec![uniform(&mut r, &[2, 3, 3], -2.0, 2.0)], move |t, v| {
            t.masked_softmax(v[0], &mask).unwrap()
        }),
        case(
            "layer_norm",
            vec![
                uniform(&mut r, &[3, 5], -2.0, 2.0),
                uniform(&mut r, &[5], 0.5, 1.5),
                uniform(&mut r, &[5], -0.5, 0.5),
            ],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        ),
        case("embedding_gather", vec![uniform(&mut r, &[5, 3], -1.0, 1.0)], |t, v| {
            t.embedding_gather(v[0], &[0, 2, 2, 4, 1]).unwrap()
        }),
        case("reshape", vec![uniform(&mut r, &[2, 6], -1.0, 1.0)], |t, v| {
            t.reshape(v[0], &[3, 2, 2]).unwrap()
        }),
        case("flatten", vec![uniform(&mut r, &[2, 3, 2], -1.0, 1.0)], |t, v| {
            t.flatten(v[0]).unwrap()
        }),
        case(
            "concat",
            vec![uniform(&mut r, &[2, 1, 3], -1.0, 1.0), uniform(&mut r, &[2, 2, 3], -1.0, 1.0)],
            |t, v| t.concat(&[v[0], v[1]], 1).unwrap(),
        ),
        case(
            "concat_last_axis",
            vec![uniform(&mut r, &[2, 2, 1], -1.0, 1.0), uniform(&mut r, &[2, 2, 3], -1.0, 1.0)],
            |t, v| t.concat(&[v[0], v[1]], 2).unwrap(),
        ),
        case("sum", vec![uniform(&mut r, &[3, 4], -1.0, 1.0)], |t, v| t.sum(v[0]).unwrap()),
        case("cross_entropy", vec![uniform(&mut r, &[4, 3], -2.0, 2.0)], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2], None).unwrap()
        }),
        case("cross_entropy_weighted", vec![uniform(&mut r, &[4, 3], -2.0, 2.0)], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2], Some(&[0.5, 2.0, 1.0])).unwrap()
        }),
    ]
}

/// Fixed projection weights that turn any output into a scalar.
fn projection(n: usize) -> Vec<f64> {
    let mut r = rng(n as u64 + 1000);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn project(t: &Tape, y: Var) -> Var {
    let n: usize = t.shape(y).iter().product();
    let w = t.constant(Tensor::new(vec![n, 1], projection(n)).unwrap());
    let flat = t.reshape(y, &[1, n]).unwrap();
    t.sum(t.matmul(flat, w).unwrap()).unwrap()
}

fn projected_value(inputs: &[Tensor], f: &OpFn) -> f64 {
    let t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let y = t.value(f(&t, &vars));
    y.data().iter().zip(projection(y.numel())).map(|(a, b)| a * b).sum()
}

/// Largest relative error between the tape gradient and central finite
/// differences over every input entry.
pub fn op_grad_error(case: &OpCase) -> f64 {
    let t = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let loss = project(&t, (case.f)(&t, &vars));
    let grads = t.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in case.inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input receives a gradient").clone();
        for j in 0..x.numel() {
            let at = |delta: f64| {
                let mut moved = case.inputs.clone();
                moved[i].data_mut()[j] += delta;
                projected_value(&moved, &case.f)
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Compares `loss_and_grads` against central differences of `loss` on
/// `count` randomly drawn trainable parameter entries.
pub fn model_grad_errors(model: &MariaModel, samples: &[Sample], labels: &[usize], count: usize, seed: u64) -> Vec<(String, usize, f64)> {
    let (_, grads) = model.loss_and_grads(samples, labels, None, 0).unwrap();
    let names: Vec<String> = grads.keys().cloned().collect();
    let mut r = rng(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let name = &names[r.random_range(0..names.len())];
        let t = model.params().get(name).unwrap();
        let idx = r.random_range(0..t.numel());
        let row_len = *t.shape().last().unwrap();
        if model.params().frozen_rows(name).contains(&(idx / row_len)) {
            continue;
        }
        let at = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().get_mut(name).unwrap().data_mut()[idx] += delta;
            m.loss(samples, labels, None, 0).unwrap()
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        out.push((name.clone(), idx, rel_err(grads[name].data()[idx], numeric)));
    }
    out
}

/// Availability grid of `ds` under `scenario`, rebuilt from raw flags:
/// `(rows, cols, available)` in row-major order.
pub fn availability(ds: &maria::data::MultimodalDataset, scenario: maria::masking::Scenario) -> (usize, usize, Vec<bool>) {
    use maria::masking::Scenario;
    let n = ds.n_samples();
    let mut out = Vec::new();
    let cols = match scenario {
        Scenario::MissingModalities => {
            for s in 0..n {
                for m in &ds.modalities {
                    out.push((0..m.width()).any(|f| m.is_observed(s, f)));
                }
            }
            ds.modalities.len()
        }
        Scenario::AllMissing => {
            for s in 0..n {
                for m in &ds.modalities {
                    for f in 0..m.width() {
                        out.push(m.is_observed(s, f));
                    }
                }
            }
            ds.modalities.iter().map(|m| m.width()).sum()
        }
    };
    (n, cols, out)
}

/// Expected number of newly masked grid cells: `ceil(N * W * p - pre)`,
/// clamped at zero, with a tolerance for decimal rates such as 0.07.
pub fn expected_injection(rows: usize, cols: usize, rate: f64, pre: usize) -> usize {
    let exact = rows as f64 * cols as f64 * rate - pre as f64;
    let nearest = exact.round();
    let t = if (exact - nearest).abs() < 1e-9 { nearest } else { exact.ceil() };
    t.max(0.0) as usize
}

/// True when some grid line holds no available cell although it held one
/// before.
pub fn emptied_line(rows: usize, cols: usize, before: &[bool], after: &[bool]) -> bool {
    let row_has = |g: &[bool], r: usize| (0..cols).any(|c| g[r * cols + c]);
    let col_has = |g: &[bool], c: usize| (0..rows).any(|r| g[r * cols + c]);
    (0..rows).any(|r| row_has(before, r) && !row_has(after, r))
        || (0..cols).any(|c| col_has(before, c) && !col_has(after, c))
}
