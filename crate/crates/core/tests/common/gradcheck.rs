//! Central-difference gradient oracle for every registered graph op.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simclr_s2_core::autodiff::{Bindings, GraphBuilder, NodeId, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-6;

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "max_pool2d",
    "global_avg_pool",
    "channel_affine_norm",
    "reshape",
    "concat",
    "l2_normalize",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "sum",
    "mean",
    "scalar_mul",
];

#[derive(Debug)]
pub struct CheckReport {
    pub op: &'static str,
    pub cases: usize,
    /// Worst relative error among entries above the absolute floor.
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub failures: Vec<String>,
}

/// One test case: a graph whose scalar output depends on the op under test,
/// plus values for every bound name.
struct Case {
    builder: GraphBuilder,
    loss: Option<NodeId>,
    bindings: BTreeMap<String, Tensor>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so that kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values with gaps far wider than the FD step, in random order.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

impl Case {
    fn new() -> Self {
        Self { builder: GraphBuilder::new(), loss: None, bindings: BTreeMap::new() }
    }

    fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.builder.param(name, value.shape()).unwrap();
        self.bindings.insert(name.to_string(), value);
        id
    }

    fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.builder.input(name, value.shape()).unwrap();
        self.bindings.insert(name.to_string(), value);
        id
    }

    /// Reduces `out` to a scalar through a random weighting.
    fn finish(mut self, rng: &mut ChaCha8Rng, out: NodeId) -> Self {
        let shape = self.builder.shape(out).to_vec();
        let weights = self.builder.constant(rand_tensor(rng, &shape, -1.0, 1.0));
        let weighted = self.builder.mul(out, weights).unwrap();
        self.loss = Some(self.builder.sum(weighted).unwrap());
        self
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn build_case(op: &str, rng: &mut ChaCha8Rng, index: usize) -> Case {
    let mut c = Case::new();
    let out = match op {
        "add" | "sub" | "mul" => {
            let shape = vec![dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 3)];
            let value = rand_tensor(rng, &shape, -1.0, 1.0);
            let a = c.param("a", value);
            // Alternate full-shape and suffix-broadcast right operands.
            let rhs_shape = if index % 2 == 0 { shape.clone() } else { shape[1..].to_vec() };
            let value = rand_tensor(rng, &rhs_shape, -1.0, 1.0);
            let b = c.param("b", value);
            match op {
                "add" => c.builder.add(a, b),
                "sub" => c.builder.sub(a, b),
                _ => c.builder.mul(a, b),
            }
            .unwrap()
        }
        "matmul" => {
            let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
            let value = rand_tensor(rng, &[m, k], -1.0, 1.0);
            let a = c.param("a", value);
            if index % 2 == 0 {
                let value = rand_tensor(rng, &[k, n], -1.0, 1.0);
                let b = c.param("b", value);
                c.builder.matmul(a, b).unwrap()
            } else {
                let value = rand_tensor(rng, &[n, k], -1.0, 1.0);
                let b = c.param("b", value);
                c.builder.matmul_nt(a, b).unwrap()
            }
        }
        "conv2d" => {
            let (n, ch, h, w, o) =
                (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 2, 6), dims(rng, 2, 6), dims(rng, 1, 4));
            let k = if index % 3 == 2 { 1 } else { 3 };
            let stride = if index % 2 == 0 { 1 } else { 2 };
            let value = rand_tensor(rng, &[n, ch, h, w], -1.0, 1.0);
            let x = c.param("x", value);
            let value = rand_tensor(rng, &[o, ch, k, k], -0.5, 0.5);
            let wt = c.param("w", value);
            let bias = if index % 4 != 3 {
                let value = rand_tensor(rng, &[o], -0.5, 0.5);
                Some(c.param("b", value))
            } else {
                None
            };
            c.builder.conv2d(x, wt, bias, stride).unwrap()
        }
        "relu" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 6)];
            let value = away_from_zero(rng, &shape);
            let x = c.param("x", value);
            c.builder.relu(x).unwrap()
        }
        "max_pool2d" => {
            let shape = [dims(rng, 1, 2), dims(rng, 1, 3), 2 * dims(rng, 1, 3), 2 * dims(rng, 1, 3) + index % 2];
            let value = distinct(rng, &shape);
            let x = c.param("x", value);
            c.builder.max_pool2(x).unwrap()
        }
        "global_avg_pool" => {
            let shape = [dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4)];
            let value = rand_tensor(rng, &shape, -1.0, 1.0);
            let x = c.param("x", value);
            c.builder.global_avg_pool(x).unwrap()
        }
        "channel_affine_norm" => {
            let ch = dims(rng, 1, 3);
            let shape = if index % 4 == 3 {
                vec![dims(rng, 3, 6), ch]
            } else {
                vec![dims(rng, 2, 3), ch, dims(rng, 2, 4), dims(rng, 2, 4)]
            };
            let value = rand_tensor(rng, &shape, -1.0, 1.0);
            let x = c.param("x", value);
            let value = rand_tensor(rng, &[ch], 0.5, 1.5);
            let scale = c.param("scale", value);
            let value = rand_tensor(rng, &[ch], -0.5, 0.5);
            let shift = c.param("shift", value);
            if index % 2 == 0 {
                c.builder.channel_affine_norm_train("n", x, scale, shift).unwrap()
            } else {
                let value = rand_tensor(rng, &[ch], -0.2, 0.2);
                let mean = c.input("mean", value);
                let value = rand_tensor(rng, &[ch], 0.5, 2.0);
                let var = c.input("var", value);
                c.builder.channel_affine_norm_eval("n", x, scale, shift, mean, var).unwrap()
            }
        }
        "reshape" => {
            let (a, b, d) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
            let value = rand_tensor(rng, &[a, b, d], -1.0, 1.0);
            let x = c.param("x", value);
            let r = c.builder.reshape(x, &[a * b, d]).unwrap();
            // Follow with a nonlinearity so the reshape's layout matters.
            let e = c.builder.exp(r).unwrap();
            c.builder.mul(e, r).unwrap()
        }
        "concat" => {
            let axis = index % 3;
            let mut s1 = vec![dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
            let mut s2 = s1.clone();
            s1[axis] = dims(rng, 1, 3);
            s2[axis] = dims(rng, 1, 3);
            let value = rand_tensor(rng, &s1, -1.0, 1.0);
            let a = c.param("a", value);
            let value = rand_tensor(rng, &s2, -1.0, 1.0);
            let b = c.param("b", value);
            c.builder.concat(&[a, b], axis).unwrap()
        }
        "l2_normalize" => {
            let shape = [dims(rng, 1, 4), dims(rng, 2, 6)];
            let value = rand_tensor(rng, &shape, -1.0, 1.0);
            let x = c.param("x", value);
            c.builder.l2_normalize(x).unwrap()
        }
        "softmax" | "log_softmax" => {
            let shape = [dims(rng, 1, 4), dims(rng, 2, 6)];
            let value = rand_tensor(rng, &shape, -2.0, 2.0);
            let x = c.param("x", value);
            if op == "softmax" {
                c.builder.softmax(x).unwrap()
            } else {
                c.builder.log_softmax(x).unwrap()
            }
        }
        "log" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            let value = rand_tensor(rng, &shape, 0.2, 2.0);
            let x = c.param("x", value);
            c.builder.log(x).unwrap()
        }
        "exp" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            let value = rand_tensor(rng, &shape, -1.5, 1.5);
            let x = c.param("x", value);
            c.builder.exp(x).unwrap()
        }
        "sum" | "mean" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            let value = rand_tensor(rng, &shape, -1.0, 1.0);
            let x = c.param("x", value);
            let sq = c.builder.mul(x, x).unwrap();
            if op == "sum" {
                c.builder.sum(sq).unwrap()
            } else {
                c.builder.mean(sq).unwrap()
            }
        }
        "scalar_mul" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
            let value = rand_tensor(rng, &shape, -1.0, 1.0);
            let x = c.param("x", value);
            let factor = rng.gen_range(-3.0..3.0);
            c.builder.scalar_mul(x, factor).unwrap()
        }
        other => panic!("no gradient case for op `{other}`"),
    };
    c.finish(rng, out)
}

/// Compares analytic gradients of `loss` against central differences for
/// every trainable binding. Returns the worst relative error seen above the
/// absolute floor, the worst absolute error, and a description of each
/// failing entry.
pub fn check_graph(
    builder: GraphBuilder,
    loss: NodeId,
    bindings: &BTreeMap<String, Tensor>,
) -> (f64, f64, Vec<String>) {
    let graph = builder.build();
    let bound: Bindings = bindings.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let analytic = graph.gradients(loss, &bound).expect("gradient evaluation").grads;
    let (mut worst, mut worst_abs, mut failures) = (0.0f64, 0.0f64, Vec::new());
    let mut perturbed = bindings.clone();
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let base = bindings[name].data()[i];
            let mut eval = |delta: f64| {
                perturbed.get_mut(name).unwrap().data_mut()[i] = base + delta;
                let b: Bindings = perturbed.iter().map(|(k, v)| (k.as_str(), v)).collect();
                graph.evaluate(&b).expect("forward").get(loss).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            perturbed.get_mut(name).unwrap().data_mut()[i] = base;
            let a = grad.data()[i];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            worst_abs = worst_abs.max(err);
            if err > FD_ABS_FLOOR {
                worst = worst.max(err / scale);
            }
            if err > FD_ABS_FLOOR && err > FD_REL_TOL * scale {
                failures.push(format!("`{name}`[{i}]: analytic {a:.9e} numeric {numeric:.9e}"));
            }
        }
    }
    (worst, worst_abs, failures)
}

/// Runs `cases` randomized central-difference checks for one op.
pub fn check_op(op: &'static str, cases: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport { op, cases, worst_rel: 0.0, worst_abs: 0.0, failures: Vec::new() };
    for index in 0..cases {
        let case = build_case(op, &mut rng, index);
        let loss = case.loss.expect("case finished");
        let (worst, worst_abs, failures) = check_graph(case.builder, loss, &case.bindings);
        report.worst_rel = report.worst_rel.max(worst);
        report.worst_abs = report.worst_abs.max(worst_abs);
        report.failures.extend(failures.into_iter().map(|f| format!("case {index} {f}")));
    }
    report
}
