//! Finite-difference verification of every tape op's backward rule.
//!
//! Each case builds a scalar loss from fresh random inputs, runs backward for
//! the analytic gradients, then re-evaluates the loss twice per input element
//! for a central difference. Inputs are sampled away from the kinks of relu,
//! abs, the hinge, and the bce clamp so the comparison is against a true
//! derivative rather than a subgradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BnRunning, Graph, Var};
use crate::tensor::Tensor;

pub const REL_ERR_LIMIT: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Outcome of checking one op across many random input tensors.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: String,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_ERR_LIMIT
    }
}

/// Max relative error between analytic and finite-difference gradients over
/// every element of every input.
#[allow(clippy::needless_range_loop)]
pub fn check_case(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v).map(|gr| gr.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let an = analytic[i][j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

fn sample_away_from_zero(rng: &mut ChaCha8Rng, numel: usize) -> Vec<f64> {
    (0..numel)
        .map(|_| {
            let mag = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), sample_away_from_zero(rng, n)).unwrap()
}

/// Weighted sum against a fixed random projection, so backward sees a
/// non-uniform upstream gradient.
fn projected_loss(g: &mut Graph, y: Var, proj: &Tensor) -> Result<Var> {
    let p = g.constant(proj.clone());
    let prod = g.mul(y, p)?;
    Ok(g.sum(prod))
}

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

fn op_cases(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "relu" => {
            let x = tensor(rng, &[1, 2, 4, 4]);
            let proj = tensor(rng, &[1, 2, 4, 4]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.relu(v[0]);
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "sigmoid" => {
            let x = tensor(rng, &[1, 1, 4, 4]);
            let proj = tensor(rng, &[1, 1, 4, 4]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.sigmoid(v[0]);
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "abs" => {
            let x = tensor(rng, &[12]);
            let proj = tensor(rng, &[12]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.abs(v[0]);
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "add" => {
            let (a, b) = (tensor(rng, &[2, 5]), tensor(rng, &[2, 5]));
            let proj = tensor(rng, &[2, 5]);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    let y = g.add(v[0], v[1])?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "sub" => {
            let (a, b) = (tensor(rng, &[7]), tensor(rng, &[7]));
            let proj = tensor(rng, &[7]);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    let y = g.sub(v[0], v[1])?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "mul" => {
            let (a, b) = (tensor(rng, &[3, 3]), tensor(rng, &[3, 3]));
            let proj = tensor(rng, &[3, 3]);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    let y = g.mul(v[0], v[1])?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "scale" => {
            let x = tensor(rng, &[9]);
            let c = rng.gen_range(-2.0..2.0);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.scale(v[0], c);
                    Ok(g.sum(y))
                }),
            }
        }
        "add_n" => {
            let xs: Vec<Tensor> = (0..3).map(|_| tensor(rng, &[6])).collect();
            let proj = tensor(rng, &[6]);
            Case {
                inputs: xs,
                build: Box::new(move |g, v| {
                    let y = g.add_n(v)?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "sum" => {
            let x = tensor(rng, &[4, 5]);
            Case { inputs: vec![x], build: Box::new(|g, v| Ok(g.sum(v[0]))) }
        }
        "mean" => {
            let x = tensor(rng, &[4, 5]);
            Case { inputs: vec![x], build: Box::new(|g, v| Ok(g.mean(v[0]))) }
        }
        "conv2d_1x1" => {
            let x = tensor(rng, &[2, 3, 4, 4]);
            let w = tensor(rng, &[2, 3, 1, 1]);
            let b = tensor(rng, &[2]);
            let proj = tensor(rng, &[2, 2, 4, 4]);
            Case {
                inputs: vec![x, w, b],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2])?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "conv2d_3x3" => {
            let x = tensor(rng, &[1, 2, 5, 4]);
            let w = tensor(rng, &[3, 2, 3, 3]);
            let b = tensor(rng, &[3]);
            let proj = tensor(rng, &[1, 3, 5, 4]);
            Case {
                inputs: vec![x, w, b],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2])?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "maxpool2x2" => {
            let x = tensor(rng, &[1, 2, 4, 4]);
            let proj = tensor(rng, &[1, 2, 2, 2]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.maxpool2x2(v[0])?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "upsample2x" => {
            let x = tensor(rng, &[1, 2, 3, 3]);
            let proj = tensor(rng, &[1, 2, 6, 6]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.upsample2x(v[0])?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "batchnorm_train" => {
            let x = tensor(rng, &[2, 2, 3, 3]);
            let gamma = tensor(rng, &[2]);
            let beta = tensor(rng, &[2]);
            let proj = tensor(rng, &[2, 2, 3, 3]);
            Case {
                inputs: vec![x, gamma, beta],
                build: Box::new(move |g, v| {
                    let mut running = BnRunning::new(2);
                    let y = g.batchnorm_train(v[0], v[1], v[2], &mut running)?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "batchnorm_eval" => {
            let x = tensor(rng, &[2, 2, 3, 3]);
            let gamma = tensor(rng, &[2]);
            let beta = tensor(rng, &[2]);
            let proj = tensor(rng, &[2, 2, 3, 3]);
            let mut running = BnRunning::new(2);
            for (i, m) in running.mean.iter_mut().enumerate() {
                *m = 0.1 * i as f64;
            }
            running.var = vec![0.8, 1.3];
            Case {
                inputs: vec![x, gamma, beta],
                build: Box::new(move |g, v| {
                    let y = g.batchnorm_eval(v[0], v[1], v[2], &running)?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "reflect_pad" => {
            let x = tensor(rng, &[1, 1, 4, 5]);
            let proj = tensor(rng, &[1, 1, 6, 8]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.reflect_pad(v[0], 2, 3)?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "crop" => {
            let x = tensor(rng, &[2, 2, 5, 5]);
            let proj = tensor(rng, &[1, 2, 3, 2]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.crop(v[0], 1, 1, 2, 3, 2)?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "pixel_gather" => {
            let x = tensor(rng, &[2, 3, 4, 4]);
            let proj = tensor(rng, &[1, 3, 1, 1]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.pixel_gather(v[0], 1, 2, 3)?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "broadcast_hw" => {
            let x = tensor(rng, &[1, 3, 1, 1]);
            let proj = tensor(rng, &[1, 3, 4, 4]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let y = g.broadcast_hw(v[0], 4, 4)?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "concat_c" => {
            let a = tensor(rng, &[1, 2, 3, 3]);
            let b = tensor(rng, &[1, 3, 3, 3]);
            let proj = tensor(rng, &[1, 5, 3, 3]);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    let y = g.concat_c(v[0], v[1])?;
                    projected_loss(g, y, &proj)
                }),
            }
        }
        "lovasz_hinge" => {
            let n = 12;
            let x = tensor(rng, &[n]);
            let labels: Vec<f64> =
                (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| g.lovasz_hinge(v[0], &labels)),
            }
        }
        "bce" => {
            let n = 10;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let x = Tensor::new(vec![n], data).unwrap();
            let target: Vec<f64> =
                (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            Case { inputs: vec![x], build: Box::new(move |g, v| g.bce(v[0], &target)) }
        }
        "dice" => {
            let n = 10;
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let x = Tensor::new(vec![n], data).unwrap();
            let target: Vec<f64> =
                (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            Case { inputs: vec![x], build: Box::new(move |g, v| g.dice(v[0], &target)) }
        }
        "external_loss_fault" => {
            // deliberately wrong gradient; exists so a forced failure path can
            // be demonstrated end to end
            let x = tensor(rng, &[6]);
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let n = g.value(v[0]).numel();
                    let value: f64 = g.value(v[0]).data().iter().sum();
                    g.external_loss(v[0], value, vec![1.1; n])
                }),
            }
        }
        other => panic!("unknown gradcheck op {other}"),
    }
}

/// Ops covered by the standard suite, in report order.
pub const STANDARD_OPS: &[&str] = &[
    "relu",
    "sigmoid",
    "abs",
    "add",
    "sub",
    "mul",
    "scale",
    "add_n",
    "sum",
    "mean",
    "conv2d_1x1",
    "conv2d_3x3",
    "maxpool2x2",
    "upsample2x",
    "batchnorm_train",
    "batchnorm_eval",
    "reflect_pad",
    "crop",
    "pixel_gather",
    "broadcast_hw",
    "concat_c",
    "lovasz_hinge",
    "bce",
    "dice",
];

/// Checks one op over `cases` random input draws.
pub fn check_op(op: &str, cases: usize, seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_name(op));
    let mut max_rel = 0.0f64;
    for _ in 0..cases {
        let case = op_cases(op, &mut rng);
        max_rel = max_rel.max(check_case(&case.inputs, &case.build)?);
    }
    Ok(OpReport { op: op.to_string(), cases, max_rel_err: max_rel })
}

/// Runs the whole suite. With `inject_fault` an op with a deliberately wrong
/// backward is appended, which must fail the tolerance.
pub fn run_standard_suite(cases: usize, seed: u64, inject_fault: bool) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for op in STANDARD_OPS {
        reports.push(check_op(op, cases, seed)?);
    }
    if inject_fault {
        reports.push(check_op("external_loss_fault", cases, seed)?);
    }
    Ok(reports)
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(1469598103934665603u64, |h, b| (h ^ b as u64).wrapping_mul(1099511628211))
}
