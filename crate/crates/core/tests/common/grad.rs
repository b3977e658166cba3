// Finite-difference oracle for the tape ops. The analytic gradient is taken
// on a Tape<f32> (and a Tape<f64>); the reference is a central difference of
// the same graph evaluated on a Tape<f64>.

use fsodlab::head::cosine_logits_var;
use fsodlab::rng::Rng;
use fsodlab::tensor::{Scalar, Tape, Var};

pub const FD_STEP: f64 = 1e-4;
pub const CASES_PER_OP: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradOp {
    Add,
    Mul,
    Scale,
    Sum,
    AddAll,
    Reshape,
    Concat,
    Gather,
    Relu,
    MaxPool2d,
    Conv2dPadded,
    Conv2dStrided,
    Linear,
    MatmulNt,
    L2Normalize,
    SoftmaxCe,
    SmoothL1,
    BceWithLogits,
    RoiAlign,
    CosineLogits,
    ThreeLayerNet,
}

pub const ALL_OPS: [GradOp; 21] = [
    GradOp::Add,
    GradOp::Mul,
    GradOp::Scale,
    GradOp::Sum,
    GradOp::AddAll,
    GradOp::Reshape,
    GradOp::Concat,
    GradOp::Gather,
    GradOp::Relu,
    GradOp::MaxPool2d,
    GradOp::Conv2dPadded,
    GradOp::Conv2dStrided,
    GradOp::Linear,
    GradOp::MatmulNt,
    GradOp::L2Normalize,
    GradOp::SoftmaxCe,
    GradOp::SmoothL1,
    GradOp::BceWithLogits,
    GradOp::RoiAlign,
    GradOp::CosineLogits,
    GradOp::ThreeLayerNet,
];

#[derive(Clone, Debug)]
pub struct Case {
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub labels: Vec<usize>,
    pub index: Vec<usize>,
    pub targets: Vec<f64>,
    pub rois: Vec<[f64; 4]>,
    /// Seed of the fixed random projection that turns a tensor output into
    /// a scalar.
    pub proj_seed: u64,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn normals(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| f32_round(rng.normal() * scale)).collect()
}

/// Values whose magnitude stays at least `gap` away from zero, so the
/// difference quotient never straddles a kink at 0.
fn away_from_zero(rng: &mut Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.uniform(gap, 2.0);
            f32_round(if rng.bernoulli(0.5) { m } else { -m })
        })
        .collect()
}

pub fn gen_case(op: GradOp, rng: &mut Rng) -> Case {
    let mut c = Case {
        inputs: Vec::new(),
        labels: Vec::new(),
        index: Vec::new(),
        targets: Vec::new(),
        rois: Vec::new(),
        proj_seed: rng.next_u64(),
    };
    let r = rng.int_range(1, 4) as usize;
    let d = rng.int_range(2, 6) as usize;
    match op {
        GradOp::Add | GradOp::Mul | GradOp::AddAll => {
            let n = r * d;
            let k = if op == GradOp::AddAll { 3 } else { 2 };
            for _ in 0..k {
                c.inputs.push((vec![r, d], normals(rng, n, 1.0)));
            }
        }
        GradOp::Scale | GradOp::Sum | GradOp::Reshape => c.inputs.push((vec![r, d], normals(rng, r * d, 1.0))),
        GradOp::Concat => {
            for _ in 0..3 {
                let n = rng.int_range(1, 6) as usize;
                c.inputs.push((vec![n], normals(rng, n, 1.0)));
            }
        }
        GradOp::Gather => {
            let n = r * d;
            c.inputs.push((vec![r, d], normals(rng, n, 1.0)));
            // Repeated indices exercise gradient accumulation.
            c.index = (0..n + 3).map(|_| rng.index(n)).collect();
        }
        GradOp::Relu => c.inputs.push((vec![r, d], away_from_zero(rng, r * d, 0.05))),
        GradOp::MaxPool2d => {
            let (ch, k) = (rng.int_range(1, 3) as usize, 2);
            let (h, w) = (k * rng.int_range(1, 4) as usize, k * rng.int_range(1, 4) as usize);
            // A shuffled grid of well separated values: no near ties.
            let mut vals: Vec<f64> = (0..ch * h * w).map(|i| f32_round(i as f64 * 0.1 - 1.0)).collect();
            rng.shuffle(&mut vals);
            c.inputs.push((vec![ch, h, w], vals));
        }
        GradOp::Conv2dPadded | GradOp::Conv2dStrided => {
            let (cin, cout) = (rng.int_range(1, 3) as usize, rng.int_range(1, 3) as usize);
            let (h, w) = (rng.int_range(3, 6) as usize, rng.int_range(3, 6) as usize);
            c.inputs.push((vec![cin, h, w], normals(rng, cin * h * w, 1.0)));
            c.inputs.push((vec![cout, cin, 3, 3], normals(rng, cout * cin * 9, 0.5)));
            c.inputs.push((vec![cout], normals(rng, cout, 0.5)));
        }
        GradOp::Linear => {
            let m = rng.int_range(1, 5) as usize;
            c.inputs.push((vec![r, d], normals(rng, r * d, 1.0)));
            c.inputs.push((vec![m, d], normals(rng, m * d, 0.5)));
            c.inputs.push((vec![m], normals(rng, m, 0.5)));
        }
        GradOp::MatmulNt => {
            let m = rng.int_range(1, 5) as usize;
            c.inputs.push((vec![r, d], normals(rng, r * d, 1.0)));
            c.inputs.push((vec![m, d], normals(rng, m * d, 1.0)));
        }
        GradOp::L2Normalize => c.inputs.push((vec![r, d], normals(rng, r * d, 1.0))),
        GradOp::SoftmaxCe => {
            let k = rng.int_range(2, 6) as usize;
            c.inputs.push((vec![r, k], normals(rng, r * k, 2.0)));
            c.labels = (0..r).map(|_| rng.index(k)).collect();
        }
        GradOp::SmoothL1 => {
            let n = r * d;
            let target = normals(rng, n, 1.0);
            // |pred − target| kept clear of 0 and of beta = 1.
            let pred: Vec<f64> = target
                .iter()
                .map(|&t| {
                    let m = if rng.bernoulli(0.5) { rng.uniform(0.05, 0.9) } else { rng.uniform(1.1, 2.5) };
                    f32_round(t + if rng.bernoulli(0.5) { m } else { -m })
                })
                .collect();
            c.inputs.push((vec![n], pred));
            c.inputs.push((vec![n], target));
        }
        GradOp::BceWithLogits => {
            let n = r * d;
            c.inputs.push((vec![n], normals(rng, n, 2.0)));
            c.targets = (0..n).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        }
        GradOp::RoiAlign => {
            let ch = rng.int_range(1, 3) as usize;
            let (h, w) = (rng.int_range(3, 7) as usize, rng.int_range(3, 7) as usize);
            c.inputs.push((vec![ch, h, w], normals(rng, ch * h * w, 1.0)));
            let stride = 4.0;
            for _ in 0..rng.int_range(1, 4) {
                let x1 = rng.uniform(-2.0, w as f64 * stride - 6.0);
                let y1 = rng.uniform(-2.0, h as f64 * stride - 6.0);
                c.rois.push([x1, y1, x1 + rng.uniform(3.0, 16.0), y1 + rng.uniform(3.0, 16.0)]);
            }
        }
        GradOp::CosineLogits => {
            let m = rng.int_range(2, 6) as usize;
            c.inputs.push((vec![r, d], normals(rng, r * d, 1.0)));
            c.inputs.push((vec![m, d], normals(rng, m * d, 1.0)));
        }
        GradOp::ThreeLayerNet => {
            let (h1, h2, k) = (rng.int_range(3, 6) as usize, rng.int_range(3, 6) as usize, 3);
            c.inputs.push((vec![r, d], normals(rng, r * d, 1.0)));
            c.inputs.push((vec![h1, d], normals(rng, h1 * d, 0.7)));
            c.inputs.push((vec![h1], normals(rng, h1, 0.3)));
            c.inputs.push((vec![h2, h1], normals(rng, h2 * h1, 0.7)));
            c.inputs.push((vec![h2], normals(rng, h2, 0.3)));
            c.inputs.push((vec![k, h2], normals(rng, k * h2, 0.7)));
            c.inputs.push((vec![k], normals(rng, k, 0.3)));
            c.labels = (0..r).map(|_| rng.index(k)).collect();
        }
    }
    c
}

fn project<T: Scalar>(tape: &mut Tape<T>, out: Var, seed: u64) -> Var {
    let n = tape.value(out).len();
    if tape.shape(out).is_empty() {
        return out;
    }
    let mut rng = Rng::new(seed);
    let r: Vec<T> = (0..n).map(|_| T::from_f64_lossy(rng.uniform(-1.0, 1.0))).collect();
    let shape = tape.shape(out).to_vec();
    let rv = tape.constant(shape, r).unwrap();
    let m = tape.mul(out, rv).unwrap();
    tape.sum(m)
}

/// Builds the scalar objective for `op` over the given input vars.
pub fn build<T: Scalar>(op: GradOp, c: &Case, tape: &mut Tape<T>, x: &[Var]) -> Var {
    let cast = |v: &[f64]| v.iter().map(|&t| T::from_f64_lossy(t)).collect::<Vec<T>>();
    let out = match op {
        GradOp::Add => tape.add(x[0], x[1]).unwrap(),
        GradOp::Mul => tape.mul(x[0], x[1]).unwrap(),
        GradOp::Scale => tape.scale(x[0], T::from_f64_lossy(-1.75)),
        GradOp::Sum => tape.sum(x[0]),
        GradOp::AddAll => tape.add_all(x).unwrap(),
        GradOp::Reshape => {
            let n = tape.value(x[0]).len();
            tape.reshape(x[0], vec![n]).unwrap()
        }
        GradOp::Concat => tape.concat(x),
        GradOp::Gather => tape.gather(x[0], &c.index).unwrap(),
        GradOp::Relu => tape.relu(x[0]),
        GradOp::MaxPool2d => tape.maxpool2d(x[0], 2).unwrap(),
        GradOp::Conv2dPadded => tape.conv2d(x[0], x[1], x[2], 1, 1).unwrap(),
        GradOp::Conv2dStrided => tape.conv2d(x[0], x[1], x[2], 2, 0).unwrap(),
        GradOp::Linear => tape.linear(x[0], x[1], x[2]).unwrap(),
        GradOp::MatmulNt => tape.matmul_nt(x[0], x[1]).unwrap(),
        GradOp::L2Normalize => tape.l2_normalize(x[0], T::from_f64_lossy(1e-8)).unwrap(),
        GradOp::SoftmaxCe => tape.softmax_ce_loss(x[0], &c.labels).unwrap(),
        GradOp::SmoothL1 => tape.smooth_l1_loss(x[0], x[1], T::one()).unwrap(),
        GradOp::BceWithLogits => tape.bce_with_logits(x[0], &cast(&c.targets)).unwrap(),
        GradOp::RoiAlign => tape.roi_align(x[0], &c.rois, 2, 4.0).unwrap(),
        GradOp::CosineLogits => cosine_logits_var(tape, x[0], x[1], 20.0, 1e-8).unwrap(),
        GradOp::ThreeLayerNet => {
            let h = tape.linear(x[0], x[1], x[2]).unwrap();
            let h = tape.relu(h);
            let h = tape.linear(h, x[3], x[4]).unwrap();
            let h = tape.relu(h);
            let logits = tape.linear(h, x[5], x[6]).unwrap();
            tape.softmax_ce_loss(logits, &c.labels).unwrap()
        }
    };
    project(tape, out, c.proj_seed)
}

fn analytic<T: Scalar>(op: GradOp, c: &Case) -> Vec<Vec<f64>> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = c
        .inputs
        .iter()
        .map(|(s, v)| tape.variable(s.clone(), v.iter().map(|&t| T::from_f64_lossy(t)).collect()).unwrap())
        .collect();
    let loss = build(op, c, &mut tape, &vars);
    tape.backward(loss).unwrap();
    vars.iter()
        .map(|&v| tape.grad(v).expect("input gradient").iter().map(|g| g.to_f64_lossy()).collect())
        .collect()
}

fn objective(op: GradOp, c: &Case, inputs: &[(Vec<usize>, Vec<f64>)]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, v)| tape.constant(s.clone(), v.clone()).unwrap()).collect();
    let loss = build(op, c, &mut tape, &vars);
    tape.value(loss).item()
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` over every input element.
pub fn numeric(op: GradOp, c: &Case) -> Vec<Vec<f64>> {
    let mut inputs = c.inputs.clone();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].1.len());
        for j in 0..inputs[i].1.len() {
            let orig = inputs[i].1[j];
            inputs[i].1[j] = orig + FD_STEP;
            let up = objective(op, c, &inputs);
            inputs[i].1[j] = orig - FD_STEP;
            let down = objective(op, c, &inputs);
            inputs[i].1[j] = orig;
            g.push((up - down) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    out
}

/// `‖a − n‖₂ / max(‖n‖₂, 1e-6)` over all inputs jointly.
pub fn relative_error(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    let (mut diff, mut norm) = (0.0, 0.0);
    for (ga, gn) in a.iter().zip(n) {
        for (x, y) in ga.iter().zip(gn) {
            diff += (x - y) * (x - y);
            norm += y * y;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-6)
}

#[derive(Clone, Copy, Debug)]
pub struct OpReport {
    pub op: GradOp,
    pub cases: usize,
    pub worst_f32: f64,
    pub worst_f64: f64,
}

pub fn check_op(op: GradOp, cases: usize, seed: u64) -> OpReport {
    let root = Rng::new(seed);
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    for i in 0..cases {
        let c = gen_case(op, &mut root.derive(i as u64));
        let n = numeric(op, &c);
        w32 = w32.max(relative_error(&analytic::<f32>(op, &c), &n));
        w64 = w64.max(relative_error(&analytic::<f64>(op, &c), &n));
    }
    OpReport {
        op,
        cases,
        worst_f32: w32,
        worst_f64: w64,
    }
}
