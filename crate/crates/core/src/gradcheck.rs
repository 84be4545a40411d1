//! Central finite-difference checks of every differentiable op, run in `f64`.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{Activation, BnState, Graph, Mode, Var};
use crate::error::Result;
use crate::layers::{
    Dropout, DropoutMode, DropoutPosition, ForwardCtx, Ilrb, IlrbConfig, SeBlock,
};
use crate::params::{ParamKind, ParamStore};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-3;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative errors, so all-but-zero gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-2;
/// Coordinates checked per tensor; larger tensors are subsampled.
pub const MAX_COORDS: usize = 96;

#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub op: String,
    pub cases: usize,
    pub coords: usize,
    /// Coordinates skipped because a perturbation crossed an activation kink.
    pub skipped: usize,
    /// Worst `max|a - n| / max(max|a|, max|n|)` over the checked tensors.
    pub max_rel_err: f64,
    /// Worst single-coordinate `|a - n| / max(|a|, |n|)`, for information.
    pub max_elem_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub ops: Vec<OpReport>,
    pub seconds: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<24} {:>5} {:>7} {:>7} {:>12} {:>12}  result\n",
            "op", "cases", "coords", "kinks", "max_rel_err", "max_elem_rel"
        );
        for o in &self.ops {
            s.push_str(&format!(
                "{:<24} {:>5} {:>7} {:>7} {:>12.3e} {:>12.3e}  {}\n",
                o.op,
                o.cases,
                o.coords,
                o.skipped,
                o.max_rel_err,
                o.max_elem_rel_err,
                if o.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

type Forward = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One scalar-valued function of some input leaves and the store's parameters.
struct Problem {
    inputs: Vec<Tensor<f64>>,
    store: ParamStore<f64>,
    forward: Forward,
}

struct Eval {
    loss: f64,
    kinks: u64,
}

impl Problem {
    fn eval(&mut self, fault: Option<(&'static str, f64)>, grads: bool) -> Result<(Eval, Vec<Tensor<f64>>)> {
        self.store.zero_grad();
        let inputs = self.inputs.clone();
        let mut g = Graph::with_params(&mut self.store);
        if let Some((op, f)) = fault {
            g.inject_grad_fault(op, f);
        }
        let vars: Vec<Var> = inputs.into_iter().map(|t| g.input(t, true)).collect();
        let loss = (self.forward)(&mut g, &vars)?;
        let e = Eval {
            loss: g.value(loss).data()[0],
            kinks: g.kink_signature(),
        };
        let mut out = Vec::new();
        if grads {
            g.backward(loss)?;
            for &v in &vars {
                out.push(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.dims(v))));
            }
        }
        drop(g);
        if grads {
            for (_, p) in self.store.iter() {
                if p.kind.trainable() {
                    out.push(p.grad.clone());
                }
            }
        }
        Ok((e, out))
    }

    fn value_mut(&mut self, slot: usize) -> &mut Tensor<f64> {
        if slot < self.inputs.len() {
            return &mut self.inputs[slot];
        }
        let trainable: Vec<_> = self
            .store
            .iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(id, _)| id)
            .collect();
        &mut self.store.get_mut(trainable[slot - self.inputs.len()]).value
    }
}

#[derive(Default)]
struct Tally {
    coords: usize,
    skipped: usize,
    max_rel: f64,
    max_elem_rel: f64,
}

fn check(problem: &mut Problem, fault: Option<(&'static str, f64)>, rng: &mut Rng, tally: &mut Tally) -> Result<()> {
    let (base, analytic) = problem.eval(fault, true)?;
    for (slot, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            sample(rng, n, MAX_COORDS).into_vec()
        };
        let (mut max_diff, mut scale, mut elem) = (0.0f64, 0.0f64, 0.0f64);
        for i in coords {
            let orig = problem.value_mut(slot).data()[i];
            problem.value_mut(slot).data_mut()[i] = orig + STEP;
            let (plus, _) = problem.eval(None, false)?;
            problem.value_mut(slot).data_mut()[i] = orig - STEP;
            let (minus, _) = problem.eval(None, false)?;
            problem.value_mut(slot).data_mut()[i] = orig;
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                tally.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * STEP);
            let a = grad.data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            elem = elem.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR));
            tally.coords += 1;
        }
        tally.max_rel = tally.max_rel.max(max_diff / scale.max(REL_FLOOR));
        tally.max_elem_rel = tally.max_elem_rel.max(elem);
    }
    Ok(())
}

fn randn(dims: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-scale..scale))
}

/// `sum(out * R)` for a fixed random `R`, turning any output into a scalar.
fn project(g: &mut Graph<f64>, out: Var, rng: &mut Rng) -> Result<Var> {
    let r = randn(g.dims(out), 1.0, rng);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    g.sum(p)
}

type Builder = fn(&mut Rng) -> Problem;

fn simple(inputs: Vec<Tensor<f64>>, seed: u64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Problem {
    Problem {
        inputs,
        store: ParamStore::new(),
        forward: Box::new(move |g, v| {
            let out = f(g, v)?;
            project(g, out, &mut rng::stream(seed, Stream::Check, &[1]))
        }),
    }
}

fn conv_case(rng: &mut Rng) -> Problem {
    let n = rng.random_range(1..=2);
    let cin = [1, 2, 3, 4][rng.random_range(0..4)];
    let groups = match rng.random_range(0..3) {
        0 => 1,
        1 => cin,
        _ if cin % 2 == 0 => 2,
        _ => 1,
    };
    let cout = groups * rng.random_range(1..=2);
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
    let h = rng.random_range(3..=6);
    let w = rng.random_range(3..=6);
    let seed = rng.random();
    simple(
        vec![
            randn(&[n, cin, h, w], 1.0, rng),
            randn(&[cout, cin / groups, k, k], 1.0, rng),
            randn(&[cout], 1.0, rng),
        ],
        seed,
        move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad, groups),
    )
}

fn bn_case(rng: &mut Rng) -> Problem {
    let (n, c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=4), rng.random_range(2..=4));
    let train = rng.random_bool(0.7);
    let mut store = ParamStore::new();
    let gamma = store.add("gamma", ParamKind::BnGamma, randn(&[c], 1.0, rng));
    let beta = store.add("beta", ParamKind::BnBeta, randn(&[c], 1.0, rng));
    let mean = store.add("mean", ParamKind::Buffer, randn(&[c], 0.5, rng));
    let var = store.add("var", ParamKind::Buffer, Tensor::from_fn(&[c], |_| rng.random_range(0.5..2.0)));
    let x = randn(&[n, c, h, w], 2.0, rng);
    let seed = rng.random();
    Problem {
        inputs: vec![x],
        store,
        forward: Box::new(move |g, v| {
            let (gv, bv) = (g.param(gamma), g.param(beta));
            let state = BnState {
                running_mean: mean,
                running_var: var,
            };
            let mode = if train { Mode::Train } else { Mode::Eval };
            let out = g.batchnorm2d(v[0], gv, bv, state, mode)?;
            project(g, out, &mut rng::stream(seed, Stream::Check, &[1]))
        }),
    }
}

fn act_case(kind: Activation) -> Builder {
    match kind {
        Activation::Relu => |rng| act_problem(rng, Activation::Relu),
        Activation::Relu6 => |rng| act_problem(rng, Activation::Relu6),
        Activation::Silu => |rng| act_problem(rng, Activation::Silu),
        Activation::Prelu => |rng| act_problem(rng, Activation::Prelu),
    }
}

fn act_problem(rng: &mut Rng, kind: Activation) -> Problem {
    let dims = [rng.random_range(1..=3), rng.random_range(1..=3), 3, 3];
    let x = randn(&dims, 8.0, rng);
    let seed = rng.random();
    let mut store = ParamStore::new();
    let slope = (kind == Activation::Prelu)
        .then(|| store.add("slope", ParamKind::PreluSlope, Tensor::scalar(rng.random_range(0.05..0.5))));
    Problem {
        inputs: vec![x],
        store,
        forward: Box::new(move |g, v| {
            let s = slope.map(|id| g.param(id));
            let out = g.activation(v[0], kind, s)?;
            project(g, out, &mut rng::stream(seed, Stream::Check, &[1]))
        }),
    }
}

fn elementwise_dims(rng: &mut Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=4);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn sigmoid_case(rng: &mut Rng) -> Problem {
    let d = elementwise_dims(rng);
    simple(vec![randn(&d, 4.0, rng)], rng.random(), |g, v| g.sigmoid(v[0]))
}

fn gap_case(rng: &mut Rng) -> Problem {
    let d = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5)];
    simple(vec![randn(&d, 1.0, rng)], rng.random(), |g, v| g.global_avg_pool(v[0]))
}

fn linear_case(rng: &mut Rng) -> Problem {
    let (n, f, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
    simple(
        vec![randn(&[n, f], 1.0, rng), randn(&[o, f], 1.0, rng), randn(&[o], 1.0, rng)],
        rng.random(),
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    )
}

fn add_case(rng: &mut Rng) -> Problem {
    let d = elementwise_dims(rng);
    simple(vec![randn(&d, 1.0, rng), randn(&d, 1.0, rng)], rng.random(), |g, v| g.add(v[0], v[1]))
}

fn mul_case(rng: &mut Rng) -> Problem {
    let d = elementwise_dims(rng);
    simple(vec![randn(&d, 1.0, rng), randn(&d, 1.0, rng)], rng.random(), |g, v| g.mul(v[0], v[1]))
}

fn mul_scalar_case(rng: &mut Rng) -> Problem {
    let d = elementwise_dims(rng);
    let s = rng.random_range(-3.0..3.0);
    simple(vec![randn(&d, 1.0, rng)], rng.random(), move |g, v| g.mul_scalar(v[0], s))
}

fn channel_scale_case(rng: &mut Rng) -> Problem {
    let (n, c) = (rng.random_range(1..=3), rng.random_range(1..=4));
    let d = [n, c, rng.random_range(1..=4), rng.random_range(1..=4)];
    simple(
        vec![randn(&d, 1.0, rng), randn(&[n, c], 1.0, rng)],
        rng.random(),
        |g, v| g.broadcast_mul_channels(v[0], v[1]),
    )
}

fn reshape_case(rng: &mut Rng) -> Problem {
    let d = elementwise_dims(rng);
    let n: usize = d.iter().product();
    simple(vec![randn(&d, 1.0, rng)], rng.random(), move |g, v| g.reshape(v[0], &[n]))
}

fn sum_case(rng: &mut Rng) -> Problem {
    let d = elementwise_dims(rng);
    Problem {
        inputs: vec![randn(&d, 1.0, rng)],
        store: ParamStore::new(),
        forward: Box::new(|g, v| g.sum(v[0])),
    }
}

fn mask_case(rng: &mut Rng) -> Problem {
    let d = [rng.random_range(1..=3), rng.random_range(1..=4), 3, 3];
    let mode = if rng.random_bool(0.5) { DropoutMode::Spatial } else { DropoutMode::Regular };
    let drop = Dropout::new(mode, 0.4).expect("valid rate");
    let mask: Vec<f64> = drop.sample_mask(&d, rng);
    simple(vec![randn(&d, 1.0, rng)], rng.random(), move |g, v| g.mask(v[0], mask.clone()))
}

fn ce_case(rng: &mut Rng) -> Problem {
    let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=6));
    let mut t = randn(&[n, k], 1.0, rng).map(|v| v.abs() + 0.05);
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Problem {
        inputs: vec![randn(&[n, k], 3.0, rng)],
        store: ParamStore::new(),
        forward: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &t)),
    }
}

fn se_case(rng: &mut Rng) -> Problem {
    let c = rng.random_range(2..=8);
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", c, rng.random_range(1..=4), Activation::Relu6, rng);
    let x = randn(&[rng.random_range(1..=2), c, 3, 3], 2.0, rng);
    let seed = rng.random();
    Problem {
        inputs: vec![x],
        store,
        forward: Box::new(move |g, v| {
            let out = se.forward(g, v[0])?;
            project(g, out, &mut rng::stream(seed, Stream::Check, &[1]))
        }),
    }
}

/// Redraw layer weights with magnitudes in `[0.5, 1.5]`. Batch norm makes the
/// loss invariant to each filter's scale, so filters with a tiny norm bend the
/// loss sharply and a fixed finite-difference step cannot resolve them.
fn well_conditioned(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for p in store.iter_mut() {
        match p.kind {
            ParamKind::ConvWeight | ParamKind::LinearWeight => {
                for v in p.value.data_mut() {
                    let m = rng.random_range(0.5..1.5);
                    *v = if rng.random_bool(0.5) { m } else { -m };
                }
            }
            ParamKind::BnGamma => p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5)),
            ParamKind::BnBeta | ParamKind::Bias => {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5))
            }
            _ => {}
        }
    }
}

fn ilrb_case(rng: &mut Rng) -> Problem {
    let cin = rng.random_range(2..=4);
    let stride = rng.random_range(1..=2);
    let out_channels = if rng.random_bool(0.5) { cin } else { rng.random_range(2..=4) };
    let expansion = [1, 6][rng.random_range(0..2)];
    let activation = [Activation::Relu6, Activation::Silu, Activation::Prelu, Activation::Relu][rng.random_range(0..4)];
    let position = [DropoutPosition::AfterExpand, DropoutPosition::AfterSe, DropoutPosition::AfterProject][rng.random_range(0..3)];
    let mut store = ParamStore::new();
    let block = Ilrb::new(
        &mut store,
        "ilrb",
        IlrbConfig {
            in_channels: cin,
            out_channels,
            stride,
            expansion,
            se: true,
            se_reduction: 4,
            activation,
            dropout: Some((position, Dropout::new(DropoutMode::Spatial, 0.3).expect("valid rate"))),
        },
        rng,
    )
    .expect("valid block");
    well_conditioned(&mut store, rng);
    let x = randn(&[2, cin, rng.random_range(4..=6), rng.random_range(4..=6)], 1.0, rng);
    let seed: u64 = rng.random();
    Problem {
        inputs: vec![x],
        store,
        forward: Box::new(move |g, v| {
            // Same dropout mask on every evaluation.
            let mut drop_rng = rng::stream(seed, Stream::Check, &[2]);
            let mut ctx = ForwardCtx::new(Mode::Train, &mut drop_rng);
            let out = block.forward(g, v[0], &mut ctx)?;
            project(g, out, &mut rng::stream(seed, Stream::Check, &[1]))
        }),
    }
}

/// Names of every checked op, in report order.
pub fn op_names() -> Vec<&'static str> {
    suite().into_iter().map(|(n, _)| n).collect()
}

fn suite() -> Vec<(&'static str, Builder)> {
    vec![
        ("conv2d", conv_case as Builder),
        ("batchnorm2d", bn_case),
        ("relu", act_case(Activation::Relu)),
        ("relu6", act_case(Activation::Relu6)),
        ("silu", act_case(Activation::Silu)),
        ("prelu", act_case(Activation::Prelu)),
        ("sigmoid", sigmoid_case),
        ("global_avg_pool", gap_case),
        ("linear", linear_case),
        ("add", add_case),
        ("mul", mul_case),
        ("mul_scalar", mul_scalar_case),
        ("broadcast_mul_channels", channel_scale_case),
        ("reshape", reshape_case),
        ("sum", sum_case),
        ("dropout_mask", mask_case),
        ("softmax_cross_entropy", ce_case),
        ("se_block", se_case),
        ("ilrb", ilrb_case),
    ]
}

/// Run `cases` random instances of every op. `fault` scales the backward
/// output of the named op, as a negative control.
pub fn run(cases: usize, seed: u64, fault: Option<(&'static str, f64)>) -> Result<Report> {
    let start = Instant::now();
    let mut ops = Vec::new();
    for (i, (name, build)) in suite().into_iter().enumerate() {
        let mut tally = Tally::default();
        for case in 0..cases {
            let mut rng = rng::stream(seed, Stream::Check, &[i as u64, case as u64]);
            let mut problem = build(&mut rng);
            check(&mut problem, fault, &mut rng, &mut tally)?;
        }
        ops.push(OpReport {
            op: name.to_string(),
            cases,
            coords: tally.coords,
            skipped: tally.skipped,
            max_rel_err: tally.max_rel,
            max_elem_rel_err: tally.max_elem_rel,
            passed: tally.coords > 0 && tally.max_rel < TOLERANCE,
        });
    }
    Ok(Report {
        ops,
        seconds: start.elapsed().as_secs_f64(),
    })
}
