//! Randomized finite-difference suite over every differentiable operation
//! and the full pipeline, at double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneArch};
use crate::cah;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheck};
use crate::model::{Ablation, FrptParams, ParamVars};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;


#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    pub check: GradCheck,
}

impl OpReport {
    pub fn passes(&self) -> bool {
        self.check.passes(TOLERANCE) && self.check.checked > 0
    }
}

/// Reduces `y` to a scalar through a fixed random projection so every
/// output coordinate contributes a distinct adjoint.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let n = tape.value(y).len();
    let flat = tape.reshape(y, &[n])?;
    let w = tape.constant(&weights.reshape(&[1, n])?);
    tape.fc(flat, w, None)
}

fn projection(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(&[n], -1.0, 1.0, rng)
}

fn check_each(
    name: &str,
    trials: usize,
    rng: &mut ChaCha8Rng,
    mut trial: impl FnMut(&mut ChaCha8Rng) -> Result<GradCheck>,
) -> Result<OpReport> {
    let mut check = GradCheck::default();
    for _ in 0..trials {
        check = check.merge(trial(rng)?);
    }
    Ok(OpReport { name: name.to_string(), trials, check })
}

/// Checks the adjoint of `build(inputs)` against each input in turn; the
/// other inputs enter as constants.
fn check_inputs(
    inputs: &[Tensor<f64>],
    out_len: usize,
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let proj = projection(out_len, rng);
    let mut report = GradCheck::default();
    for target in 0..inputs.len() {
        let r = finite_diff_check(
            |tape, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == target { x } else { tape.constant(t) })
                    .collect();
                let y = build(tape, &vars)?;
                project(tape, y, &proj)
            },
            &inputs[target],
            STEP,
        )?;
        report = report.merge(r);
    }
    Ok(report)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

pub fn conv2d(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("conv2d", trials, rng, |rng| {
        let (ci, co) = (dim(rng, 1, 3), dim(rng, 1, 3));
        let (h, w) = (dim(rng, 3, 7), dim(rng, 3, 7));
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let stride = dim(rng, 1, 2);
        let pad = if k == 3 { dim(rng, 0, 1) } else { 0 };
        let inputs = [
            Tensor::randn(&[ci, h, w], 1.0, rng),
            Tensor::randn(&[co, ci, k, k], 1.0, rng),
            Tensor::randn(&[co], 1.0, rng),
        ];
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        check_inputs(&inputs, co * oh * ow, rng, |tape, v| tape.conv2d(v[0], v[1], Some(v[2]), stride, pad))
    })
}

pub fn softmax2d(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("softmax2d", trials, rng, |rng| {
        let (h, w) = (dim(rng, 2, 6), dim(rng, 2, 6));
        let inputs = [Tensor::randn(&[h, w], 2.0, rng)];
        check_inputs(&inputs, h * w, rng, |tape, v| tape.softmax(v[0]))
    })
}

pub fn instance_norm(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("instance_norm", trials, rng, |rng| {
        let (c, h, w) = (dim(rng, 1, 4), dim(rng, 2, 5), dim(rng, 2, 5));
        let inputs = [Tensor::randn(&[c, h, w], 1.5, rng)];
        check_inputs(&inputs, c * h * w, rng, |tape, v| tape.instance_norm(v[0], 1e-5))
    })
}

pub fn fc(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("fc", trials, rng, |rng| {
        let (din, dout) = (dim(rng, 1, 8), dim(rng, 1, 6));
        let inputs = [
            Tensor::randn(&[din], 1.0, rng),
            Tensor::randn(&[dout, din], 1.0, rng),
            Tensor::randn(&[dout], 1.0, rng),
        ];
        check_inputs(&inputs, dout, rng, |tape, v| tape.fc(v[0], v[1], Some(v[2])))
    })
}

pub fn relu(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("relu", trials, rng, |rng| {
        let n = dim(rng, 2, 12);
        let inputs = [Tensor::randn(&[n], 1.0, rng)];
        check_inputs(&inputs, n, rng, |tape, v| Ok(tape.relu(v[0])))
    })
}

pub fn sigmoid(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("sigmoid", trials, rng, |rng| {
        let n = dim(rng, 2, 12);
        let inputs = [Tensor::randn(&[n], 2.0, rng)];
        check_inputs(&inputs, n, rng, |tape, v| Ok(tape.sigmoid(v[0])))
    })
}

pub fn gap(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("gap", trials, rng, |rng| {
        let (c, h, w) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 5));
        let inputs = [Tensor::randn(&[c, h, w], 1.0, rng)];
        check_inputs(&inputs, c, rng, |tape, v| tape.gap(v[0]))
    })
}

pub fn cross_entropy(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("cross_entropy", trials, rng, |rng| {
        let k = dim(rng, 2, 8);
        let label = rng.gen_range(0..k);
        let logits = Tensor::randn(&[k], 2.0, rng);
        finite_diff_check(|tape, x| tape.cross_entropy(x, label), &logits, STEP)
    })
}

pub fn compute_mapping(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("compute_mapping", trials, rng, |rng| {
        let (mh, mw) = (dim(rng, 2, 6), dim(rng, 2, 6));
        let (oh, ow) = (dim(rng, 2, 8), dim(rng, 2, 8));
        let std = rng.gen_range(0.1..0.4);
        let mut a = Tensor::uniform(&[mh, mw], 0.05, 1.0, rng);
        let total: f64 = a.data().iter().sum();
        a.data_mut().iter_mut().for_each(|v| *v /= total);
        check_inputs(&[a], 2 * oh * ow, rng, |tape, v| tape.mapping(v[0], oh, ow, std))
    })
}

pub fn warp(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("warp", trials, rng, |rng| {
        let (c, h, w) = (dim(rng, 1, 3), dim(rng, 3, 8), dim(rng, 3, 8));
        let inputs = [Tensor::uniform(&[c, h, w], 0.0, 1.0, rng), Tensor::uniform(&[2, h, w], 0.02, 0.9, rng)];
        check_inputs(&inputs, c * h * w, rng, |tape, v| tape.warp(v[0], v[1]))
    })
}

pub fn channel_attention(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("channel_attention", trials, rng, |rng| {
        let r = dim(rng, 1, 4);
        let c = r * dim(rng, 1, 3);
        let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
        let inputs = [
            Tensor::randn(&[c, h, w], 1.0, rng),
            Tensor::randn(&[c / r, c], 1.0, rng),
            Tensor::randn(&[c, c / r], 1.0, rng),
        ];
        check_inputs(&inputs, c, rng, |tape, v| cah::channel_attention(tape, v[0], v[1], v[2]))
    })
}

pub fn cah_forward(trials: usize, rng: &mut ChaCha8Rng) -> Result<OpReport> {
    check_each("cah_forward", trials, rng, |rng| {
        let (c, h, w) = (dim(rng, 1, 4), dim(rng, 2, 4), dim(rng, 2, 4));
        let use_in = rng.gen_bool(0.75);
        let inputs = [Tensor::randn(&[c, h, w], 1.0, rng), Tensor::uniform(&[c], 0.05, 0.95, rng)];
        check_inputs(&inputs, c * h * w, rng, |tape, v| cah::cah_forward(tape, v[0], v[1], 1e-5, use_in))
    })
}

/// Random pipeline state on a 16x16 input: every learnable tensor nonzero.
pub fn pipeline_fixture(seed: u64) -> Result<(Backbone<f64>, FrptParams<f64>, Tensor<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = Backbone::<f64>::init(&BackboneArch::desk(), &mut rng)?;
    for s in &mut backbone.stages {
        s.bias = Tensor::uniform(s.bias.shape(), 0.0, 0.1, &mut rng);
    }
    let classes = 4;
    let mut params = FrptParams::init(&backbone, 16, classes, &Ablation::default(), 0.25, 8, 1e-5, &mut rng)?;
    for (name, t, _) in params.named_mut() {
        let shape = t.shape().to_vec();
        let std = if name == "dpp/w_k" { 0.1 } else { 0.3 };
        *t = Tensor::randn(&shape, std, &mut rng).learnable();
    }
    let image = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let label = rng.gen_range(0..classes);
    Ok((backbone, params, image, label))
}

/// Gradient of the full cross-entropy loss against every learnable tensor.
pub fn full_pipeline(seed: u64) -> Result<Vec<OpReport>> {
    let (backbone, params, image, label) = pipeline_fixture(seed)?;
    let named = params.named();
    let mut reports = Vec::new();
    for (idx, (name, leaf)) in named.iter().enumerate() {
        let check = finite_diff_check(
            |tape, x| {
                let mut vars: Vec<Var> = params.named().iter().map(|(_, t)| tape.constant(t)).collect();
                vars[idx] = x;
                let mut it = vars.into_iter();
                let w_k = params.dpp.as_ref().and_then(|_| it.next());
                let w_f = params.cah.as_ref().and_then(|_| it.next());
                let w_l = params.cah.as_ref().and_then(|_| it.next());
                let (clf_w, clf_b) = (it.next().unwrap(), it.next().unwrap());
                let pv = ParamVars { w_k, w_f, w_l, clf_w, clf_b };
                let bv = backbone.register(tape);
                let img = tape.constant(&image);
                let out = params.forward_vars(tape, &backbone, bv, pv, img)?;
                tape.cross_entropy(out.logits, label)
            },
            leaf,
            STEP,
        )?;
        reports.push(OpReport { name: format!("pipeline {name}"), trials: 1, check });
    }
    Ok(reports)
}

/// Every per-operation report followed by the full-pipeline reports.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops: [fn(usize, &mut ChaCha8Rng) -> Result<OpReport>; 12] = [
        conv2d,
        softmax2d,
        instance_norm,
        fc,
        relu,
        sigmoid,
        gap,
        cross_entropy,
        compute_mapping,
        warp,
        channel_attention,
        cah_forward,
    ];
    let mut reports = ops.iter().map(|op| op(trials, &mut rng)).collect::<Result<Vec<_>>>()?;
    reports.extend(full_pipeline(seed)?);
    Ok(reports)
}
