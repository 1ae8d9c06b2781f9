//! Central finite-difference checks of every primitive and every α loss.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoothnas::regularizers::{flops_loss, l2_loss, lse_loss, sa_loss};
use smoothnas::tensor::{Conv2dSpec, Tape, Tensor, Var};
use smoothnas::Result;

pub const TRIALS: usize = 50;
pub const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces any output to a scalar through fixed random weights, so every
/// output element contributes to the checked gradient.
fn scalarize(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let n = tape.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rv = tape.constant(tape.shape(y).to_vec().as_slice(), r)?;
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

fn eval(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_with(t, true)).collect();
    let y = build(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, y, seed).unwrap();
    tape.value(s)[0]
}

/// Max-norm relative error between analytic and numeric gradients over all inputs.
pub fn gradient_error(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_with(t, true)).collect();
    let y = build(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, y, seed).unwrap();
    let grads = tape.backward(s).unwrap();
    let (mut diff, mut scale) = (0f64, 1e-8f64);
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(build, &plus, seed) - eval(build, &minus, seed)) / (2.0 * STEP);
            diff = diff.max((analytic[j] - numeric).abs());
            scale = scale.max(analytic[j].abs()).max(numeric.abs());
        }
    }
    diff / scale
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinked functions.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = random(rng, shape, lo, hi);
    t.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 1e-2 {
            *v = if *v < 0.0 { -1e-2 } else { 1e-2 } * (1.0 + rng.random::<f64>());
        }
    });
    t
}

/// Worst relative error of one case over `TRIALS` random inputs.
pub fn worst_error(name: &str, build: &Build, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    (0..TRIALS).map(|trial| gradient_error(build, &make(&mut rng), trial as u64)).fold(0.0, f64::max)
}

pub type Make = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub fn all_cases() -> Vec<(&'static str, Box<Build>, Box<Make>)> {
    let pair = |s: &'static [usize]| move |r: &mut ChaCha8Rng| vec![random(r, s, -2.0, 2.0), random(r, s, -2.0, 2.0)];
    let one = |s: &'static [usize], lo: f64, hi: f64| move |r: &mut ChaCha8Rng| vec![random(r, s, lo, hi)];
    let img = |s: &'static [usize]| move |r: &mut ChaCha8Rng| vec![random(r, s, -1.0, 1.0)];
    let conv = |spec: Conv2dSpec| -> Box<Build> {
        Box::new(move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], spec))
    };
    let conv_in = |x: &'static [usize], w: &'static [usize]| {
        move |r: &mut ChaCha8Rng| vec![random(r, x, -1.0, 1.0), random(r, w, -0.5, 0.5)]
    };
    let sqrt_half = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        ("add", Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1])) as Box<Build>, Box::new(pair(&[3, 4])) as Box<Make>),
        ("sub", Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1])), Box::new(pair(&[5]))),
        ("mul", Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1])), Box::new(pair(&[2, 3]))),
        ("add_scalar", Box::new(|t: &mut Tape, v: &[Var]| Ok(t.add_scalar(v[0], 0.7))), Box::new(one(&[4], -2.0, 2.0))),
        ("mul_scalar", Box::new(|t: &mut Tape, v: &[Var]| Ok(t.mul_scalar(v[0], -1.3))), Box::new(one(&[4], -2.0, 2.0))),
        (
            "scale_by",
            Box::new(|t: &mut Tape, v: &[Var]| t.scale_by(v[0], v[1], 2)),
            Box::new(|r: &mut ChaCha8Rng| vec![random(r, &[2, 3], -2.0, 2.0), random(r, &[4], -2.0, 2.0)]),
        ),
        ("add_n", Box::new(|t: &mut Tape, v: &[Var]| t.add_n(&[v[0], v[1], v[0]])), Box::new(pair(&[3]))),
        ("exp", Box::new(|t: &mut Tape, v: &[Var]| Ok(t.exp(v[0]))), Box::new(one(&[6], -2.0, 2.0))),
        ("log", Box::new(|t: &mut Tape, v: &[Var]| Ok(t.log(v[0]))), Box::new(one(&[6], 0.1, 3.0))),
        ("erf", Box::new(|t: &mut Tape, v: &[Var]| Ok(t.erf(v[0]))), Box::new(one(&[8], -2.0, 2.0))),
        (
            "relu",
            Box::new(|t: &mut Tape, v: &[Var]| Ok(t.relu(v[0]))),
            Box::new(|r: &mut ChaCha8Rng| vec![away_from_zero(r, &[8], -2.0, 2.0)]),
        ),
        ("sum", Box::new(|t: &mut Tape, v: &[Var]| Ok(t.sum(v[0]))), Box::new(one(&[2, 3], -2.0, 2.0))),
        ("mean", Box::new(|t: &mut Tape, v: &[Var]| Ok(t.mean(v[0]))), Box::new(one(&[2, 3], -2.0, 2.0))),
        ("sum_axis0", Box::new(|t: &mut Tape, v: &[Var]| t.sum_axis(v[0], 0)), Box::new(one(&[3, 4], -2.0, 2.0))),
        ("sum_axis1", Box::new(|t: &mut Tape, v: &[Var]| t.sum_axis(v[0], 1)), Box::new(one(&[2, 3, 2], -2.0, 2.0))),
        ("softmax_rows", Box::new(|t: &mut Tape, v: &[Var]| t.softmax(v[0], 1)), Box::new(one(&[3, 5], -3.0, 3.0))),
        ("softmax_cols", Box::new(|t: &mut Tape, v: &[Var]| t.softmax(v[0], 0)), Box::new(one(&[4, 2], -3.0, 3.0))),
        (
            "cross_entropy",
            Box::new(|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[2, 0, 1])),
            Box::new(one(&[3, 4], -3.0, 3.0)),
        ),
        (
            "matmul",
            Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1])),
            Box::new(|r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)]),
        ),
        (
            "add_row_bias",
            Box::new(|t: &mut Tape, v: &[Var]| t.add_row_bias(v[0], v[1])),
            Box::new(|r: &mut ChaCha8Rng| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0)]),
        ),
        ("conv3x3", conv(Conv2dSpec::same(3)), Box::new(conv_in(&[2, 2, 5, 5], &[3, 2, 3, 3]))),
        (
            "conv3x3_stride2",
            conv(Conv2dSpec { stride: 2, padding: 1, dilation: 1, groups: 1 }),
            Box::new(conv_in(&[1, 2, 6, 6], &[2, 2, 3, 3])),
        ),
        (
            "conv3x3_dilated",
            conv(Conv2dSpec { stride: 1, padding: 2, dilation: 2, groups: 1 }),
            Box::new(conv_in(&[1, 2, 5, 5], &[2, 2, 3, 3])),
        ),
        (
            "conv_depthwise",
            conv(Conv2dSpec { stride: 1, padding: 1, dilation: 1, groups: 3 }),
            Box::new(conv_in(&[2, 3, 4, 4], &[3, 1, 3, 3])),
        ),
        (
            "conv1x1_stride2",
            conv(Conv2dSpec { stride: 2, padding: 0, dilation: 1, groups: 1 }),
            Box::new(conv_in(&[1, 2, 5, 5], &[3, 2, 1, 1])),
        ),
        ("avg_pool", Box::new(|t: &mut Tape, v: &[Var]| t.avg_pool2d(v[0], 3, 1, 1)), Box::new(img(&[2, 2, 4, 4]))),
        ("avg_pool_stride2", Box::new(|t: &mut Tape, v: &[Var]| t.avg_pool2d(v[0], 3, 2, 1)), Box::new(img(&[1, 2, 5, 5]))),
        (
            "max_pool",
            Box::new(|t: &mut Tape, v: &[Var]| t.max_pool2d(v[0], 3, 1, 1)),
            // Distinct, well-separated values so the argmax is stable under the step.
            Box::new(|r: &mut ChaCha8Rng| {
                let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
                use rand::seq::SliceRandom;
                vals.shuffle(r);
                vec![Tensor::new(vec![2, 1, 4, 4], vals).unwrap()]
            }),
        ),
        (
            "channel_select",
            Box::new(|t: &mut Tape, v: &[Var]| t.channel_select(v[0], &[2, 0])),
            Box::new(img(&[2, 3, 2, 2])),
        ),
        (
            "channel_concat",
            Box::new(|t: &mut Tape, v: &[Var]| t.channel_concat(&[v[0], v[1]])),
            Box::new(|r: &mut ChaCha8Rng| vec![random(r, &[2, 1, 2, 2], -1.0, 1.0), random(r, &[2, 2, 2, 2], -1.0, 1.0)]),
        ),
        ("global_avg_pool", Box::new(|t: &mut Tape, v: &[Var]| t.global_avg_pool(v[0])), Box::new(img(&[2, 3, 3, 3]))),
        ("reshape", Box::new(|t: &mut Tape, v: &[Var]| t.reshape(v[0], &[3, 4])), Box::new(one(&[2, 6], -1.0, 1.0))),
        ("row", Box::new(|t: &mut Tape, v: &[Var]| t.row(v[0], 1)), Box::new(one(&[3, 4], -1.0, 1.0))),
        ("l2_loss", Box::new(|t: &mut Tape, v: &[Var]| l2_loss(t, &[v[0], v[1]], 0.3)), Box::new(|r: &mut ChaCha8Rng| vec![random(r, &[4, 3], -2.0, 2.0), random(r, &[2, 3], -2.0, 2.0)])),
        ("lse_loss", Box::new(|t: &mut Tape, v: &[Var]| lse_loss(t, &[v[0]], 0.7)), Box::new(one(&[4, 5], -3.0, 3.0))),
        ("sa_loss_nu1", Box::new(|t: &mut Tape, v: &[Var]| sa_loss(t, &[v[0], v[1]], 2.0, 1.0, 3.0)), Box::new(|r: &mut ChaCha8Rng| vec![random(r, &[6, 3], -3.0, 3.0), random(r, &[2, 3], -3.0, 3.0)])),
        (
            "sa_loss_leaky",
            Box::new(|t: &mut Tape, v: &[Var]| sa_loss(t, &[v[0]], 2.0, 0.25, 1e6)),
            Box::new(|r: &mut ChaCha8Rng| vec![away_from_zero(r, &[6, 3], -3.0, 3.0)]),
        ),
        (
            "sa_loss_nu0",
            Box::new(move |t: &mut Tape, v: &[Var]| sa_loss(t, &[v[0]], 2.0, 0.0, sqrt_half)),
            // The fitted erf is accurate enough for differencing only on |μ(1−ν)α| ≤ 2.
            Box::new(one(&[6, 3], -2.8, 2.8)),
        ),
        (
            "flops_loss",
            Box::new(|t: &mut Tape, v: &[Var]| flops_loss(t, &[v[0]], &[9.0, 0.0, 1.0, 4.0])),
            Box::new(|r: &mut ChaCha8Rng| vec![random(r, &[3, 4], 0.0, 1.0)]),
        ),
        (
            "flops_of_softmax",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let b = t.softmax(v[0], 1)?;
                flops_loss(t, &[b], &[9.0, 0.0, 1.0])
            }),
            Box::new(one(&[4, 3], -2.0, 2.0)),
        ),
    ]
}

