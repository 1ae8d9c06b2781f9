//! Structural properties shared by the property suite and the acceptance run.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use smoothnas::derive::{derive, Selection};
use smoothnas::mixed::{beta_of, partial_channel_forward, ArchParams, BoundOp, PcSampler};
use smoothnas::optim::Adam;
use smoothnas::regularizers::flops_loss;
use smoothnas::space::{CellTopology, OpKind, REDUCED_OPS};
use smoothnas::tensor::{Tape, Tensor};

pub const CASES: u32 = 200;

type Outcome = Result<(), TestCaseError>;

fn arch_from(values: &[f64], topo: &CellTopology, reduce: Option<&CellTopology>) -> ArchParams {
    let mut arch = ArchParams::zeros(topo, reduce, false);
    let mut it = values.iter().cycle();
    for t in arch.alpha_tensors_mut() {
        t.data_mut().iter_mut().for_each(|a| *a = *it.next().unwrap());
    }
    arch
}

pub fn beta_rows_stochastic_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (prop::collection::vec(-30.0f64..30.0, 18), prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 18), 1..6))
}

pub fn beta_rows_stochastic((alpha, grads): (Vec<f64>, Vec<Vec<f64>>)) -> Outcome {
    let topo = CellTopology::reduced();
    let mut arch = arch_from(&alpha, &topo, None);
    let mut adam = Adam::new(0.5, (0.5, 0.999), 1e-3);
    for g in &grads {
        arch.normal.alpha.zero_grad();
        arch.normal.alpha.accumulate_grad(g).unwrap();
        adam.step(&mut arch.tensors_mut()).unwrap();
        for row in arch.normal.rows() {
            let b = beta_of(row);
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(b.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
    Ok(())
}

pub fn row_shift_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-3.0f64..3.0, 112), prop::collection::vec(-20.0f64..20.0, 14))
}

pub fn derive_ignores_row_shifts((alpha, shifts): (Vec<f64>, Vec<f64>)) -> Outcome {
    let normal = CellTopology::darts(false);
    let reduce = CellTopology::darts(true);
    let arch = arch_from(&alpha, &normal, Some(&reduce));
    let mut shifted = arch.clone();
    for t in shifted.alpha_tensors_mut() {
        for (row, s) in t.data_mut().chunks_mut(8).zip(&shifts) {
            row.iter_mut().for_each(|a| *a += s);
        }
    }
    let a = derive(&arch, &normal, Some(&reduce), Selection::Softmax).unwrap();
    let b = derive(&shifted, &normal, Some(&reduce), Selection::Softmax).unwrap();
    prop_assert_eq!(a, b);

    let nb = CellTopology::nb201();
    let arch = arch_from(&alpha[..30], &nb, None);
    let mut shifted = arch.clone();
    for (row, s) in shifted.normal.alpha.data_mut().chunks_mut(5).zip(&shifts) {
        row.iter_mut().for_each(|a| *a += s);
    }
    prop_assert_eq!(derive(&arch, &nb, None, Selection::Softmax).unwrap(), derive(&shifted, &nb, None, Selection::Softmax).unwrap());
    Ok(())
}

pub fn pass_through_strategy() -> impl Strategy<Value = (usize, usize, u64, Vec<f64>)> {
    (2usize..9, 1usize..5, any::<u64>(), prop::collection::vec(-2.0f64..2.0, 3))
}

pub fn partial_channel_pass_through((c, k, seed, beta): (usize, usize, u64, Vec<f64>)) -> Outcome {
    prop_assume!(k <= c);
    let n = 2 * c * 5 * 5;
    let x = Tensor::new(vec![2, c, 5, 5], (0..n).map(|i| ((i as f64) * 0.37 + seed as f64).sin()).collect()).unwrap();
    let sel = c / k;
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let b = tape.leaf(&Tensor::new(vec![1, 3], beta_of(&beta)).unwrap());
    let mut ops: Vec<BoundOp> = REDUCED_OPS.iter().map(|&o| BoundOp::new(o, 1)).collect();
    let w = Tensor::new(vec![sel, sel, 3, 3], (0..sel * sel * 9).map(|i| (i as f64 * 0.13).cos()).collect()).unwrap();
    ops[0].weights = vec![tape.leaf(&w)];
    prop_assert_eq!(ops[0].kind, OpKind::Conv3x3);
    let mut sampler = PcSampler::new(k, seed).unwrap();
    let (y, perm) = partial_channel_forward(&mut tape, xv, &ops, b, 0, &mut sampler).unwrap();
    let yv = tape.value(y);
    let plane = 25;
    for (j, &src) in perm[sel..].iter().enumerate() {
        for s in 0..2 {
            let out = &yv[(s * c + sel + j) * plane..][..plane];
            let inp = &x.data()[(s * c + src) * plane..][..plane];
            prop_assert_eq!(out, inp);
        }
    }
    Ok(())
}

pub fn flops_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-10.0f64..10.0, 3), prop::collection::vec(0.0f64..1e6, 3))
}

pub fn flops_loss_in_unit_interval((alpha, costs): (Vec<f64>, Vec<f64>)) -> Outcome {
    prop_assume!(costs.iter().sum::<f64>() > 0.0);
    let mut tape = Tape::new();
    let b = tape.leaf(&Tensor::new(vec![1, 3], beta_of(&alpha)).unwrap());
    let l = flops_loss(&mut tape, &[b], &costs).unwrap();
    let v = tape.value(l)[0];
    prop_assert!((0.0..=1.0 + 1e-15).contains(&v), "{}", v);
    Ok(())
}

/// Runs one property with a fixed-seed runner.
pub fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Outcome) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(Config::with_cases(CASES), proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}
