//! Central finite-difference gradient oracle shared by the test targets.

#![allow(dead_code)]

pub mod eval_oracle;
pub mod grad_cases;
pub mod matching_oracle;
pub mod metric_cases;
pub mod orientation_oracle;
pub mod query_checks;
pub mod spots;

use std::collections::BTreeMap;

use shipseg_core::{Graph, ParamStore, Session, Tensor, Var};

pub const STEP: f64 = 1e-5;
/// Magnitude below which gradient entries are compared absolutely. Central
/// differences at `STEP` carry roundoff of about `1e-16 * |loss| / STEP`,
/// i.e. ~1e-10 for losses of order ten, so exactly-zero gradients (such as
/// attention key biases under softmax) need a floor above that.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn eval(store: &ParamStore, f: &dyn Fn(&Session<'_>) -> f64) -> f64 {
    let g = Graph::new();
    let s = Session::new(&g, store);
    f(&s)
}

/// Compares the tape gradients of `loss` against central differences for
/// every scalar of every parameter in `store` whose name passes `filter`.
pub fn check_gradients<F>(store: &ParamStore, filter: impl Fn(&str) -> bool, loss: F) -> GradReport
where
    F: for<'g> Fn(&Session<'g>) -> Var<'g>,
{
    let analytic: BTreeMap<String, Tensor> = {
        let g = Graph::new();
        let s = Session::new(&g, store);
        // bind every parameter so untouched ones report zero gradients
        for name in store.names() {
            s.param(name);
        }
        let l = loss(&s);
        assert!(l.item().is_finite(), "loss is not finite");
        let grads = g.backward(l);
        s.gradients(&grads)
    };
    let scalar = |s: &Session<'_>| loss(s).item();
    let mut work = store.clone();
    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let names: Vec<String> = store.names().filter(|n| filter(n)).cloned().collect();
    for name in names {
        let a = &analytic[&name];
        for i in 0..a.numel() {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + STEP;
            let plus = eval(&work, &scalar);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - STEP;
            let minus = eval(&work, &scalar);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let e = rel_err(a.data()[i], numeric);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("{name}[{i}] analytic {} numeric {numeric}", a.data()[i]);
            }
        }
    }
    report
}

/// Deterministic pseudo-random tensor in `[-scale, scale]`.
pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        ((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
    })
}
