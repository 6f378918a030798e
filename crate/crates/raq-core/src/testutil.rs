//! Central finite-difference gradient oracle used by unit tests.
//!
//! Independent of the backward implementation: it only re-runs forward
//! passes with perturbed parameter data and compares slopes.

use crate::tape::{Tape, Var};
use crate::tensor::SharedTensor;

pub struct GradCheckOpts {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

/// Checks every coordinate of every parameter against a central difference.
/// `build` must construct the same scalar loss from the current parameter
/// values each time it is called.
pub fn gradcheck(params: &[SharedTensor], build: impl Fn(&mut Tape) -> Var, opts: GradCheckOpts) {
    let eval = |build: &dyn Fn(&mut Tape) -> Var| -> f64 {
        let mut tape = Tape::new();
        let root = build(&mut tape);
        tape.scalar(root)
    };

    for p in params {
        p.borrow_mut().zero_grad();
    }
    let mut tape = Tape::new();
    let root = build(&mut tape);
    tape.backward(root);
    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|p| {
            p.borrow()
                .grad()
                .expect("parameter received no gradient")
                .to_vec()
        })
        .collect();

    for (pi, p) in params.iter().enumerate() {
        let n = p.borrow().numel();
        for i in 0..n {
            let orig = p.borrow().data()[i];
            let hi = orig + opts.h as f32;
            let lo = orig - opts.h as f32;
            p.borrow_mut().data_mut()[i] = hi;
            let f_hi = eval(&build);
            p.borrow_mut().data_mut()[i] = lo;
            let f_lo = eval(&build);
            p.borrow_mut().data_mut()[i] = orig;
            // Use the realized f32 step, not the nominal one.
            let step = hi as f64 - lo as f64;
            let numeric = (f_hi - f_lo) / step;
            let a = analytic[pi][i] as f64;
            let err = (a - numeric).abs();
            let tol = opts.atol + opts.rtol * a.abs().max(numeric.abs());
            assert!(
                err <= tol,
                "gradcheck: param {pi}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}, \
                 err {err:.3e} > tol {tol:.3e}"
            );
        }
    }
    for p in params {
        p.borrow_mut().zero_grad();
    }
}
