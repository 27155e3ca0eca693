//! Central finite-difference oracle used by unit tests.

use super::{Tape, Tensor, Var};

pub(crate) const H: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from
/// dominating through roundoff alone.
pub(crate) fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error between backward gradients and central
/// differences of `f` with respect to every entry of every input.
pub(crate) fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs);
        t.value(out).data()[0]
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + H;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - H;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k][i], numeric, 1e-3));
        }
    }
    worst
}

pub(crate) fn random_tensor(shape: &[usize], rng: &mut super::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).unwrap()
}
