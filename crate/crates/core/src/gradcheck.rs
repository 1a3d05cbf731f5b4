//! Central-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked elements of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks the gradient of `sum(build(inputs))` with respect to every
/// element of every input.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    grad_check_filtered(build, inputs, eps, |_, _, _| false)
}

/// As [`grad_check`], but each element is scored by its best agreement over
/// several step sizes, using the central and both one-sided differences at
/// each step.
///
/// In f32, a small step drowns the difference in rounding noise, while a
/// large step can straddle a kink (relu, hardswish, a bilinear cell
/// boundary) deep inside a composite block. No single step suits both, and
/// next to a kink only the difference taken on the far side of it is clean.
/// A wrong analytic gradient disagrees with all of them, so the check keeps
/// its power.
pub fn grad_check_steps<F>(build: F, inputs: &[Tensor], steps: &[f32]) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    check(build, inputs, steps, true, |_, _, _| false)
}

/// As [`grad_check`], skipping elements for which `skip(input, element,
/// value)` holds (points where the function has a kink).
pub fn grad_check_filtered<F, S>(
    build: F,
    inputs: &[Tensor],
    eps: f32,
    skip: S,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
    S: Fn(usize, usize, f32) -> bool,
{
    check(build, inputs, &[eps], false, skip)
}

fn check<F, S>(
    build: F,
    inputs: &[Tensor],
    steps: &[f32],
    one_sided: bool,
    skip: S,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
    S: Fn(usize, usize, f32) -> bool,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars)?;
    let total = tape.sum(out);
    let grads = tape.backward(total);
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(grads);

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars)?;
        let v = tape.value(out);
        Ok(v.data().iter().map(|&x| x as f64).sum())
    };

    let f0 = if one_sided { eval(inputs)? } else { 0.0 };
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for i in 0..inputs.len() {
        for (j, &a) in analytic[i].iter().enumerate() {
            let x0 = inputs[i].data()[j];
            if skip(i, j, x0) {
                continue;
            }
            let a = a as f64;
            let mut err = f64::INFINITY;
            for &eps in steps {
                work[i].data_mut()[j] = x0 + eps;
                let fp = eval(&work)?;
                work[i].data_mut()[j] = x0 - eps;
                let fm = eval(&work)?;
                work[i].data_mut()[j] = x0;
                // Use the realized step: x0 ± eps is rounded in f32.
                let (up, down) = ((x0 + eps) as f64, (x0 - eps) as f64);
                let mut numeric = vec![(fp - fm) / (up - down)];
                if one_sided {
                    numeric.push((fp - f0) / (up - x0 as f64));
                    numeric.push((f0 - fm) / (x0 as f64 - down));
                }
                for n in numeric {
                    err = err.min((a - n).abs() / a.abs().max(1.0));
                }
            }
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> Tensor {
        Tensor::new(&[4], vec![0.7, -1.3, 2.1, 0.4]).unwrap()
    }

    #[test]
    fn step_ladder_passes_a_correct_gradient() {
        let rep = grad_check_steps(|t, v| t.mul(v[0], v[0]), &[input()], &[1e-2, 1e-3]).unwrap();
        assert_eq!(rep.checked, 4);
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn step_ladder_still_catches_a_wrong_gradient() {
        // x * stop_grad(x): the tape sees half the true derivative.
        let rep = grad_check_steps(
            |t, v| {
                let x = t.value(v[0]).clone();
                let frozen = t.constant(x);
                t.mul(v[0], frozen)
            },
            &[input()],
            &[1e-2, 3e-3, 1e-3],
        )
        .unwrap();
        assert!(rep.max_rel_error > 0.4, "{rep:?}");
    }
}
