//! Central finite differences, used as the reference for analytic gradients,
//! and the per-op comparison suite built on top of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one analytic-versus-numeric gradient comparison.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max rel err {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error
        )
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of `x`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step size {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around element {i} ({minus}, {plus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest elementwise error of `analytic` against `reference`, measured
/// relative to `max(|reference|, |analytic|)` once that exceeds `abs_floor`.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| {
            let diff = (a - r).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / a.abs().max(r.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Reduces a graph output to a scalar by a fixed random projection so that
/// every output element contributes to the gradient.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let value = tape.value(out);
    if value.numel() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ value.numel() as u64);
    let weights: Vec<f64> = (0..value.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w = tape.constant(Tensor::new(value.shape().to_vec(), weights)?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod, None)
}

/// Compares the tape gradient of `build` against central differences for
/// every input.
///
/// `make_tape` is called for every evaluation so training-mode graphs can
/// replay identical dropout masks.
pub fn check_graph<M, B>(
    name: &str,
    inputs: &[Tensor],
    make_tape: M,
    build: B,
    rel_tol: f64,
) -> Result<CheckReport>
where
    M: Fn() -> Tape,
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = make_tape();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = project(&mut tape, out)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = make_tape();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("inputs are leaves");
        let numeric = finite_diff_grad(
            |probe| {
                let mut values = inputs.to_vec();
                values[i] = probe.clone();
                eval(&values)
            },
            &inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(analytic, numeric.data(), GRAD_ABS_FLOOR));
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        passed: worst <= rel_tol,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape and data agree")
}

/// Uniform in [-2, 2] but at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, -2.0, 2.0);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = v.signum() * 2.0 * gap;
        }
    }
    t
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn unary(op: Op) -> Builder {
    Box::new(move |t, v| t.apply(op.clone(), &[v[0]]))
}

/// One gradient comparison per op in the differentiable set, on random
/// inputs drawn from `seed`.
pub fn op_suite(seed: u64, rel_tol: f64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let m23 = [2, 3];
    let mut cases: Vec<(&str, Vec<Tensor>, Builder)> = vec![
        (
            "matmul",
            vec![
                uniform(r, &[3, 4], -2.0, 2.0),
                uniform(r, &[4, 2], -2.0, 2.0),
            ],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "add (row broadcast)",
            vec![uniform(r, &m23, -2.0, 2.0), uniform(r, &[3], -2.0, 2.0)],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub (column broadcast)",
            vec![uniform(r, &m23, -2.0, 2.0), uniform(r, &[2, 1], -2.0, 2.0)],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "elementwise-mul",
            vec![uniform(r, &m23, -2.0, 2.0), uniform(r, &m23, -2.0, 2.0)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "elementwise-mul (scalar)",
            vec![uniform(r, &m23, -2.0, 2.0), uniform(r, &[1], -2.0, 2.0)],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "div",
            vec![uniform(r, &m23, -2.0, 2.0), uniform(r, &[2, 1], 0.5, 2.0)],
            Box::new(|t, v| t.div(v[0], v[1])),
        ),
        (
            "scalar-mul",
            vec![uniform(r, &m23, -2.0, 2.0)],
            unary(Op::ScalarMul(-1.7)),
        ),
        (
            "concat axis 0",
            vec![uniform(r, &m23, -2.0, 2.0), uniform(r, &[1, 3], -2.0, 2.0)],
            Box::new(|t, v| t.concat(v, 0)),
        ),
        (
            "concat axis 1",
            vec![uniform(r, &m23, -2.0, 2.0), uniform(r, &[2, 1], -2.0, 2.0)],
            Box::new(|t, v| t.concat(v, 1)),
        ),
        (
            "slice",
            vec![uniform(r, &[3, 4], -2.0, 2.0)],
            unary(Op::Slice {
                axis: 1,
                start: 1,
                end: 3,
            }),
        ),
        (
            "transpose",
            vec![uniform(r, &m23, -2.0, 2.0)],
            unary(Op::Transpose),
        ),
        (
            "sum",
            vec![uniform(r, &m23, -2.0, 2.0)],
            unary(Op::Sum { axis: Some(0) }),
        ),
        (
            "mean",
            vec![uniform(r, &m23, -2.0, 2.0)],
            unary(Op::Mean { axis: Some(1) }),
        ),
        ("exp", vec![uniform(r, &m23, -2.0, 2.0)], unary(Op::Exp)),
        ("sqrt", vec![uniform(r, &m23, 0.1, 2.0)], unary(Op::Sqrt)),
        (
            "sigmoid",
            vec![uniform(r, &m23, -2.0, 2.0)],
            unary(Op::Sigmoid),
        ),
        (
            "softmax",
            vec![uniform(r, &m23, -2.0, 2.0)],
            unary(Op::Softmax),
        ),
        ("gelu", vec![uniform(r, &m23, -2.0, 2.0)], unary(Op::Gelu)),
        ("relu", vec![away_from_zero(r, &m23, 1e-2)], unary(Op::Relu)),
        (
            "leaky-relu",
            vec![away_from_zero(r, &m23, 1e-2)],
            unary(Op::LeakyRelu { slope: -2.0 }),
        ),
        ("log", vec![uniform(r, &m23, 0.1, 2.0)], unary(Op::Log)),
        (
            "arccosh",
            vec![uniform(r, &m23, 1.01, 3.0)],
            unary(Op::Arccosh),
        ),
        ("cosh", vec![uniform(r, &m23, -2.0, 2.0)], unary(Op::Cosh)),
        ("sinh", vec![uniform(r, &m23, -2.0, 2.0)], unary(Op::Sinh)),
        ("sinhc", vec![uniform(r, &m23, -2.0, 2.0)], unary(Op::Sinhc)),
        (
            "squared-norm",
            vec![uniform(r, &m23, -2.0, 2.0)],
            unary(Op::SquaredNorm { axis: Some(1) }),
        ),
        (
            "clamp",
            vec![away_from_zero(r, &m23, 1e-2)],
            unary(Op::Clamp {
                min: -1.0,
                max: 1.0,
            }),
        ),
    ];
    // keep finite differences away from the clamp boundaries
    for v in cases.last_mut().unwrap().1[0].data_mut() {
        if (v.abs() - 1.0).abs() < 1e-2 {
            *v *= 1.1;
        }
    }

    let mut reports = Vec::with_capacity(cases.len() + 1);
    for (name, inputs, build) in &cases {
        reports.push(check_graph(name, inputs, Tape::new, build, rel_tol)?);
    }
    let mask_seed = seed.wrapping_add(1);
    reports.push(check_graph(
        "dropout (training mask)",
        &[uniform(r, &m23, -2.0, 2.0)],
        || Tape::training(ChaCha8Rng::seed_from_u64(mask_seed)),
        |t, v| t.dropout(v[0], 0.1),
        rel_tol,
    )?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in [1, 2, 3] {
            for report in op_suite(seed, GRAD_REL_TOL).unwrap() {
                assert!(report.passed, "seed {seed}: {report}");
            }
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let w = uniform(&mut rng, &[2, 4], -1.0, 1.0);
        let report = check_graph(
            "linear-gelu-softmax-log",
            &[x, w],
            Tape::new,
            |t, v| {
                let h = t.linear(v[0], v[1], None)?;
                let h = t.gelu(h)?;
                let p = t.softmax(h)?;
                let lp = t.log(p)?;
                t.mean(lp, None)
            },
            GRAD_REL_TOL,
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn squared_norm_gradient_is_twice_x() {
        let x = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
        assert!((g.data()[1] - 8.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        let r = finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
