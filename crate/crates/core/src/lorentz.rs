//! Lorentz-model hyperbolic geometry.
//!
//! Points are rows `x = (x0, x1, .., xn)` on the upper sheet of the
//! hyperboloid `<x, x>_L = 1/eta` with `<x, y>_L = -x0*y0 + sum_i xi*yi`.
//! Column 0 is the time component.
//!
//! Every routine comes in two flavours: plain `f64` functions used for
//! validation and evaluation, and `*_var` functions that record the same
//! computation on a [`Tape`].

use crate::autodiff::{Tape, Var, ARCCOSH_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance used when an operation requires on-manifold input. It is
/// scaled by `max(1, x0^2)` since rounding in `<x, x>_L` grows with the
/// magnitude of the coordinates.
pub const ON_MANIFOLD_TOL: f64 = 1e-6;

/// Negative curvature `eta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(eta: f64) -> Result<Self> {
        if eta < 0.0 && eta.is_finite() {
            Ok(Curvature(eta))
        } else {
            Err(Error::Config(format!(
                "curvature must be negative and finite, got {eta}"
            )))
        }
    }

    pub fn eta(self) -> f64 {
        self.0
    }

    /// `sqrt(-eta)`.
    pub fn sqrt_neg(self) -> f64 {
        (-self.0).sqrt()
    }

    /// Time component of the origin, `1 / sqrt(-eta)`.
    pub fn radius(self) -> f64 {
        1.0 / self.sqrt_neg()
    }

    /// The constant self product `1 / eta` of on-manifold points.
    pub fn self_product(self) -> f64 {
        1.0 / self.0
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature(-1.0)
    }
}

/// Rows constrained to the hyperboloid of a given curvature.
#[derive(Clone, Debug, PartialEq)]
pub struct LorentzPoints {
    values: Tensor,
    curvature: Curvature,
}

impl LorentzPoints {
    /// Validates every row against the manifold constraint.
    pub fn new(values: Tensor, curvature: Curvature) -> Result<Self> {
        check_rows_on_manifold(&values, curvature)?;
        Ok(LorentzPoints { values, curvature })
    }

    pub fn origin(rows: usize, spatial_dim: usize, curvature: Curvature) -> Self {
        let mut values = Tensor::zeros(&[rows, spatial_dim + 1]);
        for i in 0..rows {
            values.data_mut()[i * (spatial_dim + 1)] = curvature.radius();
        }
        LorentzPoints { values, curvature }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::dim(
            "lorentz_inner",
            format!("rows of length {} and {}", x.len(), y.len()),
        ));
    }
    let spatial: f64 = x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum();
    Ok(spatial - x[0] * y[0])
}

fn check_row_on_manifold(x: &[f64], curvature: Curvature) -> Result<()> {
    let dev = (lorentz_inner(x, x)? - curvature.self_product()).abs();
    let allowed = ON_MANIFOLD_TOL * (x[0] * x[0]).max(1.0);
    if !(dev <= allowed) || x[0] <= 0.0 {
        return Err(Error::Contract(format!(
            "point is off the hyperboloid (deviation {dev:e}, time component {})",
            x[0]
        )));
    }
    Ok(())
}

fn check_rows_on_manifold(values: &Tensor, curvature: Curvature) -> Result<()> {
    if values.shape().len() != 2 || values.cols() < 2 {
        return Err(Error::dim(
            "lorentz",
            format!("expected T x (1+D) points, got {:?}", values.shape()),
        ));
    }
    (0..values.rows()).try_for_each(|i| check_row_on_manifold(values.row(i), curvature))
}

/// Geodesic distance `arccosh(eta * <x, y>_L) / sqrt(-eta)`.
pub fn lorentz_distance(x: &[f64], y: &[f64], curvature: Curvature) -> Result<f64> {
    check_row_on_manifold(x, curvature)?;
    check_row_on_manifold(y, curvature)?;
    if x == y {
        return Ok(0.0);
    }
    let arg = curvature.eta() * lorentz_inner(x, y)?;
    Ok(arg.max(1.0).acosh() / curvature.sqrt_neg())
}

/// Maps each row of a `T x D` tangent matrix at the origin onto the
/// hyperboloid, giving `T x (1+D)` points.
pub fn exp_map_origin(v: &Tensor, curvature: Curvature) -> Result<LorentzPoints> {
    if !v.is_finite() {
        return Err(Error::Numeric("exp_map_origin input is not finite".into()));
    }
    if v.shape().len() != 2 {
        return Err(Error::dim(
            "exp_map_origin",
            format!("expected a matrix, got {:?}", v.shape()),
        ));
    }
    let (rows, d) = (v.rows(), v.cols());
    let c = curvature.sqrt_neg();
    let mut out = Vec::with_capacity(rows * (d + 1));
    for i in 0..rows {
        let row = v.row(i);
        let r = c * row.iter().map(|a| a * a).sum::<f64>().sqrt();
        out.push(r.cosh() / c);
        let scale = crate::autodiff::sinhc(r);
        out.extend(row.iter().map(|a| a * scale));
    }
    Ok(LorentzPoints {
        values: Tensor::matrix(rows, d + 1, out)?,
        curvature,
    })
}

/// Affine map on the spatial part with the time component recomputed from
/// the constraint. `weight` is `D_out x D_in`.
pub fn lorentz_linear(
    x: &[f64],
    weight: &Tensor,
    bias: &[f64],
    curvature: Curvature,
) -> Result<Vec<f64>> {
    let (d_out, d_in) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(Error::dim("lorentz_linear", format!("weight shape {s:?}"))),
    };
    if x.len() != d_in + 1 || bias.len() != d_out {
        return Err(Error::dim(
            "lorentz_linear",
            format!(
                "point of length {}, weight {d_out}x{d_in}, bias {}",
                x.len(),
                bias.len()
            ),
        ));
    }
    let spatial: Vec<f64> = (0..d_out)
        .map(|o| {
            weight
                .row(o)
                .iter()
                .zip(&x[1..])
                .map(|(w, v)| w * v)
                .sum::<f64>()
                + bias[o]
        })
        .collect();
    let time = (-1.0 / curvature.eta() + spatial.iter().map(|s| s * s).sum::<f64>()).sqrt();
    let mut out = Vec::with_capacity(d_out + 1);
    out.push(time);
    out.extend(spatial);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManifoldReport {
    pub max_deviation: f64,
    pub within_tolerance: bool,
}

/// Largest `|<x, x>_L - 1/eta|` over the rows of `values`.
pub fn manifold_deviation(values: &Tensor, curvature: Curvature) -> f64 {
    (0..values.rows())
        .map(|i| {
            let x = values.row(i);
            let spatial: f64 = x[1..].iter().map(|a| a * a).sum();
            (spatial - x[0] * x[0] - curvature.self_product()).abs()
        })
        .fold(0.0, f64::max)
}

pub fn manifold_check(points: &LorentzPoints, tol: f64) -> ManifoldReport {
    let max_deviation = manifold_deviation(&points.values, points.curvature);
    ManifoldReport {
        max_deviation,
        within_tolerance: max_deviation <= tol,
    }
}

/// Tape version of [`exp_map_origin`].
pub fn exp_map_origin_var(tape: &mut Tape, v: Var, curvature: Curvature) -> Result<Var> {
    let c = curvature.sqrt_neg();
    let sq = tape.squared_norm(v, Some(1))?;
    let norm = tape.sqrt(sq)?;
    let r = tape.scale(norm, c)?;
    let cosh = tape.cosh(r)?;
    let time = tape.scale(cosh, 1.0 / c)?;
    let ratio = tape.sinhc(r)?;
    let spatial = tape.mul(v, ratio)?;
    tape.concat(&[time, spatial], 1)
}

/// Shrinks rows of `v` whose tangent radius `sqrt(-eta) |v|` exceeds
/// `max_radius` back onto that radius; shorter rows pass unchanged.
///
/// Points further out have time components beyond `cosh(max_radius)`, where
/// Lorentz inner products lose all precision to cancellation.
pub fn clip_tangent_var(
    tape: &mut Tape,
    v: Var,
    curvature: Curvature,
    max_radius: f64,
) -> Result<Var> {
    if !(max_radius > 0.0) {
        return Err(Error::Config(format!(
            "clip radius must be positive, got {max_radius}"
        )));
    }
    let sq = tape.squared_norm(v, Some(1))?;
    let norm = tape.sqrt(sq)?;
    let r = tape.scale(norm, curvature.sqrt_neg())?;
    let bounded = tape.clamp(r, max_radius, f64::INFINITY)?;
    let cap = tape.constant(Tensor::full(tape.shape(bounded), max_radius));
    let factor = tape.div(cap, bounded)?;
    tape.mul(v, factor)
}

/// Tape version of [`lorentz_linear`] applied to every row of `x`.
pub fn lorentz_linear_var(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Var,
    curvature: Curvature,
) -> Result<Var> {
    let cols = tape.shape(x)[1];
    let xs = tape.cols(x, 1, cols)?;
    let spatial = tape.linear(xs, weight, Some(bias))?;
    let sq = tape.squared_norm(spatial, Some(1))?;
    let shifted = tape.add_scalar(sq, -1.0 / curvature.eta())?;
    let time = tape.sqrt(shifted)?;
    tape.concat(&[time, spatial], 1)
}

/// Pairwise `<x_i, y_j>_L` as a `T x T'` matrix.
pub fn inner_matrix_var(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let n = tape.shape(x)[1];
    let x0 = tape.cols(x, 0, 1)?;
    let xs = tape.cols(x, 1, n)?;
    let y0 = tape.cols(y, 0, 1)?;
    let ys = tape.cols(y, 1, n)?;
    let ys_t = tape.transpose(ys)?;
    let spatial = tape.matmul(xs, ys_t)?;
    let y0_t = tape.transpose(y0)?;
    let time = tape.matmul(x0, y0_t)?;
    tape.sub(spatial, time)
}

/// Per-row self product `<u_i, u_i>_L` as a `T x 1` column.
pub fn self_product_var(tape: &mut Tape, u: Var) -> Result<Var> {
    let n = tape.shape(u)[1];
    let u0 = tape.cols(u, 0, 1)?;
    let us = tape.cols(u, 1, n)?;
    let spatial = tape.squared_norm(us, Some(1))?;
    let time = tape.mul(u0, u0)?;
    tape.sub(spatial, time)
}

/// Pairwise geodesic distances of the rows of `x`.
///
/// Every entry goes through the clamped arccosh, so coincident rows sit at
/// the floor distance `arccosh(1 + 1e-12) / sqrt(-eta)`. The diagonal is
/// pinned to that constant and carries no gradient.
pub fn distance_matrix_var(tape: &mut Tape, x: Var, curvature: Curvature) -> Result<Var> {
    check_rows_on_manifold(tape.value(x), curvature)?;
    let t = tape.shape(x)[0];
    let inner = inner_matrix_var(tape, x, x)?;
    let arg = tape.scale(inner, curvature.eta())?;
    let theta = tape.arccosh(arg)?;
    let dist = tape.scale(theta, 1.0 / curvature.sqrt_neg())?;
    let floor = ARCCOSH_FLOOR.acosh() / curvature.sqrt_neg();
    let mut off_diag = Tensor::full(&[t, t], 1.0);
    let mut diag = Tensor::zeros(&[t, t]);
    for i in 0..t {
        off_diag.data_mut()[i * t + i] = 0.0;
        diag.data_mut()[i * t + i] = floor;
    }
    let mask = tape.constant(off_diag);
    let diag = tape.constant(diag);
    let off = tape.mul(dist, mask)?;
    tape.add(off, diag)
}
