//! Two-branch Lorentzian graph attention over a snippet sequence.
//!
//! The fused features are lifted onto the hyperboloid with the exponential
//! map at the origin. Each branch (node A, node B) then runs `layers` rounds
//! of distance-based adjacency followed by Lorentz-linear neighbourhood
//! aggregation, and finally re-balances time and space components:
//!
//! ```text
//! A_ij  = softmax_j(exp(-d_L(x_i, x_j)))
//! u_i   = sum_j A_ij HL(x_j),   z_i = u_i / (sqrt(-eta) |<u_i, u_i>_L|^(1/2))
//! temp  = sigmoid(z_0) e^gamma + 1.1
//! ups   = (temp^2 - 1) / (|z_1..|^2 + eps)
//! F^    = [temp, z_1.. sqrt(ups)]
//! ```
//!
//! Node A's enhanced rows are passed through leaky-ReLU and a row softmax
//! and then gate node B, either elementwise (`relu(A^ * B^)`, the default) or
//! through a `T x T` map (`relu((A^ B^^T) B^ / T)`); see [`Mixing`].

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lorentz::{self, Curvature};
use crate::params::{fan_in_uniform, Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive offset keeping the enhanced time component above one.
pub const TEMP_SHIFT: f64 = 1.1;

/// Default lifting radius cap; `cosh(10)` keeps time components near 1e4.
pub const DEFAULT_MAX_RADIUS: f64 = 10.0;

pub const DEFAULT_ADJACENCY_TEMPERATURE: f64 = 0.1;

/// How the normalised node A rows are combined with node B.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mixing {
    /// `relu(A^ * B^)`: per-snippet, per-feature gating.
    #[default]
    Elementwise,
    /// `relu((A^ B^^T) B^ / T)`: a snippet-to-snippet attention map.
    Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HlgattConfig {
    /// Width of the fused Euclidean features.
    pub d_in: usize,
    /// Spatial width of the hyperbolic features; defaults to `d_in`.
    pub hyperbolic_dim: usize,
    pub layers: usize,
    pub eta: f64,
    pub leaky_slope: f64,
    pub eps: f64,
    pub gamma_init: f64,
    /// Largest tangent radius allowed when lifting the input.
    pub max_radius: Option<f64>,
    pub adjacency_temperature: f64,
    pub mixing: Mixing,
}

impl HlgattConfig {
    pub fn new(d_in: usize) -> Self {
        HlgattConfig {
            d_in,
            hyperbolic_dim: d_in,
            layers: 2,
            eta: -1.0,
            leaky_slope: -2.0,
            eps: 1e-6,
            gamma_init: 0.0,
            max_radius: Some(DEFAULT_MAX_RADIUS),
            adjacency_temperature: DEFAULT_ADJACENCY_TEMPERATURE,
            mixing: Mixing::default(),
        }
    }

    pub fn curvature(&self) -> Result<Curvature> {
        Curvature::new(self.eta)
    }

    /// Width of the enhanced rows, time component included.
    pub fn output_dim(&self) -> usize {
        self.hyperbolic_dim + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.curvature()?;
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.layers == 0 || self.d_in == 0 || self.hyperbolic_dim == 0 {
            return Err(Error::Config("layers and widths must be positive".into()));
        }
        if !(self.adjacency_temperature > 0.0) {
            return Err(Error::Config(format!(
                "adjacency temperature must be positive, got {}",
                self.adjacency_temperature
            )));
        }
        if let Some(r) = self.max_radius {
            if !(r > 0.0) {
                return Err(Error::Config(format!(
                    "max radius must be positive, got {r}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchParams {
    /// Lorentz-linear weight `[out, in]` and bias per layer.
    pub layers: Vec<(ParamId, ParamId)>,
    pub gamma: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HlgattParams {
    pub config: HlgattConfig,
    pub node_a: BranchParams,
    pub node_b: BranchParams,
}

/// Intermediate values of one branch.
pub struct BranchTrace {
    pub adjacency: Vec<Var>,
    pub layers: Vec<Var>,
    pub enhanced: Var,
}

pub struct HlgattTrace {
    pub lifted: Var,
    pub node_a: BranchTrace,
    pub node_b: BranchTrace,
    /// Node A after leaky-ReLU and row softmax.
    pub node_a_normalized: Var,
    pub output: Var,
}

/// Row-stochastic similarity matrix from pairwise geodesic distances,
/// `softmax_j(exp(-d_ij) / temperature)`.
pub fn build_adjacency(
    tape: &mut Tape,
    points: Var,
    curvature: Curvature,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "adjacency temperature must be positive, got {temperature}"
        )));
    }
    let dist = lorentz::distance_matrix_var(tape, points, curvature)?;
    let neg = tape.scale(dist, -1.0)?;
    let sim = tape.exp(neg)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    tape.softmax(logits)
}

/// Neighbourhood aggregation of Lorentz-linear transformed points,
/// projected back onto the hyperboloid.
pub fn aggregate(
    tape: &mut Tape,
    points: Var,
    adjacency: Var,
    weight: Var,
    bias: Var,
    curvature: Curvature,
) -> Result<Var> {
    let moved = lorentz::lorentz_linear_var(tape, points, weight, bias, curvature)?;
    let u = tape.matmul(adjacency, moved)?;
    let self_product = lorentz::self_product_var(tape, u)?;
    let neg = tape.scale(self_product, -1.0)?;
    if let Some((row, q)) = tape
        .value(neg)
        .data()
        .iter()
        .enumerate()
        .find(|(_, q)| !(q.abs().sqrt() >= 1e-12))
    {
        return Err(Error::DegenerateAggregate {
            row,
            norm: q.abs().sqrt(),
        });
    }
    if let Some(q) = tape.value(neg).data().iter().find(|q| **q < 0.0) {
        return Err(Error::Contract(format!(
            "aggregate left the time-like cone (<u, u>_L = {})",
            -q
        )));
    }
    let norm = tape.sqrt(neg)?;
    let denom = tape.scale(norm, curvature.sqrt_neg())?;
    tape.div(u, denom)
}

/// Re-balances time and spatial parts of each row so the output sits on the
/// unit hyperboloid up to the `eps` regulariser.
pub fn enhance(tape: &mut Tape, z: Var, gamma: Var, eps: f64) -> Result<Var> {
    let n = tape.shape(z)[1];
    let time = tape.cols(z, 0, 1)?;
    let gate = tape.sigmoid(time)?;
    let scale = tape.exp(gamma)?;
    let scaled = tape.mul(gate, scale)?;
    let temp = tape.add_scalar(scaled, TEMP_SHIFT)?;
    let spatial = tape.cols(z, 1, n)?;
    let sq = tape.squared_norm(spatial, Some(1))?;
    let temp_sq = tape.mul(temp, temp)?;
    let numer = tape.add_scalar(temp_sq, -1.0)?;
    let denom = tape.add_scalar(sq, eps)?;
    let ups = tape.div(numer, denom)?;
    let root = tape.sqrt(ups)?;
    let spatial = tape.mul(spatial, root)?;
    tape.concat(&[temp, spatial], 1)
}

/// Combines normalised node A rows with node B rows, both `T x D`.
pub fn dual_node_attention(
    tape: &mut Tape,
    a_norm: Var,
    b_hat: Var,
    mixing: Mixing,
) -> Result<Var> {
    let mixed = match mixing {
        Mixing::Elementwise => tape.mul(a_norm, b_hat)?,
        Mixing::Matrix => {
            let bt = tape.transpose(b_hat)?;
            let scores = tape.matmul(a_norm, bt)?;
            let t = tape.shape(b_hat)[0] as f64;
            let scores = tape.scale(scores, 1.0 / t)?;
            tape.matmul(scores, b_hat)?
        }
    };
    tape.relu(mixed)
}

fn init_branch(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    config: &HlgattConfig,
) -> BranchParams {
    let layers = (0..config.layers)
        .map(|l| {
            let d_in = if l == 0 {
                config.d_in
            } else {
                config.hyperbolic_dim
            };
            let d_out = config.hyperbolic_dim;
            let w = store.add(
                format!("hlgatt.{name}.layer{l}.weight"),
                fan_in_uniform(rng, &[d_out, d_in], d_in),
            );
            let b = store.add(
                format!("hlgatt.{name}.layer{l}.bias"),
                fan_in_uniform(rng, &[d_out], d_in),
            );
            (w, b)
        })
        .collect();
    let gamma = store.add(
        format!("hlgatt.{name}.gamma"),
        Tensor::scalar(config.gamma_init),
    );
    BranchParams { layers, gamma }
}

impl HlgattParams {
    pub fn init(
        store: &mut ParamStore,
        config: HlgattConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let node_a = init_branch(store, rng, "node_a", &config);
        let node_b = init_branch(store, rng, "node_b", &config);
        Ok(HlgattParams {
            config,
            node_a,
            node_b,
        })
    }

    fn branch(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        branch: &BranchParams,
        lifted: Var,
    ) -> Result<BranchTrace> {
        let curvature = self.config.curvature()?;
        let mut x = lifted;
        let mut adjacency = Vec::with_capacity(branch.layers.len());
        let mut layers = Vec::with_capacity(branch.layers.len());
        for &(w, bias) in &branch.layers {
            let a = build_adjacency(tape, x, curvature, self.config.adjacency_temperature)?;
            x = aggregate(tape, x, a, b[w], b[bias], curvature)?;
            adjacency.push(a);
            layers.push(x);
        }
        let enhanced = enhance(tape, x, b[branch.gamma], self.config.eps)?;
        Ok(BranchTrace {
            adjacency,
            layers,
            enhanced,
        })
    }

    pub fn forward_trace(&self, tape: &mut Tape, b: &Bindings, fused: Var) -> Result<HlgattTrace> {
        let width = tape.shape(fused);
        if width.len() != 2 || width[1] != self.config.d_in {
            return Err(Error::dim(
                "hlgatt",
                format!("expected T x {} input, got {width:?}", self.config.d_in),
            ));
        }
        let curvature = self.config.curvature()?;
        let tangent = match self.config.max_radius {
            Some(r) => lorentz::clip_tangent_var(tape, fused, curvature, r)?,
            None => fused,
        };
        let lifted = lorentz::exp_map_origin_var(tape, tangent, curvature)?;
        let node_a = self.branch(tape, b, &self.node_a, lifted)?;
        let node_b = self.branch(tape, b, &self.node_b, lifted)?;
        let act = tape.leaky_relu(node_a.enhanced, self.config.leaky_slope)?;
        let node_a_normalized = tape.softmax(act)?;
        let output =
            dual_node_attention(tape, node_a_normalized, node_b.enhanced, self.config.mixing)?;
        Ok(HlgattTrace {
            lifted,
            node_a,
            node_b,
            node_a_normalized,
            output,
        })
    }

    /// `T x D_in` fused features to `T x (1 + hyperbolic_dim)` outputs.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, fused: Var) -> Result<Var> {
        Ok(self.forward_trace(tape, b, fused)?.output)
    }
}
