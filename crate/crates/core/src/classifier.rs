//! Hyperbolic snippet classifier and the top-k multiple-instance loss.
//!
//! Each feature row is lifted onto the hyperboloid, mapped by a Lorentz
//! linear layer to a single spatial coordinate and squashed by a sigmoid.
//! A video's bag score is the mean of its `k` largest snippet scores, and
//! training minimises binary cross-entropy of bag scores against video labels.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lorentz::{self, Curvature};
use crate::params::{fan_in_uniform, Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FRAMES_PER_SNIPPET: usize = 16;

/// Bounds applied to bag scores before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-7;

/// Per-snippet anomaly scores of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    scores: Vec<f64>,
    frames_per_snippet: usize,
}

impl ScoreSeries {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        Self::with_frames(scores, FRAMES_PER_SNIPPET)
    }

    pub fn with_frames(scores: Vec<f64>, frames_per_snippet: usize) -> Result<Self> {
        if frames_per_snippet == 0 {
            return Err(Error::Contract(
                "frames_per_snippet must be positive".into(),
            ));
        }
        if let Some((i, s)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(0.0..=1.0).contains(*s))
        {
            return Err(Error::Contract(format!("score {i} is {s}, outside [0, 1]")));
        }
        Ok(ScoreSeries {
            scores,
            frames_per_snippet,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn frames_per_snippet(&self) -> usize {
        self.frames_per_snippet
    }

    /// Repeats every snippet score over its frames.
    pub fn frame_scores(&self) -> Vec<f64> {
        self.scores
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, self.frames_per_snippet))
            .collect()
    }
}

/// Number of snippets averaged into the bag score of a `t`-snippet video.
pub fn k_rule(t: usize) -> usize {
    t / 16 + 1
}

/// Indices of the `k` largest scores, larger first; equal scores keep the
/// earlier snippet first.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(k);
    Ok(order)
}

pub fn topk_mean(scores: &ScoreSeries, k: usize) -> Result<f64> {
    let idx = topk_indices(scores.scores(), k)?;
    Ok(idx.iter().map(|&i| scores.scores[i]).sum::<f64>() / k as f64)
}

/// Binary cross-entropy of one clamped bag score.
pub fn bag_loss(bag_score: f64, label: bool) -> f64 {
    let s = bag_score.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    if label {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// Mean bag cross-entropy over a batch, with `k` chosen per video by `k_of`.
pub fn mil_loss(batch: &[(ScoreSeries, bool)], k_of: impl Fn(usize) -> usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("MIL loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for (scores, label) in batch {
        total += bag_loss(topk_mean(scores, k_of(scores.len()))?, *label);
    }
    Ok(total / batch.len() as f64)
}

/// Tape version of [`topk_mean`] for a `T x 1` score column. The selection
/// is made on the current values and treated as constant.
pub fn topk_mean_var(tape: &mut Tape, scores: Var, k: usize) -> Result<Var> {
    let idx = topk_indices(tape.value(scores).data(), k)?;
    let mut mask = Tensor::zeros(tape.shape(scores));
    for i in idx {
        mask.data_mut()[i] = 1.0 / k as f64;
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(scores, mask)?;
    tape.sum(picked, None)
}

/// Tape version of [`bag_loss`].
pub fn bag_loss_var(tape: &mut Tape, bag_score: Var, label: bool) -> Result<Var> {
    let s = tape.clamp(bag_score, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let p = if label {
        s
    } else {
        let neg = tape.scale(s, -1.0)?;
        tape.add_scalar(neg, 1.0)?
    };
    let log = tape.log(p)?;
    tape.scale(log, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub d_in: usize,
    pub eta: f64,
    /// Lorentz-linear weight `[1, d_in]` and bias `[1]`.
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ClassifierParams {
    pub fn init(
        store: &mut ParamStore,
        d_in: usize,
        eta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Curvature::new(eta)?;
        if d_in == 0 {
            return Err(Error::Config(
                "classifier input width must be positive".into(),
            ));
        }
        let weight = store.add("classifier.weight", fan_in_uniform(rng, &[1, d_in], d_in));
        let bias = store.add("classifier.bias", fan_in_uniform(rng, &[1], d_in));
        Ok(ClassifierParams {
            d_in,
            eta,
            weight,
            bias,
        })
    }

    /// Pre-sigmoid logits as a `T x 1` column.
    pub fn logits(&self, tape: &mut Tape, b: &Bindings, features: Var) -> Result<Var> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::dim(
                "classify",
                format!("expected T x {} features, got {shape:?}", self.d_in),
            ));
        }
        let curvature = Curvature::new(self.eta)?;
        let lifted = lorentz::exp_map_origin_var(tape, features, curvature)?;
        let out =
            lorentz::lorentz_linear_var(tape, lifted, b[self.weight], b[self.bias], curvature)?;
        tape.cols(out, 1, 2)
    }

    /// Snippet scores in `(0, 1)` as a `T x 1` column.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, features: Var) -> Result<Var> {
        let logits = self.logits(tape, b, features)?;
        tape.sigmoid(logits)
    }

    pub fn classify(&self, store: &ParamStore, features: &Tensor) -> Result<ScoreSeries> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(features.clone());
        let s = self.forward(&mut tape, &b, x)?;
        ScoreSeries::new(tape.value(s).data().to_vec())
    }
}
