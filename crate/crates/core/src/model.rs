//! The full scoring network: fusion adapter, graph attention, classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cfa::{AudioGate, CfaConfig, CfaParams};
use crate::classifier::{bag_loss_var, k_rule, topk_mean_var, ClassifierParams, ScoreSeries};
use crate::data::VideoFeatureBag;
use crate::error::{Error, Result};
use crate::gradcheck::{check_graph, CheckReport};
use crate::hlgatt::{HlgattConfig, HlgattParams, Mixing};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_visual: usize,
    pub d_audio: usize,
    pub heads: usize,
    pub prefix_dim: usize,
    pub bottleneck: usize,
    pub dropout: f64,
    pub eta: f64,
    pub layers: usize,
    pub leaky_slope: f64,
    pub eps: f64,
    pub gamma_init: f64,
    pub adjacency_temperature: f64,
    pub max_radius: Option<f64>,
    pub mixing: Mixing,
    /// Replace the audio modulation gate by zeros.
    pub visual_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let cfa = CfaConfig::default();
        let h = HlgattConfig::new(cfa.d_model());
        ModelConfig {
            d_visual: cfa.d_visual,
            d_audio: cfa.d_audio,
            heads: cfa.heads,
            prefix_dim: cfa.prefix_dim,
            bottleneck: cfa.bottleneck,
            dropout: cfa.dropout,
            eta: h.eta,
            layers: h.layers,
            leaky_slope: h.leaky_slope,
            eps: h.eps,
            gamma_init: h.gamma_init,
            adjacency_temperature: h.adjacency_temperature,
            max_radius: h.max_radius,
            mixing: h.mixing,
            visual_only: false,
        }
    }
}

impl ModelConfig {
    pub fn cfa(&self) -> CfaConfig {
        CfaConfig {
            d_visual: self.d_visual,
            d_audio: self.d_audio,
            heads: self.heads,
            prefix_dim: self.prefix_dim,
            bottleneck: self.bottleneck,
            dropout: self.dropout,
        }
    }

    pub fn hlgatt(&self) -> HlgattConfig {
        HlgattConfig {
            layers: self.layers,
            eta: self.eta,
            leaky_slope: self.leaky_slope,
            eps: self.eps,
            gamma_init: self.gamma_init,
            adjacency_temperature: self.adjacency_temperature,
            max_radius: self.max_radius,
            mixing: self.mixing,
            ..HlgattConfig::new(self.d_visual)
        }
    }

    pub fn audio_gate(&self) -> AudioGate {
        if self.visual_only {
            AudioGate::Closed
        } else {
            AudioGate::Learned
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub cfa: CfaParams,
    pub hlgatt: HlgattParams,
    pub classifier: ClassifierParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfa = CfaParams::init(&mut store, config.cfa(), &mut rng)?;
        let hlgatt = HlgattParams::init(&mut store, config.hlgatt(), &mut rng)?;
        let classifier =
            ClassifierParams::init(&mut store, hlgatt.config.output_dim(), config.eta, &mut rng)?;
        Ok(Model {
            config,
            store,
            cfa,
            hlgatt,
            classifier,
        })
    }

    pub fn check_bag(&self, bag: &VideoFeatureBag) -> Result<()> {
        if bag.visual.cols() != self.config.d_visual || bag.audio.cols() != self.config.d_audio {
            return Err(Error::dim(
                "model",
                format!(
                    "bag {} has widths {} and {}, model expects {} and {}",
                    bag.id,
                    bag.visual.cols(),
                    bag.audio.cols(),
                    self.config.d_visual,
                    self.config.d_audio
                ),
            ));
        }
        Ok(())
    }

    /// Snippet scores as a `T x 1` column.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, visual: Var, audio: Var) -> Result<Var> {
        let fused = self
            .cfa
            .forward(tape, b, visual, audio, self.config.audio_gate())?;
        let graph = self.hlgatt.forward(tape, b, fused)?;
        self.classifier.forward(tape, b, graph)
    }

    /// Inference-mode scores (dropout off) for one bag.
    pub fn score(&self, bag: &VideoFeatureBag) -> Result<ScoreSeries> {
        self.check_bag(bag)?;
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let v = tape.constant(bag.visual.clone());
        let a = tape.constant(bag.audio.clone());
        let s = self.forward(&mut tape, &b, v, a)?;
        ScoreSeries::new(tape.value(s).data().to_vec())
    }
}

/// Gradient of the bag loss with respect to every model parameter on a
/// small three-snippet bag, checked against finite differences. Prefixes
/// are randomised so their gradients are exercised away from zero.
pub fn end_to_end_check(seed: u64, rel_tol: f64) -> Result<CheckReport> {
    let config = ModelConfig {
        d_visual: 6,
        d_audio: 4,
        heads: 2,
        prefix_dim: 2,
        bottleneck: 4,
        ..ModelConfig::default()
    };
    let mut model = Model::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for id in [model.cfa.prefix_k, model.cfa.prefix_v]
        .into_iter()
        .flatten()
    {
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let mut sample = |rows: usize, cols: usize| -> Result<Tensor> {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    };
    let visual = sample(3, 6)?;
    let audio = sample(3, 4)?;
    let inputs: Vec<Tensor> = model.store.iter().map(|p| p.value.clone()).collect();
    let mut reports = Vec::new();
    for label in [true, false] {
        reports.push(check_graph(
            "end-to-end bag loss",
            &inputs,
            Tape::new,
            |tape, vars| {
                let b = Bindings::from_vars(vars.to_vec());
                let v = tape.constant(visual.clone());
                let a = tape.constant(audio.clone());
                let scores = model.forward(tape, &b, v, a)?;
                let bag = topk_mean_var(tape, scores, k_rule(3))?;
                bag_loss_var(tape, bag, label)
            },
            rel_tol,
        )?);
    }
    Ok(reports
        .into_iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("two reports"))
}
