//! Cross-modal fusion adapter.
//!
//! Visual snippets query audio snippets through multi-head attention whose
//! keys and values are extended with learnable prefix rows. The attended
//! audio passes a bottleneck adapter, is gated elementwise by a sigmoid
//! modulation computed from the audio features, added to the visual
//! features, and refined by a fully connected layer:
//!
//! ```text
//! F_att   = softmax(Q [K; P_k]^T / sqrt(d)) [V; P_v]      (per head)
//! F_att^  = up(dropout(gelu(down(F_att))))
//! F_mod   = sigmoid(F_A W_mod^T)
//! F_fused = fc(F_V + F_att^ * F_mod)
//! ```
//!
//! The fused width equals the visual width.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{add_linear, fan_in_uniform, Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfaConfig {
    pub d_visual: usize,
    pub d_audio: usize,
    pub heads: usize,
    pub prefix_dim: usize,
    pub bottleneck: usize,
    pub dropout: f64,
}

impl Default for CfaConfig {
    fn default() -> Self {
        CfaConfig {
            d_visual: 1024,
            d_audio: 128,
            heads: 4,
            prefix_dim: 64,
            bottleneck: 256,
            dropout: 0.1,
        }
    }
}

impl CfaConfig {
    pub fn d_model(&self) -> usize {
        self.d_visual
    }

    pub fn head_dim(&self) -> usize {
        self.d_model().checked_div(self.heads).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim() == 0 || !self.d_model().is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads cannot split a model width of {} into non-empty equal heads",
                self.heads,
                self.d_model()
            )));
        }
        if self.d_audio == 0 || self.bottleneck == 0 {
            return Err(Error::Config(
                "audio width and bottleneck must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Whether the modulated audio path contributes to the fused features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AudioGate {
    #[default]
    Learned,
    /// Gate forced to zero: fused features depend on the visual stream only.
    Closed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfaParams {
    pub config: CfaConfig,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    /// `[heads * prefix_dim, head_dim]`, one block of rows per head.
    pub prefix_k: Option<ParamId>,
    pub prefix_v: Option<ParamId>,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub w_mod: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

/// Intermediate values of one prefix attention pass.
pub struct AttentionTrace {
    /// Per-head `[T, head_dim]` outputs before the output projection.
    pub heads: Vec<Var>,
    /// Per-head `[T, T + prefix_dim]` attention weights.
    pub weights: Vec<Var>,
    pub output: Var,
}

impl CfaParams {
    pub fn init(store: &mut ParamStore, config: CfaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (dm, da) = (config.d_model(), config.d_audio);
        let (w_q, b_q) = add_linear(store, rng, "cfa.query", config.d_visual, dm);
        let (w_k, b_k) = add_linear(store, rng, "cfa.key", da, dm);
        let (w_v, b_v) = add_linear(store, rng, "cfa.value", da, dm);
        let (w_o, b_o) = add_linear(store, rng, "cfa.out", dm, dm);
        let prefix_shape = [config.heads * config.prefix_dim, config.head_dim()];
        let (prefix_k, prefix_v) = if config.prefix_dim > 0 {
            (
                Some(store.add("cfa.prefix_k", Tensor::zeros(&prefix_shape))),
                Some(store.add("cfa.prefix_v", Tensor::zeros(&prefix_shape))),
            )
        } else {
            (None, None)
        };
        let (down_w, down_b) = add_linear(store, rng, "cfa.adapter.down", dm, config.bottleneck);
        let (up_w, up_b) = add_linear(store, rng, "cfa.adapter.up", config.bottleneck, dm);
        let w_mod = store.add("cfa.modulation.weight", fan_in_uniform(rng, &[dm, da], da));
        let (fc_w, fc_b) = add_linear(store, rng, "cfa.fc", dm, dm);
        Ok(CfaParams {
            config,
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            prefix_k,
            prefix_v,
            down_w,
            down_b,
            up_w,
            up_b,
            w_mod,
            fc_w,
            fc_b,
        })
    }

    fn check_inputs(&self, tape: &Tape, fv: Var, fa: Var) -> Result<usize> {
        let (sv, sa) = (tape.shape(fv), tape.shape(fa));
        if sv.len() != 2 || sa.len() != 2 || sv[0] != sa[0] {
            return Err(Error::dim(
                "prefix_attention",
                format!("visual {sv:?} and audio {sa:?} must be T x D with equal T"),
            ));
        }
        if sv[1] != self.config.d_visual || sa[1] != self.config.d_audio {
            return Err(Error::dim(
                "prefix_attention",
                format!(
                    "expected widths {} and {}, got {} and {}",
                    self.config.d_visual, self.config.d_audio, sv[1], sa[1]
                ),
            ));
        }
        Ok(sv[0])
    }

    pub fn prefix_attention_trace(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        fv: Var,
        fa: Var,
    ) -> Result<AttentionTrace> {
        self.check_inputs(tape, fv, fa)?;
        let d = self.config.head_dim();
        let p = self.config.prefix_dim;
        let q = tape.linear(fv, b[self.w_q], Some(b[self.b_q]))?;
        let k = tape.linear(fa, b[self.w_k], Some(b[self.b_k]))?;
        let v = tape.linear(fa, b[self.w_v], Some(b[self.b_v]))?;
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.cols(q, h * d, (h + 1) * d)?;
            let mut kh = tape.cols(k, h * d, (h + 1) * d)?;
            let mut vh = tape.cols(v, h * d, (h + 1) * d)?;
            if let (Some(pk), Some(pv)) = (self.prefix_k, self.prefix_v) {
                let pk_h = tape.slice(b[pk], 0, h * p, (h + 1) * p)?;
                let pv_h = tape.slice(b[pv], 0, h * p, (h + 1) * p)?;
                kh = tape.concat(&[kh, pk_h], 0)?;
                vh = tape.concat(&[vh, pv_h], 0)?;
            }
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let logits = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
            let w = tape.softmax(logits)?;
            heads.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = tape.concat(&heads, 1)?;
        let output = tape.linear(joined, b[self.w_o], Some(b[self.b_o]))?;
        Ok(AttentionTrace {
            heads,
            weights,
            output,
        })
    }

    /// `T x D_model` attended audio features for each visual query.
    pub fn prefix_attention(&self, tape: &mut Tape, b: &Bindings, fv: Var, fa: Var) -> Result<Var> {
        Ok(self.prefix_attention_trace(tape, b, fv, fa)?.output)
    }

    pub fn bottleneck_adapter(&self, tape: &mut Tape, b: &Bindings, att: Var) -> Result<Var> {
        let down = tape.linear(att, b[self.down_w], Some(b[self.down_b]))?;
        let act = tape.gelu(down)?;
        let act = tape.dropout(act, self.config.dropout)?;
        tape.linear(act, b[self.up_w], Some(b[self.up_b]))
    }

    pub fn modulation(&self, tape: &mut Tape, b: &Bindings, fa: Var) -> Result<Var> {
        let logits = tape.linear(fa, b[self.w_mod], None)?;
        tape.sigmoid(logits)
    }

    pub fn fuse(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        fv: Var,
        att_hat: Var,
        gate: Var,
    ) -> Result<Var> {
        let gated = tape.mul(att_hat, gate)?;
        let joined = tape.add(fv, gated)?;
        tape.linear(joined, b[self.fc_w], Some(b[self.fc_b]))
    }

    /// Full adapter: `T x D_V` visual and `T x D_A` audio to `T x D_model`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        fv: Var,
        fa: Var,
        audio_gate: AudioGate,
    ) -> Result<Var> {
        let att = self.prefix_attention(tape, b, fv, fa)?;
        let att_hat = self.bottleneck_adapter(tape, b, att)?;
        let gate = match audio_gate {
            AudioGate::Learned => self.modulation(tape, b, fa)?,
            AudioGate::Closed => {
                let shape = tape.shape(att_hat).to_vec();
                tape.constant(Tensor::zeros(&shape))
            }
        };
        self.fuse(tape, b, fv, att_hat, gate)
    }
}
