//! The encoder-decoder forecaster and its differentiable forward pass.

use std::collections::HashMap;

use super::config::ModelConfig;
use super::registry::{AttentionBlock, NormSlot, ParamRole, Proj, ProjSite, Stack};
use crate::error::{Error, Result};
use crate::numerics::{AttentionShape, ParamStore, Rng, Tape, Tensor, Var};

/// Store group of base-model parameters.
pub const BASE_GROUP: u32 = 0;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Replacement for an attention projection's weight path.
///
/// Implemented by attached adapters. `project` must return `x·W'ᵀ` (bias
/// excluded) for every site where `adapts` is true.
pub trait WeightAdapter {
    fn adapts(&self, site: ProjSite) -> bool;

    fn project(&self, tape: &mut Tape<f64>, site: ProjSite, x: Var, weight: Var) -> Result<Var>;

    /// Concrete per-site updates for the tape-free sampling path.
    fn site_updates(&self) -> Result<SiteUpdates>;
}

/// Weight update of one projection in a form the inference path can apply.
#[derive(Clone, Debug)]
pub enum SiteUpdate {
    /// `y += (((x·Aᵀ) ⊙ mid)·Bᵀ) ⊙ out` with `A[rank×d_in]`, `B[d_out×rank]`.
    LowRank {
        a: Vec<f64>,
        b: Vec<f64>,
        rank: usize,
        mid: Option<Vec<f64>>,
        out: Option<Vec<f64>>,
    },
    /// `W' = W + delta`.
    Dense { delta: Vec<f64> },
}

pub type SiteUpdates = HashMap<ProjSite, SiteUpdate>;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIdx {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIdx {
    pub scale: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

impl AttentionIdx {
    pub fn get(&self, p: Proj) -> LinearIdx {
        match p {
            Proj::Q => self.q,
            Proj::K => self.k,
            Proj::V => self.v,
            Proj::O => self.o,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIdx {
    pub self_norm: NormIdx,
    pub self_attn: AttentionIdx,
    pub cross: Option<(NormIdx, AttentionIdx)>,
    pub ff_norm: NormIdx,
    pub ff_in: LinearIdx,
    pub ff_out: LinearIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embedding: usize,
    pub enc_pos: usize,
    pub dec_pos: usize,
    pub encoder: Vec<LayerIdx>,
    pub enc_final: NormIdx,
    pub decoder: Vec<LayerIdx>,
    pub dec_final: NormIdx,
    pub head_bias: usize,
}

/// Initial values for one registry entry.
#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Const(f64),
}

struct Builder<'r> {
    store: ParamStore<f64>,
    roles: Vec<ParamRole>,
    rng: Option<&'r mut Rng>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], role: ParamRole, init: Init) -> Result<usize> {
        let t = match (init, self.rng.as_deref_mut()) {
            (Init::Normal(std), Some(rng)) => Tensor::from_fn(shape, |_| std * rng.normal()),
            (Init::Const(c), _) => Tensor::filled(shape, c),
            (Init::Normal(_), None) => Tensor::zeros(shape),
        };
        self.roles.push(role);
        self.store.insert(name, t.with_grad(true))
    }

    fn linear(
        &mut self,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        weight_role: ParamRole,
        bias_role: ParamRole,
    ) -> Result<LinearIdx> {
        let weight = self.add(
            format!("{prefix}.weight"),
            &[d_out, d_in],
            weight_role,
            Init::Normal(1.0 / (d_in as f64).sqrt()),
        )?;
        let bias = if with_bias {
            Some(self.add(format!("{prefix}.bias"), &[d_out], bias_role, Init::Const(0.0))?)
        } else {
            None
        };
        Ok(LinearIdx { weight, bias })
    }

    fn norm(&mut self, prefix: &str, d: usize, stack: Stack, slot: NormSlot) -> Result<NormIdx> {
        let scale = self.add(
            format!("{prefix}.scale"),
            &[d],
            ParamRole::NormScale { stack, slot },
            Init::Const(1.0),
        )?;
        let bias = self.add(
            format!("{prefix}.bias"),
            &[d],
            ParamRole::NormBias { stack, slot },
            Init::Const(0.0),
        )?;
        Ok(NormIdx { scale, bias })
    }

    fn attention(
        &mut self,
        cfg: &ModelConfig,
        stack: Stack,
        layer: usize,
        block: AttentionBlock,
    ) -> Result<AttentionIdx> {
        let mut idx = Vec::with_capacity(4);
        for proj in Proj::ALL {
            let site = ProjSite {
                stack,
                layer,
                block,
                proj,
            };
            idx.push(self.linear(
                &site.prefix(),
                cfg.d_model,
                cfg.d_model,
                cfg.include_linear_bias,
                ParamRole::ProjectionWeight(site),
                ParamRole::ProjectionBias(site),
            )?);
        }
        Ok(AttentionIdx {
            q: idx[0],
            k: idx[1],
            v: idx[2],
            o: idx[3],
        })
    }

    fn layer(&mut self, cfg: &ModelConfig, stack: Stack, layer: usize) -> Result<LayerIdx> {
        let base = match stack {
            Stack::Encoder => format!("encoder.layer{layer}"),
            Stack::Decoder => format!("decoder.layer{layer}"),
        };
        let d = cfg.d_model;
        let self_norm = self.norm(&format!("{base}.self_attn_norm"), d, stack, NormSlot::SelfAttention)?;
        let self_attn = self.attention(cfg, stack, layer, AttentionBlock::SelfAttention)?;
        let cross = if stack == Stack::Decoder {
            let n = self.norm(&format!("{base}.cross_attn_norm"), d, stack, NormSlot::CrossAttention)?;
            let a = self.attention(cfg, stack, layer, AttentionBlock::CrossAttention)?;
            Some((n, a))
        } else {
            None
        };
        let ff_norm = self.norm(&format!("{base}.ff_norm"), d, stack, NormSlot::FeedForward)?;
        let ff_in = self.linear(
            &format!("{base}.ff.wi"),
            d,
            cfg.d_ff,
            cfg.include_linear_bias,
            ParamRole::FeedForwardWeight { stack, layer },
            ParamRole::FeedForwardBias { stack, layer },
        )?;
        let ff_out = self.linear(
            &format!("{base}.ff.wo"),
            cfg.d_ff,
            d,
            cfg.include_linear_bias,
            ParamRole::FeedForwardWeight { stack, layer },
            ParamRole::FeedForwardBias { stack, layer },
        )?;
        Ok(LayerIdx {
            self_norm,
            self_attn,
            cross,
            ff_norm,
            ff_in,
            ff_out,
        })
    }
}

/// Chronos-style encoder-decoder over binned tokens.
///
/// The token embedding doubles as the output projection (tied head) and a
/// separate bias vector sits on the logits.
#[derive(Clone, Debug)]
pub struct ForecastModel {
    config: ModelConfig,
    pub(crate) params: ParamStore<f64>,
    roles: Vec<ParamRole>,
    pub(crate) layout: Layout,
}

impl ForecastModel {
    /// Builds a model with random weights drawn from `rng`.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// Builds a model whose weight matrices are all zero (norm scales are one).
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<&mut Rng>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(BASE_GROUP),
            roles: Vec::new(),
            rng,
        };
        let d = config.d_model;
        let v = config.vocab_size();
        let embedding = b.add("embedding.token".into(), &[v, d], ParamRole::TokenEmbedding, Init::Normal(0.02))?;
        let enc_pos = b.add(
            "encoder.position".into(),
            &[config.context_len, d],
            ParamRole::Position(Stack::Encoder),
            Init::Normal(0.02),
        )?;
        let dec_pos = b.add(
            "decoder.position".into(),
            &[config.horizon_len, d],
            ParamRole::Position(Stack::Decoder),
            Init::Normal(0.02),
        )?;
        let encoder = (0..config.n_encoder_layers)
            .map(|l| b.layer(&config, Stack::Encoder, l))
            .collect::<Result<Vec<_>>>()?;
        let enc_final = b.norm("encoder.final_norm", d, Stack::Encoder, NormSlot::Final)?;
        let decoder = (0..config.n_decoder_layers)
            .map(|l| b.layer(&config, Stack::Decoder, l))
            .collect::<Result<Vec<_>>>()?;
        let dec_final = b.norm("decoder.final_norm", d, Stack::Decoder, NormSlot::Final)?;
        let head_bias = b.add("head.bias".into(), &[v], ParamRole::HeadBias, Init::Const(0.0))?;
        Ok(ForecastModel {
            config,
            params: b.store,
            roles: b.roles,
            layout: Layout {
                embedding,
                enc_pos,
                dec_pos,
                encoder,
                enc_final,
                decoder,
                dec_final,
                head_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    pub fn role(&self, index: usize) -> ParamRole {
        self.roles[index]
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_len()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_len()
    }

    /// Every attention projection site, in registry order.
    pub fn projection_sites(&self) -> Vec<ProjSite> {
        self.roles
            .iter()
            .filter_map(|r| match r {
                ParamRole::ProjectionWeight(site) => Some(*site),
                _ => None,
            })
            .collect()
    }

    /// Registry index of the weight matrix at `site`.
    pub fn projection_weight(&self, site: ProjSite) -> Result<usize> {
        let layers = match site.stack {
            Stack::Encoder => &self.layout.encoder,
            Stack::Decoder => &self.layout.decoder,
        };
        let layer = layers.get(site.layer).ok_or_else(|| {
            Error::Contract(format!("projection {site} does not exist in this model"))
        })?;
        let attn = match site.block {
            AttentionBlock::SelfAttention => &layer.self_attn,
            AttentionBlock::CrossAttention => match &layer.cross {
                Some((_, a)) => a,
                None => {
                    return Err(Error::Contract(format!(
                        "projection {site} does not exist in this model"
                    )))
                }
            },
        };
        Ok(attn.get(site.proj).weight)
    }

    pub(crate) fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let v = self.config.vocab_size();
        match ids.iter().find(|&&i| i >= v) {
            Some(&bad) => Err(Error::Index {
                what: "token id",
                index: bad,
                limit: v,
            }),
            None => Ok(()),
        }
    }

    fn linear(
        &self,
        tape: &mut Tape<f64>,
        x: Var,
        lin: LinearIdx,
        site: Option<ProjSite>,
        adapter: Option<&dyn WeightAdapter>,
    ) -> Result<Var> {
        let w = tape.param(&self.params, lin.weight);
        let mut y = match (site, adapter) {
            (Some(s), Some(a)) if a.adapts(s) => a.project(tape, s, x, w)?,
            _ => tape.matmul_nt(x, w)?,
        };
        if let Some(b) = lin.bias {
            let bv = tape.param(&self.params, b);
            y = tape.add_bias(y, bv)?;
        }
        Ok(y)
    }

    fn norm(&self, tape: &mut Tape<f64>, x: Var, n: NormIdx) -> Result<Var> {
        let g = tape.param(&self.params, n.scale);
        let b = tape.param(&self.params, n.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        tape: &mut Tape<f64>,
        x: Var,
        memory: Option<Var>,
        attn: &AttentionIdx,
        sites: (Stack, usize, AttentionBlock),
        shape: AttentionShape,
        adapter: Option<&dyn WeightAdapter>,
    ) -> Result<Var> {
        let (stack, layer, block) = sites;
        let site = |proj| {
            Some(ProjSite {
                stack,
                layer,
                block,
                proj,
            })
        };
        let kv_src = memory.unwrap_or(x);
        let q = self.linear(tape, x, attn.q, site(Proj::Q), adapter)?;
        let k = self.linear(tape, kv_src, attn.k, site(Proj::K), adapter)?;
        let v = self.linear(tape, kv_src, attn.v, site(Proj::V), adapter)?;
        let a = tape.attention(q, k, v, shape)?;
        self.linear(tape, a, attn.o, site(Proj::O), adapter)
    }

    fn feed_forward(&self, tape: &mut Tape<f64>, x: Var, l: &LayerIdx) -> Result<Var> {
        let h = self.norm(tape, x, l.ff_norm)?;
        let h = self.linear(tape, h, l.ff_in, None, None)?;
        let h = tape.relu(h);
        let h = self.linear(tape, h, l.ff_out, None, None)?;
        tape.add(x, h)
    }

    /// Records the encoder pass and returns the final-normed memory
    /// `[batch·context_len × d_model]`. Ids must already be validated.
    fn encode_tape(
        &self,
        tape: &mut Tape<f64>,
        context: &[usize],
        batch: usize,
        adapter: Option<&dyn WeightAdapter>,
    ) -> Result<Var> {
        let ctx_len = self.config.context_len;
        let lay = &self.layout;

        let emb = tape.param(&self.params, lay.embedding);
        let x = tape.gather_rows(emb, context)?;
        let enc_pos = tape.param(&self.params, lay.enc_pos);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..ctx_len).collect();
        let p = tape.gather_rows(enc_pos, &positions)?;
        let mut x = tape.add(x, p)?;
        let enc_shape = AttentionShape {
            batch,
            heads: self.config.n_heads,
            q_len: ctx_len,
            kv_len: ctx_len,
            causal: false,
        };
        for (l, layer) in lay.encoder.iter().enumerate() {
            let h = self.norm(tape, x, layer.self_norm)?;
            let a = self.attention_block(
                tape,
                h,
                None,
                &layer.self_attn,
                (Stack::Encoder, l, AttentionBlock::SelfAttention),
                enc_shape,
                adapter,
            )?;
            x = tape.add(x, a)?;
            x = self.feed_forward(tape, x, layer)?;
        }
        self.norm(tape, x, lay.enc_final)
    }

    /// Records a batched forward pass and returns logits of shape
    /// `[batch·dec_len × vocab]`.
    ///
    /// `context` holds `batch` contiguous runs of `context_len` ids and
    /// `decoder` holds `batch` runs of `dec_len ≤ horizon_len` ids.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<f64>,
        context: &[usize],
        decoder: &[usize],
        batch: usize,
        adapter: Option<&dyn WeightAdapter>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch == 0 || context.len() != batch * cfg.context_len || !decoder.len().is_multiple_of(batch) {
            return Err(Error::Dimension {
                op: "forward",
                lhs: vec![context.len(), decoder.len()],
                rhs: vec![batch, cfg.context_len],
            });
        }
        let dec_len = decoder.len() / batch;
        if dec_len == 0 || dec_len > cfg.horizon_len {
            return Err(Error::Dimension {
                op: "forward",
                lhs: vec![dec_len],
                rhs: vec![cfg.horizon_len],
            });
        }
        self.check_ids(context)?;
        self.check_ids(decoder)?;
        let ctx_len = cfg.context_len;
        let lay = &self.layout;
        let memory = self.encode_tape(tape, context, batch, adapter)?;
        let emb = tape.param(&self.params, lay.embedding);

        let y = tape.gather_rows(emb, decoder)?;
        let dec_pos = tape.param(&self.params, lay.dec_pos);
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..dec_len).collect();
        let p = tape.gather_rows(dec_pos, &positions)?;
        let mut y = tape.add(y, p)?;
        let self_shape = AttentionShape {
            batch,
            heads: cfg.n_heads,
            q_len: dec_len,
            kv_len: dec_len,
            causal: true,
        };
        let cross_shape = AttentionShape {
            batch,
            heads: cfg.n_heads,
            q_len: dec_len,
            kv_len: ctx_len,
            causal: false,
        };
        for (l, layer) in lay.decoder.iter().enumerate() {
            let h = self.norm(tape, y, layer.self_norm)?;
            let a = self.attention_block(
                tape,
                h,
                None,
                &layer.self_attn,
                (Stack::Decoder, l, AttentionBlock::SelfAttention),
                self_shape,
                adapter,
            )?;
            y = tape.add(y, a)?;
            let (cross_norm, cross_attn) = layer.cross.as_ref().expect("decoder layers cross-attend");
            let h = self.norm(tape, y, *cross_norm)?;
            let a = self.attention_block(
                tape,
                h,
                Some(memory),
                cross_attn,
                (Stack::Decoder, l, AttentionBlock::CrossAttention),
                cross_shape,
                adapter,
            )?;
            y = tape.add(y, a)?;
            y = self.feed_forward(tape, y, layer)?;
        }
        let y = self.norm(tape, y, lay.dec_final)?;
        let head = tape.param(&self.params, lay.embedding);
        let logits = tape.matmul_nt(y, head)?;
        let hb = tape.param(&self.params, lay.head_bias);
        tape.add_bias(logits, hb)
    }

    /// Logits `[dec_len × vocab]` for a single (context, decoder) pair.
    pub fn forward(
        &self,
        context: &[usize],
        decoder: &[usize],
        adapter: Option<&dyn WeightAdapter>,
    ) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, context, decoder, 1, adapter)?;
        Ok(tape.tensor(out))
    }

    /// Encoder output `[context_len × d_model]` for one context.
    pub fn encoder_output(&self, context: &[usize], adapter: Option<&dyn WeightAdapter>) -> Result<Tensor<f64>> {
        if context.len() != self.config.context_len {
            return Err(Error::Dimension {
                op: "encoder",
                lhs: vec![context.len()],
                rhs: vec![self.config.context_len],
            });
        }
        self.check_ids(context)?;
        let mut tape = Tape::new();
        let out = self.encode_tape(&mut tape, context, 1, adapter)?;
        Ok(tape.tensor(out))
    }

    /// Teacher-forced token cross-entropy on a batch.
    pub fn loss_tape(
        &self,
        tape: &mut Tape<f64>,
        batch: &TokenBatch,
        adapter: Option<&dyn WeightAdapter>,
    ) -> Result<Var> {
        let logits = self.forward_tape(tape, &batch.context, &batch.decoder_input, batch.size, adapter)?;
        tape.softmax_cross_entropy(logits, &batch.targets)
    }
}

/// Tokenized training examples with shifted decoder inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub size: usize,
    pub context: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenBatch {
    /// Tokenizes each (context, horizon) pair with the context's scale. The
    /// decoder sees the start token followed by the horizon shifted right.
    pub fn from_pairs<'a>(
        config: &ModelConfig,
        pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>,
    ) -> Result<Self> {
        let tok = &config.tokenizer;
        let mut out = TokenBatch {
            size: 0,
            context: Vec::new(),
            decoder_input: Vec::new(),
            targets: Vec::new(),
        };
        for (ctx, horizon) in pairs {
            if ctx.len() != config.context_len || horizon.len() != config.horizon_len {
                return Err(Error::Dimension {
                    op: "token batch",
                    lhs: vec![ctx.len(), horizon.len()],
                    rhs: vec![config.context_len, config.horizon_len],
                });
            }
            let t = tok.tokenize(ctx)?;
            let target = tok.tokenize_with_scale(horizon, t.scale)?;
            out.context.extend(t.ids);
            out.decoder_input.push(tok.pad_id());
            out.decoder_input.extend_from_slice(&target[..target.len() - 1]);
            out.targets.extend(target);
            out.size += 1;
        }
        Ok(out)
    }
}
