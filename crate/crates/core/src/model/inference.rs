//! Tape-free forward pass with a key/value cache for autoregressive sampling.

use std::collections::HashMap;

use super::network::{
    AttentionIdx, ForecastModel, LayerIdx, LinearIdx, NormIdx, SiteUpdate, WeightAdapter, LN_EPS,
};
use super::registry::{AttentionBlock, Proj, ProjSite, Stack};
use crate::error::{Error, Result};
use crate::numerics::linalg::{gemm, MatRef};
use crate::numerics::Rng;

/// Sampled trajectories for one context and their per-step median.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastResult {
    /// `n_samples` rows of `horizon_len` values, in the context's units.
    pub samples: Vec<Vec<f64>>,
    /// Lower median of each column of `samples`.
    pub point: Vec<f64>,
}

impl ForecastResult {
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Self {
        let steps = samples.first().map_or(0, Vec::len);
        let point = (0..steps)
            .map(|t| {
                let mut col: Vec<f64> = samples.iter().map(|s| s[t]).collect();
                lower_median(&mut col)
            })
            .collect();
        ForecastResult { samples, point }
    }
}

/// Lower-middle order statistic (the middle element for odd lengths).
pub fn lower_median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Encoder output for one context, ready for repeated decoding.
#[derive(Clone, Debug)]
pub struct EncodedContext {
    pub scale: f64,
    /// Cross-attention keys and values per decoder layer, `[context_len × d]` each.
    cross_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

/// A model plus the adapter updates resolved for repeated inference.
pub struct InferenceEngine<'m> {
    model: &'m ForecastModel,
    low_rank: HashMap<ProjSite, SiteUpdate>,
    dense: HashMap<ProjSite, Vec<f64>>,
}

fn linear_out(x: &[f64], rows: usize, w: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * d_out];
    gemm(
        1.0,
        MatRef::new(x, rows, d_in),
        MatRef::new(w, d_out, d_in).t(),
        0.0,
        &mut out,
    );
    out
}

impl<'m> InferenceEngine<'m> {
    pub fn new(model: &'m ForecastModel, adapter: Option<&dyn WeightAdapter>) -> Result<Self> {
        let mut low_rank = HashMap::new();
        let mut dense = HashMap::new();
        if let Some(a) = adapter {
            for (site, update) in a.site_updates()? {
                match update {
                    SiteUpdate::Dense { delta } => {
                        let w = model.params.get(model.projection_weight(site)?).data();
                        if w.len() != delta.len() {
                            return Err(Error::Dimension {
                                op: "dense update",
                                lhs: vec![w.len()],
                                rhs: vec![delta.len()],
                            });
                        }
                        dense.insert(site, w.iter().zip(&delta).map(|(a, b)| a + b).collect());
                    }
                    lr @ SiteUpdate::LowRank { .. } => {
                        low_rank.insert(site, lr);
                    }
                }
            }
        }
        Ok(InferenceEngine {
            model,
            low_rank,
            dense,
        })
    }

    pub fn model(&self) -> &ForecastModel {
        self.model
    }

    fn linear(&self, x: &[f64], rows: usize, lin: LinearIdx, site: Option<ProjSite>) -> Vec<f64> {
        let params = &self.model.params;
        let wt = params.get(lin.weight);
        let (d_out, d_in) = (wt.shape()[0], wt.shape()[1]);
        let w = site
            .and_then(|s| self.dense.get(&s))
            .map_or(wt.data(), Vec::as_slice);
        let mut out = linear_out(x, rows, w, d_out, d_in);
        if let Some(SiteUpdate::LowRank {
            a,
            b,
            rank,
            mid,
            out: out_scale,
        }) = site.and_then(|s| self.low_rank.get(&s))
        {
            let mut h = linear_out(x, rows, a, *rank, d_in);
            if let Some(mid) = mid {
                for row in h.chunks_mut(*rank) {
                    row.iter_mut().zip(mid).for_each(|(v, s)| *v *= s);
                }
            }
            let mut t = linear_out(&h, rows, b, d_out, *rank);
            if let Some(os) = out_scale {
                for row in t.chunks_mut(d_out) {
                    row.iter_mut().zip(os).for_each(|(v, s)| *v *= s);
                }
            }
            out.iter_mut().zip(&t).for_each(|(o, v)| *o += v);
        }
        if let Some(bi) = lin.bias {
            let bias = params.get(bi).data();
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        out
    }

    fn norm(&self, x: &[f64], n: NormIdx) -> Vec<f64> {
        let g = self.model.params.get(n.scale).data();
        let b = self.model.params.get(n.bias).data();
        let cols = g.len();
        let nf = cols as f64;
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(cols) {
            let mu = row.iter().sum::<f64>() / nf;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
            let is = 1.0 / (var + LN_EPS).sqrt();
            out.extend(row.iter().enumerate().map(|(j, v)| (v - mu) * is * g[j] + b[j]));
        }
        out
    }

    /// Attention of `q[rows×d]` over `kv_len` cached rows; row `r` of the
    /// query reads keys/values starting at `kv_offset(r)`.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        q: &[f64],
        rows: usize,
        keys: &[f64],
        values: &[f64],
        kv_len: usize,
        kv_offset: impl Fn(usize) -> usize,
    ) -> Vec<f64> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; kv_len];
        for r in 0..rows {
            let base = kv_offset(r);
            for h in 0..cfg.n_heads {
                let off = h * dh;
                let qi = &q[r * d + off..][..dh];
                let mut mx = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[(base + j) * d + off..][..dh];
                    *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    mx = mx.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let orow = &mut out[r * d + off..][..dh];
                for (j, s) in scores.iter().enumerate() {
                    let p = s / z;
                    let vj = &values[(base + j) * d + off..][..dh];
                    orow.iter_mut().zip(vj).for_each(|(o, v)| *o += p * v);
                }
            }
        }
        out
    }

    fn feed_forward(&self, x: &mut [f64], rows: usize, l: &LayerIdx) {
        let h = self.norm(x, l.ff_norm);
        let mut h = self.linear(&h, rows, l.ff_in, None);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let h = self.linear(&h, rows, l.ff_out, None);
        x.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
    }

    fn embed(&self, ids: &[usize], pos_table: usize, positions: impl Iterator<Item = usize>) -> Vec<f64> {
        let d = self.model.config().d_model;
        let emb = self.model.params.get(self.model.layout.embedding).data();
        let pos = self.model.params.get(pos_table).data();
        let mut x = Vec::with_capacity(ids.len() * d);
        for (&id, p) in ids.iter().zip(positions) {
            x.extend(
                emb[id * d..(id + 1) * d]
                    .iter()
                    .zip(&pos[p * d..(p + 1) * d])
                    .map(|(a, b)| a + b),
            );
        }
        x
    }

    /// Tokenizes and encodes a raw context series.
    pub fn encode(&self, context: &[f64]) -> Result<EncodedContext> {
        let cfg = self.model.config();
        if context.len() != cfg.context_len {
            return Err(Error::Dimension {
                op: "encode",
                lhs: vec![context.len()],
                rhs: vec![cfg.context_len],
            });
        }
        let tok = cfg.tokenizer.tokenize(context)?;
        self.encode_tokens(&tok.ids, tok.scale)
    }

    pub fn encode_tokens(&self, ids: &[usize], scale: f64) -> Result<EncodedContext> {
        let cfg = self.model.config();
        self.model.check_ids(ids)?;
        let n = cfg.context_len;
        if ids.len() != n {
            return Err(Error::Dimension {
                op: "encode",
                lhs: vec![ids.len()],
                rhs: vec![n],
            });
        }
        let lay = &self.model.layout;
        let mut x = self.embed(ids, lay.enc_pos, 0..n);
        for (l, layer) in lay.encoder.iter().enumerate() {
            let h = self.norm(&x, layer.self_norm);
            let site = |proj| {
                Some(ProjSite {
                    stack: Stack::Encoder,
                    layer: l,
                    block: AttentionBlock::SelfAttention,
                    proj,
                })
            };
            let at = &layer.self_attn;
            let q = self.linear(&h, n, at.q, site(Proj::Q));
            let k = self.linear(&h, n, at.k, site(Proj::K));
            let v = self.linear(&h, n, at.v, site(Proj::V));
            let a = self.attend(&q, n, &k, &v, n, |_| 0);
            let o = self.linear(&a, n, at.o, site(Proj::O));
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            self.feed_forward(&mut x, n, layer);
        }
        let memory = self.norm(&x, lay.enc_final);
        let cross_kv = lay
            .decoder
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let (_, at): &(NormIdx, AttentionIdx) = layer.cross.as_ref().expect("decoder cross-attention");
                let site = |proj| {
                    Some(ProjSite {
                        stack: Stack::Decoder,
                        layer: l,
                        block: AttentionBlock::CrossAttention,
                        proj,
                    })
                };
                (
                    self.linear(&memory, n, at.k, site(Proj::K)),
                    self.linear(&memory, n, at.v, site(Proj::V)),
                )
            })
            .collect();
        Ok(EncodedContext { scale, cross_kv })
    }

    /// Runs `inputs.len()` decoder sequences in lock-step. `next` receives
    /// the step index and the logits `[rows × vocab]` and returns the next
    /// input token of every row.
    fn decode(
        &self,
        enc: &EncodedContext,
        rows: usize,
        steps: usize,
        mut next: impl FnMut(usize, &[f64]) -> Result<Vec<usize>>,
    ) -> Result<()> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        let vocab = cfg.vocab_size();
        let lay = &self.model.layout;
        let horizon = cfg.horizon_len;
        let ctx_len = cfg.context_len;
        let mut k_cache = vec![vec![0.0; rows * horizon * d]; lay.decoder.len()];
        let mut v_cache = vec![vec![0.0; rows * horizon * d]; lay.decoder.len()];
        let mut tokens = vec![cfg.tokenizer.pad_id(); rows];
        let emb = self.model.params.get(lay.embedding).data();
        let head_bias = self.model.params.get(lay.head_bias).data();
        for t in 0..steps {
            let mut x = self.embed(&tokens, lay.dec_pos, std::iter::repeat(t));
            for (l, layer) in lay.decoder.iter().enumerate() {
                let site = |block, proj| {
                    Some(ProjSite {
                        stack: Stack::Decoder,
                        layer: l,
                        block,
                        proj,
                    })
                };
                let sa = AttentionBlock::SelfAttention;
                let h = self.norm(&x, layer.self_norm);
                let at = &layer.self_attn;
                let q = self.linear(&h, rows, at.q, site(sa, Proj::Q));
                let k = self.linear(&h, rows, at.k, site(sa, Proj::K));
                let v = self.linear(&h, rows, at.v, site(sa, Proj::V));
                for r in 0..rows {
                    let dst = (r * horizon + t) * d;
                    k_cache[l][dst..dst + d].copy_from_slice(&k[r * d..(r + 1) * d]);
                    v_cache[l][dst..dst + d].copy_from_slice(&v[r * d..(r + 1) * d]);
                }
                let a = self.attend(&q, rows, &k_cache[l], &v_cache[l], t + 1, |r| r * horizon);
                let o = self.linear(&a, rows, at.o, site(sa, Proj::O));
                x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

                let ca = AttentionBlock::CrossAttention;
                let (cn, cat) = layer.cross.as_ref().expect("decoder cross-attention");
                let h = self.norm(&x, *cn);
                let q = self.linear(&h, rows, cat.q, site(ca, Proj::Q));
                let (mk, mv) = &enc.cross_kv[l];
                let a = self.attend(&q, rows, mk, mv, ctx_len, |_| 0);
                let o = self.linear(&a, rows, cat.o, site(ca, Proj::O));
                x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
                self.feed_forward(&mut x, rows, layer);
            }
            let h = self.norm(&x, lay.dec_final);
            let mut logits = linear_out(&h, rows, emb, vocab, d);
            for row in logits.chunks_mut(vocab) {
                row.iter_mut().zip(head_bias).for_each(|(o, b)| *o += b);
            }
            tokens = next(t, &logits)?;
        }
        Ok(())
    }

    /// Teacher-forced decoder logits `[dec_len × vocab]`, matching
    /// [`ForecastModel::forward`] for the same inputs.
    pub fn decoder_logits(&self, enc: &EncodedContext, decoder: &[usize]) -> Result<Vec<f64>> {
        self.model.check_ids(decoder)?;
        let steps = decoder.len();
        if steps == 0 || steps > self.model.config().horizon_len || decoder[0] != self.model.config().tokenizer.pad_id() {
            return Err(Error::Contract(
                "decoder inputs must start with the start token and fit the horizon".into(),
            ));
        }
        let mut all = Vec::new();
        self.decode(enc, 1, steps, |t, logits| {
            all.extend_from_slice(logits);
            Ok(vec![*decoder.get(t + 1).unwrap_or(&decoder[0])])
        })?;
        Ok(all)
    }

    /// Draws `n_samples` token trajectories of `horizon_len` steps. Sample
    /// `s` uses child stream `s` of a generator seeded from `rng`, so rows
    /// are independent of each other and of `n_samples`.
    pub fn sample_tokens(&self, enc: &EncodedContext, n_samples: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        let mut streams = sample_streams(rng, n_samples);
        self.sample_with_streams(enc, &mut streams)
    }

    /// One trajectory per stream, decoded in lock-step.
    pub fn sample_with_streams(&self, enc: &EncodedContext, streams: &mut [Rng]) -> Result<Vec<Vec<usize>>> {
        let n_samples = streams.len();
        if n_samples == 0 {
            return Err(Error::Contract("n_samples must be at least 1".into()));
        }
        let cfg = self.model.config();
        let vocab = cfg.vocab_size();
        let n_bins = cfg.tokenizer.n_bins;
        let mut paths = vec![Vec::with_capacity(cfg.horizon_len); n_samples];
        let mut weights = vec![0.0; n_bins];
        self.decode(enc, n_samples, cfg.horizon_len, |_, logits| {
            let mut next = Vec::with_capacity(n_samples);
            for (s, row) in logits.chunks(vocab).enumerate() {
                // special tokens are never sampled
                let bins = &row[..n_bins];
                let mx = bins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !mx.is_finite() {
                    return Err(Error::NonFinite("decoder logits".into()));
                }
                weights.iter_mut().zip(bins).for_each(|(w, &l)| *w = (l - mx).exp());
                let id = streams[s].categorical(&weights);
                paths[s].push(id);
                next.push(id);
            }
            Ok(next)
        })?;
        Ok(paths)
    }

    /// Samples and detokenizes; the point forecast is the per-step median.
    pub fn sample_encoded(&self, enc: &EncodedContext, n_samples: usize, rng: &mut Rng) -> Result<ForecastResult> {
        let tok = &self.model.config().tokenizer;
        let samples = self
            .sample_tokens(enc, n_samples, rng)?
            .into_iter()
            .map(|ids| tok.detokenize(&ids, enc.scale))
            .collect();
        Ok(ForecastResult::from_samples(samples))
    }
}

/// The per-sample generators [`InferenceEngine::sample_tokens`] draws from.
pub fn sample_streams(rng: &mut Rng, n_samples: usize) -> Vec<Rng> {
    let root = Rng::new(rng.next_u64());
    (0..n_samples as u64).map(|s| root.child(s)).collect()
}

/// Probabilistic forecast of one context window.
pub fn sample_forecast(
    model: &ForecastModel,
    adapter: Option<&dyn WeightAdapter>,
    context: &[f64],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<ForecastResult> {
    let engine = InferenceEngine::new(model, adapter)?;
    let enc = engine.encode(context)?;
    engine.sample_encoded(&enc, n_samples, rng)
}
