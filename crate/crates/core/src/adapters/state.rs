use std::collections::HashMap;
use std::sync::Arc;

use super::config::{AdapterConfig, BitFitScope, LnScope, Method};
use super::spectral::{dft2, sparse_idft2_real};
use crate::error::{Error, Result};
use crate::model::{
    ForecastModel, ParamRole, ProjSite, SiteUpdate, SiteUpdates, Stack, WeightAdapter,
};
use crate::numerics::linalg::{matmul, MatRef};
use crate::numerics::{CustomOp, ParamStore, Rng, Tape, Tensor, Var};

/// Store group of adapter-owned parameters.
pub const ADAPTER_GROUP: u32 = 1;

/// Frozen random state shared by every adapted matrix.
#[derive(Clone, Debug)]
enum Shared {
    None,
    /// `A[r×d_in]`, `B[d_out×r]`.
    Vera { a: Tensor<f64>, b: Tensor<f64> },
    /// Spectral entry locations `(row, col)`.
    Fourier { entries: Arc<Vec<(usize, usize)>> },
}

/// Learnable tensors of one adapted projection (indices into the adapter store).
#[derive(Clone, Copy, Debug)]
struct SiteParams {
    /// LoRA A, VeRA λ_d, FourierFT c.
    first: usize,
    /// LoRA B, VeRA λ_b.
    second: Option<usize>,
    d_out: usize,
    d_in: usize,
}

/// Frozen state visible at one adapted site.
#[derive(Clone, Debug, PartialEq)]
pub enum FrozenView<'a> {
    None,
    Vera { a: &'a [f64], b: &'a [f64] },
    Fourier { entries: &'a [(usize, usize)] },
}

/// An adaptation method attached to a model.
#[derive(Clone, Debug)]
pub struct Adapter {
    config: AdapterConfig,
    params: ParamStore<f64>,
    sites: HashMap<ProjSite, SiteParams>,
    order: Vec<ProjSite>,
    shared: Shared,
    /// Base parameters unfrozen by selective methods and full fine-tuning.
    selected: Vec<usize>,
    merged: bool,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

/// Backward rule of `ΔW = α·Re(IDFT2(S(c)))` with respect to `c`.
struct FourierDelta {
    entries: Arc<Vec<(usize, usize)>>,
    rows: usize,
    cols: usize,
    alpha: f64,
}

impl CustomOp<f64> for FourierDelta {
    fn name(&self) -> &'static str {
        "fourier_delta"
    }

    fn backward(&self, _inputs: &[&[f64]], _output: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        // ∂ΔW[p,q]/∂c_j = α/N·cos θ, so the gradient is α/N·Re(DFT2(G))[E_j].
        let spec = dft2(grad_out, self.rows, self.cols);
        let k = self.alpha / (self.rows * self.cols) as f64;
        let g = self.entries.iter().map(|&(u, v)| k * spec[u * self.cols + v].re).collect();
        vec![Some(g)]
    }
}

impl Adapter {
    /// Freezes the model and attaches `cfg`. `rng` initializes per-site
    /// learnables; frozen shared state comes from `cfg.shared_seed` only.
    pub fn attach(model: &mut ForecastModel, cfg: AdapterConfig, rng: &mut Rng) -> Result<Adapter> {
        let d = model.config().d_model;
        cfg.validate(d, d)?;
        model.params_mut().set_all_requires_grad(false);

        let selected: Vec<usize> = model
            .roles()
            .iter()
            .enumerate()
            .filter(|(_, role)| selects(&cfg, role))
            .map(|(i, _)| i)
            .collect();
        for &i in &selected {
            model.params_mut().get_mut(i).set_requires_grad(true);
        }

        let mut adapter = Adapter {
            params: ParamStore::new(ADAPTER_GROUP),
            sites: HashMap::new(),
            order: Vec::new(),
            shared: Shared::None,
            selected,
            merged: false,
            config: cfg,
        };
        if !adapter.config.method.is_additive() {
            return Ok(adapter);
        }

        let targets = &adapter.config.targets;
        let sites: Vec<ProjSite> = model
            .projection_sites()
            .into_iter()
            .filter(|s| targets.contains(&s.proj))
            .collect();
        if let Some(missing) = targets.iter().find(|p| !sites.iter().any(|s| s.proj == **p)) {
            return Err(Error::Config(format!("target matrix {missing:?} absent from the model")));
        }
        let r = adapter.config.rank;
        let n = adapter.config.n_coefficients;
        let mut shared_rng = Rng::new(adapter.config.shared_seed);
        adapter.shared = match adapter.config.method {
            Method::VeRA => Shared::Vera {
                a: uniform(&[r, d], 1.0 / (d as f64).sqrt(), &mut shared_rng),
                b: uniform(&[d, r], 1.0 / (r as f64).sqrt(), &mut shared_rng),
            },
            Method::FourierFT => Shared::Fourier {
                entries: Arc::new(
                    shared_rng
                        .sample_indices(d * d, n)
                        .into_iter()
                        .map(|k| (k / d, k % d))
                        .collect(),
                ),
            },
            _ => Shared::None,
        };

        for site in sites {
            let w = model.params().get(model.projection_weight(site)?);
            let (d_out, d_in) = w.dims2()?;
            if (d_out, d_in) != (d, d) {
                return Err(Error::Contract(format!(
                    "{site} is {d_out}×{d_in}; shared adapter state assumes {d}×{d}"
                )));
            }
            let p = site.prefix();
            let store = &mut adapter.params;
            let (first, second) = match adapter.config.method {
                Method::LoRA => (
                    store.insert(format!("{p}.lora_a"), uniform(&[r, d_in], 1.0 / (d_in as f64).sqrt(), rng))?,
                    Some(store.insert(format!("{p}.lora_b"), Tensor::zeros(&[d_out, r]))?),
                ),
                Method::VeRA => (
                    store.insert(format!("{p}.vera_lambda_d"), Tensor::filled(&[r], 0.1))?,
                    Some(store.insert(format!("{p}.vera_lambda_b"), Tensor::zeros(&[d_out]))?),
                ),
                Method::FourierFT => (store.insert(format!("{p}.fourier_c"), Tensor::zeros(&[n]))?, None),
                _ => unreachable!("additive methods only"),
            };
            adapter.sites.insert(
                site,
                SiteParams {
                    first,
                    second,
                    d_out,
                    d_in,
                },
            );
            adapter.order.push(site);
        }
        adapter.params.set_all_requires_grad(true);
        Ok(adapter)
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Adapted projection sites in registry order.
    pub fn sites(&self) -> &[ProjSite] {
        &self.order
    }

    /// Base parameters made trainable by this method.
    pub fn selected_base_params(&self) -> &[usize] {
        &self.selected
    }

    /// Trainable parameter total across the base model and the adapter.
    pub fn trainable_count(&self, model: &ForecastModel) -> usize {
        model.trainable_count() + self.params.trainable_len()
    }

    /// Names of every trainable tensor, base registry names first.
    pub fn trainable_names(&self, model: &ForecastModel) -> Vec<String> {
        let base = model
            .params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.to_string());
        let own = self
            .params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.to_string());
        base.chain(own).collect()
    }

    pub fn frozen_view(&self, site: ProjSite) -> Option<FrozenView<'_>> {
        self.sites.get(&site)?;
        Some(match &self.shared {
            Shared::None => FrozenView::None,
            Shared::Vera { a, b } => FrozenView::Vera {
                a: a.data(),
                b: b.data(),
            },
            Shared::Fourier { entries } => FrozenView::Fourier { entries },
        })
    }

    fn site(&self, site: ProjSite) -> Result<SiteParams> {
        if !self.config.method.is_additive() {
            return Err(Error::Contract(format!(
                "{} has no weight delta; its updates live in the base parameters",
                self.config.method
            )));
        }
        self.sites
            .get(&site)
            .copied()
            .ok_or_else(|| Error::Contract(format!("{site} is not adapted")))
    }

    /// `ΔW[d_out×d_in]` of one adapted projection.
    pub fn delta(&self, site: ProjSite) -> Result<Tensor<f64>> {
        let sp = self.site(site)?;
        let r = self.config.rank;
        let first = self.params.get(sp.first).data();
        let second = sp.second.map(|i| self.params.get(i).data());
        let data = match (&self.shared, self.config.method) {
            (_, Method::LoRA) => matmul(MatRef::new(second.unwrap(), sp.d_out, r), MatRef::new(first, r, sp.d_in)),
            (Shared::Vera { a, b }, Method::VeRA) => {
                let lambda_b = second.unwrap();
                // diag(λ_b)·B·diag(λ_d), then ·A
                let mut left = b.data().to_vec();
                for (i, row) in left.chunks_mut(r).enumerate() {
                    row.iter_mut()
                        .zip(first)
                        .for_each(|(x, ld)| *x *= lambda_b[i] * ld);
                }
                matmul(MatRef::new(&left, sp.d_out, r), MatRef::new(a.data(), r, sp.d_in))
            }
            (Shared::Fourier { entries }, Method::FourierFT) => {
                let mut w = sparse_idft2_real(entries, first, sp.d_out, sp.d_in);
                w.iter_mut().for_each(|v| *v *= self.config.alpha);
                w
            }
            _ => unreachable!("shared state matches method"),
        };
        Tensor::new(&[sp.d_out, sp.d_in], data)
    }

    /// Folds every `ΔW` into the base weights and bypasses the adapter path.
    pub fn merge(&mut self, model: &mut ForecastModel) -> Result<()> {
        self.check_mergeable()?;
        if self.merged {
            return Err(Error::Contract("adapter is already merged".into()));
        }
        self.apply_deltas(model, 1.0)?;
        self.merged = true;
        Ok(())
    }

    /// Subtracts the deltas again and restores the adapter path.
    pub fn unmerge(&mut self, model: &mut ForecastModel) -> Result<()> {
        self.check_mergeable()?;
        if !self.merged {
            return Err(Error::Contract("adapter is not merged".into()));
        }
        self.apply_deltas(model, -1.0)?;
        self.merged = false;
        Ok(())
    }

    fn check_mergeable(&self) -> Result<()> {
        if self.config.method.is_additive() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "cannot merge {}: its updates already live in the base parameters",
                self.config.method
            )))
        }
    }

    fn apply_deltas(&self, model: &mut ForecastModel, sign: f64) -> Result<()> {
        for &site in &self.order {
            let delta = self.delta(site)?;
            let idx = model.projection_weight(site)?;
            let w = model.params_mut().get_mut(idx).data_mut();
            w.iter_mut().zip(delta.data()).for_each(|(w, d)| *w += sign * d);
        }
        Ok(())
    }
}

fn selects(cfg: &AdapterConfig, role: &ParamRole) -> bool {
    match cfg.method {
        Method::FullFT => true,
        Method::BitFit => match cfg.bitfit_scope {
            BitFitScope::AllBiases => role.is_bias(),
            BitFitScope::FinalNormOnly => role.is_final_norm_bias(Stack::Decoder),
        },
        Method::LnTuning => match cfg.ln_scope {
            LnScope::Attention => role.is_attention_norm(),
            LnScope::All => role.is_layer_norm(),
            LnScope::AllScaleOnly => matches!(role, ParamRole::NormScale { .. }),
        },
        _ => false,
    }
}

impl WeightAdapter for Adapter {
    fn adapts(&self, site: ProjSite) -> bool {
        !self.merged && self.sites.contains_key(&site)
    }

    fn project(&self, tape: &mut Tape<f64>, site: ProjSite, x: Var, weight: Var) -> Result<Var> {
        let sp = self.site(site)?;
        let first = tape.param(&self.params, sp.first);
        match &self.shared {
            Shared::None => {
                let b = tape.param(&self.params, sp.second.expect("LoRA B"));
                let base = tape.matmul_nt(x, weight)?;
                let h = tape.matmul_nt(x, first)?;
                let upd = tape.matmul_nt(h, b)?;
                tape.add(base, upd)
            }
            Shared::Vera { a, b } => {
                let lambda_b = tape.param(&self.params, sp.second.expect("VeRA λ_b"));
                let a = tape.leaf(a);
                let b = tape.leaf(b);
                let base = tape.matmul_nt(x, weight)?;
                let h = tape.matmul_nt(x, a)?;
                let h = tape.mul_cols(h, first)?;
                let t = tape.matmul_nt(h, b)?;
                let t = tape.mul_cols(t, lambda_b)?;
                tape.add(base, t)
            }
            Shared::Fourier { entries } => {
                let mut value = sparse_idft2_real(entries, tape.value(first), sp.d_out, sp.d_in);
                value.iter_mut().for_each(|v| *v *= self.config.alpha);
                let op = FourierDelta {
                    entries: Arc::clone(entries),
                    rows: sp.d_out,
                    cols: sp.d_in,
                    alpha: self.config.alpha,
                };
                let delta = tape.custom(&[first], &[sp.d_out, sp.d_in], value, Box::new(op))?;
                let w = tape.add(weight, delta)?;
                tape.matmul_nt(x, w)
            }
        }
    }

    fn site_updates(&self) -> Result<SiteUpdates> {
        let mut out = HashMap::new();
        if self.merged || !self.config.method.is_additive() {
            return Ok(out);
        }
        let r = self.config.rank;
        for &site in &self.order {
            let sp = self.sites[&site];
            let first = self.params.get(sp.first).data().to_vec();
            let second = sp.second.map(|i| self.params.get(i).data().to_vec());
            let update = match &self.shared {
                Shared::None => SiteUpdate::LowRank {
                    a: first,
                    b: second.expect("LoRA B"),
                    rank: r,
                    mid: None,
                    out: None,
                },
                Shared::Vera { a, b } => SiteUpdate::LowRank {
                    a: a.data().to_vec(),
                    b: b.data().to_vec(),
                    rank: r,
                    mid: Some(first),
                    out: second,
                },
                Shared::Fourier { .. } => SiteUpdate::Dense {
                    delta: self.delta(site)?.into_data(),
                },
            };
            out.insert(site, update);
        }
        Ok(out)
    }
}
