use rustfft::num_complex::Complex;
use tsfm_peft::adapters::spectral::{idft2_real, sparse_idft2_real};
use tsfm_peft::adapters::{
    count_trainable_params, Adapter, AdapterConfig, BitFitScope, FrozenView, LnScope, Method,
};
use tsfm_peft::model::{ForecastModel, InferenceEngine, ModelConfig, Preset, Proj, TokenBatch};
use tsfm_peft::numerics::{finite_difference, max_relative_error, Rng, Tape};
use tsfm_peft::Error;

const ADDITIVE: [Method; 3] = [Method::LoRA, Method::VeRA, Method::FourierFT];

fn desk(seed: u64) -> ForecastModel {
    ForecastModel::new(ModelConfig::preset(Preset::Desk), &mut Rng::new(seed)).unwrap()
}

fn ids(n: usize, limit: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(limit)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct double sum: x[p,q] = (1/RC) Σ_u Σ_v S[u,v]·exp(2πi(pu/R + qv/C)), real part.
fn naive_idft2_real(s: &[Complex<f64>], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for p in 0..rows {
        for q in 0..cols {
            let mut acc = Complex::new(0.0, 0.0);
            for u in 0..rows {
                for v in 0..cols {
                    let theta = 2.0 * std::f64::consts::PI
                        * ((p * u) as f64 / rows as f64 + (q * v) as f64 / cols as f64);
                    acc += s[u * cols + v] * Complex::new(theta.cos(), theta.sin());
                }
            }
            out[p * cols + q] = acc.re / (rows * cols) as f64;
        }
    }
    out
}

/// Randomizes every learnable adapter tensor so ΔW is non-zero.
fn perturb(adapter: &mut Adapter, rng: &mut Rng, scale: f64) {
    for t in adapter.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += scale * rng.normal());
    }
}

#[test]
fn spectral_transform_matches_naive_double_sum() {
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    for rows in 1..=8 {
        for cols in 1..=8 {
            let s: Vec<Complex<f64>> =
                (0..rows * cols).map(|_| Complex::new(rng.normal(), rng.normal())).collect();
            worst = worst.max(max_abs_diff(&idft2_real(&s, rows, cols), &naive_idft2_real(&s, rows, cols)));
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn dc_coefficient_gives_flat_delta() {
    let w = sparse_idft2_real(&[(0, 0)], &[1.0], 4, 4);
    let s = {
        let mut s = vec![Complex::new(0.0, 0.0); 16];
        s[0] = Complex::new(1.0, 0.0);
        s
    };
    assert!(max_abs_diff(&w, &[1.0 / 16.0; 16]) < 1e-15);
    assert!(max_abs_diff(&w, &naive_idft2_real(&s, 4, 4)) < 1e-15);
}

#[test]
fn fourier_delta_matches_oracle_on_model() {
    let mut m = desk(2);
    let mut a = Adapter::attach(&mut m, AdapterConfig::new(Method::FourierFT), &mut Rng::new(3)).unwrap();
    perturb(&mut a, &mut Rng::new(4), 1.0);
    let site = a.sites()[5];
    let Some(FrozenView::Fourier { entries }) = a.frozen_view(site) else { panic!() };
    let c = a.params().by_name(&format!("{}.fourier_c", site.prefix())).unwrap().data().to_vec();
    let d = m.config().d_model;
    let delta = a.delta(site).unwrap();
    // direct cosine sum for the sparse spectrum
    let mut expect = vec![0.0; d * d];
    for (p, q) in (0..d).flat_map(|p| (0..d).map(move |q| (p, q))) {
        let mut acc = 0.0;
        for (&(u, v), &cj) in entries.iter().zip(&c) {
            let theta = 2.0 * std::f64::consts::PI * ((p * u) as f64 + (q * v) as f64) / d as f64;
            acc += cj * theta.cos();
        }
        expect[p * d + q] = 300.0 * acc / (d * d) as f64;
    }
    assert!(max_abs_diff(delta.data(), &expect) < 1e-9);
}

#[test]
fn zero_init_adapters_are_identity() {
    let mut rng = Rng::new(5);
    for method in ADDITIVE {
        let mut m = desk(6);
        let cfg = m.config().clone();
        let ctx = ids(cfg.context_len, cfg.vocab_size(), &mut rng);
        let dec = ids(cfg.horizon_len, cfg.vocab_size(), &mut rng);
        let base = m.forward(&ctx, &dec, None).unwrap();
        let a = Adapter::attach(&mut m, AdapterConfig::new(method), &mut Rng::new(7)).unwrap();
        for &site in a.sites() {
            assert!(a.delta(site).unwrap().data().iter().all(|&v| v == 0.0));
        }
        let adapted = m.forward(&ctx, &dec, Some(&a)).unwrap();
        assert!(max_abs_diff(base.data(), adapted.data()) <= 1e-12, "{method}");
    }
}

#[test]
fn shared_frozen_state_is_identical_across_layers() {
    for method in [Method::VeRA, Method::FourierFT] {
        let mut m = desk(8);
        let a = Adapter::attach(&mut m, AdapterConfig::new(method), &mut Rng::new(9)).unwrap();
        assert_eq!(a.sites().len(), 4 * m.config().attention_blocks());
        let first = a.frozen_view(a.sites()[0]).unwrap();
        assert!(!matches!(first, FrozenView::None));
        for &s in a.sites() {
            assert_eq!(a.frozen_view(s).unwrap(), first, "{method} {s}");
        }
        // a second attach with the same shared seed reproduces the state
        let mut m2 = desk(10);
        let b = Adapter::attach(&mut m2, AdapterConfig::new(method), &mut Rng::new(11)).unwrap();
        assert_eq!(b.frozen_view(b.sites()[3]).unwrap(), first);
    }
}

#[test]
fn fourier_entries_are_distinct() {
    let mut m = desk(12);
    let cfg = AdapterConfig::new(Method::FourierFT).with_coefficients(4096);
    let a = Adapter::attach(&mut m, cfg, &mut Rng::new(0)).unwrap();
    let Some(FrozenView::Fourier { entries }) = a.frozen_view(a.sites()[0]) else { panic!() };
    let mut e = entries.to_vec();
    e.sort();
    e.dedup();
    assert_eq!(e.len(), 4096);
}

#[test]
fn vera_scaling_structure() {
    let mut m = desk(13);
    let mut a = Adapter::attach(&mut m, AdapterConfig::new(Method::VeRA), &mut Rng::new(14)).unwrap();
    perturb(&mut a, &mut Rng::new(15), 0.5);
    let site = a.sites()[2];
    let base = a.delta(site).unwrap();
    let lb = a.params().index_of(&format!("{}.vera_lambda_b", site.prefix())).unwrap();
    let s = 2.5;
    a.params_mut().get_mut(lb).data_mut().iter_mut().for_each(|v| *v *= s);
    let scaled = a.delta(site).unwrap();
    let expect: Vec<f64> = base.data().iter().map(|v| v * s).collect();
    assert!(max_abs_diff(scaled.data(), &expect) < 1e-14);

    let ld = a.params().index_of(&format!("{}.vera_lambda_d", site.prefix())).unwrap();
    a.params_mut().get_mut(ld).data_mut().fill(0.0);
    assert!(a.delta(site).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn vera_delta_matches_explicit_product() {
    let mut m = desk(16);
    let mut a = Adapter::attach(&mut m, AdapterConfig::new(Method::VeRA).with_rank(3), &mut Rng::new(17)).unwrap();
    perturb(&mut a, &mut Rng::new(18), 0.5);
    let site = a.sites()[7];
    let Some(FrozenView::Vera { a: fa, b: fb }) = a.frozen_view(site) else { panic!() };
    let ld = a.params().by_name(&format!("{}.vera_lambda_d", site.prefix())).unwrap().data();
    let lb = a.params().by_name(&format!("{}.vera_lambda_b", site.prefix())).unwrap().data();
    let d = 64;
    let r = 3;
    let mut expect = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            expect[i * d + j] = (0..r).map(|k| lb[i] * fb[i * r + k] * ld[k] * fa[k * d + j]).sum();
        }
    }
    assert!(max_abs_diff(a.delta(site).unwrap().data(), &expect) < 1e-14);
}

#[test]
fn selective_methods_have_no_delta_or_merge() {
    for method in [Method::BitFit, Method::LnTuning, Method::FullFT, Method::ZeroShot] {
        let mut m = desk(19);
        let mut a = Adapter::attach(&mut m, AdapterConfig::new(method), &mut Rng::new(20)).unwrap();
        let site = m.projection_sites()[0];
        assert!(matches!(a.delta(site), Err(Error::Contract(_))));
        assert!(matches!(a.merge(&mut m), Err(Error::Contract(_))));
        assert!(matches!(a.unmerge(&mut m), Err(Error::Contract(_))));
    }
}

#[test]
fn merge_matches_adapter_path_and_unmerge_restores() {
    let mut rng = Rng::new(21);
    for method in ADDITIVE {
        let mut m = desk(22);
        let original: Vec<Vec<f64>> = m.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let cfg = m.config().clone();
        let mut a = Adapter::attach(&mut m, AdapterConfig::new(method), &mut Rng::new(23)).unwrap();

        // merge at init leaves the weights unchanged
        a.merge(&mut m).unwrap();
        for ((_, t), o) in m.params().iter().zip(&original) {
            assert_eq!(t.data(), o.as_slice());
        }
        a.unmerge(&mut m).unwrap();

        perturb(&mut a, &mut rng, if method == Method::FourierFT { 0.2 } else { 0.05 });
        let ctx = ids(cfg.context_len, cfg.vocab_size(), &mut rng);
        let dec = ids(cfg.horizon_len, cfg.vocab_size(), &mut rng);
        let adapted = m.forward(&ctx, &dec, Some(&a)).unwrap();
        let base = m.forward(&ctx, &dec, None).unwrap();
        assert!(max_abs_diff(adapted.data(), base.data()) > 1e-6, "{method} update had no effect");

        a.merge(&mut m).unwrap();
        assert!(a.is_merged());
        assert!(matches!(a.merge(&mut m), Err(Error::Contract(_))));
        let merged = m.forward(&ctx, &dec, Some(&a)).unwrap();
        assert!(max_abs_diff(adapted.data(), merged.data()) <= 1e-10, "{method}");

        a.unmerge(&mut m).unwrap();
        let mut worst: f64 = 0.0;
        for ((_, t), o) in m.params().iter().zip(&original) {
            worst = worst.max(max_abs_diff(t.data(), o));
        }
        assert!(worst <= 1e-12, "{method}: {worst}");
    }
}

#[test]
fn merged_forecast_equals_adapted_forecast() {
    let mut rng = Rng::new(24);
    for method in ADDITIVE {
        let mut m = desk(25);
        let mut a = Adapter::attach(&mut m, AdapterConfig::new(method), &mut Rng::new(26)).unwrap();
        perturb(&mut a, &mut rng, 0.05);
        let ctx: Vec<f64> = (0..72).map(|i| 0.5 + 0.1 * (i as f64 * 0.2).sin()).collect();
        let before = tsfm_peft::model::sample_forecast(&m, Some(&a), &ctx, 20, &mut Rng::new(27)).unwrap();
        a.merge(&mut m).unwrap();
        let after = tsfm_peft::model::sample_forecast(&m, Some(&a), &ctx, 20, &mut Rng::new(27)).unwrap();
        let flat = |r: &tsfm_peft::model::ForecastResult| r.samples.concat();
        assert!(max_abs_diff(&flat(&before), &flat(&after)) <= 1e-10, "{method}");
    }
}

#[test]
fn cached_inference_applies_adapter_updates() {
    let mut rng = Rng::new(28);
    for method in ADDITIVE {
        let mut m = desk(29);
        let mut a = Adapter::attach(&mut m, AdapterConfig::new(method), &mut Rng::new(30)).unwrap();
        perturb(&mut a, &mut rng, 0.05);
        let cfg = m.config().clone();
        let ctx = ids(cfg.context_len, cfg.vocab_size(), &mut rng);
        let mut dec = ids(cfg.horizon_len, cfg.vocab_size(), &mut rng);
        dec[0] = cfg.tokenizer.pad_id();
        let engine = InferenceEngine::new(&m, Some(&a)).unwrap();
        let enc = engine.encode_tokens(&ctx, 1.0).unwrap();
        let cached = engine.decoder_logits(&enc, &dec).unwrap();
        let tape = m.forward(&ctx, &dec, Some(&a)).unwrap();
        assert!(max_abs_diff(&cached, tape.data()) < 1e-10, "{method}");
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    for method in ADDITIVE {
        let mut m = desk(31);
        let cfg = m.config().clone();
        let mut a = Adapter::attach(&mut m, AdapterConfig::new(method).with_rank(2), &mut Rng::new(32)).unwrap();
        let mut rng = Rng::new(33);
        perturb(&mut a, &mut rng, 0.05);
        let series: Vec<f64> = (0..108).map(|i| 1.0 + 0.3 * (i as f64 * 0.15).sin()).collect();
        let batch = TokenBatch::from_pairs(&cfg, [(&series[..72], &series[72..])]).unwrap();
        let mut tape = Tape::new();
        let loss = m.loss_tape(&mut tape, &batch, Some(&a)).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.apply(&mut [m.params_mut(), a.params_mut()]);
        assert!(m.params().iter().all(|(_, t)| t.grad().is_none()), "base weights got gradients");

        for idx in [0, a.params().len() - 1] {
            let analytic = a.params().get(idx).grad().unwrap().to_vec();
            let x0 = a.params().get(idx).data().to_vec();
            let mut probe = a.clone();
            let numeric = finite_difference(&x0, 1e-5, |x| {
                probe.params_mut().get_mut(idx).data_mut().copy_from_slice(x);
                let mut t = Tape::new();
                let l = m.loss_tape(&mut t, &batch, Some(&probe)).unwrap();
                t.value(l)[0]
            });
            // loss ≈ 5, so the central difference carries ~1e-10 roundoff; entries
            // below 1e-5 are compared on that absolute scale
            let err = max_relative_error(&analytic, &numeric, 1e-5);
            assert!(err < 1e-4, "{method} {}: {err}", a.params().name(idx));
        }
    }
}

/// Trainable names each method should expose, derived from registry names only.
fn expected_trainable(method: Method, cfg: &AdapterConfig, name: &str) -> bool {
    let is_norm = name.contains("norm.");
    match method {
        Method::FullFT => !name.contains(".lora_") && !name.contains(".vera_") && !name.contains(".fourier_"),
        Method::ZeroShot => false,
        Method::BitFit => match cfg.bitfit_scope {
            BitFitScope::AllBiases => name.ends_with(".bias"),
            BitFitScope::FinalNormOnly => name == "decoder.final_norm.bias",
        },
        Method::LnTuning => match cfg.ln_scope {
            LnScope::Attention => name.contains("attn_norm."),
            LnScope::All => is_norm,
            LnScope::AllScaleOnly => is_norm && name.ends_with(".scale"),
        },
        Method::LoRA => name.ends_with(".lora_a") || name.ends_with(".lora_b"),
        Method::VeRA => name.contains(".vera_lambda_"),
        Method::FourierFT => name.ends_with(".fourier_c"),
    }
}

fn all_configs() -> Vec<AdapterConfig> {
    let mut out: Vec<AdapterConfig> = Method::ALL.into_iter().map(AdapterConfig::new).collect();
    let mut b = AdapterConfig::new(Method::BitFit);
    b.bitfit_scope = BitFitScope::FinalNormOnly;
    out.push(b);
    for scope in [LnScope::All, LnScope::AllScaleOnly] {
        let mut l = AdapterConfig::new(Method::LnTuning);
        l.ln_scope = scope;
        out.push(l);
    }
    let mut partial = AdapterConfig::new(Method::LoRA).with_rank(4);
    partial.targets = vec![Proj::Q, Proj::V];
    out.push(partial);
    out
}

#[test]
fn trainable_sets_match_method_definitions() {
    for cfg in all_configs() {
        let mut m = desk(34);
        let a = Adapter::attach(&mut m, cfg.clone(), &mut Rng::new(35)).unwrap();
        let got = a.trainable_names(&m);
        let all_names: Vec<String> = m
            .params()
            .names()
            .iter()
            .chain(a.params().names())
            .cloned()
            .collect();
        let mut want: Vec<String> = all_names
            .into_iter()
            .filter(|n| expected_trainable(cfg.method, &cfg, n))
            .filter(|n| match cfg.method {
                Method::LoRA => cfg.targets.iter().any(|p| n.contains(&format!(".{}.lora", p.short()))),
                _ => true,
            })
            .collect();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        want.sort();
        assert_eq!(got_sorted, want, "{:?}", cfg);
    }
}

#[test]
fn closed_form_counts_equal_live_registry() {
    for preset in [Preset::Desk, Preset::Tiny] {
        let mcfg = ModelConfig::preset(preset);
        let base = ForecastModel::zeroed(mcfg.clone()).unwrap();
        for cfg in all_configs() {
            let mut m = base.clone();
            let a = Adapter::attach(&mut m, cfg.clone(), &mut Rng::new(36)).unwrap();
            let report = count_trainable_params(&cfg, &mcfg);
            assert_eq!(report.total, a.trainable_count(&m), "{preset} {cfg:?}");
            assert_eq!(report.groups.iter().map(|g| g.1).sum::<usize>(), report.total);
        }
    }
}

#[test]
fn published_budget_counts() {
    let tiny = ModelConfig::preset(Preset::Tiny);
    let count = |cfg: AdapterConfig, m: &ModelConfig| count_trainable_params(&cfg, m).total;
    assert_eq!(count(AdapterConfig::new(Method::ZeroShot), &tiny), 0);
    assert_eq!(count(AdapterConfig::new(Method::LoRA), &tiny), 49_152);
    assert_eq!(count(AdapterConfig::new(Method::VeRA), &tiny), 13_056);
    assert_eq!(count(AdapterConfig::new(Method::VeRA).with_rank(1), &tiny), 12_336);
    assert_eq!(count(AdapterConfig::new(Method::FourierFT), &tiny), 2_400);
    assert_eq!(count(AdapterConfig::new(Method::FourierFT).with_coefficients(200), &tiny), 9_600);
    let base = ModelConfig::preset(Preset::Base);
    assert_eq!(count(AdapterConfig::new(Method::LoRA), &base), 442_368);
    let full = count(AdapterConfig::new(Method::FullFT), &tiny);
    assert_eq!(full, 8_454_144);
    assert!((full as f64 / 8.3e6 - 1.0).abs() < 0.02);
    let mut b = AdapterConfig::new(Method::BitFit);
    b.bitfit_scope = BitFitScope::FinalNormOnly;
    assert_eq!(count(b.clone(), &tiny), 256);
    assert_eq!(count(b, &base), 768);
}

#[test]
fn checkpoint_restores_forecasts_bit_exactly() {
    let ctx: Vec<f64> = (0..72).map(|i| 0.4 + 0.2 * (i as f64 * 0.1).cos()).collect();
    for cfg in all_configs() {
        let mut m = desk(37);
        let mut a = Adapter::attach(&mut m, cfg.clone(), &mut Rng::new(38)).unwrap();
        perturb(&mut a, &mut Rng::new(39), 0.05);
        for &i in a.selected_base_params() {
            m.params_mut().get_mut(i).data_mut().iter_mut().for_each(|v| *v += 0.01);
        }
        let want = tsfm_peft::model::sample_forecast(&m, Some(&a), &ctx, 4, &mut Rng::new(40)).unwrap();
        let bytes = a.to_bytes(&m).unwrap();

        let mut fresh = desk(37);
        let b = Adapter::from_bytes(&bytes, &mut fresh).unwrap();
        let got = tsfm_peft::model::sample_forecast(&fresh, Some(&b), &ctx, 4, &mut Rng::new(40)).unwrap();
        assert_eq!(want, got, "{cfg:?}");
    }
    let mut m = desk(41);
    let a = Adapter::attach(&mut m, AdapterConfig::new(Method::LoRA), &mut Rng::new(42)).unwrap();
    let bytes = a.to_bytes(&m).unwrap();
    let mut other = ForecastModel::zeroed(ModelConfig::preset(Preset::Tiny)).unwrap();
    assert!(Adapter::from_bytes(&bytes, &mut other).is_err());
    assert!(matches!(Adapter::from_bytes(&bytes[..20], &mut m), Err(Error::Format(_))));
}
