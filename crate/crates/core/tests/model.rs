use tsfm_peft::model::{
    check_model_gradients, lower_median, sample_forecast, ForecastModel, ForecastResult, InferenceEngine, ModelConfig,
    ParamClass, Preset, TokenBatch,
};
use tsfm_peft::numerics::Rng;
use tsfm_peft::Error;

fn desk(seed: u64) -> ForecastModel {
    ForecastModel::new(ModelConfig::preset(Preset::Desk), &mut Rng::new(seed)).unwrap()
}

fn random_ids(n: usize, limit: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(limit)).collect()
}

fn random_series(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut v = 0.0;
    (0..n)
        .map(|_| {
            v += 0.1 * rng.normal();
            0.5 + v
        })
        .collect()
}

/// Parameter total counted by walking the architecture by hand.
fn independent_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let v = cfg.vocab_size();
    let b = if cfg.include_linear_bias { 1 } else { 0 };
    let mut total = v * d; // token table, reused by the head
    total += cfg.context_len * d + cfg.horizon_len * d;
    for _ in 0..cfg.n_encoder_layers {
        total += 2 * d; // self-attention norm
        total += 4 * (d * d + b * d);
        total += 2 * d; // ff norm
        total += d * cfg.d_ff + b * cfg.d_ff + cfg.d_ff * d + b * d;
    }
    for _ in 0..cfg.n_decoder_layers {
        total += 3 * 2 * d;
        total += 8 * (d * d + b * d);
        total += d * cfg.d_ff + b * cfg.d_ff + cfg.d_ff * d + b * d;
    }
    total + 2 * 2 * d + v
}

#[test]
fn closed_form_count_matches_independent_walk() {
    for p in Preset::ALL {
        let mut cfg = ModelConfig::preset(p);
        assert_eq!(cfg.parameter_count(), independent_count(&cfg), "{p}");
        cfg.include_linear_bias = false;
        assert_eq!(cfg.parameter_count(), independent_count(&cfg), "{p} without biases");
    }
}

#[test]
fn live_registry_matches_closed_form() {
    for p in [Preset::Desk, Preset::Tiny] {
        let cfg = ModelConfig::preset(p);
        let m = ForecastModel::zeroed(cfg.clone()).unwrap();
        assert_eq!(m.parameter_count(), cfg.parameter_count());
        assert_eq!(m.trainable_count(), cfg.parameter_count());
    }
    assert_eq!(ModelConfig::preset(Preset::Tiny).parameter_count(), 8_454_144);
}

#[test]
fn registry_names_unique_and_classified() {
    let m = ForecastModel::zeroed(ModelConfig::preset(Preset::Desk)).unwrap();
    let mut names: Vec<&String> = m.params().names().iter().collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
    let projections = m
        .roles()
        .iter()
        .filter(|r| r.classes().iter().any(|c| matches!(c, ParamClass::AttentionProjection(_))))
        .count();
    let cfg = m.config();
    assert_eq!(projections, 4 * cfg.attention_blocks());
    assert_eq!(m.projection_sites().len(), projections);
    assert!(m.params().by_name("decoder.layer1.cross_attn.v.weight").is_some());
    assert!(m.params().by_name("encoder.layer0.cross_attn.v.weight").is_none());
}

#[test]
fn decoder_is_causal_at_every_position() {
    let m = desk(1);
    let cfg = m.config().clone();
    let mut rng = Rng::new(2);
    let v = cfg.vocab_size();
    for _ in 0..3 {
        let ctx = random_ids(cfg.context_len, v, &mut rng);
        let dec = random_ids(cfg.horizon_len, v, &mut rng);
        let base = m.forward(&ctx, &dec, None).unwrap();
        for t in 0..cfg.horizon_len {
            let mut pert = dec.clone();
            pert[t] = (pert[t] + 1 + rng.below(v - 1)) % v;
            let out = m.forward(&ctx, &pert, None).unwrap();
            assert_eq!(&base.data()[..t * v], &out.data()[..t * v], "position {t}");
            assert_ne!(&base.data()[t * v..(t + 1) * v], &out.data()[t * v..(t + 1) * v]);
        }
    }
}

#[test]
fn permuting_context_changes_encoder_output() {
    let m = desk(3);
    let mut rng = Rng::new(4);
    let cfg = m.config();
    let ctx = random_ids(cfg.context_len, cfg.tokenizer.n_bins, &mut rng);
    let mut swapped = ctx.clone();
    let (i, j) = (5, 40);
    assert_ne!(ctx[i], ctx[j]);
    swapped.swap(i, j);
    let a = m.encoder_output(&ctx, None).unwrap();
    let b = m.encoder_output(&swapped, None).unwrap();
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6, "encoder output insensitive to order: {diff}");
}

#[test]
fn zero_weights_give_uniform_logits() {
    let m = ForecastModel::zeroed(ModelConfig::preset(Preset::Desk)).unwrap();
    let mut rng = Rng::new(5);
    let cfg = m.config();
    let ctx = random_ids(cfg.context_len, cfg.vocab_size(), &mut rng);
    let dec = random_ids(7, cfg.vocab_size(), &mut rng);
    let logits = m.forward(&ctx, &dec, None).unwrap();
    let first = logits.data()[0];
    assert!(logits.data().iter().all(|&x| x == first));
}

#[test]
fn token_overflow_is_index_error() {
    let m = desk(6);
    let cfg = m.config();
    let mut ctx = vec![0; cfg.context_len];
    ctx[3] = cfg.vocab_size();
    assert!(matches!(m.forward(&ctx, &[0], None), Err(Error::Index { .. })));
}

#[test]
fn forward_is_deterministic() {
    let m = desk(7);
    let mut rng = Rng::new(8);
    let cfg = m.config();
    let ctx = random_ids(cfg.context_len, cfg.vocab_size(), &mut rng);
    let dec = random_ids(10, cfg.vocab_size(), &mut rng);
    assert_eq!(
        m.forward(&ctx, &dec, None).unwrap().data(),
        m.forward(&ctx, &dec, None).unwrap().data()
    );
}

#[test]
fn cached_decoding_matches_tape_forward() {
    let m = desk(9);
    let mut rng = Rng::new(10);
    let cfg = m.config().clone();
    let engine = InferenceEngine::new(&m, None).unwrap();
    let ctx = random_ids(cfg.context_len, cfg.vocab_size(), &mut rng);
    let mut dec = random_ids(cfg.horizon_len, cfg.vocab_size(), &mut rng);
    dec[0] = cfg.tokenizer.pad_id();
    let enc = engine.encode_tokens(&ctx, 1.0).unwrap();
    let cached = engine.decoder_logits(&enc, &dec).unwrap();
    let tape = m.forward(&ctx, &dec, None).unwrap();
    let worst = cached
        .iter()
        .zip(tape.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "max diff {worst}");
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let m = desk(11);
    let cfg = m.config().clone();
    let mut rng = Rng::new(12);
    let series: Vec<(Vec<f64>, Vec<f64>)> = (0..2)
        .map(|_| {
            let s = random_series(cfg.context_len + cfg.horizon_len, &mut rng);
            (s[..cfg.context_len].to_vec(), s[cfg.context_len..].to_vec())
        })
        .collect();
    let batch =
        TokenBatch::from_pairs(&cfg, series.iter().map(|(c, h)| (c.as_slice(), h.as_slice()))).unwrap();
    let report = check_model_gradients(&m, &batch, 3, &mut rng).unwrap();
    assert_eq!(report.tensors, m.params().len());
    assert!(report.checked >= 3 * report.tensors - 4, "{report:?}");
    assert!(report.skipped * 10 < report.checked, "{report:?}");
    assert!(report.worst < 1e-4, "{report:?}");
}

#[test]
fn weights_round_trip_bit_exactly() {
    let m = desk(13);
    let bytes = m.to_bytes().unwrap();
    let back = ForecastModel::from_bytes(&bytes).unwrap();
    assert_eq!(back.config(), m.config());
    for ((na, a), (nb, b)) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &[f64]| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.data()), bits(b.data()));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    m.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    assert!(matches!(ForecastModel::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(ForecastModel::from_bytes(&bad), Err(Error::Format(_))));
}

#[test]
fn single_sample_median_is_the_trajectory() {
    let m = desk(14);
    let ctx = random_series(72, &mut Rng::new(15));
    let r = sample_forecast(&m, None, &ctx, 1, &mut Rng::new(16)).unwrap();
    assert_eq!(r.samples.len(), 1);
    assert_eq!(r.point, r.samples[0]);
}

#[test]
fn sampling_is_deterministic_and_sample_streams_are_independent() {
    let m = desk(17);
    let ctx = random_series(72, &mut Rng::new(18));
    let a = sample_forecast(&m, None, &ctx, 20, &mut Rng::new(19)).unwrap();
    let b = sample_forecast(&m, None, &ctx, 20, &mut Rng::new(19)).unwrap();
    assert_eq!(a, b);
    assert!(a.samples.iter().all(|s| s.len() == 36));
    let c = sample_forecast(&m, None, &ctx, 5, &mut Rng::new(19)).unwrap();
    assert_eq!(&a.samples[..5], c.samples.as_slice());
    assert!(sample_forecast(&m, None, &ctx, 0, &mut Rng::new(19)).is_err());
}

#[test]
fn dominant_logit_gives_identical_samples() {
    let mut m = ForecastModel::zeroed(ModelConfig::preset(Preset::Desk)).unwrap();
    let bias = m.params().index_of("head.bias").unwrap();
    m.params_mut().get_mut(bias).data_mut()[70] = 1e3;
    let ctx = random_series(72, &mut Rng::new(20));
    let r = sample_forecast(&m, None, &ctx, 20, &mut Rng::new(21)).unwrap();
    assert!(r.samples.iter().all(|s| s == &r.samples[0]));
    let tok = &m.config().tokenizer;
    let scale = tsfm_peft::model::mean_scale(&ctx);
    assert!(r.point.iter().all(|&v| v == tok.bin_center(70) * scale));
}

#[test]
fn lower_median_picks_lower_middle() {
    assert_eq!(lower_median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(lower_median(&mut [4.0, 1.0, 3.0, 2.0]), 2.0);
    let r = ForecastResult::from_samples(vec![vec![1.0, 9.0], vec![5.0, 0.0]]);
    assert_eq!(r.point, vec![1.0, 0.0]);
}
