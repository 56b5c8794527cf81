//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tseg_core::corpus::{
    splice_synthetic_corpus, Dialogue, RetrievalExample, RetrievalGenerator, TopicGenerator, TopicSegmentation,
};
use tseg_core::encoders::Encoder;
use tseg_core::matcher::{
    self, attentive_module, attentive_module_backward, AttentiveParams, Embedder, EncodedContext, MatcherConfig,
    MatcherParams, TrainConfig, Vocab, ABLATIONS,
};
use tseg_core::numerics::{
    self, gradient_check, Axis, GradCheckConfig, GruParams, Parameter, Parameters, Tensor, LAYER_NORM_EPS,
};
use tseg_core::retrieval_metrics::{self as rm, Candidate, RankedGroup};
use tseg_core::seg_metrics::{self, boundary_f1, window_diff};
use tseg_core::segmenter::{segment_corpus, segment_dialogue, texttiling, SegmenterConfig, TextTilingConfig};

type Check = std::result::Result<String, String>;

const GRAD_TOL: f64 = 1e-4;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> std::result::Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

// ---------------------------------------------------------------------------
// Segmentation metrics

fn random_boundaries(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (1..n).filter(|_| rng.gen_bool(0.3)).collect()
}

/// WindowDiff straight from its definition: slide a window over every pair of
/// utterances `k` apart and compare how many cuts fall between them.
fn oracle_window_diff(pred: &[usize], gold: &[usize], n: usize, k: usize) -> f64 {
    let between = |bs: &[usize], lo: usize, hi: usize| bs.iter().filter(|&&b| lo <= b && b < hi).count();
    if n <= k {
        return if between(pred, 1, n) == between(gold, 1, n) {
            0.0
        } else {
            1.0
        };
    }
    let mut errors = 0;
    for i in 1..=(n - k) {
        if between(pred, i, i + k) != between(gold, i, i + k) {
            errors += 1;
        }
    }
    errors as f64 / (n - k) as f64
}

fn oracle_f1(pred: &[usize], gold: &[usize]) -> f64 {
    let p: BTreeSet<usize> = pred.iter().copied().collect();
    let g: BTreeSet<usize> = gold.iter().copied().collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let hits = p.intersection(&g).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let (precision, recall) = (hits / p.len() as f64, hits / g.len() as f64);
    2.0 * precision * recall / (precision + recall)
}

fn seg_metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut preds, mut golds, mut expected_abs) = (Vec::new(), Vec::new(), 0usize);
    for i in 0..1000 {
        let n = rng.gen_range(1..=30);
        let pred = random_boundaries(&mut rng, n);
        let gold = random_boundaries(&mut rng, n);
        let wd = window_diff(&pred, &gold, n, 4).map_err(|e| e.to_string())?;
        let want = oracle_window_diff(&pred, &gold, n, 4);
        ensure(wd == want, || format!("instance {i}: WindowDiff {wd} vs oracle {want}"))?;
        let f1 = boundary_f1(&pred, &gold).f1;
        let want = oracle_f1(&pred, &gold);
        ensure(f1 == want, || format!("instance {i}: F1 {f1} vs oracle {want}"))?;
        expected_abs += (pred.len() + 1).abs_diff(gold.len() + 1);
        preds.push(TopicSegmentation::new(format!("d{i}"), pred).unwrap());
        golds.push(TopicSegmentation::new(format!("d{i}"), gold).unwrap());
    }
    let mae = seg_metrics::mae(&preds, &golds).map_err(|e| e.to_string())?;
    let want = expected_abs as f64 / 1000.0;
    ensure(mae == want, || format!("MAE {mae} vs oracle {want}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 instances in {:.2?}", start.elapsed()))
}

fn perfect_predictions() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut dialogues = Vec::new();
    let mut preds = Vec::new();
    for i in 0..100 {
        let n = rng.gen_range(2..=30);
        let gold = random_boundaries(&mut rng, n);
        let utts = (0..n)
            .map(|j| tseg_core::corpus::Utterance::from_text(format!("u{j}")))
            .collect();
        dialogues.push(Dialogue::new(format!("d{i}"), utts, Some(gold.clone())).unwrap());
        preds.push(TopicSegmentation::new(format!("d{i}"), gold).unwrap());
    }
    let r = seg_metrics::evaluate(&preds, &dialogues, 4).map_err(|e| e.to_string())?;
    ensure(r.mae == 0.0 && r.window_diff == 0.0 && r.f1 == 1.0, || {
        format!("MAE {} WD {} F1 {}", r.mae, r.window_diff, r.f1)
    })?;
    ensure(
        r.per_dialogue.iter().all(|d| d.window_diff == 0.0 && d.f1 == 1.0),
        || "a dialogue is not perfect".into(),
    )?;
    Ok("MAE 0, WD 0, F1 1 on 100 gold sets".into())
}

// ---------------------------------------------------------------------------
// Segmentation on the synthetic corpus

fn synthetic_corpus() -> Vec<Dialogue> {
    let sources = TopicGenerator::default().generate(13).unwrap();
    splice_synthetic_corpus(&sources, 200, 2..=4, 13).unwrap()
}

fn scan_config(threshold: f64) -> SegmenterConfig {
    SegmenterConfig {
        range: 8,
        jump: 2,
        window: 2,
        threshold,
    }
}

fn synthetic_recovery() -> Check {
    let start = Instant::now();
    let corpus = synthetic_corpus();
    let segs = segment_corpus(&corpus, &Encoder::TermFrequency, &scan_config(0.6)).map_err(|e| e.to_string())?;
    let report = seg_metrics::evaluate(&segs, &corpus, 4).map_err(|e| e.to_string())?;
    let tt = TextTilingConfig::english();
    for d in &corpus {
        let s = texttiling(d, &tt, &Encoder::TermFrequency).map_err(|e| e.to_string())?;
        s.validate_for(d.len())
            .map_err(|e| format!("TextTiling output for {}: {e}", d.id))?;
        ensure(s.dialogue_id == d.id, || "TextTiling id mismatch".into())?;
    }
    let elapsed = start.elapsed();
    let detail = format!("F1 {:.4}, MAE {:.4}, {elapsed:.2?}", report.f1, report.mae);
    ensure(report.f1 >= 0.80, || format!("{detail}; F1 below 0.80"))?;
    ensure(report.mae <= 1.0, || format!("{detail}; MAE above 1.0"))?;
    within(elapsed, Duration::from_secs(10))?;
    Ok(detail)
}

fn threshold_monotonicity() -> Check {
    let corpus = synthetic_corpus();
    let thetas = [-1.0, 0.0, 0.3, 0.6, 0.9, 1.0];
    let counts: Vec<usize> = thetas
        .iter()
        .map(|&t| {
            segment_corpus(&corpus, &Encoder::TermFrequency, &scan_config(t))
                .map(|segs| segs.iter().map(|s| s.boundaries.len()).sum())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    // lowering the threshold must never add boundaries
    ensure(counts.windows(2).all(|w| w[0] <= w[1]), || {
        format!("counts {counts:?} over {thetas:?}")
    })?;
    Ok(format!("boundary counts {counts:?} over {thetas:?}"))
}

// ---------------------------------------------------------------------------
// Gradients

fn check_input_grad(
    name: &str,
    x: Tensor,
    forward: impl Fn(&Tensor) -> Tensor,
    backward: impl Fn(&Tensor, &Tensor) -> Tensor,
) -> std::result::Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = Tensor::random(forward(&x).shape(), 1.0, &mut rng);
    let mut params = vec![Parameter::new(name, x)];
    params[0].grad = backward(&params[0].value, &w);
    let report = gradient_check(
        &mut params,
        |p| forward(&p[0].value).dot(&w),
        &GradCheckConfig::default(),
    )
    .map_err(|e| format!("{name}: {e}"))?;
    ensure(report.passes(GRAD_TOL), || format!("{name}: {:?}", report.worst()))?;
    Ok(report.max_rel_error)
}

fn op_gradients() -> std::result::Result<Vec<(&'static str, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut out = Vec::new();
    let a = Tensor::random(&[3, 4], 1.0, &mut rng);
    let b = Tensor::random(&[4, 5], 1.0, &mut rng);
    let bb = b.clone();
    out.push((
        "matmul",
        check_input_grad(
            "matmul",
            a.clone(),
            move |a| numerics::matmul(a, &bb).unwrap(),
            |a, g| numerics::matmul_backward(a, &b, g).unwrap().0,
        )?,
    ));
    let a3 = Tensor::random(&[2, 3, 4], 1.0, &mut rng);
    let b3 = Tensor::random(&[2, 4, 3], 1.0, &mut rng);
    let bb3 = b3.clone();
    out.push((
        "batched_matmul",
        check_input_grad(
            "batched_matmul",
            a3,
            move |a| numerics::batched_matmul(a, &bb3).unwrap(),
            |a, g| numerics::batched_matmul_backward(a, &b3, g).unwrap().0,
        )?,
    ));
    let x = Tensor::random(&[3, 5], 2.0, &mut rng);
    let mask = [true, false, true, true, true];
    out.push((
        "softmax",
        check_input_grad(
            "softmax",
            x.clone(),
            |x| numerics::softmax(x, Some(&mask)).unwrap(),
            |x, g| numerics::softmax_backward(&numerics::softmax(x, Some(&mask)).unwrap(), g).unwrap(),
        )?,
    ));
    out.push((
        "tanh",
        check_input_grad("tanh", x.clone(), numerics::tanh, |x, g| {
            numerics::tanh_backward(&numerics::tanh(x), g).unwrap()
        })?,
    ));
    out.push((
        "sigmoid",
        check_input_grad("sigmoid", x.clone(), numerics::sigmoid, |x, g| {
            numerics::sigmoid_backward(&numerics::sigmoid(x), g).unwrap()
        })?,
    ));
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.5 } else { v });
    out.push((
        "relu",
        check_input_grad("relu", away, numerics::relu, |x, g| {
            numerics::relu_backward(x, g).unwrap()
        })?,
    ));

    let gain = Tensor::random(&[5], 1.0, &mut rng).map(|v| v + 1.5);
    let bias = Tensor::random(&[5], 0.5, &mut rng);
    let (g2, b2) = (gain.clone(), bias.clone());
    out.push((
        "layer_norm",
        check_input_grad(
            "layer_norm",
            x.clone(),
            move |x| numerics::layer_norm(x, &g2, &b2, LAYER_NORM_EPS).unwrap().0,
            |x, g| {
                let (_, cache) = numerics::layer_norm(x, &gain, &bias, LAYER_NORM_EPS).unwrap();
                numerics::layer_norm_backward(&cache, &gain, g).unwrap().0
            },
        )?,
    ));
    for (label, axis, mask) in [
        ("mean_pool rows", Axis::Rows, vec![true, false, true]),
        ("mean_pool cols", Axis::Cols, vec![true, true, false, true, true]),
    ] {
        let m = mask.clone();
        out.push((
            label,
            check_input_grad(
                label,
                x.clone(),
                move |x| numerics::mean_pool(x, axis, Some(&m)).unwrap(),
                |x, g| numerics::mean_pool_backward(x.shape(), axis, Some(&mask), g).unwrap(),
            )?,
        ));
    }
    for (label, axis) in [("max_pool rows", Axis::Rows), ("max_pool cols", Axis::Cols)] {
        out.push((
            label,
            check_input_grad(
                label,
                x.clone(),
                move |x| numerics::max_pool(x, axis, None).unwrap().0,
                |x, g| {
                    let (_, arg) = numerics::max_pool(x, axis, None).unwrap();
                    numerics::max_pool_backward(x.shape(), axis, &arg, g).unwrap()
                },
            )?,
        ));
    }

    // GRU: parameters and inputs
    let mut gru = GruParams::random("gru", 3, 4, &mut rng);
    for bias in [&mut gru.bz, &mut gru.br, &mut gru.bh] {
        bias.value = Tensor::random(bias.value.shape(), 0.3, &mut rng);
    }
    let inputs = Tensor::random(&[4, 3], 1.0, &mut rng);
    let mask = [true, true, false, true];
    let w = Tensor::random(&[4], 1.0, &mut rng);
    let (_, cache) = numerics::gru_sequence(&gru, &inputs, Some(&mask)).unwrap();
    let dinputs = numerics::gru_sequence_backward(&mut gru, &cache, w.data()).unwrap();
    let objective = |g: &GruParams, x: &Tensor| -> tseg_core::Result<f64> {
        let (h, _) = numerics::gru_sequence(g, x, Some(&mask))?;
        Ok(h.iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let report =
        gradient_check(&mut gru, |g| objective(g, &inputs), &GradCheckConfig::default()).map_err(|e| e.to_string())?;
    ensure(report.passes(GRAD_TOL), || format!("gru params: {:?}", report.worst()))?;
    out.push(("gru params", report.max_rel_error));
    let mut x = vec![Parameter::new("gru.inputs", inputs)];
    x[0].grad = dinputs;
    let report = gradient_check(&mut x, |x| objective(&gru, &x[0].value), &GradCheckConfig::default())
        .map_err(|e| e.to_string())?;
    ensure(report.passes(GRAD_TOL), || format!("gru inputs: {:?}", report.worst()))?;
    out.push(("gru inputs", report.max_rel_error));

    // attentive module: parameters and inputs
    let cfg = MatcherConfig {
        dim: 8,
        ..MatcherConfig::default()
    };
    let mut att: AttentiveParams = MatcherParams::new(&cfg, None, 4).unwrap().attentive;
    for b in [&mut att.b1, &mut att.b2, &mut att.ln_bias] {
        b.value = Tensor::random(b.value.shape(), 0.3, &mut rng);
    }
    let mut qkv = vec![
        Parameter::new("q", Tensor::random(&[3, 8], 1.0, &mut rng)),
        Parameter::new("k", Tensor::random(&[4, 8], 1.0, &mut rng)),
        Parameter::new("v", Tensor::random(&[4, 8], 1.0, &mut rng)),
    ];
    let w = Tensor::random(&[3, 8], 1.0, &mut rng);
    let kmask = [true, false, true, true];
    let (dq, dk, dv) =
        attentive_module_backward(&mut att, &qkv[0].value, &qkv[1].value, &qkv[2].value, Some(&kmask), &w).unwrap();
    (qkv[0].grad, qkv[1].grad, qkv[2].grad) = (dq, dk, dv);
    let objective = |p: &AttentiveParams, x: &Vec<Parameter>| {
        attentive_module(p, &x[0].value, &x[1].value, &x[2].value, Some(&kmask))?.dot(&w)
    };
    let report =
        gradient_check(&mut att, |p| objective(p, &qkv), &GradCheckConfig::default()).map_err(|e| e.to_string())?;
    ensure(report.passes(GRAD_TOL), || {
        format!("attentive params: {:?}", report.worst())
    })?;
    out.push(("attentive params", report.max_rel_error));
    let report =
        gradient_check(&mut qkv, |x| objective(&att, x), &GradCheckConfig::default()).map_err(|e| e.to_string())?;
    ensure(report.passes(GRAD_TOL), || {
        format!("attentive inputs: {:?}", report.worst())
    })?;
    out.push(("attentive inputs", report.max_rel_error));
    Ok(out)
}

/// The T=3, L=6, d=8, h=4 instance with a trainable toy embedding.
struct Instance {
    embedder: Embedder,
    params: MatcherParams,
    segments: Vec<Vec<String>>,
    response: Vec<String>,
}

fn small_config() -> MatcherConfig {
    MatcherConfig {
        max_segments: 3,
        max_seg_len: 6,
        dim: 8,
        channels: 4,
        ..MatcherConfig::default()
    }
}

impl Instance {
    fn new(config: &MatcherConfig, lens: &[usize], seed: u64) -> Self {
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::from_tokens(&words);
        let mut params = MatcherParams::new(config, Some(vocab.len()), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        // non-zero biases so their gradients are exercised
        for p in params.params_mut() {
            if p.name.contains(".b") || p.name.ends_with("ln_bias") {
                p.value = Tensor::random(p.value.shape(), 0.2, &mut rng);
            }
        }
        let mut pick = |n: usize| {
            (0..n)
                .map(|_| words.choose(&mut rng).unwrap().clone())
                .collect::<Vec<_>>()
        };
        let segments = lens.iter().map(|&n| pick(n)).collect();
        let response = pick(5);
        Self {
            embedder: Embedder::Toy(vocab),
            params,
            segments,
            response,
        }
    }

    fn ctx(&self, config: &MatcherConfig, params: &MatcherParams) -> EncodedContext {
        matcher::encode(&self.segments, &self.response, config, &self.embedder, params).unwrap()
    }

    fn score(&self, config: &MatcherConfig) -> f64 {
        matcher::score(&self.params, config, &self.ctx(config, &self.params)).unwrap()
    }
}

/// Worst relative error of the full loss gradient over both labels.
fn loss_gradient(config: &MatcherConfig, seed: u64) -> std::result::Result<f64, String> {
    let inst = Instance::new(config, &[4, 6, 3], seed);
    let mut worst: f64 = 0.0;
    for label in [0u8, 1] {
        let mut params = inst.params.clone();
        params.zero_grad();
        let ctx = inst.ctx(config, &params);
        matcher::loss_and_grad(&mut params, config, &ctx, label).map_err(|e| e.to_string())?;
        let report = gradient_check(
            &mut params,
            |p| Ok(matcher::loss(matcher::score(p, config, &inst.ctx(config, p))?, label)),
            &GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        ensure(report.passes(GRAD_TOL), || {
            format!("label {label}: {:?}", report.worst())
        })?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

fn gradient_contract() -> Check {
    let start = Instant::now();
    let ops = op_gradients()?;
    let full = loss_gradient(&small_config(), 11)?;
    within(start.elapsed(), Duration::from_secs(60))?;
    let worst_op = ops.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!(
        "{} op checks (max rel err {worst_op:.1e}), full loss {full:.1e}, {:.2?}",
        ops.len(),
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// Matcher identities, variants and training

fn weighting_identities() -> Check {
    let cfg = small_config();
    let mut worst_sum: f64 = 0.0;
    let mut worst_pad: f64 = 0.0;
    for seed in 0..20 {
        let lens: Vec<usize> = (0..1 + seed as usize % 3)
            .map(|i| 1 + (seed as usize + 2 * i) % 6)
            .collect();
        let inst = Instance::new(&cfg, &lens, seed);
        let ctx = inst.ctx(&cfg, &inst.params);
        let s1 = matcher::word_level_weights(&inst.params, &cfg, &ctx).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((s1.iter().sum::<f64>() - 1.0).abs());

        let mut one = cfg.clone();
        one.alpha = 1.0;
        let mut no_seg = cfg.clone();
        no_seg.use_segment_weights = false;
        ensure(inst.score(&one).to_bits() == inst.score(&no_seg).to_bits(), || {
            format!("seed {seed}: alpha=1 differs from use_segment_weights=false")
        })?;
        let mut zero = cfg.clone();
        zero.alpha = 0.0;
        let mut no_word = cfg.clone();
        no_word.use_word_weights = false;
        ensure(inst.score(&zero).to_bits() == inst.score(&no_word).to_bits(), || {
            format!("seed {seed}: alpha=0 differs from use_word_weights=false")
        })?;

        let wide = MatcherConfig {
            max_segments: 4,
            ..cfg.clone()
        };
        worst_pad = worst_pad.max((inst.score(&wide) - inst.score(&cfg)).abs());
    }
    ensure(worst_sum <= 1e-10, || format!("|sum s1 - 1| = {worst_sum:e}"))?;
    ensure(worst_pad < 1e-9, || format!("padding moved the score by {worst_pad:e}"))?;
    Ok(format!(
        "|sum s1 - 1| <= {worst_sum:.1e}, alpha identities bitwise, padding delta {worst_pad:.1e}"
    ))
}

fn variant_matrix() -> Check {
    let mut worst: f64 = 0.0;
    for (i, (label, spec)) in ABLATIONS.iter().enumerate() {
        let mut cfg = small_config();
        cfg.apply_overrides(spec).map_err(|e| format!("{label}: {e}"))?;
        let inst = Instance::new(&cfg, &[4, 6, 3], 40 + i as u64);
        let s = inst.score(&cfg);
        ensure(s > 0.0 && s < 1.0, || format!("{label}: score {s}"))?;
        worst = worst.max(loss_gradient(&cfg, 40 + i as u64).map_err(|e| format!("{label}: {e}"))?);
    }
    Ok(format!(
        "{} variants construct, score and pass (max rel err {worst:.1e})",
        ABLATIONS.len()
    ))
}

fn segment_examples(examples: &[RetrievalExample]) -> Vec<TopicSegmentation> {
    examples
        .iter()
        .map(|e| {
            let d = Dialogue::new(e.group.to_string(), e.context.clone(), None).unwrap();
            segment_dialogue(&d, &Encoder::TermFrequency, &SegmenterConfig::default()).unwrap()
        })
        .collect()
}

fn overfit() -> Check {
    let start = Instant::now();
    let examples = RetrievalGenerator::default().generate(13).map_err(|e| e.to_string())?;
    ensure(examples.len() == 20, || format!("{} examples", examples.len()))?;
    let config = MatcherConfig::default();
    let pairs: Vec<_> = examples.iter().cloned().zip(segment_examples(&examples)).collect();
    let data = matcher::prepare_dataset(&pairs, &config).map_err(|e| e.to_string())?;
    let vocab = Vocab::from_tokens(data.iter().flat_map(|e| e.segments.iter().flatten().chain(&e.response)));
    let mut params = MatcherParams::new(&config, Some(vocab.len()), 13).map_err(|e| e.to_string())?;
    let embedder = Embedder::Toy(vocab);
    let train = TrainConfig {
        batch_size: 20,
        steps: 500,
        seed: 13,
        ..TrainConfig::default()
    };
    matcher::train(&data, &config, &embedder, &mut params, &train).map_err(|e| e.to_string())?;
    let loss = matcher::mean_loss(&data, &config, &embedder, &params).map_err(|e| e.to_string())?;
    let mut groups: Vec<RankedGroup> = Vec::new();
    for (ex, p) in examples.iter().zip(&data) {
        let ctx = matcher::encode(&p.segments, &p.response, &config, &embedder, &params).map_err(|e| e.to_string())?;
        let c = Candidate {
            score: matcher::score(&params, &config, &ctx).map_err(|e| e.to_string())?,
            label: p.label,
        };
        match groups.last_mut() {
            Some(g) if g.id == ex.group.to_string() => g.candidates.push(c),
            _ => groups.push(RankedGroup::new(ex.group.to_string(), vec![c])),
        }
    }
    let r = rm::recall_at_k(&groups, 1).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!("mean loss {loss:.2e}, R_2@1 {r}, {elapsed:.2?}");
    ensure(loss < 0.05 && r == 1.0, || detail.clone())?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Retrieval metrics

/// 1-based rank of candidate `i`: higher scores first, ties by position.
fn oracle_rank(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

struct OracleMetrics {
    recall: [f64; 3],
    map: f64,
    mrr: f64,
    p1: f64,
}

fn oracle_retrieval(groups: &[RankedGroup]) -> OracleMetrics {
    let mut acc = OracleMetrics {
        recall: [0.0; 3],
        map: 0.0,
        mrr: 0.0,
        p1: 0.0,
    };
    let mut counted = 0.0;
    for g in groups {
        let scores: Vec<f64> = g.candidates.iter().map(|c| c.score).collect();
        let mut ranks: Vec<usize> = (0..scores.len())
            .filter(|&i| g.candidates[i].label == 1)
            .map(|i| oracle_rank(&scores, i))
            .collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort_unstable();
        counted += 1.0;
        for (slot, k) in [1, 2, 5].iter().enumerate() {
            acc.recall[slot] += ranks.iter().filter(|&&r| r <= *k).count() as f64 / ranks.len() as f64;
        }
        let ap: f64 = ranks
            .iter()
            .enumerate()
            .map(|(j, &r)| (j + 1) as f64 / r as f64)
            .sum::<f64>();
        acc.map += ap / ranks.len() as f64;
        acc.mrr += 1.0 / ranks[0] as f64;
        acc.p1 += if ranks[0] == 1 { 1.0 } else { 0.0 };
    }
    for r in &mut acc.recall {
        *r /= counted;
    }
    acc.map /= counted;
    acc.mrr /= counted;
    acc.p1 /= counted;
    acc
}

fn retrieval_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let groups: Vec<RankedGroup> = (0..1000)
        .map(|i| {
            // coarse scores force ties; a few groups carry no positive
            let cands = (0..10)
                .map(|_| Candidate {
                    score: f64::from(rng.gen_range(0..6)) / 4.0 - 0.5,
                    label: u8::from(i % 97 != 0 && rng.gen_bool(0.25)),
                })
                .collect();
            RankedGroup::new(i.to_string(), cands)
        })
        .collect();
    let report = rm::evaluate(&groups, &[1, 2, 5]).map_err(|e| e.to_string())?;
    let want = oracle_retrieval(&groups);
    let got: Vec<f64> = report.recall.iter().map(|(_, v)| *v).collect();
    ensure(got == want.recall, || {
        format!("recall {got:?} vs oracle {:?}", want.recall)
    })?;
    ensure(report.map == want.map, || {
        format!("MAP {} vs oracle {}", report.map, want.map)
    })?;
    ensure(report.mrr == want.mrr, || {
        format!("MRR {} vs oracle {}", report.mrr, want.mrr)
    })?;
    ensure(report.p_at_1 == want.p1, || {
        format!("P@1 {} vs oracle {}", report.p_at_1, want.p1)
    })?;

    let transformed: Vec<RankedGroup> = groups
        .iter()
        .map(|g| {
            let cands = g
                .candidates
                .iter()
                .map(|c| Candidate {
                    score: (3.0 * c.score).exp() + 7.0,
                    label: c.label,
                })
                .collect();
            RankedGroup::new(g.id.clone(), cands)
        })
        .collect();
    let again = rm::evaluate(&transformed, &[1, 2, 5]).map_err(|e| e.to_string())?;
    ensure(again == report, || "a monotone transform changed the metrics".into())?;
    Ok(format!(
        "1000 groups of 10 match the oracle (R@1 {:.4}, MAP {:.4}); monotone transform invariant",
        report.recall[0].1, report.map
    ))
}

// ---------------------------------------------------------------------------
// CLI reproducibility

const PRIMARY_OUTPUTS: [&str; 12] = [
    "corpus.jsonl",
    "ret.tsv",
    "seg.jsonl",
    "tt.jsonl",
    "seg_report.json",
    "m.ckpt",
    "m.ckpt.config",
    "m.ckpt.vocab",
    "m.ckpt.losses.tsv",
    "scores.tsv",
    "ret_report.json",
    "stdout.txt",
];

fn run_pipeline(dir: &Path, threads: usize) -> std::result::Result<(), String> {
    let steps: [&[&str]; 8] = [
        &["synth", "--output", "corpus.jsonl", "--count", "40"],
        &["synth", "--kind", "retrieval", "--output", "ret.tsv"],
        &["segment", "--input", "corpus.jsonl", "--output", "seg.jsonl"],
        &[
            "segment",
            "--input",
            "corpus.jsonl",
            "--output",
            "tt.jsonl",
            "--method",
            "texttiling",
        ],
        &[
            "eval-seg",
            "--input",
            "seg.jsonl",
            "--gold",
            "corpus.jsonl",
            "--output",
            "seg_report.json",
        ],
        &[
            "train", "--input", "ret.tsv", "--output", "m.ckpt", "--steps", "60", "--batch", "6",
        ],
        &[
            "score",
            "--input",
            "ret.tsv",
            "--checkpoint",
            "m.ckpt",
            "--output",
            "scores.tsv",
        ],
        &["eval-retrieval", "--input", "scores.tsv", "--output", "ret_report.json"],
    ];
    let mut stdout = Vec::new();
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_tseg"))
            .args(args)
            .args(["--seed", "13", "--threads", &threads.to_string()])
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
        })?;
        stdout.extend(out.stdout);
    }
    std::fs::write(dir.join("stdout.txt"), stdout).map_err(|e| e.to_string())
}

fn manifest_without(dir: &Path, name: &str, drop: &[&str]) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join(format!("{name}.manifest.json"))).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in drop {
        v.as_object_mut().unwrap().remove(*key);
    }
    v
}

fn cli_reproducibility() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [("a", 1), ("b", 1), ("c", 4)];
    for (name, threads) in runs {
        let dir = root.path().join(name);
        std::fs::create_dir(&dir).map_err(|e| e.to_string())?;
        run_pipeline(&dir, threads)?;
    }
    let read = |run: &str, file: &str| std::fs::read(root.path().join(run).join(file)).unwrap();
    for file in PRIMARY_OUTPUTS {
        let a = read("a", file);
        ensure(a == read("b", file), || format!("{file} differs between two runs"))?;
        ensure(a == read("c", file), || {
            format!("{file} differs between 1 and 4 threads")
        })?;
    }
    for name in PRIMARY_OUTPUTS
        .iter()
        .filter(|f| ["corpus.jsonl", "seg.jsonl", "m.ckpt", "scores.tsv"].contains(f))
    {
        let a = manifest_without(&root.path().join("a"), name, &["wall_clock_seconds"]);
        let b = manifest_without(&root.path().join("b"), name, &["wall_clock_seconds"]);
        ensure(a == b, || format!("{name} manifest differs between two runs"))?;
        let a = manifest_without(&root.path().join("a"), name, &["wall_clock_seconds", "threads"]);
        let c = manifest_without(&root.path().join("c"), name, &["wall_clock_seconds", "threads"]);
        ensure(a == c, || format!("{name} manifest differs between thread counts"))?;
    }
    Ok(format!(
        "6 subcommands, {} outputs byte-identical over 2 runs and threads 1/4",
        PRIMARY_OUTPUTS.len()
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("segmentation-metric oracle", seg_metric_oracle),
        ("perfect-prediction identities", perfect_predictions),
        ("synthetic topic recovery", synthetic_recovery),
        ("threshold monotonicity", threshold_monotonicity),
        ("gradient contract", gradient_contract),
        ("weighting identities", weighting_identities),
        ("overfit", overfit),
        ("variant matrix", variant_matrix),
        ("retrieval-metric oracle", retrieval_oracle),
        ("cli reproducibility", cli_reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
