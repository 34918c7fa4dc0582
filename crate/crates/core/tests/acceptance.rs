//! End-to-end acceptance run: one line per criterion, non-zero exit if any
//! fails. Criteria 2 to 5 share one trained pipeline.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regionblip::autodiff::Tape;
use regionblip::data::dataset::Split;
use regionblip::data::vocab::{COLORS, SHAPES};
use regionblip::encoders::{ImageEncoderConfig, PointEncoderConfig};
use regionblip::filter::{similarity_filter, CandidatePair, Decision, FilterConfig};
use regionblip::gradcheck::{grad_check, grad_check_params, GradCheckReport};
use regionblip::lm::LmConfig;
use regionblip::losses::itc_loss;
use regionblip::metrics::{cider_tokens, corpus_cider, CiderCorpus};
use regionblip::model::{probe_outputs, ForwardOptions, ModalBatch, ModelConfig, RegionBlip, BASE_MODALITY};
use regionblip::nn::LoraConfig;
use regionblip::params::Binder;
use regionblip::pipeline::{evaluate, extend, gen_data, run_pretrain, run_pretrain_base, run_pretrain_lm};
use regionblip::qformer::QFormerConfig;
use regionblip::tensor::Tensor;
use regionblip::trainer::checkpoint::{decode_checkpoint, encode_checkpoint};
use regionblip::trainer::{lr_at, pretrain_image_encoder, semi_hybrid_epoch, ModalityData, TrainConfig};
use regionblip::metrics::EvalReport;
use regionblip::{ModalityId, RegionSpec, Result};

const SEED: u64 = 1;
const TRAIN_SCENES: usize = 400;
const TEST_SCENES: usize = 40;
const LR: f64 = 1e-3;
const ADAPTER_LR: f64 = 3e-3;
const ENCODER_STEPS: usize = 1500;
const LM_STEPS: usize = 1000;
const BASE_STEPS: usize = 1000;
const REGION_STEPS: usize = 2000;
const ISOLATION_STEPS: usize = 500;

struct Outcome {
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn check(f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Outcome { pass, detail, elapsed: t.elapsed() }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_region_model() -> Result<RegionBlip> {
    let mut cfg = ModelConfig::default();
    let v = cfg.lm.vocab_size;
    cfg.qformer = QFormerConfig { num_queries: 2, layers: 1, d: 16, heads: 2, ffn_hidden: 32, d_enc: 16, vocab_size: v, max_text_len: 24 };
    cfg.lm = LmConfig { d: 16, layers: 1, heads: 2, ffn_hidden: 32, vocab_size: v, max_len: 48 };
    cfg.image = ImageEncoderConfig { image_size: 64, patch: 16, hidden: 16, d_enc: 16, heads: 2 };
    cfg.points = PointEncoderConfig { groups: 8, neighbors: 8, hidden: 16, d_enc: 16, heads: 2, center_features: false };
    cfg.lora = LoraConfig { rank: 2, alpha: 4.0, targets: vec!["q".into(), "v".into()] };
    cfg.pafe_hidden = 8;
    let mut m = RegionBlip::new(cfg, 3)?;
    m.store.freeze_all();
    m.register_modality(ModalityId::ImgRegion, 4)?;
    let names: Vec<String> = m.store.names_with_prefix("adapters.img_region").filter(|n| n.ends_with("lora_b")).cloned().collect();
    for (i, n) in names.iter().enumerate() {
        let shape = m.store.get(n)?.shape.clone();
        m.store.set_tensor(n, &randn(&shape, 100 + i as u64).map(|x| 0.3 * x))?;
    }
    Ok(m)
}

fn gradient_suite() -> Result<(bool, String)> {
    let m = tiny_region_model()?;
    let words = |s: &str| m.vocab.encode_words(s);
    let batch = ModalBatch {
        modality: ModalityId::ImgRegion,
        ids: vec![0, 1],
        feats: vec![randn(&[5, 16], 20), randn(&[5, 16], 21)],
        regions: Some(vec![RegionSpec::box2d(0.1, 0.2, 0.5, 0.6)?, RegionSpec::box2d(0.4, 0.1, 0.9, 0.7)?]),
        captions: vec![words("a red circle")?, words("a blue square")?],
    };
    let names: Vec<String> = m.store.names_with_prefix("adapters.img_region").cloned().collect();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut pass = true;
    let mut record = |term: &str, r: GradCheckReport| {
        pass &= r.passed();
        worst.push((term.to_string(), r.max_error()));
    };
    type Pick = for<'t> fn(&regionblip::model::BatchLosses<'t>) -> regionblip::autodiff::Var<'t>;
    let terms: [(&str, Pick); 6] = [
        ("itc", |l| l.itc),
        ("itm", |l| l.itm),
        ("itg", |l| l.itg),
        ("lm", |l| l.llm),
        ("reg", |l| l.reg.expect("region batch")),
        ("combined", |l| l.total),
    ];
    for (term, pick) in terms {
        let r = grad_check_params(
            &m.store,
            &names,
            |b: &Binder<'_, '_>| Ok(pick(&m.batch_losses(b, &batch, ForwardOptions::default())?)),
            1e-3,
            1e-3,
            Some(3),
        )?;
        record(term, r);
    }
    // the loss functions themselves, on free inputs
    let q = randn(&[2, 3, 4], 1);
    let t = randn(&[2, 4], 2);
    let r = grad_check(
        |tape, v| itc_loss(v[0], v[1], tape.constant(Tensor::new([1], vec![0.5])?)),
        &[("q".into(), q), ("t".into(), t)],
        1e-3,
        1e-3,
        None,
    )?;
    record("itc(raw)", r);
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok((pass, format!("max rel err: {}", summary.join(", "))))
}

fn schedule_pins() -> Result<(bool, String)> {
    let cfg = TrainConfig::default();
    let at_warmup = lr_at(200, &cfg);
    let at_end = lr_at(cfg.total_steps, &cfg);
    let w = cfg.warmup_steps;
    let jump = (lr_at(w - 1, &cfg) + cfg.peak_lr / w as f64 - lr_at(w, &cfg)).abs();
    let pass = at_warmup == 1e-4 && at_end == 1e-5 && jump <= 1e-12;
    Ok((pass, format!("lr(200)={at_warmup:e} lr({})={at_end:e} boundary gap {jump:.1e}", cfg.total_steps)))
}

fn itc_pins() -> Result<(bool, String)> {
    let tape = Tape::new();
    let one = tape.constant(Tensor::new([1], vec![1.0])?);
    let b = 6;
    let same = itc_loss(tape.constant(Tensor::full([b, 3, 5], 0.2)), tape.constant(Tensor::full([b, 5], 0.7)), one)?.item();
    let q = tape.constant(Tensor::new([2, 1, 2], vec![1.0, 0.0, 0.0, 1.0])?);
    let t = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0])?);
    let pin = itc_loss(q, t, one)?.item();
    let pass = (same - (b as f64).ln()).abs() < 1e-6 && (pin - 0.3133).abs() < 1e-4;
    Ok((pass, format!("identical batch {same:.9} vs ln {b} = {:.9}; B=2 identity {pin:.6}", (b as f64).ln())))
}

fn cider_oracle() -> Result<(bool, String)> {
    let long = vec![vec!["a red circle above a green square".to_string()], vec!["a blue square and a yellow circle".to_string()]];
    let proportional = corpus_cider(&[long[0][0].clone(), long[1][0].clone()], &long)?;
    let disjoint = corpus_cider(&["cube torus".into(), "sphere cone".into()], &long)?;
    let refs: Vec<Vec<Vec<String>>> = [
        vec!["a red circle above a blue square", "a red circle and a blue square"],
        vec!["a green triangle"],
        vec!["a blue square left of a green circle"],
    ]
    .iter()
    .map(|rs| rs.iter().map(|r| cider_tokens(r)).collect())
    .collect();
    let corpus = CiderCorpus::new(&refs);
    let cands = ["a red circle above a green square", "a green triangle", "a blue square"];
    let want = [5.165166740560582, 7.5, 1.846544232613501];
    let got: Vec<f64> = cands.iter().zip(&refs).map(|(c, r)| corpus.score(&cider_tokens(c), r)).collect();
    let hand_ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-6);
    let pass = (proportional - 10.0).abs() < 1e-6 && disjoint.abs() < 1e-6 && hand_ok;
    Ok((pass, format!("proportional {proportional:.6}, disjoint {disjoint:.6}, three-image {got:.6?}")))
}

fn semi_hybrid_accounting() -> Result<(bool, String)> {
    use ModalityId::*;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    for _ in 0..300 {
        let mut order = vec![ImgRegion, PcText, PcRegion, ImgText];
        order.shuffle(&mut rng);
        order.truncate(rng.gen_range(1..=4));
        let mut data = BTreeMap::new();
        for (k, &m) in order.iter().enumerate() {
            let n = rng.gen_range(1..60);
            data.insert(m, (0..n).map(|i| 10_000 * k as u64 + i).collect::<Vec<u64>>());
        }
        let batch = rng.gen_range(1..12);
        let plan = semi_hybrid_epoch(&data, &order, batch, rng.gen(), rng.gen_range(0..5))?;
        let mut got: Vec<u64> = plan.iter().flat_map(|b| b.ids.iter().copied()).collect();
        let mut want: Vec<u64> = data.values().flatten().copied().collect();
        got.sort_unstable();
        want.sort_unstable();
        let mut segs: Vec<ModalityId> = plan.iter().map(|b| b.modality).collect();
        segs.dedup();
        if got != want || segs != order {
            return Ok((false, format!("mismatch for order {order:?}")));
        }
        checked += 1;
    }
    Ok((true, format!("{checked} random epochs: ids are the dataset multiset, segments follow the configured order")))
}

fn filter_monotonicity() -> Result<(bool, String)> {
    let at = |tau: f64| FilterConfig { tau, ..Default::default() };
    let pair = |img: &str, reg: &str| -> Result<CandidatePair> {
        Ok(CandidatePair { image_id: 0, region: RegionSpec::box2d(0.0, 0.0, 0.5, 0.5)?, regional_caption: reg.into(), image_caption: img.into() })
    };
    let same = pair("a red circle above a blue square", "a red circle")?;
    let near = pair("a red circle", "a red square")?;
    let pins = similarity_filter(&same, &at(0.9)) == Decision::Retain
        && similarity_filter(&near, &at(0.9)) == Decision::FilterOut
        && similarity_filter(&near, &at(0.5)) == Decision::Retain;

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let chunk = |rng: &mut ChaCha8Rng| format!("a {} {}", COLORS.choose(rng).unwrap(), SHAPES.choose(rng).unwrap());
    let pairs: Vec<CandidatePair> = (0..1000)
        .map(|_| {
            let n = rng.gen_range(1..4);
            let scene: Vec<String> = (0..n).map(|_| chunk(&mut rng)).collect();
            pair(&scene.join(" and "), &chunk(&mut rng))
        })
        .collect::<Result<_>>()?;
    let mut counts = Vec::new();
    let mut monotone = true;
    let mut prev: Option<Vec<bool>> = None;
    for k in 1..=9 {
        let cfg = at(k as f64 / 10.0);
        let kept: Vec<bool> = pairs.iter().map(|p| similarity_filter(p, &cfg) == Decision::Retain).collect();
        if let Some(p) = &prev {
            monotone &= kept.iter().zip(p).all(|(&now, &before)| !now || before);
        }
        counts.push(kept.iter().filter(|&&k| k).count());
        prev = Some(kept);
    }
    Ok((pins && monotone, format!("pins {}, retained over tau 0.1..0.9: {counts:?}", if pins { "ok" } else { "wrong" })))
}

/// Everything criteria 2 to 5 need from one training pipeline.
struct PipelineResults {
    isolation: (bool, String),
    preservation: (bool, String),
    pafe: (bool, String),
    regression: (bool, String),
    timings: String,
}

fn region_summary(r: &EvalReport) -> String {
    format!(
        "CIDEr {:.3}, L1 {:.4}, object acc {:.3}",
        r.cider,
        r.region_l1.unwrap_or(f64::NAN),
        r.object_accuracy.unwrap_or(f64::NAN)
    )
}

fn run_pipeline(root: &Path) -> Result<PipelineResults> {
    let mut timings = Vec::new();
    let mut t = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<String>| {
        timings.push(format!("{name} {:.0}s", t.elapsed().as_secs_f64()));
        t = Instant::now();
    };
    gen_data(root, TRAIN_SCENES, TEST_SCENES, SEED)?;
    let cfg_at = |lr: f64, steps: usize, batch: usize| TrainConfig {
        total_steps: steps,
        warmup_steps: 50,
        peak_lr: lr,
        min_lr: lr / 10.0,
        batch_size: batch,
        seed: SEED,
        ..Default::default()
    };
    let train_cfg = |steps, batch| cfg_at(LR, steps, batch);
    let mut base = RegionBlip::new(ModelConfig::default(), SEED)?;
    pretrain_image_encoder(&mut base, &cfg_at(ADAPTER_LR, ENCODER_STEPS, 8), |_| {})?;
    lap("encoder", &mut timings);
    run_pretrain_lm(&mut base, &train_cfg(LM_STEPS, 16), 500, |_| {})?;
    run_pretrain_base(&mut base, root, &train_cfg(BASE_STEPS, 8), |_| {})?;
    lap("base", &mut timings);
    let base_image = encode_checkpoint(&base.cfg, &base.store)?;
    let (_, base_store) = decode_checkpoint(&base_image)?;
    let reload = || -> Result<RegionBlip> {
        let (cfg, store) = decode_checkpoint(&base_image)?;
        RegionBlip::from_store(cfg, store)
    };
    let eval_base = |m: &RegionBlip| evaluate(m, root, BASE_MODALITY, Split::Test, 0, true, None);

    // capability preservation
    let before = eval_base(&base)?;
    let mut with = reload()?;
    extend(&mut with, ModalityId::ImgRegion, SEED)?;
    run_pretrain(&mut with, root, &TrainConfig { modality_order: vec![ModalityId::ImgRegion], ..train_cfg(0, 8) }, |_| {})?;
    let after_extend = eval_base(&with)?;

    // the ablation pair
    let region_cfg = |use_pafe| TrainConfig { modality_order: vec![ModalityId::ImgRegion], use_pafe, lambda: 1.0, ..cfg_at(ADAPTER_LR, REGION_STEPS, 8) };
    run_pretrain(&mut with, root, &region_cfg(true), |_| {})?;
    lap("region+pafe", &mut timings);
    let mut without = reload()?;
    extend(&mut without, ModalityId::ImgRegion, SEED)?;
    run_pretrain(&mut without, root, &region_cfg(false), |_| {})?;
    lap("region-pafe", &mut timings);
    let after_training = eval_base(&with)?;
    let r_with = evaluate(&with, root, ModalityId::ImgRegion, Split::Test, 0, true, None)?;
    let r_without = evaluate(&without, root, ModalityId::ImgRegion, Split::Test, 0, false, None)?;

    let d0 = after_extend.cider - before.cider;
    let d1 = after_training.cider - before.cider;
    let preservation = (
        d0 == 0.0 && after_extend == before && d1.abs() <= 0.1,
        format!("img_text CIDEr {:.4}; diff after extend {d0:e}, after {REGION_STEPS} adapter steps {d1:e}", before.cider),
    );

    let (acc_w, acc_wo) = (r_with.object_accuracy.unwrap_or(0.0), r_without.object_accuracy.unwrap_or(1.0));
    let l1_w = r_with.region_l1.unwrap_or(f64::INFINITY);
    let pafe = (
        r_with.cider - r_without.cider >= 1.0 && l1_w < 0.1 && acc_w >= 0.8 && acc_wo <= 0.6,
        format!("with PaFE: {}; without: {}", region_summary(&r_with), region_summary(&r_without)),
    );
    let regression = (l1_w < 0.05, format!("held-out mean |p - p*| = {l1_w:.4} over {} regions (lambda 1.0)", r_with.n_samples));

    // isolation: a second modality trained on top of the extended model
    let mut model = with;
    extend(&mut model, ModalityId::PcText, SEED)?;
    let probe_feats = |m: &RegionBlip, id: ModalityId| -> Result<(Vec<Tensor>, Option<Vec<RegionSpec>>)> {
        let d = ModalityData::load(root, id, Split::Test, m)?;
        let feats = (0..4).map(|i| d.features(m, i, None)).collect::<Result<Vec<_>>>()?;
        let regions = id.is_region().then(|| d.samples[..4].iter().map(|s| s.region.clone().expect("region sample")).collect());
        Ok((feats, regions))
    };
    let others = [ModalityId::ImgText, ModalityId::ImgRegion];
    let inputs: Vec<_> = others.iter().map(|&id| probe_feats(&model, id)).collect::<Result<_>>()?;
    let probes = |m: &RegionBlip| -> Result<Vec<Vec<f64>>> {
        others.iter().zip(&inputs).map(|(&id, (f, r))| probe_outputs(m, id, f, r.as_deref())).collect()
    };
    let probes_before = probes(&model)?;
    let sums_before: Vec<String> = others.iter().map(|&id| model.adapter_set(id).map(|s| s.checksum(&model.store))).collect::<Result<_>>()?;
    let trained_before = model.adapter_set(ModalityId::PcText)?.checksum(&model.store);
    run_pretrain(&mut model, root, &TrainConfig { modality_order: vec![ModalityId::PcText], ..cfg_at(ADAPTER_LR, ISOLATION_STEPS, 8) }, |_| {})?;
    lap("isolation", &mut timings);
    let base_identical = base_store.iter().filter(|(n, _)| !n.starts_with("adapters.")).all(|(n, p)| {
        model.store.get(n).map(|q| q.frozen && p.data.iter().zip(&q.data).all(|(a, b)| a.to_bits() == b.to_bits())).unwrap_or(false)
    });
    let sums_after: Vec<String> = others.iter().map(|&id| model.adapter_set(id).map(|s| s.checksum(&model.store))).collect::<Result<_>>()?;
    let probes_same = probes(&model)? == probes_before;
    let trained_moved = model.adapter_set(ModalityId::PcText)?.checksum(&model.store) != trained_before;
    let isolation = (
        base_identical && sums_after == sums_before && probes_same && trained_moved,
        format!(
            "{ISOLATION_STEPS} pc_text steps: base bit-identical {base_identical}, other adapters unchanged {}, probes unchanged {probes_same}",
            sums_after == sums_before
        ),
    );
    Ok(PipelineResults { isolation, preservation, pafe, regression, timings: timings.join(", ") })
}

fn main() {
    let names = [
        "gradient suite",
        "freeze/isolation",
        "incremental preservation",
        "PaFE ablation direction",
        "regression convergence",
        "schedule pins",
        "ITC analytic pins",
        "CIDEr oracle",
        "semi-hybrid accounting",
        "filter monotonicity and tau pin",
    ];
    let mut out: BTreeMap<usize, Outcome> = BTreeMap::new();
    out.insert(1, check(gradient_suite));
    if out[&1].elapsed > Duration::from_secs(120) {
        let o = out.get_mut(&1).unwrap();
        o.pass = false;
        o.detail += " (over the 2 min budget)";
    }
    out.insert(6, check(schedule_pins));
    out.insert(7, check(itc_pins));
    out.insert(8, check(cider_oracle));
    out.insert(9, check(semi_hybrid_accounting));
    out.insert(10, check(filter_monotonicity));

    let dir = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    match run_pipeline(dir.path()) {
        Ok(p) => {
            let elapsed = t.elapsed();
            eprintln!("pipeline stages: {}", p.timings);
            for (k, (pass, detail)) in [(2, p.isolation), (3, p.preservation), (4, p.pafe), (5, p.regression)] {
                out.insert(k, Outcome { pass, detail, elapsed });
            }
        }
        Err(e) => {
            for k in 2..=5 {
                out.insert(k, Outcome { pass: false, detail: format!("pipeline error: {e}"), elapsed: t.elapsed() });
            }
        }
    }

    let mut failed = 0;
    for (k, o) in &out {
        failed += usize::from(!o.pass);
        println!(
            "criterion {k:>2} {:<32} {}  [{:.1}s] {}",
            names[k - 1],
            if o.pass { "PASS" } else { "FAIL" },
            o.elapsed.as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} of {} criteria pass", out.len() - failed, out.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
