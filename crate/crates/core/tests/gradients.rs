use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regionblip::autodiff::{Tape, Var};
use regionblip::encoders::{ImageEncoderConfig, PointEncoderConfig};
use regionblip::gradcheck::{grad_check, grad_check_params};
use regionblip::lm::{lm_loss, LmConfig, LmMode, PromptedSequence};
use regionblip::losses::{combine_vars, itc_loss, itm_loss, reg_loss, token_ce};
use regionblip::model::{ForwardOptions, ModalBatch, ModelConfig, RegionBlip};
use regionblip::nn::LoraConfig;
use regionblip::params::Binder;
use regionblip::qformer::QFormerConfig;
use regionblip::tensor::Tensor;
use regionblip::{ModalityId, RegionSpec};

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect()
}

fn assert_passes(name: &str, r: regionblip::gradcheck::GradCheckReport) {
    assert!(r.passed(), "{name}: {:?}", r.per_param);
}

#[test]
fn itc_gradient() {
    let params = named(vec![randn(&[2, 3, 4], 1), randn(&[2, 4], 2), Tensor::new([1], vec![0.5]).unwrap()]);
    let r = grad_check(|_, v| itc_loss(v[0], v[1], v[2]), &params, H, TOL, None).unwrap();
    assert_passes("itc", r);
}

#[test]
fn itm_gradient() {
    let params = named(vec![randn(&[2, 2], 3)]);
    let r = grad_check(|_, v| itm_loss(v[0], &[1, 0]), &params, H, TOL, None).unwrap();
    assert_passes("itm", r);
}

#[test]
fn itg_token_gradient() {
    let params = named(vec![randn(&[6, 5], 4)]);
    let r = grad_check(|_, v| token_ce(v[0], &[0, 1, 3, 4], &[2, 4, 1, 0]), &params, H, TOL, None).unwrap();
    assert_passes("itg", r);
}

#[test]
fn reg_gradient() {
    let target = randn(&[2, 4], 5);
    let params = named(vec![randn(&[2, 4], 6)]);
    let r = grad_check(|t, v| reg_loss(v[0], t.constant(target.clone())), &params, H, TOL, None).unwrap();
    assert_passes("reg", r);
}

#[test]
fn combined_gradient() {
    let target = randn(&[2, 4], 7);
    let params = named(vec![randn(&[2, 3, 4], 8), randn(&[2, 4], 9), randn(&[2, 2], 10), randn(&[6, 5], 11), randn(&[2, 4], 12)]);
    let r = grad_check(
        |t, v| {
            let temp = t.constant(Tensor::new([1], vec![0.3]).unwrap());
            let itc = itc_loss(v[0], v[1], temp)?;
            let itm = itm_loss(v[2], &[1, 0])?;
            let itg = token_ce(v[3], &[0, 1, 2], &[1, 2, 3])?;
            let llm = token_ce(v[3], &[3, 4, 5], &[0, 4, 2])?;
            let reg = reg_loss(v[4], t.constant(target.clone()))?;
            combine_vars(itc, itg, itm, llm, Some(reg), 1.0)
        },
        &params,
        H,
        TOL,
        None,
    )
    .unwrap();
    assert_passes("combined", r);
}

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    let v = cfg.lm.vocab_size;
    cfg.qformer = QFormerConfig { num_queries: 2, layers: 1, d: 16, heads: 2, ffn_hidden: 32, d_enc: 16, vocab_size: v, max_text_len: 24 };
    cfg.lm = LmConfig { d: 16, layers: 1, heads: 2, ffn_hidden: 32, vocab_size: v, max_len: 48 };
    cfg.image = ImageEncoderConfig { image_size: 64, patch: 16, hidden: 16, d_enc: 16, heads: 2 };
    cfg.points = PointEncoderConfig { groups: 8, neighbors: 8, hidden: 16, d_enc: 16, heads: 2, center_features: false };
    cfg.lora = LoraConfig { rank: 2, alpha: 4.0, targets: vec!["q".into(), "v".into()] };
    cfg.pafe_hidden = 8;
    cfg
}

fn tiny_region_model() -> RegionBlip {
    let mut m = RegionBlip::new(tiny_config(), 3).unwrap();
    m.store.freeze_all();
    m.register_modality(ModalityId::ImgRegion, 4).unwrap();
    let names: Vec<String> = m.store.names_with_prefix("adapters.img_region").filter(|n| n.ends_with("lora_b")).cloned().collect();
    for (i, n) in names.iter().enumerate() {
        let shape = m.store.get(n).unwrap().shape.clone();
        let t = randn(&shape, 100 + i as u64);
        m.store.set_tensor(n, &t.map(|x| 0.3 * x)).unwrap();
    }
    m
}

fn two_sample_batch(m: &RegionBlip) -> ModalBatch {
    let words = |s: &str| m.vocab.encode_words(s).unwrap();
    ModalBatch {
        modality: ModalityId::ImgRegion,
        ids: vec![0, 1],
        feats: vec![randn(&[5, 16], 20), randn(&[5, 16], 21)],
        regions: Some(vec![RegionSpec::box2d(0.1, 0.2, 0.5, 0.6).unwrap(), RegionSpec::box2d(0.4, 0.1, 0.9, 0.7).unwrap()]),
        captions: vec![words("a red circle"), words("a blue square")],
    }
}

#[test]
fn model_combined_gradient_over_adapters() {
    let m = tiny_region_model();
    let batch = two_sample_batch(&m);
    let names: Vec<String> = m.store.names_with_prefix("adapters.img_region").cloned().collect();
    assert!(names.len() > 10);
    let r = grad_check_params(
        &m.store,
        &names,
        |b: &Binder<'_, '_>| Ok(m.batch_losses(b, &batch, ForwardOptions::default())?.total),
        H,
        TOL,
        Some(3),
    )
    .unwrap();
    assert_passes("model combined", r);
}

#[test]
fn lm_loss_gradient() {
    let m = tiny_region_model();
    let names: Vec<String> = vec!["lm.tok_emb.table".into(), "lm.ln_final.gain".into()];
    for n in &names {
        assert!(m.store.contains(n), "{n}");
    }
    let soft = randn(&[2, 2, 16], 30);
    let seqs = vec![PromptedSequence::new(vec![4], vec![5, 6]), PromptedSequence::new(vec![4], vec![7, 8, 9])];
    for mode in [LmMode::Prefix, LmMode::Causal] {
        let r = grad_check_params(
            &m.store,
            &names,
            |b: &Binder<'_, '_>| lm_loss(&m.lm, b, b.tape().constant(soft.clone()), &seqs, mode, None),
            H,
            TOL,
            Some(12),
        )
        .unwrap();
        assert_passes("lm", r);
    }
}

fn op_check(shape: &[usize], seed: u64, f: impl for<'t> Fn(&'t Tape, Var<'t>) -> regionblip::Result<Var<'t>>) -> Result<(), TestCaseError> {
    let x = randn(shape, seed);
    let r = grad_check(|t, v| f(t, v[0]), &[("x".into(), x)], H, TOL, None).unwrap();
    prop_assert!(r.passed(), "{:?}", r.per_param);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops(seed in 0u64..10_000) {
        op_check(&[3, 4], seed, |_, x| Ok(x.exp().mul(x.sigmoid())?.sum_all()))?;
        op_check(&[3, 4], seed, |_, x| Ok(x.tanh().add(x.gelu())?.pow(2.0).sum_all()))?;
        op_check(&[3, 4], seed, |_, x| Ok(x.mul(x)?.add_scalar(1.0).log().sqrt().sum_all()))?;
        op_check(&[3, 4], seed, |_, x| Ok(x.div(x.mul(x)?.add_scalar(2.0))?.sum_all()))?;
    }

    #[test]
    fn reductions_and_layout(seed in 0u64..10_000) {
        op_check(&[2, 3, 4], seed, |_, x| Ok(x.softmax(2)?.mul(x)?.sum_all()))?;
        op_check(&[2, 3, 4], seed, |_, x| Ok(x.log_softmax(1)?.slice(1, 0, 1)?.sum_all()))?;
        op_check(&[2, 3, 4], seed, |_, x| Ok(x.mean(1, true)?.mul(x.sum(1, true)?)?.sum_all()))?;
        op_check(&[2, 3, 4], seed, |_, x| Ok(x.permute(&[2, 0, 1])?.reshape([4, 6])?.matmul(x.reshape([6, 4])?)?.sum_all()))?;
        op_check(&[3, 4], seed, |_, x| Ok(x.l2_normalize(1e-12)?.mul(x)?.sum_all()))?;
        op_check(&[3, 4], seed, |_, x| Ok(x.gather_rows(&[2, 0, 2])?.pick_last(&[1, 3, 0])?.pow(2.0).sum_all()))?;
        op_check(&[3, 4], seed, |_, x| Ok(Var::concat(&[x, x.scale(2.0)], 0)?.matmul_t(x)?.sum_all()))?;
    }

    #[test]
    fn layer_norm_op(seed in 0u64..10_000) {
        let gain = randn(&[4], seed + 1);
        let bias = randn(&[4], seed + 2);
        op_check(&[3, 4], seed, |t, x| {
            let y = x.layer_norm(t.constant(gain.clone()), t.constant(bias.clone()), 1e-5)?;
            Ok(y.mul(y)?.mul(x)?.sum_all())
        })?;
    }
}
