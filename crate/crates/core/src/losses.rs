//! Pre-training objectives and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

/// Cross-entropy of each row of `logits` (`[N, C]`) against soft target
/// rows (`[N, C]`, each summing to 1), averaged over rows.
fn soft_ce<'t>(logits: Var<'t>, targets: Var<'t>) -> Result<Var<'t>> {
    let n = logits.shape()[0] as f64;
    Ok(logits.log_softmax(1)?.mul(targets)?.sum_all().scale(-1.0 / n))
}

/// Symmetric InfoNCE over a `[B, B]` similarity matrix whose diagonal holds
/// the matched pairs.
pub fn infonce<'t>(sim: Var<'t>) -> Result<Var<'t>> {
    let b = sim.shape()[0];
    let eye = sim.tape().constant(crate::tensor::Tensor::new([b, b], (0..b * b).map(|i| f64::from(i % (b + 1) == 0)).collect())?);
    infonce_with_targets(sim, eye)
}

/// InfoNCE with an explicit positive pattern: row `i` of `positives`
/// (`[B, B]`, 0/1) marks every text that counts as a match for item `i`.
/// Each direction spreads its target mass evenly over the positives.
pub fn infonce_with_targets<'t>(sim: Var<'t>, positives: Var<'t>) -> Result<Var<'t>> {
    let s = sim.shape();
    if s.len() != 2 || s[0] != s[1] || positives.shape() != s {
        return Err(Error::Shape(format!("similarity {s:?} with positives {:?}", positives.shape())));
    }
    let row_norm = |p: Var<'t>| -> Result<Var<'t>> { p.div(p.sum(1, true)?) };
    let i2t = soft_ce(sim, row_norm(positives)?)?;
    let t2i = soft_ce(sim.transpose(0, 1)?, row_norm(positives.transpose(0, 1)?)?)?;
    Ok(i2t.add(t2i)?.scale(0.5))
}

/// `[B, B]` similarities: `sim[i][j] = max_k <q_ik, t_j> / temperature`
/// with both sides L2-normalized.
pub fn itc_similarity<'t>(query_feats: Var<'t>, text_feats: Var<'t>, temperature: Var<'t>) -> Result<Var<'t>> {
    let (qs, ts) = (query_feats.shape(), text_feats.shape());
    if qs.len() != 3 || ts.len() != 2 || qs[0] != ts[0] || qs[2] != ts[1] {
        return Err(Error::Shape(format!("query feats {qs:?} vs text feats {ts:?}")));
    }
    let (b, nq, d) = (qs[0], qs[1], qs[2]);
    if b < 2 {
        return Err(Error::Invalid(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    let q = query_feats.l2_normalize(NORM_EPS)?.reshape([b * nq, d])?;
    let t = text_feats.l2_normalize(NORM_EPS)?;
    let sim = q.matmul_t(t)?.reshape([b, nq, b])?.max(1, false)?;
    sim.div(temperature.reshape([1, 1])?)
}

/// Image(or point)-text contrastive loss.
pub fn itc_loss<'t>(query_feats: Var<'t>, text_feats: Var<'t>, temperature: Var<'t>) -> Result<Var<'t>> {
    infonce(itc_similarity(query_feats, text_feats, temperature)?)
}

/// Mean cross-entropy of 2-way match logits `[N, 2]` against 0/1 labels.
pub fn itm_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!("match logits {s:?} for {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Invalid("match labels must be 0 or 1".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Invalid("matching batch holds a single class".into()));
    }
    Ok(logits.log_softmax(1)?.pick_last(labels)?.mean_all().neg())
}

/// Mean next-token cross-entropy over labelled rows of `logits` (`[N, V]`).
pub fn token_ce<'t>(logits: Var<'t>, rows: &[usize], labels: &[usize]) -> Result<Var<'t>> {
    if rows.is_empty() {
        return Err(Error::Invalid("no text tokens to score".into()));
    }
    if rows.len() != labels.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", rows.len(), labels.len())));
    }
    Ok(logits.gather_rows(rows)?.log_softmax(1)?.pick_last(labels)?.mean_all().neg())
}

/// Mean absolute error between predicted and reference coordinates.
pub fn reg_loss<'t>(p: Var<'t>, p_star: Var<'t>) -> Result<Var<'t>> {
    if p.shape() != p_star.shape() {
        return Err(Error::Shape(format!("predicted box {:?} vs target {:?}", p.shape(), p_star.shape())));
    }
    let dim = *p.shape().last().unwrap_or(&0);
    if dim != 4 && dim != 6 {
        return Err(Error::Shape(format!("box coordinates must be 4 or 6 wide, got {dim}")));
    }
    Ok(p.sub(p_star)?.abs().mean_all())
}

/// Per-term loss values of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub itc: f64,
    pub itg: f64,
    pub itm: f64,
    pub llm: f64,
    pub reg: Option<f64>,
    pub lambda: f64,
    pub total: f64,
}

/// The component values fed to [`combined_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub itc: f64,
    pub itg: f64,
    pub itm: f64,
    pub llm: f64,
    pub reg: Option<f64>,
}

/// `total = itc + itg + itm + llm + lambda * reg`.
pub fn combined_loss(parts: LossParts, lambda: f64) -> Result<LossReport> {
    let named = [("itc", Some(parts.itc)), ("itg", Some(parts.itg)), ("itm", Some(parts.itm)), ("llm", Some(parts.llm)), ("reg", parts.reg)];
    for (name, v) in named {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss is {v}")));
            }
        }
    }
    if !lambda.is_finite() {
        return Err(Error::NonFinite(format!("lambda is {lambda}")));
    }
    let total = parts.itc + parts.itg + parts.itm + parts.llm + lambda * parts.reg.unwrap_or(0.0);
    Ok(LossReport { itc: parts.itc, itg: parts.itg, itm: parts.itm, llm: parts.llm, reg: parts.reg, lambda, total })
}

/// Tape-side counterpart of [`combined_loss`].
pub fn combine_vars<'t>(itc: Var<'t>, itg: Var<'t>, itm: Var<'t>, llm: Var<'t>, reg: Option<Var<'t>>, lambda: f64) -> Result<Var<'t>> {
    let mut total = itc.add(itg)?.add(itm)?.add(llm)?;
    if let Some(r) = reg {
        total = total.add(r.scale(lambda))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn identity_similarity_pin() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new([2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let t = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let temp = tape.constant(Tensor::new([1], vec![1.0]).unwrap());
        let l = itc_loss(q, t, temp).unwrap().item();
        let e = std::f64::consts::E;
        assert!((l - -(e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_embeddings_give_log_batch() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::full([5, 3, 4], 0.3));
        let t = tape.constant(Tensor::full([5, 4], -0.7));
        let temp = tape.constant(Tensor::new([1], vec![0.07]).unwrap());
        assert!((itc_loss(q, t, temp).unwrap().item() - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn itc_rejects_singleton_batch() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::full([1, 3, 4], 0.3));
        let t = tape.constant(Tensor::full([1, 4], 0.3));
        let temp = tape.constant(Tensor::new([1], vec![1.0]).unwrap());
        assert!(itc_loss(q, t, temp).is_err());
    }

    #[test]
    fn itm_pins() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros([4, 2]));
        assert!((itm_loss(uniform, &[1, 0, 1, 0]).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        let sep = tape.constant(Tensor::new([2, 2], vec![-10.0, 10.0, 10.0, -10.0]).unwrap());
        assert!(itm_loss(sep, &[1, 0]).unwrap().item() < 1e-4);
        assert!(itm_loss(uniform, &[1, 1, 1, 1]).is_err());
    }

    #[test]
    fn reg_pins() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full([1, 4], 0.5));
        let s = tape.constant(Tensor::new([1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        assert_eq!(reg_loss(p, s).unwrap().item(), 0.5);
        assert_eq!(reg_loss(p, p).unwrap().item(), 0.0);
        assert!(reg_loss(p, tape.constant(Tensor::zeros([1, 6]))).is_err());
    }

    #[test]
    fn combined_pins() {
        let all = LossParts { itc: 1.0, itg: 1.0, itm: 1.0, llm: 1.0, reg: Some(1.0) };
        assert_eq!(combined_loss(all, 1.0).unwrap().total, 5.0);
        let r = combined_loss(LossParts { reg: Some(0.25), ..Default::default() }, 2.0).unwrap();
        assert_eq!(r.total, 0.5);
        let a = combined_loss(LossParts { reg: Some(3.0), ..all }, 0.0).unwrap();
        assert_eq!(a.total, 4.0);
        match combined_loss(LossParts { itg: f64::NAN, ..all }, 1.0) {
            Err(Error::NonFinite(m)) => assert!(m.contains("itg")),
            other => panic!("{other:?}"),
        }
    }
}
