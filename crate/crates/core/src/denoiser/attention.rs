use alloc::format;
use alloc::vec::Vec;

use super::{AttentionMaskSpec, Weights};
use crate::tensor::{linear, masked_softmax_in_place, matmul, resize_nearest};
use crate::textcond::PromptEmbedding;
use crate::{Error, Result, Tensor};

pub struct AttentionOutput {
    /// `HW × C` after the output projection.
    pub output: Tensor,
    /// `HW × C` head-concatenated context before the output projection.
    pub context: Tensor,
    /// One `HW × L` weight matrix per head.
    pub probs: Vec<Tensor>,
}

fn head_slice(x: &Tensor, head: usize, width: usize) -> Tensor {
    let (rows, cols) = x.dims2().expect("matrix");
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * cols + head * width..r * cols + (head + 1) * width]);
    }
    Tensor::new(&[rows, width], out).expect("shape")
}

/// Multi-head scaled dot-product attention with optional exclusion.
///
/// `q` is `N × D`, `k` and `v` are `L × D`; `D` is split evenly across
/// `heads`. `allowed(i, j)` says whether query `i` may attend to key `j`.
/// Returns the concatenated context (`N × D`) and per-head weights.
pub fn attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    allowed: Option<&dyn Fn(usize, usize) -> bool>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (n, d) = q.dims2()?;
    let (l, dk) = k.dims2()?;
    if dk != d || v.shape() != k.shape() {
        return Err(Error::Dimension(format!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!("{d} features cannot split into {heads} heads")));
    }
    let hd = d / heads;
    let scale = 1.0 / libm::sqrtf(hd as f32);
    let mut context = alloc::vec![0.0f32; n * d];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, h, hd);
        let kh = head_slice(k, h, hd);
        let vh = head_slice(v, h, hd);
        let mut scores = matmul(&qh, &kh.transpose()?)?;
        for (i, row) in scores.data_mut().chunks_exact_mut(l).enumerate() {
            for s in row.iter_mut() {
                *s *= scale;
            }
            match allowed {
                Some(f) => masked_softmax_in_place(row, |j| f(i, j))?,
                None => masked_softmax_in_place(row, |_| true)?,
            }
        }
        let ctx = matmul(&scores, &vh)?;
        for r in 0..n {
            context[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&ctx.data()[r * hd..(r + 1) * hd]);
        }
        probs.push(scores);
    }
    Ok((Tensor::new(&[n, d], context)?, probs))
}

/// Cross-attention of `HW × C` image tokens over the prompt, with the
/// optional per-token spatial masks resized to this block's `h × w`.
pub fn masked_cross_attention(
    x_feat: &Tensor,
    (h, w): (usize, usize),
    cond: &PromptEmbedding,
    spec: Option<&AttentionMaskSpec>,
    weights: &Weights,
    block: usize,
    heads: usize,
) -> Result<AttentionOutput> {
    let (n, _) = x_feat.dims2()?;
    if n != h * w {
        return Err(Error::Dimension(format!("{n} tokens for a {h}x{w} block")));
    }
    let p = |name: &str| weights.get(&format!("block{block}.attn.{name}"));
    let q = matmul(x_feat, p("q.weight")?)?;
    let k = matmul(&cond.embeddings, p("k.weight")?)?;
    let v = matmul(&cond.embeddings, p("v.weight")?)?;
    let seq_len = cond.embeddings.dims2()?.0;

    // Per token: None = unrestricted, Some(mask at h×w).
    let mut resized: Vec<Option<Tensor>> = alloc::vec![None; seq_len];
    if let Some(spec) = spec {
        for (&tok, m) in spec.masks() {
            if tok >= seq_len {
                return Err(Error::Input(format!("masked token {tok} outside sequence of {seq_len}")));
            }
            resized[tok] = Some(resize_nearest(m, h, w)?);
        }
    }
    let masked = resized.iter().any(Option::is_some);
    let allowed = |i: usize, j: usize| resized[j].as_ref().is_none_or(|m| m.data()[i] != 0.0);
    let (context, probs) = attention_core(&q, &k, &v, heads, masked.then_some(&allowed as &dyn Fn(usize, usize) -> bool))?;
    let output = linear(&context, p("out.weight")?, Some(p("out.bias")?))?;
    Ok(AttentionOutput { output, context, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ln2_scores_weight_values_two_to_one() {
        // One head of width 1: q·k / √1 gives scores [ln 2, 0].
        let q = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let k = Tensor::new(&[2, 1], vec![core::f32::consts::LN_2, 0.0]).unwrap();
        let v = Tensor::new(&[2, 1], vec![3.0, -6.0]).unwrap();
        let (ctx, probs) = attention_core(&q, &k, &v, 1, None).unwrap();
        assert!((probs[0].data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((ctx.data()[0] - (2.0 / 3.0 * 3.0 - 1.0 / 3.0 * 6.0)).abs() < 1e-6);
    }

    #[test]
    fn single_survivor_copies_value_row() {
        let q = Tensor::from_fn(&[3, 4], |i| i as f32 * 0.1);
        let k = Tensor::from_fn(&[5, 4], |i| (i as f32).sin());
        let v = Tensor::from_fn(&[5, 4], |i| i as f32 * 1.25 - 3.0);
        let survivor = 2;
        let only = |_i: usize, j: usize| j == survivor;
        let (ctx, _) = attention_core(&q, &k, &v, 2, Some(&only)).unwrap();
        for r in 0..3 {
            assert_eq!(&ctx.data()[r * 4..r * 4 + 4], &v.data()[survivor * 4..survivor * 4 + 4]);
        }
    }

    #[test]
    fn rejects_uneven_heads() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[2, 3]);
        assert!(attention_core(&q, &k, &k, 2, None).is_err());
    }
}
