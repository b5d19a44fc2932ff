//! Alignment scores, normalized attention weights and the language context
//! vector. The query at pixel step j is the decoder state from step j-1
//! (the zero state for the first pixel).

use crate::encoder::{AnnotationVars, Annotations};
use crate::error::{Error, Result};
use crate::params::{AlignParams, AttentionKind, ModelParams, ParamVars};
use crate::tape::{Tape, Var};

/// Scores, weights and context of one attention evaluation, as values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// Normalized weights over the N caption positions.
    pub weights: Vec<f64>,
    /// Weighted sum of annotation rows, width 2m.
    pub context: Vec<f64>,
    /// Unnormalized alignment scores.
    pub scores: Vec<f64>,
}

/// Tape handles of one attention evaluation.
pub struct AttentionVars {
    pub weights: Var,
    pub context: Var,
    pub scores: Var,
}

/// Query-independent half of the alignment computation, built once per
/// caption and reused across all pixel steps.
pub struct AttentionKeys {
    keys: Vec<Var>,
}

/// Project every annotation row ahead of time. For the additive score this
/// is `W_l a_i + b`, for the bilinear score `W a_i`.
pub fn prepare_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    ann: &AnnotationVars,
) -> Result<AttentionKeys> {
    let mut keys = Vec::with_capacity(ann.rows.len());
    match pv.dims().attention {
        AttentionKind::Additive => {
            let w_lang = pv.var("align.w_lang")?;
            let bias = pv.var("align.bias")?;
            for &row in &ann.rows {
                let projected = tape.matmul(w_lang, row)?;
                keys.push(tape.add(projected, bias)?);
            }
        }
        AttentionKind::Bilinear => {
            let w = pv.var("align.w_bilin")?;
            for &row in &ann.rows {
                keys.push(tape.matmul(w, row)?);
            }
        }
    }
    Ok(AttentionKeys { keys })
}

/// Score every annotation against the query, normalize, and contract the
/// annotation matrix into the context vector.
pub fn attention_on(
    tape: &mut Tape,
    pv: &ParamVars,
    query: Var,
    keys: &AttentionKeys,
    ann_matrix: Var,
) -> Result<AttentionVars> {
    if keys.keys.is_empty() {
        return Err(Error::InvalidArgument("attention over zero annotations".into()));
    }
    let mut score_vars = Vec::with_capacity(keys.keys.len());
    match pv.dims().attention {
        AttentionKind::Additive => {
            let w_pix = pv.var("align.w_pix")?;
            let v = pv.var("align.v")?;
            let projected_query = tape.matmul(w_pix, query)?;
            for &key in &keys.keys {
                let pre = tape.add(projected_query, key)?;
                let hidden = tape.tanh(pre)?;
                score_vars.push(tape.dot(v, hidden)?);
            }
        }
        AttentionKind::Bilinear => {
            for &key in &keys.keys {
                score_vars.push(tape.dot(query, key)?);
            }
        }
    }
    let scores = tape.concat(&score_vars)?;
    let weights = tape.softmax(scores)?;
    let context = tape.matmul(weights, ann_matrix)?;
    Ok(AttentionVars { weights, context, scores })
}

/// One additive (or bilinear) alignment score between a decoder state and a
/// single annotation row.
pub fn align_score(h_pix_prev: &[f64], h_lang: &[f64], params: &ModelParams) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.leaf(vec![h_pix_prev.len()], h_pix_prev.to_vec())?;
    let a = tape.leaf(vec![h_lang.len()], h_lang.to_vec())?;
    let score = match &params.align {
        AlignParams::Additive { w_pix, w_lang, bias, v } => {
            let w_pix = tape.leaf_tensor(w_pix)?;
            let w_lang = tape.leaf_tensor(w_lang)?;
            let bias = tape.leaf_tensor(bias)?;
            let v = tape.leaf_tensor(v)?;
            let key = tape.matmul(w_lang, a)?;
            let key = tape.add(key, bias)?;
            let pq = tape.matmul(w_pix, q)?;
            let pre = tape.add(pq, key)?;
            let hidden = tape.tanh(pre)?;
            tape.dot(v, hidden)?
        }
        AlignParams::Bilinear { w } => {
            let w = tape.leaf_tensor(w)?;
            let key = tape.matmul(w, a)?;
            tape.dot(q, key)?
        }
    };
    Ok(tape.value_scalar(score))
}

/// Softmax over raw alignment scores.
pub fn attention_weights(scores: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let s = tape.leaf(vec![scores.len()], scores.to_vec())?;
    let w = tape.softmax(s)?;
    Ok(tape.value(w).to_vec())
}

/// Weighted sum of annotation rows.
pub fn context_vector(weights: &[f64], annotations: &Annotations) -> Result<Vec<f64>> {
    if weights.len() != annotations.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} annotation rows",
            weights.len(),
            annotations.len()
        )));
    }
    let mut tape = Tape::new();
    let w = tape.leaf(vec![weights.len()], weights.to_vec())?;
    let rows: Vec<Var> = annotations
        .rows()
        .iter()
        .map(|r| tape.leaf(vec![r.len()], r.clone()))
        .collect::<Result<_>>()?;
    let matrix = tape.concat_rows(&rows)?;
    let ctx = tape.matmul(w, matrix)?;
    Ok(tape.value(ctx).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{AttentionKind, ModelDims, ModelParams};
    use crate::tensor::Tensor;

    fn dims() -> ModelDims {
        ModelDims {
            vocab_size: 6,
            embed_dim: 2,
            enc_width: 1,
            dec_width: 1,
            dec_layers: 1,
            align_width: 1,
            attention: AttentionKind::Additive,
            levels: 2,
            img_h: 2,
            img_w: 2,
        }
    }

    #[test]
    fn zero_alignment_weights_score_zero() {
        let params = ModelParams::zeros(dims()).unwrap();
        let s = align_score(&[0.3], &[0.9, -0.4], &params).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn zero_readout_scores_zero() {
        let mut params = ModelParams::init(dims(), 2).unwrap();
        if let AlignParams::Additive { v, .. } = &mut params.align {
            *v = Tensor::zeros(vec![1]);
        }
        let s = align_score(&[0.5], &[0.2, 0.2], &params).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn hand_evaluated_additive_score() {
        // W_p = 0, W_l = [1, 0], b = 0, v = [1]: score = tanh(h_lang[0]).
        let mut params = ModelParams::zeros(dims()).unwrap();
        if let AlignParams::Additive { w_lang, v, .. } = &mut params.align {
            *w_lang = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
            *v = Tensor::vector(vec![1.0]);
        }
        let s = align_score(&[0.0], &[0.5, 0.0], &params).unwrap();
        assert!((s - 0.5f64.tanh()).abs() < 1e-15);
        assert!((s - 0.462_117_157_260_009_7).abs() < 1e-12);
    }

    #[test]
    fn weights_singleton_equal_and_hand_case() {
        assert_eq!(attention_weights(&[3.7]).unwrap(), vec![1.0]);

        let w = attention_weights(&[1.1; 4]).unwrap();
        for v in &w {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let w = attention_weights(&[0.0, 3f64.ln()]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15);
        assert!((w[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_scores_rejected() {
        assert!(attention_weights(&[]).is_err());
    }

    #[test]
    fn context_selection_and_hand_case() {
        let ann = Annotations::new(vec![vec![1.0, 2.0], vec![5.0, -1.0]]).unwrap();
        let picked = context_vector(&[0.0, 1.0], &ann).unwrap();
        assert_eq!(picked, vec![5.0, -1.0]);

        let same = Annotations::new(vec![vec![0.5, 0.25], vec![0.5, 0.25]]).unwrap();
        let uniform = context_vector(&[0.5, 0.5], &same).unwrap();
        assert_eq!(uniform, vec![0.5, 0.25]);

        let rows = Annotations::new(vec![vec![0.0, 0.0], vec![4.0, 8.0]]).unwrap();
        let mixed = context_vector(&[0.25, 0.75], &rows).unwrap();
        assert_eq!(mixed, vec![3.0, 6.0]);
    }

    #[test]
    fn context_rejects_length_mismatch() {
        let ann = Annotations::new(vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(context_vector(&[1.0], &ann).is_err());
    }

    #[test]
    fn context_is_linear_in_annotations() {
        let a = Annotations::new(vec![vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let b = Annotations::new(vec![vec![-0.25, 1.0], vec![2.0, -1.5]]).unwrap();
        let sum = Annotations::new(
            a.rows()
                .iter()
                .zip(b.rows())
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
                .collect(),
        )
        .unwrap();
        let w = [0.3, 0.7];
        let ca = context_vector(&w, &a).unwrap();
        let cb = context_vector(&w, &b).unwrap();
        let cs = context_vector(&w, &sum).unwrap();
        for i in 0..2 {
            assert!((cs[i] - (ca[i] + cb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn score_to_context_chain_matches_finite_differences() {
        use crate::encoder::AnnotationVars;
        use crate::gradcheck::grad_check;
        use crate::params::GradMap;
        use crate::tape::{Tape, Var};

        let mut d = dims();
        d.enc_width = 2;
        d.dec_width = 2;
        d.align_width = 3;
        let params = ModelParams::init(d, 31).unwrap();
        let query = vec![0.4, -0.6];
        let rows = vec![vec![0.3, -0.1, 0.8, 0.05], vec![-0.5, 0.7, 0.2, -0.9]];

        let eval = |p: &ModelParams| -> crate::error::Result<(f64, GradMap)> {
            let mut tape = Tape::new();
            let pv = p.register_on(&mut tape)?;
            let q = tape.leaf(vec![2], query.clone())?;
            let row_vars: Vec<Var> = rows
                .iter()
                .map(|r| tape.leaf(vec![r.len()], r.clone()))
                .collect::<crate::error::Result<_>>()?;
            let matrix = tape.concat_rows(&row_vars)?;
            let ann = AnnotationVars { rows: row_vars, matrix };
            let keys = prepare_attention(&mut tape, &pv, &ann)?;
            let attn = attention_on(&mut tape, &pv, q, &keys, ann.matrix)?;
            let w = tape.leaf(vec![4], vec![1.0, -0.5, 0.25, 0.75])?;
            let loss = tape.dot(attn.context, w)?;
            let value = tape.value_scalar(loss);
            tape.backward(loss)?;
            Ok((value, pv.collect_grads(&tape)?))
        };
        let report = grad_check(&params, 1e-5, |p| eval(p).map(|x| x.0), |p| {
            eval(p).map(|x| x.1)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn context_entries_are_convex_combinations() {
        let ann =
            Annotations::new(vec![vec![0.1, -0.9], vec![0.8, 0.2], vec![-0.3, 0.5]]).unwrap();
        let w = attention_weights(&[0.2, -1.0, 0.7]).unwrap();
        let ctx = context_vector(&w, &ann).unwrap();
        for col in 0..2 {
            let lo = ann.rows().iter().map(|r| r[col]).fold(f64::INFINITY, f64::min);
            let hi = ann.rows().iter().map(|r| r[col]).fold(f64::NEG_INFINITY, f64::max);
            assert!(ctx[col] >= lo - 1e-12 && ctx[col] <= hi + 1e-12);
        }
    }
}
