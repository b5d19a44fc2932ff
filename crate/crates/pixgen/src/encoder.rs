//! Bidirectional caption encoder: one LSTM pass left-to-right, one
//! right-to-left, both from zero initial states, concatenated per word into
//! annotation vectors.

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamVars};
use crate::tape::{LstmVars, Tape, Var};
use crate::vocab::Caption;

/// Per-word annotation vectors as plain values: N rows of width 2m.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    rows: Vec<Vec<f64>>,
}

impl Annotations {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("annotation rows must be non-empty and equal width".into()));
        }
        Ok(Annotations { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Annotation handles on a tape: individual rows plus the stacked `[N x 2m]`
/// matrix the attention layer contracts against.
pub struct AnnotationVars {
    pub rows: Vec<Var>,
    pub matrix: Var,
}

fn run_direction(
    tape: &mut Tape,
    ids: &[usize],
    embed: Var,
    w_is: Var,
    w_ss: Var,
    bias: Var,
    width: usize,
) -> Result<Vec<Var>> {
    let h0 = tape.leaf(vec![width], vec![0.0; width])?;
    let c0 = tape.leaf(vec![width], vec![0.0; width])?;
    let mut state = LstmVars { h: h0, c: c0 };
    let mut hs = Vec::with_capacity(ids.len());
    for &id in ids {
        let x = tape.embed_row(embed, id)?;
        state = tape.lstm_step(x, state, w_is, w_ss, bias)?;
        hs.push(state.h);
    }
    Ok(hs)
}

/// Encode a caption on an existing tape (differentiable path).
pub fn encode_caption_on(
    tape: &mut Tape,
    pv: &ParamVars,
    caption: &Caption,
) -> Result<AnnotationVars> {
    if caption.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty caption".into()));
    }
    let dims = pv.dims().clone();
    for &id in &caption.ids {
        if id >= dims.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {id} out of range for vocabulary of {}",
                dims.vocab_size
            )));
        }
    }
    let embed = pv.var("embed.word")?;
    let fwd = run_direction(
        tape,
        &caption.ids,
        embed,
        pv.var("enc.fwd.w_is")?,
        pv.var("enc.fwd.w_ss")?,
        pv.var("enc.fwd.bias")?,
        dims.enc_width,
    )?;
    let reversed: Vec<usize> = caption.ids.iter().rev().copied().collect();
    let mut bwd = run_direction(
        tape,
        &reversed,
        embed,
        pv.var("enc.bwd.w_is")?,
        pv.var("enc.bwd.w_ss")?,
        pv.var("enc.bwd.bias")?,
        dims.enc_width,
    )?;
    bwd.reverse();

    let rows: Vec<Var> = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| tape.concat(&[f, b]))
        .collect::<Result<_>>()?;
    let matrix = tape.concat_rows(&rows)?;
    Ok(AnnotationVars { rows, matrix })
}

/// Encode a caption and return the annotation values.
pub fn encode_caption(caption: &Caption, params: &ModelParams) -> Result<Annotations> {
    let mut tape = Tape::new();
    let pv = params.register_on(&mut tape)?;
    let vars = encode_caption_on(&mut tape, &pv, caption)?;
    let rows = vars.rows.iter().map(|&r| tape.value(r).to_vec()).collect();
    Annotations::new(rows)
}
