//! Model dimensions and the full learnable parameter set.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Alignment score family used by the attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// One-hidden-layer additive network `v . tanh(W_p q + W_l a + b)`.
    Additive,
    /// General bilinear score `q^T W a`.
    Bilinear,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Additive => "additive",
            AttentionKind::Bilinear => "bilinear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(AttentionKind::Additive),
            "bilinear" => Ok(AttentionKind::Bilinear),
            other => Err(Error::InvalidArgument(format!("unknown attention kind '{other}'"))),
        }
    }
}

/// Width/size configuration of the whole model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    /// Vocabulary size K, including the four specials.
    pub vocab_size: usize,
    /// Width of word and pixel embeddings.
    pub embed_dim: usize,
    /// Encoder LSTM cell width m (annotations are 2m wide).
    pub enc_width: usize,
    /// Decoder LSTM cell width.
    pub dec_width: usize,
    /// Number of stacked decoder LSTM layers.
    pub dec_layers: usize,
    /// Hidden width of the additive alignment network.
    pub align_width: usize,
    pub attention: AttentionKind,
    /// Number of quantized intensity levels Q.
    pub levels: usize,
    pub img_h: usize,
    pub img_w: usize,
}

impl ModelDims {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        ModelDims {
            vocab_size,
            embed_dim: 32,
            enc_width: 32,
            dec_width: 64,
            dec_layers: 1,
            align_width: 32,
            attention: AttentionKind::Additive,
            levels: 16,
            img_h: 12,
            img_w: 12,
        }
    }

    /// Full-scale configuration (512-wide layers, 256 gray levels). Kept as
    /// a named profile; not sized for CPU-only runs.
    pub fn paper(vocab_size: usize) -> Self {
        ModelDims {
            vocab_size,
            embed_dim: 512,
            enc_width: 512,
            dec_width: 512,
            dec_layers: 1,
            align_width: 512,
            attention: AttentionKind::Additive,
            levels: 256,
            img_h: 60,
            img_w: 60,
        }
    }

    pub fn pixels(&self) -> usize {
        self.img_h * self.img_w
    }

    /// Width of one annotation row (forward and backward halves).
    pub fn annotation_width(&self) -> usize {
        2 * self.enc_width
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("enc_width", self.enc_width),
            ("dec_width", self.dec_width),
            ("dec_layers", self.dec_layers),
            ("align_width", self.align_width),
            ("img_h", self.img_h),
            ("img_w", self.img_w),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::InvalidArgument("vocab_size must cover the four specials".into()));
        }
        if self.levels < 2 {
            return Err(Error::InvalidArgument("levels must be at least 2".into()));
        }
        if self.levels > 256 {
            return Err(Error::InvalidArgument("levels above 256 exceed the image format".into()));
        }
        Ok(())
    }
}

/// Weights of one LSTM layer: stacked gate matrices and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_is: Tensor,
    pub w_ss: Tensor,
    pub bias: Tensor,
}

/// Alignment network weights, one variant per [`AttentionKind`].
#[derive(Debug, Clone, PartialEq)]
pub enum AlignParams {
    Additive { w_pix: Tensor, w_lang: Tensor, bias: Tensor, v: Tensor },
    Bilinear { w: Tensor },
}

/// The complete parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embed_word: Tensor,
    pub enc_fwd: LstmParams,
    pub enc_bwd: LstmParams,
    pub embed_pixel: Tensor,
    pub align: AlignParams,
    pub dec: Vec<LstmParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// Named gradients (or any named tensor set shaped like the parameters).
pub type GradMap = BTreeMap<String, Tensor>;

fn lstm_shapes(width: usize, input: usize) -> [(String, Vec<usize>); 3] {
    [
        ("w_is".to_string(), vec![4 * width, input]),
        ("w_ss".to_string(), vec![4 * width, width]),
        ("bias".to_string(), vec![4 * width]),
    ]
}

impl ModelParams {
    /// Canonical (name, shape) listing for the given dimensions. Checkpoints,
    /// gradients and the optimizer all key off these names.
    pub fn shapes(dims: &ModelDims) -> Vec<(String, Vec<usize>)> {
        let e = dims.embed_dim;
        let m = dims.enc_width;
        let d = dims.dec_width;
        let a2 = dims.annotation_width();
        let q = dims.levels;
        let mut out = vec![("embed.word".to_string(), vec![dims.vocab_size, e])];
        for (suffix, shape) in lstm_shapes(m, e) {
            out.push((format!("enc.fwd.{suffix}"), shape));
        }
        for (suffix, shape) in lstm_shapes(m, e) {
            out.push((format!("enc.bwd.{suffix}"), shape));
        }
        // One extra pixel-embedding row serves as the begin-of-image sentinel.
        out.push(("embed.pixel".to_string(), vec![q + 1, e]));
        match dims.attention {
            AttentionKind::Additive => {
                out.push(("align.w_pix".to_string(), vec![dims.align_width, d]));
                out.push(("align.w_lang".to_string(), vec![dims.align_width, a2]));
                out.push(("align.bias".to_string(), vec![dims.align_width]));
                out.push(("align.v".to_string(), vec![dims.align_width]));
            }
            AttentionKind::Bilinear => {
                out.push(("align.w_bilin".to_string(), vec![d, a2]));
            }
        }
        for layer in 0..dims.dec_layers {
            let input = if layer == 0 { e + a2 } else { d };
            for (suffix, shape) in lstm_shapes(d, input) {
                out.push((format!("dec.{layer}.{suffix}"), shape));
            }
        }
        out.push(("out.w".to_string(), vec![q, d + a2]));
        out.push(("out.bias".to_string(), vec![q]));
        out
    }

    /// All-zero parameters (a uniform pixel model).
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut tensors: Vec<Tensor> =
            Self::shapes(&dims).into_iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Self::assemble(dims, &mut tensors)
    }

    /// Scaled uniform initialization: every weight matrix is drawn from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with fan-in its input width;
    /// rank-1 tensors (biases, the alignment readout) start at zero, keeping
    /// the initial pixel distribution near-uniform. Draw order is the
    /// canonical name order, so a seed pins the full parameter vector.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut tensors = Vec::new();
        for (_, shape) in Self::shapes(&dims) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let s = 1.0 / (*shape.last().expect("non-empty shape") as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-s..=s)).collect()
            };
            tensors.push(Tensor::from_vec(shape, data)?);
        }
        Self::assemble(dims, &mut tensors)
    }

    fn assemble(dims: ModelDims, tensors: &mut Vec<Tensor>) -> Result<Self> {
        let mut it = tensors.drain(..);
        let mut next = || it.next().expect("shapes() and assemble() agree");
        let embed_word = next();
        let enc_fwd = LstmParams { w_is: next(), w_ss: next(), bias: next() };
        let enc_bwd = LstmParams { w_is: next(), w_ss: next(), bias: next() };
        let embed_pixel = next();
        let align = match dims.attention {
            AttentionKind::Additive => AlignParams::Additive {
                w_pix: next(),
                w_lang: next(),
                bias: next(),
                v: next(),
            },
            AttentionKind::Bilinear => AlignParams::Bilinear { w: next() },
        };
        let dec = (0..dims.dec_layers)
            .map(|_| LstmParams { w_is: next(), w_ss: next(), bias: next() })
            .collect();
        let out_w = next();
        let out_b = next();
        Ok(ModelParams {
            dims,
            embed_word,
            enc_fwd,
            enc_bwd,
            embed_pixel,
            align,
            dec,
            out_w,
            out_b,
        })
    }

    pub fn names(&self) -> Vec<String> {
        Self::shapes(&self.dims).into_iter().map(|(n, _)| n).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        match name {
            "embed.word" => Some(&self.embed_word),
            "embed.pixel" => Some(&self.embed_pixel),
            "enc.fwd.w_is" => Some(&self.enc_fwd.w_is),
            "enc.fwd.w_ss" => Some(&self.enc_fwd.w_ss),
            "enc.fwd.bias" => Some(&self.enc_fwd.bias),
            "enc.bwd.w_is" => Some(&self.enc_bwd.w_is),
            "enc.bwd.w_ss" => Some(&self.enc_bwd.w_ss),
            "enc.bwd.bias" => Some(&self.enc_bwd.bias),
            "align.w_pix" | "align.w_lang" | "align.bias" | "align.v" => match &self.align {
                AlignParams::Additive { w_pix, w_lang, bias, v } => match name {
                    "align.w_pix" => Some(w_pix),
                    "align.w_lang" => Some(w_lang),
                    "align.bias" => Some(bias),
                    _ => Some(v),
                },
                AlignParams::Bilinear { .. } => None,
            },
            "align.w_bilin" => match &self.align {
                AlignParams::Bilinear { w } => Some(w),
                AlignParams::Additive { .. } => None,
            },
            "out.w" => Some(&self.out_w),
            "out.bias" => Some(&self.out_b),
            other => {
                let rest = other.strip_prefix("dec.")?;
                let (layer, field) = rest.split_once('.')?;
                let layer: usize = layer.parse().ok()?;
                let lp = self.dec.get(layer)?;
                match field {
                    "w_is" => Some(&lp.w_is),
                    "w_ss" => Some(&lp.w_ss),
                    "bias" => Some(&lp.bias),
                    _ => None,
                }
            }
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entry_mut(name)
    }

    fn entry_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "embed.word" => Some(&mut self.embed_word),
            "embed.pixel" => Some(&mut self.embed_pixel),
            "enc.fwd.w_is" => Some(&mut self.enc_fwd.w_is),
            "enc.fwd.w_ss" => Some(&mut self.enc_fwd.w_ss),
            "enc.fwd.bias" => Some(&mut self.enc_fwd.bias),
            "enc.bwd.w_is" => Some(&mut self.enc_bwd.w_is),
            "enc.bwd.w_ss" => Some(&mut self.enc_bwd.w_ss),
            "enc.bwd.bias" => Some(&mut self.enc_bwd.bias),
            "align.w_pix" | "align.w_lang" | "align.bias" | "align.v" => match &mut self.align {
                AlignParams::Additive { w_pix, w_lang, bias, v } => match name {
                    "align.w_pix" => Some(w_pix),
                    "align.w_lang" => Some(w_lang),
                    "align.bias" => Some(bias),
                    _ => Some(v),
                },
                AlignParams::Bilinear { .. } => None,
            },
            "align.w_bilin" => match &mut self.align {
                AlignParams::Bilinear { w } => Some(w),
                AlignParams::Additive { .. } => None,
            },
            "out.w" => Some(&mut self.out_w),
            "out.bias" => Some(&mut self.out_b),
            other => {
                let rest = other.strip_prefix("dec.")?;
                let (layer, field) = rest.split_once('.')?;
                let layer: usize = layer.parse().ok()?;
                let lp = self.dec.get_mut(layer)?;
                match field {
                    "w_is" => Some(&mut lp.w_is),
                    "w_ss" => Some(&mut lp.w_ss),
                    "bias" => Some(&mut lp.bias),
                    _ => None,
                }
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.names().iter().map(|n| self.get(n).map_or(0, Tensor::numel)).sum()
    }

    /// Register every tensor as a tape leaf, in canonical order.
    pub fn register_on(&self, tape: &mut Tape) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for name in self.names() {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            vars.insert(name, tape.leaf_tensor(t)?);
        }
        Ok(ParamVars { vars, dims: self.dims.clone() })
    }

    /// Zero-filled gradient map matching this parameter set.
    pub fn zero_grads(&self) -> GradMap {
        self.names()
            .into_iter()
            .map(|n| {
                let shape = self.get(&n).expect("named tensor").shape().to_vec();
                (n, Tensor::zeros(shape))
            })
            .collect()
    }
}

/// Tape handles for every parameter tensor of one registration.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
    dims: ModelDims,
}

impl ParamVars {
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    /// Collect gradients off the tape after a backward pass, with zeros for
    /// parameters no gradient reached.
    pub fn collect_grads(&self, tape: &Tape) -> Result<GradMap> {
        let mut out = GradMap::new();
        for (name, &var) in &self.vars {
            let g = tape.grad_or_zeros(var);
            let shape = tape.shape(var).to_vec();
            out.insert(name.clone(), Tensor::from_vec(shape, g)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            vocab_size: 6,
            embed_dim: 3,
            enc_width: 3,
            dec_width: 4,
            dec_layers: 1,
            align_width: 3,
            attention: AttentionKind::Additive,
            levels: 2,
            img_h: 2,
            img_w: 2,
        }
    }

    #[test]
    fn named_access_covers_every_tensor() {
        let p = ModelParams::init(tiny_dims(), 1).unwrap();
        for name in p.names() {
            assert!(p.get(&name).is_some(), "missing {name}");
        }
        assert!(p.get("no.such").is_none());
        assert!(p.get("align.w_bilin").is_none());
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = ModelParams::init(tiny_dims(), 7).unwrap();
        let b = ModelParams::init(tiny_dims(), 7).unwrap();
        let c = ModelParams::init(tiny_dims(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for name in a.names() {
            let t = a.get(&name).unwrap();
            let fan_in = *t.shape().last().unwrap() as f64;
            let bound = 1.0 / fan_in.sqrt() + 1e-12;
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{name} exceeds init bound");
        }
    }

    #[test]
    fn bilinear_swaps_alignment_tensors() {
        let mut dims = tiny_dims();
        dims.attention = AttentionKind::Bilinear;
        let p = ModelParams::init(dims, 3).unwrap();
        assert!(p.get("align.w_bilin").is_some());
        assert!(p.get("align.w_pix").is_none());
        assert!(p.names().iter().any(|n| n == "align.w_bilin"));
    }

    #[test]
    fn stacked_decoder_layers_are_named() {
        let mut dims = tiny_dims();
        dims.dec_layers = 2;
        let p = ModelParams::init(dims, 3).unwrap();
        assert!(p.get("dec.0.w_is").is_some());
        assert!(p.get("dec.1.w_is").is_some());
        assert_eq!(p.get("dec.1.w_is").unwrap().shape(), &[16, 4]);
    }
}
