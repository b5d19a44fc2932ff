//! Checkpoint files: little-endian binary with a magic header, a format
//! version, the training configuration, all named parameter and optimizer
//! tensors, the vocabulary and a trailing FNV-1a checksum. Round-trips are
//! byte-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::OptState;
use crate::params::{AttentionKind, GradMap, ModelDims, ModelParams};
use crate::rng::fnv1a;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 4] = b"PXGN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub opt: OptState,
    pub vocab: Vocabulary,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ModelParams, opt: OptState, vocab: Vocabulary) -> Self {
        let step = opt.step;
        Checkpoint { config, params, opt, vocab, step }
    }
}

// ── Writer ───────────────────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

// ── Reader ───────────────────────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.usize()?);
        }
        let n: usize = shape.iter().product();
        if n > self.buf.len() / 8 + 1 {
            return Err(Error::Format("tensor larger than the checkpoint file".into()));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok((name, Tensor::from_vec(shape, data)?))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_dims(w: &mut Writer, dims: &ModelDims) {
    w.u64(dims.vocab_size as u64);
    w.u64(dims.embed_dim as u64);
    w.u64(dims.enc_width as u64);
    w.u64(dims.dec_width as u64);
    w.u64(dims.dec_layers as u64);
    w.u64(dims.align_width as u64);
    w.u8(match dims.attention {
        AttentionKind::Additive => 0,
        AttentionKind::Bilinear => 1,
    });
    w.u64(dims.levels as u64);
    w.u64(dims.img_h as u64);
    w.u64(dims.img_w as u64);
}

fn read_dims(r: &mut Reader) -> Result<ModelDims> {
    let dims = ModelDims {
        vocab_size: r.usize()?,
        embed_dim: r.usize()?,
        enc_width: r.usize()?,
        dec_width: r.usize()?,
        dec_layers: r.usize()?,
        align_width: r.usize()?,
        attention: match r.u8()? {
            0 => AttentionKind::Additive,
            1 => AttentionKind::Bilinear,
            other => return Err(Error::Format(format!("unknown attention tag {other}"))),
        },
        levels: r.usize()?,
        img_h: r.usize()?,
        img_w: r.usize()?,
    };
    dims.validate()?;
    Ok(dims)
}

fn write_config(w: &mut Writer, c: &TrainConfig) {
    w.f64(c.learning_rate);
    w.f64(c.clip_norm);
    w.u64(c.batch_size as u64);
    w.u64(c.epochs as u64);
    w.u64(c.seed);
    write_dims(w, &c.dims);
    match &c.level_weights {
        None => w.u8(0),
        Some(weights) => {
            w.u8(1);
            w.u64(weights.len() as u64);
            for &v in weights {
                w.f64(v);
            }
        }
    }
}

fn read_config(r: &mut Reader) -> Result<TrainConfig> {
    let learning_rate = r.f64()?;
    let clip_norm = r.f64()?;
    let batch_size = r.usize()?;
    let epochs = r.usize()?;
    let seed = r.u64()?;
    let dims = read_dims(r)?;
    let level_weights = match r.u8()? {
        0 => None,
        1 => {
            let n = r.usize()?;
            if n > 256 {
                return Err(Error::Format("implausible level weight count".into()));
            }
            let mut w = Vec::with_capacity(n);
            for _ in 0..n {
                w.push(r.f64()?);
            }
            Some(w)
        }
        other => return Err(Error::Format(format!("unknown level-weight tag {other}"))),
    };
    Ok(TrainConfig { learning_rate, clip_norm, batch_size, epochs, seed, dims, level_weights })
}

fn write_named(w: &mut Writer, names: &[String], get: impl Fn(&str) -> Option<Tensor>) {
    w.u32(names.len() as u32);
    for name in names {
        let t = get(name).expect("named tensor present");
        w.tensor(name, &t);
    }
}

pub fn checkpoint_to_bytes(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    write_config(&mut w, &c.config);
    w.u64(c.step);

    let names = c.params.names();
    write_named(&mut w, &names, |n| c.params.get(n).cloned());
    write_named(&mut w, &names, |n| c.opt.acc.get(n).cloned());

    w.u32(c.vocab.words().len() as u32);
    for token in c.vocab.words() {
        w.str(token);
    }

    let checksum = fnv1a(&w.buf);
    w.u64(checksum);
    w.buf
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }

    let mut r = Reader::new(body);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = read_config(&mut r)?;
    let step = r.u64()?;

    let expected = ModelParams::shapes(&config.dims);
    let read_map = |r: &mut Reader| -> Result<GradMap> {
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, model needs {}",
                expected.len()
            )));
        }
        let mut map = GradMap::new();
        for _ in 0..count {
            let (name, tensor) = r.tensor()?;
            map.insert(name, tensor);
        }
        for (name, shape) in &expected {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(map)
    };
    let mut param_map = read_map(&mut r)?;
    let acc = read_map(&mut r)?;

    let word_count = r.u32()? as usize;
    let mut words = Vec::with_capacity(word_count.min(1 << 20));
    for _ in 0..word_count {
        words.push(r.str()?);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    let vocab = Vocabulary::from_words(words);
    if vocab.len() != config.dims.vocab_size {
        return Err(Error::Format(format!(
            "vocabulary has {} ids but dims.vocab_size is {}",
            vocab.len(),
            config.dims.vocab_size
        )));
    }

    let mut tensors: Vec<Tensor> = Vec::with_capacity(expected.len());
    for (name, _) in &expected {
        tensors.push(param_map.remove(name).expect("verified above"));
    }
    let params = assemble_params(config.dims.clone(), tensors)?;
    let opt = OptState { acc, step };
    Ok(Checkpoint { config, params, opt, vocab, step })
}

fn assemble_params(dims: ModelDims, ordered: Vec<Tensor>) -> Result<ModelParams> {
    // Rebuild through the zeroed skeleton to reuse the canonical layout.
    let mut params = ModelParams::zeros(dims)?;
    for ((name, _), tensor) in ModelParams::shapes(&params.dims).iter().zip(ordered) {
        *params.get_mut(name).expect("canonical name") = tensor;
    }
    Ok(params)
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(c))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
