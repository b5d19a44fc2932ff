//! Image generation from a trained model: stochastic ancestral sampling,
//! greedy argmax decoding, and beam search over pixel sequences. All three
//! drive the same decoder step as the likelihood computation, so scores are
//! directly comparable.

use rand::Rng;

use crate::decoder::{decoder_step_on, prepare_caption, DecoderStateVars};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::params::ModelParams;
use crate::rng::rng_from_seed;
use crate::tape::Tape;
use crate::vocab::Caption;

fn zero_state(tape: &mut Tape, params: &ModelParams) -> Result<DecoderStateVars> {
    let dims = &params.dims;
    let layers = (0..dims.dec_layers)
        .map(|_| {
            let h = tape.leaf(vec![dims.dec_width], vec![0.0; dims.dec_width])?;
            let c = tape.leaf(vec![dims.dec_width], vec![0.0; dims.dec_width])?;
            Ok(crate::tape::LstmVars { h, c })
        })
        .collect::<Result<_>>()?;
    Ok(DecoderStateVars { layers })
}

/// Argmax at a pixel step; ties break toward the lowest level.
fn argmax(dist: &[f64]) -> u8 {
    let mut best = 0usize;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as u8
}

fn draw(dist: &[f64], u: f64) -> u8 {
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u8;
        }
    }
    (dist.len() - 1) as u8
}

fn generate<F>(caption: &Caption, params: &ModelParams, mut choose: F) -> Result<ImageGrid>
where
    F: FnMut(usize, &[f64]) -> u8,
{
    let dims = params.dims.clone();
    let mut tape = Tape::new();
    let pv = params.register_on(&mut tape)?;
    let ctx = prepare_caption(&mut tape, &pv, caption)?;
    let mut state = zero_state(&mut tape, params)?;
    let mut pixels = Vec::with_capacity(dims.pixels());
    let mut prev: Option<u8> = None;
    for j in 0..dims.pixels() {
        let step = decoder_step_on(&mut tape, &pv, prev, &state, &ctx)?;
        let px = choose(j, tape.value(step.distribution));
        pixels.push(px);
        prev = Some(px);
        state = step.state;
    }
    ImageGrid::new(dims.img_h, dims.img_w, dims.levels, pixels)
}

/// Draw each pixel from its conditional distribution with a seeded generator.
pub fn sample_stochastic(caption: &Caption, params: &ModelParams, seed: u64) -> Result<ImageGrid> {
    let mut rng = rng_from_seed(seed);
    generate(caption, params, |_, dist| draw(dist, rng.gen::<f64>()))
}

/// Take the most likely level at every step.
pub fn sample_greedy(caption: &Caption, params: &ModelParams) -> Result<ImageGrid> {
    generate(caption, params, |_, dist| argmax(dist))
}

struct Hypothesis {
    seq: Vec<u8>,
    score: f64,
    state: DecoderStateVars,
    prev: Option<u8>,
}

/// Beam search over pixel sequences scored by cumulative log-probability.
/// The sequence length is fixed at the image size, and ties break toward the
/// lexicographically smaller pixel sequence.
pub fn sample_beam(caption: &Caption, params: &ModelParams, width: usize) -> Result<ImageGrid> {
    if width < 1 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let dims = params.dims.clone();
    let mut tape = Tape::new();
    let pv = params.register_on(&mut tape)?;
    let ctx = prepare_caption(&mut tape, &pv, caption)?;
    let init = zero_state(&mut tape, params)?;
    let mut beam =
        vec![Hypothesis { seq: Vec::new(), score: 0.0, state: init, prev: None }];

    for _ in 0..dims.pixels() {
        let mut candidates: Vec<Hypothesis> = Vec::with_capacity(beam.len() * dims.levels);
        for hyp in &beam {
            let step = decoder_step_on(&mut tape, &pv, hyp.prev, &hyp.state, &ctx)?;
            let dist = tape.value(step.distribution).to_vec();
            for (q, &p) in dist.iter().enumerate() {
                let mut seq = hyp.seq.clone();
                seq.push(q as u8);
                candidates.push(Hypothesis {
                    seq,
                    score: hyp.score + p.ln(),
                    state: step.state.clone(),
                    prev: Some(q as u8),
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then_with(|| a.seq.cmp(&b.seq))
        });
        candidates.truncate(width);
        beam = candidates;
    }

    // The beam stayed sorted best-first through the last truncation.
    let best = beam.into_iter().next().expect("beam is never empty");
    ImageGrid::new(dims.img_h, dims.img_w, dims.levels, best.seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::log_likelihood;
    use crate::params::{AttentionKind, ModelDims};

    fn dims(levels: usize, h: usize, w: usize) -> ModelDims {
        ModelDims {
            vocab_size: 6,
            embed_dim: 3,
            enc_width: 3,
            dec_width: 4,
            dec_layers: 1,
            align_width: 3,
            attention: AttentionKind::Additive,
            levels,
            img_h: h,
            img_w: w,
        }
    }

    fn caption() -> Caption {
        Caption { ids: vec![4, 5] }
    }

    #[test]
    fn uniform_model_frequencies_stay_near_uniform() {
        // 70 Q=16 samples of 12x12 give 10,080 pixel draws.
        let mut d = dims(16, 12, 12);
        d.dec_width = 8;
        let params = ModelParams::zeros(d).unwrap();
        let mut counts = [0usize; 16];
        let mut total = 0usize;
        for s in 0..70 {
            let img = sample_stochastic(&caption(), &params, 1000 + s).unwrap();
            for &p in img.pixels() {
                counts[p as usize] += 1;
                total += 1;
            }
        }
        assert!(total >= 10_000);
        let expect = 1.0 / 16.0;
        let sigma = (expect * (1.0 - expect) / total as f64).sqrt();
        for (level, &c) in counts.iter().enumerate() {
            let freq = c as f64 / total as f64;
            assert!(
                (freq - expect).abs() < 0.02,
                "level {level} frequency {freq} vs uniform {expect}"
            );
            assert!(
                (freq - expect).abs() <= 3.0 * sigma,
                "level {level} frequency {freq} beyond 3 sigma {sigma}"
            );
        }
    }

    #[test]
    fn same_seed_same_image() {
        let params = ModelParams::init(dims(4, 3, 3), 8).unwrap();
        let a = sample_stochastic(&caption(), &params, 9).unwrap();
        let b = sample_stochastic(&caption(), &params, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_stochastic(&caption(), &params, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_params_greedy_is_all_level_zero() {
        let params = ModelParams::zeros(dims(4, 3, 3)).unwrap();
        let img = sample_greedy(&caption(), &params).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 0));
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        for seed in [3u64, 21, 77] {
            let params = ModelParams::init(dims(4, 3, 3), seed).unwrap();
            let greedy = sample_greedy(&caption(), &params).unwrap();
            let beam = sample_beam(&caption(), &params, 1).unwrap();
            assert_eq!(greedy, beam);
        }
    }

    #[test]
    fn beam_rejects_zero_width() {
        let params = ModelParams::zeros(dims(4, 3, 3)).unwrap();
        assert!(sample_beam(&caption(), &params, 0).is_err());
    }

    #[test]
    fn wide_beam_recovers_the_exhaustive_argmax() {
        // L = 4, Q = 2: all 16 sequences enumerable.
        for seed in 0..20u64 {
            let params = ModelParams::init(dims(2, 2, 2), 300 + seed).unwrap();
            let cap = caption();
            let mut best: Option<(Vec<u8>, f64)> = None;
            for bits in 0..16u32 {
                let px: Vec<u8> = (0..4).map(|i| ((bits >> i) & 1) as u8).collect();
                let img = ImageGrid::new(2, 2, 2, px.clone()).unwrap();
                let ll = log_likelihood(&img, &cap, &params).unwrap();
                let better = match &best {
                    None => true,
                    Some((seq, b)) => ll > *b || (ll == *b && px < *seq),
                };
                if better {
                    best = Some((px, ll));
                }
            }
            let beam = sample_beam(&cap, &params, 16).unwrap();
            assert_eq!(beam.pixels(), best.unwrap().0.as_slice(), "seed {seed}");
        }
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        for seed in [5u64, 15, 25, 35] {
            let params = ModelParams::init(dims(4, 3, 3), seed).unwrap();
            let cap = caption();
            let greedy = sample_greedy(&cap, &params).unwrap();
            let ll_greedy = log_likelihood(&greedy, &cap, &params).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for width in [1usize, 2, 4, 8] {
                let img = sample_beam(&cap, &params, width).unwrap();
                let ll = log_likelihood(&img, &cap, &params).unwrap();
                assert!(ll >= ll_greedy, "width {width} fell below greedy");
                assert!(ll >= prev, "beam score decreased when widening to {width}");
                prev = ll;
            }
        }
    }
}
