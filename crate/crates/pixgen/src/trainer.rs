//! Maximum-likelihood training loop: seeded batch sampling, NLL loss and
//! backprop, global-norm clipping at 1.0 and RMSProp at learning rate 0.001
//! (batch size 16) by default.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::decoder::nll_loss_and_grads;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::optim::{clip_gradients, rmsprop_update, OptState};
use crate::params::{ModelDims, ModelParams};
use crate::rng::{rng_from_seed, subseed};
use crate::vocab::{Caption, Vocabulary};

/// Optimization settings plus the model dimensions they train.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dims: ModelDims,
    /// Optional per-level weights for the cross-entropy; `None` is uniform.
    pub level_weights: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn new(dims: ModelDims) -> Self {
        TrainConfig {
            learning_rate: 0.001,
            clip_norm: 1.0,
            batch_size: 16,
            epochs: 100,
            seed: 42,
            dims,
            level_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("clip_norm must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if let Some(w) = &self.level_weights {
            if w.len() != self.dims.levels {
                return Err(Error::InvalidArgument(format!(
                    "{} level weights for {} levels",
                    w.len(),
                    self.dims.levels
                )));
            }
            if w.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return Err(Error::InvalidArgument(
                    "level weights must be finite and non-negative".into(),
                ));
            }
        }
        self.dims.validate()
    }
}

/// Per-epoch loss record. `eval_nll` is NaN when there is no eval split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub eval_nll: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Training failure; on a numerical abort the last good state is retained.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<TrainOutput>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { error, last_good: None }
    }
}

fn eval_nll(
    dataset: &[(ImageGrid, Caption)],
    params: &ModelParams,
    weights: Option<&[f64]>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(f64::NAN);
    }
    crate::decoder::nll_loss_weighted(dataset, params, weights)
}

/// Run the full training loop. `on_epoch` fires after every epoch with the
/// stats, current parameters and optimizer state (for history files and
/// periodic checkpoints); epoch zero work happens before the first callback.
pub fn train(
    config: &TrainConfig,
    vocab: &Vocabulary,
    dataset: &[(ImageGrid, Caption)],
    eval_split: &[(ImageGrid, Caption)],
    mut on_epoch: impl FnMut(&EpochStats, &ModelParams, &OptState) -> Result<()>,
) -> std::result::Result<TrainOutput, TrainFailure> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()).into());
    }
    if vocab.len() != config.dims.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "vocabulary has {} ids but dims.vocab_size is {}",
            vocab.len(),
            config.dims.vocab_size
        ))
        .into());
    }

    let mut params = ModelParams::init(config.dims.clone(), subseed(config.seed, "init"))?;
    let mut opt = OptState::new(&params);
    let mut batch_rng = rng_from_seed(subseed(config.seed, "batch"));
    let weights = config.level_weights.as_deref();
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let batch: Vec<(ImageGrid, Caption)> = (0..config.batch_size)
                .map(|_| dataset[batch_rng.gen_range(0..dataset.len())].clone())
                .collect();

            let step_result = (|| -> Result<f64> {
                let (loss, mut grads) = nll_loss_and_grads(&batch, &params, weights)?;
                if !loss.is_finite() {
                    return Err(Error::NumericAbort {
                        step: opt.step,
                        reason: format!("loss became {loss}"),
                    });
                }
                clip_gradients(&mut grads, config.clip_norm)?;
                rmsprop_update(&mut params, &grads, &mut opt, config.learning_rate)?;
                Ok(loss)
            })();

            match step_result {
                Ok(loss) => epoch_loss_sum += loss,
                Err(e @ (Error::NumericAbort { .. } | Error::NonFinite(_))) => {
                    // Parameters have not been touched by the failing step.
                    let checkpoint =
                        Checkpoint::new(config.clone(), params, opt, vocab.clone());
                    return Err(TrainFailure {
                        error: e,
                        last_good: Some(TrainOutput { checkpoint, history }),
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
        let stats = EpochStats {
            epoch,
            train_nll: epoch_loss_sum / steps_per_epoch as f64,
            eval_nll: eval_nll(eval_split, &params, weights)?,
        };
        on_epoch(&stats, &params, &opt)?;
        history.push(stats);
    }

    let checkpoint = Checkpoint::new(config.clone(), params, opt, vocab.clone());
    Ok(TrainOutput { checkpoint, history })
}

/// Format one history line: `epoch<TAB>train_nll<TAB>eval_nll`.
pub fn history_line(stats: &EpochStats) -> String {
    format!("{}\t{}\t{}\n", stats.epoch, stats.train_nll, stats.eval_nll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::AttentionKind;
    use crate::vocab::build_vocab;

    fn small_dims(vocab_size: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            embed_dim: 4,
            enc_width: 4,
            dec_width: 8,
            dec_layers: 1,
            align_width: 4,
            attention: AttentionKind::Additive,
            levels: 4,
            img_h: 3,
            img_w: 3,
        }
    }

    fn fixture() -> (Vocabulary, Vec<(ImageGrid, Caption)>, TrainConfig) {
        let vocab = build_vocab(&["bright block", "dark block"], 1).unwrap();
        let dims = small_dims(vocab.len());
        let img = ImageGrid::new(3, 3, 4, vec![3, 3, 3, 0, 0, 0, 3, 3, 3]).unwrap();
        let caption = crate::vocab::tokenize("bright block", &vocab).unwrap();
        let mut config = TrainConfig::new(dims);
        config.batch_size = 1;
        config.seed = 5;
        (vocab, vec![(img, caption)], config)
    }

    #[test]
    fn zero_epochs_returns_initialized_params_and_empty_history() {
        let (vocab, data, mut config) = fixture();
        config.epochs = 0;
        let out = train(&config, &vocab, &data, &[], |_, _, _| Ok(())).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.checkpoint.opt.step, 0);
        let expect =
            ModelParams::init(config.dims.clone(), subseed(config.seed, "init")).unwrap();
        assert_eq!(out.checkpoint.params, expect);
    }

    #[test]
    fn fixed_seed_reproduces_history_bitwise() {
        let (vocab, data, mut config) = fixture();
        config.epochs = 5;
        let a = train(&config, &vocab, &data, &data, |_, _, _| Ok(())).unwrap();
        let b = train(&config, &vocab, &data, &data, |_, _, _| Ok(())).unwrap();
        let bits = |h: &[EpochStats]| {
            h.iter()
                .map(|s| (s.train_nll.to_bits(), s.eval_nll.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn initial_loss_sits_near_ln_q() {
        let (vocab, data, mut config) = fixture();
        config.epochs = 1;
        let out = train(&config, &vocab, &data, &[], |_, _, _| Ok(())).unwrap();
        let ln_q = 4f64.ln();
        assert!(
            (out.history[0].train_nll - ln_q).abs() / ln_q < 0.02,
            "first-epoch nll {} too far from ln Q {}",
            out.history[0].train_nll,
            ln_q
        );
    }

    #[test]
    fn memorizes_one_example() {
        let (vocab, data, mut config) = fixture();
        config.epochs = 200;
        config.learning_rate = 0.0075;
        config.clip_norm = 0.25;
        let out = train(&config, &vocab, &data, &[], |_, _, _| Ok(())).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.train_nll < 0.1, "nll after 200 epochs: {}", last.train_nll);
    }

    #[test]
    fn empty_dataset_rejected() {
        let (vocab, _, config) = fixture();
        assert!(train(&config, &vocab, &[], &[], |_, _, _| Ok(())).is_err());
    }

    #[test]
    fn divergence_aborts_with_last_good_state() {
        let (vocab, data, mut config) = fixture();
        config.epochs = 20;
        // An absurd learning rate explodes the logits; the target probability
        // underflows to zero and the loss goes infinite.
        config.learning_rate = 1e18;
        let failure = train(&config, &vocab, &data, &[], |_, _, _| Ok(())).unwrap_err();
        assert!(matches!(failure.error, Error::NumericAbort { .. }));
        let out = failure.last_good.expect("last good state retained");
        assert!(out.checkpoint.opt.step >= 1);
        assert!(out.checkpoint.params.get("out.w").unwrap().is_finite());
    }
}
