use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, EncodedExample, FeatureStore, Vocabulary, PAD};
use crate::error::{MtnError, Result};
use crate::model::MtnModel;
use crate::numerics::{
    adam_step, clip_grad_norm, noam_lr, AdamConfig, AdamState, Gradients, Graph, Real, ScheduleConfig, Var,
};

use super::checkpoint::Checkpoint;

/// Global gradient-norm ceiling applied before every update.
pub const CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stops after this many updates even if epochs remain.
    pub max_steps: Option<u64>,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Validate every this many steps; 0 validates at the end of each epoch.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 17,
            max_steps: None,
            warmup_steps: 9660,
            label_smoothing: 0.1,
            batch_size: 32,
            seed: 1,
            checkpoint_dir: None,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MtnError::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(MtnError::config("train.batch_size", "must be at least 1"));
        }
        if self.warmup_steps == 0 {
            return Err(MtnError::config("train.warmup_steps", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(MtnError::config(
                "train.label_smoothing",
                format!("{} outside [0, 1)", self.label_smoothing),
            ));
        }
        Ok(())
    }
}

/// With probability `p`, keeps the first `i` tokens for `i` uniform on
/// `2..=L-1`. Targets of length 3 or less pass through.
pub fn crop_target(target: &[usize], p: f64, rng: &mut impl Rng) -> Vec<usize> {
    let len = target.len();
    if len <= 3 || rng.gen::<f64>() >= p {
        return target.to_vec();
    }
    let i = rng.gen_range(2..len);
    target[..i].to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub response: f64,
    pub query: Option<f64>,
}

/// Smoothed response loss plus, when the variant regenerates the query, the
/// query reconstruction loss.
pub fn compute_loss<T: Real>(
    g: &mut Graph<T>,
    model: &MtnModel<T>,
    batch: &Batch,
    label_smoothing: f64,
) -> Result<(Var, LossParts)> {
    if batch.size() == 0 || batch.label_count() == 0 {
        return Err(MtnError::contract("loss over an empty batch"));
    }
    let out = model.forward(g, batch)?;
    let response = g.smoothed_nll(out.response_logits, &batch.labels, label_smoothing, PAD)?;
    let response_value = g.value(response).data()[0].to_f64().unwrap_or(f64::NAN);
    match out.query_logits {
        Some(q) => {
            let query = g.smoothed_nll(q, &batch.query.ids, label_smoothing, PAD)?;
            let query_value = g.value(query).data()[0].to_f64().unwrap_or(f64::NAN);
            let total = g.add(response, query)?;
            Ok((
                total,
                LossParts {
                    total: response_value + query_value,
                    response: response_value,
                    query: Some(query_value),
                },
            ))
        }
        None => Ok((
            response,
            LossParts {
                total: response_value,
                response: response_value,
                query: None,
            },
        )),
    }
}

/// Per-token response perplexity without smoothing, in eval mode.
pub fn perplexity<T: Real>(
    model: &MtnModel<T>,
    examples: &[EncodedExample],
    features: &FeatureStore,
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(MtnError::contract("perplexity over no examples"));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedExample> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs, features)?;
        let mut g = Graph::eval();
        let out = model.forward(&mut g, &batch)?;
        let loss = g.smoothed_nll(out.response_logits, &batch.labels, 0.0, PAD)?;
        let count = batch.label_count();
        nll += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN) * count as f64;
        tokens += count;
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub step: u64,
    pub perplexity: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub validations: Vec<Validation>,
    pub best: Option<Validation>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn last_step(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.step)
    }
}

/// Returned by the validation hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Trains `model` in place. After each validation the hook sees the record
/// and the current model and may stop training.
///
/// With a checkpoint directory, every validation writes `step-NNNNNN/` and
/// refreshes `best/` whenever perplexity improves.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut MtnModel<f32>,
    vocab: &Vocabulary,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    features: &FeatureStore,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&Validation, &MtnModel<f32>) -> Control,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(MtnError::Data("training set is empty".into()));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(MtnError::Data(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let schedule = ScheduleConfig::new(model.config.dim, cfg.warmup_steps)?;
    let adam_cfg = AdamConfig::default();
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = model.config.sim_probability;
    let mut report = TrainReport::default();
    let mut step = 0u64;

    let mut validate = |step: u64, model: &MtnModel<f32>, adam: &AdamState<f32>, report: &mut TrainReport| {
        let set = if valid_set.is_empty() { train_set } else { valid_set };
        let ppl = perplexity(model, set, features, cfg.batch_size)?;
        let mut record = Validation {
            step,
            perplexity: ppl,
            checkpoint: None,
        };
        if let Some(dir) = &cfg.checkpoint_dir {
            let ckpt = Checkpoint::new(model, vocab, step, Some(adam.clone()));
            let path = dir.join(format!("step-{step:06}"));
            ckpt.save(&path)?;
            record.checkpoint = Some(path);
            if report.best.as_ref().is_none_or(|b| ppl < b.perplexity) {
                ckpt.save(&dir.join("best"))?;
            }
        }
        log::info!("step {step}: validation perplexity {ppl:.4}");
        if report.best.as_ref().is_none_or(|b| ppl < b.perplexity) {
            report.best = Some(record.clone());
        }
        report.validations.push(record.clone());
        Ok::<_, MtnError>(hook(&record, model))
    };

    'epochs: for epoch in 0..cfg.epochs {
        let batches = make_batches(train_set, cfg.batch_size, &mut rng)?;
        for indices in batches {
            step += 1;
            let refs: Vec<&EncodedExample> = indices.iter().map(|&i| &train_set[i]).collect();
            let cropped: Vec<Vec<usize>> = refs.iter().map(|e| crop_target(&e.target, p, &mut rng)).collect();
            let targets: Vec<&[usize]> = cropped.iter().map(Vec::as_slice).collect();
            let batch = Batch::new(&refs, &targets, features)?;

            let mut g = Graph::new(true, rng.gen());
            let (loss, parts) = compute_loss(&mut g, model, &batch, cfg.label_smoothing)?;
            if !parts.total.is_finite() {
                return Err(MtnError::NonFinite(format!(
                    "loss became {} at step {step} (epoch {epoch})",
                    parts.total
                )));
            }
            g.backward(loss)?;
            let mut grads = Gradients::zeros_like(&model.params);
            g.accumulate_param_grads(&mut grads);
            drop(g);
            let grad_norm = clip_grad_norm(&mut grads, CLIP_NORM);
            let lr = noam_lr(step, &schedule);
            adam_step(&mut model.params, &grads, &mut adam, lr, &adam_cfg)
                .map_err(|e| MtnError::NonFinite(format!("step {step}: {e}")))?;
            log::debug!("step {step} lr {lr:.3e} loss {:.4}", parts.total);
            report.steps.push(StepLog {
                step,
                epoch,
                lr,
                loss: parts,
                grad_norm,
            });

            let last = cfg.max_steps == Some(step);
            if cfg.validate_every > 0 && (step.is_multiple_of(cfg.validate_every) || last)
                && validate(step, model, &adam, &mut report)? == Control::Stop {
                    report.stopped_early = !last;
                    break 'epochs;
                }
            if last {
                break 'epochs;
            }
        }
        if cfg.validate_every == 0 && validate(step, model, &adam, &mut report)? == Control::Stop {
            report.stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_matches_worked_example() {
        // <sos> there is just one person <eos>
        let t = [1, 10, 11, 12, 13, 14, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen_five = false;
        for _ in 0..200 {
            let c = crop_target(&t, 1.0, &mut rng);
            assert!(c.len() >= 2 && c.len() <= 6);
            assert_eq!(c[..], t[..c.len()]);
            seen_five |= c == [1, 10, 11, 12, 13];
        }
        assert!(seen_five);
    }

    #[test]
    fn crop_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = [1, 5, 6, 7, 2];
        for _ in 0..50 {
            assert_eq!(crop_target(&t, 0.0, &mut rng), t);
            assert_eq!(crop_target(&[1, 5, 2], 1.0, &mut rng), [1, 5, 2]);
        }
    }
}
