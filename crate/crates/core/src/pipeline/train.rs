//! Stage-wise toy training with Adam.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{level_index, ModelConfig, TrainConfig};
use super::loss::multi_level_loss_on_tape;
use super::synthetic::TrainSample;
use super::{forward, forward_on_tape, ModelWeights, Stage};
use crate::error::{Error, Result};
use crate::flowio::aee;
use crate::tensor::{Tape, Tensor};

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub stage: usize,
    pub iteration: usize,
    pub global_iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub curve: Vec<LossRecord>,
}

/// Level 6 M:S, then level 6 M:S:R, then one stage per finer level down to
/// `finest_level`.
pub fn training_stages(finest_level: usize) -> Vec<Stage> {
    let mut stages = vec![Stage { finest_level: 6, regularize_finest: false }];
    stages.extend((finest_level..=6).rev().map(|k| Stage { finest_level: k, regularize_finest: true }));
    stages
}

/// Base rate halved once per milestone reached (counted within the stage).
pub fn learning_rate(base: f64, milestones: &[usize], iteration: usize) -> f64 {
    let halvings = milestones.iter().filter(|&&m| iteration >= m).count();
    base * 0.5f64.powi(halvings as i32)
}

/// Adam over named parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam { beta1, beta2, epsilon, step: 0, moments: IndexMap::new() }
    }

    pub fn step(&mut self, weights: &mut ModelWeights<f32>, grads: &IndexMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let w = weights.get_mut(name)?;
            let n = w.numel();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.epsilon);
                *wi = (*wi as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradients of one sample.
fn sample_gradients(
    weights: &ModelWeights<f32>,
    cfg: &ModelConfig,
    train: &TrainConfig,
    sample: &TrainSample,
    stage: Stage,
) -> Result<(f64, IndexMap<String, Tensor<f32>>)> {
    let mut tape = Tape::new();
    let vars = forward_on_tape(&mut tape, weights, cfg, &sample.pair, stage)?;
    let loss = multi_level_loss_on_tape(&mut tape, &vars, sample.flow.tensor(), train.loss, &train.loss_weights)?;
    let value = tape.value(loss).item() as f64;
    Ok((value, tape.backward(loss)?.into_params()))
}

/// Trains a fresh model stage by stage. `on_record` sees every loss-curve
/// row as it is produced.
pub fn train_toy(
    dataset: &[TrainSample],
    cfg: &ModelConfig,
    train: &TrainConfig,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut weights = ModelWeights::<f32>::init(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    let mut curve = Vec::new();
    let mut global = 0;
    for (stage_idx, stage) in training_stages(train.finest_level).into_iter().enumerate() {
        let level = stage.finest_level;
        if level < 6 {
            weights.copy_level(level + 1, level);
        }
        let base = train.learning_rates[level_index(level)];
        let mut adam = Adam::new(train.adam_beta1, train.adam_beta2, train.adam_epsilon);
        for it in 0..train.iterations_per_stage {
            let lr = learning_rate(base, &train.lr_milestones, it);
            let mut total = 0.0;
            let mut acc: IndexMap<String, Tensor<f32>> = IndexMap::new();
            for _ in 0..train.batch_size {
                let sample = &dataset[rng.random_range(0..dataset.len())];
                let (loss, grads) = sample_gradients(&weights, cfg, train, sample, stage)?;
                total += loss;
                for (name, g) in grads {
                    match acc.get_mut(&name) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            let loss = total / train.batch_size as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { stage: stage_idx, iteration: it, loss });
            }
            let inv = 1.0 / train.batch_size as f32;
            for g in acc.values_mut() {
                *g = g.scale(inv);
            }
            let record = LossRecord { stage: stage_idx, iteration: it, global_iteration: global, lr, loss };
            on_record(&record);
            curve.push(record);
            adam.step(&mut weights, &acc, lr)?;
            global += 1;
        }
    }
    Ok(TrainOutcome { weights, curve })
}

/// Mean full-resolution AEE over `samples`.
pub fn evaluate_aee(weights: &ModelWeights<f32>, cfg: &ModelConfig, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let est = forward(&s.pair, weights, cfg)?;
        total += aee(&est.flow, &s.flow, None)?;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_schedule() {
        let s = training_stages(2);
        assert_eq!(s.len(), 6);
        assert_eq!(s[0], Stage { finest_level: 6, regularize_finest: false });
        assert_eq!(s[1], Stage { finest_level: 6, regularize_finest: true });
        assert_eq!(s[5], Stage { finest_level: 2, regularize_finest: true });
        assert_eq!(training_stages(5).len(), 3);
    }

    #[test]
    fn halving_at_milestones() {
        let m = [3, 5];
        let lrs: Vec<f64> = (0..7).map(|i| learning_rate(1e-3, &m, i)).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = ModelWeights::<f32>::new();
        w.insert("p", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut g = IndexMap::new();
        g.insert("p".to_string(), Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(&mut w, &g, 0.01).unwrap();
        let p = w.get("p").unwrap().data();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - 1.01).abs() < 1e-6);
    }
}
