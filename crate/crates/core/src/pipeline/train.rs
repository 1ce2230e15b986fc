use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::SeedFormer;
use super::optim::Adam;
use crate::autodiff::{Scalar, Tape};
use crate::data::resample_input;
use crate::error::{contract_err, Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::{training_loss_on_tape, LossBreakdown};

/// Owns a model and its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: SeedFormer<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    /// Optimizer updates applied so far.
    pub step: usize,
}

/// Brings `partial` to the configured input size. Clouds already at that
/// size pass through untouched.
pub fn prepare_input(partial: &PointCloud, input_points: usize, seed: u64) -> Result<PointCloud> {
    if partial.len() == input_points {
        Ok(partial.clone())
    } else {
        resample_input(partial, input_points, seed)
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: SeedFormer<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&model.store, config.beta1, config.beta2, config.adam_eps);
        Ok(Trainer {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    /// Forward and backward for one pair, adding `scale` times the gradient
    /// of the total loss into the store.
    fn accumulate(&mut self, partial: &PointCloud, gt: &PointCloud, scale: f64) -> Result<LossBreakdown> {
        let input = prepare_input(partial, self.model.config.input_points, self.config.seed ^ self.step as u64)?;
        let mut tape = Tape::new();
        let vars = self.model.forward_on_tape(&mut tape, &input)?;
        let stages: Vec<_> = vars.stages.iter().map(|s| s.positions).collect();
        let loss = training_loss_on_tape(&mut tape, vars.seeds.coords, &stages, partial, gt)?;
        let breakdown = loss.breakdown(&tape);
        if !breakdown.total.is_finite() {
            return Err(self.numerics_error("loss", &breakdown));
        }
        let scaled = tape.mul_scalar(loss.total, scale)?;
        let grads = tape.backward(scaled)?;
        grads.accumulate_into(&tape, &mut self.model.store);
        Ok(breakdown)
    }

    fn numerics_error(&self, what: &str, breakdown: &LossBreakdown) -> Error {
        let mut msg = format!(
            "non-finite {what} at step {}: stage cds {:?}, partial matching {}, total {}",
            self.step, breakdown.stage_cds, breakdown.partial_matching, breakdown.total
        );
        let bad: Vec<&str> = self
            .model
            .store
            .iter()
            .filter(|(_, p)| !p.value.is_finite() || !p.grad.is_finite())
            .map(|(_, p)| p.name.as_str())
            .collect();
        if !bad.is_empty() {
            write!(msg, "; non-finite parameters or gradients: {}", bad.join(", ")).unwrap();
        }
        Error::Numerics(msg)
    }

    /// One optimizer update from the mean gradient over `batch`. Returns the
    /// mean loss breakdown.
    pub fn train_batch(&mut self, batch: &[(&PointCloud, &PointCloud)]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(contract_err!("empty training batch"));
        }
        self.model.store.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut cds: Vec<f64> = Vec::new();
        let mut pm = 0.0;
        for (partial, gt) in batch {
            let b = self.accumulate(partial, gt, scale)?;
            if cds.is_empty() {
                cds = vec![0.0; b.stage_cds.len()];
            }
            for (acc, v) in cds.iter_mut().zip(&b.stage_cds) {
                *acc += v * scale;
            }
            pm += b.partial_matching * scale;
        }
        let mean = LossBreakdown::new(cds, pm);
        if self.model.store.iter().any(|(_, p)| !p.grad.is_finite()) {
            return Err(self.numerics_error("gradient", &mean));
        }
        let lr = self.config.learning_rate_at(self.step);
        self.optimizer.update(&mut self.model.store, lr)?;
        self.step += 1;
        Ok(mean)
    }

    pub fn train_step(&mut self, partial: &PointCloud, gt: &PointCloud) -> Result<LossBreakdown> {
        self.train_batch(&[(partial, gt)])
    }

    /// Runs `config.steps` updates over `pairs`, reshuffled every epoch from
    /// `config.seed`. Batches of `config.accumulate` never straddle epochs.
    pub fn fit(
        &mut self,
        pairs: &[(PointCloud, PointCloud)],
        mut on_step: impl FnMut(usize, &LossBreakdown),
    ) -> Result<Vec<LossBreakdown>> {
        if pairs.is_empty() {
            return Err(contract_err!("no training pairs"));
        }
        let b = self.config.accumulate.min(pairs.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut history = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            if cursor + b > order.len() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch: Vec<_> = order[cursor..cursor + b]
                .iter()
                .map(|&i| (&pairs[i].0, &pairs[i].1))
                .collect();
            cursor += b;
            let loss = self.train_batch(&batch)?;
            on_step(self.step, &loss);
            history.push(loss);
        }
        Ok(history)
    }
}

/// CSV header matching [`loss_csv_row`] for `outputs` stage terms.
pub fn loss_csv_header(outputs: usize) -> String {
    let mut s = String::from("step");
    for i in 0..outputs {
        if i == 0 {
            s.push_str(",cd_seeds");
        } else {
            write!(s, ",cd_stage{i}").unwrap();
        }
    }
    s.push_str(",partial_matching,total");
    s
}

pub fn loss_csv_row(step: usize, loss: &LossBreakdown) -> String {
    let mut s = step.to_string();
    for v in &loss.stage_cds {
        write!(s, ",{v}").unwrap();
    }
    write!(s, ",{},{}", loss.partial_matching, loss.total).unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize;
    use crate::pipeline::config::ModelConfig;

    fn pairs() -> Vec<(PointCloud, PointCloud)> {
        synthesize(3, 64, 48, 5)
            .unwrap()
            .into_iter()
            .map(|s| (s.partial, s.gt))
            .collect()
    }

    #[test]
    fn identical_trainers_give_identical_losses() {
        let data = pairs();
        let run = || {
            let m = SeedFormer::<f32>::new(ModelConfig::tiny()).unwrap();
            let mut t = Trainer::new(m, TrainConfig::default()).unwrap();
            let a = t.train_step(&data[0].0, &data[0].1).unwrap();
            let b = t.train_step(&data[1].0, &data[1].1).unwrap();
            (a, b, t.model.store.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = pairs();
        let m = SeedFormer::<f32>::new(ModelConfig::tiny()).unwrap();
        let before: Vec<_> = m.store.iter().map(|(_, p)| p.value.clone()).collect();
        let config = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(m, config).unwrap();
        let loss = t.train_step(&data[0].0, &data[0].1).unwrap();
        assert!(loss.total.is_finite() && loss.total > 0.0);
        assert_eq!(loss.stage_cds.len(), 3);
        let after: Vec<_> = t.model.store.iter().map(|(_, p)| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn accumulated_batch_averages_losses() {
        let data = pairs();
        let m = SeedFormer::<f64>::new(ModelConfig::tiny()).unwrap();
        let mut t = Trainer::new(m.clone(), TrainConfig::default()).unwrap();
        let a = t.train_step(&data[0].0, &data[0].1).unwrap();
        let mut t = Trainer::new(m.clone(), TrainConfig::default()).unwrap();
        let b = t.train_step(&data[1].0, &data[1].1).unwrap();
        let mut t = Trainer::new(m, TrainConfig::default()).unwrap();
        let ab = t
            .train_batch(&[(&data[0].0, &data[0].1), (&data[1].0, &data[1].1)])
            .unwrap();
        assert!((ab.total - 0.5 * (a.total + b.total)).abs() < 1e-12);
    }

    #[test]
    fn csv_rows_line_up_with_header() {
        let loss = LossBreakdown::new(vec![0.5, 0.25, 0.125], 0.0625);
        let h = loss_csv_header(3);
        let r = loss_csv_row(7, &loss);
        assert_eq!(h, "step,cd_seeds,cd_stage1,cd_stage2,partial_matching,total");
        assert_eq!(r, "7,0.5,0.25,0.125,0.0625,0.9375");
    }

    #[test]
    fn fit_runs_configured_steps() {
        let data = pairs();
        let m = SeedFormer::<f32>::new(ModelConfig::tiny()).unwrap();
        let config = TrainConfig {
            steps: 4,
            accumulate: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(m, config).unwrap();
        let mut seen = Vec::new();
        let h = t.fit(&data, |s, _| seen.push(s)).unwrap();
        assert_eq!(h.len(), 4);
        assert_eq!(seen, vec![1, 2, 3, 4]);
        assert_eq!(t.optimizer.step, 4);
    }
}
