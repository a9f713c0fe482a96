//! Synthetic task family for tests and benchmarks.
//!
//! Task `t` owns a latent `(w_t, c_t)` drawn around a shared mean:
//! `w_t = mu + task_scale * N(0, I)`, `c_t = offset_scale * N(0, 1)`. A sample
//! has standard normal dense features `x`, feature ids biased towards the
//! task's home block of the vocabulary, and score `z = w_t . x + c_t`.
//! Logistic mode labels `1[z + noise * Logistic(0,1) > 0]`, i.e. Bernoulli
//! `sigmoid(z / noise)`; regression mode labels `z + noise * N(0,1)`.
//! The shared mean makes a meta initialization useful; the per-task parts
//! are what one inner step on the support set has to pick up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metaio::MetaSample;

#[derive(Debug, Error, PartialEq)]
pub enum DataGenError {
    #[error("invalid task family: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Logistic,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFamily {
    pub num_tasks: usize,
    pub samples_per_task: usize,
    pub vocab_size: u64,
    pub dense_width: usize,
    pub ids_per_sample: usize,
    /// Probability that a feature id comes from the task's home block.
    pub home_fraction: f64,
    /// Scale of the shared mean `mu`.
    pub prior_scale: f64,
    /// Spread of `w_t` around `mu`.
    pub task_scale: f64,
    /// Spread of `c_t`.
    pub offset_scale: f64,
    pub noise: f64,
    pub mode: LabelMode,
    pub seed: u64,
}

impl Default for TaskFamily {
    fn default() -> Self {
        Self {
            num_tasks: 200,
            samples_per_task: 500,
            vocab_size: 10_000,
            dense_width: 8,
            ids_per_sample: 4,
            home_fraction: 0.8,
            prior_scale: 1.5,
            task_scale: 0.5,
            offset_scale: 1.0,
            noise: 0.3,
            mode: LabelMode::Logistic,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLatent {
    pub weights: Vec<f64>,
    pub offset: f64,
}

impl TaskLatent {
    pub fn score(&self, dense: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(dense)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.offset
    }
}

impl TaskFamily {
    pub fn validate(&self) -> Result<(), DataGenError> {
        let bad = |m: &str| Err(DataGenError::Invalid(m.to_string()));
        if self.num_tasks == 0 || self.samples_per_task == 0 {
            return bad("num_tasks and samples_per_task must be positive");
        }
        if self.vocab_size < self.num_tasks as u64 {
            return bad("vocab_size must be at least num_tasks");
        }
        if self.ids_per_sample == 0 {
            return bad("ids_per_sample must be positive");
        }
        if !(0.0..=1.0).contains(&self.home_fraction) {
            return bad("home_fraction must lie in [0, 1]");
        }
        for (name, v) in [
            ("prior_scale", self.prior_scale),
            ("task_scale", self.task_scale),
            ("offset_scale", self.offset_scale),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataGenError::Invalid(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    pub fn latents(&self) -> Result<Vec<TaskLatent>, DataGenError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mu: Vec<f64> = (0..self.dense_width)
            .map(|_| self.prior_scale * Self::normal(&mut rng))
            .collect();
        Ok((0..self.num_tasks)
            .map(|_| TaskLatent {
                weights: mu
                    .iter()
                    .map(|m| m + self.task_scale * Self::normal(&mut rng))
                    .collect(),
                offset: self.offset_scale * Self::normal(&mut rng),
            })
            .collect())
    }

    fn home_block(&self, task: usize) -> (u64, u64) {
        let size = self.vocab_size / self.num_tasks as u64;
        (task as u64 * size, size)
    }

    /// All samples, interleaved across tasks (sample `j` of every task, then
    /// sample `j + 1`), so the preprocessor has real sorting to do.
    pub fn generate(&self) -> Result<Vec<MetaSample>, DataGenError> {
        let latents = self.latents()?;
        let mut rngs: Vec<ChaCha8Rng> = (0..self.num_tasks)
            .map(|t| {
                let mut r = ChaCha8Rng::seed_from_u64(self.seed);
                r.set_stream(t as u64 + 1);
                r
            })
            .collect();
        let mut out = Vec::with_capacity(self.num_tasks * self.samples_per_task);
        for _ in 0..self.samples_per_task {
            for (t, rng) in rngs.iter_mut().enumerate() {
                out.push(self.sample(t, &latents[t], rng));
            }
        }
        Ok(out)
    }

    fn sample(&self, task: usize, latent: &TaskLatent, rng: &mut ChaCha8Rng) -> MetaSample {
        let (home_start, home_len) = self.home_block(task);
        let feature_ids = (0..self.ids_per_sample)
            .map(|_| {
                if rng.random::<f64>() < self.home_fraction {
                    home_start + rng.random_range(0..home_len)
                } else {
                    rng.random_range(0..self.vocab_size)
                }
            })
            .collect();
        let dense: Vec<f64> = (0..self.dense_width).map(|_| Self::normal(rng)).collect();
        let z = latent.score(&dense);
        let label = match self.mode {
            LabelMode::Logistic => {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                let eps = (u / (1.0 - u)).ln();
                if z + self.noise * eps > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LabelMode::Regression => z + self.noise * Self::normal(rng),
        };
        MetaSample {
            task_id: task as u64,
            feature_ids,
            dense_features: dense,
            label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskFamily {
        TaskFamily {
            num_tasks: 5,
            samples_per_task: 20,
            vocab_size: 100,
            ..TaskFamily::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let f = small();
        assert_eq!(f.generate().unwrap(), f.generate().unwrap());
        let g = TaskFamily { seed: 8, ..small() };
        assert_ne!(f.generate().unwrap(), g.generate().unwrap());
    }

    #[test]
    fn noiseless_regression_labels_follow_latents() {
        let f = TaskFamily {
            mode: LabelMode::Regression,
            noise: 0.0,
            ..small()
        };
        let lat = f.latents().unwrap();
        for s in f.generate().unwrap() {
            assert_eq!(s.label, lat[s.task_id as usize].score(&s.dense_features));
        }
    }

    #[test]
    fn tasks_have_distinct_latents() {
        let lat = small().latents().unwrap();
        for i in 0..lat.len() {
            for j in i + 1..lat.len() {
                let d: f64 = lat[i]
                    .weights
                    .iter()
                    .zip(&lat[j].weights)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    + (lat[i].offset - lat[j].offset).powi(2);
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn ids_stay_in_vocab_and_prefer_home() {
        let f = small();
        let samples = f.generate().unwrap();
        let mut home = 0;
        let mut total = 0;
        for s in &samples {
            let (start, len) = f.home_block(s.task_id as usize);
            for &id in &s.feature_ids {
                assert!(id < f.vocab_size);
                total += 1;
                home += usize::from(id >= start && id < start + len);
            }
        }
        assert!(home as f64 / total as f64 > 0.7);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let f = TaskFamily {
            vocab_size: 2,
            ..small()
        };
        assert!(f.generate().is_err());
        let f = TaskFamily {
            samples_per_task: 0,
            ..small()
        };
        assert!(f.validate().is_err());
    }
}
