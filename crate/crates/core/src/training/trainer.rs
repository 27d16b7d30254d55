use rayon::prelude::*;

use super::{init_params, OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::linalg::{Real, Rng};
use crate::sequence::{
    bptt, truncated_bptt, unroll_forward, unroll_forward_with, DropoutPlan, ForwardOptions, GradSet, ModelLayout,
    ParamSet, SequenceSample, Topology,
};
use crate::tasks::{Checkpoint, Vocab};

/// What one optimizer step reports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Step counter after the update (first step is 1).
    pub step: u64,
    /// Summed sequence loss, averaged over the batch.
    pub loss: Real,
    /// `loss` divided by the longest sequence in the batch.
    pub norm_loss: Real,
    /// Global gradient norm before clipping.
    pub grad_norm: Real,
    pub clipped: bool,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss,norm_loss,grad_norm,clipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss, self.norm_loss, self.grad_norm, self.clipped as u8
        )
    }
}

/// Loss and averaged gradient of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: Real,
    pub norm_loss: Real,
    pub grads: GradSet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub targets: usize,
    /// Summed sequence loss per sample.
    pub loss_per_sample: Real,
    /// Cross-entropy per loss-bearing step.
    pub loss_per_target: Real,
    /// Fraction of targets whose argmax prediction is right.
    pub accuracy: Real,
}

/// Mini-batch training state. Every random draw (initialisation, data the
/// caller samples through [`Trainer::rng`], dropout) comes from one seeded
/// generator, so a run is a pure function of its config and data source.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ParamSet,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub topology: Topology,
    pub rng: Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(layout: &ModelLayout, config: TrainConfig, topology: Topology) -> Result<Self> {
        config.validate()?;
        layout.validate()?;
        let mut rng = Rng::new(config.seed);
        let params = init_params(layout, &config, &mut rng)?;
        let optimizer = OptimizerState::new(config.optimizer, &params);
        Ok(Self {
            params,
            optimizer,
            config,
            topology,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, topology: Topology) -> Result<Self> {
        ck.config.validate()?;
        if ck.optimizer.kind != ck.config.optimizer {
            return Err(Error::Format("optimizer state does not match config".into()));
        }
        Ok(Self {
            params: ck.params,
            optimizer: ck.optimizer,
            config: ck.config,
            topology,
            rng: Rng::from_state(ck.rng),
            step: ck.step,
        })
    }

    pub fn checkpoint(&self, vocab: Option<Vocab>, run: Option<serde_json::Value>) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            config: self.config.clone(),
            rng: self.rng.state(),
            step: self.step,
            vocab,
            run,
        }
    }

    fn sample_gradient(&self, sample: &SequenceSample, seed: u64) -> Result<(Real, GradSet)> {
        let mut drop_rng = Rng::new(seed);
        let dropout = if self.config.keep_prob < 1.0 {
            DropoutPlan::Sample {
                keep_prob: self.config.keep_prob,
                rng: &mut drop_rng,
            }
        } else {
            DropoutPlan::Off
        };
        let opts = ForwardOptions { initial: None, dropout };
        let trace = unroll_forward_with(&self.params, sample, self.topology, opts)?;
        let loss = trace.loss(sample)?;
        let back = match self.config.truncation {
            Some(k) => truncated_bptt(&self.params, &trace, sample, k)?,
            None => bptt(&self.params, &trace, sample)?,
        };
        Ok((loss, back.grads))
    }

    /// Averaged loss and gradient over `batch`. `seeds[i]` seeds the dropout
    /// masks of sample `i`. Per-sample results are summed in batch order
    /// whether or not they were computed in parallel.
    pub fn batch_gradient(&self, batch: &[SequenceSample], seeds: &[u64]) -> Result<BatchGradient> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if seeds.len() != batch.len() {
            return Err(Error::shape("batch_gradient seeds", batch.len(), seeds.len()));
        }
        let parts: Vec<Result<(Real, GradSet)>> = if self.config.parallel {
            batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(s, &seed)| self.sample_gradient(s, seed))
                .collect()
        } else {
            batch
                .iter()
                .zip(seeds)
                .map(|(s, &seed)| self.sample_gradient(s, seed))
                .collect()
        };

        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        for part in parts {
            let (loss, g) = part?;
            total += loss;
            grads.add_assign(&g)?;
        }
        let n = batch.len() as Real;
        let max_len = batch.iter().map(SequenceSample::len).max().unwrap_or(1);
        let loss = total / n;
        let norm_loss = super::normalize_loss(loss, max_len)?;
        let mut scale = 1.0 / n;
        if self.config.normalize_loss {
            scale /= max_len as Real;
        }
        grads.scale(scale);
        Ok(BatchGradient { loss, norm_loss, grads })
    }

    /// One optimizer step on `batch`. A non-finite loss or gradient is
    /// reported as [`Error::NonFinite`] before the parameters are touched.
    pub fn train_step(&mut self, batch: &[SequenceSample]) -> Result<StepMetrics> {
        let seeds: Vec<u64> = batch.iter().map(|_| self.rng.next_u64()).collect();
        let BatchGradient {
            loss,
            norm_loss,
            mut grads,
        } = self.batch_gradient(batch, &seeds)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let (grad_norm, clipped) = match self.config.clip_threshold {
            Some(c) => {
                let out = self.config.clip_mode.apply(&mut grads, c)?;
                (out.global_norm, out.applied)
            }
            None => (grads.global_norm(), false),
        };
        self.optimizer.apply(&mut self.params, &grads, &self.config.hyper())?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss,
            norm_loss,
            grad_norm,
            clipped,
        })
    }
}

/// Loss and accuracy of `params` on `samples` (no dropout).
pub fn evaluate(params: &ParamSet, samples: &[SequenceSample], topology: Topology) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut total = 0.0;
    let mut targets = 0usize;
    let mut correct = 0usize;
    for s in samples {
        let trace = unroll_forward(params, s, topology)?;
        total += trace.loss(s)?;
        for (t, out) in trace.outputs.iter().enumerate() {
            if let (Some(yhat), Some(y)) = (out, s.target_at(t)) {
                targets += 1;
                if yhat.argmax() == y.argmax() {
                    correct += 1;
                }
            }
        }
    }
    let targets_f = targets.max(1) as Real;
    Ok(EvalReport {
        samples: samples.len(),
        targets,
        loss_per_sample: total / samples.len() as Real,
        loss_per_target: total / targets_f,
        accuracy: correct as Real / targets_f,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::Arch;
    use crate::tasks::make_copy_task;

    fn trainer(arch: Arch, cfg: TrainConfig) -> Trainer {
        let layout = cfg.layout(arch, 4, 6, 3, 1);
        Trainer::new(&layout, cfg, Topology::many_to_one()).unwrap()
    }

    fn run(t: &mut Trainer, steps: usize) -> Vec<StepMetrics> {
        (0..steps)
            .map(|_| {
                let batch = make_copy_task(&mut t.rng, 4, 3, t.config.batch_size).unwrap();
                t.train_step(&batch).unwrap()
            })
            .collect()
    }

    #[test]
    fn same_seed_same_run() {
        let cfg = TrainConfig {
            batch_size: 4,
            keep_prob: 0.8,
            ..Default::default()
        };
        let a = run(&mut trainer(Arch::Gru, cfg.clone()), 5);
        let b = run(&mut trainer(Arch::Gru, cfg), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_matches_serial_bitwise() {
        for arch in Arch::ALL {
            let cfg = TrainConfig {
                batch_size: 8,
                keep_prob: 0.9,
                ..Default::default()
            };
            let mut serial = trainer(arch, cfg.clone());
            let mut par = trainer(arch, TrainConfig { parallel: true, ..cfg });
            assert_eq!(run(&mut serial, 4), run(&mut par, 4));
            assert_eq!(serial.params, par.params);
        }
    }

    #[test]
    fn checkpoint_resume_continues_exactly() {
        let cfg = TrainConfig {
            batch_size: 3,
            optimizer: crate::training::OptimizerKind::Rmsprop,
            ..Default::default()
        };
        let mut whole = trainer(Arch::Lstm, cfg.clone());
        let full = run(&mut whole, 6);

        let mut first = trainer(Arch::Lstm, cfg);
        let mut head = run(&mut first, 3);
        let ck = first.checkpoint(None, None);
        let mut second = Trainer::from_checkpoint(ck, Topology::many_to_one()).unwrap();
        head.extend(run(&mut second, 3));
        assert_eq!(head, full);
        assert_eq!(second.params, whole.params);
    }

    #[test]
    fn gradient_is_batch_mean() {
        let t = trainer(Arch::Rnn, TrainConfig::default());
        let batch = make_copy_task(&mut Rng::new(3), 4, 3, 2).unwrap();
        let both = t.batch_gradient(&batch, &[0, 0]).unwrap();
        let a = t.batch_gradient(&batch[..1], &[0]).unwrap();
        let b = t.batch_gradient(&batch[1..], &[0]).unwrap();
        assert!((both.loss - (a.loss + b.loss) / 2.0).abs() < 1e-12);
        let mut mean = a.grads.clone();
        mean.add_assign(&b.grads).unwrap();
        mean.scale(0.5);
        assert!(both.grads.max_abs_diff(&mean).unwrap() < 1e-12);
        assert_eq!(both.norm_loss, both.loss / 4.0);
    }

    #[test]
    fn normalize_loss_scales_gradient() {
        let batch = make_copy_task(&mut Rng::new(3), 5, 3, 2).unwrap();
        let plain = trainer(Arch::Gru, TrainConfig::default());
        let norm = trainer(
            Arch::Gru,
            TrainConfig {
                normalize_loss: true,
                ..Default::default()
            },
        );
        let g1 = plain.batch_gradient(&batch, &[0, 0]).unwrap().grads;
        let mut g2 = norm.batch_gradient(&batch, &[0, 0]).unwrap().grads;
        g2.scale(5.0);
        assert!(g1.max_abs_diff(&g2).unwrap() < 1e-12);
    }

    #[test]
    fn divergence_is_reported_and_params_untouched() {
        let mut t = trainer(Arch::Rnn, TrainConfig::default());
        t.params.head.w.as_mut_slice()[0] = Real::NAN;
        let before = t.params.clone().flatten();
        let batch = make_copy_task(&mut Rng::new(1), 4, 3, 2).unwrap();
        assert!(matches!(t.train_step(&batch), Err(Error::NonFinite(_))));
        let after = t.params.flatten();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(t.step, 0);
    }

    #[test]
    fn evaluate_counts_targets() {
        let t = trainer(Arch::Lstm, TrainConfig::default());
        let data = make_copy_task(&mut Rng::new(4), 4, 3, 10).unwrap();
        let r = evaluate(&t.params, &data, Topology::many_to_one()).unwrap();
        assert_eq!(r.targets, 10);
        assert!((r.loss_per_sample - r.loss_per_target).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.accuracy));
        // untrained model on 3 classes sits near ln 3
        assert!((r.loss_per_target - (3.0 as Real).ln()).abs() < 0.5);
    }

    #[test]
    fn metrics_row_format() {
        let m = StepMetrics {
            step: 3,
            loss: 1.5,
            norm_loss: 0.25,
            grad_norm: 2.0,
            clipped: true,
        };
        assert_eq!(m.csv_row(), "3,1.5,0.25,2,1");
        assert_eq!(
            StepMetrics::CSV_HEADER.split(',').count(),
            m.csv_row().split(',').count()
        );
    }
}
