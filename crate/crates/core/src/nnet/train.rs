use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AmsGrad, OptimizerState};
use super::{predict, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Indexable supervised samples that can be gathered into a network batch.
pub trait Samples<T>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch matrix in the network's input layout plus row-major targets.
    fn gather(&self, idx: &[usize]) -> (Array2<T>, Array1<T>);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Targets are divided by this before fitting and predictions multiplied
    /// back, so losses and RMSE are always reported in target units.
    #[serde(default = "one")]
    pub target_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn fnn(seed: u64) -> Self {
        Self { batch_size: 1024, lr: 1e-3, max_epochs: 60, patience: 5, seed, target_scale: 1.0 }
    }

    pub fn cnn(seed: u64) -> Self {
        Self { max_epochs: 30, ..Self::fnn(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch size, epochs and patience must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.target_scale > 0.0) {
            return Err(Error::Config("learning rate and target scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience rule on a validation metric (lower is better, strict improvement).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(value < b) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, value));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_rmse\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_rmse));
        }
        s
    }
}

/// Mini-batch AMSGrad with Xavier initialisation and early stopping.
/// Returns the parameters of the best validation epoch.
pub fn train<T: Scalar>(
    net: Network<T>,
    train_set: &dyn Samples<T>,
    val_set: &dyn Samples<T>,
    cfg: &TrainConfig,
) -> Result<(Network<T>, TrainLog)> {
    train_observed(net, train_set, val_set, cfg, &mut |_| {})
}

/// [`train`] with a callback invoked after every optimizer step.
pub fn train_observed<T: Scalar>(
    mut net: Network<T>,
    train_set: &dyn Samples<T>,
    val_set: &dyn Samples<T>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&OptimizerState<T>),
) -> Result<(Network<T>, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    net.xavier_init(cfg.seed);
    let mut opt = OptimizerState::new(net.param_count(), AmsGrad { lr: cfg.lr, ..AmsGrad::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5eed);
    let scale = T::lit(cfg.target_scale);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = net.clone();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        let mut n_targets = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.gather(batch);
            let y = y.mapv(|v| v / scale);
            let (loss, grads) = net.gradients(x.view(), y.view()).map_err(|e| {
                log::error!("epoch {epoch}: {e}");
                e
            })?;
            sse += loss.as_f64() * (y.len() as f64);
            n_targets += y.len();
            opt.step(net.params_mut(), &grads);
            observer(&opt);
        }
        let train_loss = sse / n_targets as f64 * cfg.target_scale * cfg.target_scale;
        let val_rmse = validation_rmse(&net, val_set, cfg.target_scale)?;
        if !train_loss.is_finite() || !val_rmse.is_finite() {
            log.epochs.push(EpochRecord { epoch, train_loss, val_rmse });
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
        }
        log.epochs.push(EpochRecord { epoch, train_loss, val_rmse });
        log::debug!("epoch {epoch}: train mse {train_loss:.4} val rmse {val_rmse:.4}");
        match stopper.observe(epoch, val_rmse) {
            StopDecision::Improved => best = net.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val) = stopper.best().expect("at least one epoch");
    log.best_epoch = best_epoch;
    log.best_val_rmse = best_val;
    Ok((best, log))
}

fn validation_rmse<T: Scalar>(net: &Network<T>, val: &dyn Samples<T>, scale: f64) -> Result<f64> {
    let pred = predict(net, val, 4096)?;
    let idx: Vec<usize> = (0..val.len()).collect();
    let out = net.output_dim();
    let mut sse = 0.0;
    for c in idx.chunks(4096) {
        let (_, y) = val.gather(c);
        let base = c[0] * out;
        for (k, t) in y.iter().enumerate() {
            let d = pred[base + k].as_f64() * scale - t.as_f64();
            sse += d * d;
        }
    }
    Ok((sse / pred.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_trace() {
        let vals = [5.0, 4.0, 4.1, 4.2, 4.3, 4.4, 4.5, 3.0];
        let mut es = EarlyStopping::new(5);
        let mut stopped_at = None;
        for (i, v) in vals.iter().enumerate() {
            if es.observe(i + 1, *v) == StopDecision::Stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(7));
        assert_eq!(es.best(), Some((2, 4.0)));
    }

    #[test]
    fn equal_value_is_not_an_improvement() {
        let mut es = EarlyStopping::new(2);
        assert_eq!(es.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(es.observe(2, 1.0), StopDecision::Continue);
        assert_eq!(es.observe(3, 1.0), StopDecision::Stop);
    }
}
