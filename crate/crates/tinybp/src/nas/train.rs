//! Alternating first-order optimization of a supernet.
//!
//! Each epoch runs two phases: regular weights take gradient steps against
//! the task loss on the training split, then branch logits take steps
//! against task loss plus the weighted cost term on the validation split.
//! Keeping the two splits apart stops the logits from memorizing the same
//! examples the weights fit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TrainData;
use crate::nas::{nas_loss, SuperNet};
use crate::tensor::{backward, ops, Adam};

#[derive(Debug, Clone, Copy)]
pub struct NasTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for regular weights.
    pub lr_w: f64,
    /// Step size for branch logits.
    pub lr_theta: f64,
    /// Weight of the expected-cost term in the logit objective.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for NasTrainConfig {
    fn default() -> Self {
        NasTrainConfig {
            epochs: 5,
            batch_size: 32,
            lr_w: 1e-3,
            lr_theta: 1e-2,
            lambda: 0.0,
            seed: 0,
        }
    }
}

/// Run the alternation. Returns per-epoch `(train loss, validation
/// objective)` means. Empty splits, a negative cost weight, or a non-finite
/// loss abort with an error.
pub fn train_supernet(
    sn: &mut SuperNet,
    train: &TrainData,
    val: &TrainData,
    cfg: &NasTrainConfig,
) -> Result<Vec<(f64, f64)>> {
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::Invalid(format!(
            "cost weight must be finite and non-negative, got {}",
            cfg.lambda
        )));
    }
    if train.n == 0 || val.n == 0 {
        return Err(Error::Invalid(
            "architecture search needs non-empty train and validation splits".into(),
        ));
    }

    let mut w_opt = Adam::new(sn.weight_params(), cfg.lr_w as f32);
    let mut t_opt = Adam::new(sn.theta_params(), cfg.lr_theta as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train_order: Vec<usize> = (0..train.n).collect();
    let mut val_order: Vec<usize> = (0..val.n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        train_order.shuffle(&mut rng);
        let mut train_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in train_order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let pred = sn.forward(&x, true)?;
            let loss = ops::mse(&pred, &y)?;
            let lv = loss.item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("weight-phase loss became {lv}")));
            }
            train_loss += lv;
            batches += 1;
            backward(&loss)?;
            w_opt.step()?;
            // The same backward pass filled logit gradients; drop them so
            // the next logit step sees only its own phase.
            w_opt.zero_grad();
            t_opt.zero_grad();
        }
        let train_loss = train_loss / batches.max(1) as f64;

        val_order.shuffle(&mut rng);
        let mut val_obj = 0.0f64;
        let mut batches = 0usize;
        for chunk in val_order.chunks(cfg.batch_size) {
            let (x, y) = val.batch(chunk)?;
            let pred = sn.forward(&x, true)?;
            let task = ops::mse(&pred, &y)?;
            let obj = nas_loss(&task, &sn.expected_cost()?, cfg.lambda)?;
            let ov = obj.item() as f64;
            if !ov.is_finite() {
                return Err(Error::Numerical(format!("logit-phase objective became {ov}")));
            }
            val_obj += ov;
            batches += 1;
            backward(&obj)?;
            t_opt.step()?;
            t_opt.zero_grad();
            w_opt.zero_grad();
        }
        log.push((train_loss, val_obj / batches.max(1) as f64));
    }
    Ok(log)
}
