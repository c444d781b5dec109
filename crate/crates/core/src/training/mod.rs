//! Supervised training of the depth network.

mod loss;
mod metrics;
mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, GrayImage};
use crate::network::{Checkpoint, Model};
use crate::tensor::{Graph, Tensor};

pub use loss::{
    berhu, berhu_grad, berhu_loss, berhu_loss_pinned, berhu_pinned, berhu_threshold,
    berhu_value_and_grad,
};
pub use metrics::{evaluate, MetricsReport};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub batch_size: usize,
    pub berhu_fraction: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Stop as soon as an epoch's mean training loss falls below this.
    pub target_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_epochs: 150,
            patience: 20,
            batch_size: 4,
            berhu_fraction: 0.24,
            split: [0.70, 0.15, 0.15],
            seed: 0,
            optimizer: OptimizerKind::Adam,
            target_train_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience >= self.max_epochs {
            return bad(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.berhu_fraction > 0.0 && self.berhu_fraction <= 1.0) {
            return bad(format!(
                "berhu_fraction {} outside (0, 1]",
                self.berhu_fraction
            ));
        }
        if self.split.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return bad(format!("split fractions {:?} outside [0, 1]", self.split));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} do not sum to 1", self.split));
        }
        Ok(())
    }
}

/// Partition sizes for `n` items. Train and validation sizes are floored,
/// the test partition takes the remainder.
pub fn split_counts(n: usize, split: [f64; 3]) -> (usize, usize, usize) {
    let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let train = floor(split[0]).min(n);
    let val = floor(split[1]).min(n - train);
    (train, val, n - train - val)
}

/// Seeded shuffle of `0..n` cut into train / validation / test indices.
pub fn split_indices(n: usize, split: [f64; 3], seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b, _) = split_counts(n, split);
    let test = idx.split_off(a + b);
    let val = idx.split_off(a);
    [idx, val, test]
}

/// One image with its normalized depth target, both `[1, 1, R, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub input: Tensor,
    pub target: Tensor,
}

impl Pair {
    pub fn from_maps(image: &GrayImage, depth: &DepthMap) -> Result<Self> {
        if image.width() != depth.width() || image.height() != depth.height() {
            return Err(Error::Shape(format!(
                "image {}x{} vs depth {}x{}",
                image.width(),
                image.height(),
                depth.width(),
                depth.height()
            )));
        }
        Ok(Self {
            input: image.to_tensor(),
            target: depth.to_normalized_tensor(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl SplitDataset {
    pub fn from_pairs(pairs: Vec<Pair>, split: [f64; 3], seed: u64) -> Self {
        let [tr, va, te] = split_indices(pairs.len(), split, seed);
        let pick = |ids: &[usize]| ids.iter().map(|&i| pairs[i].clone()).collect();
        Self {
            train: pick(&tr),
            val: pick(&va),
            test: pick(&te),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

fn batch_input(pairs: &[&Pair]) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<&Tensor> = pairs.iter().map(|p| &p.input).collect();
    let targets: Vec<&Tensor> = pairs.iter().map(|p| &p.target).collect();
    Ok((
        Tensor::concat_batch(&inputs)?,
        Tensor::concat_batch(&targets)?,
    ))
}

/// Mean per-batch BerHu loss of the eval-mode model over `pairs`.
pub fn validation_loss(
    model: &Model,
    pairs: &[Pair],
    batch_size: usize,
    fraction: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let (x, y) = batch_input(&refs)?;
        let pred = model.predict_tensor(&x)?;
        let (loss, _) = berhu_value_and_grad(&pred, &y, fraction)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

pub fn train(model: &mut Model, data: &SplitDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, config, |_| {})
}

/// Trains `model` in place, calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut Model,
    data: &SplitDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Input(format!(
            "training needs non-empty train and validation splits (got {} / {})",
            data.train.len(),
            data.val.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&Pair> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (x, y) = batch_input(&refs)?;
            let mut graph = Graph::new();
            let pass = model.forward(&mut graph, &x, true, &mut rng)?;
            let loss = berhu_loss(&mut graph, pass.output, &y, config.berhu_fraction)?;
            let value = graph.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}: training loss became {value}"
                )));
            }
            graph.backward(loss)?;
            model.absorb_grads(&mut graph, &pass);
            opt.step(&mut model.params_mut(), config.lr)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}: {e}")))?;
            model.zero_grads();
            total += value * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / data.train.len() as f64,
            val_loss: validation_loss(model, &data.val, config.batch_size, config.berhu_fraction)?,
            lr: config.lr,
        };
        on_epoch(&record);
        history.push(record);

        if best.as_ref().is_none_or(|(v, _, _)| record.val_loss < *v) {
            let meta = serde_json::json!({
                "epoch": epoch,
                "train_loss": record.train_loss,
                "val_loss": record.val_loss,
                "train_config": config,
            });
            best = Some((record.val_loss, epoch, Checkpoint::from_model(model, meta)));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if config.patience > 0 && since_best >= config.patience {
            stopped_early = true;
            break;
        }
        if config
            .target_train_loss
            .is_some_and(|t| record.train_loss < t)
        {
            stopped_early = true;
            break;
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        stopped_early,
    })
}

/// Eval-mode metrics in millimetres over `pairs`.
pub fn evaluate_model(model: &Model, pairs: &[Pair]) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(pairs.len());
    let mut gts = Vec::with_capacity(pairs.len());
    for p in pairs {
        preds.push(DepthMap::from_normalized(&model.predict_tensor(&p.input)?)?);
        gts.push(DepthMap::from_normalized(&p.target)?);
    }
    evaluate(&preds, &gts)
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
