//! Loss, epoch loop over augmented training images, and evaluation on
//! untouched validation images.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg32;
use rayon::prelude::*;

use crate::augment::{apply_augment, draw_augment_params, image_rng, mix_seed};
use crate::error::{Error, Result};
use crate::imageio::load_image;
use crate::manifest::ManifestEntry;
use crate::network::{build_paper_cnn, prediction_from_probs, Model, DEFAULT_INPUT_SIZE, MIN_INPUT_SIZE};
use crate::optim::{Optimizer, OptimizerRegistry};
use crate::ratings::Task;
use crate::tensor::{Scalar, Tensor};

pub const LOG_CLAMP: f64 = 1e-12;
const SHUFFLE_STREAM: u64 = 0x5348_5546; // "SHUF"

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Name looked up in [`OptimizerRegistry`].
    pub optimizer: String,
    pub seed: u64,
    pub input_size: usize,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: "adam".into(),
            seed: 0,
            input_size: DEFAULT_INPUT_SIZE,
            task: Task::Warmth,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.input_size < MIN_INPUT_SIZE {
            return Err(Error::Config(format!(
                "input size must be at least {MIN_INPUT_SIZE}, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// A decoded image with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
}

/// Loads and resizes every entry's image, in entry order.
pub fn load_samples(entries: &[ManifestEntry], input_size: usize) -> Result<Vec<Sample>> {
    entries
        .par_iter()
        .map(|e| {
            Ok(Sample {
                image: load_image(&e.path, input_size)?,
                label: e.label,
            })
        })
        .collect()
}

/// `−(1/N)·Σ ln(max(p[i, yᵢ], 1e-12))`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let n = probs.shape()[0];
    if labels.len() != n || probs.shape() != [n, 2] {
        return Err(Error::dim("cross_entropy", probs.shape(), &[labels.len()]));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label > 1 {
            return Err(Error::Label { index: i, label });
        }
        total += probs.data()[i * 2 + label].as_f64().max(LOG_CLAMP).ln();
    }
    Ok(-total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Visiting order of the training set in one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Pcg32::seed_from_u64(mix_seed(&[seed, epoch as u64, SHUFFLE_STREAM])));
    order
}

/// Training image `index` as seen in `epoch`, freshly augmented from its own
/// random stream.
pub fn augmented_sample(sample: &Sample, seed: u64, epoch: usize, index: usize) -> Tensor<f32> {
    let params = draw_augment_params(&mut image_rng(seed, epoch, index));
    apply_augment(&sample.image, &params)
}

fn gather<'a>(images: impl Iterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let owned: Vec<Tensor<f32>> = images.cloned().collect();
    Tensor::stack(&owned)
}

fn count_correct(probs: &Tensor<f32>, labels: &[usize]) -> usize {
    probs
        .data()
        .chunks(2)
        .zip(labels)
        .filter(|(p, &l)| prediction_from_probs(p[0], p[1]).class == l)
        .count()
}

/// One pass over shuffled mini-batches with an optimizer update per batch.
/// Returns the sample-weighted mean loss and accuracy, both measured on the
/// augmented batches before each update.
pub fn train_epoch(
    model: &mut Model<f32>,
    optimizer: &mut dyn Optimizer<f32>,
    train: &[Sample],
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let order = epoch_order(config.seed, epoch, train.len());
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for batch in order.chunks(config.batch_size) {
        let augmented: Vec<Tensor<f32>> = batch
            .par_iter()
            .map(|&i| augmented_sample(&train[i], config.seed, epoch, i))
            .collect();
        let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
        let input = gather(augmented.iter())?;
        let (probs, cache) = model.forward(&input)?;
        loss_sum += cross_entropy(&probs, &labels)? * batch.len() as f64;
        correct += count_correct(&probs, &labels);
        let grads = model.backward(&cache, &labels)?;
        optimizer.step(model.params_mut(), &grads.tensors)?;
    }
    Ok(EpochStats {
        loss: loss_sum / train.len() as f64,
        accuracy: correct as f64 / train.len() as f64,
    })
}

/// Accuracy and confusion matrix (`[true][predicted]`) on unaugmented images.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: [[usize; 2]; 2],
}

impl Evaluation {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

const EVAL_BATCH: usize = 32;

pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let mut confusion = [[0usize; 2]; 2];
    for chunk in samples.chunks(EVAL_BATCH) {
        let input = gather(chunk.iter().map(|s| &s.image))?;
        let (probs, _) = model.forward(&input)?;
        for (p, s) in probs.data().chunks(2).zip(chunk) {
            if s.label > 1 {
                return Err(Error::Label { index: 0, label: s.label });
            }
            confusion[s.label][prediction_from_probs(p[0], p[1]).class] += 1;
        }
    }
    let correct = confusion[0][0] + confusion[1][1];
    Ok(Evaluation {
        accuracy: correct as f64 / samples.len() as f64,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    /// Validation confusion matrix of the returned checkpoint.
    pub confusion: [[usize; 2]; 2],
}

impl Metrics {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Trains from a fresh model and returns the checkpoint with the best
/// validation accuracy (earliest epoch on ties) plus the full history.
pub fn fit(config: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<(Model<f32>, Metrics)> {
    fit_with(config, train, val, |_| {})
}

/// [`fit`] with a callback after every epoch, e.g. for progress output.
pub fn fit_with(
    config: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model<f32>, Metrics)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut model = build_paper_cnn(config.input_size, config.seed)?;
    let mut optimizer = OptimizerRegistry::default().create(&config.optimizer, config.learning_rate)?;

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(Model<f32>, usize, Evaluation)> = None;
    for epoch in 0..config.epochs {
        let stats = train_epoch(&mut model, optimizer.as_mut(), train, config, epoch)?;
        let eval = evaluate(&model, val)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_acc: eval.accuracy,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(_, _, b)| eval.accuracy > b.accuracy) {
            best = Some((model.clone(), epoch + 1, eval));
        }
    }
    let (model, best_epoch, eval) = best.expect("at least one epoch");
    Ok((
        model,
        Metrics {
            history,
            best_epoch,
            confusion: eval.confusion,
        },
    ))
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_acc";

pub fn write_history_to<W: Write>(mut w: W, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6}",
            r.epoch, r.train_loss, r.train_acc, r.val_acc
        )?;
    }
    w.flush()
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_history_to(std::io::BufWriter::new(file), history).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;

    #[test]
    fn cross_entropy_cases() {
        let onehot = Tensor::new(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(cross_entropy(&onehot, &[0, 1]).unwrap(), 0.0);
        let half = Tensor::new(&[1, 2], vec![0.5f64, 0.5]).unwrap();
        assert!((cross_entropy(&half, &[1]).unwrap() - 0.693147).abs() < 1e-6);
        // clamped, so still finite
        assert!((cross_entropy(&onehot, &[1, 0]).unwrap() - 27.631021).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_direct_sum() {
        let p = [0.2, 0.8, 0.65, 0.35, 0.999, 0.001];
        let probs = Tensor::new(&[3, 2], p.to_vec()).unwrap();
        let labels = [1, 1, 0];
        let want = -((0.8f64).ln() + (0.35f64).ln() + (0.999f64).ln()) / 3.0;
        assert!((cross_entropy(&probs, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { input_size: 10, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn empty_splits_are_rejected() {
        let cfg = TrainConfig { input_size: 24, ..TrainConfig::default() };
        let s = Sample { image: Tensor::zeros(&[3, 24, 24]), label: 0 };
        assert!(fit(&cfg, &[], std::slice::from_ref(&s)).is_err());
        assert!(fit(&cfg, std::slice::from_ref(&s), &[]).is_err());
        let mut m = build_paper_cnn(24, 0).unwrap();
        assert!(train_epoch(&mut m, &mut Adam::new(1e-3), &[], &cfg, 0).is_err());
        assert!(evaluate(&m, &[]).is_err());
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(3, 1, 50);
        assert_ne!(o, (0..50).collect::<Vec<_>>());
        assert_eq!(o, epoch_order(3, 1, 50));
        assert_ne!(o, epoch_order(3, 2, 50));
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn history_format() {
        let mut buf = Vec::new();
        let rec = EpochRecord { epoch: 1, train_loss: 0.5, train_acc: 0.75, val_acc: 1.0 };
        write_history_to(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,train_acc,val_acc\n1,0.500000,0.750000,1.000000\n"
        );
    }
}
