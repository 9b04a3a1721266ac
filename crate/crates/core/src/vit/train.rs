use super::class::DefectClass;
use super::config::OptimizerConfig;
use super::model::{Trainable, ViTModel};
use super::network::{backward, forward};
use super::ops::{cross_entropy, softmax};
use super::optim::{adamw_step, AdamState};
use crate::error::{Error, Result};
use crate::imaging::{augment, normalize, resize_bilinear, AugmentationConfig, RgbImage};
use crate::rng::Rng;
use crate::tensor::Tensor;

const PREDICT_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub trainable: Trainable,
    /// Must produce images of the model's `image_size`.
    pub augmentation: AugmentationConfig,
}

/// Mean loss and accuracy over the (augmented) batches of one epoch.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: DefectClass,
    pub probabilities: Vec<f64>,
}

/// Mini-batch training: augment, normalize, forward, cross-entropy, backward, AdamW.
pub fn train(
    model: &mut ViTModel,
    dataset: &[(RgbImage, DefectClass)],
    opt: &OptimizerConfig,
    options: &TrainOptions,
    rng: &mut Rng,
) -> Result<Vec<EpochStats>> {
    if dataset.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if options.batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    opt.validate()?;
    options.augmentation.validate()?;
    let cfg = model.config().clone();
    if options.augmentation.output_size != cfg.image_size {
        return Err(Error::Config(format!(
            "augmentation output_size {} differs from model image_size {}",
            options.augmentation.output_size, cfg.image_size
        )));
    }
    if let Some((_, c)) = dataset.iter().find(|(_, c)| c.code() >= cfg.num_classes) {
        return Err(Error::Argument(format!(
            "label {c} outside the model's {} classes",
            cfg.num_classes
        )));
    }

    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(options.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..options.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(options.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (img, class) = &dataset[i];
                let aug = augment(img, &options.augmentation, rng)?;
                inputs.push(normalize(&aug, cfg.norm_mean, cfg.norm_std)?);
                labels.push(class.code());
            }
            let batch = Tensor::stack(&inputs)?;
            let out = forward(model, &batch, true, rng)?;
            let ce = cross_entropy(&out.logits, &labels)?;
            for (r, &label) in labels.iter().enumerate() {
                if argmax(out.logits.row(r)) == label {
                    correct += 1;
                }
            }
            loss_sum += ce.loss * chunk.len() as f64;
            let grads = backward(model, &out.cache, &ce.dlogits, options.trainable)?;
            adamw_step(model, &grads, &mut state, opt)?;
        }
        log.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(log)
}

/// First index of the maximum, so ties resolve to the lowest class code.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-path preprocessing: resize to the model input, then standardize.
pub(crate) fn preprocess(model: &ViTModel, img: &RgbImage) -> Result<Tensor> {
    let cfg = model.config();
    let resized = resize_bilinear(img, cfg.image_size, cfg.image_size)?;
    normalize(&resized, cfg.norm_mean, cfg.norm_std)
}

pub fn predict(model: &ViTModel, img: &RgbImage) -> Result<Prediction> {
    Ok(predict_batch(model, std::slice::from_ref(img))?.remove(0))
}

/// Class and probability vector for each image, dropout off.
pub fn predict_batch(model: &ViTModel, images: &[RgbImage]) -> Result<Vec<Prediction>> {
    if model.config().num_classes != DefectClass::COUNT {
        return Err(Error::Config(format!(
            "prediction needs a {}-class head, model has {}",
            DefectClass::COUNT,
            model.config().num_classes
        )));
    }
    let mut out = Vec::with_capacity(images.len());
    // Inference never draws from the generator.
    let mut rng = Rng::new(0);
    for chunk in images.chunks(PREDICT_CHUNK) {
        let inputs = chunk
            .iter()
            .map(|img| preprocess(model, img))
            .collect::<Result<Vec<_>>>()?;
        let logits = forward(model, &Tensor::stack(&inputs)?, false, &mut rng)?.logits;
        let probs = softmax(&logits)?;
        for r in 0..chunk.len() {
            let p = probs.row(r).to_vec();
            out.push(Prediction {
                class: DefectClass::from_code(argmax(&p))?,
                probabilities: p,
            });
        }
    }
    Ok(out)
}
