use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use crate::dataset::{is_image_file, DatasetManifest, Partition, Sample, SplitManifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate as evaluate_model, stratified_split, TestItem};
use crate::features::{extract_features, write_features_csv, FeatureVector};
use crate::imaging::{load_image, RgbImage};
use crate::rng::Rng;
use crate::severity::{fit_forest, RandomForestModel, SeverityGrade};
use crate::vit::{predict_batch, train, DefectClass, TrainOptions, ViTModel};

fn load_samples(samples: &[Sample]) -> Result<Vec<RgbImage>> {
    samples.iter().map(|s| load_image(&s.path)).collect()
}

pub fn train_classifier(cfg: &RunConfig, dataset: &Path, out: &Path, split_path: &Path) -> Result<()> {
    let manifest = DatasetManifest::open(dataset)?;
    let samples = manifest.samples()?;
    if samples.is_empty() {
        return Err(Error::Manifest(format!("{} contains no images", dataset.display())));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.class.code()).collect();
    let split = stratified_split(&labels, cfg.training.split_fraction, cfg.training.seed)?;
    let images = load_samples(&samples)?;

    let mut rng = Rng::new(cfg.training.seed);
    let mut model = ViTModel::init(&cfg.vit, &mut rng)?;
    let train_set: Vec<(RgbImage, DefectClass)> = split
        .train
        .iter()
        .map(|&i| (images[i].clone(), samples[i].class))
        .collect();
    let options = TrainOptions {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        trainable: cfg.training.trainable,
        augmentation: cfg.augmentation.clone(),
    };
    let log = train(&mut model, &train_set, &cfg.optimizer, &options, &mut rng)?;
    for e in &log {
        println!("epoch {} loss {:.6} accuracy {:.4}", e.epoch, e.loss, e.accuracy);
    }
    model.export(out)?;

    let test: BTreeSet<usize> = split.test.iter().copied().collect();
    let entries = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = if test.contains(&i) {
                Partition::Test
            } else {
                Partition::Train
            };
            (s.id.clone(), s.class, p)
        })
        .collect();
    SplitManifest { entries }.write(split_path)?;
    println!(
        "trained on {} images, held out {}; model {} split {}",
        split.train.len(),
        split.test.len(),
        out.display(),
        split_path.display()
    );
    Ok(())
}

pub fn train_severity(
    cfg: &RunConfig,
    dataset: &Path,
    model_path: &Path,
    out: &Path,
    split: Option<&Path>,
) -> Result<()> {
    let manifest = DatasetManifest::open(dataset)?;
    if manifest.severity_csv.is_none() {
        return Err(Error::Manifest(format!(
            "{} has no {}",
            dataset.display(),
            crate::dataset::SEVERITY_CSV
        )));
    }
    let labels = manifest.severity_labels()?;
    let allowed: Option<BTreeSet<String>> = match split {
        Some(p) => Some(
            SplitManifest::read(p)?
                .ids(Partition::Train)
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        None => None,
    };
    let model = ViTModel::load(model_path)?;

    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut targets = Vec::new();
    for (id, grade) in &labels {
        if allowed.as_ref().is_some_and(|a| !a.contains(id)) {
            continue;
        }
        let path = dataset.join(id);
        if !path.is_file() {
            eprintln!("warning: {id} is listed in the severity file but missing on disk; skipped");
            continue;
        }
        images.push(load_image(&path)?);
        targets.push(grade.target());
        ids.push(id);
    }
    if images.is_empty() {
        return Err(Error::Manifest("no usable severity-labeled images".into()));
    }
    let preds = predict_batch(&model, &images)?;
    let x: Vec<[f64; FeatureVector::LEN]> = images
        .iter()
        .zip(&preds)
        .map(|(img, p)| extract_features(img, p.class, &cfg.features).map(|f| f.to_array()))
        .collect::<Result<_>>()?;
    let mut forest = fit_forest(&x, &targets, &cfg.forest)?;
    forest.thresholds = cfg.grading;
    forest.save(out)?;
    println!("fitted {} trees on {} images", forest.trees.len(), ids.len());
    println!("training MSE {:.6}", forest.mse(&x, &targets));
    Ok(())
}

/// One row of the prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictRecord {
    pub image_id: String,
    pub outcome: std::result::Result<(DefectClass, Vec<f64>, FeatureVector, f64, SeverityGrade), String>,
}

/// Header of the prediction CSV.
pub fn predict_header() -> Vec<String> {
    let mut h: Vec<String> = vec!["image_id".into(), "status".into(), "predicted_class".into()];
    h.extend(DefectClass::ALL.iter().map(|c| format!("p_{}", c.slug())));
    h.extend(FeatureVector::NAMES.iter().map(|s| s.to_string()));
    h.extend(["severity_score", "grade", "error"].map(String::from));
    h
}

impl PredictRecord {
    fn fields(&self) -> Vec<String> {
        let mut r = vec![self.image_id.clone()];
        match &self.outcome {
            Ok((class, probs, features, score, grade)) => {
                r.push("ok".into());
                r.push(class.slug().into());
                r.extend(probs.iter().map(|p| p.to_string()));
                r.extend(features.to_array().iter().map(|v| v.to_string()));
                r.push(score.to_string());
                r.push(grade.name().into());
                r.push(String::new());
            }
            Err(msg) => {
                r.push("error".into());
                r.extend(std::iter::repeat_n(
                    String::new(),
                    1 + DefectClass::COUNT + FeatureVector::LEN + 2,
                ));
                r.push(msg.clone());
            }
        }
        r
    }
}

fn predict_inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let name = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort_by_key(|p| name(p));
        Ok(files.into_iter().map(|p| (name(&p), p)).collect())
    } else if input.is_file() {
        Ok(vec![(name(input), input.to_path_buf())])
    } else {
        Err(Error::io(
            input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

/// Returns the number of inputs that could not be processed.
pub fn predict(
    cfg: &RunConfig,
    model_path: &Path,
    forest_path: &Path,
    input: &Path,
    out: Option<&Path>,
) -> Result<usize> {
    let model = ViTModel::load(model_path)?;
    let forest = RandomForestModel::load(forest_path)?;
    let inputs = predict_inputs(input)?;
    if inputs.is_empty() {
        return Err(Error::Argument(format!("no images found at {}", input.display())));
    }
    let mut records = Vec::with_capacity(inputs.len());
    for (id, path) in &inputs {
        let outcome = load_image(path).and_then(|img| {
            let pred = predict_batch(&model, std::slice::from_ref(&img))?.remove(0);
            let f = extract_features(&img, pred.class, &cfg.features)?;
            let (score, grade) = forest.grade(&f)?;
            Ok((pred.class, pred.probabilities, f, score, grade))
        });
        records.push(PredictRecord {
            image_id: id.clone(),
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }
    let failures = records.iter().filter(|r| r.outcome.is_err()).count();
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stdout()),
    };
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<stdout>"));
    let csv_err = |e: csv::Error| Error::format(&target, e.to_string());
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(predict_header()).map_err(csv_err)?;
    for r in &records {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&target, e))?;
    for r in records.iter().filter(|r| r.outcome.is_err()) {
        eprintln!("warning: {} failed: {}", r.image_id, r.outcome.as_ref().unwrap_err());
    }
    Ok(failures)
}

pub fn evaluate(
    cfg: &RunConfig,
    model_path: &Path,
    forest_path: &Path,
    dataset: &Path,
    split_path: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let manifest = DatasetManifest::open(dataset)?;
    let split = SplitManifest::read(split_path)?;
    let train_ids: BTreeSet<&str> = split.ids(Partition::Train).into_iter().collect();
    if let Some(id) = split.ids(Partition::Test).into_iter().find(|id| train_ids.contains(id)) {
        return Err(Error::Contract(format!("{id} is listed as both train and test")));
    }
    let severity = manifest.severity_labels()?;
    let model = ViTModel::load(model_path)?;
    let forest = RandomForestModel::load(forest_path)?;
    let items: Vec<TestItem> = split
        .entries
        .iter()
        .filter(|(_, _, p)| *p == Partition::Test)
        .map(|(id, class, _)| {
            Ok(TestItem {
                image: load_image(&dataset.join(id))?,
                class: *class,
                severity: severity.get(id).copied(),
            })
        })
        .collect::<Result<_>>()?;
    let report = evaluate_model(&model, &forest, &items, &cfg.features)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(prefix) = out {
        let json = super::with_suffix(prefix, "json");
        std::fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = super::with_suffix(prefix, "txt");
        std::fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(())
}

pub fn extract_features_cmd(cfg: &RunConfig, dataset: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::open(dataset)?;
    let samples = manifest.samples()?;
    let model = ViTModel::load(model_path)?;
    let images = load_samples(&samples)?;
    let preds = predict_batch(&model, &images)?;
    let rows = samples
        .iter()
        .zip(&images)
        .zip(&preds)
        .map(|((s, img), p)| Ok((s.id.clone(), p.class, extract_features(img, p.class, &cfg.features)?)))
        .collect::<Result<Vec<_>>>()?;
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    write_features_csv(std::io::BufWriter::new(file), &rows)?;
    println!("wrote features for {} images to {}", rows.len(), out.display());
    Ok(())
}
