//! Image-folder classification with the backbone alone, for comparing
//! backbone variants.

use std::path::{Path, PathBuf};

use cspdet_core::backbone::Classifier;
use cspdet_core::data::RgbImage;
use cspdet_core::nn::store::ParamStore;
use cspdet_core::nn::Builder;
use cspdet_core::train::{batch_indices, classifier_step, classify, Sgd};
use cspdet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::imageio;
use crate::metrics_log::MetricLog;

pub struct Folder {
    pub classes: Vec<String>,
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
}

fn sorted_entries(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// `dir/<class>/<image>`; classes in name order, each image resized to
/// `size × size`.
pub fn load_folder(dir: &Path, size: usize) -> CliResult<Folder> {
    let mut f = Folder { classes: Vec::new(), images: Vec::new(), labels: Vec::new() };
    for class_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let label = f.classes.len();
        f.classes.push(class_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string());
        for p in sorted_entries(&class_dir)? {
            if p.is_file() {
                f.images.push(imageio::resize_square(&imageio::load_rgb(&p)?, size));
                f.labels.push(label);
            }
        }
    }
    if f.images.is_empty() {
        return Err(CliError::Data(format!("{}: no images", dir.display())));
    }
    Ok(f)
}

fn batch(images: &[&RgbImage]) -> CliResult<Tensor<f32>> {
    let (w, h) = (images[0].width, images[0].height);
    let data: Vec<f32> = images.iter().flat_map(|i| i.normalized_chw()).collect();
    Tensor::from_vec(&[images.len(), 3, h, w], data).map_err(CliError::data)
}

pub fn accuracy(clf: &Classifier, store: &ParamStore<f32>, f: &Folder, chunk: usize) -> CliResult<f64> {
    let mut right = 0;
    for (imgs, labels) in f.images.chunks(chunk).zip(f.labels.chunks(chunk)) {
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let pred = classify(clf, store, batch(&refs)?).map_err(CliError::from_core)?;
        right += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    Ok(right as f64 / f.images.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

pub fn run(cfg: &RunConfig) -> CliResult<Vec<EpochLine>> {
    let c = &cfg.classify;
    if c.train_dir.is_empty() {
        return Err(CliError::Config("classify.train_dir is required".into()));
    }
    let train = load_folder(Path::new(&c.train_dir), c.image_size)?;
    let val = if c.val_dir.is_empty() { None } else { Some(load_folder(Path::new(&c.val_dir), c.image_size)?) };
    if train.classes.len() != c.num_classes {
        return Err(CliError::Config(format!("classify.num_classes is {}, {} has {} class folders", c.num_classes, c.train_dir, train.classes.len())));
    }
    let tc = cfg.train_config()?;
    let mut store = ParamStore::<f32>::new();
    let clf = Classifier::new(&mut Builder::new(&mut store, tc.seed), &cfg.backbone_config()?, c.num_classes).map_err(CliError::from_core)?;
    let mut sgd = Sgd::new(&store);

    let dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    std::fs::write(dir.join("config.resolved.toml"), cfg.resolved()).map_err(|e| CliError::io(&dir, e))?;
    let log_path = dir.join("classify.jsonl");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    }
    let mut log = MetricLog::open(&log_path)?;

    let n = train.images.len();
    let per_epoch = n.div_ceil(c.batch_size);
    let mut lines = Vec::with_capacity(c.epochs);
    for epoch in 0..c.epochs {
        let mut loss = 0.0;
        for k in 0..per_epoch {
            let step = epoch * per_epoch + k;
            let idx = batch_indices(tc.seed, step, c.batch_size.min(n), n);
            let imgs: Vec<&RgbImage> = idx.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            loss += classifier_step(&clf, &mut store, &mut sgd, batch(&imgs)?, &labels, c.lr, &tc).map_err(CliError::from_core)?;
        }
        let line = EpochLine {
            epoch: epoch + 1,
            train_loss: loss / per_epoch as f64,
            train_acc: accuracy(&clf, &store, &train, c.batch_size)?,
            val_acc: val.as_ref().map(|v| accuracy(&clf, &store, v, c.batch_size)).transpose()?,
        };
        log::info!("epoch {}: loss {:.4} train acc {:.3} val acc {:?}", line.epoch, line.train_loss, line.train_acc, line.val_acc);
        log.append_json(&line)?;
        lines.push(line);
    }
    Ok(lines)
}
