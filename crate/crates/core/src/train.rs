//! SGD with momentum, the learning-rate schedule, and the training loop.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, Mode, Var};
use crate::backbone::Classifier;
use crate::data::augment::{augment, AugmentOp};
use crate::data::DatasetRecord;
use crate::error::{ensure, Error, Result};
use crate::metrics::{evaluate, EvalResult, GtInstance};
use crate::model::{image_batch, targets_of, LossTerms, MaskRcnn};
use crate::nn::store::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub box_cls: f64,
    pub box_reg: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rpn_cls: 1.0, rpn_box: 1.0, box_cls: 1.0, box_reg: 1.0, mask: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Base learning rate, before warmup and decay.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Learning-rate multiplier at step 0 of the warmup.
    pub warmup_factor: f64,
    /// Steps at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Random horizontal flips of training images.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let batch_size = 1;
        Self {
            lr: 0.02 * batch_size as f64 / 16.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 500,
            warmup_factor: 1e-3,
            milestones: Vec::new(),
            gamma: 0.1,
            batch_size,
            max_steps: 2000,
            seed: 0,
            loss_weights: LossWeights::default(),
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive, got {}", self.lr);
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)");
        ensure!(self.weight_decay >= 0.0, "weight decay must be non-negative");
        ensure!(self.milestones.windows(2).all(|w| w[0] < w[1]), "milestones must be strictly increasing");
        Ok(())
    }

    /// Linear warmup from `warmup_factor` to 1, then step decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            let a = step as f64 / self.warmup_steps as f64;
            self.warmup_factor * (1.0 - a) + a
        } else {
            1.0
        };
        let decays = self.milestones.iter().filter(|&&m| step >= m).count() as i32;
        self.lr * warm * libm::pow(self.gamma, decays as f64)
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self { velocity: store.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect() }
    }

    /// `v ← μ·v + g + λ·w; w ← w − lr·v`. Parameters without a gradient
    /// still decay and coast on momentum. Nothing changes when any gradient
    /// is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Numeric("non-finite gradient, step skipped".into()));
        }
        let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
        let ids: Vec<_> = store.param_ids().collect();
        for id in ids {
            let g = grads.get(id).map(|t| t.data());
            let v = self.velocity[id.0].data_mut();
            let w = store.param_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.map_or(T::ZERO, |g| g[i]);
                v[i] = mu * v[i] + gi + wd * w[i];
                w[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Weighted sum of the five loss terms.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let parts = [
        (terms.rpn_cls, w.rpn_cls),
        (terms.rpn_box, w.rpn_box),
        (terms.box_cls, w.box_cls),
        (terms.box_reg, w.box_reg),
        (terms.mask, w.mask),
    ];
    let mut acc: Option<Var> = None;
    for (v, wt) in parts {
        let s = g.scale(v, T::from_f64(wt))?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(acc.expect("five terms"))
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub box_cls: f64,
    pub box_reg: f64,
    pub mask: f64,
}

impl StepRecord {
    pub fn all_finite(&self) -> bool {
        [self.total, self.rpn_cls, self.rpn_box, self.box_cls, self.box_reg, self.mask].iter().all(|v| v.is_finite())
    }
}

/// RNG for everything random in step `step`, independent of earlier steps so
/// a resumed run replays the same draws.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step as u64 + 1);
    r
}

/// Indices of the batch used at `step`: epochs are seeded permutations of
/// the dataset, cycled as often as needed.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for k in 0..batch {
        let pos = step * batch + k;
        let (epoch, at) = (pos / n, pos % n);
        if cached.as_ref().is_none_or(|c| c.0 != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
            r.set_stream(epoch as u64);
            perm.shuffle(&mut r);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[at]);
    }
    out
}

/// Owns the optimizer state for a model whose parameters live in `store`.
pub struct Trainer<'m> {
    pub model: &'m MaskRcnn,
    pub store: ParamStore<f32>,
    pub sgd: Sgd<f32>,
    pub config: TrainConfig,
    /// Steps completed so far.
    pub step: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m MaskRcnn, store: ParamStore<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sgd = Sgd::new(&store);
        Ok(Self { model, store, sgd, config, step: 0 })
    }

    /// One optimizer step on the next batch of `data`.
    pub fn step(&mut self, data: &[DatasetRecord]) -> Result<StepRecord> {
        ensure!(!data.is_empty(), "no training data");
        let cfg = &self.config;
        let mut rng = step_rng(cfg.seed, self.step);
        let idx = batch_indices(cfg.seed, self.step, cfg.batch_size, data.len());
        let mut recs = Vec::with_capacity(idx.len());
        for &i in &idx {
            let r = &data[i];
            recs.push(if cfg.hflip && rng.random_bool(0.5) { augment(r, &[AugmentOp::HFlip])? } else { r.clone() });
        }
        let refs: Vec<&DatasetRecord> = recs.iter().collect();
        let images = image_batch::<f32>(&refs)?;
        let targets = recs.iter().map(targets_of).collect::<Result<Vec<_>>>()?;

        let lr = cfg.lr_at(self.step);
        let mut g = Graph::new(&self.store, Mode::Train);
        let x = g.input(images)?;
        let terms = self.model.forward_train(&mut g, x, &targets, &mut rng)?;
        let total = total_loss(&mut g, &terms, &cfg.loss_weights)?;
        let v = |g: &Graph<f32>, x: Var| g.scalar_value(x) as f64;
        let rec = StepRecord {
            step: self.step,
            lr,
            total: v(&g, total),
            rpn_cls: v(&g, terms.rpn_cls),
            rpn_box: v(&g, terms.rpn_box),
            box_cls: v(&g, terms.box_cls),
            box_reg: v(&g, terms.box_reg),
            mask: v(&g, terms.mask),
        };
        if !rec.all_finite() {
            return Err(Error::Numeric(alloc::format!("non-finite loss at step {}: {:?}", self.step, rec)));
        }
        let mut grads = Gradients::new();
        g.backward(total, &mut grads)?;
        let updates = g.take_updates();
        drop(g);
        self.sgd.step(&mut self.store, &grads, lr, cfg.momentum, cfg.weight_decay)?;
        self.store.apply_updates(updates);
        self.step += 1;
        Ok(rec)
    }
}

/// Ground truth of a record in evaluator form.
pub fn gt_instances(rec: &DatasetRecord) -> Result<Vec<GtInstance>> {
    rec.instances
        .iter()
        .map(|i| {
            Ok(GtInstance { bbox: i.bbox, class_id: i.class_id, mask: i.mask.raster(rec.height, rec.width)?, iscrowd: i.iscrowd })
        })
        .collect()
}

/// Runs inference image by image and evaluates against the records' annotations.
pub fn evaluate_model<T: Scalar>(model: &MaskRcnn, store: &ParamStore<T>, data: &[DatasetRecord]) -> Result<EvalResult> {
    let mut dets = Vec::with_capacity(data.len());
    let mut gts = Vec::with_capacity(data.len());
    for r in data {
        let mut g = Graph::new(store, Mode::Eval);
        let x = g.input(image_batch::<T>(&[r])?)?;
        dets.push(model.infer(&mut g, x)?.pop().unwrap_or_default());
        gts.push(gt_instances(r)?);
    }
    Ok(evaluate(&dets, &gts, model.config.heads.num_classes))
}

/// One SGD step of the classification harness; returns the mean cross entropy.
pub fn classifier_step(
    clf: &Classifier,
    store: &mut ParamStore<f32>,
    sgd: &mut Sgd<f32>,
    images: Tensor<f32>,
    labels: &[usize],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new(store, Mode::Train);
    let x = g.input(images)?;
    let logits = clf.forward(&mut g, x)?;
    let loss = g.softmax_cross_entropy(logits, labels, labels.len() as f32)?;
    let value = g.scalar_value(loss) as f64;
    let mut grads = Gradients::new();
    g.backward(loss, &mut grads)?;
    let updates = g.take_updates();
    drop(g);
    sgd.step(store, &grads, lr, cfg.momentum, cfg.weight_decay)?;
    store.apply_updates(updates);
    Ok(value)
}

/// Arg-max predictions of the classifier in eval mode.
pub fn classify<T: Scalar>(clf: &Classifier, store: &ParamStore<T>, images: Tensor<T>) -> Result<Vec<usize>> {
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.input(images)?;
    let logits = clf.forward(&mut g, x)?;
    let k = clf.num_classes;
    Ok(g
        .value(logits)
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Builder;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        Builder::new(&mut s, 0).constant("w", &[1], v).unwrap();
        s
    }

    #[test]
    fn plain_step_moves_by_lr() {
        let mut s = one_param(1.0);
        let mut opt = Sgd::new(&s);
        let mut g = Gradients::new();
        g.accumulate(crate::nn::store::ParamId(0), &[1], &[1.0]);
        opt.step(&mut s, &g, 0.1, 0.0, 0.0).unwrap();
        assert!((s.params()[0].tensor.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let mut s = one_param(0.7);
        let mut opt = Sgd::new(&s);
        opt.step(&mut s, &Gradients::new(), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.params()[0].tensor.data()[0], 0.7);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = one_param(1.0);
        let mut opt = Sgd::new(&s);
        for _ in 0..100 {
            let w = s.params()[0].tensor.data()[0];
            let mut g = Gradients::new();
            g.accumulate(crate::nn::store::ParamId(0), &[1], &[2.0 * w]);
            opt.step(&mut s, &g, 0.1, 0.0, 0.0).unwrap();
        }
        assert!(s.params()[0].tensor.data()[0].abs() < 1e-4);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = one_param(1.0);
        let mut opt = Sgd::new(&s);
        let mut g = Gradients::new();
        g.accumulate(crate::nn::store::ParamId(0), &[1], &[f64::NAN]);
        assert!(matches!(opt.step(&mut s, &g, 0.1, 0.0, 0.0), Err(Error::Numeric(_))));
        assert_eq!(s.params()[0].tensor.data()[0], 1.0);
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let c = TrainConfig { lr: 0.1, warmup_steps: 10, warmup_factor: 0.0, milestones: alloc::vec![20], ..Default::default() };
        assert_eq!(c.lr_at(0), 0.0);
        assert!((c.lr_at(5) - 0.05).abs() < 1e-12);
        assert_eq!(c.lr_at(10), 0.1);
        assert!((c.lr_at(25) - 0.01).abs() < 1e-12);
        assert!(TrainConfig { milestones: alloc::vec![5, 5], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn batches_cycle_through_every_record() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(3, s, 2, 8)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }
}
