//! Central finite-difference checks of the tape in 64-bit.
//!
//! Every case is a scalar function of the parameters in its own store; inputs
//! that should receive gradients are registered as parameters too. Vector
//! outputs are reduced with a fixed random projection so that the whole
//! vector-Jacobian product is exercised.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, BinaryOp, Gradients, Graph, Mode, Reduce, Var};
use crate::backbone::{Backbone, BackboneConfig, MbConv, SpatialAttention, SqueezeExcite, StageSpec, Variant};
use crate::boxes::BBox;
use crate::data::synthetic::{generate_synthetic, SyntheticCellSpec};
use crate::detector::anchors::{generate_anchors, AnchorConfig};
use crate::detector::roi_heads::{box_loss, mask_loss, select_class, BoxHead, MaskHead, RoiSamples};
use crate::detector::rpn::{level_shapes, rpn_loss, RpnHead};
use crate::detector::{HeadConfig, MaskLossKind, MASK_SIZE};
use crate::error::{ensure, Result};
use crate::kernels::{InterpMode, PoolKind};
use crate::model::{image_batch, targets_of, MaskRcnn, ModelConfig};
use crate::neck::{FeaturePyramid, Fpn, Fusion, MergingCell, NasFpn, NeckKind, Topology};
use crate::nn::store::{ParamId, ParamStore};
use crate::nn::{Builder, Conv2d, Linear};
use crate::tensor::Tensor;
use crate::train::{total_loss, LossWeights};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;
pub const MIN_COORDS: usize = 20;

/// Below this magnitude the error is measured against the floor instead of
/// the gradient, so near-zero gradients are held to an absolute bound.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckConfig {
    pub step: f64,
    pub coords: usize,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { step: 1e-6, coords: 24, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Primitive,
    Composed,
}

impl Tier {
    pub fn tolerance(self) -> f64 {
        match self {
            Tier::Primitive => PRIMITIVE_TOL,
            Tier::Composed => COMPOSED_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
    /// The function is not differentiable inside the probe interval; such
    /// coordinates are reported but neither counted nor judged.
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub tol: f64,
    pub coords: Vec<CoordCheck>,
}

impl CheckReport {
    pub fn judged(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| !c.kink)
    }

    pub fn kinks(&self) -> usize {
        self.coords.iter().filter(|c| c.kink).count()
    }

    pub fn max_rel(&self) -> f64 {
        self.judged().map(|c| c.rel).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.judged().max_by(|a, b| a.rel.total_cmp(&b.rel))
    }

    pub fn passed(&self) -> bool {
        self.judged().count() >= MIN_COORDS && self.judged().all(|c| c.rel.is_finite() && c.rel <= self.tol)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub type LossFn = Box<dyn for<'s> Fn(&mut Graph<'s, f64>) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub tol: f64,
    pub mode: Mode,
    pub store: ParamStore<f64>,
    pub loss: LossFn,
}

impl Case {
    pub fn run(&mut self, cfg: &CheckConfig) -> Result<CheckReport> {
        check(&self.name, self.tol, &mut self.store, self.mode, cfg, &*self.loss)
    }
}

/// A named case constructor; building may itself run forward passes.
#[derive(Clone, Copy)]
pub struct CaseSpec {
    pub name: &'static str,
    pub tier: Tier,
    pub build: fn(u64) -> Result<Case>,
}

fn eval_loss(store: &ParamStore<f64>, mode: Mode, loss: &dyn for<'s> Fn(&mut Graph<'s, f64>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new(store, mode);
    let l = loss(&mut g)?;
    ensure!(g.value(l).numel() == 1, "gradient check needs a scalar loss, got {:?}", g.shape(l));
    Ok(g.scalar_value(l))
}

/// Picks a tensor uniformly, then an element of it, without repeats. Every
/// scalar is taken when there are at most `n` of them.
fn sample_coords(store: &ParamStore<f64>, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let sizes: Vec<usize> = store.params().iter().map(|p| p.tensor.numel()).collect();
    let total: usize = sizes.iter().sum();
    if total <= n {
        return sizes.iter().enumerate().flat_map(|(i, &s)| (0..s).map(move |k| (ParamId(i), k))).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(ParamId, usize)> = Vec::with_capacity(n);
    while out.len() < n {
        let i = rng.random_range(0..sizes.len());
        if sizes[i] == 0 {
            continue;
        }
        let c = (ParamId(i), rng.random_range(0..sizes[i]));
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Compares tape gradients with `(f(θ+h) − f(θ−h)) / 2h` at sampled coordinates.
/// The store is restored exactly afterwards.
pub fn check(
    name: &str,
    tol: f64,
    store: &mut ParamStore<f64>,
    mode: Mode,
    cfg: &CheckConfig,
    loss: &dyn for<'s> Fn(&mut Graph<'s, f64>) -> Result<Var>,
) -> Result<CheckReport> {
    ensure!(cfg.step > 0.0 && cfg.step.is_finite(), "finite-difference step must be positive");
    let mut grads = Gradients::new();
    {
        let mut g = Graph::new(&*store, mode);
        let l = loss(&mut g)?;
        ensure!(g.value(l).numel() == 1, "{name}: loss is not a scalar");
        g.backward(l, &mut grads)?;
    }
    let h = cfg.step;
    let mut coords: Vec<CoordCheck> = Vec::new();
    let mut valid = 0;
    for (id, k) in sample_coords(store, 2 * cfg.coords, cfg.seed) {
        if valid == cfg.coords {
            break;
        }
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
        let orig = store.param(id).data()[k];
        let centre = eval_loss(store, mode, loss)?;
        store.param_mut(id).data_mut()[k] = orig + h;
        let plus = eval_loss(store, mode, loss);
        store.param_mut(id).data_mut()[k] = orig - h;
        let minus = eval_loss(store, mode, loss);
        store.param_mut(id).data_mut()[k] = orig;
        let (plus, minus) = (plus?, minus?);
        let numeric = (plus - minus) / (2.0 * h);
        let rel = rel_error(analytic, numeric);
        // A slope change inside [θ−h, θ+h] shows up as one-sided slopes that
        // differ by at least the observed mismatch; a wrong gradient does not.
        let jump = ((plus - centre) - (centre - minus)).abs() / h;
        let kink = rel > tol && jump >= (analytic - numeric).abs();
        if !kink {
            valid += 1;
        }
        coords.push(CoordCheck { param: store.param_name(id).into(), index: k, analytic, numeric, rel, kink });
    }
    Ok(CheckReport { name: name.into(), tol, coords })
}

pub fn run_case(spec: &CaseSpec, cfg: &CheckConfig) -> Result<CheckReport> {
    let mut case = (spec.build)(cfg.seed)?;
    case.run(cfg)
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run_suite(cfg: &CheckConfig, filter: Option<&str>) -> Result<Vec<CheckReport>> {
    catalog()
        .iter()
        .filter(|s| filter.is_none_or(|f| s.name.contains(f)))
        .map(|s| run_case(s, cfg))
        .collect()
}

// ---------------------------------------------------------------------------
// Case construction helpers.

struct Setup {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Setup {
    fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164) }
    }

    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn param(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Result<ParamId> {
        let t = self.tensor(shape, lo, hi);
        self.store.add_param(name, t)
    }

    fn values(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(lo..hi)).collect()
    }

    /// Moves every 1-D parameter (biases, norm scales and shifts) off its
    /// initial constant so no activation sits exactly on a kink.
    fn jitter_vectors(&mut self) {
        let ids: Vec<ParamId> = self.store.param_ids().collect();
        for id in ids {
            if self.store.param(id).shape().len() == 1 {
                for v in self.store.param_mut(id).data_mut() {
                    *v += self.rng.random_range(-0.1..0.1);
                }
            }
        }
    }

    /// Scales up the weights of layers initialized with a tiny std so that
    /// upstream gradients stand well above finite-difference noise.
    fn amplify(&mut self, layers: &[&str], factor: f64) {
        let ids: Vec<ParamId> = self.store.param_ids().collect();
        for id in ids {
            let name = self.store.param_name(id);
            if layers.iter().any(|l| name.strip_prefix(l).is_some_and(|r| r.starts_with('.'))) {
                for v in self.store.param_mut(id).data_mut() {
                    *v *= factor;
                }
            }
        }
    }

    fn finish(self, name: &str, tier: Tier, mode: Mode, loss: LossFn) -> Case {
        Case { name: name.into(), tol: tier.tolerance(), mode, store: self.store, loss }
    }
}

/// `Σ y ⊙ R` for a fixed random `R` of `y`'s shape, scaled by `1/√n` to keep
/// the loss near unit size.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / libm::sqrt(g.value(y).numel() as f64);
    let r = Tensor::from_fn(g.shape(y), |_| scale * rng.random_range(-1.0..1.0));
    let r = g.input(r)?;
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn project_all(g: &mut Graph<f64>, ys: &[Var], seed: u64) -> Result<Var> {
    let mut acc = project(g, ys[0], seed)?;
    for (i, &y) in ys.iter().enumerate().skip(1) {
        let p = project(g, y, seed + i as u64)?;
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

fn pyramid_params(s: &mut Setup, f: usize, sizes: &[(usize, usize)]) -> Result<Vec<(usize, ParamId)>> {
    sizes.iter().map(|&(l, e)| Ok((l, s.param(&alloc::format!("p{l}"), &[1, f, e, e], -1.0, 1.0)?))).collect()
}

fn pyramid_of(g: &mut Graph<f64>, ids: &[(usize, ParamId)]) -> FeaturePyramid {
    FeaturePyramid { levels: ids.iter().map(|&(l, id)| (l, g.param(id))).collect() }
}

/// Extents of levels 3..7 for a square input of side `side`.
fn level_sizes(side: usize) -> Vec<(usize, usize)> {
    (3..=7).map(|l| (l, crate::neck::level_hw((side, side), l).0)).collect()
}

fn tiny_backbone(use_sam: bool, use_csp: bool) -> BackboneConfig {
    let mut c = BackboneConfig::new(Variant::B0, use_sam, use_csp);
    let widths = [8, 12, 16, 16, 24, 24, 32];
    c.stem_channels = 8;
    c.stages = c
        .stages
        .iter()
        .zip(widths)
        .map(|(s, w)| StageSpec { out_channels: w, repeats: 1, expand_ratio: s.expand_ratio.min(2), ..*s })
        .collect();
    c
}

// ---------------------------------------------------------------------------
// Primitive cases.

fn conv_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let x = s.param("x", &[2, 3, 6, 5], -1.0, 1.0)?;
    let w = s.param("w", &[4, 3, 3, 3], -0.5, 0.5)?;
    let b = s.param("b", &[4], -0.5, 0.5)?;
    Ok(s.finish(
        "conv2d",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let (x, w, b) = (g.param(x), g.param(w), g.param(b));
            let y = g.conv2d(x, w, Some(b), 1, 1, 1)?;
            project(g, y, 1)
        }),
    ))
}

fn conv_depthwise_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let x = s.param("x", &[1, 4, 7, 7], -1.0, 1.0)?;
    let w = s.param("w", &[4, 1, 3, 3], -0.5, 0.5)?;
    let w2 = s.param("w_grouped", &[6, 2, 1, 1], -0.5, 0.5)?;
    Ok(s.finish(
        "conv2d_depthwise_stride2",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let (x, w, w2) = (g.param(x), g.param(w), g.param(w2));
            let y = g.conv2d(x, w, None, 2, 1, 4)?;
            let z = g.conv2d(y, w2, None, 1, 0, 2)?;
            project(g, z, 2)
        }),
    ))
}

fn conv_transpose_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let x = s.param("x", &[1, 3, 4, 4], -1.0, 1.0)?;
    let w = s.param("w", &[3, 2, 2, 2], -0.5, 0.5)?;
    let b = s.param("b", &[2], -0.5, 0.5)?;
    Ok(s.finish(
        "conv_transpose2d",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let (x, w, b) = (g.param(x), g.param(w), g.param(b));
            let y = g.conv_transpose2d(x, w, Some(b), 2, 0)?;
            project(g, y, 3)
        }),
    ))
}

fn linear_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let x = s.param("x", &[3, 5], -1.0, 1.0)?;
    let w = s.param("w", &[5, 4], -0.5, 0.5)?;
    let b = s.param("b", &[4], -0.5, 0.5)?;
    Ok(s.finish(
        "linear",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let (x, w, b) = (g.param(x), g.param(w), g.param(b));
            let y = g.linear(x, w, Some(b))?;
            project(g, y, 4)
        }),
    ))
}

fn binary_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let a = s.param("a", &[2, 3, 4, 4], -1.0, 1.0)?;
    let b = s.param("b", &[1, 3, 1, 1], 0.5, 1.5)?;
    let c = s.param("c", &[2, 3, 4, 4], 0.5, 1.5)?;
    Ok(s.finish(
        "binary_broadcast",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let (a, b, c) = (g.param(a), g.param(b), g.param(c));
            let mut outs = Vec::new();
            for (i, op) in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div].into_iter().enumerate() {
                let y = g.binary(a, b, op)?;
                outs.push(project(g, y, 10 + i as u64)?);
            }
            let d = g.div(a, c)?;
            let d = g.scale(d, 0.7)?;
            let d = g.add_scalar(d, 0.3)?;
            outs.push(project(g, d, 20)?);
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = g.add(acc, o)?;
            }
            Ok(acc)
        }),
    ))
}

fn activation_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let mut t = s.tensor(&[30], -3.0, 3.0);
    t.data_mut()[0] = 1.0;
    let x = s.store.add_param("x", t)?;
    Ok(s.finish(
        "activations",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(x);
            let mut outs = Vec::new();
            for (i, a) in [Activation::Relu, Activation::Swish, Activation::Sigmoid].into_iter().enumerate() {
                let y = g.activation(x, a)?;
                outs.push(project(g, y, 30 + i as u64)?);
            }
            let s = g.add(outs[0], outs[1])?;
            g.add(s, outs[2])
        }),
    ))
}

fn pool_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let x = s.param("x", &[2, 2, 6, 6], -1.0, 1.0)?;
    Ok(s.finish(
        "pooling",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(x);
            let mut outs = Vec::new();
            let kinds = [(PoolKind::Max, 2, 2), (PoolKind::Avg, 2, 2), (PoolKind::Max, 3, 2), (PoolKind::GlobalAvg, 0, 0), (PoolKind::GlobalMax, 0, 0)];
            for (k, kernel, stride) in kinds {
                outs.push(g.pool(x, k, kernel, stride)?);
            }
            project_all(g, &outs, 40)
        }),
    ))
}

fn batch_norm_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let x = s.param("x", &[2, 3, 2, 2], -1.0, 1.0)?;
    let gamma = s.param("gamma", &[3], 0.5, 1.5)?;
    let beta = s.param("beta", &[3], -0.5, 0.5)?;
    let rm = s.store.add_buffer("running_mean", Tensor::zeros(&[3]))?;
    let rv = s.store.add_buffer("running_var", Tensor::ones(&[3]))?;
    Ok(s.finish(
        "batch_norm_train",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let (x, gm, bt) = (g.param(x), g.param(gamma), g.param(beta));
            let y = g.batch_norm(x, gm, bt, rm, rv)?;
            project(g, y, 50)
        }),
    ))
}

fn interpolate_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let x = s.param("x", &[1, 2, 4, 5], -1.0, 1.0)?;
    Ok(s.finish(
        "interpolate",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(x);
            let a = g.interpolate(x, (8, 10), InterpMode::Nearest)?;
            let b = g.interpolate(x, (7, 9), InterpMode::Bilinear)?;
            let c = g.interpolate(x, (2, 3), InterpMode::Bilinear)?;
            let d = g.interpolate(x, (2, 2), InterpMode::Nearest)?;
            project_all(g, &[a, b, c, d], 60)
        }),
    ))
}

fn shape_ops_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let a = s.param("a", &[2, 3, 2, 3], -1.0, 1.0)?;
    let b = s.param("b", &[2, 2, 2, 3], -1.0, 1.0)?;
    Ok(s.finish(
        "concat_narrow_reshape_permute",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let (a, b) = (g.param(a), g.param(b));
            let c = g.concat(&[a, b], 1)?;
            let (l, r) = g.split_channels(c, 2)?;
            let n = g.narrow(r, 3, 1, 2)?;
            let p = g.permute(l, &[0, 2, 3, 1])?;
            let q = g.reshape(p, &[12, 2])?;
            let rows = g.index_select(q, &[3, 0, 3, 11, 7])?;
            let t = g.concat(&[a, a], 0)?;
            project_all(g, &[n, q, rows, t], 70)
        }),
    ))
}

fn reduce_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let x = s.param("x", &[2, 3, 4], -1.0, 1.0)?;
    Ok(s.finish(
        "reductions",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(x);
            let mut outs = Vec::new();
            for axis in 0..3 {
                for kind in [Reduce::Sum, Reduce::Mean, Reduce::Max] {
                    outs.push(g.reduce_axis(x, axis, kind)?);
                }
            }
            let total = project_all(g, &outs, 80)?;
            let m = g.mean(x)?;
            let m = g.scale(m, 1.7)?;
            g.add(total, m)
        }),
    ))
}

fn roi_align_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let x = s.param("x", &[1, 2, 8, 8], -1.0, 1.0)?;
    let boxes = [[1.3, 2.1, 9.7, 12.2], [0.0, 0.0, 16.0, 16.0], [5.5, 3.25, 6.5, 4.0], [-3.0, 10.0, 4.0, 19.0]];
    Ok(s.finish(
        "roi_align",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(x);
            let y = g.roi_align(x, &boxes, 0.5, (3, 3), 2)?;
            project(g, y, 90)
        }),
    ))
}

fn losses_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let z = s.param("logits", &[6, 4], -2.0, 2.0)?;
    let p = s.param("probs", &[2, 12], 0.05, 0.95)?;
    let bce_t: Vec<f64> = s.values(24, 0.0, 1.0).into_iter().map(|v| if v < 0.5 { 0.0 } else { 1.0 }).collect();
    let bce_w = s.values(24, 0.0, 2.0);
    let l1_t = s.values(24, -2.0, 2.0);
    let l1_w: Vec<f64> = s.values(24, 0.0, 1.0).into_iter().map(|v| if v < 0.2 { 0.0 } else { 1.0 }).collect();
    let dice_t: Vec<f64> = s.values(24, 0.0, 1.0).into_iter().map(|v| if v < 0.5 { 0.0 } else { 1.0 }).collect();
    let labels = [0, 3, 1, 1, 2, 0];
    Ok(s.finish(
        "losses",
        Tier::Primitive,
        Mode::Train,
        Box::new(move |g| {
            let (z, p) = (g.param(z), g.param(p));
            let bce = g.sigmoid_bce(z, bce_t.clone(), Some(bce_w.clone()), 5.0)?;
            let ce = g.softmax_cross_entropy(z, &labels, 6.0)?;
            let sl = g.smooth_l1(z, l1_t.clone(), l1_w.clone(), 1.0 / 9.0, 3.0)?;
            let dice = g.dice_loss(p, dice_t.clone())?;
            let a = g.add(bce, ce)?;
            let b = g.add(sl, dice)?;
            g.add(a, b)
        }),
    ))
}

fn dice_uniform_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let p = s.store.add_param("probs", Tensor::full(&[1, 28], 0.5))?;
    let gt: Vec<f64> = (0..28).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
    Ok(s.finish("dice_loss_uniform_half", Tier::Primitive, Mode::Train, Box::new(move |g| {
        let p = g.param(p);
        g.dice_loss(p, gt.clone())
    })))
}

// ---------------------------------------------------------------------------
// Composed cases.

fn se_sam_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let (se, sam) = {
        let mut b = Builder::new(&mut s.store, seed);
        let se = SqueezeExcite {
            reduce: Conv2d::new(&mut b, "se.reduce", 4, 2, 1, 1, 1, true)?,
            expand: Conv2d::new(&mut b, "se.expand", 2, 4, 1, 1, 1, true)?,
        };
        (se, SpatialAttention::new(&mut b, "sam")?)
    };
    s.jitter_vectors();
    let x = s.param("x", &[1, 4, 8, 8], -1.0, 1.0)?;
    Ok(s.finish(
        "squeeze_excite_and_spatial_attention",
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(x);
            let a = se.forward(g, x)?;
            let b = sam.forward(g, a)?;
            project(g, b, 100)
        }),
    ))
}

fn mbconv_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let (down, same) = {
        let mut b = Builder::new(&mut s.store, seed);
        (
            MbConv::new(&mut b, "down", 4, 6, 3, 5, 2, 0.25, true)?,
            MbConv::new(&mut b, "same", 6, 6, 2, 3, 1, 0.25, true)?,
        )
    };
    s.jitter_vectors();
    let x = s.param("x", &[2, 4, 8, 8], -1.0, 1.0)?;
    Ok(s.finish(
        "mbconv_with_sam",
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(x);
            let y = down.forward(g, x)?;
            let z = same.forward(g, y)?;
            project(g, z, 110)
        }),
    ))
}

fn backbone_case_with(seed: u64, name: &str, use_sam: bool, use_csp: bool) -> Result<Case> {
    let mut s = Setup::new(seed);
    let bb = Backbone::new(&mut Builder::new(&mut s.store, seed), "backbone", &tiny_backbone(use_sam, use_csp))?;
    s.jitter_vectors();
    let x = s.param("image", &[1, 3, 64, 64], -1.0, 1.0)?;
    Ok(s.finish(
        name,
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(x);
            let c = bb.forward(g, x)?;
            project_all(g, &[c.c3, c.c4, c.c5], 120)
        }),
    ))
}

fn csp_backbone_case(seed: u64) -> Result<Case> {
    backbone_case_with(seed, "backbone_csp_sam", true, true)
}

fn plain_backbone_case(seed: u64) -> Result<Case> {
    backbone_case_with(seed, "backbone_plain", false, false)
}

fn merging_cell_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let (sum_cell, gattn_cell) = {
        let mut b = Builder::new(&mut s.store, seed);
        (MergingCell::new(&mut b, "sum", 3)?, MergingCell::new(&mut b, "gattn", 3)?)
    };
    s.jitter_vectors();
    let a = s.param("a", &[1, 3, 8, 8], -1.0, 1.0)?;
    let b = s.param("b", &[1, 3, 2, 2], -1.0, 1.0)?;
    Ok(s.finish(
        "merging_cells",
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let (a, b) = (g.param(a), g.param(b));
            let y = sum_cell.forward(g, (a, b), (3, 5), (4, (4, 4)), Fusion::Sum, &[])?;
            let z = gattn_cell.forward(g, (y, b), (4, 5), (3, (8, 8)), Fusion::GlobalAttention, &[a])?;
            project_all(g, &[y, z], 130)
        }),
    ))
}

fn nasfpn_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let neck = NasFpn::new(&mut Builder::new(&mut s.store, seed), "neck", 3, Topology::default_nasfpn())?;
    s.jitter_vectors();
    let ids = pyramid_params(&mut s, 3, &level_sizes(64))?;
    Ok(s.finish(
        "nasfpn",
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let p = pyramid_of(g, &ids);
            let out = neck.forward(g, &p)?;
            let ys: Vec<Var> = out.levels.iter().map(|&(_, v)| v).collect();
            project_all(g, &ys, 140)
        }),
    ))
}

fn fpn_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let neck = Fpn::new(&mut Builder::new(&mut s.store, seed), "fpn", 3)?;
    s.jitter_vectors();
    let ids = pyramid_params(&mut s, 3, &level_sizes(64))?;
    Ok(s.finish(
        "fpn",
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let p = pyramid_of(g, &ids);
            let out = neck.forward(g, &p)?;
            let ys: Vec<Var> = out.levels.iter().map(|&(_, v)| v).collect();
            project_all(g, &ys, 150)
        }),
    ))
}

fn rpn_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let anchors_cfg = AnchorConfig::default();
    let head = RpnHead::new(&mut Builder::new(&mut s.store, seed), "rpn", 4, anchors_cfg.per_cell())?;
    s.jitter_vectors();
    s.amplify(&["rpn.conv", "rpn.objectness", "rpn.deltas"], 50.0);
    let ids = pyramid_params(&mut s, 4, &level_sizes(64))?;
    let gts = vec![BBox::new(6.0, 8.0, 40.0, 36.0), BBox::new(30.0, 20.0, 60.0, 62.0)];
    let cfg = HeadConfig { rpn_batch: 64, ..HeadConfig::default() };
    Ok(s.finish(
        "rpn_loss",
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let p = pyramid_of(g, &ids);
            let out = head.forward(g, &p)?;
            let anchors = generate_anchors(&level_shapes(g, &p)?, &anchors_cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (cls, reg, t) = rpn_loss(g, &out, 0, &anchors, &gts, &cfg, &mut rng)?;
            ensure!(!t.positives.is_empty(), "rpn case has no positive anchor");
            let reg = g.scale(reg, 10.0)?;
            g.add(cls, reg)
        }),
    ))
}

fn roi_setup(s: &mut Setup, f: usize) -> Result<(ParamId, Vec<BBox>, Vec<BBox>)> {
    let feat = s.param("features", &[1, f, 16, 16], -1.0, 1.0)?;
    let rois = vec![
        BBox::new(4.0, 6.0, 40.0, 44.0),
        BBox::new(30.0, 28.0, 62.0, 60.0),
        BBox::new(10.0, 3.0, 22.0, 50.0),
        BBox::new(0.0, 0.0, 64.0, 64.0),
        BBox::new(45.5, 2.5, 60.0, 20.0),
    ];
    let gts = vec![BBox::new(6.0, 8.0, 38.0, 40.0), BBox::new(28.0, 30.0, 63.0, 58.0)];
    Ok((feat, rois, gts))
}

fn box_head_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let head = BoxHead::new(&mut Builder::new(&mut s.store, seed), "box", 3, 7, 16, 2)?;
    s.jitter_vectors();
    s.amplify(&["box.cls"], 50.0);
    s.amplify(&["box.bbox"], 5.0);
    let (feat, rois, gts) = roi_setup(&mut s, 3)?;
    let samples = RoiSamples {
        boxes: rois.clone(),
        labels: vec![1, 2, 1, 0, 0],
        matched: vec![Some(0), Some(1), Some(0), None, None],
        num_pos: 3,
    };
    let arrays: Vec<[f64; 4]> = rois.iter().map(|b| b.to_array()).collect();
    Ok(s.finish(
        "box_head_two_class",
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(feat);
            let pooled = g.roi_align(x, &arrays, 0.25, (7, 7), 2)?;
            let (logits, deltas) = head.forward(g, pooled)?;
            let (cls, reg) = box_loss(g, logits, deltas, &samples, &gts, 2)?;
            g.add(cls, reg)
        }),
    ))
}

fn mask_head_case(seed: u64, name: &str, kind: MaskLossKind) -> Result<Case> {
    let mut s = Setup::new(seed);
    let head = MaskHead::new(&mut Builder::new(&mut s.store, seed), "mask", 3, 4, 2)?;
    s.jitter_vectors();
    s.amplify(&["mask.predictor"], 30.0);
    let (feat, rois, _) = roi_setup(&mut s, 3)?;
    let rois = rois[..3].to_vec();
    let arrays: Vec<[f64; 4]> = rois.iter().map(|b| b.to_array()).collect();
    let cells = MASK_SIZE * MASK_SIZE;
    let targets: Vec<f64> = (0..3 * cells)
        .map(|i| {
            let (r, y, x) = (i / cells, (i % cells) / MASK_SIZE, i % MASK_SIZE);
            let (cy, cx) = (10.0 + 3.0 * r as f64, 14.0);
            if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < 80.0 { 1.0 } else { 0.0 }
        })
        .collect();
    Ok(s.finish(
        name,
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(feat);
            let pooled = g.roi_align(x, &arrays, 0.25, (14, 14), 2)?;
            let logits = head.forward(g, pooled)?;
            let rows = select_class(g, logits, &[1, 2, 1])?;
            mask_loss(g, rows, &targets, kind)
        }),
    ))
}

fn mask_dice_case(seed: u64) -> Result<Case> {
    mask_head_case(seed, "mask_head_dice", MaskLossKind::Dice)
}

fn mask_bce_case(seed: u64) -> Result<Case> {
    mask_head_case(seed, "mask_head_bce", MaskLossKind::Bce)
}

fn classifier_head_case(seed: u64) -> Result<Case> {
    let mut s = Setup::new(seed);
    let fc = Linear::new(&mut Builder::new(&mut s.store, seed), "fc", 6, 3)?;
    let x = s.param("x", &[4, 6, 3, 3], -1.0, 1.0)?;
    Ok(s.finish(
        "pooled_linear_classifier",
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let x = g.param(x);
            let p = g.pool(x, PoolKind::GlobalAvg, 0, 0)?;
            let p = g.reshape(p, &[4, 6])?;
            let z = fc.forward(g, p)?;
            g.softmax_cross_entropy(z, &[0, 2, 1, 2], 4.0)
        }),
    ))
}

/// The smallest detector exercising every module. Used by the full-model case
/// and by tests that need a cheap model.
pub fn tiny_model_config(neck: NeckKind, mask_loss: MaskLossKind) -> ModelConfig {
    ModelConfig {
        backbone: tiny_backbone(true, true),
        neck,
        topology: None,
        pyramid_channels: 8,
        heads: HeadConfig {
            mask_loss,
            rpn_batch: 32,
            roi_batch: 16,
            rpn_pre_nms_topk_train: 200,
            rpn_post_nms_topk_train: 50,
            box_fc: 16,
            mask_channels: 8,
            ..HeadConfig::default()
        },
    }
}

fn full_model_case(seed: u64) -> Result<Case> {
    let spec = SyntheticCellSpec { height: 128, width: 128, cells: (2, 3), nucleus_radius: (5.0, 8.0), cytoplasm_radius: (10.0, 16.0), seed, ..Default::default() };
    let (recs, _) = generate_synthetic(&spec, 1)?;
    let image = image_batch::<f64>(&[&recs[0]])?;
    let targets = vec![targets_of(&recs[0])?];
    let cfg = tiny_model_config(NeckKind::NasFpn, MaskLossKind::Dice);
    let mut s = Setup::new(seed);
    let model = MaskRcnn::new(&mut Builder::new(&mut s.store, seed), &cfg)?;
    s.jitter_vectors();
    s.amplify(&["rpn.conv", "rpn.objectness", "rpn.deltas", "roi_heads.box.cls", "roi_heads.box.bbox"], 50.0);
    s.amplify(&["roi_heads.mask.predictor"], 30.0);
    let fixed = {
        let mut g = Graph::new(&s.store, Mode::Train);
        let x = g.input(image.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.forward_train_with(&mut g, x, &targets, None, &mut rng)?.1
    };
    Ok(s.finish(
        "full_model_nasfpn_dice",
        Tier::Composed,
        Mode::Train,
        Box::new(move |g| {
            let x = g.input(image.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (terms, _) = model.forward_train_with(g, x, &targets, Some(&fixed), &mut rng)?;
            total_loss(g, &terms, &LossWeights::default())
        }),
    ))
}

pub fn catalog() -> Vec<CaseSpec> {
    use Tier::*;
    let c = |name, tier, build| CaseSpec { name, tier, build };
    vec![
        c("conv2d", Primitive, conv_case as fn(u64) -> Result<Case>),
        c("conv2d_depthwise_stride2", Primitive, conv_depthwise_case),
        c("conv_transpose2d", Primitive, conv_transpose_case),
        c("linear", Primitive, linear_case),
        c("binary_broadcast", Primitive, binary_case),
        c("activations", Primitive, activation_case),
        c("pooling", Primitive, pool_case),
        c("batch_norm_train", Primitive, batch_norm_case),
        c("interpolate", Primitive, interpolate_case),
        c("concat_narrow_reshape_permute", Primitive, shape_ops_case),
        c("reductions", Primitive, reduce_case),
        c("roi_align", Primitive, roi_align_case),
        c("losses", Primitive, losses_case),
        c("dice_loss_uniform_half", Primitive, dice_uniform_case),
        c("squeeze_excite_and_spatial_attention", Composed, se_sam_case),
        c("mbconv_with_sam", Composed, mbconv_case),
        c("backbone_csp_sam", Composed, csp_backbone_case),
        c("backbone_plain", Composed, plain_backbone_case),
        c("merging_cells", Composed, merging_cell_case),
        c("nasfpn", Composed, nasfpn_case),
        c("fpn", Composed, fpn_case),
        c("rpn_loss", Composed, rpn_case),
        c("box_head_two_class", Composed, box_head_case),
        c("mask_head_dice", Composed, mask_dice_case),
        c("mask_head_bce", Composed, mask_bce_case),
        c("pooled_linear_classifier", Composed, classifier_head_case),
        c("full_model_nasfpn_dice", Composed, full_model_case),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_passes(name: &str) {
        let spec = catalog().into_iter().find(|s| s.name == name).expect("case exists");
        let r = run_case(&spec, &CheckConfig::default()).unwrap();
        assert_eq!(r.tol, spec.tier.tolerance());
        assert!(r.passed(), "{name}: worst {:?}", r.worst());
    }

    #[test]
    fn swish_at_one_matches_central_difference() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::full(&[1], 1.0)).unwrap();
        let loss = move |g: &mut Graph<f64>| -> Result<Var> {
            let v = g.param(x);
            let y = g.swish(v)?;
            g.sum(y)
        };
        let r = check("swish", PRIMITIVE_TOL, &mut store, Mode::Train, &CheckConfig::default(), &loss).unwrap();
        assert_eq!(r.coords.len(), 1);
        // d/dx x·σ(x) = σ(x)(1 + x(1 − σ(x)))
        let sig = 1.0 / (1.0 + libm::exp(-1.0));
        assert!((r.coords[0].analytic - sig * (1.0 + (1.0 - sig))).abs() < 1e-12);
        assert!(r.coords[0].rel < PRIMITIVE_TOL);
    }

    #[test]
    fn a_kink_is_set_aside() {
        let mut store = ParamStore::<f64>::new();
        let z = store.add_param("z", Tensor::from_fn(&[30], |i| if i == 10 { 0.0 } else { i as f64 * 0.1 - 1.05 })).unwrap();
        let loss = move |g: &mut Graph<f64>| -> Result<Var> {
            let v = g.param(z);
            let y = g.activation(v, Activation::Relu)?;
            g.sum(y)
        };
        let r = check("relu", PRIMITIVE_TOL, &mut store, Mode::Train, &CheckConfig::default(), &loss).unwrap();
        // z[10] is exactly 0: the central difference sees half the slope.
        let at = r.coords.iter().find(|c| c.index == 10).unwrap();
        assert!((at.numeric - 0.5).abs() < 1e-6);
        assert!(at.kink);
        assert_eq!(r.kinks(), 1);
        assert!(r.passed());
    }

    #[test]
    fn a_detached_dependency_fails() {
        // loss = Σ x·stop(x): the tape sees only one factor, so its gradient
        // is x where the true derivative is 2x.
        let mut store = ParamStore::<f64>::new();
        let x = store.add_param("x", Tensor::from_fn(&[24], |i| 0.3 + 0.05 * i as f64)).unwrap();
        let loss = move |g: &mut Graph<f64>| -> Result<Var> {
            let v = g.param(x);
            let c = g.input(g.value(v).clone())?;
            let p = g.mul(v, c)?;
            g.sum(p)
        };
        let r = check("detached", PRIMITIVE_TOL, &mut store, Mode::Train, &CheckConfig::default(), &loss).unwrap();
        assert_eq!(r.kinks(), 0);
        assert!(!r.passed());
        for c in &r.coords {
            assert!((c.numeric - 2.0 * c.analytic).abs() < 1e-8);
        }
    }

    #[test]
    fn store_is_restored_after_check() {
        let mut case = conv_case(3).unwrap();
        let before = case.store.clone();
        case.run(&CheckConfig::default()).unwrap();
        assert_eq!(case.store.params(), before.params());
    }

    #[test]
    fn catalog_names_are_unique_and_match() {
        let cat = catalog();
        for (i, s) in cat.iter().enumerate() {
            assert!(cat[..i].iter().all(|o| o.name != s.name));
        }
        // Building is cheap for everything but the full model.
        for s in cat.iter().filter(|s| s.name != "full_model_nasfpn_dice") {
            assert_eq!((s.build)(0).unwrap().name, s.name);
        }
    }

    #[test]
    fn batch_norm_gradients() {
        assert_passes("batch_norm_train");
    }

    #[test]
    fn dice_gradient_at_uniform_half() {
        assert_passes("dice_loss_uniform_half");
    }

    #[test]
    fn spatial_attention_gate_conv() {
        let spec = catalog().into_iter().find(|s| s.name == "squeeze_excite_and_spatial_attention").unwrap();
        let mut case = (spec.build)(0).unwrap();
        let r = case.run(&CheckConfig { coords: 200, ..Default::default() }).unwrap();
        assert!(r.coords.iter().any(|c| c.param == "sam.conv.weight"));
        assert!(r.passed(), "{:?}", r.worst());
    }

    #[test]
    fn two_class_box_head() {
        assert_passes("box_head_two_class");
    }
}
