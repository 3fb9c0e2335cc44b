//! EfficientNet-style backbone with optional spatial attention inside every
//! MBConv block and optional cross-stage-partial connections per stage.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Activation, Graph, Reduce, Var};
use crate::error::{ensure, Result};
use crate::kernels::PoolKind;
use crate::nn::{join, Builder, Conv2d, ConvBn, Linear};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
}

impl Variant {
    /// `(width_mult, depth_mult)` compound-scaling coefficients.
    pub fn coefficients(self) -> (f64, f64) {
        match self {
            Variant::B0 => (1.0, 1.0),
            Variant::B1 => (1.0, 1.1),
            Variant::B2 => (1.1, 1.2),
            Variant::B3 => (1.2, 1.4),
            Variant::B4 => (1.4, 1.8),
            Variant::B5 => (1.6, 2.2),
            Variant::B6 => (1.8, 2.6),
            Variant::B7 => (2.0, 3.1),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let v = match s.to_ascii_lowercase().as_str() {
            "b0" => Variant::B0,
            "b1" => Variant::B1,
            "b2" => Variant::B2,
            "b3" => Variant::B3,
            "b4" => Variant::B4,
            "b5" => Variant::B5,
            "b6" => Variant::B6,
            "b7" => Variant::B7,
            _ => return None,
        };
        Some(v)
    }

    pub fn name(self) -> &'static str {
        ["b0", "b1", "b2", "b3", "b4", "b5", "b6", "b7"][self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub expand_ratio: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub stride: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub use_sam: bool,
    pub use_csp: bool,
    pub stem_channels: usize,
    pub se_ratio: f64,
    pub csp_split: f64,
    /// Already scaled by the width/depth multipliers.
    pub stages: Vec<StageSpec>,
}

const B0_CHANNELS: [usize; 7] = [16, 24, 40, 80, 112, 192, 320];
const B0_REPEATS: [usize; 7] = [1, 2, 2, 3, 3, 4, 1];
const B0_STRIDES: [usize; 7] = [1, 2, 2, 2, 1, 2, 1];
const B0_KERNELS: [usize; 7] = [3, 3, 5, 3, 5, 5, 3];
const B0_EXPAND: [usize; 7] = [1, 6, 6, 6, 6, 6, 6];

/// Channel rounding to a multiple of 8 that never drops more than 10%.
pub fn round_channels(c: usize, width_mult: f64) -> usize {
    let scaled = c as f64 * width_mult;
    let mut r = ((scaled + 4.0) as usize / 8 * 8).max(8);
    if (r as f64) < 0.9 * scaled {
        r += 8;
    }
    r
}

pub fn round_repeats(r: usize, depth_mult: f64) -> usize {
    (libm::ceil(r as f64 * depth_mult) as usize).max(1)
}

impl BackboneConfig {
    pub fn new(variant: Variant, use_sam: bool, use_csp: bool) -> Self {
        let (wm, dm) = variant.coefficients();
        let stages = (0..7)
            .map(|i| StageSpec {
                expand_ratio: B0_EXPAND[i],
                out_channels: round_channels(B0_CHANNELS[i], wm),
                repeats: round_repeats(B0_REPEATS[i], dm),
                stride: B0_STRIDES[i],
                kernel: B0_KERNELS[i],
            })
            .collect();
        Self {
            variant,
            width_mult: wm,
            depth_mult: dm,
            use_sam,
            use_csp,
            stem_channels: round_channels(32, wm),
            se_ratio: 0.25,
            csp_split: 0.5,
            stages,
        }
    }

    pub fn b0() -> Self {
        Self::new(Variant::B0, true, true)
    }

    /// Channel counts of C3, C4, C5.
    pub fn tap_channels(&self) -> [usize; 3] {
        let [a, b, c] = TAPS;
        [self.stages[a].out_channels, self.stages[b].out_channels, self.stages[c].out_channels]
    }
}

/// Stage indices (0-based) whose outputs are C3, C4 and C5.
pub const TAPS: [usize; 3] = [2, 4, 6];

#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl SqueezeExcite {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.pool(x, PoolKind::GlobalAvg, 0, 0)?;
        let s = self.reduce.forward(g, s)?;
        let s = g.swish(s)?;
        let s = self.expand.forward(g, s)?;
        let s = g.sigmoid(s)?;
        g.mul(x, s)
    }
}

/// Channel-mean and channel-max maps → 7×7 conv (2→1, with bias) → sigmoid gate.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(b, &join(name, "conv"), 2, 1, 7, 1, 1, true)? })
    }

    pub fn gate<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mean = g.reduce_axis(x, 1, Reduce::Mean)?;
        let max = g.reduce_axis(x, 1, Reduce::Max)?;
        let m = g.concat(&[mean, max], 1)?;
        let a = self.conv.forward(g, m)?;
        g.sigmoid(a)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gate = self.gate(g, x)?;
        g.mul(x, gate)
    }
}

#[derive(Clone, Debug)]
pub struct MbConv {
    pub c_in: usize,
    pub c_out: usize,
    pub hidden: usize,
    pub stride: usize,
    pub expand: Option<ConvBn>,
    pub dwconv: ConvBn,
    pub se: SqueezeExcite,
    pub sam: Option<SpatialAttention>,
    pub project: ConvBn,
}

impl MbConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
        se_ratio: f64,
        use_sam: bool,
    ) -> Result<Self> {
        ensure!(stride == 1 || stride == 2, "{name}: stride must be 1 or 2");
        let hidden = c_in * expand_ratio;
        let swish = Some(Activation::Swish);
        let expand = if expand_ratio != 1 {
            Some(ConvBn::new(b, &join(name, "expand"), c_in, hidden, 1, 1, 1, swish)?)
        } else {
            None
        };
        let dwconv = ConvBn::new(b, &join(name, "dwconv"), hidden, hidden, kernel, stride, hidden, swish)?;
        let squeeze = ((c_in as f64 * se_ratio) as usize).max(1);
        let se = SqueezeExcite {
            reduce: Conv2d::new(b, &join(name, "se.reduce"), hidden, squeeze, 1, 1, 1, true)?,
            expand: Conv2d::new(b, &join(name, "se.expand"), squeeze, hidden, 1, 1, 1, true)?,
        };
        let sam = if use_sam { Some(SpatialAttention::new(b, &join(name, "sam"))?) } else { None };
        let project = ConvBn::new(b, &join(name, "project"), hidden, c_out, 1, 1, 1, None)?;
        Ok(Self { c_in, c_out, hidden, stride, expand, dwconv, se, sam, project })
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        ensure!(g.shape(x)[1] == self.c_in, "block expects {} channels, got {}", self.c_in, g.shape(x)[1]);
        let mut h = x;
        if let Some(e) = &self.expand {
            h = e.forward(g, h)?;
        }
        h = self.dwconv.forward(g, h)?;
        h = self.se.forward(g, h)?;
        if let Some(s) = &self.sam {
            h = s.forward(g, h)?;
        }
        h = self.project.forward(g, h)?;
        if self.has_residual() {
            h = g.add(h, x)?;
        }
        Ok(h)
    }

    pub fn macs(&self, (h, w): (usize, usize)) -> (u64, (usize, usize)) {
        let mut m = 0;
        if let Some(e) = &self.expand {
            m += e.conv.macs((h, w));
        }
        m += self.dwconv.conv.macs((h, w));
        let hw = self.dwconv.conv.out_hw((h, w));
        m += self.se.reduce.macs((1, 1)) + self.se.expand.macs((1, 1));
        if let Some(s) = &self.sam {
            m += s.conv.macs(hw);
        }
        m += self.project.conv.macs(hw);
        (m, hw)
    }
}

/// Splits channels at `split_at`; the first part runs through `blocks`, the
/// second bypasses (average-pooled 2×2 when `downsample`); the two are
/// concatenated and fused by `transition`.
pub fn csp_stage<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    split_at: usize,
    downsample: bool,
    blocks: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    transition: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    ensure!(g.value(x).dims4()?[1] >= 2, "cross-stage split needs at least two channels");
    let (a, bypass) = g.split_channels(x, split_at)?;
    let a = blocks(g, a)?;
    let bypass = if downsample { g.pool(bypass, PoolKind::Avg, 2, 2)? } else { bypass };
    let cat = g.concat(&[a, bypass], 1)?;
    transition(g, cat)
}

/// Number of channels that traverse the block stack for a given split ratio.
pub fn csp_split_point(channels: usize, ratio: f64) -> usize {
    let a = libm::floor(channels as f64 * ratio) as usize;
    a.clamp(1, channels.saturating_sub(1).max(1))
}

#[derive(Clone, Debug)]
pub enum Stage {
    Plain(Vec<MbConv>),
    Csp { split_at: usize, downsample: bool, blocks: Vec<MbConv>, transition: ConvBn },
}

impl Stage {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let run = |g: &mut Graph<T>, mut h: Var, blocks: &[MbConv]| -> Result<Var> {
            for b in blocks {
                h = b.forward(g, h)?;
            }
            Ok(h)
        };
        match self {
            Stage::Plain(blocks) => run(g, x, blocks),
            Stage::Csp { split_at, downsample, blocks, transition } => {
                csp_stage(g, x, *split_at, *downsample, |g, a| run(g, a, blocks), |g, c| transition.forward(g, c))
            }
        }
    }

    pub fn macs(&self, hw: (usize, usize)) -> (u64, (usize, usize)) {
        let (blocks, extra) = match self {
            Stage::Plain(b) => (b, None),
            Stage::Csp { blocks, transition, .. } => (blocks, Some(transition)),
        };
        let (mut total, mut cur) = (0, hw);
        for b in blocks {
            let (m, next) = b.macs(cur);
            total += m;
            cur = next;
        }
        if let Some(t) = extra {
            total += t.conv.macs(cur);
        }
        (total, cur)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: ConvBn,
    pub stages: Vec<Stage>,
}

/// Backbone taps at strides 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

/// Multiply-accumulates of one image, split by component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackboneCost {
    pub stem: u64,
    pub stages: Vec<u64>,
}

impl BackboneCost {
    pub fn total(&self) -> u64 {
        self.stem + self.stages.iter().sum::<u64>()
    }
}

impl Backbone {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, config: &BackboneConfig) -> Result<Self> {
        Self::truncated(b, name, config, 7)
    }

    /// Builds only the first `depth` stages. Taps past the last built stage
    /// alias the deepest available one, so `depth = 5` serves a C4-only head.
    pub fn truncated<T: Scalar>(b: &mut Builder<T>, name: &str, config: &BackboneConfig, depth: usize) -> Result<Self> {
        ensure!((1..=7).contains(&depth), "backbone depth {} outside 1..=7", depth);
        ensure!(config.stages.len() == 7, "backbone expects 7 stages, got {}", config.stages.len());
        for s in &config.stages {
            ensure!(s.repeats >= 1 && (s.stride == 1 || s.stride == 2), "invalid stage {:?}", s);
        }
        let stem = ConvBn::new(b, &join(name, "stem"), 3, config.stem_channels, 3, 2, 1, Some(Activation::Swish))?;
        let mut stages = Vec::with_capacity(7);
        let mut c_in = config.stem_channels;
        for (si, spec) in config.stages.iter().enumerate().take(depth) {
            let sname = join(name, &format!("stage{}", si + 1));
            // The first stage has too few channels to split meaningfully.
            let csp = config.use_csp && si > 0;
            let (stack_in, stack_out, split_at) = if csp {
                let a = csp_split_point(c_in, config.csp_split);
                let bypass = c_in - a;
                ensure!(spec.out_channels > bypass, "{sname}: bypass width {} leaves no room in {}", bypass, spec.out_channels);
                (a, spec.out_channels - bypass, a)
            } else {
                (c_in, spec.out_channels, 0)
            };
            let mut blocks = Vec::with_capacity(spec.repeats);
            for r in 0..spec.repeats {
                let (ci, stride) = if r == 0 { (stack_in, spec.stride) } else { (stack_out, 1) };
                blocks.push(MbConv::new(
                    b,
                    &join(&sname, &format!("block{}", r + 1)),
                    ci,
                    stack_out,
                    spec.expand_ratio,
                    spec.kernel,
                    stride,
                    config.se_ratio,
                    config.use_sam,
                )?);
            }
            stages.push(if csp {
                let transition = ConvBn::new(
                    b,
                    &join(&sname, "transition"),
                    spec.out_channels,
                    spec.out_channels,
                    1,
                    1,
                    1,
                    Some(Activation::Swish),
                )?;
                Stage::Csp { split_at, downsample: spec.stride == 2, blocks, transition }
            } else {
                Stage::Plain(blocks)
            });
            c_in = spec.out_channels;
        }
        Ok(Self { config: config.clone(), stem, stages })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<BackboneFeatures> {
        let [_, c, h, w] = g.value(x).dims4()?;
        ensure!(c == 3, "backbone expects 3 input channels, got {}", c);
        ensure!(h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0, "input {}x{} is not divisible by 32", h, w);
        let mut y = self.stem.forward(g, x)?;
        let mut taps = [None; 3];
        for (i, s) in self.stages.iter().enumerate() {
            y = s.forward(g, y)?;
            if let Some(t) = TAPS.iter().position(|&t| t == i) {
                taps[t] = Some(y);
            }
        }
        let taps = taps.map(|t| t.unwrap_or(y));
        Ok(BackboneFeatures { c3: taps[0], c4: taps[1], c5: taps[2] })
    }

    pub fn cost(&self, (h, w): (usize, usize)) -> BackboneCost {
        let stem = self.stem.conv.macs((h, w));
        let mut hw = self.stem.conv.out_hw((h, w));
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let (m, next) = s.macs(hw);
            stages.push(m);
            hw = next;
        }
        BackboneCost { stem, stages }
    }
}

/// Global-average-pooled C5 followed by a linear layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub backbone: Backbone,
    pub fc: Linear,
    pub num_classes: usize,
}

impl Classifier {
    pub fn new<T: Scalar>(b: &mut Builder<T>, config: &BackboneConfig, num_classes: usize) -> Result<Self> {
        ensure!(num_classes >= 1, "need at least one class");
        let backbone = Backbone::new(b, "backbone", config)?;
        let fc = Linear::new(b, "classifier.fc", config.tap_channels()[2], num_classes)?;
        Ok(Self { backbone, fc, num_classes })
    }

    /// Logits `[n, num_classes]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let f = self.backbone.forward(g, x)?;
        let p = g.pool(f.c5, PoolKind::GlobalAvg, 0, 0)?;
        let n = g.shape(p)[0];
        let c = g.shape(p)[1];
        let p = g.reshape(p, &[n, c])?;
        self.fc.forward(g, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{params_under, ParamStore};
    use crate::tensor::Tensor;
    use crate::Mode;

    #[test]
    fn b0_table() {
        let c = BackboneConfig::b0();
        let ch: Vec<_> = c.stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(ch, B0_CHANNELS);
        assert_eq!(c.stem_channels, 32);
        assert_eq!(c.tap_channels(), [40, 112, 320]);
    }

    #[test]
    fn scaled_channels_are_multiples_of_eight() {
        for v in [Variant::B1, Variant::B3, Variant::B7] {
            let c = BackboneConfig::new(v, false, false);
            assert!(c.stages.iter().all(|s| s.out_channels % 8 == 0 && s.repeats >= 1));
        }
        assert_eq!(round_channels(32, 1.1), 32);
        assert_eq!(round_channels(320, 2.0), 640);
    }

    #[test]
    fn expand_ratio_six_widens_sixteen_to_ninety_six() {
        let mut s = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut s, 0);
        let blk = MbConv::new(&mut b, "blk", 16, 24, 6, 3, 2, 0.25, true).unwrap();
        assert_eq!(blk.hidden, 96);
        assert!(!blk.has_residual());
    }

    #[test]
    fn sam_adds_ninety_nine_params_per_block() {
        let mut s = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut s, 0);
        MbConv::new(&mut b, "blk", 16, 16, 6, 3, 1, 0.25, true).unwrap();
        assert_eq!(params_under(&s, "blk.sam").iter().map(|&p| s.param(p).numel()).sum::<usize>(), 99);
    }

    #[test]
    fn stride_two_halves_extent() {
        let mut s = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut s, 0);
        let blk = MbConv::new(&mut b, "blk", 16, 24, 6, 3, 2, 0.25, false).unwrap();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.input(Tensor::full(&[1, 16, 32, 32], 0.1)).unwrap();
        let y = blk.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 24, 16, 16]);
    }
}
