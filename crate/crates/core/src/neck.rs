//! Feature networks turning backbone taps into a pyramid: the C4 single-level
//! baseline, a top-down FPN, and NAS-FPN merging cells driven by a topology file.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Activation, Graph, Var};
use crate::backbone::BackboneFeatures;
use crate::error::{ensure, Error, Result};
use crate::kernels::{InterpMode, PoolKind};
use crate::nn::{join, BatchNorm2d, Builder, Conv2d};
use crate::scalar::Scalar;

pub const MIN_LEVEL: usize = 3;
pub const MAX_LEVEL: usize = 7;

/// The bundled merging-cell topology.
pub const DEFAULT_TOPOLOGY: &str = include_str!("../assets/nasfpn.txt");

/// Level-indexed feature maps, ascending by level, all with the same channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<(usize, Var)>,
}

impl FeaturePyramid {
    pub fn get(&self, level: usize) -> Option<Var> {
        self.levels.iter().find(|(l, _)| *l == level).map(|&(_, v)| v)
    }

    pub fn level_ids(&self) -> Vec<usize> {
        self.levels.iter().map(|&(l, _)| l).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Sum,
    GlobalAttention,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeRef {
    Input(usize),
    Cell(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub id: String,
    pub a: NodeRef,
    pub b: NodeRef,
    pub level: usize,
    pub fusion: Fusion,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub cells: Vec<CellSpec>,
    /// For each level 3..=7, the index of the cell producing it.
    pub outputs: [usize; 5],
}

impl Topology {
    pub fn default_nasfpn() -> Self {
        Self::parse(DEFAULT_TOPOLOGY).expect("bundled topology is valid")
    }

    /// Parses `cell <id> <a> <b> <level> <sum|gattn>` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cells: Vec<CellSpec> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |m: &str| Error::invalid(format!("topology line {}: {m}", ln + 1));
            if f.len() != 6 || f[0] != "cell" {
                return Err(bad("expected `cell <id> <a> <b> <level> <sum|gattn>`"));
            }
            let id = f[1].to_string();
            if id.starts_with('P') || cells.iter().any(|c| c.id == id) {
                return Err(bad(&format!("cell id `{id}` is reserved or repeated")));
            }
            let node = |name: &str| -> Result<NodeRef> {
                if let Some(l) = name.strip_prefix('P').and_then(|l| l.parse::<usize>().ok()) {
                    if (MIN_LEVEL..=MAX_LEVEL).contains(&l) {
                        return Ok(NodeRef::Input(l));
                    }
                }
                match cells.iter().position(|c| c.id == name) {
                    Some(i) => Ok(NodeRef::Cell(i)),
                    None => Err(bad(&format!("reference to unproduced node `{name}`"))),
                }
            };
            let (a, b) = (node(f[2])?, node(f[3])?);
            let level: usize = f[4].parse().map_err(|_| bad("target level is not an integer"))?;
            if !(MIN_LEVEL..=MAX_LEVEL).contains(&level) {
                return Err(bad(&format!("target level {level} outside 3..7")));
            }
            let fusion = match f[5] {
                "sum" => Fusion::Sum,
                "gattn" => Fusion::GlobalAttention,
                other => return Err(bad(&format!("unknown fusion `{other}`"))),
            };
            cells.push(CellSpec { id, a, b, level, fusion });
        }
        let mut outputs = [usize::MAX; 5];
        for (i, c) in cells.iter().enumerate() {
            outputs[c.level - MIN_LEVEL] = i;
        }
        if let Some(l) = outputs.iter().position(|&o| o == usize::MAX) {
            return Err(Error::invalid(format!("topology produces no output for level {}", l + MIN_LEVEL)));
        }
        Ok(Self { cells, outputs })
    }

    pub fn level_of(&self, n: &NodeRef) -> usize {
        match n {
            NodeRef::Input(l) => *l,
            NodeRef::Cell(i) => self.cells[*i].level,
        }
    }
}

/// 1×1 lateral projections of C3..C5 plus the two stride-2 convs making P6, P7.
#[derive(Clone, Debug)]
pub struct PyramidInputs {
    pub laterals: [Conv2d; 3],
    pub p6: Conv2d,
    pub p7: Conv2d,
}

impl PyramidInputs {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, taps: [usize; 3], f: usize) -> Result<Self> {
        let lat = |b: &mut Builder<T>, i: usize| Conv2d::new(b, &join(name, &format!("lateral{}", i + 3)), taps[i], f, 1, 1, 1, true);
        Ok(Self {
            laterals: [lat(b, 0)?, lat(b, 1)?, lat(b, 2)?],
            p6: Conv2d::new(b, &join(name, "p6"), f, f, 3, 2, 1, true)?,
            p7: Conv2d::new(b, &join(name, "p7"), f, f, 3, 2, 1, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, c: &BackboneFeatures) -> Result<FeaturePyramid> {
        let p3 = self.laterals[0].forward(g, c.c3)?;
        let p4 = self.laterals[1].forward(g, c.c4)?;
        let p5 = self.laterals[2].forward(g, c.c5)?;
        let p6 = self.p6.forward(g, p5)?;
        let p7 = self.p7.forward(g, p6)?;
        Ok(FeaturePyramid { levels: alloc::vec![(3, p3), (4, p4), (5, p5), (6, p6), (7, p7)] })
    }

    fn macs(&self, (h, w): (usize, usize)) -> u64 {
        let mut m = 0;
        for (i, l) in self.laterals.iter().enumerate() {
            let s = 1 << (i + 3);
            m += l.macs((h / s, w / s));
        }
        m + self.p6.macs((h / 32, w / 32)) + self.p7.macs(self.p6.out_hw((h / 32, w / 32)))
    }
}

/// Top-down pathway: level L = P_L + nearest-upsampled output above, then a 3×3 smoothing conv.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub smooth: Vec<Conv2d>,
}

impl Fpn {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, f: usize) -> Result<Self> {
        let smooth = (MIN_LEVEL..=MAX_LEVEL)
            .map(|l| Conv2d::new(b, &join(name, &format!("smooth{l}")), f, f, 3, 1, 1, true))
            .collect::<Result<_>>()?;
        Ok(Self { smooth })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &FeaturePyramid) -> Result<FeaturePyramid> {
        ensure!(p.level_ids() == [3, 4, 5, 6, 7], "FPN needs levels 3..7");
        let mut merged: Vec<Var> = Vec::with_capacity(5);
        for i in (0..5).rev() {
            let lat = p.levels[i].1;
            let m = if let Some(&above) = merged.last() {
                let s = g.shape(lat);
                let up = g.interpolate(above, (s[2], s[3]), InterpMode::Nearest)?;
                g.add(lat, up)?
            } else {
                lat
            };
            merged.push(m);
        }
        merged.reverse();
        let mut levels = Vec::with_capacity(5);
        for (i, m) in merged.into_iter().enumerate() {
            levels.push((i + MIN_LEVEL, self.smooth[i].forward(g, m)?));
        }
        Ok(FeaturePyramid { levels })
    }

    fn macs(&self, (h, w): (usize, usize)) -> u64 {
        self.smooth.iter().enumerate().map(|(i, c)| c.macs(level_hw((h, w), i + MIN_LEVEL))).sum()
    }
}

/// Spatial extent of pyramid level `l` for an input of `(h, w)` (stride-2 convs round up).
pub fn level_hw((h, w): (usize, usize), l: usize) -> (usize, usize) {
    let mut hw = (h / 32, w / 32);
    if l <= 5 {
        return (h >> l, w >> l);
    }
    for _ in 5..l {
        hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
    }
    hw
}

/// One merging cell: resample both inputs, fuse, then ReLU → 3×3 conv → BN.
#[derive(Clone, Debug)]
pub struct MergingCell {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl MergingCell {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, f: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, &join(name, "conv"), f, f, 3, 1, 1, false)?,
            bn: BatchNorm2d::new(b, &join(name, "bn"), f)?,
        })
    }

    /// `a` sits at `levels.0`, `b` at `levels.1`; output is at `target` with
    /// extent `hw`. `extra` maps, already at the target extent, are added to
    /// the fused sum before the ReLU.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        (a, b): (Var, Var),
        levels: (usize, usize),
        target: (usize, (usize, usize)),
        fusion: Fusion,
        extra: &[Var],
    ) -> Result<Var> {
        let ra = resample(g, a, levels.0, target)?;
        let rb = resample(g, b, levels.1, target)?;
        let mut fused = fuse(g, (ra, rb), levels, fusion)?;
        for &e in extra {
            fused = g.add(fused, e)?;
        }
        let y = g.activation(fused, Activation::Relu)?;
        let y = self.conv.forward(g, y)?;
        self.bn.forward(g, y)
    }
}

/// Combines two same-shape maps. For global attention the input from the
/// higher level (`b` on ties) is gated by `sigmoid(global_avg_pool(other))`.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, (a, b): (Var, Var), levels: (usize, usize), fusion: Fusion) -> Result<Var> {
    match fusion {
        Fusion::Sum => g.add(a, b),
        Fusion::GlobalAttention => {
            let (low, high) = if levels.0 > levels.1 { (b, a) } else { (a, b) };
            let gate = g.pool(low, PoolKind::GlobalAvg, 0, 0)?;
            let gate = g.sigmoid(gate)?;
            let gated = g.mul(high, gate)?;
            g.add(low, gated)
        }
    }
}

/// Nearest upsampling to a finer level, stride-matched max pooling to a coarser one.
pub fn resample<T: Scalar>(g: &mut Graph<T>, x: Var, from: usize, (to, hw): (usize, (usize, usize))) -> Result<Var> {
    let s = g.shape(x);
    let cur = (s[2], s[3]);
    if cur == hw {
        return Ok(x);
    }
    if from < to {
        let k = 1 << (to - from);
        let y = g.pool(x, PoolKind::Max, k.min(cur.0).min(cur.1), k)?;
        if (g.shape(y)[2], g.shape(y)[3]) == hw {
            return Ok(y);
        }
        g.interpolate(y, hw, InterpMode::Nearest)
    } else {
        g.interpolate(x, hw, InterpMode::Nearest)
    }
}

#[derive(Clone, Debug)]
pub struct NasFpn {
    pub topology: Topology,
    pub cells: Vec<MergingCell>,
}

impl NasFpn {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, f: usize, topology: Topology) -> Result<Self> {
        let cells = topology
            .cells
            .iter()
            .map(|c| MergingCell::new(b, &join(name, &c.id), f))
            .collect::<Result<_>>()?;
        Ok(Self { topology, cells })
    }

    /// Runs the cells in order. As in the reference implementation, an
    /// output cell also sums in every node of its own level that no cell has
    /// consumed so far, so no input goes unused.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &FeaturePyramid) -> Result<FeaturePyramid> {
        ensure!(p.level_ids() == [3, 4, 5, 6, 7], "NAS-FPN needs levels 3..7");
        let n_in = MAX_LEVEL - MIN_LEVEL + 1;
        let slot = |n: &NodeRef| match n {
            NodeRef::Input(l) => l - MIN_LEVEL,
            NodeRef::Cell(i) => n_in + i,
        };
        let mut used = alloc::vec![false; n_in + self.cells.len()];
        let mut produced: Vec<Var> = Vec::with_capacity(self.cells.len());
        for (ci, (spec, cell)) in self.topology.cells.iter().zip(&self.cells).enumerate() {
            let pick = |n: &NodeRef| match n {
                NodeRef::Input(l) => p.levels[l - MIN_LEVEL].1,
                NodeRef::Cell(i) => produced[*i],
            };
            let (a, b) = (pick(&spec.a), pick(&spec.b));
            used[slot(&spec.a)] = true;
            used[slot(&spec.b)] = true;
            let t = p.levels[spec.level - MIN_LEVEL].1;
            let hw = (g.shape(t)[2], g.shape(t)[3]);
            let mut extra = Vec::new();
            if self.topology.outputs.contains(&ci) {
                for k in 0..n_in + ci {
                    let (level, v) = if k < n_in { (k + MIN_LEVEL, p.levels[k].1) } else { (self.topology.cells[k - n_in].level, produced[k - n_in]) };
                    if !used[k] && level == spec.level {
                        used[k] = true;
                        extra.push(v);
                    }
                }
            }
            let levels = (self.topology.level_of(&spec.a), self.topology.level_of(&spec.b));
            let y = cell.forward(g, (a, b), levels, (spec.level, hw), spec.fusion, &extra)?;
            produced.push(y);
        }
        let levels = self.topology.outputs.iter().enumerate().map(|(i, &c)| (i + MIN_LEVEL, produced[c])).collect();
        Ok(FeaturePyramid { levels })
    }

    fn macs(&self, hw: (usize, usize)) -> u64 {
        self.topology.cells.iter().zip(&self.cells).map(|(s, c)| c.conv.macs(level_hw(hw, s.level))).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeckKind {
    C4,
    Fpn,
    NasFpn,
}

impl NeckKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "c4" => Some(NeckKind::C4),
            "fpn" => Some(NeckKind::Fpn),
            "nasfpn" => Some(NeckKind::NasFpn),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NeckKind::C4 => "c4",
            NeckKind::Fpn => "fpn",
            NeckKind::NasFpn => "nasfpn",
        }
    }

    pub fn levels(self) -> Vec<usize> {
        match self {
            NeckKind::C4 => alloc::vec![4],
            _ => (MIN_LEVEL..=MAX_LEVEL).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Neck {
    /// Heads attach to a single level-4 map projected from C4.
    C4 { lateral: Conv2d },
    Fpn { inputs: PyramidInputs, fpn: Fpn },
    NasFpn { inputs: PyramidInputs, nas: NasFpn },
}

impl Neck {
    pub fn new<T: Scalar>(b: &mut Builder<T>, kind: NeckKind, taps: [usize; 3], f: usize, topology: Option<Topology>) -> Result<Self> {
        ensure!(f >= 1, "pyramid channel count must be positive");
        Ok(match kind {
            NeckKind::C4 => Neck::C4 { lateral: Conv2d::new(b, "neck.lateral4", taps[1], f, 1, 1, 1, true)? },
            NeckKind::Fpn => Neck::Fpn { inputs: PyramidInputs::new(b, "neck.inputs", taps, f)?, fpn: Fpn::new(b, "neck.fpn", f)? },
            NeckKind::NasFpn => {
                let topo = topology.unwrap_or_else(Topology::default_nasfpn);
                Neck::NasFpn { inputs: PyramidInputs::new(b, "neck.inputs", taps, f)?, nas: NasFpn::new(b, "neck.nasfpn", f, topo)? }
            }
        })
    }

    pub fn kind(&self) -> NeckKind {
        match self {
            Neck::C4 { .. } => NeckKind::C4,
            Neck::Fpn { .. } => NeckKind::Fpn,
            Neck::NasFpn { .. } => NeckKind::NasFpn,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, c: &BackboneFeatures) -> Result<FeaturePyramid> {
        match self {
            Neck::C4 { lateral } => Ok(FeaturePyramid { levels: alloc::vec![(4, lateral.forward(g, c.c4)?)] }),
            Neck::Fpn { inputs, fpn } => {
                let p = inputs.forward(g, c)?;
                fpn.forward(g, &p)
            }
            Neck::NasFpn { inputs, nas } => {
                let p = inputs.forward(g, c)?;
                nas.forward(g, &p)
            }
        }
    }

    pub fn macs(&self, hw: (usize, usize)) -> u64 {
        match self {
            Neck::C4 { lateral } => lateral.macs((hw.0 / 16, hw.1 / 16)),
            Neck::Fpn { inputs, fpn } => inputs.macs(hw) + fpn.macs(hw),
            Neck::NasFpn { inputs, nas } => inputs.macs(hw) + nas.macs(hw),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_topology_parses() {
        let t = Topology::default_nasfpn();
        assert_eq!(t.cells.len(), 7);
        assert_eq!(t.outputs, [2, 3, 4, 6, 5]);
    }

    #[test]
    fn dangling_reference_rejected() {
        let e = Topology::parse("cell a P3 zz 3 sum\n").unwrap_err();
        assert!(matches!(e, Error::InvalidArgument(_)));
        assert!(Topology::parse("cell a P3 P4 3 sum\n").is_err(), "levels 4..7 missing");
        assert!(Topology::parse("cell a P3 P4 9 sum\n").is_err());
    }

    #[test]
    fn level_extents() {
        assert_eq!(level_hw((256, 256), 3), (32, 32));
        assert_eq!(level_hw((256, 256), 7), (2, 2));
        assert_eq!(level_hw((320, 320), 7), (3, 3));
    }
}
