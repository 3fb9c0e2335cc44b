//! Static multiply-accumulate and parameter counts per module.
//!
//! Counts cover convolutions, transposed convolutions and linear layers, the
//! same work the tape tallies in `GraphStats::macs`; elementwise ops, pooling
//! and normalization are not counted.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{Backbone, BackboneConfig, BackboneCost};
use crate::detector::LevelShape;
use crate::error::Result;
use crate::model::MaskRcnn;
use crate::neck::level_hw;
use crate::nn::store::ParamStore;
use crate::nn::Builder;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCost {
    pub name: String,
    pub macs: u64,
    pub params: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostTable {
    pub rows: Vec<ModuleCost>,
}

impl CostTable {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ModuleCost> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Learnable scalars whose name is `prefix` or starts with `prefix.`.
pub fn params_under<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> usize {
    store
        .params()
        .iter()
        .filter(|p| p.name == prefix || (p.name.starts_with(prefix) && p.name.as_bytes().get(prefix.len()) == Some(&b'.')))
        .map(|p| p.tensor.numel())
        .sum()
}

/// Per-stage cost of a freshly built backbone at input `hw`, with its
/// total parameter count.
pub fn backbone_cost(config: &BackboneConfig, hw: (usize, usize)) -> Result<(BackboneCost, usize)> {
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(&mut Builder::new(&mut store, 0), "backbone", config)?;
    Ok((bb.cost(hw), store.num_scalars()))
}

/// Rows for the stem, each backbone stage, the feature network and the heads.
/// The box head is costed for `rois` regions and the mask head for `mask_rois`.
pub fn model_cost<T: Scalar>(model: &MaskRcnn, store: &ParamStore<T>, hw: (usize, usize), rois: usize, mask_rois: usize) -> CostTable {
    let mut rows = Vec::new();
    let bc = model.backbone.cost(hw);
    rows.push(ModuleCost { name: "backbone.stem".into(), macs: bc.stem, params: params_under(store, "backbone.stem") });
    for (i, &m) in bc.stages.iter().enumerate() {
        let name = format!("backbone.stage{}", i + 1);
        rows.push(ModuleCost { params: params_under(store, &name), name, macs: m });
    }
    rows.push(ModuleCost { name: "neck".into(), macs: model.neck.macs(hw), params: params_under(store, "neck") });
    let shapes: Vec<LevelShape> = model
        .neck
        .kind()
        .levels()
        .into_iter()
        .map(|l| {
            let (h, w) = level_hw(hw, l);
            LevelShape { level: l, h, w }
        })
        .collect();
    rows.push(ModuleCost { name: "rpn".into(), macs: model.rpn.macs(&shapes), params: params_under(store, "rpn") });
    rows.push(ModuleCost {
        name: "roi_heads.box".into(),
        macs: model.box_head.macs(rois),
        params: params_under(store, "roi_heads.box"),
    });
    rows.push(ModuleCost {
        name: "roi_heads.mask".into(),
        macs: model.mask_head.macs(mask_rois, model.config.heads.mask_pool),
        params: params_under(store, "roi_heads.mask"),
    });
    CostTable { rows }
}

/// Fractional MAC reduction of each CSP stage relative to the plain stage at
/// the same width and depth, for stages 2..=7.
pub fn csp_stage_reductions(config: &BackboneConfig, hw: (usize, usize)) -> Result<Vec<f64>> {
    let mut plain = config.clone();
    plain.use_csp = false;
    let mut csp = config.clone();
    csp.use_csp = true;
    let (p, _) = backbone_cost(&plain, hw)?;
    let (c, _) = backbone_cost(&csp, hw)?;
    Ok(p.stages.iter().zip(&c.stages).skip(1).map(|(&a, &b)| 1.0 - b as f64 / a as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, Mode};
    use crate::backbone::Variant;
    use crate::detector::MaskLossKind;
    use crate::gradcheck::tiny_model_config;
    use crate::neck::NeckKind;
    use crate::tensor::Tensor;

    #[test]
    fn csp_reduces_every_stage_of_b0() {
        let hw = (256, 256);
        let r = csp_stage_reductions(&BackboneConfig::b0(), hw).unwrap();
        assert_eq!(r.len(), 6);
        for (i, x) in r.iter().enumerate() {
            assert!((0.10..=0.60).contains(x), "stage {}: {x}", i + 2);
        }
        let (csp, pc) = backbone_cost(&BackboneConfig::new(Variant::B0, true, true), hw).unwrap();
        let (plain, pp) = backbone_cost(&BackboneConfig::new(Variant::B0, true, false), hw).unwrap();
        assert!(csp.total() < plain.total());
        assert!(pc < pp);
    }

    #[test]
    fn params_under_respects_name_boundaries() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("neck.a", Tensor::zeros(&[3])).unwrap();
        s.add_param("neck2.a", Tensor::zeros(&[5])).unwrap();
        s.add_param("neck", Tensor::zeros(&[2])).unwrap();
        assert_eq!(params_under(&s, "neck"), 5);
    }

    #[test]
    fn static_table_matches_executed_macs() {
        for neck in [NeckKind::C4, NeckKind::Fpn, NeckKind::NasFpn] {
            let cfg = tiny_model_config(neck, MaskLossKind::Dice);
            let (model, store) = MaskRcnn::build::<f32>(&cfg, 0).unwrap();
            let hw = (64, 96);
            let table = model_cost(&model, &store, hw, 6, 3);
            assert_eq!(table.total_params(), store.num_scalars(), "{neck:?}");

            let mut g = Graph::new(&store, Mode::Eval);
            let x = g.input(Tensor::full(&[1, 3, hw.0, hw.1], 0.1)).unwrap();
            let p = model.pyramid(&mut g, x).unwrap();
            let after_neck = g.stats.macs;
            model.rpn.forward(&mut g, &p).unwrap();
            let rpn = g.stats.macs - after_neck;
            let roi = g.input(Tensor::full(&[6, cfg.pyramid_channels, 7, 7], 0.1)).unwrap();
            model.box_head.forward(&mut g, roi).unwrap();
            let before_mask = g.stats.macs;
            let roi = g.input(Tensor::full(&[3, cfg.pyramid_channels, 14, 14], 0.1)).unwrap();
            model.mask_head.forward(&mut g, roi).unwrap();

            let row = |n: &str| table.get(n).unwrap().macs;
            let front: u64 = table.rows.iter().filter(|r| r.name.starts_with("backbone") || r.name == "neck").map(|r| r.macs).sum();
            assert_eq!(after_neck, front, "{neck:?}");
            assert_eq!(rpn, row("rpn"), "{neck:?}");
            assert_eq!(g.stats.macs - before_mask, row("roi_heads.mask"), "{neck:?}");
            assert_eq!(g.stats.macs, table.total_macs(), "{neck:?}");
        }
    }
}
