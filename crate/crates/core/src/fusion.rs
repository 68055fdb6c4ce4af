//! Layer-specific geometry mergers, masked additive injection into the
//! decoder, fusion plans, and the vision-path (GVF) baseline.
//!
//! Geometry from tap layer `l_j` is projected to the decoder width and added
//! to the vision-token rows of decoder hidden state `j`; every other row is
//! left untouched. GVF instead adds projected geometry to the merged vision
//! tokens once, before the decoder.

use serde::{Deserialize, Serialize};

use crate::alignment::PatchGrid;
use crate::encoders::window_merge;
use crate::error::{Error, Result};
use crate::model::{merger_prefix, ModelParams};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Stack,
    StackReverse,
    GvfSingle,
    GvfMulti,
}

impl FusionMode {
    pub fn is_stack(self) -> bool {
        matches!(self, FusionMode::Stack | FusionMode::StackReverse)
    }

    pub fn is_gvf(self) -> bool {
        matches!(self, FusionMode::GvfSingle | FusionMode::GvfMulti)
    }
}

/// Where injection into decoder layer `j` happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectSite {
    /// Into the input hidden state of block `j` (`j = 0` modifies embeddings).
    #[default]
    PreBlock,
    /// Into the output of block `j`, after its attention and MLP.
    PostBlock,
}

/// Which geometry taps feed which decoder layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionPlan {
    pub mode: FusionMode,
    /// `(tap layer, decoder layer)` for stack modes.
    pub pairs: Vec<(usize, usize)>,
    /// Tap layers summed into the vision tokens for GVF modes.
    pub gvf_layers: Vec<usize>,
}

impl FusionPlan {
    pub fn none() -> Self {
        Self {
            mode: FusionMode::None,
            pairs: Vec::new(),
            gvf_layers: Vec::new(),
        }
    }

    /// Build a plan. Stack modes map increasing taps onto increasing
    /// (`stack`) or decreasing (`stack_reverse`) decoder layers; GVF modes
    /// only carry the tap list.
    pub fn new(mode: FusionMode, taps: &[usize], decoder_layers: &[usize]) -> Result<Self> {
        let mut taps_sorted = taps.to_vec();
        taps_sorted.sort_unstable();
        if taps_sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate tap layers {taps:?}")));
        }
        let mut layers = decoder_layers.to_vec();
        layers.sort_unstable();
        if layers.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "duplicate decoder layers {decoder_layers:?}"
            )));
        }
        match mode {
            FusionMode::None => Ok(Self::none()),
            FusionMode::Stack | FusionMode::StackReverse => {
                if taps.len() != decoder_layers.len() || taps.is_empty() {
                    return Err(Error::Config(format!(
                        "{} taps for {} decoder layers",
                        taps.len(),
                        decoder_layers.len()
                    )));
                }
                if mode == FusionMode::StackReverse {
                    layers.reverse();
                }
                Ok(Self {
                    mode,
                    pairs: taps_sorted.into_iter().zip(layers).collect(),
                    gvf_layers: Vec::new(),
                })
            }
            FusionMode::GvfSingle | FusionMode::GvfMulti => {
                if taps.is_empty() || (mode == FusionMode::GvfSingle && taps.len() != 1) {
                    return Err(Error::Config(format!("{mode:?} with taps {taps:?}")));
                }
                Ok(Self {
                    mode,
                    pairs: Vec::new(),
                    gvf_layers: taps_sorted,
                })
            }
        }
    }

    /// Every tap the plan reads, ascending.
    pub fn taps(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self
            .pairs
            .iter()
            .map(|p| p.0)
            .chain(self.gvf_layers.iter().copied())
            .collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// Check against a decoder depth and the taps that have mergers.
    pub fn validate(&self, decoder_depth: usize, available_taps: &[usize]) -> Result<()> {
        match self.mode {
            FusionMode::None => {
                if !self.pairs.is_empty() || !self.gvf_layers.is_empty() {
                    return Err(Error::Config("plan mode none carries layers".into()));
                }
            }
            FusionMode::Stack | FusionMode::StackReverse => {
                if self.pairs.is_empty() || !self.gvf_layers.is_empty() {
                    return Err(Error::Config(
                        "stack plan needs pairs and no gvf layers".into(),
                    ));
                }
                let mut dec: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
                if let Some(&bad) = dec.iter().find(|&&d| d >= decoder_depth) {
                    return Err(Error::Config(format!(
                        "decoder layer {bad} ≥ depth {decoder_depth}"
                    )));
                }
                let taps: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
                if taps.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(
                        "stack pairs must list taps increasing".into(),
                    ));
                }
                let increasing = dec.windows(2).all(|w| w[0] < w[1]);
                let decreasing = dec.windows(2).all(|w| w[0] > w[1]);
                let ordered = match self.mode {
                    FusionMode::Stack => increasing,
                    _ => decreasing,
                };
                if !ordered {
                    return Err(Error::Config(format!(
                        "{:?} pairs out of order: {:?}",
                        self.mode, self.pairs
                    )));
                }
                dec.sort_unstable();
                if dec.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Config("duplicate decoder layers".into()));
                }
            }
            FusionMode::GvfSingle | FusionMode::GvfMulti => {
                if !self.pairs.is_empty() || self.gvf_layers.is_empty() {
                    return Err(Error::Config(
                        "gvf plan needs gvf layers and no pairs".into(),
                    ));
                }
                if self.mode == FusionMode::GvfSingle && self.gvf_layers.len() != 1 {
                    return Err(Error::Config("gvf_single takes exactly one layer".into()));
                }
            }
        }
        if let Some(bad) = self
            .taps()
            .into_iter()
            .find(|t| !available_taps.contains(t))
        {
            return Err(Error::Config(format!(
                "tap {bad} has no merger (available {available_taps:?})"
            )));
        }
        Ok(())
    }

    /// Decoder layers that receive geometry, with their taps.
    pub fn injections_at(&self, decoder_layer: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs
            .iter()
            .filter(move |p| p.1 == decoder_layer)
            .map(|p| p.0)
    }
}

/// Free-function spelling of [`FusionPlan::new`].
pub fn make_fusion_plan(
    mode: FusionMode,
    taps: &[usize],
    decoder_layers: &[usize],
) -> Result<FusionPlan> {
    FusionPlan::new(mode, taps, decoder_layers)
}

/// One bit per sequence position marking vision tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionMask {
    bits: Vec<bool>,
}

impl VisionMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Leading span of `ones` vision positions in a sequence of `total`.
    pub fn prefix(ones: usize, total: usize) -> Self {
        Self {
            bits: (0..total).map(|i| i < ones).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `N_p`, the number of vision positions.
    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Masked positions in sequence order.
    pub fn positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn first(&self) -> Option<usize> {
        self.bits.iter().position(|&b| b)
    }
}

/// Add row `k` of `geo` to the `k`-th masked row of `hidden`.
pub fn scatter_add_fusion_graph(
    g: &mut Graph<'_>,
    hidden: Var,
    geo: Var,
    mask: &VisionMask,
) -> Result<Var> {
    let n_tot = g.value(hidden).rows();
    if mask.len() != n_tot {
        return Err(Error::Fusion(format!(
            "mask length {} vs {n_tot} rows",
            mask.len()
        )));
    }
    let n_p = mask.ones();
    let rows = g.value(geo).rows();
    if rows != n_p {
        return Err(Error::Fusion(format!(
            "{rows} geometry rows for {n_p} vision positions"
        )));
    }
    if g.value(geo).cols() != g.value(hidden).cols() {
        return Err(Error::Fusion(
            "geometry width differs from hidden width".into(),
        ));
    }
    g.scatter_add_rows(hidden, geo, &mask.positions())
}

/// Eager masked scatter-add; unmasked rows are copied bit-for-bit.
pub fn scatter_add_fusion(hidden: &Tensor, geo: &Tensor, mask: &VisionMask) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = g.constant(hidden.clone());
    let x = g.constant(geo.clone());
    let out = scatter_add_fusion_graph(&mut g, h, x, mask)?;
    Ok(g.value(out).clone())
}

/// Merged vision tokens plus the sum of projected geometry layers.
pub fn gvf_fuse_graph(g: &mut Graph<'_>, merged_vision: Var, layers: &[Var]) -> Result<Var> {
    let mut acc = merged_vision;
    for &l in layers {
        if g.value(l).shape() != g.value(merged_vision).shape() {
            return Err(Error::Fusion(format!(
                "geometry layer {:?} vs vision {:?}",
                g.value(l).shape(),
                g.value(merged_vision).shape()
            )));
        }
        acc = g.add(acc, l)?;
    }
    Ok(acc)
}

pub fn gvf_fuse(merged_vision: &Tensor, layers: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(merged_vision.clone());
    let ls: Vec<Var> = layers.iter().map(|l| g.constant(l.clone())).collect();
    let out = gvf_fuse_graph(&mut g, v, &ls)?;
    Ok(g.value(out).clone())
}

/// Weights of one layer-specific geometry merger.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryMerger {
    pub gain: Tensor,
    /// `D_mlp × s²·D_geo`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `D_lang × D_mlp`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GeometryMerger {
    pub fn from_params(params: &ModelParams, tap: usize) -> Result<Self> {
        let pre = merger_prefix(tap);
        let get = |n: &str| params.get(&format!("{pre}.{n}")).cloned();
        Ok(Self {
            gain: get("norm")?,
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    /// `G = W2·σ(W1·concat_window(rms_norm(Z)) + b1) + b2` over stripped,
    /// window-reordered tap tokens `(K·N) × D_geo`.
    pub fn project(&self, tokens: &Tensor, grid: &PatchGrid, eps: f64) -> Result<Tensor> {
        let mut b = ModelParams::new();
        let pre = "merger";
        use crate::model::ParamGroup::GeometryMergers as G;
        b.insert(format!("{pre}.norm"), self.gain.clone(), G);
        b.insert(format!("{pre}.w1"), self.w1.clone(), G);
        b.insert(format!("{pre}.b1"), self.b1.clone(), G);
        b.insert(format!("{pre}.w2"), self.w2.clone(), G);
        b.insert(format!("{pre}.b2"), self.b2.clone(), G);
        let mut g = Graph::new();
        let bound = b.bind(&mut g, |_| false);
        let t = g.constant(tokens.clone());
        let out = project_tokens(&mut g, &bound, pre, t, grid, eps)?;
        Ok(g.value(out).clone())
    }
}

fn project_tokens(
    g: &mut Graph<'_>,
    b: &crate::model::Bound,
    prefix: &str,
    tokens: Var,
    grid: &PatchGrid,
    eps: f64,
) -> Result<Var> {
    let rows = g.value(tokens).rows();
    let n = grid.tokens();
    let s2 = grid.window_size();
    if rows % s2 != 0 || rows % n != 0 {
        return Err(Error::Alignment(format!(
            "{rows} geometry tokens do not fill whole {s2}-token windows of a {n}-token grid"
        )));
    }
    window_merge(g, b, prefix, tokens, grid, rows / n, true, eps)
}

/// Tape version of [`project_geometry`] using the merger of `tap` from the bound parameters.
pub fn project_geometry_graph(
    g: &mut Graph<'_>,
    b: &crate::model::Bound,
    tap: usize,
    tokens: Var,
    grid: &PatchGrid,
    eps: f64,
) -> Result<Var> {
    project_tokens(g, b, &merger_prefix(tap), tokens, grid, eps)
}

pub fn project_geometry(
    tokens: &Tensor,
    merger: &GeometryMerger,
    grid: &PatchGrid,
    eps: f64,
) -> Result<Tensor> {
    merger.project(tokens, grid, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn merger(
        seed: u64,
        d_geo: usize,
        s2: usize,
        d_mlp: usize,
        d_lang: usize,
        zero_out: bool,
    ) -> GeometryMerger {
        let mut rng = Rng::new(seed, 0);
        let w2 = if zero_out {
            Tensor::zeros(&[d_lang, d_mlp])
        } else {
            rng.normal_tensor(&[d_lang, d_mlp], 0.3)
        };
        GeometryMerger {
            gain: Tensor::filled(&[d_geo], 1.0),
            w1: rng.normal_tensor(&[d_mlp, s2 * d_geo], 0.3),
            b1: Tensor::zeros(&[d_mlp]),
            w2,
            b2: Tensor::zeros(&[d_lang]),
        }
    }

    #[test]
    fn projection_shape_zero_and_locality() {
        let grid = PatchGrid::new(4, 4, 2, 4);
        let m = merger(1, 8, 4, 16, 64, false);
        let mut rng = Rng::new(2, 0);
        let tokens = rng.normal_tensor(&[32, 8], 1.0);
        let out = project_geometry(&tokens, &m, &grid, 1e-6).unwrap();
        assert_eq!(out.shape(), &[8, 64]);

        let zero = project_geometry(&Tensor::zeros(&[16, 8]), &m, &grid, 1e-6).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        // reordered token 9 sits in window 2 (rows 8..12)
        let one_view = tokens.slice_rows(0, 16).unwrap();
        let base = project_geometry(&one_view, &m, &grid, 1e-6).unwrap();
        let mut bumped = one_view.clone();
        bumped.row_mut(9)[0] += 1.0;
        let out2 = project_geometry(&bumped, &m, &grid, 1e-6).unwrap();
        for k in [0, 1, 3] {
            assert!(out2
                .row(k)
                .iter()
                .zip(base.row(k))
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(out2.row(2) != base.row(2));

        assert!(matches!(
            project_geometry(&Tensor::zeros(&[6, 8]), &m, &grid, 1e-6),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn scatter_examples() {
        let hidden = Tensor::from_rows(&[
            vec![1.0, 1.0],
            vec![2.0, 2.0],
            vec![3.0, 3.0],
            vec![4.0, 4.0],
        ])
        .unwrap();
        let geo = Tensor::from_rows(&[vec![10.0, 20.0], vec![30.0, 40.0]]).unwrap();
        let mask = VisionMask::new(vec![false, true, true, false]);
        let out = scatter_add_fusion(&hidden, &geo, &mask).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0, 12.0, 22.0, 33.0, 43.0, 4.0, 4.0]);

        let zero = Tensor::zeros(&[2, 2]);
        assert!(scatter_add_fusion(&hidden, &zero, &mask)
            .unwrap()
            .bit_eq(&hidden));

        let empty = VisionMask::new(vec![false; 4]);
        let one = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            scatter_add_fusion(&hidden, &one, &empty),
            Err(Error::Fusion(_))
        ));
    }

    #[test]
    fn scatter_one_hot_probe() {
        let mut rng = Rng::new(9, 0);
        let hidden = rng.normal_tensor(&[12, 5], 1.0);
        let bits: Vec<bool> = (0..12).map(|i| [1, 2, 4, 7, 8, 11].contains(&i)).collect();
        let mask = VisionMask::new(bits);
        let positions = mask.positions();
        for k in 0..6 {
            let mut geo = Tensor::zeros(&[6, 5]);
            geo.row_mut(k).iter_mut().for_each(|v| *v = 1.0);
            let out = scatter_add_fusion(&hidden, &geo, &mask).unwrap();
            for r in 0..12 {
                let changed = out.row(r) != hidden.row(r);
                assert_eq!(changed, r == positions[k], "k={k} r={r}");
            }
        }
    }

    #[test]
    fn plan_examples() {
        let p = make_fusion_plan(FusionMode::Stack, &[11, 17, 23], &[0, 1, 2]).unwrap();
        assert_eq!(p.pairs, vec![(11, 0), (17, 1), (23, 2)]);
        let r = make_fusion_plan(FusionMode::StackReverse, &[11, 17, 23], &[0, 1, 2]).unwrap();
        assert_eq!(r.pairs, vec![(11, 2), (17, 1), (23, 0)]);
        let s = make_fusion_plan(FusionMode::GvfSingle, &[23], &[]).unwrap();
        assert!(s.pairs.is_empty());
        assert_eq!(s.gvf_layers, vec![23]);

        assert!(make_fusion_plan(FusionMode::Stack, &[1, 2], &[0, 0]).is_err());
        assert!(make_fusion_plan(FusionMode::Stack, &[1, 2], &[0]).is_err());
        assert!(make_fusion_plan(FusionMode::GvfSingle, &[1, 2], &[]).is_err());

        // same tap and decoder multisets under both orders
        let mut pt: Vec<usize> = p.pairs.iter().map(|x| x.0).collect();
        let mut rt: Vec<usize> = r.pairs.iter().map(|x| x.0).collect();
        pt.sort_unstable();
        rt.sort_unstable();
        assert_eq!(pt, rt);
        let mut pd: Vec<usize> = p.pairs.iter().map(|x| x.1).collect();
        let mut rd: Vec<usize> = r.pairs.iter().map(|x| x.1).collect();
        pd.sort_unstable();
        rd.sort_unstable();
        assert_eq!(pd, rd);
    }

    #[test]
    fn plan_validation() {
        let p = make_fusion_plan(FusionMode::Stack, &[3, 5, 7], &[0, 1, 2]).unwrap();
        assert!(p.validate(4, &[3, 5, 7]).is_ok());
        assert!(p.validate(2, &[3, 5, 7]).is_err());
        assert!(p.validate(4, &[3, 5]).is_err());
        let mut bad = p.clone();
        bad.pairs.swap(0, 1);
        assert!(bad.validate(4, &[3, 5, 7]).is_err());
    }

    #[test]
    fn gvf_examples() {
        let mut rng = Rng::new(4, 0);
        let v = rng.normal_tensor(&[8, 6], 1.0);
        assert!(gvf_fuse(&v, &[]).unwrap().bit_eq(&v));
        assert!(gvf_fuse(&v, &[Tensor::zeros(&[8, 6])]).unwrap().bit_eq(&v));
        let gl = rng.normal_tensor(&[8, 6], 1.0);
        let neg = Tensor::new(vec![8, 6], gl.data().iter().map(|x| -x).collect()).unwrap();
        let out = gvf_fuse(&v, &[gl, neg]).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-12);
        assert!(matches!(
            gvf_fuse(&v, &[Tensor::zeros(&[4, 6])]),
            Err(Error::Fusion(_))
        ));
    }

    #[test]
    fn zero_merger_projects_to_zero() {
        let grid = PatchGrid::new(4, 4, 2, 4);
        let m = merger(3, 8, 4, 16, 64, true);
        let mut rng = Rng::new(5, 0);
        let out = project_geometry(&rng.normal_tensor(&[16, 8], 2.0), &m, &grid, 1e-6).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
