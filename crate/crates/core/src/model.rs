//! Model configuration, the parameter store with freeze groups, and binding
//! of parameters onto a tape.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::analysis::depth_to_layer;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionPlan, InjectSite};
use crate::numerics::{Graph, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionEncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch: usize,
    pub merge: usize,
    /// Output width of the spatial merger, equal to the decoder width.
    pub lang_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryEncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub registers: usize,
    pub patch: usize,
    /// Fractional depths of the tapped layers, strictly increasing in (0, 1].
    pub tap_fractions: Vec<f64>,
}

impl GeometryEncoderConfig {
    /// Zero-based tap layers: `round(frac · depth) − 1`.
    pub fn tap_indices(&self) -> Result<Vec<usize>> {
        if self.tap_fractions.is_empty() {
            return Err(Error::Config("no geometry tap fractions".into()));
        }
        if self.tap_fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "tap fractions must be strictly increasing".into(),
            ));
        }
        let mut taps = Vec::with_capacity(self.tap_fractions.len());
        for &f in &self.tap_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("tap fraction {f} outside (0, 1]")));
            }
            let layer = depth_to_layer(f, self.depth).map_err(|e| Error::Config(e.to_string()))?;
            taps.push(layer - 1);
        }
        if taps.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "tap fractions collide at depth {}: {taps:?}",
                self.depth
            )));
        }
        Ok(taps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub geometry: GeometryEncoderConfig,
    pub decoder: DecoderConfig,
    /// Hidden width `D_mlp` of every geometry merger.
    pub merger_hidden: usize,
    /// Largest patch grid side supported by the position tables.
    pub max_grid: usize,
    /// Largest number of views supported by the view embedding.
    pub max_views: usize,
    pub rms_eps: f64,
    pub init_std: f64,
    pub fusion: FusionPlan,
    pub inject_site: InjectSite,
}

impl ModelConfig {
    /// Desk-scale defaults: `L_vis=4, D_vis=32; L_geo=8, D_geo=48, R=2; p=4,
    /// s=2; L_dec=4, D_lang=64`, stack fusion of the 50/75/100 % taps onto
    /// decoder layers 0, 1, 2.
    pub fn toy(vocab_size: usize) -> Self {
        let geometry = GeometryEncoderConfig {
            depth: 8,
            dim: 48,
            heads: 4,
            mlp_dim: 192,
            registers: 2,
            patch: 4,
            tap_fractions: vec![0.5, 0.75, 1.0],
        };
        let taps = geometry.tap_indices().expect("toy taps are valid");
        Self {
            vision: VisionEncoderConfig {
                depth: 4,
                dim: 32,
                heads: 4,
                mlp_dim: 128,
                patch: 4,
                merge: 2,
                lang_dim: 64,
            },
            geometry,
            decoder: DecoderConfig {
                depth: 4,
                dim: 64,
                heads: 4,
                mlp_dim: 256,
                vocab_size,
                max_seq_len: 64,
            },
            merger_hidden: 2 * 4 * 48,
            max_grid: 8,
            max_views: 8,
            rms_eps: crate::numerics::DEFAULT_RMS_EPS,
            init_std: 0.02,
            fusion: FusionPlan::new(FusionMode::Stack, &taps, &[0, 1, 2]).expect("toy plan"),
            inject_site: InjectSite::PreBlock,
        }
    }

    pub fn patch(&self) -> usize {
        self.vision.patch
    }

    pub fn merge(&self) -> usize {
        self.vision.merge
    }

    pub fn validate(&self) -> Result<()> {
        let v = &self.vision;
        let g = &self.geometry;
        let d = &self.decoder;
        if v.patch != g.patch {
            return Err(Error::Config(
                "vision and geometry patch sizes differ".into(),
            ));
        }
        if v.lang_dim != d.dim {
            return Err(Error::Config(
                "vision merger output must equal decoder width".into(),
            ));
        }
        for (name, depth, dim, heads) in [
            ("vision", v.depth, v.dim, v.heads),
            ("geometry", g.depth, g.dim, g.heads),
            ("decoder", d.depth, d.dim, d.heads),
        ] {
            if depth == 0 || heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{name}: depth {depth}, dim {dim}, heads {heads} invalid"
                )));
            }
        }
        if v.merge == 0 || v.patch == 0 || self.max_grid == 0 || self.max_views == 0 {
            return Err(Error::Config(
                "patch, merge, max_grid, max_views must be positive".into(),
            ));
        }
        if !(self.rms_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config(
                "rms_eps and init_std must be positive".into(),
            ));
        }
        let taps = g.tap_indices()?;
        self.fusion.validate(d.depth, &taps)
    }
}

/// Freeze granularity for parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisionEncoder,
    VisionMerger,
    GeometryEncoder,
    GeometryMergers,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::VisionEncoder,
        ParamGroup::VisionMerger,
        ParamGroup::GeometryEncoder,
        ParamGroup::GeometryMergers,
        ParamGroup::Decoder,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Every learnable array, in a fixed insertion order that checkpoints rely on.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    entries: IndexMap<String, Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.entries.insert(name.into(), Param { value, group });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn group(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|p| p.group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// `Σ |a − b|` over the parameters of `group`.
    pub fn group_abs_diff(&self, other: &ModelParams, group: ParamGroup) -> f64 {
        self.entries
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(name, p)| {
                let q = &other.entries[name.as_str()].value;
                p.value
                    .data()
                    .iter()
                    .zip(q.data())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum()
    }

    /// Register every parameter on `g`. Parameters whose group satisfies
    /// `trainable` become gradient leaves; the rest are constants.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            let v = g.leaf_ref(&p.value, trainable(p.group));
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    /// Fresh randomly initialized parameters for `cfg`. Geometry-merger output
    /// layers start at zero so that fusion begins as an exact no-op.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed, 0x1417);
        let mut p = ModelParams::new();
        let std = cfg.init_std;
        let v = &cfg.vision;
        let g = &cfg.geometry;
        let d = &cfg.decoder;
        let s2 = v.merge * v.merge;
        let pix = v.patch * v.patch;
        let pe_std = 1.0 / (pix as f64).sqrt();

        use ParamGroup::*;
        p.insert(
            "vision.patch_embed.w",
            rng.normal_tensor(&[v.dim, pix], pe_std),
            VisionEncoder,
        );
        p.insert(
            "vision.patch_embed.b",
            Tensor::zeros(&[v.dim]),
            VisionEncoder,
        );
        p.insert(
            "vision.row_embed",
            rng.normal_tensor(&[cfg.max_grid, v.dim], std),
            VisionEncoder,
        );
        p.insert(
            "vision.col_embed",
            rng.normal_tensor(&[cfg.max_grid, v.dim], std),
            VisionEncoder,
        );
        for i in 0..v.depth {
            init_block(
                &mut p,
                &mut rng,
                &format!("vision.block{i}"),
                v.dim,
                v.mlp_dim,
                v.depth,
                std,
                VisionEncoder,
            );
        }

        let vin = s2 * v.dim;
        p.insert(
            "vision_merger.norm",
            Tensor::filled(&[v.dim], 1.0),
            VisionMerger,
        );
        p.insert(
            "vision_merger.w1",
            rng.normal_tensor(&[vin, vin], 1.0 / (vin as f64).sqrt()),
            VisionMerger,
        );
        p.insert("vision_merger.b1", Tensor::zeros(&[vin]), VisionMerger);
        p.insert(
            "vision_merger.w2",
            rng.normal_tensor(&[v.lang_dim, vin], 1.0 / (vin as f64).sqrt()),
            VisionMerger,
        );
        p.insert(
            "vision_merger.b2",
            Tensor::zeros(&[v.lang_dim]),
            VisionMerger,
        );

        p.insert(
            "geometry.patch_embed.w",
            rng.normal_tensor(&[g.dim, pix], pe_std),
            GeometryEncoder,
        );
        p.insert(
            "geometry.patch_embed.b",
            Tensor::zeros(&[g.dim]),
            GeometryEncoder,
        );
        p.insert(
            "geometry.row_embed",
            rng.normal_tensor(&[cfg.max_grid, g.dim], std),
            GeometryEncoder,
        );
        p.insert(
            "geometry.col_embed",
            rng.normal_tensor(&[cfg.max_grid, g.dim], std),
            GeometryEncoder,
        );
        p.insert(
            "geometry.camera",
            rng.normal_tensor(&[1, g.dim], std),
            GeometryEncoder,
        );
        if g.registers > 0 {
            p.insert(
                "geometry.registers",
                rng.normal_tensor(&[g.registers, g.dim], std),
                GeometryEncoder,
            );
        }
        p.insert(
            "geometry.view_embed",
            rng.normal_tensor(&[cfg.max_views, g.dim], std),
            GeometryEncoder,
        );
        for i in 0..g.depth {
            init_block(
                &mut p,
                &mut rng,
                &format!("geometry.block{i}"),
                g.dim,
                g.mlp_dim,
                g.depth,
                std,
                GeometryEncoder,
            );
        }

        let gin = s2 * g.dim;
        for tap in g.tap_indices()? {
            let pre = merger_prefix(tap);
            p.insert(
                format!("{pre}.norm"),
                Tensor::filled(&[g.dim], 1.0),
                GeometryMergers,
            );
            p.insert(
                format!("{pre}.w1"),
                rng.normal_tensor(&[cfg.merger_hidden, gin], 1.0 / (gin as f64).sqrt()),
                GeometryMergers,
            );
            p.insert(
                format!("{pre}.b1"),
                Tensor::zeros(&[cfg.merger_hidden]),
                GeometryMergers,
            );
            p.insert(
                format!("{pre}.w2"),
                Tensor::zeros(&[d.dim, cfg.merger_hidden]),
                GeometryMergers,
            );
            p.insert(
                format!("{pre}.b2"),
                Tensor::zeros(&[d.dim]),
                GeometryMergers,
            );
        }

        p.insert(
            "decoder.tok_embed",
            rng.normal_tensor(&[d.vocab_size, d.dim], std),
            Decoder,
        );
        p.insert(
            "decoder.pos_embed",
            rng.normal_tensor(&[d.max_seq_len, d.dim], std),
            Decoder,
        );
        for i in 0..d.depth {
            init_block(
                &mut p,
                &mut rng,
                &format!("decoder.block{i}"),
                d.dim,
                d.mlp_dim,
                d.depth,
                std,
                Decoder,
            );
        }
        p.insert("decoder.final_norm", Tensor::filled(&[d.dim], 1.0), Decoder);
        p.insert(
            "decoder.head",
            rng.normal_tensor(&[d.vocab_size, d.dim], std),
            Decoder,
        );
        Ok(p)
    }
}

pub fn merger_prefix(tap: usize) -> String {
    format!("geo_merger.{tap}")
}

#[allow(clippy::too_many_arguments)]
fn init_block(
    p: &mut ModelParams,
    rng: &mut Rng,
    prefix: &str,
    dim: usize,
    mlp_dim: usize,
    depth: usize,
    std: f64,
    group: ParamGroup,
) {
    let resid_std = std / (2.0 * depth as f64).sqrt();
    p.insert(
        format!("{prefix}.attn_norm"),
        Tensor::filled(&[dim], 1.0),
        group,
    );
    for w in ["wq", "wk", "wv"] {
        p.insert(
            format!("{prefix}.{w}"),
            rng.normal_tensor(&[dim, dim], std),
            group,
        );
    }
    p.insert(
        format!("{prefix}.wo"),
        rng.normal_tensor(&[dim, dim], resid_std),
        group,
    );
    p.insert(
        format!("{prefix}.mlp_norm"),
        Tensor::filled(&[dim], 1.0),
        group,
    );
    p.insert(
        format!("{prefix}.w1"),
        rng.normal_tensor(&[mlp_dim, dim], std),
        group,
    );
    p.insert(format!("{prefix}.b1"), Tensor::zeros(&[mlp_dim]), group);
    p.insert(
        format!("{prefix}.w2"),
        rng.normal_tensor(&[dim, mlp_dim], resid_std),
        group,
    );
    p.insert(format!("{prefix}.b2"), Tensor::zeros(&[dim]), group);
}

/// Parameter name → tape var for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} not bound")))
    }

    /// Replace one binding, e.g. to route a parameter through a probe var.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// How a transformer block attends.
#[derive(Clone, Copy, Debug)]
pub enum Attend {
    /// Every token sees every token (encoders).
    Bidirectional,
    /// Row `i` sees keys `≤ i + offset`; `past` holds cached keys/values that
    /// precede the current rows.
    Causal { past: Option<(Var, Var)> },
}

/// Output of one block: hidden state plus the keys/values it attended with.
pub struct BlockOut {
    pub hidden: Var,
    pub keys: Var,
    pub values: Var,
}

/// Pre-norm block: `x + Attn(norm(x))`, then `h + MLP(norm(h))` with a GELU MLP.
pub fn transformer_block(
    g: &mut Graph<'_>,
    b: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    eps: f64,
    attend: Attend,
) -> Result<BlockOut> {
    let p = |n: &str| b.var(&format!("{prefix}.{n}"));
    let h = g.rms_norm(x, p("attn_norm")?, eps)?;
    let q = g.linear(h, p("wq")?, None)?;
    let k = g.linear(h, p("wk")?, None)?;
    let v = g.linear(h, p("wv")?, None)?;
    let (keys, values, offset) = match attend {
        Attend::Bidirectional => (k, v, None),
        Attend::Causal { past: None } => (k, v, Some(0)),
        Attend::Causal {
            past: Some((pk, pv)),
        } => {
            let past_len = g.value(pk).rows();
            (
                g.concat_rows(&[pk, k])?,
                g.concat_rows(&[pv, v])?,
                Some(past_len),
            )
        }
    };
    let a = g.attention(q, keys, values, heads, offset)?;
    let a = g.linear(a, p("wo")?, None)?;
    let x = g.add(x, a)?;
    let h = g.rms_norm(x, p("mlp_norm")?, eps)?;
    let h = g.linear(h, p("w1")?, Some(p("b1")?))?;
    let h = g.gelu(h);
    let h = g.linear(h, p("w2")?, Some(p("b2")?))?;
    let hidden = g.add(x, h)?;
    Ok(BlockOut {
        hidden,
        keys,
        values,
    })
}
