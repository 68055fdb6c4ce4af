//! Toy vision encoder with spatial merger, and toy multi-view geometry
//! encoder with camera/register/patch tokens and tappable layers.

use std::collections::BTreeMap;

use crate::alignment::{window_order, PatchGrid};
use crate::error::{Error, Result};
use crate::model::{transformer_block, Attend, Bound, ModelConfig, ModelParams};
use crate::numerics::{Graph, Tensor, Var};

/// Cut a single-channel `H × W` frame into row-major `p × p` patches, each
/// flattened row-major: an `N × p²` matrix.
pub fn patchify(frame: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = frame.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("frame must be H×W, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Alignment(format!(
            "frame {h}×{w} not divisible by patch {patch}"
        )));
    }
    let (hp, wp) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for pr in 0..hp {
        for pc in 0..wp {
            for y in 0..patch {
                let row = frame.row(pr * patch + y);
                data.extend_from_slice(&row[pc * patch..(pc + 1) * patch]);
            }
        }
    }
    Tensor::matrix(hp * wp, patch * patch, data)
}

/// Shared frame size of a frame set, checked against `p·s` alignment.
pub fn frame_grid(frames: &[Tensor], patch: usize, merge: usize) -> Result<PatchGrid> {
    let Some(first) = frames.first() else {
        return Err(Error::Shape("no frames".into()));
    };
    let shape = first.shape().to_vec();
    if frames.iter().any(|f| f.shape() != shape.as_slice()) {
        return Err(Error::Shape("frames differ in size".into()));
    }
    if shape.len() != 2 {
        return Err(Error::Shape(format!("frame must be H×W, got {shape:?}")));
    }
    let unit = patch * merge;
    if unit == 0 || shape[0] % unit != 0 || shape[1] % unit != 0 {
        return Err(Error::Alignment(format!(
            "frame {}×{} is not a multiple of p·s = {unit}",
            shape[0], shape[1]
        )));
    }
    PatchGrid::for_frame(shape[0], shape[1], patch, merge)
}

/// Patch embedding plus learned 2-D position for every frame, stacked: `K·N × D`.
fn embed_patches(
    g: &mut Graph<'_>,
    b: &Bound,
    prefix: &str,
    frames: &[Tensor],
    grid: &PatchGrid,
    max_grid: usize,
) -> Result<Var> {
    if grid.h_patch > max_grid || grid.w_patch > max_grid {
        return Err(Error::Config(format!(
            "patch grid {}×{} exceeds max_grid {max_grid}",
            grid.h_patch, grid.w_patch
        )));
    }
    let patches: Vec<Tensor> = frames
        .iter()
        .map(|f| patchify(f, grid.patch))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = patches.iter().collect();
    let pix = g.constant(Tensor::concat_rows(&refs)?);
    let x = g.linear(
        pix,
        b.var(&format!("{prefix}.patch_embed.w"))?,
        Some(b.var(&format!("{prefix}.patch_embed.b"))?),
    )?;
    let n = grid.tokens() * frames.len();
    let rows: Vec<usize> = (0..n).map(|i| (i % grid.tokens()) / grid.w_patch).collect();
    let cols: Vec<usize> = (0..n).map(|i| (i % grid.tokens()) % grid.w_patch).collect();
    let re = g.gather_rows(b.var(&format!("{prefix}.row_embed"))?, &rows)?;
    let ce = g.gather_rows(b.var(&format!("{prefix}.col_embed"))?, &cols)?;
    let pos = g.add(re, ce)?;
    g.add(x, pos)
}

/// Encode each frame independently; returns `K·N × D_vis` (frame-major,
/// row-major patches) or `None` when there are no frames.
pub fn vision_encode_graph(
    g: &mut Graph<'_>,
    b: &Bound,
    cfg: &ModelConfig,
    frames: &[Tensor],
) -> Result<Option<(Var, PatchGrid)>> {
    if frames.is_empty() {
        return Ok(None);
    }
    let v = &cfg.vision;
    let grid = frame_grid(frames, v.patch, v.merge)?;
    let x = embed_patches(g, b, "vision", frames, &grid, cfg.max_grid)?;
    let n = grid.tokens();
    let mut outs = Vec::with_capacity(frames.len());
    for k in 0..frames.len() {
        let mut h = g.row_slice(x, k * n, n)?;
        for i in 0..v.depth {
            h = transformer_block(
                g,
                b,
                &format!("vision.block{i}"),
                h,
                v.heads,
                cfg.rms_eps,
                Attend::Bidirectional,
            )?
            .hidden;
        }
        outs.push(h);
    }
    let all = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_rows(&outs)?
    };
    Ok(Some((all, grid)))
}

/// Per-frame `N × D_vis` patch tokens.
pub fn vision_encode(
    frames: &[Tensor],
    cfg: &ModelConfig,
    params: &ModelParams,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let Some((x, grid)) = vision_encode_graph(&mut g, &b, cfg, frames)? else {
        return Ok(Vec::new());
    };
    let n = grid.tokens();
    (0..frames.len())
        .map(|k| g.value(x).slice_rows(k * n, n))
        .collect()
}

/// Shared window-merge MLP: norm → reorder → concat `s²` neighbours → two
/// linear layers with GELU between.
pub(crate) fn window_merge(
    g: &mut Graph<'_>,
    b: &Bound,
    prefix: &str,
    tokens: Var,
    grid: &PatchGrid,
    views: usize,
    already_reordered: bool,
    eps: f64,
) -> Result<Var> {
    grid.validate()?;
    let d = g.value(tokens).cols();
    let n = grid.tokens();
    let rows = g.value(tokens).rows();
    if rows != views * n {
        return Err(Error::Alignment(format!(
            "{rows} tokens for {views} views of a {}×{} grid",
            grid.h_patch, grid.w_patch
        )));
    }
    let ordered = if already_reordered || grid.merge == 1 {
        tokens
    } else {
        let order = window_order(grid)?;
        let idx: Vec<usize> = (0..views)
            .flat_map(|k| order.iter().map(move |&i| k * n + i))
            .collect();
        g.gather_rows(tokens, &idx)?
    };
    let normed = g.rms_norm(ordered, b.var(&format!("{prefix}.norm"))?, eps)?;
    let s2 = grid.window_size();
    let windows = g.reshape(normed, vec![rows / s2, s2 * d])?;
    let h = g.linear(
        windows,
        b.var(&format!("{prefix}.w1"))?,
        Some(b.var(&format!("{prefix}.b1"))?),
    )?;
    let h = g.gelu(h);
    g.linear(
        h,
        b.var(&format!("{prefix}.w2"))?,
        Some(b.var(&format!("{prefix}.b2"))?),
    )
}

/// Merge each `s × s` window of row-major vision tokens into one token of
/// width `D_lang`; output in window order, frame-major.
pub fn spatial_merge_graph(
    g: &mut Graph<'_>,
    b: &Bound,
    cfg: &ModelConfig,
    tokens: Var,
    grid: &PatchGrid,
    views: usize,
) -> Result<Var> {
    window_merge(
        g,
        b,
        "vision_merger",
        tokens,
        grid,
        views,
        false,
        cfg.rms_eps,
    )
}

/// Eager single-frame spatial merge: `N × D_vis → N/s² × D_lang`.
pub fn spatial_merge(
    tokens: &Tensor,
    grid: &PatchGrid,
    cfg: &ModelConfig,
    params: &ModelParams,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let t = g.constant(tokens.clone());
    let out = spatial_merge_graph(&mut g, &b, cfg, t, grid, 1)?;
    Ok(g.value(out).clone())
}

/// Hidden states of the geometry encoder after each requested layer
/// (zero-based), each `K·(1+R+N) × D_geo` with views concatenated.
pub fn geometry_encode_graph(
    g: &mut Graph<'_>,
    b: &Bound,
    cfg: &ModelConfig,
    frames: &[Tensor],
    taps: &[usize],
) -> Result<(BTreeMap<usize, Var>, PatchGrid)> {
    let gc = &cfg.geometry;
    if let Some(&bad) = taps.iter().find(|&&t| t >= gc.depth) {
        return Err(Error::Config(format!(
            "tap {bad} ≥ geometry depth {}",
            gc.depth
        )));
    }
    let views = frames.len();
    if views > cfg.max_views {
        return Err(Error::Config(format!(
            "{views} views exceed max_views {}",
            cfg.max_views
        )));
    }
    let grid = frame_grid(frames, gc.patch, cfg.merge())?;
    let patches = embed_patches(g, b, "geometry", frames, &grid, cfg.max_grid)?;
    let n = grid.tokens();
    let per_view = 1 + gc.registers + n;
    let camera = b.var("geometry.camera")?;
    let mut parts = Vec::with_capacity(3 * views);
    for k in 0..views {
        parts.push(camera);
        if gc.registers > 0 {
            parts.push(b.var("geometry.registers")?);
        }
        parts.push(g.row_slice(patches, k * n, n)?);
    }
    let tokens = g.concat_rows(&parts)?;
    let view_ids: Vec<usize> = (0..views * per_view).map(|i| i / per_view).collect();
    let view_embed = g.gather_rows(b.var("geometry.view_embed")?, &view_ids)?;
    let mut h = g.add(tokens, view_embed)?;

    let last = taps.iter().copied().max();
    let mut out = BTreeMap::new();
    if let Some(last) = last {
        for i in 0..=last {
            h = transformer_block(
                g,
                b,
                &format!("geometry.block{i}"),
                h,
                gc.heads,
                cfg.rms_eps,
                Attend::Bidirectional,
            )?
            .hidden;
            if taps.contains(&i) {
                out.insert(i, h);
            }
        }
    }
    Ok((out, grid))
}

/// Per-tap, per-view token sets of the geometry encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryTokenSet {
    pub views: usize,
    pub registers: usize,
    pub patches: usize,
    /// Tap layer (zero-based) → `views·(1+R+N) × D_geo` hidden state.
    pub taps: BTreeMap<usize, Tensor>,
}

impl GeometryTokenSet {
    fn view_rows(&self, tap: usize, view: usize, start: usize, len: usize) -> Result<Tensor> {
        let t = self
            .taps
            .get(&tap)
            .ok_or_else(|| Error::Argument(format!("tap {tap} not recorded")))?;
        if view >= self.views {
            return Err(Error::Argument(format!("view {view} of {}", self.views)));
        }
        t.slice_rows(view * (1 + self.registers + self.patches) + start, len)
    }

    pub fn camera(&self, tap: usize, view: usize) -> Result<Tensor> {
        self.view_rows(tap, view, 0, 1)
    }

    pub fn register_tokens(&self, tap: usize, view: usize) -> Result<Option<Tensor>> {
        if self.registers == 0 {
            return Ok(None);
        }
        self.view_rows(tap, view, 1, self.registers).map(Some)
    }

    pub fn patch_tokens(&self, tap: usize, view: usize) -> Result<Tensor> {
        self.view_rows(tap, view, 1 + self.registers, self.patches)
    }

    pub fn tokens_per_view(&self) -> usize {
        1 + self.registers + self.patches
    }
}

/// Eager geometry encoding at the configured taps.
pub fn geometry_encode(
    frames: &[Tensor],
    cfg: &ModelConfig,
    params: &ModelParams,
) -> Result<GeometryTokenSet> {
    geometry_encode_at(frames, cfg, params, &cfg.geometry.tap_indices()?)
}

/// Eager geometry encoding at arbitrary zero-based layers.
pub fn geometry_encode_at(
    frames: &[Tensor],
    cfg: &ModelConfig,
    params: &ModelParams,
    taps: &[usize],
) -> Result<GeometryTokenSet> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let (vars, grid) = geometry_encode_graph(&mut g, &b, cfg, frames, taps)?;
    Ok(GeometryTokenSet {
        views: frames.len(),
        registers: cfg.geometry.registers,
        patches: grid.tokens(),
        taps: vars
            .into_iter()
            .map(|(t, v)| (t, g.value(v).clone()))
            .collect(),
    })
}
