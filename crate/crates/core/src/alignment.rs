//! Index arithmetic that makes geometry tokens line up with merged vision
//! tokens: window reordering, special-token stripping, resolution planning
//! and frame sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Patch-token grid of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    /// Rows of patch tokens (`H / p`).
    pub h_patch: usize,
    /// Columns of patch tokens (`W / p`).
    pub w_patch: usize,
    /// Spatial merge size `s`.
    pub merge: usize,
    /// Patch edge in pixels `p`.
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(h_patch: usize, w_patch: usize, merge: usize, patch: usize) -> Self {
        Self {
            h_patch,
            w_patch,
            merge,
            patch,
        }
    }

    /// Grid for an `h × w` pixel frame.
    pub fn for_frame(h: usize, w: usize, patch: usize, merge: usize) -> Result<Self> {
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Alignment(format!(
                "frame {h}×{w} is not a multiple of patch {patch}"
            )));
        }
        let grid = Self::new(h / patch, w / patch, merge, patch);
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.merge == 0 || self.h_patch == 0 || self.w_patch == 0 {
            return Err(Error::Alignment(format!("degenerate grid {self:?}")));
        }
        if self.h_patch % self.merge != 0 || self.w_patch % self.merge != 0 {
            return Err(Error::Alignment(format!(
                "grid {}×{} not divisible by merge size {}",
                self.h_patch, self.w_patch, self.merge
            )));
        }
        Ok(())
    }

    /// Patch tokens per frame, `N`.
    pub fn tokens(&self) -> usize {
        self.h_patch * self.w_patch
    }

    /// Merged tokens per frame, `N / s²`.
    pub fn merged_tokens(&self) -> usize {
        self.tokens() / (self.merge * self.merge)
    }

    pub fn merged_shape(&self) -> (usize, usize) {
        (self.h_patch / self.merge, self.w_patch / self.merge)
    }

    pub fn window_size(&self) -> usize {
        self.merge * self.merge
    }
}

/// Source index for every output slot of the window reordering:
/// `reordered[i] = row_major[order[i]]`.
///
/// Windows are enumerated row-major over the merged grid, and tokens
/// row-major inside each window, so consecutive groups of `s²` outputs cover
/// exactly one merge window.
pub fn window_order(grid: &PatchGrid) -> Result<Vec<usize>> {
    grid.validate()?;
    let s = grid.merge;
    let (wh, ww) = grid.merged_shape();
    let mut order = Vec::with_capacity(grid.tokens());
    for bh in 0..wh {
        for bw in 0..ww {
            for ih in 0..s {
                for iw in 0..s {
                    order.push((bh * s + ih) * grid.w_patch + bw * s + iw);
                }
            }
        }
    }
    Ok(order)
}

/// Reorder one frame's row-major tokens into window-grouped order.
pub fn window_reorder<T: Clone>(tokens: &[T], grid: &PatchGrid) -> Result<Vec<T>> {
    let order = window_order(grid)?;
    if tokens.len() != order.len() {
        return Err(Error::Alignment(format!(
            "{} tokens for a {}×{} grid",
            tokens.len(),
            grid.h_patch,
            grid.w_patch
        )));
    }
    Ok(order.into_iter().map(|i| tokens[i].clone()).collect())
}

/// Row indices that keep the trailing `N` patch tokens of each view of a
/// `views × (1 + R + N)` token block, dropping camera and register tokens.
pub fn patch_token_rows(views: usize, registers: usize, patches: usize) -> Vec<usize> {
    let per_view = 1 + registers + patches;
    (0..views)
        .flat_map(|k| (0..patches).map(move |i| k * per_view + 1 + registers + i))
        .collect()
}

/// Drop the camera token and `R` register tokens of every view.
pub fn strip_special_tokens(
    layer_output: &Tensor,
    views: usize,
    registers: usize,
) -> Result<Tensor> {
    let rows = layer_output.rows();
    if views == 0 || rows % views != 0 || rows / views <= 1 + registers {
        return Err(Error::Alignment(format!(
            "{rows} rows cannot hold {views} views of 1 + {registers} special tokens plus patches"
        )));
    }
    let patches = rows / views - 1 - registers;
    let keep = patch_token_rows(views, registers, patches);
    let cols = layer_output.cols();
    let mut data = Vec::with_capacity(keep.len() * cols);
    for r in keep {
        data.extend_from_slice(layer_output.row(r));
    }
    Tensor::matrix(views * patches, cols, data)
}

/// Gather rows taking a `views × (1 + R + N)` geometry layer output to the
/// stripped, per-view window-reordered `views × N` patch layout.
pub fn geometry_patch_rows(views: usize, registers: usize, grid: &PatchGrid) -> Result<Vec<usize>> {
    let order = window_order(grid)?;
    let per_view = 1 + registers + grid.tokens();
    Ok((0..views)
        .flat_map(|k| order.iter().map(move |&i| k * per_view + 1 + registers + i))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResizeSide {
    #[default]
    Short,
    Long,
}

/// Outcome of resolution planning: the proportional resize followed by the
/// centered trim to a multiple of `p·s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResolutionPlan {
    pub scaled: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub crop_top: usize,
    pub crop_left: usize,
}

impl ResolutionPlan {
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Leading/trailing amounts removed when trimming `from` down to `to`.
pub fn center_trim(from: usize, to: usize) -> (usize, usize) {
    let excess = from - to;
    (excess / 2, excess - excess / 2)
}

/// Scale the chosen side to `target` keeping aspect (nearest-integer
/// rounding of the other side), then trim each side to the largest multiple
/// of `p·s` not exceeding it.
pub fn plan_resolution(
    h_in: usize,
    w_in: usize,
    target: usize,
    patch: usize,
    merge: usize,
    side: ResizeSide,
) -> Result<ResolutionPlan> {
    let unit = patch * merge;
    if unit == 0 {
        return Err(Error::Resolution("patch and merge must be positive".into()));
    }
    if h_in < unit || w_in < unit || target < unit {
        return Err(Error::Resolution(format!(
            "input {h_in}×{w_in} or target {target} below the {unit}-pixel unit"
        )));
    }
    let anchor = match side {
        ResizeSide::Short => h_in.min(w_in),
        ResizeSide::Long => h_in.max(w_in),
    };
    let factor = target as f64 / anchor as f64;
    let scale = |v: usize| -> usize {
        if v == anchor {
            target
        } else {
            (v as f64 * factor).round() as usize
        }
    };
    let scaled = (scale(h_in), scale(w_in));
    let height = scaled.0 / unit * unit;
    let width = scaled.1 / unit * unit;
    if height < unit || width < unit {
        return Err(Error::Resolution(format!(
            "planned size {height}×{width} smaller than the {unit}-pixel unit"
        )));
    }
    Ok(ResolutionPlan {
        scaled,
        height,
        width,
        crop_top: center_trim(scaled.0, height).0,
        crop_left: center_trim(scaled.1, width).0,
    })
}

/// Which source frames of a clip are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub count: usize,
    pub indices: Vec<usize>,
    pub interval: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

/// `K = clip(round(T/Δ), K_min, K_max)` (half away from zero), then uniform
/// indices `floor(i·(F−1)/(K−1))`, endpoints included.
pub fn plan_frames(
    duration: f64,
    interval: f64,
    min_frames: usize,
    max_frames: usize,
    source_frames: usize,
) -> Result<FramePlan> {
    if !(interval > 0.0) || !duration.is_finite() || duration < 0.0 {
        return Err(Error::Sampling(format!(
            "duration {duration} / interval {interval} invalid"
        )));
    }
    if min_frames == 0 || min_frames > max_frames {
        return Err(Error::Sampling(format!(
            "frame bounds [{min_frames}, {max_frames}] invalid"
        )));
    }
    if source_frames < min_frames {
        return Err(Error::Sampling(format!(
            "{source_frames} source frames cannot supply {min_frames}"
        )));
    }
    let raw = (duration / interval).round() as usize;
    let count = raw.clamp(min_frames, max_frames).min(source_frames);
    let indices = if count == 1 {
        vec![0]
    } else {
        (0..count)
            .map(|i| i * (source_frames - 1) / (count - 1))
            .collect()
    };
    Ok(FramePlan {
        count,
        indices,
        interval,
        min_frames,
        max_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent enumeration over (window row, window col, row in window,
    /// col in window) straight from the merge definition.
    fn brute_force_order(h: usize, w: usize, s: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for wh in 0..h / s {
            for ww in 0..w / s {
                for sh in 0..s {
                    for sw in 0..s {
                        let r = wh * s + sh;
                        let c = ww * s + sw;
                        out.push(r * w + c);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn reorder_examples() {
        let g = PatchGrid::new(2, 2, 2, 4);
        assert_eq!(window_reorder(&[0, 1, 2, 3], &g).unwrap(), vec![0, 1, 2, 3]);

        let g = PatchGrid::new(4, 4, 2, 4);
        let idx: Vec<usize> = (0..16).collect();
        assert_eq!(
            window_reorder(&idx, &g).unwrap(),
            vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
        );
        assert_eq!(brute_force_order(4, 4, 2), window_order(&g).unwrap());

        let g = PatchGrid::new(3, 5, 1, 4);
        let idx: Vec<usize> = (0..15).collect();
        assert_eq!(window_reorder(&idx, &g).unwrap(), idx);
    }

    #[test]
    fn reorder_errors() {
        let g = PatchGrid::new(3, 4, 2, 4);
        assert!(matches!(window_order(&g), Err(Error::Alignment(_))));
        let g = PatchGrid::new(4, 4, 2, 4);
        assert!(matches!(
            window_reorder(&[0; 15], &g),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn groups_cover_merge_windows() {
        for h in [2, 4, 6, 8] {
            for w in [2, 4, 6, 8] {
                for s in [1, 2] {
                    let g = PatchGrid::new(h, w, s, 4);
                    let order = window_order(&g).unwrap();
                    let mut sorted = order.clone();
                    sorted.sort_unstable();
                    assert_eq!(sorted, (0..h * w).collect::<Vec<_>>());
                    let ww = w / s;
                    for (k, group) in order.chunks(s * s).enumerate() {
                        let (bh, bw) = (k / ww, k % ww);
                        let mut expect: Vec<usize> = (0..h * w)
                            .filter(|&i| (i / w) / s == bh && (i % w) / s == bw)
                            .collect();
                        let mut got = group.to_vec();
                        got.sort_unstable();
                        expect.sort_unstable();
                        assert_eq!(got, expect);
                    }
                }
            }
        }
    }

    #[test]
    fn strip_examples() {
        let rows: Vec<Vec<f64>> = (0..19).map(|i| vec![i as f64]).collect();
        let t = Tensor::from_rows(&rows).unwrap();
        let out = strip_special_tokens(&t, 1, 2).unwrap();
        assert_eq!(out.data(), (3..19).map(|i| i as f64).collect::<Vec<_>>());

        let t = Tensor::from_rows(&(0..5).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
        let out = strip_special_tokens(&t, 1, 0).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);

        // two views: oracle is per-view stripping concatenated in order
        let rows: Vec<Vec<f64>> = (0..38).map(|i| vec![i as f64, -(i as f64)]).collect();
        let t = Tensor::from_rows(&rows).unwrap();
        let out = strip_special_tokens(&t, 2, 2).unwrap();
        let v0 = strip_special_tokens(&t.slice_rows(0, 19).unwrap(), 1, 2).unwrap();
        let v1 = strip_special_tokens(&t.slice_rows(19, 19).unwrap(), 1, 2).unwrap();
        assert_eq!(out, Tensor::concat_rows(&[&v0, &v1]).unwrap());
        assert_eq!(out.rows(), 32);

        assert!(matches!(
            strip_special_tokens(&t, 3, 2),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn geometry_rows_compose_strip_and_reorder() {
        let g = PatchGrid::new(4, 4, 2, 4);
        let rows = geometry_patch_rows(2, 2, &g).unwrap();
        let order = window_order(&g).unwrap();
        for k in 0..2 {
            for i in 0..16 {
                assert_eq!(rows[k * 16 + i], k * 19 + 3 + order[i]);
            }
        }
    }

    #[test]
    fn resolution_examples() {
        // unit p·s = 28; 518 = 18·28 + 14
        let p = plan_resolution(1000, 1000, 518, 14, 2, ResizeSide::Short).unwrap();
        assert_eq!(p.size(), (504, 504));
        assert_eq!((p.crop_top, p.crop_left), (7, 7));
        let p = plan_resolution(518, 1036, 518, 14, 2, ResizeSide::Short).unwrap();
        assert_eq!(p.size(), (504, 1036));
        let p = plan_resolution(504, 504, 504, 14, 2, ResizeSide::Short).unwrap();
        assert_eq!(p.size(), (504, 504));
        let p = plan_resolution(500, 1000, 518, 14, 2, ResizeSide::Long).unwrap();
        assert_eq!(p.scaled, (259, 518));
        assert_eq!(p.size(), (252, 504));
    }

    #[test]
    fn resolution_errors() {
        assert!(plan_resolution(20, 100, 518, 14, 2, ResizeSide::Short).is_err());
        assert!(plan_resolution(1000, 1000, 20, 14, 2, ResizeSide::Short).is_err());
        // long side to 28 squeezes the short side under one unit
        assert!(matches!(
            plan_resolution(100, 1000, 28, 14, 2, ResizeSide::Long),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn center_trim_splits_excess() {
        assert_eq!(center_trim(518, 504), (7, 7));
        assert_eq!(center_trim(21, 16), (2, 3));
    }

    #[test]
    fn frame_examples() {
        let p = plan_frames(12.0, 2.0, 4, 8, 60).unwrap();
        assert_eq!(p.count, 6);
        let oracle: Vec<usize> = (0..6).map(|i| (i * 59) / 5).collect();
        assert_eq!(p.indices, oracle);
        assert_eq!(p.indices, vec![0, 11, 23, 35, 47, 59]);
        assert_eq!(plan_frames(100.0, 2.0, 4, 8, 600).unwrap().count, 8);
        assert_eq!(plan_frames(1.0, 2.0, 4, 8, 600).unwrap().count, 4);
        // 5 / 2 = 2.5 rounds away from zero
        assert_eq!(plan_frames(5.0, 2.0, 1, 8, 10).unwrap().count, 3);
        assert_eq!(plan_frames(0.5, 2.0, 1, 8, 10).unwrap().indices, vec![0]);
    }

    #[test]
    fn frame_errors() {
        assert!(matches!(
            plan_frames(10.0, 2.0, 4, 8, 3),
            Err(Error::Sampling(_))
        ));
        assert!(plan_frames(10.0, 0.0, 4, 8, 30).is_err());
        assert!(plan_frames(10.0, 2.0, 5, 4, 30).is_err());
    }

    proptest! {
        #[test]
        fn frame_indices_increase(t in 0.0f64..200.0, dt in 0.1f64..10.0, kmin in 1usize..5, extra in 0usize..6, f in 1usize..300) {
            let kmax = kmin + extra;
            prop_assume!(f >= kmin);
            let p = plan_frames(t, dt, kmin, kmax, f).unwrap();
            prop_assert!(p.count >= kmin && p.count <= kmax);
            prop_assert_eq!(p.indices.len(), p.count);
            prop_assert!(p.indices.iter().all(|&i| i < f));
            prop_assert!(p.indices.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn resolution_is_aligned(h in 28usize..2000, w in 28usize..2000, target in 28usize..1000, long in any::<bool>()) {
            let side = if long { ResizeSide::Long } else { ResizeSide::Short };
            if let Ok(p) = plan_resolution(h, w, target, 14, 2, side) {
                prop_assert_eq!(p.height % 28, 0);
                prop_assert_eq!(p.width % 28, 0);
                prop_assert!(p.height <= p.scaled.0 && p.width <= p.scaled.1);
                // a second pass over an aligned size that already matches the target is a fixpoint
                let again = plan_resolution(p.height, p.width, p.height.min(p.width), 14, 2, ResizeSide::Short).unwrap();
                prop_assert_eq!(again.size(), p.size());
            }
        }
    }
}
