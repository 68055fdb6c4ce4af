//! Fractional-depth layer selection, ROI patch-similarity maps, PGM heatmaps,
//! and the mean-relative-accuracy metric for numeric answers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 1-based layer at fractional depth `frac` of an `l`-layer stack:
/// `round(frac · l)` clamped to `[1, l]`.
pub fn depth_to_layer(frac: f64, l: usize) -> Result<usize> {
    if l == 0 {
        return Err(Error::Argument("encoder depth must be ≥ 1".into()));
    }
    if !(frac > 0.0) || !frac.is_finite() {
        return Err(Error::Argument(format!(
            "depth fraction {frac} must be > 0"
        )));
    }
    let idx = (frac * l as f64).round();
    Ok((idx as usize).clamp(1, l))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderTag {
    Geometry,
    Vision,
}

impl EncoderTag {
    pub fn short(self) -> &'static str {
        match self {
            EncoderTag::Geometry => "geo",
            EncoderTag::Vision => "vis",
        }
    }
}

impl std::str::FromStr for EncoderTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geo" | "geometry" => Ok(EncoderTag::Geometry),
            "vis" | "vision" => Ok(EncoderTag::Vision),
            _ => Err(Error::Argument(format!(
                "encoder must be geo or vis, got {s:?}"
            ))),
        }
    }
}

/// Inclusive rectangle of patch coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl Roi {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        Self { r0, c0, r1, c1 }
    }

    pub fn patch(r: usize, c: usize) -> Self {
        Self::new(r, c, r, c)
    }
}

impl std::str::FromStr for Roi {
    type Err = Error;

    /// `r0,c0,r1,c1`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Argument(format!("roi {s:?}: {e}")))?;
        match parts[..] {
            [r0, c0, r1, c1] => Ok(Self::new(r0, c0, r1, c1)),
            _ => Err(Error::Argument(format!(
                "roi {s:?} needs four comma-separated integers"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub h_patch: usize,
    pub w_patch: usize,
    /// Row-major cosine similarities.
    pub values: Vec<f64>,
    pub encoder: EncoderTag,
    pub depth_fraction: f64,
    pub roi: Roi,
}

impl SimilarityMap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.w_patch + c]
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity between the mean ROI feature and every patch of an
/// `h × w` grid of row-major features (`h·w × D`).
pub fn roi_similarity_map(
    features: &Tensor,
    h_patch: usize,
    w_patch: usize,
    roi: Roi,
    encoder: EncoderTag,
    depth_fraction: f64,
) -> Result<SimilarityMap> {
    if features.shape().len() != 2 || features.rows() != h_patch * w_patch {
        return Err(Error::Shape(format!(
            "features {:?} do not fill a {h_patch}×{w_patch} grid",
            features.shape()
        )));
    }
    if roi.r0 > roi.r1 || roi.c0 > roi.c1 || roi.r1 >= h_patch || roi.c1 >= w_patch {
        return Err(Error::Argument(format!(
            "roi {roi:?} outside {h_patch}×{w_patch} grid"
        )));
    }
    let d = features.cols();
    let mut desc = vec![0.0; d];
    let mut count = 0.0;
    for r in roi.r0..=roi.r1 {
        for c in roi.c0..=roi.c1 {
            for (acc, v) in desc.iter_mut().zip(features.row(r * w_patch + c)) {
                *acc += v;
            }
            count += 1.0;
        }
    }
    desc.iter_mut().for_each(|v| *v /= count);
    let values = (0..h_patch * w_patch)
        .map(|i| cosine(&desc, features.row(i)))
        .collect();
    Ok(SimilarityMap {
        h_patch,
        w_patch,
        values,
        encoder,
        depth_fraction,
        roi,
    })
}

/// Grey level for a similarity: `round_half_up((v + 1) / 2 · 255)`.
pub fn heatmap_byte(v: f64) -> u8 {
    let x = (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0;
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary PGM encoding of a map.
pub fn heatmap_bytes(map: &SimilarityMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.w_patch, map.h_patch).into_bytes();
    out.extend(map.values.iter().map(|&v| heatmap_byte(v)));
    out
}

pub fn emit_heatmap(map: &SimilarityMap, path: &Path) -> Result<()> {
    fs::write(path, heatmap_bytes(map))?;
    Ok(())
}

/// `{encoder}_d{percent}.pgm`
pub fn heatmap_file_name(encoder: EncoderTag, frac: f64) -> String {
    format!("{}_d{}.pgm", encoder.short(), (frac * 100.0).round() as i64)
}

/// `C = {0.50, 0.55, …, 0.95}`
pub fn standard_thresholds() -> Vec<f64> {
    (10..20).map(|k| k as f64 / 20.0).collect()
}

/// Margin under which a relative error counts as sitting on a threshold.
const BOUNDARY_EPS: f64 = 1e-9;

/// Fraction of thresholds `C` with `|pred − truth| / |truth| < 1 − C`.
///
/// Strict at the boundary; errors within `BOUNDARY_EPS` of `1 − C` are
/// treated as equal to it, so `pred = 0.9·truth` misses `C = 0.9` despite
/// rounding in either operand.
pub fn mra_metric(pred: f64, truth: f64, thresholds: &[f64]) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::Metric("truth must be nonzero".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Metric("no thresholds".into()));
    }
    let rel = (pred - truth).abs() / truth.abs();
    let hits = thresholds
        .iter()
        .filter(|&&c| rel < 1.0 - c - BOUNDARY_EPS)
        .count();
    Ok(hits as f64 / thresholds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn layer_mapping_examples() {
        assert_eq!(depth_to_layer(0.5, 24).unwrap(), 12);
        assert_eq!(depth_to_layer(1.0, 32).unwrap(), 32);
        assert_eq!(depth_to_layer(0.75, 8).unwrap(), 6);
        let l24: Vec<usize> = [0.5, 0.75, 1.0]
            .iter()
            .map(|&f| depth_to_layer(f, 24).unwrap())
            .collect();
        assert_eq!(l24, vec![12, 18, 24]);
        let l32: Vec<usize> = [0.5, 0.75, 1.0]
            .iter()
            .map(|&f| depth_to_layer(f, 32).unwrap())
            .collect();
        assert_eq!(l32, vec![16, 24, 32]);
        assert_eq!(depth_to_layer(0.01, 8).unwrap(), 1);
        assert_eq!(depth_to_layer(1.5, 8).unwrap(), 8);
        assert!(depth_to_layer(0.0, 8).is_err());
        assert!(depth_to_layer(-0.2, 8).is_err());
        assert!(depth_to_layer(0.5, 0).is_err());
    }

    #[test]
    fn similarity_examples() {
        let mut rng = Rng::new(1, 0);
        let f = rng.normal_tensor(&[16, 6], 1.0);
        let m = roi_similarity_map(&f, 4, 4, Roi::patch(1, 2), EncoderTag::Geometry, 0.5).unwrap();
        assert!((m.at(1, 2) - 1.0).abs() < 1e-12);
        assert!(m.values.iter().all(|v| (-1.0..=1.0).contains(v)));

        let ortho = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let m =
            roi_similarity_map(&ortho, 2, 2, Roi::patch(0, 0), EncoderTag::Vision, 1.0).unwrap();
        assert_eq!(m.values, vec![1.0, 0.0, 0.0, -1.0]);

        let same = Tensor::from_rows(&vec![vec![0.3, -2.0, 1.0]; 9]).unwrap();
        let m =
            roi_similarity_map(&same, 3, 3, Roi::new(0, 0, 2, 1), EncoderTag::Vision, 1.0).unwrap();
        assert!(m.values.iter().all(|v| (v - 1.0).abs() < 1e-12));

        assert!(matches!(
            roi_similarity_map(&same, 3, 3, Roi::new(0, 0, 3, 1), EncoderTag::Vision, 1.0),
            Err(Error::Argument(_))
        ));
        assert!(
            roi_similarity_map(&same, 2, 3, Roi::patch(0, 0), EncoderTag::Vision, 1.0).is_err()
        );
    }

    #[test]
    fn heatmap_bytes_and_size() {
        assert_eq!(heatmap_byte(-1.0), 0);
        assert_eq!(heatmap_byte(1.0), 255);
        assert_eq!(heatmap_byte(0.0), 128);
        let map = SimilarityMap {
            h_patch: 4,
            w_patch: 4,
            values: vec![0.0; 16],
            encoder: EncoderTag::Geometry,
            depth_fraction: 0.5,
            roi: Roi::patch(0, 0),
        };
        let bytes = heatmap_bytes(&map);
        // "P5\n" + "4 4\n" + "255\n" is 11 bytes
        assert_eq!(bytes.len(), 11 + 16);
        assert_eq!(&bytes[..11], b"P5\n4 4\n255\n");
        assert!(bytes[11..].iter().all(|&b| b == 128));

        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.pgm");
        let b = dir.path().join("b.pgm");
        emit_heatmap(&map, &a).unwrap();
        emit_heatmap(&map, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert!(matches!(
            emit_heatmap(&map, &dir.path().join("missing/x.pgm")),
            Err(Error::File(_))
        ));
        assert_eq!(heatmap_file_name(EncoderTag::Geometry, 0.75), "geo_d75.pgm");
    }

    #[test]
    fn mra_examples() {
        let c = standard_thresholds();
        assert_eq!(mra_metric(3.0, 3.0, &c).unwrap(), 1.0);
        // relative error 0.1 passes C whose margin 1 − C exceeds 0.1: 0.50..=0.85
        let oracle = c.iter().filter(|&&t| 0.1 < 1.0 - t).count() as f64 / 10.0;
        assert_eq!(oracle, 0.8);
        assert_eq!(mra_metric(0.9 * 5.0, 5.0, &c).unwrap(), 0.8);
        for truth in [0.3, 1.7, 7.3, 42.0, 1e3] {
            assert_eq!(
                mra_metric(0.9 * truth, truth, &c).unwrap(),
                0.8,
                "truth {truth}"
            );
            assert_eq!(
                mra_metric(1.1 * truth, truth, &c).unwrap(),
                0.8,
                "truth {truth}"
            );
        }
        assert_eq!(mra_metric(10.0, 5.0, &c).unwrap(), 0.0);
        assert!(matches!(mra_metric(1.0, 0.0, &c), Err(Error::Metric(_))));
        assert!(mra_metric(1.0, 1.0, &[]).is_err());
    }

    proptest! {
        #[test]
        fn similarity_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut rng = Rng::new(seed, 0);
            let f = rng.normal_tensor(&[12, 5], 1.0);
            let scaled = Tensor::new(vec![12, 5], f.data().iter().map(|v| v * c).collect()).unwrap();
            let a = roi_similarity_map(&f, 3, 4, Roi::new(0, 1, 1, 2), EncoderTag::Geometry, 0.5).unwrap();
            let b = roi_similarity_map(&scaled, 3, 4, Roi::new(0, 1, 1, 2), EncoderTag::Geometry, 0.5).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn mra_is_monotone(truth in 0.1f64..50.0, e1 in 0.0f64..2.0, e2 in 0.0f64..2.0) {
            let c = standard_thresholds();
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let a = mra_metric(truth * (1.0 + lo), truth, &c).unwrap();
            let b = mra_metric(truth * (1.0 + hi), truth, &c).unwrap();
            prop_assert!(a >= b);
        }
    }
}
