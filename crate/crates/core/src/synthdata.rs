//! Seeded synthetic spatial-QA scenes with two rendered channels: an
//! appearance channel that carries no depth, and a geometry channel whose
//! pixels encode depth to the camera.
//!
//! Every camera looks along ±y with an orthographic projection onto (x, z),
//! so an object's y coordinate (its depth) never moves anything in the
//! appearance channel. Object centers sit on an (x, z) lattice; objects
//! sharing a lattice cell are stacked in depth and the nearer one occludes.
//!
//! A low-level question marks two visible objects that sit side by side in
//! the same merge window. Points are lettered in reading order, so A is
//! always the left one.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::alignment::{plan_frames, plan_resolution, FramePlan, ResizeSide, ResolutionPlan};
use crate::decoder::{Vocab, BOS, CLASS_NAMES, EOS};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Half-extent of the square image window in meters.
pub const VIEW_HALF_EXTENT: f64 = 4.0;
/// Object centers lie in `[−CENTER_RANGE, CENTER_RANGE]³`.
pub const CENTER_RANGE: f64 = 3.0;
/// Lattice of object-center x coordinates. At the toy resolution each value
/// is the center of one patch column, and columns pair up into merge
/// windows: `{−3, −1}` and `{1, 3}`.
pub const LATTICE_X: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];
/// Lattice of object-center z coordinates, one per merge-window row.
pub const LATTICE_Z: [f64; 2] = [-2.0, 2.0];
pub const RADIUS_RANGE: (f64, f64) = (0.8, 1.0);
pub const OBJECT_COUNT: (usize, usize) = (3, 6);
/// Distances from the scene origin to the near and far cameras along y.
pub const CAMERA_DISTANCES: [f64; 2] = [5.0, 6.0];
/// Depth at which the geometry channel reaches 0.
pub const FAR_DEPTH: f64 = 10.0;
pub const MARKER_A: f64 = 2.0;
pub const MARKER_B: f64 = 3.0;
pub const APPEARANCE_NOISE_STD: f64 = 0.05;
/// Depth or distance gaps below this are treated as ties and resampled.
pub const TIE_MARGIN: f64 = 3.0;
pub const SOURCE_POSES: usize = 4;
const MAX_SCENE_ATTEMPTS: usize = 1000;
const MAX_SAMPLE_ATTEMPTS: usize = 100;

const STREAM_SCENE: u64 = 0x5c3e;
const STREAM_SAMPLE: u64 = 0x5a3f;
const STREAM_NOISE: u64 = 0x401e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLevel {
    Low,
    High,
}

impl std::str::FromStr for TaskLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(TaskLevel::Low),
            "high" => Ok(TaskLevel::High),
            _ => Err(Error::Argument(format!(
                "level must be low or high, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    /// Meters, `[x, y, z]`.
    pub position: [f64; 3],
    pub radius: f64,
    pub class: usize,
}

/// Orthographic camera looking along `forward` (±y); the image plane spans
/// `right` and +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub forward: [f64; 3],
    pub right: [f64; 3],
}

impl Camera {
    fn rel(&self, p: &[f64; 3]) -> [f64; 3] {
        [
            p[0] - self.position[0],
            p[1] - self.position[1],
            p[2] - self.position[2],
        ]
    }

    pub fn depth(&self, p: &[f64; 3]) -> f64 {
        dot3(&self.rel(p), &self.forward)
    }

    /// Image-plane coordinates `(u, v)`: `u` along `right`, `v` up.
    pub fn project(&self, p: &[f64; 3]) -> (f64, f64) {
        let r = self.rel(p);
        (dot3(&r, &self.right), r[2])
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// The four source poses: front and back from the near distance, then both
/// again from the far distance.
pub fn source_cameras() -> Vec<Camera> {
    let front = |d: f64| Camera {
        position: [0.0, -d, 0.0],
        forward: [0.0, 1.0, 0.0],
        right: [1.0, 0.0, 0.0],
    };
    let back = |d: f64| Camera {
        position: [0.0, d, 0.0],
        forward: [0.0, -1.0, 0.0],
        right: [-1.0, 0.0, 0.0],
    };
    let [near, far] = CAMERA_DISTANCES;
    vec![front(near), back(near), front(far), back(far)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<Camera>,
    /// Object centers lie in `[−bound, bound]³`.
    pub bound: f64,
}

impl SyntheticScene {
    pub fn object(&self, id: usize) -> &SceneObject {
        &self.objects[id]
    }
}

fn center_distance(a: &SceneObject, b: &SceneObject) -> f64 {
    let d: Vec<f64> = (0..3).map(|k| a.position[k] - b.position[k]).collect();
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Whether any part of the object's disk falls inside the image window.
fn visible(cam: &Camera, o: &SceneObject) -> bool {
    let (u, v) = cam.project(&o.position);
    u.abs() - o.radius < VIEW_HALF_EXTENT && v.abs() - o.radius < VIEW_HALF_EXTENT
}

pub fn gen_scene(seed: u64) -> Result<SyntheticScene> {
    let mut rng = Rng::new(seed, STREAM_SCENE);
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let n = rng.int_range(OBJECT_COUNT.0, OBJECT_COUNT.1);
        let mut classes: Vec<usize> = (0..CLASS_NAMES.len()).collect();
        rng.shuffle(&mut classes);
        let cells = LATTICE_X.len() * LATTICE_Z.len();
        let objects: Vec<SceneObject> = (0..n)
            .map(|id| {
                let cell = rng.int_range(0, cells - 1);
                SceneObject {
                    id,
                    position: [
                        LATTICE_X[cell % LATTICE_X.len()],
                        rng.uniform_range(-CENTER_RANGE, CENTER_RANGE),
                        LATTICE_Z[cell / LATTICE_X.len()],
                    ],
                    radius: rng.uniform_range(RADIUS_RANGE.0, RADIUS_RANGE.1),
                    class: classes[id],
                }
            })
            .collect();
        // objects sharing a cell are stacked along y and occlude each other
        let min_gap = 2.0 * RADIUS_RANGE.1;
        let ok = (0..n)
            .all(|i| (i + 1..n).all(|j| center_distance(&objects[i], &objects[j]) >= min_gap));
        let cameras = source_cameras();
        if ok
            && cameras
                .iter()
                .all(|c| objects.iter().any(|o| visible(c, o)))
        {
            return Ok(SyntheticScene {
                seed,
                objects,
                cameras,
                bound: CENTER_RANGE,
            });
        }
    }
    Err(Error::Generation(format!(
        "scene {seed}: no valid layout after {MAX_SCENE_ATTEMPTS} attempts"
    )))
}

/// Geometry-channel value for a depth: `clip(1 − depth / 10, 0, 1)`.
pub fn depth_value(depth: f64) -> f64 {
    (1.0 - depth / FAR_DEPTH).clamp(0.0, 1.0)
}

/// Appearance-channel intensity of a class.
pub fn class_intensity(class: usize) -> f64 {
    0.25 + 0.15 * class as f64
}

/// Frame selection plus output resolution for rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    pub frames: FramePlan,
    pub resolution: ResolutionPlan,
    /// Side in pixels of one merge window (`p·s`).
    pub window: usize,
}

impl RenderSpec {
    pub fn size(&self) -> (usize, usize) {
        self.resolution.size()
    }

    /// Scaled-image pixel → image-plane coordinates of its center.
    fn pixel_center(&self, r: usize, c: usize) -> (f64, f64) {
        let (sh, sw) = self.resolution.scaled;
        let rr = (r + self.resolution.crop_top) as f64 + 0.5;
        let cc = (c + self.resolution.crop_left) as f64 + 0.5;
        let ext = 2.0 * VIEW_HALF_EXTENT;
        (
            -VIEW_HALF_EXTENT + cc * ext / sw as f64,
            VIEW_HALF_EXTENT - rr * ext / sh as f64,
        )
    }

    /// Output pixel containing an image-plane point, if inside the frame.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (sh, sw) = self.resolution.scaled;
        let ext = 2.0 * VIEW_HALF_EXTENT;
        let c = ((u + VIEW_HALF_EXTENT) * sw as f64 / ext).floor();
        let r = ((VIEW_HALF_EXTENT - v) * sh as f64 / ext).floor();
        let r = r - self.resolution.crop_top as f64;
        let c = c - self.resolution.crop_left as f64;
        if r < 0.0
            || c < 0.0
            || r >= self.resolution.height as f64
            || c >= self.resolution.width as f64
        {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarkerLabel {
    A,
    B,
}

impl MarkerLabel {
    pub fn intensity(self) -> f64 {
        match self {
            MarkerLabel::A => MARKER_A,
            MarkerLabel::B => MARKER_B,
        }
    }
}

/// A one-pixel marker on object `object`'s projected center in frame `frame`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub label: MarkerLabel,
    pub frame: usize,
    pub row: usize,
    pub col: usize,
    pub object: usize,
}

/// Render the selected frames of a scene. `noise_seed` drives the
/// appearance-channel noise.
pub fn render_views(
    scene: &SyntheticScene,
    spec: &RenderSpec,
    markers: &[Marker],
    noise_seed: u64,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let (h, w) = spec.size();
    let mut noise = Rng::new(noise_seed, STREAM_NOISE);
    let mut vision = Vec::with_capacity(spec.frames.count);
    let mut geometry = Vec::with_capacity(spec.frames.count);
    for (k, &pose) in spec.frames.indices.iter().enumerate() {
        let cam = scene
            .cameras
            .get(pose)
            .ok_or_else(|| Error::Generation(format!("frame plan references pose {pose}")))?;
        let projected: Vec<(f64, f64)> = scene
            .objects
            .iter()
            .map(|o| cam.project(&o.position))
            .collect();
        if !scene.objects.iter().any(|o| visible(cam, o)) {
            return Err(Error::Generation(format!(
                "no object visible from pose {pose}"
            )));
        }
        let mut vis = Tensor::zeros(&[h, w]);
        let mut geo = Tensor::zeros(&[h, w]);
        for r in 0..h {
            for c in 0..w {
                let (u, v) = spec.pixel_center(r, c);
                let mut nearest = f64::INFINITY;
                let mut appearance = 0.0;
                for (o, &(ou, ov)) in scene.objects.iter().zip(&projected) {
                    let inside = (u - ou).powi(2) + (v - ov).powi(2) <= o.radius * o.radius;
                    if !inside {
                        continue;
                    }
                    // painter's order by id: independent of depth
                    appearance = class_intensity(o.class);
                    nearest = nearest.min(cam.depth(&o.position));
                }
                vis.row_mut(r)[c] = appearance + noise.normal() * APPEARANCE_NOISE_STD;
                if nearest.is_finite() {
                    geo.row_mut(r)[c] = depth_value(nearest);
                }
            }
        }
        for m in markers.iter().filter(|m| m.frame == k) {
            if m.row >= h || m.col >= w {
                return Err(Error::Generation(format!(
                    "marker {m:?} outside {h}×{w} frame"
                )));
            }
            vis.row_mut(m.row)[m.col] = m.label.intensity();
            geo.row_mut(m.row)[m.col] = m.label.intensity();
        }
        vision.push(vis);
        geometry.push(geo);
    }
    Ok((vision, geometry))
}

/// Data section of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Experiment seeds; each seeds initialization and the training stream.
    pub seeds: Vec<u64>,
    /// Held-out samples per suite.
    pub eval_count: usize,
    /// Base seed of held-out suites, disjoint from training seeds.
    pub eval_seed: u64,
    /// Fraction of training samples that are low-level.
    pub low_fraction: f64,
    pub source_height: usize,
    pub source_width: usize,
    pub target_resolution: usize,
    pub resize_side: ResizeSide,
    pub clip_seconds: f64,
    pub sample_interval: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl DataConfig {
    pub fn toy() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            eval_count: 512,
            eval_seed: 900_000_000,
            low_fraction: 0.75,
            source_height: 36,
            source_width: 36,
            target_resolution: 16,
            resize_side: ResizeSide::Short,
            clip_seconds: 4.0,
            sample_interval: 2.0,
            min_frames: 2,
            max_frames: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.low_fraction) {
            return Err(Error::Config(format!(
                "low_fraction {} outside [0, 1]",
                self.low_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("data.seeds is empty".into()));
        }
        Ok(())
    }

    pub fn render_spec(&self, patch: usize, merge: usize) -> Result<RenderSpec> {
        let frames = plan_frames(
            self.clip_seconds,
            self.sample_interval,
            self.min_frames,
            self.max_frames,
            SOURCE_POSES,
        )?;
        let resolution = plan_resolution(
            self.source_height,
            self.source_width,
            self.target_resolution,
            patch,
            merge,
            self.resize_side,
        )?;
        Ok(RenderSpec {
            frames,
            resolution,
            window: patch * merge,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QASample {
    pub seed: u64,
    pub level: TaskLevel,
    /// Seed of the scene actually rendered (differs from `seed` only after a tie resample).
    pub scene_seed: u64,
    pub vision: Vec<Tensor>,
    pub geometry: Vec<Tensor>,
    pub markers: Vec<Marker>,
    /// Low: `[object under A, object under B]`; high: `[anchor, option A, option B]`.
    pub objects: Vec<usize>,
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
}

/// Surface-to-surface distance between two spheres.
pub fn surface_distance(a: &SceneObject, b: &SceneObject) -> f64 {
    let d: f64 = (0..3)
        .map(|i| (a.position[i] - b.position[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    d - a.radius - b.radius
}

fn scene_seed_for(seed: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        seed
    } else {
        seed.wrapping_add((attempt as u64) << 40)
    }
}

fn answer(vocab: &Vocab, first: bool) -> Result<Vec<usize>> {
    vocab.encode(&[if first { "A" } else { "B" }, EOS])
}

pub fn low_level_prompt(vocab: &Vocab) -> Result<Vec<usize>> {
    vocab.encode(&[BOS, "which", "point", "is", "closer", "?"])
}

pub fn high_level_prompt(vocab: &Vocab, anchor: usize, a: usize, b: usize) -> Result<Vec<usize>> {
    vocab.encode(&[
        BOS,
        "which",
        "object",
        "is",
        "nearer",
        "to",
        CLASS_NAMES[anchor],
        "?",
        CLASS_NAMES[a],
        "or",
        CLASS_NAMES[b],
    ])
}

/// Objects whose projected center is not hidden behind a nearer object.
fn frontmost(scene: &SyntheticScene, cam: &Camera) -> Vec<usize> {
    (0..scene.objects.len())
        .filter(|&i| {
            let o = scene.object(i);
            let p = cam.project(&o.position);
            !scene.objects.iter().any(|q| {
                let pq = cam.project(&q.position);
                let r2 = (p.0 - pq.0).powi(2) + (p.1 - pq.1).powi(2);
                q.id != i
                    && r2 <= q.radius * q.radius
                    && cam.depth(&q.position) < cam.depth(&o.position)
            })
        })
        .collect()
}

/// Visible object pairs `(left, right)` that sit in adjacent lattice columns
/// of the same window pair and the same row, as seen from `cam`.
pub fn side_by_side_pairs(scene: &SyntheticScene, cam: &Camera) -> Vec<(usize, usize)> {
    let front = frontmost(scene, cam);
    let column = |u: f64| LATTICE_X.iter().position(|&x| (x - u).abs() < 1e-9);
    let mut out = Vec::new();
    for &i in &front {
        for &j in &front {
            let (ui, vi) = cam.project(&scene.object(i).position);
            let (uj, vj) = cam.project(&scene.object(j).position);
            if let (Some(ci), Some(cj)) = (column(ui), column(uj)) {
                if ci % 2 == 0 && cj == ci + 1 && (vi - vj).abs() < 1e-9 {
                    out.push((i, j));
                }
            }
        }
    }
    out
}

/// Low-level ground truth: which of the marked objects `a` and `b` is nearer
/// to `cam`. Exact ties go to `B`; sampling keeps pairs `TIE_MARGIN` apart.
pub fn nearer_label(scene: &SyntheticScene, cam: &Camera, a: usize, b: usize) -> MarkerLabel {
    if cam.depth(&scene.object(a).position) < cam.depth(&scene.object(b).position) {
        MarkerLabel::A
    } else {
        MarkerLabel::B
    }
}

pub fn gen_sample(
    seed: u64,
    level: TaskLevel,
    spec: &RenderSpec,
    vocab: &Vocab,
) -> Result<QASample> {
    let mut rng = Rng::new(seed, STREAM_SAMPLE);
    for attempt in 0..MAX_SAMPLE_ATTEMPTS {
        let scene_seed = scene_seed_for(seed, attempt);
        let scene = gen_scene(scene_seed)?;
        let n = scene.objects.len();
        let found = match level {
            TaskLevel::Low => {
                let frame = rng.int_range(0, spec.frames.count - 1);
                let cam = &scene.cameras[spec.frames.indices[frame]];
                let depth = |k: usize| cam.depth(&scene.object(k).position);
                let pairs: Vec<(usize, usize)> = side_by_side_pairs(&scene, cam)
                    .into_iter()
                    .filter(|&(i, j)| (depth(i) - depth(j)).abs() >= TIE_MARGIN)
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                let (i, j) = pairs[rng.int_range(0, pairs.len() - 1)];
                let pa = cam.project(&scene.object(i).position);
                let pb = cam.project(&scene.object(j).position);
                match (spec.pixel_of(pa.0, pa.1), spec.pixel_of(pb.0, pb.1)) {
                    (Some(a), Some(b)) if a != b => {
                        let marker = |label, (row, col), object| Marker {
                            label,
                            frame,
                            row,
                            col,
                            object,
                        };
                        Some((
                            vec![marker(MarkerLabel::A, a, i), marker(MarkerLabel::B, b, j)],
                            vec![i, j],
                            low_level_prompt(vocab)?,
                            answer(vocab, nearer_label(&scene, cam, i, j) == MarkerLabel::A)?,
                        ))
                    }
                    _ => None,
                }
            }
            TaskLevel::High => {
                let anchor = rng.int_range(0, n - 1);
                let mut others: Vec<usize> = (0..n).filter(|&k| k != anchor).collect();
                rng.shuffle(&mut others);
                let (a, b) = (others[0], others[1]);
                let o = scene.object(anchor);
                let da = surface_distance(o, scene.object(a));
                let db = surface_distance(o, scene.object(b));
                if (da - db).abs() >= TIE_MARGIN {
                    let prompt = high_level_prompt(
                        vocab,
                        o.class,
                        scene.object(a).class,
                        scene.object(b).class,
                    )?;
                    Some((
                        Vec::new(),
                        vec![anchor, a, b],
                        prompt,
                        answer(vocab, da < db)?,
                    ))
                } else {
                    None
                }
            }
        };
        if let Some((markers, objects, question_ids, answer_ids)) = found {
            let (vision, geometry) = render_views(&scene, spec, &markers, seed)?;
            return Ok(QASample {
                seed,
                level,
                scene_seed,
                vision,
                geometry,
                markers,
                objects,
                question_ids,
                answer_ids,
            });
        }
    }
    Err(Error::Generation(format!(
        "sample {seed}: unresolvable tie after {MAX_SAMPLE_ATTEMPTS} resamples"
    )))
}

/// One JSONL line of `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub level: TaskLevel,
    pub frames: Vec<Vec<Vec<f64>>>,
    pub geometry_frames: Vec<Vec<Vec<f64>>>,
    pub question_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    pub scene_seed: u64,
    pub objects: Vec<usize>,
    pub markers: Vec<Marker>,
}

fn nested(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn flat(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

impl From<&QASample> for SampleRecord {
    fn from(s: &QASample) -> Self {
        Self {
            seed: s.seed,
            level: s.level,
            frames: s.vision.iter().map(nested).collect(),
            geometry_frames: s.geometry.iter().map(nested).collect(),
            question_ids: s.question_ids.clone(),
            answer_ids: s.answer_ids.clone(),
            scene_seed: s.scene_seed,
            objects: s.objects.clone(),
            markers: s.markers.clone(),
        }
    }
}

impl TryFrom<SampleRecord> for QASample {
    type Error = Error;

    fn try_from(r: SampleRecord) -> Result<Self> {
        Ok(Self {
            seed: r.seed,
            level: r.level,
            scene_seed: r.scene_seed,
            vision: r.frames.iter().map(|f| flat(f)).collect::<Result<_>>()?,
            geometry: r
                .geometry_frames
                .iter()
                .map(|f| flat(f))
                .collect::<Result<_>>()?,
            markers: r.markers,
            objects: r.objects,
            question_ids: r.question_ids,
            answer_ids: r.answer_ids,
        })
    }
}

pub fn write_jsonl<W: Write>(samples: &[QASample], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, &SampleRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<QASample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        out.push(QASample::try_from(rec)?);
    }
    Ok(out)
}

/// Held-out suite: `count` samples with seeds `base, base + 1, …`.
pub fn eval_suite(
    base: u64,
    count: usize,
    level: TaskLevel,
    spec: &RenderSpec,
    vocab: &Vocab,
) -> Result<Vec<QASample>> {
    (0..count as u64)
        .map(|i| gen_sample(base + i, level, spec, vocab))
        .collect()
}
