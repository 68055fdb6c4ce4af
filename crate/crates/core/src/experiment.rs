//! Fusion variants, held-out evaluation, ablation sweeps and similarity-map
//! rendering on top of the trainer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    emit_heatmap, heatmap_file_name, roi_similarity_map, EncoderTag, Roi, SimilarityMap,
};
use crate::config::RunConfig;
use crate::decoder::Vocab;
use crate::encoders::{geometry_encode_at, vision_encode_graph};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionPlan};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Graph;
use crate::pipeline::{predict, SampleInputs};
use crate::synthdata::{eval_suite, gen_sample, QASample, RenderSpec, TaskLevel};
use crate::training::Trainer;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Offset between the low- and high-level held-out seed ranges.
const HIGH_SUITE_OFFSET: u64 = 50_000_000;

/// A fusion configuration compared in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Base,
    /// GVF from a single tap; `None` means the deepest tap.
    GvfSingle(Option<usize>),
    GvfMulti,
    Stack,
    StackReverse,
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Base => "base".into(),
            Variant::GvfSingle(None) => "gvf-single".into(),
            Variant::GvfSingle(Some(t)) => format!("gvf-single@{t}"),
            Variant::GvfMulti => "gvf-multi".into(),
            Variant::Stack => "stack".into(),
            Variant::StackReverse => "stack-reverse".into(),
        }
    }

    /// Decoder layers of a stack plan are those of the configured plan when
    /// it is a stack plan, else `0..taps`.
    pub fn plan(&self, model: &ModelConfig) -> Result<FusionPlan> {
        let taps = model.geometry.tap_indices()?;
        let layers: Vec<usize> = if model.fusion.mode.is_stack() {
            let mut l: Vec<usize> = model.fusion.pairs.iter().map(|p| p.1).collect();
            l.sort_unstable();
            l
        } else {
            (0..taps.len()).collect()
        };
        match *self {
            Variant::Base => Ok(FusionPlan::none()),
            Variant::GvfSingle(tap) => {
                let t = tap.unwrap_or(*taps.last().expect("validated taps"));
                FusionPlan::new(FusionMode::GvfSingle, &[t], &[])
            }
            Variant::GvfMulti => FusionPlan::new(FusionMode::GvfMulti, &taps, &[]),
            Variant::Stack => FusionPlan::new(FusionMode::Stack, &taps, &layers),
            Variant::StackReverse => FusionPlan::new(FusionMode::StackReverse, &taps, &layers),
        }
    }

    /// The five standard variants.
    pub fn standard() -> Vec<Variant> {
        vec![
            Variant::Base,
            Variant::GvfSingle(None),
            Variant::GvfMulti,
            Variant::Stack,
            Variant::StackReverse,
        ]
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "base" => Ok(Variant::Base),
            "gvf-single" => Ok(Variant::GvfSingle(None)),
            "gvf-multi" => Ok(Variant::GvfMulti),
            "stack" => Ok(Variant::Stack),
            "stack-reverse" => Ok(Variant::StackReverse),
            _ => match s.strip_prefix("gvf-single@") {
                Some(t) => t
                    .parse()
                    .map(|t| Variant::GvfSingle(Some(t)))
                    .map_err(|_| Error::Argument(format!("bad tap in variant {s:?}"))),
                None => Err(Error::Argument(format!("unknown variant {s:?}"))),
            },
        }
    }
}

/// Parse a comma-separated variant list.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let v: Vec<Variant> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Argument("no variants given".into()));
    }
    Ok(v)
}

/// Exact-match accuracy of greedy answers.
pub fn evaluate(
    model: &ModelConfig,
    params: &ModelParams,
    vocab: &Vocab,
    samples: &[QASample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Evaluation("empty evaluation suite".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        let out = predict(
            model,
            params,
            vocab,
            SampleInputs::from_sample(s),
            s.answer_ids.len().max(1),
        )?;
        if out == s.answer_ids {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Held-out suites of a configuration.
#[derive(Clone, Debug)]
pub struct EvalSuites {
    pub low: Vec<QASample>,
    pub high: Vec<QASample>,
}

impl EvalSuites {
    pub fn generate(cfg: &RunConfig, levels: &[TaskLevel]) -> Result<Self> {
        let vocab = Vocab::toy();
        let spec = cfg.data.render_spec(cfg.model.patch(), cfg.model.merge())?;
        let make = |level: TaskLevel, base: u64| -> Result<Vec<QASample>> {
            if levels.contains(&level) {
                eval_suite(base, cfg.data.eval_count, level, &spec, &vocab)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Self {
            low: make(TaskLevel::Low, cfg.data.eval_seed)?,
            high: make(TaskLevel::High, cfg.data.eval_seed + HIGH_SUITE_OFFSET)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub artifact_version: String,
    pub config_hash: String,
    pub step: usize,
    pub low_accuracy: Option<f64>,
    pub high_accuracy: Option<f64>,
    pub low_count: usize,
    pub high_count: usize,
}

pub fn evaluate_suites(
    cfg: &RunConfig,
    params: &ModelParams,
    suites: &EvalSuites,
    step: usize,
) -> Result<EvalReport> {
    let vocab = Vocab::toy();
    let acc = |s: &[QASample]| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            evaluate(&cfg.model, params, &vocab, s).map(Some)
        }
    };
    Ok(EvalReport {
        artifact_version: ARTIFACT_VERSION.into(),
        config_hash: cfg.hash()?,
        step,
        low_accuracy: acc(&suites.low)?,
        high_accuracy: acc(&suites.high)?,
        low_count: suites.low.len(),
        high_count: suites.high.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedResult {
    pub seed: u64,
    pub low_accuracy: f64,
    pub high_accuracy: f64,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantEntry {
    pub variant: String,
    pub plan: FusionPlan,
    pub status: VariantStatus,
    pub error: Option<String>,
    pub low_accuracy: f64,
    pub high_accuracy: f64,
    /// Mean of the low- and high-level accuracies.
    pub overall: f64,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub artifact_version: String,
    pub config_hash: String,
    pub eval_count: usize,
    pub entries: Vec<VariantEntry>,
}

impl AblationReport {
    /// Structural checks of a report.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            for a in [e.low_accuracy, e.high_accuracy, e.overall] {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Evaluation(format!(
                        "{}: accuracy {a} outside [0, 1]",
                        e.variant
                    )));
                }
            }
            if e.status == VariantStatus::Ok
                && (e.overall - (e.low_accuracy + e.high_accuracy) / 2.0).abs() > 1e-12
            {
                return Err(Error::Evaluation(format!(
                    "{}: overall is not the mean",
                    e.variant
                )));
            }
        }
        Ok(())
    }
}

/// Train one variant for one seed, then evaluate on the given suites.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    suites: &EvalSuites,
) -> Result<SeedResult> {
    let mut run = cfg.clone();
    run.model.fusion = variant.plan(&cfg.model)?;
    run.train.seed = seed;
    let mut trainer = Trainer::new(&run)?;
    trainer.train(run.train.total_steps)?;
    let vocab = Vocab::toy();
    let acc = |s: &[QASample]| -> Result<f64> {
        if s.is_empty() {
            Ok(0.0)
        } else {
            evaluate(&run.model, &trainer.params, &vocab, s)
        }
    };
    Ok(SeedResult {
        seed,
        low_accuracy: acc(&suites.low)?,
        high_accuracy: acc(&suites.high)?,
        losses: trainer.losses.clone(),
    })
}

fn variant_entry(cfg: &RunConfig, variant: Variant, suites: &EvalSuites) -> Result<VariantEntry> {
    let plan = variant.plan(&cfg.model)?;
    let mut entry = VariantEntry {
        variant: variant.name(),
        plan,
        status: VariantStatus::Ok,
        error: None,
        low_accuracy: 0.0,
        high_accuracy: 0.0,
        overall: 0.0,
        seeds: cfg.data.seeds.clone(),
        steps: cfg.train.total_steps,
        per_seed: Vec::new(),
    };
    for &seed in &cfg.data.seeds {
        match train_and_evaluate(cfg, variant, seed, suites) {
            Ok(r) => entry.per_seed.push(r),
            Err(e @ Error::Training { .. }) => {
                entry.status = VariantStatus::Failed;
                entry.error = Some(format!("seed {seed}: {e}"));
                return Ok(entry);
            }
            Err(e) => return Err(e),
        }
    }
    let n = entry.per_seed.len() as f64;
    entry.low_accuracy = entry.per_seed.iter().map(|r| r.low_accuracy).sum::<f64>() / n;
    entry.high_accuracy = entry.per_seed.iter().map(|r| r.high_accuracy).sum::<f64>() / n;
    entry.overall = (entry.low_accuracy + entry.high_accuracy) / 2.0;
    Ok(entry)
}

/// Train and evaluate every variant on identical seeds and data streams.
pub fn run_ablation(
    cfg: &RunConfig,
    variants: &[Variant],
    parallel: bool,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Argument("no variants given".into()));
    }
    cfg.validate()?;
    let suites = EvalSuites::generate(cfg, &[TaskLevel::Low, TaskLevel::High])?;
    let entries: Vec<VariantEntry> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = variants
                .iter()
                .map(|&v| {
                    let suites = &suites;
                    scope.spawn(move || variant_entry(cfg, v, suites))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().map_err(|_| Error::Training {
                        step: 0,
                        message: "variant thread panicked".into(),
                    })?
                })
                .collect::<Result<_>>()
        })?
    } else {
        variants
            .iter()
            .map(|&v| variant_entry(cfg, v, &suites))
            .collect::<Result<_>>()?
    };
    let report = AblationReport {
        artifact_version: ARTIFACT_VERSION.into(),
        config_hash: cfg.hash()?,
        eval_count: cfg.data.eval_count,
        entries,
    };
    report.validate()?;
    Ok(report)
}

/// ROI similarity map of one encoder at fractional depth `frac`, computed on
/// the first view of the sample.
pub fn similarity_for_sample(
    model: &ModelConfig,
    params: &ModelParams,
    sample: &QASample,
    encoder: EncoderTag,
    frac: f64,
    roi: Roi,
) -> Result<SimilarityMap> {
    match encoder {
        EncoderTag::Geometry => {
            let layer = crate::analysis::depth_to_layer(frac, model.geometry.depth)? - 1;
            let set = geometry_encode_at(&sample.geometry[..1], model, params, &[layer])?;
            let grid =
                crate::encoders::frame_grid(&sample.geometry[..1], model.patch(), model.merge())?;
            roi_similarity_map(
                &set.patch_tokens(layer, 0)?,
                grid.h_patch,
                grid.w_patch,
                roi,
                encoder,
                frac,
            )
        }
        EncoderTag::Vision => {
            let layer = crate::analysis::depth_to_layer(frac, model.vision.depth)?;
            let truncated = ModelConfig {
                vision: crate::model::VisionEncoderConfig {
                    depth: layer,
                    ..model.vision.clone()
                },
                ..model.clone()
            };
            let mut g = Graph::new();
            let b = params.bind(&mut g, |_| false);
            let (x, grid) = vision_encode_graph(&mut g, &b, &truncated, &sample.vision[..1])?
                .expect("one frame");
            roi_similarity_map(g.value(x), grid.h_patch, grid.w_patch, roi, encoder, frac)
        }
    }
}

/// Write `{encoder}_d{percent}.pgm` for each depth; returns the file names.
pub fn write_similarity_maps(
    model: &ModelConfig,
    params: &ModelParams,
    spec: &RenderSpec,
    scene_seed: u64,
    encoder: EncoderTag,
    depths: &[f64],
    roi: Roi,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let sample = gen_sample(scene_seed, TaskLevel::Low, spec, &Vocab::toy())?;
    std::fs::create_dir_all(out_dir)?;
    let mut names = Vec::new();
    for &d in depths {
        let map = similarity_for_sample(model, params, &sample, encoder, d, roi)?;
        let name = heatmap_file_name(encoder, d);
        emit_heatmap(&map, &out_dir.join(&name))?;
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in [
            Variant::Base,
            Variant::GvfSingle(None),
            Variant::GvfSingle(Some(5)),
            Variant::GvfMulti,
            Variant::Stack,
            Variant::StackReverse,
        ] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("stacks".parse::<Variant>().is_err());
        assert!(parse_variants("").is_err());
        assert_eq!(parse_variants("base,stack").unwrap().len(), 2);
    }

    #[test]
    fn variant_plans_echo_the_mapping() {
        let m = RunConfig::toy().model;
        assert_eq!(
            Variant::Stack.plan(&m).unwrap().pairs,
            vec![(3, 0), (5, 1), (7, 2)]
        );
        assert_eq!(
            Variant::StackReverse.plan(&m).unwrap().pairs,
            vec![(3, 2), (5, 1), (7, 0)]
        );
        assert_eq!(
            Variant::GvfSingle(None).plan(&m).unwrap().gvf_layers,
            vec![7]
        );
        assert_eq!(
            Variant::GvfMulti.plan(&m).unwrap().gvf_layers,
            vec![3, 5, 7]
        );
        assert_eq!(Variant::Base.plan(&m).unwrap().mode, FusionMode::None);
    }
}
