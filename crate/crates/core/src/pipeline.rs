//! One sample through the whole model: vision encoder and merger, geometry
//! encoder taps and mergers, the fusion plan, and the decoder.

use std::collections::BTreeMap;

use crate::alignment::geometry_patch_rows;
use crate::decoder::{
    decoder_forward_graph, embed_sequence_graph, greedy_decode, next_token_loss_graph,
    DecodeSession, DecoderPass, SequenceLayout, Vocab,
};
use crate::encoders::{geometry_encode_graph, spatial_merge_graph, vision_encode_graph};
use crate::error::{Error, Result};
use crate::fusion::{gvf_fuse_graph, project_geometry_graph, FusionMode};
use crate::model::{Bound, ModelConfig, ModelParams};
use crate::numerics::{Graph, Tensor, Var};
use crate::synthdata::QASample;

/// Model inputs of one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleInputs<'s> {
    pub vision: &'s [Tensor],
    pub geometry: &'s [Tensor],
    pub prompt_ids: &'s [usize],
    pub answer_ids: &'s [usize],
}

impl<'s> SampleInputs<'s> {
    pub fn from_sample(s: &'s QASample) -> Self {
        Self {
            vision: &s.vision,
            geometry: &s.geometry,
            prompt_ids: &s.question_ids,
            answer_ids: &s.answer_ids,
        }
    }

    /// The same sample without its answer, for generation.
    pub fn prompt_only(self) -> Self {
        Self {
            answer_ids: &[],
            ..self
        }
    }
}

/// Projected geometry `(K·N') × D_lang` for every tap the plan reads.
pub fn projected_geometry_graph(
    g: &mut Graph<'_>,
    b: &Bound,
    cfg: &ModelConfig,
    geometry: &[Tensor],
) -> Result<BTreeMap<usize, Var>> {
    let taps = cfg.fusion.taps();
    if taps.is_empty() {
        return Ok(BTreeMap::new());
    }
    let (hidden, grid) = geometry_encode_graph(g, b, cfg, geometry, &taps)?;
    let rows = geometry_patch_rows(geometry.len(), cfg.geometry.registers, &grid)?;
    let mut out = BTreeMap::new();
    for (tap, h) in hidden {
        let stripped = g.gather_rows(h, &rows)?;
        out.insert(
            tap,
            project_geometry_graph(g, b, tap, stripped, &grid, cfg.rms_eps)?,
        );
    }
    Ok(out)
}

/// Full prefill pass on the tape.
pub fn forward_graph(
    g: &mut Graph<'_>,
    b: &Bound,
    cfg: &ModelConfig,
    vocab: &Vocab,
    inputs: SampleInputs<'_>,
) -> Result<(DecoderPass, SequenceLayout)> {
    let k = inputs.vision.len();
    if k == 0 {
        return Err(Error::Shape("sample has no vision frames".into()));
    }
    if cfg.fusion.mode != FusionMode::None && inputs.geometry.len() != k {
        return Err(Error::Shape(format!(
            "{k} vision frames but {} geometry frames",
            inputs.geometry.len()
        )));
    }
    let (vis, grid) = vision_encode_graph(g, b, cfg, inputs.vision)?.expect("non-empty frames");
    let mut merged = spatial_merge_graph(g, b, cfg, vis, &grid, k)?;
    let geo = projected_geometry_graph(g, b, cfg, inputs.geometry)?;
    if cfg.fusion.mode.is_gvf() {
        let layers: Vec<Var> = cfg.fusion.gvf_layers.iter().map(|t| geo[t]).collect();
        merged = gvf_fuse_graph(g, merged, &layers)?;
    }
    let layout = SequenceLayout::new(
        g.value(merged).rows(),
        inputs.prompt_ids,
        inputs.answer_ids,
        vocab,
        cfg.decoder.max_seq_len,
    )?;
    let h0 = embed_sequence_graph(g, b, Some(merged), &layout)?;
    let stack_geo = if cfg.fusion.mode.is_stack() {
        geo
    } else {
        BTreeMap::new()
    };
    let pass = decoder_forward_graph(
        g,
        b,
        &cfg.decoder,
        cfg.rms_eps,
        h0,
        &layout.vision_mask(),
        &cfg.fusion,
        cfg.inject_site,
        &stack_geo,
    )?;
    Ok((pass, layout))
}

/// Prefill logits `N_tot × V`.
pub fn sample_logits(
    cfg: &ModelConfig,
    params: &ModelParams,
    vocab: &Vocab,
    inputs: SampleInputs<'_>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let (pass, _) = forward_graph(&mut g, &b, cfg, vocab, inputs)?;
    Ok(g.value(pass.logits).clone())
}

/// Next-token loss of a sample with an answer.
pub fn sample_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    vocab: &Vocab,
    inputs: SampleInputs<'_>,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let (pass, layout) = forward_graph(&mut g, &b, cfg, vocab, inputs)?;
    let loss = next_token_loss_graph(&mut g, pass.logits, &layout)?;
    Ok(g.value(loss).data()[0])
}

/// Greedy answer: fused prefill over the prompt, then cached decoding.
pub fn predict(
    cfg: &ModelConfig,
    params: &ModelParams,
    vocab: &Vocab,
    inputs: SampleInputs<'_>,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let (pass, _) = forward_graph(&mut g, &b, cfg, vocab, inputs.prompt_only())?;
    let mut session = DecodeSession::from_pass(&g, &pass, params, &cfg.decoder, cfg.rms_eps);
    drop(b);
    greedy_decode(&mut session, vocab.eos(), max_new)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionPlan;
    use crate::synthdata::{gen_sample, DataConfig, TaskLevel};

    #[test]
    fn every_plan_runs_and_zero_mergers_match_base() {
        let vocab = Vocab::toy();
        let spec = DataConfig::toy().render_spec(4, 2).unwrap();
        let sample = gen_sample(3, TaskLevel::Low, &spec, &vocab).unwrap();
        let base_cfg = ModelConfig {
            fusion: FusionPlan::none(),
            ..ModelConfig::toy(vocab.len())
        };
        let params = ModelParams::init(&ModelConfig::toy(vocab.len()), 1).unwrap();
        let inputs = SampleInputs::from_sample(&sample);
        let base = sample_logits(&base_cfg, &params, &vocab, inputs).unwrap();
        for (mode, taps, layers) in [
            (FusionMode::Stack, vec![3, 5, 7], vec![0, 1, 2]),
            (FusionMode::StackReverse, vec![3, 5, 7], vec![0, 1, 2]),
            (FusionMode::GvfSingle, vec![7], vec![]),
            (FusionMode::GvfMulti, vec![3, 5, 7], vec![]),
        ] {
            let cfg = ModelConfig {
                fusion: FusionPlan::new(mode, &taps, &layers).unwrap(),
                ..base_cfg.clone()
            };
            let logits = sample_logits(&cfg, &params, &vocab, inputs).unwrap();
            assert!(logits.bit_eq(&base), "{mode:?}");
        }
        let loss = sample_loss(&base_cfg, &params, &vocab, inputs).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let out = predict(&base_cfg, &params, &vocab, inputs, 2).unwrap();
        assert!(!out.is_empty() && out.len() <= 2);
    }
}
