//! Toy causal language decoder over `[vision | prompt | answer]` sequences:
//! prefill-time geometry fusion, next-token loss, and greedy decoding with a
//! key/value cache.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{scatter_add_fusion_graph, FusionPlan, InjectSite, VisionMask};
use crate::model::{transformer_block, Attend, Bound, DecoderConfig, ModelParams};
use crate::numerics::{Graph, Tensor, Var};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const VIS: &str = "<vis>";

/// Appearance class names, indexed by class id.
pub const CLASS_NAMES: [&str; 6] = ["amber", "cobalt", "ivory", "jade", "onyx", "rust"];

const KEYWORDS: [&str; 10] = [
    "which", "point", "is", "closer", "object", "nearer", "to", "or", "camera", "?",
];

/// Dense token table: specials, option letters, digits, decimal point,
/// task keywords, appearance classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn toy() -> Self {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, VIS].iter().map(|s| s.to_string()).collect();
        tokens.extend(["A", "B", "C", "D"].iter().map(|s| s.to_string()));
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.push(".".into());
        tokens.extend(KEYWORDS.iter().map(|s| s.to_string()));
        tokens.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| Error::Sequence(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or_else(|| {
            Error::Sequence(format!("token id {id} outside vocab of {}", self.len()))
        })
    }

    pub fn encode(&self, tokens: &[&str]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn vis(&self) -> usize {
        3
    }
}

/// Positions of a `[vision | prompt | answer]` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub vision_rows: usize,
    pub prompt_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(
        vision_rows: usize,
        prompt_ids: &[usize],
        answer_ids: &[usize],
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<Self> {
        let total = vision_rows + prompt_ids.len() + answer_ids.len();
        if total == 0 {
            return Err(Error::Sequence("empty sequence".into()));
        }
        if total > max_len {
            return Err(Error::Sequence(format!(
                "sequence of {total} exceeds max length {max_len}"
            )));
        }
        if let Some(&bad) = prompt_ids
            .iter()
            .chain(answer_ids)
            .find(|&&i| i >= vocab.len())
        {
            return Err(Error::Sequence(format!(
                "token id {bad} outside vocab of {}",
                vocab.len()
            )));
        }
        if prompt_ids
            .iter()
            .chain(answer_ids)
            .any(|&i| i == vocab.vis())
        {
            return Err(Error::Sequence(
                "vision placeholder must be expanded before building".into(),
            ));
        }
        Ok(Self {
            vision_rows,
            prompt_ids: prompt_ids.to_vec(),
            answer_ids: answer_ids.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.vision_rows + self.prompt_ids.len() + self.answer_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_ids(&self) -> Vec<usize> {
        self.prompt_ids
            .iter()
            .chain(&self.answer_ids)
            .copied()
            .collect()
    }

    pub fn vision_mask(&self) -> VisionMask {
        VisionMask::prefix(self.vision_rows, self.len())
    }

    pub fn loss_mask(&self) -> Vec<bool> {
        let start = self.vision_rows + self.prompt_ids.len();
        (0..self.len()).map(|i| i >= start).collect()
    }

    pub fn position_ids(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// `(logit row, target)` pairs: answer token `i` is predicted from row `i − 1`.
    pub fn loss_targets(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let start = self.vision_rows + self.prompt_ids.len();
        if self.answer_ids.is_empty() {
            return Err(Error::Loss("loss mask is empty".into()));
        }
        if start == 0 {
            return Err(Error::Loss(
                "first answer token has no preceding state".into(),
            ));
        }
        let rows = (0..self.answer_ids.len()).map(|k| start + k - 1).collect();
        Ok((rows, self.answer_ids.clone()))
    }
}

/// Embedded decoder input plus its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSequence {
    pub rows: Tensor,
    pub layout: SequenceLayout,
}

impl MultimodalSequence {
    pub fn vision_mask(&self) -> VisionMask {
        self.layout.vision_mask()
    }

    pub fn loss_mask(&self) -> Vec<bool> {
        self.layout.loss_mask()
    }
}

/// `H₀ = [Ṽ; T] + positions` on the tape.
pub fn embed_sequence_graph(
    g: &mut Graph<'_>,
    b: &Bound,
    vision: Option<Var>,
    layout: &SequenceLayout,
) -> Result<Var> {
    let vis_rows = vision.map_or(0, |v| g.value(v).rows());
    if vis_rows != layout.vision_rows {
        return Err(Error::Sequence(format!(
            "layout expects {} vision rows, got {vis_rows}",
            layout.vision_rows
        )));
    }
    let text = layout.text_ids();
    let mut parts = Vec::with_capacity(2);
    if let Some(v) = vision {
        parts.push(v);
    }
    if !text.is_empty() {
        parts.push(g.gather_rows(b.var("decoder.tok_embed")?, &text)?);
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    let pos = g.gather_rows(b.var("decoder.pos_embed")?, &layout.position_ids())?;
    g.add(x, pos)
}

pub fn build_sequence(
    merged_vision: Option<&Tensor>,
    prompt_ids: &[usize],
    answer_ids: &[usize],
    vocab: &Vocab,
    cfg: &DecoderConfig,
    params: &ModelParams,
) -> Result<MultimodalSequence> {
    let layout = SequenceLayout::new(
        merged_vision.map_or(0, |v| v.rows()),
        prompt_ids,
        answer_ids,
        vocab,
        cfg.max_seq_len,
    )?;
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let v = merged_vision.map(|v| g.constant(v.clone()));
    let rows = embed_sequence_graph(&mut g, &b, v, &layout)?;
    Ok(MultimodalSequence {
        rows: g.value(rows).clone(),
        layout,
    })
}

/// Logits plus the per-block keys and values of a prefill pass.
pub struct DecoderPass {
    pub logits: Var,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

fn inject(
    g: &mut Graph<'_>,
    h: Var,
    plan: &FusionPlan,
    layer: usize,
    geo: &BTreeMap<usize, Var>,
    mask: &VisionMask,
) -> Result<Var> {
    let mut h = h;
    for tap in plan.injections_at(layer) {
        let src = *geo
            .get(&tap)
            .ok_or_else(|| Error::Fusion(format!("no projected geometry for tap {tap}")))?;
        h = scatter_add_fusion_graph(g, h, src, mask)?;
    }
    Ok(h)
}

/// Causal decoder over `h0` with geometry added to the vision rows of the
/// layers named in `plan`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward_graph(
    g: &mut Graph<'_>,
    b: &Bound,
    cfg: &DecoderConfig,
    eps: f64,
    h0: Var,
    mask: &VisionMask,
    plan: &FusionPlan,
    site: InjectSite,
    geo: &BTreeMap<usize, Var>,
) -> Result<DecoderPass> {
    if let Some(&(_, bad)) = plan.pairs.iter().find(|p| p.1 >= cfg.depth) {
        return Err(Error::Config(format!(
            "decoder layer {bad} ≥ depth {}",
            cfg.depth
        )));
    }
    let mut h = h0;
    let mut keys = Vec::with_capacity(cfg.depth);
    let mut values = Vec::with_capacity(cfg.depth);
    for j in 0..cfg.depth {
        if site == InjectSite::PreBlock {
            h = inject(g, h, plan, j, geo, mask)?;
        }
        let out = transformer_block(
            g,
            b,
            &format!("decoder.block{j}"),
            h,
            cfg.heads,
            eps,
            Attend::Causal { past: None },
        )?;
        h = out.hidden;
        keys.push(out.keys);
        values.push(out.values);
        if site == InjectSite::PostBlock {
            h = inject(g, h, plan, j, geo, mask)?;
        }
    }
    let h = g.rms_norm(h, b.var("decoder.final_norm")?, eps)?;
    let logits = g.linear(h, b.var("decoder.head")?, None)?;
    Ok(DecoderPass {
        logits,
        keys,
        values,
    })
}

/// Eager prefill: `N_tot × V` logits.
pub fn forward_with_fusion(
    seq: &MultimodalSequence,
    plan: &FusionPlan,
    site: InjectSite,
    geo: &BTreeMap<usize, Tensor>,
    cfg: &DecoderConfig,
    eps: f64,
    params: &ModelParams,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, |_| false);
    let h0 = g.constant(seq.rows.clone());
    let geo_vars = geo
        .iter()
        .map(|(&t, x)| (t, g.constant(x.clone())))
        .collect();
    let pass = decoder_forward_graph(
        &mut g,
        &b,
        cfg,
        eps,
        h0,
        &seq.vision_mask(),
        plan,
        site,
        &geo_vars,
    )?;
    Ok(g.value(pass.logits).clone())
}

pub fn next_token_loss_graph(
    g: &mut Graph<'_>,
    logits: Var,
    layout: &SequenceLayout,
) -> Result<Var> {
    let (rows, targets) = layout.loss_targets()?;
    g.cross_entropy(logits, &rows, &targets)
}

/// Mean over answer tokens of `−log softmax(logits[i − 1])[target_i]`.
pub fn next_token_loss(logits: &Tensor, seq: &MultimodalSequence) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = next_token_loss_graph(&mut g, l, &seq.layout)?;
    Ok(g.value(loss).data()[0])
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Incremental decoding state owning its key/value cache.
pub struct DecodeSession<'p> {
    params: &'p ModelParams,
    cfg: DecoderConfig,
    eps: f64,
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    len: usize,
    last_logits: Vec<f64>,
}

impl<'p> DecodeSession<'p> {
    /// Run prefill on the prompt sequence (fusion applies here only).
    pub fn prefill(
        seq: &MultimodalSequence,
        plan: &FusionPlan,
        site: InjectSite,
        geo: &BTreeMap<usize, Tensor>,
        cfg: &DecoderConfig,
        eps: f64,
        params: &'p ModelParams,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, |_| false);
        let h0 = g.constant(seq.rows.clone());
        let geo_vars = geo
            .iter()
            .map(|(&t, x)| (t, g.constant(x.clone())))
            .collect();
        let pass = decoder_forward_graph(
            &mut g,
            &b,
            cfg,
            eps,
            h0,
            &seq.vision_mask(),
            plan,
            site,
            &geo_vars,
        )?;
        Ok(Self::from_pass(&g, &pass, params, cfg, eps))
    }

    pub(crate) fn from_pass(
        g: &Graph<'_>,
        pass: &DecoderPass,
        params: &'p ModelParams,
        cfg: &DecoderConfig,
        eps: f64,
    ) -> Self {
        let logits = g.value(pass.logits);
        let n = logits.rows();
        Self {
            params,
            cfg: cfg.clone(),
            eps,
            keys: pass.keys.iter().map(|&k| g.value(k).clone()).collect(),
            values: pass.values.iter().map(|&v| g.value(v).clone()).collect(),
            len: n,
            last_logits: logits.row(n - 1).to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits predicting the next token.
    pub fn last_logits(&self) -> &[f64] {
        &self.last_logits
    }

    /// Append one token and return its logits row.
    pub fn step(&mut self, token: usize) -> Result<&[f64]> {
        if self.len >= self.cfg.max_seq_len {
            return Err(Error::Sequence(format!(
                "decode exceeds max length {}",
                self.cfg.max_seq_len
            )));
        }
        if token >= self.cfg.vocab_size {
            return Err(Error::Sequence(format!("token id {token} outside vocab")));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, |_| false);
        let tok = g.gather_rows(b.var("decoder.tok_embed")?, &[token])?;
        let pos = g.gather_rows(b.var("decoder.pos_embed")?, &[self.len])?;
        let mut h = g.add(tok, pos)?;
        let mut new_k = Vec::with_capacity(self.cfg.depth);
        let mut new_v = Vec::with_capacity(self.cfg.depth);
        for j in 0..self.cfg.depth {
            let pk = g.leaf_ref(&self.keys[j], false);
            let pv = g.leaf_ref(&self.values[j], false);
            let out = transformer_block(
                &mut g,
                &b,
                &format!("decoder.block{j}"),
                h,
                self.cfg.heads,
                self.eps,
                Attend::Causal {
                    past: Some((pk, pv)),
                },
            )?;
            h = out.hidden;
            new_k.push(g.value(out.keys).clone());
            new_v.push(g.value(out.values).clone());
        }
        let h = g.rms_norm(h, b.var("decoder.final_norm")?, self.eps)?;
        let logits = g.linear(h, b.var("decoder.head")?, None)?;
        self.last_logits = g.value(logits).row(0).to_vec();
        drop(g);
        self.keys = new_k;
        self.values = new_v;
        self.len += 1;
        Ok(&self.last_logits)
    }
}

/// Greedy generation after a fused prefill; stops at `eos` or `max_new`.
pub fn greedy_decode(
    session: &mut DecodeSession<'_>,
    eos: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    if max_new == 0 {
        return Err(Error::Argument("max_new must be ≥ 1".into()));
    }
    let mut out = Vec::new();
    let mut next = argmax(session.last_logits());
    loop {
        out.push(next);
        if next == eos || out.len() >= max_new {
            break;
        }
        next = argmax(session.step(next)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{grad_check_coords, Rng};

    fn setup() -> (ModelConfig, ModelParams, Vocab) {
        let vocab = Vocab::toy();
        let cfg = ModelConfig::toy(vocab.len());
        let params = ModelParams::init(&cfg, 11).unwrap();
        (cfg, params, vocab)
    }

    fn seq(
        cfg: &ModelConfig,
        params: &ModelParams,
        vocab: &Vocab,
        seed: u64,
        prompt: usize,
        answer: usize,
    ) -> MultimodalSequence {
        let mut rng = Rng::new(seed, 0);
        let vision = rng.normal_tensor(&[8, cfg.decoder.dim], 1.0);
        let p: Vec<usize> = (0..prompt).map(|i| 4 + (i + seed as usize) % 20).collect();
        let a: Vec<usize> = (0..answer).map(|i| 4 + (3 * i + 1) % 20).collect();
        build_sequence(Some(&vision), &p, &a, vocab, &cfg.decoder, params).unwrap()
    }

    #[test]
    fn vocab_is_dense_and_small() {
        let v = Vocab::toy();
        assert!(v.len() <= 40);
        assert_eq!(v.id(PAD).unwrap(), v.pad());
        assert_eq!(v.id(BOS).unwrap(), v.bos());
        assert_eq!(v.id(EOS).unwrap(), v.eos());
        assert_eq!(v.id(VIS).unwrap(), v.vis());
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()).unwrap(), i);
        }
        assert!(v.id("zebra").is_err());
    }

    #[test]
    fn layout_arithmetic() {
        let v = Vocab::toy();
        let l = SequenceLayout::new(8, &[4, 5, 6, 7, 8], &[9, 10, 11], &v, 64).unwrap();
        assert_eq!(l.len(), 16);
        assert_eq!(l.vision_mask().ones(), 8);
        assert_eq!(l.loss_mask().iter().filter(|&&b| b).count(), 3);
        assert_eq!(l.loss_targets().unwrap().0, vec![12, 13, 14]);

        let e = SequenceLayout::new(8, &[4], &[], &v, 64).unwrap();
        assert!(e.loss_mask().iter().all(|&b| !b));
        assert!(matches!(e.loss_targets(), Err(Error::Loss(_))));

        assert!(matches!(
            SequenceLayout::new(8, &[4, v.vis()], &[], &v, 64),
            Err(Error::Sequence(_))
        ));
        assert!(matches!(
            SequenceLayout::new(60, &[4; 5], &[], &v, 64),
            Err(Error::Sequence(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let v = Vocab::toy();
        let layout = SequenceLayout::new(0, &[4], &[5, 6], &v, 64).unwrap();
        let s = MultimodalSequence {
            rows: Tensor::zeros(&[3, 4]),
            layout,
        };
        let uniform = Tensor::zeros(&[3, 32]);
        let l = next_token_loss(&uniform, &s).unwrap();
        assert!((l - 32f64.ln()).abs() < 1e-12);

        let mut sat = Tensor::zeros(&[3, 32]);
        sat.row_mut(0)[5] = 1000.0;
        sat.row_mut(1)[6] = 1000.0;
        assert!(next_token_loss(&sat, &s).unwrap() < 1e-6);

        // hand oracle: row 0 picks id 5 with logits (2 at 5, 0 elsewhere); row 1 uniform
        let mut two = Tensor::zeros(&[3, 32]);
        two.row_mut(0)[5] = 2.0;
        let a = -(2f64.exp() / (2f64.exp() + 31.0)).ln();
        let b = 32f64.ln();
        assert!((next_token_loss(&two, &s).unwrap() - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn none_plan_and_zero_mergers_match() {
        let (cfg, params, vocab) = setup();
        let s = seq(&cfg, &params, &vocab, 1, 5, 2);
        let none = forward_with_fusion(
            &s,
            &FusionPlan::none(),
            InjectSite::PreBlock,
            &BTreeMap::new(),
            &cfg.decoder,
            cfg.rms_eps,
            &params,
        )
        .unwrap();
        let zero: BTreeMap<usize, Tensor> = [3, 5, 7]
            .iter()
            .map(|&t| (t, Tensor::zeros(&[8, 64])))
            .collect();
        for site in [InjectSite::PreBlock, InjectSite::PostBlock] {
            let stack = forward_with_fusion(
                &s,
                &cfg.fusion,
                site,
                &zero,
                &cfg.decoder,
                cfg.rms_eps,
                &params,
            )
            .unwrap();
            assert!(stack.bit_eq(&none));
        }
        let missing = forward_with_fusion(
            &s,
            &cfg.fusion,
            InjectSite::PreBlock,
            &BTreeMap::new(),
            &cfg.decoder,
            cfg.rms_eps,
            &params,
        );
        assert!(matches!(missing, Err(Error::Fusion(_))));
    }

    #[test]
    fn fusion_changes_only_later_rows() {
        let (cfg, params, vocab) = setup();
        let mut rng = Rng::new(3, 0);
        // prompt first, then vision: rows before the first masked row must not move
        let layout = SequenceLayout::new(0, &[4, 5, 6], &[], &vocab, 64).unwrap();
        let mut rows = build_sequence(None, &[4, 5, 6], &[], &vocab, &cfg.decoder, &params)
            .unwrap()
            .rows;
        rows = Tensor::concat_rows(&[&rows, &rng.normal_tensor(&[4, 64], 1.0)]).unwrap();
        let mask = VisionMask::new(vec![false, false, false, true, true, true, true]);
        let s = MultimodalSequence {
            rows,
            layout: SequenceLayout {
                vision_rows: 0,
                ..layout
            },
        };
        let run = |geo: &BTreeMap<usize, Tensor>| {
            let mut g = Graph::new();
            let b = params.bind(&mut g, |_| false);
            let h0 = g.constant(s.rows.clone());
            let gv = geo
                .iter()
                .map(|(&t, x)| (t, g.constant(x.clone())))
                .collect();
            let p = decoder_forward_graph(
                &mut g,
                &b,
                &cfg.decoder,
                cfg.rms_eps,
                h0,
                &mask,
                &cfg.fusion,
                InjectSite::PreBlock,
                &gv,
            )
            .unwrap();
            g.value(p.logits).clone()
        };
        let base: BTreeMap<usize, Tensor> = [3, 5, 7]
            .iter()
            .map(|&t| (t, rng.normal_tensor(&[4, 64], 0.1)))
            .collect();
        let mut bumped = base.clone();
        bumped.get_mut(&3).unwrap().row_mut(0)[0] += 1.0;
        let a = run(&base);
        let c = run(&bumped);
        for r in 0..3 {
            assert_eq!(a.row(r), c.row(r));
        }
        assert!(a.row(3) != c.row(3));
    }

    #[test]
    fn causality_under_perturbation() {
        let (cfg, params, vocab) = setup();
        let plan = FusionPlan::none();
        for seed in 0..5 {
            let s = seq(&cfg, &params, &vocab, seed, 6, 2);
            let base = forward_with_fusion(
                &s,
                &plan,
                InjectSite::PreBlock,
                &BTreeMap::new(),
                &cfg.decoder,
                cfg.rms_eps,
                &params,
            )
            .unwrap();
            let mut rng = Rng::new(100 + seed, 0);
            for _ in 0..3 {
                let j = rng.int_range(1, s.rows.rows() - 1);
                let mut t = s.clone();
                t.rows.row_mut(j).iter_mut().for_each(|v| *v += 0.7);
                let out = forward_with_fusion(
                    &t,
                    &plan,
                    InjectSite::PreBlock,
                    &BTreeMap::new(),
                    &cfg.decoder,
                    cfg.rms_eps,
                    &params,
                )
                .unwrap();
                for i in 0..j {
                    assert_eq!(out.row(i), base.row(i), "seed {seed} j {j} i {i}");
                }
                assert!(out.row(j) != base.row(j));
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (cfg, mut params, vocab) = setup();
        let mut rng = Rng::new(5, 0);
        for tap in [3, 5, 7] {
            let w2 = params.get_mut(&format!("geo_merger.{tap}.w2")).unwrap();
            *w2 = rng.normal_tensor(w2.shape(), 0.05);
        }
        let s = seq(&cfg, &params, &vocab, 2, 4, 2);
        let geo: BTreeMap<usize, Tensor> = [3, 5, 7]
            .iter()
            .map(|&t| (t, rng.normal_tensor(&[8, 64], 0.5)))
            .collect();
        let name = "decoder.block1.wq";
        let x = params.get(name).unwrap().clone();
        let coords: Vec<usize> = (0..8).map(|i| i * 97 % x.numel()).collect();
        let err = grad_check_coords(
            |g, xv| {
                let mut b = params.bind(g, |_| false);
                b.set(name, xv);
                let h0 = g.constant(s.rows.clone());
                let gv = geo
                    .iter()
                    .map(|(&t, x)| (t, g.constant(x.clone())))
                    .collect();
                let pass = decoder_forward_graph(
                    g,
                    &b,
                    &cfg.decoder,
                    cfg.rms_eps,
                    h0,
                    &s.vision_mask(),
                    &cfg.fusion,
                    InjectSite::PreBlock,
                    &gv,
                )?;
                next_token_loss_graph(g, pass.logits, &s.layout)
            },
            &x,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn greedy_matches_full_reforward() {
        let (cfg, params, vocab) = setup();
        let s = seq(&cfg, &params, &vocab, 7, 4, 0);
        let geo: BTreeMap<usize, Tensor> = {
            let mut rng = Rng::new(8, 0);
            [3, 5, 7]
                .iter()
                .map(|&t| (t, rng.normal_tensor(&[8, 64], 0.3)))
                .collect()
        };
        let mut sess = DecodeSession::prefill(
            &s,
            &cfg.fusion,
            InjectSite::PreBlock,
            &geo,
            &cfg.decoder,
            cfg.rms_eps,
            &params,
        )
        .unwrap();
        let never = usize::MAX;
        let out = greedy_decode(&mut sess, never, 5).unwrap();
        assert_eq!(out.len(), 5);

        let mut ids = s.layout.prompt_ids.clone();
        let mut vision = s.rows.slice_rows(0, 8).unwrap();
        // strip positions back off the vision rows
        let pos = params.get("decoder.pos_embed").unwrap();
        for r in 0..8 {
            for (x, p) in vision.row_mut(r).iter_mut().zip(pos.row(r)) {
                *x -= p;
            }
        }
        let mut oracle = Vec::new();
        for _ in 0..5 {
            let full =
                build_sequence(Some(&vision), &ids, &[], &vocab, &cfg.decoder, &params).unwrap();
            let logits = forward_with_fusion(
                &full,
                &cfg.fusion,
                InjectSite::PreBlock,
                &geo,
                &cfg.decoder,
                cfg.rms_eps,
                &params,
            )
            .unwrap();
            let t = argmax(logits.row(logits.rows() - 1));
            oracle.push(t);
            ids.push(t);
        }
        assert_eq!(out, oracle);

        let mut again = DecodeSession::prefill(
            &s,
            &cfg.fusion,
            InjectSite::PreBlock,
            &geo,
            &cfg.decoder,
            cfg.rms_eps,
            &params,
        )
        .unwrap();
        assert_eq!(greedy_decode(&mut again, never, 5).unwrap(), out);
    }

    #[test]
    fn greedy_stops_at_eos() {
        let (cfg, mut params, vocab) = setup();
        // blocks contribute nothing, so the final state is embedding + position;
        // a large positive position coordinate 0 makes eos the strict argmax
        for j in 0..cfg.decoder.depth {
            for w in ["wo", "w2"] {
                params
                    .get_mut(&format!("decoder.block{j}.{w}"))
                    .unwrap()
                    .data_mut()
                    .fill(0.0);
            }
        }
        let pos = params.get_mut("decoder.pos_embed").unwrap();
        for r in 0..pos.rows() {
            pos.row_mut(r)[0] = 10.0;
        }
        params
            .get_mut("decoder.tok_embed")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let gain = params.get_mut("decoder.final_norm").unwrap();
        gain.data_mut().fill(0.0);
        gain.data_mut()[0] = 1.0;
        let head = params.get_mut("decoder.head").unwrap();
        head.data_mut().fill(0.0);
        head.row_mut(vocab.eos())[0] = 1.0;

        let s = seq(&cfg, &params, &vocab, 1, 3, 0);
        let mut sess = DecodeSession::prefill(
            &s,
            &FusionPlan::none(),
            InjectSite::PreBlock,
            &BTreeMap::new(),
            &cfg.decoder,
            cfg.rms_eps,
            &params,
        )
        .unwrap();
        assert_eq!(
            greedy_decode(&mut sess, vocab.eos(), 4).unwrap(),
            vec![vocab.eos()]
        );
        assert!(greedy_decode(&mut sess, vocab.eos(), 0).is_err());
    }

    #[test]
    fn argmax_ties_and_shift() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        let row = [0.3, -1.0, 2.5, 2.4];
        let shifted: Vec<f64> = row.iter().map(|v| v + 17.0).collect();
        assert_eq!(argmax(&row), argmax(&shifted));
    }

    #[test]
    fn post_prefill_steps_ignore_geometry() {
        let (cfg, params, vocab) = setup();
        let s = seq(&cfg, &params, &vocab, 4, 3, 0);
        let mut rng = Rng::new(1, 0);
        let geo: BTreeMap<usize, Tensor> = [3, 5, 7]
            .iter()
            .map(|&t| (t, rng.normal_tensor(&[8, 64], 0.3)))
            .collect();
        let mut a = DecodeSession::prefill(
            &s,
            &cfg.fusion,
            InjectSite::PreBlock,
            &geo,
            &cfg.decoder,
            cfg.rms_eps,
            &params,
        )
        .unwrap();
        let mut b = DecodeSession::prefill(
            &s,
            &cfg.fusion,
            InjectSite::PreBlock,
            &geo,
            &cfg.decoder,
            cfg.rms_eps,
            &params,
        )
        .unwrap();
        for t in [5, 9, 12] {
            let x = a.step(t).unwrap().to_vec();
            let y = b.step(t).unwrap().to_vec();
            assert_eq!(x, y);
        }
    }
}
