//! Warmup + cosine schedule, AdamW with freeze groups, the batched training
//! step, the sample-stream trainer, and SSTK checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::{next_token_loss_graph, Vocab};
use crate::error::{path_err, Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamGroup};
use crate::numerics::{Graph, Rng, RngState, Tensor};
use crate::pipeline::{forward_graph, SampleInputs};
use crate::synthdata::{gen_sample, QASample, RenderSpec, TaskLevel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub freeze: Vec<ParamGroup>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Steps between checkpoints written by `train`; `None` writes only the final one.
    pub checkpoint_every: Option<usize>,
}

/// Peak learning rate of the full-scale recipe.
pub const REFERENCE_PEAK_LR: f64 = 1e-5;

impl TrainConfig {
    /// Desk-scale defaults: batch 8, 300 steps, 3 % warmup, wd 0.01, frozen
    /// encoders. The peak rate is raised from the full-scale 1e-5 because
    /// the toy model trains from scratch.
    pub fn toy() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_fraction: 0.03,
            weight_decay: 0.01,
            batch_size: 8,
            total_steps: 300,
            seed: 1,
            freeze: vec![ParamGroup::VisionEncoder, ParamGroup::GeometryEncoder],
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("peak_lr must be > 0".into()));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "total_steps and batch_size must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::Config(
                "beta1, beta2 in [0, 1) and adam_eps > 0 required".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config(
                "weight_decay ≥ 0 and grad_clip > 0 required".into(),
            ));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.freeze.contains(&group)
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }
}

/// Linear warmup to `peak` over `W = round(f·total)` steps, then cosine decay to 0.
pub fn lr_at_step(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if cfg.total_steps == 0 {
        return Err(Error::Config("total_steps must be ≥ 1".into()));
    }
    if t > cfg.total_steps {
        return Err(Error::Config(format!(
            "step {t} beyond total {}",
            cfg.total_steps
        )));
    }
    let w = cfg.warmup_steps();
    if t < w {
        return Ok(cfg.peak_lr * t as f64 / w as f64);
    }
    let span = cfg.total_steps - w;
    if span == 0 {
        return Ok(cfg.peak_lr);
    }
    let progress = (t - w) as f64 / span as f64;
    Ok((cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0))
}

/// First and second moments per parameter, aligned with the parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Weight decay applies to matrices only, never to gains or biases.
fn decays(t: &Tensor) -> bool {
    t.shape().len() >= 2
}

/// Mean-loss gradients over a batch, in parameter order. Frozen groups and
/// parameters off the loss path get `None`.
pub fn batch_gradients(
    batch: &[QASample],
    params: &ModelParams,
    model: &ModelConfig,
    train: &TrainConfig,
    vocab: &Vocab,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut acc: Vec<Option<Tensor>> = vec![None; params.len()];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let mut g = Graph::new();
        let b = params.bind(&mut g, |grp| !train.is_frozen(grp));
        let (pass, layout) =
            forward_graph(&mut g, &b, model, vocab, SampleInputs::from_sample(sample))?;
        let loss = next_token_loss_graph(&mut g, pass.logits, &layout)?;
        total += g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        for (slot, (name, p)) in acc.iter_mut().zip(params.iter()) {
            if train.is_frozen(p.group) {
                continue;
            }
            if let Some(gr) = grads.get(b.var(name)?) {
                match slot {
                    Some(a) => a
                        .data_mut()
                        .iter_mut()
                        .zip(gr.data())
                        .for_each(|(x, y)| *x += y * scale),
                    None => {
                        let mut t = gr;
                        t.data_mut().iter_mut().for_each(|x| *x *= scale);
                        *slot = Some(t);
                    }
                }
            }
        }
    }
    Ok((total * scale, acc))
}

/// One AdamW update at schedule step `opt.step`; returns the batch mean loss.
pub fn train_step(
    batch: &[QASample],
    params: &mut ModelParams,
    opt: &mut AdamState,
    model: &ModelConfig,
    train: &TrainConfig,
    vocab: &Vocab,
) -> Result<f64> {
    let step = opt.step as usize;
    let (loss, mut grads) = batch_gradients(batch, params, model, train, vocab)?;
    if !loss.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("non-finite loss {loss}"),
        });
    }
    if let Some(clip) = train.grad_clip {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = clip / norm;
            grads
                .iter_mut()
                .flatten()
                .for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= s));
        }
    }
    let lr = lr_at_step(step, train)?;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - train.beta1.powi(t);
    let bc2 = 1.0 - train.beta2.powi(t);
    for (((_, p), grad), (m, v)) in params
        .iter_mut()
        .zip(&grads)
        .zip(opt.m.iter_mut().zip(opt.v.iter_mut()))
    {
        let Some(grad) = grad else { continue };
        if train.is_frozen(p.group) {
            continue;
        }
        let wd = if decays(&p.value) {
            train.weight_decay
        } else {
            0.0
        };
        let data = p.value.data_mut();
        for i in 0..data.len() {
            let gi = grad.data()[i];
            let mi = &mut m.data_mut()[i];
            *mi = train.beta1 * *mi + (1.0 - train.beta1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = train.beta2 * *vi + (1.0 - train.beta2) * gi * gi;
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            data[i] -= lr * wd * data[i];
            data[i] -= lr * mhat / (vhat.sqrt() + train.adam_eps);
        }
    }
    Ok(loss)
}

/// Seed of the `index`-th training sample of a run.
pub fn training_sample_seed(run_seed: u64, index: u64) -> u64 {
    run_seed.wrapping_mul(1_000_000).wrapping_add(index)
}

const STREAM_TRAIN: u64 = 0x7a1e;

/// Model, optimizer and sample-stream position of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub spec: RenderSpec,
    pub params: ModelParams,
    pub opt: AdamState,
    /// Draws the task level of each training sample.
    pub rng: Rng,
    pub step: usize,
    /// Batch mean loss of every step taken by this trainer.
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::toy();
        let params = ModelParams::init(&config.model, config.train.seed)?;
        Ok(Self {
            spec: config
                .data
                .render_spec(config.model.patch(), config.model.merge())?,
            opt: AdamState::new(&params),
            rng: Rng::new(config.train.seed, STREAM_TRAIN),
            params,
            vocab,
            config: config.clone(),
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn next_batch(&mut self) -> Result<Vec<QASample>> {
        let b = self.config.train.batch_size;
        let first = (self.step * b) as u64;
        (0..b as u64)
            .map(|i| {
                let level = if self.rng.bernoulli(self.config.data.low_fraction) {
                    TaskLevel::Low
                } else {
                    TaskLevel::High
                };
                let seed = training_sample_seed(self.config.train.seed, first + i);
                gen_sample(seed, level, &self.spec, &self.vocab)
            })
            .collect()
    }

    pub fn train_one(&mut self) -> Result<f64> {
        if self.step >= self.config.train.total_steps {
            return Err(Error::Training {
                step: self.step,
                message: format!("schedule ends at {}", self.config.train.total_steps),
            });
        }
        let batch = self.next_batch()?;
        let loss = train_step(
            &batch,
            &mut self.params,
            &mut self.opt,
            &self.config.model,
            &self.config.train,
            &self.vocab,
        )
        .map_err(|e| match e {
            Error::Training { message, .. } => Error::Training {
                step: self.step,
                message,
            },
            other => other,
        })?;
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn train(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.train_one()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.state(),
            params: self.params.clone(),
            opt: self.opt.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(&ck.config)?;
        t.params = ck.params;
        t.opt = ck.opt;
        t.rng = Rng::from_state(ck.rng);
        t.step = ck.step;
        Ok(t)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSTK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub rng: RngState,
    pub params: ModelParams,
    pub opt: AdamState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    kind: ArrayKind,
    shape: Vec<usize>,
    group: ParamGroup,
    frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    step: usize,
    adam_step: u64,
    rng: RngState,
    config: RunConfig,
    arrays: Vec<ArrayEntry>,
    payload_bytes: u64,
    payload_fnv1a64: u64,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (kind, tensors) in [
        (
            ArrayKind::Param,
            ck.params.iter().map(|(_, p)| &p.value).collect::<Vec<_>>(),
        ),
        (ArrayKind::AdamM, ck.opt.m.iter().collect()),
        (ArrayKind::AdamV, ck.opt.v.iter().collect()),
    ] {
        if tensors.len() != ck.params.len() {
            return Err(Error::Checksum(
                "optimizer state does not match parameters".into(),
            ));
        }
        for ((name, p), t) in ck.params.iter().zip(tensors) {
            arrays.push(ArrayEntry {
                name: name.clone(),
                kind,
                shape: t.shape().to_vec(),
                group: p.group,
                frozen: ck.config.train.is_frozen(p.group),
            });
            payload.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
        }
    }
    let checksum = fnv1a64(&payload);
    let manifest = Manifest {
        step: ck.step,
        adam_step: ck.opt.step,
        rng: ck.rng,
        config: ck.config.clone(),
        arrays,
        payload_bytes: payload.len() as u64,
        payload_fnv1a64: checksum,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checksum(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing SSTK header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < mlen {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| bad(&format!("manifest: {e}")))?;
    let rest = &body[mlen..];
    let plen = manifest.payload_bytes as usize;
    if rest.len() != plen + 8 {
        return Err(bad(&format!(
            "payload is {} bytes, manifest says {plen} + 8",
            rest.len()
        )));
    }
    let (payload, trailer) = rest.split_at(plen);
    let sum = fnv1a64(payload);
    let trailing = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if sum != trailing || sum != manifest.payload_fnv1a64 {
        return Err(bad("payload checksum mismatch"));
    }
    let expected: usize = manifest
        .arrays
        .iter()
        .map(|a| a.shape.iter().product::<usize>() * 8)
        .sum();
    if expected != plen {
        return Err(bad("array sizes do not add up to the payload"));
    }

    let mut params = ModelParams::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut offset = 0;
    for a in &manifest.arrays {
        let n: usize = a.shape.iter().product();
        let data: Vec<f64> = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        let t = Tensor::new(a.shape.clone(), data).map_err(|e| bad(&e.to_string()))?;
        match a.kind {
            ArrayKind::Param => params.insert(a.name.clone(), t, a.group),
            ArrayKind::AdamM => m.push(t),
            ArrayKind::AdamV => v.push(t),
        }
    }
    if m.len() != params.len() || v.len() != params.len() {
        return Err(bad("optimizer moments do not match parameters"));
    }
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        rng: manifest.rng,
        params,
        opt: AdamState {
            step: manifest.adam_step,
            m,
            v,
        },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(ck)?).map_err(|e| path_err(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path).map_err(|e| path_err(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig {
            peak_lr: 1e-5,
            total_steps: total,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(1000);
        let w = c.warmup_steps();
        assert_eq!(w, 30);
        assert_eq!(lr_at_step(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at_step(w, &c).unwrap(), 1e-5);
        let mid = lr_at_step(w + (1000 - w) / 2, &c).unwrap();
        assert!((mid - 5e-6).abs() < 1e-18);
        assert!(lr_at_step(1000, &c).unwrap().abs() < 1e-20);
        assert!(lr_at_step(1001, &c).is_err());
        assert!(lr_at_step(0, &cfg(0)).is_err());
        assert!((lr_at_step(15, &c).unwrap() - 0.5e-5).abs() < 1e-20);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let c = cfg(300);
        let w = c.warmup_steps();
        for t in w..300 {
            assert!(lr_at_step(t + 1, &c).unwrap() <= lr_at_step(t, &c).unwrap());
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::toy().validate().is_ok());
        assert!(TrainConfig {
            warmup_fraction: 1.0,
            ..TrainConfig::toy()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            peak_lr: 0.0,
            ..TrainConfig::toy()
        }
        .validate()
        .is_err());
    }
}
