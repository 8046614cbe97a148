//! Token model built from stacked blocks, its training step and checkpoints.
//!
//! Layout: embedding, pre-norm residual blocks, final RMSNorm, linear head.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Var};
use crate::block::{block_forward_tape, slot_shape, BlockParams, BoundBlock, Mamba3BlockConfig, Slot};
use crate::error::{Error, Result};
use crate::rng::{rand_normal, Rng};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"M3CKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// One label per sequence, read at the final position.
    Last,
    /// Next-token labels at every position.
    Every,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub block: Mamba3BlockConfig,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub readout: Readout,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.n_layers == 0 || self.vocab_size == 0 || self.num_classes == 0 {
            return Err(Error::Parameter("layers, vocab and classes must be positive".into()));
        }
        Ok(())
    }
}

/// Equal-length sequences, row-major `[batch, time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub time: usize,
    /// `batch` labels for [`Readout::Last`], `batch·time` for [`Readout::Every`].
    pub targets: Vec<usize>,
    /// Valid prefix per sequence for [`Readout::Last`]; the label is read at
    /// the last valid step. Causality keeps the padding after it inert.
    pub lengths: Option<Vec<usize>>,
}

impl Batch {
    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let want = match cfg.readout {
            Readout::Last => self.batch,
            Readout::Every => self.batch * self.time,
        };
        if self.batch == 0 || self.time == 0 || self.tokens.len() != self.batch * self.time || self.targets.len() != want {
            return Err(Error::Dimension {
                op: "batch".into(),
                lhs: vec![self.tokens.len(), self.targets.len()],
                rhs: vec![self.batch, self.time],
            });
        }
        if let Some(l) = &self.lengths {
            if l.len() != self.batch || l.iter().any(|&n| n == 0 || n > self.time) {
                return Err(Error::Parameter(format!("sequence lengths {l:?} do not fit time {}", self.time)));
            }
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Parameter(format!("token {t} outside vocab of {}", cfg.vocab_size)));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= cfg.num_classes) {
            return Err(Error::Parameter(format!("label {t} outside {} classes", cfg.num_classes)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    norm: Tensor,
    block: BlockParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    embed: Tensor,
    layers: Vec<Layer>,
    final_norm: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

struct Bound<'t> {
    embed: Var<'t>,
    layers: Vec<(Var<'t>, BoundBlock<'t>)>,
    final_norm: Var<'t>,
    head_w: Var<'t>,
    head_b: Var<'t>,
}

impl Bound<'_> {
    fn leaves(&self) -> Vec<Var<'_>> {
        let mut v = vec![self.embed];
        for (n, b) in &self.layers {
            v.push(*n);
            v.extend(b.leaves());
        }
        v.extend([self.final_norm, self.head_w, self.head_b]);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(config.block.seed, 0x6d6f64656c);
        let d = config.block.d_model;
        let embed = rand_normal(&mut rng, &[config.vocab_size, d], 0.0, 1.0)?;
        let layers = (0..config.n_layers)
            .map(|_| {
                Ok(Layer {
                    norm: Tensor::ones(&[d]),
                    block: BlockParams::init(&config.block, &mut rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let head_w = rand_normal(&mut rng, &[d, config.num_classes], 0.0, 1.0 / (d as f64).sqrt())?;
        Ok(Self {
            embed,
            layers,
            final_norm: Tensor::ones(&[d]),
            head_w,
            head_b: Tensor::zeros(&[config.num_classes]),
            config,
        })
    }

    /// `(name, tensor)` in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("layers.{i}.norm"), &l.norm));
            v.extend(l.block.iter().map(|(s, t)| (format!("layers.{i}.{}", s.name()), t)));
        }
        v.push(("final_norm".into(), &self.final_norm));
        v.push(("head_w".into(), &self.head_w));
        v.push(("head_b".into(), &self.head_b));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embed];
        for l in &mut self.layers {
            v.push(&mut l.norm);
            v.extend(l.block.iter_mut().map(|(_, t)| t));
        }
        v.extend([&mut self.final_norm, &mut self.head_w, &mut self.head_b]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            embed: tape.leaf(self.embed.clone()),
            layers: self.layers.iter().map(|l| (tape.leaf(l.norm.clone()), l.block.bind(tape))).collect(),
            final_norm: tape.leaf(self.final_norm.clone()),
            head_w: tape.leaf(self.head_w.clone()),
            head_b: tape.leaf(self.head_b.clone()),
        }
    }

    fn logits_tape<'t>(
        &self,
        b: &Bound<'t>,
        tokens: &[usize],
        batch: usize,
        time: usize,
        lengths: Option<&[usize]>,
    ) -> Result<Var<'t>> {
        let eps = self.config.block.norm_eps;
        let d = self.config.block.d_model;
        let mut h = b.embed.gather_rows(tokens)?;
        for (norm, blk) in &b.layers {
            let n = h.rms_norm(d, eps)?.mul_suffix(*norm)?;
            let out = block_forward_tape(&self.config.block, blk, n, batch)?.out;
            h = h.add(out)?;
        }
        let h = h.rms_norm(d, eps)?.mul_suffix(b.final_norm)?;
        let h = match self.config.readout {
            Readout::Last => {
                let last = |i: usize| lengths.map_or(time, |l| l[i]) - 1;
                h.gather_rows(&(0..batch).map(|i| i * time + last(i)).collect::<Vec<_>>())?
            }
            Readout::Every => h,
        };
        h.matmul(b.head_w)?.add_suffix(b.head_b)
    }

    /// Logits `[batch, K]` (last readout) or `[batch·time, K]`.
    pub fn logits(&self, tokens: &[usize], batch: usize, time: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let l = self.logits_tape(&bound, tokens, batch, time, None)?;
        let out = l.value().clone();
        Ok(out)
    }

    pub fn predict(&self, tokens: &[usize], batch: usize, time: usize) -> Result<Vec<usize>> {
        let l = self.logits(tokens, batch, time)?;
        let k = self.config.num_classes;
        Ok(l.data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0
            })
            .collect())
    }

    /// Mean cross-entropy and gradients in [`Model::params_mut`] order.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
        batch.check(&self.config)?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let logits = self.logits_tape(&bound, &batch.tokens, batch.batch, batch.time, batch.lengths.as_deref())?;
        let loss = logits.cross_entropy(&batch.targets)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NumericalFault {
                stage: "loss".into(),
                detail: format!("loss is {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        Ok((value, bound.leaves().into_iter().map(|v| grads.get_or_zeros(v)).collect()))
    }

    /// Gradients of the mean loss over several batches, each weighted by its
    /// number of targets.
    pub fn loss_and_grads_accum(&self, parts: &[Batch]) -> Result<(f64, Vec<Tensor>)> {
        let total: usize = parts.iter().map(|b| b.targets.len()).sum();
        if total == 0 {
            return Err(Error::Parameter("no targets to train on".into()));
        }
        let mut loss = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for part in parts {
            let w = part.targets.len() as f64 / total as f64;
            let (l, g) = self.loss_and_grads(part)?;
            loss += w * l;
            match &mut acc {
                None => acc = Some(g.into_iter().map(|t| t.scale(w)).collect()),
                Some(sum) => {
                    for (s, t) in sum.iter_mut().zip(&g) {
                        for (a, b) in s.data_mut().iter_mut().zip(t.data()) {
                            *a += w * b;
                        }
                    }
                }
            }
        }
        Ok((loss, acc.expect("at least one part")))
    }

    pub fn checkpoint_header(&self) -> CheckpointHeader {
        let mut offset = 0;
        let tensors = self
            .named_params()
            .into_iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        CheckpointHeader {
            config: self.config.clone(),
            tensors,
        }
    }

    /// `magic | u64 LE header length | JSON header | f64 LE data`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.checkpoint_header()).map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + header.len() + 8 * self.num_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, t) in self.named_params() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fmt = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| fmt(&e.to_string()))?;
        let data: Vec<f64> = bytes[16 + hlen..]
            .chunks(8)
            .map(|c| c.try_into().map(f64::from_le_bytes).map_err(|_| fmt("ragged data")))
            .collect::<Result<_>>()?;
        let mut model = Model::new(header.config.clone())?;
        let expected = model.checkpoint_header();
        if expected.tensors.len() != header.tensors.len() {
            return Err(fmt("tensor manifest does not match config"));
        }
        for ((e, h), t) in expected.tensors.iter().zip(&header.tensors).zip(model.params_mut()) {
            if e.name != h.name || e.shape != h.shape {
                return Err(fmt(&format!("manifest entry {} does not match config", h.name)));
            }
            let n = t.numel();
            let src = data.get(h.offset..h.offset + n).ok_or_else(|| fmt("truncated data"))?;
            t.data_mut().copy_from_slice(src);
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// In f64 elements from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// One Adam update on `batch`.
pub fn train_step(model: &mut Model, batch: &Batch, state: &mut AdamState, cfg: &AdamConfig) -> Result<StepStats> {
    let (loss, grads) = model.loss_and_grads(batch)?;
    let grad_norm = adam_step(&mut model.params_mut(), &grads, state, cfg)?;
    Ok(StepStats { loss, grad_norm })
}

/// [`train_step`] over several batches that together form one step.
pub fn train_step_accum(model: &mut Model, parts: &[Batch], state: &mut AdamState, cfg: &AdamConfig) -> Result<StepStats> {
    let (loss, grads) = model.loss_and_grads_accum(parts)?;
    let grad_norm = adam_step(&mut model.params_mut(), &grads, state, cfg)?;
    Ok(StepStats { loss, grad_norm })
}

/// Slots that a block of `cfg` carries, for reporting.
pub fn enabled_slots(cfg: &Mamba3BlockConfig) -> Vec<Slot> {
    Slot::ALL.iter().copied().filter(|&s| slot_shape(cfg, s).is_some()).collect()
}
