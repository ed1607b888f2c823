//! Encoder/head models: an MLP encoder producing an embedding, an MLP or
//! linear head producing logits, and the freezing machinery that lets a
//! head be trained on top of a fixed encoder.
//!
//! Checkpoints are JSON with full-precision floats, so a save/load round
//! trip is bit-exact.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}


#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Embedding dimension.
    pub output_dim: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Spec("encoder dimensions must be positive".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::Spec("encoder needs at least one hidden layer".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Spec("encoder hidden layer of width 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub n_in: usize,
    pub n_out: usize,
    #[serde(default)]
    pub n_hidden: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 {
            return Err(Error::Spec("head dimensions must be positive".into()));
        }
        match (self.kind, self.n_hidden) {
            (HeadKind::Linear, None) => Ok(()),
            (HeadKind::Linear, Some(_)) => {
                Err(Error::Spec("linear head takes no hidden width".into()))
            }
            (HeadKind::Mlp, Some(h)) if h > 0 => Ok(()),
            (HeadKind::Mlp, _) => Err(Error::Spec(
                "mlp head needs a positive hidden width".into(),
            )),
        }
    }
}

/// Sizing regimes for MLP prediction heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadRegime {
    /// Hidden width equals the embedding width.
    Student,
    /// Geometric mean of input and output widths, for teachers whose
    /// embeddings are much wider than the label space.
    LargeTeacher,
}

/// Hidden-layer width for an MLP head.
pub fn head_hidden_size(n_in: usize, n_out: usize, regime: HeadRegime) -> usize {
    match regime {
        HeadRegime::Student => n_in,
        HeadRegime::LargeTeacher => ((n_in as f64 * n_out as f64).sqrt()).round() as usize,
    }
}

#[derive(Debug, Clone)]
pub struct Affine {
    /// `[fan_in, fan_out]`, applied as x . w + b.
    pub w: Tensor,
    /// `[fan_out]`.
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Affine>,
    pub activation: Activation,
}

impl Mlp {
    /// Uniform init in +/- sqrt(6 / (fan_in + fan_out)), zero biases,
    /// drawn deterministically layer by layer.
    fn init(dims: &[usize], activation: Activation, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Affine {
                    w: Tensor::new(vec![fan_in, fan_out], data).unwrap(),
                    b: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.shape[1]
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.numel() + l.b.numel())
            .sum()
    }

    /// Record the forward pass; activation between affines, none after
    /// the last. Returns the output node and the parameter leaves in
    /// layer order (w then b per layer).
    fn forward_on(
        &self,
        tape: &mut Tape,
        x: NodeId,
        requires_grad: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut ids = Vec::with_capacity(2 * self.layers.len());
        let mut h = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.w.clone(), requires_grad);
            let b = tape.leaf(layer.b.clone(), requires_grad);
            ids.push(w);
            ids.push(b);
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if li + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h)?,
                    Activation::Gelu => tape.gelu(h)?,
                };
            }
        }
        Ok((h, ids))
    }

    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }
}

pub fn build_encoder(spec: &EncoderSpec, seed: u64) -> Result<Mlp> {
    spec.validate()?;
    let mut dims = vec![spec.input_dim];
    dims.extend_from_slice(&spec.hidden_widths);
    dims.push(spec.output_dim);
    Ok(Mlp::init(&dims, spec.activation, seed))
}

pub fn build_head(spec: &HeadSpec, seed: u64) -> Result<Mlp> {
    spec.validate()?;
    let dims = match spec.kind {
        HeadKind::Linear => vec![spec.n_in, spec.n_out],
        HeadKind::Mlp => vec![spec.n_in, spec.n_hidden.unwrap(), spec.n_out],
    };
    Ok(Mlp::init(&dims, spec.activation, seed))
}

/// Encoder + head with a freezing flag. When `encoder_frozen` is set,
/// encoder parameters are excluded from the trainable set and no
/// gradient is recorded for them.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder_spec: EncoderSpec,
    pub head_spec: HeadSpec,
    pub encoder_seed: u64,
    pub head_seed: u64,
    pub encoder: Mlp,
    pub head: Mlp,
    pub encoder_frozen: bool,
}

impl Model {
    pub fn build(
        encoder_spec: EncoderSpec,
        head_spec: HeadSpec,
        encoder_seed: u64,
        head_seed: u64,
    ) -> Result<Model> {
        let encoder = build_encoder(&encoder_spec, encoder_seed)?;
        let head = build_head(&head_spec, head_seed)?;
        if encoder_spec.output_dim != head_spec.n_in {
            return Err(Error::Spec(format!(
                "encoder embeds into {} dims but head expects {}",
                encoder_spec.output_dim, head_spec.n_in
            )));
        }
        Ok(Model {
            encoder_spec,
            head_spec,
            encoder_seed,
            head_seed,
            encoder,
            head,
            encoder_frozen: false,
        })
    }

    /// Pair an already-trained encoder with a freshly initialized head.
    /// This is how probing and distillation runs start: the encoder
    /// carries pretrained weights, the head is new.
    pub fn assemble(
        pretrained: &PretrainedEncoder,
        head_spec: HeadSpec,
        head_seed: u64,
        encoder_frozen: bool,
    ) -> Result<Model> {
        if pretrained.spec.output_dim != head_spec.n_in {
            return Err(Error::Spec(format!(
                "encoder embeds into {} dims but head expects {}",
                pretrained.spec.output_dim, head_spec.n_in
            )));
        }
        let head = build_head(&head_spec, head_seed)?;
        Ok(Model {
            encoder_spec: pretrained.spec.clone(),
            head_spec,
            encoder_seed: pretrained.seed,
            head_seed,
            encoder: pretrained.mlp.clone(),
            head,
            encoder_frozen,
        })
    }

    /// Replace the head with a freshly initialized one (used when probing
    /// the same encoder several times with different head seeds).
    pub fn reset_head(&mut self, head_seed: u64) -> Result<()> {
        self.head = build_head(&self.head_spec, head_seed)?;
        self.head_seed = head_seed;
        Ok(())
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.encoder_frozen = frozen;
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.head.num_params()
    }

    pub fn num_trainable_params(&self) -> usize {
        if self.encoder_frozen {
            self.head.num_params()
        } else {
            self.num_params()
        }
    }

    fn check_input(&self, cols: usize, op: &'static str) -> Result<()> {
        if cols != self.encoder.input_dim() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![cols],
                rhs: vec![self.encoder.input_dim()],
            });
        }
        Ok(())
    }

    /// Record the full forward pass for training. Returns the logits
    /// node and the trainable parameter leaves in optimizer order:
    /// encoder layers (only when unfrozen) then head layers, w before b.
    pub fn forward_train(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_input(tape.value(x).cols(), "forward")?;
        let (emb, enc_ids) = self.encoder.forward_on(tape, x, !self.encoder_frozen)?;
        let (logits, head_ids) = self.head.forward_on(tape, emb, true)?;
        let mut trainable = if self.encoder_frozen { Vec::new() } else { enc_ids };
        trainable.extend(head_ids);
        Ok((logits, trainable))
    }

    /// Gradient-free forward pass on a scratch tape; same kernels as
    /// training, so values agree bit-for-bit.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.cols(), "forward")?;
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), false);
        let (emb, _) = self.encoder.forward_on(&mut tape, xi, false)?;
        let (logits, _) = self.head.forward_on(&mut tape, emb, false)?;
        Ok(tape.value(logits).clone())
    }

    /// Encoder embedding only.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.cols(), "embed")?;
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), false);
        let (emb, _) = self.encoder.forward_on(&mut tape, xi, false)?;
        Ok(tape.value(emb).clone())
    }

    /// Mutable views of the trainable parameters, in the exact order of
    /// [`Model::forward_train`]'s leaves.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        if self.encoder_frozen {
            self.head.params_mut()
        } else {
            let mut v = self.encoder.params_mut();
            v.extend(self.head.params_mut());
            v
        }
    }

    /// Checksum over every parameter's bit pattern (FNV-1a).
    pub fn checksum(&self) -> u64 {
        checksum_params(self.encoder.params().into_iter().chain(self.head.params()))
    }

    /// Checksum over the encoder parameters only, used to verify the
    /// freeze contract across training runs.
    pub fn encoder_checksum(&self) -> u64 {
        checksum_params(self.encoder.params().into_iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            schema_version: 1,
            encoder_spec: self.encoder_spec.clone(),
            head_spec: self.head_spec.clone(),
            encoder_seed: self.encoder_seed,
            head_seed: self.head_seed,
            encoder_frozen: self.encoder_frozen,
            encoder_params: self.encoder.params().iter().map(|t| TensorData::from(*t)).collect(),
            head_params: self.head.params().iter().map(|t| TensorData::from(*t)).collect(),
        };
        let f = File::create(path)?;
        serde_json::to_writer(BufWriter::new(f), &ckpt)
            .map_err(|e| Error::Config(format!("checkpoint write: {e}")))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let f = File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Config(format!("checkpoint parse: {e}")))?;
        if ckpt.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported checkpoint schema_version {}",
                ckpt.schema_version
            )));
        }
        let mut model = Model::build(
            ckpt.encoder_spec,
            ckpt.head_spec,
            ckpt.encoder_seed,
            ckpt.head_seed,
        )?;
        model.encoder_frozen = ckpt.encoder_frozen;
        restore_params(model.encoder.params_mut(), &ckpt.encoder_params, "encoder")?;
        restore_params(model.head.params_mut(), &ckpt.head_params, "head")?;
        Ok(model)
    }
}

fn checksum_params<'a>(params: impl Iterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in params {
        for v in &t.data {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn restore_params(
    mut targets: Vec<&mut Tensor>,
    stored: &[TensorData],
    which: &str,
) -> Result<()> {
    if targets.len() != stored.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} {which} tensors, model has {}",
            stored.len(),
            targets.len()
        )));
    }
    for (t, s) in targets.iter_mut().zip(stored) {
        if t.shape != s.shape {
            return Err(Error::Config(format!(
                "checkpoint {which} tensor shape {:?} does not match model shape {:?}",
                s.shape, t.shape
            )));
        }
        t.data = s.data.clone();
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl From<&Tensor> for TensorData {
    fn from(t: &Tensor) -> Self {
        TensorData {
            shape: t.shape.clone(),
            data: t.data.clone(),
        }
    }
}

/// A pretrained encoder kept as its own artifact: heads come and go
/// (probing builds a fresh one per run), the encoder persists.
#[derive(Debug, Clone)]
pub struct PretrainedEncoder {
    pub spec: EncoderSpec,
    pub seed: u64,
    pub mlp: Mlp,
}

impl PretrainedEncoder {
    pub fn checksum(&self) -> u64 {
        checksum_params(self.mlp.params().into_iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stored = EncoderCheckpoint {
            schema_version: 1,
            spec: self.spec.clone(),
            seed: self.seed,
            params: self.mlp.params().iter().map(|t| TensorData::from(*t)).collect(),
        };
        let f = File::create(path)?;
        serde_json::to_writer(BufWriter::new(f), &stored)
            .map_err(|e| Error::Config(format!("encoder checkpoint write: {e}")))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PretrainedEncoder> {
        let f = File::open(path)?;
        let stored: EncoderCheckpoint = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| Error::Config(format!("encoder checkpoint parse: {e}")))?;
        if stored.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported encoder checkpoint schema_version {}",
                stored.schema_version
            )));
        }
        let mut mlp = build_encoder(&stored.spec, stored.seed)?;
        restore_params(mlp.params_mut(), &stored.params, "encoder")?;
        Ok(PretrainedEncoder {
            spec: stored.spec,
            seed: stored.seed,
            mlp,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderCheckpoint {
    schema_version: u32,
    spec: EncoderSpec,
    seed: u64,
    params: Vec<TensorData>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    encoder_spec: EncoderSpec,
    head_spec: HeadSpec,
    encoder_seed: u64,
    head_seed: u64,
    encoder_frozen: bool,
    encoder_params: Vec<TensorData>,
    head_params: Vec<TensorData>,
}
