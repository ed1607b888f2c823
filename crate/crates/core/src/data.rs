//! Data plumbing: a hierarchical Gaussian-mixture task generator,
//! synthetic-sample construction by mixing pairs of training samples,
//! feature-space augmentation with Mixup, the equal-frequency batch
//! sampler, and a line-oriented interchange format for externally
//! produced synthetic samples.
//!
//! Everything here is a pure function of its inputs and a seed; datasets
//! are immutable once generated.

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Original,
    Synthetic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Present on every original sample; on synthetic samples only when
    /// both sources share a class (intra-class mixing).
    pub label: Option<usize>,
    pub provenance: Provenance,
    /// Indices into the originating train split, for synthetics made by
    /// a built-in mixer.
    pub source_ids: Option<(usize, usize)>,
}

impl Sample {
    pub fn original(features: Vec<f64>, label: usize) -> Self {
        Sample {
            features,
            label: Some(label),
            provenance: Provenance::Original,
            source_ids: None,
        }
    }

    pub fn synthetic(features: Vec<f64>, label: Option<usize>, sources: (usize, usize)) -> Self {
        Sample {
            features,
            label,
            provenance: Provenance::Synthetic,
            source_ids: Some(sources),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    /// All features as a row-major matrix.
    pub fn features_matrix(&self) -> Tensor {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(self.len() * d);
        for s in &self.samples {
            data.extend_from_slice(&s.features);
        }
        Tensor::new(vec![self.len(), d], data).unwrap()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.unwrap()).collect()
    }
}

/// Generator for a pretraining corpus plus a downstream classification
/// task. Super-class centers are Gaussian; each downstream class sits at
/// a Gaussian offset from its super-class center; samples add isotropic
/// noise. Downstream classes are assigned to super-classes round-robin.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskGenConfig {
    pub d_in: usize,
    pub num_superclasses: usize,
    pub num_classes: usize,
    pub pretrain_per_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub center_scale: f64,
    pub offset_scale: f64,
    pub noise_sigma: f64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        TaskGenConfig {
            d_in: 32,
            num_superclasses: 5,
            num_classes: 10,
            pretrain_per_class: 200,
            train_per_class: 100,
            val_per_class: 40,
            test_per_class: 200,
            center_scale: 3.0,
            offset_scale: 1.5,
            noise_sigma: 1.0,
        }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "task needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.d_in == 0 || self.num_superclasses == 0 {
            return Err(Error::Config("d_in and num_superclasses must be positive".into()));
        }
        if self.noise_sigma < 0.0 || self.center_scale < 0.0 || self.offset_scale < 0.0 {
            return Err(Error::Config("scales must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskData {
    /// Labeled with super-class indices.
    pub pretrain: LabeledDataset,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub class_means: Vec<Vec<f64>>,
    pub superclass_centers: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dist: &Normal<f64>, d: usize) -> Vec<f64> {
    (0..d).map(|_| dist.sample(rng)).collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic task generation. Each split (and the cluster geometry)
/// draws from its own RNG stream of the seed, so splits are disjoint by
/// construction.
pub fn generate_task(cfg: &TaskGenConfig, seed: u64) -> Result<TaskData> {
    cfg.validate()?;
    let normal = |sigma: f64| {
        Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("bad noise scale: {e}")))
    };
    let center_dist = normal(cfg.center_scale)?;
    let offset_dist = normal(cfg.offset_scale)?;
    let noise_dist = normal(cfg.noise_sigma)?;

    let mut geo_rng = stream_rng(seed, 0);
    let superclass_centers: Vec<Vec<f64>> = (0..cfg.num_superclasses)
        .map(|_| gaussian_vec(&mut geo_rng, &center_dist, cfg.d_in))
        .collect();
    let class_means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|c| {
            let center = &superclass_centers[c % cfg.num_superclasses];
            let offset = gaussian_vec(&mut geo_rng, &offset_dist, cfg.d_in);
            center.iter().zip(&offset).map(|(a, b)| a + b).collect()
        })
        .collect();

    // Pretraining corpus: super-class blobs, each draw at a fresh
    // sub-cluster position so the corpus spans the within-super spread.
    let mut pre_rng = stream_rng(seed, 1);
    let mut pretrain = Vec::with_capacity(cfg.num_superclasses * cfg.pretrain_per_class);
    for (s, center) in superclass_centers.iter().enumerate() {
        for _ in 0..cfg.pretrain_per_class {
            let offset = gaussian_vec(&mut pre_rng, &offset_dist, cfg.d_in);
            let noise = gaussian_vec(&mut pre_rng, &noise_dist, cfg.d_in);
            let features = center
                .iter()
                .zip(&offset)
                .zip(&noise)
                .map(|((c, o), n)| c + o + n)
                .collect();
            pretrain.push(Sample::original(features, s));
        }
    }

    let downstream = |stream: u64, per_class: usize, split: Split| -> LabeledDataset {
        let mut rng = stream_rng(seed, stream);
        let mut samples = Vec::with_capacity(cfg.num_classes * per_class);
        for (c, mean) in class_means.iter().enumerate() {
            for _ in 0..per_class {
                let noise = gaussian_vec(&mut rng, &noise_dist, cfg.d_in);
                let features = mean.iter().zip(&noise).map(|(m, n)| m + n).collect();
                samples.push(Sample::original(features, c));
            }
        }
        LabeledDataset {
            samples,
            num_classes: cfg.num_classes,
            split,
        }
    };

    Ok(TaskData {
        pretrain: LabeledDataset {
            samples: pretrain,
            num_classes: cfg.num_superclasses,
            split: Split::Train,
        },
        train: downstream(2, cfg.train_per_class, Split::Train),
        val: downstream(3, cfg.val_per_class, Split::Val),
        test: downstream(4, cfg.test_per_class, Split::Test),
        class_means,
        superclass_centers,
    })
}

/// Fraction of samples whose nearest mean (squared L2, ties toward the
/// lowest class) matches their label.
pub fn nearest_centroid_accuracy(ds: &LabeledDataset, means: &[Vec<f64>]) -> f64 {
    let mut correct = 0usize;
    for s in &ds.samples {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, m) in means.iter().enumerate() {
            let d: f64 = s
                .features
                .iter()
                .zip(m)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if best == s.label.unwrap() {
            correct += 1;
        }
    }
    correct as f64 / ds.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerKind {
    /// Pairs drawn over the whole train split, ignoring labels.
    InterClass,
    /// Pairs drawn inside one class; classes visited proportionally to
    /// their size.
    IntraClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// x' = lambda * x_a + (1 - lambda) * x_b in input space.
    ConvexPixel,
    /// Mix in a frozen encoder's embedding space, re-project by nearest
    /// train embedding, then blend 50/50 with the input-space mix.
    EncoderLatent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MixerSpec {
    pub kind: MixerKind,
    pub interpolation: Interpolation,
    /// Beta(w, w) parameter for the mixing weight; 1.0 is uniform.
    pub weight_law: f64,
}

impl Default for MixerSpec {
    fn default() -> Self {
        MixerSpec {
            kind: MixerKind::InterClass,
            interpolation: Interpolation::ConvexPixel,
            weight_law: 1.0,
        }
    }
}

/// Synthetic pool next to the train split it was built from.
#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub originals: LabeledDataset,
    pub synthetics: Vec<Sample>,
    pub multiplier: usize,
}

impl AugmentedDataset {
    /// A train split with no synthetics at all.
    pub fn originals_only(originals: LabeledDataset) -> Self {
        AugmentedDataset {
            originals,
            synthetics: Vec::new(),
            multiplier: 0,
        }
    }

    pub fn get(&self, slot: SlotRef) -> &Sample {
        match slot {
            SlotRef::Original(i) => &self.originals.samples[i],
            SlotRef::Synthetic(i) => &self.synthetics[i],
        }
    }
}

/// Convex interpolation lambda * a + (1 - lambda) * b.
pub fn mix_pair(xa: &[f64], xb: &[f64], lambda: f64) -> Vec<f64> {
    xa.iter()
        .zip(xb)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect()
}

/// Build `n * |train|` synthetic samples by mixing pairs of training
/// samples. `latent_encoder` is required for encoder-latent
/// interpolation and ignored otherwise. Intra-class synthetics keep the
/// shared label; inter-class synthetics are unlabeled.
pub fn build_augmented(
    train: &LabeledDataset,
    mixer: &MixerSpec,
    n: usize,
    seed: u64,
    latent_encoder: Option<&Model>,
) -> Result<AugmentedDataset> {
    let m = train.len();
    if n > 0 && m < 2 {
        return Err(Error::Generation(
            "need at least 2 training samples to mix".into(),
        ));
    }
    if mixer.weight_law <= 0.0 {
        return Err(Error::Config(format!(
            "mixing weight_law must be positive, got {}",
            mixer.weight_law
        )));
    }

    let by_class: Vec<Vec<usize>> = {
        let mut v = vec![Vec::new(); train.num_classes];
        for (i, s) in train.samples.iter().enumerate() {
            v[s.label.unwrap()].push(i);
        }
        v
    };
    if n > 0 && mixer.kind == MixerKind::IntraClass {
        if let Some(c) = by_class.iter().position(|members| members.len() == 1) {
            return Err(Error::Generation(format!(
                "class {c} has a single sample; intra-class mixing needs at least 2 per class"
            )));
        }
    }

    // Embeddings are only needed for latent interpolation; compute them
    // once for the whole train split.
    let embeddings: Option<(Tensor, usize)> = match mixer.interpolation {
        Interpolation::ConvexPixel => None,
        Interpolation::EncoderLatent => {
            let model = latent_encoder.ok_or_else(|| {
                Error::Config("encoder-latent mixing needs a pretrained encoder".into())
            })?;
            let emb = model.embed(&train.features_matrix())?;
            let d = emb.cols();
            Some((emb, d))
        }
    };

    let beta = Beta::new(mixer.weight_law, mixer.weight_law)
        .map_err(|e| Error::Config(format!("bad weight_law: {e}")))?;
    let mut rng = stream_rng(seed, 5);
    let count = n * m;
    let mut synthetics = Vec::with_capacity(count);
    for _ in 0..count {
        let (ia, ib, label) = match mixer.kind {
            MixerKind::InterClass => {
                let a = rng.gen_range(0..m);
                let b = loop {
                    let b = rng.gen_range(0..m);
                    if b != a {
                        break b;
                    }
                };
                (a, b, None)
            }
            MixerKind::IntraClass => {
                let a = rng.gen_range(0..m);
                let cls = train.samples[a].label.unwrap();
                let members = &by_class[cls];
                let b = loop {
                    let b = members[rng.gen_range(0..members.len())];
                    if b != a {
                        break b;
                    }
                };
                (a, b, Some(cls))
            }
        };
        let lambda = beta.sample(&mut rng);
        let pixel_mix = mix_pair(
            &train.samples[ia].features,
            &train.samples[ib].features,
            lambda,
        );
        let features = match &embeddings {
            None => pixel_mix,
            Some((emb, d)) => {
                let ea = &emb.data[ia * d..(ia + 1) * d];
                let eb = &emb.data[ib * d..(ib + 1) * d];
                let mixed = mix_pair(ea, eb, lambda);
                let nearest = nearest_row(&emb.data, *d, &mixed);
                mix_pair(&pixel_mix, &train.samples[nearest].features, 0.5)
            }
        };
        synthetics.push(Sample::synthetic(features, label, (ia, ib)));
    }

    Ok(AugmentedDataset {
        originals: train.clone(),
        synthetics,
        multiplier: n,
    })
}

fn nearest_row(rows: &[f64], d: usize, query: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, row) in rows.chunks(d).enumerate() {
        let dist: f64 = row
            .iter()
            .zip(query)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if dist < best_d {
            best_d = dist;
            best = i;
        }
    }
    best
}

/// One batch slot: which pool, and the index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRef {
    Original(usize),
    Synthetic(usize),
}

impl SlotRef {
    pub fn provenance(&self) -> Provenance {
        match self {
            SlotRef::Original(_) => Provenance::Original,
            SlotRef::Synthetic(_) => Provenance::Synthetic,
        }
    }
}

/// Draw a batch. With `use_synthetic`, each slot is original or
/// synthetic with probability 1/2 (per-slot sampling); in `strict` mode
/// the batch instead holds exactly ceil(b/2) originals and floor(b/2)
/// synthetics in shuffled order. Within a pool, slots are uniform.
pub fn sample_batch(
    aug: &AugmentedDataset,
    batch_size: usize,
    use_synthetic: bool,
    strict: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SlotRef>> {
    if batch_size == 0 {
        return Err(Error::Sampling("batch_size must be at least 1".into()));
    }
    if aug.originals.is_empty() {
        return Err(Error::Sampling("original pool is empty".into()));
    }
    if use_synthetic && aug.synthetics.is_empty() {
        return Err(Error::Sampling(
            "synthetic pool is empty but synthetic sampling was requested".into(),
        ));
    }
    let n_orig = aug.originals.len();
    let n_syn = aug.synthetics.len();
    let mut slots = Vec::with_capacity(batch_size);
    if !use_synthetic {
        for _ in 0..batch_size {
            slots.push(SlotRef::Original(rng.gen_range(0..n_orig)));
        }
    } else if strict {
        let originals = batch_size.div_ceil(2);
        for _ in 0..originals {
            slots.push(SlotRef::Original(rng.gen_range(0..n_orig)));
        }
        for _ in originals..batch_size {
            slots.push(SlotRef::Synthetic(rng.gen_range(0..n_syn)));
        }
        slots.shuffle(rng);
    } else {
        for _ in 0..batch_size {
            if rng.gen_bool(0.5) {
                slots.push(SlotRef::Synthetic(rng.gen_range(0..n_syn)));
            } else {
                slots.push(SlotRef::Original(rng.gen_range(0..n_orig)));
            }
        }
    }
    Ok(slots)
}

/// Feature-space analogues of standard image augmentation, plus Mixup
/// restricted to original samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    /// Reverse the feature vector with probability 1/2 per sample.
    pub flip: bool,
    /// Additive Gaussian noise scale.
    pub jitter_sigma: f64,
    /// Keep a random contiguous window of this fraction of coordinates,
    /// zeroing the rest; 1.0 keeps everything.
    pub crop_fraction: f64,
    /// Beta(a, a) parameter for Mixup; 0 disables Mixup.
    pub mixup_alpha: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            flip: false,
            jitter_sigma: 0.0,
            crop_fraction: 1.0,
            mixup_alpha: 0.2,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "crop_fraction must lie in (0, 1], got {}",
                self.crop_fraction
            )));
        }
        if self.jitter_sigma < 0.0 || self.mixup_alpha < 0.0 {
            return Err(Error::Config(
                "jitter_sigma and mixup_alpha must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.flip
            && self.jitter_sigma == 0.0
            && self.crop_fraction >= 1.0
            && self.mixup_alpha == 0.0
    }
}

#[derive(Debug, Clone)]
pub struct RowInfo {
    pub provenance: Provenance,
    /// Length-K label distribution for rows that can enter the task
    /// loss: one-hot or Mixup two-hot for originals, one-hot for labeled
    /// synthetics, absent for unlabeled synthetics.
    pub target: Option<Vec<f64>>,
    pub mixup_applied: bool,
}

/// One augmented batch, consumed exactly once and fed to both teacher
/// and student so they see identical inputs.
#[derive(Debug, Clone)]
pub struct AugBatch {
    pub features: Tensor,
    pub rows: Vec<RowInfo>,
}

impl AugBatch {
    /// Rows with provenance=synthetic that received a Mixup partner.
    /// Always zero by construction; counted for instrumentation.
    pub fn mixup_violations(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.provenance == Provenance::Synthetic && r.mixup_applied)
            .count()
    }
}

/// Apply per-sample flip/crop/jitter, then Mixup among the original
/// rows. Augmentation parameters are drawn once per sample; Mixup mixes
/// post-augmentation features from a pre-Mixup snapshot, so pairings do
/// not cascade.
pub fn apply_augmentation(
    samples: &[&Sample],
    num_classes: usize,
    spec: &AugmentationSpec,
    rng: &mut ChaCha8Rng,
) -> Result<AugBatch> {
    spec.validate()?;
    let b = samples.len();
    if b == 0 {
        return Err(Error::Sampling("cannot augment an empty batch".into()));
    }
    let d = samples[0].features.len();
    let jitter = Normal::new(0.0, spec.jitter_sigma)
        .map_err(|e| Error::Config(format!("bad jitter_sigma: {e}")))?;
    let window = ((spec.crop_fraction * d as f64).ceil() as usize).clamp(1, d);

    let mut features = vec![0.0; b * d];
    let mut rows = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        let mut x = s.features.clone();
        if spec.flip && rng.gen_bool(0.5) {
            x.reverse();
        }
        if window < d {
            let start = rng.gen_range(0..=d - window);
            for (j, v) in x.iter_mut().enumerate() {
                if j < start || j >= start + window {
                    *v = 0.0;
                }
            }
        }
        if spec.jitter_sigma > 0.0 {
            for v in x.iter_mut() {
                *v += jitter.sample(rng);
            }
        }
        features[i * d..(i + 1) * d].copy_from_slice(&x);
        let target = s.label.map(|l| one_hot(l, num_classes));
        rows.push(RowInfo {
            provenance: s.provenance,
            target,
            mixup_applied: false,
        });
    }

    if spec.mixup_alpha > 0.0 {
        let original_rows: Vec<usize> = (0..b)
            .filter(|&i| samples[i].provenance == Provenance::Original)
            .collect();
        if !original_rows.is_empty() {
            let beta = Beta::new(spec.mixup_alpha, spec.mixup_alpha)
                .map_err(|e| Error::Config(format!("bad mixup_alpha: {e}")))?;
            let snapshot = features.clone();
            for &i in &original_rows {
                let partner = original_rows[rng.gen_range(0..original_rows.len())];
                let lambda = beta.sample(rng);
                let mixed = mix_pair(
                    &snapshot[i * d..(i + 1) * d],
                    &snapshot[partner * d..(partner + 1) * d],
                    lambda,
                );
                features[i * d..(i + 1) * d].copy_from_slice(&mixed);
                let ya = samples[i].label.unwrap();
                let yb = samples[partner].label.unwrap();
                let mut target = vec![0.0; num_classes];
                target[ya] += lambda;
                target[yb] += 1.0 - lambda;
                rows[i].target = Some(target);
                rows[i].mixup_applied = true;
            }
        }
    }

    Ok(AugBatch {
        features: Tensor::new(vec![b, d], features)?,
        rows,
    })
}

fn one_hot(label: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    v
}

/// Parse externally produced synthetic samples: one comma-separated
/// feature vector per line, optionally followed by `#source=a,b`.
/// Records are 1-indexed in error messages.
pub fn ingest_external_synthetic(path: &Path, d_in: usize) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let record = lineno + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (values, comment) = match line.split_once('#') {
            Some((v, c)) => (v.trim(), Some(c.trim())),
            None => (line, None),
        };
        let features = values
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                    record,
                    msg: format!("bad float {tok:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if features.len() != d_in {
            return Err(Error::Parse {
                record,
                msg: format!("expected {d_in} values, got {}", features.len()),
            });
        }
        let source_ids = match comment {
            None => None,
            Some(c) => {
                let pair = c.strip_prefix("source=").ok_or_else(|| Error::Parse {
                    record,
                    msg: format!("unrecognized comment {c:?}"),
                })?;
                let (a, b) = pair.split_once(',').ok_or_else(|| Error::Parse {
                    record,
                    msg: "source comment needs two indices".into(),
                })?;
                let parse_idx = |s: &str| {
                    s.trim().parse::<usize>().map_err(|_| Error::Parse {
                        record,
                        msg: format!("bad source index {s:?}"),
                    })
                };
                Some((parse_idx(a)?, parse_idx(b)?))
            }
        };
        out.push(Sample {
            features,
            label: None,
            provenance: Provenance::Synthetic,
            source_ids,
        });
    }
    Ok(out)
}

/// Write synthetic samples in the interchange format, 17 significant
/// digits so re-ingesting reproduces the exact floats.
pub fn export_synthetic(path: &Path, samples: &[Sample]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    for s in samples {
        let line = s
            .features
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>()
            .join(",");
        match s.source_ids {
            Some((a, b)) => writeln!(w, "{line}#source={a},{b}")?,
            None => writeln!(w, "{line}")?,
        }
    }
    Ok(())
}
