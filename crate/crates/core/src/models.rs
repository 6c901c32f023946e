//! Ready-made networks: the small image classifier and the orientation regressor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rand_chacha::rand_core::SeedableRng;

use crate::data::{
    collect_state, restore_module, AugmentConfig, ImageSet, LabeledBatches, MappedImages, NamedTensor,
    SyntheticOrientedSample,
};
use crate::engine::{train_epochs, BatchStats, EpochMetrics, MetricsSink, TrainConfig, Trainable};
use crate::error::{QuanError, Result};
use crate::layers::{
    conv_norm_act, Activation, ActivationKind, BlockConfig, ConvMode, ConvSpec, GlobalAvgPool, InitScheme, Linear,
    Iqbn, Module, Param, ParamKind, QConv, QC3k2, Sequential, QSPPF,
};
use crate::losses::{angular_loss, cls_loss, reg_loss, ClsMode, LossWeights};
use crate::mapping::{map_image_into, MappingStrategy};
use crate::quaternion::Quaternion;
use crate::scalar::Real;
use crate::tensor::{QTensor, Shape, Q};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub classes: usize,
    /// Quaternion channels after the stem; each stage doubles it.
    pub width: usize,
    pub stages: usize,
    pub mode: ConvMode,
    pub activation: ActivationKind,
    pub init: InitScheme,
    pub sppf_kernel: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            classes: 10,
            width: 8,
            stages: 3,
            mode: ConvMode::Separable,
            activation: ActivationKind::Silu,
            init: InitScheme::default(),
            sppf_kernel: 5,
        }
    }
}

impl ClassifierConfig {
    fn block(&self) -> BlockConfig {
        BlockConfig {
            mode: self.mode,
            activation: self.activation,
            init: self.init,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.width << self.stages
    }
}

/// Stem conv, `stages` × (strided conv → QC3k2), QSPPF, global average pool
/// and a linear classifier over the pooled quaternion features.
pub struct QuanClassifier<T> {
    cfg: ClassifierConfig,
    body: Sequential<T>,
    head: Linear<T>,
}

impl<T: Real> QuanClassifier<T> {
    pub fn new<R: Rng + ?Sized>(cfg: ClassifierConfig, rng: &mut R) -> Result<Self> {
        if cfg.classes < 2 || cfg.width == 0 {
            return Err(QuanError::Config(format!(
                "classifier needs at least 2 classes and width 1, got {} and {}",
                cfg.classes, cfg.width
            )));
        }
        let b = cfg.block();
        let mut body = Sequential::new();
        body.push(conv_norm_act("stem", ConvSpec::new(1, cfg.width, 3).same(), b, rng)?);
        let mut ch = cfg.width;
        for s in 0..cfg.stages {
            let name = format!("stage{}", s + 1);
            let down = ConvSpec::new(ch, 2 * ch, 3).stride(2).padding(1);
            body.push(conv_norm_act(&format!("{name}.down"), down, b, rng)?);
            ch *= 2;
            body.push(QC3k2::new(&format!("{name}.c3k2"), ch, ch, b, rng)?);
        }
        body.push(QSPPF::new("sppf", ch, ch, cfg.sppf_kernel, b, rng)?);
        // The pooled maps are non-negative-biased and the mixing conv leaves them
        // unnormalized; without this the linear head sees large features.
        body.push(Iqbn::new("sppf.bn", ch));
        body.push(Activation::new("sppf.act", cfg.activation));
        body.push(GlobalAvgPool::new());
        let head = Linear::new("head", ch * Q, cfg.classes, rng);
        Ok(QuanClassifier { cfg, body, head })
    }

    pub fn config(&self) -> ClassifierConfig {
        self.cfg
    }

    /// Returns `B × classes` logits.
    pub fn forward(&mut self, x: &QTensor<T>, train: bool) -> Result<Vec<f64>> {
        let f = self.body.forward(x, train)?;
        self.head.forward(&f)
    }

    pub fn backward(&mut self, dlogits: &[f64]) -> Result<QTensor<T>> {
        let df = self.head.backward(dlogits)?;
        self.body.backward(&df)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.body.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.body.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn state(&self) -> Vec<NamedTensor> {
        collect_state(&self.params(), &self.body.buffers())
    }

    pub fn load_state(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        restore_module(tensors, &mut self.body, self.head.params_mut())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Real, D: LabeledBatches<T> + ?Sized> Trainable<D> for QuanClassifier<T> {
    type Elem = T;

    fn samples(data: &D) -> usize {
        data.len()
    }

    fn run_batch(&mut self, data: &D, indices: &[usize], train: bool, rng: &mut ChaCha8Rng) -> Result<BatchStats> {
        let (x, labels) = data.batch(indices, train, rng)?;
        let logits = self.forward(&x, train)?;
        let (loss, grad) = cls_loss(&logits, &labels, self.cfg.classes, ClsMode::Softmax)?;
        let correct = logits
            .chunks_exact(self.cfg.classes)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        if train {
            self.backward(&grad)?;
        }
        Ok(BatchStats {
            loss_sum: loss * labels.len() as f64,
            metric_sum: correct as f64,
            count: labels.len(),
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        QuanClassifier::params_mut(self)
    }
}

/// Builds the classifier for `cfg` (its mode and activation override those in
/// `model`) and trains it on mapped images.
pub fn train_classifier(
    train: &ImageSet,
    eval: Option<&ImageSet>,
    model: ClassifierConfig,
    cfg: &TrainConfig,
    augment: Option<AugmentConfig>,
    sink: &mut MetricsSink,
) -> Result<(QuanClassifier<f32>, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let model = ClassifierConfig {
        classes: train.classes,
        mode: cfg.mode,
        activation: cfg.activation,
        ..model
    };
    let mut net = QuanClassifier::<f32>::new(model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let train_data = MappedImages::new(train, cfg.mapping, augment);
    let eval_data = eval.map(|e| MappedImages::new(e, cfg.mapping, None));
    let history = train_epochs(&mut net, &train_data, eval_data.as_ref(), cfg, sink)?;
    Ok((net, history))
}

/// Scalar weights held versus what real-valued layers of the same effective
/// width (every quaternion channel unrolled into four real ones) would hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub total: usize,
    pub real_equivalent: usize,
    pub conv_weights: usize,
    pub conv_real_equivalent: usize,
}

impl ParamCount {
    pub fn conv_ratio(&self) -> f64 {
        self.conv_weights as f64 / self.conv_real_equivalent as f64
    }
}

pub fn count_params<T: Real>(params: &[&Param<T>]) -> ParamCount {
    let mut c = ParamCount::default();
    for p in params {
        c.total += p.len();
        c.real_equivalent += p.real_equivalent_len();
        if p.kind == ParamKind::QuatKernel {
            c.conv_weights += p.len();
            c.conv_real_equivalent += p.real_equivalent_len();
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationConfig {
    pub width: usize,
    pub mode: ConvMode,
    pub activation: ActivationKind,
    pub init: InitScheme,
    pub weights: LossWeights,
}

impl Default for OrientationConfig {
    fn default() -> Self {
        OrientationConfig {
            width: 8,
            mode: ConvMode::Separable,
            activation: ActivationKind::Silu,
            init: InitScheme::default(),
            weights: LossWeights::default(),
        }
    }
}

/// Two strided conv stages with QC3k2 blocks, global pooling and a two-layer
/// 1×1 head emitting one quaternion per image.
pub struct OrientationNet<T> {
    cfg: OrientationConfig,
    body: Sequential<T>,
}

impl<T: Real> OrientationNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: OrientationConfig, rng: &mut R) -> Result<Self> {
        cfg.weights.validate()?;
        if cfg.width == 0 {
            return Err(QuanError::Config("orientation net width must be at least 1".into()));
        }
        let b = BlockConfig {
            mode: cfg.mode,
            activation: cfg.activation,
            init: cfg.init,
        };
        let w = cfg.width;
        let mut body = Sequential::new();
        body.push(conv_norm_act("stem", ConvSpec::new(1, w, 3).stride(2).padding(1), b, rng)?);
        body.push(QC3k2::new("stage1", w, w, b, rng)?);
        body.push(conv_norm_act("down", ConvSpec::new(w, 2 * w, 3).stride(2).padding(1), b, rng)?);
        body.push(QC3k2::new("stage2", 2 * w, 2 * w, b, rng)?);
        body.push(GlobalAvgPool::new());
        body.push(QConv::new("head.fc", ConvSpec::new(2 * w, w, 1).mode(cfg.mode), true, cfg.init, rng)?);
        body.push(Activation::new("head.act", cfg.activation));
        let mut out = QConv::new("head.out", ConvSpec::new(w, 1, 1).mode(cfg.mode), true, cfg.init, rng)?;
        // Start near the identity rotation so the normalization is well conditioned.
        if let Some(bias) = out.bias.as_mut() {
            bias.value[0] = T::from_f64(1.0);
        }
        body.push(out);
        Ok(OrientationNet { cfg, body })
    }

    pub fn config(&self) -> OrientationConfig {
        self.cfg
    }

    /// One (unnormalized) quaternion per image.
    pub fn forward(&mut self, x: &QTensor<T>, train: bool) -> Result<Vec<Quaternion>> {
        let y = self.body.forward(x, train)?;
        Ok(y.data()
            .chunks_exact(Q)
            .map(|c| Quaternion::new(c[0].to_f64(), c[1].to_f64(), c[2].to_f64(), c[3].to_f64()))
            .collect())
    }

    pub fn backward(&mut self, dq: &[Quaternion]) -> Result<QTensor<T>> {
        let data = dq.iter().flat_map(|q| q.to_array()).map(T::from_f64).collect();
        let dy = QTensor::from_vec([dq.len(), 1, 1, 1, Q], data)?;
        self.body.backward(&dy)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.body.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.body.params_mut()
    }

    pub fn state(&self) -> Vec<NamedTensor> {
        collect_state(&self.body.params(), &self.body.buffers())
    }

    pub fn load_state(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        restore_module(tensors, &mut self.body, Vec::new())
    }

    /// Mean geodesic angle between predictions and targets in evaluation mode.
    pub fn mean_angular_error(&mut self, data: &OrientedSet<T>, batch_size: usize) -> Result<f64> {
        let n = data.len();
        let mut total = 0.0;
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let (x, targets) = data.batch(chunk)?;
            for (p, t) in self.forward(&x, false)?.into_iter().zip(targets) {
                total += angular_loss(p, t)?.0;
            }
        }
        Ok(total / n as f64)
    }
}

/// Mapped images with unit-quaternion orientation targets.
#[derive(Debug, Clone)]
pub struct OrientedSet<T> {
    pub inputs: QTensor<T>,
    pub targets: Vec<Quaternion>,
}

impl<T: Real> OrientedSet<T> {
    pub fn from_samples(samples: &[SyntheticOrientedSample], mapping: MappingStrategy) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| QuanError::Range("oriented set needs at least one sample".into()))?;
        let (h, w) = (first.image.height, first.image.width);
        let mut inputs = QTensor::zeros(Shape::new(samples.len(), 1, h, w));
        for (s, dst) in samples.iter().zip(inputs.data_mut().chunks_exact_mut(h * w * Q)) {
            map_image_into(&s.image.pixels, s.image.height, s.image.width, mapping, dst)?;
        }
        let targets = samples.iter().map(|s| s.target.orientation).collect();
        Ok(OrientedSet { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(QTensor<T>, Vec<Quaternion>)> {
        let x = crate::data::gather(&self.inputs, indices)?;
        Ok((x, indices.iter().map(|&i| self.targets[i]).collect()))
    }
}

impl<T: Real> Trainable<OrientedSet<T>> for OrientationNet<T> {
    type Elem = T;

    fn samples(data: &OrientedSet<T>) -> usize {
        data.len()
    }

    /// Loss per sample is `λ1·angular + λ2·reg`; the metric counts predictions
    /// within 0.3 rad of the target.
    fn run_batch(&mut self, data: &OrientedSet<T>, indices: &[usize], train: bool, _rng: &mut ChaCha8Rng) -> Result<BatchStats> {
        let (x, targets) = data.batch(indices)?;
        let preds = self.forward(&x, train)?;
        let w = self.cfg.weights;
        let inv = 1.0 / preds.len() as f64;
        let mut stats = BatchStats::default();
        let mut grads = Vec::with_capacity(preds.len());
        for (p, t) in preds.into_iter().zip(targets) {
            let (ang, ga) = angular_loss(p, t)?;
            let (reg, gr) = reg_loss(p);
            stats.loss_sum += w.lambda1 * ang + w.lambda2 * reg;
            stats.metric_sum += f64::from(u8::from(ang < ORIENTATION_HIT));
            stats.count += 1;
            grads.push((ga.scale(w.lambda1) + gr.scale(w.lambda2)).scale(inv));
        }
        if train {
            self.backward(&grads)?;
        }
        Ok(stats)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        OrientationNet::params_mut(self)
    }
}

/// Angular error (radians) under which an orientation counts as a hit.
pub const ORIENTATION_HIT: f64 = 0.3;
