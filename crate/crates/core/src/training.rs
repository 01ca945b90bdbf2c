//! Two-stage training with the ALI-G step rule.
//!
//! Stage 1 trains the image and score backbones separately, each with a
//! pooled classifier head. Stage 2 freezes both backbones, precomputes their
//! node sequences once, and trains the attention module and the final head.
//!
//! Mini-batches run one sample per task on the rayon pool. Every sample gets
//! its own dropout stream keyed by `(epoch, sample index)` and gradients are
//! summed in batch order, so results do not depend on the thread count.

use crate::aggregation::aggregate_pair;
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::features::{align_spatial, Backbone, PooledClassifier};
use crate::filtering::{acf, argmax_labels};
use crate::gldm::{extend_with_global, BlockCache, ExtendedSequence, Gldm, GldmCache};
use crate::impl_parameterized;
use crate::io::{Checkpoint, RunConfig};
use crate::recognition::{argmax, cross_entropy, top1_accuracy, ClassifierHead, HeadCache};
use crate::rng::RngState;
use crate::tensor::{global_avg_pool, DropoutMode, Parameterized, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const ALIG_DELTA: f64 = 1e-5;

// stream ids
const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const DROPOUT: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub eta: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn stage1(c: &RunConfig) -> Self {
        Self {
            stage: 1,
            eta: c.stage1_eta,
            dropout: c.stage1_dropout,
            batch_size: c.batch_size,
            epochs: c.stage1_epochs,
            seed: c.seed,
        }
    }

    pub fn stage2(c: &RunConfig) -> Self {
        Self {
            stage: 2,
            eta: c.stage2_eta,
            dropout: c.stage2_dropout,
            batch_size: c.batch_size,
            epochs: c.stage2_epochs,
            seed: c.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("stage{}_eta", self.stage), "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("stage{}_dropout", self.stage), "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// `γ = min(η, loss / (Σ‖g‖² + δ))`, then `θ ← θ − γ·g` for every
/// trainable parameter. Returns γ.
pub fn alig_step(model: &mut impl Parameterized, loss: f64, eta: f64) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    let mut norm_sq = 0.0;
    for (name, p) in model.params() {
        if p.frozen {
            continue;
        }
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        norm_sq += p.grad.sum_sq();
    }
    let gamma = eta.min(loss / (norm_sq + ALIG_DELTA));
    for (_, p) in model.params_mut() {
        if p.frozen {
            continue;
        }
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= gamma * g;
        }
    }
    Ok(gamma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples (train mode).
    pub loss: f64,
    /// Training accuracy of the train-mode predictions.
    pub accuracy: f64,
    /// Mean ALI-G step size.
    pub gamma: f64,
}

/// Tab-separated metrics with a header line.
pub fn metrics_tsv(runs: &[(&str, &[EpochMetrics])]) -> String {
    let mut s = String::from("run\tepoch\tloss\taccuracy\tgamma\n");
    for (name, rows) in runs {
        for m in rows.iter() {
            s.push_str(&format!("{name}\t{}\t{:.9}\t{:.6}\t{:.9e}\n", m.epoch, m.loss, m.accuracy, m.gamma));
        }
    }
    s
}

/// One forward/backward on a single sample. Returns the loss and the
/// predicted class; gradients accumulate into the model.
pub trait SampleStep<X>: Parameterized + Clone + Send + Sync {
    fn step(&mut self, input: &X, target: usize, rng: &mut ChaCha8Rng, dropout: DropoutMode) -> Result<(f64, usize)>;
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch ALI-G training.
pub fn train_loop<M, X>(model: &mut M, inputs: &[X], targets: &[usize], cfg: &StageConfig, run: u64) -> Result<Vec<EpochMetrics>>
where
    M: SampleStep<X>,
    X: Sync,
{
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Data(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    let root = RngState::new(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut root.stream(&[SHUFFLE, run, epoch as u64]));
        let (mut loss_sum, mut correct, mut gamma_sum, mut steps) = (0.0, 0usize, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &M = model;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mut m = snapshot.clone();
                    m.zero_grad();
                    let mut rng = root.stream(&[DROPOUT, run, epoch as u64, i as u64]);
                    let (loss, pred) = m.step(&inputs[i], targets[i], &mut rng, DropoutMode::Train)?;
                    Ok((loss, pred == targets[i], m.grads()))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = batch.len() as f64;
            let mut batch_loss = 0.0;
            model.zero_grad();
            for (loss, ok, grads) in &results {
                batch_loss += loss;
                correct += usize::from(*ok);
                for ((_, p), g) in model.params_mut().into_iter().zip(grads) {
                    p.grad.add_assign(g)?;
                }
            }
            for (_, p) in model.params_mut() {
                p.grad = p.grad.scale(1.0 / n);
            }
            loss_sum += batch_loss;
            gamma_sum += alig_step(model, batch_loss / n, cfg.eta)?;
            steps += 1;
        }
        model.zero_grad();
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / inputs.len() as f64,
            accuracy: correct as f64 / inputs.len() as f64,
            gamma: gamma_sum / steps as f64,
        });
    }
    Ok(metrics)
}

impl SampleStep<Tensor> for PooledClassifier {
    fn step(&mut self, input: &Tensor, target: usize, rng: &mut ChaCha8Rng, mode: DropoutMode) -> Result<(f64, usize)> {
        let (logits, cache) = self.forward(input, mode, rng)?;
        let (loss, g) = cross_entropy(&logits, target)?;
        self.backward(&cache, &g)?;
        Ok((loss, argmax(logits.data())))
    }
}

/// Mean eval-mode cross-entropy of a model over a set of inputs.
pub fn mean_loss<X: Sync>(logits: impl Fn(&X) -> Result<Tensor> + Sync, inputs: &[X], targets: &[usize]) -> Result<f64> {
    let losses = inputs
        .par_iter()
        .zip(targets)
        .map(|(x, &t)| Ok(cross_entropy(&logits(x)?, t)?.0))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Score-branch input: the filtered score tensor.
pub fn ssrm_input(sample: &Sample, filter_kernel: usize) -> Result<Tensor> {
    Ok(acf(&sample.scores, filter_kernel)?.into_tensor())
}

fn check_dataset(data: &Dataset, config: &RunConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if data.classes != config.classes {
        return Err(Error::config("classes", format!("config says {}, dataset has {}", config.classes, data.classes)));
    }
    if data.objects != config.objects {
        return Err(Error::config("objects", format!("config says {}, dataset has {}", config.objects, data.objects)));
    }
    let m = config.input_multiple();
    for s in &data.samples {
        let (h, w, _) = s.image.dims3()?;
        if h % m != 0 || w % m != 0 {
            return Err(Error::config(
                "ifem_downsample",
                format!("image {h}x{w} is not a multiple of {m} (filter kernel and backbone strides)"),
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub ifem: PooledClassifier,
    pub ssrm: PooledClassifier,
    pub ifem_metrics: Vec<EpochMetrics>,
    pub ssrm_metrics: Vec<EpochMetrics>,
}

impl Stage1Output {
    pub fn checkpoints(&self, config: &RunConfig) -> (Checkpoint, Checkpoint) {
        let mk = |prefix: &str, m: &PooledClassifier, log: &[EpochMetrics]| {
            let mut c = Checkpoint::new(1, log.len(), config);
            c.add_model(prefix, m);
            if let Some(last) = log.last() {
                c.scalars.push(("loss".into(), last.loss));
                c.scalars.push(("gamma".into(), last.gamma));
            }
            c.scalars.push(("eta".into(), config.stage1_eta));
            c
        };
        (mk("ifem", &self.ifem, &self.ifem_metrics), mk("ssrm", &self.ssrm, &self.ssrm_metrics))
    }
}

pub fn new_pooled_classifiers(config: &RunConfig) -> Result<(PooledClassifier, PooledClassifier)> {
    let root = RngState::new(config.seed);
    let mut r = root.stream(&[INIT, 0]);
    let ifem = PooledClassifier {
        backbone: Backbone::new(config.ifem_backbone()?, &mut r)?,
        head: ClassifierHead::new(config.channels, config.classes, config.stage1_dropout, &mut r),
    };
    let mut r = root.stream(&[INIT, 1]);
    let ssrm = PooledClassifier {
        backbone: Backbone::new(config.ssrm_backbone()?, &mut r)?,
        head: ClassifierHead::new(config.channels, config.classes, config.stage1_dropout, &mut r),
    };
    Ok((ifem, ssrm))
}

/// Trains the image branch on images and the score branch on filtered
/// scores, independently, each with its own pooled head.
pub fn train_stage1(data: &Dataset, config: &RunConfig) -> Result<Stage1Output> {
    check_dataset(data, config)?;
    let cfg = StageConfig::stage1(config);
    let (mut ifem, mut ssrm) = new_pooled_classifiers(config)?;
    let targets = data.labels();
    let images: Vec<Tensor> = data.samples.iter().map(|s| s.image.clone()).collect();
    let ifem_metrics = train_loop(&mut ifem, &images, &targets, &cfg, 0)?;
    let filtered = data
        .samples
        .par_iter()
        .map(|s| ssrm_input(s, config.filter_kernel))
        .collect::<Result<Vec<_>>>()?;
    let ssrm_metrics = train_loop(&mut ssrm, &filtered, &targets, &cfg, 1)?;
    Ok(Stage1Output { ifem, ssrm, ifem_metrics, ssrm_metrics })
}

/// Frozen-backbone outputs needed by every stage-2 head.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeInputs {
    /// Image node sequence with its global node, before positional embedding.
    pub rgb: ExtendedSequence,
    /// Spatial node sequence with its global node, before positional embedding.
    pub spatial: ExtendedSequence,
    /// `max(gap F_I, gap F_S)` for the pooled-fusion ablation.
    pub pooled_max: Tensor,
}

/// Stage-2 trainable part: optional attention module plus classifier head.
/// Without the attention module the head reads `pooled_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub gldm: Option<Gldm>,
    pub head: ClassifierHead,
}

impl_parameterized!(FusionHead { gldm, head });

pub struct FusionCache {
    pub gldm: Option<GldmCache>,
    head: HeadCache,
}

impl FusionCache {
    /// Attention matrices of the rgb encoder, spatial encoder and decoder.
    pub fn attention(&self) -> Vec<(&'static str, &[Tensor])> {
        let mut out = Vec::new();
        if let Some(g) = &self.gldm {
            let blocks: [(&'static str, Option<&BlockCache>); 3] = [
                ("encoder_rgb", Some(&g.encoder_rgb)),
                ("encoder_spatial", Some(&g.encoder_spatial)),
                ("decoder", g.decoder.as_ref()),
            ];
            for (n, b) in blocks {
                if let Some(b) = b {
                    out.push((n, b.attention()));
                }
            }
        }
        out
    }
}

/// Which stage-2 head to train; the ablation rows above the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    PooledMax,
    Encoder,
    Full,
}

impl Variant {
    fn id(self) -> u64 {
        match self {
            Variant::PooledMax => 0,
            Variant::Encoder => 1,
            Variant::Full => 2,
        }
    }
}

impl FusionHead {
    pub fn new(config: &RunConfig, variant: Variant) -> Result<Self> {
        let mut r = RngState::new(config.seed).stream(&[INIT, 2, variant.id()]);
        let gldm = match variant {
            Variant::PooledMax => None,
            Variant::Encoder => Some(Gldm::new(&crate::gldm::GldmConfig { decoder: false, ..config.gldm() }, &mut r)?),
            Variant::Full => Some(Gldm::new(&crate::gldm::GldmConfig { decoder: true, ..config.gldm() }, &mut r)?),
        };
        Ok(Self {
            gldm,
            head: ClassifierHead::new(config.channels, config.classes, config.stage2_dropout, &mut r),
        })
    }

    /// Scene representation `F_o` (or the pooled maximum) before the head.
    pub fn features(&self, x: &NodeInputs) -> Result<(Tensor, Option<GldmCache>)> {
        match &self.gldm {
            Some(g) => {
                let (fo, cache) = g.forward_extended(&x.rgb, &x.spatial)?;
                Ok((fo, Some(cache)))
            }
            None => Ok((x.pooled_max.clone(), None)),
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &NodeInputs, mode: DropoutMode, rng: &mut R) -> Result<(Tensor, FusionCache)> {
        let (f, gldm) = self.features(x)?;
        let (logits, head) = self.head.forward(&f, mode, rng)?;
        Ok((logits, FusionCache { gldm, head }))
    }

    pub fn backward(&mut self, cache: &FusionCache, grad_logits: &Tensor) -> Result<()> {
        let g = self.head.backward(&cache.head, grad_logits)?;
        if let (Some(m), Some(c)) = (&mut self.gldm, &cache.gldm) {
            m.backward(c, &g)?;
        }
        Ok(())
    }

    pub fn logits(&self, x: &NodeInputs) -> Result<Tensor> {
        self.head.logits(&self.features(x)?.0)
    }
}

impl SampleStep<NodeInputs> for FusionHead {
    fn step(&mut self, input: &NodeInputs, target: usize, rng: &mut ChaCha8Rng, mode: DropoutMode) -> Result<(f64, usize)> {
        let (logits, cache) = self.forward(input, mode, rng)?;
        let (loss, g) = cross_entropy(&logits, target)?;
        self.backward(&cache, &g)?;
        Ok((loss, argmax(logits.data())))
    }
}

/// Full model: both stage-1 branches plus the stage-2 fusion head.
#[derive(Clone, Debug, PartialEq)]
pub struct SpacoNet {
    pub config: RunConfig,
    pub ifem: PooledClassifier,
    pub ssrm: PooledClassifier,
    pub fusion: FusionHead,
}

impl_parameterized!(SpacoNet { ifem, ssrm, fusion });

impl SpacoNet {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (ifem, ssrm) = new_pooled_classifiers(config)?;
        let variant = if config.decoder { Variant::Full } else { Variant::Encoder };
        Ok(Self {
            config: config.clone(),
            ifem,
            ssrm,
            fusion: FusionHead::new(config, variant)?,
        })
    }

    /// Runs the frozen branches: features, filtering, aggregation and global
    /// nodes. Ingested feature grids bypass both backbones.
    pub fn node_inputs(&self, sample: &Sample) -> Result<NodeInputs> {
        let k = self.config.filter_kernel;
        let (fi, fs_raw) = match &sample.features {
            Some(f) => {
                let c = f.image.tensor().shape()[2];
                if c != self.config.channels {
                    return Err(Error::Dimension(format!(
                        "ingested feature grids have {c} channels, model expects {}",
                        self.config.channels
                    )));
                }
                (f.image.clone(), f.spatial.clone())
            }
            None => (
                self.ifem.backbone.features(&sample.image)?,
                self.ssrm.backbone.features(&ssrm_input(sample, k)?)?,
            ),
        };
        let fs = align_spatial(&fs_raw, fi.height(), fi.width(), fi.downsample())?;
        let pair = aggregate_pair(&fi, &fs, &sample.scores, k)?;
        let pooled_max = global_avg_pool(fi.tensor())?.zip_map(&global_avg_pool(fs.tensor())?, f64::max)?;
        Ok(NodeInputs {
            rgb: extend_with_global(&pair.rgb, &fi)?,
            spatial: extend_with_global(&pair.spatial, &fs)?,
            pooled_max,
        })
    }

    pub fn node_inputs_all(&self, data: &Dataset) -> Result<Vec<NodeInputs>> {
        data.samples.par_iter().map(|s| self.node_inputs(s)).collect()
    }

    pub fn logits(&self, sample: &Sample) -> Result<Tensor> {
        self.fusion.logits(&self.node_inputs(sample)?)
    }

    pub fn predict(&self, sample: &Sample) -> Result<usize> {
        Ok(argmax(self.logits(sample)?.data()))
    }

    pub fn predict_all(&self, data: &Dataset) -> Result<Vec<usize>> {
        data.samples.par_iter().map(|s| self.predict(s)).collect()
    }

    /// Image-branch-only predictions with its stage-1 head.
    pub fn baseline_predict_all(&self, data: &Dataset) -> Result<Vec<usize>> {
        data.samples
            .par_iter()
            .map(|s| Ok(argmax(self.ifem.logits(&s.image)?.data())))
            .collect()
    }

    /// Mean stage-2 loss over `samples`, computed end to end from raw
    /// inputs, with gradients accumulated into the trainable parameters.
    /// Dropout draws come from `rng`.
    pub fn stage2_batch_loss<R: Rng + ?Sized>(&mut self, samples: &[&Sample], mode: DropoutMode, rng: &mut R) -> Result<f64> {
        let n = samples.len() as f64;
        let mut total = 0.0;
        for s in samples {
            let x = self.node_inputs(s)?;
            let (logits, cache) = self.fusion.forward(&x, mode, rng)?;
            let (loss, g) = cross_entropy(&logits, s.class)?;
            self.fusion.backward(&cache, &g.scale(1.0 / n))?;
            total += loss;
        }
        Ok(total / n)
    }

    pub fn set_backbones_frozen(&mut self, frozen: bool) {
        self.ifem.set_frozen(frozen);
        self.ssrm.set_frozen(frozen);
    }

    pub fn to_checkpoint(&self, stage: u8, epoch: usize) -> Checkpoint {
        let mut c = Checkpoint::new(stage, epoch, &self.config);
        c.add_model("ifem", &self.ifem);
        c.add_model("ssrm", &self.ssrm);
        c.add_model("fusion", &self.fusion);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(&ckpt.config)?;
        ckpt.load_into("ifem", &mut m.ifem)?;
        ckpt.load_into("ssrm", &mut m.ssrm)?;
        ckpt.load_into("fusion", &mut m.fusion)?;
        Ok(m)
    }

    /// Backbone-only digest used to check the freeze contract.
    pub fn backbone_digest(&self) -> String {
        let mut c = Checkpoint::new(0, 0, &self.config);
        c.add_model("ifem", &self.ifem);
        c.add_model("ssrm", &self.ssrm);
        c.digest("")
    }
}

/// Loads both stage-1 branches into a fresh model.
pub fn model_from_stage1(config: &RunConfig, ifem: &Checkpoint, ssrm: &Checkpoint) -> Result<SpacoNet> {
    let mut m = SpacoNet::new(config)?;
    ifem.load_into("ifem", &mut m.ifem)?;
    ssrm.load_into("ssrm", &mut m.ssrm)?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub model: SpacoNet,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains a fusion head of the given variant on top of frozen branches.
pub fn train_fusion(model: &SpacoNet, inputs: &[NodeInputs], targets: &[usize], variant: Variant) -> Result<(FusionHead, Vec<EpochMetrics>)> {
    let cfg = StageConfig::stage2(&model.config);
    let mut head = FusionHead::new(&model.config, variant)?;
    let metrics = train_loop(&mut head, inputs, targets, &cfg, 2 + variant.id())?;
    Ok((head, metrics))
}

/// Freezes the branches of `model` and trains its fusion head.
pub fn train_stage2(data: &Dataset, mut model: SpacoNet) -> Result<Stage2Output> {
    check_dataset(data, &model.config)?;
    model.set_backbones_frozen(true);
    let before = model.backbone_digest();
    let inputs = model.node_inputs_all(data)?;
    let variant = if model.config.decoder { Variant::Full } else { Variant::Encoder };
    let (fusion, metrics) = train_fusion(&model, &inputs, &data.labels(), variant)?;
    model.fusion = fusion;
    debug_assert_eq!(before, model.backbone_digest());
    Ok(Stage2Output { model, metrics })
}

/// Nearest-centroid classifier on normalised object histograms of the
/// filtered label map.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramClassifier {
    pub filter_kernel: usize,
    pub centroids: Vec<Vec<f64>>,
}

impl HistogramClassifier {
    pub fn histogram(sample: &Sample, filter_kernel: usize) -> Result<Vec<f64>> {
        let labels = argmax_labels(&acf(&sample.scores, filter_kernel)?);
        let n = labels.data().len() as f64;
        Ok(labels.histogram().into_iter().map(|c| c as f64 / n).collect())
    }

    pub fn fit(data: &Dataset, filter_kernel: usize) -> Result<Self> {
        let mut sums = vec![vec![0.0; data.objects]; data.classes];
        let mut counts = vec![0usize; data.classes];
        for s in &data.samples {
            for (a, b) in sums[s.class].iter_mut().zip(Self::histogram(s, filter_kernel)?) {
                *a += b;
            }
            counts[s.class] += 1;
        }
        for (c, n) in sums.iter_mut().zip(counts) {
            if n > 0 {
                c.iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        Ok(Self { filter_kernel, centroids: sums })
    }

    pub fn predict(&self, sample: &Sample) -> Result<usize> {
        let h = Self::histogram(sample, self.filter_kernel)?;
        let neg_dist: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -c.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        Ok(argmax(&neg_dist))
    }

    pub fn predict_all(&self, data: &Dataset) -> Result<Vec<usize>> {
        data.samples.iter().map(|s| self.predict(s)).collect()
    }
}

/// Accuracy over the samples whose true class is in `classes`.
pub fn subset_accuracy(predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    let (p, l): (Vec<usize>, Vec<usize>) = predictions
        .iter()
        .zip(labels)
        .filter(|(_, l)| classes.contains(l))
        .map(|(&p, &l)| (p, l))
        .unzip();
    top1_accuracy(&p, &l)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Full model (branches plus decoder head).
    pub model: SpacoNet,
    pub stage1: Stage1Output,
    pub stage2_metrics: Vec<(&'static str, Vec<EpochMetrics>)>,
    /// Test-set predictions per row, in row order.
    pub predictions: Vec<Vec<usize>>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut s = String::from("row\tconfiguration\taccuracy\n");
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!("{}\t{}\t{:.6}\n", i + 1, r.name, r.accuracy));
        }
        s
    }
}

pub const ABLATION_ROWS: [&str; 4] = ["baseline", "+SSRM", "+Encoder", "+Decoder"];

/// Trains both stages once and the three stage-2 heads on the same frozen
/// branches; reports test accuracy for baseline, +SSRM, +Encoder, +Decoder.
pub fn ablation_suite(train: &Dataset, test: &Dataset, config: &RunConfig) -> Result<AblationReport> {
    check_dataset(train, config)?;
    check_dataset(test, config)?;
    let stage1 = train_stage1(train, config)?;
    let mut model = SpacoNet::new(config)?;
    model.ifem = stage1.ifem.clone();
    model.ssrm = stage1.ssrm.clone();
    model.set_backbones_frozen(true);
    let train_inputs = model.node_inputs_all(train)?;
    let test_inputs = model.node_inputs_all(test)?;
    let targets = train.labels();
    let truth = test.labels();

    let mut predictions = vec![model.baseline_predict_all(test)?];
    let mut stage2_metrics = Vec::new();
    let mut full = None;
    for (variant, name) in [(Variant::PooledMax, "+SSRM"), (Variant::Encoder, "+Encoder"), (Variant::Full, "+Decoder")] {
        let (head, metrics) = train_fusion(&model, &train_inputs, &targets, variant)?;
        predictions.push(
            test_inputs
                .par_iter()
                .map(|x| Ok(argmax(head.logits(x)?.data())))
                .collect::<Result<Vec<_>>>()?,
        );
        stage2_metrics.push((name, metrics));
        if variant == Variant::Full {
            full = Some(head);
        }
    }
    let rows = ABLATION_ROWS
        .iter()
        .zip(&predictions)
        .map(|(&name, p)| Ok(AblationRow { name, accuracy: top1_accuracy(p, &truth)? }))
        .collect::<Result<Vec<_>>>()?;
    model.fusion = full.expect("full variant trained");
    model.config.decoder = true;
    Ok(AblationReport { rows, model, stage1, stage2_metrics, predictions })
}
