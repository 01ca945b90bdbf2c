//! File-level workflows shared by the command-line tool and the tests:
//! dataset generation, two-stage training, evaluation, gradient checks,
//! inspection dumps and the ablation table.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{Backbone, BackboneConfig, Cham, PooledClassifier, ResBlock, BackboneStage};
use crate::gldm::{AttentionBlock, ExtendedSequence, Gldm, GldmConfig, MultiHeadAttention};
use crate::io::{write_atomic, Checkpoint, RunConfig, TensorFile};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::recognition::{cross_entropy, top1_accuracy, ClassifierHead};
use crate::rng::RngState;
use crate::synth::{generate_dataset, write_dataset, SceneSpec};
use crate::tensor::{grad_check, DropoutMode, GradCheckOptions, GradCheckReport, Parameter, Parameterized, Tensor};
use crate::training::{
    ablation_suite, metrics_tsv, model_from_stage1, train_stage1, train_stage2, AblationReport, FusionHead, SpacoNet,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const IFEM_CHECKPOINT: &str = "stage1_ifem.ckpt";
pub const SSRM_CHECKPOINT: &str = "stage1_ssrm.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const ABLATION_FILE: &str = "ablation.tsv";

/// Renders `n_train + n_test` scenes and writes them with both manifests.
pub fn gen_data(spec: &SceneSpec, n_train: usize, n_test: usize, out: &Path) -> Result<()> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Argument("both splits need at least one sample".into()));
    }
    let data = generate_dataset(spec, n_train, n_test)?;
    write_dataset(&data, spec, out)
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: SpacoNet,
    pub metrics: String,
}

/// Runs both training stages and writes the stage-1 checkpoints, the final
/// model, the metrics log and the resolved config into `out`.
///
/// With `stage1_from`, stage 1 is skipped and its checkpoints are read from
/// that directory instead.
pub fn train(config: &RunConfig, manifest: &Path, out: &Path, stage1_from: Option<&Path>) -> Result<TrainOutput> {
    config.validate()?;
    let data = Dataset::load(manifest)?;
    std::fs::create_dir_all(out)?;
    config.write_resolved(out)?;
    let (ifem_ckpt, ssrm_ckpt, mut runs) = match stage1_from {
        Some(dir) => {
            let ifem = Checkpoint::read(&dir.join(IFEM_CHECKPOINT))?;
            let ssrm = Checkpoint::read(&dir.join(SSRM_CHECKPOINT))?;
            (ifem, ssrm, Vec::new())
        }
        None => {
            let s1 = train_stage1(&data, config)?;
            let (a, b) = s1.checkpoints(config);
            (a, b, vec![("ifem", s1.ifem_metrics), ("ssrm", s1.ssrm_metrics)])
        }
    };
    ifem_ckpt.write(&out.join(IFEM_CHECKPOINT))?;
    ssrm_ckpt.write(&out.join(SSRM_CHECKPOINT))?;
    let model = model_from_stage1(config, &ifem_ckpt, &ssrm_ckpt)?;
    let s2 = train_stage2(&data, model)?;
    let mut ckpt = s2.model.to_checkpoint(2, s2.metrics.len());
    if let Some(last) = s2.metrics.last() {
        ckpt.scalars.push(("loss".into(), last.loss));
        ckpt.scalars.push(("gamma".into(), last.gamma));
    }
    ckpt.scalars.push(("eta".into(), config.stage2_eta));
    ckpt.write(&out.join(MODEL_CHECKPOINT))?;
    runs.push(("fusion", s2.metrics));
    let views: Vec<(&str, &[_])> = runs.iter().map(|(n, m)| (*n, &m[..])).collect();
    let metrics = metrics_tsv(&views);
    write_atomic(&out.join(METRICS_FILE), metrics.as_bytes())?;
    Ok(TrainOutput { model: s2.model, metrics })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EvalOutput {
    /// `index\tlabel\tprediction`, one line per sample.
    pub fn render(&self) -> String {
        let mut s = String::from("index\tlabel\tprediction\n");
        for (i, (l, p)) in self.labels.iter().zip(&self.predictions).enumerate() {
            s.push_str(&format!("{i}\t{l}\t{p}\n"));
        }
        s
    }
}

/// Predicts every sample of `manifest` and writes the per-sample file and the
/// checkpoint's resolved config next to it.
pub fn eval(checkpoint: &Path, manifest: &Path, predictions_out: &Path) -> Result<EvalOutput> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let model = SpacoNet::from_checkpoint(&ckpt)?;
    let data = Dataset::load(manifest)?;
    if data.classes != model.config.classes || data.objects != model.config.objects {
        return Err(Error::config(
            "classes",
            format!(
                "checkpoint expects {} classes and {} objects, manifest has {} and {}",
                model.config.classes, model.config.objects, data.classes, data.objects
            ),
        ));
    }
    if data.is_empty() {
        return Err(Error::Data("manifest lists no samples".into()));
    }
    let predictions = model.predict_all(&data)?;
    let labels = data.labels();
    let out = EvalOutput { accuracy: top1_accuracy(&predictions, &labels)?, predictions, labels };
    write_atomic(predictions_out, out.render().as_bytes())?;
    model.config.write_resolved(parent_dir(predictions_out))?;
    Ok(out)
}

fn parent_dir(p: &Path) -> &Path {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    }
}

/// Writes, for sample `index` of `manifest`:
/// `rgb_sequence.spc` and `spatial_sequence.spc` (`(l+1)×c`, global node
/// last), `f_o.spc` (`c`), `logits.spc`, and one `(l+1)×(l+1)` matrix per
/// attention block and head as `attention_<block>_h<k>.spc`.
/// Returns the written paths.
pub fn inspect(checkpoint: &Path, manifest: &Path, index: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let model = SpacoNet::from_checkpoint(&Checkpoint::read(checkpoint)?)?;
    let data = Dataset::load(manifest)?;
    let sample = data
        .samples
        .get(index)
        .ok_or_else(|| Error::Argument(format!("sample {index} out of range, manifest has {}", data.len())))?;
    let x = model.node_inputs(sample)?;
    let (logits, cache) = model.fusion.forward(&x, DropoutMode::Eval, &mut RngState::new(0).rng())?;
    let (fo, _) = model.fusion.features(&x)?;
    std::fs::create_dir_all(out)?;
    let mut files = vec![
        ("rgb_sequence".to_string(), x.rgb.tensor().clone()),
        ("spatial_sequence".to_string(), x.spatial.tensor().clone()),
        ("f_o".to_string(), fo),
        ("logits".to_string(), logits),
    ];
    for (block, heads) in cache.attention() {
        for (h, a) in heads.iter().enumerate() {
            files.push((format!("attention_{block}_h{h}"), a.clone()));
        }
    }
    let mut written = Vec::new();
    for (name, t) in files {
        let p = out.join(format!("{name}.spc"));
        TensorFile::from_tensor_f64(&t).write(&p)?;
        written.push(p);
    }
    model.config.write_resolved(out)?;
    Ok(written)
}

/// Trains every ablation configuration and writes `ablation.tsv` plus the
/// resolved config into `out`.
pub fn ablate(config: &RunConfig, train: &Path, test: &Path, out: &Path) -> Result<AblationReport> {
    config.validate()?;
    let train = Dataset::load(train)?;
    let test = Dataset::load(test)?;
    let report = ablation_suite(&train, &test, config)?;
    std::fs::create_dir_all(out)?;
    config.write_resolved(out)?;
    write_atomic(&out.join(ABLATION_FILE), report.render().as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub report: GradCheckReport,
    pub passed: bool,
}

/// Input tensor exposed as a parameter so its gradient is checked as well.
struct Probe<M> {
    input: Parameter,
    module: M,
}

impl<M: Parameterized> Parameterized for Probe<M> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter)>) {
        self.input.collect_params(&crate::tensor::join_name(prefix, "input"), out);
        self.module.collect_params(prefix, out);
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter)>) {
        self.input.collect_params_mut(&crate::tensor::join_name(prefix, "input"), out);
        self.module.collect_params_mut(prefix, out);
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Moves every parameter away from its (often degenerate) initial value.
fn jitter(m: &mut impl Parameterized, rng: &mut ChaCha8Rng) {
    for (_, p) in m.params_mut() {
        let noise = Tensor::randn(p.value.shape(), 0.1, rng);
        p.value.add_assign(&noise).expect("same shape");
    }
}

/// Checks a module and its input gradient through the scalar `Σ w ⊙ y`
/// for fixed random `w`; `run` gets `(module, x, w)` and returns the scalar
/// and `∂/∂x`, accumulating parameter gradients on the way.
fn probe_check<M, F>(
    module: M,
    input_shape: &[usize],
    output_shape: &[usize],
    rng: &mut ChaCha8Rng,
    opts: GradCheckOptions,
    mut run: F,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut M, &Tensor, &Tensor) -> Result<(f64, Tensor)>,
{
    let mut p = Probe { input: Parameter::new(Tensor::randn(input_shape, 1.0, rng)), module };
    jitter(&mut p.module, rng);
    let w = Tensor::randn(output_shape, 1.0, rng);
    grad_check(
        &mut p,
        |m| {
            let x = m.input.value.clone();
            let (f, gx) = run(&mut m.module, &x, &w)?;
            m.input.accumulate(&gx);
            Ok(f)
        },
        opts,
    )
}

/// Pooled classifier check on a tiny backbone, loss = cross-entropy.
fn pooled_check(cham: Option<usize>, in_channels: usize, rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let config = BackboneConfig {
        in_channels,
        stem_width: 4,
        stem_stride: 2,
        stages: vec![
            BackboneStage { width: 4, stride: 1, blocks: 1 },
            BackboneStage { width: 8, stride: 2, blocks: 1 },
        ],
        cham_reduction: cham,
    };
    let mut m = PooledClassifier {
        backbone: Backbone::new(config, rng)?,
        head: ClassifierHead::new(8, 3, 0.0, rng),
    };
    jitter(&mut m, rng);
    let x = Tensor::randn(&[8, 8, in_channels], 1.0, rng);
    grad_check(
        &mut m,
        |m| {
            let (z, cache) = m.forward(&x, DropoutMode::Eval, &mut RngState::new(0).rng())?;
            let (l, g) = cross_entropy(&z, 1)?;
            m.backward(&cache, &g)?;
            Ok(l)
        },
        opts,
    )
}

/// Config used for the full stage-2 loss check: `c = 16`, `l = 4`.
pub fn grad_check_model_config(base: &RunConfig) -> RunConfig {
    RunConfig {
        classes: 4,
        objects: 4,
        channels: 16,
        heads: 4,
        mlp_ratio: 4,
        decoder: true,
        cham_reduction: 4,
        ..base.clone()
    }
}

/// Two random 32×32 samples for the stage-2 loss check.
fn random_batch(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Vec<crate::dataset::Sample>> {
    use crate::filtering::ScoreTensor;
    (0..2)
        .map(|i| {
            let raw = Tensor::randn(&[32, 32, config.objects], 2.0, rng);
            let mut scores = raw.clone();
            for cell in scores.data_mut().chunks_mut(config.objects) {
                let m = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = cell.iter().map(|v| (v - m).exp()).sum();
                cell.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
            }
            Ok(crate::dataset::Sample {
                image: Tensor::randn(&[32, 32, 3], 1.0, rng),
                scores: ScoreTensor::new(scores)?,
                labels: None,
                class: i % config.classes,
                features: None,
            })
        })
        .collect()
}

/// Finite-difference gradient checks for every parameterised operation and
/// for the full stage-2 loss on a two-sample batch. Uses the config's `ε`
/// and tolerance; module sizes and the check point are fixed.
pub fn grad_check_suite(config: &RunConfig) -> Result<Vec<ModuleCheck>> {
    let opts = GradCheckOptions { eps: config.grad_check_eps, max_elems_per_param: None };
    let tol = config.grad_check_tolerance;
    let root = RngState::new(GRAD_CHECK_SEED);
    let mut out = Vec::new();
    let mut push = |module: &'static str, report: GradCheckReport| {
        let passed = report.passes(tol);
        out.push(ModuleCheck { module, report, passed });
    };
    let r = &mut root.stream(&[GRAD_CHECK, 0]);

    let m = Linear::new(5, 3, 1.0, r);
    push("linear", probe_check(m, &[4, 5], &[4, 3], r, opts, |m, x, w| {
        let y = m.forward(x)?;
        Ok((dot(&y, w), m.backward(x, w)?))
    })?);

    let m = LayerNorm::new(6);
    push("layer_norm", probe_check(m, &[3, 6], &[3, 6], r, opts, |m, x, w| {
        let (y, cache) = m.forward(x)?;
        Ok((dot(&y, w), m.backward(&cache, w)))
    })?);

    let m = Conv2d::new(3, 2, 3, 2, 1.0, r);
    push("conv2d", probe_check(m, &[5, 5, 2], &[3, 3, 3], r, opts, |m, x, w| {
        let y = m.forward(x)?;
        Ok((dot(&y, w), m.backward(x, w, true)?.expect("input gradient requested")))
    })?);

    let m = ResBlock::new(2, 4, 2, r);
    push("res_block", probe_check(m, &[6, 6, 2], &[3, 3, 4], r, opts, |m, x, w| {
        let (y, cache) = m.forward(x)?;
        Ok((dot(&y, w), m.backward(&cache, w)?))
    })?);

    let m = Cham::new(4, 2, r);
    push("cham", probe_check(m, &[3, 3, 4], &[3, 3, 4], r, opts, |m, x, w| {
        let (y, cache) = m.forward(x)?;
        Ok((dot(&y, w), m.backward(&cache, w)?))
    })?);

    push("ifem", pooled_check(None, 3, r, opts)?);
    push("ssrm", pooled_check(Some(2), 4, r, opts)?);

    let m = ClassifierHead::new(6, 4, 0.3, r);
    let dropout_seed: u64 = r.random();
    push("classifier_head", probe_check(m, &[6], &[1], r, opts, |m, x, _| {
        let (z, cache) = m.forward(x, DropoutMode::Train, &mut RngState::new(dropout_seed).rng())?;
        let (l, g) = cross_entropy(&z, 2)?;
        Ok((l, m.backward(&cache, &g)?))
    })?);

    let m = MultiHeadAttention::new(16, 4, r)?;
    push("multi_head_attention", probe_check(m, &[5, 16], &[5, 16], r, opts, |m, x, w| {
        let (y, cache) = m.forward(x)?;
        Ok((dot(&y, w), m.backward(&cache, w)?))
    })?);

    let m = AttentionBlock::new(16, 4, 4, r)?;
    push("attention_block", probe_check(m, &[5, 16], &[5, 16], r, opts, |m, x, w| {
        let (y, cache) = m.forward(x)?;
        Ok((dot(&y, w), m.backward(&cache, w)?))
    })?);

    let gcfg = GldmConfig { channels: 16, heads: 4, mlp_ratio: 4, objects: 4, decoder: true };
    let mut g = Gldm::new(&gcfg, r)?;
    jitter(&mut g, r);
    let rgb = ExtendedSequence::new(Tensor::randn(&[5, 16], 1.0, r))?;
    let spa = ExtendedSequence::new(Tensor::randn(&[5, 16], 1.0, r))?;
    let w = Tensor::randn(&[16], 1.0, r);
    push("gldm", grad_check(&mut g, |m| {
        let (fo, cache) = m.forward_extended(&rgb, &spa)?;
        m.backward(&cache, &w)?;
        Ok(dot(&fo, &w))
    }, opts)?);

    push("stage2_loss", stage2_loss_check(config, &mut root.stream(&[GRAD_CHECK, 1]), opts)?);
    Ok(out)
}

const GRAD_CHECK: u64 = 4;
/// The check point is fixed rather than taken from the run seed: at some
/// points a few gradient elements fall near 1e-7, where central differences
/// at ε = 1e-5 are limited by f64 rounding of the loss itself.
const GRAD_CHECK_SEED: u64 = 2;

/// Full stage-2 loss, mean over two samples, with frozen branches and a
/// fixed dropout mask. Every trainable element is checked against node
/// inputs computed once; the end-to-end path from raw samples is then
/// checked on a spread of elements per parameter.
fn stage2_loss_check(base: &RunConfig, r: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let config = grad_check_model_config(base);
    let mut model = SpacoNet::new(&config)?;
    model.set_backbones_frozen(true);
    jitter(&mut model.fusion, r);
    // keep the softmax away from saturation
    let w = &mut model.fusion.head.linear.weight.value;
    *w = w.scale(0.1);
    let batch = random_batch(&config, r)?;
    let refs: Vec<&crate::dataset::Sample> = batch.iter().collect();
    let dropout_seed: u64 = r.random();

    let inputs: Vec<_> = batch.iter().map(|s| model.node_inputs(s)).collect::<Result<_>>()?;
    let mut head: FusionHead = model.fusion.clone();
    let mut report = grad_check(
        &mut head,
        |h| {
            let mut rng = RngState::new(dropout_seed).rng();
            let mut total = 0.0;
            for (x, s) in inputs.iter().zip(&batch) {
                let (z, cache) = h.forward(x, DropoutMode::Train, &mut rng)?;
                let (l, g) = cross_entropy(&z, s.class)?;
                h.backward(&cache, &g.scale(0.5))?;
                total += l;
            }
            Ok(total / 2.0)
        },
        opts,
    )?;
    let end_to_end = grad_check(
        &mut model,
        |m| m.stage2_batch_loss(&refs, DropoutMode::Train, &mut RngState::new(dropout_seed).rng()),
        GradCheckOptions { max_elems_per_param: Some(3), ..opts },
    )?;
    report.entries.extend(end_to_end.entries.into_iter().map(|mut e| {
        e.name = format!("end_to_end.{}", e.name);
        e
    }));
    Ok(report)
}

/// `module\tchecked\tmax_rel_err\tstatus` with a trailing summary line.
pub fn render_grad_check(checks: &[ModuleCheck]) -> String {
    let mut s = String::from("module\tchecked\tmax_rel_err\tstatus\n");
    for c in checks {
        let checked: usize = c.report.entries.iter().map(|e| e.checked).sum();
        s.push_str(&format!(
            "{}\t{}\t{:.3e}\t{}\n",
            c.module,
            checked,
            c.report.max_rel_err(),
            if c.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}
