//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test --release -p spaco-core --test acceptance`.

mod common;

use common::oracles::{oracle_acf, oracle_aggregate, oracle_argmax};
use common::{random_grid, random_labels, random_scores, rng};
use rand::Rng;
use spaco_core::gldm::{merge_max, AttentionBlock, MultiHeadAttention};
use spaco_core::io::TensorData;
use spaco_core::io::{Checkpoint, RunConfig, TensorFile};
use spaco_core::pipeline;
use spaco_core::recognition::argmax;
use spaco_core::synth::{generate_dataset, SceneSpec};
use spaco_core::tensor::softmax_lastdim;
use spaco_core::training::{
    ablation_suite, subset_accuracy, train_stage1, train_stage2, HistogramClassifier, ABLATION_ROWS,
};
use spaco_core::{acf, aggregate, Parameterized, Tensor};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: spaco_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Shared corpus for the first two criteria.
fn acf_corpus() -> Vec<(spaco_core::ScoreTensor, usize)> {
    let mut r = rng(&[1]);
    (0..1000)
        .map(|_| {
            let k = if r.random_bool(0.5) { 2 } else { 4 };
            let h = k * r.random_range(1..=16 / k);
            let w = k * r.random_range(1..=16 / k);
            let l = r.random_range(1..=8);
            (random_scores(h, w, l, &mut r), k)
        })
        .collect()
}

fn acf_oracle_equivalence() -> Outcome {
    let corpus = acf_corpus();
    let start = Instant::now();
    for (i, (s, k)) in corpus.iter().enumerate() {
        let got = lib(acf(s, *k))?;
        let want = oracle_acf(s, *k);
        ensure(got.tensor().data() == want.as_slice(), || {
            format!("tensor {i} ({}x{}x{}, k={k}) differs", s.height(), s.width(), s.num_classes())
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("1000 tensors identical in {secs:.3} s"))
}

fn acf_max_max_exchange() -> Outcome {
    for (i, (s, k)) in acf_corpus().iter().enumerate() {
        let f = lib(acf(s, *k))?;
        for by in 0..f.height() {
            for bx in 0..f.width() {
                let top = f.cell(by, bx).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut window = f64::NEG_INFINITY;
                for y in by * k..(by + 1) * k {
                    for x in bx * k..(bx + 1) * k {
                        let cell_max = s.cell(y, x).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        window = window.max(cell_max);
                    }
                }
                ensure(top == window, || format!("tensor {i} cell ({by},{bx}): {top} vs {window}"))?;
            }
        }
    }
    Ok("holds on all 1000 tensors".into())
}

fn aggregation_oracle_equivalence() -> Outcome {
    let mut r = rng(&[3]);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let (h, w) = (r.random_range(1..=12), r.random_range(1..=12));
        let c = r.random_range(1..=16);
        let l = r.random_range(1..=8);
        let grid = random_grid(h, w, c, &mut r);
        let labels = random_labels(h, w, l, &mut r);
        let seq = lib(aggregate(&grid, &labels, l))?;
        let (rows, counts) = oracle_aggregate(&grid, &labels, l);
        for o in 0..l {
            ensure(seq.row(o) == rows[o].as_slice(), || format!("pair {i} object {o} differs"))?;
            ensure(seq.presence()[o] == (counts[o] > 0), || format!("pair {i} presence of {o}"))?;
        }
        for ch in 0..c {
            let lhs: f64 = (0..l).map(|o| counts[o] as f64 * seq.row(o)[ch]).sum();
            let rhs: f64 = grid.tensor().data().iter().skip(ch).step_by(c).sum();
            worst = worst.max((lhs - rhs).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("partition identity off by {worst:e}"))?;
    Ok(format!("1000 pairs identical, partition |Δ| ≤ {worst:.1e}"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let checks = lib(pipeline::grad_check_suite(&RunConfig::default()))?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({:.2e})", c.module, c.report.max_rel_err()))
        .collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    let worst = checks.iter().map(|c| c.report.max_rel_err()).fold(0.0, f64::max);
    Ok(format!("{} modules, max rel err {worst:.2e}, {secs:.1} s", checks.len()))
}

fn attention_invariants() -> Outcome {
    let mut r = rng(&[5]);
    let mut rows = 0usize;
    for i in 0..200 {
        let heads = [1, 2, 4][r.random_range(0..3)];
        let c = heads * r.random_range(1..=8);
        let n = r.random_range(1..=10);
        let scale = [0.1, 1.0, 10.0][r.random_range(0..3)];
        let msa = lib(MultiHeadAttention::new(c, heads, &mut r))?;
        let x = Tensor::randn(&[n, c], scale, &mut r);
        let (_, cache) = lib(msa.forward(&x))?;
        for a in cache.attention() {
            for row in a.data().chunks(n) {
                let s: f64 = row.iter().sum();
                ensure((s - 1.0).abs() <= 1e-9, || format!("instance {i}: row sums to {s}"))?;
                rows += 1;
            }
        }

        let mut block = lib(AttentionBlock::new(c, heads, 4, &mut r))?;
        block.zero_residual_branches();
        let (y, _) = lib(block.forward(&x))?;
        ensure(y.data() == x.data(), || format!("instance {i}: zeroed block is not the identity"))?;
    }
    for i in 0..1000 {
        let shape = [r.random_range(1..=9), r.random_range(1..=9)];
        let a = Tensor::randn(&shape, 1.0, &mut r);
        let b = Tensor::randn(&shape, 1.0, &mut r);
        let ab = lib(merge_max(&a, &b))?;
        ensure(lib(merge_max(&a, &a))?.data() == a.data(), || format!("pair {i}: not idempotent"))?;
        ensure(lib(merge_max(&b, &a))?.data() == ab.data(), || format!("pair {i}: not commutative"))?;
        let dominates = ab.data().iter().zip(a.data()).zip(b.data()).all(|((m, x), y)| m >= x && m >= y);
        ensure(dominates, || format!("pair {i}: not dominant"))?;
    }
    Ok(format!("{rows} softmax rows, 200 zeroed blocks, 1000 merge pairs"))
}

fn classification_invariance() -> Outcome {
    let mut r = rng(&[6]);
    for i in 0..1000 {
        let n = r.random_range(1..=32);
        let z: Vec<f64> = (0..n).map(|_| r.random_range(-20.0..20.0)).collect();
        let want = oracle_argmax(&z);
        let p = softmax_lastdim(&Tensor::new(vec![1, n], z.clone()).unwrap());
        ensure(argmax(&z) == want, || format!("z {i}: argmax disagrees with the oracle"))?;
        ensure(argmax(p.data()) == want, || format!("z {i}: argmax(softmax(z)) != argmax(z)"))?;
        let shift = r.random_range(-100.0..100.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        ensure(argmax(&shifted) == want, || format!("z {i}: shift by {shift} moved the argmax"))?;
    }
    Ok("1000 vectors".into())
}

fn small_config() -> RunConfig {
    RunConfig {
        channels: 16,
        stage1_eta: 0.1,
        stage1_epochs: 2,
        stage2_epochs: 2,
        ..RunConfig::default()
    }
}

fn param_bits(m: &impl Parameterized) -> Vec<(String, Vec<u64>)> {
    m.params()
        .into_iter()
        .map(|(n, p)| (n, p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn freeze_contract() -> Outcome {
    let config = small_config();
    let data = lib(generate_dataset(&SceneSpec::desk_default(), 24, 4))?;
    let stage1 = lib(train_stage1(&data.train, &config))?;
    let (ifem, ssrm) = stage1.checkpoints(&config);
    let model = lib(spaco_core::training::model_from_stage1(&config, &ifem, &ssrm))?;
    let digest = model.backbone_digest();
    let bits = (param_bits(&model.ifem), param_bits(&model.ssrm));
    let fusion_before = param_bits(&model.fusion);
    let out = lib(train_stage2(&data.train, model))?;
    ensure(out.model.backbone_digest() == digest, || "backbone digest changed".into())?;
    ensure((param_bits(&out.model.ifem), param_bits(&out.model.ssrm)) == bits, || {
        "backbone parameter bytes changed".into()
    })?;
    ensure(param_bits(&out.model.fusion) != fusion_before, || "fusion head did not train".into())?;
    let mut ckpt = Checkpoint::new(2, 0, &config);
    ckpt.add_model("ifem", &out.model.ifem);
    ensure(ckpt.digest("ifem") == ifem.digest("ifem"), || "IFEM differs from its stage-1 checkpoint".into())?;
    Ok(format!("digest {}", &digest[..16]))
}

fn tree_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let config = small_config();
    let spec = SceneSpec::desk_default();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut accuracies = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        lib(pipeline::gen_data(&spec, 24, 8, &root.join("data")))?;
        lib(pipeline::train(&config, &root.join("data/train.manifest"), &root.join("run"), None))?;
        let eval = lib(pipeline::eval(
            &root.join("run").join(pipeline::MODEL_CHECKPOINT),
            &root.join("data/test.manifest"),
            &root.join("run/predictions.tsv"),
        ))?;
        accuracies.push(eval.accuracy);
    }
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let files = tree_files(&a);
    ensure(files == tree_files(&b), || "runs wrote different file sets".into())?;
    for f in &files {
        let same = std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
        ensure(same, || format!("{} differs", f.display()))?;
    }
    for required in [
        pipeline::IFEM_CHECKPOINT,
        pipeline::SSRM_CHECKPOINT,
        pipeline::MODEL_CHECKPOINT,
        pipeline::METRICS_FILE,
    ] {
        ensure(files.contains(&PathBuf::from("run").join(required)), || format!("{required} missing"))?;
    }
    ensure(accuracies[0] == accuracies[1], || "eval accuracy differs".into())?;
    Ok(format!("{} files byte-identical", files.len()))
}

fn desk_config() -> Result<RunConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    lib(RunConfig::read(&path))
}

/// Trained once, shared by the ordering and confound criteria.
struct AblationRun {
    accuracies: Vec<f64>,
    full_pair: f64,
    histogram_pair: f64,
    secs: f64,
}

fn run_ablation() -> Result<AblationRun, String> {
    let config = desk_config()?;
    let start = Instant::now();
    let data = lib(generate_dataset(&SceneSpec::desk_default(), 400, 200))?;
    let report = lib(ablation_suite(&data.train, &data.test, &config))?;
    let truth = data.test.labels();
    let full = report.predictions.last().expect("four prediction sets");
    let full_pair = lib(subset_accuracy(full, &truth, &[0, 1]))?;
    let hist = lib(HistogramClassifier::fit(&data.train, config.filter_kernel))?;
    let histogram_pair = lib(subset_accuracy(&lib(hist.predict_all(&data.test))?, &truth, &[0, 1]))?;
    let secs = start.elapsed().as_secs_f64();
    Ok(AblationRun {
        accuracies: report.rows.iter().map(|r| r.accuracy).collect(),
        full_pair,
        histogram_pair,
        secs,
    })
}

fn ablation_ordering(run: &Result<AblationRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let table: Vec<String> =
        ABLATION_ROWS.iter().zip(&run.accuracies).map(|(n, a)| format!("{n} {:.3}", a)).collect();
    let table = table.join(", ");
    let acc = &run.accuracies;
    ensure(acc.len() == 4, || format!("{} rows", acc.len()))?;
    ensure(acc.windows(2).all(|w| w[1] >= w[0]), || format!("not non-decreasing: {table}"))?;
    ensure(acc[3] - acc[0] >= 0.05, || format!("full does not beat baseline by 5 points: {table}"))?;
    ensure(acc[3] > 0.9, || format!("full model at or below 90%: {table}"))?;
    ensure(run.secs <= 600.0, || format!("took {:.0} s", run.secs))?;
    Ok(format!("{table}; {:.0} s", run.secs))
}

fn confound_sensitivity(run: &Result<AblationRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let detail = format!("full {:.3} vs histogram {:.3}", run.full_pair, run.histogram_pair);
    ensure(run.full_pair - run.histogram_pair >= 0.15, || detail.clone())?;
    Ok(detail)
}

fn file_round_trips() -> Outcome {
    let mut r = rng(&[11]);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for i in 0..100 {
        let rank = r.random_range(1..=4);
        let dims: Vec<usize> = (0..rank).map(|_| r.random_range(1..=6)).collect();
        let n: usize = dims.iter().product();
        let variants = [
            TensorData::F32((0..n).map(|_| f32::from_bits(finite_bits32(&mut r))).collect()),
            TensorData::F64((0..n).map(|_| f64::from_bits(finite_bits64(&mut r))).collect()),
            TensorData::U16((0..n).map(|_| r.random()).collect()),
        ];
        for data in variants {
            let dtype = data.dtype();
            let file = lib(TensorFile::new(dims.clone(), data))?;
            let bytes = file.encode();
            let back = lib(TensorFile::decode(&bytes))?;
            ensure(same_bits(back.data(), file.data()) && back.dims() == file.dims(), || {
                format!("tensor {i} {dtype:?} changed in memory")
            })?;
            let path = tmp.path().join(format!("{i}.spc"));
            lib(file.write(&path))?;
            let read = lib(TensorFile::read(&path))?;
            ensure(read.encode() == bytes, || format!("tensor {i} {dtype:?} changed on disk"))?;
        }
    }
    Ok("100 tensors x 3 dtypes".into())
}

fn finite_bits32(r: &mut impl Rng) -> u32 {
    loop {
        let b: u32 = r.random();
        if f32::from_bits(b).is_finite() {
            return b;
        }
    }
}

fn finite_bits64(r: &mut impl Rng) -> u64 {
    loop {
        let b: u64 = r.random();
        if f64::from_bits(b).is_finite() {
            return b;
        }
    }
}

fn same_bits(a: &TensorData, b: &TensorData) -> bool {
    match (a, b) {
        (TensorData::F32(x), TensorData::F32(y)) => x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())),
        (TensorData::F64(x), TensorData::F64(y)) => x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits())),
        (TensorData::U16(x), TensorData::U16(y)) => x == y,
        _ => false,
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn report(id: usize, name: &str, outcome: Outcome) -> bool {
    let (status, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("{status} {id:>2} {name}: {detail}");
    ok
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("acf oracle equivalence", acf_oracle_equivalence),
        ("acf max-max exchange", acf_max_max_exchange),
        ("aggregation oracle equivalence", aggregation_oracle_equivalence),
        ("gradient checks", gradient_checks),
        ("attention invariants", attention_invariants),
        ("classification invariance", classification_invariance),
        ("freeze contract", freeze_contract),
        ("pipeline determinism", determinism),
    ];
    let mut all = true;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        all &= report(i + 1, name, guarded(f));
    }
    let ablation = match catch_unwind(run_ablation) {
        Ok(r) => r,
        Err(_) => Err("ablation run panicked".into()),
    };
    all &= report(9, "ablation ordering", guarded(|| ablation_ordering(&ablation)));
    all &= report(10, "confound sensitivity", guarded(|| confound_sensitivity(&ablation)));
    all &= report(11, "file round trips", guarded(file_round_trips));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
