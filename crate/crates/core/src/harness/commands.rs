use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, ViTConfig};
use crate::error::{Error, Result};
use crate::inference::{evaluate, EvalReport, InferenceConfig};
use crate::numerics::{BackwardFault, DType, Real, RngState};
use crate::prompt::{count_parameters, PromptConfig, PromptMode, PromptModel};
use crate::training::{
    backbone_from_checkpoint, pretrain_backbone, save_backbone, train, Checkpoint, MetricRecord,
    TrainOutcome, TrainSink, TrainState,
};

use super::config::RunConfig;
use super::data::{generate, DataSplits, Dataset, DatasetSpec, SplitName, Variant};
use super::gradcheck::{check_model, GradcheckReport};

const MODEL_INIT_STREAM: u64 = 21;
const GRADCHECK_STREAM: u64 = 22;

pub const BACKBONE_FILE: &str = "backbone.ckpt";

/// The dataset named by `run`: loaded from `data_path`, else generated.
pub fn load_dataset(run: &RunConfig) -> Result<Dataset> {
    match &run.data_path {
        Some(p) => Dataset::load(p),
        None => generate(&run.data),
    }
}

/// Writes the dataset and a JSON copy of its spec next to it.
pub fn gen_data(spec: &DatasetSpec, path: &Path) -> Result<Dataset> {
    let ds = generate(spec)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ds.save(path)?;
    let mut spec_path = path.as_os_str().to_owned();
    spec_path.push(".json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec).expect("spec serialises") + "\n")?;
    Ok(ds)
}

fn same_shape(a: &ViTConfig, b: &ViTConfig) -> bool {
    (a.image_size, a.patch_size, a.channels, a.dim, a.depth, a.heads, a.mlp_ratio, a.position)
        == (b.image_size, b.patch_size, b.channels, b.dim, b.depth, b.heads, b.mlp_ratio, b.position)
}

pub fn load_backbone<T: Real>(run: &RunConfig) -> Result<BackboneParams<T>> {
    let path = run
        .backbone
        .as_ref()
        .ok_or_else(|| Error::Config("a frozen backbone checkpoint is required (`backbone = PATH`)".into()))?;
    let (vit, bb) = backbone_from_checkpoint(&Checkpoint::<T>::load(path)?)?;
    if !same_shape(&vit, &run.vit) {
        return Err(Error::Config(format!(
            "backbone {} was built for a different transformer shape",
            path.display()
        )));
    }
    Ok(bb)
}

/// The run's backbone shape with a 4-way pretext head.
pub fn pretext_vit(vit: &ViTConfig) -> ViTConfig {
    ViTConfig { classes: 4, ..vit.clone() }
}

/// Pretrains on rotation prediction using `run.data` with the variant forced
/// to the pretext task.
pub fn pretrain<T: Real>(run: &RunConfig) -> Result<(BackboneParams<T>, Vec<MetricRecord>)> {
    let spec = DatasetSpec {
        variant: Variant::PretextRotation,
        ..run.data.clone()
    };
    let ds = generate(&spec)?;
    let split = ds.split::<T>(SplitName::Train);
    pretrain_backbone(&pretext_vit(&run.vit), &run.train, &split)
}

pub fn cmd_pretrain<T: Real>(run: &RunConfig) -> Result<()> {
    let (bb, metrics) = pretrain::<T>(run)?;
    run.write_snapshot(&run.out)?;
    save_backbone(&bb, &pretext_vit(&run.vit), &run.snapshot(), &run.out.join(BACKBONE_FILE))?;
    write_jsonl(&run.out.join("pretrain_metrics.jsonl"), &metrics)?;
    Ok(())
}

fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn build_model<T: Real>(
    vit: &ViTConfig,
    prompt: &PromptConfig,
    backbone: &BackboneParams<T>,
    seed: u64,
) -> Result<PromptModel<T>> {
    let mut rng = RngState::new(seed).substream(MODEL_INIT_STREAM);
    PromptModel::init(vit, prompt, backbone.clone(), &mut rng)
}

fn check_classes<T>(run: &RunConfig, data: &DataSplits<T>) -> Result<()> {
    if data.classes != run.vit.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, vit.classes is {}",
            data.classes, run.vit.classes
        )));
    }
    Ok(())
}

/// One prompt-tuning run on already loaded inputs.
pub fn train_run<T: Real>(
    run: &RunConfig,
    backbone: &BackboneParams<T>,
    data: &DataSplits<T>,
    sink: &TrainSink,
) -> Result<TrainOutcome<T>> {
    run.validate()?;
    check_classes(run, data)?;
    let model = build_model(&run.vit, &run.prompt, backbone, run.train.seed)?;
    train(&run.train, model, &data.train, &data.val, sink)
}

pub fn cmd_train<T: Real>(run: &RunConfig) -> Result<()> {
    run.validate()?;
    let backbone = load_backbone::<T>(run)?;
    let data = load_dataset(run)?.splits::<T>();
    run.write_snapshot(&run.out)?;
    train_run(run, &backbone, &data, &TrainSink::to_dir(&run.out, run.snapshot()))?;
    Ok(())
}

/// Validation accuracy of the retained (best) epoch; 0 when nothing ran.
pub fn best_val_accuracy(outcome: &TrainOutcome<impl Real>) -> f64 {
    outcome
        .metrics
        .iter()
        .find(|m| m.split == "val" && m.epoch == outcome.best_epoch)
        .map(|m| m.accuracy)
        .unwrap_or(0.0)
}

pub fn eval_checkpoint<T: Real>(ckpt: &Path, data: &Dataset, split: SplitName, cfg: &InferenceConfig) -> Result<EvalReport> {
    let state = TrainState::<T>::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    if data.classes != state.model.vit.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            data.classes, state.model.vit.classes
        )));
    }
    evaluate(&state.model, &data.split::<T>(split), cfg)
}

pub fn cmd_eval<T: Real>(run: &RunConfig, ckpt: &Path, split: SplitName) -> Result<EvalReport> {
    let data = load_dataset(run)?;
    let report = eval_checkpoint::<T>(ckpt, &data, split, &run.inference)?;
    run.write_snapshot(&run.out)?;
    let summary = serde_json::to_string_pretty(&report.summary).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(run.out.join("eval_summary.json"), summary + "\n")?;
    write_jsonl(&run.out.join("predictions.jsonl"), &report.records)?;
    Ok(report)
}

/// One cell of an m-sweep, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub lambda: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub trainable_params: usize,
    pub ratio: f64,
}

pub const SWEEP_COLUMNS: [&str; 6] = ["m", "lambda", "accuracy_mean", "accuracy_std", "trainable_params", "ratio"];

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed validation accuracies of one `(m, λ)` cell, plus its trainable
/// parameter count.
pub fn sweep_cell<T: Real>(
    run: &RunConfig,
    backbone: &BackboneParams<T>,
    data: &DataSplits<T>,
    m: usize,
    lambda: usize,
    seeds: &[u64],
) -> Result<(Vec<f64>, usize)> {
    let mut cell = run.clone();
    cell.prompt.m = m;
    cell.prompt.lambda = lambda;
    cell.prompt.mode = PromptMode::Viapt;
    let mut accs = Vec::with_capacity(seeds.len());
    let mut params = 0;
    for &seed in seeds {
        cell.train.seed = seed;
        let outcome = train_run(&cell, backbone, data, &TrainSink::in_memory())?;
        params = outcome.final_state.model.trainable_count();
        accs.push(best_val_accuracy(&outcome));
    }
    Ok((accs, params))
}

/// Trains every `(m, λ)` cell. With `both_lambdas` each `m` gets a row for
/// `λ = 0` and `λ = p/2`; otherwise only the run's `λ`.
pub fn sweep_m<T: Real>(
    run: &RunConfig,
    backbone: &BackboneParams<T>,
    data: &DataSplits<T>,
    m_list: &[usize],
    both_lambdas: bool,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = m_list.iter().find(|&&m| m > run.vit.dim) {
        return Err(Error::Config(format!("m={bad} exceeds d={}", run.vit.dim)));
    }
    let lambdas = if both_lambdas { vec![0, run.prompt.p / 2] } else { vec![run.prompt.lambda] };
    let backbone_params = run.vit.backbone_parameter_count();
    let mut rows = Vec::new();
    for &m in m_list {
        for &lambda in &lambdas {
            let (accs, params) = sweep_cell(run, backbone, data, m, lambda, seeds)?;
            let (mean, std) = mean_std(&accs);
            rows.push(SweepRow {
                m,
                lambda,
                accuracy_mean: mean,
                accuracy_std: std,
                trainable_params: params,
                ratio: params as f64 / backbone_params as f64,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.m, r.lambda, r.accuracy_mean, r.accuracy_std, r.trainable_params, r.ratio
        );
    }
    out
}

/// Parses [`sweep_csv`] output, checking the header.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format("csv", "empty"))?;
    if header.split(',').collect::<Vec<_>>() != SWEEP_COLUMNS {
        return Err(Error::format("csv header", header.to_string()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(format!("csv row {}", i + 1), line.to_string());
            if f.len() != SWEEP_COLUMNS.len() {
                return Err(bad());
            }
            Ok(SweepRow {
                m: f[0].parse().map_err(|_| bad())?,
                lambda: f[1].parse().map_err(|_| bad())?,
                accuracy_mean: f[2].parse().map_err(|_| bad())?,
                accuracy_std: f[3].parse().map_err(|_| bad())?,
                trainable_params: f[4].parse().map_err(|_| bad())?,
                ratio: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Whether some interior `m` beats both endpoints for the given `λ`.
pub fn interior_maximum(rows: &[SweepRow], lambda: usize, dim: usize) -> Option<usize> {
    let cells: Vec<&SweepRow> = rows.iter().filter(|r| r.lambda == lambda).collect();
    let end = |m| cells.iter().find(|r| r.m == m).map(|r| r.accuracy_mean);
    let (lo, hi) = (end(0)?, end(dim)?);
    cells
        .iter()
        .filter(|r| r.m != 0 && r.m != dim && r.accuracy_mean > lo && r.accuracy_mean > hi)
        .max_by(|a, b| a.accuracy_mean.total_cmp(&b.accuracy_mean))
        .map(|r| r.m)
}

pub fn cmd_sweep<T: Real>(run: &RunConfig, m_list: &[usize], both_lambdas: bool, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    run.validate()?;
    let backbone = load_backbone::<T>(run)?;
    let data = load_dataset(run)?.splits::<T>();
    check_classes(run, &data)?;
    let rows = sweep_m(run, &backbone, &data, m_list, both_lambdas, seeds)?;
    run.write_snapshot(&run.out)?;
    fs::write(run.out.join("sweep_m.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mode: PromptMode,
    pub lambda: usize,
    pub m: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub trainable_params: usize,
}

/// The ablation rows: full model, without PCA, without instance prompts,
/// without both, and a fixed random projection in place of PCA.
pub fn ablation_configs(base: &PromptConfig) -> Vec<(&'static str, PromptConfig)> {
    let with = |mode: PromptMode, lambda: usize| PromptConfig {
        mode,
        lambda,
        ..base.clone()
    };
    vec![
        ("full", with(PromptMode::Viapt, base.lambda)),
        ("without_pca", with(PromptMode::AblationNoPca, base.lambda)),
        ("without_instance", with(PromptMode::AblationNoInstance, base.lambda)),
        ("without_both", with(PromptMode::AblationNoPca, 0)),
        ("random_projection", with(PromptMode::AblationRandomProjection, base.lambda)),
    ]
}

pub fn ablate<T: Real>(
    run: &RunConfig,
    backbone: &BackboneParams<T>,
    data: &DataSplits<T>,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (variant, prompt) in ablation_configs(&run.prompt) {
        let mut cell = run.clone();
        cell.prompt = prompt.clone();
        let plan = prompt.resolve(run.vit.dim, run.vit.depth)?;
        let mut accs = Vec::new();
        let mut params = 0;
        for &seed in seeds {
            cell.train.seed = seed;
            let outcome = train_run(&cell, backbone, data, &TrainSink::in_memory())?;
            params = outcome.final_state.model.trainable_count();
            accs.push(best_val_accuracy(&outcome));
        }
        let (mean, std) = mean_std(&accs);
        rows.push(AblationRow {
            variant: variant.into(),
            mode: prompt.mode,
            lambda: plan.lambda,
            m: plan.m(),
            accuracy_mean: mean,
            accuracy_std: std,
            trainable_params: params,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,mode,lambda,m,accuracy_mean,accuracy_std,trainable_params\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant, r.mode, r.lambda, r.m, r.accuracy_mean, r.accuracy_std, r.trainable_params
        );
    }
    out
}

pub fn cmd_ablate<T: Real>(run: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    run.validate()?;
    let backbone = load_backbone::<T>(run)?;
    let data = load_dataset(run)?.splits::<T>();
    check_classes(run, &data)?;
    let rows = ablate(run, &backbone, &data, seeds)?;
    run.write_snapshot(&run.out)?;
    fs::write(run.out.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

/// One row of the parameter table: prompts without instance tokens next to
/// prompts with `λ` of them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRow {
    pub m: usize,
    pub domain_only: usize,
    pub ours: usize,
    pub domain_only_percent: f64,
    pub ours_percent: f64,
    pub note: Option<String>,
}

pub fn param_table(vit: &ViTConfig, prompt: &PromptConfig, m_list: &[usize]) -> Result<Vec<ParamRow>> {
    m_list
        .iter()
        .map(|&m| {
            let ours_cfg = PromptConfig { m, mode: PromptMode::Viapt, ..prompt.clone() };
            let dom_cfg = PromptConfig { lambda: 0, ..ours_cfg.clone() };
            let ours = count_parameters(&ours_cfg, vit)?;
            let dom = count_parameters(&dom_cfg, vit)?;
            Ok(ParamRow {
                m,
                domain_only: dom.prompt_params,
                ours: ours.prompt_params,
                domain_only_percent: dom.ratio_percent,
                ours_percent: ours.ratio_percent,
                note: dom.note.or(ours.note),
            })
        })
        .collect()
}

/// Fixed-width text rendering: absolute counts in thousands and percentages
/// of the backbone.
pub fn param_table_text(vit: &ViTConfig, prompt: &PromptConfig, rows: &[ParamRow]) -> Result<String> {
    let shallow = count_parameters(&PromptConfig { mode: PromptMode::VptShallow, ..prompt.clone() }, vit)?;
    let deep = count_parameters(&PromptConfig { mode: PromptMode::VptDeep, ..prompt.clone() }, vit)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "backbone parameters: {} (N={}, p={}, lambda={}, d={})",
        shallow.backbone_params, vit.depth, prompt.p, prompt.lambda, vit.dim
    );
    let _ = writeln!(out, "{:>5} {:>12} {:>12} {:>10} {:>10}", "m", "domain(K)", "ours(K)", "domain%", "ours%");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>5} {:>12.1} {:>12.1} {:>10.3} {:>10.3}",
            r.m,
            r.domain_only as f64 / 1000.0,
            r.ours as f64 / 1000.0,
            r.domain_only_percent,
            r.ours_percent
        );
    }
    for r in rows {
        if let Some(n) = &r.note {
            let _ = writeln!(out, "note (m={}): {n}", r.m);
        }
    }
    let _ = writeln!(out, "vpt_shallow: {:.1}K ({:.3}%)", shallow.prompt_params as f64 / 1000.0, shallow.ratio_percent);
    let _ = writeln!(out, "vpt_deep: {:.1}K ({:.3}%)", deep.prompt_params as f64 / 1000.0, deep.ratio_percent);
    Ok(out)
}

pub fn param_table_csv(rows: &[ParamRow]) -> String {
    let mut out = String::from("m,domain_only,ours,domain_only_percent,ours_percent\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.m, r.domain_only, r.ours, r.domain_only_percent, r.ours_percent);
    }
    out
}

/// Gradient check on a small batch drawn from `run.data`, with a freshly
/// initialised backbone. Refuses anything but double precision.
pub fn gradcheck(run: &RunConfig, batch: usize, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    if run.train.precision != DType::F64 {
        return Err(Error::Config("gradient checks run in f64 only (`train.precision = f64`)".into()));
    }
    run.validate()?;
    let mut rng = RngState::new(run.train.seed).substream(GRADCHECK_STREAM);
    let backbone = BackboneParams::<f64>::init(&run.vit, &mut rng)?;
    let model = build_model(&run.vit, &run.prompt, &backbone, run.train.seed)?;
    let spec = DatasetSpec {
        samples: batch.max(1),
        classes: run.vit.classes,
        image_side: run.vit.image_size,
        ..run.data.clone()
    };
    let ds = generate(&spec)?;
    let images: Vec<_> = (0..ds.len()).map(|i| ds.image::<f64>(i)).collect();
    let labels: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
    check_model(&model, &images, &labels, run.train.seed, fault)
}
