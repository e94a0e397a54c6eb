//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL` line and
//! then asserts it; tolerances are the constants below.

mod common;

use std::fs;

use common::symmetric_eigen;
use viapt::backbone::{embed_patches, forward_vpt_deep, forward_vpt_shallow, BackboneParams, ViTConfig};
use viapt::harness::commands::{
    best_val_accuracy, gradcheck, interior_maximum, param_table, parse_sweep_csv, pretrain, sweep_cell, sweep_csv,
    sweep_m, train_run, SWEEP_COLUMNS,
};
use viapt::harness::data::{generate, SplitName};
use viapt::harness::RunConfig;
use viapt::inference::{evaluate, predict_multi_round, InferenceConfig, Strategy};
use viapt::numerics::linalg::random_orthonormal;
use viapt::numerics::{BackwardFault, DType, RngState, Tape, Tensor};
use viapt::prompt::{forward_image, kl_to_standard_normal, pca_project, InstanceNoise, PromptConfig, PromptMode, PromptModel};
use viapt::training::{Checkpoint, TrainSink, BEST_CHECKPOINT, FINAL_CHECKPOINT, METRICS_FILE};
use viapt::Error;

const ENDPOINT_INPUTS: usize = 100;
const PERCENT_TOLERANCE: f64 = 1e-3;
const GRADCHECK_LIMIT: f64 = 1e-4;
const KL_SAMPLES: usize = 1_000_000;
const KL_RELATIVE: f64 = 0.01;
const PCA_RELATIVE: f64 = 1e-8;
const PCA_RANDOM_TRIALS: usize = 100;
const ROUND_SCALING_BAND: f64 = 0.30;
const ROUND_SEEDS: u64 = 200;

/// Floors from the pre-registered oracle runs (seeds 101..=105, same
/// protocol): mean minus two sample standard deviations of validation
/// accuracy. λ=0: 0.41533 − 2·0.02673; λ=p/2: 0.96200 − 2·0.04700.
const FLOOR_WITHOUT_INSTANCE: f64 = 0.3618;
const FLOOR_WITH_INSTANCE: f64 = 0.8680;
const EFFICACY_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const EFFICACY_MIN_WINS: usize = 4;

fn report(n: usize, what: &str, pass: bool, detail: String) {
    println!("criterion {n}: {} {what} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {what}: {detail}");
}

fn init_model(vit: &ViTConfig, prompt: &PromptConfig, seed: u64) -> PromptModel<f64> {
    let mut rng = RngState::new(seed);
    let bb = BackboneParams::init(vit, &mut rng).unwrap();
    PromptModel::init(vit, prompt, bb, &mut rng).unwrap()
}

#[test]
fn criterion_1_endpoint_equivalence() {
    let vit = ViTConfig::desk();
    let base = PromptConfig::desk(vit.dim);
    let at = |mode, m| PromptConfig { mode, m, lambda: 0, ..base.clone() };
    let mut mismatches = 0;
    for (viapt_cfg, reference_cfg) in [
        (at(PromptMode::Viapt, 0), at(PromptMode::VptDeep, 0)),
        (at(PromptMode::Viapt, vit.dim), at(PromptMode::VptShallow, vit.dim)),
    ] {
        let ours = init_model(&vit, &viapt_cfg, 31);
        let reference = init_model(&vit, &reference_cfg, 31);
        let deep = reference_cfg.mode == PromptMode::VptDeep;
        let mut inputs = RngState::new(77);
        for _ in 0..ENDPOINT_INPUTS {
            let image: Tensor<f64> = inputs.sample_gaussian(&[1, 16, 16]);
            let mut tape = Tape::new();
            let vars = ours.bind(&mut tape, false);
            let mut noise = RngState::new(5);
            let out = forward_image(&mut tape, &image, &ours, &vars, InstanceNoise::Sample(&mut noise)).unwrap();

            let rv = reference.bind(&mut tape, false);
            let e0 = embed_patches(&mut tape, &image, &rv.backbone, &vit).unwrap();
            let logits = if deep {
                let mut prompts = vec![rv.dom];
                prompts.extend(&rv.new);
                forward_vpt_deep(&mut tape, e0, &prompts, &rv.backbone, &rv.head, &vit).unwrap()
            } else {
                forward_vpt_shallow(&mut tape, e0, rv.dom, &rv.backbone, &rv.head, &vit).unwrap()
            };
            if !tape.value(out.logits).bitwise_eq(tape.value(logits)) {
                mismatches += 1;
            }
        }
    }
    report(
        1,
        "endpoint equivalence",
        mismatches == 0,
        format!("{mismatches} of {} logit vectors differ bitwise", 2 * ENDPOINT_INPUTS),
    );
}

#[test]
fn criterion_2_parameter_tables() {
    let run = RunConfig::vit_base();
    // (m, domain only, ours) counts, then the percentage table.
    let counts = [
        (0, 460_800, 441_600),
        (32, 441_600, 424_000),
        (64, 422_400, 406_400),
        (128, 384_000, 371_200),
        (256, 307_200, 300_800),
        (512, 153_600, 160_000),
        (768, 0, 19_200),
    ];
    let percents = [
        (0.532, 0.510),
        (0.510, 0.490),
        (0.488, 0.470),
        (0.444, 0.429),
        (0.355, 0.347),
        (0.177, 0.185),
        (0.000, 0.022),
    ];
    let m_list: Vec<usize> = counts.iter().map(|c| c.0).collect();
    let rows = param_table(&run.vit, &run.prompt, &m_list).unwrap();
    let backbone = run.vit.backbone_parameter_count();
    let mut bad = Vec::new();
    for ((row, &(m, dom, ours)), &(dom_pct, ours_pct)) in rows.iter().zip(&counts).zip(&percents) {
        if row.domain_only != dom || row.ours != ours {
            bad.push(format!("m={m}: counts {}/{}", row.domain_only, row.ours));
        }
        if (row.domain_only_percent - dom_pct).abs() > PERCENT_TOLERANCE
            || (row.ours_percent - ours_pct).abs() > PERCENT_TOLERANCE
        {
            bad.push(format!("m={m}: percent {:.4}/{:.4}", row.domain_only_percent, row.ours_percent));
        }
    }
    report(
        2,
        "parameter tables",
        bad.is_empty() && backbone == 86_567_656,
        format!("backbone {backbone}; mismatches {bad:?}"),
    );
}

#[test]
fn criterion_3_gradient_fidelity() {
    let run = RunConfig::tiny();
    let clean = gradcheck(&run, 2, None).unwrap();
    let names: Vec<&str> = clean.tensors.iter().map(|t| t.name.as_str()).collect();
    let covers_paths = names.iter().any(|n| n.starts_with("generator.")) && names.iter().any(|n| n.starts_with("prompt.new"));

    let faulty = gradcheck(&run, 2, Some(BackwardFault::Gelu)).unwrap();

    let mut no_instance = RunConfig::tiny();
    no_instance.prompt.lambda = 0;
    let plain = gradcheck(&no_instance, 2, None).unwrap();
    let generator_absent = plain.tensors.iter().all(|t| !t.name.starts_with("generator."));

    let pass = clean.passed && clean.worst() < GRADCHECK_LIMIT && covers_paths && !faulty.passed && plain.passed && generator_absent;
    report(
        3,
        "gradient fidelity",
        pass,
        format!(
            "worst {:.2e} over {} tensors; corrupted rule worst {:.2e}; lambda=0 worst {:.2e}, generator absent {generator_absent}",
            clean.worst(),
            clean.tensors.len(),
            faulty.worst(),
            plain.worst()
        ),
    );
}

fn closed_form_kl(mu: &[f64], lv: &[f64]) -> f64 {
    let d = mu.len();
    let mut tape = Tape::<f64>::new();
    let m = tape.constant(Tensor::matrix(1, d, mu.to_vec()).unwrap());
    let l = tape.constant(Tensor::matrix(1, d, lv.to_vec()).unwrap());
    let kl = kl_to_standard_normal(&mut tape, m, l).unwrap();
    tape.value(kl).item()
}

/// `E_q[log q(x) − log p(x)]` with `x ~ N(μ, e^lv)`.
fn monte_carlo_kl(mu: &[f64], lv: &[f64], rng: &mut RngState) -> f64 {
    let mut acc = 0.0;
    for _ in 0..KL_SAMPLES {
        let mut s = 0.0;
        for (&m, &l) in mu.iter().zip(lv) {
            let eps = rng.next_normal();
            let x = m + (0.5 * l).exp() * eps;
            s += -0.5 * l - 0.5 * eps * eps + 0.5 * x * x;
        }
        acc += s;
    }
    acc / KL_SAMPLES as f64
}

#[test]
fn criterion_4_kl_correctness() {
    let d = 8;
    let mut pairs = RngState::new(404);
    let mut sampler = RngState::new(405);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mu: Vec<f64> = (0..d).map(|_| pairs.uniform_symmetric(1.0)).collect();
        let lv: Vec<f64> = (0..d).map(|_| pairs.uniform_symmetric(1.0)).collect();
        let exact = closed_form_kl(&mu, &lv);
        let estimate = monte_carlo_kl(&mu, &lv, &mut sampler);
        worst = worst.max((exact - estimate).abs() / exact);
    }
    let at_zero = closed_form_kl(&[0.0; 8], &[0.0; 8]);
    report(
        4,
        "KL correctness",
        worst < KL_RELATIVE && at_zero == 0.0,
        format!("worst relative error {worst:.2e}; KL(0,0) = {at_zero}"),
    );
}

fn centred(z: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (p, d) = (z.rows(), z.cols());
    let mean: Vec<f64> = (0..d).map(|j| (0..p).map(|i| z.at(i, j)).sum::<f64>() / p as f64).collect();
    (0..p).map(|i| (0..d).map(|j| z.at(i, j) - mean[j]).collect()).collect()
}

/// `‖Xc − Xc Q Qᵀ‖²` for an orthonormal `Q [d×m]`.
fn reconstruction_error(xc: &[Vec<f64>], q: &Tensor<f64>) -> f64 {
    let (d, m) = (q.rows(), q.cols());
    xc.iter()
        .map(|row| {
            let coords: Vec<f64> = (0..m).map(|k| (0..d).map(|j| row[j] * q.at(j, k)).sum()).collect();
            (0..d)
                .map(|j| {
                    let r: f64 = (0..m).map(|k| coords[k] * q.at(j, k)).sum();
                    (row[j] - r).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

#[test]
fn criterion_5_pca_optimality() {
    let (p, d) = (10, 6);
    let mut rng = RngState::new(55);
    let mut worst_variance = 0.0f64;
    let mut losses = 0;
    let mut trials = 0;
    for m in 1..=3 {
        for trial in 0..PCA_RANDOM_TRIALS {
            let mut z: Tensor<f64> = rng.sample_gaussian(&[p, d]);
            for i in 0..p {
                for j in 0..d {
                    z.set(i, j, z.at(i, j) * (1.0 + j as f64));
                }
            }
            let proj = pca_project(&z, m).unwrap();
            let xc = centred(&z);
            if trial == 0 {
                let cov: Vec<Vec<f64>> = (0..d)
                    .map(|a| (0..d).map(|b| xc.iter().map(|r| r[a] * r[b]).sum::<f64>() / (p - 1) as f64).collect())
                    .collect();
                let (eig, _) = symmetric_eigen(cov);
                let expected: f64 = eig[..m].iter().sum();
                worst_variance = worst_variance.max((proj.retained_variance - expected).abs() / expected);
            }
            let pca_error = reconstruction_error(&xc, &proj.basis);
            let random = random_orthonormal::<f64>(&mut rng, d, m).unwrap();
            trials += 1;
            if reconstruction_error(&xc, &random) <= pca_error {
                losses += 1;
            }
        }
    }
    report(
        5,
        "PCA optimality",
        worst_variance < PCA_RELATIVE && losses == 0,
        format!("retained variance relative error {worst_variance:.2e}; random projections won {losses} of {trials}"),
    );
}

#[test]
fn criterion_6_inference_contracts() {
    let run = RunConfig::desk();
    let vit = run.vit.clone();
    let ds = generate(&run.data).unwrap();
    let test = ds.split::<f64>(SplitName::Test);

    let model = init_model(&vit, &PromptConfig::desk(vit.dim), 61);
    let fixed = InferenceConfig { strategy: Strategy::FixedSampling, noise_seed: Some(8), ..InferenceConfig::default() };
    let a = evaluate(&model, &test, &fixed).unwrap();
    let b = evaluate(&model, &test, &fixed).unwrap();
    let bitwise = a.summary == b.summary
        && a.records.iter().zip(&b.records).all(|(x, y)| {
            x.probabilities.iter().zip(&y.probabilities).all(|(u, v)| u.to_bits() == v.to_bits())
        });

    // Spread of the averaged probability across independent seeds.
    let images: Vec<Tensor<f64>> = (0..3).map(|i| test.images[i].clone()).collect();
    let spread = |rounds: usize| -> f64 {
        let mut total = 0.0;
        for (id, img) in images.iter().enumerate() {
            let draws: Vec<Vec<f64>> = (0..ROUND_SEEDS)
                .map(|s| predict_multi_round(&model, img, rounds, 1000 + s, id as u64).unwrap())
                .collect();
            for c in 0..vit.classes {
                let xs: Vec<f64> = draws.iter().map(|p| p[c]).collect();
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                total += xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            }
        }
        total.sqrt()
    };
    let base = spread(1);
    let mut ratios = Vec::new();
    for r in [4usize, 16] {
        let observed = spread(r) / base;
        let theory = 1.0 / (r as f64).sqrt();
        ratios.push((r, observed, (observed / theory - 1.0).abs()));
    }
    let scaling = ratios.iter().all(|&(_, _, dev)| dev <= ROUND_SCALING_BAND);

    let mut no_instance = PromptConfig::desk(vit.dim);
    no_instance.lambda = 0;
    let plain = init_model(&vit, &no_instance, 62);
    let strategies = [
        InferenceConfig { strategy: Strategy::MultiRound, rounds: 5, ..InferenceConfig::default() },
        fixed.clone(),
        InferenceConfig { strategy: Strategy::Direct, ..InferenceConfig::default() },
    ];
    let outs: Vec<_> = strategies.iter().map(|c| evaluate(&plain, &test, c).unwrap()).collect();
    let collapsed = outs.iter().all(|o| {
        o.records.iter().zip(&outs[0].records).all(|(x, y)| {
            x.probabilities.iter().zip(&y.probabilities).all(|(u, v)| u.to_bits() == v.to_bits())
        })
    });

    report(
        6,
        "inference contracts",
        bitwise && scaling && collapsed,
        format!(
            "fixed sampling reproducible {bitwise}; std ratios {:?} (R, observed, |observed/theory-1|); lambda=0 collapse {collapsed}",
            ratios.iter().map(|(r, o, e)| format!("R={r}: {o:.3}, {e:.3}")).collect::<Vec<_>>()
        ),
    );
}

/// The desk protocol shared with the pre-registration runs.
fn efficacy_run() -> RunConfig {
    let mut run = RunConfig::desk();
    run.train.epochs = 5;
    run.train.warmup_epochs = 1;
    run.train.lr = 0.01;
    run
}

fn pretrained_backbone(run: &RunConfig) -> BackboneParams<f32> {
    let mut pre = run.clone();
    pre.train.epochs = 2;
    pre.train.warmup_epochs = 1;
    pre.train.lr = 1e-3;
    pre.train.seed = 1;
    pretrain::<f32>(&pre).unwrap().0
}

#[test]
fn criterion_7_desk_efficacy_ordering() {
    let run = efficacy_run();
    assert_eq!(run.train.precision, DType::F32);
    let backbone = pretrained_backbone(&run);
    let data = generate(&run.data).unwrap().splits::<f32>();
    let m = run.vit.dim / 2;
    let (with, _) = sweep_cell(&run, &backbone, &data, m, run.prompt.p / 2, &EFFICACY_SEEDS).unwrap();
    let (without, _) = sweep_cell(&run, &backbone, &data, m, 0, &EFFICACY_SEEDS).unwrap();
    let wins = with.iter().zip(&without).filter(|(a, b)| a >= b).count();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (mw, mo) = (mean(&with), mean(&without));
    let chance = 1.0 / run.vit.classes as f64;
    let pass = wins >= EFFICACY_MIN_WINS && mw >= FLOOR_WITH_INSTANCE && mo >= FLOOR_WITHOUT_INSTANCE;
    report(
        7,
        "desk efficacy ordering",
        pass,
        format!(
            "instance tokens win {wins}/5; val accuracy with {with:.3?} (mean {mw:.3}, floor {FLOOR_WITH_INSTANCE}), without {without:.3?} (mean {mo:.3}, floor {FLOOR_WITHOUT_INSTANCE}); chance {chance:.3}"
        ),
    );
}

fn small_run() -> RunConfig {
    let mut run = RunConfig::desk();
    run.data.samples = 200;
    run.train.epochs = 2;
    run.train.warmup_epochs = 1;
    run.train.lr = 0.01;
    run
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let run = small_run();
    let mut rng = RngState::new(3);
    let backbone = BackboneParams::<f32>::init(&run.vit, &mut rng).unwrap();
    let data = generate(&run.data).unwrap().splits::<f32>();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train_run(&run, &backbone, &data, &TrainSink::to_dir(d.path(), run.snapshot())).unwrap();
    }
    let read = |i: usize, f: &str| fs::read(dirs[i].path().join(f)).unwrap();
    let identical = [METRICS_FILE, FINAL_CHECKPOINT, BEST_CHECKPOINT].iter().all(|f| read(0, f) == read(1, f));

    let bytes = read(0, FINAL_CHECKPOINT);
    let round_trip = Checkpoint::<f32>::from_bytes(&bytes).unwrap().to_bytes().unwrap() == bytes;
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let corrupted = [
        flipped,
        bytes[..bytes.len() - 3].to_vec(),
        [b"XIAPT".as_slice(), &bytes[5..]].concat(),
    ];
    let rejected = corrupted.iter().all(|b| matches!(Checkpoint::<f32>::from_bytes(b), Err(Error::Format { .. })));
    let wrong_precision = Checkpoint::<f64>::from_bytes(&bytes).is_err();
    report(
        8,
        "determinism and persistence",
        identical && round_trip && rejected && wrong_precision,
        format!(
            "identical artifacts {identical}; round trip {round_trip}; corrupted rejected {rejected}; precision mismatch rejected {wrong_precision}"
        ),
    );
}

#[test]
fn criterion_9_sweep_integrity() {
    let mut run = small_run();
    run.prompt.lambda = 0;
    let mut rng = RngState::new(4);
    let backbone = BackboneParams::<f32>::init(&run.vit, &mut rng).unwrap();
    let data = generate(&run.data).unwrap().splits::<f32>();
    let d = run.vit.dim;
    let seeds = [1u64];
    let rows = sweep_m(&run, &backbone, &data, &[0, d / 2, d], false, &seeds).unwrap();

    let baseline = |mode: PromptMode| {
        let mut b = run.clone();
        b.prompt.mode = mode;
        b.train.seed = seeds[0];
        let out = train_run(&b, &backbone, &data, &TrainSink::in_memory()).unwrap();
        (best_val_accuracy(&out), out.final_state.model.trainable_count())
    };
    let deep = baseline(PromptMode::VptDeep);
    let shallow = baseline(PromptMode::VptShallow);
    let cell = |m: usize| rows.iter().find(|r| r.m == m).map(|r| (r.accuracy_mean, r.trainable_params)).unwrap();
    let endpoints = cell(0) == deep && cell(d) == shallow;

    let csv = sweep_csv(&rows);
    let header_ok = csv.lines().next() == Some(SWEEP_COLUMNS.join(",").as_str());
    let parsed = parse_sweep_csv(&csv).map(|p| p == rows).unwrap_or(false);
    let interior = interior_maximum(&rows, 0, d);
    report(
        9,
        "sweep integrity",
        endpoints && header_ok && parsed,
        format!(
            "m=0 {:?} vs vpt_deep {deep:?}; m=d {:?} vs vpt_shallow {shallow:?}; csv parses {parsed}; interior maximum {}",
            cell(0),
            cell(d),
            interior.map_or("none".to_string(), |m| format!("at m={m}"))
        ),
    );
}

/// Full desk sweep: at every m the λ=p/2 row should match or beat the λ=0 row
/// in at least four of five seeds. Slow; run with `--ignored`.
#[test]
#[ignore]
fn desk_sweep_instance_rows_dominate() {
    let run = efficacy_run();
    let backbone = pretrained_backbone(&run);
    let data = generate(&run.data).unwrap().splits::<f32>();
    let d = run.vit.dim;
    let mut failures = Vec::new();
    for m in [0, d / 4, d / 2, 3 * d / 4, d] {
        let (with, _) = sweep_cell(&run, &backbone, &data, m, run.prompt.p / 2, &EFFICACY_SEEDS).unwrap();
        let (without, _) = sweep_cell(&run, &backbone, &data, m, 0, &EFFICACY_SEEDS).unwrap();
        let wins = with.iter().zip(&without).filter(|(a, b)| a >= b).count();
        println!("m={m}: with {with:.3?} without {without:.3?} wins {wins}/5");
        if wins < EFFICACY_MIN_WINS {
            failures.push(m);
        }
    }
    assert!(failures.is_empty(), "instance rows lose at m in {failures:?}");
}
