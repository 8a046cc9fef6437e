//! Acceptance suite. Each test prints one `criterion N: PASS/FAIL` line
//! (visible with `cargo test --test acceptance -- --nocapture`); the
//! desk-scale adaptation experiment behind criteria 6-8 runs once and is
//! shared.

use std::sync::OnceLock;
use std::time::Instant;

use magnet_da::autodiff::{Mode, Tape};
use magnet_da::checkpoint::{load_model, save_model};
use magnet_da::data::{generate_shapes, split_dataset, write_dataset, Domain, DomainPair};
use magnet_da::losses::KernelSpec;
use magnet_da::network::{MagnetModel, NetworkConfig, TransitionType};
use magnet_da::rng::SplitMix64;
use magnet_da::tensor::Tensor;
use magnet_da::train::{
    evaluate, mean_std, run_experiment, train, ExperimentResult, Method, TapMode, TaskSpec,
    TrainConfig,
};
use magnet_da::verify;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

#[test]
fn criterion_1_mmd_oracle_equivalence() {
    let start = Instant::now();
    let check = verify::mmd_check(100, 64, 16, 20260808).expect("mmd check runs");
    let wall = start.elapsed().as_secs_f64();
    report(
        "1 (MMD oracle equivalence)",
        check.pass && wall < 10.0,
        &format!(
            "100 instances, max_dev={:.3e} < 1e-10, {wall:.1}s < 10s",
            check.max_dev
        ),
    );
}

#[test]
fn criterion_2_mmd_properties() {
    let props = verify::mmd_properties(100, 64, 16, 20260808).expect("mmd properties run");
    report(
        "2 (MMD properties)",
        props.pass,
        &format!(
            "min={:.3e} >= -1e-12, symmetry_dev={:.3e} <= 1e-12, self={:.3e} == 0",
            props.min_value, props.max_symmetry_dev, props.max_self_value
        ),
    );
}

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let summaries =
        verify::gradcheck_components(None, 20260808, false).expect("gradient suite runs");
    let wall = start.elapsed().as_secs_f64();
    let worst = summaries
        .iter()
        .max_by(|a, b| {
            (a.max_rel_err / a.tol)
                .partial_cmp(&(b.max_rel_err / b.tol))
                .expect("finite")
        })
        .expect("nonempty");
    let all_pass = summaries.iter().all(|s| s.pass());
    report(
        "3 (gradient suite)",
        all_pass && wall < 60.0,
        &format!(
            "{} components, worst {}={:.3e} (tol {:.0e}), {wall:.1}s < 60s",
            summaries.len(),
            worst.component,
            worst.max_rel_err,
            worst.tol
        ),
    );
}

#[test]
fn criterion_4_closed_form_loss_values() {
    let mut tape = Tape::new();

    let uniform = tape.input(Tensor::full(&[3, 4], 0.25));
    let h = tape.entropy(uniform).expect("entropy");
    let entropy_val = tape.value(h).item().expect("scalar");

    let logits = tape.input(Tensor::zeros(&[5, 10]));
    let nll = tape.nll_loss(logits, &[0, 3, 9, 5, 1]).expect("nll");
    let nll_val = tape.value(nll).item().expect("scalar");

    let zs = tape.input(Tensor::from_vec(vec![1, 1], vec![0.0]).expect("shape"));
    let zt = tape.input(Tensor::from_vec(vec![1, 1], vec![2.0]).expect("shape"));
    let mmd = tape.mmd_biased(zs, zt, &[1.0], &[1.0]).expect("mmd");
    let mmd_val = tape.value(mmd).item().expect("scalar");

    let e_ok = (entropy_val - 1.386294).abs() < 1e-6;
    let n_ok = (nll_val - 2.302585).abs() < 1e-6;
    let m_ok = (mmd_val - 1.729329).abs() < 1e-6;
    report(
        "4 (closed-form loss values)",
        e_ok && n_ok && m_ok,
        &format!(
            "entropy(U, c=4)={entropy_val:.6}, NLL(U, c=10)={nll_val:.6}, MMD(0,2;s=1)={mmd_val:.6}"
        ),
    );
}

#[test]
fn criterion_5_architecture_bookkeeping() {
    let mut ok = true;
    let mut notes = Vec::new();

    // Tap count and channel recurrence across several configurations.
    for (blocks, layers, growth, stem, theta) in [
        (1usize, 1usize, 4usize, 4usize, 0.5f64),
        (2, 2, 4, 8, 0.5),
        (3, 3, 8, 16, 0.5),
        (2, 3, 5, 12, 0.4),
    ] {
        let cfg = NetworkConfig {
            num_blocks: blocks,
            layers_per_block: layers,
            growth_rate: growth,
            stem_channels: stem,
            transition_compression: theta,
            ..NetworkConfig::new(1, 32, 6)
        };
        ok &= cfg.tap_count() == blocks + 1;
        // Closed-form recurrence, written out independently.
        let mut c = stem;
        for (block_out, compressed) in cfg.channel_plan() {
            ok &= block_out == c + layers * growth;
            ok &= compressed == (theta * block_out as f64).ceil() as usize;
            c = compressed;
        }
        ok &= cfg.final_channels() == c;
    }
    notes.push("tap count = blocks + 1 and C + L*k recurrence hold".to_string());

    // Zero-initialized residual head: argmax(f_t) == argmax(f_s).
    let cfg = NetworkConfig {
        num_blocks: 2,
        layers_per_block: 2,
        growth_rate: 4,
        stem_channels: 8,
        tap_fc_dim: 8,
        ..NetworkConfig::new(1, 16, 5)
    };
    let mut model = MagnetModel::new(cfg.clone(), 99).expect("model builds");
    let mut rng = SplitMix64::new(17);
    let batch = Tensor::from_vec(
        vec![8, 1, 16, 16],
        (0..8 * 256).map(|_| rng.uniform(0.0, 1.0)).collect(),
    )
    .expect("shape");
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, Mode::Eval).expect("forward");
    let (fs, ft) = (tape.value(out.fs_logits), tape.value(out.ft_probs));
    let taps_ok = out.transition_taps.len() + 1 == cfg.tap_count();
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| {
                if v > acc.1 {
                    (j, v)
                } else {
                    acc
                }
            })
            .0
    };
    let mut argmax_ok = true;
    for i in 0..8 {
        argmax_ok &= argmax(&fs.data()[i * 5..(i + 1) * 5]) == argmax(&ft.data()[i * 5..(i + 1) * 5]);
    }
    notes.push(format!(
        "taps={} argmax(f_t)==argmax(f_s) at init: {argmax_ok}",
        out.transition_taps.len() + 1
    ));
    ok &= taps_ok && argmax_ok;

    report("5 (architecture bookkeeping)", ok, &notes.join("; "));
}

#[test]
fn criterion_9_determinism_and_round_trips() {
    let dir = tempfile::tempdir().expect("tempdir");
    let network = NetworkConfig {
        num_blocks: 2,
        layers_per_block: 1,
        growth_rate: 4,
        stem_channels: 6,
        tap_fc_dim: 8,
        transition_type: TransitionType::B,
        ..NetworkConfig::new(1, 16, 3)
    };
    let cfg = TrainConfig {
        iterations: 20,
        batch_size: 4,
        seed: 123,
        lambda_mmd: 0.3,
        gamma_entropy: 0.1,
        ..TrainConfig::default()
    };
    let source = generate_shapes(Domain::Cad, 3, 30, 16, 5).expect("gen");
    let target = generate_shapes(Domain::Photo, 3, 30, 16, 6).expect("gen");
    let pair = DomainPair::new(source.clone(), target).expect("pair");

    // Identical seeds give bit-identical checkpoints.
    let run = |path: &std::path::Path| {
        let mut model = MagnetModel::new(network.clone(), cfg.seed).expect("model");
        train(&mut model, &pair, &cfg).expect("train");
        save_model(&model, path).expect("save");
        model
    };
    let ck1 = dir.path().join("a.dmck");
    let ck2 = dir.path().join("b.dmck");
    let mut model = run(&ck1);
    run(&ck2);
    let identical = std::fs::read(&ck1).expect("read") == std::fs::read(&ck2).expect("read");

    // DMDS round-trips bitwise at the file level.
    let ds_path = dir.path().join("ds.dmds");
    write_dataset(&source, &ds_path).expect("write");
    let round = magnet_da::data::read_dataset(&ds_path).expect("read");
    let ds_path2 = dir.path().join("ds2.dmds");
    write_dataset(&round, &ds_path2).expect("write");
    let dmds_ok = std::fs::read(&ds_path).expect("read") == std::fs::read(&ds_path2).expect("read");

    // DMCK round-trips bitwise, and eval after reload matches in-memory
    // evaluation exactly.
    let mut reloaded = load_model(&ck1).expect("load");
    let ck3 = dir.path().join("c.dmck");
    save_model(&reloaded, &ck3).expect("save");
    let dmck_ok = std::fs::read(&ck1).expect("read") == std::fs::read(&ck3).expect("read");
    let acc_mem = evaluate(&mut model, &source).expect("eval");
    let acc_disk = evaluate(&mut reloaded, &source).expect("eval");
    let eval_ok = acc_mem == acc_disk;

    report(
        "9 (determinism & round-trips)",
        identical && dmds_ok && dmck_ok && eval_ok,
        &format!(
            "checkpoints bit-identical: {identical}, DMDS bitwise: {dmds_ok}, \
             DMCK bitwise: {dmck_ok}, eval reload exact: {eval_ok}"
        ),
    );
}

// ---- the desk-scale experiment (criteria 6-8 + the domain-gap invariant) ----

/// Frozen acceptance-experiment configuration. Values are pinned here, in
/// code, from the reference runs; see ACCEPTANCE_NOTES in the repository
/// README for the recorded baseline numbers.
mod frozen {
    /// Margin the full method must beat source-only by on cad -> photo.
    pub const CAD_PHOTO_MARGIN: f64 = 0.10;
    /// Margin on sketch -> photo.
    pub const SKETCH_PHOTO_MARGIN: f64 = 0.05;
    pub const CLASSES: usize = 6;
    pub const N_PER_DOMAIN: usize = 1200;
    pub const IMAGE_SIZE: usize = 32;
    pub const ITERATIONS: usize = 2000;
    pub const SEEDS: usize = 5;
    pub const DATA_SEED: u64 = 42;
    pub const BASE_LR: f64 = 0.01;
    pub const BATCH: usize = 8;
    pub const LAMBDA_MMD: f64 = 0.3;
    pub const GAMMA_ENTROPY: f64 = 0.1;
}

struct ExperimentOutcome {
    result: ExperimentResult,
    /// (source accuracy, photo30 accuracy, sketch accuracy) per seed for
    /// photo-trained source-only models.
    photo_probe: Vec<(f64, f64, f64)>,
    wall_criterion6: f64,
}

fn acceptance_network() -> NetworkConfig {
    NetworkConfig {
        num_blocks: 2,
        layers_per_block: 2,
        growth_rate: 4,
        stem_channels: 8,
        tap_fc_dim: 16,
        transition_type: TransitionType::A,
        ..NetworkConfig::new(1, frozen::IMAGE_SIZE, frozen::CLASSES)
    }
}

fn acceptance_train_config() -> TrainConfig {
    TrainConfig {
        base_lr: frozen::BASE_LR,
        iterations: frozen::ITERATIONS,
        batch_size: frozen::BATCH,
        lambda_mmd: frozen::LAMBDA_MMD,
        gamma_entropy: frozen::GAMMA_ENTROPY,
        seed: 0,
        repetitions: frozen::SEEDS,
        kernel: KernelSpec::MedianHeuristic,
        eval_stride: 500,
        log_stride: 1,
        ..TrainConfig::default()
    }
}

fn experiment() -> &'static ExperimentOutcome {
    static OUTCOME: OnceLock<ExperimentOutcome> = OnceLock::new();
    OUTCOME.get_or_init(|| {
        let network = acceptance_network();
        let cfg = acceptance_train_config();

        let cad = generate_shapes(
            Domain::Cad,
            frozen::CLASSES,
            frozen::N_PER_DOMAIN,
            frozen::IMAGE_SIZE,
            frozen::DATA_SEED,
        )
        .expect("cad dataset");
        let photo = generate_shapes(
            Domain::Photo,
            frozen::CLASSES,
            frozen::N_PER_DOMAIN,
            frozen::IMAGE_SIZE,
            frozen::DATA_SEED,
        )
        .expect("photo dataset");
        let sketch = generate_shapes(
            Domain::Sketch,
            frozen::CLASSES,
            frozen::N_PER_DOMAIN,
            frozen::IMAGE_SIZE,
            frozen::DATA_SEED,
        )
        .expect("sketch dataset");

        // Criterion 6 subset: magnet vs source-only on both tasks.
        let tasks = vec![
            TaskSpec {
                name: "cad2photo".into(),
                pair: DomainPair::new(cad.clone(), photo.clone()).expect("pair"),
            },
            TaskSpec {
                name: "sketch2photo".into(),
                pair: DomainPair::new(sketch.clone(), photo.clone()).expect("pair"),
            },
        ];
        let start6 = Instant::now();
        let main = run_experiment(
            &tasks,
            &network,
            &cfg,
            &[Method::Magnet, Method::SourceOnly],
            0,
        )
        .expect("criterion 6 experiment");
        let wall_criterion6 = start6.elapsed().as_secs_f64();

        // Criterion 7 addition: the final-tap-only ablation on cad -> photo.
        let cad_task = vec![TaskSpec {
            name: "cad2photo".into(),
            pair: DomainPair::new(cad.clone(), photo.clone()).expect("pair"),
        }];
        let single = run_experiment(&cad_task, &network, &cfg, &[Method::SingleTap], 0)
            .expect("single-tap ablation");

        // Domain-gap probe: source-only models trained on photo70 must do
        // better on held-out photo30 than on sketches.
        let (photo70, photo30) =
            split_dataset(&photo, 0.7, frozen::DATA_SEED).expect("photo split");
        let probe_network = network.clone();
        let mut photo_probe = Vec::new();
        for rep in 0..frozen::SEEDS as u64 {
            let probe_cfg = TrainConfig {
                seed: rep,
                ..Method::SourceOnly.apply(&cfg)
            };
            let pair = DomainPair::new(photo70.clone(), photo30.clone()).expect("pair");
            let mut model = MagnetModel::new(probe_network.clone(), rep).expect("model");
            let run = train(&mut model, &pair, &probe_cfg).expect("photo probe run");
            let sketch_acc = evaluate(&mut model, &sketch).expect("sketch eval");
            photo_probe.push((run.source_acc, run.final_target_acc, sketch_acc));
        }

        let mut records = main.records;
        records.extend(single.records);
        ExperimentOutcome {
            result: ExperimentResult { records },
            photo_probe,
            wall_criterion6,
        }
    })
}

#[test]
fn criterion_6_desk_scale_adaptation_wins() {
    let outcome = experiment();
    let r = &outcome.result;
    let (cad_magnet, cad_magnet_std) = r.mean_target_acc("cad2photo", Method::Magnet).expect("runs");
    let (cad_source, cad_source_std) =
        r.mean_target_acc("cad2photo", Method::SourceOnly).expect("runs");
    let (sk_magnet, sk_magnet_std) =
        r.mean_target_acc("sketch2photo", Method::Magnet).expect("runs");
    let (sk_source, sk_source_std) =
        r.mean_target_acc("sketch2photo", Method::SourceOnly).expect("runs");

    let cad_gap = cad_magnet - cad_source;
    let sk_gap = sk_magnet - sk_source;
    let pass = cad_gap >= frozen::CAD_PHOTO_MARGIN
        && sk_gap >= frozen::SKETCH_PHOTO_MARGIN
        && outcome.wall_criterion6 < 900.0;
    report(
        "6 (desk-scale adaptation wins)",
        pass,
        &format!(
            "cad2photo: magnet {cad_magnet:.3}±{cad_magnet_std:.3} vs source-only \
             {cad_source:.3}±{cad_source_std:.3} (gap {cad_gap:.3} >= {}); sketch2photo: \
             {sk_magnet:.3}±{sk_magnet_std:.3} vs {sk_source:.3}±{sk_source_std:.3} \
             (gap {sk_gap:.3} >= {}); wall {:.0}s < 900s",
            frozen::CAD_PHOTO_MARGIN,
            frozen::SKETCH_PHOTO_MARGIN,
            outcome.wall_criterion6
        ),
    );
}

#[test]
fn criterion_7_ablation_ordering() {
    let outcome = experiment();
    let r = &outcome.result;
    let (all_taps, _) = r.mean_target_acc("cad2photo", Method::Magnet).expect("runs");
    let (final_only, _) = r.mean_target_acc("cad2photo", Method::SingleTap).expect("runs");

    // Soft criterion: report the ordering.
    println!(
        "criterion 7 report: all-taps {all_taps:.3} vs final-tap-only {final_only:.3} \
         (multi-tap advantage {:+.3})",
        all_taps - final_only
    );

    // Hard criterion: all-taps beats source-only in every seed pairing.
    let magnet_runs = r.runs("cad2photo", Method::Magnet);
    let source_runs = r.runs("cad2photo", Method::SourceOnly);
    let mut per_seed = Vec::new();
    let mut pass = true;
    for m in &magnet_runs {
        let s = source_runs
            .iter()
            .find(|s| s.seed == m.seed)
            .expect("matching seed");
        per_seed.push(format!(
            "seed {}: {:.3} vs {:.3}",
            m.seed, m.target_acc, s.target_acc
        ));
        pass &= m.target_acc > s.target_acc;
    }
    report(
        "7 (ablation ordering, hard part)",
        pass,
        &format!(
            "all-taps > source-only per seed on cad2photo [{}]",
            per_seed.join(", ")
        ),
    );
}

#[test]
fn criterion_8_entropy_mechanism() {
    let outcome = experiment();
    let magnet_runs = outcome.result.runs("cad2photo", Method::Magnet);
    let mut pass = !magnet_runs.is_empty();
    let mut notes = Vec::new();
    for run in magnet_runs
        .iter()
        .chain(outcome.result.runs("sketch2photo", Method::Magnet).iter())
    {
        let first = run.logs.first().expect("logged");
        let last = run.logs.last().expect("logged");
        assert_eq!(first.iteration, 0, "iteration 0 must be logged");
        let dropped = last.report.target_entropy < first.report.target_entropy;
        notes.push(format!(
            "{} seed {}: H0={:.3} -> H_final={:.3}",
            run.task, run.seed, first.report.target_entropy, last.report.target_entropy
        ));
        pass &= dropped;
    }
    report(
        "8 (entropy mechanism)",
        pass,
        &format!(
            "target prediction entropy strictly falls in every magnet run [{}]",
            notes.join("; ")
        ),
    );
}

/// Data-module invariant tied to the acceptance runs: the synthetic domain
/// gap is real. Photo-trained source-only models do better on held-out
/// photos than on sketches, per seed.
#[test]
fn domain_gap_is_real() {
    let outcome = experiment();
    let mut pass = !outcome.photo_probe.is_empty();
    let mut notes = Vec::new();
    for (i, (_, photo_acc, sketch_acc)) in outcome.photo_probe.iter().enumerate() {
        notes.push(format!("seed {i}: photo30 {photo_acc:.3} vs sketch {sketch_acc:.3}"));
        pass &= photo_acc > sketch_acc;
    }
    report("data invariant (domain gap)", pass, &notes.join("; "));
}

/// Training-module example pinned at acceptance scale: supervised source
/// training reaches high accuracy on its own training set, and the MMD trace
/// of the adapted runs decreases.
#[test]
fn training_dynamics_examples() {
    let outcome = experiment();

    // Supervised source training reaches > 0.9 accuracy on its own photo
    // training split.
    let source_train_ok = outcome.photo_probe.iter().all(|&(src, _, _)| src > 0.9);

    // Mean MMD over the last tenth of iterations is below the first tenth
    // for every adapted cad2photo run.
    let magnet_runs = outcome.result.runs("cad2photo", Method::Magnet);
    let mut mmd_ok = true;
    let mut notes = Vec::new();
    for run in &magnet_runs {
        let n = run.logs.len();
        let tenth = (n / 10).max(1);
        let mean_mmd = |logs: &[magnet_da::train::IterationLog]| {
            let mut acc = 0.0;
            for log in logs {
                acc += log.report.mmd_per_tap.iter().sum::<f64>();
            }
            acc / logs.len() as f64
        };
        let first = mean_mmd(&run.logs[..tenth]);
        let last = mean_mmd(&run.logs[n - tenth..]);
        notes.push(format!("seed {}: {first:.4} -> {last:.4}", run.seed));
        mmd_ok &= last < first;
    }
    report(
        "training dynamics (source fit, MMD decrease)",
        source_train_ok && mmd_ok,
        &format!(
            "photo source_acc {:?}, mmd first->last tenth [{}]",
            outcome
                .photo_probe
                .iter()
                .map(|&(src, _, _)| (src * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            notes.join("; ")
        ),
    );
}

/// Evaluation example: chance-level accuracy for an untrained model.
#[test]
fn untrained_model_is_at_chance() {
    let ds = generate_shapes(Domain::Photo, 4, 1000, 16, 77).expect("gen");
    let cfg = NetworkConfig {
        num_blocks: 1,
        layers_per_block: 1,
        growth_rate: 4,
        stem_channels: 4,
        tap_fc_dim: 8,
        ..NetworkConfig::new(1, 16, 4)
    };
    let mut model = MagnetModel::new(cfg, 3).expect("model");
    let acc = evaluate(&mut model, &ds).expect("eval");
    let (mean, _) = mean_std(&[acc]);
    report(
        "evaluation sanity (chance level)",
        (acc - 0.25).abs() < 0.1,
        &format!("untrained accuracy {mean:.3} within 0.25±0.1"),
    );
}

/// The single-tap configuration must genuinely reduce to one MMD site.
#[test]
fn single_tap_mode_uses_one_site() {
    let cfg = TrainConfig {
        tap_mode: TapMode::FinalOnly,
        ..acceptance_train_config()
    };
    assert_eq!(cfg.tap_mode, TapMode::FinalOnly);
    let outcome = experiment();
    let single_runs = outcome.result.runs("cad2photo", Method::SingleTap);
    let ok = single_runs
        .iter()
        .all(|r| r.logs.iter().all(|l| l.report.mmd_per_tap.len() == 1));
    report(
        "single-tap bookkeeping",
        ok,
        "final-tap ablation logs exactly one MMD value per iteration",
    );
}
