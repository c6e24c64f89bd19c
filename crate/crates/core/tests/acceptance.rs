//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `cargo test --test acceptance -- --nocapture`
//! to see them).

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capsfuse::baselines::{BaselineConfig, BaselineModel, BaselineStrategy};
use capsfuse::capsule::{squash_tensor, CapsuleTensor, DigitCapsuleLayer, PrimaryCapsuleLayer};
use capsfuse::data::{
    aggregate_sentiment, gen_synthetic, rank_categories, ModalityDims, Role, SentimentTable,
    SimilarityMatrix, SynthMode, SynthSpec,
};
use capsfuse::fusion::{
    image_confidence, numeric_confidence, text_confidence, FusionModel, ModelConfig,
};
use capsfuse::metrics::{f1_at_threshold, partial_auc, roc_auc, roc_auc_pair_count};
use capsfuse::numerics::{finite_diff_check, ParamSet, Tensor};
use capsfuse::probe::single_modality_probe_auc;
use capsfuse::train::{
    auto_class_weights, split_for, train_seeds, weighted_cross_entropy, TrainConfig,
};

fn pass(criterion: usize, message: &str) {
    println!("ACCEPTANCE {criterion} PASS: {message}");
}

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// The fusion configuration used for the synthetic benchmarks: library
/// defaults plus shared text-channel weights, so the text confidence reads
/// the two channels as two noisy reports of one signal.
fn benchmark_fusion_config(ds: &capsfuse::data::MultimodalDataset) -> ModelConfig {
    let mut cfg = ModelConfig::with_dims(
        ds.dim(Role::TextA),
        ds.dim(Role::TextB),
        ds.dim(Role::Image),
        ds.dim(Role::Numeric),
    );
    cfg.share_text_weights = true;
    cfg
}

fn baseline_config(
    ds: &capsfuse::data::MultimodalDataset,
    strategy: BaselineStrategy,
) -> BaselineConfig {
    BaselineConfig::with_dims(
        strategy,
        ds.dim(Role::TextA),
        ds.dim(Role::TextB),
        ds.dim(Role::Image),
        ds.dim(Role::Numeric),
    )
}

// ── 1. gradient integrity ───────────────────────────────────────────────

#[test]
fn criterion_1_full_model_gradient_integrity() {
    let start = Instant::now();
    let ds = gen_synthetic(&SynthSpec {
        n: 24,
        dims: ModalityDims {
            text_a: 12,
            text_b: 12,
            image: 10,
            numeric: 6,
        },
        mode: SynthMode::Separable,
        positive_rate: 0.5,
        noise_sigma: 0.5,
        seed: 5,
    })
    .unwrap();
    let mut cfg = benchmark_fusion_config(&ds);
    cfg.share_text_weights = false; // probe every stack separately
    cfg.n_primary = 4;
    cfg.primary_dim = 8;
    cfg.digit_dim = 8;
    cfg.routing_iters = 3;
    cfg.numeric_hidden = vec![8];
    cfg.numeric_embed_dim = 8;
    let model = FusionModel::new(cfg, 1).unwrap();
    let batch = ds.batch(&[0, 1, 2, 3]);
    let weights = auto_class_weights(&batch.labels, 2).unwrap();

    let mut worst = (String::new(), 0.0f64);
    let mut checked = 0usize;
    for (i, id) in model.params().ids().enumerate() {
        let name = model.params().entries()[i].name.clone();
        let x = model.params().get(id).clone();
        let err = finite_diff_check(
            |tape, var| {
                let fwd = model.forward_on_tape(tape, &batch, Some((id, var)))?;
                weighted_cross_entropy(tape, fwd.probs, &batch.labels, &weights)
            },
            &x,
            1e-5,
        )
        .unwrap();
        checked += x.numel();
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let elapsed = start.elapsed();
    assert!(
        worst.1 < 1e-4,
        "ACCEPTANCE 1 FAIL: worst gradient error {} at {}",
        worst.1,
        worst.0
    );
    assert!(
        elapsed.as_secs() < 60,
        "ACCEPTANCE 1 FAIL: took {elapsed:?}, budget 60 s"
    );
    pass(
        1,
        &format!(
            "max relative gradient error {:.2e} over {checked} coordinates (worst {}), {elapsed:?}",
            worst.1, worst.0
        ),
    );
}

// ── 2. routing invariants ───────────────────────────────────────────────

#[test]
fn criterion_2_routing_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (batch, n_in, n_out, dim) = (2usize, 4usize, 2usize, 6usize);
    for pass_idx in 0..1000 {
        let mut params = ParamSet::new();
        let primary =
            PrimaryCapsuleLayer::init(&mut params, "p", n_in, 5, dim, true, &mut rng).unwrap();
        let digit =
            DigitCapsuleLayer::init(&mut params, "d", n_in, n_out, dim, dim, 3, &mut rng).unwrap();
        let single_iter =
            DigitCapsuleLayer::init(&mut params, "s", n_in, n_out, dim, dim, 1, &mut rng).unwrap();

        let e = Tensor::new(
            vec![batch, 5],
            (0..batch * 5)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
        .unwrap();
        let caps = primary.project_tensor(&params, &e).unwrap();
        // Squashed primary outputs stay inside the unit ball.
        for b in 0..batch {
            for k in 0..n_in {
                let norm2: f64 = caps.capsule(b, k).iter().map(|v| v * v).sum();
                assert!(
                    norm2 < 1.0,
                    "ACCEPTANCE 2 FAIL: squash norm {} at pass {pass_idx}",
                    norm2.sqrt()
                );
            }
        }
        // Raw squash on an unconstrained vector too.
        let raw = Tensor::new(
            vec![1, dim],
            (0..dim).map(|_| rng.random_range(-30.0..30.0)).collect(),
        )
        .unwrap();
        let squashed = squash_tensor(&raw).unwrap();
        let norm: f64 = squashed.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1.0, "ACCEPTANCE 2 FAIL: raw squash norm {norm}");

        let (_, coeffs) = digit.route_tensor(&params, &caps).unwrap();
        coeffs
            .validate(1e-10)
            .unwrap_or_else(|e| panic!("ACCEPTANCE 2 FAIL at pass {pass_idx}: {e}"));

        // One routing iteration is exactly the uniform vote average.
        let (s, _) = single_iter.route_tensor(&params, &caps).unwrap();
        let transforms: Vec<Vec<&Tensor>> = (0..n_in)
            .map(|k| {
                single_iter
                    .transform_ids()
                    .skip(k * n_out)
                    .take(n_out)
                    .map(|id| params.get(id))
                    .collect()
            })
            .collect();
        for b in 0..batch {
            for j in 0..n_out {
                for c in 0..dim {
                    let mut avg = 0.0;
                    for (k, row) in transforms.iter().enumerate() {
                        let w = row[j];
                        let mut acc = 0.0;
                        for i in 0..dim {
                            acc += caps.capsule(b, k)[i] * w.data()[i * dim + c];
                        }
                        avg += acc;
                    }
                    avg /= n_in as f64;
                    assert!(
                        (s.capsule(b, j)[c] - avg).abs() < 1e-12,
                        "ACCEPTANCE 2 FAIL: single-iteration average off at pass {pass_idx}"
                    );
                }
            }
        }
    }
    pass(2, "1000 random forward passes: coefficient rows sum to 1 (1e-10), squash norms < 1, single-iteration routing equals the uniform average (1e-12)");
}

// ── 3. confidence closed forms ──────────────────────────────────────────

#[test]
fn criterion_3_confidence_closed_forms() {
    let caps = |data: Vec<f64>, n: usize, d: usize| {
        CapsuleTensor::new(Tensor::new(vec![1, n, d], data).unwrap()).unwrap()
    };

    // Image: ||squash(s)|| for s = (3, 4) is 25/26; unit norm gives 1/2.
    let s = caps(vec![3.0, 4.0, 1.0, 0.0], 2, 2);
    let z = &image_confidence(&s)[0];
    assert!(
        (z.values[0] - 25.0 / 26.0).abs() < 1e-6 && (z.values[1] - 0.5).abs() < 1e-6,
        "ACCEPTANCE 3 FAIL: image confidence {:?}",
        z.values
    );

    // Text: cosine of (1,0) vs (1,1) is 1/sqrt(2); identical capsules give 1.
    let a = caps(vec![1.0, 0.0, 0.25, -0.5], 2, 2);
    let b = caps(vec![1.0, 1.0, 0.25, -0.5], 2, 2);
    let z = &text_confidence(&a, &b).unwrap()[0];
    assert!(
        (z.values[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6
            && (z.values[1] - 1.0).abs() < 1e-6,
        "ACCEPTANCE 3 FAIL: text confidence {:?}",
        z.values
    );

    // Numeric: equal norms give z = (1.5, 1.5); norms (ln 4, 0) give the
    // entropy-certainty values for p = (0.8, 0.2).
    let s = caps(vec![0.6, 0.8, 1.0, 0.0], 2, 2);
    let z = &numeric_confidence(&s)[0];
    assert!(
        (z.values[0] - 1.5).abs() < 1e-6 && (z.values[1] - 1.5).abs() < 1e-6,
        "ACCEPTANCE 3 FAIL: numeric equal-norm confidence {:?}",
        z.values
    );
    let s = caps(vec![4.0f64.ln(), 0.0, 0.0, 0.0], 2, 2);
    let z = &numeric_confidence(&s)[0];
    assert!(
        (z.values[0] - 1.2575424759098898).abs() < 1e-6
            && (z.values[1] - 1.4643856189774724).abs() < 1e-6,
        "ACCEPTANCE 3 FAIL: numeric entropy confidence {:?}",
        z.values
    );
    pass(3, "image 25/26 and 1/2, text 1/sqrt(2) and 1, numeric (1.5, 1.5) and (1.257542, 1.464386) all within 1e-6");
}

// ── 4. metric oracles ───────────────────────────────────────────────────

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut max_pauc_gap = 0.0f64;
    for instance in 0..500 {
        let n = rng.random_range(2..=200);
        // Quantized scores so ties occur regularly.
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0.0f64..1.0) * 20.0).round() / 20.0)
            .collect();
        let mut labels: Vec<u8> = (0..n)
            .map(|_| u8::from(rng.random_range(0.0f64..1.0) < 0.3))
            .collect();
        labels[0] = 1;
        labels[n - 1] = 0;

        let fast = roc_auc(&scores, &labels).unwrap();
        let oracle = roc_auc_pair_count(&scores, &labels).unwrap();
        assert!(
            fast == oracle,
            "ACCEPTANCE 4 FAIL: instance {instance}: fast {fast} != oracle {oracle}"
        );

        let (raw, standardized) = partial_auc(&scores, &labels, 1.0).unwrap();
        max_pauc_gap = max_pauc_gap
            .max((raw - fast).abs())
            .max((standardized - fast).abs());
        assert!(
            (raw - fast).abs() < 1e-12 && (standardized - fast).abs() < 1e-12,
            "ACCEPTANCE 4 FAIL: instance {instance}: pAUC at fpr_max=1 differs from AUC"
        );

        let threshold = rng.random_range(0.0f64..1.0);
        let (f1, c) = f1_at_threshold(&scores, &labels, threshold).unwrap();
        let direct = if c.tp == 0 {
            0.0
        } else {
            2.0 * c.tp as f64 / (2.0 * c.tp as f64 + c.fp as f64 + c.false_neg as f64)
        };
        assert!(
            f1 == direct,
            "ACCEPTANCE 4 FAIL: instance {instance}: f1 {f1} != direct {direct}"
        );
    }
    pass(
        4,
        &format!("500 instances: AUC equals pair-count oracle exactly, pAUC(fpr_max=1) within {max_pauc_gap:.1e} of AUC, F1 equals the confusion formula exactly"),
    );
}

// ── 5. separable synthetic task ─────────────────────────────────────────

#[test]
fn criterion_5_separable_task_all_strategies() {
    let start = Instant::now();
    let ds = gen_synthetic(&SynthSpec {
        n: 2000,
        dims: ModalityDims::default(),
        mode: SynthMode::Separable,
        positive_rate: 0.14,
        noise_sigma: 0.5,
        seed: 42,
    })
    .unwrap();
    let seeds = [0u64, 1, 2, 3, 4];
    let config = TrainConfig::default();
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);

    let mut summary = String::new();
    for strategy in ["capsnet", "addition", "concatenation", "cross_attention"] {
        let mean = match strategy {
            "capsnet" => {
                let cfg = benchmark_fusion_config(&ds);
                let runs = train_seeds(
                    &ds,
                    &config,
                    &seeds,
                    threads,
                    |seed| FusionModel::new(cfg.clone(), seed),
                    0.1,
                )
                .unwrap();
                runs.iter().map(|r| r.log.test_report.auc).sum::<f64>() / seeds.len() as f64
            }
            name => {
                let kind = match name {
                    "addition" => BaselineStrategy::Addition,
                    "concatenation" => BaselineStrategy::Concatenation,
                    _ => BaselineStrategy::CrossAttention,
                };
                let cfg = baseline_config(&ds, kind);
                let runs = train_seeds(
                    &ds,
                    &config,
                    &seeds,
                    threads,
                    |seed| BaselineModel::new(cfg.clone(), seed),
                    0.1,
                )
                .unwrap();
                runs.iter().map(|r| r.log.test_report.auc).sum::<f64>() / seeds.len() as f64
            }
        };
        assert!(
            mean >= 0.95,
            "ACCEPTANCE 5 FAIL: {strategy} mean test AUC {mean:.4} < 0.95"
        );
        summary.push_str(&format!("{strategy} {mean:.4} "));
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 600,
        "ACCEPTANCE 5 FAIL: took {elapsed:?}, budget 10 min"
    );
    pass(
        5,
        &format!("separable task mean test AUC over 5 seeds: {summary}({elapsed:?})"),
    );
}

// ── 6. cross-modal synthetic task ───────────────────────────────────────

#[test]
fn criterion_6_cross_modal_task() {
    let start = Instant::now();
    let ds = gen_synthetic(&SynthSpec {
        n: 4000,
        dims: ModalityDims::default(),
        mode: SynthMode::XorCrossModal,
        positive_rate: 0.14,
        noise_sigma: 0.3,
        seed: 42,
    })
    .unwrap();
    let seeds = [0u64, 1, 2, 3, 4];
    let config = TrainConfig {
        epochs: 60,
        patience: 0,
        ..TrainConfig::default()
    };
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);

    // No single modality is linearly informative.
    let split = split_for(&ds, &config);
    for role in [Role::TextA, Role::TextB, Role::Image, Role::Numeric] {
        let auc = single_modality_probe_auc(&ds, role, &split, 1e-3).unwrap();
        assert!(
            auc <= 0.60,
            "ACCEPTANCE 6 FAIL: {role} linear probe AUC {auc:.4} > 0.60"
        );
    }

    let caps_cfg = benchmark_fusion_config(&ds);
    let caps_runs = train_seeds(
        &ds,
        &config,
        &seeds,
        threads,
        |seed| FusionModel::new(caps_cfg.clone(), seed),
        0.1,
    )
    .unwrap();
    let caps_mean =
        caps_runs.iter().map(|r| r.log.test_report.auc).sum::<f64>() / seeds.len() as f64;

    let add_cfg = baseline_config(&ds, BaselineStrategy::Addition);
    let add_runs = train_seeds(
        &ds,
        &config,
        &seeds,
        threads,
        |seed| BaselineModel::new(add_cfg.clone(), seed),
        0.1,
    )
    .unwrap();
    let add_mean = add_runs.iter().map(|r| r.log.test_report.auc).sum::<f64>() / seeds.len() as f64;

    assert!(
        caps_mean >= 0.85,
        "ACCEPTANCE 6 FAIL: capsule fusion mean AUC {caps_mean:.4} < 0.85"
    );
    assert!(
        caps_mean >= add_mean - 0.02,
        "ACCEPTANCE 6 FAIL: capsule fusion {caps_mean:.4} below addition {add_mean:.4} - 0.02"
    );
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 1200,
        "ACCEPTANCE 6 FAIL: took {elapsed:?}, budget 20 min"
    );
    pass(
        6,
        &format!("cross-modal task: probes <= 0.60, capsule fusion mean {caps_mean:.4}, addition mean {add_mean:.4} ({elapsed:?})"),
    );
}

// ── 7. imbalance handling ───────────────────────────────────────────────

#[test]
fn criterion_7_imbalance_handling() {
    // Positive counts inside the 3-sigma binomial band around 140/1000.
    let sd = (1000.0f64 * 0.14 * 0.86).sqrt();
    for seed in [1u64, 2, 3, 4, 5] {
        let ds = gen_synthetic(&SynthSpec {
            n: 1000,
            dims: ModalityDims {
                text_a: 4,
                text_b: 4,
                image: 4,
                numeric: 3,
            },
            mode: SynthMode::Separable,
            positive_rate: 0.14,
            noise_sigma: 0.3,
            seed,
        })
        .unwrap();
        let positives = ds.labels().iter().filter(|&&l| l == 1).count() as f64;
        assert!(
            (positives - 140.0).abs() <= 3.0 * sd,
            "ACCEPTANCE 7 FAIL: seed {seed} produced {positives} positives, band 140 +/- {:.1}",
            3.0 * sd
        );
    }

    // Auto class weights follow w_c = B / (n_classes * count_c) exactly.
    let mut labels = vec![0usize; 86];
    labels.extend(vec![1usize; 14]);
    let w = auto_class_weights(&labels, 2).unwrap();
    assert!(
        w[0] == 100.0 / (2.0 * 86.0) && w[1] == 100.0 / (2.0 * 14.0),
        "ACCEPTANCE 7 FAIL: weights {w:?}"
    );
    pass(7, "positive counts within the binomial 99% band over 5 seeds; auto weights equal B/(n_classes * count) exactly");
}

// ── 8. category selection on the fixture matrix ─────────────────────────

#[test]
fn criterion_8_category_selection() {
    let matrix = SimilarityMatrix::read_csv(&fixture("news_similarity.csv")).unwrap();
    let ranking = rank_categories(&matrix);
    let again = rank_categories(&matrix);
    assert_eq!(
        ranking, again,
        "ACCEPTANCE 8 FAIL: ranking not deterministic"
    );

    assert_eq!(
        (ranking.max_pair.0.as_str(), ranking.max_pair.1.as_str()),
        ("Housing", "Mortgage"),
        "ACCEPTANCE 8 FAIL: max pair {:?}",
        ranking.max_pair
    );
    assert!(
        (ranking.max_pair.2 - 0.544).abs() < 1e-12,
        "ACCEPTANCE 8 FAIL: max similarity {}",
        ranking.max_pair.2
    );

    let netherlands = ranking
        .mean_similarity
        .iter()
        .find(|(name, _)| name == "Netherlands")
        .unwrap();
    assert!(
        (netherlands.1 - 0.0234).abs() < 1e-9,
        "ACCEPTANCE 8 FAIL: Netherlands mean off-diagonal {}",
        netherlands.1
    );
    for (name, mean) in &ranking.mean_similarity {
        assert!(
            *mean >= netherlands.1,
            "ACCEPTANCE 8 FAIL: {name} mean {mean} below Netherlands"
        );
    }

    assert_eq!(
        ranking.anchor_distinct,
        ("Mortgage".to_string(), "Netherlands".to_string()),
        "ACCEPTANCE 8 FAIL: anchor rule {:?}",
        ranking.anchor_distinct
    );
    assert_eq!(
        ranking.min_pair_selection,
        ("InterestRate".to_string(), "Netherlands".to_string()),
        "ACCEPTANCE 8 FAIL: min-pair rule {:?}",
        ranking.min_pair_selection
    );
    assert!((ranking.min_pair.2 - (-0.060)).abs() < 1e-12);
    pass(8, "max pair Housing-Mortgage at 0.544; Netherlands minimum mean off-diagonal 0.0234; anchor rule (Mortgage, Netherlands); min pair (InterestRate, Netherlands) at -0.060");
}

// ── 9. sentiment aggregation fixture ────────────────────────────────────

#[test]
fn criterion_9_sentiment_aggregation() {
    let table = SentimentTable::read_csv(&fixture("news_sentiment.csv")).unwrap();
    let means = aggregate_sentiment(&table).unwrap();
    let get = |name: &str| {
        means
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("ACCEPTANCE 9 FAIL: missing category {name}"))
            .1
    };
    assert!(
        (get("Unemployment") - (-0.391)).abs() < 1e-12,
        "ACCEPTANCE 9 FAIL: Unemployment {}",
        get("Unemployment")
    );
    assert!(
        (get("InterestRate") - 0.287).abs() < 1e-12,
        "ACCEPTANCE 9 FAIL: InterestRate {}",
        get("InterestRate")
    );
    pass(
        9,
        "single-document categories aggregate to Unemployment -0.391 and InterestRate 0.287",
    );
}

// ── 10. byte-level reproducibility ──────────────────────────────────────

#[test]
fn criterion_10_reproducibility() {
    let caps = env!("CARGO_BIN_EXE_capsfuse");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let output = std::process::Command::new(caps)
            .args(args)
            .current_dir(dir.path())
            .output()
            .expect("binary runs");
        assert!(
            output.status.success(),
            "ACCEPTANCE 10 FAIL: {args:?}: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    };

    for tag in ["a", "b"] {
        run(&[
            "synth",
            "--mode",
            "separable",
            "--n",
            "400",
            "--seed",
            "9",
            "--dim-text-a",
            "6",
            "--dim-text-b",
            "6",
            "--dim-image",
            "5",
            "--dim-numeric",
            "4",
            "--out",
            &format!("d_{tag}.cfds"),
        ]);
        std::fs::write(
            dir.path().join(format!("cfg_{tag}.json")),
            r#"{ "model": { "fusion": "capsnet", "n_primary": 3, "primary_dim": 6,
                            "digit_dim": 6, "numeric_hidden": [8], "numeric_embed_dim": 6 },
                 "train": { "epochs": 4, "batch_size": 32, "seed": 11, "patience": 0 },
                 "eval": { "n_seeds": 2 } }"#,
        )
        .unwrap();
        run(&[
            "train",
            "--config",
            &format!("cfg_{tag}.json"),
            "--data",
            &format!("d_{tag}.cfds"),
            "--out",
            &format!("run_{tag}"),
        ]);
    }

    let bytes = |rel: String| std::fs::read(dir.path().join(rel)).unwrap();
    assert_eq!(
        bytes("d_a.cfds".into()),
        bytes("d_b.cfds".into()),
        "ACCEPTANCE 10 FAIL: dataset files differ"
    );
    for seed in [11, 12] {
        assert_eq!(
            bytes(format!("run_a/seed_{seed}/model.cfmd")),
            bytes(format!("run_b/seed_{seed}/model.cfmd")),
            "ACCEPTANCE 10 FAIL: model files differ for seed {seed}"
        );
    }
    assert_eq!(
        bytes("run_a/report.json".into()),
        bytes("run_b/report.json".into()),
        "ACCEPTANCE 10 FAIL: aggregate reports differ"
    );
    pass(10, "dataset files, per-seed model files, and the aggregate report are bitwise identical across two identical runs");
}
