//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. Training-based criteria share checkpoints through
//! the fixture module; three full two-phase trainings run on first demand.
//!
//! Run with `cargo test --test acceptance` (add `-- --nocapture` to watch
//! the PASS lines stream).

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semcom::baseline::{baseline_link, conv_encode, viterbi_decode, CodecConfig};
use semcom::channel::{self, ChannelRealization};
use semcom::eval::{run_sweep, SweepConfig, TaskFilter};
use semcom::fem::{compression_ratio, FemConfig, FemParams};
use semcom::model::{
    count_flops_per_token, count_params, top_k_gate, GateDecision, Model, ModelConfig,
};
use semcom::nn::{Activation, ParamBinder};
use semcom::tasks::{build_corpus, Corpus, TaskId, Vocabulary};
use semcom::tensor::Tensor;
use semcom::training::{
    cross_entropy, read_checkpoint, sample_forward, write_checkpoint, MaskMode, TrainConfig,
    Trainer,
};

// ---------------------------------------------------------------------------
// Shared training fixture.
// ---------------------------------------------------------------------------

/// Default training budget: what `TrainConfig::default()` prescribes, on the
/// default corpus. The first fixture request per seed performs the full
/// two-phase run.
mod fixture {
    use super::*;

    pub struct Artifacts {
        pub corpus: Arc<Corpus>,
        pub phase1_bytes: Vec<u8>,
        pub phase2_bytes: Vec<u8>,
    }

    impl Artifacts {
        pub fn phase1(&self) -> (Model, FemParams) {
            read_checkpoint(&self.phase1_bytes).expect("phase-1 checkpoint reloads")
        }

        pub fn phase2(&self) -> (Model, FemParams) {
            read_checkpoint(&self.phase2_bytes).expect("phase-2 checkpoint reloads")
        }
    }

    pub fn vocab() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::standard)
    }

    pub fn corpus() -> Arc<Corpus> {
        static CORPUS: OnceLock<Arc<Corpus>> = OnceLock::new();
        CORPUS
            .get_or_init(|| Arc::new(build_corpus(vocab(), 0, 1000, 600)))
            .clone()
    }

    pub fn model_config() -> ModelConfig {
        ModelConfig {
            vocab: vocab().len(),
            ..ModelConfig::default()
        }
    }

    pub fn train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..TrainConfig::default()
        }
    }

    /// Both phases at the default budget for one seed, memoized.
    pub fn trained(seed: u64) -> Arc<Artifacts> {
        static RUNS: OnceLock<Mutex<HashMap<u64, Arc<Artifacts>>>> = OnceLock::new();
        let runs = RUNS.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = runs.lock().unwrap();
        if let Some(a) = guard.get(&seed) {
            return a.clone();
        }
        let corpus = corpus();
        let mut trainer = Trainer::init(model_config(), FemConfig::default(), train_config(seed))
            .expect("trainer config valid");
        trainer.phase1_train(&corpus).expect("phase 1 trains");
        let mut phase1_bytes = Vec::new();
        write_checkpoint(&trainer.model, &trainer.fem, &mut phase1_bytes).unwrap();
        trainer.phase2_train(&corpus).expect("phase 2 trains");
        let mut phase2_bytes = Vec::new();
        write_checkpoint(&trainer.model, &trainer.fem, &mut phase2_bytes).unwrap();
        let artifacts = Arc::new(Artifacts {
            corpus,
            phase1_bytes,
            phase2_bytes,
        });
        guard.insert(seed, artifacts.clone());
        artifacts
    }

    pub const SEEDS: [u64; 3] = [42, 43, 44];
}

fn mean_accuracy_per_task(rows: &[semcom::eval::SweepRow]) -> HashMap<TaskId, f64> {
    let mut by_task: HashMap<TaskId, (f64, usize)> = HashMap::new();
    for r in rows {
        let e = by_task.entry(r.task).or_default();
        e.0 += r.exact_match;
        e.1 += 1;
    }
    by_task
        .into_iter()
        .map(|(t, (sum, n))| (t, sum / n as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion 1: gate oracle equivalence.
// ---------------------------------------------------------------------------

/// Independent reimplementation: materialize the logits, sort, softmax over
/// the kept set, scatter back.
fn brute_force_gate(row: &[f32], w_g: &[f32], d: usize, m: usize, k: usize) -> GateDecision {
    let mut logits = vec![0.0f32; m];
    for (j, l) in logits.iter_mut().enumerate() {
        for (i, &x) in row.iter().enumerate() {
            *l += x * w_g[i * m + j];
        }
        let _ = d;
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();
    let max = selected
        .iter()
        .map(|&i| logits[i])
        .fold(f32::NEG_INFINITY, f32::max);
    let mut weights = vec![0.0f32; m];
    let mut sum = 0.0f32;
    for &i in &selected {
        weights[i] = (logits[i] - max).exp();
        sum += weights[i];
    }
    for &i in &selected {
        weights[i] /= sum;
    }
    GateDecision { weights, selected }
}

#[test]
fn criterion_01_gate_matches_brute_force_oracle() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..10_000 {
        let m = rng.gen_range(1..=8usize);
        let k = rng.gen_range(1..=m);
        let d = rng.gen_range(1..=6usize);
        let row: Vec<f32> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w: Vec<f32> = (0..d * m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (weights, decision) = top_k_gate(
            &Tensor::from_slice(1, d, &row),
            &Tensor::from_slice(d, m, &w),
            k,
        );
        let oracle = brute_force_gate(&row, &w, d, m, k);
        assert_eq!(decision.selected, oracle.selected, "case {case}");
        assert_eq!(weights.values(), &oracle.weights[..], "case {case}");
        assert_eq!(decision.weights, oracle.weights, "case {case}");
    }
    let dt = start.elapsed();
    assert!(dt.as_secs() < 10, "took {dt:?}");
    println!("PASS criterion 1: 10000 gate cases match the brute-force oracle exactly ({dt:?})");
}

// ---------------------------------------------------------------------------
// Criterion 2: identical-expert equivalence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_cloned_experts_equal_dense_ffn() {
    let start = std::time::Instant::now();
    let m = 4usize;
    let cfg = ModelConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        experts: m,
        top_k: 1,
        vocab: 8,
        max_seq: 8,
        ffn_hidden: 24,
        activation: Activation::Gelu,
        tied_embeddings: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f32;
    for k in 1..=m {
        let mut moe = semcom::model::MoeFfn::from_seed(&cfg, 7);
        moe.top_k = k;
        let (w1, b1) = (moe.experts[0].w1.w.values.clone(), moe.experts[0].w1.b.values.clone());
        let (w2, b2) = (moe.experts[0].w2.w.values.clone(), moe.experts[0].w2.b.values.clone());
        for e in moe.experts.iter_mut().skip(1) {
            e.w1.w.values.clone_from(&w1);
            e.w1.b.values.clone_from(&b1);
            e.w2.w.values.clone_from(&w2);
            e.w2.b.values.clone_from(&b2);
        }
        for _ in 0..250 {
            let x = Tensor::from_vec(
                2,
                cfg.dim,
                (0..2 * cfg.dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            );
            let binder = ParamBinder::new();
            let got = moe.forward(&x, &binder);
            let want = moe.experts[0].forward(&x, &binder);
            for (a, b) in got.values().iter().zip(want.values()) {
                let rel = (a - b).abs() / b.abs().max(1e-3);
                worst = worst.max(rel);
                assert!(rel <= 1e-5, "K={k}: {a} vs {b}");
            }
        }
    }
    let dt = start.elapsed();
    assert!(dt.as_secs() < 10, "took {dt:?}");
    println!(
        "PASS criterion 2: cloned experts equal the dense FFN for K in 1..=4 \
         (worst relative deviation {worst:.2e}, {dt:?})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: gradient integrity through the full pipeline.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_full_pipeline_gradient_integrity() {
    let start = std::time::Instant::now();
    let vocab = fixture::vocab();
    let mut worst_overall = 0.0f32;
    for seed in [62u64, 63, 64] {
        let cfg = ModelConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            experts: 2,
            top_k: 1,
            vocab: vocab.len(),
            max_seq: 48,
            ffn_hidden: 24,
            activation: Activation::Gelu,
            tied_embeddings: true,
        };
        let mut model = Model::new(cfg, seed).unwrap();
        let mut fem = FemParams::new(
            16,
            FemConfig {
                extractors: 2,
                feature_hidden: 8,
                snr_hidden: 4,
                ..FemConfig::default()
            },
            seed + 100,
        );
        // Saturated keep scores: the threshold path stays inert so the
        // straight-through approximation does not enter the comparison.
        for e in 0..2 {
            let idx = fem
                .named_params_mut()
                .into_iter()
                .find(|(n, _)| n == &format!("fem.extractor{e}.b"))
                .unwrap();
            idx.1.values[0] = 12.0;
        }
        let corpus = build_corpus(vocab, seed, 2, 2);
        let sample = corpus.train[&TaskId::Polarity][0].clone();
        let realization = ChannelRealization::noiseless();

        let loss_value = |model: &Model, fem: &FemParams| -> f64 {
            let binder = ParamBinder::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            sample_forward(
                model,
                fem,
                &sample,
                20.0,
                &realization,
                &mut rng,
                MaskMode::Fem,
                &binder,
            )
            .unwrap()
            .ce
            .value() as f64
        };

        // Analytic gradients for every parameter.
        let binder = ParamBinder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let loss = sample_forward(
            &model,
            &fem,
            &sample,
            20.0,
            &realization,
            &mut rng,
            MaskMode::Fem,
            &binder,
        )
        .unwrap();
        loss.ce.backward();
        let mut analytic: HashMap<String, Vec<f32>> = HashMap::new();
        for (name, p) in model.named_params().iter().chain(fem.named_params().iter()) {
            if let Some(g) = binder.grad_of(p) {
                analytic.insert(name.clone(), g);
            }
        }

        // The f32 loss resolves central differences to about
        // ulp(loss) / (2 * step) ~ 1e-4, so the relative-error guard sits at
        // resolution / tolerance. Coordinates where the two step sizes
        // disagree wildly straddle a top-1 routing flip and violate the
        // smoothness precondition; they are skipped and counted.
        let mut coord_rng = ChaCha8Rng::seed_from_u64(seed * 7 + 1);
        let step = 5e-3f32;
        let eps = 0.1f32;
        let mut worst = 0.0f32;
        let mut skipped = 0usize;
        let mut probed = 0usize;
        let names: Vec<String> = analytic.keys().cloned().collect();
        for name in names {
            let grads = analytic[&name].clone();
            let len = grads.len();
            let probes = 12.min(len);
            for _ in 0..probes {
                let i = coord_rng.gen_range(0..len);
                let mutate = |model: &mut Model, fem: &mut FemParams, delta: f32| {
                    for (n, p) in model
                        .named_params_mut()
                        .into_iter()
                        .chain(fem.named_params_mut())
                    {
                        if n == name {
                            p.values[i] += delta;
                            return;
                        }
                    }
                    unreachable!("parameter {name} exists");
                };
                let fd = |model: &mut Model, fem: &mut FemParams, h: f32| {
                    mutate(model, fem, h);
                    let up = loss_value(model, fem);
                    mutate(model, fem, -2.0 * h);
                    let down = loss_value(model, fem);
                    mutate(model, fem, h);
                    ((up - down) / (2.0 * h as f64)) as f32
                };
                let n1 = fd(&mut model, &mut fem, step);
                let n2 = fd(&mut model, &mut fem, step / 2.0);
                probed += 1;
                if (n1 - n2).abs() > 0.25 * n1.abs().max(n2.abs()) && (n1 - n2).abs() > 3e-4 {
                    skipped += 1;
                    continue;
                }
                let rel = (grads[i] - n1).abs() / (grads[i].abs() + eps);
                worst = worst.max(rel);
            }
        }
        worst_overall = worst_overall.max(worst);
        assert!(worst < 1e-3, "seed {seed}: max relative error {worst}");
        assert!(
            skipped * 10 <= probed,
            "seed {seed}: {skipped}/{probed} probes straddled discontinuities"
        );
    }
    let dt = start.elapsed();
    assert!(dt.as_secs() < 60, "took {dt:?}");
    println!(
        "PASS criterion 3: full-pipeline gradient check, max relative error \
         {worst_overall:.2e} over 3 seeds ({dt:?})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: straight-through estimator drives the compression loss.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_ste_reduces_retained_rows_to_floor() {
    let start = std::time::Instant::now();
    let rows = 8usize;
    let dim = 8usize;
    let mut fem = FemParams::new(
        dim,
        FemConfig {
            extractors: 2,
            feature_hidden: 8,
            snr_hidden: 4,
            ..FemConfig::default()
        },
        404,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let z = Tensor::from_vec(
        rows,
        dim,
        (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let mut optimizer = semcom::training::AdamW::new(5e-2, 0.0);
    let mut trace = Vec::new();
    for _ in 0..200 {
        let binder = ParamBinder::new();
        let mask = fem.forward(&z, 10.0, &binder);
        trace.push(mask.retained_count());
        let l_rho = mask.hard.mean_all();
        l_rho.backward();
        let mut grads = HashMap::new();
        for (_, p) in fem.named_params() {
            if let Some(g) = binder.grad_of(p) {
                grads.insert(p.id(), g);
            }
        }
        let mut params = fem.named_params_mut();
        optimizer.apply(&mut params, &grads);
    }
    // Nonincreasing every 10-step window, down to the never-empty floor.
    let windows: Vec<usize> = trace.chunks(10).map(|w| *w.iter().max().unwrap()).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "windows {windows:?}");
    }
    assert_eq!(*trace.last().unwrap(), 1, "trace end {:?}", &trace[190..]);
    let dt = start.elapsed();
    assert!(dt.as_secs() < 10, "took {dt:?}");
    println!(
        "PASS criterion 4: retained rows fell {} -> 1 (never-empty floor) \
         monotonically per 10-step window ({dt:?})",
        trace[0]
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: channel statistics.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_channel_statistics() {
    let start = std::time::Instant::now();
    let n = 100_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let gauss = |r: &mut ChaCha8Rng| {
        let u1: f32 = r.gen_range(f32::EPSILON..1.0);
        let u2: f32 = r.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
    };
    let mut reports = Vec::new();
    for snr_db in [-5.0f32, 0.0, 10.0, 20.0, 25.0] {
        let values: Vec<f32> = (0..2 * n).map(|_| gauss(&mut rng) * 0.5f32.sqrt()).collect();
        let z = Tensor::from_vec(1, 2 * n, values);
        let real = ChannelRealization {
            h: [1.0, 0.0],
            sigma2: channel::noise_variance(snr_db),
            snr_db,
        };
        let y = channel::transmit(&z, &real, &mut rng);
        let mut sig = 0.0f64;
        let mut noise = 0.0f64;
        for (zi, yi) in z.values().iter().zip(y.values()) {
            sig += (*zi as f64).powi(2);
            noise += (*yi as f64 - *zi as f64).powi(2);
        }
        let measured = 10.0 * (sig / noise).log10();
        assert!(
            (measured - snr_db as f64).abs() < 0.2,
            "target {snr_db} dB, measured {measured:.3} dB"
        );
        reports.push(format!("{snr_db}:{measured:.2}"));
    }
    let mean_gain: f64 = (0..n)
        .map(|_| channel::sample_channel(10.0, &mut rng).gain_power() as f64)
        .sum::<f64>()
        / n as f64;
    assert!((mean_gain - 1.0).abs() < 0.02, "E|h|^2 = {mean_gain:.4}");
    let dt = start.elapsed();
    assert!(dt.as_secs() < 30, "took {dt:?}");
    println!(
        "PASS criterion 5: empirical SNR within 0.2 dB at [{}], E|h|^2 = {mean_gain:.4} ({dt:?})",
        reports.join(", ")
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: noiseless pipeline identity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_noiseless_pipeline_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let z = Tensor::from_vec(
        12,
        64,
        (0..12 * 64).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    );
    let ones = Tensor::ones(12, 1);
    let masked = z.mul(&ones);
    let (kept, _) = channel::filter(&masked, &ones);
    let (received, deep) = channel::apply_channel(&kept, &ChannelRealization::noiseless(), &mut rng);
    assert!(!deep);
    assert_eq!(received.shape(), z.shape());
    let mut worst = 0.0f32;
    for (a, b) in received.values().iter().zip(z.values()) {
        let err = (a - b).abs() / b.abs().max(1.0);
        worst = worst.max(err);
        assert!(err <= 1e-6, "{a} vs {b}");
    }
    println!("PASS criterion 6: noiseless pipeline identity, worst deviation {worst:.2e}");
}

// ---------------------------------------------------------------------------
// Criterion 7: end-to-end learnability.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_phase1_reaches_train_task_accuracy() {
    let start = std::time::Instant::now();
    let artifacts = fixture::trained(fixture::SEEDS[0]);
    let train_time = start.elapsed();
    let (model, fem) = artifacts.phase1();
    let cfg = SweepConfig {
        snr_grid_db: vec![25.0],
        samples_per_point: 500,
        tasks: TaskFilter::Train,
        seed: 7,
        use_fem: false,
        l_max: 6,
    };
    let rows = run_sweep(&model, &fem, fixture::vocab(), &artifacts.corpus, &cfg).unwrap();
    let total: f64 = rows.iter().map(|r| r.exact_match).sum::<f64>() / rows.len() as f64;
    for r in &rows {
        println!(
            "  criterion 7 detail: {} accuracy {:.3} ({} samples)",
            r.task.name(),
            r.exact_match,
            r.samples
        );
    }
    assert!(
        total >= 0.95,
        "train-task exact match {total:.4} below 0.95"
    );
    assert!(
        train_time.as_secs() < 900,
        "default budget exceeded 15 minutes: {train_time:?}"
    );
    println!(
        "PASS criterion 7: phase-1 exact match {total:.4} at 25 dB \
         (budget incl. phase 2 {train_time:?})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: compression/accuracy trade after phase 2.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_compression_accuracy_trade() {
    let artifacts = fixture::trained(fixture::SEEDS[0]);
    let vocab = fixture::vocab();
    let (m1, f1) = artifacts.phase1();
    let (m2, f2) = artifacts.phase2();

    let sweep = |model: &Model, fem: &FemParams, snrs: Vec<f32>, use_fem: bool| {
        let cfg = SweepConfig {
            snr_grid_db: snrs,
            samples_per_point: 500,
            tasks: TaskFilter::Train,
            seed: 8,
            use_fem,
            l_max: 6,
        };
        run_sweep(model, fem, vocab, &artifacts.corpus, &cfg).unwrap()
    };

    let phase1_rows = sweep(&m1, &f1, vec![25.0], false);
    let phase2_rows = sweep(&m2, &f2, vec![-5.0, 20.0, 25.0], true);

    let acc1: f64 =
        phase1_rows.iter().map(|r| r.exact_match).sum::<f64>() / phase1_rows.len() as f64;
    let at = |snr: f32| -> (f64, f64) {
        let rows: Vec<_> = phase2_rows
            .iter()
            .filter(|r| (r.snr_db - snr).abs() < 1e-6)
            .collect();
        (
            rows.iter().map(|r| r.exact_match).sum::<f64>() / rows.len() as f64,
            rows.iter().map(|r| r.mean_rho).sum::<f64>() / rows.len() as f64,
        )
    };
    let (acc2_25, rho_25) = at(25.0);
    let (_, rho_20) = at(20.0);
    let (_, rho_m5) = at(-5.0);

    assert!(rho_25 < 0.9, "mean rho at 25 dB is {rho_25:.3}");
    assert!(
        acc1 - acc2_25 < 0.05,
        "accuracy dropped {:.1} points (phase 1 {acc1:.3}, phase 2 {acc2_25:.3})",
        100.0 * (acc1 - acc2_25)
    );
    assert!(
        rho_m5 >= rho_20,
        "rho at -5 dB ({rho_m5:.3}) below rho at 20 dB ({rho_20:.3})"
    );
    println!(
        "PASS criterion 8: rho(25 dB) = {rho_25:.3} < 0.9, accuracy {acc1:.3} -> {acc2_25:.3}, \
         rho(-5 dB) = {rho_m5:.3} >= rho(20 dB) = {rho_20:.3}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: zero-shot transfer to held-out tasks.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_zero_shot_transfer() {
    let vocab = fixture::vocab();
    let mut per_task: HashMap<TaskId, Vec<f64>> = HashMap::new();
    for &seed in &fixture::SEEDS {
        let artifacts = fixture::trained(seed);
        let (model, fem) = artifacts.phase2();
        let cfg = SweepConfig {
            snr_grid_db: vec![20.0],
            samples_per_point: 500,
            tasks: TaskFilter::HeldOut,
            seed: 9,
            use_fem: true,
            l_max: 6,
        };
        let rows = run_sweep(&model, &fem, vocab, &artifacts.corpus, &cfg).unwrap();
        for (task, acc) in mean_accuracy_per_task(&rows) {
            per_task.entry(task).or_default().push(acc);
        }
    }
    let mut summary = Vec::new();
    for task in TaskId::HELD_OUT {
        let accs = &per_task[&task];
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let chance = task.chance_rate().unwrap();
        summary.push(format!(
            "{}: {mean:.3} vs chance {chance:.2} (per seed {:?})",
            task.name(),
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ));
        assert!(
            mean >= chance + 0.10,
            "{task}: mean accuracy {mean:.3} below chance {chance:.2} + 10 points"
        );
    }
    println!("PASS criterion 9: zero-shot transfer at 20 dB; {}", summary.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 10: published-dimension analytic reproduction.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_published_dimension_counts() {
    let moe = semcom::eval::published_base_config(10);
    let dense = semcom::eval::published_base_config(1);
    let p_moe = count_params(&moe) as f64;
    let f_moe = count_flops_per_token(&moe) as f64;
    let p_dense = count_params(&dense) as f64;
    let f_dense = count_flops_per_token(&dense) as f64;
    assert!(
        (p_moe / 1.27e9 - 1.0).abs() < 0.05,
        "MoE parameters {p_moe:.4e}"
    );
    assert!((f_moe / 3.0e8 - 1.0).abs() < 0.05, "MoE FLOPs {f_moe:.4e}");
    assert!(
        (p_dense / 2.5e8 - 1.0).abs() < 0.05,
        "dense parameters {p_dense:.4e}"
    );
    assert!(
        (f_dense / 3.0e8 - 1.0).abs() < 0.05,
        "dense FLOPs {f_dense:.4e}"
    );
    println!(
        "PASS criterion 10: params {:.3}B/{:.1}M vs 1.27B/250M, FLOPs {:.1}M vs 300M \
         (within 5%)",
        p_moe / 1e9,
        p_dense / 1e6,
        f_moe / 1e6
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: FLOPs invariance in the expert count.
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_flops_invariant_in_expert_count() {
    let make = |experts: usize| ModelConfig {
        experts,
        top_k: 1,
        ..ModelConfig::default()
    };
    let f1 = count_flops_per_token(&make(1));
    let f4 = count_flops_per_token(&make(4));
    let f10 = count_flops_per_token(&make(10));
    assert_eq!(f1, f4);
    assert_eq!(f4, f10);
    println!("PASS criterion 11: FLOPs per token = {f1} for M in {{1, 4, 10}} at K = 1");
}

// ---------------------------------------------------------------------------
// Criterion 12: classical baseline sanity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_baseline_sanity() {
    let start = std::time::Instant::now();
    let cfg = CodecConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let gauss = |r: &mut ChaCha8Rng| {
        let u1: f32 = r.gen_range(f32::EPSILON..1.0);
        let u2: f32 = r.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
    };

    // Coded vs uncoded BER at Eb/N0 = 4 dB over AWGN BPSK, 1e5 info bits.
    let n_bits = 100_000usize;
    let bits: Vec<u8> = (0..n_bits).map(|_| rng.gen_range(0..2)).collect();
    let ebn0 = 10f32.powf(0.4);
    let uncoded_sigma = (0.5 / ebn0).sqrt();
    let uncoded_errors: usize = bits
        .iter()
        .map(|&b| {
            let rx = (1.0 - 2.0 * b as f32) + uncoded_sigma * gauss(&mut rng);
            ((rx < 0.0) != (b == 1)) as usize
        })
        .sum();
    let coded_sigma = (1.0 / ebn0).sqrt();
    let coded = conv_encode(&bits, &cfg);
    let soft: Vec<f32> = coded
        .iter()
        .map(|&b| (1.0 - 2.0 * b as f32) + coded_sigma * gauss(&mut rng))
        .collect();
    let decoded = viterbi_decode(&soft, &cfg);
    let coded_errors: usize = decoded.iter().zip(&bits).filter(|(a, b)| a != b).count();
    let uncoded_ber = uncoded_errors as f64 / n_bits as f64;
    let coded_ber = (coded_errors as f64 / n_bits as f64).max(0.5 / n_bits as f64);
    assert!(
        uncoded_ber >= 10.0 * coded_ber,
        "uncoded {uncoded_ber:.2e} vs coded {coded_ber:.2e}"
    );

    // Text recovery over the fading link.
    let vocab = fixture::vocab();
    let corpus = build_corpus(vocab, 12, 150, 10);
    let prompts: Vec<&str> = corpus
        .train
        .values()
        .flatten()
        .map(|s| s.prompt_text.as_str())
        .collect();
    let mut high = 0usize;
    let mut low = 0usize;
    for (i, p) in prompts.iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(5000 + i as u64);
        let (a, _) = baseline_link(p, 25.0, &mut r, &cfg);
        high += (a == *p) as usize;
        let (b, _) = baseline_link(p, -5.0, &mut r, &cfg);
        low += (b == *p) as usize;
    }
    let high_rate = high as f64 / prompts.len() as f64;
    let low_rate = low as f64 / prompts.len() as f64;
    assert!(high_rate >= 0.99, "25 dB recovery {high_rate:.4}");
    assert!(low_rate < high_rate, "no degradation at -5 dB");
    let dt = start.elapsed();
    assert!(dt.as_secs() < 120, "took {dt:?}");
    println!(
        "PASS criterion 12: BER {uncoded_ber:.2e} (uncoded) vs {coded_ber:.2e} (coded), \
         text recovery {high_rate:.3} at 25 dB vs {low_rate:.3} at -5 dB ({dt:?})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 13: checkpoint continuity across the phase boundary.
// ---------------------------------------------------------------------------

#[test]
fn criterion_13_phase_boundary_continuity() {
    let artifacts = fixture::trained(fixture::SEEDS[0]);
    let (model, fem) = artifacts.phase1();
    let trainer = Trainer::new(model, fem, fixture::train_config(fixture::SEEDS[0])).unwrap();
    let batch: Vec<&semcom::tasks::TaskSample> = artifacts.corpus.train[&TaskId::Membership]
        .iter()
        .take(32)
        .collect();
    let phase1_final = trainer
        .frozen_batch_ce(&batch, 20.0, MaskMode::Bypass, 1313)
        .unwrap();
    let phase2_initial = trainer
        .frozen_batch_ce(&batch, 20.0, MaskMode::ForcedOnes, 1313)
        .unwrap();
    assert!(
        (phase1_final - phase2_initial).abs() < 1e-6,
        "{phase1_final} vs {phase2_initial}"
    );
    println!(
        "PASS criterion 13: frozen-batch loss {phase1_final:.6} == {phase2_initial:.6} \
         across the phase boundary"
    );
}

// ---------------------------------------------------------------------------
// Cross-entropy spot checks used by several criteria above.
// ---------------------------------------------------------------------------

#[test]
fn cross_entropy_closed_forms_hold() {
    let probs = Tensor::from_vec(1, 4, vec![0.25; 4]);
    let (loss, _) = cross_entropy(&probs, &[3]);
    assert!((loss.value() - 4.0f32.ln()).abs() < 1e-6);
    let perfect = Tensor::from_vec(1, 4, vec![0.0, 0.0, 1.0, 0.0]);
    let (zero, _) = cross_entropy(&perfect, &[3]);
    assert_eq!(zero.value(), 0.0);
}
