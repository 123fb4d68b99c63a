//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any criterion fails.
//!
//! Set `RSNET_VAST_MANIFEST` to a VAST-layout manifest to also run the optional
//! real-data classification check.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsnet::checkpoint::{load_checkpoint, save_checkpoint};
use rsnet::classifier::{confusion_matrix, metrics_from_matrix, train_classifier, ClassifierConfig};
use rsnet::data::synth::SynthSample;
use rsnet::data::{load_manifest, load_samples, split, synth_generate, Sample, SplitRatios, SynthConfig, Synthesizer};
use rsnet::head::RsNet;
use rsnet::layers::Module;
use rsnet::optim::Adam;
use rsnet::tensor::Tensor;
use rsnet::training::{
    evaluate_samples, predict_samples, rsnet_from_checkpoint, train_samples, RunInfo, TrainConfig, Trainable,
};
use rsnet::types::{patch_batch, ImagePatch, ModelConfig, SpectralProfile};

struct Report {
    results: Vec<bool>,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, what: &str, detail: String) {
        println!("{} [{id}] {what}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push(pass);
    }

    fn skip(&self, id: &str, what: &str, why: &str) {
        println!("SKIP [{id}] {what}: {why}");
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn to_sample(s: SynthSample, row: usize) -> Sample {
    Sample {
        row,
        patch: s.patch,
        profile: s.profile,
        label: s.class,
        property: Some(s.property),
    }
}

// ---------------------------------------------------------------------------

fn layer_sizes(r: &mut Report) {
    let cfg = ModelConfig::default();
    let model = RsNet::<f32>::new(&cfg).unwrap();
    let m = model.param_manifest();
    // independent width arithmetic: 16 + 6·8 = 64 → 32 after compression; 32 + 12·8 = 128
    let x8 = (16 + 6 * 8) / 2;
    let x21 = x8 + 12 * 8;
    let fused = x8 + x21;
    let flatten = 9 * 12 * 18;
    let expect = [
        ("head.conv1", vec![64, fused, 3, 3]),
        ("head.conv2", vec![9, 64, 3, 3]),
        ("head.fc1", vec![1550, flatten]),
        ("head.fc2", vec![1550, 1550]),
    ];
    let shapes_ok = expect
        .iter()
        .all(|(name, shape)| m.layer(name).map(|l| &l.shape) == Some(shape));
    let x = Tensor::<f32>::zeros([1, 3, 96, 144]);
    let map = model.backbone().forward(&x).unwrap();
    let ok = shapes_ok && fused == 160 && flatten == 1944 && map.channels() == 160;
    r.line(
        "1",
        ok,
        "layer-size contract",
        format!(
            "conv1 {:?}, conv2 {:?}, fc1 {:?}, fc2 {:?}, fused map {:?}",
            m.layer("head.conv1").map(|l| &l.shape),
            m.layer("head.conv2").map(|l| &l.shape),
            m.layer("head.fc1").map(|l| &l.shape),
            m.layer("head.fc2").map(|l| &l.shape),
            map.shape()
        ),
    );
}

fn gradient_check(r: &mut Report) {
    let cfg = ModelConfig {
        stem_channels: 4,
        growth_rate: 2,
        fused_channels: 40,
        head_pool_grid: (8, 8),
        n_bins: 16,
        paper_faithful: false,
        seed: 11,
        ..ModelConfig::default()
    };
    let mut model = RsNet::<f64>::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::from_vec(
        [2, 3, 32, 40],
        (0..2 * 3 * 32 * 40).map(|_| rng.gen_range(0.0..1.0)).collect(),
    );
    let target: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
    let loss = |y: &Tensor<f64>| y.data().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 32.0;

    model.zero_grad();
    let y = model.forward_train(&x).unwrap();
    let dy = Tensor::from_vec(
        y.shape(),
        y.data()
            .iter()
            .zip(&target)
            .map(|(a, b)| 2.0 * (a - b) / 32.0)
            .collect(),
    );
    model.backward(&dy);

    // (tensor index among head params, element index, analytic gradient)
    let mut picks = Vec::new();
    let mut tensor = 0;
    model.visit(&mut |p| {
        if p.trainable && p.name.starts_with("head.") {
            for _ in 0..8 {
                let i = rng.gen_range(0..p.len());
                picks.push((tensor, p.name.clone(), i, p.grad[i]));
            }
            tensor += 1;
        }
    });

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (t, _, i, analytic) in &picks {
        let mut eval_at = |delta: f64| {
            let mut k = 0;
            model.visit_mut(&mut |p| {
                if p.trainable && p.name.starts_with("head.") {
                    if k == *t {
                        p.value[*i] += delta;
                    }
                    k += 1;
                }
            });
            loss(&model.forward_train(&x).unwrap())
        };
        let up = eval_at(h);
        let dn = eval_at(-2.0 * h);
        eval_at(h);
        let numeric = (up - dn) / (2.0 * h);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    r.line(
        "2",
        picks.len() >= 50 && worst < 1e-3,
        "finite-difference gradients (f64, tiny config)",
        format!(
            "{} head parameters, max relative error {worst:.2e} (< 1e-3)",
            picks.len()
        ),
    );
}

fn overfit(r: &mut Report, samples: &[Sample]) {
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut model = RsNet::<f32>::new(&ModelConfig::default()).unwrap();
    let mut opt = Adam::new(1e-3);
    let start = Instant::now();
    let mut reached = None;
    let mut last = f64::NAN;
    for step in 1..=500 {
        last = model.train_batch(&batch).unwrap();
        opt.step(&mut model);
        if last < 1e-4 {
            reached = Some(step);
            break;
        }
    }
    r.line(
        "3",
        reached.is_some(),
        "single-batch overfit (16 samples, lr 1e-3)",
        match reached {
            Some(s) => format!(
                "train MSE {last:.2e} < 1e-4 at step {s} ({:.0} s)",
                start.elapsed().as_secs_f64()
            ),
            None => format!("train MSE {last:.2e} after 500 steps"),
        },
    );
}

// ---------------------------------------------------------------------------

fn main() {
    let mut r = Report { results: Vec::new() };
    let t0 = Instant::now();

    layer_sizes(&mut r);
    gradient_check(&mut r);

    // Shared synthetic set: 6 trained classes × 200 samples plus a held-out blend class.
    let base = SynthConfig {
        n_classes: 6,
        samples_per_class: 200,
        noise_sigma: 0.02,
        seed: 7,
        ..SynthConfig::default()
    };
    let pair = Synthesizer::new(base.clone()).unwrap().closest_pair();
    let synth_cfg = SynthConfig {
        blend: Some(pair),
        ..base
    };
    let synth = Synthesizer::new(synth_cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let index = synth_generate(synth_cfg.clone(), dir.path()).unwrap();
    let blend_name = synth.class_names()[6].clone();
    let (train_idx, val_idx, test_idx) =
        split(&index, SplitRatios::default(), 7, std::slice::from_ref(&blend_name)).unwrap();
    let train = load_samples(&train_idx).unwrap();
    let val = load_samples(&val_idx).unwrap();
    let test_all = load_samples(&test_idx).unwrap();
    let (test, blend): (Vec<Sample>, Vec<Sample>) = test_all.into_iter().partition(|s| s.label < 6);

    // evenly strided through the class-sorted training split, so every class is represented
    let batch16: Vec<Sample> = train.iter().step_by(train.len() / 16).take(16).cloned().collect();
    overfit(&mut r, &batch16);

    // 4: end-to-end training
    let info = RunInfo {
        provenance: rsnet::checkpoint::Provenance {
            holdout: vec![blend_name.clone()],
            ..Default::default()
        },
        ..RunInfo::of(&index)
    };
    let tc = TrainConfig::default();
    let start = Instant::now();
    let outcome = train_samples(&ModelConfig::default(), &tc, &train, &val, info, &mut |e| {
        if e.epoch % 10 == 0 {
            eprintln!(
                "  epoch {:>2}: train {:.5} val {:.5} ({:.1} s)",
                e.epoch,
                e.train_loss,
                e.val_loss.unwrap_or(f64::NAN),
                e.wall_time_s
            );
        }
    })
    .unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let classes: Vec<String> = index.classes.iter().map(|c| c.name.clone()).collect();
    let eval = evaluate_samples(&outcome.final_ckpt, &test, &classes).unwrap();
    r.line(
        "4",
        eval.metrics.mse <= 0.005,
        "synthetic end-to-end (6×200, sigma 0.02, 50 epochs)",
        format!(
            "held-out MSE {:.5} (<= 0.005) over {} samples; best val {:.5} at epoch {}; {:.0} s training",
            eval.metrics.mse,
            eval.metrics.n_samples,
            outcome.best_ckpt.metrics["val_loss"].as_f64().unwrap(),
            outcome.best_ckpt.provenance.epoch.unwrap(),
            train_secs
        ),
    );
    let model = rsnet_from_checkpoint(&outcome.final_ckpt).unwrap();

    // 5: classifier on predicted profiles, and on noiseless ground truth
    let train_pred = predict_samples(&model, &train, 16).unwrap();
    let x: Vec<&[f32]> = train_pred.iter().map(|p| p.profile.values()).collect();
    let y: Vec<usize> = train.iter().map(|s| s.label).collect();
    let ccfg = ClassifierConfig {
        n_classes: 6,
        ..ClassifierConfig::default()
    };
    let clf = train_classifier(&x, &y, &ccfg).unwrap();
    let test_pred: Vec<&[f32]> = eval.predictions.iter().map(|p| p.profile.values()).collect();
    let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
    let cm = confusion_matrix(&clf.predict(&test_pred).unwrap(), &truth, 6).unwrap();
    let f1 = metrics_from_matrix(&cm).unwrap().macro_f1;
    r.line(
        "5a",
        f1 >= 0.9,
        "classifier on predicted profiles (10 epochs)",
        format!("held-out macro F1 {f1:.3} (>= 0.9)"),
    );

    let clean = Synthesizer::new(SynthConfig {
        noise_sigma: 0.0,
        blend: None,
        ..synth_cfg.clone()
    })
    .unwrap();
    let clean_samples = |range: std::ops::Range<usize>| -> Vec<SpectralProfile> {
        let mut v = Vec::new();
        for i in range {
            for m in 0..6 {
                v.push(clean.sample(m, i, 1.0).unwrap().profile);
            }
        }
        v
    };
    let (ctrain, ctest) = (clean_samples(0..160), clean_samples(160..200));
    let labels = |n: usize| (0..n).map(|i| i % 6).collect::<Vec<_>>();
    let clf = train_classifier(
        &ctrain.iter().map(|p| p.values()).collect::<Vec<_>>(),
        &labels(ctrain.len()),
        &ccfg,
    )
    .unwrap();
    let pred = clf
        .predict(&ctest.iter().map(|p| p.values()).collect::<Vec<_>>())
        .unwrap();
    let acc = pred.iter().zip(labels(ctest.len())).filter(|(p, t)| **p == *t).count() as f64 / pred.len() as f64;
    r.line(
        "5b",
        acc == 1.0,
        "classifier on noiseless ground-truth profiles",
        format!("held-out accuracy {acc:.3} (== 1.0) over {} samples", pred.len()),
    );

    // 6: unseen blend class
    let blend_preds = predict_samples(&model, &blend, 16).unwrap();
    let bins = synth_cfg.axis.n_bins;
    let mut mean = vec![0.0f64; bins];
    for p in &blend_preds {
        for (m, &v) in mean.iter_mut().zip(p.profile.values()) {
            *m += v as f64 / blend_preds.len() as f64;
        }
    }
    let dists: Vec<f64> = synth.templates()[..6].iter().map(|t| l2(&mean, t)).collect();
    let near = dists[pair.0].min(dists[pair.1]);
    let others = (0..6)
        .filter(|&m| m != pair.0 && m != pair.1)
        .map(|m| dists[m])
        .fold(f64::INFINITY, f64::min);
    r.line(
        "6",
        near < others,
        "unseen blend class resembles its parents",
        format!(
            "blend of classes {} and {}: L2 to nearer parent {near:.3} < nearest other {others:.3}; distances {:?}",
            pair.0,
            pair.1,
            dists.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>()
        ),
    );

    // 7: determinism and persistence
    let small_cfg = ModelConfig {
        seed: 3,
        ..ModelConfig::default()
    };
    let small_tc = TrainConfig {
        epochs: 3,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = || {
        train_samples(
            &small_cfg,
            &small_tc,
            &train[..64],
            &val[..32],
            RunInfo::of(&index),
            &mut |_| {},
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    let same_history = a.history.same_losses(&b.history) && a.final_ckpt.tensors == b.final_ckpt.tensors;
    let ckpt_path = dir.path().join("final.zip");
    save_checkpoint(&outcome.final_ckpt, &ckpt_path).unwrap();
    let reloaded = rsnet_from_checkpoint(&load_checkpoint(&ckpt_path).unwrap()).unwrap();
    let patches: Vec<&ImagePatch> = test.iter().map(|s| &s.patch).collect();
    let xb = patch_batch::<f32>(&patches).unwrap();
    let (ya, yb) = (model.forward(&xb).unwrap(), reloaded.forward(&xb).unwrap());
    let bit_exact = ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    r.line(
        "7",
        same_history && bit_exact,
        "determinism and checkpoint round trip",
        format!(
            "double run identical: {same_history}; reloaded forward bit-exact on {} patches: {bit_exact}",
            patches.len()
        ),
    );

    // 8: brightness shift on fresh samples
    let mut agree = 0;
    let mut total = 0;
    for i in 200..220 {
        for m in 0..6 {
            let bright = to_sample(synth.sample(m, i, 1.0).unwrap(), total);
            let dim = to_sample(synth.sample(m, i, 0.7).unwrap(), total);
            let p = model.predict(&[&bright.patch, &dim.patch]).unwrap();
            let gt_shift = dim.profile.mean() - bright.profile.mean();
            let pred_shift = p[1].mean() - p[0].mean();
            if gt_shift.signum() == pred_shift.signum() {
                agree += 1;
            }
            total += 1;
        }
    }
    let rate = agree as f64 / total as f64;
    r.line(
        "8",
        total >= 100 && rate >= 0.9,
        "brightness-shift direction at 0.7x brightness",
        format!(
            "{agree}/{total} fresh samples shift with the ground truth ({:.1}% >= 90%)",
            100.0 * rate
        ),
    );

    vast(&mut r);

    let passed = r.results.iter().filter(|&&p| p).count();
    println!(
        "{passed}/{} criteria passed in {:.0} s",
        r.results.len(),
        t0.elapsed().as_secs_f64()
    );
    if passed != r.results.len() {
        std::process::exit(1);
    }
}

/// Optional: reference per-class scores on the real dataset, when present locally.
fn vast(r: &mut Report) {
    let Ok(path) = std::env::var("RSNET_VAST_MANIFEST") else {
        r.skip(
            "5-vast",
            "real-data classification F ≈ 0.79 ± 0.05",
            "RSNET_VAST_MANIFEST not set",
        );
        return;
    };
    let index = load_manifest(Path::new(&path)).unwrap();
    let (train_idx, val_idx, test_idx) = split(&index, SplitRatios::default(), 0, &[]).unwrap();
    let (train, val, test) = (
        load_samples(&train_idx).unwrap(),
        load_samples(&val_idx).unwrap(),
        load_samples(&test_idx).unwrap(),
    );
    let cfg = ModelConfig {
        n_bins: index.axis.n_bins,
        ..ModelConfig::default()
    };
    let out = train_samples(
        &cfg,
        &TrainConfig::default(),
        &train,
        &val,
        RunInfo::of(&index),
        &mut |_| {},
    )
    .unwrap();
    let model = rsnet_from_checkpoint(&out.final_ckpt).unwrap();
    let k = index.classes.len();
    let tp = predict_samples(&model, &train, 16).unwrap();
    let clf = train_classifier(
        &tp.iter().map(|p| p.profile.values()).collect::<Vec<_>>(),
        &train.iter().map(|s| s.label).collect::<Vec<_>>(),
        &ClassifierConfig {
            n_bins: cfg.n_bins,
            n_classes: k,
            ..ClassifierConfig::default()
        },
    )
    .unwrap();
    let te = predict_samples(&model, &test, 16).unwrap();
    let pred = clf
        .predict(&te.iter().map(|p| p.profile.values()).collect::<Vec<_>>())
        .unwrap();
    let cm = confusion_matrix(&pred, &test.iter().map(|s| s.label).collect::<Vec<_>>(), k).unwrap();
    let f = metrics_from_matrix(&cm).unwrap().macro_f1;
    r.line(
        "5-vast",
        (f - 0.79).abs() <= 0.05,
        "real-data classification",
        format!("overall F {f:.3} (0.79 ± 0.05)"),
    );
}
