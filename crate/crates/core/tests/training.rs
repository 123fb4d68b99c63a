use rsnet::data::synth::SynthSample;
use rsnet::data::{Sample, SynthConfig, Synthesizer};
use rsnet::training::{train_samples, RunInfo, TrainConfig};
use rsnet::types::ModelConfig;

fn to_sample(s: SynthSample, row: usize) -> Sample {
    Sample {
        row,
        patch: s.patch,
        profile: s.profile,
        label: s.class,
        property: Some(s.property),
    }
}

/// `per_class` samples of every class, interleaved so any prefix mixes classes.
fn noiseless(per_class: usize, offset: usize) -> (Synthesizer, Vec<Sample>) {
    let synth = Synthesizer::new(SynthConfig {
        noise_sigma: 0.0,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut out = Vec::new();
    for i in offset..offset + per_class {
        for m in 0..6 {
            out.push(to_sample(synth.sample(m, i, 1.0).unwrap(), out.len()));
        }
    }
    (synth, out)
}

fn info(synth: &Synthesizer) -> RunInfo {
    RunInfo {
        classes: synth.class_names().to_vec(),
        axis: synth.config().axis,
        provenance: Default::default(),
    }
}

#[test]
fn loss_descends_for_every_seed() {
    let (synth, train) = noiseless(8, 0);
    for seed in 0..5 {
        let tc = TrainConfig {
            epochs: 10,
            seed,
            ..TrainConfig::default()
        };
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        let out = train_samples(&cfg, &tc, &train, &[], info(&synth), &mut |_| {}).unwrap();
        let losses = out.history.train_losses();
        assert!(losses[9] < losses[0], "seed {seed}: {losses:?}");
    }
}

#[test]
fn noiseless_set_is_learned() {
    let (synth, train) = noiseless(32, 0);
    let (_, val) = noiseless(4, 32);
    let tc = TrainConfig::default();
    let out = train_samples(&ModelConfig::default(), &tc, &train, &val, info(&synth), &mut |_| {}).unwrap();
    assert_eq!(out.history.len(), 50);
    let val_mse = out.history.val_losses()[49].unwrap();
    eprintln!("noiseless final val MSE {val_mse:.3e}");
    assert!(val_mse <= 1e-3, "final val MSE {val_mse}");
}
