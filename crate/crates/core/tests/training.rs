use filter_triage::data::synthetic::{synthetic_dataset, SyntheticSpec};
use filter_triage::data::{compute_stats, preprocess, SplitTag, TensorSet};
use filter_triage::nn::checkpoint::{load_file, save_file};
use filter_triage::nn::{checkpoint_load, checkpoint_save, AdamHyper};
use filter_triage::zoo::{architecture, build_model, evaluate, predict, train, Preset, TrainConfig};
use filter_triage::{Network32, Network64};

fn toy_with(classes: usize, per_class: usize, seed: u64) -> TensorSet<f32> {
    let ds = synthetic_dataset(&SyntheticSpec::cifar_like(classes, per_class, seed), SplitTag::Train).unwrap();
    preprocess(&ds, &compute_stats(&ds).unwrap()).unwrap()
}

fn toy(per_class: usize, seed: u64) -> TensorSet<f32> {
    toy_with(10, per_class, seed)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 10,
        adam: AdamHyper::with_learning_rate(1e-3),
        patience: epochs,
        seed: 5,
        max_steps: None,
    }
}

fn fresh() -> Network32 {
    build_model(architecture(Preset::Cifar10Small, 10).unwrap(), 3).unwrap()
}

#[test]
fn overfits_fifty_images() {
    let set = toy_with(2, 25, 1);
    let mut net = fresh();
    let before = evaluate(&net, &set).unwrap();
    let mut c = cfg(40);
    c.patience = 15;
    train(&mut net, &set, &set, &c).unwrap();
    let after = evaluate(&net, &set).unwrap();
    assert!(after.loss < before.loss * 0.5, "{} -> {}", before.loss, after.loss);
    assert!(after.accuracy >= 0.95, "accuracy {}", after.accuracy);
}

#[test]
fn training_is_deterministic() {
    let set = toy(3, 2);
    let run = || {
        let mut net = fresh();
        let h = train(&mut net, &set, &set, &cfg(2)).unwrap();
        (checkpoint_save(&net).unwrap(), h.to_csv().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn max_steps_caps_updates() {
    let set = toy(3, 2);
    let mut c = cfg(50);
    c.max_steps = Some(4);
    let mut net = fresh();
    let h = train(&mut net, &set, &set, &c).unwrap();
    assert_eq!(h.epochs_run(), 2, "3 batches per epoch, 4 steps");
}

#[test]
fn evaluate_agrees_with_predict() {
    let set = toy(4, 3);
    let net = fresh();
    let preds = predict(&net, &set).unwrap();
    let hits = preds.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
    assert_eq!(evaluate(&net, &set).unwrap().accuracy, hits as f64 / set.len() as f64);
    let empty = set.select(&[]);
    assert!(evaluate(&net, &empty).is_err());
}

#[test]
fn checkpoint_reload_gives_identical_logits() {
    let set = toy(2, 4);
    let mut net = fresh();
    train(&mut net, &set, &set, &cfg(1)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.ftrg");
    save_file(&net, &path).unwrap();
    let back: Network32 = load_file(&path).unwrap();
    let a = net.forward_eval(&set.x).unwrap();
    let b = back.forward_eval(&set.x).unwrap();
    assert_eq!(a.data(), b.data());

    let bytes = checkpoint_save(&net).unwrap();
    assert!(checkpoint_load::<f32>(&bytes[..bytes.len() - 1]).is_err());
    assert!(
        checkpoint_load::<f64>(&bytes).is_err(),
        "precision is part of the format"
    );
    let wide: Network64 = build_model(architecture(Preset::Cifar10Small, 10).unwrap(), 3).unwrap();
    let again: Network64 = checkpoint_load(&checkpoint_save(&wide).unwrap()).unwrap();
    assert_eq!(checkpoint_save(&again).unwrap(), checkpoint_save(&wide).unwrap());
}
