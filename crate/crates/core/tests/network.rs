mod common;

use rand::SeedableRng;
use roi_saliency::data::{ChannelImage, Dataset, Sample};
use roi_saliency::nn::{
    build_2cc3d, build_synth_cnn, load_model, loss_and_gradients, save_model, train, ActShape, Cc3dPreset,
    Classifier, Network, TrainConfig,
};
use roi_saliency::seed::{rng_for, Rng};

#[test]
fn gradients_match_finite_differences() {
    for (name, err) in common::gradient_check_all() {
        assert!(err < 1e-4, "{name}: max relative error {err:e}");
    }
}

#[test]
fn synth_cnn_gradients_match_finite_differences() {
    let net = build_synth_cnn(&[1, 10, 10], 11).unwrap();
    let mut rng = rng_for(&[12]);
    let imgs: Vec<ChannelImage> = (0..2).map(|_| common::random_image(&mut rng, &[1, 10, 10])).collect();
    let batch: Vec<(&ChannelImage, u8)> = imgs.iter().zip([0, 1]).collect();
    let err = common::gradient_check(&net, &batch, &TrainConfig::default(), 1e-5);
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn single_sgd_step_decreases_loss() {
    let cfg = TrainConfig { l2_coefficient: 0.0, dropout: false, ..TrainConfig::default() };
    let mut rng = rng_for(&[13]);
    for k in 0..10 {
        let mut net = build_synth_cnn(&[1, 10, 10], k).unwrap();
        let img = common::random_image(&mut rng, &[1, 10, 10]);
        let batch = [(&img, (k % 2) as u8)];
        let (before, grad) = loss_and_gradients(&net, &batch, &cfg, &mut rng).unwrap();
        net.params_mut().iter_mut().zip(&grad).for_each(|(p, g)| *p -= 1e-3 * g);
        let (after, _) = loss_and_gradients(&net, &batch, &cfg, &mut rng).unwrap();
        assert!(after < before, "case {k}: {before} -> {after}");
    }
}

#[test]
fn loss_without_penalty_is_mean_bce() {
    let mut net = build_synth_cnn(&[1, 10, 10], 0).unwrap();
    net.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let img = ChannelImage::new(1, &[10, 10], vec![0.3; 100]).unwrap();
    let cfg = TrainConfig { l2_coefficient: 0.0, ..TrainConfig::default() };
    let (loss, _) = loss_and_gradients(&net, &[(&img, 1), (&img, 0)], &cfg, &mut rng_for(&[0])).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

fn separable(n: usize, seed: u64) -> Dataset {
    let mut rng = rng_for(&[seed]);
    let samples = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut img = common::random_image(&mut rng, &[1, 10, 10]).values().to_vec();
            img[..10].iter_mut().for_each(|v| *v += 3.0 * f64::from(label));
            Sample {
                subject_id: format!("{i}"),
                label,
                image: ChannelImage::new(1, &[10, 10], img).unwrap(),
            }
        })
        .collect();
    Dataset::new(1, &[10, 10], samples).unwrap()
}

#[test]
fn training_is_deterministic() {
    let data = separable(40, 1);
    let net = build_synth_cnn(&[1, 10, 10], 3).unwrap();
    let cfg = TrainConfig { max_epochs: 4, batch_size: 8, ..TrainConfig::default() };
    let (a, ha) = train(&net, &data, None, &cfg).unwrap();
    let (b, hb) = train(&net, &data, None, &cfg).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ha, hb);
    assert_eq!(ha.epochs.len(), 4);
    assert_ne!(a.params(), net.params());
}

#[test]
fn training_result_does_not_depend_on_thread_count() {
    let data = separable(24, 2);
    let net = build_synth_cnn(&[1, 10, 10], 4).unwrap();
    let cfg = TrainConfig { max_epochs: 2, batch_size: 6, ..TrainConfig::default() };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&net, &data, None, &cfg).unwrap().0)
    };
    assert_eq!(run(1).params(), run(4).params());
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = separable(16, 3);
    let net = build_synth_cnn(&[1, 10, 10], 5).unwrap();
    let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 2, ..TrainConfig::default() };
    let (trained, _) = train(&net, &data, None, &cfg).unwrap();
    assert_eq!(trained.params(), net.params());
}

#[test]
fn early_stopping_restores_best_epoch() {
    let data = separable(40, 4);
    let val = separable(20, 5);
    let net = build_synth_cnn(&[1, 10, 10], 6).unwrap();
    let cfg = TrainConfig { max_epochs: 30, patience: 2, learning_rate: 0.5, ..TrainConfig::default() };
    let (_, h) = train(&net, &data, Some(&val), &cfg).unwrap();
    // best_epoch is 1-based
    let best = h.epochs[h.best_epoch - 1].val_loss.unwrap();
    assert!(h.epochs.iter().all(|e| e.val_loss.unwrap() >= best));
    if h.stopped_early {
        assert_eq!(h.epochs.len(), h.best_epoch + cfg.patience);
    }
}

#[test]
fn predictions_are_elementwise() {
    let net = build_synth_cnn(&[1, 10, 10], 7).unwrap();
    let mut rng = rng_for(&[14]);
    let imgs: Vec<ChannelImage> = (0..5).map(|_| common::random_image(&mut rng, &[1, 10, 10])).collect();
    let all = net.predict_batch(&imgs).unwrap();
    let mut reversed = imgs.clone();
    reversed.reverse();
    let back = net.predict_batch(&reversed).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let p = net.predict(img).unwrap();
        assert_eq!(all.values()[i], p);
        assert_eq!(back.values()[4 - i], p);
        assert!(p > 0.0 && p < 1.0);
    }
    let dup = net.predict_batch(&vec![imgs[0].clone(); 3]).unwrap();
    assert!(dup.values().iter().all(|&v| v == all.values()[0]));
    let mut r = Rng::seed_from_u64(0);
    assert_eq!(net.forward(&imgs[0], false, &mut r).unwrap(), all.values()[0]);
}

#[test]
fn activation_maps_are_means() {
    let net = build_synth_cnn(&[1, 10, 10], 8).unwrap();
    let mut rng = rng_for(&[15]);
    let a = common::random_image(&mut rng, &[1, 10, 10]);
    let b = common::random_image(&mut rng, &[1, 10, 10]);
    let ma = net.activation_maps(std::slice::from_ref(&a), 0).unwrap();
    let mb = net.activation_maps(std::slice::from_ref(&b), 0).unwrap();
    assert_eq!(ma.len(), 4);
    assert!(ma.iter().all(|m| m.shape() == [8, 8]));
    let close = |x: &[roi_saliency::data::Tensor], want: &dyn Fn(usize, usize) -> f64| {
        (0..4).all(|f| (0..64).all(|k| (x[f].values()[k] - want(f, k)).abs() < 1e-12))
    };
    let triple = net.activation_maps(&[a.clone(), a.clone(), a.clone()], 0).unwrap();
    assert!(close(&triple, &|f, k| ma[f].values()[k]));
    let mab = net.activation_maps(&[a, b], 0).unwrap();
    assert!(close(&mab, &|f, k| 0.5 * (ma[f].values()[k] + mb[f].values()[k])));
    assert_eq!(net.activation_maps(&mab_images(), 3).unwrap().len(), 8);
    assert!(net.activation_maps(&mab_images(), 7).is_err());
    assert!(net.activation_maps(&[], 0).is_err());
}

fn mab_images() -> Vec<ChannelImage> {
    vec![ChannelImage::new(1, &[10, 10], vec![0.5; 100]).unwrap()]
}

#[test]
fn cc3d_on_two_by_32_cubed() {
    let shape = [2, 32, 32, 32];
    let preset = Cc3dPreset::default();
    let net = build_2cc3d(&shape, &preset, 1).unwrap();
    let again = build_2cc3d(&shape, &preset, 1).unwrap();
    assert_eq!(net.param_count(), again.param_count());
    assert_eq!(net.params(), again.params());
    assert_eq!(net.layer_output_shape(0), Some(ActShape::Volume { channels: 8, extent: [32, 32, 32], rank: 3 }));
    assert_eq!(net.layer_output_shape(15), Some(ActShape::Volume { channels: 64, extent: [2, 2, 2], rank: 3 }));
    assert_eq!(net.layer_output_shape(net.layers().len() - 1), Some(ActShape::Flat(1)));
    let zero = ChannelImage::new(2, &shape[1..], vec![0.0; 2 * 32 * 32 * 32]).unwrap();
    let p = net.predict(&zero).unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert!(build_2cc3d(&[2, 8, 8, 8], &preset, 1).is_err());
    assert!(build_2cc3d(&[1, 32, 32, 32], &preset, 1).is_err());
}

#[test]
fn model_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let net = build_synth_cnn(&[1, 10, 10], 9).unwrap();
    save_model(&net, &path).unwrap();
    let back: Network = load_model(&path).unwrap();
    assert_eq!(back, net);
    let img = ChannelImage::new(1, &[10, 10], vec![0.25; 100]).unwrap();
    assert_eq!(back.predict(&img).unwrap(), net.predict(&img).unwrap());

    let bin = dir.path().join("m.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_model(&path).is_err());
    assert!(load_model(&dir.path().join("missing.json")).is_err());
}
