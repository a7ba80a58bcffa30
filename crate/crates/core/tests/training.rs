//! Training loop contracts on small models.

mod common;

use candle_core::{DType, Device, Tensor};
use glcf::backbone::ImageBatch;
use glcf::heads::{PHI_G, PSI_G, PSI_L};
use glcf::model::GlcfModel;
use glcf::training::{loss_estimation, loss_terms, train_glcf, TrainOptions, TrainingConfig};

use common::tiny_model_config;

fn images(n: usize, res: usize, identical: bool) -> ImageBatch {
    let one = Tensor::randn(0f32, 1.0, (1, 3, res, res), &Device::Cpu).unwrap();
    let data = if identical {
        one.repeat((n, 1, 1, 1)).unwrap()
    } else {
        Tensor::randn(0f32, 1.0, (n, 3, res, res), &Device::Cpu).unwrap()
    };
    ImageBatch::new(data).unwrap()
}

#[test]
fn one_epoch_on_identical_images_records_one_finite_loss() {
    let cfg = TrainingConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    let (_, ck) = train_glcf(&tiny_model_config(32), &cfg, &images(8, 32, true), &TrainOptions::default()).unwrap();
    assert_eq!(ck.loss_history.len(), 1);
    let r = &ck.loss_history[0];
    assert!(r.total.is_finite() && r.loss_c.is_finite() && r.loss_el.is_finite() && r.loss_eg.is_finite());
    assert!((r.total - (r.loss_c + r.loss_el + r.loss_eg)).abs() <= 1e-3 * r.total.abs().max(1.0));
}

#[test]
fn fixed_seed_gives_identical_checkpoints() {
    glcf::par::set_sequential(true);
    let cfg = TrainingConfig {
        epochs: 2,
        batch_size: 3,
        seed: 17,
        ..Default::default()
    };
    let data = images(7, 32, false);
    let run = || {
        let (_, ck) = train_glcf(&tiny_model_config(32), &cfg, &data, &TrainOptions::default()).unwrap();
        ck.archive.to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn interval_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainingConfig {
        epochs: 2,
        checkpoint_interval: 1,
        ..Default::default()
    };
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    train_glcf(&tiny_model_config(32), &cfg, &images(4, 32, false), &opts).unwrap();
    for e in [1, 2] {
        assert!(dir.path().join(format!("checkpoint_epoch{e}.glcf")).is_file());
    }
}

#[test]
fn global_estimation_loss_reaches_both_heads() {
    let model = GlcfModel::new(&tiny_model_config(32), 2, DType::F32).unwrap();
    let out = model.forward(&images(2, 32, false)).unwrap();
    let leg = loss_estimation(&out.phi_g, &out.psi_g).unwrap();
    let grads = leg.backward().unwrap();
    let norm = |prefix: &str| -> f64 {
        model
            .params
            .vars_with_prefixes(&[prefix])
            .iter()
            .filter_map(|v| grads.get(v.as_tensor()))
            .map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() as f64)
            .sum()
    };
    assert!(norm(PHI_G) > 0.0, "correspondence head gets no gradient");
    assert!(norm(PSI_G) > 0.0, "global estimation head gets no gradient");
    assert_eq!(norm(PSI_L), 0.0);
}

#[test]
fn stop_gradient_option_shields_the_correspondence_head() {
    let model = GlcfModel::new(&tiny_model_config(32), 2, DType::F32).unwrap();
    let out = model.forward(&images(2, 32, false)).unwrap();
    let cfg = TrainingConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        stop_gradient_global_target: true,
        ..Default::default()
    };
    let grads = loss_terms(&out, &cfg).unwrap().total.backward().unwrap();
    let touched = model
        .params
        .vars_with_prefixes(&[PHI_G])
        .iter()
        .filter_map(|v| grads.get(v.as_tensor()))
        .any(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() > 0.0);
    assert!(!touched);
}

#[test]
fn empty_training_set_is_missing_input() {
    let data = ImageBatch::new(Tensor::zeros((0, 3, 32, 32), DType::F32, &Device::Cpu).unwrap()).unwrap();
    let err = train_glcf(&tiny_model_config(32), &TrainingConfig::default(), &data, &TrainOptions::default())
        .err()
        .unwrap();
    assert_eq!(err.exit_code(), 3);
}
