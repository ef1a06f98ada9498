//! End-to-end runs at toy dims: training, persistence and evaluation.

use reconprune::datagen::{generate_dataset, SceneConfig, TEST_INDEX_BASE};
use reconprune::encoder::EncoderConfig;
use reconprune::eval::{evaluate, evaluate_model, DEFAULT_RATIOS};
use reconprune::layers::LayerConfig;
use reconprune::losses::LossConfig;
use reconprune::pruner::PrunerConfig;
use reconprune::training::{train, train_from, AblationMode, Checkpoint, TrainConfig, Trainer};

fn toy(mode: AblationMode) -> TrainConfig {
    let layer = LayerConfig {
        hidden: 16,
        heads: 2,
        intermediate: 32,
    };
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        mode,
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 4,
            hidden: 16,
            seed: 0,
        },
        pruner: PrunerConfig { layer },
        decoder_layer: layer,
        loss: LossConfig {
            ssim_window: 5,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn scenes(start: u64, count: usize) -> Vec<reconprune::datagen::ImageMaskPair> {
    generate_dataset(&SceneConfig { size: 16, ..Default::default() }, start, count).unwrap()
}

#[test]
fn every_mode_trains_and_logs_each_step() {
    let data = scenes(0, 10);
    for mode in [AblationMode::Full, AblationMode::ForeOnly, AblationMode::MaskPrediction] {
        let out = train::<f32>(toy(mode), &data).unwrap();
        assert_eq!(out.log.len(), 2 * 3, "{mode:?}");
        assert_eq!(out.epochs.len(), 2);
        assert_eq!(out.trainer.step, 6);
        assert!(out.log.iter().all(|r| r.l_all.is_finite() && (0.0..=1.0).contains(&r.frac_pos)));
        assert!(out.log.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert_eq!(out.trainer.decoder.is_some(), mode != AblationMode::MaskPrediction);
    }
}

#[test]
fn training_is_reproducible_in_f64() {
    let data = scenes(0, 8);
    let a = train::<f64>(toy(AblationMode::Full), &data).unwrap();
    let b = train::<f64>(toy(AblationMode::Full), &data).unwrap();
    assert_eq!(a.log_jsonl().unwrap(), b.log_jsonl().unwrap());
}

#[test]
fn checkpoint_round_trip_reproduces_forward_and_resumes() {
    let data = scenes(0, 8);
    let test = scenes(TEST_INDEX_BASE, 4);
    let out = train::<f32>(toy(AblationMode::Full), &data).unwrap();
    let bytes = out.trainer.to_checkpoint().unwrap().to_bytes().unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), bytes);
    let loaded = Trainer::<f32>::from_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.step, out.trainer.step);
    let images: Vec<&[f32]> = test.iter().map(|p| p.image.as_slice()).collect();
    let (sa, ra) = out.trainer.reconstruct(&images).unwrap();
    let (sb, rb) = loaded.reconstruct(&images).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(ra, rb);

    let direct = evaluate_model(&out.trainer, &test, &DEFAULT_RATIOS).unwrap();
    let via_ckpt = evaluate(&ckpt, &test, &DEFAULT_RATIOS).unwrap();
    assert_eq!(direct, via_ckpt);

    // the resumed trainer continues from the saved optimizer state
    let resumed = train_from(loaded, &data, |_| {}).unwrap();
    assert_eq!(resumed.trainer.step, 2 * out.trainer.step);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let out = train::<f32>(TrainConfig { epochs: 1, ..toy(AblationMode::MaskPrediction) }, &scenes(0, 4)).unwrap();
    let bytes = out.trainer.to_checkpoint().unwrap().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn eval_report_is_well_formed() {
    let out = train::<f32>(toy(AblationMode::Full), &scenes(0, 8)).unwrap();
    let test = scenes(TEST_INDEX_BASE, 6);
    let eval = evaluate_model(&out.trainer, &test, &DEFAULT_RATIOS).unwrap();
    let r = &eval.report;
    assert_eq!(r.samples, 6);
    assert_eq!(eval.rows.len(), 6);
    assert!((0.0..=1.0).contains(&r.saliency.auroc));
    assert!((0.0..=1.0).contains(&r.saliency.fraction_positive));
    let n = 16;
    for (ratio, p) in r.ratios.iter().zip(DEFAULT_RATIOS) {
        assert_eq!(ratio.m, ((n as f64) * (1.0 - p)).floor() as usize);
        assert!((0.0..=1.0).contains(&ratio.recall));
    }
    // keeping fewer tokens never raises recall
    assert!(r.ratios.windows(2).all(|w| w[1].recall <= w[0].recall + 1e-12));
    let recon = r.reconstruction.as_ref().unwrap();
    assert!(recon.ssim_fore <= 1.0 && recon.ssim_back <= 1.0);
    assert_eq!(eval.to_csv().lines().count(), 7);
}
