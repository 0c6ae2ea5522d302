//! Temporary debugging probe: training loss curve and per-step x0 growth.

use candle_core::Device;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use mofusion::checkpoint::{self, WeightKind};
use mofusion::condition::Vocab;
use mofusion::denoiser::{CondUNet1D, DenoiserConfig};
use mofusion::motion::RepresentationSpec;
use mofusion::sampling::{InferenceEngine, SamplerConfig};
use mofusion::schedule::{NoiseSchedule, ScheduleParams};
use mofusion::skeleton::Skeleton;
use mofusion::synth::{synth_dataset, SynthConfig};
use mofusion::tensor::ParamStore;
use mofusion::training::{Dataset, TrainConfig, Trainer};

const TARGET_LEN: usize = 48;

#[test]
#[ignore]
fn probe_steps() {
    let ckpt = std::path::Path::new("target/probe_ckpt");
    let device = Device::Cpu;
    let engine = InferenceEngine::new(
        checkpoint::load_model(ckpt, WeightKind::Ema, &device).unwrap(),
    );
    let sc = SamplerConfig { seed: 1000, ..Default::default() };
    let mut hook = |x0: candle_core::Tensor, i: usize, n: usize| {
        let amax = x0
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        println!("step {i}/{n}: x0 amax {amax:.2}");
        Ok(x0)
    };
    let (m, _t, _c) = engine
        .generate("a person walks forward", TARGET_LEN, &sc, Some(&mut hook))
        .unwrap();
    let amax = m.features.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    println!("final motion amax {amax:.2}");
}

#[test]
#[ignore]
fn probe_loss_curve() {
    let skeleton = Skeleton::desk_default();
    let spec = RepresentationSpec::positions(skeleton.joint_count());
    let synth_cfg = SynthConfig {
        samples_per_class: 12,
        length_range: (36, TARGET_LEN),
        fps: 20.0,
        seed: 0,
        ..Default::default()
    };
    let corpus = synth_dataset(&synth_cfg, &skeleton, &spec).unwrap();
    let dataset = Dataset::new(&corpus, TARGET_LEN).unwrap();
    let vocab = Vocab::build(dataset.prompts.iter().map(String::as_str));
    let den_cfg = DenoiserConfig {
        base_channels: 16,
        channel_multipliers: vec![1, 2],
        kernel_size: 3,
        groups: 4,
        attention_heads: 2,
        dropout: 0.1,
        text_latent_dim: 16,
        time_latent_dim: 16,
        vocab_size: vocab.len(),
    };
    let schedule = NoiseSchedule::from_params(&ScheduleParams::default()).unwrap();
    let train_cfg = TrainConfig {
        iterations: 2200,
        batch_size: 8,
        ema_beta: 0.995,
        lr_decay_every: 300,
        ..Default::default()
    };
    let mut ps = ParamStore::new(device());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = CondUNet1D::new(&mut ps, &mut rng, &den_cfg, spec.feature_dim()).unwrap();
    let mut trainer = Trainer::new(model, ps, vocab, schedule, train_cfg, 0).unwrap();
    let history = trainer.run(&dataset, None, 0).unwrap();
    for (i, h) in history.iter().enumerate() {
        if i % 100 == 0 || i + 1 == history.len() {
            println!(
                "iter {i}: loss {:.5} grad_norm {:.3} lr {:.2e}",
                h.loss, h.grad_norm, h.lr
            );
        }
    }
}

fn device() -> Device {
    Device::Cpu
}
