//! Temporary debugging probe: capacity / data / guidance sweep.

use candle_core::Device;
use ndarray::Array2;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use mofusion::checkpoint::LoadedModel;
use mofusion::condition::Vocab;
use mofusion::denoiser::{CondUNet1D, DenoiserConfig};
use mofusion::eval::{self, train_eval_encoders_with, EncoderTrainConfig, EvalEncoders};
use mofusion::motion::{MotionSequence, RepresentationSpec};
use mofusion::sampling::{InferenceEngine, SamplerConfig};
use mofusion::schedule::{NoiseSchedule, ScheduleParams};
use mofusion::skeleton::Skeleton;
use mofusion::synth::{synth_dataset, SynthConfig};
use mofusion::tensor::ParamStore;
use mofusion::training::{Dataset, TrainConfig, Trainer};

const TARGET_LEN: usize = 48;
const FPS: f32 = 20.0;

fn corpus(seed: u64, per_class: usize, skeleton: &Skeleton, spec: &RepresentationSpec) -> Vec<MotionSequence> {
    let cfg = SynthConfig {
        samples_per_class: per_class,
        length_range: (36, TARGET_LEN),
        fps: FPS,
        seed,
        ..Default::default()
    };
    synth_dataset(&cfg, skeleton, spec).unwrap()
}

fn train_engine(iterations: usize, base: usize, per_class: usize, text_dim: usize) -> InferenceEngine {
    let skeleton = Skeleton::desk_default();
    let spec = RepresentationSpec::positions(skeleton.joint_count());
    let train_corpus = corpus(0, per_class, &skeleton, &spec);
    let dataset = Dataset::new(&train_corpus, TARGET_LEN).unwrap();
    let vocab = Vocab::build(dataset.prompts.iter().map(String::as_str));
    let den_cfg = DenoiserConfig {
        base_channels: base,
        channel_multipliers: vec![1, 2],
        kernel_size: 3,
        groups: 4,
        attention_heads: 2,
        dropout: 0.1,
        text_latent_dim: text_dim,
        time_latent_dim: 16,
        vocab_size: vocab.len(),
    };
    let schedule_params = ScheduleParams::default();
    let schedule = NoiseSchedule::from_params(&schedule_params).unwrap();
    let train_cfg = TrainConfig {
        iterations,
        batch_size: 8,
        ema_beta: 0.995,
        ..Default::default()
    };
    let device = Device::Cpu;
    let mut ps = ParamStore::new(device.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = CondUNet1D::new(&mut ps, &mut rng, &den_cfg, spec.feature_dim()).unwrap();
    let mut trainer = Trainer::new(model, ps, vocab.clone(), schedule.clone(), train_cfg, 0).unwrap();
    trainer.run(&dataset, None, 0).unwrap();

    let mut ema_ps = ParamStore::new(device.clone());
    let mut rng2 = ChaCha8Rng::seed_from_u64(0);
    let ema_model = CondUNet1D::new(&mut ema_ps, &mut rng2, &den_cfg, spec.feature_dim()).unwrap();
    trainer.ema.apply_to(&mut ema_ps).unwrap();
    let meta = mofusion::checkpoint::CheckpointMeta {
        version: 1,
        denoiser: den_cfg,
        representation: spec,
        skeleton,
        schedule: schedule_params,
        norm: dataset.norm.clone(),
        vocab_words: vocab.words.clone(),
        fps: FPS,
        target_len: TARGET_LEN,
    };
    InferenceEngine::new(LoadedModel { model: ema_model, ps: ema_ps, vocab, schedule, meta })
}

fn score(tag: &str, encoders: &EvalEncoders, real: &Array2<f32>, engine: &InferenceEngine, sc: &SamplerConfig) {
    let classes = mofusion::synth::default_classes();
    let mut gens = Vec::new();
    let mut prompts = Vec::new();
    for i in 0..40u64 {
        let class = &classes[i as usize % classes.len()];
        let prompt = mofusion::synth::class_prompt(class).unwrap().join(" ");
        let s = SamplerConfig { seed: 1000 + i, ..sc.clone() };
        let (m, _t, _c) = engine.generate(&prompt, TARGET_LEN, &s, None).unwrap();
        gens.push(m);
        prompts.push(prompt);
    }
    let refs: Vec<&MotionSequence> = gens.iter().collect();
    let gf = encoders.encode_motions(&refs).unwrap();
    let tf = encoders
        .encode_texts(&prompts.iter().map(String::as_str).collect::<Vec<_>>())
        .unwrap();
    let fid = eval::fid(real, &gf).unwrap().value;
    let top3 = eval::r_precision(&gf, &tf, 3, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    println!("{tag}: fid {fid:.4} top3 {top3:.3}");
}

#[test]
#[ignore]
fn probe_capacity() {
    let skeleton = Skeleton::desk_default();
    let spec = RepresentationSpec::positions(skeleton.joint_count());
    let train_corpus = corpus(0, 12, &skeleton, &spec);
    let held = corpus(1, 8, &skeleton, &spec);
    let encoders = train_eval_encoders_with(&train_corpus, 0, &EncoderTrainConfig::default()).unwrap();
    let refs: Vec<&MotionSequence> = held.iter().collect();
    let real = encoders.encode_motions(&refs).unwrap();

    let dpmpp = SamplerConfig::default();
    let g4 = SamplerConfig { guidance_scale: 4.0, ..dpmpp.clone() };

    let e = train_engine(900, 16, 12, 16);
    score("b16/d12/g2.5", &encoders, &real, &e, &dpmpp);
    score("b16/d12/g4.0", &encoders, &real, &e, &g4);

    let e = train_engine(900, 24, 12, 16);
    score("b24/d12/g2.5", &encoders, &real, &e, &dpmpp);
    score("b24/d12/g4.0", &encoders, &real, &e, &g4);

    let e = train_engine(1400, 16, 24, 16);
    score("b16/d24x1400/g2.5", &encoders, &real, &e, &dpmpp);
    score("b16/d24x1400/g4.0", &encoders, &real, &e, &g4);
}
