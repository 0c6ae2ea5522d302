//! Temporary debugging probe: final candidate check against criteria 4/8/9.

use candle_core::Device;
use ndarray::Array2;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use mofusion::checkpoint::LoadedModel;
use mofusion::codec;
use mofusion::condition::Vocab;
use mofusion::denoiser::{CondUNet1D, DenoiserConfig};
use mofusion::eval::{self, train_eval_encoders_with, EncoderTrainConfig, EvalEncoders};
use mofusion::footskate::{self, ContactConfig, InLoopParams};
use mofusion::motion::{MotionSequence, RepresentationSpec};
use mofusion::sampling::{InferenceEngine, SamplerConfig, SamplerKind};
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

fn train_engine(iterations: usize, base: usize, per_class: usize) -> InferenceEngine {
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
        text_latent_dim: 16,
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

fn candidate(tag: &str, encoders: &EvalEncoders, real: &Array2<f32>, engine: &InferenceEngine, guidance: f64) {
    let classes = mofusion::synth::default_classes();
    let dpmpp = SamplerConfig { guidance_scale: guidance, ..Default::default() };
    let ddpm = SamplerConfig { kind: SamplerKind::Ddpm, ..dpmpp.clone() };
    let mut fids = Vec::new();
    for sc in [&dpmpp, &ddpm] {
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
        let fid = eval::fid(real, &gf).unwrap().value;
        fids.push(fid);
        if std::ptr::eq(sc, &dpmpp) {
            let tf = encoders
                .encode_texts(&prompts.iter().map(String::as_str).collect::<Vec<_>>())
                .unwrap();
            let top3 =
                eval::r_precision(&gf, &tf, 3, 32, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            println!("{tag}: dpmpp fid {fid:.4} top3 {top3:.3}");
        }
    }
    println!("{tag}: fid ratio {:.3} (dpmpp {:.4} / ddpm {:.4})", fids[0] / fids[1], fids[0], fids[1]);

    // criterion 8 in-loop comparison
    let skeleton = Skeleton::desk_default();
    let spec = engine.loaded.meta.representation;
    let norm = engine.loaded.meta.norm.clone();
    let contact = ContactConfig::default();
    let mut wins = 0;
    let mut nonzero = 0;
    for seed in 0..10u64 {
        let sc = SamplerConfig { guidance_scale: guidance, seed: 4000 + seed, ..Default::default() };
        let (mp, _t, _c) = engine
            .generate("a person walks with sliding feet", TARGET_LEN, &sc, None)
            .unwrap();
        let mut hook = footskate::in_loop_cleanup(InLoopParams::with_defaults(
            spec,
            skeleton.clone(),
            norm.clone(),
            FPS,
            sc.steps,
        ));
        let (mh, _t, _c) = engine
            .generate("a person walks with sliding feet", TARGET_LEN, &sc, Some(&mut *hook))
            .unwrap();
        let pp = codec::decode_features(&mp, &spec, &skeleton).unwrap();
        let ph = codec::decode_features(&mh, &spec, &skeleton).unwrap();
        let rp = footskate::skate_ratio(&pp, &skeleton, &contact).unwrap();
        let rh = footskate::skate_ratio(&ph, &skeleton, &contact).unwrap();
        if rp > 0.0 {
            nonzero += 1;
        }
        if rh < rp {
            wins += 1;
        }
        println!("  seed {}: plain {rp:.4} hooked {rh:.4}", 4000 + seed);
    }
    println!("{tag}: in-loop wins {wins}/10, nonzero plain {nonzero}/10");
}

#[test]
#[ignore]
fn probe_candidates() {
    let skeleton = Skeleton::desk_default();
    let spec = RepresentationSpec::positions(skeleton.joint_count());
    let train_corpus = corpus(0, 24, &skeleton, &spec);
    let held = corpus(1, 8, &skeleton, &spec);
    let encoders = train_eval_encoders_with(&train_corpus, 0, &EncoderTrainConfig::default()).unwrap();
    let refs: Vec<&MotionSequence> = held.iter().collect();
    let real = encoders.encode_motions(&refs).unwrap();

    let e = train_engine(1800, 16, 24);
    candidate("b16/d24x1800/g4.0", &encoders, &real, &e, 4.0);
    candidate("b16/d24x1800/g5.0", &encoders, &real, &e, 5.0);

    let e = train_engine(1400, 16, 24);
    candidate("b16/d24x1400/g5.0", &encoders, &real, &e, 5.0);
}
