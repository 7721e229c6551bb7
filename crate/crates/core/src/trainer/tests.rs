use super::*;
use crate::config::{DataConfig, ModelConfig, TrainConfig};
use crate::metrics::voxel_iou;
use crate::replay::BufferSpec;
use crate::shapes::build_sessions;

fn tiny(sessions: Vec<usize>) -> RunConfig {
    let classes = ShapeClass::ALL[..sessions.iter().sum::<usize>()].to_vec();
    let mut cfg = RunConfig {
        seed: 5,
        data: DataConfig {
            classes,
            sessions,
            res: 8,
            image_size: 16,
            instances_per_class: 4,
            points_per_object: 64,
            ..DataConfig::default()
        },
        model: ModelConfig {
            latent_dim: 4,
            feature_dim: 6,
            encoder_channels: [2, 3, 4],
            point_embed_dim: 5,
            latent_hidden: 6,
            decoder_width: 8,
            decoder_depth: 2,
        },
        train: TrainConfig {
            epochs: 3,
            batch: 2,
            lr: 0.05,
            points_per_step: 32,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.replay.objects_per_class = 2;
    cfg.replay.attention_steps = 20;
    cfg.validate().unwrap();
    cfg
}

fn buffer_for(cfg: &RunConfig) -> ReplayBuffer {
    ReplayBuffer::new(BufferSpec {
        strategy: cfg.replay.strategy,
        k: cfg.replay.k_maps,
        width: cfg.data.image_size,
        height: cfg.data.image_size,
        res: cfg.data.res,
        objects_per_class: cfg.replay.objects_per_class,
    })
    .unwrap()
}

#[test]
fn first_session_is_pure_bce_and_fills_bank_at_close() {
    let cfg = tiny(vec![2]);
    let data = build_sessions(&cfg.data, cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let mut bank = PriorBank::new();
    let mut buf = buffer_for(&cfg);
    assert!(bank.is_empty());
    let (report, eval, trace) = run_session(&mut state, &data, &mut bank, &mut buf, &cfg).unwrap();
    assert!(!trace.steps.is_empty());
    for s in &trace.steps {
        assert_eq!(s.kl, 0.0);
        assert_eq!(s.loss, s.bce);
    }
    assert_eq!(bank.len(), cfg.replay.m_priors * 2);
    assert_eq!(report.bank_size, bank.len());
    assert_eq!(buf.len(), 2 * cfg.replay.objects_per_class);
    assert_eq!(report.buffer_units, buf.spec().n_b() * buf.len() as u64);
    assert_eq!(eval.per_session.len(), 1);
    assert_eq!(report.per_class_iou.len(), 2);
    assert_eq!(state.session, 1);
    assert!(trace.lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn later_session_adds_kl_and_replay() {
    let cfg = tiny(vec![1, 1]);
    let data = build_sessions(&cfg.data, cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let mut bank = PriorBank::new();
    let mut buf = buffer_for(&cfg);
    run_session(&mut state, &data[..1], &mut bank, &mut buf, &cfg).unwrap();
    let (report, eval, trace) = run_session(&mut state, &data, &mut bank, &mut buf, &cfg).unwrap();
    assert!(trace.steps.iter().all(|s| s.kl > 0.0));
    // Two current objects per batch plus one replayed.
    assert!(trace.steps.iter().all(|s| s.items == s.items.max(2)));
    assert!(trace.steps.iter().any(|s| s.items == 3));
    assert_eq!(bank.len(), 2 * cfg.replay.m_priors);
    assert_eq!(eval.per_session.len(), 2);
    assert_eq!(report.per_class_iou.len(), 2);
    // Handing the wrong session is refused.
    assert!(run_session(&mut state, &data, &mut bank, &mut buf, &cfg).is_err());
}

#[test]
fn ablated_trainer_ignores_bank_and_buffer() {
    let mut cfg = tiny(vec![1, 1]);
    let data = build_sessions(&cfg.data, cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let mut bank = PriorBank::new();
    let mut buf = buffer_for(&cfg);
    run_session(&mut state, &data[..1], &mut bank, &mut buf, &cfg).unwrap();
    assert!(!bank.is_empty() && !buf.is_empty());

    cfg.train.replay_ratio = 0.0;
    cfg.train.kl_weight = 0.0;
    let mut with = state.clone();
    let mut without = state.clone();
    let (_, _, ta) =
        run_session(&mut with, &data, &mut bank.clone(), &mut buf.clone(), &cfg).unwrap();
    let (_, _, tb) = run_session(
        &mut without,
        &data,
        &mut PriorBank::new(),
        &mut buffer_for(&cfg),
        &cfg,
    )
    .unwrap();
    assert_eq!(ta, tb);
    assert_eq!(with.model, without.model);
}

#[test]
fn same_seed_same_bytes() {
    let cfg = tiny(vec![1, 1]);
    let data = build_sessions(&cfg.data, cfg.seed).unwrap();
    let run = || {
        let mut state = TrainState::new(&cfg).unwrap();
        let mut bank = PriorBank::new();
        let mut buf = buffer_for(&cfg);
        let mut out = Vec::new();
        for t in 0..2 {
            let (r, _, _) =
                run_session(&mut state, &data[..=t], &mut bank, &mut buf, &cfg).unwrap();
            out.push(serde_json::to_string(&r).unwrap());
        }
        (out, state.to_checkpoint().unwrap(), bank.to_json().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_restores_state() {
    let cfg = tiny(vec![1, 1]);
    let data = build_sessions(&cfg.data, cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let mut bank = PriorBank::new();
    let mut buf = buffer_for(&cfg);
    run_session(&mut state, &data[..1], &mut bank, &mut buf, &cfg).unwrap();
    let bytes = state.to_checkpoint().unwrap();
    let back = TrainState::from_checkpoint(&bytes).unwrap();
    assert_eq!(back, state);
    assert_eq!(back.to_checkpoint().unwrap(), bytes);

    // Resuming from the checkpoint matches continuing in memory.
    let (mut a, mut b) = (state, back);
    let ra = run_session(&mut a, &data, &mut bank.clone(), &mut buf.clone(), &cfg).unwrap();
    let rb = run_session(&mut b, &data, &mut bank, &mut buf, &cfg).unwrap();
    assert_eq!(ra.0, rb.0);
    assert_eq!(a.model, b.model);
}

#[test]
fn half_everywhere_scores_occupied_fraction() {
    let cfg = tiny(vec![1]);
    let data = build_sessions(&cfg.data, cfg.seed).unwrap();
    let mut model = ModelParams::init(&cfg.model, cfg.data.image_size, 1).unwrap();
    model.decoder.zero_output();
    for inst in &data[0].test {
        let iou = eval::instance_iou(&model, inst, &cfg.eval, 0).unwrap();
        let r3 = inst.grid.res().pow(3) as f64;
        assert_eq!(iou, inst.grid.occupied_count() as f64 / r3);
        let brute = voxel_iou(
            &vec![0.5; inst.grid.cells().len()],
            &vec![true; inst.grid.cells().len()],
            0.2,
        )
        .unwrap();
        assert_eq!(brute, 1.0);
    }
    let a = evaluate_cumulative(&model, &data, &cfg.eval, 0).unwrap();
    let b = evaluate_cumulative(&model, &data, &cfg.eval, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_gradient_is_thread_count_independent() {
    let cfg = tiny(vec![1]);
    let data = build_sessions(&cfg.data, cfg.seed).unwrap();
    let model = ModelParams::init(&cfg.model, cfg.data.image_size, 2).unwrap();
    let items: Vec<Item<'_>> = data[0]
        .train
        .iter()
        .map(|i| Item {
            view: &i.view,
            sample: &i.sample,
            kl: true,
        })
        .collect();
    let prior = GaussianLatent::standard(4);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let three = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let a = one.install(|| batch_gradient(&model, &items, Some((&prior, 1.0)), 16, 9).unwrap());
    let b = three.install(|| batch_gradient(&model, &items, Some((&prior, 1.0)), 16, 9).unwrap());
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
    assert!(a.1.kl > 0.0 && (a.1.loss - a.1.bce - a.1.kl).abs() < 1e-12);
}

#[test]
fn runaway_rate_is_reported_as_divergence() {
    let mut cfg = tiny(vec![1]);
    cfg.train.lr = 1e300;
    let data = build_sessions(&cfg.data, cfg.seed).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let r = run_session(
        &mut state,
        &data,
        &mut PriorBank::new(),
        &mut buffer_for(&cfg),
        &cfg,
    );
    assert!(
        matches!(r, Err(Error::Diverged { session: 0, .. })),
        "{r:?}"
    );
}
