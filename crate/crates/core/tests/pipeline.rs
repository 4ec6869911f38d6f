use fgmine::adversarial::{
    build_eval_pool, forge_outer_batch, init_pair, inner_maximize, outer_step_on, train, EncoderConfig, ModelPair,
    Selector, Silent, SyncPeriod, TrainConfig, TrainData,
};
use fgmine::config::RunConfig;
use fgmine::encoder::{accumulate_backward, sgd_step, EncoderParams, EpisodeForward, Gradients};
use fgmine::forge::Mask;
use fgmine::ranking::{pr_loss_grad, ScoredEpisode};
use fgmine::rng::{stream, tag};
use fgmine::runner::{cmd_ablate, generate_data, read_summary};
use fgmine::world::{dataset, generate_world, Episode, Split, Trajectory, World, WorldConfig};
use rand::seq::SliceRandom;

fn small_world() -> World {
    generate_world(&WorldConfig {
        n_houses_seen: 4,
        n_houses_unseen: 2,
        seed: 5,
        ..WorldConfig::default()
    })
    .unwrap()
}

/// Plain SGD on coarse negatives only, written without the adversarial loop.
fn coarse_only(cfg: &TrainConfig, enc: &EncoderConfig, world: &World, eps: &[Episode]) -> EncoderParams {
    let mut params = EncoderParams::init(enc.dims_for(world), &mut stream(cfg.seed, &[tag::INIT])).unwrap();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..eps.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[tag::ORDER, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Gradients::zeros(params.dims);
            for &i in chunk {
                let ep = &eps[i];
                let cands: Vec<&Trajectory> =
                    std::iter::once(&ep.positive).chain(&ep.coarse_negatives[..cfg.n_coarse]).collect();
                let fwd = EpisodeForward::run(&params, &ep.instruction, &cands).unwrap();
                let up = pr_loss_grad(&ScoredEpisode::from_scores(fwd.scores[0], &fwd.scores[1..])).unwrap();
                accumulate_backward(&params, &fwd, &up, &mut g).unwrap();
            }
            g.scale(1.0 / chunk.len() as f64);
            params = sgd_step(&params, &g, cfg.lr).unwrap();
        }
    }
    params
}

#[test]
fn zero_fgn_is_the_coarse_only_trainer() {
    let world = small_world();
    let eps = dataset(&world, Split::Seen, 30, 3, 2).unwrap();
    let enc = EncoderConfig::default();
    for batch_size in [1, 4] {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size,
            seed: 9,
            ..TrainConfig::baseline()
        };
        let data = TrainData { world: &world, train: &eps, eval_seen: &[], eval_unseen: &[] };
        let out = train(&cfg, &enc, &data, &mut Silent).unwrap();
        let oracle = coarse_only(&cfg, &enc, &world, &eps);
        let a: Vec<u64> = out.pair.online.flatten().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = oracle.flatten().iter().map(|x| x.to_bits()).collect();
        assert!(a == b, "batch size {batch_size}: trained parameters differ from the coarse-only oracle");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_at_init() {
    let world = small_world();
    let eps = dataset(&world, Split::Seen, 10, 3, 2).unwrap();
    let cfg = TrainConfig { epochs: 2, lr: 0.0, iters: 3, ..TrainConfig::fgvln() };
    let data = TrainData { world: &world, train: &eps, eval_seen: &[], eval_unseen: &[] };
    let out = train(&cfg, &EncoderConfig::default(), &data, &mut Silent).unwrap();
    let init = init_pair(&cfg, EncoderConfig::default().dims_for(&world)).unwrap();
    assert_eq!(out.pair.online, init.online);
    assert_eq!(out.pair.target, init.online);
}

/// Steps the loop by hand and checks the target against every online snapshot.
fn check_sync(j: SyncPeriod, steps: usize) {
    let world = small_world();
    let eps = dataset(&world, Split::Seen, steps, 3, 4).unwrap();
    let cfg = TrainConfig { sync: j, iters: 3, lr: 0.05, ..TrainConfig::fgvln() };
    let mut pair: ModelPair = init_pair(&cfg, EncoderConfig::default().dims_for(&world)).unwrap();
    let mut snapshots = vec![pair.online.clone()];
    for (t, ep) in eps.iter().enumerate() {
        let inner = inner_maximize(&pair, ep, &cfg, &world, &mut stream(1, &[t as u64])).unwrap();
        let batch = [(ep, inner.masks.as_slice(), Some(inner.pool.as_slice()))];
        let fgn = forge_outer_batch(&batch, &cfg, &world, &mut stream(2, &[t as u64])).unwrap();
        outer_step_on(&mut pair, &fgn, &cfg).unwrap();
        pair.maybe_sync();
        snapshots.push(pair.online.clone());
        let t = t + 1;
        let expected = match j {
            SyncPeriod::Every(j) => (t / j) * j,
            SyncPeriod::Never => 0,
        };
        assert!(pair.target == snapshots[expected], "{j}: target after step {t} is not snapshot {expected}");
    }
    assert_ne!(snapshots[0], snapshots[steps]);
}

#[test]
fn target_follows_the_sync_period() {
    check_sync(SyncPeriod::Every(1), 9);
    check_sync(SyncPeriod::Every(4), 9);
    check_sync(SyncPeriod::Never, 9);
}

#[test]
fn random_selector_keeps_proposal_order() {
    let world = small_world();
    let ep = &dataset(&world, Split::Seen, 1, 3, 4).unwrap()[0];
    let cfg = TrainConfig { selector: Selector::Random, iters: 5, n_fgn: 2, ..TrainConfig::fgvln() };
    let pair = init_pair(&cfg, EncoderConfig::default().dims_for(&world)).unwrap();
    let out = inner_maximize(&pair, ep, &cfg, &world, &mut stream(3, &[])).unwrap();
    let first: Vec<&Mask> = out.history.trials().iter().map(|t| &t.mask).take(2).collect();
    assert_eq!(out.masks.iter().collect::<Vec<_>>(), first);
    assert_eq!(out.padded, 0);
}

#[test]
fn eval_pool_is_shared_by_every_model() {
    let world = small_world();
    let eps = dataset(&world, Split::Unseen, 6, 3, 4).unwrap();
    let a = build_eval_pool(&world, &eps, Split::Unseen, &TrainConfig::fgvln()).unwrap();
    let b = build_eval_pool(&world, &eps, Split::Unseen, &TrainConfig { seed: 77, ..TrainConfig::baseline() }).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn ablate_writes_every_row() {
    let mut cfg = RunConfig::default();
    cfg.world.n_houses_seen = 3;
    cfg.world.n_houses_unseen = 2;
    cfg.data.n_seen = 8;
    cfg.data.n_unseen = 4;
    cfg.train.epochs = 1;
    let data = generate_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_ablate(&cfg, &data, &[0, 1], false, dir.path()).unwrap();
    let rows = read_summary(&dir.path().join("summary.csv")).unwrap();
    // 7 configs x (2 seeds + mean) x 2 splits
    assert_eq!(rows.len(), 7 * 3 * 2);
    assert_eq!(report.rows.len(), rows.len());
    assert!(rows.iter().filter(|r| r.seed != "mean").all(|r| r.status == "ok"));
    assert!(rows.iter().filter(|r| r.seed == "mean").all(|r| r.status == "2 of 2 seeds"));
    assert!(dir.path().join("directional_check.json").exists());
    assert!(dir.path().join("r5-b2-out/seed_1/metrics.jsonl").exists());

    let dir = tempfile::tempdir().unwrap();
    cmd_ablate(&cfg, &data, &[0], true, dir.path()).unwrap();
    let rows = read_summary(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 11 * 2 * 2);
}
