use mgan_core::config::{Phase, RunConfig};
use mgan_core::model::Mgan;
use mgan_core::synth::{generate_split, SceneSpec};
use mgan_core::tensor::Graph;
use mgan_core::train::{batch_loss, image_targets, train, Adam, TrainIo};

#[test]
fn one_batch_overfits_in_fifty_steps() {
    let mut cfg = RunConfig::default();
    cfg.model.channels = 16;
    cfg.model.fc_width = 64;
    let scenes = generate_split(&SceneSpec::default(), 1, 11, "o").unwrap();
    let targets: Vec<_> = scenes.iter().map(|s| image_targets(s, &cfg, 3).unwrap()).collect();
    let batch: Vec<_> = scenes.iter().map(|s| &s.image).zip(&targets).collect();
    let mut model = Mgan::new(cfg.model.clone(), cfg.attention_enabled(), 0);
    let mut adam = Adam::new(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let (loss, stats) = batch_loss(&model, &mut g, &b, &batch, &cfg).unwrap();
        losses.push(stats.breakdown.total);
        g.backward(loss).unwrap();
        model.params.zero_grad();
        model.params.accumulate_grads(&g, &b).unwrap();
        adam.step(&mut model.params, 3e-3);
    }
    // Loss after the 50th update.
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let (_, stats) = batch_loss(&model, &mut g, &b, &batch, &cfg).unwrap();
    let last = stats.breakdown.total;
    assert!(last < 0.1 * losses[0], "loss {} -> {last}", losses[0]);
}

/// Per-step moving averages are too noisy to be monotone (each batch has
/// a different number of positives), so this checks the trend instead:
/// the last 20-step average is below the first and per-epoch means never
/// rise.
#[test]
fn loss_trends_down() {
    let mut cfg = RunConfig::default();
    cfg.model.channels = 8;
    cfg.model.fc_width = 32;
    cfg.optim.schedule = vec![Phase { epochs: 3, lr: 1e-3 }];
    let scenes = generate_split(&SceneSpec::default(), 100, 12, "m").unwrap();
    let log = train(&cfg, &scenes, &TrainIo::default()).unwrap().log;
    let totals: Vec<f64> = log.iter().map(|r| r.loss.total).collect();
    let avg: Vec<f64> = totals.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let (first, last) = (avg[0], *avg.last().unwrap());
    assert!(last < first, "20-step average {first} -> {last}");
    let per_epoch: Vec<f64> = (0..3)
        .map(|e| {
            let v: Vec<f64> = log.iter().filter(|r| r.epoch == e).map(|r| r.loss.total).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    assert!(per_epoch.windows(2).all(|p| p[1] <= p[0]), "epoch means {per_epoch:?}");
}
