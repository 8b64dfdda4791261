mod common;

use common::*;
use edgeformer::config::{DecoderStyle, LayerAdapt, TyingScheme};
use edgeformer::train::train;
use edgeformer::{Model, ModelConfig, TaskSpec, TrainConfig};

#[test]
fn group_gradients_are_slot_sums() {
    let mut c = tiny(8, 3, 2, 9, DecoderStyle::Vanilla);
    c.tying = TyingScheme::Universal;
    tied_vs_untied(&c, 1).unwrap();
    let mut e = tiny(8, 12, 2, 9, DecoderStyle::Interleaved);
    e.tying = TyingScheme::Edgeformer;
    e.la = LayerAdapt::Prefix { length: 2 };
    tied_vs_untied(&e, 2).unwrap();
    let mut r = rng(3);
    let mut k = tiny(8, 3, 2, 9, DecoderStyle::Interleaved);
    k.tying = random_custom(&k, &mut r);
    k.la = LayerAdapt::adapter(2);
    tied_vs_untied(&k, 3).unwrap();
}

#[test]
fn untied_clone_of_full_plan_is_identity() {
    let c = tiny(8, 2, 2, 9, DecoderStyle::Vanilla);
    let m: Model<f64> = Model::new(c, 4).unwrap();
    let (u, source) = untied_clone(&m);
    assert_eq!(u.store.param_count(true), m.store.param_count(true));
    let mut targets: Vec<&String> = source.values().collect();
    targets.sort();
    targets.dedup();
    assert_eq!(targets.len(), source.len(), "full plan maps slots one to one");
}

fn dev_loss(mut config: ModelConfig, seed: u64) -> f64 {
    let spec = TaskSpec { train: 256, dev: 64, ..Default::default() };
    let splits = spec.generate().unwrap();
    config.vocab_size = spec.vocab_size;
    let cfg = TrainConfig {
        lr: 3e-3,
        warmup: 50,
        max_steps: 300,
        batch_tokens: 600,
        eval_every: 100,
        log_every: 0,
        seed,
        ..Default::default()
    };
    let out = train(Model::new(config, seed).unwrap(), &splits.train, &splits.dev, &cfg, &mut |_| {}).unwrap();
    out.best_dev.loss
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Sharing layers can only remove capacity: on the same budget an untied
/// 4+2 model should not end up worse than its universal counterpart.
#[test]
fn untied_not_worse_than_universal() {
    let mut full = ModelConfig::transformer(32, 4, 2);
    full.heads = 4;
    full.max_len = 64;
    let mut universal = full.clone();
    universal.tying = TyingScheme::Universal;
    let f = median((1..=5).map(|s| dev_loss(full.clone(), s)).collect());
    let u = median((1..=5).map(|s| dev_loss(universal.clone(), s)).collect());
    eprintln!("median dev loss: full {f:.4}, universal {u:.4}");
    assert!(f <= u + 0.05, "full {f} vs universal {u}");
}
