mod common;

use common::*;
use edgeformer::config::{DecoderStyle, LayerAdapt, TyingScheme};
use edgeformer::{Batch, Model};

const TOL: f64 = 1e-4;

fn check(config: edgeformer::ModelConfig, seed: u64) {
    let mut r = rng(seed);
    let mut model: Model<f64> = Model::new(config.clone(), seed).unwrap();
    jitter(&mut model, 0.05, &mut r);
    let batch = Batch::from_pairs(&random_pairs(&mut r, config.vocab_size, 2, 5)).unwrap();
    let (err, key) = grad_check(&model, &batch, 0.1, 4, &mut r);
    assert!(err < TOL, "{config:?}\n{}/{} la={}: relative error {err:e} at `{key}`", config.tying.name(), config.decoder_style_name(), config.la.kind());
}

trait StyleName {
    fn decoder_style_name(&self) -> &'static str;
}

impl StyleName for edgeformer::ModelConfig {
    fn decoder_style_name(&self) -> &'static str {
        match self.decoder_style {
            DecoderStyle::Vanilla => "vanilla",
            DecoderStyle::Interleaved => "interleaved",
        }
    }
}

#[test]
fn every_adaptation_kind_on_both_styles() {
    let las = [LayerAdapt::None, LayerAdapt::Bias, LayerAdapt::adapter(2), LayerAdapt::Prefix { length: 2 }];
    for (i, la) in las.into_iter().enumerate() {
        for style in [DecoderStyle::Vanilla, DecoderStyle::Interleaved] {
            let mut c = tiny(8, 2, 2, 9, style);
            c.la = la.clone();
            check(c, i as u64);
        }
    }
}

#[test]
fn every_tying_scheme() {
    let mut c = tiny(8, 2, 1, 8, DecoderStyle::Vanilla);
    c.tying = TyingScheme::Universal;
    check(c.clone(), 1);
    c.tying = random_custom(&c, &mut rng(5));
    check(c, 2);
    let mut e = tiny(8, 12, 2, 8, DecoderStyle::Interleaved);
    e.tying = TyingScheme::Edgeformer;
    e.la = LayerAdapt::adapter(1);
    check(e, 3);
}

#[test]
fn factorized_and_untied_embeddings() {
    let mut c = tiny(8, 1, 1, 10, DecoderStyle::Vanilla);
    c.d_embed = 4;
    check(c.clone(), 4);
    c.tie_output = false;
    check(c, 5);
}

#[test]
fn randomized_configurations() {
    let mut r = rng(2024);
    for case in 0..12 {
        check(random_config(&mut r), 100 + case);
    }
}
