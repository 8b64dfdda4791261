mod common;

use common::*;
use edgeformer::config::DecoderStyle;
use edgeformer::{decode, DecodeConfig, Model};

#[test]
fn beam_reaches_enumerated_optimum_or_reports_pruning() {
    let (mut optimal, mut pruned) = (0, 0);
    for seed in 0..20 {
        match beam_vs_enumeration(seed, 5) {
            BeamVerdict::Optimal => optimal += 1,
            BeamVerdict::Pruned { gap } => {
                assert!(gap > 0.0);
                pruned += 1;
            }
            BeamVerdict::Violation(m) => panic!("seed {seed}: {m}"),
        }
    }
    eprintln!("beam=5: {optimal} optimal, {pruned} pruned");
    assert!(optimal > 0);
}

#[test]
fn wide_beam_is_exact() {
    // 2 content symbols and 4 steps: 8 live hypotheses never prune.
    for seed in 0..10 {
        assert!(matches!(beam_vs_enumeration(seed, 8), BeamVerdict::Optimal), "seed {seed}");
    }
}

#[test]
fn wider_beams_rarely_score_worse() {
    // Not guaranteed for beam search; tallied rather than asserted per case.
    let (mut drops, mut total) = (0, 0);
    for seed in 0..10 {
        let mut r = rng(seed);
        let mut model: Model<f64> = Model::new(tiny(8, 2, 2, 9, DecoderStyle::Vanilla), seed).unwrap();
        jitter(&mut model, 0.3, &mut r);
        let src = vec![4, 7, 5, 8];
        let best = |beam| decode(model.view(), &src, &DecodeConfig { beam, max_len: 6, alpha: 0.0, cached: true }).unwrap()[0].score;
        let scores: Vec<f64> = (1..=6).map(best).collect();
        for w in scores.windows(2) {
            total += 1;
            drops += usize::from(w[1] < w[0] - 1e-12);
        }
    }
    eprintln!("width increase lowered the best score in {drops} of {total} steps");
    assert!(drops * 4 <= total);
}

#[test]
fn greedy_and_beam_agree_on_peaked_models() {
    for seed in 0..5 {
        let mut model: Model<f64> = Model::new(tiny(8, 2, 2, 10, DecoderStyle::Interleaved), seed).unwrap();
        jitter(&mut model, 0.2, &mut rng(seed));
        // Sharpen the output distribution by scaling the tied embedding.
        model.store.get_mut("embed/table").unwrap().data_mut().iter_mut().for_each(|x| *x *= 8.0);
        let src = vec![4, 5, 6];
        let greedy = decode(model.view(), &src, &DecodeConfig { alpha: 0.0, ..DecodeConfig::greedy(6) }).unwrap();
        let beam = decode(model.view(), &src, &DecodeConfig { beam: 4, max_len: 6, alpha: 0.0, cached: true }).unwrap();
        assert_eq!(greedy[0].tokens, beam[0].tokens, "seed {seed}");
    }
}

#[test]
fn cached_and_uncached_decoding_match_bitwise() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut c = random_config(&mut r);
        c.max_len = 16;
        let model: Model = Model::new(c.clone(), seed).unwrap();
        let src: Vec<u32> = random_pairs(&mut r, c.vocab_size, 1, 6)[0].0.clone();
        for beam in [1, 3] {
            let on = DecodeConfig { beam, max_len: 8, alpha: 0.6, cached: true };
            let off = DecodeConfig { cached: false, ..on.clone() };
            let a = decode(model.view(), &src, &on).unwrap();
            let b = decode(model.view(), &src, &off).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.tokens, y.tokens);
                assert_eq!(x.logprob.to_bits(), y.logprob.to_bits(), "seed {seed} beam {beam}");
            }
        }
    }
}
