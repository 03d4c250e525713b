mod common;

use common::reference::{log_softmax, mean_nll, Reference};
use common::small_model;
use mass_core::masking::{sample_span, CorruptionPolicy, Masker, Mode, SpanLength, IGNORE};
use mass_core::model::{batched_log_prob, incremental_log_prob};
use mass_core::tokenizer::MASK;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 40;

fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<usize> {
    let m = rng.gen_range(min..=max);
    (0..m).map(|_| rng.gen_range(5..VOCAB)).collect()
}

fn model_loss(model: &mass_core::model::Transformer, ex: &mass_core::masking::MaskedExample) -> f64 {
    let mut s = model.eval_session();
    let loss = s.example_loss(ex).unwrap();
    s.value(loss).item()
}

#[test]
fn model_matches_reference_forward() {
    let model = small_model(VOCAB, 3);
    let reference = Reference::new(&model);
    let masker = Masker::new(5..VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..20 {
        let tokens = sentence(&mut rng, 1, 12);
        let mode = Mode::ALL[i % 4];
        let span = sample_span(tokens.len(), SpanLength::Ratio(0.5), &mut rng);
        let mut ex = masker.build(&tokens, span, mode, i % 2, &mut rng).unwrap();
        if i % 3 == 0 && mode != Mode::Dae && mode != Mode::Feed {
            ex = ex.to_keep_padding();
        }
        let mut s = model.eval_session();
        let logits = s.example_logits(&ex).unwrap();
        let got = s.value(logits).clone();

        let memory = reference.encode(&ex.encoder_input, ex.language);
        let keys = ex.decoder_keys.clone();
        let allowed = move |t: usize, s: usize| match &keys {
            None => s <= t,
            Some(k) => s == t || (s < t && k[s]),
        };
        let want = reference.decode(
            &ex.decoder_input,
            &ex.decoder_positions,
            &memory,
            ex.decoder_language,
            &allowed,
        );
        for (r, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((got.at2(r, c) - v).abs() < 1e-9, "logit ({r},{c}) differs");
            }
        }
        let loss = model_loss(&model, &ex);
        assert!((loss - mean_nll(&want, &ex.targets, IGNORE)).abs() < 1e-9);
    }
}

#[test]
fn single_token_fragment_is_masked_token_classification() {
    let model = small_model(VOCAB, 5);
    let reference = Reference::new(&model);
    let masker = Masker::new(5..VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let tokens = sentence(&mut rng, 1, 16);
        let span = sample_span(tokens.len(), SpanLength::Single, &mut rng);
        let ex = masker
            .build(&tokens, span, Mode::Mass, 0, &mut rng)
            .unwrap();
        assert_eq!(ex.decoder_input, vec![MASK]);
        assert_eq!(ex.decoder_positions, vec![span.u]);

        let memory = reference.encode(&ex.encoder_input, 0);
        let logits = reference.mlm_logits(MASK, span.u, &memory, 0);
        let want = -log_softmax(&logits)[tokens[span.u]];
        assert!((model_loss(&model, &ex) - want).abs() < 1e-9);
    }
}

#[test]
fn whole_sentence_fragment_is_language_modelling() {
    let model = small_model(VOCAB, 6);
    let reference = Reference::new(&model);
    let masker = Masker::new(5..VOCAB).with_policy(CorruptionPolicy::ALWAYS_MASK);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let tokens = sentence(&mut rng, 2, 14);
        let m = tokens.len();
        let span = sample_span(m, SpanLength::Ratio(1.0), &mut rng);
        let ex = masker.build(&tokens, span, Mode::Mass, 1, &mut rng).unwrap();
        assert_eq!(ex.encoder_input, vec![MASK; m]);

        // The encoder sees nothing of the sentence, so its memory is the
        // same for every sentence of this length.
        let other: Vec<usize> = (0..m).map(|_| rng.gen_range(5..VOCAB)).collect();
        let other_ex = masker.build(&other, span, Mode::Mass, 1, &mut rng).unwrap();
        assert_eq!(ex.encoder_input, other_ex.encoder_input);

        let memory = reference.encode(&vec![MASK; m], 1);
        let mut inputs = vec![MASK];
        inputs.extend_from_slice(&tokens[..m - 1]);
        let positions: Vec<usize> = (0..m).collect();
        let logits = reference.decode(&inputs, &positions, &memory, 1, &|t, s| s <= t);
        let want = mean_nll(&logits, &tokens, IGNORE);
        assert!((model_loss(&model, &ex) - want).abs() < 1e-9);
    }
}

#[test]
fn dropping_padding_changes_nothing() {
    let model = small_model(VOCAB, 8);
    let masker = Masker::new(5..VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for i in 0..100 {
        let tokens = sentence(&mut rng, 1, 16);
        let mode = if i % 2 == 0 { Mode::Mass } else { Mode::Discrete };
        let ratio = [0.2, 0.5, 0.8][i % 3];
        let span = sample_span(tokens.len(), SpanLength::Ratio(ratio), &mut rng);
        let compact = masker.build(&tokens, span, mode, i % 2, &mut rng).unwrap();
        let padded = compact.to_keep_padding();
        assert_eq!(padded.decoder_input.len(), tokens.len());

        let mut a = model.session();
        let la = a.example_loss(&compact).unwrap();
        let ga = a.backward(la).unwrap();
        let mut b = model.session();
        let lb = b.example_loss(&padded).unwrap();
        let gb = b.backward(lb).unwrap();
        assert!((a.value(la).item() - b.value(lb).item()).abs() < 1e-9);
        for (x, y) in ga.0.iter().zip(&gb.0) {
            assert!(x.max_abs_diff(y) < 1e-9);
        }
    }
}

#[test]
fn batched_scoring_equals_incremental_decoding() {
    let model = small_model(VOCAB, 9);
    let masker = Masker::new(5..VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..100 {
        let tokens = sentence(&mut rng, 1, 14);
        let mode = Mode::ALL[i % 4];
        let span = sample_span(tokens.len(), SpanLength::Ratio(0.5), &mut rng);
        let mut ex = masker.build(&tokens, span, mode, i % 2, &mut rng).unwrap();
        if i % 5 == 0 && matches!(mode, Mode::Mass | Mode::Discrete) {
            ex = ex.to_keep_padding();
        }
        let batched = batched_log_prob(&model, &ex).unwrap();
        let incremental = incremental_log_prob(&model, &ex).unwrap();
        assert!(
            (batched - incremental).abs() < 1e-9,
            "instance {i}: {batched} vs {incremental}"
        );
    }
}

#[test]
fn later_decoder_inputs_do_not_affect_earlier_logits() {
    let model = small_model(VOCAB, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..30 {
        let src = sentence(&mut rng, 1, 10);
        let dec = sentence(&mut rng, 2, 10);
        let cut = rng.gen_range(1..dec.len());
        let mut changed = dec.clone();
        for t in changed.iter_mut().skip(cut) {
            *t = rng.gen_range(5..VOCAB);
        }
        let positions: Vec<usize> = (0..dec.len()).collect();
        let run = |inputs: &[usize]| {
            let mut s = model.eval_session();
            let mem = s.encode(&src, 0).unwrap();
            let l = s.decode(inputs, &positions, mem, 1, None).unwrap();
            s.value(l).clone()
        };
        let a = run(&dec);
        let b = run(&changed);
        for t in 0..cut {
            for (x, y) in a.row(t).iter().zip(b.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
