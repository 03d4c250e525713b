mod common;

use mass_core::masking::{sample_span, Masker, Mode, SpanLength};
use mass_core::model::{ModelConfig, ParamGrads, Transformer};
use mass_core::training::{AdamConfig, AdamState};
use mass_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks the tape gradient of a scalar built by `f` against central
/// differences, for every coordinate of every input.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(&inputs);
    let grads = tape.backward(out).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[i]);
        for j in 0..x.len() {
            let mut shifted = inputs.clone();
            shifted[i].data_mut()[j] += H;
            let (t, _, o) = eval(&shifted);
            let up = t.value(o).item();
            shifted[i].data_mut()[j] -= 2.0 * H;
            let (t, _, o) = eval(&shifted);
            let down = t.value(o).item();
            let numeric = (up - down) / (2.0 * H);
            let e = rel_err(analytic.data()[j], numeric);
            assert!(
                e < tol,
                "input {i} coord {j}: analytic {} numeric {numeric} (rel {e:e})",
                analytic.data()[j]
            );
        }
    }
}

/// Reduces a tensor output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct amount.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

#[test]
fn elementwise_and_linear_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let c = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let k = random(&[6, 4], &mut rng);

    check(vec![a.clone(), b], |t, v| {
        let o = t.matmul(v[0], v[1]).unwrap();
        weighted(t, o, 10)
    }, 1e-5);
    check(vec![a.clone(), k], |t, v| {
        let o = t.matmul_bt(v[0], v[1]).unwrap();
        weighted(t, o, 11)
    }, 1e-5);
    check(vec![a.clone(), c.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let p = t.mul(s, v[1]).unwrap();
        let p = t.scale(p, 0.7);
        weighted(t, p, 12)
    }, 1e-5);
    check(vec![a.clone(), row], |t, v| {
        let o = t.add_row(v[0], v[1]).unwrap();
        weighted(t, o, 13)
    }, 1e-5);
    let offset = random(&[3, 4], &mut rng);
    check(vec![a.clone()], move |t, v| {
        let o = t.add_const(v[0], &offset).unwrap();
        let o = t.gelu(o);
        weighted(t, o, 14)
    }, 1e-5);
}

#[test]
fn normalisation_and_softmax_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 6], &mut rng);
    let gain = random(&[6], &mut rng);
    let bias = random(&[6], &mut rng);
    check(vec![x.clone(), gain, bias], |t, v| {
        let o = t.layer_norm(v[0], v[1], v[2]).unwrap();
        weighted(t, o, 20)
    }, 1e-5);
    for axis in 0..2 {
        check(vec![x.clone()], move |t, v| {
            let o = t.softmax(v[0], axis).unwrap();
            weighted(t, o, 21)
        }, 1e-5);
    }
    check(vec![x.clone()], |t, v| {
        t.cross_entropy(v[0], &[2, 0, 5], None).unwrap()
    }, 1e-5);
    check(vec![x], |t, v| {
        t.cross_entropy(v[0], &[2, 0, 5], Some(0)).unwrap()
    }, 1e-5);
}

#[test]
fn indexing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = random(&[5, 4], &mut rng);
    let x = random(&[3, 6], &mut rng);
    let y = random(&[3, 2], &mut rng);
    check(vec![table], |t, v| {
        let o = t.gather_rows(v[0], &[1, 4, 1, 0]).unwrap();
        weighted(t, o, 30)
    }, 1e-5);
    check(vec![x, y], |t, v| {
        let a = t.slice_cols(v[0], 2, 3).unwrap();
        let j = t.concat_cols(&[a, v[1], a]).unwrap();
        weighted(t, j, 31)
    }, 1e-5);
}

#[test]
fn attention_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&[3, 4], &mut rng);
    let k = random(&[5, 4], &mut rng);
    let v = random(&[5, 4], &mut rng);
    let mask = mass_core::model::AttnMask::from_fn(3, 5, |r, c| c <= r + 1);
    check(vec![q, k, v], move |t, vs| {
        let o = mass_core::model::attention(t, vs[0], vs[1], vs[2], Some(&mask)).unwrap();
        weighted(t, o, 40)
    }, 1e-5);
}

#[test]
fn full_model_gradient_at_sampled_coordinates() {
    let cfg = ModelConfig {
        layers: 2,
        model_dim: 64,
        heads: 4,
        ffn_dim: 256,
        vocab_size: 60,
        max_positions: 32,
        ..ModelConfig::default()
    };
    let model = Transformer::new(cfg.clone(), 42).unwrap();
    let masker = Masker::new(5..60);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let tokens: Vec<usize> = (0..10).map(|_| rng.gen_range(5..60)).collect();
    let span = sample_span(tokens.len(), SpanLength::Ratio(0.5), &mut rng);
    let ex = masker.build(&tokens, span, Mode::Mass, 0, &mut rng).unwrap();

    let loss_of = |m: &Transformer| {
        let mut s = m.eval_session();
        let l = s.example_loss(&ex).unwrap();
        s.value(l).item()
    };
    let mut s = model.session();
    let l = s.example_loss(&ex).unwrap();
    let grads = s.backward(l).unwrap();

    // Every parameter tensor, a handful of coordinates each.
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (p, g) in grads.0.iter().enumerate() {
        let n = g.len();
        let mut coords: Vec<usize> = (0..16).map(|_| rng.gen_range(0..n)).collect();
        // Always include the largest-magnitude coordinate so the check is
        // not dominated by near-zero entries.
        let argmax = (0..n)
            .max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs()))
            .unwrap();
        coords.push(argmax);
        for j in coords {
            let mut plus = model.clone();
            plus.params_mut().tensors_mut()[p].data_mut()[j] += H;
            let mut minus = model.clone();
            minus.params_mut().tensors_mut()[p].data_mut()[j] -= H;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * H);
            let e = rel_err(g.data()[j], numeric);
            worst = worst.max(e);
            checked += 1;
            assert!(
                e < 1e-3,
                "{} [{j}]: analytic {} numeric {numeric}",
                model.params().names()[p],
                g.data()[j]
            );
        }
    }
    assert!(checked >= 17 * model.params().len());
    assert!(worst < 1e-3);
}

#[test]
fn adam_matches_hand_stepped_quadratic() {
    let model = common::small_model(12, 1);
    let mut params = model.params().clone();
    let centre: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|v| v * 0.5 + 0.1).collect())
        .collect();
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&params, cfg);

    let mut expected: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = expected.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut v = m.clone();
    for step in 1..=5 {
        // L = ½‖w − c‖², so ∇L = w − c.
        let grads = ParamGrads(
            params
                .tensors()
                .iter()
                .zip(&centre)
                .map(|(t, c)| {
                    let g = t.data().iter().zip(c).map(|(w, c)| w - c).collect();
                    Tensor::new(t.shape().to_vec(), g).unwrap()
                })
                .collect(),
        );
        adam.update(&mut params, &grads, |_| true).unwrap();

        for i in 0..expected.len() {
            for j in 0..expected[i].len() {
                let g = expected[i][j] - centre[i][j];
                m[i][j] = 0.9 * m[i][j] + 0.1 * g;
                v[i][j] = 0.999 * v[i][j] + 0.001 * g * g;
                let mh = m[i][j] / (1.0 - 0.9f64.powi(step));
                let vh = v[i][j] / (1.0 - 0.999f64.powi(step));
                expected[i][j] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
    }
    assert_eq!(adam.step_count(), 5);
    for (t, e) in params.tensors().iter().zip(&expected) {
        for (a, b) in t.data().iter().zip(e) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
