use multiformer::frontend::{
    amplitude, make_tokens, resample, AmplitudeGrid, Branch, CsiWindow, Resampler, Tfddt, TokenEmbedding,
};
use multiformer::numerics::nn::Builder;
use multiformer::numerics::{BufferStore, Mode, ParamStore, Tape, Tensor};
use num_complex::Complex32;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Decodes each token position back to its grid coordinate.
fn oracle_token(g: &AmplitudeGrid, branch: Branch, row: usize, pos: usize) -> f64 {
    match branch {
        Branch::Frequency => g.at(pos % g.packets, pos / g.packets, row),
        Branch::Temporal => g.at(row, pos % g.links, pos / g.links),
    }
}

fn random_grid(rng: &mut ChaCha8Rng) -> AmplitudeGrid {
    let (m, l, s) = (rng.random_range(1..9), rng.random_range(1..5), rng.random_range(1..9));
    let values = (0..m * l * s).map(|_| rng.random_range(0.0..10.0)).collect();
    AmplitudeGrid::new(m, l, s, values).unwrap()
}

#[test]
fn token_layout_matches_worked_example() {
    // value encodes 100·s + 10·n + i with 1-based indices
    let g = AmplitudeGrid::from_fn(2, 2, 2, |i, n, s| (100 * (s + 1) + 10 * (n + 1) + i + 1) as f64);
    let f = make_tokens(&g, Branch::Frequency);
    assert_eq!(f.row(0), &[111.0, 112.0, 121.0, 122.0]);
    let t = make_tokens(&g, Branch::Temporal);
    assert_eq!(t.row(1), &[112.0, 122.0, 212.0, 222.0]);
}

#[test]
fn tokens_match_index_oracle_on_random_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let g = random_grid(&mut rng);
        for branch in Branch::BOTH {
            let tok = make_tokens(&g, branch);
            assert_eq!(tok.rows, branch.token_count(&g));
            for r in 0..tok.rows {
                for p in 0..tok.width {
                    assert_eq!(tok.row(r)[p], oracle_token(&g, branch, r, p));
                }
            }
        }
    }
}

#[test]
fn tokenisation_preserves_the_value_multiset() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let g = random_grid(&mut rng);
        let mut want = g.values.clone();
        want.sort_by(f64::total_cmp);
        for branch in Branch::BOTH {
            let mut got = make_tokens(&g, branch).data;
            got.sort_by(f64::total_cmp);
            assert_eq!(got, want);
        }
    }
}

#[test]
fn amplitude_is_modulus() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<Complex32> = (0..4 * 3 * 7)
        .map(|_| Complex32::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
        .collect();
    let w = CsiWindow::new(4, 1, 3, 7, 1e3, samples.clone()).unwrap();
    let g = amplitude(&w);
    for (z, a) in samples.iter().zip(&g.values) {
        assert_eq!(*a, ((z.re as f64).powi(2) + (z.im as f64).powi(2)).sqrt());
    }
}

#[test]
fn resampled_lengths() {
    assert_eq!(resample(&[1.0; 10], 64).unwrap().len(), 64);
    assert_eq!(resample(&[1.0; 30], 64).unwrap().len(), 64);
    assert_eq!(resample(&[1.0; 30], 16).unwrap().len(), 16);
}

#[test]
fn constants_pass_through() {
    for (n, m) in [(10, 64), (30, 64), (10, 16), (30, 16), (7, 7)] {
        for c in [1.0, -3.25, 1234.5] {
            let y = resample(&vec![c; n], m).unwrap();
            for v in y {
                assert!((v - c).abs() <= 1e-6 * c.abs().max(1.0), "{n}->{m}: {v} vs {c}");
            }
        }
    }
}

#[test]
fn single_tone_tracks_dense_analytic_tone() {
    let f = 0.05;
    for (n, m) in [(10, 64), (40, 256)] {
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64).sin())
            .collect();
        let y = resample(&x, m).unwrap();
        let (mut err, mut norm) = (0.0, 0.0);
        for (k, v) in y.iter().enumerate() {
            let pos = k as f64 * n as f64 / m as f64;
            if pos < 2.0 || pos > (n - 3) as f64 {
                continue;
            }
            let want = (2.0 * std::f64::consts::PI * f * pos).sin();
            err += (v - want).powi(2);
            norm += want * want;
        }
        let rel = (err / norm).sqrt();
        assert!(rel < 0.02, "{n}->{m}: relative RMS error {rel}");
    }
}

proptest! {
    #[test]
    fn resampling_is_linear(
        x in prop::collection::vec(-5.0f64..5.0, 10),
        y in prop::collection::vec(-5.0f64..5.0, 10),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let r = Resampler::new(10, 64).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (rx, ry, rm) = (r.apply(&x), r.apply(&y), r.apply(&mix));
        for k in 0..64 {
            prop_assert!((rm[k] - (a * rx[k] + b * ry[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn token_shapes_follow_configuration(m in 1usize..12, l in 1usize..5, s in 1usize..12) {
        let g = AmplitudeGrid::from_fn(m, l, s, |i, n, k| (i * 31 + n * 7 + k) as f64);
        let f = make_tokens(&g, Branch::Frequency);
        let t = make_tokens(&g, Branch::Temporal);
        prop_assert_eq!((f.rows, f.width), (s, m * l));
        prop_assert_eq!((t.rows, t.width), (m, s * l));
    }
}

#[test]
fn tfddt_turns_a_full_size_window_into_64_by_192_tokens() {
    let samples = (0..10 * 3 * 30).map(|k| Complex32::new((k % 7) as f32, 1.0)).collect();
    let w = CsiWindow::new(10, 1, 3, 30, 1e3, samples).unwrap();
    let tf = Tfddt::new(10, 3, 30, 64, 64).unwrap();
    let [f, t] = tf.tokens(&w).unwrap();
    assert_eq!((f.rows, f.width, t.rows, t.width), (64, 192, 64, 192));
}

fn embedding_store(tokens: usize, raw: usize, d: usize) -> (ParamStore<f64>, BufferStore<f64>, TokenEmbedding) {
    let (mut ps, mut bs) = (ParamStore::new(), BufferStore::new());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let emb = TokenEmbedding::new(&mut Builder::new(&mut ps, &mut bs, &mut rng), tokens, raw, d);
    (ps, bs, emb)
}

#[test]
fn zero_projection_and_embedding_give_zero_tokens() {
    let (mut ps, _bs, emb) = embedding_store(4, 6, 9);
    *ps.value_mut(emb.proj.weight) = Tensor::zeros(&[6, 9]);
    *ps.value_mut(emb.embedding) = Tensor::zeros(&[4, 9]);
    let mut tape = Tape::new(&ps, Mode::Train);
    let raw = tape.constant(Tensor::from_fn(&[2, 4, 6], |i| i as f64));
    let y = emb.project(&mut tape, raw).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let z = emb.forward(&mut tape, raw).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_projection_passes_tokens_through() {
    let (mut ps, _bs, emb) = embedding_store(3, 5, 5);
    *ps.value_mut(emb.proj.weight) = Tensor::from_fn(&[5, 5], |i| if i % 6 == 0 { 1.0 } else { 0.0 });
    *ps.value_mut(emb.embedding) = Tensor::zeros(&[3, 5]);
    let raw = Tensor::from_fn(&[2, 3, 5], |i| i as f64 * 0.5 - 3.0);
    let mut tape = Tape::new(&ps, Mode::Train);
    let r = tape.constant(raw.clone());
    let y = emb.project(&mut tape, r).unwrap();
    assert_eq!(tape.value(y).data(), raw.data());
}

#[test]
fn full_preset_embedding_is_64_by_1296() {
    let (ps, bs, emb) = embedding_store(64, 192, 1296);
    let mut tape = Tape::new(&ps, Mode::Eval).with_buffers(&bs);
    let raw = tape.constant(Tensor::ones(&[1, 64, 192]));
    let y = emb.forward(&mut tape, raw).unwrap();
    assert_eq!(tape.shape(y), &[1, 64, 1296]);
    let bad = tape.constant(Tensor::ones(&[1, 64, 191]));
    assert!(emb.forward(&mut tape, bad).is_err());
}
