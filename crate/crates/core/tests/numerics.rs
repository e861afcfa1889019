use multiformer::numerics::{Mode, ParamStore, ReduceKind, Tape, Tensor};
use multiformer::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn linear_identity_and_hand_arithmetic() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Eval);
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let x = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let w = tape.constant(t(&[2, 2], &[2.0, 3.0, 5.0, 7.0]));
    let b = tape.constant(t(&[2], &[1.0, 1.0]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
}

#[test]
fn linear_mismatch_names_both_shapes() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Eval);
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    let w = tape.constant(Tensor::zeros(&[4, 5]));
    let msg = tape.linear(x, w, None).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Eval);
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0.0, 0.0], &[0.5, 0.5]),
        (&[1000.0, 1000.0, 1000.0], &[1.0 / 3.0; 3]),
        (&[0.0, 3f64.ln()], &[0.25, 0.75]),
    ];
    for (input, want) in cases {
        let x = tape.constant(t(&[1, input.len()], input));
        let y = tape.softmax(x, 1).unwrap();
        assert!(close(tape.value(y).data(), want, 1e-12), "{input:?}");
    }
}

#[test]
fn conv_counts_overlap_with_zero_padding() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Eval);
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 1, 3, 3]);
    assert_eq!(out.get(&[0, 0, 1, 1]), 9.0);
    assert_eq!(out.get(&[0, 0, 0, 0]), 4.0);
    assert_eq!(out.get(&[0, 0, 0, 1]), 6.0);
}

#[test]
fn conv_rejects_fractional_output_size() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Eval);
    let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, 2, 0), Err(Error::Config(_))));
}

#[test]
fn batch_norm_two_point_and_constant() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Train);
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
    let (y, mean, var) = tape.batch_norm_train(x, g, b, 1).unwrap();
    assert!(close(tape.value(y).data(), &[-1.0, 1.0], 1e-3));
    assert_eq!((mean[0], var[0]), (2.0, 1.0));

    let x = tape.constant(Tensor::full(&[4, 1], 7.0));
    let (y, _, _) = tape.batch_norm_train(x, g, b, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_needs_two_values_per_feature() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Train);
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(Tensor::ones(&[1, 3]));
    assert!(tape.batch_norm_train(x, g, b, 1).is_err());
}

#[test]
fn layer_norm_matches_population_std() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Eval);
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(t(&[1, 3], &[2.0, 4.0, 6.0]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(close(tape.value(y).data(), &[-1.2247, 0.0, 1.2247], 1e-3));
}

#[test]
fn activation_pool_and_mse_examples() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Eval);
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 2.0]);

    let m = tape.constant(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
    let p = tape.global_pool(m, ReduceKind::Mean).unwrap();
    assert_eq!(tape.value(p).data(), &[4.0]);
    let p = tape.global_pool(m, ReduceKind::Max).unwrap();
    assert_eq!(tape.value(p).data(), &[7.0]);

    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let e = tape.mse(a, a).unwrap();
    assert_eq!(tape.value(e).data(), &[0.0]);
    let c = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(tape.mse(a, c), Err(Error::Shape { .. })));
}

#[test]
fn backward_closed_forms() {
    let mut ps = ParamStore::<f64>::new();
    let id = ps.add("x", t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 9.0]));
    let mut tape = Tape::new(&ps, Mode::Eval);
    let x = tape.param(id);
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(id).unwrap().data(), &[1.0; 6]);

    let mut ps = ParamStore::<f64>::new();
    let id = ps.add("x", t(&[1], &[3.0]));
    let mut tape = Tape::new(&ps, Mode::Eval);
    let x = tape.param(id);
    let z = tape.constant(Tensor::zeros(&[1]));
    let l = tape.mse(x, z).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(id).unwrap().data(), &[6.0]);
}

#[test]
fn backward_rejects_reuse_and_non_scalar() {
    let mut ps = ParamStore::<f64>::new();
    let id = ps.add("x", Tensor::ones(&[2]));
    let mut tape = Tape::new(&ps, Mode::Eval);
    let x = tape.param(id);
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    tape.reset();
    let x = tape.param(id);
    let s = tape.sum(x).unwrap();
    assert!(tape.backward(s).is_ok());
}

#[test]
fn checked_mode_names_first_non_finite_op() {
    let ps = ParamStore::<f64>::new();
    let mut tape = Tape::new(&ps, Mode::Eval).checked(true);
    let a = tape.constant(t(&[2], &[1e308, 1.0]));
    let b = tape.scale(a, 10.0);
    match b {
        Err(Error::NonFinite { op, .. }) => assert_eq!(op, "scale"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn dropout_is_seeded_and_off_in_eval() {
    let ps = ParamStore::<f64>::new();
    let run = |mode, seed| {
        let mut tape = Tape::new(&ps, mode).with_seed(seed);
        let x = tape.constant(Tensor::ones(&[64]));
        let y = tape.dropout(x, 0.5).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(Mode::Train, 3), run(Mode::Train, 3));
    assert_ne!(run(Mode::Train, 3), run(Mode::Train, 4));
    assert_eq!(run(Mode::Eval, 3), vec![1.0; 64]);
    assert!(run(Mode::Train, 3).iter().all(|&v| v == 0.0 || v == 2.0));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let ps = ParamStore::<f64>::new();
        let mut tape = Tape::new(&ps, Mode::Eval);
        let n = row.len();
        let x = tape.constant(t(&[1, n], &row));
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let xs = tape.constant(t(&[1, n], &shifted));
        let y = tape.softmax(x, 1).unwrap();
        let ys = tape.softmax(xs, 1).unwrap();
        let sum: f64 = tape.value(y).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(y).data().iter().all(|&p| p > 0.0));
        prop_assert!(close(tape.value(y).data(), tape.value(ys).data(), 1e-9));
    }

    #[test]
    fn pointwise_conv_equals_per_pixel_linear(
        seed in 0u64..1000,
        c_in in 1usize..4,
        c_out in 1usize..4,
        hw in 1usize..5,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[1, c_in, hw, hw], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[c_out, c_in, 1, 1], 1.0, &mut rng);
        let ps = ParamStore::<f64>::new();
        let mut tape = Tape::new(&ps, Mode::Eval);
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
        let got = tape.value(y).data().to_vec();

        // per-pixel linear: rows are pixels, W^T maps c_in -> c_out
        let pixels = hw * hw;
        let mut xt = vec![0.0; pixels * c_in];
        for c in 0..c_in {
            for p in 0..pixels {
                xt[p * c_in + c] = x.data()[c * pixels + p];
            }
        }
        let mut wt = vec![0.0; c_in * c_out];
        for o in 0..c_out {
            for c in 0..c_in {
                wt[c * c_out + o] = w.data()[o * c_in + c];
            }
        }
        let xv = tape.constant(t(&[pixels, c_in], &xt));
        let wv = tape.constant(t(&[c_in, c_out], &wt));
        let lin = tape.linear(xv, wv, None).unwrap();
        let lin = tape.value(lin).data();
        for o in 0..c_out {
            for p in 0..pixels {
                prop_assert_eq!(got[o * pixels + p], lin[p * c_out + o]);
            }
        }
    }
}
