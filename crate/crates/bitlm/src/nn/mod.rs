//! Dense real-valued compute primitives with exact reverse-mode gradients:
//! linear maps, causal attention with rotary positions, exact GELU, layer
//! normalization, and softmax cross-entropy. `f32` carries training; `f64`
//! carries the finite-difference gradient checks.

pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use scalar::{axpy, dot, Real};
pub use tape::{Gradients, NnError, NodeId, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::gradcheck::{central_diff_grad, max_scaled_error, DEFAULT_STEP};
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.next_gaussian() * scale).collect();
        Tensor::from_vec(shape, data)
    }

    /// Checks d(weighted_sum(op(inputs)))/d(inputs[check]) against central
    /// differences, where `build` applies the op under test.
    fn check_input_grad<F>(inputs: &[Tensor<f64>], check: usize, weights: Tensor<f64>, build: F) -> f64
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    {
        let forward = |perturbed: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let t = if i == check { perturbed.clone() } else { t.clone() };
                    tape.param(t)
                })
                .collect();
            let out = build(&mut tape, &ids);
            let loss = tape.weighted_sum(out, weights.clone()).unwrap();
            tape.value(loss).item()
        };
        let fd = central_diff_grad(forward, &inputs[check], DEFAULT_STEP);

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &ids);
        let loss = tape.weighted_sum(out, weights).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let analytic = grads.take(ids[check]).expect("gradient missing");
        max_scaled_error(&analytic, &fd)
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn linear_bias_grad_is_row_count() {
        // d(sum of outputs)/d(bias[j]) = number of rows.
        let mut rng = Rng::new(1);
        let x = random_tensor(&[2, 3, 4], &mut rng, 1.0);
        let w = random_tensor(&[4, 5], &mut rng, 0.3);
        let b = random_tensor(&[5], &mut rng, 0.1);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.param(x), tape.param(w), tape.param(b));
        let y = tape.linear(xi, wi, Some(bi)).unwrap();
        let ones = Tensor::from_vec(&[2, 3, 5], vec![1.0; 30]);
        let loss = tape.weighted_sum(y, ones).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let db = grads.take(bi).unwrap();
        for &g in db.data() {
            assert!((g - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_grads_match_finite_differences() {
        let mut rng = Rng::new(2);
        let inputs = vec![
            random_tensor(&[2, 3, 4], &mut rng, 1.0),
            random_tensor(&[4, 5], &mut rng, 0.5),
            random_tensor(&[5], &mut rng, 0.5),
        ];
        let weights = random_tensor(&[2, 3, 5], &mut rng, 1.0);
        for check in 0..3 {
            let err = check_input_grad(&inputs, check, weights.clone(), |tape, ids| {
                tape.linear(ids[0], ids[1], Some(ids[2])).unwrap()
            });
            assert!(err < 1e-5, "input {check}: scaled error {err}");
        }
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 5]));
        assert!(matches!(tape.linear(x, w, None), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![0.0, 10.0, -10.0]));
        let y = tape.gelu(x);
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 10.0).abs() < 1e-6);
        assert!(out[2].abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_finite_differences_at_probe_points() {
        let probes = Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.3, 4.0]);
        let weights = Tensor::from_vec(&[4], vec![1.0; 4]);
        let err = check_input_grad(&[probes], 0, weights, |tape, ids| tape.gelu(ids[0]));
        assert!(err < 1e-6, "scaled error {err}");
    }

    #[test]
    fn layer_norm_constant_row_returns_shift() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 4], vec![3.0; 4]));
        let gain = tape.constant(Tensor::from_vec(&[4], vec![1.5; 4]));
        let shift = tape.constant(Tensor::from_vec(&[4], vec![0.25, -0.5, 1.0, 2.0]));
        let y = tape.layer_norm(x, gain, shift, 1e-5).unwrap();
        for (j, &v) in tape.value(y).data().iter().enumerate() {
            assert!((v - tape.value(shift).data()[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardized_input_is_near_identity() {
        // Mean-0, variance-1 row with unit gain and zero shift.
        let n = 8;
        let raw: Vec<f64> = (0..n).map(|i| ((i as f64) - 3.5) / 2.29128784747792).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[1, n], raw.clone()));
        let gain = tape.constant(Tensor::from_vec(&[n], vec![1.0; n]));
        let shift = tape.constant(Tensor::zeros(&[n]));
        let y = tape.layer_norm(x, gain, shift, 1e-5).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&raw) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_grads_match_finite_differences() {
        let mut rng = Rng::new(3);
        let inputs = vec![
            random_tensor(&[2, 3, 6], &mut rng, 1.0),
            random_tensor(&[6], &mut rng, 0.5),
            random_tensor(&[6], &mut rng, 0.5),
        ];
        let weights = random_tensor(&[2, 3, 6], &mut rng, 1.0);
        for check in 0..3 {
            let err = check_input_grad(&inputs, check, weights.clone(), |tape, ids| {
                tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap()
            });
            assert!(err < 1e-5, "input {check}: scaled error {err}");
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = Rng::new(4);
        let x = random_tensor(&[1, 2, 3, 8], &mut rng, 1.0);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let y = tape.rope(xi, 10_000.0).unwrap();
        // Position 0 rows (t index 0) must be bit-identical.
        let hd = 8;
        for bh in 0..2 {
            let base = bh * 3 * hd;
            assert_eq!(&tape.value(y).data()[base..base + hd], &x.data()[base..base + hd]);
        }
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = Rng::new(5);
        let x = random_tensor(&[1, 1, 5, 6], &mut rng, 2.0);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let y = tape.rope(xi, 10_000.0).unwrap();
        let yd = tape.value(y).data();
        for row in 0..5 {
            for pair in 0..3 {
                let i = row * 6 + 2 * pair;
                let before = x.data()[i].hypot(x.data()[i + 1]);
                let after = yd[i].hypot(yd[i + 1]);
                assert!((before - after).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rope_dot_depends_only_on_position_offset() {
        // dot(rope(q, a), rope(k, b)) must match for (3,1) and (7,5).
        let mut rng = Rng::new(6);
        let hd = 8;
        let q: Vec<f64> = (0..hd).map(|_| rng.next_gaussian()).collect();
        let k: Vec<f64> = (0..hd).map(|_| rng.next_gaussian()).collect();
        let t = 8;
        let mut filled = vec![0.0; t * hd];
        for pos in 0..t {
            filled[pos * hd..(pos + 1) * hd].copy_from_slice(&q);
        }
        let mut tape = Tape::new();
        let qi = tape.constant(Tensor::from_vec(&[1, 1, t, hd], filled.clone()));
        for pos in 0..t {
            filled[pos * hd..(pos + 1) * hd].copy_from_slice(&k);
        }
        let ki = tape.constant(Tensor::from_vec(&[1, 1, t, hd], filled));
        let qr = tape.rope(qi, 10_000.0).unwrap();
        let kr = tape.rope(ki, 10_000.0).unwrap();
        let qd = tape.value(qr).data();
        let kd = tape.value(kr).data();
        let pair_dot = |a: usize, b: usize| dot(&qd[a * hd..(a + 1) * hd], &kd[b * hd..(b + 1) * hd]);
        assert!((pair_dot(3, 1) - pair_dot(7, 5)).abs() < 1e-5);
        assert!((pair_dot(5, 5) - pair_dot(2, 2)).abs() < 1e-5);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(matches!(tape.rope(x, 10_000.0), Err(NnError::OddHeadDim(3))));
    }

    #[test]
    fn rope_grad_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let inputs = vec![random_tensor(&[1, 2, 4, 6], &mut rng, 1.0)];
        let weights = random_tensor(&[1, 2, 4, 6], &mut rng, 1.0);
        let err = check_input_grad(&inputs, 0, weights, |tape, ids| {
            tape.rope(ids[0], 10_000.0).unwrap()
        });
        assert!(err < 1e-6, "scaled error {err}");
    }

    #[test]
    fn attention_single_position_returns_value() {
        let mut rng = Rng::new(8);
        let q = random_tensor(&[1, 2, 1, 4], &mut rng, 1.0);
        let k = random_tensor(&[1, 2, 1, 4], &mut rng, 1.0);
        let v = random_tensor(&[1, 2, 1, 4], &mut rng, 1.0);
        let mut tape = Tape::new();
        let (qi, ki, vi) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
        let y = tape.causal_attention(qi, ki, vi).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_probs_are_causal_row_stochastic() {
        // Rebuild probabilities from the outputs: feed one-hot values so the
        // output row *is* the probability row.
        let t = 5;
        let mut rng = Rng::new(9);
        let q = random_tensor(&[1, 1, t, t], &mut rng, 1.0);
        let k = random_tensor(&[1, 1, t, t], &mut rng, 1.0);
        let mut eye = Tensor::zeros(&[1, 1, t, t]);
        for i in 0..t {
            eye.data_mut()[i * t + i] = 1.0;
        }
        let mut tape = Tape::new();
        let (qi, ki, vi) = (tape.constant(q), tape.constant(k), tape.constant(eye));
        let y = tape.causal_attention(qi, ki, vi).unwrap();
        let yd = tape.value(y).data();
        for i in 0..t {
            let row = &yd[i * t..(i + 1) * t];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
            for (j, &p) in row.iter().enumerate() {
                if j > i {
                    assert_eq!(p, 0.0, "mask leak at ({i}, {j})");
                } else {
                    assert!(p >= 0.0);
                }
            }
        }
    }

    #[test]
    fn attention_grads_match_finite_differences() {
        let mut rng = Rng::new(10);
        let inputs = vec![
            random_tensor(&[1, 1, 3, 4], &mut rng, 1.0),
            random_tensor(&[1, 1, 3, 4], &mut rng, 1.0),
            random_tensor(&[1, 1, 3, 4], &mut rng, 1.0),
        ];
        let weights = random_tensor(&[1, 1, 3, 4], &mut rng, 1.0);
        for check in 0..3 {
            let err = check_input_grad(&inputs, check, weights.clone(), |tape, ids| {
                tape.causal_attention(ids[0], ids[1], ids[2]).unwrap()
            });
            assert!(err < 1e-4, "input {check}: scaled error {err}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let loss = tape.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_drives_loss_to_zero() {
        let mut tape = Tape::<f64>::new();
        let mut logits = Tensor::zeros(&[1, 1, 4]);
        logits.data_mut()[2] = 20.0;
        let id = tape.constant(logits);
        let loss = tape.softmax_cross_entropy(id, &[2]).unwrap();
        assert!(tape.value(loss).item() < 1e-8);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 1, 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[4]),
            Err(NnError::TargetOutOfRange { target: 4, vocab: 4 })
        ));
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let logits = random_tensor(&[2, 3, 5], &mut rng, 2.0);
        let targets = [1u32, 4, 0, 2, 3, 1];
        let forward = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let id = tape.param(x.clone());
            let loss = tape.softmax_cross_entropy(id, &targets).unwrap();
            tape.value(loss).item()
        };
        let fd = central_diff_grad(forward, &logits, DEFAULT_STEP);
        let mut tape = Tape::new();
        let id = tape.param(logits);
        let loss = tape.softmax_cross_entropy(id, &targets).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let err = max_scaled_error(&grads.take(id).unwrap(), &fd);
        assert!(err < 1e-5, "scaled error {err}");
    }

    #[test]
    fn embed_looks_up_rows_and_scatters_grads() {
        let mut tape = Tape::<f64>::new();
        let table =
            tape.param(Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]));
        let out = tape.embed(table, &[2, 0, 2, 1], (2, 2)).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 2, 2]);
        assert_eq!(
            tape.value(out).data(),
            &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0, 10.0, 11.0]
        );
        let ones = Tensor::from_vec(&[2, 2, 2], vec![1.0; 8]);
        let loss = tape.weighted_sum(out, ones).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let dt = grads.take(table).unwrap();
        // Row 2 used twice, rows 0 and 1 once each.
        assert_eq!(dt.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn embed_rejects_out_of_range_token() {
        let mut tape = Tape::<f64>::new();
        let table = tape.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.embed(table, &[3], (1, 1)),
            Err(NnError::TokenOutOfRange { token: 3, vocab: 3 })
        ));
    }

    #[test]
    fn split_merge_round_trip() {
        let mut rng = Rng::new(12);
        let x = random_tensor(&[2, 3, 8], &mut rng, 1.0);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let split = tape.split_heads(xi, 4).unwrap();
        assert_eq!(tape.value(split).shape(), &[2, 4, 3, 2]);
        let merged = tape.merge_heads(split).unwrap();
        assert_eq!(tape.value(merged).data(), x.data());
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let y = tape.gelu(x);
        let loss = tape.weighted_sum(y, Tensor::from_vec(&[2], vec![1.0, 1.0])).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || -> Vec<f64> {
            let mut rng = Rng::new(13);
            let x = random_tensor(&[2, 4, 6], &mut rng, 1.0);
            let w = random_tensor(&[6, 6], &mut rng, 0.3);
            let mut tape = Tape::new();
            let (xi, wi) = (tape.param(x), tape.param(w));
            let lin = tape.linear(xi, wi, None).unwrap();
            let act = tape.gelu(lin);
            let loss = tape
                .softmax_cross_entropy(act, &[0, 1, 2, 3, 4, 5, 0, 1])
                .unwrap();
            let mut grads = tape.backward(loss).unwrap();
            let mut out = grads.take(wi).unwrap().into_data();
            out.push(tape.value(loss).item());
            out
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
