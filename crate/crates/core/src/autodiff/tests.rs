use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_inputs, Probe};
use super::{NumericsError, Tape};

fn rnd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Run an FD sweep for one op over a few seeds; the loss is a fixed random
/// weighting of the op output so every output coordinate matters.
fn fd_op<F>(name: &str, shapes: &[(usize, usize)], lo: f64, hi: f64, build: F)
where
    F: Fn(&mut Tape, &[super::ArrayId]) -> Result<super::ArrayId, NumericsError> + Copy,
{
    for seed in [11u64, 12, 13] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs: Vec<Vec<f64>> = shapes.iter().map(|&(r, c)| rnd(&mut rng, r * c, lo, hi)).collect();
        let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let weighted = |tape: &mut Tape, ids: &[super::ArrayId]| -> Result<super::ArrayId, NumericsError> {
            let out = build(tape, ids)?;
            let (r, c) = tape.shape(out);
            let mut wrng = wrng.clone();
            let w = tape.leaf(r, c, rnd(&mut wrng, r * c, -1.0, 1.0))?;
            let prod = tape.mul(out, w)?;
            tape.sum_all(prod)
        };
        let report = check_inputs(shapes, &mut inputs, 1e-4, Probe::All, &mut rng, Tape::new, weighted)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(report.max_rel < 1e-4, "{name} seed {seed}: max rel {}", report.max_rel);
    }
}

#[test]
fn fd_elementwise_and_matrix_ops() {
    fd_op("add", &[(3, 4), (3, 4)], -2.0, 2.0, |t, ids| t.add(ids[0], ids[1]));
    fd_op("sub", &[(3, 4), (3, 4)], -2.0, 2.0, |t, ids| t.sub(ids[0], ids[1]));
    fd_op("mul", &[(3, 4), (3, 4)], -2.0, 2.0, |t, ids| t.mul(ids[0], ids[1]));
    fd_op("scale", &[(3, 4)], -2.0, 2.0, |t, ids| t.scale(ids[0], -1.7));
    fd_op("add_bias", &[(3, 4), (1, 4)], -2.0, 2.0, |t, ids| t.add_bias(ids[0], ids[1]));
    fd_op("matmul", &[(3, 4), (4, 5)], -1.0, 1.0, |t, ids| t.matmul(ids[0], ids[1]));
    fd_op("tanh", &[(3, 4)], -2.0, 2.0, |t, ids| t.tanh(ids[0]));
    fd_op("gelu", &[(3, 4)], -2.0, 2.0, |t, ids| t.gelu(ids[0]));
    fd_op("exp", &[(3, 4)], -1.0, 1.0, |t, ids| t.exp(ids[0]));
    fd_op("softmax", &[(3, 5)], -2.0, 2.0, |t, ids| t.softmax_rows(ids[0]));
    fd_op("log_softmax", &[(3, 5)], -2.0, 2.0, |t, ids| t.log_softmax_rows(ids[0]));
    fd_op("layer_norm", &[(4, 6), (1, 6), (1, 6)], -1.5, 1.5, |t, ids| {
        t.layer_norm(ids[0], ids[1], ids[2])
    });
    fd_op("reshape", &[(3, 4)], -2.0, 2.0, |t, ids| t.reshape(ids[0], 2, 6));
    fd_op("concat_rows", &[(2, 3), (1, 3), (4, 3)], -2.0, 2.0, |t, ids| t.concat_rows(ids));
    fd_op("slice_rows", &[(5, 3)], -2.0, 2.0, |t, ids| t.slice_rows(ids[0], 1, 3));
    fd_op("gather_rows", &[(5, 3)], -2.0, 2.0, |t, ids| t.gather_rows(ids[0], &[4, 0, 0, 2]));
    fd_op("embedding_lookup", &[(6, 4)], -2.0, 2.0, |t, ids| {
        t.embedding_lookup(ids[0], &[5, 1, 1, 3, 0])
    });
    fd_op("select_per_row", &[(5, 4)], -2.0, 2.0, |t, ids| {
        t.select_per_row(ids[0], &[3, 0, 2, 2, 1])
    });
    fd_op("sum_all", &[(3, 4)], -2.0, 2.0, |t, ids| t.sum_all(ids[0]));
    fd_op("mean_all", &[(3, 4)], -2.0, 2.0, |t, ids| t.mean_all(ids[0]));
}

#[test]
fn fd_clamp_and_min_away_from_kinks() {
    // keep every coordinate at least 0.05 from the clamp bounds and ties so
    // the central difference stays on one side of the kink
    for seed in [21u64, 22, 23] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = rnd(&mut rng, 12, -2.0, 2.0)
            .into_iter()
            .map(|v| if (v.abs() - 1.0).abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let mut inputs = vec![std::mem::take(&mut x)];
        let report = check_inputs(
            &[(3, 4)],
            &mut inputs,
            1e-4,
            Probe::All,
            &mut rng,
            Tape::new,
            |t, ids| {
                let c = t.clamp(ids[0], -1.0, 1.0)?;
                t.sum_all(c)
            },
        )
        .unwrap();
        assert!(report.max_rel < 1e-4, "clamp: {}", report.max_rel);

        let a = rnd(&mut rng, 12, -2.0, 2.0);
        let b: Vec<f64> = a.iter().map(|v| v + if rng.gen_bool(0.5) { 0.3 } else { -0.3 }).collect();
        let mut inputs = vec![a, b];
        let report = check_inputs(
            &[(3, 4), (3, 4)],
            &mut inputs,
            1e-4,
            Probe::All,
            &mut rng,
            Tape::new,
            |t, ids| {
                let m = t.min_elem(ids[0], ids[1])?;
                t.sum_all(m)
            },
        )
        .unwrap();
        assert!(report.max_rel < 1e-4, "min_elem: {}", report.max_rel);
    }
}

#[test]
fn fd_dropout_with_replayed_mask() {
    for seed in [31u64, 32] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![rnd(&mut rng, 20, -2.0, 2.0)];
        let report = check_inputs(
            &[(4, 5)],
            &mut inputs,
            1e-4,
            Probe::All,
            &mut rng,
            || Tape::training(99),
            |t, ids| {
                let d = t.dropout(ids[0], 0.3)?;
                t.sum_all(d)
            },
        )
        .unwrap();
        assert!(report.max_rel < 1e-4, "dropout: {}", report.max_rel);
    }
}

#[test]
fn fd_attention_ops() {
    fd_op("causal_attention", &[(5, 6), (5, 6), (5, 6)], -1.0, 1.0, |t, ids| {
        t.causal_attention(ids[0], ids[1], ids[2], 2)
    });
    let mask = [true, false, true, true, true, true, false, false, true, true, true, false];
    fd_op("pooled_attention", &[(3, 6), (12, 6), (12, 6)], -1.0, 1.0, move |t, ids| {
        t.pooled_attention(ids[0], ids[1], ids[2], 2, 4, &mask)
    });
}

#[test]
fn fd_cross_entropy() {
    let targets = [2usize, 0, 1, 1];
    let mask = [1.0, 1.0, 0.0, 1.0];
    fd_op("cross_entropy", &[(4, 3)], -2.0, 2.0, move |t, ids| {
        t.cross_entropy(ids[0], &targets, Some(&mask))
    });
}

#[test]
fn matmul_identity_returns_operand() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a_vals = rnd(&mut rng, 12, -3.0, 3.0);
    let eye = {
        let mut m = vec![0.0; 9];
        for i in 0..3 {
            m[i * 3 + i] = 1.0;
        }
        m
    };
    let i3 = tape.leaf(3, 3, eye).unwrap();
    let a = tape.leaf(3, 4, a_vals.clone()).unwrap();
    let out = tape.matmul(i3, a).unwrap();
    assert_eq!(tape.values(out), a_vals.as_slice());
}

#[test]
fn softmax_of_constant_vector_is_uniform() {
    let mut tape = Tape::new();
    for n in [1usize, 3, 7] {
        let x = tape.leaf(1, n, vec![0.42; n]).unwrap();
        let s = tape.softmax_rows(x).unwrap();
        for &w in tape.values(s) {
            assert!((w - 1.0 / n as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let x = tape.leaf(8, 5, rnd(&mut rng, 40, -30.0, 30.0)).unwrap();
    let s = tape.softmax_rows(x).unwrap();
    for row in tape.values(s).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_single_token_passes_value_through() {
    let mut tape = Tape::new();
    let q = tape.leaf(1, 4, vec![0.3, -0.1, 2.0, 0.7]).unwrap();
    let k = tape.leaf(1, 4, vec![1.0, 1.0, -1.0, 0.0]).unwrap();
    let v_vals = vec![0.5, -0.25, 0.125, 3.0];
    let v = tape.leaf(1, 4, v_vals.clone()).unwrap();
    let out = tape.causal_attention(q, k, v, 2).unwrap();
    assert_eq!(tape.values(out), v_vals.as_slice());
}

#[test]
fn attention_zero_query_averages_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t_len = 4;
    let e = 6;
    let mut tape = Tape::new();
    let q = tape.leaf(t_len, e, vec![0.0; t_len * e]).unwrap();
    let k = tape.leaf(t_len, e, rnd(&mut rng, t_len * e, -1.0, 1.0)).unwrap();
    let v_vals = rnd(&mut rng, t_len * e, -1.0, 1.0);
    let v = tape.leaf(t_len, e, v_vals.clone()).unwrap();
    let out = tape.causal_attention(q, k, v, 2).unwrap();
    for t in 0..t_len {
        for j in 0..e {
            let mean: f64 = (0..=t).map(|r| v_vals[r * e + j]).sum::<f64>() / (t + 1) as f64;
            assert!((tape.values(out)[t * e + j] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_is_bitwise_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let t_len = 6;
    let e = 8;
    let q_vals = rnd(&mut rng, t_len * e, -1.0, 1.0);
    let k_vals = rnd(&mut rng, t_len * e, -1.0, 1.0);
    let v_vals = rnd(&mut rng, t_len * e, -1.0, 1.0);
    let run = |kv: &[f64], vv: &[f64]| -> Vec<f64> {
        let mut tape = Tape::new();
        let q = tape.leaf(t_len, e, q_vals.clone()).unwrap();
        let k = tape.leaf(t_len, e, kv.to_vec()).unwrap();
        let v = tape.leaf(t_len, e, vv.to_vec()).unwrap();
        let out = tape.causal_attention(q, k, v, 2).unwrap();
        tape.values(out).to_vec()
    };
    let base = run(&k_vals, &v_vals);
    for t in 0..t_len - 1 {
        let mut kv = k_vals.clone();
        let mut vv = v_vals.clone();
        for j in 0..e {
            kv[(t + 1) * e + j] = rng.gen_range(-5.0..5.0);
            vv[(t + 1) * e + j] = rng.gen_range(-5.0..5.0);
        }
        let perturbed = run(&kv, &vv);
        for tt in 0..=t {
            for j in 0..e {
                assert_eq!(base[tt * e + j].to_bits(), perturbed[tt * e + j].to_bits());
            }
        }
    }
}

#[test]
fn attention_rejects_empty_dims() {
    let mut tape = Tape::new();
    let q = tape.leaf(2, 4, vec![0.0; 8]).unwrap();
    assert!(tape.causal_attention(q, q, q, 0).is_err());
    assert!(tape.causal_attention(q, q, q, 8).is_err()); // dk would be 0
}

#[test]
fn pooled_attention_ignores_masked_rows_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (b, s, e) = (2usize, 4usize, 6usize);
    let q_vals = rnd(&mut rng, b * e, -1.0, 1.0);
    let mut k_vals = rnd(&mut rng, b * s * e, -1.0, 1.0);
    let mut v_vals = rnd(&mut rng, b * s * e, -1.0, 1.0);
    let mask = [true, true, false, false, true, false, true, false];
    let run = |kv: &[f64], vv: &[f64]| -> Vec<f64> {
        let mut tape = Tape::new();
        let q = tape.leaf(b, e, q_vals.clone()).unwrap();
        let k = tape.leaf(b * s, e, kv.to_vec()).unwrap();
        let v = tape.leaf(b * s, e, vv.to_vec()).unwrap();
        let out = tape.pooled_attention(q, k, v, 2, s, &mask).unwrap();
        tape.values(out).to_vec()
    };
    let base = run(&k_vals, &v_vals);
    // garbage in masked rows must not move any output bit
    for (row, &keep) in mask.iter().enumerate() {
        if !keep {
            for j in 0..e {
                k_vals[row * e + j] = 1e6;
                v_vals[row * e + j] = -3e5;
            }
        }
    }
    let perturbed = run(&k_vals, &v_vals);
    for (x, y) in base.iter().zip(&perturbed) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn cross_entropy_closed_forms() {
    let mut tape = Tape::new();
    // confidently correct
    let logits = tape.leaf(1, 3, vec![20.0, 0.0, 0.0]).unwrap();
    let loss = tape.cross_entropy(logits, &[0], None).unwrap();
    assert!(tape.scalar(loss) < 1e-3);
    // uniform over 3 classes
    let logits = tape.leaf(2, 3, vec![0.5; 6]).unwrap();
    let loss = tape.cross_entropy(logits, &[2, 0], None).unwrap();
    assert!((tape.scalar(loss) - 3.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (n, c) = (16usize, 3usize);
    let logits = rnd(&mut rng, n * c, -4.0, 4.0);
    let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();

    // independent scalar oracle
    let mut expected = 0.0;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let denom: f64 = row.iter().map(|x| x.exp()).sum();
        expected -= mask[i] * (row[targets[i]].exp() / denom).ln();
    }
    expected /= mask.iter().sum::<f64>();

    let mut tape = Tape::new();
    let l = tape.leaf(n, c, logits).unwrap();
    let loss = tape.cross_entropy(l, &targets, Some(&mask)).unwrap();
    assert!((tape.scalar(loss) - expected).abs() < 1e-10);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::new();
    let logits = tape.leaf(1, 3, vec![0.0; 3]).unwrap();
    let err = tape.cross_entropy(logits, &[3], None).unwrap_err();
    assert!(matches!(err, NumericsError::TargetOutOfRange { index: 3, classes: 3 }));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(2, 3, vec![0.0; 6]).unwrap();
    let b = tape.leaf(3, 3, vec![0.0; 9]).unwrap();
    let err = tape.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(2, 3)") && msg.contains("(3, 3)"), "{msg}");
}

#[test]
fn non_finite_forward_faults_with_op_name() {
    let mut tape = Tape::new();
    let a = tape.leaf(1, 2, vec![800.0, 0.0]).unwrap();
    let err = tape.exp(a).unwrap_err();
    assert!(matches!(err, NumericsError::NonFinite { op: "exp" }));
}

#[test]
fn dropout_identity_in_eval_mode() {
    let mut tape = Tape::new();
    let a = tape.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let d = tape.dropout(a, 0.5).unwrap();
    assert_eq!(a, d);
}

#[test]
fn dropout_stream_replays_by_call_counter() {
    let run = || {
        let mut tape = Tape::training(7);
        let a = tape.leaf(1, 32, vec![1.0; 32]).unwrap();
        let d1 = tape.dropout(a, 0.4).unwrap();
        let d2 = tape.dropout(a, 0.4).unwrap();
        (tape.values(d1).to_vec(), tape.values(d2).to_vec(), tape.dropout_calls())
    };
    let (a1, a2, calls) = run();
    let (b1, b2, _) = run();
    assert_eq!(a1, b1);
    assert_eq!(a2, b2);
    assert_ne!(a1, a2); // counter advanced between calls
    assert_eq!(calls, 2);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let x = tape.leaf(4, 6, rnd(&mut rng, 24, -1.0, 1.0)).unwrap();
        let w = tape.leaf(6, 6, rnd(&mut rng, 36, -1.0, 1.0)).unwrap();
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h).unwrap();
        let att = tape.causal_attention(h, h, h, 2).unwrap();
        let loss = tape.mean_all(att).unwrap();
        tape.backward(loss).unwrap();
        (tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
    };
    let (gx1, gw1) = run();
    let (gx2, gw2) = run();
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}
