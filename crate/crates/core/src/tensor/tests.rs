//! Engine tests: frozen primitive values, then backward() against central
//! finite differences for every primitive, alone and in chains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{positional_table, Graph, Mode, NodeId, RunningStats, Tensor};
use crate::error::CoreError;

/// Finite-difference step. Central differences with f64 leave truncation and
/// roundoff both well under the comparison tolerance for O(1) values.
const FD_STEP: f64 = 1e-5;
/// Maximum allowed relative error between analytic and numeric gradients,
/// with the denominator floored at 1e-6 so near-zero gradients compare
/// absolutely at 1e-10.
const GRAD_RTOL: f64 = 1e-4;

const SEED: u64 = 7;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

fn eval_loss(mode: Mode, params: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new(mode, SEED);
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids);
    g.data(loss).item()
}

/// The gradient oracle: rebuilds the graph with each parameter element
/// perturbed by +-FD_STEP and compares the central difference against
/// backward(). Dropout masks depend only on the graph seed and op order, so
/// perturbed evaluations see identical masks.
fn check_grads(mode: Mode, params: &[Tensor], build: &Build) {
    let mut g = Graph::new(mode, SEED);
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss).unwrap();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(ids[pi])
            .unwrap_or_else(|| panic!("param {pi} received no gradient"));
        for j in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[j] += FD_STEP;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[j] -= FD_STEP;
            let numeric =
                (eval_loss(mode, &plus, build) - eval_loss(mode, &minus, build)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < GRAD_RTOL,
                "param {pi} elem {j}: analytic {a:.9e}, numeric {numeric:.9e}, rel {rel:.3e}"
            );
        }
    }
}

// ── frozen forward values ──

#[test]
fn relu_frozen_values() {
    let mut g = Graph::new(Mode::Eval, SEED);
    let x = g.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.data(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn maxpool_frozen_values() {
    let mut g = Graph::new(Mode::Eval, SEED);
    let x = g
        .leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2_l(x).unwrap();
    assert_eq!(g.data(y).shape(), &[1, 1, 1, 2]);
    assert_eq!(g.data(y).data(), &[3.0, 4.0]);
}

#[test]
fn maxpool_tie_routes_gradient_to_first_row() {
    let mut g = Graph::new(Mode::Train, SEED);
    let x = g.param(Tensor::from_vec(&[1, 1, 2, 1], vec![5.0, 5.0]).unwrap());
    let y = g.maxpool2_l(x).unwrap();
    let loss = g.mean_all(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn softmax_frozen_values() {
    let mut g = Graph::new(Mode::Eval, SEED);
    let x = g.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.data(y).data(), &[0.5, 0.5]);
}

#[test]
fn upsample_frozen_values() {
    // Hand-evaluated half-pixel bilinear doubling of the column [0, 1].
    let mut g = Graph::new(Mode::Eval, SEED);
    let x = g.leaf(Tensor::from_vec(&[1, 1, 2, 1], vec![0.0, 1.0]).unwrap());
    let y = g.upsample2_l(x).unwrap();
    let got = g.data(y).data();
    let want = [0.0, 0.25, 0.75, 1.0];
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-15, "got {got:?} want {want:?}");
    }
}

#[test]
fn mse_frozen_value() {
    let mut g = Graph::new(Mode::Eval, SEED);
    let p = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let t = g.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
    let l = g.mse(p, t).unwrap();
    assert!((g.data(l).item() - 2.5).abs() < 1e-15);
}

#[test]
fn positional_table_matches_reference_formula() {
    let d = 4;
    let table = positional_table(3, d);
    let omega1 = 10000f64.powf(-2.0 / d as f64);
    for t in 0..3 {
        let tf = t as f64;
        let row = &table[t * d..(t + 1) * d];
        let want = [tf.sin(), tf.cos(), (tf * omega1).sin(), (tf * omega1).cos()];
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn positional_table_odd_width_ends_with_sine() {
    let d = 5;
    let table = positional_table(2, d);
    // Last feature of an odd width pairs with no cosine: k=4 -> sin(t * w_2).
    let omega2 = 10000f64.powf(-4.0 / d as f64);
    assert!((table[d + 4] - (1.0 * omega2).sin()).abs() < 1e-15);
}

// ── gradient checks per primitive ──

#[test]
fn grad_conv3x3_same_padding() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let params = vec![
        rand_tensor(&[2, 2, 4, 3], &mut rng),
        rand_tensor(&[3, 2, 3, 3], &mut rng),
        rand_tensor(&[3], &mut rng),
    ];
    check_grads(Mode::Train, &params, &|g, ids| {
        let c = g.conv2d(ids[0], ids[1], ids[2], (1, 1)).unwrap();
        let r = g.relu(c);
        let sq = g.mul(r, r).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_conv_full_width_kernel() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let params = vec![
        rand_tensor(&[1, 2, 4, 3], &mut rng),
        rand_tensor(&[2, 2, 1, 3], &mut rng),
        rand_tensor(&[2], &mut rng),
    ];
    check_grads(Mode::Train, &params, &|g, ids| {
        let c = g.conv2d(ids[0], ids[1], ids[2], (0, 0)).unwrap();
        let sq = g.mul(c, c).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_batchnorm_train_mode() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let params = vec![
        rand_tensor(&[2, 3, 4, 2], &mut rng),
        rand_tensor(&[3], &mut rng),
        rand_tensor(&[3], &mut rng),
    ];
    check_grads(Mode::Train, &params, &|g, ids| {
        let mut running = RunningStats::new(3);
        let y = g
            .batchnorm2d(ids[0], ids[1], ids[2], &mut running, 1e-5, 0.1)
            .unwrap();
        let sq = g.mul(y, y).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_batchnorm_eval_mode() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let params = vec![
        rand_tensor(&[2, 2, 4, 2], &mut rng),
        rand_tensor(&[2], &mut rng),
        rand_tensor(&[2], &mut rng),
    ];
    check_grads(Mode::Eval, &params, &|g, ids| {
        let mut running = RunningStats {
            mean: vec![0.3, -0.2],
            var: vec![1.5, 0.7],
        };
        let y = g
            .batchnorm2d(ids[0], ids[1], ids[2], &mut running, 1e-5, 0.1)
            .unwrap();
        let sq = g.mul(y, y).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_maxpool_and_upsample() {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let params = vec![rand_tensor(&[2, 2, 6, 3], &mut rng)];
    check_grads(Mode::Train, &params, &|g, ids| {
        let p = g.maxpool2_l(ids[0]).unwrap();
        let u = g.upsample2_l(p).unwrap();
        let sq = g.mul(u, u).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_linear_with_bias() {
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let params = vec![
        rand_tensor(&[2, 3, 4], &mut rng),
        rand_tensor(&[4, 5], &mut rng),
        rand_tensor(&[5], &mut rng),
    ];
    check_grads(Mode::Train, &params, &|g, ids| {
        let y = g.linear(ids[0], ids[1], Some(ids[2])).unwrap();
        let sq = g.mul(y, y).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_attention_kernel_chain() {
    // posenc -> projections -> scaled scores -> softmax -> dropout -> value mix.
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let params = vec![
        rand_tensor(&[1, 3, 4], &mut rng),
        rand_tensor(&[4, 4], &mut rng),
        rand_tensor(&[4, 4], &mut rng),
        rand_tensor(&[4, 4], &mut rng),
        rand_tensor(&[4, 4], &mut rng),
    ];
    check_grads(Mode::Train, &params, &|g, ids| {
        let t = g.add_positional_encoding(ids[0]).unwrap();
        let q = g.linear(t, ids[1], None).unwrap();
        let k = g.linear(t, ids[2], None).unwrap();
        let v = g.linear(t, ids[3], None).unwrap();
        let kt = g.transpose_last2(k).unwrap();
        let scores = g.bmm(q, kt).unwrap();
        let scaled = g.scale(scores, 0.5);
        let probs = g.softmax_lastdim(scaled).unwrap();
        let probs = g.dropout(probs, 0.1).unwrap();
        let mixed = g.bmm(probs, v).unwrap();
        let out = g.linear(mixed, ids[4], None).unwrap();
        let res = g.add(out, ids[0]).unwrap();
        let sq = g.mul(res, res).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_concat_channels() {
    let mut rng = ChaCha20Rng::seed_from_u64(18);
    let params = vec![
        rand_tensor(&[2, 2, 2, 3], &mut rng),
        rand_tensor(&[2, 3, 2, 3], &mut rng),
    ];
    check_grads(Mode::Train, &params, &|g, ids| {
        let c = g.concat_channels(ids[0], ids[1]).unwrap();
        let sq = g.mul(c, c).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_slice_and_concat_lastdim() {
    let mut rng = ChaCha20Rng::seed_from_u64(19);
    let params = vec![rand_tensor(&[2, 3, 6], &mut rng)];
    check_grads(Mode::Train, &params, &|g, ids| {
        let a = g.slice_lastdim(ids[0], 0, 3).unwrap();
        let b = g.slice_lastdim(ids[0], 3, 3).unwrap();
        let swapped = g.concat_lastdim(&[b, a]).unwrap();
        let sq = g.mul(swapped, swapped).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_permute_and_reshape() {
    let mut rng = ChaCha20Rng::seed_from_u64(20);
    let params = vec![rand_tensor(&[2, 3, 4, 2], &mut rng)];
    check_grads(Mode::Train, &params, &|g, ids| {
        let p = g.permute(ids[0], &[0, 3, 2, 1]).unwrap();
        let r = g.reshape(p, &[2, 24]).unwrap();
        let sq = g.mul(r, r).unwrap();
        g.mean_all(sq)
    });
}

#[test]
fn grad_dropout_with_shared_input() {
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let params = vec![rand_tensor(&[3, 5], &mut rng)];
    check_grads(Mode::Train, &params, &|g, ids| {
        let d = g.dropout(ids[0], 0.3).unwrap();
        let prod = g.mul(d, ids[0]).unwrap();
        g.mean_all(prod)
    });
}

#[test]
fn grad_sub_scale_accumulation() {
    let mut rng = ChaCha20Rng::seed_from_u64(22);
    let params = vec![rand_tensor(&[4], &mut rng), rand_tensor(&[4], &mut rng)];
    check_grads(Mode::Train, &params, &|g, ids| {
        let d = g.sub(ids[0], ids[1]).unwrap();
        let s = g.scale(d, 3.0);
        let sq = g.mul(s, s).unwrap();
        g.mean_all(sq)
    });
}

// ── behavioral invariants ──

#[test]
fn batchnorm_train_normalizes_to_unit_stats() {
    // Raw variance well above eps so the eps bias stays under 1e-6.
    let mut rng = ChaCha20Rng::seed_from_u64(23);
    let n: usize = 2 * 3 * 8 * 4;
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let mut g = Graph::new(Mode::Train, SEED);
    let x = g.leaf(Tensor::from_vec(&[2, 3, 8, 4], data).unwrap());
    let gamma = g.leaf(Tensor::from_vec(&[3], vec![1.0; 3]).unwrap());
    let beta = g.leaf(Tensor::from_vec(&[3], vec![0.0; 3]).unwrap());
    let mut running = RunningStats::new(3);
    let y = g
        .batchnorm2d(x, gamma, beta, &mut running, 1e-5, 0.1)
        .unwrap();
    let out = g.data(y).data();
    let plane = 8 * 4;
    let count = (2 * plane) as f64;
    for ch in 0..3 {
        let mut mean = 0.0;
        let mut var = 0.0;
        for nb in 0..2 {
            let base = (nb * 3 + ch) * plane;
            for v in &out[base..base + plane] {
                mean += v;
            }
        }
        mean /= count;
        for nb in 0..2 {
            let base = (nb * 3 + ch) * plane;
            for v in &out[base..base + plane] {
                var += (v - mean) * (v - mean);
            }
        }
        var /= count;
        assert!(mean.abs() < 1e-9, "channel {ch} mean {mean:.3e}");
        assert!((var - 1.0).abs() < 1e-6, "channel {ch} var {var}");
    }
}

#[test]
fn batchnorm_running_stats_update_and_drive_eval() {
    let data = vec![1.0, 3.0, 5.0, 7.0];
    let x_t = Tensor::from_vec(&[1, 1, 4, 1], data).unwrap();
    let ones = Tensor::from_vec(&[1], vec![1.0]).unwrap();
    let zeros = Tensor::from_vec(&[1], vec![0.0]).unwrap();
    let mut running = RunningStats::new(1);

    let mut g = Graph::new(Mode::Train, SEED);
    let x = g.leaf(x_t.clone());
    let gamma = g.leaf(ones.clone());
    let beta = g.leaf(zeros.clone());
    g.batchnorm2d(x, gamma, beta, &mut running, 1e-5, 0.1)
        .unwrap();
    // batch mean 4, biased var 5, unbiased var 20/3.
    assert!((running.mean[0] - 0.4).abs() < 1e-12);
    assert!((running.var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);

    let mut ge = Graph::new(Mode::Eval, SEED);
    let xe = ge.leaf(x_t);
    let gammae = ge.leaf(ones);
    let betae = ge.leaf(zeros);
    let ye = ge
        .batchnorm2d(xe, gammae, betae, &mut running, 1e-5, 0.1)
        .unwrap();
    let want = (1.0 - running.mean[0]) / (running.var[0] + 1e-5).sqrt();
    assert!((ge.data(ye).data()[0] - want).abs() < 1e-12);
}

#[test]
fn dropout_eval_is_identity_node() {
    let mut g = Graph::new(Mode::Eval, SEED);
    let x = g.leaf(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(x, y);
}

#[test]
fn dropout_train_scales_kept_elements() {
    let mut g = Graph::new(Mode::Train, SEED);
    let x = g.leaf(Tensor::from_vec(&[1000], vec![1.0; 1000]).unwrap());
    let y = g.dropout(x, 0.25).unwrap();
    let scale = 1.0 / 0.75;
    let mut dropped = 0;
    for v in g.data(y).data() {
        assert!(*v == 0.0 || (*v - scale).abs() < 1e-15);
        if *v == 0.0 {
            dropped += 1;
        }
    }
    // 1000 draws at p=0.25: far from both extremes.
    assert!(dropped > 150 && dropped < 400, "dropped {dropped}");
}

#[test]
fn dropout_masks_are_seed_deterministic() {
    let run = |seed| {
        let mut g = Graph::new(Mode::Train, seed);
        let x = g.leaf(Tensor::from_vec(&[64], vec![1.0; 64]).unwrap());
        let y = g.dropout(x, 0.5).unwrap();
        g.data(y).data().to_vec()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn full_chain_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut g = Graph::new(Mode::Train, 9);
        let x = g.param(rand_tensor(&[2, 2, 8, 3], &mut rng));
        let w = g.param(rand_tensor(&[4, 2, 3, 3], &mut rng));
        let b = g.param(rand_tensor(&[4], &mut rng));
        let gamma = g.param(rand_tensor(&[4], &mut rng));
        let beta = g.param(rand_tensor(&[4], &mut rng));
        let mut running = RunningStats::new(4);
        let c = g.conv2d(x, w, b, (1, 1)).unwrap();
        let bn = g
            .batchnorm2d(c, gamma, beta, &mut running, 1e-5, 0.1)
            .unwrap();
        let r = g.relu(bn);
        let d = g.dropout(r, 0.2).unwrap();
        let p = g.maxpool2_l(d).unwrap();
        let loss = g.mean_all(p);
        let grads = g.backward(loss).unwrap();
        let mut sig = g.data(loss).data().to_vec();
        sig.extend_from_slice(grads.get(w).unwrap().data());
        sig
    };
    assert_eq!(run(), run());
}

#[test]
fn pool_then_upsample_restores_length() {
    let mut rng = ChaCha20Rng::seed_from_u64(32);
    let mut g = Graph::new(Mode::Eval, SEED);
    let x = g.leaf(rand_tensor(&[1, 2, 10, 3], &mut rng));
    let p = g.maxpool2_l(x).unwrap();
    let u = g.upsample2_l(p).unwrap();
    assert_eq!(g.data(u).shape(), g.data(x).shape());
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut rng = ChaCha20Rng::seed_from_u64(33);
    let mut g = Graph::new(Mode::Eval, SEED);
    let x = g.leaf(rand_tensor(&[4, 7], &mut rng));
    let s = g.softmax_lastdim(x).unwrap();
    for row in g.data(s).data().chunks(7) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| *v > 0.0));
    }
}

#[test]
fn shape_mismatch_errors_name_the_primitive() {
    let mut g = Graph::new(Mode::Eval, SEED);
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[3, 2]));
    match g.add(a, b) {
        Err(CoreError::ShapeMismatch { op, .. }) => assert_eq!(op, "add"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let x = g.leaf(Tensor::zeros(&[1, 2, 4, 3]));
    let w = g.leaf(Tensor::zeros(&[2, 5, 3, 3]));
    let bias = g.leaf(Tensor::zeros(&[2]));
    match g.conv2d(x, w, bias, (1, 1)) {
        Err(CoreError::ShapeMismatch { op, .. }) => assert_eq!(op, "conv2d"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn backward_rejects_nonscalar_loss() {
    let mut g = Graph::new(Mode::Train, SEED);
    let x = g.param(Tensor::zeros(&[2, 2]));
    let y = g.relu(x);
    assert!(matches!(
        g.backward(y),
        Err(CoreError::ShapeMismatch { op: "backward", .. })
    ));
}

#[test]
fn odd_length_pooling_is_rejected() {
    let mut g = Graph::new(Mode::Eval, SEED);
    let x = g.leaf(Tensor::zeros(&[1, 1, 5, 2]));
    assert!(g.maxpool2_l(x).is_err());
}
