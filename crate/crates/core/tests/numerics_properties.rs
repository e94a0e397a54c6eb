//! Kernels against naive references, plus invariants of the decompositions
//! and the sampler over randomly drawn shapes.

mod common;

use common::{naive_matmul, symmetric_eigen, transpose, Mat};
use proptest::prelude::*;
use viapt::backbone::{block_forward, BackboneParams, ViTConfig};
use viapt::numerics::gradcheck::{check_graph, DEFAULT_STEP};
use viapt::numerics::kernels::{conv2d, matmul, softmax_rows, ConvGeometry};
use viapt::numerics::{svd_topk, DType, RngState, Tape, Tensor};
use viapt::prompt::pca_project;
use viapt::training::{Checkpoint, CheckpointMeta, FORMAT_VERSION};

fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

fn gaussian(seed: u64, shape: &[usize]) -> Tensor<f64> {
    RngState::new(seed).sample_gaussian(shape)
}

/// Convolution by explicit zero padding followed by a strided window sum.
fn padded_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let mut padded = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..wd {
                padded[(ch * ph + y + pad) * pw + xx + pad] = x.data()[(ch * h + y) * wd + xx];
            }
        }
    }
    let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
    let mut out = Vec::new();
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[oc];
                for ch in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += w.data()[((oc * c + ch) * kh + ky) * kw + kx]
                                * padded[(ch * ph + oy * stride + ky) * pw + ox * stride + kx];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(r in 1usize..7, k in 1usize..7, c in 1usize..7, seed in 0u64..1000) {
        let a = gaussian(seed, &[r, k]);
        let b = gaussian(seed + 1, &[k, c]);
        let ours = to_mat(&matmul(&a, &b).unwrap());
        let reference = naive_matmul(&to_mat(&a), &to_mat(&b));
        for (x, y) in ours.iter().flatten().zip(reference.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_padded_window_sum(
        c in 1usize..4, o in 1usize..4, side in 3usize..7, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
    ) {
        let x = gaussian(seed, &[c, side, side]);
        let w = gaussian(seed + 1, &[o, c, k, k]);
        let b = gaussian(seed + 2, &[o]);
        let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad).unwrap();
        let ours = conv2d(&x, &w, &b, &g);
        let reference = padded_conv(&x, &w, &b, stride, pad);
        prop_assert_eq!(ours.len(), reference.len());
        for (a, r) in ours.data().iter().zip(&reference) {
            prop_assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_agrees_with_gram_eigenvalues(p in 1usize..8, d in 1usize..8, seed in 0u64..1000) {
        let a = gaussian(seed, &[p, d]);
        let k = p.min(d);
        let svd = svd_topk(&a, k).unwrap();
        let am = to_mat(&a);
        let (eig, _) = symmetric_eigen(naive_matmul(&transpose(&am), &am));
        for (i, s) in svd.s.data().iter().enumerate() {
            prop_assert!((s * s - eig[i]).abs() < 1e-9 * (1.0 + eig[0]));
            if i > 0 {
                prop_assert!(svd.s.data()[i - 1] >= *s);
            }
        }
        // U diag(S) Vᵀ reproduces the input.
        let (u, v) = (to_mat(&svd.u), to_mat(&svd.v));
        for i in 0..p {
            for j in 0..d {
                let r: f64 = (0..k).map(|t| u[i][t] * svd.s.data()[t] * v[j][t]).sum();
                prop_assert!((r - am[i][j]).abs() < 1e-10);
            }
        }
        let vtv = naive_matmul(&transpose(&v), &v);
        for (i, row) in vtv.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((x - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pca_basis_is_orthonormal_and_masks_beyond_rank(p in 1usize..7, d in 2usize..7, seed in 0u64..1000) {
        let z = gaussian(seed, &[p, d]);
        let m = d;
        let proj = pca_project(&z, m).unwrap();
        let b = to_mat(&proj.basis);
        let btb = naive_matmul(&transpose(&b), &b);
        for (i, row) in btb.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((x - expected).abs() < 1e-10);
            }
        }
        prop_assert!(proj.rank <= p.saturating_sub(1).min(d));
        for i in 0..p {
            for j in proj.rank..m {
                prop_assert_eq!(proj.coordinates.at(i, j), 0.0);
            }
        }
        // With every axis kept the projection is lossless.
        let back = proj.reconstruct().unwrap();
        for (x, y) in back.data().iter().zip(z.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        prop_assert!((proj.retained_variance - proj.total_variance).abs() < 1e-9 * (1.0 + proj.total_variance));
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..5, c in 1usize..9, seed in 0u64..1000) {
        let x = gaussian(seed, &[r, c]).map(|v| 30.0 * v);
        let s = softmax_rows(&x);
        for i in 0..r {
            let row = s.row_slice(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_counters_are_addressable(seed in 0u64..u64::MAX, skip in 0u64..64, n in 1usize..16) {
        let mut walked = RngState::new(seed);
        for _ in 0..skip {
            walked.next_normal();
        }
        let a: Tensor<f64> = walked.sample_gaussian(&[n]);
        let b: Tensor<f64> = RngState::at(seed, skip).sample_gaussian(&[n]);
        prop_assert!(a.bitwise_eq(&b));
        let s1: Tensor<f64> = RngState::new(seed).substream(3).sample_gaussian(&[n]);
        let s2: Tensor<f64> = RngState::new(seed).substream(3).sample_gaussian(&[n]);
        prop_assert!(s1.bitwise_eq(&s2));
    }
}

#[test]
fn checkpoint_round_trip_keeps_every_bit() {
    let ckpt = Checkpoint::<f64> {
        meta: CheckpointMeta {
            kind: "probe".into(),
            format_version: FORMAT_VERSION,
            dtype: DType::F64,
            epoch: 3,
            step: 17,
            rng: RngState::at(9, 40),
            config: serde_json::json!({"note": "round trip"}),
        },
        tensors: vec![
            ("w".into(), gaussian(1, &[3, 4])),
            ("empty".into(), Tensor::zeros(&[0, 4])),
            ("tiny".into(), Tensor::full(&[2], f64::MIN_POSITIVE)),
        ],
    };
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for ((n1, t1), (n2, t2)) in ckpt.tensors.iter().zip(&back.tensors) {
        assert_eq!(n1, n2);
        assert!(t1.bitwise_eq(t2));
    }
}

#[test]
fn transformer_block_gradients_match_finite_differences() {
    let cfg = ViTConfig { dim: 8, heads: 2, mlp_ratio: 2, image_size: 8, patch_size: 4, ..ViTConfig::desk() };
    let mut rng = RngState::new(12);
    let bb = BackboneParams::<f64>::init(&cfg, &mut rng).unwrap();
    let layer = bb.layers[0].clone();
    let x = gaussian(13, &[6, 8]);
    let weights = gaussian(14, &[6, 8]);
    let mut inputs = vec![x];
    inputs.extend(layer.named().into_iter().map(|(_, t)| t.clone()));
    let errors = check_graph(&inputs, DEFAULT_STEP, |tape, vars| {
        let mut l = layer.bind(tape, false);
        let names = layer.named();
        for ((name, _), v) in names.iter().zip(&vars[1..]) {
            match *name {
                "ln1_gamma" => l.ln1_gamma = *v,
                "ln1_beta" => l.ln1_beta = *v,
                "w_q" => l.w_q = *v,
                "b_q" => l.b_q = *v,
                "w_k" => l.w_k = *v,
                "b_k" => l.b_k = *v,
                "w_v" => l.w_v = *v,
                "b_v" => l.b_v = *v,
                "w_o" => l.w_o = *v,
                "b_o" => l.b_o = *v,
                "ln2_gamma" => l.ln2_gamma = *v,
                "ln2_beta" => l.ln2_beta = *v,
                "w_fc1" => l.w_fc1 = *v,
                "b_fc1" => l.b_fc1 = *v,
                "w_fc2" => l.w_fc2 = *v,
                "b_fc2" => l.b_fc2 = *v,
                other => panic!("unexpected tensor {other}"),
            }
        }
        let out = block_forward(tape, vars[0], &l, cfg.heads)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    })
    .unwrap();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    assert!(worst < 1e-6, "worst relative error {worst:.3e}: {errors:?}");
}

#[test]
fn block_is_equivariant_to_token_order() {
    let cfg = ViTConfig { dim: 8, heads: 2, mlp_ratio: 2, image_size: 8, patch_size: 4, ..ViTConfig::desk() };
    let mut rng = RngState::new(21);
    let bb = BackboneParams::<f64>::init(&cfg, &mut rng).unwrap();
    let x = gaussian(22, &[5, 8]);
    let order = [3usize, 0, 4, 1, 2];
    let permuted = Tensor::from_rows(&order.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let run = |input: &Tensor<f64>| {
        let mut tape = Tape::new();
        let l = bb.layers[0].bind(&mut tape, false);
        let v = tape.constant(input.clone());
        let out = block_forward(&mut tape, v, &l, cfg.heads).unwrap();
        tape.value(out).clone()
    };
    let (a, b) = (run(&x), run(&permuted));
    for (row, &src) in order.iter().enumerate() {
        for (u, v) in b.row_slice(row).iter().zip(a.row_slice(src)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
