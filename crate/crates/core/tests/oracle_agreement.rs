//! Kernels against the brute-force oracles on random inputs.

mod common;

use common::oracles::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spaco_core::gldm::MultiHeadAttention;
use spaco_core::recognition::cross_entropy;
use spaco_core::tensor::{
    activation, bilinear_resize, conv2d, layer_norm, matmul, max_pool2d, nearest_resize_labels,
    softmax_lastdim, Activation,
};
use spaco_core::{acf, aggregate, argmax_labels, LabelMap, Parameter, ScoreTensor, Tensor};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Scores on a 1/8 grid so ties are common.
fn coarse_scores() -> impl Strategy<Value = (ScoreTensor, usize)> {
    (prop_oneof![Just(2usize), Just(4)], 1usize..=4, 1usize..=4, 1usize..=8).prop_flat_map(|(k, bh, bw, l)| {
        let (h, w) = (k * bh, k * bw);
        prop::collection::vec(0u8..8, h * w * l).prop_map(move |v| {
            let data = v.into_iter().map(|x| x as f64 / 8.0).collect();
            (ScoreTensor::new(Tensor::new(vec![h, w, l], data).unwrap()).unwrap(), k)
        })
    })
}

fn label_map(max_side: usize, max_l: usize) -> impl Strategy<Value = LabelMap> {
    (1..=max_side, 1..=max_side, 1..=max_l).prop_flat_map(|(h, w, l)| {
        prop::collection::vec(0..l as u16, h * w).prop_map(move |d| LabelMap::new(h, w, l, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn acf_matches_oracle((s, k) in coarse_scores()) {
        prop_assert_eq!(acf(&s, k).unwrap().tensor().data().to_vec(), oracle_acf(&s, k));
    }

    #[test]
    fn argmax_labels_match_oracle((s, _) in coarse_scores()) {
        let got = argmax_labels(&s);
        prop_assert_eq!(got.data().to_vec(), oracle_argmax_labels(s.tensor().data(), s.num_classes()));
    }

    #[test]
    fn aggregate_matches_oracle(labels in label_map(10, 8), c in 1usize..12, seed in any::<u64>()) {
        let grid = spaco_core::FeatureGrid::new(tensor(&[labels.height(), labels.width(), c], seed), 16).unwrap();
        let seq = aggregate(&grid, &labels, labels.num_classes()).unwrap();
        let (rows, _) = oracle_aggregate(&grid, &labels, labels.num_classes());
        for (o, row) in rows.iter().enumerate() {
            prop_assert_eq!(seq.row(o), row.as_slice());
        }
    }

    #[test]
    fn matmul_matches_oracle(n in 1usize..8, m in 1usize..8, p in 1usize..8, seed in any::<u64>()) {
        let a = tensor(&[n, m], seed);
        let b = tensor(&[m, p], seed ^ 1);
        let got = matmul(&a, &b).unwrap();
        prop_assert!(close(got.data(), &oracle_matmul(a.data(), b.data(), n, m, p), 1e-12));
    }

    #[test]
    fn conv_matches_oracle(
        h in 1usize..9, w in 1usize..9, cin in 1usize..4, cout in 1usize..4,
        k in prop_oneof![Just(1usize), Just(3)], stride in 1usize..3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let x = tensor(&[h, w, cin], seed);
        let wt = tensor(&[k, k, cin, cout], seed ^ 2);
        let b = tensor(&[cout], seed ^ 3);
        let got = conv2d(&x, &wt, &b, stride, pad).unwrap();
        let (want, oh, ow) = oracle_conv(&x, &wt, b.data(), stride, pad);
        prop_assert_eq!(got.shape(), &[oh, ow, cout]);
        prop_assert!(close(got.data(), &want, 1e-12));
    }

    #[test]
    fn max_pool_matches_oracle(h in 2usize..10, w in 2usize..10, c in 1usize..4, k in 1usize..3, s in 1usize..3, seed in any::<u64>()) {
        let x = tensor(&[h, w, c], seed);
        prop_assert_eq!(max_pool2d(&x, k, s).unwrap().data().to_vec(), oracle_max_pool(&x, k, s));
    }

    #[test]
    fn bilinear_matches_oracle(h in 1usize..8, w in 1usize..8, oh in 1usize..12, ow in 1usize..12, seed in any::<u64>()) {
        let x = tensor(&[h, w, 2], seed);
        let got = bilinear_resize(&x, oh, ow).unwrap();
        prop_assert!(close(got.data(), &oracle_bilinear(&x, oh, ow), 1e-14));
    }

    #[test]
    fn nearest_matches_oracle(labels in label_map(9, 5), oh in 1usize..14, ow in 1usize..14) {
        let got = nearest_resize_labels(&labels, oh, ow).unwrap();
        prop_assert_eq!(got.data().to_vec(), oracle_nearest_labels(&labels, oh, ow));
    }

    #[test]
    fn softmax_matches_oracle(z in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let got = softmax_lastdim(&Tensor::new(vec![1, z.len()], z.clone()).unwrap());
        prop_assert!(close(got.data(), &oracle_softmax(&z), 1e-13));
    }

    #[test]
    fn cross_entropy_matches_oracle(z in prop::collection::vec(-30.0f64..30.0, 2..12), pick in any::<prop::sample::Index>()) {
        let y = pick.index(z.len());
        let (loss, grad) = cross_entropy(&Tensor::vector(z.clone()), y).unwrap();
        prop_assert!((loss - oracle_loss(&z, y)).abs() <= 1e-12 * (1.0 + loss.abs()));
        let mut want = oracle_softmax(&z);
        want[y] -= 1.0;
        prop_assert!(close(grad.data(), &want, 1e-12));
    }

    #[test]
    fn attention_matches_oracle(heads in 1usize..4, d in 1usize..5, n in 1usize..7, seed in any::<u64>()) {
        let c = heads * d;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let msa = MultiHeadAttention::new(c, heads, &mut r).unwrap();
        let x = Tensor::randn(&[n, c], 1.0, &mut r);
        let (y, cache) = msa.forward(&x).unwrap();
        let mut concat = vec![0.0; n * c];
        for h in 0..heads {
            let cols = |p: &Parameter| head_columns(p.value.data(), c, h, d);
            let (out, attn) = oracle_attention(x.data(), n, c, &cols(&msa.query), &cols(&msa.key), &cols(&msa.value), d);
            prop_assert!(close(cache.attention()[h].data(), &attn, 1e-12));
            for i in 0..n {
                concat[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(&out[i * d..(i + 1) * d]);
            }
        }
        let mut want = oracle_matmul(&concat, msa.output.weight.value.data(), n, c, c);
        for row in want.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(msa.output.bias.value.data()) {
                *v += b;
            }
        }
        prop_assert!(close(y.data(), &want, 1e-11));
    }

    #[test]
    fn layer_norm_matches_oracle(n in 1usize..6, c in 2usize..10, seed in any::<u64>()) {
        let x = tensor(&[n, c], seed);
        let gamma = Parameter::new(tensor(&[c], seed ^ 4));
        let beta = Parameter::new(tensor(&[c], seed ^ 5));
        let (y, _) = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let want = oracle_layer_norm(x.data(), c, gamma.value.data(), beta.value.data(), 1e-5);
        prop_assert!(close(y.data(), &want, 1e-12));
    }

    #[test]
    fn gelu_matches_oracle(v in prop::collection::vec(-8.0f64..8.0, 1..16)) {
        let got = activation(&Tensor::vector(v.clone()), Activation::Gelu);
        let want: Vec<f64> = v.iter().map(|&x| oracle_gelu(x)).collect();
        prop_assert!(close(got.data(), &want, 1e-14));
    }
}
