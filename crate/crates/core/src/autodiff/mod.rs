//! Dense f64 tensors with a reverse-mode tape.
//!
//! The primitive set is what a GPT-style decoder with an entity pathway
//! needs: matmul, elementwise arithmetic, GELU, layer norm, softmax,
//! embedding gather, cosine similarity, fused causal attention, dropout and
//! softmax cross-entropy.

mod gemm;
mod graph;
mod tensor;

pub use graph::{cosine, softmax_in_place, Graph, Var, COSINE_NORM_FLOOR};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("cross_entropy: every position is masked")]
    AllMasked,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to every element of
    /// `inputs[which]`, compared against the tape gradient by relative L2 error.
    fn check_grad(inputs: &[Tensor], which: usize, f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars);
        g.backward(loss).unwrap();
        let analytic = g.grad(vars[which]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[which].numel()]);

        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let l = f(&mut g, &vars);
            g.value(l).item()
        };
        let h = 1e-5;
        let mut num = vec![0.0; inputs[which].numel()];
        for i in 0..num.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            num[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    /// Weighted sum so every output element gets a distinct upstream gradient.
    fn weighted(g: &mut Graph, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, g.value(x).shape());
        let w = g.leaf(w, false);
        let p = g.mul(x, w).unwrap();
        g.sum(p).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = rand_tensor(&mut rng, &[3, 3]);
        let mut g = Graph::new();
        let i = g.leaf(Tensor::identity(3), false);
        let mv = g.leaf(m.clone(), false);
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), &m);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[2, 3]), false);
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, AutodiffError::ShapeMismatch { op: "matmul", left: vec![2, 3], right: vec![2, 3] });
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn cosine_self_similarity_and_guard() {
        let mut g = Graph::new();
        let u = g.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 0.0, 0.0]).unwrap(), false);
        let c = g.cosine_sim(u, u).unwrap();
        assert!((g.value(c).data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(g.value(c).data()[1], 0.0);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3]), false);
        let s = g.softmax_rows(x).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2]), false);
        let gn = g.leaf(Tensor::zeros(&[2]), false);
        assert!(matches!(g.layer_norm(x, gn, gn, 0.0), Err(AutodiffError::InvalidArgument { .. })));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[3, 8]), false);
        let loss = g.cross_entropy(l, &[0, 3, 7], &[true; 3]).unwrap();
        assert!((g.value(loss).item() - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_limit_and_errors() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0] {
            let mut g = Graph::new();
            let l = g.leaf(Tensor::new(vec![1, 4], vec![0.0, margin, 0.0, 0.0]).unwrap(), false);
            let ce = g.cross_entropy(l, &[1], &[true]).unwrap();
            let loss = g.value(ce).item();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-40);
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[2, 4]), false);
        assert_eq!(g.cross_entropy(l, &[0, 1], &[false, false]).unwrap_err(), AutodiffError::AllMasked);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = rand_tensor(&mut rng, &[5, 7]);
        let targets = [0u32, 6, 3, 3, 1];
        let mask = [true, true, false, true, true];
        let mut g = Graph::new();
        let l = g.leaf(logits.clone(), false);
        let ce = g.cross_entropy(l, &targets, &mask).unwrap();
        let got = g.value(ce).item();
        let mut total = 0.0;
        let mut n = 0.0;
        for r in 0..5 {
            if !mask[r] {
                continue;
            }
            let mut z = 0.0;
            for c in 0..7 {
                z += logits.data()[r * 7 + c].exp();
            }
            total += -(logits.data()[r * 7 + targets[r] as usize].exp() / z).ln();
            n += 1.0;
        }
        assert!((got - total / n).abs() < 1e-13);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let a = g.leaf(rand_tensor(&mut rng, &[3, 4]), true);
        let b = g.leaf(rand_tensor(&mut rng, &[4, 2]), true);
        let m = g.matmul(a, b).unwrap();
        let t = g.gelu(m).unwrap();
        let s = g.sum(t).unwrap();
        g.zero_grad();
        g.backward(s).unwrap();
        let once = g.grad(a).unwrap().to_vec();
        g.backward(s).unwrap();
        for (x, y) in g.grad(a).unwrap().iter().zip(&once) {
            assert_eq!(*x, 2.0 * y);
        }
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn finite_check_names_op() {
        let mut g = Graph::new().with_finite_check(true);
        let x = g.leaf(Tensor::new(vec![1, 1], vec![1e308]).unwrap(), false);
        let err = g.scale(x, 10.0).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: "scale" });
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[100, 10], |_| 1.0), false);
        assert_eq!(g.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn gradcheck_matmul_both_orientations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ins = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[5, 4])];
        for which in 0..2 {
            let e = check_grad(&ins, which, &|g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                weighted(g, m, 1)
            });
            assert!(e < TOL, "matmul input {which}: {e}");
        }
        for which in [0, 2] {
            let e = check_grad(&ins, which, &|g, v| {
                let m = g.matmul_bt(v[0], v[2]).unwrap();
                weighted(g, m, 2)
            });
            assert!(e < TOL, "matmul_bt input {which}: {e}");
        }
    }

    #[test]
    fn gradcheck_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ins = vec![rand_tensor(&mut rng, &[4, 8]), rand_tensor(&mut rng, &[8]), rand_tensor(&mut rng, &[8])];
        for which in 0..3 {
            let e = check_grad(&ins, which, &|g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                weighted(g, y, 3)
            });
            assert!(e < TOL, "layer_norm input {which}: {e}");
        }
    }

    #[test]
    fn gradcheck_elementwise_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ins = vec![rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[5])];
        let fs: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Var>)> = vec![
            ("gelu", Box::new(|g, v| { let y = g.gelu(v[0]).unwrap(); weighted(g, y, 4) })),
            ("softmax", Box::new(|g, v| { let y = g.softmax_rows(v[0]).unwrap(); weighted(g, y, 5) })),
            ("mul", Box::new(|g, v| { let y = g.mul(v[0], v[1]).unwrap(); weighted(g, y, 6) })),
            ("sub", Box::new(|g, v| { let y = g.sub(v[0], v[1]).unwrap(); weighted(g, y, 7) })),
            ("add_row", Box::new(|g, v| { let y = g.add_row(v[0], v[2]).unwrap(); weighted(g, y, 8) })),
            ("scale_rows", Box::new(|g, v| { let y = g.scale_rows(v[0], &[0.5, 0.0, -2.0]).unwrap(); weighted(g, y, 9) })),
            ("cosine", Box::new(|g, v| { let y = g.cosine_sim(v[0], v[1]).unwrap(); weighted(g, y, 10) })),
            ("mean_relu", Box::new(|g, v| { let y = g.add_scalar(v[0], 0.1).unwrap(); let y = g.relu(y).unwrap(); g.mean(y).unwrap() })),
        ];
        for (name, f) in &fs {
            for which in 0..3 {
                let e = check_grad(&ins, which, f.as_ref());
                assert!(e < TOL, "{name} input {which}: {e}");
            }
        }
    }

    #[test]
    fn gradcheck_gather_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let ins = vec![rand_tensor(&mut rng, &[6, 4]), rand_tensor(&mut rng, &[4, 7])];
        for which in 0..2 {
            let e = check_grad(&ins, which, &|g, v| {
                let x = g.embedding_gather(v[0], &[5, 1, 1, 0]).unwrap();
                let l = g.matmul(x, v[1]).unwrap();
                g.cross_entropy(l, &[2, 6, 0, 3], &[true, true, false, true]).unwrap()
            });
            assert!(e < TOL, "gather/ce input {which}: {e}");
        }
    }

    #[test]
    fn gradcheck_attention_with_fixed_dropout_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let ins = vec![rand_tensor(&mut rng, &[8, 6]), rand_tensor(&mut rng, &[8, 6]), rand_tensor(&mut rng, &[8, 6])];
        for which in 0..3 {
            let e = check_grad(&ins, which, &|g, v| {
                // Re-seeded per evaluation so every pass sees the same mask.
                let mut drng = ChaCha8Rng::seed_from_u64(99);
                let y = g.causal_attention(v[0], v[1], v[2], 2, 4, Some((0.3, &mut drng))).unwrap();
                weighted(g, y, 11)
            });
            assert!(e < TOL, "attention input {which}: {e}");
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = rand_tensor(&mut rng, &[5, 4]);
        let k = rand_tensor(&mut rng, &[5, 4]);
        let v = rand_tensor(&mut rng, &[5, 4]);
        let run = |k: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.leaf(q.clone(), false), g.leaf(k.clone(), false), g.leaf(v.clone(), false));
            let o = g.causal_attention(qv, kv, vv, 2, 5, None).unwrap();
            g.value(o).clone()
        };
        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 0..4 {
            k2.data_mut()[3 * 4 + j] += 1.0;
            v2.data_mut()[3 * 4 + j] -= 2.0;
        }
        let pert = run(&k2, &v2);
        assert_eq!(&base.data()[..12], &pert.data()[..12]);
        assert_ne!(&base.data()[12..16], &pert.data()[12..16]);
    }
}
