//! Minimal reverse-mode autodiff over dense 2D arrays, plus Adam and
//! gradient-norm clipping.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState, ClipOutcome};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{op}: incompatible shapes {a:?} and {b:?}")]
    Shape {
        op: &'static str,
        a: [usize; 2],
        b: [usize; 2],
    },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("index {index} out of range for {len} rows/classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(1, 2));
        let y = t.softmax_lastdim(x);
        assert_eq!(t.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_cross_entropy() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(3, 8));
        let l = t.cross_entropy(x, &[0, 5, 7], None).unwrap();
        assert!((t.value(l).item() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_of_constant() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::filled(1, 6, 2.5));
        let g = t.leaf(Tensor::filled(1, 6, 1.0));
        let y = t.rms_norm(x, g, 0.0).unwrap();
        for v in &t.value(y).data {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = t.sum_all(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.leaf(Tensor::scalar(-2.0));
        let p = t.mul(x, y).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap().item(), -2.0);
        assert_eq!(g.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn non_scalar_loss_and_shape_errors() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(2, 3));
        assert!(matches!(t.backward(a), Err(NnError::NonScalarLoss([2, 3]))));
        assert_eq!(
            t.matmul(a, b),
            Err(NnError::Shape {
                op: "matmul",
                a: [2, 3],
                b: [2, 3]
            })
        );
    }

    #[test]
    fn masked_entries_get_zero_probability() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_f64(2, 3, &[0.3, 1.2, -0.4, 2.0, 0.1, 0.7]));
        let mask = [false, true, true, false, false, true];
        let m = t.masked_fill(x, &mask).unwrap();
        let y = t.softmax_lastdim(m);
        let v = t.value(y).clone();
        for (p, &masked) in v.data.iter().zip(&mask) {
            if masked {
                assert_eq!(*p, 0.0);
            }
        }
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    /// Every primitive composed into one scalar; gradients vs finite differences.
    #[test]
    fn composite_primitives_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![
            Tensor::<f64>::truncated_normal(5, 4, 0.5, &mut rng), // embedding table
            Tensor::truncated_normal(4, 6, 0.5, &mut rng),       // w1
            Tensor::truncated_normal(4, 6, 0.5, &mut rng),       // w2
            Tensor::truncated_normal(1, 4, 0.5, &mut rng),       // gain
            Tensor::truncated_normal(6, 5, 0.5, &mut rng),       // head
            Tensor::truncated_normal(3, 4, 0.5, &mut rng),       // continuous input
        ];
        let ids = [1usize, 4, 0];
        let mask = [false, true, true, false, false, true, false, false, false];
        let target = Tensor::from_f64(3, 4, &[0.1, -0.2, 0.3, 0.0, 1.0, 0.5, -0.5, 0.2, 0.0, 0.1, 0.9, -1.0]);
        let f = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var, NnError> {
            let e = t.embedding_lookup(v[0], &ids)?;
            let x = t.add(e, v[5])?;
            let x = t.rms_norm(x, v[3], 1e-6)?;
            let g = t.matmul(x, v[1])?;
            let u = t.matmul(x, v[2])?;
            let h = t.silu_gate(g, u)?;
            let logits = t.matmul(h, v[4])?;
            let ce = t.cross_entropy(logits, &[2, 0, 4], Some(&[1.0, 0.5, 2.0]))?;
            let q = t.slice(x, 0, 3, 0, 2)?;
            let k = t.slice(x, 0, 3, 2, 2)?;
            let s = t.matmul_t(q, k, false, true)?;
            let s = t.masked_fill(s, &mask)?;
            let p = t.softmax_lastdim(s);
            let o = t.matmul(p, q)?;
            let o = t.concat_cols(&[o, k])?;
            let o = t.concat_rows(&[o, e])?;
            let o = t.slice(o, 1, 3, 0, 4)?;
            let m = t.mean_abs_error(o, &target, None)?;
            let m = t.scale(m, 0.7);
            let prod = t.mul(o, o)?;
            let sq = t.sum_all(prod);
            let sq = t.scale(sq, 0.01);
            let a = t.add(ce, m)?;
            t.add(a, sq)
        };
        let r = finite_difference_check(f, &params, GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert!(r.coords_checked > 100);
    }
}
