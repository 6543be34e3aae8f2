//! Central-difference verification of tape gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error floor used in the denominator.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative discrepancy between tape gradients and central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`, over every entry of every input.
///
/// `build` receives the tape and one leaf per input tensor and must return
/// the scalar output node. It is re-run for every perturbed evaluation.
pub fn finite_diff_check<F>(inputs: &[Tensor], epsilon: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(&g, l)).collect();

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for k in 0..values[t].len() {
            let orig = values[t].data()[k];
            values[t].data_mut()[k] = orig + epsilon;
            let plus = eval(&values)?;
            values[t].data_mut()[k] = orig - epsilon;
            let minus = eval(&values)?;
            values[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::{Mlp, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_nearly_exact() {
        let err = finite_diff_check(&[Tensor::scalar(3.0)], 1e-5, |g, x| g.square(x[0])).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn two_layer_mlp_with_17_parameters() {
        // 3 -> 3 -> 1 with biases: 9 + 3 + 3 + 1 = 16, plus one scalar input scale = 17
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        Mlp::new(&mut store, "m", &[3, 3, 1], true, &mut rng).unwrap();
        let mut inputs: Vec<Tensor> = store.tensors().to_vec();
        // give the biases non-zero values so every parameter matters
        for t in inputs.iter_mut() {
            for v in t.data_mut() {
                *v += 0.1;
            }
        }
        inputs.push(Tensor::scalar(0.7));
        let x = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4]).unwrap();
        assert_eq!(inputs.iter().map(Tensor::len).sum::<usize>(), 17);

        let err = finite_diff_check(&inputs, 1e-5, |g, leaves| {
            let scale = leaves[4];
            let xs = g.constant(x.clone());
            let mut h = g.matmul(xs, leaves[0])?;
            h = g.add_bias(h, leaves[1])?;
            h = g.shifted_softplus(h)?;
            h = g.matmul(h, leaves[2])?;
            h = g.add_bias(h, leaves[3])?;
            let s = g.sum(h)?;
            let sq = g.square(s)?;
            let sc = g.reshape(scale, &[])?;
            g.mul(sq, sc)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn every_op_passes() {
        let a = Tensor::matrix(3, 4, (0..12).map(|v| (v as f64 * 0.37).sin() + 0.1).collect()).unwrap();
        let b = Tensor::matrix(4, 2, (0..8).map(|v| (v as f64 * 0.91).cos()).collect()).unwrap();
        let bias = Tensor::vector(vec![0.2, -0.3]);
        let err = finite_diff_check(&[a, b, bias], 1e-5, |g, x| {
            let m = g.matmul(x[0], x[1])?;
            let m = g.add_bias(m, x[2])?;
            let t = g.transpose(m)?;
            let ls = g.log_softmax_rows(t)?;
            let n = g.normalize_rows(x[0])?;
            let gathered = g.gather_rows(n, &[0, 2, 2])?;
            let sc = g.scatter_add_rows(gathered, &[1, 0, 1], 2)?;
            let rows = g.sum_rows(sc)?;
            let sp = g.softplus(rows)?;
            let col = g.mean_over_rows(x[0])?;
            let e = g.exp(col)?;
            let l = g.ln(e)?;
            let sq = g.square(l)?;
            let rt = g.sqrt(sq)?;
            let r = g.rbf(rt, &[0.0, 0.5, 1.0], 2.0)?;
            let cat = g.concat(&[ls, t], 1)?;
            let s1 = g.mean(cat)?;
            let s2 = g.sum(sp)?;
            let s3 = g.sum(r)?;
            let s12 = g.add(s1, s2)?;
            let s123 = g.sub(s12, s3)?;
            let sq2 = g.mul(s123, s123)?;
            let den = g.exp(s3)?;
            let q = g.div(sq2, den)?;
            g.scale(q, 0.5)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linearity_of_backward() {
        // grad(a f + b h) = a grad f + b grad h
        let x = Tensor::vector(vec![0.4, -0.9, 1.3]);
        let grad_of = |wf: f64, wh: f64| {
            let mut g = Graph::new();
            let v = g.variable(x.clone());
            let f = g.square(v).unwrap();
            let f = g.sum(f).unwrap();
            let e = g.exp(v).unwrap();
            let h = g.sum(e).unwrap();
            let f = g.scale(f, wf).unwrap();
            let h = g.scale(h, wh).unwrap();
            let out = g.add(f, h).unwrap();
            g.backward(out).unwrap().wrt(&g, v)
        };
        let f = grad_of(1.0, 0.0);
        let h = grad_of(0.0, 1.0);
        let both = grad_of(2.5, -0.75);
        for k in 0..3 {
            let want = 2.5 * f.data()[k] - 0.75 * h.data()[k];
            assert!((both.data()[k] - want).abs() < 1e-12);
        }
    }
}
