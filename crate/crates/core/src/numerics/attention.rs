use crate::error::{NarvidError, Result};
use crate::numerics::graph::{Graph, Var};

/// Graph handles for one attention block's projections, each `D x D`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Scaled dot-product attention over `heads` heads.
///
/// `queries` is `[m, D]`, `keys`/`values` are `[n, D]`; the result is `[m, D]`.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    w: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let d = g.value(queries).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(NarvidError::Config(format!("{heads} heads do not divide model dim {d}")));
    }
    if g.value(keys).rows() != g.value(values).rows() {
        return Err(NarvidError::Shape("keys and values need the same row count".into()));
    }
    let head_dim = d / heads;
    let q = g.matmul(queries, w.wq)?;
    let k = g.matmul(keys, w.wk)?;
    let v = g.matmul(values, w.wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        // softmax(s / sqrt(d_h)) is softmax with temperature sqrt(d_h)
        let attn = g.softmax_rows(scores, (head_dim as f64).sqrt())?;
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, w.wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::softmax_temp;
    use crate::numerics::Tensor;

    fn identity(d: usize) -> Tensor {
        let mut t = vec![0.0; d * d];
        for i in 0..d {
            t[i * d + i] = 1.0;
        }
        Tensor::matrix(d, d, t).unwrap()
    }

    fn seeded(d: usize, salt: f64) -> Tensor {
        Tensor::matrix(d, d, (0..d * d).map(|i| ((i as f64 + salt) * 0.37).sin() * 0.5).collect()).unwrap()
    }

    fn vars(g: &mut Graph, d: usize) -> AttentionVars {
        AttentionVars {
            wq: g.param(seeded(d, 1.0)),
            wk: g.param(seeded(d, 2.0)),
            wv: g.param(seeded(d, 3.0)),
            wo: g.param(seeded(d, 4.0)),
        }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut g = Graph::new();
        let w = vars(&mut g, 4);
        let q = g.constant(Tensor::matrix(2, 4, vec![0.3, -1.0, 2.0, 0.1, 5.0, 4.0, -3.0, 0.0]).unwrap());
        let kv = g.constant(Tensor::matrix(1, 4, vec![0.2, 0.4, -0.6, 1.0]).unwrap());
        let out = multi_head_attention(&mut g, q, kv, kv, &w, 2).unwrap();
        let proj_v = g.matmul(kv, w.wv).unwrap();
        let expected = g.matmul(proj_v, w.wo).unwrap();
        for i in 0..2 {
            for (a, b) in g.value(out).row(i).iter().zip(g.value(expected).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new();
        let w = vars(&mut g, 4);
        let q = g.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let keys = g.constant(Tensor::from_rows(&[[0.5, 0.5, 0.1, 0.0]; 3]).unwrap());
        let values = g
            .constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 2.0], [0.0, 3.0, 1.0, 0.0], [2.0, 0.0, -1.0, 1.0]]).unwrap());
        let out = multi_head_attention(&mut g, q, keys, values, &w, 4).unwrap();
        let mean = g.constant(Tensor::matrix(1, 4, vec![1.0, 1.0, 0.0, 1.0]).unwrap());
        let pv = g.matmul(mean, w.wv).unwrap();
        let expected = g.matmul(pv, w.wo).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_projections_single_head() {
        let mut g = Graph::new();
        let w = AttentionVars {
            wq: g.constant(identity(2)),
            wk: g.constant(identity(2)),
            wv: g.constant(identity(2)),
            wo: g.constant(identity(2)),
        };
        let q = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let keys = g.constant(Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 1.0]).unwrap());
        let values = g.constant(Tensor::matrix(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap());
        let out = multi_head_attention(&mut g, q, keys, values, &w, 1).unwrap();
        // dots: 0.5 and 2.0, scaled by 1/sqrt(2)
        let weights = softmax_temp(&[0.5, 2.0], 2f64.sqrt()).unwrap();
        let got = g.value(out).data();
        assert!((got[0] - 10.0 * weights[0]).abs() < 1e-12);
        assert!((got[1] - 10.0 * weights[1]).abs() < 1e-12);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut g = Graph::new();
        let w = vars(&mut g, 4);
        let x = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(multi_head_attention(&mut g, x, x, x, &w, 3), Err(NarvidError::Config(_))));
    }
}
