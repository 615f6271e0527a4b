use std::cmp::Ordering;

use super::Linear;
use crate::error::Result;
use crate::tensor::{Bound, ParamStore, Tensor, Var};

/// Projections of one attention head.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

#[derive(Clone, Debug)]
pub struct SelfAttentionParams {
    pub heads: Vec<HeadProjections>,
    pub out: Linear,
}

impl SelfAttentionParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_heads: usize,
        init: &mut impl FnMut(usize, usize) -> Tensor,
    ) -> Result<Self> {
        let dh = dim / n_heads;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            heads.push(HeadProjections {
                q: Linear::register(store, &format!("{prefix}.head{h}.q"), dim, dh, init)?,
                k: Linear::register(store, &format!("{prefix}.head{h}.k"), dim, dh, init)?,
                v: Linear::register(store, &format!("{prefix}.head{h}.v"), dim, dh, init)?,
            });
        }
        let out = Linear::register(store, &format!("{prefix}.out"), dim, dim, init)?;
        Ok(Self { heads, out })
    }
}

/// Row indices of `x` sorted lexicographically by row contents.
///
/// Keys and values are gathered in this order so every reduction over the
/// query axis runs in the same sequence no matter how the queries were
/// permuted; identical rows contribute identical terms, so their relative
/// order is irrelevant.
pub fn canonical_row_order(x: &Tensor) -> Vec<usize> {
    let (n, _) = x.dims2();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        for (u, v) in x.row(a).iter().zip(x.row(b)) {
            match u.total_cmp(v) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    });
    idx
}

/// Scaled dot-product attention over all query rows, one pass per head,
/// concatenated and projected back to the model width.
pub fn multi_head_self_attention<'t>(x: Var<'t>, params: &SelfAttentionParams, bound: &Bound<'t>) -> Result<Var<'t>> {
    let order = canonical_row_order(&x.value());
    let kv_in = x.gather_rows(&order)?;
    let mut outs = Vec::with_capacity(params.heads.len());
    for h in &params.heads {
        let q = h.q.apply(x, bound)?;
        let k = h.k.apply(kv_in, bound)?;
        let v = h.v.apply(kv_in, bound)?;
        let scale = 1.0 / (q.cols() as f64).sqrt();
        let attn = q.matmul(k.transpose()?)?.scale(scale).softmax();
        outs.push(attn.matmul(v)?);
    }
    let cat = x.tape().hcat(&outs)?;
    params.out.apply(cat, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_init(seed: u64) -> impl FnMut(usize, usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        move |i, o| Tensor::new(&[i, o], (0..i * o).map(|_| rng.random_range(-0.7..0.7)).collect()).unwrap()
    }

    #[test]
    fn single_query_attends_to_itself() {
        let mut store = ParamStore::new();
        let p = SelfAttentionParams::register(&mut store, "sa", 4, 2, &mut random_init(1)).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x = tape.constant(Tensor::new(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap());
        let y = multi_head_self_attention(x, &p, &bound).unwrap();
        let vs: Vec<_> = p.heads.iter().map(|h| h.v.apply(x, &bound).unwrap()).collect();
        let want = p.out.apply(tape.hcat(&vs).unwrap(), &bound).unwrap();
        assert_eq!(y.value().data(), want.value().data());
    }

    #[test]
    fn permuting_queries_permutes_outputs_bitwise() {
        let mut store = ParamStore::new();
        let p = SelfAttentionParams::register(&mut store, "sa", 8, 2, &mut random_init(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xd: Vec<f64> = (0..6 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perm = [4usize, 2, 0, 5, 1, 3];
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x = tape.constant(Tensor::new(&[6, 8], xd).unwrap());
        let y = multi_head_self_attention(x, &p, &bound).unwrap().to_tensor();
        let xp = x.gather_rows(&perm).unwrap();
        let yp = multi_head_self_attention(xp, &p, &bound).unwrap().to_tensor();
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(yp.row(r), y.row(src));
        }
    }

    #[test]
    fn three_queries_one_head_by_hand() {
        // Identity projections, zero biases: attention = softmax(x xᵀ / √2) x.
        let mut store = ParamStore::new();
        let eye = |_: usize, _: usize| Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = SelfAttentionParams::register(&mut store, "sa", 2, 1, &mut { eye }).unwrap();
        let x = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let xv = tape.constant(Tensor::new(&[3, 2], x.iter().flatten().copied().collect()).unwrap());
        let y = multi_head_self_attention(xv, &p, &bound).unwrap().to_tensor();
        for i in 0..3 {
            let logits: Vec<f64> = (0..3).map(|j| (x[i][0] * x[j][0] + x[i][1] * x[j][1]) / 2f64.sqrt()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..3).map(|j| logits[j].exp() / z * x[j][c]).sum();
                assert!((y.at2(i, c) - want).abs() < 1e-10);
            }
        }
    }
}
