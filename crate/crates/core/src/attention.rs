//! Dense reference attention, a masked dense oracle and the block-sparse
//! online-softmax kernel.
//!
//! The block-sparse kernel walks query blocks, and for each one visits only
//! the key blocks its [`BlockMask`] row allows. Per query row it keeps a
//! running maximum, a running denominator and a running weighted sum of value
//! rows; when a new key block raises the maximum, the accumulated terms are
//! rescaled by `exp(old_max - new_max)`. The full score matrix is never
//! materialised.
//!
//! Scores and exponentials are `f32`; denominators and weighted sums
//! accumulate in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Default number of tokens per block on both the query and key axes.
pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// Query, key and value matrices of one head, all `n x d`.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    scale: f32,
}

impl AttentionInputs {
    /// Validates shapes and finiteness; `scale` is set to `1/sqrt(d)`.
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!(
                "Q {:?}, K {:?}, V {:?} must share n and d",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if q.cols() == 0 {
            return Err(Error::ShapeMismatch("head dimension must be >= 1".into()));
        }
        for (name, m) in [("Q", &q), ("K", &k), ("V", &v)] {
            if !m.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        let scale = 1.0 / (q.cols() as f32).sqrt();
        Ok(Self { q, k, v, scale })
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Sequence length.
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }
}

/// Boolean grid over (query block, key block) pairs; `true` means computed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    block_size: usize,
    n_tokens: usize,
    n_blocks: usize,
    allowed: Vec<bool>,
}

impl BlockMask {
    fn blocks_for(n_tokens: usize, block_size: usize) -> Result<usize> {
        if block_size == 0 {
            return Err(Error::InvalidParameter {
                field: "block_size",
                reason: "must be >= 1".into(),
            });
        }
        Ok(n_tokens.div_ceil(block_size))
    }

    pub fn full(n_tokens: usize, block_size: usize) -> Result<Self> {
        Self::filled(n_tokens, block_size, true)
    }

    pub fn empty(n_tokens: usize, block_size: usize) -> Result<Self> {
        Self::filled(n_tokens, block_size, false)
    }

    fn filled(n_tokens: usize, block_size: usize, value: bool) -> Result<Self> {
        let n_blocks = Self::blocks_for(n_tokens, block_size)?;
        Ok(Self {
            block_size,
            n_tokens,
            n_blocks,
            allowed: vec![value; n_blocks * n_blocks],
        })
    }

    pub fn from_fn(
        n_tokens: usize,
        block_size: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut mask = Self::empty(n_tokens, block_size)?;
        for i in 0..mask.n_blocks {
            for j in 0..mask.n_blocks {
                mask.allowed[i * mask.n_blocks + j] = f(i, j);
            }
        }
        Ok(mask)
    }

    /// Builds a mask from a row-major `n_blocks x n_blocks` grid.
    pub fn from_bits(n_tokens: usize, block_size: usize, allowed: Vec<bool>) -> Result<Self> {
        let n_blocks = Self::blocks_for(n_tokens, block_size)?;
        if allowed.len() != n_blocks * n_blocks {
            return Err(Error::ShapeMismatch(format!(
                "{} mask bits for a {n_blocks}x{n_blocks} block grid",
                allowed.len()
            )));
        }
        Ok(Self {
            block_size,
            n_tokens,
            n_blocks,
            allowed,
        })
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    #[inline]
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    #[inline]
    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    #[inline]
    pub fn is_allowed(&self, q_block: usize, k_block: usize) -> bool {
        self.allowed[q_block * self.n_blocks + k_block]
    }

    #[inline]
    pub fn set(&mut self, q_block: usize, k_block: usize, value: bool) {
        self.allowed[q_block * self.n_blocks + k_block] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.allowed
    }

    pub fn row(&self, q_block: usize) -> &[bool] {
        &self.allowed[q_block * self.n_blocks..(q_block + 1) * self.n_blocks]
    }

    #[inline]
    pub fn block_of(&self, token: usize) -> usize {
        token / self.block_size
    }

    /// Token range covered by block `b`.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let lo = b * self.block_size;
        lo..(lo + self.block_size).min(self.n_tokens)
    }

    pub fn total_blocks(&self) -> usize {
        self.allowed.len()
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Fails with `EmptyQueryRow` if any query block allows no key block.
    pub fn check_rows(&self) -> Result<()> {
        for b in 0..self.n_blocks {
            if !self.row(b).iter().any(|&a| a) {
                return Err(Error::EmptyQueryRow { block: b });
            }
        }
        Ok(())
    }

    /// True when every allowed block of `self` is also allowed in `other`.
    pub fn is_subset_of(&self, other: &BlockMask) -> bool {
        self.allowed.len() == other.allowed.len()
            && self.allowed.iter().zip(&other.allowed).all(|(&a, &b)| !a || b)
    }

    fn check_against(&self, n: usize) -> Result<()> {
        if self.n_tokens != n {
            return Err(Error::ShapeMismatch(format!(
                "mask covers {} tokens, inputs have {n}",
                self.n_tokens
            )));
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over one row of scores (entries may be `-inf`), then weighted sum
/// of `v` rows into `out`.
fn softmax_weighted_sum(scores: &[f32], v: &Matrix, out: &mut [f32]) {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    let mut acc = vec![0.0f64; v.cols()];
    for (j, &s) in scores.iter().enumerate() {
        if s == f32::NEG_INFINITY {
            continue;
        }
        let p = (s - max).exp();
        denom += p as f64;
        for (a, &x) in acc.iter_mut().zip(v.row(j)) {
            *a += p as f64 * x as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = (a / denom) as f32;
    }
}

fn score_row(inputs: &AttentionInputs, i: usize, scores: &mut [f32]) {
    let qi = inputs.q.row(i);
    for (j, s) in scores.iter_mut().enumerate() {
        *s = dot(qi, inputs.k.row(j)) * inputs.scale;
    }
}

/// `softmax(Q K^T * scale) V` with row-max subtraction.
pub fn dense_attention(inputs: &AttentionInputs) -> Result<Matrix> {
    let n = inputs.len();
    let mut out = Matrix::zeros(n, inputs.v.cols());
    let mut scores = vec![0.0f32; n];
    for i in 0..n {
        score_row(inputs, i, &mut scores);
        softmax_weighted_sum(&scores, &inputs.v, out.row_mut(i));
    }
    Ok(out)
}

/// Post-softmax attention probabilities `softmax(Q K^T * scale)`.
pub fn attention_prob_map(q: &Matrix, k: &Matrix, scale: f32) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?} and K {:?} must share n and d",
            q.shape(),
            k.shape()
        )));
    }
    let n = q.rows();
    let mut probs = Matrix::zeros(n, n);
    for i in 0..n {
        let row = probs.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(q.row(i), k.row(j)) * scale;
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            denom += *s as f64;
        }
        for s in row.iter_mut() {
            *s = (*s as f64 / denom) as f32;
        }
    }
    Ok(probs)
}

/// Dense attention with scores of disallowed blocks set to `-inf`.
pub fn masked_dense_oracle(inputs: &AttentionInputs, mask: &BlockMask) -> Result<Matrix> {
    let n = inputs.len();
    mask.check_against(n)?;
    mask.check_rows()?;
    let mut out = Matrix::zeros(n, inputs.v.cols());
    let mut scores = vec![0.0f32; n];
    for i in 0..n {
        score_row(inputs, i, &mut scores);
        let qb = mask.block_of(i);
        for (j, s) in scores.iter_mut().enumerate() {
            if !mask.is_allowed(qb, mask.block_of(j)) {
                *s = f32::NEG_INFINITY;
            }
        }
        softmax_weighted_sum(&scores, &inputs.v, out.row_mut(i));
    }
    Ok(out)
}

/// Blockwise online-softmax attention over the allowed blocks of `mask`.
pub fn block_sparse_attention(inputs: &AttentionInputs, mask: &BlockMask) -> Result<Matrix> {
    let n = inputs.len();
    let d = inputs.v.cols();
    mask.check_against(n)?;
    mask.check_rows()?;

    let mut out = Matrix::zeros(n, d);
    let bs = mask.block_size();
    let mut scores = vec![0.0f32; bs];
    let mut row_max = vec![f32::NEG_INFINITY; bs];
    let mut denom = vec![0.0f64; bs];
    let mut acc = vec![0.0f64; bs * d];

    for qb in 0..mask.n_blocks() {
        let q_range = mask.block_range(qb);
        let rows = q_range.len();
        row_max[..rows].fill(f32::NEG_INFINITY);
        denom[..rows].fill(0.0);
        acc[..rows * d].fill(0.0);

        for kb in (0..mask.n_blocks()).filter(|&kb| mask.is_allowed(qb, kb)) {
            let k_range = mask.block_range(kb);
            let cols = k_range.len();
            for (r, i) in q_range.clone().enumerate() {
                let qi = inputs.q.row(i);
                let s = &mut scores[..cols];
                for (c, j) in k_range.clone().enumerate() {
                    s[c] = dot(qi, inputs.k.row(j)) * inputs.scale;
                }
                let block_max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let new_max = row_max[r].max(block_max);
                // exp(-inf) = 0 wipes the empty initial state.
                let rescale = (row_max[r] - new_max).exp() as f64;
                let acc_r = &mut acc[r * d..(r + 1) * d];
                denom[r] *= rescale;
                acc_r.iter_mut().for_each(|a| *a *= rescale);
                for (c, j) in k_range.clone().enumerate() {
                    let p = (s[c] - new_max).exp() as f64;
                    denom[r] += p;
                    for (a, &x) in acc_r.iter_mut().zip(inputs.v.row(j)) {
                        *a += p * x as f64;
                    }
                }
                row_max[r] = new_max;
            }
        }

        for (r, i) in q_range.enumerate() {
            let acc_r = &acc[r * d..(r + 1) * d];
            for (o, a) in out.row_mut(i).iter_mut().zip(acc_r) {
                *o = (a / denom[r]) as f32;
            }
        }
    }
    Ok(out)
}

/// Fraction of (query block, key block) pairs that are computed.
pub fn flop_proxy(mask: &BlockMask) -> f64 {
    mask.count_allowed() as f64 / mask.total_blocks() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Permutation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0f32..=1.0))
    }

    fn random_inputs(seed: u64, n: usize, d: usize) -> AttentionInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_matrix(&mut rng, n, d);
        let k = random_matrix(&mut rng, n, d);
        let v = random_matrix(&mut rng, n, d);
        AttentionInputs::new(q, k, v).unwrap()
    }

    /// Naive two-loop attention in f64, restricted to keys where `keep(i, j)`.
    fn naive_restricted(inputs: &AttentionInputs, keep: impl Fn(usize, usize) -> bool) -> Matrix {
        let n = inputs.len();
        let d = inputs.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        Matrix::from_fn(n, d, |i, c| {
            let mut weights = Vec::new();
            for j in 0..n {
                if keep(i, j) {
                    let mut s = 0.0f64;
                    for t in 0..d {
                        s += inputs.q().get(i, t) as f64 * inputs.k().get(j, t) as f64;
                    }
                    weights.push((j, s * scale));
                }
            }
            let m = weights.iter().map(|w| w.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = weights.iter().map(|w| (w.1 - m).exp()).sum();
            weights
                .iter()
                .map(|&(j, s)| (s - m).exp() / z * inputs.v().get(j, c) as f64)
                .sum::<f64>() as f32
        })
    }

    #[test]
    fn single_token_returns_value_row() {
        let inputs = AttentionInputs::new(
            Matrix::from_vec(1, 2, vec![0.3, -0.7]).unwrap(),
            Matrix::from_vec(1, 2, vec![0.9, 0.1]).unwrap(),
            Matrix::from_vec(1, 2, vec![0.25, -0.5]).unwrap(),
        )
        .unwrap();
        let out = dense_attention(&inputs).unwrap();
        assert_eq!(out.row(0), &[0.25, -0.5]);
    }

    #[test]
    fn identical_value_rows_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_matrix(&mut rng, 6, 3);
        let k = random_matrix(&mut rng, 6, 3);
        let v = Matrix::from_fn(6, 3, |_, c| [0.5, -0.25, 0.125][c]);
        let out = dense_attention(&AttentionInputs::new(q, k, v).unwrap()).unwrap();
        for i in 0..6 {
            for (c, want) in [0.5f32, -0.25, 0.125].into_iter().enumerate() {
                assert!((out.get(i, c) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dense_matches_naive_on_seeded_4x2() {
        let inputs = random_inputs(11, 4, 2);
        let want = naive_restricted(&inputs, |_, _| true);
        let got = dense_attention(&inputs).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-6);
    }

    #[test]
    fn prob_map_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_matrix(&mut rng, 8, 4);
        let k = random_matrix(&mut rng, 8, 4);
        let p = attention_prob_map(&q, &k, 0.5).unwrap();
        for i in 0..8 {
            let s: f64 = p.row(i).iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }

        let k_same = Matrix::from_fn(5, 4, |_, c| c as f32 * 0.1);
        let q = random_matrix(&mut rng, 5, 4);
        let p = attention_prob_map(&q, &k_same, 0.5).unwrap();
        assert!(p.as_slice().iter().all(|&x| (x - 0.2).abs() < 1e-7));

        let one = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(attention_prob_map(&one, &one, 1.0).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Matrix::zeros(4, 2);
        let b = Matrix::zeros(4, 3);
        assert!(matches!(
            AttentionInputs::new(a.clone(), b, a.clone()),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            attention_prob_map(&a, &Matrix::zeros(3, 2), 1.0),
            Err(Error::ShapeMismatch(_))
        ));
        let inputs = random_inputs(1, 8, 2);
        let mask = BlockMask::full(6, 2).unwrap();
        assert!(matches!(
            block_sparse_attention(&inputs, &mask),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut q = Matrix::zeros(2, 2);
        q.set(0, 0, f32::NAN);
        let z = Matrix::zeros(2, 2);
        assert!(matches!(
            AttentionInputs::new(q, z.clone(), z),
            Err(Error::NonFinite("Q"))
        ));
    }

    #[test]
    fn full_and_single_block_masks_equal_dense() {
        let inputs = random_inputs(5, 12, 4);
        let dense = dense_attention(&inputs).unwrap();
        let full = BlockMask::full(12, 4).unwrap();
        assert_eq!(masked_dense_oracle(&inputs, &full).unwrap(), dense);
        let whole = BlockMask::full(12, 12).unwrap();
        assert_eq!(whole.n_blocks(), 1);
        assert_eq!(masked_dense_oracle(&inputs, &whole).unwrap(), dense);
    }

    #[test]
    fn masked_oracle_matches_token_restricted_softmax() {
        let inputs = random_inputs(21, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mask = BlockMask::from_fn(8, 2, |i, j| i == j || rng.gen_bool(0.4)).unwrap();
        let want = naive_restricted(&inputs, |i, j| mask.is_allowed(i / 2, j / 2));
        let got = masked_dense_oracle(&inputs, &mask).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-6);
    }

    #[test]
    fn identity_mask_at_block_one_copies_values() {
        let inputs = random_inputs(2, 2, 3);
        let mask = BlockMask::from_fn(2, 1, |i, j| i == j).unwrap();
        let out = block_sparse_attention(&inputs, &mask).unwrap();
        assert_eq!(out.row(0), inputs.v().row(0));
        assert_eq!(out.row(1), inputs.v().row(1));
    }

    #[test]
    fn empty_query_row_is_an_error() {
        let inputs = random_inputs(2, 4, 2);
        let mask = BlockMask::from_fn(4, 2, |i, _| i == 0).unwrap();
        assert!(matches!(
            block_sparse_attention(&inputs, &mask),
            Err(Error::EmptyQueryRow { block: 1 })
        ));
        assert!(matches!(
            masked_dense_oracle(&inputs, &mask),
            Err(Error::EmptyQueryRow { block: 1 })
        ));
    }

    #[test]
    fn flop_proxy_examples() {
        assert_eq!(flop_proxy(&BlockMask::full(64, 16).unwrap()), 1.0);
        let diag = BlockMask::from_fn(64, 16, |i, j| i == j).unwrap();
        assert_eq!(flop_proxy(&diag), 0.25);
    }

    #[test]
    fn ragged_last_block() {
        let inputs = random_inputs(17, 10, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mask = BlockMask::from_fn(10, 4, |i, j| i == j || rng.gen_bool(0.5)).unwrap();
        assert_eq!(mask.n_blocks(), 3);
        let a = block_sparse_attention(&inputs, &mask).unwrap();
        let b = masked_dense_oracle(&inputs, &mask).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
    }

    proptest! {
        #[test]
        fn online_softmax_matches_masked_oracle(
            seed in any::<u64>(),
            n in 1usize..48,
            d in 1usize..9,
            bs in 1usize..10,
            density in 0.0f64..1.0,
        ) {
            let inputs = random_inputs(seed, n, d);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
            let mask = BlockMask::from_fn(n, bs, |i, j| i == j || rng.gen_bool(density)).unwrap();
            let sparse = block_sparse_attention(&inputs, &mask).unwrap();
            let oracle = masked_dense_oracle(&inputs, &mask).unwrap();
            prop_assert!(sparse.max_abs_diff(&oracle).unwrap() <= 1e-5);
        }

        #[test]
        fn permutation_equivariance_at_token_resolution(seed in any::<u64>(), n in 2usize..24) {
            let inputs = random_inputs(seed, n, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let mask = BlockMask::from_fn(n, 1, |i, j| i == j || rng.gen_bool(0.5)).unwrap();

            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let perm = Permutation::from_order(order).unwrap();
            let permuted = AttentionInputs::new(
                inputs.q().permute_rows(&perm).unwrap(),
                inputs.k().permute_rows(&perm).unwrap(),
                inputs.v().permute_rows(&perm).unwrap(),
            ).unwrap();
            let conj = BlockMask::from_fn(n, 1, |pi, pj| {
                mask.is_allowed(perm.raster_at(pi), perm.raster_at(pj))
            }).unwrap();

            let base = block_sparse_attention(&inputs, &mask).unwrap();
            let moved = block_sparse_attention(&permuted, &conj).unwrap();
            prop_assert!(base.permute_rows(&perm).unwrap().max_abs_diff(&moved).unwrap() <= 1e-5);
        }
    }
}
