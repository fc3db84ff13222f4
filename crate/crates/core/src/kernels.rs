//! Integer transformer kernels with a fixed evaluation order.
//!
//! Every reduction runs in index order. The only parallelism is across
//! attention heads, and head outputs are concatenated in head order, so results
//! do not depend on the thread count.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::modelio::QuantTensor;
use crate::qarith::{exp_neg_lut, inv_sqrt_q16, q16_mul, saturate, silu_q16, RopeTables, Q16, EXP_ARG_MAX};

/// Activations are clamped to +-256.0 after every residual add.
pub const ACT_CLAMP: i64 = 256 << 16;

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

// |acc| <= 127 * max|x| * cols must stay inside i64.
fn check_envelope(x: &[Q16]) -> Result<()> {
    let max = x.iter().map(|v| v.raw().unsigned_abs()).max().unwrap_or(0);
    if (max as u128) * 127 * (x.len() as u128) > i64::MAX as u128 {
        return Err(Error::AccumulatorOverflow(max.min(i64::MAX as u64) as i64));
    }
    Ok(())
}

#[inline]
fn scale_row(acc: i64, scale: Q16) -> Q16 {
    Q16(saturate((acc as i128 * scale.raw() as i128) >> 16))
}

#[inline]
fn dot_i8(row: &[i8], x: &[Q16]) -> i64 {
    let mut acc = 0i64;
    for (&w, v) in row.iter().zip(x) {
        acc += w as i64 * v.raw();
    }
    acc
}

/// `out[i] = (sum_j w[i,j] * x[j]) * s[i] >> 16`, accumulating in 64 bits in
/// column order.
pub fn dense_forward(w: &QuantTensor, x: &[Q16]) -> Result<Vec<Q16>> {
    check_len(w.cols(), x.len())?;
    check_envelope(x)?;
    Ok((0..w.rows())
        .map(|i| scale_row(dot_i8(w.row(i), x), w.scale(i)))
        .collect())
}

/// Same product as [`dense_forward`] but summed as per-chunk partials that are
/// combined afterwards. Integer addition is associative, so the result is
/// bit-identical for every chunk size.
pub fn matvec_chunked(w: &QuantTensor, x: &[Q16], chunk_size: usize) -> Result<Vec<Q16>> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk size must be at least 1".into()));
    }
    check_len(w.cols(), x.len())?;
    check_envelope(x)?;
    Ok((0..w.rows())
        .map(|i| {
            let acc = w
                .row(i)
                .chunks(chunk_size)
                .zip(x.chunks(chunk_size))
                .map(|(r, xs)| dot_i8(r, xs))
                .sum::<i64>();
            scale_row(acc, w.scale(i))
        })
        .collect())
}

/// Integer RMSNorm: mean square in a 128-bit sum, `+1` raw epsilon, Newton
/// inverse square root, then `x * r * gamma`.
pub fn rmsnorm(x: &[Q16], gamma: &[Q16]) -> Result<Vec<Q16>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_len(x.len(), gamma.len())?;
    let sum_sq: i128 = x.iter().map(|v| v.raw() as i128 * v.raw() as i128).sum();
    let ms = saturate((sum_sq / x.len() as i128) >> 16);
    let r = inv_sqrt_q16(Q16(ms.saturating_add(1)))?;
    Ok(x
        .iter()
        .zip(gamma)
        .map(|(&xi, &g)| q16_mul(q16_mul(xi, r), g))
        .collect())
}

/// Rotates the pairs `(k, k + d/2)` of a single head vector in place.
pub fn rope_apply_in_place(x: &mut [Q16], pos: usize, tables: &RopeTables) -> Result<()> {
    if pos >= tables.max_ctx() {
        return Err(Error::ContextOverflow {
            pos,
            max_ctx: tables.max_ctx(),
        });
    }
    let half = tables.half_dim();
    check_len(2 * half, x.len())?;
    for k in 0..half {
        let (c, s) = (tables.cos(pos, k), tables.sin(pos, k));
        let (a, b) = (x[k], x[k + half]);
        x[k] = Q16(q16_mul(a, c).raw() - q16_mul(b, s).raw());
        x[k + half] = Q16(q16_mul(a, s).raw() + q16_mul(b, c).raw());
    }
    Ok(())
}

pub fn rope_apply(x: &[Q16], pos: usize, tables: &RopeTables) -> Result<Vec<Q16>> {
    let mut out = x.to_vec();
    rope_apply_in_place(&mut out, pos, tables)?;
    Ok(out)
}

/// Integer softmax over the exp table. Weights are normalized by truncating
/// division, so the total mass lies in `[ONE - n, ONE]`.
pub fn softmax_q16(scores: &[Q16]) -> Result<Vec<Q16>> {
    let max = scores.iter().copied().max().ok_or(Error::EmptyInput)?;
    let weights: Vec<i64> = scores
        .iter()
        .map(|&s| {
            let gap = (max.raw() as i128 - s.raw() as i128).min(EXP_ARG_MAX.raw() as i128);
            exp_neg_lut(Q16(gap as i64)).map(Q16::raw)
        })
        .collect::<Result<_>>()?;
    let total: i64 = weights.iter().sum();
    Ok(weights
        .iter()
        .map(|&w| Q16(((w as i128) << 16).div_euclid(total as i128) as i64))
        .collect())
}

/// Key/value history of one attention head, stored at full Q16 precision.
#[derive(Debug, Clone, Default)]
pub struct HeadCache {
    keys: Vec<Q16>,
    values: Vec<Q16>,
}

impl HeadCache {
    pub fn len(&self, d_head: usize) -> usize {
        self.keys.len() / d_head
    }

    pub fn key(&self, t: usize, d_head: usize) -> &[Q16] {
        &self.keys[t * d_head..(t + 1) * d_head]
    }

    pub fn value(&self, t: usize, d_head: usize) -> &[Q16] {
        &self.values[t * d_head..(t + 1) * d_head]
    }

    fn truncate(&mut self, positions: usize, d_head: usize) {
        self.keys.truncate(positions * d_head);
        self.values.truncate(positions * d_head);
    }
}

/// Per-layer cache: one [`HeadCache`] per head plus the shared position count.
#[derive(Debug, Clone)]
pub struct LayerKv {
    heads: Vec<HeadCache>,
    d_head: usize,
    capacity: usize,
    len: usize,
}

impl LayerKv {
    pub fn new(n_heads: usize, d_head: usize, capacity: usize) -> Self {
        Self {
            heads: vec![HeadCache::default(); n_heads],
            d_head,
            capacity,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head(&self, h: usize) -> &HeadCache {
        &self.heads[h]
    }

    pub(crate) fn truncate(&mut self, positions: usize) {
        for h in &mut self.heads {
            h.truncate(positions, self.d_head);
        }
        self.len = self.len.min(positions);
    }
}

fn attend_head(
    q: &[Q16],
    k: &[Q16],
    v: &[Q16],
    cache: &mut HeadCache,
    pos: usize,
    tables: &RopeTables,
    score_scale: Q16,
) -> Result<Vec<Q16>> {
    let d_head = q.len();
    let mut q = q.to_vec();
    let mut k = k.to_vec();
    rope_apply_in_place(&mut q, pos, tables)?;
    rope_apply_in_place(&mut k, pos, tables)?;
    cache.keys.extend_from_slice(&k);
    cache.values.extend_from_slice(v);

    let scores: Vec<Q16> = (0..=pos)
        .map(|t| {
            let dot: i128 = q
                .iter()
                .zip(cache.key(t, d_head))
                .map(|(a, b)| a.raw() as i128 * b.raw() as i128)
                .sum();
            q16_mul(Q16(saturate(dot >> 16)), score_scale)
        })
        .collect();
    let probs = softmax_q16(&scores)?;
    let mut out = vec![0i64; d_head];
    for (t, p) in probs.iter().enumerate() {
        for (o, &vt) in out.iter_mut().zip(cache.value(t, d_head)) {
            *o += q16_mul(*p, vt).raw();
        }
    }
    Ok(out.into_iter().map(Q16).collect())
}

/// One attention step at position `pos` (which must equal the cache length).
///
/// `q`, `k`, `v` are full projections of width `n_heads * d_head`. Heads run on
/// `pool` when given; outputs are concatenated in head order.
pub fn attention_step(
    q: &[Q16],
    k: &[Q16],
    v: &[Q16],
    cache: &mut LayerKv,
    pos: usize,
    tables: &RopeTables,
    pool: Option<&ThreadPool>,
) -> Result<Vec<Q16>> {
    let d_head = cache.d_head;
    let width = d_head * cache.heads.len();
    check_len(width, q.len())?;
    check_len(width, k.len())?;
    check_len(width, v.len())?;
    if pos != cache.len {
        return Err(Error::InvalidArgument(format!(
            "attention at position {pos} with {} cached positions",
            cache.len
        )));
    }
    if pos >= cache.capacity {
        return Err(Error::ContextOverflow {
            pos,
            max_ctx: cache.capacity,
        });
    }
    let score_scale = inv_sqrt_q16(Q16::from_int(d_head as i32))?;
    let run = |(h, head): (usize, &mut HeadCache)| {
        let r = h * d_head..(h + 1) * d_head;
        attend_head(&q[r.clone()], &k[r.clone()], &v[r], head, pos, tables, score_scale)
    };
    let per_head: Vec<Vec<Q16>> = match pool {
        Some(pool) => pool.install(|| {
            cache
                .heads
                .par_iter_mut()
                .enumerate()
                .map(run)
                .collect::<Result<_>>()
        })?,
        None => cache
            .heads
            .iter_mut()
            .enumerate()
            .map(run)
            .collect::<Result<_>>()?,
    };
    cache.len += 1;
    Ok(per_head.concat())
}

/// Row-major dense product with optional chunked accumulation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatvecOrder {
    pub chunk: Option<usize>,
}

impl MatvecOrder {
    pub fn apply(&self, w: &QuantTensor, x: &[Q16]) -> Result<Vec<Q16>> {
        match self.chunk {
            Some(c) => matvec_chunked(w, x, c),
            None => dense_forward(w, x),
        }
    }
}

/// SiLU-gated feed-forward: `down(silu(gate(x)) * up(x))`.
pub fn ffn_silu(
    x: &[Q16],
    w_gate: &QuantTensor,
    w_up: &QuantTensor,
    w_down: &QuantTensor,
    order: MatvecOrder,
) -> Result<Vec<Q16>> {
    check_len(w_gate.rows(), w_up.rows())?;
    check_len(w_gate.rows(), w_down.cols())?;
    let gate = order.apply(w_gate, x)?;
    let up = order.apply(w_up, x)?;
    let h: Vec<Q16> = gate
        .iter()
        .zip(&up)
        .map(|(&g, &u)| q16_mul(silu_q16(g), u))
        .collect();
    order.apply(w_down, &h)
}

/// Elementwise sum clamped to the activation range.
pub fn residual_add_clamp(a: &[Q16], b: &[Q16]) -> Result<Vec<Q16>> {
    check_len(a.len(), b.len())?;
    Ok(a
        .iter()
        .zip(b)
        .map(|(x, y)| Q16(x.raw().saturating_add(y.raw()).clamp(-ACT_CLAMP, ACT_CLAMP)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: i64 = Q16::ONE.raw();

    fn qt(rows: usize, cols: usize, data: Vec<i8>, scale: Q16) -> QuantTensor {
        QuantTensor::new(rows, cols, data, vec![scale; rows]).unwrap()
    }

    #[test]
    fn dense_examples() {
        let w = qt(1, 3, vec![1, 2, 3], Q16::ONE);
        let out = dense_forward(&w, &[Q16::ONE; 3]).unwrap();
        assert_eq!(out, vec![Q16(6 * ONE)]);
        let z = qt(2, 3, vec![0; 6], Q16(516));
        assert_eq!(dense_forward(&z, &[Q16(12345); 3]).unwrap(), vec![Q16::ZERO; 2]);
        assert!(matches!(
            dense_forward(&w, &[Q16::ONE; 2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dense_rejects_accumulator_overflow() {
        let w = qt(1, 2, vec![127, 127], Q16::ONE);
        assert!(matches!(
            dense_forward(&w, &[Q16(i64::MAX / 100), Q16(0)]),
            Err(Error::AccumulatorOverflow(_))
        ));
    }

    #[test]
    fn chunked_single_chunk_matches() {
        let w = qt(2, 4, vec![1, -2, 3, -4, 5, 6, -7, 8], Q16(700));
        let x = [Q16(1000), Q16(-3000), Q16(77), Q16(ONE)];
        let base = dense_forward(&w, &x).unwrap();
        for c in [1, 2, 3, 4, 64] {
            assert_eq!(matvec_chunked(&w, &x, c).unwrap(), base);
        }
        assert!(matvec_chunked(&w, &x, 0).is_err());
    }

    #[test]
    fn rmsnorm_constant_vector() {
        for c in [ONE / 3, ONE, 2 * ONE, 4 * ONE, 16 * ONE] {
            let out = rmsnorm(&[Q16(c); 16], &[Q16::ONE; 16]).unwrap();
            for o in out {
                assert!((o.raw() - ONE).abs() <= 2, "c={c} out={}", o.raw());
            }
        }
        // three Newton steps leave up to ~1e-4 relative error in r
        for c in (ONE / 2..8 * ONE).step_by(997) {
            let out = rmsnorm(&[Q16(c); 4], &[Q16::ONE; 4]).unwrap();
            assert!((out[0].raw() - ONE).abs() <= 7, "c={c} out={}", out[0].raw());
        }
    }

    #[test]
    fn rmsnorm_large_constant_limited_by_scale_resolution() {
        // r ~ 1/c carries +-0.5 raw of rounding, which x = c amplifies by c
        for c in [7i64, 50, 200] {
            let out = rmsnorm(&[Q16(c * ONE); 8], &[Q16::ONE; 8]).unwrap();
            for o in out {
                assert!((o.raw() - ONE).abs() <= c / 2 + 2, "c={c} out={}", o.raw());
            }
        }
    }

    #[test]
    fn rmsnorm_zero_and_empty() {
        assert_eq!(rmsnorm(&[Q16::ZERO; 4], &[Q16::ONE; 4]).unwrap(), vec![Q16::ZERO; 4]);
        assert_eq!(rmsnorm(&[], &[]), Err(Error::EmptyInput));
        assert!(rmsnorm(&[Q16::ONE], &[]).is_err());
    }

    #[test]
    fn rope_examples() {
        let t = RopeTables::build(10000.0, 2, 8).unwrap();
        let x = [Q16(12345), Q16(-999)];
        assert_eq!(rope_apply(&x, 0, &t).unwrap(), x.to_vec());
        for p in 0..8 {
            let out = rope_apply(&[Q16::ONE, Q16::ZERO], p, &t).unwrap();
            assert_eq!(out, vec![t.cos(p, 0), t.sin(p, 0)]);
        }
        assert!(matches!(
            rope_apply(&x, 8, &t),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_q16(&[Q16(-5 * ONE)]).unwrap(), vec![Q16::ONE]);
        let p = softmax_q16(&[Q16(3 * ONE), Q16(3 * ONE)]).unwrap();
        assert!(p.iter().all(|v| v.raw() == 32767 || v.raw() == 32768));
        let s: i64 = p.iter().map(|v| v.raw()).sum();
        assert!((65534..=65536).contains(&s));

        // clamp at 8: the far score gets exp_neg_lut(8) = 22 of 65558 total mass
        let p = softmax_q16(&[Q16::ZERO, Q16(-20 * ONE)]).unwrap();
        assert_eq!(p[0].raw(), (ONE << 16) / (ONE + 22));
        assert_eq!(p[1].raw(), (22 << 16) / (ONE + 22));
        assert_eq!(softmax_q16(&[]), Err(Error::EmptyInput));
    }

    #[test]
    fn attention_first_position_returns_value() {
        let t = RopeTables::build(10000.0, 4, 4).unwrap();
        let mut cache = LayerKv::new(2, 4, 4);
        let q: Vec<Q16> = (0..8).map(|i| Q16(i * 1000)).collect();
        let k: Vec<Q16> = (0..8).map(|i| Q16(-i * 300)).collect();
        let v: Vec<Q16> = (0..8).map(|i| Q16(i * 7777 - 20000)).collect();
        let out = attention_step(&q, &k, &v, &mut cache, 0, &t, None).unwrap();
        assert_eq!(out, v);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn attention_equal_keys_average_values() {
        let t = RopeTables::build(10000.0, 2, 4).unwrap();
        let mut cache = LayerKv::new(1, 2, 4);
        let q = [Q16(ONE), Q16(ONE)];
        // Same unrotated key at both positions would rotate differently, so use
        // a zero key: every score is zero regardless of position.
        let k = [Q16::ZERO, Q16::ZERO];
        let v0 = [Q16(4 * ONE), Q16(-ONE)];
        let v1 = [Q16(2 * ONE), Q16(3 * ONE)];
        attention_step(&q, &k, &v0, &mut cache, 0, &t, None).unwrap();
        let out = attention_step(&q, &k, &v1, &mut cache, 1, &t, None).unwrap();
        for j in 0..2 {
            let avg = (v0[j].raw() + v1[j].raw()) / 2;
            assert!((out[j].raw() - avg).abs() <= 2 * 8, "{j}: {} vs {avg}", out[j].raw());
        }
    }

    #[test]
    fn attention_rejects_overflow_and_wrong_position() {
        let t = RopeTables::build(10000.0, 2, 4).unwrap();
        let mut cache = LayerKv::new(1, 2, 1);
        let x = [Q16::ONE, Q16::ONE];
        assert!(attention_step(&x, &x, &x, &mut cache, 1, &t, None).is_err());
        attention_step(&x, &x, &x, &mut cache, 0, &t, None).unwrap();
        assert!(matches!(
            attention_step(&x, &x, &x, &mut cache, 1, &t, None),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn ffn_zero_cases() {
        let gate = qt(3, 2, vec![5, -6, 7, 8, -9, 10], Q16(900));
        let up = qt(3, 2, vec![1, 2, 3, 4, 5, 6], Q16(900));
        let zero_up = qt(3, 2, vec![0; 6], Q16(900));
        let down = qt(2, 3, vec![11, 12, 13, 14, 15, 16], Q16(900));
        let o = MatvecOrder::default();
        assert_eq!(ffn_silu(&[Q16::ZERO; 2], &gate, &up, &down, o).unwrap(), vec![Q16::ZERO; 2]);
        let x = [Q16(3 * ONE), Q16(-ONE)];
        assert_eq!(ffn_silu(&x, &gate, &zero_up, &down, o).unwrap(), vec![Q16::ZERO; 2]);
        assert!(ffn_silu(&x, &gate, &up, &gate, o).is_err());
    }

    #[test]
    fn residual_examples() {
        let x = [Q16(5), Q16(-ONE), Q16(100 * ONE)];
        assert_eq!(residual_add_clamp(&x, &[Q16::ZERO; 3]).unwrap(), x.to_vec());
        let m = [Q16(ACT_CLAMP)];
        assert_eq!(residual_add_clamp(&m, &m).unwrap(), m.to_vec());
        let n = [Q16(-ACT_CLAMP)];
        assert_eq!(residual_add_clamp(&n, &n).unwrap(), n.to_vec());
        assert_eq!(
            residual_add_clamp(&[Q16(3)], &[Q16(-10)]).unwrap(),
            vec![Q16(-7)]
        );
        assert!(residual_add_clamp(&x, &m).is_err());
    }
}
