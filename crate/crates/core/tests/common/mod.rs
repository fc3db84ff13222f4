//! Scalar big-integer reference for the integer engine.
//!
//! Everything is written out from the arithmetic definitions with `BigInt`
//! intermediates and no shared code paths with the engine, apart from the
//! frozen exp table and the RoPE tables, which are data.

#![allow(dead_code)]

use detinfer::modelio::{LayerWeights, QuantTensor};
use detinfer::qarith::EXP_LUT;
use detinfer::{ModelConfig, ModelFile, RopeTables, Q16};
use num_bigint::BigInt;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

pub const ONE: i64 = 65536;

fn big(v: i64) -> BigInt {
    BigInt::from(v)
}

fn small(v: &BigInt) -> i64 {
    i64::try_from(v).expect("reference value left the i64 range")
}

/// floor(v / 2^n)
fn floor_shift(v: &BigInt, n: u32) -> BigInt {
    let d = BigInt::from(1u8) << n;
    floor_div(v, &d)
}

fn floor_div(a: &BigInt, b: &BigInt) -> BigInt {
    let q = a / b;
    if (a % b != BigInt::from(0)) && ((a < &BigInt::from(0)) != (b < &BigInt::from(0))) {
        q - 1
    } else {
        q
    }
}

/// Round half away from zero of a / b for b > 0.
fn round_div(a: &BigInt, b: &BigInt) -> BigInt {
    let zero = BigInt::from(0);
    let two = BigInt::from(2);
    if a >= &zero {
        (a * &two + b) / (b * &two)
    } else {
        -((-a * &two + b) / (b * &two))
    }
}

pub fn mul(a: i64, b: i64) -> i64 {
    small(&floor_shift(&(big(a) * big(b)), 16))
}

pub fn inv_sqrt(x: i64) -> i64 {
    assert!(x > 0);
    let e = 63 - x.leading_zeros() as i32;
    let seed = (2f64).powf(47.75 - e as f64 / 2.0).round() as i64;
    let mut y = big(seed);
    let three = big(3) << 40u32;
    for _ in 0..3 {
        let xy = floor_shift(&(big(x) * &y), 16);
        let xyy = floor_shift(&(xy * &y), 40);
        y = floor_shift(&(&y * (&three - xyy)), 41);
    }
    small(&floor_shift(&(y + (big(1) << 23u32)), 24))
}

pub fn exp_neg(t: i64) -> i64 {
    assert!((0..=8 * ONE).contains(&t));
    let step = 2048;
    let idx = (t / step) as usize;
    let rem = t % step;
    let hi = EXP_LUT[256 - idx];
    if rem == 0 {
        return hi;
    }
    let lo = EXP_LUT[255 - idx];
    // round half up of (hi - lo) * rem / 2048
    let drop = ((hi - lo) * rem * 2 + step) / (2 * step);
    hi - drop
}

pub fn sigmoid(x: i64) -> i64 {
    if x > 0 {
        return ONE - sigmoid(-x);
    }
    let e = exp_neg((-x).min(8 * ONE));
    small(&round_div(&(big(e) * big(ONE)), &big(ONE + e)))
}

pub fn silu(x: i64) -> i64 {
    mul(x, sigmoid(x))
}

pub fn dense(w: &QuantTensor, x: &[i64]) -> Vec<i64> {
    assert_eq!(w.cols(), x.len());
    (0..w.rows())
        .map(|i| {
            let mut acc = big(0);
            for (j, &xj) in x.iter().enumerate() {
                acc += big(w.row(i)[j] as i64) * big(xj);
            }
            assert!(acc.bits() < 63, "accumulator left i64");
            small(&floor_shift(&(acc * big(w.scale(i).raw())), 16))
        })
        .collect()
}

pub fn rmsnorm(x: &[i64], gamma: &[Q16]) -> Vec<i64> {
    let mut sum = big(0);
    for &v in x {
        sum += big(v) * big(v);
    }
    let ms = small(&floor_shift(&(sum / big(x.len() as i64)), 16));
    let r = inv_sqrt(ms + 1);
    x.iter()
        .zip(gamma)
        .map(|(&v, g)| mul(mul(v, r), g.raw()))
        .collect()
}

fn rope(x: &mut [i64], pos: usize, tables: &RopeTables) {
    let half = x.len() / 2;
    for k in 0..half {
        let c = tables.cos(pos, k).raw();
        let s = tables.sin(pos, k).raw();
        let (a, b) = (x[k], x[k + half]);
        x[k] = mul(a, c) - mul(b, s);
        x[k + half] = mul(a, s) + mul(b, c);
    }
}

pub fn softmax(scores: &[i64]) -> Vec<i64> {
    let m = *scores.iter().max().unwrap();
    let w: Vec<i64> = scores.iter().map(|&s| exp_neg((m - s).min(8 * ONE))).collect();
    let total: i64 = w.iter().sum();
    w.iter().map(|&wi| (wi << 16) / total).collect()
}

/// One layer's cache: `keys[head][t]`, `values[head][t]`.
#[derive(Default, Clone)]
pub struct RefKv {
    keys: Vec<Vec<Vec<i64>>>,
    values: Vec<Vec<Vec<i64>>>,
}

fn attention(
    q: &[i64],
    k: &[i64],
    v: &[i64],
    kv: &mut RefKv,
    pos: usize,
    n_heads: usize,
    tables: &RopeTables,
) -> Vec<i64> {
    let dh = q.len() / n_heads;
    if kv.keys.is_empty() {
        kv.keys = vec![Vec::new(); n_heads];
        kv.values = vec![Vec::new(); n_heads];
    }
    let scale = inv_sqrt(dh as i64 * ONE);
    let mut out = Vec::with_capacity(q.len());
    for h in 0..n_heads {
        let mut qh = q[h * dh..(h + 1) * dh].to_vec();
        let mut kh = k[h * dh..(h + 1) * dh].to_vec();
        rope(&mut qh, pos, tables);
        rope(&mut kh, pos, tables);
        kv.keys[h].push(kh);
        kv.values[h].push(v[h * dh..(h + 1) * dh].to_vec());
        let scores: Vec<i64> = kv.keys[h]
            .iter()
            .map(|kt| {
                let mut dot = big(0);
                for (a, b) in qh.iter().zip(kt) {
                    dot += big(*a) * big(*b);
                }
                mul(small(&floor_shift(&dot, 16)), scale)
            })
            .collect();
        let p = softmax(&scores);
        let mut o = vec![0i64; dh];
        for (t, pt) in p.iter().enumerate() {
            for (oi, vi) in o.iter_mut().zip(&kv.values[h][t]) {
                *oi += mul(*pt, *vi);
            }
        }
        out.extend(o);
    }
    assert_eq!(pos + 1, kv.keys[0].len());
    out
}

fn residual(a: &[i64], b: &[i64]) -> Vec<i64> {
    let lim = 256 * ONE;
    a.iter().zip(b).map(|(x, y)| (x + y).clamp(-lim, lim)).collect()
}

fn block(l: &LayerWeights, x: &[i64], kv: &mut RefKv, pos: usize, n_heads: usize, t: &RopeTables) -> Vec<i64> {
    let h = rmsnorm(x, &l.attn_norm);
    let q = dense(&l.wq, &h);
    let k = dense(&l.wk, &h);
    let v = dense(&l.wv, &h);
    let a = attention(&q, &k, &v, kv, pos, n_heads, t);
    let x = residual(x, &dense(&l.wo, &a));
    let h = rmsnorm(&x, &l.ffn_norm);
    let g = dense(&l.w_gate, &h);
    let u = dense(&l.w_up, &h);
    let m: Vec<i64> = g.iter().zip(&u).map(|(&gi, &ui)| mul(silu(gi), ui)).collect();
    residual(&x, &dense(&l.w_down, &m))
}

/// Logits after each token of `tokens`, fed from position 0.
pub fn reference_logits(model: &ModelFile, tokens: &[u32]) -> Vec<Vec<i64>> {
    let cfg = &model.config;
    let tables = RopeTables::build(cfg.rope_theta, cfg.d_model / cfg.n_heads, cfg.max_ctx).unwrap();
    let mut caches = vec![RefKv::default(); cfg.n_layers];
    let mut all = Vec::new();
    for (pos, &tok) in tokens.iter().enumerate() {
        let row = tok as usize;
        let s = model.tok_embd.scale(row).raw();
        let mut x: Vec<i64> = model.tok_embd.row(row).iter().map(|&w| w as i64 * s).collect();
        for (l, kv) in model.layers.iter().zip(&mut caches) {
            x = block(l, &x, kv, pos, cfg.n_heads, &tables);
        }
        let h = rmsnorm(&x, &model.output_norm);
        all.push(dense(&model.output, &h));
    }
    all
}

fn random_tensor(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> QuantTensor {
    let data = (0..rows * cols)
        .map(|_| (rng.next_u32() % 255) as i32 - 127)
        .map(|v| v as i8)
        .collect();
    let scales = (0..rows)
        .map(|_| Q16(1 + (rng.next_u32() % 30_000) as i64))
        .collect();
    QuantTensor::new(rows, cols, data, scales).unwrap()
}

fn random_gains(rng: &mut ChaCha20Rng, n: usize) -> Vec<Q16> {
    (0..n)
        .map(|_| Q16((rng.next_u32() % (2 * ONE as u32)) as i64 - ONE / 2))
        .collect()
}

/// A one-layer model with random weights, scales and norm gains.
pub fn micro_model(seed: u64) -> ModelFile {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (d, heads) = [(4, 1), (4, 2), (6, 1), (6, 3), (8, 1), (8, 2), (8, 4)][(rng.next_u32() % 7) as usize];
    let d_ffn = 2 + (rng.next_u32() % 15) as usize;
    let vocab = 4 + (rng.next_u32() % 13) as usize;
    let config = ModelConfig {
        n_layers: 1,
        d_model: d,
        n_heads: heads,
        d_ffn,
        vocab,
        max_ctx: 16,
        rope_theta: [10000.0, 500.0, 1e6][(rng.next_u32() % 3) as usize],
    };
    let layer = LayerWeights {
        attn_norm: random_gains(&mut rng, d),
        wq: random_tensor(&mut rng, d, d),
        wk: random_tensor(&mut rng, d, d),
        wv: random_tensor(&mut rng, d, d),
        wo: random_tensor(&mut rng, d, d),
        ffn_norm: random_gains(&mut rng, d),
        w_gate: random_tensor(&mut rng, d_ffn, d),
        w_up: random_tensor(&mut rng, d_ffn, d),
        w_down: random_tensor(&mut rng, d, d_ffn),
    };
    let model = ModelFile {
        tok_embd: random_tensor(&mut rng, vocab, d),
        layers: vec![layer],
        output_norm: random_gains(&mut rng, d),
        output: random_tensor(&mut rng, vocab, d),
        config,
    };
    model.validate().unwrap();
    model
}

pub fn micro_tokens(model: &ModelFile, seed: u64, n: usize) -> Vec<u32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    (0..n)
        .map(|_| rng.next_u32() % model.config.vocab as u32)
        .collect()
}
