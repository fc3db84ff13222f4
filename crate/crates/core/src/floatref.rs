//! f32 reference backend with an explicit reduction tree.
//!
//! Each reduction keeps `lanes` strided partial sums (element `i` goes to
//! accumulator `i % lanes`) and folds them pairwise at the end, modelling how a
//! SIMD unit of that width would sum. The architecture mirrors the integer
//! engine exactly, so any disagreement between two lane widths comes from
//! floating-point rounding alone.

use std::fmt::Write as _;

use crate::engine::{argmax_lowest, Engine, KvCache};
use crate::error::{Error, Result};
use crate::modelio::{ModelFile, QuantTensor};
use crate::qarith::Q16;

const MAX_LANES: usize = 8;
const ACT_CLAMP: f32 = 256.0;
const NORM_EPS: f32 = 1.0 / 65536.0;

/// Simulated SIMD accumulation width: 1, 2, 4 or 8 lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneConfig(usize);

impl LaneConfig {
    pub fn new(lanes: usize) -> Result<Self> {
        match lanes {
            1 | 2 | 4 | 8 => Ok(LaneConfig(lanes)),
            _ => Err(Error::InvalidLanes(lanes)),
        }
    }

    pub fn lanes(self) -> usize {
        self.0
    }
}

#[inline]
fn fold_lanes(acc: &mut [f32; MAX_LANES], lanes: usize) -> f32 {
    let mut n = lanes;
    while n > 1 {
        n /= 2;
        for i in 0..n {
            acc[i] = acc[2 * i] + acc[2 * i + 1];
        }
    }
    acc[0]
}

/// Sum of `values` through a `cfg.lanes()`-wide reduction tree.
pub fn fsum_lanes(values: &[f32], cfg: LaneConfig) -> f32 {
    match cfg.0 {
        1 => sum_n::<1>(values),
        2 => sum_n::<2>(values),
        4 => sum_n::<4>(values),
        _ => sum_n::<8>(values),
    }
}

#[inline]
fn sum_n<const N: usize>(values: &[f32]) -> f32 {
    let mut acc = [0.0f32; MAX_LANES];
    let mut chunks = values.chunks_exact(N);
    for c in &mut chunks {
        for l in 0..N {
            acc[l] += c[l];
        }
    }
    for (l, &v) in chunks.remainder().iter().enumerate() {
        acc[l] += v;
    }
    fold_lanes(&mut acc, N)
}

#[inline]
fn dot_n<const N: usize>(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; MAX_LANES];
    let mut ca = a.chunks_exact(N);
    let mut cb = b.chunks_exact(N);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..N {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] += x * y;
    }
    fold_lanes(&mut acc, N)
}

/// Dot product with each product rounded to f32 and then summed as in
/// [`fsum_lanes`].
#[inline]
pub fn dot_lanes(a: &[f32], b: &[f32], cfg: LaneConfig) -> f32 {
    match cfg.0 {
        1 => dot_n::<1>(a, b),
        2 => dot_n::<2>(a, b),
        4 => dot_n::<4>(a, b),
        _ => dot_n::<8>(a, b),
    }
}

struct FMat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FMat {
    fn from_quant(t: &QuantTensor) -> Self {
        let mut data = Vec::with_capacity(t.rows() * t.cols());
        for i in 0..t.rows() {
            let s = t.scale(i).raw() as f32 / 65536.0;
            data.extend(t.row(i).iter().map(|&w| w as f32 * s));
        }
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data,
        }
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn matvec(&self, x: &[f32], cfg: LaneConfig) -> Vec<f32> {
        (0..self.rows).map(|i| dot_lanes(self.row(i), x, cfg)).collect()
    }
}

fn gains(v: &[Q16]) -> Vec<f32> {
    v.iter().map(|g| g.raw() as f32 / 65536.0).collect()
}

struct FLayer {
    attn_norm: Vec<f32>,
    wq: FMat,
    wk: FMat,
    wv: FMat,
    wo: FMat,
    ffn_norm: Vec<f32>,
    w_gate: FMat,
    w_up: FMat,
    w_down: FMat,
}

/// The quantized model dequantized to f32 (`w * s`).
pub struct FloatModel {
    n_heads: usize,
    d_head: usize,
    vocab: usize,
    max_ctx: usize,
    tok_embd: FMat,
    layers: Vec<FLayer>,
    output_norm: Vec<f32>,
    output: FMat,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl FloatModel {
    pub fn from_model(m: &ModelFile) -> Result<Self> {
        m.validate()?;
        let cfg = &m.config;
        let d_head = cfg.d_head();
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(cfg.max_ctx * half);
        let mut sin = Vec::with_capacity(cfg.max_ctx * half);
        for pos in 0..cfg.max_ctx {
            for k in 0..half {
                let angle = pos as f64 * cfg.rope_theta.powf(-2.0 * k as f64 / d_head as f64);
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(Self {
            n_heads: cfg.n_heads,
            d_head,
            vocab: cfg.vocab,
            max_ctx: cfg.max_ctx,
            tok_embd: FMat::from_quant(&m.tok_embd),
            layers: m
                .layers
                .iter()
                .map(|l| FLayer {
                    attn_norm: gains(&l.attn_norm),
                    wq: FMat::from_quant(&l.wq),
                    wk: FMat::from_quant(&l.wk),
                    wv: FMat::from_quant(&l.wv),
                    wo: FMat::from_quant(&l.wo),
                    ffn_norm: gains(&l.ffn_norm),
                    w_gate: FMat::from_quant(&l.w_gate),
                    w_up: FMat::from_quant(&l.w_up),
                    w_down: FMat::from_quant(&l.w_down),
                })
                .collect(),
            output_norm: gains(&m.output_norm),
            output: FMat::from_quant(&m.output),
            cos,
            sin,
        })
    }

    pub fn max_ctx(&self) -> usize {
        self.max_ctx
    }
}

#[derive(Default, Clone)]
struct FHead {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// One float generation session under a fixed lane configuration.
pub struct FloatSession<'a> {
    model: &'a FloatModel,
    cfg: LaneConfig,
    cache: Vec<Vec<FHead>>,
    len: usize,
}

fn rmsnorm_f32(x: &[f32], g: &[f32], cfg: LaneConfig) -> Vec<f32> {
    let sq: Vec<f32> = x.iter().map(|v| v * v).collect();
    let ms = fsum_lanes(&sq, cfg) / x.len() as f32;
    let r = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(g).map(|(v, g)| v * r * g).collect()
}

fn silu_f32(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn residual_f32(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a = (*a + b).clamp(-ACT_CLAMP, ACT_CLAMP);
    }
}

impl<'a> FloatSession<'a> {
    pub fn new(model: &'a FloatModel, cfg: LaneConfig) -> Self {
        Self {
            model,
            cfg,
            cache: vec![vec![FHead::default(); model.n_heads]; model.layers.len()],
            len: 0,
        }
    }

    pub fn reset(&mut self) {
        for layer in &mut self.cache {
            for h in layer {
                h.keys.clear();
                h.values.clear();
            }
        }
        self.len = 0;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits for `token` at the next position, optionally recording the
    /// residual stream after every block.
    pub fn forward(&mut self, token: u32, mut trace: Option<&mut Vec<Vec<f32>>>) -> Result<Vec<f32>> {
        let m = self.model;
        let cfg = self.cfg;
        let pos = self.len;
        if token as usize >= m.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: m.vocab,
            });
        }
        if pos >= m.max_ctx {
            return Err(Error::ContextOverflow {
                pos,
                max_ctx: m.max_ctx,
            });
        }
        let dh = m.d_head;
        let score_scale = 1.0 / (dh as f32).sqrt();
        let mut x = m.tok_embd.row(token as usize).to_vec();
        for (li, layer) in m.layers.iter().enumerate() {
            let h = rmsnorm_f32(&x, &layer.attn_norm, cfg);
            let q = layer.wq.matvec(&h, cfg);
            let k = layer.wk.matvec(&h, cfg);
            let v = layer.wv.matvec(&h, cfg);
            let mut att = Vec::with_capacity(q.len());
            for (hi, head) in self.cache[li].iter_mut().enumerate() {
                let r = hi * dh..(hi + 1) * dh;
                let mut qh = q[r.clone()].to_vec();
                let mut kh = k[r.clone()].to_vec();
                rope_f32(&mut qh, pos, &m.cos, &m.sin);
                rope_f32(&mut kh, pos, &m.cos, &m.sin);
                head.keys.extend_from_slice(&kh);
                head.values.extend_from_slice(&v[r]);
                let scores: Vec<f32> = (0..=pos)
                    .map(|t| dot_lanes(&qh, &head.keys[t * dh..(t + 1) * dh], cfg) * score_scale)
                    .collect();
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let e: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
                let total = fsum_lanes(&e, cfg);
                let p: Vec<f32> = e.iter().map(|w| w / total).collect();
                let mut col = vec![0.0f32; pos + 1];
                for j in 0..dh {
                    for (t, c) in col.iter_mut().enumerate() {
                        *c = head.values[t * dh + j];
                    }
                    att.push(dot_lanes(&p, &col, cfg));
                }
            }
            let att = layer.wo.matvec(&att, cfg);
            residual_f32(&mut x, &att);

            let h = rmsnorm_f32(&x, &layer.ffn_norm, cfg);
            let gate = layer.w_gate.matvec(&h, cfg);
            let up = layer.w_up.matvec(&h, cfg);
            let act: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu_f32(*g) * u).collect();
            let f = layer.w_down.matvec(&act, cfg);
            residual_f32(&mut x, &f);
            if let Some(t) = trace.as_deref_mut() {
                t.push(x.clone());
            }
        }
        self.len += 1;
        let h = rmsnorm_f32(&x, &m.output_norm, cfg);
        Ok(m.output.matvec(&h, cfg))
    }
}

fn rope_f32(x: &mut [f32], pos: usize, cos: &[f32], sin: &[f32]) {
    let half = x.len() / 2;
    for k in 0..half {
        let (c, s) = (cos[pos * half + k], sin[pos * half + k]);
        let (a, b) = (x[k], x[k + half]);
        x[k] = a * c - b * s;
        x[k + half] = a * s + b * c;
    }
}

fn argmax_f32(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// A greedy decoder that can be stepped one token at a time.
pub trait GreedyDecoder {
    fn reset(&mut self);
    /// Feeds `token` at the next position and returns the greedy choice for
    /// the position after it.
    fn feed(&mut self, token: u32) -> Result<u32>;
    /// Residual stream (real units) after the last block of the last `feed`.
    fn hidden(&self) -> &[f64];
    fn max_ctx(&self) -> usize;
}

pub struct FloatDecoder<'a> {
    session: FloatSession<'a>,
    hidden: Vec<f64>,
}

impl<'a> FloatDecoder<'a> {
    pub fn new(model: &'a FloatModel, cfg: LaneConfig) -> Self {
        Self {
            session: FloatSession::new(model, cfg),
            hidden: Vec::new(),
        }
    }
}

impl GreedyDecoder for FloatDecoder<'_> {
    fn reset(&mut self) {
        self.session.reset();
        self.hidden.clear();
    }

    fn feed(&mut self, token: u32) -> Result<u32> {
        let mut trace = Vec::new();
        let logits = self.session.forward(token, Some(&mut trace))?;
        self.hidden = trace.pop().unwrap_or_default().into_iter().map(f64::from).collect();
        Ok(argmax_f32(&logits) as u32)
    }

    fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    fn max_ctx(&self) -> usize {
        self.session.model.max_ctx
    }
}

/// The integer engine behind the same stepping interface. It has no lane
/// parameter: every configuration is the same computation.
pub struct IntDecoder<'e, 'm> {
    engine: &'e Engine<'m>,
    cache: KvCache,
    hidden: Vec<f64>,
}

impl<'e, 'm> IntDecoder<'e, 'm> {
    pub fn new(engine: &'e Engine<'m>) -> Self {
        Self {
            cache: engine.new_cache(),
            engine,
            hidden: Vec::new(),
        }
    }
}

impl GreedyDecoder for IntDecoder<'_, '_> {
    fn reset(&mut self) {
        self.cache = self.engine.new_cache();
        self.hidden.clear();
    }

    fn feed(&mut self, token: u32) -> Result<u32> {
        let mut trace = Vec::new();
        let pos = self.cache.len();
        let logits = self.engine.forward_traced(&mut self.cache, token, pos, Some(&mut trace))?;
        self.hidden = trace
            .pop()
            .unwrap_or_default()
            .into_iter()
            .map(Q16::to_f64)
            .collect();
        Ok(argmax_lowest(&logits) as u32)
    }

    fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    fn max_ctx(&self) -> usize {
        self.engine.model().config.max_ctx
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_horizon(a: &dyn GreedyDecoder, prompt: &[u32], horizon: usize) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput);
    }
    if prompt.len() + horizon > a.max_ctx() {
        return Err(Error::ContextOverflow {
            pos: prompt.len() + horizon,
            max_ctx: a.max_ctx(),
        });
    }
    Ok(())
}

fn prefill(d: &mut dyn GreedyDecoder, prompt: &[u32]) -> Result<u32> {
    d.reset();
    let mut next = 0;
    for &t in prompt {
        next = d.feed(t)?;
    }
    Ok(next)
}

/// Decodes greedily under both decoders in lockstep and returns the index of
/// the first generated token on which they disagree.
pub fn first_divergence(
    a: &mut dyn GreedyDecoder,
    b: &mut dyn GreedyDecoder,
    prompt: &[u32],
    horizon: usize,
) -> Result<Option<usize>> {
    check_horizon(a, prompt, horizon)?;
    check_horizon(b, prompt, horizon)?;
    let mut ta = prefill(a, prompt)?;
    let mut tb = prefill(b, prompt)?;
    for step in 0..horizon {
        if ta != tb {
            return Ok(Some(step));
        }
        if step + 1 < horizon {
            ta = a.feed(ta)?;
            tb = b.feed(tb)?;
        }
    }
    Ok(None)
}

/// [`first_divergence`] for two float lane configurations of one model.
pub fn first_divergence_float(
    model: &FloatModel,
    prompt: &[u32],
    cfg_a: LaneConfig,
    cfg_b: LaneConfig,
    horizon: usize,
) -> Result<Option<usize>> {
    let mut a = FloatDecoder::new(model, cfg_a);
    let mut b = FloatDecoder::new(model, cfg_b);
    first_divergence(&mut a, &mut b, prompt, horizon)
}

/// Feeds `input` under both lane configurations and returns
/// `||x_a - x_b||_2` of the residual stream after each block, measured at the
/// last input position.
pub fn measure_layer_divergence(
    model: &FloatModel,
    input: &[u32],
    cfg_a: LaneConfig,
    cfg_b: LaneConfig,
) -> Result<Vec<f64>> {
    let (last, head) = input.split_last().ok_or(Error::EmptyInput)?;
    let mut a = FloatSession::new(model, cfg_a);
    let mut b = FloatSession::new(model, cfg_b);
    for &t in head {
        a.forward(t, None)?;
        b.forward(t, None)?;
    }
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    a.forward(*last, Some(&mut ta))?;
    b.forward(*last, Some(&mut tb))?;
    Ok(ta
        .iter()
        .zip(&tb)
        .map(|(x, y)| {
            let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = y.iter().map(|&v| v as f64).collect();
            l2_distance(&x, &y)
        })
        .collect())
}

/// One generation step of a side-by-side run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l2: f64,
    pub token_a: u32,
    pub token_b: u32,
}

/// Runs both decoders for `horizon` steps, each following its own greedy
/// choices, and records the final-block divergence and the token pair at every
/// step.
pub fn divergence_trace(
    a: &mut dyn GreedyDecoder,
    b: &mut dyn GreedyDecoder,
    prompt: &[u32],
    horizon: usize,
) -> Result<Vec<StepRecord>> {
    check_horizon(a, prompt, horizon)?;
    check_horizon(b, prompt, horizon)?;
    let mut ta = prefill(a, prompt)?;
    let mut tb = prefill(b, prompt)?;
    let mut rows = Vec::with_capacity(horizon);
    for step in 0..horizon {
        rows.push(StepRecord {
            step,
            l2: l2_distance(a.hidden(), b.hidden()),
            token_a: ta,
            token_b: tb,
        });
        if step + 1 < horizon {
            ta = a.feed(ta)?;
            tb = b.feed(tb)?;
        }
    }
    Ok(rows)
}

/// `step,l2,token_a,token_b` CSV.
pub fn steps_csv(rows: &[StepRecord]) -> String {
    let mut out = String::from("step,l2,token_a,token_b\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.9e},{},{}", r.step, r.l2, r.token_a, r.token_b);
    }
    out
}

/// `layer,l2` CSV.
pub fn layers_csv(divergence: &[f64]) -> String {
    let mut out = String::from("layer,l2\n");
    for (i, d) in divergence.iter().enumerate() {
        let _ = writeln!(out, "{i},{d:.9e}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ExecConfig;
    use crate::modelio::{gen_toy_model, ModelConfig};

    fn lanes(n: usize) -> LaneConfig {
        LaneConfig::new(n).unwrap()
    }

    #[test]
    fn rounding_counterexample() {
        let e = 2f32.powi(-24);
        let v = [1.0, e, e, e];
        assert_eq!(fsum_lanes(&v, lanes(1)).to_bits(), 1.0f32.to_bits());
        assert_eq!(
            fsum_lanes(&v, lanes(2)).to_bits(),
            (1.0f32 + 2f32.powi(-23)).to_bits()
        );
    }

    #[test]
    fn lane_validation() {
        for n in [0, 3, 5, 16] {
            assert_eq!(LaneConfig::new(n), Err(Error::InvalidLanes(n)));
        }
    }

    #[test]
    fn single_lane_is_sequential() {
        let v: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
        let mut s = 0.0f32;
        for x in &v {
            s += x;
        }
        assert_eq!(fsum_lanes(&v, lanes(1)).to_bits(), s.to_bits());
        assert_eq!(fsum_lanes(&[], lanes(4)), 0.0);
    }

    #[test]
    fn four_lanes_fold_pairwise() {
        let v = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        // acc = [1+5, 2+6, 3, 4] -> (6+8) + (3+4)
        assert_eq!(fsum_lanes(&v, lanes(4)), 21.0);
    }

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ffn: 24,
            vocab: 32,
            max_ctx: 40,
            rope_theta: 10000.0,
        }
    }

    #[test]
    fn same_lanes_never_diverge() {
        let m = gen_toy_model(1, &small()).unwrap();
        let f = FloatModel::from_model(&m).unwrap();
        assert_eq!(first_divergence_float(&f, &[1, 2], lanes(4), lanes(4), 30).unwrap(), None);
        let d = measure_layer_divergence(&f, &[1, 2, 3], lanes(2), lanes(2)).unwrap();
        assert_eq!(d, vec![0.0; 3]);
    }

    #[test]
    fn integer_decoders_never_diverge() {
        let m = gen_toy_model(1, &small()).unwrap();
        let e1 = Engine::new(&m, ExecConfig::default()).unwrap();
        let e2 = Engine::new(&m, ExecConfig::threads(3).with_chunk(5)).unwrap();
        let mut a = IntDecoder::new(&e1);
        let mut b = IntDecoder::new(&e2);
        assert_eq!(first_divergence(&mut a, &mut b, &[4], 39).unwrap(), None);
        let rows = divergence_trace(&mut a, &mut b, &[4], 10).unwrap();
        assert!(rows.iter().all(|r| r.l2 == 0.0 && r.token_a == r.token_b));
    }

    #[test]
    fn float_greedy_agrees_with_integer_early_on() {
        // Same weights, same architecture: the two backends should usually pick
        // the same first token on a shallow model.
        let m = gen_toy_model(2, &small()).unwrap();
        let f = FloatModel::from_model(&m).unwrap();
        let e = Engine::new(&m, ExecConfig::default()).unwrap();
        let mut fd = FloatDecoder::new(&f, lanes(1));
        let mut id = IntDecoder::new(&e);
        let agree = (0..32u32)
            .filter(|&t| {
                fd.reset();
                id.reset();
                fd.feed(t).unwrap() == id.feed(t).unwrap()
            })
            .count();
        assert!(agree >= 24, "only {agree}/32 first tokens agree");
    }

    #[test]
    fn horizon_is_checked() {
        let m = gen_toy_model(1, &small()).unwrap();
        let f = FloatModel::from_model(&m).unwrap();
        assert!(first_divergence_float(&f, &[1, 2], lanes(1), lanes(2), 39).is_err());
        assert!(first_divergence_float(&f, &[], lanes(1), lanes(2), 3).is_err());
    }

    #[test]
    fn csv_shapes() {
        let s = layers_csv(&[0.0, 1.5e-7]);
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("layer,l2\n0,"));
        let r = steps_csv(&[StepRecord {
            step: 0,
            l2: 0.0,
            token_a: 3,
            token_b: 4,
        }]);
        assert!(r.ends_with(",3,4\n"));
    }
}
