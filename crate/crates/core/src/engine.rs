//! Integer forward pass and decoding.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::{ThreadPool, ThreadPoolBuilder};

use crate::digest::{token_bytes, tokens_digest, Digest};
use crate::error::{Error, Result};
use crate::kernels::{attention_step, ffn_silu, residual_add_clamp, rmsnorm, softmax_q16, LayerKv, MatvecOrder};
use crate::modelio::ModelFile;
use crate::qarith::{saturate, RopeTables, Q16};

/// Execution knobs that must not change any output bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    /// Worker threads for head-parallel attention; 1 runs inline.
    pub threads: usize,
    pub order: MatvecOrder,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            threads: 1,
            order: MatvecOrder::default(),
        }
    }
}

impl ExecConfig {
    pub fn threads(threads: usize) -> Self {
        Self {
            threads,
            ..Self::default()
        }
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.order.chunk = Some(chunk);
        self
    }
}

/// Per-layer key/value history for one generation session.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, i: usize) -> &LayerKv {
        &self.layers[i]
    }

    fn truncate(&mut self, positions: usize) {
        for l in &mut self.layers {
            l.truncate(positions);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationResult {
    /// Generated tokens only; the prompt is not included.
    pub token_ids: Vec<u32>,
    /// BLAKE3 of `token_ids` as concatenated little-endian `u32`.
    pub output_hash: Digest,
    pub logits: Option<Vec<Vec<Q16>>>,
}

impl GenerationResult {
    fn new(token_ids: Vec<u32>, logits: Option<Vec<Vec<Q16>>>) -> Self {
        let output_hash = tokens_digest(&token_ids);
        Self {
            token_ids,
            output_hash,
            logits,
        }
    }
}

pub struct Engine<'m> {
    model: &'m ModelFile,
    tables: RopeTables,
    pool: Option<ThreadPool>,
    order: MatvecOrder,
}

impl<'m> Engine<'m> {
    /// Builds RoPE tables from the model config.
    pub fn new(model: &'m ModelFile, exec: ExecConfig) -> Result<Self> {
        let cfg = &model.config;
        let tables = RopeTables::build(cfg.rope_theta, cfg.d_head(), cfg.max_ctx)?;
        Self::with_tables(model, tables, exec)
    }

    /// Uses externally supplied (for example imported) RoPE tables.
    pub fn with_tables(model: &'m ModelFile, tables: RopeTables, exec: ExecConfig) -> Result<Self> {
        model.validate()?;
        let cfg = &model.config;
        if tables.half_dim() * 2 != cfg.d_head() || tables.max_ctx() < cfg.max_ctx {
            return Err(Error::InvalidArgument(format!(
                "rope tables cover {} positions x {} pairs, model needs {} x {}",
                tables.max_ctx(),
                tables.half_dim(),
                cfg.max_ctx,
                cfg.d_head() / 2
            )));
        }
        let pool = match exec.threads {
            0 => return Err(Error::InvalidArgument("threads must be at least 1".into())),
            1 => None,
            n => Some(
                ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::ThreadPool(e.to_string()))?,
            ),
        };
        Ok(Self {
            model,
            tables,
            pool,
            order: exec.order,
        })
    }

    pub fn model(&self) -> &ModelFile {
        self.model
    }

    pub fn tables(&self) -> &RopeTables {
        &self.tables
    }

    pub fn new_cache(&self) -> KvCache {
        let cfg = &self.model.config;
        KvCache {
            layers: (0..cfg.n_layers)
                .map(|_| LayerKv::new(cfg.n_heads, cfg.d_head(), cfg.max_ctx))
                .collect(),
        }
    }

    /// Logits for `token` at `pos`; appends this position to `cache`.
    pub fn forward(&self, cache: &mut KvCache, token: u32, pos: usize) -> Result<Vec<Q16>> {
        self.forward_traced(cache, token, pos, None)
    }

    /// Like [`forward`](Self::forward), also recording the residual stream after
    /// every block.
    pub fn forward_traced(
        &self,
        cache: &mut KvCache,
        token: u32,
        pos: usize,
        trace: Option<&mut Vec<Vec<Q16>>>,
    ) -> Result<Vec<Q16>> {
        let cfg = &self.model.config;
        if token as usize >= cfg.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: cfg.vocab,
            });
        }
        if pos >= cfg.max_ctx {
            return Err(Error::ContextOverflow {
                pos,
                max_ctx: cfg.max_ctx,
            });
        }
        if pos != cache.len() {
            return Err(Error::InvalidArgument(format!(
                "forward at position {pos} with {} cached positions",
                cache.len()
            )));
        }
        let out = self.run_blocks(cache, token, pos, trace);
        if out.is_err() {
            cache.truncate(pos);
        }
        out
    }

    fn run_blocks(
        &self,
        cache: &mut KvCache,
        token: u32,
        pos: usize,
        mut trace: Option<&mut Vec<Vec<Q16>>>,
    ) -> Result<Vec<Q16>> {
        let m = self.model;
        let order = self.order;
        let mut x = m.tok_embd.dequantize_row_q16(token as usize);
        for (layer, kv) in m.layers.iter().zip(&mut cache.layers) {
            let h = rmsnorm(&x, &layer.attn_norm)?;
            let q = order.apply(&layer.wq, &h)?;
            let k = order.apply(&layer.wk, &h)?;
            let v = order.apply(&layer.wv, &h)?;
            let att = attention_step(&q, &k, &v, kv, pos, &self.tables, self.pool.as_ref())?;
            let att = order.apply(&layer.wo, &att)?;
            x = residual_add_clamp(&x, &att)?;

            let h = rmsnorm(&x, &layer.ffn_norm)?;
            let f = ffn_silu(&h, &layer.w_gate, &layer.w_up, &layer.w_down, order)?;
            x = residual_add_clamp(&x, &f)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(x.clone());
            }
        }
        let h = rmsnorm(&x, &m.output_norm)?;
        order.apply(&m.output, &h)
    }

    fn check_request(&self, prompt: &[u32], max_new: usize) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput);
        }
        let max_ctx = self.model.config.max_ctx;
        if prompt.len() + max_new > max_ctx {
            return Err(Error::ContextOverflow {
                pos: prompt.len() + max_new,
                max_ctx,
            });
        }
        Ok(())
    }

    /// Feeds the prompt token by token and returns the last logits.
    fn prefill(&self, cache: &mut KvCache, prompt: &[u32]) -> Result<Vec<Q16>> {
        let mut logits = Vec::new();
        for (pos, &tok) in prompt.iter().enumerate() {
            logits = self.forward(cache, tok, pos)?;
        }
        Ok(logits)
    }

    fn decode(
        &self,
        prompt: &[u32],
        max_new: usize,
        keep_logits: bool,
        mut select: impl FnMut(&[Q16]) -> Result<u32>,
    ) -> Result<GenerationResult> {
        self.check_request(prompt, max_new)?;
        let mut cache = self.new_cache();
        let mut logits = self.prefill(&mut cache, prompt)?;
        let mut tokens = Vec::with_capacity(max_new);
        let mut kept = keep_logits.then(Vec::new);
        for step in 0..max_new {
            let tok = select(&logits)?;
            tokens.push(tok);
            if let Some(k) = kept.as_mut() {
                k.push(std::mem::take(&mut logits));
            }
            if step + 1 < max_new {
                logits = self.forward(&mut cache, tok, prompt.len() + step)?;
            }
        }
        Ok(GenerationResult::new(tokens, kept))
    }

    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize) -> Result<GenerationResult> {
        self.decode(prompt, max_new, false, |l| Ok(argmax_lowest(l) as u32))
    }

    pub fn generate_greedy_with_logits(
        &self,
        prompt: &[u32],
        max_new: usize,
    ) -> Result<GenerationResult> {
        self.decode(prompt, max_new, true, |l| Ok(argmax_lowest(l) as u32))
    }

    /// Temperature sampling from a ChaCha20 stream keyed by
    /// `BLAKE3(model bytes || prompt bytes)`.
    pub fn generate_sampled(
        &self,
        prompt: &[u32],
        max_new: usize,
        temperature: Q16,
    ) -> Result<GenerationResult> {
        if temperature.raw() <= 0 {
            return Err(Error::NonPositiveTemperature(temperature.raw()));
        }
        let mut rng = ChaCha20Rng::from_seed(sampling_seed(&self.model.to_bytes(), prompt).0);
        self.decode(prompt, max_new, false, |l| {
            sample_index(l, temperature, &mut rng).map(|i| i as u32)
        })
    }
}

/// Index of the largest logit; exact ties go to the lowest index.
pub fn argmax_lowest(logits: &[Q16]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn sampling_seed(model_bytes: &[u8], prompt: &[u32]) -> Digest {
    Digest::of_parts(&[model_bytes, &token_bytes(prompt)])
}

/// Draws one index from `softmax(logits / temperature)`.
///
/// Logits are divided by the temperature with widened integer division. A
/// uniform `u32` draw is mapped onto the truncated softmax mass `S`, and the
/// first index whose cumulative weight exceeds `draw * S / 2^32` is chosen.
pub fn sample_index(logits: &[Q16], temperature: Q16, rng: &mut impl RngCore) -> Result<usize> {
    if temperature.raw() <= 0 {
        return Err(Error::NonPositiveTemperature(temperature.raw()));
    }
    let scaled: Vec<Q16> = logits
        .iter()
        .map(|l| Q16(saturate(((l.raw() as i128) << 16) / temperature.raw() as i128)))
        .collect();
    let probs = softmax_q16(&scaled)?;
    let mass: i64 = probs.iter().map(|p| p.raw()).sum();
    let threshold = ((rng.next_u32() as u128 * mass as u128) >> 32) as i64;
    let mut cum = 0i64;
    for (i, p) in probs.iter().enumerate() {
        cum += p.raw();
        if cum > threshold {
            return Ok(i);
        }
    }
    unreachable!("threshold is below the total mass")
}
