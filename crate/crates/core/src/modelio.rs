//! Byte-exact model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DIM1" | u32 version
//! config: u32 n_layers, d_model, n_heads, d_ffn, vocab, max_ctx | f64 rope_theta
//! directory: u32 count, then per tensor
//!     u16 name_len | name | u32 rows | u32 cols | u8 kind (0 = int8-quant, 1 = q16-dense)
//! payloads in directory order:
//!     int8-quant: rows x i64 scale, then rows*cols x i8 row-major
//!     q16-dense:  rows*cols x i64 row-major
//! ```
//!
//! The encoding is canonical, so `weight_hash` of the bytes is the model identity.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::qarith::{q16_from_ratio, Q16};
use crate::wire::Reader;

const MAGIC: &[u8; 4] = b"DIM1";
const VERSION: u32 = 1;
const KIND_INT8: u8 = 0;
const KIND_Q16: u8 = 1;

/// Largest supported model width; keeps every dense accumulator below 2^44.
pub const MAX_D_MODEL: usize = 8192;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub max_ctx: usize,
    pub rope_theta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 16,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab: 256,
            max_ctx: 512,
            rope_theta: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 {
            return bad("n_heads must be at least 1".into());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_head().is_multiple_of(2) {
            return bad(format!("d_head {} must be even for RoPE", self.d_head()));
        }
        if self.d_model > MAX_D_MODEL {
            return bad(format!("d_model {} exceeds {MAX_D_MODEL}", self.d_model));
        }
        if self.d_ffn == 0 {
            return bad("d_ffn must be at least 1".into());
        }
        if self.vocab < 2 {
            return bad("vocab must be at least 2".into());
        }
        if self.max_ctx == 0 {
            return bad("max_ctx must be at least 1".into());
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return bad(format!("rope_theta {} must be positive", self.rope_theta));
        }
        for v in [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.vocab,
            self.max_ctx,
        ] {
            if v > u32::MAX as usize {
                return bad(format!("dimension {v} does not fit in u32"));
            }
        }
        Ok(())
    }
}

/// INT8 weight matrix with one Q16 scale per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTensor {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    scales: Vec<Q16>,
}

impl QuantTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>, scales: Vec<Q16>) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidTensor {
            name: String::new(),
            reason,
        };
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if scales.len() != rows {
            return Err(invalid(format!("{} scales for {rows} rows", scales.len())));
        }
        if data.contains(&i8::MIN) {
            return Err(invalid("weight -128 is outside [-127, 127]".into()));
        }
        if let Some(s) = scales.iter().find(|s| s.raw() <= 0) {
            return Err(invalid(format!("non-positive scale {}", s.raw())));
        }
        Ok(Self {
            rows,
            cols,
            data,
            scales,
        })
    }

    /// Quantizes a row-major real matrix row by row.
    pub fn quantize(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols || cols == 0 {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        let mut scales = Vec::with_capacity(rows);
        for row in values.chunks(cols) {
            let (s, q) = quantize_row(row)?;
            scales.push(s);
            data.extend(q);
        }
        Self::new(rows, cols, data, scales)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[i8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn scale(&self, i: usize) -> Q16 {
        self.scales[i]
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn scales(&self) -> &[Q16] {
        &self.scales
    }

    /// Row `i` as Q16 values `w * s`.
    pub fn dequantize_row_q16(&self, i: usize) -> Vec<Q16> {
        let s = self.scales[i].raw();
        self.row(i).iter().map(|&w| Q16(w as i64 * s)).collect()
    }
}

/// Symmetric per-row quantization: `s = max|row| / 127` stored in Q16, weights
/// `round(row / s)` clamped to `[-127, 127]`. An all-zero row gets scale ONE.
pub fn quantize_row(row: &[f64]) -> Result<(Q16, Vec<i8>)> {
    if row.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !max.is_finite() {
        return Err(Error::InvalidArgument("row contains non-finite values".into()));
    }
    if max == 0.0 {
        return Ok((Q16::ONE, vec![0; row.len()]));
    }
    // Rows whose scale would round to zero raw keep the smallest positive scale.
    let scale = Q16::from_f64(max / 127.0).max(Q16(1));
    let q = row
        .iter()
        .map(|v| (v * 127.0 / max).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok((scale, q))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWeights {
    pub attn_norm: Vec<Q16>,
    pub wq: QuantTensor,
    pub wk: QuantTensor,
    pub wv: QuantTensor,
    pub wo: QuantTensor,
    pub ffn_norm: Vec<Q16>,
    pub w_gate: QuantTensor,
    pub w_up: QuantTensor,
    pub w_down: QuantTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub config: ModelConfig,
    pub tok_embd: QuantTensor,
    pub layers: Vec<LayerWeights>,
    pub output_norm: Vec<Q16>,
    pub output: QuantTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int8,
    Q16Dense,
}

struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    kind: Kind,
}

fn directory(cfg: &ModelConfig) -> Vec<Entry> {
    let e = |name: String, rows, cols, kind| Entry {
        name,
        rows,
        cols,
        kind,
    };
    let d = cfg.d_model;
    let mut dir = vec![e("tok_embd".into(), cfg.vocab, d, Kind::Int8)];
    for i in 0..cfg.n_layers {
        let p = format!("blk.{i}.");
        dir.push(e(format!("{p}attn_norm"), 1, d, Kind::Q16Dense));
        for proj in ["attn_q", "attn_k", "attn_v", "attn_output"] {
            dir.push(e(format!("{p}{proj}"), d, d, Kind::Int8));
        }
        dir.push(e(format!("{p}ffn_norm"), 1, d, Kind::Q16Dense));
        dir.push(e(format!("{p}ffn_gate"), cfg.d_ffn, d, Kind::Int8));
        dir.push(e(format!("{p}ffn_up"), cfg.d_ffn, d, Kind::Int8));
        dir.push(e(format!("{p}ffn_down"), d, cfg.d_ffn, Kind::Int8));
    }
    dir.push(e("output_norm".into(), 1, d, Kind::Q16Dense));
    dir.push(e("output".into(), cfg.vocab, d, Kind::Int8));
    dir
}

enum Payload<'a> {
    Int8(&'a QuantTensor),
    Dense(&'a [Q16]),
}

enum Owned {
    Int8(QuantTensor),
    Dense(Vec<Q16>),
}

impl ModelFile {
    pub fn n_params(&self) -> usize {
        self.payloads()
            .iter()
            .map(|p| match p {
                Payload::Int8(t) => t.rows * t.cols,
                Payload::Dense(v) => v.len(),
            })
            .sum()
    }

    fn payloads(&self) -> Vec<Payload<'_>> {
        let mut out = vec![Payload::Int8(&self.tok_embd)];
        for l in &self.layers {
            out.push(Payload::Dense(&l.attn_norm));
            out.extend([&l.wq, &l.wk, &l.wv, &l.wo].map(Payload::Int8));
            out.push(Payload::Dense(&l.ffn_norm));
            out.extend([&l.w_gate, &l.w_up, &l.w_down].map(Payload::Int8));
        }
        out.push(Payload::Dense(&self.output_norm));
        out.push(Payload::Int8(&self.output));
        out
    }

    /// Checks every tensor against the shapes the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        for (entry, payload) in directory(&self.config).iter().zip(self.payloads()) {
            let (rows, cols, kind) = match payload {
                Payload::Int8(t) => (t.rows, t.cols, Kind::Int8),
                Payload::Dense(v) => (1, v.len(), Kind::Q16Dense),
            };
            if (rows, cols, kind) != (entry.rows, entry.cols, entry.kind) {
                return Err(Error::InvalidTensor {
                    name: entry.name.clone(),
                    reason: format!(
                        "expected {}x{} {:?}, found {rows}x{cols} {kind:?}",
                        entry.rows, entry.cols, entry.kind
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let dir = directory(cfg);
        let mut out = Vec::with_capacity(self.n_params() + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            cfg.n_layers,
            cfg.d_model,
            cfg.n_heads,
            cfg.d_ffn,
            cfg.vocab,
            cfg.max_ctx,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&cfg.rope_theta.to_le_bytes());
        out.extend_from_slice(&(dir.len() as u32).to_le_bytes());
        for e in &dir {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.rows as u32).to_le_bytes());
            out.extend_from_slice(&(e.cols as u32).to_le_bytes());
            out.push(match e.kind {
                Kind::Int8 => KIND_INT8,
                Kind::Q16Dense => KIND_Q16,
            });
        }
        for p in self.payloads() {
            match p {
                Payload::Int8(t) => {
                    for s in &t.scales {
                        out.extend_from_slice(&s.raw().to_le_bytes());
                    }
                    out.extend(t.data.iter().map(|&w| w as u8));
                }
                Payload::Dense(v) => {
                    for x in v {
                        out.extend_from_slice(&x.raw().to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            n_layers: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_ffn: dims[3],
            vocab: dims[4],
            max_ctx: dims[5],
            rope_theta: r.f64()?,
        };
        config.validate()?;

        let expected = directory(&config);
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::InvalidConfig(format!(
                "directory lists {count} tensors, config implies {}",
                expected.len()
            )));
        }
        for e in &expected {
            let len = r.u16()? as usize;
            let name = String::from_utf8_lossy(r.take(len)?).into_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let kind = match r.u8()? {
                KIND_INT8 => Kind::Int8,
                KIND_Q16 => Kind::Q16Dense,
                k => {
                    return Err(Error::InvalidTensor {
                        name,
                        reason: format!("unknown kind {k}"),
                    })
                }
            };
            if name != e.name || rows != e.rows || cols != e.cols || kind != e.kind {
                return Err(Error::InvalidTensor {
                    name,
                    reason: format!(
                        "expected {} {}x{} {:?}, found {rows}x{cols} {kind:?}",
                        e.name, e.rows, e.cols, e.kind
                    ),
                });
            }
        }

        let mut tensors = expected
            .iter()
            .map(|e| read_payload(&mut r, e))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        r.finish()?;

        let tok_embd = next_int8(&mut tensors);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: next_dense(&mut tensors),
                wq: next_int8(&mut tensors),
                wk: next_int8(&mut tensors),
                wv: next_int8(&mut tensors),
                wo: next_int8(&mut tensors),
                ffn_norm: next_dense(&mut tensors),
                w_gate: next_int8(&mut tensors),
                w_up: next_int8(&mut tensors),
                w_down: next_int8(&mut tensors),
            });
        }
        let output_norm = next_dense(&mut tensors);
        let output = next_int8(&mut tensors);
        Ok(ModelFile {
            config,
            tok_embd,
            layers,
            output_norm,
            output,
        })
    }
}

// The directory fixes the payload order and kinds, so these cannot mismatch.
fn next_int8(it: &mut impl Iterator<Item = Owned>) -> QuantTensor {
    match it.next() {
        Some(Owned::Int8(t)) => t,
        _ => unreachable!("directory order fixes payload kinds"),
    }
}

fn next_dense(it: &mut impl Iterator<Item = Owned>) -> Vec<Q16> {
    match it.next() {
        Some(Owned::Dense(v)) => v,
        _ => unreachable!("directory order fixes payload kinds"),
    }
}

fn read_payload(r: &mut Reader, e: &Entry) -> Result<Owned> {
    let tensor_err = |reason: String| Error::InvalidTensor {
        name: e.name.clone(),
        reason,
    };
    match e.kind {
        Kind::Int8 => {
            let scales = (0..e.rows)
                .map(|_| r.i64().map(Q16))
                .collect::<Result<Vec<_>>>()?;
            let data = r
                .take(e.rows * e.cols)?
                .iter()
                .map(|&b| b as i8)
                .collect::<Vec<_>>();
            QuantTensor::new(e.rows, e.cols, data, scales)
                .map(Owned::Int8)
                .map_err(|err| match err {
                    Error::InvalidTensor { reason, .. } => tensor_err(reason),
                    other => other,
                })
        }
        Kind::Q16Dense => (0..e.rows * e.cols)
            .map(|_| r.i64().map(Q16))
            .collect::<Result<Vec<_>>>()
            .map(Owned::Dense),
    }
}

/// BLAKE3 digest of the exact serialized model bytes.
pub fn weight_hash(model_bytes: &[u8]) -> Digest {
    Digest::of(model_bytes)
}

fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Uniform weights in `[-127, 127]` by rejection from a ChaCha20 byte stream.
struct WeightStream {
    rng: ChaCha20Rng,
    buf: [u8; 64],
    pos: usize,
}

impl WeightStream {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            buf: [0; 64],
            pos: 64,
        }
    }

    fn next_weight(&mut self) -> i8 {
        loop {
            if self.pos == self.buf.len() {
                self.rng.fill_bytes(&mut self.buf);
                self.pos = 0;
            }
            let b = self.buf[self.pos];
            self.pos += 1;
            if b < 255 {
                return (b as i16 - 127) as i8;
            }
        }
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<QuantTensor> {
        let scale = q16_from_ratio(1, 127 * isqrt(cols) as i64)?;
        let data = (0..rows * cols).map(|_| self.next_weight()).collect();
        QuantTensor::new(rows, cols, data, vec![scale; rows])
    }
}

/// Deterministic random toy model. Weights come from a ChaCha20 stream keyed
/// by `seed`; every row scale is `1 / (127 * floor(sqrt(cols)))` and all norm
/// gains are ONE.
pub fn gen_toy_model(seed: u64, config: &ModelConfig) -> Result<ModelFile> {
    config.validate()?;
    let mut ws = WeightStream::new(seed);
    let d = config.d_model;
    let tok_embd = ws.tensor(config.vocab, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: vec![Q16::ONE; d],
            wq: ws.tensor(d, d)?,
            wk: ws.tensor(d, d)?,
            wv: ws.tensor(d, d)?,
            wo: ws.tensor(d, d)?,
            ffn_norm: vec![Q16::ONE; d],
            w_gate: ws.tensor(config.d_ffn, d)?,
            w_up: ws.tensor(config.d_ffn, d)?,
            w_down: ws.tensor(d, config.d_ffn)?,
        });
    }
    let output = ws.tensor(config.vocab, d)?;
    Ok(ModelFile {
        config: config.clone(),
        tok_embd,
        layers,
        output_norm: vec![Q16::ONE; d],
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            vocab: 16,
            max_ctx: 32,
            rope_theta: 10000.0,
        }
    }

    #[test]
    fn quantize_row_examples() {
        let (s, q) = quantize_row(&[1.0, -0.5]).unwrap();
        assert_eq!((s.raw(), q), (516, vec![127, -64]));
        let (s, q) = quantize_row(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!((s, q), (Q16::ONE, vec![0, 0, 0]));
        let (s, q) = quantize_row(&[-2.0]).unwrap();
        assert_eq!((s.raw(), q), (1032, vec![-127]));
        assert_eq!(quantize_row(&[]), Err(Error::EmptyInput));
    }

    #[test]
    fn tiny_rows_keep_positive_scale() {
        let (s, q) = quantize_row(&[1e-9, -1e-9]).unwrap();
        assert_eq!(s.raw(), 1);
        assert_eq!(q, vec![127, -127]);
    }

    #[test]
    fn quant_tensor_rejects_invariant_violations() {
        assert!(QuantTensor::new(1, 2, vec![0, -128], vec![Q16::ONE]).is_err());
        assert!(QuantTensor::new(1, 2, vec![0, 1], vec![Q16(0)]).is_err());
        assert!(QuantTensor::new(1, 2, vec![0], vec![Q16::ONE]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.n_layers = 0;
        assert!(matches!(gen_toy_model(1, &c), Err(Error::InvalidConfig(_))));
        let mut c = tiny();
        c.d_model = 9;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.d_model = 16384;
        c.n_heads = 2;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.vocab = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toy_model_scales() {
        let m = gen_toy_model(3, &tiny()).unwrap();
        // cols = 8 -> floor(sqrt(8)) = 2 -> 1/254
        assert_eq!(m.layers[0].wq.scale(0).raw(), 258);
        // cols = 12 -> 3 -> 1/381
        assert_eq!(m.layers[0].w_down.scale(0).raw(), 172);
        assert!(m.layers[0].attn_norm.iter().all(|&g| g == Q16::ONE));
        assert!(m.tok_embd.data().iter().all(|&w| w != i8::MIN));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = gen_toy_model(1, &tiny()).unwrap().to_bytes();
        let b = gen_toy_model(1, &tiny()).unwrap().to_bytes();
        let c = gen_toy_model(2, &tiny()).unwrap().to_bytes();
        assert_eq!(weight_hash(&a), weight_hash(&b));
        assert_ne!(weight_hash(&a), weight_hash(&c));
    }

    #[test]
    fn round_trip_is_canonical() {
        let m = gen_toy_model(9, &tiny()).unwrap();
        let bytes = m.to_bytes();
        let back = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        back.validate().unwrap();
    }

    #[test]
    fn body_byte_flip_changes_hash_only() {
        let bytes = gen_toy_model(9, &tiny()).unwrap().to_bytes();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        // last byte is an int8 weight of the output head; 0x01 keeps it in range
        flipped[last] ^= 0x01;
        if flipped[last] == 0x80 {
            flipped[last] ^= 0x03;
        }
        ModelFile::from_bytes(&flipped).unwrap();
        assert_ne!(weight_hash(&bytes), weight_hash(&flipped));
    }

    #[test]
    fn decode_errors_are_distinct() {
        let bytes = gen_toy_model(9, &tiny()).unwrap().to_bytes();
        assert!(matches!(
            ModelFile::from_bytes(&bytes[..10]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            ModelFile::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"GGUF");
        assert!(matches!(ModelFile::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(ModelFile::from_bytes(&bad), Err(Error::UnsupportedVersion(2)));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0]);
        assert_eq!(ModelFile::from_bytes(&long), Err(Error::TrailingBytes(2)));
        let mut bad = bytes;
        let last = bad.len() - 1;
        bad[last] = 0x80;
        assert!(matches!(
            ModelFile::from_bytes(&bad),
            Err(Error::InvalidTensor { .. })
        ));
    }
}
