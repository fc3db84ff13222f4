//! Python bindings: model generation, integer inference, attestations and
//! the trust metrics.

use std::borrow::Cow;

use detinfer::floatref::{first_divergence_float, fsum_lanes as fsum};
use detinfer::{
    gen_toy_model, make_attestation, trustlab, verify_by_reexecution, weight_hash, Attestation, Engine, ExecConfig,
    FloatModel, LaneConfig, ModelConfig, ModelFile, RopeTables, Q16,
};
use num_bigint::BigUint;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: detinfer::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn lane_config(n: usize) -> PyResult<LaneConfig> {
    LaneConfig::new(n).map_err(err)
}

/// A quantized toy model together with its canonical bytes.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    model: ModelFile,
    bytes: Vec<u8>,
}

impl PyModel {
    fn wrap(model: ModelFile) -> Self {
        let bytes = model.to_bytes();
        Self { model, bytes }
    }

    fn engine(&self, threads: usize, chunk: Option<usize>, rope_tables: Option<&[u8]>) -> PyResult<Engine<'_>> {
        let mut exec = ExecConfig::threads(threads);
        if let Some(c) = chunk {
            exec = exec.with_chunk(c);
        }
        match rope_tables {
            Some(b) => Engine::with_tables(&self.model, RopeTables::from_bytes(b).map_err(err)?, exec),
            None => Engine::new(&self.model, exec),
        }
        .map_err(err)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (seed, layers=16, dmodel=64, heads=4, ffn=128, vocab=256, ctx=512, theta=10000.0))]
    #[allow(clippy::too_many_arguments)]
    fn generate_toy(
        seed: u64,
        layers: usize,
        dmodel: usize,
        heads: usize,
        ffn: usize,
        vocab: usize,
        ctx: usize,
        theta: f64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            n_layers: layers,
            d_model: dmodel,
            n_heads: heads,
            d_ffn: ffn,
            vocab,
            max_ctx: ctx,
            rope_theta: theta,
        };
        Ok(Self::wrap(gen_toy_model(seed, &cfg).map_err(err)?))
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        Ok(Self::wrap(ModelFile::from_bytes(bytes).map_err(err)?))
    }

    fn to_bytes(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn weight_hash(&self) -> String {
        weight_hash(&self.bytes).to_hex()
    }

    fn rope_tables(&self) -> PyResult<Cow<'static, [u8]>> {
        let c = &self.model.config;
        let t = RopeTables::build(c.rope_theta, c.d_head(), c.max_ctx).map_err(err)?;
        Ok(Cow::Owned(t.to_bytes()))
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.model.config.vocab
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    /// Returns `(tokens, output_hash_hex)`. A temperature switches to seeded
    /// sampling; otherwise decoding is greedy.
    #[pyo3(signature = (prompt, max_new, temperature=None, threads=1, chunk=None, rope_tables=None))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        py: Python<'_>,
        prompt: Vec<u32>,
        max_new: usize,
        temperature: Option<f64>,
        threads: usize,
        chunk: Option<usize>,
        rope_tables: Option<Vec<u8>>,
    ) -> PyResult<(Vec<u32>, String)> {
        let engine = self.engine(threads, chunk, rope_tables.as_deref())?;
        let r = py
            .detach(|| match temperature {
                Some(t) => engine.generate_sampled(&prompt, max_new, Q16::from_f64(t)),
                None => engine.generate_greedy(&prompt, max_new),
            })
            .map_err(err)?;
        Ok((r.token_ids, r.output_hash.to_hex()))
    }

    /// Greedy run followed by the 112-byte attestation record.
    #[pyo3(signature = (prompt, max_new, bond=0, challenge_period=0))]
    fn attest(&self, prompt: Vec<u32>, max_new: usize, bond: u64, challenge_period: u64) -> PyResult<Cow<'static, [u8]>> {
        let r = self.engine(1, None, None)?.generate_greedy(&prompt, max_new).map_err(err)?;
        let att = make_attestation(&self.bytes, &prompt, &r, bond, challenge_period);
        Ok(Cow::Owned(att.to_bytes().to_vec()))
    }

    /// First generated position where two float runs with different lane
    /// counts pick different tokens, or None.
    #[pyo3(signature = (prompt, horizon, lanes_a=2, lanes_b=8))]
    fn float_divergence(&self, prompt: Vec<u32>, horizon: usize, lanes_a: usize, lanes_b: usize) -> PyResult<Option<usize>> {
        let fm = FloatModel::from_model(&self.model).map_err(err)?;
        first_divergence_float(&fm, &prompt, lane_config(lanes_a)?, lane_config(lanes_b)?, horizon).map_err(err)
    }
}

/// "Confirmed" or "Refuted(stage)".
#[pyfunction]
fn verify(attestation: &[u8], model: &PyModel, prompt: Vec<u32>, max_new: usize) -> PyResult<String> {
    let att = Attestation::from_bytes(attestation).map_err(err)?;
    Ok(verify_by_reexecution(&att, &model.bytes, &prompt, max_new).map_err(err)?.to_string())
}

#[pyfunction]
fn attestation_text(attestation: &[u8]) -> PyResult<String> {
    Ok(Attestation::from_bytes(attestation).map_err(err)?.to_text())
}

#[pyfunction]
fn trust_entropy(probs: Vec<f64>) -> PyResult<f64> {
    let d = trustlab::PlatformDistribution::from_probs(&probs).map_err(err)?;
    Ok(trustlab::trust_entropy(&d))
}

#[pyfunction]
fn reject_prob(h_t: f64) -> PyResult<f64> {
    trustlab::reject_prob(h_t).map_err(err)
}

#[pyfunction]
fn simulate_protocol(probs: Vec<f64>, trials: u64, seed: u64) -> PyResult<f64> {
    let d = trustlab::PlatformDistribution::from_probs(&probs).map_err(err)?;
    trustlab::simulate_protocol(&d, trials, seed).map_err(err)
}

#[pyfunction]
fn decay_bound(eps: f64, lam: f64, layers: u32) -> PyResult<f64> {
    trustlab::decay_bound(eps, lam, layers).map_err(err)
}

#[pyfunction]
fn reduction_tree_count(d: u64) -> PyResult<BigUint> {
    trustlab::reduction_tree_count(d).map_err(err)
}

#[pyfunction]
fn fsum_lanes(values: Vec<f32>, lanes: usize) -> PyResult<f32> {
    Ok(fsum(&values, lane_config(lanes)?))
}

#[pymodule]
fn detinfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(attestation_text, m)?)?;
    m.add_function(wrap_pyfunction!(trust_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(reject_prob, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(decay_bound, m)?)?;
    m.add_function(wrap_pyfunction!(reduction_tree_count, m)?)?;
    m.add_function(wrap_pyfunction!(fsum_lanes, m)?)?;
    Ok(())
}
