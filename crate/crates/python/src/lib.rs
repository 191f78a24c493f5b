//! Python bindings. Results that have a JSON form cross the boundary as
//! plain dicts.

use deepvlf::codec::{init_params, load_checkpoint, save_checkpoint, OracleCodec, UniformCodec};
use deepvlf::eval::{baseline_uncoded, estimate};
use deepvlf::protocol::{compute_tau_plus, replay_verify, run_session, SessionTranscript};
use deepvlf::training::{exp_weight_coefficient, grad_check, train, GradCheckConfig, Phase};
use deepvlf::{BitMessage, ChannelParams, Codec, CodecParams, FeedbackMode, ProtocolConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: deepvlf::Error) -> PyErr {
    match e {
        deepvlf::Error::Io(e) => PyIOError::new_err(e.to_string()),
        deepvlf::Error::Divergence { .. } | deepvlf::Error::Replay { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn channel(forward_snr_db: f64, feedback_snr_db: Option<f64>) -> PyResult<ChannelParams> {
    let feedback = match feedback_snr_db {
        None => FeedbackMode::Noiseless,
        Some(s) if s == f64::INFINITY => FeedbackMode::Noiseless,
        Some(snr_db) => FeedbackMode::Awgn { snr_db },
    };
    ChannelParams::new(forward_snr_db, feedback).map_err(to_py)
}

/// Threshold, gate round, round cap and channel of a session.
#[pyclass(name = "ProtocolConfig", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyProtocol(ProtocolConfig);

#[pymethods]
impl PyProtocol {
    /// `tau_plus` is derived from `m`, the SNR and `gamma` unless given.
    #[new]
    #[pyo3(signature = (m, gamma, t_max, forward_snr_db, feedback_snr_db=None, tau_plus=None))]
    fn new(
        m: usize,
        gamma: f64,
        t_max: usize,
        forward_snr_db: f64,
        feedback_snr_db: Option<f64>,
        tau_plus: Option<usize>,
    ) -> PyResult<Self> {
        let ch = channel(forward_snr_db, feedback_snr_db)?;
        let cfg = match tau_plus {
            Some(t) => ProtocolConfig::new(gamma, t, t_max, ch),
            None => ProtocolConfig::derived(m, gamma, t_max, ch),
        };
        cfg.map(Self).map_err(to_py)
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    #[getter]
    fn tau_plus(&self) -> usize {
        self.0.tau_plus
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.0.t_max
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

enum Inner {
    Neural(CodecParams),
    Oracle(OracleCodec),
    Uniform(UniformCodec),
}

/// A trained codec or one of the test stubs.
#[pyclass(name = "Codec", frozen)]
struct PyCodec(Inner);

impl PyCodec {
    fn codec(&self) -> &dyn Codec {
        match &self.0 {
            Inner::Neural(p) => p,
            Inner::Oracle(o) => o,
            Inner::Uniform(u) => u,
        }
    }

    fn neural(&self) -> PyResult<&CodecParams> {
        match &self.0 {
            Inner::Neural(p) => Ok(p),
            _ => Err(PyValueError::new_err("not a neural codec")),
        }
    }
}

fn codec_config(k: usize, q: usize, m: usize, t_max: usize, d_latent: usize) -> deepvlf::CodecConfig {
    let mut c = deepvlf::CodecConfig::new(k, q, m, t_max);
    c.d_latent = d_latent;
    c
}

#[pymethods]
impl PyCodec {
    /// Freshly initialised network.
    #[staticmethod]
    #[pyo3(signature = (k, q, m, t_max, seed, d_latent=32))]
    fn init(k: usize, q: usize, m: usize, t_max: usize, seed: u64, d_latent: usize) -> PyResult<Self> {
        let params = init_params(&codec_config(k, q, m, t_max, d_latent), seed).map_err(to_py)?;
        Ok(Self(Inner::Neural(params)))
    }

    #[staticmethod]
    #[pyo3(signature = (path, k, q, m, t_max, d_latent=32))]
    fn load(path: &str, k: usize, q: usize, m: usize, t_max: usize, d_latent: usize) -> PyResult<Self> {
        let params = load_checkpoint(path, &codec_config(k, q, m, t_max, d_latent)).map_err(to_py)?;
        Ok(Self(Inner::Neural(params)))
    }

    /// Loads a checkpoint written for the codec section of a run config.
    #[staticmethod]
    #[pyo3(signature = (path, config, overrides=Vec::new()))]
    fn load_for_config(path: &str, config: &str, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = deepvlf::RunConfig::from_toml_str(config, &overrides).map_err(to_py)?;
        let params = load_checkpoint(path, &cfg.codec_config()).map_err(to_py)?;
        Ok(Self(Inner::Neural(params)))
    }

    /// Belief one-hot on the truth from round 1.
    #[staticmethod]
    fn oracle(q: usize, m: usize, t_max: usize) -> Self {
        Self(Inner::Oracle(OracleCodec { q, m, t_max }))
    }

    /// Uniform beliefs forever.
    #[staticmethod]
    fn uniform(q: usize, m: usize, t_max: usize) -> Self {
        Self(Inner::Uniform(UniformCodec { q, m, t_max }))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(self.neural()?, path).map_err(to_py)
    }

    /// `(q, m, t_max)`.
    #[getter]
    fn geometry(&self) -> (usize, usize, usize) {
        self.codec().geometry()
    }

    #[getter]
    fn num_parameters(&self) -> PyResult<usize> {
        Ok(self.neural()?.num_scalars())
    }

    fn digest(&self) -> PyResult<String> {
        Ok(self.neural()?.digest())
    }
}

#[pyfunction]
fn tau_plus(m: usize, forward_snr_db: f64, gamma: f64) -> PyResult<usize> {
    compute_tau_plus(m, forward_snr_db, gamma).map_err(to_py)
}

#[pyfunction]
fn exp_weight(vartheta: f64, epsilon: f64, round: usize) -> f64 {
    exp_weight_coefficient(vartheta, epsilon, round)
}

/// One session; returns the transcript as a dict with `summary` and `rounds`.
#[pyfunction]
#[pyo3(signature = (codec, protocol, message, seed, session_id=0))]
fn session<'py>(
    py: Python<'py>,
    codec: &PyCodec,
    protocol: &PyProtocol,
    message: Vec<u8>,
    seed: u64,
    session_id: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let msg = BitMessage::new(message).map_err(to_py)?;
    let t = run_session(&msg, &protocol.0, codec.codec(), seed, session_id).map_err(to_py)?;
    json_to_py(py, &t)
}

/// Re-runs a transcript dict and raises on the first difference.
#[pyfunction]
fn replay(py: Python<'_>, codec: &PyCodec, protocol: &PyProtocol, transcript: &Bound<'_, PyAny>) -> PyResult<()> {
    let text: String = py.import("json")?.call_method1("dumps", (transcript,))?.extract()?;
    let t: SessionTranscript = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    replay_verify(&t, &protocol.0, codec.codec()).map_err(to_py)
}

/// Monte-Carlo BLER, rate and power over `n_sessions` random messages.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    codec: &PyCodec,
    protocol: &PyProtocol,
    n_sessions: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let r = py
        .detach(|| estimate(codec.codec(), &protocol.0, n_sessions, seed))
        .map_err(to_py)?;
    json_to_py(py, &r)
}

/// Uncoded BPSK against the analytic `Q(1/sigma)`.
#[pyfunction]
#[pyo3(signature = (forward_snr_db, n_bits, seed=0))]
fn baseline<'py>(py: Python<'py>, forward_snr_db: f64, n_bits: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let b = baseline_uncoded(&channel(forward_snr_db, None)?, n_bits, seed).map_err(to_py)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("n_bits", b.n_bits)?;
    d.set_item("errors", b.errors)?;
    d.set_item("measured_ber", b.measured_ber)?;
    d.set_item("analytic_ber", b.analytic_ber)?;
    d.set_item("consistent", b.consistent())?;
    Ok(d.into_any())
}

#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| grad_check(&GradCheckConfig::default(), seed))
        .map_err(to_py)?;
    json_to_py(py, &report)
}

/// Trains from a TOML run config. `phases` is "pretrain", "finetune" or
/// "both". Returns the codec and the metric records.
#[pyfunction]
#[pyo3(signature = (config, overrides=Vec::new(), phases="both"))]
fn train_codec<'py>(
    py: Python<'py>,
    config: &str,
    overrides: Vec<String>,
    phases: &str,
) -> PyResult<(PyCodec, Bound<'py, PyAny>)> {
    let cfg = deepvlf::RunConfig::from_toml_str(config, &overrides).map_err(to_py)?;
    let phases: &[Phase] = match phases {
        "pretrain" => &[Phase::Pretrain],
        "finetune" => &[Phase::Finetune],
        "both" => &[Phase::Pretrain, Phase::Finetune],
        other => return Err(PyValueError::new_err(format!("unknown phase selection `{other}`"))),
    };
    let ch = cfg.channel_params().map_err(to_py)?;
    let (params, records) = py
        .detach(|| {
            let mut params = init_params(&cfg.codec_config(), cfg.seed)?;
            let mut records = Vec::new();
            train(&cfg.train_config(), &mut params, &ch, phases, &mut |m| {
                records.push(m.clone());
                Ok(())
            })?;
            Ok::<_, deepvlf::Error>((params, records))
        })
        .map_err(to_py)?;
    Ok((PyCodec(Inner::Neural(params)), json_to_py(py, &records)?))
}

#[pymodule]
fn _deepvlf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProtocol>()?;
    m.add_class::<PyCodec>()?;
    m.add_function(wrap_pyfunction!(tau_plus, m)?)?;
    m.add_function(wrap_pyfunction!(exp_weight, m)?)?;
    m.add_function(wrap_pyfunction!(session, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train_codec, m)?)?;
    Ok(())
}
