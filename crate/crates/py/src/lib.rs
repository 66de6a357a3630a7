//! Python bindings: evaluate and train policies, run the checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use subeq::actor_critic::Actor;
use subeq::checkpoint::Checkpoint;
use subeq::env::{EnvConfig, RMode};
use subeq::morphology::registry;
use subeq::set::SetConfig;
use subeq::td3::{evaluate_random, evaluate_rotated, Td3Config, Td3Trainer};
use subeq::variants::{make_variant, Variant, VariantKind};
use subeq::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn env_config(morph: &str, r_mode: &str, seed: u64) -> PyResult<EnvConfig> {
    let mut cfg = EnvConfig::new(registry::resolve(morph).map_err(py_err)?);
    cfg.r_mode = r_mode.parse::<RMode>().map_err(py_err)?;
    cfg.seed = seed;
    Ok(cfg)
}

fn preset(name: &str) -> PyResult<SetConfig> {
    match name {
        "paper" => Ok(SetConfig::default()),
        "desk" => Ok(SetConfig::desk()),
        _ => Err(PyValueError::new_err(format!("unknown preset `{name}` (paper or desk)"))),
    }
}

/// A policy network with its configuration.
#[pyclass(module = "subeq_py")]
struct Policy {
    actor: Actor,
    cfg: SetConfig,
}

#[pymethods]
impl Policy {
    /// Freshly initialised policy.
    #[new]
    #[pyo3(signature = (variant = "SET", preset_name = "desk", seed = 0, hn = false, hn_bias_deg = 0.0))]
    fn new(variant: &str, preset_name: &str, seed: u64, hn: bool, hn_bias_deg: f64) -> PyResult<Self> {
        let kind: VariantKind = variant.parse().map_err(py_err)?;
        let cfg = preset(preset_name)?;
        let v = Variant { kind, hn, hn_bias: hn_bias_deg.to_radians() };
        let spec = make_variant(v, &cfg).map_err(py_err)?;
        let actor = Actor::new(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(Self { actor, cfg })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self { actor: ck.restore_actor().map_err(py_err)?, cfg: ck.cfg })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_actor(&self.actor, &self.cfg).save(&path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.actor.variant().kind.to_string()
    }

    fn num_parameters(&self) -> usize {
        self.actor.params.num_scalars()
    }

    /// Noise-free episode returns, with the initial state turned `rotate_deg`
    /// about gravity.
    #[pyo3(signature = (morph = "3d_hopper_5_full", episodes = 10, seed = 0, rotate_deg = 0.0, r_mode = "far"))]
    fn evaluate(&self, py: Python<'_>, morph: &str, episodes: usize, seed: u64, rotate_deg: f64, r_mode: &str) -> PyResult<Vec<f64>> {
        let env = env_config(morph, r_mode, seed)?;
        py.detach(|| evaluate_rotated(&self.actor, &env, episodes, seed, rotate_deg.to_radians()))
            .map(|r| r.returns)
            .map_err(py_err)
    }

    /// Per-limb actions for the first observation of a seeded reset.
    #[pyo3(signature = (morph = "3d_hopper_5_full", seed = 0))]
    fn act_on_reset(&self, morph: &str, seed: u64) -> PyResult<Vec<[f64; 3]>> {
        let env = env_config(morph, "far", seed)?;
        let (_, obs) = subeq::env::reset_seeded(&env, seed).map_err(py_err)?;
        self.actor.act(&obs).map_err(py_err)
    }
}

/// Mean return of uniform random actions.
#[pyfunction]
#[pyo3(signature = (morph = "3d_hopper_5_full", episodes = 10, seed = 0, r_mode = "far"))]
fn random_baseline(morph: &str, episodes: usize, seed: u64, r_mode: &str) -> PyResult<f64> {
    let env = env_config(morph, r_mode, seed)?;
    evaluate_random(&env, episodes, seed).map(|r| r.mean).map_err(py_err)
}

/// Trains with TD3 and returns the online policy.
#[pyfunction]
#[pyo3(signature = (morph = "3d_hopper_5_full", steps = 50_000, seed = 0, variant = "SET", preset_name = "desk", r_mode = "far"))]
fn train(py: Python<'_>, morph: &str, steps: u64, seed: u64, variant: &str, preset_name: &str, r_mode: &str) -> PyResult<Policy> {
    let env = env_config(morph, r_mode, seed)?;
    let cfg = preset(preset_name)?;
    let kind: VariantKind = variant.parse().map_err(py_err)?;
    let spec = make_variant(Variant::new(kind), &cfg).map_err(py_err)?;
    let td3 = Td3Config { total_steps: steps, seed, ..Td3Config::default() };
    let actor = py
        .detach(|| {
            let mut t = Td3Trainer::new(env, spec, td3)?;
            t.run(None)?;
            Ok::<_, Error>(t.actor)
        })
        .map_err(py_err)?;
    Ok(Policy { actor, cfg })
}

#[pyfunction]
fn morphologies() -> Vec<&'static str> {
    registry::names().collect()
}

/// `(name, limbs, edges)` of a registry name or morphology file.
#[pyfunction]
fn morph_check(morph: &str) -> PyResult<(String, usize, usize)> {
    let g = registry::resolve(morph).map_err(py_err)?;
    Ok((g.name().to_owned(), g.len(), g.edges().len()))
}

/// Runs the symmetry, gradient and environment checks; returns
/// `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (variant = "SET", trials = 20, seed = 0))]
fn verify(py: Python<'_>, variant: &str, trials: usize, seed: u64) -> PyResult<(bool, String)> {
    let kind: VariantKind = variant.parse().map_err(py_err)?;
    let report = py.detach(|| subeq::verify::run_suite(kind, trials, seed)).map_err(py_err)?;
    Ok((report.passed(), report.to_string()))
}

#[pymodule]
fn subeq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(random_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(morphologies, m)?)?;
    m.add_function(wrap_pyfunction!(morph_check, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
