//! Python bindings: GF(2) helpers, mappings, the simulator and the
//! decomposition pipeline.

use std::collections::BTreeMap;

use dramdecomp::gf2::{self, BitMask, Gf2System};
use dramdecomp::mapfile::{load_mapping, store_mapping};
use dramdecomp::mapping::{ComponentClass, DramAddressMapping};
use dramdecomp::pipeline::{decompose as run_decompose, PipelineConfig, Provenance};
use dramdecomp::probe::SimOracle;
use dramdecomp::reference::{self, REFERENCES};
use dramdecomp::report::{verify as verify_mapping, Report};
use dramdecomp::sim::{NoiseModel, RefreshKind, RefreshMode, Simulator, TimingConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_masks(v: &[u64]) -> Vec<BitMask> {
    v.iter().map(|&m| BitMask(m)).collect()
}

/// Parity of the address bits selected by `mask`.
#[pyfunction]
fn parity(mask: u64, addr: u64) -> bool {
    gf2::parity(BitMask(mask), addr)
}

#[pyfunction]
fn rank(masks: Vec<u64>) -> usize {
    Gf2System::dedup(to_masks(&masks)).rank()
}

/// Basis of the vectors inside the masks' bit universe on which every mask
/// has even parity.
#[pyfunction]
fn nullspace(masks: Vec<u64>) -> Vec<u64> {
    Gf2System::dedup(to_masks(&masks)).nullspace_basis().into_iter().map(|m| m.0).collect()
}

#[pyfunction]
fn span_equal(a: Vec<u64>, b: Vec<u64>) -> bool {
    gf2::span_equal(&to_masks(&a), &to_masks(&b))
}

/// A delta whose parity under each mask equals the paired target.
#[pyfunction]
fn solve_delta(constraints: Vec<(u64, bool)>) -> PyResult<u64> {
    let c: Vec<(BitMask, bool)> = constraints.into_iter().map(|(m, t)| (BitMask(m), t)).collect();
    gf2::solve_delta(&c).map(|d| d.0).map_err(value_err)
}

#[pyfunction]
fn reference_names() -> Vec<&'static str> {
    REFERENCES.iter().map(|r| r.name).collect()
}

#[pyclass(name = "Mapping", module = "pydramdecomp", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMapping {
    inner: DramAddressMapping,
    refresh: Option<RefreshMode>,
}

#[pymethods]
impl PyMapping {
    /// Parses mapping-file text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_mapping(text).map_err(value_err)?,
            refresh: None,
        })
    }

    /// A bundled reference mapping, carrying its platform refresh mode.
    #[staticmethod]
    fn reference(name: &str) -> PyResult<Self> {
        let r = reference::by_name(name).ok_or_else(|| value_err(format!("unknown reference mapping {name:?}")))?;
        Ok(Self {
            inner: r.mapping(),
            refresh: Some(r.refresh_mode()),
        })
    }

    fn to_text(&self) -> String {
        store_mapping(&self.inner)
    }

    /// `(mask, label)` pairs in list order.
    #[getter]
    fn functions(&self) -> Vec<(u64, &'static str)> {
        self.inner.functions().iter().map(|f| (f.mask.0, f.label.name())).collect()
    }

    #[getter]
    fn row_mask(&self) -> u64 {
        self.inner.row_mask().0
    }

    #[getter]
    fn col_mask(&self) -> u64 {
        self.inner.col_mask().0
    }

    #[getter]
    fn address_bits(&self) -> u64 {
        self.inner.address_bits().0
    }

    fn decode(&self, addr: u64) -> BTreeMap<&'static str, u64> {
        let c = self.inner.decode(addr);
        [
            ComponentClass::Channel,
            ComponentClass::SubChannel,
            ComponentClass::DimmRank,
            ComponentClass::BankGroup,
            ComponentClass::BankAddress,
            ComponentClass::Unassigned,
            ComponentClass::Row,
            ComponentClass::Column,
        ]
        .into_iter()
        .map(|class| (class.name(), c.index_of(class)))
        .collect()
    }

    fn same_bank(&self, a: u64, b: u64) -> bool {
        self.inner.same_bank(a, b)
    }

    fn is_injective(&self) -> bool {
        self.inner.is_injective()
    }

    /// One `(bits, rank, injective)` entry per disjoint subsystem.
    fn injectivity_check(&self) -> Vec<(u64, usize, bool)> {
        self.inner
            .injectivity_check()
            .into_iter()
            .map(|s| (s.bits.0, s.rank, s.injective))
            .collect()
    }

    /// A nonzero delta two colliding addresses differ by, if any.
    fn collision_delta(&self) -> Option<u64> {
        self.inner.collision_delta().map(|d| d.0)
    }

    /// Compares with a ground truth; returns `{check: passed}`.
    fn verify(&self, truth: PyRef<'_, PyMapping>) -> BTreeMap<&'static str, bool> {
        verify_mapping(&self.inner, &truth.inner).into_iter().map(|c| (c.name, c.pass)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mapping({} functions, row={}, col={})",
            self.inner.functions().len(),
            self.inner.row_mask(),
            self.inner.col_mask()
        )
    }
}

fn refresh_mode(kind: Option<&str>, classes: Option<Vec<String>>, fallback: Option<RefreshMode>) -> PyResult<RefreshMode> {
    if kind.is_none() && classes.is_none() {
        return Ok(fallback.unwrap_or_default());
    }
    let kind = match kind.unwrap_or("all_bank") {
        "all_bank" => RefreshKind::AllBank,
        "fine_grained" => RefreshKind::FineGrained,
        other => return Err(value_err(format!("unknown refresh kind {other:?}"))),
    };
    let classes = match classes {
        Some(c) => c
            .iter()
            .map(|s| s.parse::<ComponentClass>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_err)?,
        None => RefreshMode::default().classes().to_vec(),
    };
    RefreshMode::new(kind, classes).map_err(value_err)
}

fn build_sim(
    m: &PyMapping,
    sigma: f64,
    seed: u64,
    refresh_kind: Option<&str>,
    refresh_classes: Option<Vec<String>>,
) -> PyResult<Simulator> {
    let refresh = refresh_mode(refresh_kind, refresh_classes, m.refresh.clone())?;
    Simulator::new(m.inner.clone(), TimingConfig::default(), refresh, NoiseModel::gaussian(sigma, seed)).map_err(value_err)
}

/// Cycle-level simulator with default timing and Gaussian jitter.
#[pyclass(name = "Simulator", module = "pydramdecomp")]
struct PySimulator {
    inner: Simulator,
}

#[pymethods]
impl PySimulator {
    #[new]
    #[pyo3(signature = (mapping, sigma = 2.0, seed = 0, refresh_kind = None, refresh_classes = None))]
    fn new(
        mapping: PyRef<'_, PyMapping>,
        sigma: f64,
        seed: u64,
        refresh_kind: Option<&str>,
        refresh_classes: Option<Vec<String>>,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: build_sim(&mapping, sigma, seed, refresh_kind, refresh_classes)?,
        })
    }

    /// Latency of one access issued `gap` cycles after the previous one
    /// completed.
    #[pyo3(signature = (addr, gap = 0))]
    fn access(&mut self, addr: u64, gap: u64) -> PyResult<u64> {
        self.inner.check_addr(addr).map_err(value_err)?;
        Ok(self.inner.access(addr, gap))
    }

    /// Alternates `a, b` for `rounds` rounds; returns `(issue, latency)`.
    fn run_pair(&mut self, a: u64, b: u64, rounds: usize) -> PyResult<Vec<(u64, u64)>> {
        self.inner.check_addr(a).map_err(value_err)?;
        self.inner.check_addr(b).map_err(value_err)?;
        let trace: Vec<(u64, u64)> = (0..rounds).flat_map(|_| [(a, 0), (b, 0)]).collect();
        Ok(self.inner.run_trace(&trace).samples().to_vec())
    }

    fn refresh_group(&self, addr: u64) -> u64 {
        self.inner.refresh_group(addr)
    }

    #[getter]
    fn refresh_group_count(&self) -> u64 {
        self.inner.refresh_group_count()
    }

    #[getter]
    fn now(&self) -> u64 {
        self.inner.now()
    }
}

/// Recovers and labels `mapping` from simulated timing alone; returns the
/// report as JSON.
#[pyfunction]
#[pyo3(signature = (mapping, seed = 0, sigma = 2.0, refresh_kind = None, refresh_classes = None))]
fn decompose(
    py: Python<'_>,
    mapping: PyRef<'_, PyMapping>,
    seed: u64,
    sigma: f64,
    refresh_kind: Option<&str>,
    refresh_classes: Option<Vec<String>>,
) -> PyResult<String> {
    let sim = build_sim(&mapping, sigma, seed, refresh_kind, refresh_classes)?;
    let mut cfg = PipelineConfig::for_mapping(&mapping.inner);
    cfg.seed = seed;
    let rec = py.detach(move || {
        let mut oracle = SimOracle::new(sim, seed);
        run_decompose(&mut oracle, &cfg)
    });
    let rec = rec.map_err(value_err)?;
    Ok(Report::from_recovered("decompose", seed, &rec, None).to_json())
}

/// Mapping described by a report produced by `decompose` (or the CLI).
#[pyfunction]
fn mapping_from_report(json: &str) -> PyResult<PyMapping> {
    let r = Report::from_json(json).map_err(value_err)?;
    Ok(PyMapping {
        inner: r.to_mapping().map_err(value_err)?,
        refresh: None,
    })
}

/// Report JSON describing a known mapping.
#[pyfunction]
fn mapping_report(mapping: PyRef<'_, PyMapping>) -> String {
    Report::from_mapping("report", 0, &mapping.inner, Provenance::Hint).to_json()
}

#[pymodule]
fn pydramdecomp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parity, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(nullspace, m)?)?;
    m.add_function(wrap_pyfunction!(span_equal, m)?)?;
    m.add_function(wrap_pyfunction!(solve_delta, m)?)?;
    m.add_function(wrap_pyfunction!(reference_names, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(mapping_from_report, m)?)?;
    m.add_function(wrap_pyfunction!(mapping_report, m)?)?;
    m.add_class::<PyMapping>()?;
    m.add_class::<PySimulator>()?;
    Ok(())
}
