//! Drives the module through an embedded interpreter.

use pyo3::prelude::*;
use pyo3::types::PyDict;
use pymucio::pymucio;

fn with_module<R>(f: impl FnOnce(Python<'_>, &Bound<'_, PyDict>) -> PyResult<R>) -> R {
    pyo3::append_to_inittab!(pymucio);
    Python::initialize();
    Python::attach(|py| {
        let scope = PyDict::new(py);
        scope.set_item("m", py.import("pymucio")?)?;
        f(py, &scope)
    })
    .unwrap()
}

fn eval(py: Python<'_>, scope: &Bound<'_, PyDict>, code: &str) -> PyResult<String> {
    let c = std::ffi::CString::new(code).unwrap();
    py.eval(&c, Some(scope), None)?.str().map(|s| s.to_string())
}

#[test]
fn module_round_trip() {
    with_module(|py, scope| {
        assert_eq!(eval(py, scope, "m.ThresholdOracle.fair_majority(4, 4).probability()")?, "0.0625");
        assert_eq!(eval(py, scope, "m.hamming([0, 1, 1], [1, 1, 0])")?, "2");
        let budget = "(lambda o, p: (lambda t: (t['success'], t['budget'] == m.hamming(t['u'], t['v'])))\
            (o.tamper(p, 3)))(m.ThresholdOracle.fair_majority(30, 20), \
            m.TamperParams.average_case(30, 0.05, 0.1).with_mode('mucio'))";
        assert_eq!(eval(py, scope, budget)?, "(True, True)");
        assert!(eval(py, scope, "m.TamperParams.average_case(10, 2.0, 0.1)").is_err());
        Ok(())
    });
}
