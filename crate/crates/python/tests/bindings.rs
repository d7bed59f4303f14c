use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::attach(|py| {
        let m = PyModule::new(py, "gesturegen_py").unwrap();
        gesturegen_py::gesturegen_py(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("g", m).unwrap();
        f(py, &globals);
    });
}

#[test]
fn sequences_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    with_module(|py, globals| {
        globals.set_item("path", dir.path().join("a.poseb")).unwrap();
        py.run(
            c"
clips = g.synthesize(seed=2, count=3, frames=10, styles=3, speakers=1)
assert [c.style for c in clips] == ['style0', 'style1', 'style2']
clips[2].save(str(path))
back = g.GestureSequence.load(str(path))
assert back.frames() == clips[2].frames() and len(back) == 10
",
            Some(globals),
            None,
        )
        .unwrap();
    });
}

#[test]
fn errors_surface_as_gesturegen_error() {
    with_module(|py, globals| {
        py.run(
            c"
try:
    g.ExperimentConfig.from_toml('[split]\\ntrain = 0.5\\n')
except g.GestureGenError as e:
    assert 'split' in str(e)
else:
    raise AssertionError('accepted')
try:
    g.GestureSequence.load('/nonexistent/x.pose')
except OSError:
    pass
else:
    raise AssertionError('loaded')
",
            Some(globals),
            None,
        )
        .unwrap();
    });
}

#[test]
fn metrics_match_closed_forms() {
    with_module(|py, globals| {
        py.run(
            c"
import math
assert abs(g.frechet_distance([[0.0], [2.0]], [[1.0], [3.0], [5.0]]) - (4.0 + 6.0 - 2.0 * math.sqrt(8.0))) < 1e-9
assert abs(g.beat_consistency_score([1.1], [1.0, 2.5], 0.1) - math.exp(-0.5)) < 1e-12
c = g.synthesize(seed=0, count=1, frames=8, styles=1, speakers=1)[0]
assert g.variation([c, c]) == 0.0
",
            Some(globals),
            None,
        )
        .unwrap();
    });
}
