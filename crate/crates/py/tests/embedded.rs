use pyo3::prelude::*;

#[test]
fn module_works_from_python() {
    pyo3::append_to_inittab!(init_module_for_test);
    Python::attach(|py| {
        py.run(
            c"
import biotouch, tempfile
a = biotouch.DigitSample('u1', 4, [(i, i * i * 0.1, 10 * i) for i in range(12)])
assert biotouch.dtw_match(a, a)[2] == 1.0
assert biotouch.compute_eer([1.0, 0.9], [0.2, 0.9]) == (25.0, 0.9)
ds = biotouch.Dataset.synthetic(4, seed=2)
dev, ev = ds.split(2)
report = biotouch.evaluate(ev, n_enrol=1, digits=[4])
assert report['per_digit_eer'][0]['genuine'] == 8
assert report['per_digit_eer'][0]['impostor'] == 2
with tempfile.TemporaryDirectory() as tmp:
    svc = biotouch.AuthService(tmp)
    try:
        svc.enroll('u1', 5, [a])
        raise AssertionError('label mismatch accepted')
    except ValueError:
        pass
    assert svc.enroll('u1', 4, [a]) == 1
    d = svc.verify('u1', [4], [a])
    assert d['accepted'] and d['stage2_score'] == 1.0
",
            None,
            None,
        )
        .inspect_err(|e| e.print(py))
        .unwrap();
    });
}

#[pymodule]
#[pyo3(name = "biotouch")]
mod init_module_for_test {
    use pyo3::prelude::*;

    #[pymodule_init]
    fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
        biotouch_py::init_module(m)
    }
}
