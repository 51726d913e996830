use pyo3::ffi::c_str;
use pyo3::prelude::*;
use qkd::qkd as module;

fn with_module(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(module);
    Python::attach(|py| {
        py.run(code, None, None).unwrap();
    });
}

#[test]
fn module_round_trip() {
    with_module(c_str!(
        r#"
import math
import qkd
assert abs(qkd.eve_information(2.5) - 0.5436) < 1e-4
assert abs(qkd.eve_information(2.0) - 1.0) < 1e-12
try:
    qkd.eve_information(1.5)
    raise AssertionError("no error")
except ValueError:
    pass
est = qkd.secret_fraction(10000, 2000, 2.5)
assert est.final_length == 2564, est
assert list(qkd.toeplitz_hash([0, 0, 0], [1, 0, 1, 1], 2)) == [0, 0]
rec = qkd.reconcile([0, 1] * 500, [0, 1] * 499 + [1, 1], 0.01)
assert rec.verified and list(rec.corrected_bits) == [0, 1] * 500
try:
    qkd.Config("no_such_key = 1")
    raise AssertionError("no error")
except ValueError:
    pass
r = qkd.Config("duration = 0").run()
assert r.exit_code == 0 and r.blocks == []
"#
    ));
}
