use pyo3::prelude::*;

#[pymodule]
fn codaf_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
