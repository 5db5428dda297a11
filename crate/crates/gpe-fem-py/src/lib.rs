use pyo3::prelude::*;

#[pymodule]
fn gpefem(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
