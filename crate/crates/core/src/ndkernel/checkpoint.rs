//! Text checkpoint container.
//!
//! ```text
//! # ndkernel-checkpoint v1
//! tensor <name> <ndim> <dim_0> ... <dim_{ndim-1}>
//! <v_0> <v_1> ... (row-major, one line)
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so a load reproduces the
//! saved bits exactly. Lines starting with `#` after the header are ignored.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::{KernelError, Result};

pub const CHECKPOINT_HEADER: &str = "# ndkernel-checkpoint v1";

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    writeln!(w, "{CHECKPOINT_HEADER}")?;
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(w, "tensor {} {} {}", name, t.shape().len(), dims.join(" "))?;
        let vals: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", vals.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ParamStore> {
    let mut lines = BufReader::new(r).lines().enumerate();
    let bad = |line: usize, detail: String| KernelError::Checkpoint { line: line + 1, detail };
    match lines.next() {
        Some((_, Ok(h))) if h.trim_end() == CHECKPOINT_HEADER => {}
        Some((i, Ok(h))) => return Err(bad(i, format!("unexpected header {h:?}"))),
        Some((_, Err(e))) => return Err(e.into()),
        None => return Err(bad(0, "empty file".into())),
    }
    let mut store = ParamStore::new();
    while let Some((i, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(bad(i, format!("expected tensor record, got {line:?}")));
        }
        let name = parts.next().ok_or_else(|| bad(i, "missing name".into()))?.to_string();
        let ndim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(i, "missing ndim".into()))?;
        let shape: Vec<usize> = parts.map(|s| s.parse().map_err(|_| bad(i, format!("bad dim {s:?}")))).collect::<Result<_>>()?;
        if shape.len() != ndim {
            return Err(bad(i, format!("ndim {ndim} but {} dims", shape.len())));
        }
        let (j, vals) = lines.next().ok_or_else(|| bad(i + 1, format!("missing values for {name}")))?;
        let vals = vals?;
        let data: Vec<f64> = vals
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| bad(j, format!("bad value {s:?}"))))
            .collect::<Result<_>>()?;
        let t = Tensor::new(shape, data).map_err(|e| bad(j, e.to_string()))?;
        store.add(name, t).map_err(|e| bad(i, e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), store)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    read_checkpoint(std::fs::File::open(path)?)
}
