//! Checkpoints: a text manifest with one `name dim0 dim1 ...` line per tensor
//! and a sibling `.bin` payload of little-endian f64 values in manifest order.
//!
//! Values are always stored as f64, whatever [`Real`] is.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{GradError, Result};
use crate::{Real, Tensor};

const HEADER: &str = "# volseg checkpoint v1";

/// Path of the payload that accompanies a manifest.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Write named tensors to `manifest` and its payload file.
pub fn save<'a, I>(manifest: &Path, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut text = String::from(HEADER);
    text.push('\n');
    let mut payload = Vec::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(GradError::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        text.push_str(name);
        for d in t.shape() {
            text.push(' ');
            text.push_str(&d.to_string());
        }
        text.push('\n');
        for &v in t.data() {
            payload.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(manifest, text)?;
    let mut f = fs::File::create(payload_path(manifest))?;
    f.write_all(&payload)?;
    Ok(())
}

/// Read every tensor listed in `manifest`.
pub fn load(manifest: &Path) -> Result<Vec<(String, Tensor)>> {
    let text = fs::read_to_string(manifest)?;
    let bytes = fs::read(payload_path(manifest))?;
    let mut offset = 0usize;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line").to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>().map_err(|_| {
                    GradError::Checkpoint(format!("line {}: bad dimension {p:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let end = offset + count * 8;
        if shape.is_empty() || end > bytes.len() {
            return Err(GradError::Checkpoint(format!(
                "tensor `{name}` needs bytes {offset}..{end}, payload has {}",
                bytes.len()
            )));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
            .collect();
        offset = end;
        out.push((name, Tensor::new(&shape, data)?));
    }
    if offset != bytes.len() {
        return Err(GradError::Checkpoint(format!(
            "payload has {} trailing bytes",
            bytes.len() - offset
        )));
    }
    Ok(out)
}

/// Load into an existing parameter store, requiring identical names and shapes.
pub fn load_into(manifest: &Path, params: &mut crate::ParamStore) -> Result<()> {
    let loaded = load(manifest)?;
    if loaded.len() != params.len() {
        return Err(GradError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            loaded.len(),
            params.len()
        )));
    }
    for ((name, t), expected) in loaded.into_iter().zip(params.names().to_vec()) {
        if name != expected {
            return Err(GradError::Checkpoint(format!("expected `{expected}`, found `{name}`")));
        }
        let slot = params.get_mut(&name)?;
        if slot.shape() != t.shape() {
            return Err(GradError::Checkpoint(format!(
                "`{name}` has shape {:?} in checkpoint, {:?} in model",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
