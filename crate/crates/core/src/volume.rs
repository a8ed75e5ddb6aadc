//! 3D scalar volumes and their MetaImage-style header + raw payload files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Intensity,
    Probability,
    Mask,
}

/// Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    voxels: Vec<f64>,
    kind: ValueKind,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], voxels: Vec<f64>, kind: ValueKind) -> Result<Self> {
        let count: usize = extents.iter().product();
        if extents.contains(&0) || voxels.len() != count {
            return Err(invalid(format!(
                "extents {extents:?} need {count} voxels, got {}",
                voxels.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        let v = Self { extents, spacing, origin: [0.0; 3], voxels, kind };
        v.check_kind()?;
        Ok(v)
    }

    pub fn zeros(extents: [usize; 3], spacing: [f64; 3], kind: ValueKind) -> Self {
        let n = extents.iter().product();
        Self::new(extents, spacing, vec![0.0; n], kind).expect("valid zero volume")
    }

    fn check_kind(&self) -> Result<()> {
        match self.kind {
            ValueKind::Mask if self.voxels.iter().any(|&v| v != 0.0 && v != 1.0) => {
                Err(invalid("mask volumes may only contain 0 and 1"))
            }
            ValueKind::Probability if self.voxels.iter().any(|&v| !(0.0..=1.0).contains(&v)) => {
                Err(invalid("probability volumes must lie in [0, 1]"))
            }
            ValueKind::Intensity if self.voxels.iter().any(|v| !v.is_finite()) => {
                Err(invalid("intensity volumes must be finite"))
            }
            _ => Ok(()),
        }
    }

    /// Reinterpret the voxels as another kind, validating its value range.
    pub fn with_kind(mut self, kind: ValueKind) -> Result<Self> {
        self.kind = kind;
        self.check_kind()?;
        Ok(self)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn nx(&self) -> usize {
        self.extents[0]
    }

    pub fn ny(&self) -> usize {
        self.extents[1]
    }

    pub fn nz(&self) -> usize {
        self.extents[2]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f64) {
        let i = self.index(x, y, z);
        self.voxels[i] = value;
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let plane = self.extents[0] * self.extents[1];
        &self.voxels[z * plane..(z + 1) * plane]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f64] {
        let plane = self.extents[0] * self.extents[1];
        &mut self.voxels[z * plane..(z + 1) * plane]
    }

    /// Number of voxels equal to 1 (meaningful for masks).
    pub fn count_foreground(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.extents == other.extents
    }
}

const ELEMENT_DOUBLE: &str = "MET_DOUBLE";
const ELEMENT_UCHAR: &str = "MET_UCHAR";

/// Path of the payload written next to `header`.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Write `<name>.mhd` (text header) and `<name>.raw` (little-endian,
/// x-fastest). Masks are stored as unsigned bytes, other kinds as f64.
pub fn write_volume(v: &Volume, header: &Path) -> Result<()> {
    let raw = payload_path(header);
    let raw_name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| invalid(format!("unusable file name {}", header.display())))?;
    let join = |a: &[f64]| a.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
    let element = if v.kind == ValueKind::Mask { ELEMENT_UCHAR } else { ELEMENT_DOUBLE };
    let text = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n\
         DimSize = {} {} {}\nElementSpacing = {}\nOffset = {}\nElementType = {element}\n\
         ElementDataFile = {raw_name}\n",
        v.extents[0],
        v.extents[1],
        v.extents[2],
        join(&v.spacing),
        join(&v.origin),
    );
    let payload: Vec<u8> = if v.kind == ValueKind::Mask {
        v.voxels.iter().map(|&x| x as u8).collect()
    } else {
        v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect()
    };
    if let Some(dir) = header.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(header, text)?;
    fs::write(raw, payload)?;
    Ok(())
}

/// Read a volume written by [`write_volume`] or any MetaImage writer using
/// the same keys. `MET_UCHAR` data must be binary and reads back as a mask;
/// `MET_DOUBLE` reads back as intensity.
pub fn read_volume(header: &Path) -> Result<Volume> {
    let fail = |detail: String| CoreError::VolumeFormat {
        path: header.display().to_string(),
        detail,
    };
    let text = fs::read_to_string(header)?;
    let mut dims = None;
    let mut extents = None;
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    let mut element = None;
    let mut data_file = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(format!("line {}: expected `Key = Value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let triple = |what: &str| -> Result<[f64; 3]> {
            let parts: Vec<f64> = value
                .split_whitespace()
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fail(format!("{what}: cannot parse `{value}`")))?;
            <[f64; 3]>::try_from(parts).map_err(|_| fail(format!("{what}: expected 3 values, got `{value}`")))
        };
        match key {
            "NDims" => dims = Some(value.to_string()),
            "DimSize" => {
                let t = triple(key)?;
                if t.iter().any(|&d| d < 1.0 || d.fract() != 0.0) {
                    return Err(fail(format!("DimSize must be positive integers, got `{value}`")));
                }
                extents = Some([t[0] as usize, t[1] as usize, t[2] as usize]);
            }
            "ElementSpacing" | "ElementSize" => spacing = triple(key)?,
            "Offset" | "Origin" | "Position" => origin = triple(key)?,
            "ElementType" => element = Some(value.to_string()),
            "ElementDataFile" => data_file = Some(value.to_string()),
            "ObjectType" | "BinaryData" | "CompressedData" | "TransformMatrix" | "CenterOfRotation"
            | "AnatomicalOrientation" | "ElementNumberOfChannels" => {
                let ok = match key {
                    "CompressedData" => value.eq_ignore_ascii_case("false"),
                    "ElementNumberOfChannels" => value == "1",
                    _ => true,
                };
                if !ok {
                    return Err(fail(format!("unsupported {key} = {value}")));
                }
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                if !value.eq_ignore_ascii_case("false") {
                    return Err(fail("only little-endian payloads are supported".into()));
                }
            }
            other => return Err(fail(format!("unknown header key `{other}`"))),
        }
    }
    if dims.as_deref() != Some("3") {
        return Err(fail(format!("NDims must be 3, got {dims:?}")));
    }
    let extents = extents.ok_or_else(|| fail("missing DimSize".into()))?;
    let element = element.ok_or_else(|| fail("missing ElementType".into()))?;
    let data_file = data_file.ok_or_else(|| fail("missing ElementDataFile".into()))?;
    let raw_path = header.parent().unwrap_or(Path::new("")).join(&data_file);
    let bytes = fs::read(&raw_path)?;
    let count: usize = extents.iter().product();
    let (voxels, kind) = match element.as_str() {
        ELEMENT_DOUBLE => {
            if bytes.len() != count * 8 {
                return Err(fail(format!(
                    "DimSize needs {count} doubles ({} bytes), payload has {} bytes",
                    count * 8,
                    bytes.len()
                )));
            }
            let v = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            (v, ValueKind::Intensity)
        }
        ELEMENT_UCHAR => {
            if bytes.len() != count {
                return Err(fail(format!("DimSize needs {count} bytes, payload has {}", bytes.len())));
            }
            if let Some(b) = bytes.iter().find(|&&b| b > 1) {
                return Err(fail(format!("mask payload contains value {b}")));
            }
            (bytes.iter().map(|&b| b as f64).collect(), ValueKind::Mask)
        }
        other => return Err(fail(format!("unsupported ElementType `{other}`"))),
    };
    Ok(Volume::new(extents, spacing, voxels, kind)?.with_origin(origin))
}
