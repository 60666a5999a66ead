//! MetaImage (`.mhd` header + `.raw` payload) reading and writing.
//!
//! Supported: `NDims = 3`, `ElementType` of `MET_SHORT` or `MET_FLOAT`,
//! uncompressed binary data in either byte order, and
//! `ElementDataFile = LOCAL` (payload appended to the header). `DimSize` and
//! `ElementSpacing` list the fastest axis first (x, y, z); volumes store
//! them reversed as `[d, h, w]`.
//!
//! The writer emits a fixed key order, so writing the same volume twice
//! gives identical bytes. Normalized volumes carry an extra
//! `IntensityDomain = normalized` key; readers that do not know it ignore it.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, IntensityDomain, Result, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementType {
    #[serde(rename = "MET_SHORT")]
    Short,
    #[serde(rename = "MET_FLOAT")]
    Float,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }

    fn parse(tag: &str) -> Result<Self> {
        match tag {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_FLOAT" => Ok(ElementType::Float),
            other => Err(DataError::Format(format!("unsupported ElementType {other}"))),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(DataError::Format(format!("{key} must be True or False, got {v}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, n: usize) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| DataError::Format(format!("bad {key} entry {s:?}"))))
        .collect::<Result<_>>()?;
    if items.len() != n {
        return Err(DataError::Format(format!("{key} needs {n} values, got {}", items.len())));
    }
    Ok(items)
}

/// Reads a volume. The domain is Hounsfield units unless the header says
/// otherwise.
pub fn read_metaimage(mhd_path: &Path) -> Result<Volume> {
    let bytes = fs::read(mhd_path).map_err(io_err(mhd_path))?;
    let mut fields: HashMap<String, String> = HashMap::new();
    let mut pos = 0;
    let mut local_payload = None;
    while pos < bytes.len() {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| pos + i);
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| DataError::Format("header is not UTF-8".into()))?
            .trim();
        pos = (end + 1).min(bytes.len());
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DataError::Format(format!("header line without '=': {line:?}")))?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        let is_data_file = key == "ElementDataFile";
        fields.insert(key, value.clone());
        if is_data_file {
            // ElementDataFile is always the last header field.
            if value == "LOCAL" {
                local_payload = Some(bytes[pos..].to_vec());
            }
            break;
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| DataError::Format(format!("missing header field {k}")));

    let ndims: usize = get("NDims")?.parse().map_err(|_| DataError::Format("bad NDims".into()))?;
    if ndims != 3 {
        return Err(DataError::Format(format!("NDims must be 3, got {ndims}")));
    }
    let element = ElementType::parse(get("ElementType")?)?;
    let dims: Vec<usize> = parse_list("DimSize", get("DimSize")?, 3)?;
    let spacing: Vec<f64> = match fields.get("ElementSpacing").or_else(|| fields.get("ElementSize")) {
        Some(v) => parse_list("ElementSpacing", v, 3)?,
        None => vec![1.0; 3],
    };
    if let Some(v) = fields.get("CompressedData") {
        if parse_bool("CompressedData", v)? {
            return Err(DataError::Format("compressed payloads are not supported".into()));
        }
    }
    let msb = match fields.get("BinaryDataByteOrderMSB").or_else(|| fields.get("ElementByteOrderMSB")) {
        Some(v) => parse_bool("BinaryDataByteOrderMSB", v)?,
        None => false,
    };
    let domain = match fields.get("IntensityDomain").map(String::as_str) {
        None | Some("hu") => IntensityDomain::Hu,
        Some("normalized") => IntensityDomain::Normalized,
        Some(other) => return Err(DataError::Format(format!("unknown IntensityDomain {other}"))),
    };
    let data_file = get("ElementDataFile")?;
    let payload = match local_payload {
        Some(p) => p,
        None => {
            let raw = mhd_path.parent().unwrap_or(Path::new(".")).join(data_file);
            fs::read(&raw).map_err(io_err(&raw))?
        }
    };

    let count: usize = dims.iter().product();
    let expected = count * element.size();
    if payload.len() != expected {
        return Err(DataError::SizeMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let voxels: Vec<f64> = match element {
        ElementType::Short => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                f64::from(if msb { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) })
            })
            .collect(),
        ElementType::Float => payload
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                f64::from(if msb { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) })
            })
            .collect(),
    };
    Volume::new(
        [dims[2], dims[1], dims[0]],
        [spacing[2], spacing[1], spacing[0]],
        domain,
        voxels,
    )
}

/// Writes `<stem>.mhd` and `<stem>.raw` next to each other and returns the
/// raw path. `MET_SHORT` requires integral voxel values within `i16`.
pub fn write_metaimage(vol: &Volume, mhd_path: &Path, element: ElementType) -> Result<PathBuf> {
    let raw_path = mhd_path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| DataError::Invalid(format!("bad output path {}", mhd_path.display())))?
        .to_string();
    let mut payload = Vec::with_capacity(vol.len() * element.size());
    for &v in &vol.voxels {
        match element {
            ElementType::Short => {
                if v.fract() != 0.0 || v < f64::from(i16::MIN) || v > f64::from(i16::MAX) {
                    return Err(DataError::Invalid(format!("voxel {v} is not representable as MET_SHORT")));
                }
                payload.extend_from_slice(&(v as i16).to_le_bytes());
            }
            ElementType::Float => payload.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    let [d, h, w] = vol.shape;
    let [sd, sh, sw] = vol.spacing;
    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str("NDims = 3\n");
    header.push_str("BinaryData = True\n");
    header.push_str("BinaryDataByteOrderMSB = False\n");
    header.push_str("CompressedData = False\n");
    header.push_str(&format!("ElementSpacing = {sw} {sh} {sd}\n"));
    header.push_str(&format!("DimSize = {w} {h} {d}\n"));
    if vol.domain == IntensityDomain::Normalized {
        header.push_str("IntensityDomain = normalized\n");
    }
    header.push_str(&format!("ElementType = {}\n", element.tag()));
    header.push_str(&format!("ElementDataFile = {raw_name}\n"));
    fs::write(&raw_path, payload).map_err(io_err(&raw_path))?;
    fs::write(mhd_path, header).map_err(io_err(mhd_path))?;
    Ok(raw_path)
}
