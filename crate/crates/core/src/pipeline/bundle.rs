//! Single-file model bundle: a magic line, a JSON header listing each
//! section's length and SHA-256, then the bincode-encoded sections.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineModel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"RTAPBNDL\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    len: u64,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    business: String,
    sections: Vec<SectionEntry>,
}

const SECTIONS: [&str; 7] = [
    "metadata",
    "layout",
    "scaler",
    "forecaster",
    "identifier",
    "severity",
    "flat",
];

fn encode<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    bincode::serialize(value).map_err(|e| Error::Model(format!("cannot encode bundle section: {e}")))
}

fn decode<T: DeserializeOwned>(name: &str, bytes: &[u8]) -> Result<T> {
    bincode::deserialize(bytes).map_err(|e| Error::Model(format!("bundle section {name} is malformed: {e}")))
}

/// Serializes `model` to bundle bytes. Identical models give identical bytes.
pub fn to_bytes(model: &PipelineModel) -> Result<Vec<u8>> {
    let bodies = [
        encode(&model.metadata)?,
        encode(&model.layout)?,
        encode(&model.scaler)?,
        encode(&model.forecaster)?,
        encode(&model.identifier)?,
        encode(&model.severity)?,
        encode(&model.flat)?,
    ];
    let header = Header {
        format: "rtap-bundle".into(),
        version: FORMAT_VERSION,
        business: model.business.name().into(),
        sections: SECTIONS
            .iter()
            .zip(&bodies)
            .map(|(name, body)| SectionEntry {
                name: name.to_string(),
                len: body.len() as u64,
                sha256: hex::encode(Sha256::digest(body)),
            })
            .collect(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).map_err(|e| Error::Model(e.to_string()))?);
    out.push(b'\n');
    for body in bodies {
        out.extend(body);
    }
    Ok(out)
}

/// Parses bundle bytes, refusing unknown versions and checksum mismatches.
pub fn from_bytes(bytes: &[u8]) -> Result<PipelineModel> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Model("not a model bundle (bad magic)".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Model("bundle header is truncated".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::Model(format!("bundle header is malformed: {e}")))?;
    if header.format != "rtap-bundle" {
        return Err(Error::Model(format!("unknown bundle format {:?}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Model(format!(
            "bundle version {} is not supported (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let names: Vec<&str> = header.sections.iter().map(|s| s.name.as_str()).collect();
    if names != SECTIONS {
        return Err(Error::Model(format!("unexpected bundle sections {names:?}")));
    }
    let mut body = &rest[nl + 1..];
    let mut parts = Vec::with_capacity(SECTIONS.len());
    for entry in &header.sections {
        let len = entry.len as usize;
        if body.len() < len {
            return Err(Error::Model(format!("bundle section {} is truncated", entry.name)));
        }
        let (part, tail) = body.split_at(len);
        if hex::encode(Sha256::digest(part)) != entry.sha256 {
            return Err(Error::Model(format!("bundle section {} fails its checksum", entry.name)));
        }
        parts.push(part);
        body = tail;
    }
    if !body.is_empty() {
        return Err(Error::Model("bundle has trailing bytes".into()));
    }
    let model = PipelineModel {
        business: header.business.parse().map_err(|_| {
            Error::Model(format!("bundle names unknown business {:?}", header.business))
        })?,
        metadata: decode("metadata", parts[0])?,
        layout: decode("layout", parts[1])?,
        scaler: decode("scaler", parts[2])?,
        forecaster: decode("forecaster", parts[3])?,
        identifier: decode("identifier", parts[4])?,
        severity: decode("severity", parts[5])?,
        flat: decode("flat", parts[6])?,
    };
    model.check_consistency()?;
    Ok(model)
}

/// Writes the bundle through a temporary file so a failed write never
/// leaves a partial bundle at `path`.
pub fn save(model: &PipelineModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<PipelineModel> {
    from_bytes(&fs::read(path)?)
}
