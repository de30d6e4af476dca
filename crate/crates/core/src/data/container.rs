//! Single-file container for a reduced dataset and its privileged channels.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "DRPI" | version: u16 | header_len: u32 | header: UTF-8 JSON
//!        | payload: f32 LE sections in header order | crc32(payload): u32
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Provenance, ReducedDataset};
use crate::error::{Error, Result};
use crate::privileged::{Aggregation, AttentionKind, AttentionLabels, FeatureLabelSet};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"DRPI";
pub const CONTAINER_VERSION: u16 = 1;
const PREFIX: usize = 4 + 2 + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub classes: usize,
    pub sections: Vec<Section>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_mode: Option<Aggregation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_kind: Option<AttentionKind>,
    pub provenance: Provenance,
}

impl Header {
    fn payload_bytes(&self) -> u64 {
        self.sections
            .iter()
            .map(|s| 4 * s.shape.iter().product::<usize>() as u64)
            .sum()
    }
}

fn sections(ds: &ReducedDataset) -> Vec<(&'static str, Tensor)> {
    let mut out = vec![
        ("images", ds.images.clone()),
        (
            "labels",
            Tensor::from_vec(ds.labels.iter().map(|&y| y as f32).collect()),
        ),
    ];
    if let Some(s) = &ds.soft_labels {
        out.push(("soft_labels", s.clone()));
    }
    if let Some(f) = &ds.features {
        out.push(("features", f.labels.clone()));
    }
    if let Some(a) = &ds.attention {
        out.push(("attention", a.labels.clone()));
    }
    out
}

pub fn encode(ds: &ReducedDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let parts = sections(ds);
    let header = Header {
        classes: ds.classes,
        sections: parts
            .iter()
            .map(|(n, t)| Section {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        feature_mode: ds.features.as_ref().map(|f| f.mode),
        attention_kind: ds.attention.as_ref().map(|a| a.kind),
        provenance: ds.provenance.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut payload = Vec::with_capacity(header.payload_bytes() as usize);
    for (_, t) in &parts {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len() + 4);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn parse_prefix(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREFIX {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "truncated container prefix".into(),
        });
    }
    if &bytes[0..4] != CONTAINER_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected DRPI".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CONTAINER_VERSION {
        return Err(Error::Version(version));
    }
    let hlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let end = PREFIX + hlen;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("header needs {hlen} bytes"),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX..end]).map_err(|e| Error::Format {
        offset: PREFIX as u64,
        msg: format!("header json: {e}"),
    })?;
    Ok((header, end))
}

pub fn decode(bytes: &[u8]) -> Result<ReducedDataset> {
    let (header, start) = parse_prefix(bytes)?;
    let expected = header.payload_bytes();
    let actual = (bytes.len() as u64).saturating_sub(start as u64 + 4);
    if bytes.len() < start + 4 || actual != expected {
        return Err(Error::Truncated { expected, actual });
    }
    let payload = &bytes[start..start + expected as usize];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum {
            expected: stored,
            actual: computed,
        });
    }

    let mut at = 0usize;
    let mut images = None;
    let mut labels = None;
    let mut soft = None;
    let mut features = None;
    let mut attention = None;
    for s in &header.sections {
        let n: usize = s.shape.iter().product();
        let data: Vec<f32> = payload[at..at + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        at += 4 * n;
        let t = Tensor::new(s.shape.clone(), data).map_err(|e| Error::Format {
            offset: (start + at) as u64,
            msg: format!("section {}: {e}", s.name),
        })?;
        match s.name.as_str() {
            "images" => images = Some(t),
            "labels" => labels = Some(t),
            "soft_labels" => soft = Some(t),
            "features" => features = Some(t),
            "attention" => attention = Some(t),
            other => {
                return Err(Error::Format {
                    offset: PREFIX as u64,
                    msg: format!("unknown section `{other}`"),
                })
            }
        }
    }
    let missing = |name: &str| Error::Format {
        offset: PREFIX as u64,
        msg: format!("missing section `{name}`"),
    };
    let labels = labels
        .ok_or_else(|| missing("labels"))?
        .data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(Error::Dataset(format!("label value {v} is not a class index")))
            } else {
                Ok(v as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = ReducedDataset {
        images: images.ok_or_else(|| missing("images"))?,
        labels,
        classes: header.classes,
        soft_labels: soft,
        features: features
            .map(|labels| FeatureLabelSet {
                labels,
                mode: header.feature_mode.unwrap_or_default(),
            }),
        attention: match (attention, header.attention_kind) {
            (Some(labels), Some(kind)) => Some(AttentionLabels { kind, labels }),
            (None, _) => None,
            (Some(_), None) => return Err(missing("attention_kind")),
        },
        provenance: header.provenance,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_reduced(ds: &ReducedDataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_reduced(path: &Path) -> Result<ReducedDataset> {
    decode(&std::fs::read(path)?)
}

/// Header of a container as JSON, without decoding the payload.
pub fn read_header(path: &Path) -> Result<serde_json::Value> {
    header_json(&std::fs::read(path)?)
}

pub fn header_json(bytes: &[u8]) -> Result<serde_json::Value> {
    let (_, end) = parse_prefix(bytes)?;
    Ok(serde_json::from_slice(&bytes[PREFIX..end])?)
}
