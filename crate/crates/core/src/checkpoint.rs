//! Binary container used for checkpoints, SWAG moments and likelihood matrices.
//!
//! Layout on disk:
//!
//! ```text
//! u64 LE   header length in bytes
//! [u8]     UTF-8 JSON header
//! [f64 LE] payload values, concatenated
//! ```
//!
//! The header records how many payload values follow, so a truncated file is
//! detected on read. Floats are stored via `to_le_bytes`, which makes the round
//! trip bit-exact (including signed zeros).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::params::{Layout, ParameterVector};

pub(crate) fn write_container<H: Serialize>(
    writer: &mut impl Write,
    header: &H,
    payload: &[f64],
) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    writer.write_all(&(header.len() as u64).to_le_bytes())?;
    writer.write_all(&header)?;
    let mut buf = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_container<H: DeserializeOwned>(reader: &mut impl Read) -> Result<(H, Vec<f64>)> {
    let mut len = [0u8; 8];
    reader.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 32) {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len as usize];
    reader.read_exact(&mut header)?;
    let header: H = serde_json::from_slice(&header)?;
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, payload))
}

pub(crate) fn save_container<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    write_container(&mut file, header, payload)?;
    file.flush()?;
    Ok(())
}

pub(crate) fn load_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let mut file = std::io::BufReader::new(fs::File::open(path)?);
    read_container(&mut file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: String,
    pub spec: ModelSpec,
    pub layout: Layout,
    /// Named seeds that produced these parameters, outermost first.
    pub seeds: BTreeMap<String, u64>,
    pub epoch: Option<usize>,
    pub len: usize,
}

/// A parameter vector plus enough metadata to reload and replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParameterVector,
    pub seeds: BTreeMap<String, u64>,
    pub epoch: Option<usize>,
}

const CHECKPOINT_KIND: &str = "checkpoint";

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParameterVector) -> Self {
        Checkpoint {
            spec,
            params,
            seeds: BTreeMap::new(),
            epoch: None,
        }
    }

    pub fn with_seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn with_epoch(mut self, epoch: usize) -> Self {
        self.epoch = Some(epoch);
        self
    }

    pub fn write(&self, writer: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            kind: CHECKPOINT_KIND.into(),
            spec: self.spec.clone(),
            layout: self.params.layout().clone(),
            seeds: self.seeds.clone(),
            epoch: self.epoch,
            len: self.params.len(),
        };
        write_container(writer, &header, self.params.values())
    }

    pub fn read(reader: &mut impl Read) -> Result<Self> {
        let (header, payload): (CheckpointHeader, _) = read_container(reader)?;
        Self::from_parts(header, payload)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = std::io::BufWriter::new(fs::File::create(path)?);
        self.write(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload): (CheckpointHeader, _) = load_container(path)?;
        Self::from_parts(header, payload)
    }

    fn from_parts(header: CheckpointHeader, payload: Vec<f64>) -> Result<Self> {
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a checkpoint, found `{}`", header.kind)));
        }
        if payload.len() != header.len {
            return Err(Error::Format(format!(
                "header declares {} values but payload has {}",
                header.len,
                payload.len()
            )));
        }
        let layout = Layout::from_tensors(header.layout.tensors().to_vec())?;
        if layout != header.spec.layout() {
            return Err(Error::Format("layout does not match model spec".into()));
        }
        Ok(Checkpoint {
            spec: header.spec,
            params: ParameterVector::new(layout, payload)?,
            seeds: header.seeds,
            epoch: header.epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), bits in proptest::collection::vec(any::<u64>(), 6)) {
            let spec = ModelSpec::softmax_linear(2, 2).with_weight_decay(1e-3);
            // Arbitrary finite bit patterns, including subnormals and -0.0.
            let values: Vec<f64> = bits
                .iter()
                .map(|b| f64::from_bits(*b))
                .map(|v| if v.is_finite() { v } else { -0.0 })
                .collect();
            let params = ParameterVector::new(spec.layout(), values.clone()).unwrap();
            let ckpt = Checkpoint::new(spec, params).with_seed("init", seed).with_epoch(3);
            let mut buf = Vec::new();
            ckpt.write(&mut buf).unwrap();
            let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
            let a: Vec<u64> = back.params.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.seeds.get("init"), Some(&seed));
            prop_assert_eq!(back.epoch, Some(3));
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let spec = ModelSpec::softmax_linear(2, 2);
        let ckpt = Checkpoint::new(spec.clone(), spec.init(0).unwrap());
        let mut buf = Vec::new();
        ckpt.write(&mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(Checkpoint::read(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
