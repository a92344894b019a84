//! On-disk layout: 16-byte header (`MAGIC`, `u32` version, `u32` manifest
//! length, little-endian), a JSON manifest, then fixed-size records of
//! little-endian `f32`:
//!
//! `sample_id | view 1..3 (T*D each) | text_feat (T*D) | latent (T*L) | caption (T+2)`

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{LatentSpec, SamplePair, ViewTriple};
use crate::captioner::Vocab;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"EDTCDATA";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
/// Ids are stored as `f32`, exact below this bound.
const MAX_ID: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub record_floats: usize,
    pub spec: LatentSpec,
}

fn record_floats(spec: &LatentSpec) -> usize {
    let td = spec.time * spec.dim;
    1 + 4 * td + spec.time * spec.latent_dim + spec.caption_len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: LatentSpec,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn new(spec: LatentSpec, samples: Vec<SamplePair>) -> Result<Self> {
        spec.validate()?;
        let (t, d, l) = (spec.time, spec.dim, spec.latent_dim);
        for (i, s) in samples.iter().enumerate() {
            let ok = s.views.iter().all(|v| v.shape() == [t, d])
                && s.text_feat.shape() == [t, d]
                && s.latent.shape() == [t, l]
                && s.caption.len() == spec.caption_len()
                && s.sample_id < MAX_ID;
            if !ok {
                return Err(Error::Invalid(format!("sample {i} does not match the dataset spec")));
            }
        }
        Ok(Self { spec, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn vocab(&self) -> Result<Vocab> {
        self.spec.vocab()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: FORMAT_VERSION,
            count: self.samples.len(),
            record_floats: record_floats(&self.spec),
            spec: self.spec.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let rf = record_floats(&self.spec);
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + 4 * rf * self.samples.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for s in &self.samples {
            let mut push = |v: f32| out.extend_from_slice(&v.to_le_bytes());
            push(s.sample_id as f32);
            for t in s.views.iter().chain([&s.text_feat, &s.latent]) {
                t.data().iter().for_each(|&v| push(v));
            }
            s.caption.iter().for_each(|&c| push(c as f32));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, body) = parse_header(bytes)?;
        let rec = 4 * manifest.record_floats;
        if body.len() != rec * manifest.count {
            return Err(Error::Format(format!(
                "body holds {} bytes, manifest declares {} records of {rec}",
                body.len(),
                manifest.count
            )));
        }
        let samples = body
            .chunks_exact(rec)
            .enumerate()
            .map(|(i, r)| decode_record(&manifest.spec, i, r))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.spec, samples)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_manifest(header: &[u8], manifest: &[u8]) -> Result<Manifest> {
    if &header[..8] != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let m: Manifest = serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    m.spec.validate().map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.version != version || m.record_floats != record_floats(&m.spec) {
        return Err(Error::Format("manifest disagrees with header or spec".into()));
    }
    Ok(m)
}

fn manifest_len(header: &[u8]) -> usize {
    u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize
}

fn parse_header(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("file shorter than its header".into()));
    }
    let end = HEADER_LEN + manifest_len(bytes);
    if bytes.len() < end {
        return Err(Error::Format("file ends inside the manifest".into()));
    }
    Ok((parse_manifest(&bytes[..HEADER_LEN], &bytes[HEADER_LEN..end])?, &bytes[end..]))
}

fn as_index(v: f32, limit: u64, what: &str, index: usize) -> Result<u64> {
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && (v as u64) < limit) {
        return Err(Error::Format(format!("record {index}: bad {what} {v}")));
    }
    Ok(v as u64)
}

fn decode_record(spec: &LatentSpec, index: usize, bytes: &[u8]) -> Result<SamplePair> {
    let (t, d, l) = (spec.time, spec.dim, spec.latent_dim);
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if let Some(p) = vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("record {index}: non-finite value at offset {p}")));
    }
    let sample_id = as_index(vals[0], MAX_ID, "sample id", index)?;
    let mut off = 1;
    let mut take = |n: usize, shape: &[usize]| {
        let t = Tensor::new(shape, vals[off..off + n].to_vec());
        off += n;
        t
    };
    let views: ViewTriple<f32> = [take(t * d, &[t, d])?, take(t * d, &[t, d])?, take(t * d, &[t, d])?];
    let text_feat = take(t * d, &[t, d])?;
    let latent = take(t * l, &[t, l])?;
    let caption = vals[off..]
        .iter()
        .map(|&v| as_index(v, spec.vocab_size as u64, "caption token", index).map(|x| x as usize))
        .collect::<Result<Vec<_>>>()?;
    let vocab = spec.vocab()?;
    let inner_ok = caption[1..caption.len() - 1]
        .iter()
        .all(|&c| c >= 3 && c < 3 + spec.num_symbols);
    if caption.first() != Some(&vocab.bos) || caption.last() != Some(&vocab.eos) || !inner_ok {
        return Err(Error::Format(format!("record {index}: malformed caption {caption:?}")));
    }
    Ok(SamplePair {
        sample_id,
        views,
        text_feat,
        latent,
        caption,
    })
}

/// Reads one record without loading the rest of the file.
pub fn read_record(path: &Path, index: usize) -> Result<SamplePair> {
    let mut f = File::open(path)?;
    let mut header = [0u8; HEADER_LEN];
    f.read_exact(&mut header)
        .map_err(|_| Error::Format("file shorter than its header".into()))?;
    let mut manifest = vec![0u8; manifest_len(&header)];
    f.read_exact(&mut manifest)
        .map_err(|_| Error::Format("file ends inside the manifest".into()))?;
    let m = parse_manifest(&header, &manifest)?;
    if index >= m.count {
        return Err(Error::Invalid(format!("record {index} out of range for {} records", m.count)));
    }
    let rec = 4 * m.record_floats;
    f.seek(SeekFrom::Current((index * rec) as i64))?;
    let mut buf = vec![0u8; rec];
    f.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("record {index}: truncated")))?;
    decode_record(&m.spec, index, &buf)
}
