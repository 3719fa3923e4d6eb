//! Dense `(node, minute, feature)` tensors and their on-disk layout.
//!
//! A tensor is stored as two files: a JSON sidecar (`<base>.json`) with dimensions, schema
//! hash and the epoch minute of index 0, and a little-endian payload (`<base>.bin`) in
//! `(node, minute, feature)` row-major order. Raw tensors use 64-bit floats, token tensors
//! one unsigned byte per entry.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::TimeFeatures;

/// Element types that have a fixed little-endian encoding.
pub trait Element: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync {
    const DTYPE: &'static str;
    const WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const DTYPE: &'static str = "f64le";
    const WIDTH: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("width checked"))
    }
}

impl Element for u8 {
    const DTYPE: &'static str = "u8";
    const WIDTH: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: String,
    pub nodes: usize,
    pub minutes: usize,
    pub features: usize,
    /// Absolute epoch minute of minute index 0.
    pub epoch_minute: u64,
    pub schema_hash: String,
    /// Vocabulary size for token tensors; absent for raw tensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_bins: Option<usize>,
    #[serde(default)]
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub nodes: usize,
    pub minutes: usize,
    pub features: usize,
    pub epoch_minute: u64,
    pub schema_hash: String,
    pub data: Vec<T>,
}

/// Raw non-negative traffic counts.
pub type RawTensor = Tensor3<f64>;

impl<T: Element> Tensor3<T> {
    pub fn zeros(
        nodes: usize,
        minutes: usize,
        features: usize,
        epoch_minute: u64,
        schema_hash: String,
    ) -> Self {
        Self {
            nodes,
            minutes,
            features,
            epoch_minute,
            schema_hash,
            data: vec![T::default(); nodes * minutes * features],
        }
    }

    #[inline]
    pub fn offset(&self, node: usize, minute: usize) -> usize {
        (node * self.minutes + minute) * self.features
    }

    #[inline]
    pub fn get(&self, node: usize, minute: usize, feature: usize) -> T {
        self.data[self.offset(node, minute) + feature]
    }

    pub fn row(&self, node: usize, minute: usize) -> &[T] {
        let o = self.offset(node, minute);
        &self.data[o..o + self.features]
    }

    pub fn row_mut(&mut self, node: usize, minute: usize) -> &mut [T] {
        let o = self.offset(node, minute);
        &mut self.data[o..o + self.features]
    }

    /// Values of one feature of one node over all minutes.
    pub fn series(&self, node: usize, feature: usize) -> Vec<T> {
        (0..self.minutes).map(|t| self.get(node, t, feature)).collect()
    }

    pub fn time_features(&self, minute: usize) -> TimeFeatures {
        TimeFeatures::from_epoch_minute(self.epoch_minute + minute as u64)
    }

    /// Copy of minutes `[start, end)`.
    pub fn slice_minutes(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.minutes {
            return Err(Error::Shape(format!(
                "minute range [{start}, {end}) outside tensor of {} minutes",
                self.minutes
            )));
        }
        let len = end - start;
        let mut data = Vec::with_capacity(self.nodes * len * self.features);
        for v in 0..self.nodes {
            let a = self.offset(v, start);
            let b = self.offset(v, end - 1) + self.features;
            data.extend_from_slice(&self.data[a..b]);
        }
        Ok(Self {
            nodes: self.nodes,
            minutes: len,
            features: self.features,
            epoch_minute: self.epoch_minute + start as u64,
            schema_hash: self.schema_hash.clone(),
            data,
        })
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            dtype: T::DTYPE.to_string(),
            nodes: self.nodes,
            minutes: self.minutes,
            features: self.features,
            epoch_minute: self.epoch_minute,
            schema_hash: self.schema_hash.clone(),
            n_bins: None,
            config_digest: String::new(),
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::WIDTH);
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    /// Rebuilds a tensor from a sidecar header and payload bytes, validating the layout.
    pub fn decode(header: &TensorHeader, payload: &[u8]) -> Result<Self> {
        if header.dtype != T::DTYPE {
            return Err(Error::format(
                "tensor",
                format!("dtype {} where {} expected", header.dtype, T::DTYPE),
            ));
        }
        let count = header
            .nodes
            .checked_mul(header.minutes)
            .and_then(|n| n.checked_mul(header.features))
            .ok_or_else(|| Error::format("tensor", "dimensions overflow"))?;
        if count.checked_mul(T::WIDTH) != Some(payload.len()) {
            return Err(Error::format(
                "tensor",
                format!(
                    "payload has {} bytes, dimensions need {} x {}",
                    payload.len(),
                    count,
                    T::WIDTH
                ),
            ));
        }
        let data = payload.chunks_exact(T::WIDTH).map(T::read_le).collect();
        Ok(Self {
            nodes: header.nodes,
            minutes: header.minutes,
            features: header.features,
            epoch_minute: header.epoch_minute,
            schema_hash: header.schema_hash.clone(),
            data,
        })
    }
}

pub fn sidecar_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

fn write_pair(base: &Path, header: &TensorHeader, payload: &[u8]) -> Result<()> {
    let (json, bin) = sidecar_paths(base);
    fs::write(json, serde_json::to_vec_pretty(header)?)?;
    fs::write(bin, payload)?;
    Ok(())
}

fn read_pair(base: &Path) -> Result<(TensorHeader, Vec<u8>)> {
    let (json, bin) = sidecar_paths(base);
    for p in [&json, &bin] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let header: TensorHeader = serde_json::from_slice(&fs::read(json)?)?;
    Ok((header, fs::read(bin)?))
}

impl RawTensor {
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::format(
                "raw tensor",
                format!("entry {i} is {} (must be finite and non-negative)", self.data[i]),
            ));
        }
        Ok(())
    }

    pub fn decode_raw(header: &TensorHeader, payload: &[u8]) -> Result<Self> {
        let t = Self::decode(header, payload)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, base: &Path, config_digest: &str) -> Result<()> {
        let mut header = self.header();
        header.config_digest = config_digest.to_string();
        write_pair(base, &header, &self.payload())
    }

    pub fn load(base: &Path) -> Result<(Self, TensorHeader)> {
        let (header, payload) = read_pair(base)?;
        Ok((Self::decode_raw(&header, &payload)?, header))
    }
}

/// Discretized traffic: every entry is a category in `0..n_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub tokens: Tensor3<u8>,
    pub n_bins: usize,
}

impl TokenTensor {
    pub fn new(tokens: Tensor3<u8>, n_bins: usize) -> Result<Self> {
        if n_bins == 0 || n_bins > 256 {
            return Err(Error::format("token tensor", format!("n_bins {n_bins} outside 1..=256")));
        }
        if let Some(i) = tokens.data.iter().position(|&x| x as usize >= n_bins) {
            return Err(Error::format(
                "token tensor",
                format!("entry {i} is {} but n_bins is {n_bins}", tokens.data[i]),
            ));
        }
        Ok(Self { tokens, n_bins })
    }

    pub fn nodes(&self) -> usize {
        self.tokens.nodes
    }

    pub fn minutes(&self) -> usize {
        self.tokens.minutes
    }

    pub fn features(&self) -> usize {
        self.tokens.features
    }

    pub fn schema_hash(&self) -> &str {
        &self.tokens.schema_hash
    }

    pub fn slice_minutes(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            tokens: self.tokens.slice_minutes(start, end)?,
            n_bins: self.n_bins,
        })
    }

    pub fn header(&self) -> TensorHeader {
        let mut h = self.tokens.header();
        h.n_bins = Some(self.n_bins);
        h
    }

    pub fn decode(header: &TensorHeader, payload: &[u8]) -> Result<Self> {
        let n_bins = header
            .n_bins
            .ok_or_else(|| Error::format("token tensor", "sidecar lacks n_bins"))?;
        Self::new(Tensor3::decode(header, payload)?, n_bins)
    }

    pub fn save(&self, base: &Path, config_digest: &str) -> Result<()> {
        let mut header = self.header();
        header.config_digest = config_digest.to_string();
        write_pair(base, &header, &self.tokens.payload())
    }

    pub fn load(base: &Path) -> Result<(Self, TensorHeader)> {
        let (header, payload) = read_pair(base)?;
        Ok((Self::decode(&header, &payload)?, header))
    }
}
