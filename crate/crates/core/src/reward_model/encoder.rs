use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::textgen::{RemoteClient, Transport};

/// Maps text to a fixed-width, L2-normalised vector.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    HashingBag,
    RemoteEmbedding,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

/// Scales to unit length; a zero vector stays zero.
pub fn l2_normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// Signed feature hashing of lowercase alphanumeric tokens.
///
/// Token `t` adds `+1` or `-1` (top bit of `fnv1a64(t)`) to bucket
/// `fnv1a64(t) % dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashingEncoder {
    dim: usize,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim }
    }
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for tok in tokenize(text) {
            let h = fnv1a64(tok.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        if !l2_normalize(&mut v) {
            tracing::warn!(text, "text has no tokens or its buckets cancel; using a zero embedding");
        }
        Ok(v)
    }
}

/// Embeddings from a remote service, truncated or zero-padded to `dim`, then
/// normalised.
pub struct RemoteEncoder<T: Transport> {
    client: RemoteClient<T>,
    dim: usize,
}

impl<T: Transport> RemoteEncoder<T> {
    pub fn new(client: RemoteClient<T>, dim: usize) -> Self {
        Self { client, dim }
    }
}

impl<T: Transport> TextEncoder for RemoteEncoder<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            tracing::warn!("empty text; using a zero embedding");
            return Ok(vec![0.0; self.dim]);
        }
        let mut v = self.client.remote_embed(text)?;
        v.resize(self.dim, 0.0);
        l2_normalize(&mut v);
        Ok(v)
    }
}

/// Encodes each distinct text once.
pub fn encode_all<E: TextEncoder + ?Sized>(encoder: &E, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut seen: HashMap<&str, Vec<f64>> = HashMap::new();
    texts
        .iter()
        .map(|&t| {
            if let Some(v) = seen.get(t) {
                return Ok(v.clone());
            }
            let v = encoder.encode(t)?;
            seen.insert(t, v.clone());
            Ok(v)
        })
        .collect()
}
