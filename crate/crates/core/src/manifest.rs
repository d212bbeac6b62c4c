//! Run manifests: resolved config, its content hash and a dataset fingerprint.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub seed: u64,
    pub crate_version: String,
}

/// SHA-256 of the canonical JSON encoding of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn feed_image(h: &mut Sha256, im: &Image) {
    h.update((im.channels as u64).to_le_bytes());
    h.update((im.height as u64).to_le_bytes());
    h.update((im.width as u64).to_le_bytes());
    for v in &im.data {
        h.update(v.to_le_bytes());
    }
}

fn feed_mask(h: &mut Sha256, m: Option<&Mask>) {
    match m {
        Some(m) => {
            h.update([1u8]);
            h.update(&m.data);
        }
        None => h.update([0u8]),
    }
}

pub fn fingerprint_records(records: &[SampleRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update([0u8, r.labeled as u8]);
        feed_image(&mut h, &r.image);
        feed_mask(&mut h, r.mask.as_ref());
    }
    hex(&h.finalize())
}

/// Fingerprint of the training split. Withheld masks are not included.
pub fn fingerprint_split(split: &Split) -> String {
    let mut h = Sha256::new();
    for s in &split.labeled {
        h.update(b"L");
        h.update(s.id.as_bytes());
        feed_image(&mut h, &s.image);
        feed_mask(&mut h, Some(&s.mask));
    }
    for s in &split.unlabeled {
        h.update(b"U");
        h.update(s.id.as_bytes());
        feed_image(&mut h, &s.image);
    }
    hex(&h.finalize())
}

impl RunManifest {
    pub fn new<T: Serialize>(kind: &str, config: &T, dataset_fingerprint: String, seed: u64) -> Result<Self> {
        Ok(RunManifest {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            config_hash: content_hash(config)?,
            dataset_fingerprint,
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
