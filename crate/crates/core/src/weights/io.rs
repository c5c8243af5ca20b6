//! Weight file layout (all integers little-endian):
//!
//! ```text
//! "STUW" | u32 version | u64 manifest_len | manifest JSON | payload | u32 crc32(payload)
//! ```
//!
//! The manifest is an array of `{name, dtype, shape, byte_offset, byte_len}`;
//! offsets are relative to the start of the payload, which is the
//! concatenation of every tensor's raw `f32` values in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::{WeightStore, FORMAT_VERSION};
use crate::error::{Error, FileSection, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STUW";
const CHUNK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

fn manifest_for(store: &WeightStore) -> Vec<ManifestEntry> {
    let mut offset = 0u64;
    store
        .iter()
        .map(|(name, t)| {
            let len = 4 * t.numel() as u64;
            let e = ManifestEntry {
                name: name.to_string(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_len: len,
            };
            offset += len;
            e
        })
        .collect()
}

/// Writes `store` tensor by tensor; no second copy of the payload is built.
pub fn save(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::with_capacity(1 << 20, File::create(path)?);
    write_to(store, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_to(store: &WeightStore, out: &mut impl Write) -> Result<()> {
    let manifest = serde_json::to_vec(&manifest_for(store))?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(manifest.len() as u64).to_le_bytes())?;
    out.write_all(&manifest)?;
    let mut crc = crc32fast::Hasher::new();
    let mut buf = Vec::with_capacity(CHUNK * 4);
    for (_, t) in store.iter() {
        for chunk in t.data().chunks(CHUNK) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            crc.update(&buf);
            out.write_all(&buf)?;
        }
    }
    out.write_all(&crc.finalize().to_le_bytes())?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    for item in WeightReader::open(path)? {
        let (name, t) = item?;
        store.insert(name, t).map_err(|e| Error::format(FileSection::Manifest, e.to_string()))?;
    }
    Ok(store)
}

pub fn read_from(src: impl Read) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    for item in WeightReader::new(src)? {
        let (name, t) = item?;
        store.insert(name, t).map_err(|e| Error::format(FileSection::Manifest, e.to_string()))?;
    }
    Ok(store)
}

/// Streams tensors out of a weight file one at a time. The checksum is
/// verified once the last tensor has been read; a mismatch is yielded as the
/// final item.
pub struct WeightReader<R: Read> {
    src: R,
    manifest: Vec<ManifestEntry>,
    next: usize,
    crc: crc32fast::Hasher,
    finished: bool,
}

fn read_exact_or(src: &mut impl Read, buf: &mut [u8], section: FileSection, what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(section, format!("file ends inside {what}")),
        _ => Error::Io(e),
    })
}

impl WeightReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::with_capacity(1 << 20, File::open(path)?))
    }
}

impl<R: Read> WeightReader<R> {
    pub fn new(mut src: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or(&mut src, &mut magic, FileSection::Magic, "the magic bytes")?;
        if &magic != MAGIC {
            return Err(Error::format(FileSection::Magic, format!("expected \"STUW\", found {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        read_exact_or(&mut src, &mut b4, FileSection::Version, "the version field")?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::format(FileSection::Version, format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact_or(&mut src, &mut b8, FileSection::ManifestLength, "the manifest length")?;
        let mlen = u64::from_le_bytes(b8);
        const MAX_MANIFEST: u64 = 1 << 30;
        if mlen > MAX_MANIFEST {
            return Err(Error::format(FileSection::ManifestLength, format!("implausible manifest length {mlen}")));
        }
        let mut mbytes = vec![0u8; mlen as usize];
        read_exact_or(&mut src, &mut mbytes, FileSection::Manifest, "the manifest")?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&mbytes)
            .map_err(|e| Error::format(FileSection::Manifest, format!("invalid JSON: {e}")))?;
        let mut expect = 0u64;
        for e in &manifest {
            if e.dtype != "f32" {
                return Err(Error::format(FileSection::Manifest, format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
            if e.byte_len != 4 * numel {
                return Err(Error::format(
                    FileSection::Manifest,
                    format!("{}: shape {:?} does not match byte_len {}", e.name, e.shape, e.byte_len),
                ));
            }
            if e.byte_offset != expect {
                return Err(Error::format(
                    FileSection::Manifest,
                    format!("{}: byte_offset {} breaks contiguity (expected {expect})", e.name, e.byte_offset),
                ));
            }
            expect += e.byte_len;
        }
        Ok(WeightReader { src, manifest, next: 0, crc: crc32fast::Hasher::new(), finished: false })
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    fn read_tensor(&mut self) -> Result<(String, Tensor)> {
        let e = &self.manifest[self.next];
        let numel = (e.byte_len / 4) as usize;
        let mut data = Vec::with_capacity(numel);
        let mut buf = vec![0u8; CHUNK * 4];
        let mut left = numel;
        while left > 0 {
            let n = left.min(CHUNK);
            let bytes = &mut buf[..n * 4];
            read_exact_or(&mut self.src, bytes, FileSection::Payload, &format!("tensor `{}`", e.name))?;
            self.crc.update(bytes);
            data.extend(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
            left -= n;
        }
        let name = e.name.clone();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::format(FileSection::Payload, err.to_string()))?;
        self.next += 1;
        Ok((name, t))
    }

    fn verify_checksum(&mut self) -> Result<()> {
        let mut b4 = [0u8; 4];
        read_exact_or(&mut self.src, &mut b4, FileSection::Checksum, "the trailing checksum")?;
        let stored = u32::from_le_bytes(b4);
        let computed = std::mem::take(&mut self.crc).finalize();
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut extra = [0u8; 1];
        if self.src.read(&mut extra)? != 0 {
            return Err(Error::format(FileSection::Checksum, "unexpected bytes after the checksum"));
        }
        Ok(())
    }
}

impl<R: Read> Iterator for WeightReader<R> {
    type Item = Result<(String, Tensor)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.next < self.manifest.len() {
            let r = self.read_tensor();
            if r.is_err() {
                self.finished = true;
            }
            return Some(r);
        }
        self.finished = true;
        match self.verify_checksum() {
            Ok(()) => None,
            Err(e) => Some(Err(e)),
        }
    }
}
