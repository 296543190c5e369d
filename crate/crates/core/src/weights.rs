//! Named-tensor container and its `.p2w` binary format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "P2WM"  u32 version=1  u32 entry_count
//! entry*: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 data[prod(dims)]
//! u32 CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Entries are written in byte-wise name order, so equal stores serialize
//! to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, SlotRole};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"P2WM";
pub const VERSION: u32 = 1;

/// Initial PReLU slope of freshly initialized weights.
pub const INIT_SLOPE: f32 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl WeightEntry {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Views the entry as a rank-4 tensor, padding missing trailing dims
    /// with 1. Fails for ranks above 4.
    pub fn to_tensor(&self) -> Result<Tensor> {
        ensure!(self.dims.len() <= 4, Shape, "rank {} entry is not a tensor", self.dims.len());
        let mut d = [1usize; 4];
        d[..self.dims.len()].copy_from_slice(&self.dims);
        Tensor::from_vec(Shape::new(d[0], d[1], d[2], d[3])?, self.data.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, WeightEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        ensure!(!name.is_empty(), Format, "entry name must be non-empty");
        ensure!(
            name.len() <= u16::MAX as usize,
            Format,
            "entry name longer than {} bytes",
            u16::MAX
        );
        ensure!(
            !dims.is_empty() && dims.len() <= u8::MAX as usize,
            Format,
            "entry `{name}` has rank {}",
            dims.len()
        );
        ensure!(
            dims.iter().all(|&d| d >= 1 && d <= u32::MAX as usize),
            Format,
            "entry `{name}` has an invalid extent in {dims:?}"
        );
        let expected: usize = dims.iter().product();
        ensure!(
            data.len() == expected,
            Format,
            "entry `{name}`: {} values for dims {dims:?}",
            data.len()
        );
        self.entries.insert(name, WeightEntry { dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<WeightEntry> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.param_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.dims.len() as u8);
            for &d in &entry.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Writes the container and returns the number of bytes written.
    pub fn save(&self, mut sink: impl Write) -> Result<usize> {
        let bytes = self.to_bytes();
        sink.write_all(&bytes)?;
        Ok(bytes.len())
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<usize> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(mut source: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncation(format!("{} bytes, header needs 4", bytes.len())));
        }
        ensure!(&bytes[..4] == MAGIC, Format, "bad magic {:?}", &bytes[..4]);
        if bytes.len() < 16 {
            return Err(Error::Truncation(format!(
                "{} bytes, header and checksum need 16",
                bytes.len()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        ensure!(version == VERSION, Format, "unsupported version {version}");

        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            // A stream cut short also fails the checksum; report it as such
            // when the entry table runs past the end.
            return Err(match parse_entries(bytes) {
                Err(e @ Error::Truncation(_)) => e,
                _ => Error::Corruption(format!(
                    "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
                )),
            });
        }
        parse_entries(bytes)
    }
}

/// Walks the entry table of a full container (including the checksum).
fn parse_entries(bytes: &[u8]) -> Result<WeightStore> {
    let end = bytes.len() - 4;
    let mut cur = Cursor { bytes: &bytes[..end], pos: 12 };
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let mut store = WeightStore::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_owned();
        let rank = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("entry `{name}` dims overflow")))?;
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        ensure!(
            !store.entries.contains_key(&name),
            Format,
            "duplicate entry `{name}`"
        );
        store.insert(name, dims, data)?;
    }
    ensure!(
        cur.pos == end,
        Format,
        "{} unexpected bytes after the last entry",
        end - cur.pos
    );
    Ok(store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let stop = self.pos.checked_add(n).filter(|&s| s <= self.bytes.len());
        let stop = stop.ok_or_else(|| {
            Error::Truncation(format!(
                "need {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len().saturating_sub(self.pos)
            ))
        })?;
        let out = &self.bytes[self.pos..stop];
        self.pos = stop;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Fresh weights for every slot of `graph`: convolution kernels uniform in
/// `±1/sqrt(fan_in)`, zero biases, PReLU slopes 0.25, unit gamma, zero beta.
pub fn random_init(graph: &Graph, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for slot in graph.param_slots() {
        let n = slot.len();
        let data = match slot.role {
            SlotRole::Weight { fan_in } => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            SlotRole::Bias | SlotRole::Beta => vec![0.0; n],
            SlotRole::Slope => vec![INIT_SLOPE; n],
            SlotRole::Gamma => vec![1.0; n],
        };
        store
            .insert(slot.name, slot.dims, data)
            .expect("graph slots are well-formed");
    }
    store
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMismatch {
    pub slot: String,
    pub expected: Vec<usize>,
    pub found: Vec<usize>,
}

/// Differences between a graph's parameter slots and a store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BindReport {
    /// Slots with no entry, in graph order.
    pub missing: Vec<String>,
    /// Entries no slot refers to, in name order.
    pub extra: Vec<String>,
    pub mismatched: Vec<ShapeMismatch>,
}

impl BindReport {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty() && self.mismatched.is_empty()
    }

    /// The first problem as a binding error, graph-order slots first.
    pub fn first_error(&self, graph: &Graph) -> Option<Error> {
        let first_slot = graph.param_slots().into_iter().find_map(|slot| {
            if self.missing.contains(&slot.name) {
                Some((slot.name, "no entry in weight store".to_string()))
            } else {
                self.mismatched.iter().find(|m| m.slot == slot.name).map(|m| {
                    (
                        slot.name,
                        format!("expected dims {:?}, found {:?}", m.expected, m.found),
                    )
                })
            }
        });
        let (slot, reason) = first_slot.or_else(|| {
            self.extra
                .first()
                .map(|name| (name.clone(), "entry not used by the graph".to_string()))
        })?;
        Some(Error::Binding { slot, reason })
    }
}

pub fn bind_check(graph: &Graph, store: &WeightStore) -> BindReport {
    let mut report = BindReport::default();
    let slots = graph.param_slots();
    for slot in &slots {
        match store.get(&slot.name) {
            None => report.missing.push(slot.name.clone()),
            Some(entry) if entry.dims != slot.dims => report.mismatched.push(ShapeMismatch {
                slot: slot.name.clone(),
                expected: slot.dims.clone(),
                found: entry.dims.clone(),
            }),
            Some(_) => {}
        }
    }
    let known: std::collections::HashSet<&str> = slots.iter().map(|s| s.name.as_str()).collect();
    report.extra = store
        .iter()
        .map(|(name, _)| name)
        .filter(|name| !known.contains(name))
        .map(str::to_owned)
        .collect();
    report
}
