//! Double-buffered single-writer feature cache.
//!
//! The writer fills the slot readers are not pointed at, then flips a packed
//! `(version, slot)` word. Each slot carries a sequence counter so a reader that
//! was lapped by two publishes notices and retries. Readers never block the writer.

use std::sync::atomic::{fence, AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{invalid, shape, Result};
use crate::smu::{memory_with_source, MemoryPyramid};
use crate::tensor::FeatureMap;

/// Shape of one cached level: `(level, channels, height, width)`.
pub type LevelLayout = (u8, usize, usize, usize);

struct Slot {
    seq: AtomicU64,
    version: AtomicU64,
    source: AtomicU64,
    checksum: AtomicU64,
    data: Vec<AtomicU64>,
}

impl Slot {
    fn new(len: usize) -> Self {
        Self {
            seq: AtomicU64::new(0),
            version: AtomicU64::new(0),
            source: AtomicU64::new(0),
            checksum: AtomicU64::new(0),
            data: (0..len).map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

struct Shared {
    layout: Vec<LevelLayout>,
    slots: [Slot; 2],
    /// `version << 1 | slot`; zero until the first publish.
    current: AtomicU64,
}

/// A consistent copy of one published memory pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub version: u64,
    pub source_frame: usize,
    pub checksum: u64,
    pub levels: Vec<FeatureMap>,
}

impl Snapshot {
    pub fn into_memory(self) -> Result<MemoryPyramid> {
        memory_with_source(self.levels, self.source_frame)
    }

    /// Recomputes the checksum from the copied data.
    pub fn verify(&self) -> bool {
        checksum(self.version, self.source_frame, self.levels.iter().flat_map(|l| l.data().iter().map(|v| v.to_bits())))
            == self.checksum
    }
}

/// FNV-1a over the version, source frame and value bit patterns.
pub fn checksum(version: u64, source: usize, bits: impl Iterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for word in [version, source as u64].into_iter().chain(bits) {
        for b in word.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Read side; cheap to clone and share.
#[derive(Clone)]
pub struct CacheReader {
    shared: Arc<Shared>,
}

/// The only handle that can publish.
pub struct CacheWriter {
    shared: Arc<Shared>,
    version: u64,
}

/// Creates an empty cache for pyramids with the given level layout.
pub fn feature_cache(layout: Vec<LevelLayout>) -> Result<(CacheWriter, CacheReader)> {
    if layout.is_empty() || layout.iter().any(|&(_, c, h, w)| c * h * w == 0) {
        return Err(invalid(format!("cache layout {layout:?} has empty levels")));
    }
    let len = layout.iter().map(|&(_, c, h, w)| c * h * w).sum();
    let shared = Arc::new(Shared { layout, slots: [Slot::new(len), Slot::new(len)], current: AtomicU64::new(0) });
    Ok((CacheWriter { shared: shared.clone(), version: 0 }, CacheReader { shared }))
}

/// Layout of an existing pyramid.
pub fn layout_of(levels: &[FeatureMap]) -> Vec<LevelLayout> {
    levels.iter().map(|l| (l.level(), l.channels(), l.height(), l.width())).collect()
}

impl CacheWriter {
    pub fn reader(&self) -> CacheReader {
        CacheReader { shared: self.shared.clone() }
    }

    /// Versions published so far.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Publishes a snapshot and returns its version (starting at 1).
    pub fn publish(&mut self, levels: &[FeatureMap], source_frame: usize) -> Result<u64> {
        let sh = &*self.shared;
        if layout_of(levels) != sh.layout {
            return Err(shape(format!("snapshot layout {:?} does not match cache {:?}", layout_of(levels), sh.layout)));
        }
        let cur = sh.current.load(Ordering::Relaxed);
        let idx = if cur == 0 { 0 } else { 1 - (cur & 1) as usize };
        let slot = &sh.slots[idx];
        let version = self.version + 1;

        let s0 = slot.seq.load(Ordering::Relaxed);
        slot.seq.store(s0.wrapping_add(1), Ordering::Relaxed);
        fence(Ordering::Release);
        let bits = levels.iter().flat_map(|l| l.data().iter().map(|v| v.to_bits()));
        for (cell, b) in slot.data.iter().zip(bits.clone()) {
            cell.store(b, Ordering::Relaxed);
        }
        slot.version.store(version, Ordering::Relaxed);
        slot.source.store(source_frame as u64, Ordering::Relaxed);
        slot.checksum.store(checksum(version, source_frame, bits), Ordering::Relaxed);
        slot.seq.store(s0.wrapping_add(2), Ordering::Release);

        sh.current.store(version << 1 | idx as u64, Ordering::Release);
        self.version = version;
        Ok(version)
    }
}

impl CacheReader {
    /// Latest published version without copying, `0` when empty.
    pub fn latest_version(&self) -> u64 {
        self.shared.current.load(Ordering::Acquire) >> 1
    }

    /// Copies the newest snapshot; `None` before the first publish.
    pub fn read_latest(&self) -> Option<Snapshot> {
        self.read_with_retries().map(|(s, _)| s)
    }

    /// Like [`read_latest`](Self::read_latest), also reporting how many times
    /// the copy was discarded because the writer lapped it.
    pub fn read_with_retries(&self) -> Option<(Snapshot, u32)> {
        let sh = &*self.shared;
        let mut retries = 0;
        loop {
            let cur = sh.current.load(Ordering::Acquire);
            if cur == 0 {
                return None;
            }
            let slot = &sh.slots[(cur & 1) as usize];
            let s1 = slot.seq.load(Ordering::Acquire);
            if s1 & 1 == 0 {
                let raw: Vec<f64> = slot.data.iter().map(|c| f64::from_bits(c.load(Ordering::Relaxed))).collect();
                let version = slot.version.load(Ordering::Relaxed);
                let source = slot.source.load(Ordering::Relaxed) as usize;
                let sum = slot.checksum.load(Ordering::Relaxed);
                fence(Ordering::Acquire);
                if slot.seq.load(Ordering::Relaxed) == s1 {
                    return Some((self.assemble(version, source, sum, raw), retries));
                }
            }
            retries += 1;
            std::hint::spin_loop();
        }
    }

    fn assemble(&self, version: u64, source_frame: usize, checksum: u64, raw: Vec<f64>) -> Snapshot {
        let mut off = 0;
        let levels = self
            .shared
            .layout
            .iter()
            .map(|&(level, c, h, w)| {
                let n = c * h * w;
                let m = FeatureMap::new(level, c, h, w, raw[off..off + n].to_vec()).expect("layout checked on publish");
                off += n;
                m
            })
            .collect();
        Snapshot { version, source_frame, checksum, levels }
    }
}
