//! Memory models behind the engine: buffer allocation, the shared-virtual
//! page-registration model with fault penalties, and the partitioned model
//! where host data must be staged to device memory explicitly.
//!
//! Virtual addresses are `key << 32 | offset`, so every buffer owns a 4 GiB
//! window and address checks never need a range search.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimDuration;

pub const DEFAULT_PAGE_SIZE: u64 = 4096;
const OFFSET_MASK: u64 = 0xFFFF_FFFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlatformError {
    #[error("buffer length must be positive")]
    ZeroLength,
    #[error("buffer length {0} exceeds the 4 GiB per-buffer window")]
    TooLarge(u64),
    #[error("registration keys exhausted")]
    AddressSpaceExhausted,
    #[error("address 0x{vaddr:016x}+{len} is outside every allocated buffer")]
    OutOfBounds { vaddr: u64, len: u64 },
    #[error("host buffer at 0x{0:016x} is not engine-accessible in the partitioned model; stage it to device memory")]
    StagingRequired(u64),
    #[error("staging needs one host and one device buffer")]
    SameLocationStaging,
    #[error("staging length mismatch: {src} vs {dst}")]
    StagingLengthMismatch { src: u64, dst: u64 },
    #[error("remote access to unregistered memory at 0x{vaddr:016x}+{len}")]
    RemoteAccess { vaddr: u64, len: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Location {
    Host,
    Device,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryModel {
    /// One virtual address space over host and device memory, translated by a
    /// software-populated TLB.
    #[default]
    SharedVirtual,
    /// Separate host and device memories; the engine only sees device memory.
    Partitioned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Intent {
    Read,
    Write,
}

/// Host-to-device copy cost model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagingCost {
    pub pcie_bandwidth_bps: u64,
    pub pcie_base_latency: SimDuration,
    /// Time from a host call until the command reaches the engine.
    pub invocation_latency: SimDuration,
}

impl StagingCost {
    pub fn for_model(model: MemoryModel) -> Self {
        StagingCost {
            pcie_bandwidth_bps: 128_000_000_000,
            pcie_base_latency: SimDuration::from_micros(5),
            invocation_latency: match model {
                MemoryModel::SharedVirtual => SimDuration::from_micros(3),
                MemoryModel::Partitioned => SimDuration::from_micros(80),
            },
        }
    }

    pub fn copy_time(&self, len: u64) -> SimDuration {
        self.pcie_base_latency + SimDuration::for_bytes(len, self.pcie_bandwidth_bps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatformConfig {
    pub model: MemoryModel,
    pub page_size: u64,
    pub fault_penalty: SimDuration,
    /// Extra latency each time the engine resolves a host-resident range.
    pub host_access_latency: SimDuration,
    pub staging: StagingCost,
}

impl PlatformConfig {
    pub fn new(model: MemoryModel) -> Self {
        PlatformConfig {
            model,
            page_size: DEFAULT_PAGE_SIZE,
            fault_penalty: SimDuration::from_micros(50),
            host_access_latency: SimDuration::from_nanos(20),
            staging: StagingCost::for_model(model),
        }
    }
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig::new(MemoryModel::SharedVirtual)
    }
}

/// Handle to an allocated region. The bytes live in the owning [`Platform`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Buffer {
    pub key: u32,
    pub location: Location,
    pub len: u64,
}

impl Buffer {
    pub fn base_vaddr(&self) -> u64 {
        (self.key as u64) << 32
    }

    pub fn vaddr(&self, offset: u64) -> u64 {
        self.base_vaddr() + offset
    }
}

#[derive(Debug)]
pub struct PageTable {
    page_size: u64,
    registered: BTreeSet<u64>,
    fault_count: u64,
}

impl PageTable {
    fn new(page_size: u64) -> Self {
        PageTable { page_size, registered: BTreeSet::new(), fault_count: 0 }
    }

    fn pages(&self, vaddr: u64, len: u64) -> std::ops::Range<u64> {
        let first = vaddr / self.page_size;
        let last = (vaddr + len.max(1) - 1) / self.page_size;
        first..last + 1
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn fault_count(&self) -> u64 {
        self.fault_count
    }

    pub fn registered_pages(&self) -> usize {
        self.registered.len()
    }

    pub fn is_registered(&self, vaddr: u64, len: u64) -> bool {
        self.pages(vaddr, len).all(|p| self.registered.contains(&p))
    }

    fn register(&mut self, vaddr: u64, len: u64) {
        for p in self.pages(vaddr, len) {
            self.registered.insert(p);
        }
    }

    fn unregister(&mut self, vaddr: u64, len: u64) {
        for p in self.pages(vaddr, len) {
            self.registered.remove(&p);
        }
    }

    /// Registers any missing pages of the range and returns how many faulted.
    fn touch(&mut self, vaddr: u64, len: u64) -> u64 {
        let mut faults = 0;
        for p in self.pages(vaddr, len) {
            if self.registered.insert(p) {
                faults += 1;
            }
        }
        self.fault_count += faults;
        faults
    }
}

#[derive(Debug)]
struct Region {
    location: Location,
    bytes: Vec<u8>,
}

/// A resolved, bounds-checked access window plus the time it costs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolved {
    pub key: u32,
    pub offset: u64,
    pub len: u64,
    pub location: Location,
    pub penalty: SimDuration,
    pub faults: u64,
}

/// One node's memory: device and host regions plus the page table.
#[derive(Debug)]
pub struct Platform {
    config: PlatformConfig,
    next_key: u64,
    regions: BTreeMap<u32, Region>,
    page_table: PageTable,
}

pub type PlatformHandle = Arc<Mutex<Platform>>;

pub fn lock(handle: &PlatformHandle) -> MutexGuard<'_, Platform> {
    handle.lock().unwrap_or_else(|e| e.into_inner())
}

impl Platform {
    pub fn new(config: PlatformConfig) -> Self {
        Platform { page_table: PageTable::new(config.page_size), config, next_key: 1, regions: BTreeMap::new() }
    }

    pub fn into_handle(self) -> PlatformHandle {
        Arc::new(Mutex::new(self))
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn model(&self) -> MemoryModel {
        self.config.model
    }

    pub fn page_table(&self) -> &PageTable {
        &self.page_table
    }

    pub fn fault_count(&self) -> u64 {
        self.page_table.fault_count
    }

    /// Allocates with the model's default mapping: every page registered in the
    /// shared-virtual model; device pages only in the partitioned model.
    pub fn alloc(&mut self, location: Location, len: u64) -> Result<Buffer, PlatformError> {
        let map = match self.config.model {
            MemoryModel::SharedVirtual => true,
            MemoryModel::Partitioned => location == Location::Device,
        };
        self.alloc_with_mapping(location, len, map)
    }

    /// Allocates without registering pages; the first engine touch faults.
    pub fn alloc_unmapped(&mut self, location: Location, len: u64) -> Result<Buffer, PlatformError> {
        self.alloc_with_mapping(location, len, false)
    }

    fn alloc_with_mapping(&mut self, location: Location, len: u64, map: bool) -> Result<Buffer, PlatformError> {
        if len == 0 {
            return Err(PlatformError::ZeroLength);
        }
        if len > OFFSET_MASK + 1 {
            return Err(PlatformError::TooLarge(len));
        }
        if self.next_key > u32::MAX as u64 {
            return Err(PlatformError::AddressSpaceExhausted);
        }
        let key = self.next_key as u32;
        self.next_key += 1;
        self.regions.insert(key, Region { location, bytes: vec![0u8; len as usize] });
        let buf = Buffer { key, location, len };
        if map {
            self.page_table.register(buf.base_vaddr(), len);
        }
        Ok(buf)
    }

    /// Test hook that jumps the key allocator, e.g. to exercise exhaustion.
    pub fn set_next_key(&mut self, key: u64) {
        self.next_key = key;
    }

    pub fn free(&mut self, buf: &Buffer) {
        if self.regions.remove(&buf.key).is_some() {
            self.page_table.unregister(buf.base_vaddr(), buf.len);
        }
    }

    pub fn buffer_at(&self, vaddr: u64) -> Option<Buffer> {
        let key = (vaddr >> 32) as u32;
        self.regions.get(&key).map(|r| Buffer { key, location: r.location, len: r.bytes.len() as u64 })
    }

    /// Bytes available from `vaddr` to the end of its buffer.
    pub fn remaining_at(&self, vaddr: u64) -> Option<u64> {
        let off = vaddr & OFFSET_MASK;
        self.buffer_at(vaddr).and_then(|b| b.len.checked_sub(off))
    }

    fn locate(&self, vaddr: u64, len: u64) -> Result<(u32, u64, Location), PlatformError> {
        let key = (vaddr >> 32) as u32;
        let off = vaddr & OFFSET_MASK;
        let region = self.regions.get(&key).ok_or(PlatformError::OutOfBounds { vaddr, len })?;
        if off.checked_add(len).is_none_or(|end| end > region.bytes.len() as u64) {
            return Err(PlatformError::OutOfBounds { vaddr, len });
        }
        Ok((key, off, region.location))
    }

    /// Engine-side translation of a virtual range.
    ///
    /// Shared-virtual: unregistered pages fault, cost `fault_penalty` each and
    /// are registered afterwards; host ranges add `host_access_latency`.
    /// Partitioned: host ranges are refused.
    pub fn resolve(&mut self, vaddr: u64, len: u64, _intent: Intent) -> Result<Resolved, PlatformError> {
        let (key, offset, location) = self.locate(vaddr, len)?;
        if self.config.model == MemoryModel::Partitioned && location == Location::Host {
            return Err(PlatformError::StagingRequired(vaddr));
        }
        let mut penalty = SimDuration::ZERO;
        let mut faults = 0;
        if len > 0 {
            faults = self.page_table.touch(vaddr, len);
            penalty = SimDuration(self.config.fault_penalty.0 * faults);
        }
        if location == Location::Host {
            penalty += self.config.host_access_latency;
        }
        Ok(Resolved { key, offset, len, location, penalty, faults })
    }

    /// Reads through a range returned by [`Platform::resolve`].
    pub fn read_resolved(&self, r: &Resolved) -> &[u8] {
        let bytes = &self.regions[&r.key].bytes;
        &bytes[r.offset as usize..(r.offset + r.len) as usize]
    }

    pub fn write_resolved(&mut self, r: &Resolved, data: &[u8]) {
        let bytes = &mut self.regions.get_mut(&r.key).expect("resolved region freed").bytes;
        bytes[r.offset as usize..r.offset as usize + data.len()].copy_from_slice(data);
    }

    /// Landing path for one-sided remote writes: all pages must already be
    /// registered and engine-visible.
    pub fn remote_write(&mut self, vaddr: u64, data: &[u8]) -> Result<(), PlatformError> {
        self.check_remote_write(vaddr, data.len() as u64)?;
        let (key, off, _) = self.locate(vaddr, data.len() as u64)?;
        let bytes = &mut self.regions.get_mut(&key).unwrap().bytes;
        bytes[off as usize..off as usize + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn check_remote_write(&self, vaddr: u64, len: u64) -> Result<(), PlatformError> {
        let (_, _, location) = self.locate(vaddr, len).map_err(|_| PlatformError::RemoteAccess { vaddr, len })?;
        let visible = !(self.config.model == MemoryModel::Partitioned && location == Location::Host);
        if !visible || (len > 0 && !self.page_table.is_registered(vaddr, len)) {
            return Err(PlatformError::RemoteAccess { vaddr, len });
        }
        Ok(())
    }

    /// CPU-side read of a whole buffer; no translation cost.
    pub fn host_read(&self, buf: &Buffer) -> Result<Vec<u8>, PlatformError> {
        self.regions
            .get(&buf.key)
            .map(|r| r.bytes.clone())
            .ok_or(PlatformError::OutOfBounds { vaddr: buf.base_vaddr(), len: buf.len })
    }

    /// CPU-side write into a buffer at `offset`; no translation cost.
    pub fn host_write(&mut self, buf: &Buffer, offset: u64, data: &[u8]) -> Result<(), PlatformError> {
        let (key, off, _) = self.locate(buf.vaddr(offset), data.len() as u64)?;
        let bytes = &mut self.regions.get_mut(&key).unwrap().bytes;
        bytes[off as usize..off as usize + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Copies host<->device and returns the modeled transfer time.
    pub fn stage(&mut self, src: &Buffer, dst: &Buffer) -> Result<SimDuration, PlatformError> {
        if src.location == dst.location {
            return Err(PlatformError::SameLocationStaging);
        }
        if src.len != dst.len {
            return Err(PlatformError::StagingLengthMismatch { src: src.len, dst: dst.len });
        }
        let data = self.host_read(src)?;
        self.host_write(dst, 0, &data)?;
        Ok(self.config.staging.copy_time(src.len))
    }
}
