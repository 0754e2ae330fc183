//! Protocol offload engine (POE) abstraction.
//!
//! A [`Transport`] is one node's view of the network: it opens sessions to
//! peers, accepts frames for transmission and surfaces arrivals through
//! [`Transport::poll_rx`]. Four backends exist:
//!
//! - [`fabric`]: deterministic virtual-time fabric in one process, emulating a
//!   reliable stream POE, a lossy datagram POE or an RDMA POE;
//! - [`tcp`]: length-prefixed frames over real stream sockets;
//! - [`udp`]: one segment per datagram over real datagram sockets.

pub mod fabric;
pub mod tcp;
pub mod udp;

use std::fmt;
use std::net::SocketAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::PlatformError;
use crate::time::{SimDuration, SimTime};
use crate::wire::{MessageSignature, Segment, WireError, SIGNATURE_LEN};

pub use fabric::{Fabric, FabricConfig, FabricPort, PoeKind, WireKind, WireRecord};
pub use tcp::TcpTransport;
pub use udp::UdpTransport;

pub type NodeId = u32;

/// Extra bytes a one-sided write carries on the wire (target address and length).
pub const RDMA_WRITE_OVERHEAD: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionId(pub u32);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("unknown peer node {0}")]
    UnknownPeer(NodeId),
    #[error("session {0} is not open")]
    ClosedSession(SessionId),
    #[error("session limit of {0} reached")]
    SessionLimit(u32),
    #[error("{0} frames are not supported by this backend")]
    Unsupported(&'static str),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("remote access error: {0}")]
    RemoteAccess(PlatformError),
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
    #[error("rendezvous failed: {0}")]
    Rendezvous(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    HeaderedMessage,
    RdmaWrite,
    RdmaSend,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub header: Option<MessageSignature>,
    pub remote_addr: Option<u64>,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn headered(header: MessageSignature, payload: Vec<u8>) -> Self {
        Frame { kind: FrameKind::HeaderedMessage, header: Some(header), remote_addr: None, payload }
    }

    pub fn rdma_send(header: MessageSignature, payload: Vec<u8>) -> Self {
        Frame { kind: FrameKind::RdmaSend, header: Some(header), remote_addr: None, payload }
    }

    pub fn rdma_write(remote_addr: u64, payload: Vec<u8>) -> Self {
        Frame { kind: FrameKind::RdmaWrite, header: None, remote_addr: Some(remote_addr), payload }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        match self.kind {
            FrameKind::RdmaWrite if self.remote_addr.is_none() => {
                Err(TransportError::InvalidFrame("RDMA write without remote address".into()))
            }
            FrameKind::HeaderedMessage | FrameKind::RdmaSend => {
                let h = self.header.as_ref().ok_or_else(|| TransportError::InvalidFrame("missing header".into()))?;
                h.validate()?;
                if h.payload_len != self.payload.len() as u64 {
                    return Err(TransportError::InvalidFrame(format!(
                        "header declares {} bytes, payload has {}",
                        h.payload_len,
                        self.payload.len()
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Bytes this frame occupies on a stream-style wire.
    pub fn wire_bytes(&self) -> u64 {
        let overhead = match self.kind {
            FrameKind::HeaderedMessage | FrameKind::RdmaSend => SIGNATURE_LEN as u64,
            FrameKind::RdmaWrite => RDMA_WRITE_OVERHEAD,
        };
        overhead + self.payload.len() as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RxKind {
    MessageArrived { header: MessageSignature, payload: Vec<u8> },
    SegmentArrived { header: MessageSignature, segment: Segment },
    /// Passive side of a one-sided write: the bytes are already in memory.
    WriteLanded { remote_addr: u64, len: u64 },
    /// Undecoded bytes; the engine's Rx system parses them.
    Raw { bytes: Vec<u8>, datagram: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RxEvent {
    pub session: SessionId,
    pub kind: RxKind,
    pub arrival: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TxCompletion {
    pub wire_bytes: u64,
    pub accepted_at: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Capabilities {
    pub rdma: bool,
    pub reliable: bool,
    pub ordered: bool,
    pub virtual_time: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportCounters {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub frames_received: u64,
    pub datagrams_dropped: u64,
}

/// One node's network interface.
pub trait Transport: Send {
    fn local(&self) -> NodeId;
    fn capabilities(&self) -> Capabilities;
    /// Opens (or returns the existing) bidirectional session to `peer`.
    fn open_session(&mut self, peer: NodeId) -> Result<SessionId, TransportError>;
    fn peer_of(&self, session: SessionId) -> Option<NodeId>;
    fn session_count(&self) -> usize;
    fn transmit(&mut self, session: SessionId, frame: Frame) -> Result<TxCompletion, TransportError>;
    fn poll_rx(&mut self) -> Option<RxEvent>;
    fn now(&self) -> SimTime;
    fn counters(&self) -> TransportCounters;
    /// Wall-clock backends block until an event may be ready or `deadline`
    /// passes. Virtual-time backends return immediately.
    fn park(&mut self, _deadline: Option<SimTime>) {}
}

/// Latency/bandwidth accounting for one link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub base_latency: SimDuration,
    pub bandwidth_bps: u64,
    pub per_hop_processing: SimDuration,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            base_latency: SimDuration::from_micros(1),
            bandwidth_bps: 100_000_000_000,
            per_hop_processing: SimDuration::from_nanos(50),
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.base_latency.is_zero() || self.bandwidth_bps == 0 || self.per_hop_processing.is_zero() {
            return Err("cost model constants must be strictly positive".into());
        }
        Ok(())
    }

    pub fn serialization(&self, bytes: u64) -> SimDuration {
        SimDuration::for_bytes(bytes, self.bandwidth_bps)
    }

    /// `base_latency + (size + overhead) * 8 / bandwidth`.
    pub fn transfer_time(&self, size_bytes: u64, overhead_bytes: u64) -> SimDuration {
        self.base_latency + self.serialization(size_bytes + overhead_bytes)
    }
}

/// Modeled time of one headered message of `size_bytes` on an idle link.
pub fn fabric_cost(size_bytes: u64, model: &CostModel) -> SimDuration {
    model.transfer_time(size_bytes, SIGNATURE_LEN as u64)
}

/// Static rank -> socket address table used to rendezvous socket backends.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressTable {
    pub ranks: Vec<String>,
}

impl AddressTable {
    pub fn localhost(base_port: u16, size: u32) -> Self {
        AddressTable { ranks: (0..size).map(|r| format!("127.0.0.1:{}", base_port as u32 + r)).collect() }
    }

    /// Picks `size` loopback ports currently free for both TCP and UDP.
    pub fn free_localhost(size: u32) -> Result<Self, TransportError> {
        let mut held = Vec::new();
        let mut ranks = Vec::new();
        while ranks.len() < size as usize {
            let tcp = std::net::TcpListener::bind("127.0.0.1:0")?;
            let addr = tcp.local_addr()?;
            if let Ok(udp) = std::net::UdpSocket::bind(addr) {
                ranks.push(addr.to_string());
                held.push((tcp, udp));
            }
        }
        Ok(AddressTable { ranks })
    }

    pub fn size(&self) -> u32 {
        self.ranks.len() as u32
    }

    pub fn addr(&self, rank: u32) -> Result<SocketAddr, TransportError> {
        let s = self.ranks.get(rank as usize).ok_or(TransportError::UnknownPeer(rank))?;
        s.parse().map_err(|e| TransportError::Rendezvous(format!("bad address {s:?} for rank {rank}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, TransportError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| TransportError::Rendezvous(format!("address table: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), TransportError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| TransportError::Io(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Handshake hello shared by the socket backends: magic, rank, size.
pub(crate) const HELLO_LEN: usize = 12;

pub(crate) fn encode_hello(magic: u32, rank: u32, size: u32) -> [u8; HELLO_LEN] {
    let mut b = [0u8; HELLO_LEN];
    b[0..4].copy_from_slice(&magic.to_le_bytes());
    b[4..8].copy_from_slice(&rank.to_le_bytes());
    b[8..12].copy_from_slice(&size.to_le_bytes());
    b
}

pub(crate) fn decode_hello(magic: u32, b: &[u8]) -> Option<(u32, u32)> {
    if b.len() < HELLO_LEN || u32::from_le_bytes(b[0..4].try_into().unwrap()) != magic {
        return None;
    }
    Some((u32::from_le_bytes(b[4..8].try_into().unwrap()), u32::from_le_bytes(b[8..12].try_into().unwrap())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fabric_cost_of_one_mib() {
        let model = CostModel::default();
        let t = fabric_cost(1 << 20, &model);
        // 1 us + 1048624 * 8 / 1e11 s
        assert_eq!(t.as_ps(), 1_000_000 + 83_889_920);
        assert!((t.as_micros_f64() - 84.89).abs() < 0.01);
    }

    #[test]
    fn zero_payload_costs_header_only() {
        let model = CostModel::default();
        assert_eq!(fabric_cost(0, &model), model.base_latency + SimDuration::for_bytes(48, model.bandwidth_bps));
    }

    #[test]
    fn doubling_bandwidth_halves_size_term() {
        let slow = CostModel::default();
        let fast = CostModel { bandwidth_bps: slow.bandwidth_bps * 2, ..slow };
        let a = fabric_cost(1 << 20, &slow) - slow.base_latency;
        let b = fabric_cost(1 << 20, &fast) - fast.base_latency;
        assert_eq!(a.as_ps(), 2 * b.as_ps());
    }

    #[test]
    fn frame_invariants() {
        let mut f = Frame::rdma_write(0x1_0000_0000, vec![1]);
        assert!(f.validate().is_ok());
        f.remote_addr = None;
        assert!(f.validate().is_err());
        let sig = MessageSignature::eager(0, 0, 1, 0, 0, 4);
        assert!(Frame::headered(sig, vec![0; 3]).validate().is_err());
        assert!(Frame { header: None, ..Frame::headered(sig, vec![0; 4]) }.validate().is_err());
    }

    #[test]
    fn cost_model_rejects_zero_constants() {
        let m = CostModel { bandwidth_bps: 0, ..CostModel::default() };
        assert!(m.validate().is_err());
        assert!(CostModel::default().validate().is_ok());
    }
}
