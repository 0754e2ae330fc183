use serde::{Deserialize, Serialize};

use crate::time::SimTime;

use super::EngineError;

/// Wildcard for source ranks and tags in receive matching.
pub const ANY: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Op {
    Nop,
    Send,
    Recv,
    Bcast,
    Reduce,
    Gather,
    AllToAll,
    Barrier,
}

impl Op {
    pub fn is_collective(self) -> bool {
        matches!(self, Op::Bcast | Op::Reduce | Op::Gather | Op::AllToAll | Op::Barrier)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    I32,
    I64,
    F32,
    F64,
}

impl Dtype {
    pub const ALL: [Dtype; 4] = [Dtype::I32, Dtype::I64, Dtype::F32, Dtype::F64];

    pub fn size(self) -> u64 {
        match self {
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::I64 | Dtype::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceFn {
    Sum,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataEndpoint {
    /// Virtual address resolved through the platform.
    Memory(u64),
    /// Kernel-facing stream port.
    Stream(u8),
    None,
}

impl DataEndpoint {
    pub fn is_stream(self) -> bool {
        matches!(self, DataEndpoint::Stream(_))
    }
}

bitflags::bitflags! {
    #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
    pub struct RequestFlags: u8 {
        const HOST_BUFFER = 1 << 0;
        const DEVICE_BUFFER = 1 << 1;
        const STREAMING = 1 << 2;
        const SYNCHRONOUS = 1 << 3;
    }
}

/// One host command to the engine.
///
/// `peer` and `tag` are used by SEND and RECV only. For BCAST the same
/// endpoint is the source at the root and the destination elsewhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcloRequest {
    pub op: Op,
    pub dtype: Dtype,
    pub count: u64,
    pub root: u32,
    pub reduce_fn: ReduceFn,
    pub comm_id: u32,
    pub src: DataEndpoint,
    pub dst: DataEndpoint,
    pub flags: RequestFlags,
    pub peer: u32,
    pub tag: u32,
}

impl CcloRequest {
    fn base(op: Op, comm_id: u32) -> Self {
        CcloRequest {
            op,
            dtype: Dtype::I32,
            count: 0,
            root: 0,
            reduce_fn: ReduceFn::Sum,
            comm_id,
            src: DataEndpoint::None,
            dst: DataEndpoint::None,
            flags: RequestFlags::empty(),
            peer: 0,
            tag: 0,
        }
    }

    fn with_stream_flag(mut self) -> Self {
        if self.src.is_stream() || self.dst.is_stream() {
            self.flags |= RequestFlags::STREAMING;
        }
        self
    }

    pub fn nop() -> Self {
        CcloRequest::base(Op::Nop, 0)
    }

    pub fn send(comm_id: u32, peer: u32, tag: u32, src: DataEndpoint, dtype: Dtype, count: u64) -> Self {
        CcloRequest { peer, tag, src, dtype, count, ..CcloRequest::base(Op::Send, comm_id) }.with_stream_flag()
    }

    pub fn recv(comm_id: u32, peer: u32, tag: u32, dst: DataEndpoint, dtype: Dtype, count: u64) -> Self {
        CcloRequest { peer, tag, dst, dtype, count, ..CcloRequest::base(Op::Recv, comm_id) }.with_stream_flag()
    }

    pub fn bcast(comm_id: u32, root: u32, buf: DataEndpoint, dtype: Dtype, count: u64) -> Self {
        CcloRequest { root, src: buf, dst: buf, dtype, count, ..CcloRequest::base(Op::Bcast, comm_id) }
            .with_stream_flag()
    }

    pub fn reduce(
        comm_id: u32,
        root: u32,
        reduce_fn: ReduceFn,
        dtype: Dtype,
        src: DataEndpoint,
        dst: DataEndpoint,
        count: u64,
    ) -> Self {
        CcloRequest { root, reduce_fn, dtype, src, dst, count, ..CcloRequest::base(Op::Reduce, comm_id) }
            .with_stream_flag()
    }

    /// `count` elements per rank; `dst` at the root holds `size * count`.
    pub fn gather(comm_id: u32, root: u32, dtype: Dtype, src: DataEndpoint, dst: DataEndpoint, count: u64) -> Self {
        CcloRequest { root, dtype, src, dst, count, ..CcloRequest::base(Op::Gather, comm_id) }.with_stream_flag()
    }

    /// `src` and `dst` each hold `size` blocks of `block_count` elements.
    pub fn all_to_all(comm_id: u32, dtype: Dtype, src: DataEndpoint, dst: DataEndpoint, block_count: u64) -> Self {
        CcloRequest { dtype, src, dst, count: block_count, ..CcloRequest::base(Op::AllToAll, comm_id) }
            .with_stream_flag()
    }

    pub fn barrier(comm_id: u32) -> Self {
        CcloRequest::base(Op::Barrier, comm_id)
    }

    pub fn bytes(&self) -> u64 {
        self.count * self.dtype.size()
    }

    pub fn is_streaming(&self) -> bool {
        self.flags.contains(RequestFlags::STREAMING)
    }

    /// Checks the invariants that do not need the communicator.
    pub fn validate(&self) -> Result<(), EngineError> {
        let has_stream = self.src.is_stream() || self.dst.is_stream();
        if has_stream != self.is_streaming() {
            return Err(EngineError::InvalidRequest(
                "streaming flag must be set exactly when an endpoint is a stream port".into(),
            ));
        }
        if self.count.checked_mul(self.dtype.size()).is_none() {
            return Err(EngineError::InvalidRequest(format!("{} elements overflow the byte count", self.count)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum RequestStatus {
    Queued,
    Running,
    Complete { bytes_moved: u64, issued_at: SimTime, completed_at: SimTime },
    Failed { error: String, at: SimTime },
}

impl RequestStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, RequestStatus::Complete { .. } | RequestStatus::Failed { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streaming_flag_follows_endpoints() {
        let r = CcloRequest::send(0, 1, 0, DataEndpoint::Stream(0), Dtype::F32, 4);
        assert!(r.is_streaming());
        assert!(r.validate().is_ok());
        let mut m = CcloRequest::send(0, 1, 0, DataEndpoint::Memory(1 << 32), Dtype::F32, 4);
        assert!(!m.is_streaming());
        m.flags |= RequestFlags::STREAMING;
        assert!(m.validate().is_err());
    }

    #[test]
    fn byte_count_overflow_is_rejected() {
        let r = CcloRequest::send(0, 1, 0, DataEndpoint::Memory(1 << 32), Dtype::F64, u64::MAX / 4);
        assert!(r.validate().is_err());
    }
}
