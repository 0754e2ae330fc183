//! Datagram POE over real UDP sockets.
//!
//! Every datagram carries the full signature, the 24-byte segment subheader
//! and one segment body, so the receiver can place it without any ordering
//! assumption. There is no retransmission: a lost datagram leaves its message
//! incomplete and the engine's receive timeout fails the request.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::ErrorKind;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::{
    decode_hello, encode_hello, AddressTable, Capabilities, Frame, FrameKind, NodeId, RxEvent, RxKind, SessionId,
    Transport, TransportCounters, TransportError, TxCompletion,
};
use crate::time::{SimDuration, SimTime};
use crate::wire::{encode_header, segment_message, SIGNATURE_LEN, SIGNATURE_MAGIC, SUBHEADER_LEN};

const HELLO_MAGIC: u32 = 0x5544_4C48;
const ACK_MAGIC: u32 = 0x5544_4C41;
const MAX_DATAGRAM: usize = 65_507;
pub const DEFAULT_UDP_MTU: u32 = 8192;
/// Datagrams sent back-to-back before the sender yields to let receivers drain.
const BURST: usize = 16;
/// Requested kernel receive buffer; the kernel may clamp it.
const RECV_BUFFER: usize = 8 << 20;

type Incoming = (NodeId, Vec<u8>, SimTime);

pub struct UdpTransport {
    rank: NodeId,
    socket: UdpSocket,
    peers: BTreeMap<NodeId, SocketAddr>,
    rx: Receiver<Incoming>,
    stash: VecDeque<RxEvent>,
    epoch: Instant,
    mtu: u32,
    next_msg_id: u64,
    counters: TransportCounters,
    stop: Arc<AtomicBool>,
}

fn clock(epoch: Instant) -> SimTime {
    SimTime(SimDuration::from_std(epoch.elapsed()).as_ps())
}

fn magic_of(b: &[u8]) -> Option<u32> {
    b.get(0..4).map(|m| u32::from_le_bytes(m.try_into().unwrap()))
}

impl UdpTransport {
    /// Binds this rank's address and exchanges hello/ack datagrams with every
    /// other rank in the table.
    pub fn connect_mesh(rank: u32, table: &AddressTable, timeout: Duration) -> Result<Self, TransportError> {
        Self::connect_mesh_with_mtu(rank, table, timeout, DEFAULT_UDP_MTU)
    }

    pub fn connect_mesh_with_mtu(
        rank: u32,
        table: &AddressTable,
        timeout: Duration,
        mtu: u32,
    ) -> Result<Self, TransportError> {
        let size = table.size();
        if rank >= size {
            return Err(TransportError::UnknownPeer(rank));
        }
        if mtu == 0 || mtu as usize + SIGNATURE_LEN + SUBHEADER_LEN > MAX_DATAGRAM {
            return Err(TransportError::InvalidFrame(format!("datagram mtu {mtu} out of range")));
        }
        let addr = table.addr(rank)?;
        let socket =
            UdpSocket::bind(addr).map_err(|e| TransportError::Bind { addr: addr.to_string(), reason: e.to_string() })?;
        let _ = socket2::SockRef::from(&socket).set_recv_buffer_size(RECV_BUFFER);
        let mut peers = BTreeMap::new();
        let mut by_addr = BTreeMap::new();
        for p in (0..size).filter(|&p| p != rank) {
            let a = table.addr(p)?;
            peers.insert(p, a);
            by_addr.insert(a, p);
        }

        let epoch = Instant::now();
        let deadline = epoch + timeout;
        let hello = encode_hello(HELLO_MAGIC, rank, size);
        let ack = encode_hello(ACK_MAGIC, rank, size);
        let mut heard: BTreeSet<NodeId> = BTreeSet::new();
        let mut acked: BTreeSet<NodeId> = BTreeSet::new();
        let mut early = Vec::new();
        let mut buf = vec![0u8; MAX_DATAGRAM];
        socket.set_read_timeout(Some(Duration::from_millis(20)))?;
        let mut last_hello: Option<Instant> = None;
        while heard.len() < peers.len() || acked.len() < peers.len() {
            if Instant::now() >= deadline {
                return Err(TransportError::Rendezvous(format!(
                    "timed out: heard {}/{} ranks, acked by {}/{}",
                    heard.len(),
                    peers.len(),
                    acked.len(),
                    peers.len()
                )));
            }
            if last_hello.is_none_or(|t| t.elapsed() >= Duration::from_millis(20)) {
                for (p, a) in &peers {
                    if !acked.contains(p) {
                        let _ = socket.send_to(&hello, a);
                    }
                }
                last_hello = Some(Instant::now());
            }
            let (n, from) = match socket.recv_from(&mut buf) {
                Ok(x) => x,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
                // ICMP port-unreachable from a peer that has not bound yet
                Err(e) if e.kind() == ErrorKind::ConnectionRefused => continue,
                Err(e) => return Err(e.into()),
            };
            let bytes = &buf[..n];
            let Some(&peer) = by_addr.get(&from) else { continue };
            match magic_of(bytes) {
                Some(HELLO_MAGIC) | Some(ACK_MAGIC) => {
                    let is_hello = magic_of(bytes) == Some(HELLO_MAGIC);
                    let magic = if is_hello { HELLO_MAGIC } else { ACK_MAGIC };
                    let (r, s) = decode_hello(magic, bytes)
                        .ok_or_else(|| TransportError::Rendezvous("malformed hello datagram".into()))?;
                    if s != size {
                        return Err(TransportError::Rendezvous(format!(
                            "size mismatch: rank {rank} expects {size} ranks, rank {r} expects {s}"
                        )));
                    }
                    if r != peer {
                        return Err(TransportError::Rendezvous(format!(
                            "rank conflict: {from} claims rank {r}, table lists it as rank {peer}"
                        )));
                    }
                    if is_hello {
                        heard.insert(peer);
                        let _ = socket.send_to(&ack, from);
                    } else {
                        acked.insert(peer);
                    }
                }
                Some(SIGNATURE_MAGIC) => {
                    heard.insert(peer);
                    early.push((peer, bytes.to_vec(), clock(epoch)));
                }
                _ => {}
            }
        }

        socket.set_read_timeout(None)?;
        let (tx, rx) = mpsc::channel();
        for item in early {
            let _ = tx.send(item);
        }
        let stop = Arc::new(AtomicBool::new(false));
        spawn_reader(socket.try_clone()?, by_addr, ack, tx, epoch, stop.clone());
        Ok(UdpTransport {
            rank,
            socket,
            peers,
            rx,
            stash: VecDeque::new(),
            epoch,
            mtu,
            next_msg_id: 1,
            counters: TransportCounters::default(),
            stop,
        })
    }

    pub fn mtu(&self) -> u32 {
        self.mtu
    }

    fn event(&mut self, (peer, bytes, at): Incoming) -> RxEvent {
        self.counters.frames_received += 1;
        RxEvent { session: SessionId(peer), kind: RxKind::Raw { bytes, datagram: true }, arrival: at }
    }
}

fn spawn_reader(
    socket: UdpSocket,
    by_addr: BTreeMap<SocketAddr, NodeId>,
    ack: [u8; super::HELLO_LEN],
    tx: Sender<Incoming>,
    epoch: Instant,
    stop: Arc<AtomicBool>,
) {
    thread::spawn(move || {
        let mut buf = vec![0u8; MAX_DATAGRAM];
        loop {
            let received = socket.recv_from(&mut buf);
            if stop.load(Ordering::Acquire) {
                return;
            }
            let (n, from) = match received {
                Ok(x) => x,
                Err(e) if e.kind() == ErrorKind::ConnectionRefused => continue,
                Err(_) => return,
            };
            let Some(&peer) = by_addr.get(&from) else { continue };
            match magic_of(&buf[..n]) {
                // a peer that missed our ack keeps saying hello
                Some(HELLO_MAGIC) => {
                    let _ = socket.send_to(&ack, from);
                }
                Some(ACK_MAGIC) => {}
                _ => {
                    if tx.send((peer, buf[..n].to_vec(), clock(epoch))).is_err() {
                        return;
                    }
                }
            }
        }
    });
}

impl Drop for UdpTransport {
    fn drop(&mut self) {
        // wake the reader so it releases the port
        self.stop.store(true, Ordering::Release);
        if let Ok(me) = self.socket.local_addr() {
            let _ = self.socket.send_to(&[0], me);
        }
    }
}

impl Transport for UdpTransport {
    fn local(&self) -> NodeId {
        self.rank
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { rdma: false, reliable: false, ordered: false, virtual_time: false }
    }

    fn open_session(&mut self, peer: NodeId) -> Result<SessionId, TransportError> {
        if self.peers.contains_key(&peer) {
            Ok(SessionId(peer))
        } else {
            Err(TransportError::UnknownPeer(peer))
        }
    }

    fn peer_of(&self, session: SessionId) -> Option<NodeId> {
        self.peers.contains_key(&session.0).then_some(session.0)
    }

    fn session_count(&self) -> usize {
        self.peers.len()
    }

    fn transmit(&mut self, session: SessionId, frame: Frame) -> Result<TxCompletion, TransportError> {
        frame.validate()?;
        if frame.kind != FrameKind::HeaderedMessage {
            return Err(TransportError::Unsupported("RDMA"));
        }
        let dst = *self.peers.get(&session.0).ok_or(TransportError::ClosedSession(session))?;
        let sig = frame.header.expect("validated");
        let header = encode_header(&sig)?;
        let msg_id = self.next_msg_id;
        self.next_msg_id += 1;
        let mut wire = 0u64;
        let mut dgram = Vec::with_capacity(SIGNATURE_LEN + SUBHEADER_LEN + self.mtu as usize);
        for (i, seg) in segment_message(msg_id, &sig, &frame.payload, self.mtu)?.into_iter().enumerate() {
            if i > 0 && i % BURST == 0 {
                thread::sleep(Duration::from_micros(20));
            }
            dgram.clear();
            dgram.extend_from_slice(&header);
            dgram.extend_from_slice(&seg.encode_subheader());
            dgram.extend_from_slice(&seg.body);
            match self.socket.send_to(&dgram, dst) {
                Ok(_) => {}
                Err(e) if e.kind() == ErrorKind::ConnectionRefused => {}
                Err(e) => return Err(e.into()),
            }
            wire += dgram.len() as u64;
        }
        self.counters.frames_sent += 1;
        self.counters.bytes_sent += wire;
        Ok(TxCompletion { wire_bytes: wire, accepted_at: clock(self.epoch) })
    }

    fn poll_rx(&mut self) -> Option<RxEvent> {
        if let Some(ev) = self.stash.pop_front() {
            return Some(ev);
        }
        let item = self.rx.try_recv().ok()?;
        Some(self.event(item))
    }

    fn now(&self) -> SimTime {
        clock(self.epoch)
    }

    fn counters(&self) -> TransportCounters {
        self.counters
    }

    fn park(&mut self, deadline: Option<SimTime>) {
        if !self.stash.is_empty() {
            return;
        }
        let wait = match deadline {
            Some(d) => (d - clock(self.epoch)).to_std().min(Duration::from_millis(50)),
            None => Duration::from_millis(50),
        };
        match self.rx.recv_timeout(wait) {
            Ok(item) => {
                let ev = self.event(item);
                self.stash.push_back(ev);
            }
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode_header, MessageSignature, Segment};

    #[test]
    fn two_rank_mesh_carries_segments() {
        let table = AddressTable::free_localhost(2).unwrap();
        let t1 = table.clone();
        let h = thread::spawn(move || UdpTransport::connect_mesh(1, &t1, Duration::from_secs(10)).unwrap());
        let mut a = UdpTransport::connect_mesh(0, &table, Duration::from_secs(10)).unwrap();
        let mut b = h.join().unwrap();
        let s = a.open_session(1).unwrap();
        let payload: Vec<u8> = (0..20_000u32).map(|i| i as u8).collect();
        let sig = MessageSignature::eager(0, 0, 1, 1, 0, payload.len() as u64);
        a.transmit(s, Frame::headered(sig, payload.clone())).unwrap();
        let mut got = vec![0u8; payload.len()];
        let mut segs = 0;
        let until = Instant::now() + Duration::from_secs(10);
        while segs < 3 && Instant::now() < until {
            match b.poll_rx() {
                Some(ev) => {
                    let RxKind::Raw { bytes, datagram: true } = ev.kind else { panic!("expected datagram") };
                    assert_eq!(decode_header(&bytes).unwrap(), sig);
                    let seg = Segment::decode(&bytes[SIGNATURE_LEN..]).unwrap();
                    got[seg.offset as usize..seg.end() as usize].copy_from_slice(&seg.body);
                    segs += 1;
                }
                None => b.park(None),
            }
        }
        assert_eq!(segs, 3);
        assert_eq!(got, payload);
    }
}
