//! Stream POE over real TCP sockets.
//!
//! Each frame travels as a little-endian `u32` length followed by the 48-byte
//! signature and the payload. One reader thread per connection forwards
//! complete frames to a channel that [`Transport::poll_rx`] drains, so a slow
//! engine never stalls the kernel socket buffers of its peers.

use std::collections::{BTreeMap, VecDeque};
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    decode_hello, encode_hello, AddressTable, Capabilities, Frame, FrameKind, NodeId, RxEvent, RxKind, SessionId,
    Transport, TransportCounters, TransportError, TxCompletion, HELLO_LEN,
};
use crate::time::{SimDuration, SimTime};
use crate::wire::encode_header;

const HELLO_MAGIC: u32 = 0x5443_4C48;
const MAX_FRAME: u32 = 1 << 30;

pub struct TcpTransport {
    rank: NodeId,
    size: u32,
    writers: BTreeMap<NodeId, TcpStream>,
    rx: Receiver<(NodeId, Vec<u8>, SimTime)>,
    stash: VecDeque<RxEvent>,
    epoch: Instant,
    counters: TransportCounters,
}

fn clock(epoch: Instant) -> SimTime {
    SimTime(SimDuration::from_std(epoch.elapsed()).as_ps())
}

fn hello_exchange(stream: &mut TcpStream, rank: u32, size: u32, send_first: bool) -> Result<(u32, u32), TransportError> {
    let mine = encode_hello(HELLO_MAGIC, rank, size);
    let mut theirs = [0u8; HELLO_LEN];
    if send_first {
        stream.write_all(&mine)?;
        stream.read_exact(&mut theirs)?;
    } else {
        stream.read_exact(&mut theirs)?;
        stream.write_all(&mine)?;
    }
    decode_hello(HELLO_MAGIC, &theirs).ok_or_else(|| TransportError::Rendezvous("peer sent a malformed hello".into()))
}

fn check_peer(rank: u32, size: u32, peer: u32, peer_size: u32) -> Result<(), TransportError> {
    if peer_size != size {
        return Err(TransportError::Rendezvous(format!(
            "size mismatch: rank {rank} expects {size} ranks, rank {peer} expects {peer_size}"
        )));
    }
    if peer == rank || peer >= size {
        return Err(TransportError::Rendezvous(format!("rank conflict: peer claims rank {peer}")));
    }
    Ok(())
}

impl TcpTransport {
    /// Binds this rank's address, connects to every lower rank and accepts
    /// every higher one. Fails if mesh setup does not finish within `timeout`.
    pub fn connect_mesh(rank: u32, table: &AddressTable, timeout: Duration) -> Result<Self, TransportError> {
        let size = table.size();
        if rank >= size {
            return Err(TransportError::UnknownPeer(rank));
        }
        let addr = table.addr(rank)?;
        let listener = TcpListener::bind(addr)
            .map_err(|e| TransportError::Bind { addr: addr.to_string(), reason: e.to_string() })?;
        let deadline = Instant::now() + timeout;
        let mut streams = BTreeMap::new();

        for peer in 0..rank {
            let peer_addr = table.addr(peer)?;
            let mut stream = loop {
                match TcpStream::connect_timeout(&peer_addr, Duration::from_millis(200)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(TransportError::Rendezvous(format!("rank {peer} at {peer_addr} unreachable: {e}")))
                    }
                    Err(_) => thread::sleep(Duration::from_millis(10)),
                }
            };
            stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1))))?;
            let (got, got_size) = hello_exchange(&mut stream, rank, size, true)?;
            check_peer(rank, size, got, got_size)?;
            if got != peer {
                return Err(TransportError::Rendezvous(format!(
                    "rank conflict: {peer_addr} answered as rank {got}, expected {peer}"
                )));
            }
            streams.insert(peer, stream);
        }

        listener.set_nonblocking(true)?;
        while (streams.len() as u32) < size - 1 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_read_timeout(Some(
                        deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1)),
                    ))?;
                    let (got, got_size) = hello_exchange(&mut stream, rank, size, false)?;
                    check_peer(rank, size, got, got_size)?;
                    if got < rank || streams.contains_key(&got) {
                        return Err(TransportError::Rendezvous(format!("rank conflict: rank {got} connected twice")));
                    }
                    streams.insert(got, stream);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Rendezvous(format!(
                            "timed out waiting for {} peers",
                            size - 1 - streams.len() as u32
                        )));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }

        let epoch = Instant::now();
        let (tx, rx) = mpsc::channel();
        let mut writers = BTreeMap::new();
        for (peer, stream) in streams {
            stream.set_read_timeout(None)?;
            stream.set_nodelay(true)?;
            let reader = stream.try_clone()?;
            spawn_reader(peer, reader, tx.clone(), epoch);
            writers.insert(peer, stream);
        }
        Ok(TcpTransport { rank, size, writers, rx, stash: VecDeque::new(), epoch, counters: TransportCounters::default() })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    fn event(&mut self, (peer, bytes, at): (NodeId, Vec<u8>, SimTime)) -> RxEvent {
        self.counters.frames_received += 1;
        RxEvent { session: SessionId(peer), kind: RxKind::Raw { bytes, datagram: false }, arrival: at }
    }
}

fn spawn_reader(peer: NodeId, mut stream: TcpStream, tx: Sender<(NodeId, Vec<u8>, SimTime)>, epoch: Instant) {
    thread::spawn(move || loop {
        let mut len = [0u8; 4];
        if stream.read_exact(&mut len).is_err() {
            return;
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_FRAME {
            return;
        }
        let mut buf = vec![0u8; len as usize];
        if stream.read_exact(&mut buf).is_err() || tx.send((peer, buf, clock(epoch))).is_err() {
            return;
        }
    });
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for s in self.writers.values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Transport for TcpTransport {
    fn local(&self) -> NodeId {
        self.rank
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { rdma: false, reliable: true, ordered: true, virtual_time: false }
    }

    fn open_session(&mut self, peer: NodeId) -> Result<SessionId, TransportError> {
        if self.writers.contains_key(&peer) {
            Ok(SessionId(peer))
        } else {
            Err(TransportError::UnknownPeer(peer))
        }
    }

    fn peer_of(&self, session: SessionId) -> Option<NodeId> {
        self.writers.contains_key(&session.0).then_some(session.0)
    }

    fn session_count(&self) -> usize {
        self.writers.len()
    }

    fn transmit(&mut self, session: SessionId, frame: Frame) -> Result<TxCompletion, TransportError> {
        frame.validate()?;
        if frame.kind != FrameKind::HeaderedMessage {
            return Err(TransportError::Unsupported("RDMA"));
        }
        let header = encode_header(frame.header.as_ref().expect("validated"))?;
        let body_len = header.len() + frame.payload.len();
        if body_len as u64 > MAX_FRAME as u64 {
            return Err(TransportError::InvalidFrame(format!("frame of {body_len} bytes exceeds the stream limit")));
        }
        let stream = self.writers.get_mut(&session.0).ok_or(TransportError::ClosedSession(session))?;
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&frame.payload);
        stream.write_all(&out)?;
        self.counters.frames_sent += 1;
        self.counters.bytes_sent += body_len as u64;
        Ok(TxCompletion { wire_bytes: body_len as u64, accepted_at: clock(self.epoch) })
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
    use crate::wire::{decode_header, MessageSignature};

    fn mesh(size: u32) -> Vec<TcpTransport> {
        let table = AddressTable::free_localhost(size).unwrap();
        let handles: Vec<_> = (0..size)
            .map(|r| {
                let t = table.clone();
                thread::spawn(move || TcpTransport::connect_mesh(r, &t, Duration::from_secs(10)).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }

    fn recv_blocking(t: &mut TcpTransport) -> RxEvent {
        let until = Instant::now() + Duration::from_secs(10);
        loop {
            if let Some(ev) = t.poll_rx() {
                return ev;
            }
            assert!(Instant::now() < until, "no frame arrived");
            t.park(None);
        }
    }

    #[test]
    fn three_rank_mesh_delivers_in_order() {
        let mut ts = mesh(3);
        for t in &ts {
            assert_eq!(t.session_count(), 2);
        }
        let s = ts[2].open_session(0).unwrap();
        for seq in 0..3u32 {
            let sig = MessageSignature::eager(0, 2, 0, 7, seq, 100);
            ts[2].transmit(s, Frame::headered(sig, vec![seq as u8; 100])).unwrap();
        }
        for seq in 0..3u32 {
            let ev = recv_blocking(&mut ts[0]);
            assert_eq!(ev.session, SessionId(2));
            let RxKind::Raw { bytes, datagram: false } = ev.kind else { panic!("expected raw frame") };
            let h = decode_header(&bytes).unwrap();
            assert_eq!(h.seq, seq);
            assert_eq!(&bytes[48..], &vec![seq as u8; 100][..]);
        }
        assert!(matches!(ts[0].open_session(9), Err(TransportError::UnknownPeer(9))));
    }

    #[test]
    fn duplicate_rank_fails_to_bind() {
        let table = AddressTable::free_localhost(2).unwrap();
        let t = table.clone();
        let first = thread::spawn(move || TcpTransport::connect_mesh(0, &t, Duration::from_millis(500)));
        thread::sleep(Duration::from_millis(100));
        let second = TcpTransport::connect_mesh(0, &table, Duration::from_millis(500));
        assert!(second.is_err());
        assert!(first.join().unwrap().is_err());
    }
}
