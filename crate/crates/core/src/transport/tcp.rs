// SPDX-License-Identifier: Apache-2.0

//! TCP backend. One connection per engine pair carries write frames one way
//! and acks back; frames of different transfers are multiplexed by tag.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use super::frame::{self, AckStatus, Frame, WriteFrame};
use super::mem::{receive, FaultInjector, FrameSink};
use super::TransportError;
use crate::kvcache::Rank;

/// Thread-safe sink shared by every connection of a listener.
pub type SharedSink = Arc<dyn Fn(&WriteFrame) -> Result<bool, String> + Send + Sync>;

struct SharedAdapter<'a>(&'a SharedSink);

impl FrameSink for SharedAdapter<'_> {
    fn apply(&mut self, frame: &WriteFrame) -> Result<bool, String> {
        (self.0)(frame)
    }
}

/// Accepts peer connections and runs one receive agent per connection.
pub struct TcpReceiver {
    local: SocketAddr,
}

impl TcpReceiver {
    pub fn bind(addr: impl ToSocketAddrs, sink: SharedSink) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        thread::Builder::new()
            .name("kv-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    let Ok(conn) = conn else { continue };
                    let sink = sink.clone();
                    let _ = thread::Builder::new()
                        .name("kv-agent".into())
                        .spawn(move || agent(conn, sink));
                }
            })?;
        Ok(Self { local })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }
}

fn agent(conn: TcpStream, sink: SharedSink) {
    let _ = conn.set_nodelay(true);
    let Ok(mut writer) = conn.try_clone() else { return };
    let mut reader = BufReader::new(conn);
    let mut adapter = SharedAdapter(&sink);
    while let Ok(bytes) = frame::read_raw(&mut reader) {
        let Some(ack) = receive(&bytes, &mut adapter) else { return };
        if frame::write_frame(&mut writer, &frame::encode_ack(&ack)).is_err() {
            return;
        }
    }
}

/// Blocking sender with one lazily opened connection per destination.
pub struct TcpSender {
    peers: HashMap<Rank, String>,
    conns: Mutex<HashMap<Rank, Arc<Mutex<TcpStream>>>>,
    faults: Mutex<FaultInjector>,
}

impl TcpSender {
    pub fn new(peers: HashMap<Rank, String>) -> Self {
        Self {
            peers,
            conns: Mutex::new(HashMap::new()),
            faults: Mutex::new(FaultInjector::default()),
        }
    }

    pub fn set_faults(&self, faults: FaultInjector) {
        *self.faults.lock().unwrap() = faults;
    }

    fn conn(&self, rank: Rank) -> Result<Arc<Mutex<TcpStream>>, TransportError> {
        let mut conns = self.conns.lock().unwrap();
        if let Some(c) = conns.get(&rank) {
            return Ok(c.clone());
        }
        let addr = self
            .peers
            .get(&rank)
            .ok_or_else(|| TransportError::PeerUnreachable(rank, "no address".into()))?;
        let s = TcpStream::connect(addr)
            .map_err(|e| TransportError::PeerUnreachable(rank, e.to_string()))?;
        let _ = s.set_nodelay(true);
        let c = Arc::new(Mutex::new(s));
        conns.insert(rank, c.clone());
        Ok(c)
    }

    fn round_trip(&self, rank: Rank, bytes: &[u8]) -> Result<AckStatus, TransportError> {
        let conn = self.conn(rank)?;
        let mut s = conn.lock().unwrap();
        let res = frame::write_frame(&mut *s, bytes).and_then(|_| frame::read_frame(&mut *s));
        match res {
            Ok(Frame::Ack(a)) => Ok(a.status),
            Ok(Frame::Write(_)) => Err(TransportError::PeerUnreachable(rank, "unexpected write frame".into())),
            Err(e) => {
                drop(s);
                self.conns.lock().unwrap().remove(&rank);
                Err(TransportError::PeerUnreachable(rank, e.to_string()))
            }
        }
    }

    /// Sends one frame and waits for its ack, retransmitting once on a
    /// checksum failure.
    pub fn send(&self, rank: Rank, f: &WriteFrame) -> Result<(), TransportError> {
        let first = self.faults.lock().unwrap().encode(f);
        let mut status = self.round_trip(rank, &first)?;
        if status == AckStatus::ChecksumMismatch {
            status = self.round_trip(rank, &frame::encode_write(f))?;
        }
        match status {
            AckStatus::Ok => Ok(()),
            AckStatus::ChecksumMismatch => Err(TransportError::ChecksumMismatch {
                tag: f.tag,
                layer: f.layer,
            }),
            AckStatus::Rejected => Err(TransportError::UnknownAddress {
                tag: f.tag,
                layer: f.layer,
            }),
        }
    }
}
