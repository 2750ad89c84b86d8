//! Frame transports: a bounded in-process FIFO pair and TCP.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender};
use std::time::Duration;

use splitadapt_core::error::{Error as CoreError, Result as CoreResult};
use splitadapt_core::protocol::{frame_len, Transport, FRAME_HEADER_LEN};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

fn transport_err(what: impl std::fmt::Display) -> CoreError {
    CoreError::Transport(what.to_string())
}

pub struct ChannelTransport {
    tx: SyncSender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

/// Two connected endpoints, each direction a FIFO of at most `capacity` frames.
pub fn channel_pair(capacity: usize, timeout: Duration) -> (ChannelTransport, ChannelTransport) {
    let (atx, brx) = sync_channel(capacity);
    let (btx, arx) = sync_channel(capacity);
    (ChannelTransport { tx: atx, rx: arx, timeout }, ChannelTransport { tx: btx, rx: brx, timeout })
}

impl Transport for ChannelTransport {
    fn send(&mut self, frame: &[u8]) -> CoreResult<()> {
        self.tx.send(frame.to_vec()).map_err(|_| transport_err("peer hung up"))
    }

    fn recv(&mut self) -> CoreResult<Vec<u8>> {
        self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => transport_err(format!("no frame within {:?}", self.timeout)),
            RecvTimeoutError::Disconnected => transport_err("peer hung up"),
        })
    }
}

/// Frames over a byte stream: the header announces the length of the rest.
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream, timeout: Duration) -> std::io::Result<Self> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> std::io::Result<Self> {
        let mut last = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => return Self::new(s, timeout),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| std::io::Error::new(ErrorKind::NotFound, "no address to connect to")))
    }
}

fn io_err(e: std::io::Error) -> CoreError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => transport_err("timed out waiting for the peer"),
        ErrorKind::UnexpectedEof => transport_err("peer closed the connection"),
        _ => transport_err(e),
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &[u8]) -> CoreResult<()> {
        self.stream.write_all(frame).map_err(io_err)
    }

    fn recv(&mut self) -> CoreResult<Vec<u8>> {
        let mut buf = vec![0u8; FRAME_HEADER_LEN];
        self.stream.read_exact(&mut buf).map_err(io_err)?;
        let total = frame_len(&buf)?;
        buf.resize(total, 0);
        self.stream.read_exact(&mut buf[FRAME_HEADER_LEN..]).map_err(io_err)?;
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use splitadapt_core::protocol::{encode, Frame, Tag};
    use std::net::TcpListener;

    #[test]
    fn channel_times_out() {
        let (mut a, _b) = channel_pair(1, Duration::from_millis(10));
        assert!(matches!(a.recv(), Err(CoreError::Transport(_))));
    }

    #[test]
    fn tcp_carries_whole_frames() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let f1 = encode(&Frame { tag: Tag::Done, session: 9, seq: 0, payload: vec![] });
        let f2 = encode(&Frame { tag: Tag::FrontendPackage, session: 9, seq: 1, payload: vec![7; 5000] });
        let expect = [f1.clone(), f2.clone()];
        let h = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut t = TcpTransport::new(s, DEFAULT_TIMEOUT).unwrap();
            (t.recv().unwrap(), t.recv().unwrap())
        });
        let mut c = TcpTransport::connect(addr, DEFAULT_TIMEOUT).unwrap();
        c.send(&f1).unwrap();
        c.send(&f2).unwrap();
        let (a, b) = h.join().unwrap();
        assert_eq!([a, b], expect);
    }

    #[test]
    fn tcp_rejects_garbage_header() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            TcpTransport::new(s, DEFAULT_TIMEOUT).unwrap().recv()
        });
        let mut c = TcpTransport::connect(addr, DEFAULT_TIMEOUT).unwrap();
        c.send(&[0u8; FRAME_HEADER_LEN]).unwrap();
        assert!(matches!(h.join().unwrap(), Err(CoreError::Decode { offset: 0, .. })));
    }
}
