//! Running both parties of a session, in-process or over TCP, and the
//! multi-session server loop.

use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use splitadapt_core::adapt::AdaptConfig;
use splitadapt_core::client::ClientConfig;
use splitadapt_core::protocol::{
    client_session, serve_session, ClientData, ClientReport, Direction, SessionReport, WireTap,
};
use splitadapt_core::server::ServerState;

use crate::config::TransportKind;
use crate::transport::{channel_pair, TcpTransport};
use crate::Error;

/// Bound of each direction of the in-process FIFO, in frames.
pub const CHANNEL_CAPACITY: usize = 64;

#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub server: SessionReport,
    pub client: ClientReport,
    /// Every frame as seen at the server, in order.
    pub wire: Vec<(Direction, Vec<u8>)>,
}

/// Runs one session with the server on a worker thread and the client on the
/// calling thread. Fails if the client side fails; a server-side abort shows
/// up in the report.
pub fn run_session(
    kind: TransportKind,
    server: &ServerState,
    adapt: &AdaptConfig,
    session: u64,
    client_cfg: &ClientConfig,
    data: &ClientData<'_>,
    timeout: Duration,
) -> Result<SessionOutput, Error> {
    let spec = server.spec;
    match kind {
        TransportKind::Channel => {
            let (s, c) = channel_pair(CHANNEL_CAPACITY, timeout);
            thread::scope(|scope| {
                let h = scope.spawn(move || {
                    let mut tap = WireTap::new(s);
                    let report = serve_session(&mut tap, server, adapt);
                    (report, tap.frames)
                });
                let client = client_session(c, session, &spec, client_cfg, data);
                let (report, wire) = h.join().expect("server thread panicked");
                Ok(SessionOutput { server: report, client: client?, wire })
            })
        }
        TransportKind::Tcp => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            thread::scope(|scope| {
                let h = scope.spawn(move || -> Result<_, Error> {
                    let (stream, _) = listener.accept()?;
                    let mut tap = WireTap::new(TcpTransport::new(stream, timeout)?);
                    let report = serve_session(&mut tap, server, adapt);
                    Ok((report, tap.frames))
                });
                let client = TcpTransport::connect(addr, timeout)
                    .map_err(Error::from)
                    .and_then(|t| Ok(client_session(t, session, &spec, client_cfg, data)?));
                let (report, wire) = h.join().expect("server thread panicked")?;
                Ok(SessionOutput { server: report, client: client?, wire })
            })
        }
    }
}

/// Accepts connections and serves each in its own thread, at most
/// `max_sessions` at a time; stops after `total` sessions when given.
/// Reports are returned in completion order of acceptance.
pub fn serve(
    listener: TcpListener,
    state: Arc<ServerState>,
    adapt: AdaptConfig,
    max_sessions: usize,
    total: Option<usize>,
    timeout: Duration,
    mut on_report: impl FnMut(&SessionReport),
) -> Result<Vec<SessionReport>, Error> {
    let mut running: std::collections::VecDeque<thread::JoinHandle<SessionReport>> = Default::default();
    let mut reports = Vec::new();
    let mut accepted = 0usize;
    let mut finish = |h: thread::JoinHandle<SessionReport>, reports: &mut Vec<SessionReport>| {
        let r = h.join().expect("session thread panicked");
        on_report(&r);
        reports.push(r);
    };
    while total.is_none_or(|t| accepted < t) {
        let (stream, peer) = listener.accept()?;
        log::info!("session from {peer}");
        accepted += 1;
        if running.len() >= max_sessions.max(1) {
            let oldest = running.pop_front().expect("nonempty");
            finish(oldest, &mut reports);
        }
        let state = Arc::clone(&state);
        running.push_back(thread::spawn(move || match TcpTransport::new(stream, timeout) {
            Ok(t) => serve_session(t, &state, &adapt),
            Err(e) => {
                // a socket that cannot be configured is reported like any other abort
                let mut r = serve_session(Refused(e.to_string()), &state, &adapt);
                r.abort_reason = Some(e.to_string());
                r
            }
        }));
    }
    while let Some(h) = running.pop_front() {
        finish(h, &mut reports);
    }
    Ok(reports)
}

struct Refused(String);

impl splitadapt_core::protocol::Transport for Refused {
    fn send(&mut self, _: &[u8]) -> splitadapt_core::Result<()> {
        Err(splitadapt_core::Error::Transport(self.0.clone()))
    }
    fn recv(&mut self) -> splitadapt_core::Result<Vec<u8>> {
        Err(splitadapt_core::Error::Transport(self.0.clone()))
    }
}
