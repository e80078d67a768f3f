//! Socket runners for the three parties. Each link is a plain TCP stream of
//! wire frames; one request frame gets one reply frame.
//!
//! - BS answers `TariffRequest` with `Tariff`, and billing or pass-through
//!   report tables with `Verdict`.
//! - PC answers each meter report with `Ack`, queues it and forwards it to
//!   the BS, retrying on a timer while the BS is unreachable.
//! - The meter connects, sends one report table and waits for the `Ack`.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{info, warn};
use thiserror::Error;

use crate::backend::BackendService;
use crate::group::{GroupParams, PrimeOrderGroup};
use crate::privacy::{Backhaul, ForwardMode, LinkError, PrivacyComponent, Submission, Tariff};
use crate::wire::{self, Message, TariffMessage, WireError};

const ACCEPT_POLL: Duration = Duration::from_millis(10);
const IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("peer reported: {0}")]
    Remote(String),
    #[error("peer closed the connection without replying")]
    NoReply,
    #[error("unexpected reply kind {0:?}")]
    Unexpected(wire::Kind),
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn connect(addr: &str) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::AddrNotAvailable, format!("no address for {addr}"));
    for sock in addr.to_socket_addrs()? {
        match TcpStream::connect_timeout(&sock, IO_TIMEOUT) {
            Ok(stream) => {
                stream.set_read_timeout(Some(IO_TIMEOUT))?;
                stream.set_write_timeout(Some(IO_TIMEOUT))?;
                stream.set_nodelay(true)?;
                return Ok(stream);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// One request, one reply, on a fresh connection.
pub fn exchange<G: PrimeOrderGroup>(addr: &str, request: &Message<G>) -> Result<Message<G>, NodeError> {
    let mut stream = connect(addr)?;
    wire::send(&mut stream, request)?;
    match wire::recv::<G, _>(&mut stream)? {
        Some(Message::Error(text)) => Err(NodeError::Remote(text)),
        Some(reply) => Ok(reply),
        None => Err(NodeError::NoReply),
    }
}

/// Sends an encoded meter report frame to the PC and waits for the ack.
pub fn send_meter_frame<G: PrimeOrderGroup>(pc_addr: &str, frame: &[u8]) -> Result<(), NodeError> {
    let mut stream = connect(pc_addr)?;
    wire::write_frame(&mut stream, frame)?;
    match wire::recv::<G, _>(&mut stream)? {
        Some(Message::Ack) => Ok(()),
        Some(Message::Error(text)) => Err(NodeError::Remote(text)),
        Some(other) => Err(NodeError::Unexpected(other.kind())),
        None => Err(NodeError::NoReply),
    }
}

/// [`Backhaul`] over TCP. Tariffs may come from a separate endpoint.
#[derive(Debug, Clone)]
pub struct RemoteBackhaul {
    bs_addr: String,
    tariff_addr: String,
}

impl RemoteBackhaul {
    pub fn new(bs_addr: impl Into<String>) -> Self {
        let bs_addr = bs_addr.into();
        Self {
            tariff_addr: bs_addr.clone(),
            bs_addr,
        }
    }

    pub fn with_tariff_endpoint(mut self, addr: impl Into<String>) -> Self {
        self.tariff_addr = addr.into();
        self
    }
}

fn link_error(e: NodeError) -> LinkError {
    match e {
        NodeError::Io(e) => LinkError::Unreachable(e.to_string()),
        NodeError::NoReply => LinkError::Unreachable("connection closed".into()),
        NodeError::Remote(text) => LinkError::Remote(text),
        other => LinkError::Protocol(other.to_string()),
    }
}

impl<G: PrimeOrderGroup> Backhaul<G> for RemoteBackhaul {
    fn request_tariff(&mut self, meter_id: &str, i0: u64, n: usize) -> Result<Tariff, LinkError> {
        let request = Message::<G>::TariffRequest {
            meter_id: meter_id.to_string(),
            i0,
            n,
        };
        match exchange(&self.tariff_addr, &request).map_err(link_error)? {
            Message::Tariff(TariffMessage { tariff, .. }) => Ok(tariff),
            other => Err(LinkError::Protocol(format!("expected tariff, got {:?}", other.kind()))),
        }
    }

    fn submit(&mut self, submission: Submission<G>) -> Result<crate::backend::Verdict, LinkError> {
        let request = match submission {
            Submission::Billing(report) => Message::BillingReport(report),
            Submission::PassThrough(report) => Message::MeterReport(report),
        };
        match exchange(&self.bs_addr, &request).map_err(link_error)? {
            Message::Verdict { verdict, .. } => Ok(verdict),
            other => Err(LinkError::Protocol(format!("expected verdict, got {:?}", other.kind()))),
        }
    }
}

/// A running listener thread.
#[derive(Debug)]
pub struct NodeHandle<S> {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    state: Arc<Mutex<S>>,
}

impl<S> NodeHandle<S> {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn state(&self) -> MutexGuard<'_, S> {
        lock(&self.state)
    }

    /// Stops accepting connections and waits for the listener threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the node stops (it only stops on [`Self::shutdown`] or
    /// a fatal listener error).
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn accept_loop<F>(listener: TcpListener, stop: Arc<AtomicBool>, role: &'static str, handle: F)
where
    F: Fn(TcpStream) + Send + Sync + 'static,
{
    let handle = Arc::new(handle);
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let handle = Arc::clone(&handle);
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_read_timeout(Some(IO_TIMEOUT));
                let _ = stream.set_write_timeout(Some(IO_TIMEOUT));
                log::debug!("step=accept role={role} peer={peer}");
                thread::spawn(move || handle(stream));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                warn!("step=accept role={role} error={e}");
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
    info!("step=stopped role={role}");
}

fn bind(addr: &str) -> io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

fn reply_error<G: PrimeOrderGroup>(stream: &mut TcpStream, text: String) {
    let _ = wire::send(stream, &Message::<G>::Error(text));
}

fn serve_backend_conn<G: PrimeOrderGroup>(mut stream: TcpStream, service: &Mutex<BackendService<G>>) {
    loop {
        let frame = match wire::read_frame(&mut stream) {
            Ok(Some(frame)) => frame,
            Ok(None) => return,
            Err(e) => {
                warn!("step=receive role=bs error={e}");
                reply_error::<G>(&mut stream, e.to_string());
                return;
            }
        };
        let reply: Message<G> = match wire::decode_message::<G>(&frame) {
            Err(e) => {
                warn!("step=decode role=bs error={e}");
                Message::Error(e.to_string())
            }
            Ok(Message::TariffRequest { meter_id, i0, n }) => {
                match lock(service).serve_tariff(&meter_id, i0, n) {
                    Ok(tariff) => {
                        info!("step=serve_tariff meter={meter_id} i0={i0} n={n}");
                        Message::Tariff(TariffMessage { meter_id, tariff })
                    }
                    Err(e) => Message::Error(e.to_string()),
                }
            }
            Ok(Message::BillingReport(report)) => match lock(service).receive_billing(&report) {
                Ok(verdict) => Message::Verdict {
                    meter_id: report.meter_id,
                    i0: report.i0,
                    verdict,
                },
                Err(e) => Message::Error(e.to_string()),
            },
            Ok(Message::MeterReport(report)) => match lock(service).receive_pass_through(&report) {
                Ok(verdict) => Message::Verdict {
                    meter_id: report.meter_id,
                    i0: report.i0,
                    verdict,
                },
                Err(e) => Message::Error(e.to_string()),
            },
            Ok(other) => Message::Error(format!("bs does not accept {:?}", other.kind())),
        };
        if let Err(e) = wire::send(&mut stream, &reply) {
            warn!("step=reply role=bs error={e}");
            return;
        }
    }
}

/// Starts the BS listener on `addr` (use port 0 for an ephemeral port).
pub fn spawn_backend<G: PrimeOrderGroup>(
    addr: &str,
    service: BackendService<G>,
) -> io::Result<NodeHandle<BackendService<G>>> {
    let (listener, local) = bind(addr)?;
    let stop = Arc::new(AtomicBool::new(false));
    let state = Arc::new(Mutex::new(service));
    let shared = Arc::clone(&state);
    let flag = Arc::clone(&stop);
    let t = thread::spawn(move || {
        accept_loop(listener, flag, "bs", move |stream| serve_backend_conn(stream, &shared));
    });
    info!("step=listen role=bs addr={local} group={}", G::ID);
    Ok(NodeHandle {
        addr: local,
        stop,
        threads: vec![t],
        state,
    })
}

/// PC state shared between the meter-facing listener and the retry timer.
#[derive(Debug)]
pub struct ProxyState<G: PrimeOrderGroup> {
    pub pc: PrivacyComponent<G>,
    pub link: RemoteBackhaul,
    pub delivered: usize,
    pub failed: usize,
}

impl<G: PrimeOrderGroup> ProxyState<G> {
    fn flush(&mut self) {
        let report = self.pc.flush(&mut self.link);
        self.delivered += report.delivered.len();
        self.failed += report.failed.len();
        if let Some(e) = report.stalled {
            warn!("step=stall role=pc pending={} error={e}", self.pc.pending());
        }
    }
}

fn serve_meter_conn<G: PrimeOrderGroup>(mut stream: TcpStream, state: &Mutex<ProxyState<G>>) {
    loop {
        let frame = match wire::read_frame(&mut stream) {
            Ok(Some(frame)) => frame,
            Ok(None) => return,
            Err(e) => {
                warn!("step=receive role=pc error={e}");
                reply_error::<G>(&mut stream, e.to_string());
                return;
            }
        };
        match wire::decode_message::<G>(&frame) {
            Ok(Message::MeterReport(report)) => {
                info!("step=intercept role=pc meter={} i0={} n={}", report.meter_id, report.i0, report.len());
                lock(state).pc.enqueue(report);
                if wire::send(&mut stream, &Message::<G>::Ack).is_err() {
                    warn!("step=ack role=pc error=meter gone");
                }
                lock(state).flush();
            }
            Ok(other) => reply_error::<G>(&mut stream, format!("pc expects a meter report, got {:?}", other.kind())),
            Err(e) => {
                warn!("step=decode role=pc error={e}");
                reply_error::<G>(&mut stream, e.to_string());
            }
        }
    }
}

/// Starts the PC: a meter-facing listener on `addr` forwarding to `link`,
/// with queued reports retried every `retry`.
pub fn spawn_privacy_proxy<G: PrimeOrderGroup>(
    addr: &str,
    params: GroupParams<G>,
    mode: ForwardMode,
    link: RemoteBackhaul,
    retry: Duration,
) -> io::Result<NodeHandle<ProxyState<G>>> {
    if mode == ForwardMode::PassThrough {
        warn!("step=config role=pc mode=pass_through note=profiles are forwarded in the clear");
    }
    let (listener, local) = bind(addr)?;
    let stop = Arc::new(AtomicBool::new(false));
    let state = Arc::new(Mutex::new(ProxyState {
        pc: PrivacyComponent::new(params, mode),
        link,
        delivered: 0,
        failed: 0,
    }));

    let shared = Arc::clone(&state);
    let flag = Arc::clone(&stop);
    let listener_thread = thread::spawn(move || {
        accept_loop(listener, flag, "pc", move |stream| serve_meter_conn(stream, &shared));
    });

    let shared = Arc::clone(&state);
    let flag = Arc::clone(&stop);
    let retry_thread = thread::spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            thread::sleep(retry.min(Duration::from_millis(50)));
            let mut state = lock(&shared);
            if state.pc.pending() > 0 {
                state.flush();
            }
            drop(state);
            // sleep the rest of the interval in small steps so shutdown is prompt
            let mut waited = Duration::from_millis(50);
            while waited < retry && !flag.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(50));
                waited += Duration::from_millis(50);
            }
        }
    });

    info!("step=listen role=pc addr={local} group={}", G::ID);
    Ok(NodeHandle {
        addr: local,
        stop,
        threads: vec![listener_thread, retry_thread],
        state,
    })
}
