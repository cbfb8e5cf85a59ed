//! TCP driver. The server listens on one port; every site process and every
//! control client dials it, so all job traffic shares a single server
//! endpoint. Frames are the same length-prefixed envelopes the simulator
//! carries.
//!
//! Each connection gets a reader thread that decodes frames into a channel;
//! one loop per process owns all state and the write halves. The clock is
//! wall time in milliseconds since the driver started.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::ccp::Ccp;
use super::control::ControlClient;
use super::scp::Scp;
use super::sim::Node;
use super::worker::{ClientWorker, ServerWorker};
use super::{ControlReply, Effect, JobStatus, Outbox, Process, SubmitRequest};
use crate::bridge::ConnMode;
use crate::config::{HeartbeatConfig, JobSpec, ScenarioConfig};
use crate::guestfl::AppConfig;
use crate::reliable::Timeouts;
use crate::store::{JobEvent, RunStore};
use crate::wire::{encode_envelope, fnv1a64, Envelope, FrameReader, MsgId, MsgIdGen, SiteAddress, SERVER_SITE};

/// Longest the loop sleeps without checking the stop flag.
const IDLE_MS: u64 = 50;

enum Event {
    Connected(usize, TcpStream),
    Frame(usize, Envelope),
    Closed(usize),
}

fn spawn_reader(id: usize, mut stream: TcpStream, tx: Sender<Event>) {
    thread::spawn(move || {
        let mut reader = FrameReader::new();
        let mut buf = vec![0u8; 64 * 1024];
        'outer: loop {
            let n = match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            reader.push(&buf[..n]);
            loop {
                match reader.next_envelope() {
                    Ok(Some(env)) => {
                        if tx.send(Event::Frame(id, env)).is_err() {
                            break 'outer;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        log::warn!("connection {id}: {e}");
                        break 'outer;
                    }
                }
            }
        }
        let _ = tx.send(Event::Closed(id));
    });
}

fn write_env(stream: &mut TcpStream, env: &Envelope) -> io::Result<()> {
    let frame = encode_envelope(env).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    stream.write_all(&frame)
}

/// Process table plus a queue for envelopes that stay inside this host,
/// each tagged with whether the SCP already routed it.
struct Host {
    start: Instant,
    nodes: BTreeMap<SiteAddress, Node>,
    local: VecDeque<(bool, Envelope)>,
    store: Option<RunStore>,
}

impl Host {
    fn new(store: Option<RunStore>) -> Self {
        Host { start: Instant::now(), nodes: BTreeMap::new(), local: VecDeque::new(), store }
    }

    fn now(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn wait_ms(&self) -> u64 {
        let now = self.now();
        match self.nodes.values().filter_map(Node::wakeup).min() {
            Some(t) => t.saturating_sub(now).min(IDLE_MS),
            None => IDLE_MS,
        }
    }

    fn kill(&mut self, addr: &SiteAddress) {
        let now = self.now();
        if let Some(mut node) = self.nodes.remove(addr) {
            node.process().on_kill(now);
        }
    }

    fn due(&self) -> Vec<SiteAddress> {
        let now = self.now();
        self.nodes.iter().filter(|(_, n)| n.wakeup().is_some_and(|w| w <= now)).map(|(a, _)| a.clone()).collect()
    }
}

/// Server side: the SCP and the server workers of running jobs.
struct ServerLoop {
    host: Host,
    conns: BTreeMap<usize, TcpStream>,
    /// Which connection each remote site was last heard on.
    routes: BTreeMap<String, usize>,
}

impl ServerLoop {
    fn deliver(&mut self, to: &SiteAddress, env: Envelope) {
        let now = self.host.now();
        let Some(node) = self.host.nodes.get_mut(to) else {
            log::debug!("no process at {to}; {} {} dropped", env.kind, env.msg_id);
            return;
        };
        let mut out = Outbox::default();
        node.process().on_envelope(now, env, &mut out);
        self.apply(to, out);
    }

    fn apply(&mut self, from: &SiteAddress, out: Outbox) {
        let scp = SiteAddress::server();
        for env in out.envelopes {
            if *from != scp {
                // Everything a server worker says goes through the SCP.
                self.host.local.push_back((false, env));
            } else if env.dst.is_server_site() {
                self.host.local.push_back((true, env));
            } else {
                self.send_remote(env);
            }
        }
        for effect in out.effects {
            match effect {
                Effect::SpawnServer { job, app, sites } => {
                    let addr = SiteAddress::new(SERVER_SITE, job.job_id.clone());
                    self.host
                        .nodes
                        .entry(addr)
                        .or_insert_with(|| Node::Server(Box::new(ServerWorker::new(&job, &app, &sites))));
                }
                Effect::Kill(addr) if addr.is_server_site() => self.host.kill(&addr),
                other => log::warn!("server cannot apply {other:?}"),
            }
        }
    }

    fn send_remote(&mut self, env: Envelope) {
        let Some(&id) = self.routes.get(&env.dst.site) else {
            log::debug!("{} not connected; {} {} dropped", env.dst.site, env.kind, env.msg_id);
            return;
        };
        if let Some(stream) = self.conns.get_mut(&id) {
            if let Err(e) = write_env(stream, &env) {
                log::warn!("write to {}: {e}", env.dst.site);
                self.drop_conn(id);
            }
        }
    }

    fn drop_conn(&mut self, id: usize) {
        self.conns.remove(&id);
        self.routes.retain(|_, c| *c != id);
    }

    fn drain_local(&mut self) {
        let scp = SiteAddress::server();
        while let Some((routed, env)) = self.host.local.pop_front() {
            let to = if routed { env.dst.clone() } else { scp.clone() };
            self.deliver(&to, env);
        }
    }
}

impl EventLoop for ServerLoop {
    fn on_event(&mut self, ev: Event) {
        match ev {
            Event::Connected(id, stream) => {
                self.conns.insert(id, stream);
            }
            Event::Frame(id, env) => {
                if !env.src.is_server_site() {
                    self.routes.insert(env.src.site.clone(), id);
                }
                self.deliver(&SiteAddress::server(), env);
            }
            Event::Closed(id) => self.drop_conn(id),
        }
    }

    fn wait_ms(&self) -> u64 {
        self.host.wait_ms()
    }

    fn tick(&mut self) {
        self.poll_due();
        self.drain_local();
    }
}

impl ServerLoop {
    fn poll_due(&mut self) {
        for addr in self.host.due() {
            let now = self.host.now();
            let Some(node) = self.host.nodes.get_mut(&addr) else { continue };
            let mut out = Outbox::default();
            node.process().poll(now, &mut out);
            self.apply(&addr, out);
        }
    }
}

/// A running server: the SCP behind one listening socket.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    /// Blocks until the server loop exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `listen` and runs the SCP on a background thread. Partitions in
/// the scenario apply only to the simulator and are ignored here.
pub fn start_server(listen: &str, scenario: ScenarioConfig, store: Option<RunStore>) -> io::Result<ServerHandle> {
    scenario.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    if !scenario.partitions.is_empty() {
        log::warn!("partition windows are simulator-only and ignored over sockets");
    }
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let accept_stop = stop.clone();
    let accept_tx = tx.clone();
    thread::spawn(move || {
        let mut next_id = 0usize;
        while !accept_stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("connection {next_id} from {peer}");
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    let Ok(read_half) = stream.try_clone() else { continue };
                    if accept_tx.send(Event::Connected(next_id, stream)).is_err() {
                        break;
                    }
                    spawn_reader(next_id, read_half, accept_tx.clone());
                    next_id += 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                Err(e) => log::warn!("accept: {e}"),
            }
        }
    });
    drop(tx);
    let loop_stop = stop.clone();
    let thread = thread::spawn(move || {
        let mut host = Host::new(store.clone());
        host.nodes.insert(SiteAddress::server(), Node::Scp(Scp::new(scenario, store)));
        let mut server = ServerLoop { host, conns: BTreeMap::new(), routes: BTreeMap::new() };
        run_loop(&rx, &loop_stop, &mut server);
    });
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

trait EventLoop {
    fn on_event(&mut self, ev: Event);
    fn wait_ms(&self) -> u64;
    fn tick(&mut self);
}

fn run_loop(rx: &Receiver<Event>, stop: &AtomicBool, l: &mut impl EventLoop) {
    while !stop.load(Ordering::SeqCst) {
        match rx.recv_timeout(Duration::from_millis(l.wait_ms())) {
            Ok(ev) => {
                l.on_event(ev);
                while let Ok(ev) = rx.try_recv() {
                    l.on_event(ev);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        l.tick();
    }
}

/// Site side: the CCP and the client workers it spawns.
struct SiteLoop {
    host: Host,
    server: TcpStream,
}

impl SiteLoop {
    fn apply(&mut self, out: Outbox) {
        for env in out.envelopes {
            if let Err(e) = write_env(&mut self.server, &env) {
                log::warn!("write to server: {e}");
            }
        }
        for effect in out.effects {
            match effect {
                Effect::SpawnClient(order) => {
                    let addr = SiteAddress::new(order.site.clone(), order.job.job_id.clone());
                    let store = self.host.store.clone();
                    self.host
                        .nodes
                        .entry(addr)
                        .or_insert_with(|| Node::Client(Box::new(ClientWorker::new(&order, ConnMode::InProc, store))));
                }
                Effect::Kill(addr) => self.host.kill(&addr),
                other => log::warn!("site cannot apply {other:?}"),
            }
        }
    }
}

impl EventLoop for SiteLoop {
    fn on_event(&mut self, ev: Event) {
        if let Event::Frame(_, env) = ev {
            let now = self.host.now();
            let Some(node) = self.host.nodes.get_mut(&env.dst) else {
                log::debug!("no process at {}; {} dropped", env.dst, env.kind);
                return;
            };
            let mut out = Outbox::default();
            node.process().on_envelope(now, env, &mut out);
            self.apply(out);
        }
    }

    fn wait_ms(&self) -> u64 {
        self.host.wait_ms()
    }

    fn tick(&mut self) {
        for addr in self.host.due() {
            let now = self.host.now();
            let Some(node) = self.host.nodes.get_mut(&addr) else { continue };
            let mut out = Outbox::default();
            node.process().poll(now, &mut out);
            self.apply(out);
        }
    }
}

pub struct SiteHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl SiteHandle {
    pub fn stop(mut self) {
        self.shutdown();
    }

    /// Blocks until the site loop exits, which happens when the server
    /// connection closes.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SiteHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn dial(server: impl ToSocketAddrs) -> io::Result<(TcpStream, Receiver<Event>)> {
    let stream = TcpStream::connect(server)?;
    stream.set_nodelay(true)?;
    let (tx, rx) = mpsc::channel();
    spawn_reader(0, stream.try_clone()?, tx);
    Ok((stream, rx))
}

/// Connects site `name` to the server and runs its CCP on a background
/// thread. Client workers write bridge transcripts under `store` if given.
pub fn start_site(
    name: &str,
    server: impl ToSocketAddrs,
    heartbeat: HeartbeatConfig,
    store: Option<RunStore>,
) -> io::Result<SiteHandle> {
    crate::wire::validate_site_name(name).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    let (stream, rx) = dial(server)?;
    let stop = Arc::new(AtomicBool::new(false));
    let loop_stop = stop.clone();
    let name = name.to_string();
    let thread = thread::spawn(move || {
        let mut host = Host::new(store);
        let ccp = Ccp::new(&name, heartbeat, Timeouts::default().retry_ms);
        host.nodes.insert(SiteAddress::control(name.clone()), Node::Ccp(ccp));
        let mut site = SiteLoop { host, server: stream };
        run_loop(&rx, &loop_stop, &mut site);
        let addrs: Vec<SiteAddress> = site.host.nodes.keys().cloned().collect();
        for a in addrs {
            site.host.kill(&a);
        }
    });
    Ok(SiteHandle { stop, thread: Some(thread) })
}

/// Blocking control-plane client over TCP.
pub struct RemoteControl {
    start: Instant,
    client: ControlClient,
    stream: TcpStream,
    rx: Receiver<Event>,
}

impl RemoteControl {
    /// `name` must be unique among control clients connected at once.
    pub fn connect(server: impl ToSocketAddrs, name: &str) -> io::Result<Self> {
        crate::wire::validate_site_name(name)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        let (stream, rx) = dial(server)?;
        let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap_or_default().as_nanos();
        let ids = MsgIdGen::new(fnv1a64(format!("{name}/{nanos}").as_bytes()) | 1);
        let client = ControlClient::with_ids(SiteAddress::control(name), Timeouts::default(), ids);
        Ok(RemoteControl { start: Instant::now(), client, stream, rx })
    }

    /// A control-client name unique within this host: process id plus a
    /// per-process counter.
    pub fn default_name() -> String {
        static NEXT: AtomicUsize = AtomicUsize::new(0);
        format!("cli-{}-{}", std::process::id(), NEXT.fetch_add(1, Ordering::Relaxed))
    }

    fn now(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn flush(&mut self, out: Outbox) -> io::Result<()> {
        for env in out.envelopes {
            write_env(&mut self.stream, &env)?;
        }
        Ok(())
    }

    fn wait(&mut self, id: MsgId) -> io::Result<ControlReply> {
        loop {
            if let Some(r) = self.client.take_reply(id) {
                return r.map_err(io::Error::other);
            }
            let now = self.now();
            let wait = self.client.next_wakeup().map_or(IDLE_MS, |t| t.saturating_sub(now).min(IDLE_MS));
            let mut out = Outbox::default();
            match self.rx.recv_timeout(Duration::from_millis(wait)) {
                Ok(Event::Frame(_, env)) => self.client.on_envelope(self.now(), env, &mut out),
                Ok(_) => {}
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(io::Error::new(io::ErrorKind::ConnectionAborted, "server closed the connection"))
                }
            }
            self.client.poll(self.now(), &mut out);
            self.flush(out)?;
        }
    }

    pub fn submit(&mut self, job: JobSpec, app: Option<AppConfig>) -> io::Result<ControlReply> {
        let mut out = Outbox::default();
        let id = self.client.submit(self.now(), &SubmitRequest { job, app }, &mut out);
        self.flush(out)?;
        self.wait(id)
    }

    pub fn status(&mut self, job_id: Option<&str>) -> io::Result<ControlReply> {
        let mut out = Outbox::default();
        let id = self.client.status(self.now(), job_id, &mut out);
        self.flush(out)?;
        self.wait(id)
    }

    pub fn abort(&mut self, job_id: &str, reason: Option<String>) -> io::Result<ControlReply> {
        let mut out = Outbox::default();
        let id = self.client.abort(self.now(), job_id, reason, &mut out);
        self.flush(out)?;
        self.wait(id)
    }

    /// Polls STATUS every `every` until the job is terminal, handing each
    /// new event to `on_event`. Gives up after `timeout`.
    pub fn follow(
        &mut self,
        job_id: &str,
        every: Duration,
        timeout: Duration,
        mut on_event: impl FnMut(&JobEvent),
    ) -> io::Result<JobStatus> {
        let until = Instant::now() + timeout;
        let mut seen = 0usize;
        loop {
            match self.status(Some(job_id))? {
                ControlReply::Status { status, events } => {
                    for ev in events.iter().skip(seen) {
                        on_event(ev);
                    }
                    seen = seen.max(events.len());
                    if status.state.is_terminal() {
                        return Ok(status);
                    }
                }
                ControlReply::Error { code, message } => return Err(io::Error::other(format!("{code}: {message}"))),
                other => return Err(io::Error::other(format!("unexpected reply {other:?}"))),
            }
            if Instant::now() >= until {
                return Err(io::Error::new(io::ErrorKind::TimedOut, format!("{job_id} not terminal in time")));
            }
            thread::sleep(every);
        }
    }
}
