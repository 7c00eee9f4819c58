//! TCP front end: per-connection reader and writer threads feed a single
//! fixed-rate control loop through bounded queues.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::protocol::{parse_client, ClientMsg, Role, ServerMsg};
use super::session::{ScenarioEntry, Session, SessionSettings, Status};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: String,
    pub default_scenario: String,
    pub settings: SessionSettings,
    /// Queue depth from readers to the loop.
    pub inbound_capacity: usize,
    /// Per-connection queue depth from the loop to the writer; frames are
    /// dropped for that client when it is full.
    pub outbound_capacity: usize,
    /// Start running at the spawn instead of waiting for a reset.
    pub autostart: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            default_scenario: "ellipse".into(),
            settings: SessionSettings::default(),
            inbound_capacity: 1024,
            outbound_capacity: 512,
            autostart: false,
        }
    }
}

/// Scenario id to models.
pub type Catalog = BTreeMap<String, ScenarioEntry>;

/// Loop timing counters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopStats {
    pub ticks: u64,
    pub overruns: u64,
    pub dropped_frames: u64,
    /// Compute time of recent running ticks (ms), newest last.
    pub tick_ms: Vec<f64>,
}

const TICK_HISTORY: usize = 10_000;

enum Event {
    Connected(u64, SyncSender<String>),
    Message(u64, Result<ClientMsg, String>),
    Disconnected(u64),
}

struct Client {
    tx: SyncSender<String>,
    decimation: u32,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    pub stats: Arc<Mutex<LoopStats>>,
    shutdown: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Block until the loop exits (it only exits on shutdown).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

pub fn spawn(cfg: ServerConfig, catalog: Catalog) -> Result<ServerHandle, String> {
    let entry = catalog.get(&cfg.default_scenario).ok_or_else(|| format!("unknown scenario {:?}", cfg.default_scenario))?.clone();
    let mut session = Session::new(&cfg.default_scenario, entry, cfg.settings)?;
    if cfg.autostart {
        session.reset();
    }
    let listener = TcpListener::bind(&cfg.bind).map_err(|e| format!("bind {}: {e}", cfg.bind))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    listener.set_nonblocking(true).map_err(|e| e.to_string())?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let stats = Arc::new(Mutex::new(LoopStats::default()));
    let (in_tx, in_rx) = sync_channel::<Event>(cfg.inbound_capacity);

    let acceptor = {
        let shutdown = shutdown.clone();
        let out_cap = cfg.outbound_capacity;
        std::thread::spawn(move || accept_loop(listener, in_tx, shutdown, out_cap))
    };
    let control = {
        let shutdown = shutdown.clone();
        let stats = stats.clone();
        std::thread::spawn(move || control_loop(session, catalog, in_rx, shutdown, stats))
    };
    Ok(ServerHandle { addr, stats, shutdown, threads: vec![acceptor, control] })
}

fn accept_loop(listener: TcpListener, events: SyncSender<Event>, shutdown: Arc<AtomicBool>, out_cap: usize) {
    let mut next_id = 0u64;
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let id = next_id;
                next_id += 1;
                log::info!("client {id} connected from {peer}");
                if let Err(e) = start_connection(id, stream, &events, out_cap) {
                    log::warn!("client {id}: {e}");
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn start_connection(id: u64, stream: TcpStream, events: &SyncSender<Event>, out_cap: usize) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut write_half = stream.try_clone()?;
    let (out_tx, out_rx) = sync_channel::<String>(out_cap);
    std::thread::spawn(move || {
        for line in out_rx {
            if write_half.write_all(line.as_bytes()).and_then(|_| write_half.write_all(b"\n")).is_err() {
                break;
            }
        }
        let _ = write_half.shutdown(std::net::Shutdown::Both);
    });
    if events.send(Event::Connected(id, out_tx)).is_err() {
        return Ok(());
    }
    let events = events.clone();
    std::thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            // The loop never blocks on us; if its queue is full we wait.
            if events.send(Event::Message(id, parse_client(&line))).is_err() {
                return;
            }
        }
        let _ = events.send(Event::Disconnected(id));
    });
    Ok(())
}

struct Loop {
    session: Session,
    catalog: Catalog,
    clients: BTreeMap<u64, Client>,
    driver: Option<u64>,
    frame: u64,
    dropped: u64,
}

impl Loop {
    fn send(&mut self, id: u64, msg: &ServerMsg) {
        if let Some(c) = self.clients.get(&id) {
            if let Err(TrySendError::Full(_)) = c.tx.try_send(msg.to_line()) {
                self.dropped += 1;
            }
        }
    }

    fn broadcast(&mut self, msg: &ServerMsg, decimate: bool) {
        let line = msg.to_line();
        for c in self.clients.values() {
            if decimate && self.frame % c.decimation as u64 != 0 {
                continue;
            }
            if let Err(TrySendError::Full(_)) = c.tx.try_send(line.clone()) {
                self.dropped += 1;
            }
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Connected(id, tx) => {
                let role = if self.driver.is_none() {
                    self.driver = Some(id);
                    Role::Driver
                } else {
                    Role::Observer
                };
                self.clients.insert(id, Client { tx, decimation: 1 });
                let welcome = ServerMsg::Welcome { role, scenario: self.session.scenario_id.clone(), dt: self.session.cfg().vehicle.dt };
                self.send(id, &welcome);
            }
            Event::Disconnected(id) => {
                self.clients.remove(&id);
                if self.driver == Some(id) {
                    self.driver = None;
                }
                log::info!("client {id} disconnected");
            }
            Event::Message(id, Err(e)) => self.send(id, &ServerMsg::error(e)),
            Event::Message(id, Ok(msg)) => {
                let is_driver = self.driver == Some(id);
                let reply = self.apply(id, is_driver, msg);
                if let Some(r) = reply {
                    self.send(id, &r);
                }
            }
        }
    }

    fn apply(&mut self, id: u64, is_driver: bool, msg: ClientMsg) -> Option<ServerMsg> {
        let denied = || Some(ServerMsg::error("observers cannot change the session"));
        match msg {
            ClientMsg::CarsSlice { phi, v, resolution } => Some(match self.session.cars_slice(phi, v, resolution) {
                Ok(s) => ServerMsg::CarsSlice(s),
                Err(e) => ServerMsg::error(e),
            }),
            ClientMsg::Config(c) => {
                if c.touches_session() {
                    if !is_driver {
                        return denied();
                    }
                    if let Err(e) = self.session.apply_config(&c) {
                        return Some(ServerMsg::error(e));
                    }
                }
                if let Some(d) = c.decimation {
                    if d == 0 {
                        return Some(ServerMsg::error("decimation must be at least 1"));
                    }
                    if let Some(cl) = self.clients.get_mut(&id) {
                        cl.decimation = d;
                    }
                }
                None
            }
            _ if !is_driver => denied(),
            ClientMsg::Input { steer, throttle, .. } => {
                self.session.set_input(steer, throttle);
                None
            }
            ClientMsg::Reset { scenario_id } => {
                let id = scenario_id.unwrap_or_else(|| self.session.scenario_id.clone());
                let Some(entry) = self.catalog.get(&id).cloned() else {
                    return Some(ServerMsg::error(format!("unknown scenario {id:?}")));
                };
                match Session::new(&id, entry, self.session.settings) {
                    Ok(mut s) => {
                        s.reset();
                        self.session = s;
                        self.frame = 0;
                        None
                    }
                    Err(e) => Some(ServerMsg::error(e)),
                }
            }
        }
    }
}

fn control_loop(session: Session, catalog: Catalog, events: Receiver<Event>, shutdown: Arc<AtomicBool>, stats: Arc<Mutex<LoopStats>>) {
    let period = Duration::from_secs_f64(session.cfg().vehicle.dt);
    let mut lp = Loop { session, catalog, clients: BTreeMap::new(), driver: None, frame: 0, dropped: 0 };
    let mut deadline = Instant::now() + period;
    let mut local = LoopStats::default();
    while !shutdown.load(Ordering::SeqCst) {
        while let Ok(ev) = events.try_recv() {
            lp.handle(ev);
        }
        let started = Instant::now();
        let was_running = lp.session.status == Status::Running;
        if let Some(frame) = lp.session.tick() {
            lp.broadcast(&ServerMsg::Telemetry(frame), true);
            lp.frame += 1;
        }
        if was_running {
            if let Status::Terminated(cause) = lp.session.status {
                let msg = ServerMsg::Terminal { cause: format!("{cause:?}").to_lowercase(), metrics: lp.session.metrics() };
                lp.broadcast(&msg, false);
            }
            local.tick_ms.push(started.elapsed().as_secs_f64() * 1e3);
        }
        local.ticks += 1;
        local.dropped_frames = lp.dropped;
        if local.ticks % 10 == 0 {
            let mut s = stats.lock().expect("stats lock");
            s.ticks = local.ticks;
            s.overruns = local.overruns;
            s.dropped_frames = local.dropped_frames;
            s.tick_ms.append(&mut local.tick_ms);
            let excess = s.tick_ms.len().saturating_sub(TICK_HISTORY);
            s.tick_ms.drain(..excess);
        }
        let now = Instant::now();
        if now > deadline {
            local.overruns += 1;
            log::warn!("control tick overran by {:?}", now - deadline);
            deadline = now + period;
        } else {
            std::thread::sleep(deadline - now);
            deadline += period;
        }
    }
}
