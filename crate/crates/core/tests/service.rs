use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use cars_core::scenario::ScenarioConfig;
use cars_core::service::{spawn, Catalog, Role, ScenarioEntry, ServerConfig, ServerHandle, ServerMsg};
use cars_core::value::ConstraintProxy;

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(h: &ServerHandle) -> Self {
        let s = TcpStream::connect(h.addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        Self { reader: BufReader::new(s.try_clone().unwrap()), writer: s }
    }

    fn send(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn recv(&mut self) -> ServerMsg {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap_or_else(|e| panic!("bad server line {line:?}: {e}"))
    }

    /// Next message that is not telemetry.
    fn recv_reply(&mut self) -> ServerMsg {
        loop {
            let m = self.recv();
            if !matches!(m, ServerMsg::Telemetry(_)) {
                return m;
            }
        }
    }
}

fn server() -> ServerHandle {
    let cfg = ScenarioConfig::canonical();
    let mut catalog = Catalog::new();
    let entry = ScenarioEntry { value: Arc::new(ConstraintProxy::new(&cfg)), cfg: cfg.clone(), agent: None };
    catalog.insert("ellipse".into(), entry);
    let mut circle = cfg.clone();
    circle.obstacle = cars_core::geometry::Obstacle::Circle { x0: 23.0, y0: 0.0, radius: 5.0 };
    catalog.insert("circle".into(), ScenarioEntry { value: Arc::new(ConstraintProxy::new(&circle)), cfg: circle, agent: None });
    let sc = ServerConfig { bind: "127.0.0.1:0".into(), ..Default::default() };
    spawn(sc, catalog).unwrap()
}

#[test]
fn reset_then_steer_step_reaches_the_plant() {
    let h = server();
    let mut d = Client::connect(&h);
    assert!(matches!(d.recv(), ServerMsg::Welcome { role: Role::Driver, .. }));
    d.send(r#"{"type":"reset"}"#);
    let ServerMsg::Telemetry(first) = d.recv() else { panic!("expected telemetry") };
    assert_eq!(first.t, 0.0);
    assert_eq!(first.x, ScenarioConfig::canonical().spawn.to_array());

    d.send(r#"{"type":"input","steer":0.5,"throttle":0.0}"#);
    let target = 0.5 * ScenarioConfig::canonical().vehicle.delta_max;
    let mut seen = None;
    for k in 0..200 {
        let ServerMsg::Telemetry(f) = d.recv() else { continue };
        if (f.u_d[0] - target).abs() < 1e-12 {
            seen = Some((k, f));
            break;
        }
    }
    let (_, f) = seen.expect("steer step never arrived");
    // Applied on the first tick after it was received.
    assert_eq!(f.input_age, Some(0.0));
    // The blend never leaves the segment between driver and machine.
    let (lo, hi) = (f.u_d[0].min(f.u_m), f.u_d[0].max(f.u_m));
    assert!(f.u_f[0] >= lo - 1e-12 && f.u_f[0] <= hi + 1e-12);
    let first_t = f.t;
    let mut later = Vec::new();
    for _ in 0..3 {
        if let ServerMsg::Telemetry(f) = d.recv() {
            later.push(f);
        }
    }
    assert!(later.iter().all(|f| (f.u_d[0] - target).abs() < 1e-12 && f.t > first_t));
    h.shutdown();
}

#[test]
fn observers_are_read_only_and_bad_lines_get_errors() {
    let h = server();
    let mut d = Client::connect(&h);
    assert!(matches!(d.recv(), ServerMsg::Welcome { role: Role::Driver, .. }));
    let mut o = Client::connect(&h);
    assert!(matches!(o.recv(), ServerMsg::Welcome { role: Role::Observer, .. }));

    o.send(r#"{"type":"input","steer":1,"throttle":0}"#);
    assert!(matches!(o.recv_reply(), ServerMsg::Error { .. }));
    o.send(r#"{"type":"reset"}"#);
    assert!(matches!(o.recv_reply(), ServerMsg::Error { .. }));
    o.send(r#"{"type":"config","staleness_ms":10}"#);
    assert!(matches!(o.recv_reply(), ServerMsg::Error { .. }));
    o.send("{not json");
    assert!(matches!(o.recv_reply(), ServerMsg::Error { .. }));
    d.send(r#"{"type":"launch"}"#);
    assert!(matches!(d.recv_reply(), ServerMsg::Error { .. }));
    d.send(r#"{"type":"reset","scenario_id":"nowhere"}"#);
    assert!(matches!(d.recv_reply(), ServerMsg::Error { .. }));

    // Observers may still query slices.
    o.send(r#"{"type":"cars_slice","phi":0,"v":12.5,"resolution":40}"#);
    let ServerMsg::CarsSlice(s) = o.recv_reply() else { panic!("expected a slice") };
    // The resolution sets the longer side; the domain aspect is kept.
    assert_eq!((s.nx, s.ny), (40, 16));
    assert!(s.contour.iter().any(|&c| c));
    // Centre of the obstacle is inside the unsafe set.
    let cell = |x: f64, y: f64| {
        let i = ((x - s.x[0]) / (s.x[1] - s.x[0]) * s.nx as f64) as usize;
        let j = ((y - s.y[0]) / (s.y[1] - s.y[0]) * s.ny as f64) as usize;
        s.values[j * s.nx + i]
    };
    assert!(cell(23.0, 0.0) > 0.0);
    assert!(cell(-5.0, 15.0) < 0.0);
    h.shutdown();
}

#[test]
fn reset_switches_scenario_and_driver_slot_frees_up() {
    let h = server();
    {
        let mut d = Client::connect(&h);
        assert!(matches!(d.recv(), ServerMsg::Welcome { role: Role::Driver, .. }));
    }
    std::thread::sleep(Duration::from_millis(100));
    let mut d = Client::connect(&h);
    let ServerMsg::Welcome { role, scenario, .. } = d.recv() else { panic!("expected welcome") };
    assert_eq!((role, scenario.as_str()), (Role::Driver, "ellipse"));
    d.send(r#"{"type":"reset","scenario_id":"circle"}"#);
    let ServerMsg::Telemetry(f) = d.recv() else { panic!("expected telemetry") };
    assert_eq!(f.t, 0.0);
    d.send(r#"{"type":"config","decimation":5}"#);
    std::thread::sleep(Duration::from_millis(50));
    let ts: Vec<f64> = (0..8).filter_map(|_| if let ServerMsg::Telemetry(f) = d.recv() { Some(f.t) } else { None }).collect();
    // Frames queued before the change may still arrive undecimated.
    let gaps: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).skip(4).collect();
    assert!(gaps.iter().all(|g| (g - 0.05).abs() < 1e-9), "{gaps:?}");
    h.shutdown();
}
