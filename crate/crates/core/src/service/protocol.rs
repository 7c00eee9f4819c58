//! Newline-delimited JSON messages exchanged with cockpit clients.

use serde::{Deserialize, Serialize};

use crate::harness::MetricsReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    /// Normalised human command, each component in `[-1, 1]`.
    Input {
        steer: f64,
        throttle: f64,
        #[serde(default)]
        t_client: Option<f64>,
    },
    Reset {
        #[serde(default)]
        scenario_id: Option<String>,
    },
    Config(ConfigUpdate),
    CarsSlice {
        phi: f64,
        v: f64,
        #[serde(default)]
        resolution: Option<usize>,
    },
}

/// Session settings (driver only) plus this connection's telemetry
/// decimation (any client).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigUpdate {
    #[serde(default)]
    pub staleness_ms: Option<f64>,
    #[serde(default)]
    pub decay_ms: Option<f64>,
    /// Send every n-th telemetry frame to this connection.
    #[serde(default)]
    pub decimation: Option<u32>,
}

impl ConfigUpdate {
    pub fn touches_session(&self) -> bool {
        self.staleness_ms.is_some() || self.decay_ms.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Driver,
    Observer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub t: f64,
    /// `[X, Y, φ, v_x, v_y, r]`.
    pub x: [f64; 6],
    pub v_h: f64,
    pub caa: f64,
    pub cai: f64,
    pub gamma_auth: f64,
    /// `[δ, T]` of driver, machine-blended and applied commands.
    pub u_d: [f64; 2],
    pub u_m: f64,
    pub u_f: [f64; 2],
    pub phase: String,
    /// Seconds since the last human input, if any arrived.
    pub input_age: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePayload {
    pub phi: f64,
    pub v: f64,
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `X` fastest.
    pub values: Vec<f64>,
    /// Cell lies on the zero level: its sign differs from a neighbour's.
    pub contour: Vec<bool>,
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Welcome { role: Role, scenario: String, dt: f64 },
    Telemetry(Telemetry),
    CarsSlice(SlicePayload),
    Terminal { cause: String, metrics: MetricsReport },
    Error { message: String },
}

impl ServerMsg {
    pub fn error(message: impl Into<String>) -> Self {
        ServerMsg::Error { message: message.into() }
    }

    /// One line of JSON without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server messages serialise")
    }
}

pub fn parse_client(line: &str) -> Result<ClientMsg, String> {
    let msg: ClientMsg = serde_json::from_str(line).map_err(|e| format!("malformed message: {e}"))?;
    if let ClientMsg::Input { steer, throttle, .. } = msg {
        if !(steer.is_finite() && throttle.is_finite()) {
            return Err("input components must be finite".into());
        }
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_messages_parse() {
        assert_eq!(
            parse_client(r#"{"type":"input","steer":0.5,"throttle":-1,"t_client":3.2}"#).unwrap(),
            ClientMsg::Input { steer: 0.5, throttle: -1.0, t_client: Some(3.2) }
        );
        assert_eq!(parse_client(r#"{"type":"reset","scenario_id":"ellipse"}"#).unwrap(), ClientMsg::Reset { scenario_id: Some("ellipse".into()) });
        assert_eq!(parse_client(r#"{"type":"reset"}"#).unwrap(), ClientMsg::Reset { scenario_id: None });
        assert!(matches!(parse_client(r#"{"type":"config","decimation":5}"#).unwrap(), ClientMsg::Config(ConfigUpdate { decimation: Some(5), .. })));
        assert!(parse_client(r#"{"type":"config","bogus":1}"#).is_err());
        assert!(parse_client(r#"{"type":"launch"}"#).is_err());
        assert!(parse_client("not json").is_err());
    }

    #[test]
    fn server_lines_are_single_json_objects() {
        let m = ServerMsg::Telemetry(Telemetry {
            t: 0.01,
            x: [1.0, 2.0, 0.0, 12.5, 0.0, 0.0],
            v_h: -3.0,
            caa: 0.2,
            cai: 1.0,
            gamma_auth: 0.1,
            u_d: [0.1, 0.0],
            u_m: -0.2,
            u_f: [0.07, 0.0],
            phase: "cruise".into(),
            input_age: None,
        });
        let line = m.to_line();
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["type"], "telemetry");
        assert_eq!(serde_json::from_str::<ServerMsg>(&line).unwrap(), m);
    }
}
