//! Service configuration. Sources in increasing precedence: built-in
//! defaults, a JSON file, `HOLONAV_*` environment variables, command-line
//! flags.

use std::fs;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use holonav_core::tracking::NoiseModel;
use holonav_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_PORT: u16 = 7400;
pub const DEFAULT_WS_PORT: u16 = 7401;
pub const DEFAULT_TICK_HZ: f64 = 30.0;
pub const ENV_PREFIX: &str = "HOLONAV_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: IpAddr,
    /// Newline-delimited JSON over TCP. 0 picks a free port.
    pub port: u16,
    /// WebSocket framing of the same messages. 0 picks a free port.
    pub ws_port: u16,
    /// Tracking broadcast rate; 0 disables the tick.
    pub tick_hz: f64,
    pub noise: NoiseModel,
    pub seed: u64,
    pub log: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: IpAddr::from([127, 0, 0, 1]),
            port: DEFAULT_PORT,
            ws_port: DEFAULT_WS_PORT,
            tick_hz: DEFAULT_TICK_HZ,
            noise: NoiseModel::default(),
            seed: 0,
            log: None,
        }
    }
}

fn parse_var<T: FromStr>(name: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("{ENV_PREFIX}{name}={value:?}: {e}")))
}

impl ServiceConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Applies `HOLONAV_*` overrides looked up through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        let get = |name: &str| var(&format!("{ENV_PREFIX}{name}"));
        if let Some(v) = get("HOST") {
            self.host = parse_var("HOST", &v)?;
        }
        if let Some(v) = get("PORT") {
            self.port = parse_var("PORT", &v)?;
        }
        if let Some(v) = get("WS_PORT") {
            self.ws_port = parse_var("WS_PORT", &v)?;
        }
        if let Some(v) = get("TICK_HZ") {
            self.tick_hz = parse_var("TICK_HZ", &v)?;
        }
        if let Some(v) = get("SIGMA_POS") {
            self.noise.sigma_pos_mm = parse_var("SIGMA_POS", &v)?;
        }
        if let Some(v) = get("SIGMA_ROT") {
            self.noise.sigma_rot_rad = parse_var("SIGMA_ROT", &v)?;
        }
        if let Some(v) = get("SEED") {
            self.seed = parse_var("SEED", &v)?;
        }
        if let Some(v) = get("LOG") {
            self.log = Some(PathBuf::from(v));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tick_hz >= 0.0 && self.tick_hz <= 1000.0) {
            return Err(Error::InvalidArgument(format!(
                "tick rate {} Hz outside 0..=1000",
                self.tick_hz
            )));
        }
        if self.port != 0 && self.port == self.ws_port {
            return Err(Error::InvalidArgument(format!(
                "socket and websocket ports are both {}",
                self.port
            )));
        }
        self.noise.validate()
    }
}
