//! TCP transport for the wire protocol.
//!
//! Connections are pooled and reused; every request carries a fresh id and
//! the reply must echo it. Transport failures (connect, read, write, timeout)
//! are retried with exponential backoff because every operation is a pure
//! function of its payload. Error envelopes from the backend are returned as
//! is and never retried.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;

use super::wire::{Op, RequestEnvelope, ResponseEnvelope, WireBackend};
use super::BackendError;

/// Environment variable that overrides the configured backend endpoint.
pub const ENDPOINT_ENV: &str = "XSYN_BACKEND";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl FromStr for Endpoint {
    type Err = BackendError;

    /// Parses `tcp://host:port` (the scheme is optional).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s.strip_prefix("tcp://").unwrap_or(s);
        let (host, port) =
            rest.rsplit_once(':').ok_or_else(|| BackendError::BadRequest(format!("endpoint {s:?} lacks a port")))?;
        let port = port.parse().map_err(|_| BackendError::BadRequest(format!("endpoint {s:?} has an invalid port")))?;
        if host.is_empty() {
            return Err(BackendError::BadRequest(format!("endpoint {s:?} lacks a host")));
        }
        Ok(Endpoint { host: host.to_string(), port })
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "tcp://{}:{}", self.host, self.port)
    }
}

impl Endpoint {
    /// The environment override if set, else `configured`.
    pub fn resolve(configured: Option<&str>) -> Result<Option<Endpoint>, BackendError> {
        match std::env::var(ENDPOINT_ENV).ok().filter(|v| !v.is_empty()) {
            Some(v) => v.parse().map(Some),
            None => configured.map(str::parse).transpose(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransportConfig {
    /// Extra attempts after the first failure.
    pub retries: u32,
    pub backoff: Duration,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            retries: 3,
            backoff: Duration::from_millis(50),
            max_in_flight: 8,
            timeout: Duration::from_secs(60),
        }
    }
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

pub struct TcpTransport {
    endpoint: Endpoint,
    config: TransportConfig,
    next_id: AtomicU64,
    pool: Mutex<Vec<Connection>>,
    in_flight: Mutex<usize>,
    slot_free: Condvar,
}

struct Permit<'a>(&'a TcpTransport);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("in-flight counter poisoned") -= 1;
        self.0.slot_free.notify_one();
    }
}

impl TcpTransport {
    pub fn new(endpoint: Endpoint, config: TransportConfig) -> Self {
        TcpTransport {
            endpoint,
            config,
            next_id: AtomicU64::new(1),
            pool: Mutex::new(Vec::new()),
            in_flight: Mutex::new(0),
            slot_free: Condvar::new(),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("in-flight counter poisoned");
        while *n >= self.config.max_in_flight.max(1) {
            n = self.slot_free.wait(n).expect("in-flight counter poisoned");
        }
        *n += 1;
        Permit(self)
    }

    fn connect(&self) -> std::io::Result<Connection> {
        let addr = (self.endpoint.host.as_str(), self.endpoint.port)
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "endpoint did not resolve"))?;
        let stream = TcpStream::connect_timeout(&addr, self.config.timeout)?;
        stream.set_read_timeout(Some(self.config.timeout))?;
        stream.set_write_timeout(Some(self.config.timeout))?;
        stream.set_nodelay(true)?;
        Ok(Connection { reader: BufReader::new(stream.try_clone()?), writer: stream })
    }

    fn exchange(&self, conn: &mut Connection, line: &str) -> std::io::Result<String> {
        conn.writer.write_all(line.as_bytes())?;
        conn.writer.write_all(b"\n")?;
        conn.writer.flush()?;
        let mut buf = String::new();
        if conn.reader.read_line(&mut buf)? == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "backend closed the connection"));
        }
        Ok(buf)
    }
}

impl WireBackend for TcpTransport {
    fn call(&self, op: Op, payload: Value) -> Result<Value, BackendError> {
        let _permit = self.acquire();
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let line = serde_json::to_string(&RequestEnvelope { id, op, payload })
            .map_err(|e| BackendError::Internal(e.to_string()))?;

        let mut last_err = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * 2u32.pow(attempt - 1));
                log::debug!("retrying {} request {id} (attempt {})", op.as_str(), attempt + 1);
            }
            let pooled = self.pool.lock().expect("pool poisoned").pop();
            let mut conn = match pooled.map(Ok).unwrap_or_else(|| self.connect()) {
                Ok(c) => c,
                Err(e) => {
                    last_err = format!("connect to {}: {e}", self.endpoint);
                    continue;
                }
            };
            let text = match self.exchange(&mut conn, &line) {
                Ok(t) => t,
                Err(e) => {
                    last_err = format!("{} request {id}: {e}", op.as_str());
                    continue;
                }
            };
            let resp: ResponseEnvelope = serde_json::from_str(&text)
                .map_err(|e| BackendError::Protocol(format!("unparseable response envelope: {e}")))?;
            if resp.id != Some(id) {
                return Err(BackendError::Protocol(format!(
                    "response id {:?} does not match request id {id}",
                    resp.id
                )));
            }
            self.pool.lock().expect("pool poisoned").push(conn);
            return resp.into_outcome();
        }
        Err(BackendError::Transport(last_err))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        let e: Endpoint = "tcp://127.0.0.1:7450".parse().unwrap();
        assert_eq!(e, Endpoint { host: "127.0.0.1".into(), port: 7450 });
        assert_eq!(e.to_string(), "tcp://127.0.0.1:7450");
        assert!("tcp://host".parse::<Endpoint>().is_err());
        assert!("tcp://:80".parse::<Endpoint>().is_err());
        assert!("localhost:99999".parse::<Endpoint>().is_err());
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        // Bind then drop to get a port with nothing listening.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let t = TcpTransport::new(
            Endpoint { host: "127.0.0.1".into(), port },
            TransportConfig { retries: 1, backoff: Duration::from_millis(1), ..Default::default() },
        );
        assert!(matches!(t.call(Op::Manifest, Value::Null), Err(BackendError::Transport(_))));
    }
}
