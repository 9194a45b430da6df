//! Line-oriented TCP server hosting in-process backends behind the wire protocol.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;

use super::wire::handle_line;
use super::Backends;

/// Serves requests on one connection until the peer hangs up.
pub fn serve_connection(backends: &Backends, stream: TcpStream) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut out = handle_line(backends, &line);
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accept loop; one thread per connection. Runs until the listener fails.
pub fn serve(listener: TcpListener, backends: Backends) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let b = backends.clone();
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = serve_connection(&b, stream) {
                log::debug!("connection {peer:?} ended: {e}");
            }
        });
    }
    Ok(())
}

/// A server running on a background thread.
pub struct BackgroundServer {
    pub addr: SocketAddr,
}

impl BackgroundServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(addr: &str, backends: Backends) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        thread::spawn(move || {
            if let Err(e) = serve(listener, backends) {
                log::warn!("backend server stopped: {e}");
            }
        });
        Ok(BackgroundServer { addr })
    }

    pub fn endpoint(&self) -> String {
        format!("tcp://{}", self.addr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::remote::{Endpoint, TcpTransport, TransportConfig};
    use crate::backends::wire::WireClient;
    use crate::backends::{mock::mock_manifest, AutoencoderBackend, DenoiserBackend, OracleSegmenter};
    use crate::tensor::Tensor;

    #[test]
    fn remote_client_matches_in_process_mocks() {
        let local = Backends::mock(4, OracleSegmenter::default());
        let server = BackgroundServer::start("127.0.0.1:0", local.clone()).unwrap();
        let t = TcpTransport::new(server.endpoint().parse::<Endpoint>().unwrap(), TransportConfig::default());
        let client = WireClient::connect(t).unwrap();
        assert_eq!(client.manifest().unwrap().digest(), mock_manifest().digest());
        let img = Tensor::from_fn3(16, 16, 3, |y, x, k| ((y + x + k) % 7) as f32 / 7.0);
        let remote = client.encode(&img).unwrap();
        assert!(remote.bit_eq(&local.autoencoder.encode(&img).unwrap()));
        assert!(client.decode(&remote).unwrap().bit_eq(&local.autoencoder.decode(&remote).unwrap()));
    }

    #[test]
    fn concurrent_clients_share_the_pool() {
        let server = BackgroundServer::start("127.0.0.1:0", Backends::mock(0, OracleSegmenter::default())).unwrap();
        let t = TcpTransport::new(
            server.endpoint().parse().unwrap(),
            TransportConfig { max_in_flight: 2, ..Default::default() },
        );
        let client = std::sync::Arc::new(WireClient::connect(t).unwrap());
        let handles: Vec<_> = (0..6)
            .map(|i| {
                let c = client.clone();
                std::thread::spawn(move || {
                    let img = Tensor::full(&[8, 8, 3], i as f32 / 10.0);
                    c.encode(&img).unwrap().at3(0, 0, 0)
                })
            })
            .collect();
        for (i, h) in handles.into_iter().enumerate() {
            let v = h.join().unwrap();
            assert!((v - (2.0 * i as f32 / 10.0 - 1.0)).abs() < 1e-6);
        }
    }
}
