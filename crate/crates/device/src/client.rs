//! [`SynapseBackend`] that measures synapses on a remote device server.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use stochsyn_core::{BackendError, SynapseBackend, SynapseQuery};

use crate::protocol::{SynapseRequest, SynapseResponse};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts per batch, including the first.
    pub attempts: u32,
    /// Pause before the second attempt; doubled after every failure.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff: Duration::from_millis(50),
        }
    }
}

/// One connection to a device server. Every sampled forward pass is sent as
/// a single batched line.
#[derive(Debug)]
pub struct RemoteBackend {
    addrs: Vec<SocketAddr>,
    timeout: Duration,
    retry: RetryPolicy,
    conn: Option<(BufReader<TcpStream>, TcpStream)>,
    next_id: u64,
    line: String,
    requests: usize,
}

impl RemoteBackend {
    /// Connects immediately so an unreachable server fails early.
    pub fn connect<A: ToSocketAddrs>(
        addr: A,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, BackendError> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| BackendError::Transport(format!("cannot resolve address: {e}")))?
            .collect();
        if addrs.is_empty() {
            return Err(BackendError::Transport("address resolves to nothing".into()));
        }
        let mut backend = Self {
            addrs,
            timeout,
            retry: RetryPolicy {
                attempts: retry.attempts.max(1),
                ..retry
            },
            conn: None,
            next_id: 0,
            line: String::new(),
            requests: 0,
        };
        backend.with_retries(|b| b.ensure_connected().map(|_| ()))?;
        Ok(backend)
    }

    /// Number of synapse requests sent so far.
    pub fn requests_sent(&self) -> usize {
        self.requests
    }

    fn ensure_connected(&mut self) -> io::Result<&mut (BufReader<TcpStream>, TcpStream)> {
        if self.conn.is_none() {
            let stream = TcpStream::connect_timeout(&self.addrs[0], self.timeout)
                .or_else(|e| {
                    self.addrs[1..]
                        .iter()
                        .find_map(|a| TcpStream::connect_timeout(a, self.timeout).ok())
                        .ok_or(e)
                })?;
            stream.set_read_timeout(Some(self.timeout))?;
            stream.set_write_timeout(Some(self.timeout))?;
            stream.set_nodelay(true)?;
            let reader = BufReader::new(stream.try_clone()?);
            self.conn = Some((reader, stream));
        }
        Ok(self.conn.as_mut().expect("just connected"))
    }

    fn with_retries<T>(
        &mut self,
        mut op: impl FnMut(&mut Self) -> io::Result<T>,
    ) -> Result<T, BackendError> {
        let mut pause = self.retry.backoff;
        let mut last = None;
        for attempt in 0..self.retry.attempts {
            if attempt > 0 {
                thread::sleep(pause);
                pause *= 2;
            }
            match op(self) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("device transport failure (attempt {}): {e}", attempt + 1);
                    self.conn = None;
                    last = Some(e);
                }
            }
        }
        Err(BackendError::Transport(format!(
            "{} after {} attempts",
            last.map_or_else(|| "unknown error".into(), |e| e.to_string()),
            self.retry.attempts
        )))
    }

    fn round_trip(&mut self, payload: &[u8]) -> io::Result<String> {
        let (reader, writer) = self.ensure_connected()?;
        writer.write_all(payload)?;
        writer.flush()?;
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "server closed the connection",
            ));
        }
        Ok(line)
    }
}

impl SynapseBackend for RemoteBackend {
    fn sample_counts(
        &mut self,
        queries: &[SynapseQuery],
        samples: u32,
        counts: &mut [u32],
    ) -> Result<(), BackendError> {
        if queries.is_empty() {
            return Ok(());
        }
        let first_id = self.next_id;
        let batch: Vec<SynapseRequest> = queries
            .iter()
            .enumerate()
            .map(|(n, q)| SynapseRequest::new(first_id + n as u64, q.field_mt, 1, samples))
            .collect();
        self.next_id += queries.len() as u64;
        let mut payload = serde_json::to_vec(&batch)
            .map_err(|e| BackendError::Transport(format!("cannot encode request: {e}")))?;
        payload.push(b'\n');
        self.line = self.with_retries(|b| b.round_trip(&payload))?;
        self.requests += queries.len();

        let responses: Vec<SynapseResponse> = serde_json::from_str(&self.line).map_err(|e| {
            // a lone error object means the whole line was rejected
            match serde_json::from_str::<SynapseResponse>(&self.line) {
                Ok(SynapseResponse { error: Some(msg), .. }) => BackendError::Device(msg),
                _ => BackendError::Transport(format!("unreadable response: {e}")),
            }
        })?;
        if responses.len() != queries.len() {
            return Err(BackendError::Transport(format!(
                "expected {} responses, got {}",
                queries.len(),
                responses.len()
            )));
        }
        for (n, (resp, count)) in responses.into_iter().zip(counts.iter_mut()).enumerate() {
            let id = first_id + n as u64;
            if resp.id != Some(id) {
                return Err(BackendError::Transport(format!(
                    "response id {:?} does not match request {id}",
                    resp.id
                )));
            }
            if let Some(msg) = resp.error {
                return Err(BackendError::Device(format!("request {id}: {msg}")));
            }
            let bits = resp
                .bits
                .ok_or_else(|| BackendError::Transport(format!("response {id} has no bits")))?;
            if bits.len() != samples as usize || bits.iter().any(|&b| b > 1) {
                return Err(BackendError::Device(format!(
                    "response {id} carries {} bits, expected {samples} binary values",
                    bits.len()
                )));
            }
            *count = bits.iter().map(|&b| u32::from(b)).sum();
        }
        Ok(())
    }
}
