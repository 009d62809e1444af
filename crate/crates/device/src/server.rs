//! The emulated device: a TCP server answering synapse measurement requests.
//!
//! Each accepted connection gets its own thread and its own random stream,
//! derived from the server seed and the connection's accept order, so a
//! fresh server replays the same bits for the same request sequence.

use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use stochsyn_core::device::{bernoulli, sample_bits};
use stochsyn_core::rng::{stream, StreamRng};
use stochsyn_core::PassingProbabilityModel;

use crate::protocol::{parse_line, Incoming, Parsed, SynapseRequest, SynapseResponse};
use crate::trace::{detect_pinning, synthesize_kerr_trace, KerrTrace};

/// Largest `samples` a single request may ask for.
pub const MAX_SAMPLES: u32 = 1 << 20;

/// Longest accepted request line in bytes.
pub const MAX_LINE: usize = 16 << 20;

const POLL: Duration = Duration::from_millis(20);

/// Random stream of the `index`-th accepted connection. An in-process
/// backend sampling bit by bit from this stream reproduces the server.
pub fn connection_stream(seed: u64, index: u64) -> StreamRng {
    stream(seed, &format!("device/connection/{index}"))
}

/// Delay added to every request to emulate a slow measurement loop.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyModel {
    pub fixed: Duration,
    /// Upper bound of an extra uniformly distributed delay.
    pub jitter: Duration,
}

impl LatencyModel {
    fn delay<R: Rng>(&self, rng: &mut R) -> Duration {
        if self.jitter.is_zero() {
            self.fixed
        } else {
            self.fixed + self.jitter.mul_f64(rng.random::<f64>())
        }
    }
}

/// Synthetic Kerr-trace settings for the slow measurement path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    /// Field at which the first switching step appears.
    pub notch_field_mt: f64,
    /// Depinning fields are drawn uniformly from this range.
    pub depin_range_mt: (f64, f64),
    pub noise_amplitude: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            notch_field_mt: 4.0,
            depin_range_mt: (6.0, 9.0),
            noise_amplitude: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub calibration: PassingProbabilityModel,
    pub seed: u64,
    /// Produce bits by synthesizing and classifying Kerr traces.
    pub trace: Option<TraceConfig>,
    pub latency: LatencyModel,
    /// Standard deviation in mT of a random field-setting error applied to
    /// every request. Zero disables it.
    pub field_drift_mt: f64,
}

impl ServerConfig {
    pub fn new(calibration: PassingProbabilityModel, seed: u64) -> Self {
        Self {
            calibration,
            seed,
            trace: None,
            latency: LatencyModel::default(),
            field_drift_mt: 0.0,
        }
    }
}

/// Handle to a running server. Dropping it shuts the server down.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Flag that stops the server when set; usable from a signal handler.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    /// Stops accepting, closes every connection after its current line and
    /// waits for all connection threads.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    /// Blocks until the stop flag is set by someone else.
    pub fn wait(mut self) {
        if let Some(accept) = self.accept.take() {
            let _ = accept.join();
        }
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(accept) = self.accept.take() {
            let _ = accept.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Binds `addr` and starts serving in background threads.
pub fn serve<A: ToSocketAddrs>(addr: A, config: ServerConfig) -> io::Result<ServerHandle> {
    config
        .calibration
        .validate()
        .map_err(|e| io::Error::new(ErrorKind::InvalidInput, e.to_string()))?;
    if !(config.field_drift_mt >= 0.0 && config.field_drift_mt.is_finite()) {
        return Err(io::Error::new(ErrorKind::InvalidInput, "field drift must be >= 0"));
    }
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let config = Arc::new(config);
    let accept = {
        let stop = Arc::clone(&stop);
        thread::Builder::new()
            .name("device-accept".into())
            .spawn(move || accept_loop(listener, config, stop))?
    };
    log::info!("device emulator listening on {local}");
    Ok(ServerHandle {
        addr: local,
        stop,
        accept: Some(accept),
    })
}

fn accept_loop(listener: TcpListener, config: Arc<ServerConfig>, stop: Arc<AtomicBool>) {
    let counter = AtomicU64::new(0);
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((socket, peer)) => {
                let index = counter.fetch_add(1, Ordering::SeqCst);
                log::debug!("connection {index} from {peer}");
                let config = Arc::clone(&config);
                let stop = Arc::clone(&stop);
                let spawned = thread::Builder::new()
                    .name(format!("device-conn-{index}"))
                    .spawn(move || {
                        if let Err(e) = Connection::new(&config, index).run(socket, &stop) {
                            log::debug!("connection {index} ended: {e}");
                        }
                    });
                match spawned {
                    Ok(handle) => workers.push(handle),
                    Err(e) => log::error!("cannot spawn connection thread: {e}"),
                }
                workers.retain(|w| !w.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

/// Per-connection measurement state.
struct Connection<'a> {
    config: &'a ServerConfig,
    bits: StreamRng,
    latency: StreamRng,
    drift: StreamRng,
    trace: StreamRng,
}

impl<'a> Connection<'a> {
    fn new(config: &'a ServerConfig, index: u64) -> Self {
        let label = |part: &str| stream(config.seed, &format!("device/connection/{index}/{part}"));
        Self {
            config,
            bits: connection_stream(config.seed, index),
            latency: label("latency"),
            drift: label("drift"),
            trace: label("trace"),
        }
    }

    fn run(mut self, socket: TcpStream, stop: &AtomicBool) -> io::Result<()> {
        socket.set_nonblocking(false)?;
        socket.set_read_timeout(Some(POLL * 5))?;
        socket.set_nodelay(true)?;
        let mut writer = socket.try_clone()?;
        let mut reader = BufReader::new(socket);
        let mut line = Vec::new();
        loop {
            if stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            match reader.read_until(b'\n', &mut line) {
                Ok(0) => return Ok(()),
                Ok(_) if line.last() != Some(&b'\n') && line.len() <= MAX_LINE => {
                    // end of stream without a newline: answer what we got
                    let content = trim_line(&line);
                    if !content.is_empty() {
                        let (reply, _) = self.handle_line(content);
                        writer.write_all(&reply)?;
                    }
                    return Ok(());
                }
                Ok(_) => {}
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    if line.len() > MAX_LINE {
                        return self.reject_oversized(&mut writer);
                    }
                    continue;
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
            if line.len() > MAX_LINE {
                return self.reject_oversized(&mut writer);
            }
            let content = trim_line(&line);
            if !content.is_empty() {
                let (reply, keep_open) = self.handle_line(content);
                writer.write_all(&reply)?;
                if !keep_open {
                    return Ok(());
                }
            }
            line.clear();
        }
    }

    fn reject_oversized(&self, writer: &mut TcpStream) -> io::Result<()> {
        let reply = SynapseResponse::error(None, format!("request line exceeds {MAX_LINE} bytes"));
        writer.write_all(&encode(&reply))
    }

    /// Returns the encoded reply and whether the connection stays open.
    fn handle_line(&mut self, line: &[u8]) -> (Vec<u8>, bool) {
        match parse_line(line) {
            Incoming::Single(parsed) => {
                let (reply, ok) = self.handle(parsed);
                (encode(&reply), ok)
            }
            Incoming::Batch(items) => {
                let mut keep_open = true;
                let replies: Vec<SynapseResponse> = items
                    .into_iter()
                    .map(|parsed| {
                        let (reply, ok) = self.handle(parsed);
                        keep_open &= ok;
                        reply
                    })
                    .collect();
                (encode(&replies), keep_open)
            }
        }
    }

    fn handle(&mut self, parsed: Parsed) -> (SynapseResponse, bool) {
        match parsed {
            Parsed::Request(req) => (self.measure(&req), true),
            Parsed::WrongVersion { id, version } => (
                SynapseResponse::error(
                    id,
                    format!("unsupported protocol version {version}; this device speaks v1"),
                ),
                false,
            ),
            Parsed::Malformed { id, reason } => (SynapseResponse::error(id, reason), true),
        }
    }

    fn measure(&mut self, req: &SynapseRequest) -> SynapseResponse {
        if let Err(msg) = validate(req) {
            return SynapseResponse::error(Some(req.id), msg);
        }
        let delay = self.config.latency.delay(&mut self.latency);
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        let k = req.samples as usize;
        if req.input == 0 {
            return SynapseResponse::bits(req.id, vec![0; k]);
        }
        let mut field = req.field_mt;
        if self.config.field_drift_mt > 0.0 {
            let drift = Normal::new(0.0, self.config.field_drift_mt).expect("validated drift");
            field += drift.sample(&mut self.drift);
        }
        let p = self.config.calibration.probability_unchecked(field);
        match self.config.trace {
            None => {
                let mut bits = vec![0; k];
                sample_bits(p, &mut self.bits, &mut bits);
                SynapseResponse::bits(req.id, bits)
            }
            Some(tc) => self.measure_traces(req, p, &tc),
        }
    }

    fn measure_traces(&mut self, req: &SynapseRequest, p: f64, tc: &TraceConfig) -> SynapseResponse {
        let k = req.samples as usize;
        let mut bits = Vec::with_capacity(k);
        let mut traces: Vec<KerrTrace> = Vec::new();
        for _ in 0..k {
            let passed = bernoulli(p, &mut self.bits);
            let depin = self.trace.random_range(tc.depin_range_mt.0..=tc.depin_range_mt.1);
            let trace = synthesize_kerr_trace(passed, depin, tc.notch_field_mt, tc.noise_amplitude, &mut self.trace);
            match detect_pinning(&trace) {
                Ok(bit) => bits.push(bit),
                Err(e) => return SynapseResponse::error(Some(req.id), format!("detection failed: {e}")),
            }
            if req.traces {
                traces.push(trace);
            }
        }
        let mut reply = SynapseResponse::bits(req.id, bits);
        if req.traces {
            reply.traces = Some(traces);
        }
        reply
    }
}

fn validate(req: &SynapseRequest) -> Result<(), String> {
    if req.input > 1 {
        return Err(format!("input {} is not a bit", req.input));
    }
    if req.samples == 0 {
        return Err("samples must be >= 1".into());
    }
    if req.samples > MAX_SAMPLES {
        return Err(format!("samples {} exceeds the limit of {MAX_SAMPLES}", req.samples));
    }
    if !req.field_mt.is_finite() {
        return Err("field is not finite".into());
    }
    Ok(())
}

fn trim_line(line: &[u8]) -> &[u8] {
    let end = line
        .iter()
        .rposition(|b| !b.is_ascii_whitespace())
        .map_or(0, |i| i + 1);
    &line[..end]
}

fn encode<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(value).expect("responses always serialize");
    out.push(b'\n');
    out
}
