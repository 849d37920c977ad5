//! Split inference over TCP. The client runs the embedding and the first `k`
//! blocks, optionally applies the overlap defense, and ships `H^k`; the
//! server finishes the forward pass and answers with the decoded text.
//!
//! The server can run an attack on every `H^k` it receives and keeps a log
//! of the reconstructions, the way a curious host would.

pub mod wire;

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{invert, AttackError, EPParams, HeiIndex, Method};
use crate::defense::{apply_defense, DefenseError, OverlapMatrixSet};
use crate::numerics::Matrix;
use crate::tinylm::{LMParams, LMPrefix, ModelError};
use crate::tokenizer::{TokenSequence, TokenizerError, Vocab};
use wire::{codes, FloatWidth, Frame, HelloReply, MsgType, ProtoError, ReadError, ResultPayload};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("server error {}: {}", .0.code, .0.message)]
    Server(ProtoError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// Finishes the forward pass from `H^k` and decodes the final states.
pub fn finish_from(lm: &LMParams, vocab: &Vocab, k: usize, h: &Matrix) -> Result<ResultPayload, SplitError> {
    let states = lm.continue_from(k, h)?;
    let last = states.last().unwrap_or(h);
    let ids = lm.lm_decode(last)?;
    Ok(ResultPayload { text: vocab.decode(&ids)?, ids, hidden_hash: crate::fnv64_f64(last.data().iter().copied()) })
}

/// What the unsplit model produces for `tokens`; a split session in f64
/// wire mode must match this exactly.
pub fn local_result(lm: &LMParams, vocab: &Vocab, tokens: &TokenSequence) -> Result<ResultPayload, SplitError> {
    let hs = lm.forward_hidden(tokens)?;
    let ids = lm.lm_decode(hs.last())?;
    Ok(ResultPayload { text: vocab.decode(&ids)?, ids, hidden_hash: crate::fnv64_f64(hs.last().data().iter().copied()) })
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub split_layer: usize,
    /// Attack run on each received `H^k`.
    pub attack: Option<Method>,
    pub max_payload: u32,
    /// Idle connections are dropped after this long.
    pub read_timeout: Option<Duration>,
    /// Attack log entries are also appended here as JSON lines.
    pub attack_log_path: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            split_layer: 1,
            attack: None,
            max_payload: wire::DEFAULT_MAX_PAYLOAD,
            read_timeout: Some(Duration::from_secs(60)),
            attack_log_path: None,
        }
    }
}

/// One reconstruction made by the server-side attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackLogEntry {
    pub session: u64,
    pub request: u64,
    pub method: Method,
    pub layer: usize,
    pub token_len: usize,
    pub ids: Vec<u32>,
    pub reconstruction: String,
}

struct Shared {
    lm: LMParams,
    vocab: Vocab,
    index: HeiIndex,
    parrot: Option<EPParams>,
    cfg: ServerConfig,
    log: Mutex<Vec<AttackLogEntry>>,
    log_file: Option<Mutex<BufWriter<File>>>,
    sessions: AtomicU64,
    stop: AtomicBool,
}

pub struct SplitServer {
    listener: TcpListener,
    shared: Arc<Shared>,
}

impl SplitServer {
    pub fn bind(
        addr: impl ToSocketAddrs,
        lm: LMParams,
        vocab: Vocab,
        parrot: Option<EPParams>,
        cfg: ServerConfig,
    ) -> Result<Self, SplitError> {
        let n = lm.num_layers();
        if cfg.split_layer >= n {
            return Err(SplitError::Config(format!("split layer {} must be below model depth {n}", cfg.split_layer)));
        }
        if vocab.len() > lm.vocab_size() {
            return Err(SplitError::Config(format!("vocabulary has {} tokens but the model only {}", vocab.len(), lm.vocab_size())));
        }
        if let Some(m) = cfg.attack.filter(|m| m.uses_parrot()) {
            match &parrot {
                None => return Err(SplitError::Config(format!("attack {m} needs a parrot"))),
                Some(p) if p.config.target_layer != cfg.split_layer => {
                    return Err(SplitError::Config(format!(
                        "parrot targets layer {} but the split is at {}",
                        p.config.target_layer, cfg.split_layer
                    )))
                }
                _ => {}
            }
        }
        let log_file = match &cfg.attack_log_path {
            Some(p) => Some(Mutex::new(BufWriter::new(File::options().create(true).append(true).open(p)?))),
            None => None,
        };
        let listener = TcpListener::bind(addr)?;
        let index = HeiIndex::new(&lm);
        let shared = Shared {
            lm,
            vocab,
            index,
            parrot,
            cfg,
            log: Mutex::new(Vec::new()),
            log_file,
            sessions: AtomicU64::new(0),
            stop: AtomicBool::new(false),
        };
        Ok(Self { listener, shared: Arc::new(shared) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    /// Accepts connections until shut down, one thread per connection.
    pub fn serve(self) {
        for stream in self.listener.incoming() {
            if self.shared.stop.load(Ordering::SeqCst) {
                break;
            }
            match stream {
                Ok(s) => {
                    let shared = Arc::clone(&self.shared);
                    let session = shared.sessions.fetch_add(1, Ordering::SeqCst);
                    std::thread::spawn(move || handle_connection(&shared, s, session));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let shared = Arc::clone(&self.shared);
        let join = std::thread::spawn(move || self.serve());
        ServerHandle { addr, shared, join: Some(join) }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn attack_log(&self) -> Vec<AttackLogEntry> {
        self.shared.log.lock().unwrap().clone()
    }

    /// Stops accepting; connections already open run to completion.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.stop();
        }
    }
}

fn send_error(stream: &mut TcpStream, e: &ProtoError) -> std::io::Result<()> {
    wire::write_frame(stream, &Frame::new(MsgType::Error, wire::encode_error(e)))
}

fn handle_connection(shared: &Shared, mut stream: TcpStream, session: u64) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    log::debug!("session {session}: connected from {peer}");
    let _ = stream.set_read_timeout(shared.cfg.read_timeout);
    let _ = stream.set_nodelay(true);
    let mut width = FloatWidth::F32;
    let mut request = 0u64;
    loop {
        let frame = match wire::read_frame(&mut stream, shared.cfg.max_payload) {
            Ok(Some(f)) => f,
            Ok(None) | Err(ReadError::Eof) => break,
            Err(ReadError::Io(e)) => {
                log::debug!("session {session}: {e}");
                break;
            }
            Err(ReadError::BadMagic(m)) => {
                let _ = send_error(&mut stream, &ProtoError::new(codes::BAD_MAGIC, format!("bad magic {m:02x?}")));
                break;
            }
            Err(ReadError::Oversized(len)) => {
                let msg = format!("payload of {len} bytes exceeds limit {}", shared.cfg.max_payload);
                let _ = send_error(&mut stream, &ProtoError::new(codes::OVERSIZED, msg));
                break;
            }
        };
        let reply = match MsgType::from_u8(frame.msg_type) {
            Some(MsgType::Hello) => hello(shared, &frame.payload, &mut width),
            Some(MsgType::Hidden) => {
                request += 1;
                hidden(shared, &frame.payload, width, session, request)
            }
            _ => Err(ProtoError::new(codes::UNEXPECTED_TYPE, format!("unexpected message type {}", frame.msg_type))),
        };
        let out = match reply {
            Ok(f) => f,
            Err(e) => {
                log::debug!("session {session}: error {}: {}", e.code, e.message);
                Frame::new(MsgType::Error, wire::encode_error(&e))
            }
        };
        if wire::write_frame(&mut stream, &out).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
    log::debug!("session {session}: closed");
}

fn hello(shared: &Shared, payload: &[u8], width: &mut FloatWidth) -> Result<Frame, ProtoError> {
    let (version, w) = wire::decode_hello(payload)?;
    if version != wire::PROTOCOL_VERSION {
        return Err(ProtoError::new(codes::UNSUPPORTED, format!("protocol version {version} not supported")));
    }
    *width = FloatWidth::from_bytes(w).ok_or_else(|| ProtoError::new(codes::UNSUPPORTED, format!("float width {w}")))?;
    let reply = HelloReply {
        version: wire::PROTOCOL_VERSION,
        width: *width,
        split_layer: shared.cfg.split_layer as u16,
        d: shared.lm.hidden_dim() as u32,
    };
    Ok(Frame::new(MsgType::Hello, wire::encode_hello_reply(&reply)))
}

fn hidden(shared: &Shared, payload: &[u8], width: FloatWidth, session: u64, request: u64) -> Result<Frame, ProtoError> {
    let head = wire::decode_hidden_header(payload)?;
    let k = shared.cfg.split_layer;
    if head.layer as usize != k {
        return Err(ProtoError::new(codes::WRONG_LAYER, format!("expected states of layer {k}, got {}", head.layer)));
    }
    let d = shared.lm.hidden_dim();
    if head.d as usize != d {
        return Err(ProtoError::new(codes::BAD_DIMENSION, format!("expected width {d}, got {}", head.d)));
    }
    let max = shared.lm.config.max_seq_len;
    if head.n == 0 || head.n as usize > max {
        return Err(ProtoError::new(codes::BAD_DIMENSION, format!("row count {} outside 1..={max}", head.n)));
    }
    let h = wire::decode_hidden_body(payload, head, width)?;
    let internal = |e: SplitError| ProtoError::new(codes::INTERNAL, e.to_string());
    if let Some(method) = shared.cfg.attack {
        let inv = invert(&shared.lm, &shared.index, method, &h, k, shared.parrot.as_ref())
            .map_err(|e| internal(e.into()))?;
        let reconstruction = shared.vocab.decode(&inv.ids).map_err(|e| internal(e.into()))?;
        let entry = AttackLogEntry { session, request, method, layer: k, token_len: h.rows(), ids: inv.ids, reconstruction };
        log::info!("session {session} request {request}: {method} recovered {:?}", entry.reconstruction);
        if let Some(f) = &shared.log_file {
            let mut f = f.lock().unwrap();
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                log::warn!("attack log write failed: {e}");
            }
        }
        shared.log.lock().unwrap().push(entry);
    }
    let result = finish_from(&shared.lm, &shared.vocab, k, &h).map_err(internal)?;
    Ok(Frame::new(MsgType::Result, wire::encode_result(&result)))
}

/// Client-side defense: each request picks a matrix with `choice_seed`.
#[derive(Clone, Debug)]
pub struct ClientDefense {
    pub set: OverlapMatrixSet,
    pub choice_seed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ClientOptions {
    pub wire: FloatWidth,
    pub defense: Option<ClientDefense>,
    pub timeout: Option<Duration>,
}

/// An open connection that has completed the HELLO exchange.
pub struct SplitClient {
    stream: TcpStream,
    pub server: HelloReply,
}

impl SplitClient {
    pub fn connect(addr: impl ToSocketAddrs, width: FloatWidth, timeout: Option<Duration>) -> Result<Self, SplitError> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(timeout)?;
        stream.set_write_timeout(timeout)?;
        stream.set_nodelay(true)?;
        wire::write_frame(&mut stream, &Frame::new(MsgType::Hello, wire::encode_hello(width)))?;
        let f = read_reply(&mut stream)?;
        if f.msg_type != MsgType::Hello as u8 {
            return Err(SplitError::Protocol(format!("expected HELLO reply, got type {}", f.msg_type)));
        }
        let server = wire::decode_hello_reply(&f.payload).map_err(|e| SplitError::Protocol(e.message))?;
        if server.width != width {
            return Err(SplitError::Protocol("server did not accept the float width".into()));
        }
        Ok(Self { stream, server })
    }

    pub fn split_layer(&self) -> usize {
        self.server.split_layer as usize
    }

    /// Sends `H^k` and waits for the decoded result.
    pub fn infer(&mut self, h: &Matrix) -> Result<ResultPayload, SplitError> {
        let payload = wire::encode_hidden(self.server.split_layer, h, self.server.width);
        wire::write_frame(&mut self.stream, &Frame::new(MsgType::Hidden, payload))?;
        let f = read_reply(&mut self.stream)?;
        if f.msg_type != MsgType::Result as u8 {
            return Err(SplitError::Protocol(format!("expected RESULT, got type {}", f.msg_type)));
        }
        wire::decode_result(&f.payload).map_err(|e| SplitError::Protocol(e.message))
    }
}

/// Reads one reply; ERROR frames become `SplitError::Server`.
fn read_reply(stream: &mut TcpStream) -> Result<Frame, SplitError> {
    match wire::read_frame(stream, u32::MAX) {
        Ok(Some(f)) if f.msg_type == MsgType::Error as u8 => {
            Err(SplitError::Server(wire::decode_error(&f.payload).map_err(|e| SplitError::Protocol(e.message))?))
        }
        Ok(Some(f)) => Ok(f),
        Ok(None) | Err(ReadError::Eof) => Err(SplitError::Protocol("server closed the connection".into())),
        Err(ReadError::Io(e)) => Err(e.into()),
        Err(ReadError::BadMagic(_)) => Err(SplitError::Protocol("bad magic in reply".into())),
        Err(ReadError::Oversized(n)) => Err(SplitError::Protocol(format!("reply of {n} bytes"))),
    }
}

/// Encodes `text`, computes `H^k` with the local prefix, optionally defends
/// it, and runs one request against the server at `addr`.
pub fn client_session(
    prefix: &LMPrefix,
    vocab: &Vocab,
    text: &str,
    addr: impl ToSocketAddrs,
    opts: &ClientOptions,
) -> Result<ResultPayload, SplitError> {
    if text.trim().is_empty() {
        return Err(SplitError::EmptyInput);
    }
    let tokens = vocab.encode(text);
    if tokens.is_empty() {
        return Err(SplitError::EmptyInput);
    }
    let mut h = prefix.forward(&tokens)?;
    if let Some(def) = &opts.defense {
        h = apply_defense(&h, &def.set, def.choice_seed)?;
    }
    let mut client = SplitClient::connect(addr, opts.wire, opts.timeout)?;
    if client.split_layer() != prefix.split_layer() || client.server.d as usize != h.cols() {
        return Err(SplitError::Config(format!(
            "server splits at layer {} with width {}, client prefix has layer {} and width {}",
            client.server.split_layer,
            client.server.d,
            prefix.split_layer(),
            h.cols()
        )));
    }
    client.infer(&h)
}
