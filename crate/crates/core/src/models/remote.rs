//! Client for the remote next-token protocol.
//!
//! Two transports carry the same JSON bodies:
//! - `http://host:port`: `POST /logprobs` per request, `GET /vocab` for the vocabulary;
//! - `tcp://host:port`: newline-delimited messages on one connection, answered in order.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LanguageModel;
use crate::error::{Error, Result};
use crate::types::{TokenId, Vocabulary};

pub const PROTOCOL_VERSION: u32 = 1;
pub const CACHE_ENV: &str = "DECODE_ALIGN_CACHE";
/// Allowed deviation of a response's exp-sum from one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

pub mod wire {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Request {
        pub v: u32,
        pub context: Vec<TokenId>,
        pub prefix: Vec<TokenId>,
    }

    impl Request {
        pub fn new(context: &[TokenId], prefix: &[TokenId]) -> Self {
            Self {
                v: PROTOCOL_VERSION,
                context: context.to_vec(),
                prefix: prefix.to_vec(),
            }
        }
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Response {
        pub v: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub logprobs: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub error: Option<String>,
    }

    impl Response {
        pub fn ok(logprobs: Vec<f64>) -> Self {
            Self {
                v: PROTOCOL_VERSION,
                logprobs: Some(logprobs),
                error: None,
            }
        }

        pub fn err(message: impl Into<String>) -> Self {
            Self {
                v: PROTOCOL_VERSION,
                logprobs: None,
                error: Some(message.into()),
            }
        }
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct VocabResponse {
        pub v: u32,
        pub tokens: Vec<String>,
        pub eos: TokenId,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Http(String),
    Stream(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("tcp://") {
            Ok(Endpoint::Stream(rest.to_string()))
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Endpoint::Http(s.trim_end_matches('/').to_string()))
        } else {
            Err(Error::InvalidParameter(format!(
                "endpoint {s:?} must start with http:// or tcp://"
            )))
        }
    }

    fn label(&self) -> &str {
        match self {
            Endpoint::Http(s) | Endpoint::Stream(s) => s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub timeout: Duration,
    /// Extra attempts after a transport failure.
    pub retries: u32,
    /// Memoization directory; defaults to `$DECODE_ALIGN_CACHE`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retries: 2,
            cache_dir: std::env::var_os(CACHE_ENV).map(PathBuf::from),
        }
    }
}

struct StreamConn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

pub struct RemoteLm {
    endpoint: Endpoint,
    vocab: Vocabulary,
    opts: RemoteOptions,
    agent: ureq::Agent,
    conn: Mutex<Option<StreamConn>>,
}

impl std::fmt::Debug for RemoteLm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteLm")
            .field("endpoint", &self.endpoint)
            .field("vocab_size", &self.vocab.len())
            .finish()
    }
}

/// Transport-level failure, eligible for retry.
struct Transient(String);

fn build_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// Connects to a protocol server. HTTP endpoints fetch their vocabulary
/// from `GET /vocab` when `vocab` is `None`; stream endpoints require it.
pub fn remote_connect(endpoint: &str, vocab: Option<Vocabulary>, opts: RemoteOptions) -> Result<RemoteLm> {
    let endpoint = Endpoint::parse(endpoint)?;
    let agent = build_agent(opts.timeout);
    let vocab = match (vocab, &endpoint) {
        (Some(v), _) => v,
        (None, Endpoint::Http(base)) => fetch_vocab(&agent, base)?,
        (None, Endpoint::Stream(_)) => {
            return Err(Error::InvalidParameter("stream endpoints need an explicit vocabulary".into()))
        }
    };
    Ok(RemoteLm {
        endpoint,
        vocab,
        opts,
        agent,
        conn: Mutex::new(None),
    })
}

pub fn fetch_vocab(agent: &ureq::Agent, base: &str) -> Result<Vocabulary> {
    let transport = |message: String| Error::Transport {
        endpoint: base.to_string(),
        attempts: 1,
        message,
    };
    let mut resp = agent
        .get(&format!("{base}/vocab"))
        .call()
        .map_err(|e| transport(e.to_string()))?;
    let body: wire::VocabResponse = resp.body_mut().read_json().map_err(|e| transport(e.to_string()))?;
    Vocabulary::new(body.tokens, body.eos)
}

impl RemoteLm {
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn cache_path(&self, request: &str) -> Option<PathBuf> {
        let dir = self.opts.cache_dir.as_ref()?;
        let mut hasher = Sha256::new();
        hasher.update(self.endpoint.label().as_bytes());
        hasher.update(b"\n");
        hasher.update(request.as_bytes());
        let name: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Some(dir.join(format!("{name}.json")))
    }

    fn send_once(&self, body: &str) -> std::result::Result<wire::Response, Transient> {
        match &self.endpoint {
            Endpoint::Http(base) => {
                let mut resp = self
                    .agent
                    .post(&format!("{base}/logprobs"))
                    .header("content-type", "application/json")
                    .send(body)
                    .map_err(|e| Transient(e.to_string()))?;
                let text = resp.body_mut().read_to_string().map_err(|e| Transient(e.to_string()))?;
                serde_json::from_str(&text).map_err(|e| Transient(format!("bad response body: {e}")))
            }
            Endpoint::Stream(addr) => {
                let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
                if guard.is_none() {
                    let stream = TcpStream::connect(addr).map_err(|e| Transient(e.to_string()))?;
                    stream
                        .set_read_timeout(Some(self.opts.timeout))
                        .map_err(|e| Transient(e.to_string()))?;
                    let writer = stream.try_clone().map_err(|e| Transient(e.to_string()))?;
                    *guard = Some(StreamConn {
                        reader: BufReader::new(stream),
                        writer,
                    });
                }
                let conn = guard.as_mut().expect("connection just established");
                let result = (|| {
                    conn.writer.write_all(body.as_bytes())?;
                    conn.writer.write_all(b"\n")?;
                    conn.writer.flush()?;
                    let mut line = String::new();
                    if conn.reader.read_line(&mut line)? == 0 {
                        return Err(std::io::Error::new(
                            std::io::ErrorKind::UnexpectedEof,
                            "connection closed by server",
                        ));
                    }
                    Ok(line)
                })();
                match result {
                    Ok(line) => serde_json::from_str(line.trim_end()).map_err(|e| Transient(format!("bad response line: {e}"))),
                    Err(e) => {
                        *guard = None;
                        Err(Transient(e.to_string()))
                    }
                }
            }
        }
    }

    fn check_response(&self, resp: wire::Response) -> Result<Vec<f64>> {
        if resp.v != PROTOCOL_VERSION {
            return Err(Error::Remote(format!("unsupported protocol version {}", resp.v)));
        }
        if let Some(msg) = resp.error {
            return Err(Error::Remote(msg));
        }
        let lp = resp
            .logprobs
            .ok_or_else(|| Error::Remote("response has neither logprobs nor error".into()))?;
        if lp.len() != self.vocab.len() {
            return Err(Error::LengthMismatch {
                expected: self.vocab.len(),
                got: lp.len(),
            });
        }
        let mass: f64 = lp.iter().map(|l| l.exp()).sum();
        if (mass - 1.0).abs() > NORMALIZATION_TOLERANCE || lp.iter().any(|l| l.is_nan()) {
            return Err(Error::Remote(format!("response is not normalized: exp-sum = {mass}")));
        }
        Ok(lp)
    }
}

impl LanguageModel for RemoteLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logprobs(&self, context: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let body = serde_json::to_string(&wire::Request::new(context, prefix))?;
        let cache = self.cache_path(&body);
        if let Some(path) = &cache {
            if let Ok(text) = std::fs::read_to_string(path) {
                if let Ok(lp) = serde_json::from_str::<Vec<f64>>(&text) {
                    return Ok(lp);
                }
            }
        }
        let attempts = self.opts.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.send_once(&body) {
                Ok(resp) => {
                    let lp = self.check_response(resp)?;
                    if let Some(path) = &cache {
                        let tmp = path.with_extension("tmp");
                        if let Some(dir) = path.parent() {
                            std::fs::create_dir_all(dir)?;
                        }
                        std::fs::write(&tmp, serde_json::to_string(&lp)?)?;
                        std::fs::rename(&tmp, path)?;
                    }
                    return Ok(lp);
                }
                Err(Transient(msg)) => {
                    last = msg;
                    if attempt < attempts {
                        std::thread::sleep(Duration::from_millis(25 * u64::from(attempt)));
                    }
                }
            }
        }
        Err(Error::Transport {
            endpoint: self.endpoint.label().to_string(),
            attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{next_token_logprobs, sequence_logprob};
    use crate::types::CallCounters;
    use std::net::TcpListener;

    fn vocab() -> Vocabulary {
        Vocabulary::with_eos_token(vec!["a".into(), "b".into(), "</s>".into()], "</s>").unwrap()
    }

    /// Stream-mode server answering with a prefix-length-dependent distribution.
    fn spawn_stream_server() -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                std::thread::spawn(move || {
                    let mut writer = stream.try_clone().unwrap();
                    for line in BufReader::new(stream).lines() {
                        let Ok(line) = line else { break };
                        let resp = match serde_json::from_str::<wire::Request>(&line) {
                            Ok(req) => {
                                let k = (req.prefix.len() + req.context.len()) as f64;
                                let w = [1.0 + k, 1.0, 0.5];
                                let z: f64 = w.iter().sum();
                                wire::Response::ok(w.iter().map(|x| (x / z).ln()).collect())
                            }
                            Err(e) => wire::Response::err(e.to_string()),
                        };
                        let _ = writeln!(writer, "{}", serde_json::to_string(&resp).unwrap());
                    }
                });
            }
        });
        format!("tcp://{addr}")
    }

    #[test]
    fn stream_round_trip() {
        let ep = spawn_stream_server();
        let lm = remote_connect(
            &ep,
            Some(vocab()),
            RemoteOptions {
                cache_dir: None,
                ..Default::default()
            },
        )
        .unwrap();
        let mut c = CallCounters::default();
        let lp = next_token_logprobs(&lm, &[], &[], &mut c).unwrap();
        assert_eq!(lp.len(), 3);
        let mass: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-6);
        let total = sequence_logprob(&lm, &[], &[0, 1, 2], &mut c).unwrap();
        let expected = (1.0f64 / 2.5).ln() + (1.0f64 / 3.5).ln() + (0.5f64 / 4.5).ln();
        assert!((total - expected).abs() < 1e-9);
    }

    #[test]
    fn unreachable_server_reports_attempts() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let lm = remote_connect(
            &format!("tcp://{addr}"),
            Some(vocab()),
            RemoteOptions {
                retries: 1,
                cache_dir: None,
                timeout: Duration::from_secs(1),
            },
        )
        .unwrap();
        match lm.logprobs(&[], &[]) {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 2),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn cache_serves_repeated_queries() {
        let dir = tempfile::tempdir().unwrap();
        let ep = spawn_stream_server();
        let opts = RemoteOptions {
            cache_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let lm = remote_connect(&ep, Some(vocab()), opts.clone()).unwrap();
        let first = lm.logprobs(&[1], &[0]).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let second = lm.logprobs(&[1], &[0]).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(Endpoint::parse("tcp://h:1").unwrap(), Endpoint::Stream("h:1".into()));
        assert_eq!(Endpoint::parse("http://h:1/").unwrap(), Endpoint::Http("http://h:1".into()));
        assert!(Endpoint::parse("h:1").is_err());
    }
}
