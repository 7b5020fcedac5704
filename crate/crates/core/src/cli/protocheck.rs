//! Conformance probes against a model server speaking the wire protocol.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use crate::models::remote::{wire, NORMALIZATION_TOLERANCE, PROTOCOL_VERSION};
use crate::types::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct RuleResult {
    pub rule: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for RuleResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.rule,
            self.detail
        )
    }
}

struct Probe {
    agent: ureq::Agent,
    base: String,
}

impl Probe {
    fn vocab(&self) -> Result<(Vec<String>, TokenId), String> {
        let mut resp = self
            .agent
            .get(&format!("{}/vocab", self.base))
            .call()
            .map_err(|e| e.to_string())?;
        let body: wire::VocabResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        if body.v != PROTOCOL_VERSION {
            return Err(format!("/vocab reports version {}", body.v));
        }
        Ok((body.tokens, body.eos))
    }

    fn raw(&self, body: &str) -> Result<(u16, String), String> {
        let mut resp = self
            .agent
            .post(&format!("{}/logprobs", self.base))
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, text))
    }

    fn logprobs(&self, context: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>, String> {
        let req = serde_json::to_string(&wire::Request::new(context, prefix)).expect("request serializes");
        let (status, text) = self.raw(&req)?;
        let resp: wire::Response = serde_json::from_str(&text).map_err(|e| format!("HTTP {status}: {e}"))?;
        if let Some(e) = resp.error {
            return Err(format!("server error: {e}"));
        }
        resp.logprobs.ok_or_else(|| "response has neither logprobs nor error".into())
    }
}

fn probes(v: usize, eos: TokenId) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let content: Vec<TokenId> = (0..v).filter(|&t| t != eos).collect();
    let pick = |i: usize| content[i % content.len().max(1)];
    let mut out = vec![(vec![], vec![])];
    if !content.is_empty() {
        out.push((vec![], vec![pick(0)]));
        out.push((vec![pick(1)], vec![]));
        out.push((vec![pick(2), pick(0)], vec![pick(1), pick(3)]));
        out.push((vec![], (0..6).map(pick).collect()));
    }
    out
}

fn result(rule: &'static str, outcome: Result<String, String>) -> RuleResult {
    match outcome {
        Ok(detail) => RuleResult {
            rule,
            passed: true,
            detail,
        },
        Err(detail) => RuleResult {
            rule,
            passed: false,
            detail,
        },
    }
}

fn check_vector(lp: &[f64], v: usize) -> Result<(), String> {
    if lp.len() != v {
        return Err(format!("expected {v} entries, got {}", lp.len()));
    }
    if lp.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err("vector contains NaN or +inf".into());
    }
    let sum: f64 = lp.iter().map(|x| x.exp()).sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(format!("exp-sum {sum}"));
    }
    Ok(())
}

fn stream_ordering(addr: &str, requests: &[(Vec<TokenId>, Vec<TokenId>)], expected: &[Vec<f64>]) -> Result<String, String> {
    let stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    stream
        .set_read_timeout(Some(Duration::from_secs(30)))
        .map_err(|e| e.to_string())?;
    let mut writer = stream.try_clone().map_err(|e| e.to_string())?;
    let mut batch = String::new();
    for (c, p) in requests {
        batch.push_str(&serde_json::to_string(&wire::Request::new(c, p)).expect("request serializes"));
        batch.push('\n');
    }
    // Pipelined: all requests go out before any response is read.
    writer.write_all(batch.as_bytes()).map_err(|e| e.to_string())?;
    let mut reader = BufReader::new(stream);
    for (i, want) in expected.iter().enumerate() {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| e.to_string())?;
        let resp: wire::Response = serde_json::from_str(&line).map_err(|e| format!("response {i}: {e}"))?;
        let got = resp.logprobs.ok_or_else(|| format!("response {i}: {:?}", resp.error))?;
        if got.len() != want.len() || got.iter().zip(want).any(|(a, b)| (a - b).abs() > NORMALIZATION_TOLERANCE) {
            return Err(format!("stream response {i} does not match its request"));
        }
    }
    Ok(format!("{} pipelined stream responses in request order", expected.len()))
}

/// Runs every rule against an HTTP server, plus pipelined stream ordering
/// when a `tcp://` address is given.
pub fn protocheck(http_base: &str, stream: Option<&str>, timeout: Duration) -> Vec<RuleResult> {
    let probe = Probe {
        agent: ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into(),
        base: http_base.trim_end_matches('/').to_owned(),
    };
    let mut out = Vec::new();

    let vocab = probe.vocab();
    out.push(result(
        "vocab_stability",
        vocab.clone().and_then(|first| {
            Vocabulary::new(first.0.clone(), first.1).map_err(|e| e.to_string())?;
            for _ in 0..3 {
                if probe.vocab()? != first {
                    return Err("/vocab changed between calls".into());
                }
            }
            Ok(format!("{} tokens, eos = {}", first.0.len(), first.1))
        }),
    ));
    let Ok((tokens, eos)) = vocab else {
        return out;
    };
    let v = tokens.len();
    let requests = probes(v, eos);

    let mut first = Vec::new();
    out.push(result(
        "normalization",
        (|| {
            for (c, p) in &requests {
                let lp = probe.logprobs(c, p)?;
                check_vector(&lp, v).map_err(|e| format!("context {c:?} prefix {p:?}: {e}"))?;
                first.push(lp);
            }
            Ok(format!(
                "{} probes exp-sum to 1 within {NORMALIZATION_TOLERANCE}",
                requests.len()
            ))
        })(),
    ));

    out.push(result(
        "ordering",
        (|| {
            if first.len() != requests.len() {
                return Err("skipped: normalization probes failed".into());
            }
            for (i, (c, p)) in requests.iter().enumerate().rev() {
                let again = probe.logprobs(c, p)?;
                if again
                    .iter()
                    .zip(&first[i])
                    .any(|(a, b)| (a - b).abs() > NORMALIZATION_TOLERANCE)
                {
                    return Err(format!("probe {i} answered differently when repeated out of order"));
                }
            }
            let mut detail = format!("{} probes stable under reordering", requests.len());
            if let Some(addr) = stream {
                let addr = addr.strip_prefix("tcp://").unwrap_or(addr);
                detail = format!("{detail}; {}", stream_ordering(addr, &requests, &first)?);
            }
            Ok(detail)
        })(),
    ));

    out.push(result(
        "malformed_recovery",
        (|| {
            for body in ["not-json", "{\"v\":1,\"context\":[]}"] {
                let (status, text) = probe.raw(body)?;
                let resp: wire::Response =
                    serde_json::from_str(&text).map_err(|e| format!("body {body:?}: unparseable error response: {e}"))?;
                if status != 400 || resp.error.is_none() || resp.v != PROTOCOL_VERSION {
                    return Err(format!("body {body:?}: HTTP {status}, error field {:?}", resp.error));
                }
            }
            let lp = probe.logprobs(&[], &[])?;
            check_vector(&lp, v)?;
            Ok("malformed bodies get HTTP 400 with an error; server keeps answering".into())
        })(),
    ));
    out
}
