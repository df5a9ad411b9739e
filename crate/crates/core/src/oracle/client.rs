//! HTTP client for a remote fitness service.

use std::time::Duration;

use serde_json::Value;

use super::{FitnessQuery, FitnessReply, Oracle, OracleError};

#[derive(Debug, Clone)]
pub struct RemoteOracle {
    agent: ureq::Agent,
    url: String,
}

impl RemoteOracle {
    /// `endpoint` is the service root, e.g. `http://127.0.0.1:8080`; the
    /// `/fitness` path is appended unless already present.
    pub fn new(endpoint: &str) -> Self {
        let root = endpoint.trim_end_matches('/');
        let url = if root.ends_with("/fitness") { root.to_string() } else { format!("{root}/fitness") };
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self { agent, url }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

pub fn evaluate_remote(endpoint: &RemoteOracle, query: &FitnessQuery) -> Result<FitnessReply, OracleError> {
    let body = serde_json::to_string(query).map_err(|e| OracleError::Parse(e.to_string()))?;
    let mut response = endpoint
        .agent
        .post(&endpoint.url)
        .header("Content-Type", "application/json")
        .send(body)
        .map_err(|e| OracleError::Transport(e.to_string()))?;
    let status = response.status().as_u16();
    let text = response.body_mut().read_to_string().map_err(|e| OracleError::Transport(e.to_string()))?;
    parse_reply(status, &text, &query.request_id)
}

/// Interprets a raw HTTP reply. Split out so every failure class can be
/// exercised without a socket.
pub fn parse_reply(status: u16, body: &str, sent_id: &str) -> Result<FitnessReply, OracleError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| OracleError::MalformedReply(format!("{e}: {body:.200}")))?;
    match status {
        200 => {}
        400 => {
            let field = |k: &str| value.get(k).and_then(Value::as_str).map(str::to_string);
            return match (field("error"), field("detail")) {
                (Some(code), Some(detail)) => Err(OracleError::Server { code, detail }),
                _ => Err(OracleError::MalformedReply(format!("error reply without code/detail: {body:.200}"))),
            };
        }
        other => return Err(OracleError::MalformedReply(format!("unexpected status {other}"))),
    }
    let received = value
        .get("request_id")
        .and_then(Value::as_str)
        .ok_or_else(|| OracleError::MalformedReply("missing request_id".into()))?;
    if received != sent_id {
        return Err(OracleError::RequestIdMismatch { sent: sent_id.to_string(), received: received.to_string() });
    }
    let loss = value
        .get("loss")
        .and_then(Value::as_f64)
        .ok_or_else(|| OracleError::MalformedReply("missing numeric loss".into()))?;
    if !loss.is_finite() {
        return Err(OracleError::NonFiniteLoss(loss));
    }
    if loss < 0.0 {
        return Err(OracleError::MalformedReply(format!("negative loss {loss}")));
    }
    let n_examples = value
        .get("n_examples")
        .and_then(Value::as_u64)
        .filter(|&n| n >= 1)
        .ok_or_else(|| OracleError::MalformedReply("n_examples must be a positive integer".into()))?;
    Ok(FitnessReply { request_id: received.to_string(), loss, n_examples: n_examples as usize })
}

impl Oracle for RemoteOracle {
    fn evaluate(&self, query: &FitnessQuery) -> Result<FitnessReply, OracleError> {
        evaluate_remote(self, query)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_normalisation() {
        assert_eq!(RemoteOracle::new("http://h:1").url(), "http://h:1/fitness");
        assert_eq!(RemoteOracle::new("http://h:1/").url(), "http://h:1/fitness");
        assert_eq!(RemoteOracle::new("http://h:1/fitness").url(), "http://h:1/fitness");
    }

    #[test]
    fn parses_success() {
        let r = parse_reply(200, r#"{"request_id":"a","loss":2.0794415416798357e0,"n_examples":3}"#, "a").unwrap();
        assert_eq!(r.loss, 2.0794415416798357);
        assert_eq!(r.n_examples, 3);
    }

    #[test]
    fn distinct_failure_classes() {
        assert!(matches!(
            parse_reply(200, r#"{"request_id":"b","loss":1.0,"n_examples":3}"#, "a"),
            Err(OracleError::RequestIdMismatch { .. })
        ));
        assert!(matches!(parse_reply(200, "not json", "a"), Err(OracleError::MalformedReply(_))));
        assert!(matches!(
            parse_reply(200, r#"{"request_id":"a","loss":"x","n_examples":3}"#, "a"),
            Err(OracleError::MalformedReply(_))
        ));
        assert!(matches!(
            parse_reply(200, r#"{"request_id":"a","loss":1.0,"n_examples":0}"#, "a"),
            Err(OracleError::MalformedReply(_))
        ));
        let err = parse_reply(400, r#"{"error":"dim_mismatch","detail":"alphas"}"#, "a").unwrap_err();
        assert_eq!(err, OracleError::Server { code: "dim_mismatch".into(), detail: "alphas".into() });
        assert!(matches!(parse_reply(500, "{}", "a"), Err(OracleError::MalformedReply(_))));
    }

    #[test]
    fn unreachable_server_is_transport_failure() {
        // Port 9 (discard) on localhost is closed in the test environment.
        let client = RemoteOracle::new("http://127.0.0.1:9");
        let err = client.evaluate(&FitnessQuery::stage1("a", vec![1.0])).unwrap_err();
        assert!(matches!(err, OracleError::Transport(_)), "{err:?}");
    }
}
