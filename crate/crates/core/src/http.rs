//! Minimal blocking JSON-over-HTTP client shared by the remote embedding and
//! generation backends.

use std::thread;
use std::time::Duration;

use serde_json::Value;

use crate::error::{Error, Result};

const BACKOFF_BASE: Duration = Duration::from_millis(50);

pub struct JsonEndpoint {
    url: String,
    client: reqwest::blocking::Client,
    retries: u32,
}

impl JsonEndpoint {
    /// `retries` is the number of extra attempts after the first one.
    pub fn new(url: impl Into<String>, timeout: Duration, retries: u32) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            url: url.into(),
            client,
            retries,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POSTs `body` and decodes the JSON reply. Connection failures, timeouts
    /// and 5xx replies are retried; 4xx replies are not.
    pub fn post(&self, body: &Value) -> Result<Value> {
        let max_attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            match self.client.post(&self.url).json(body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<Value>().map_err(|e| Error::Transport {
                            attempts: attempt,
                            reason: format!("undecodable response body: {e}"),
                        });
                    }
                    last = format!("HTTP {status}");
                    if status.is_client_error() {
                        return Err(Error::Transport {
                            attempts: attempt,
                            reason: last,
                        });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < max_attempts {
                tracing::debug!(url = %self.url, attempt, reason = %last, "retrying");
                thread::sleep(BACKOFF_BASE * attempt);
            }
        }
        Err(Error::Transport {
            attempts: max_attempts,
            reason: last,
        })
    }
}

/// Resolves a dotted path such as `data.0.embedding`; numeric segments index
/// into arrays.
pub fn lookup<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    if path.is_empty() {
        return Some(value);
    }
    path.split('.').try_fold(value, |cur, seg| match cur {
        Value::Object(map) => map.get(seg),
        Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dotted_lookup() {
        let v = json!({"data": [{"embedding": [1, 2]}], "response": "hi"});
        assert_eq!(lookup(&v, "response"), Some(&json!("hi")));
        assert_eq!(lookup(&v, "data.0.embedding"), Some(&json!([1, 2])));
        assert_eq!(lookup(&v, "data.1.embedding"), None);
        assert_eq!(lookup(&v, "missing"), None);
    }

    #[test]
    fn unreachable_endpoint_reports_attempts() {
        // Port 9 on localhost: nothing listens there in the sandbox.
        let ep = JsonEndpoint::new("http://127.0.0.1:9/x", Duration::from_millis(200), 2).unwrap();
        match ep.post(&json!({})) {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
