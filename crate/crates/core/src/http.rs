//! Blocking JSON-over-HTTP with a global timeout and bounded retries.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    retries: u32,
}

impl HttpClient {
    pub fn new(timeout: Duration, retries: u32) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self { agent, retries }
    }

    /// POSTs `body` and decodes the JSON reply, trying `1 + retries` times.
    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R, String> {
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.agent.post(url).send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<R>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = format!("bad response body: {e}"),
                },
                Err(e) => last = e.to_string(),
            }
        }
        Err(format!("{url}: {last} (after {} attempts)", self.retries + 1))
    }
}
