//! Minimal blocking HTTP client shared by the remote backends.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::Agent;

/// A configured endpoint. Errors are flattened to strings; callers wrap
/// them in their own "unavailable" variants.
#[derive(Clone)]
pub struct HttpEndpoint {
    url: String,
    agent: Agent,
}

impl HttpEndpoint {
    pub fn new(url: &str, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { url: url.to_string(), agent }
    }

    pub fn post_json<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, String> {
        let mut resp = self.agent.post(&self.url).send_json(body).map_err(|e| format!("{}: {e}", self.url))?;
        resp.body_mut().read_json::<R>().map_err(|e| format!("{}: bad response: {e}", self.url))
    }

    pub fn post_bytes_for_json<R: DeserializeOwned>(&self, bytes: &[u8], content_type: &str) -> Result<R, String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Content-Type", content_type)
            .send(bytes)
            .map_err(|e| format!("{}: {e}", self.url))?;
        resp.body_mut().read_json::<R>().map_err(|e| format!("{}: bad response: {e}", self.url))
    }

    /// Posts JSON and returns the raw body with its `Content-Type`.
    pub fn post_json_for_bytes<B: Serialize>(&self, body: &B) -> Result<(Vec<u8>, String), String> {
        let mut resp = self.agent.post(&self.url).send_json(body).map_err(|e| format!("{}: {e}", self.url))?;
        let content_type = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .unwrap_or("application/octet-stream")
            .to_string();
        let bytes = resp.body_mut().read_to_vec().map_err(|e| format!("{}: bad response: {e}", self.url))?;
        Ok((bytes, content_type))
    }
}
