//! Adapter for chat-completion services speaking the common JSON shape.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{Backend, BackendError, Completion, CompletionRequest, Usage};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_output_tokens: Option<u32>,
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn body(&self, request: &CompletionRequest) -> Result<Value, BackendError> {
        let content = match &request.image_path {
            None => Value::String(request.prompt.clone()),
            Some(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| BackendError::Config(format!("cannot read image {}: {e}", path.display())))?;
                let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
                    Some("png") => "image/png",
                    _ => "image/jpeg",
                };
                let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                json!([
                    { "type": "text", "text": request.prompt },
                    { "type": "image_url", "image_url": { "url": format!("data:{mime};base64,{data}") } }
                ])
            }
        };
        let mut body = json!({
            "model": self.config.model,
            "temperature": request.temperature,
            "messages": [{ "role": "user", "content": content }],
        });
        if let Some(max) = request.max_output_tokens.or(self.config.max_output_tokens) {
            body["max_tokens"] = json!(max);
        }
        Ok(body)
    }
}

fn map_transport(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            BackendError::Timeout
        }
        other => BackendError::Transport(other.to_string()),
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let body = self.body(request)?;
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_transport)?;
        if status == 429 {
            return Err(BackendError::RateLimited);
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Provider { status, body: text });
        }
        let json: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(format!("not JSON: {e}")))?;
        let content = json["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))?;
        let usage = Usage::new(
            json["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            json["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        );
        Ok(Completion {
            text: content.to_string(),
            usage,
        })
    }
}
