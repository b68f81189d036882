//! Chat-completions style HTTP backend.

use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendConfig, BackendError, CacheKey, JudgeBackend, JudgeError, JudgeRequest};

/// How images reach the endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageTransport {
    /// Inline `data:` URLs.
    #[default]
    Base64,
    /// `<prefix><file name>`; the files must already be served there.
    UrlPrefix(String),
}

#[derive(Debug)]
pub struct HttpChatBackend {
    client: reqwest::Client,
    endpoint: String,
    model_name: String,
    api_key: Option<String>,
    transport: ImageTransport,
}

impl HttpChatBackend {
    /// Reads the API key from the environment variable named in the config.
    pub fn from_config(config: &BackendConfig) -> Result<Self, JudgeError> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| JudgeError::Config("http_chat backend needs an endpoint".into()))?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                JudgeError::Config(format!("environment variable {var} (api_key_env) is not set"))
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| JudgeError::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            endpoint,
            model_name: config.model_name.clone(),
            api_key,
            transport: config.image_transport.clone(),
        })
    }

    fn image_part(&self, req_img: &crate::model::ImageRef) -> Result<Value, BackendError> {
        let url = match &self.transport {
            ImageTransport::Base64 => {
                let bytes = req_img
                    .read_bytes()
                    .map_err(|e| BackendError::Fatal(format!("read {}: {e}", req_img.path.display())))?;
                let mime = mime_for(&req_img.path);
                format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
            }
            ImageTransport::UrlPrefix(prefix) => {
                let name = req_img.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                format!("{prefix}{name}")
            }
        };
        Ok(json!({"type": "image_url", "image_url": {"url": url}}))
    }

    fn body(&self, request: &JudgeRequest) -> Result<Value, BackendError> {
        let mut content = Vec::with_capacity(request.images.len() + 1);
        for img in &request.images {
            content.push(self.image_part(img)?);
        }
        content.push(json!({"type": "text", "text": request.prompt}));
        Ok(json!({
            "model": self.model_name,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }))
    }
}

pub(crate) fn mime_for(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    }
}

fn retry_after(headers: &reqwest::header::HeaderMap) -> Option<Duration> {
    let v = headers.get(reqwest::header::RETRY_AFTER)?.to_str().ok()?;
    v.trim().parse::<f64>().ok().filter(|s| s.is_finite() && *s >= 0.0).map(Duration::from_secs_f64)
}

/// Extracts `choices[0].message.content`, accepting either a string or a list of text parts.
fn extract_text(body: &Value) -> Option<String> {
    let content = body.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => {
            let text: String = parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect();
            Some(text)
        }
        _ => None,
    }
}

#[async_trait]
impl JudgeBackend for HttpChatBackend {
    async fn complete(&self, request: &JudgeRequest, _key: &CacheKey) -> Result<String, BackendError> {
        let body = self.body(request)?;
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().await.map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.as_u16() == 408 || status.is_server_error() {
            return Err(BackendError::Transient {
                message: format!("HTTP {status}"),
                retry_after: retry_after(resp.headers()),
            });
        }
        let text = resp.text().await.map_err(|e| BackendError::transient(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Fatal(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>())));
        }
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Fatal(format!("malformed response body: {e}")))?;
        extract_text(&parsed).ok_or_else(|| BackendError::Fatal("response has no choices[0].message.content".into()))
    }
}
