use std::time::Duration;

use aftercast_core::feedback::{LlmConfig, LlmTransport};
use serde_json::{json, Value};

/// Chat-completions style HTTP transport. Blocking; call it off the async
/// executor.
#[derive(Clone, Copy, Debug, Default)]
pub struct HttpTransport;

/// Message text from a chat-completions response, or the raw body when the
/// response has some other shape.
fn extract_content(body: &str) -> String {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return body.to_string();
    };
    let found = v
        .pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/choices/0/text"))
        .or_else(|| v.pointer("/message/content"))
        .or_else(|| v.get("content"))
        .and_then(Value::as_str);
    found.map_or_else(|| body.to_string(), str::to_string)
}

impl LlmTransport for HttpTransport {
    fn complete(&self, cfg: &LlmConfig, system: &str, user: &str) -> Result<String, String> {
        let endpoint = cfg.endpoint.as_deref().ok_or("no endpoint configured")?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| e.to_string())?;
        let body = json!({
            "model": cfg.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let resp = client.post(endpoint).json(&body).send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("endpoint returned {status}"));
        }
        Ok(extract_content(&text))
    }
}
