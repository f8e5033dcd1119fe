//! HTTP transport speaking a chat-completions-style JSON protocol.
//!
//! Single chat requests go to `POST {base}/v1/chat/completions` with image
//! content carried as base64 data URLs. Batched chunks go to
//! `POST {base}/v1/chat/completions/batch` as `{"model", "requests": [...]}`
//! with one response entry per request; vendors exposing asynchronous batch
//! queues are fronted by the same shape behind a polling proxy. Embeddings
//! use `POST {base}/v1/embeddings` with `{"input": ...}` returning
//! `{"embedding": [...], "dims": n}`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    ChatOutcome, ChatRequest, EmbedInput, EmbedOutcome, EmbedRequest, EndpointConfig,
    ImagePayload, ItemResult, TokenUsage, Transport, TransportFault,
};
use crate::client::ClientError;

pub struct HttpTransport {
    base_url: String,
    model_id: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    calls: AtomicU64,
}

impl HttpTransport {
    /// Resolve the API key from the configured environment variable and
    /// build a client with the endpoint's timeout.
    pub fn from_config(config: &EndpointConfig) -> Result<Self, ClientError> {
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            match std::env::var(&config.api_key_env) {
                Ok(key) if !key.is_empty() => Some(key),
                _ => return Err(ClientError::MissingApiKey(config.api_key_env.clone())),
            }
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        Ok(Self {
            base_url: config.base_url.trim_end_matches('/').to_string(),
            model_id: config.model_id.clone(),
            api_key,
            http,
            calls: AtomicU64::new(0),
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, TransportFault> {
        let mut builder = self
            .http
            .post(format!("{}{path}", self.base_url))
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", format!("Bearer {key}"));
        }
        let response = builder
            .json(body)
            .send()
            .map_err(|e| TransportFault::Network(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let retry_after_secs = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.parse::<u64>().ok());
            let body = response.text().unwrap_or_default();
            return Err(TransportFault::Status {
                code: status.as_u16(),
                body,
                retry_after_secs,
            });
        }
        response
            .json::<Value>()
            .map_err(|e| TransportFault::Network(format!("bad response body: {e}")))
    }
}

/// Build the messages array for one chat request.
pub fn chat_message_body(request: &ChatRequest) -> Value {
    let mut content = vec![json!({"type": "text", "text": request.prompt})];
    if let Some(image) = &request.image {
        let url = match image {
            ImagePayload::DataUrl(url) | ImagePayload::RemoteUrl(url) => url.clone(),
            ImagePayload::Reference(reference) => format!("mock://{reference}"),
        };
        content.push(json!({"type": "image_url", "image_url": {"url": url}}));
    }
    json!([{ "role": "user", "content": content }])
}

pub fn single_chat_body(model_id: &str, request: &ChatRequest) -> Value {
    json!({
        "model": model_id,
        "messages": chat_message_body(request),
    })
}

pub fn batch_chat_body(model_id: &str, requests: &[ChatRequest]) -> Value {
    let entries: Vec<Value> = requests
        .iter()
        .map(|r| json!({"messages": chat_message_body(r)}))
        .collect();
    json!({
        "model": model_id,
        "requests": entries,
    })
}

pub fn embed_body(model_id: &str, request: &EmbedRequest) -> Value {
    let input = match &request.input {
        EmbedInput::Text(text) => json!(text),
        EmbedInput::Image(ImagePayload::DataUrl(url))
        | EmbedInput::Image(ImagePayload::RemoteUrl(url)) => json!({"image_url": url}),
        EmbedInput::Image(ImagePayload::Reference(reference)) => {
            json!({"image_url": format!("mock://{reference}")})
        }
    };
    json!({
        "model": model_id,
        "modality": request.modality.as_str(),
        "input": input,
    })
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl WireUsage {
    fn into_usage(self) -> TokenUsage {
        TokenUsage::new(self.prompt_tokens, self.completion_tokens)
    }
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: String,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct BatchEnvelope {
    responses: Vec<BatchEntry>,
}

#[derive(Deserialize)]
struct BatchEntry {
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct EmbedEnvelope {
    embedding: Vec<f64>,
    dims: usize,
    #[serde(default)]
    usage: Option<WireUsage>,
}

fn parse_completion(value: Value) -> Result<ChatOutcome, TransportFault> {
    let completion: ChatCompletion = serde_json::from_value(value)
        .map_err(|e| TransportFault::Network(format!("malformed completion: {e}")))?;
    let text = completion
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .unwrap_or_default();
    Ok(ChatOutcome {
        text,
        usage: completion.usage.map(WireUsage::into_usage).unwrap_or_default(),
    })
}

impl Transport for HttpTransport {
    fn chat(&self, requests: &[ChatRequest]) -> Result<Vec<ItemResult>, TransportFault> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if requests.len() == 1 {
            let body = single_chat_body(&self.model_id, &requests[0]);
            let value = self.post("/v1/chat/completions", &body)?;
            return Ok(vec![Ok(parse_completion(value)?)]);
        }
        let body = batch_chat_body(&self.model_id, requests);
        let value = self.post("/v1/chat/completions/batch", &body)?;
        let envelope: BatchEnvelope = serde_json::from_value(value)
            .map_err(|e| TransportFault::Network(format!("malformed batch response: {e}")))?;
        Ok(envelope
            .responses
            .into_iter()
            .map(|entry| {
                if let Some(error) = entry.error {
                    return Err(error);
                }
                let text = entry
                    .choices
                    .into_iter()
                    .next()
                    .map(|c| c.message.content)
                    .unwrap_or_default();
                Ok(ChatOutcome {
                    text,
                    usage: entry.usage.map(WireUsage::into_usage).unwrap_or_default(),
                })
            })
            .collect())
    }

    fn embed(&self, request: &EmbedRequest) -> Result<EmbedOutcome, TransportFault> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = embed_body(&self.model_id, request);
        let value = self.post("/v1/embeddings", &body)?;
        let envelope: EmbedEnvelope = serde_json::from_value(value)
            .map_err(|e| TransportFault::Network(format!("malformed embedding: {e}")))?;
        Ok(EmbedOutcome {
            values: envelope.embedding,
            dims: envelope.dims,
            usage: envelope.usage.map(WireUsage::into_usage).unwrap_or_default(),
        })
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Modality;

    #[test]
    fn single_chat_body_carries_data_url() {
        let request = ChatRequest {
            item_id: "img1".to_string(),
            prompt: "Classify the image".to_string(),
            image: Some(ImagePayload::DataUrl("data:image/jpeg;base64,aWtl".to_string())),
        };
        let body = single_chat_body("gpt-4o", &request);
        assert_eq!(body["model"], "gpt-4o");
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[1]["type"], "image_url");
        assert!(content[1]["image_url"]["url"]
            .as_str()
            .unwrap()
            .starts_with("data:image/jpeg;base64,"));
    }

    #[test]
    fn batch_body_has_one_entry_per_request() {
        let requests: Vec<ChatRequest> = (0..3)
            .map(|i| ChatRequest {
                item_id: format!("img{i}"),
                prompt: "p".to_string(),
                image: None,
            })
            .collect();
        let body = batch_chat_body("gpt-4o-mini", &requests);
        assert_eq!(body["requests"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn embed_body_uses_input_field() {
        let request = EmbedRequest {
            item_id: "t".to_string(),
            modality: Modality::Text,
            input: EmbedInput::Text("a caption".to_string()),
        };
        let body = embed_body("sbert", &request);
        assert_eq!(body["input"], "a caption");
        assert_eq!(body["modality"], "text");
    }

    #[test]
    fn completion_parses_text_and_usage() {
        let value = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": "Sports"}}],
            "usage": {"prompt_tokens": 700, "completion_tokens": 3}
        });
        let outcome = parse_completion(value).unwrap();
        assert_eq!(outcome.text, "Sports");
        assert_eq!(outcome.usage.input_tokens, 700);
        assert_eq!(outcome.usage.output_tokens, 3);
    }
}
