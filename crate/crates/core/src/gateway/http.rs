use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{Backend, BackendConfig, CompletionRequest, GatewayError};

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Client for `POST {base_url}/chat/completions`, sending the prompt as a
/// single user message and reading `choices[0].message.content`.
///
/// 429 and 5xx responses and transport failures are retried with
/// exponential backoff; any other 4xx is returned at once.
pub struct OpenAiBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    retry_max: u32,
    backoff: Duration,
}

impl OpenAiBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env).map_err(|_| {
                GatewayError::Config(format!("environment variable {} is not set", config.api_key_env))
            })?)
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(OpenAiBackend {
            agent,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
            retry_max: config.retry_max,
            backoff: Duration::from_millis(config.backoff_ms),
        })
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Attempt {
        let mut call = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = match call.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        match status {
            200..=299 => match serde_json::from_str::<ChatResponse>(&text) {
                Ok(parsed) => match parsed.choices.into_iter().next().and_then(|c| c.message.content) {
                    Some(content) => Attempt::Done(Ok(content)),
                    None => Attempt::Done(Err(GatewayError::Response("no choices[0].message.content".into()))),
                },
                Err(e) => Attempt::Done(Err(GatewayError::Response(e.to_string()))),
            },
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}: {text}")),
            _ => Attempt::Done(Err(GatewayError::Request { status, body: text })),
        }
    }
}

enum Attempt {
    Done(Result<String, GatewayError>),
    Retry(String),
}

impl Backend for OpenAiBackend {
    fn id(&self) -> String {
        format!("openai:{}", self.endpoint)
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        let body = ChatRequest {
            model: &req.model,
            messages: [ChatMessage {
                role: "user",
                content: &req.prompt_text,
            }],
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let mut last = String::new();
        for attempt in 0..=self.retry_max {
            if attempt > 0 {
                let delay = self.backoff.saturating_mul(1 << (attempt - 1).min(10));
                std::thread::sleep(delay);
            }
            match self.attempt(&body) {
                Attempt::Done(result) => return result,
                Attempt::Retry(message) => {
                    warn!(attempt, %message, "completion attempt failed");
                    last = message;
                }
            }
        }
        Err(GatewayError::Transport {
            attempts: self.retry_max + 1,
            message: last,
        })
    }
}
