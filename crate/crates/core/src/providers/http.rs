use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, Capability, CompletionOptions, ProviderError, ScoreResult};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpModels {
    pub embedding: String,
    pub completion: String,
    pub scoring: String,
}

/// JSON-over-HTTP backend.
///
/// Endpoints, relative to `base_url`:
///
/// | path          | request                                            | response                          |
/// |---------------|----------------------------------------------------|-----------------------------------|
/// | `/embeddings` | `{model, input: [..]}`                             | `{data: [{embedding: [..]}, ..]}` |
/// | `/completions`| `{model, prompt, temperature, max_tokens}`         | `{text}`                          |
/// | `/score`      | `{model, prompt, echo_target, logprobs: true}`     | `{token_logprobs: [..]}`          |
///
/// OpenAI-style completion bodies (`choices[0].text` or
/// `choices[0].message.content`) are accepted as well.
pub struct HttpBackend {
    agent: ureq::Agent,
    base_url: String,
    models: HttpModels,
    api_key: Option<String>,
}

impl HttpBackend {
    /// `api_key` comes from the environment, never from config files.
    pub fn new(base_url: &str, models: HttpModels, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            models,
            api_key,
        }
    }

    /// Reads the key from the environment variable `env_name`, if set.
    pub fn api_key_from_env(env_name: &str) -> Option<String> {
        std::env::var(env_name).ok().filter(|k| !k.trim().is_empty())
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let url = format!("{}{}", self.base_url, path);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| ProviderError::Transport {
            message: format!("POST {url}: {e}"),
            retryable: true,
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport {
                message: format!("POST {url}: reading body: {e}"),
                retryable: true,
            })?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Transport {
                message: format!("POST {url}: HTTP {status}: {}", truncate(&text, 300)),
                retryable: status == 408 || status == 429 || status >= 500,
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| ProviderError::InvalidResponse(format!("POST {url}: {e}")))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn refusal(v: &Value) -> Option<String> {
    let direct = v.get("refusal");
    let nested = v.pointer("/choices/0/message/refusal");
    direct
        .or(nested)
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

impl Backend for HttpBackend {
    fn model_tag(&self, capability: Capability) -> String {
        match capability {
            Capability::Embedding => self.models.embedding.clone(),
            Capability::Completion => self.models.completion.clone(),
            Capability::Scoring => self.models.scoring.clone(),
        }
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let body = json!({ "model": self.models.embedding, "input": texts });
        let resp = self.post("/embeddings", &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::InvalidResponse("missing `data` array".into()))?;
        data.iter()
            .map(|item| {
                item.get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ProviderError::InvalidResponse("missing `embedding`".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .ok_or_else(|| ProviderError::InvalidResponse("non-numeric embedding".into()))
                    })
                    .collect()
            })
            .collect()
    }

    fn complete(&self, prompt: &str, options: &CompletionOptions) -> Result<String, ProviderError> {
        let body = json!({
            "model": self.models.completion,
            "prompt": prompt,
            "temperature": options.temperature,
            "max_tokens": options.max_tokens,
        });
        let resp = self.post("/completions", &body)?;
        if let Some(reason) = refusal(&resp) {
            return Err(ProviderError::Refusal(reason));
        }
        resp.get("text")
            .or_else(|| resp.pointer("/choices/0/text"))
            .or_else(|| resp.pointer("/choices/0/message/content"))
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::InvalidResponse("no completion text".into()))
    }

    fn score(&self, prefix: &str, target: &str) -> Result<ScoreResult, ProviderError> {
        let body = json!({
            "model": self.models.scoring,
            "prompt": prefix,
            "echo_target": target,
            "logprobs": true,
        });
        let resp = self.post("/score", &body)?;
        let logprobs = resp
            .get("token_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::CapabilityUnsupported(Capability::Scoring))?;
        let values = logprobs
            .iter()
            .map(|v| {
                v.as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| ProviderError::InvalidResponse("bad token logprob".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if values.is_empty() {
            return Err(ProviderError::InvalidResponse("empty token_logprobs".into()));
        }
        Ok(ScoreResult {
            total_logprob: values.iter().sum(),
            token_count: values.len(),
            mock: false,
        })
    }
}
