//! Client for models served over HTTP.
//!
//! Protocol (JSON bodies, images as base64 PNG):
//!
//! * `GET  /v1/info`  → `{"id", "input": {"w","h","c"}, "classes", "capabilities": [..]}`
//! * `POST /v1/score` `{"images": [..], "class": n}` → `{"scores": [..]}`
//! * `POST /v1/embed` `{"images": [..]}` → `{"features": [[..], ..]}`
//!
//! 4xx answers become [`Error::Input`]; connection failures and 5xx answers
//! are retried and finally surface as [`Error::Transport`].

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Capabilities, ConfidenceOracle, Embedding, InputShape, OracleInfo, OutputKind};
use crate::error::{Error, Result};
use crate::image::FaceImage;

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub timeout: Duration,
    /// Extra attempts after the first failure on a retryable error.
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Deserialize)]
struct InfoResponse {
    id: String,
    input: InputShape,
    classes: usize,
    #[serde(default)]
    capabilities: Vec<String>,
    #[serde(default)]
    output: Option<OutputKind>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    images: &'a [String],
    class: usize,
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    images: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    features: Vec<Vec<f64>>,
}

/// Remote oracle. The underlying agent pools connections and is shared by
/// concurrent callers.
pub struct HttpOracle {
    base: String,
    agent: ureq::Agent,
    config: HttpConfig,
    info: OracleInfo,
}

impl HttpOracle {
    /// Fetches `/v1/info` from `base_url` and builds the client.
    pub fn connect(base_url: &str, config: HttpConfig) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let base = base_url.trim_end_matches('/').to_string();
        let mut client = Self {
            base,
            agent,
            config,
            info: OracleInfo {
                id: String::new(),
                input: None,
                classes: None,
                capabilities: Capabilities::default(),
                output: OutputKind::Unknown,
            },
        };
        let info: InfoResponse = client.request(|agent, url| agent.get(url).call(), "/v1/info")?;
        client.info = OracleInfo {
            id: info.id,
            input: Some(info.input),
            classes: Some(info.classes),
            capabilities: Capabilities {
                scores: info.capabilities.iter().any(|c| c == "scores"),
                embeddings: info.capabilities.iter().any(|c| c == "embeddings"),
                // the protocol has no randomization endpoint
                randomizable: false,
            },
            output: info.output.unwrap_or(OutputKind::Unknown),
        };
        Ok(client)
    }

    fn encode(images: &[FaceImage]) -> Result<Vec<String>> {
        images.iter().map(|img| Ok(BASE64.encode(img.encode_png()?))).collect()
    }

    fn request<T, F>(&self, send: F, path: &str) -> Result<T>
    where
        T: DeserializeOwned,
        F: Fn(&ureq::Agent, &str) -> std::result::Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    {
        let url = format!("{}{}", self.base, path);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let failure = match send(&self.agent, &url) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp.body_mut().read_json::<T>().map_err(|e| Error::Transport {
                            msg: format!("{url}: undecodable response: {e}"),
                            attempts,
                            retryable: false,
                        });
                    }
                    let body = resp.body_mut().read_to_string().unwrap_or_default();
                    if (400..500).contains(&status) {
                        return Err(Error::Input(format!("{url}: HTTP {status}: {body}")));
                    }
                    format!("{url}: HTTP {status}: {body}")
                }
                Err(e) => format!("{url}: {e}"),
            };
            if attempts > self.config.retries {
                return Err(Error::Transport {
                    msg: failure,
                    attempts,
                    retryable: true,
                });
            }
            std::thread::sleep(self.config.backoff * attempts);
        }
    }
}

impl ConfidenceOracle for HttpOracle {
    fn info(&self) -> &OracleInfo {
        &self.info
    }

    fn score(&self, images: &[FaceImage], class: usize) -> Result<Vec<f64>> {
        let encoded = Self::encode(images)?;
        let body = ScoreRequest {
            images: &encoded,
            class,
        };
        let resp: ScoreResponse = self.request(|agent, url| agent.post(url).send_json(&body), "/v1/score")?;
        Ok(resp.scores)
    }

    fn embed(&self, images: &[FaceImage]) -> Result<Vec<Embedding>> {
        if !self.info.capabilities.embeddings {
            return Err(Error::Unsupported(format!(
                "{} does not expose embeddings",
                self.info.id
            )));
        }
        let encoded = Self::encode(images)?;
        let body = EmbedRequest { images: &encoded };
        let resp: EmbedResponse = self.request(|agent, url| agent.post(url).send_json(&body), "/v1/embed")?;
        resp.features.into_iter().map(Embedding::new).collect()
    }
}
