//! Async client for the mirage service.

use mirage_core::forward::FarFieldData;
use mirage_core::harness::{
    DataRequest, DistanceReport, ErrorBody, ExperimentConfig, LocalizeReport, MirageReport,
    ModeTableReport, ModesReport, NoiseReport, RunRequest,
};
use mirage_core::imaging::ImageGrid;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error payload.
    #[error("{}: {}", .body.error.kind, .body.error.message)]
    Service { status: u16, body: ErrorBody },
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    /// Error payload suitable for printing, whatever the failure.
    pub fn body(&self) -> ErrorBody {
        match self {
            ClientError::Service { body, .. } => body.clone(),
            ClientError::Transport(e) => ErrorBody::new("transport", e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, route: &str, body: &B) -> Result<T, ClientError> {
        let resp = self
            .http
            .post(format!("{}/v1/{route}", self.base))
            .json(body)
            .send()
            .await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or_else(|_| ErrorBody::new("http", format!("{status}: {text}")));
        Err(ClientError::Service {
            status: status.as_u16(),
            body,
        })
    }

    pub async fn health(&self) -> Result<(), ClientError> {
        self.http
            .get(format!("{}/v1/health", self.base))
            .send()
            .await?
            .error_for_status()?;
        Ok(())
    }

    pub async fn modes(&self, config: &ExperimentConfig) -> Result<ModesReport, ClientError> {
        self.post("modes", &run(config)).await
    }

    pub async fn mirage(&self, config: &ExperimentConfig) -> Result<MirageReport, ClientError> {
        self.post("mirage", &run(config)).await
    }

    pub async fn sweep_distance(&self, config: &ExperimentConfig) -> Result<DistanceReport, ClientError> {
        self.post("sweep-distance", &run(config)).await
    }

    pub async fn sweep_noise(&self, config: &ExperimentConfig) -> Result<NoiseReport, ClientError> {
        self.post("sweep-noise", &run(config)).await
    }

    pub async fn mode_table(&self, config: &ExperimentConfig) -> Result<ModeTableReport, ClientError> {
        self.post("mode-table", &run(config)).await
    }

    pub async fn forward(&self, config: &ExperimentConfig) -> Result<FarFieldData, ClientError> {
        self.post("forward", &run(config)).await
    }

    pub async fn image(&self, config: &ExperimentConfig, data: &FarFieldData) -> Result<ImageGrid, ClientError> {
        self.post("image", &with_data(config, data)).await
    }

    pub async fn localize(&self, config: &ExperimentConfig, data: &FarFieldData) -> Result<LocalizeReport, ClientError> {
        self.post("localize", &with_data(config, data)).await
    }
}

fn run(config: &ExperimentConfig) -> RunRequest {
    RunRequest { config: config.clone() }
}

fn with_data(config: &ExperimentConfig, data: &FarFieldData) -> DataRequest {
    DataRequest {
        config: config.clone(),
        data: data.clone(),
    }
}
