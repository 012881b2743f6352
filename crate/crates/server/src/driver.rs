//! Simulator driver that talks to a running service over HTTP.

use std::time::{Duration, Instant};

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use sentinel_core::pipeline::{
    ConfirmRequest, CorrectRequest, JobRecord, JobStatus, MetricsSnapshot, PredictionRecord, RecognizeRequest,
    ReviewOutcome,
};
use sentinel_core::sim::{CorrectResponse, Driver, SimError};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::ErrorBody;

/// Blocking HTTP client implementing [`Driver`]. `wait_job` polls the job
/// resource until it leaves the running state.
#[derive(Debug, Clone)]
pub struct HttpDriver {
    base: String,
    client: Client,
    poll: Duration,
    job_timeout: Duration,
}

fn driver_err(e: impl std::fmt::Display) -> SimError {
    SimError::Driver(e.to_string())
}

impl HttpDriver {
    pub fn new(base_url: &str) -> Result<Self, SimError> {
        let client = Client::builder().timeout(Duration::from_secs(60)).build().map_err(driver_err)?;
        Ok(HttpDriver {
            base: base_url.trim_end_matches('/').to_string(),
            client,
            poll: Duration::from_millis(2),
            job_timeout: Duration::from_secs(300),
        })
    }

    pub fn with_job_timeout(mut self, timeout: Duration) -> Self {
        self.job_timeout = timeout;
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn decode<T: DeserializeOwned>(resp: Response) -> Result<Result<T, (StatusCode, ErrorBody)>, SimError> {
        let status = resp.status();
        let bytes = resp.bytes().map_err(driver_err)?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map(Ok).map_err(driver_err);
        }
        let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| ErrorBody {
            error: String::from_utf8_lossy(&bytes).into_owned(),
            outcomes: None,
        });
        Ok(Err((status, body)))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, SimError> {
        let resp = self.client.get(self.url(path)).send().map_err(driver_err)?;
        Self::decode(resp)?.map_err(|(s, b)| driver_err(format!("GET {path}: {s}: {}", b.error)))
    }

    fn post<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<Result<T, (StatusCode, ErrorBody)>, SimError> {
        let resp = self.client.post(self.url(path)).json(body).send().map_err(driver_err)?;
        Self::decode(resp)
    }

    fn post_ok<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, SimError> {
        self.post(path, body)?.map_err(|(s, b)| driver_err(format!("POST {path}: {s}: {}", b.error)))
    }
}

impl Driver for HttpDriver {
    fn recognize(&mut self, req: &RecognizeRequest) -> Result<PredictionRecord, SimError> {
        self.post_ok("/v1/recognize", req)
    }

    fn confirm(&mut self, id: &str, req: &ConfirmRequest) -> Result<ReviewOutcome, SimError> {
        self.post_ok(&format!("/v1/review/{id}/confirm"), req)
    }

    fn correct(&mut self, id: &str, req: &CorrectRequest) -> Result<CorrectResponse, SimError> {
        let path = format!("/v1/review/{id}/correct");
        match self.post(&path, req)? {
            Ok(outcome) => Ok(CorrectResponse::Reviewed(outcome)),
            Err((StatusCode::UNPROCESSABLE_ENTITY, ErrorBody { outcomes: Some(o), .. })) => {
                Ok(CorrectResponse::Rejected(o))
            }
            Err((s, b)) => Err(driver_err(format!("POST {path}: {s}: {}", b.error))),
        }
    }

    fn wait_job(&mut self, id: &str) -> Result<JobRecord, SimError> {
        let start = Instant::now();
        loop {
            let job: JobRecord = self.get(&format!("/v1/jobs/{id}"))?;
            if job.status != JobStatus::Running {
                return Ok(job);
            }
            if start.elapsed() > self.job_timeout {
                return Err(driver_err(format!("job {id} still running after {:?}", self.job_timeout)));
            }
            std::thread::sleep(self.poll);
        }
    }

    fn metrics(&mut self) -> Result<MetricsSnapshot, SimError> {
        self.get("/v1/metrics")
    }
}
