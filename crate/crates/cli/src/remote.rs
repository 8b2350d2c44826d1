//! Blocking HTTP client for a running `avq serve`.

use avq_core::domain::{Stage, WorkerId};
use avq_core::error::{IoError, StudyError};
use avq_core::simulator::StudyBackend;
use avq_core::study::{
    Denial, ExportBundle, FilterSummary, Rejection, RequestOutcome, SubmitOutcome, SubmitReceipt, SubmitRequest,
    TaskAssignment, TaskRequest,
};
use avq_server::{AuditResponse, FilterRequest, QualifyResponse};
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;

pub struct HttpBackend {
    base: String,
    client: Client,
    admin_token: Option<String>,
}

fn transport(e: impl std::fmt::Display) -> StudyError {
    StudyError::Io(IoError::Io(std::io::Error::other(e.to_string())))
}

fn decode<T: DeserializeOwned>(resp: Response) -> Result<T, StudyError> {
    resp.json().map_err(transport)
}

fn unexpected(resp: Response) -> StudyError {
    let status = resp.status();
    let body = resp.text().unwrap_or_default();
    transport(format!("server answered {status}: {body}"))
}

impl HttpBackend {
    pub fn new(base: &str, admin_token: Option<String>) -> Self {
        HttpBackend {
            base: base.trim_end_matches('/').to_owned(),
            client: Client::new(),
            admin_token,
        }
    }

    fn admin(&self, req: RequestBuilder) -> Result<Response, StudyError> {
        let req = match &self.admin_token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send().map_err(transport)?;
        if resp.status().is_success() {
            Ok(resp)
        } else {
            Err(unexpected(resp))
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl StudyBackend for HttpBackend {
    fn request_task(&self, req: &TaskRequest) -> Result<RequestOutcome, StudyError> {
        let resp = self.client.post(self.url("/tasks/request")).json(req).send().map_err(transport)?;
        match resp.status() {
            StatusCode::OK => Ok(RequestOutcome::Assigned(decode::<TaskAssignment>(resp)?)),
            StatusCode::FORBIDDEN => Ok(RequestOutcome::Denied(decode::<Denial>(resp)?)),
            _ => Err(unexpected(resp)),
        }
    }

    fn submit(&self, req: SubmitRequest) -> Result<SubmitOutcome, StudyError> {
        let resp = self.client.post(self.url("/tasks/submit")).json(&req).send().map_err(transport)?;
        match resp.status() {
            StatusCode::OK => Ok(SubmitOutcome::Accepted(decode::<SubmitReceipt>(resp)?)),
            StatusCode::NOT_FOUND | StatusCode::UNPROCESSABLE_ENTITY => {
                Ok(SubmitOutcome::Rejected(decode::<Rejection>(resp)?))
            }
            _ => Err(unexpected(resp)),
        }
    }

    fn run_filter(&self, stage: Stage) -> Result<FilterSummary, StudyError> {
        decode(self.admin(self.client.post(self.url("/admin/filter")).json(&FilterRequest { stage }))?)
    }

    fn qualify(&self) -> Result<Vec<WorkerId>, StudyError> {
        let r: QualifyResponse = decode(self.admin(self.client.post(self.url("/admin/qualify")))?)?;
        Ok(r.granted)
    }

    fn export(&self) -> Result<ExportBundle, StudyError> {
        decode(self.admin(self.client.get(self.url("/admin/export")))?)
    }

    fn audit(&self) -> Result<Option<Vec<String>>, StudyError> {
        let r: AuditResponse = decode(self.admin(self.client.get(self.url("/admin/audit")))?)?;
        Ok(Some(r.unqualified_formal))
    }
}
