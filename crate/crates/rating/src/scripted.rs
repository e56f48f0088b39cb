//! Scripted raters that drive the HTTP API like a browser client would.

use std::collections::BTreeMap;
use std::sync::Arc;

use dvaegan_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::server::{start, AppState, ChoiceRequest, SessionInfo, TrialPayload};
use crate::session::{HumComResult, RatingSession, Side};

pub trait Policy: Send {
    fn choose(&mut self, trial: &TrialPayload) -> Side;
}

/// Knows the ground truth and always picks the true stimulus.
pub struct Oracle {
    truth: BTreeMap<usize, Side>,
}

impl Oracle {
    pub fn from_session(s: &RatingSession) -> Self {
        Self { truth: s.trials.iter().map(|t| (t.id, t.correct)).collect() }
    }
}

impl Policy for Oracle {
    fn choose(&mut self, trial: &TrialPayload) -> Side {
        self.truth[&trial.trial]
    }
}

pub struct UniformRandom {
    rng: ChaCha8Rng,
}

impl UniformRandom {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for UniformRandom {
    fn choose(&mut self, _: &TrialPayload) -> Side {
        if self.rng.random::<bool>() {
            Side::A
        } else {
            Side::B
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaterRun {
    pub rater: String,
    pub choices: Vec<(usize, Side)>,
}

fn http(e: reqwest::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

async fn expect_ok(resp: reqwest::Response) -> Result<reqwest::Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.text().await.unwrap_or_default();
    Err(Error::Contract(format!("HTTP {status}: {body}")))
}

/// Registers (or resumes `rater`) and answers every open trial.
pub async fn run_rater(base: &str, rater: Option<&str>, policy: &mut dyn Policy) -> Result<RaterRun> {
    let client = reqwest::Client::new();
    let mut req = client.get(format!("{base}/api/session"));
    if let Some(r) = rater {
        req = req.query(&[("rater", r)]);
    }
    let info: SessionInfo = expect_ok(req.send().await.map_err(http)?).await?.json().await.map_err(http)?;
    let mut run = RaterRun { rater: info.rater.clone(), choices: Vec::new() };
    for i in 0..info.n_trials {
        let resp = client.get(format!("{base}/api/trial/{i}")).query(&[("rater", &info.rater)]).send().await.map_err(http)?;
        let t: TrialPayload = expect_ok(resp).await?.json().await.map_err(http)?;
        if info.completed.contains(&t.trial) {
            continue;
        }
        let side = policy.choose(&t);
        let body = ChoiceRequest { trial: t.trial, side, rater: info.rater.clone() };
        expect_ok(client.post(format!("{base}/api/choice")).json(&body).send().await.map_err(http)?).await?;
        run.choices.push((t.trial, side));
    }
    Ok(run)
}

pub async fn fetch_result(base: &str) -> Result<HumComResult> {
    let resp = reqwest::get(format!("{base}/api/result")).await.map_err(http)?;
    expect_ok(resp).await?.json().await.map_err(http)
}

/// Serves `session` on a loopback port without persistence, lets `raters`
/// scripted raters with `policy` ("oracle" or "random") finish it, and
/// returns the service's result.
pub fn simulate(session: RatingSession, policy: &str, raters: usize, seed: u64) -> Result<HumComResult> {
    if raters == 0 {
        return Err(Error::Config("at least one simulated rater is needed".into()));
    }
    let mut policies: Vec<Box<dyn Policy>> = Vec::new();
    for k in 0..raters {
        policies.push(match policy {
            "oracle" => Box::new(Oracle::from_session(&session)),
            "random" => Box::new(UniformRandom::new(seed.wrapping_add(k as u64))),
            other => return Err(Error::Config(format!("unknown rater policy {other:?}; expected oracle or random"))),
        });
    }
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async move {
        let state = Arc::new(AppState::new(session, None, false)?);
        let svc = start(state, ([127, 0, 0, 1], 0).into(), None).await?;
        let base = svc.base_url();
        for p in policies.iter_mut() {
            run_rater(&base, None, p.as_mut()).await?;
        }
        let r = fetch_result(&base).await;
        svc.stop().await?;
        r
    })
}
