use std::sync::Arc;

use base64::Engine;
use dvaegan_core::data::gen_stimuli;
use dvaegan_core::model::StimulusImage;
use dvaegan_rating::events::log_path;
use dvaegan_rating::scripted::{fetch_result, run_rater, simulate, Oracle, UniformRandom};
use dvaegan_rating::server::{save_session, start, AppState, TrialPayload};
use dvaegan_rating::{build_session, score, RatingSession, Side};
use serde_json::Value;
use statrs::distribution::{Beta, ContinuousCDF};

fn session(n: usize, seed: u64) -> RatingSession {
    let stimuli = gen_stimuli("geometric-shapes", n, seed, 8, 1).unwrap();
    let recons: Vec<StimulusImage> = stimuli
        .iter()
        .map(|s| StimulusImage::new(format!("recon-{}", s.id), s.shape, s.pixels.iter().map(|p| 0.8 * p + 0.1).collect()).unwrap())
        .collect();
    build_session(&recons, &stimuli, &vec!["geometric-shapes"; n], seed).unwrap()
}

async fn serve(s: RatingSession, force: bool) -> dvaegan_rating::server::RunningService {
    start(Arc::new(AppState::new(s, None, force).unwrap()), ([127, 0, 0, 1], 0).into(), None).await.unwrap()
}

/// Exact two-sided Clopper-Pearson interval.
fn clopper_pearson(k: u64, n: u64, level: f64) -> (f64, f64) {
    let a = (1.0 - level) / 2.0;
    let lo = if k == 0 { 0.0 } else { Beta::new(k as f64, (n - k + 1) as f64).unwrap().inverse_cdf(a) };
    let hi = if k == n { 1.0 } else { Beta::new((k + 1) as f64, (n - k) as f64).unwrap().inverse_cdf(1.0 - a) };
    (lo, hi)
}

#[test]
fn clopper_pearson_matches_tabulated_values() {
    // 5 of 10 at 95%: (0.187086, 0.812914)
    let (lo, hi) = clopper_pearson(5, 10, 0.95);
    assert!((lo - 0.187086).abs() < 1e-6 && (hi - 0.812914).abs() < 1e-6, "{lo} {hi}");
}

#[tokio::test]
async fn oracle_rater_scores_one_and_matches_direct_scoring() {
    let s = session(30, 1);
    let svc = serve(s.clone(), false).await;
    let run = run_rater(&svc.base_url(), None, &mut Oracle::from_session(&s)).await.unwrap();
    assert_eq!(run.choices.len(), 30);
    let r = fetch_result(&svc.base_url()).await.unwrap();
    assert_eq!(r.pooled, 1.0);
    assert_eq!((r.n_raters, r.n_trials, r.n_choices), (1, 30, 30));
    assert_eq!(r, score(&svc.state.snapshot()).unwrap());
    svc.stop().await.unwrap();
}

#[test]
fn uniform_random_rater_is_at_chance() {
    let r = simulate(session(1000, 2), "random", 1, 77).unwrap();
    let k = (r.pooled * 1000.0).round() as u64;
    let (lo, hi) = clopper_pearson(k, 1000, 0.99);
    assert!(lo <= 0.5 && 0.5 <= hi, "{k}/1000 correct, 99% interval ({lo:.4}, {hi:.4})");
}

#[tokio::test]
async fn duplicate_choices_are_rejected_and_the_first_stands() {
    let svc = serve(session(4, 3), false).await;
    let base = svc.base_url();
    let c = reqwest::Client::new();
    let info: Value = c.get(format!("{base}/api/session")).send().await.unwrap().json().await.unwrap();
    let rater = info["rater"].as_str().unwrap().to_string();
    let post = |side: &str| c.post(format!("{base}/api/choice")).json(&serde_json::json!({"trial": 2, "side": side, "rater": rater})).send();
    assert_eq!(post("A").await.unwrap().status(), 200);
    assert_eq!(post("B").await.unwrap().status(), 409);
    let snap = svc.state.snapshot();
    assert_eq!(snap.choices.len(), 1);
    assert_eq!(snap.choices[0].side, Side::A);
    svc.stop().await.unwrap();
}

#[tokio::test]
async fn unknown_trials_and_raters_are_rejected() {
    let svc = serve(session(4, 3), false).await;
    let base = svc.base_url();
    let c = reqwest::Client::new();
    assert_eq!(c.get(format!("{base}/api/trial/4")).send().await.unwrap().status(), 404);
    let info: Value = c.get(format!("{base}/api/session")).send().await.unwrap().json().await.unwrap();
    let body = serde_json::json!({"trial": 9, "side": "A", "rater": info["rater"]});
    assert_eq!(c.post(format!("{base}/api/choice")).json(&body).send().await.unwrap().status(), 404);
    let body = serde_json::json!({"trial": 0, "side": "A", "rater": "nobody"});
    assert_eq!(c.post(format!("{base}/api/choice")).json(&body).send().await.unwrap().status(), 400);
    let body = serde_json::json!({"trial": 0, "side": "left", "rater": info["rater"]});
    assert!(c.post(format!("{base}/api/choice")).json(&body).send().await.unwrap().status().is_client_error());
    svc.stop().await.unwrap();
}

#[tokio::test]
async fn result_waits_for_every_rater_unless_forced() {
    let s = session(6, 4);
    let svc = serve(s.clone(), false).await;
    let base = svc.base_url();
    run_rater(&base, None, &mut Oracle::from_session(&s)).await.unwrap();
    reqwest::get(format!("{base}/api/session")).await.unwrap();
    assert_eq!(reqwest::get(format!("{base}/api/result")).await.unwrap().status(), 409);
    svc.stop().await.unwrap();

    let forced = serve(s.clone(), true).await;
    assert_eq!(reqwest::get(format!("{}/api/result", forced.base_url())).await.unwrap().status(), 409, "no choices yet");
    let c = reqwest::Client::new();
    let info: Value = c.get(format!("{}/api/session", forced.base_url())).send().await.unwrap().json().await.unwrap();
    let body = serde_json::json!({"trial": 0, "side": s.trials[0].correct, "rater": info["rater"]});
    c.post(format!("{}/api/choice", forced.base_url())).json(&body).send().await.unwrap();
    let r = fetch_result(&forced.base_url()).await.unwrap();
    assert_eq!((r.n_choices, r.pooled), (1, 1.0));
    forced.stop().await.unwrap();
}

#[tokio::test]
async fn trial_payloads_never_carry_the_correct_side() {
    let s = session(12, 5);
    let svc = serve(s.clone(), false).await;
    let base = svc.base_url();
    for i in 0..12 {
        let raw = reqwest::get(format!("{base}/api/trial/{i}")).await.unwrap().text().await.unwrap();
        let v: Value = serde_json::from_str(&raw).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort();
        assert_eq!(keys, ["candidates", "index", "n_trials", "reconstruction", "trial"]);
        let mut ck: Vec<&str> = v["candidates"].as_object().unwrap().keys().map(|k| k.as_str()).collect();
        ck.sort();
        assert_eq!(ck, ["A", "B"]);
        assert!(!raw.to_lowercase().contains("correct"));
        // the typed payload rejects any extra field
        let t: TrialPayload = serde_json::from_value(v).unwrap();
        assert_eq!(t.trial, i);
    }
    let session_raw = reqwest::get(format!("{base}/api/session")).await.unwrap().text().await.unwrap();
    assert!(!session_raw.contains("correct"));
    svc.stop().await.unwrap();
}

fn decode_png(uri: &str) -> Vec<u8> {
    let b64 = uri.strip_prefix("data:image/png;base64,").unwrap();
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    image::load_from_memory(&bytes).unwrap().to_luma8().into_raw()
}

#[tokio::test]
async fn served_images_are_the_session_images() {
    let s = session(5, 6);
    let svc = serve(s.clone(), false).await;
    let to_u8 = |img: &StimulusImage| img.pixels.iter().map(|p| (p * 255.0).round() as u8).collect::<Vec<u8>>();
    for t in &s.trials {
        let p: TrialPayload = reqwest::get(format!("{}/api/trial/{}", svc.base_url(), t.id)).await.unwrap().json().await.unwrap();
        assert_eq!(decode_png(&p.reconstruction), to_u8(&t.reconstruction));
        assert_eq!(decode_png(&p.candidates.a), to_u8(&t.a));
        assert_eq!(decode_png(&p.candidates.b), to_u8(&t.b));
    }
    svc.stop().await.unwrap();
}

#[tokio::test]
async fn restarted_service_resumes_from_the_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("session.json");
    let s = session(10, 7);
    save_session(&file, &s).unwrap();

    let first = start(Arc::new(AppState::from_file(&file, false).unwrap()), ([127, 0, 0, 1], 0).into(), None).await.unwrap();
    let c = reqwest::Client::new();
    let info: Value = c.get(format!("{}/api/session", first.base_url())).send().await.unwrap().json().await.unwrap();
    let rater = info["rater"].as_str().unwrap().to_string();
    for t in 0..4 {
        let body = serde_json::json!({"trial": t, "side": s.trials[t].correct, "rater": rater});
        assert_eq!(c.post(format!("{}/api/choice", first.base_url())).json(&body).send().await.unwrap().status(), 200);
    }
    first.stop().await.unwrap();
    assert_eq!(std::fs::read_to_string(log_path(&file)).unwrap().lines().count(), 5);

    let second = start(Arc::new(AppState::from_file(&file, false).unwrap()), ([127, 0, 0, 1], 0).into(), None).await.unwrap();
    let info: Value = c.get(format!("{}/api/session", second.base_url())).query(&[("rater", &rater)]).send().await.unwrap().json().await.unwrap();
    assert_eq!(info["completed"], serde_json::json!([0, 1, 2, 3]));
    let dup = serde_json::json!({"trial": 0, "side": s.trials[0].correct.other(), "rater": rater});
    assert_eq!(c.post(format!("{}/api/choice", second.base_url())).json(&dup).send().await.unwrap().status(), 409);
    let run = run_rater(&second.base_url(), Some(&rater), &mut UniformRandom::new(1)).await.unwrap();
    assert_eq!(run.choices.len(), 6);
    let r = fetch_result(&second.base_url()).await.unwrap();
    assert_eq!(r.n_choices, 10);
    assert_eq!(r, score(&second.state.snapshot()).unwrap());
    second.stop().await.unwrap();
}

#[tokio::test]
async fn static_bundle_is_served_next_to_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>rate</html>").unwrap();
    let state = Arc::new(AppState::new(session(3, 8), None, false).unwrap());
    let svc = start(state, ([127, 0, 0, 1], 0).into(), Some(dir.path())).await.unwrap();
    let body = reqwest::get(format!("{}/index.html", svc.base_url())).await.unwrap().text().await.unwrap();
    assert_eq!(body, "<html>rate</html>");
    assert_eq!(reqwest::get(format!("{}/api/trial/0", svc.base_url())).await.unwrap().status(), 200);
    svc.stop().await.unwrap();
}

#[test]
fn simulate_rejects_unknown_policies() {
    assert!(simulate(session(3, 9), "telepathic", 1, 0).is_err());
    assert_eq!(simulate(session(3, 9), "oracle", 3, 0).unwrap().pooled, 1.0);
}
