use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use sketchcomm::data::{self, Dataset};
use sketchcomm::encoders::{EncoderKind, EncoderSpec};
use sketchcomm::game::{DataConfig, EncoderConfig, EvalConfig, GameConfig, Trainer};
use sketchcomm_service::store::{Session, SessionSummary};
use sketchcomm_service::{router, AppState, CheckpointSource, Store, HUMAN_K, SESSION_GAMES};

const CONFIG: &str = "vit-game";

fn eval_set() -> Dataset {
    data::synthetic_shapes(60, 32, 11)
}

fn write_checkpoint(dir: &Path) {
    let out = tempfile::tempdir().unwrap();
    let cfg = GameConfig {
        seed: 7,
        encoder: EncoderConfig {
            kind: EncoderKind::VitB32,
            weights: None,
            random_seed: Some(3),
            spec: Some(EncoderSpec::tiny_vit(32)),
        },
        data: DataConfig::Synthetic {
            train: 20,
            eval: 60,
            side: 32,
            seed: 11,
        },
        k: 9,
        batch_size: 4,
        steps: 0,
        lr: Some(1e-3),
        loss: Default::default(),
        aug: Default::default(),
        raster: None,
        sender_hidden: Some([16, 16]),
        scoring: Default::default(),
        eval: EvalConfig::default(),
        checkpoint_every: 0,
        output_dir: out.path().to_path_buf(),
    };
    let t = Trainer::new(cfg).unwrap();
    t.checkpoint().unwrap().save(&dir.join(format!("{CONFIG}.ckpt"))).unwrap();
}

struct Fixture {
    app: Router,
    store: std::sync::Arc<Store>,
    store_dir: tempfile::TempDir,
    _ckpt_dir: tempfile::TempDir,
}

fn fixture() -> Fixture {
    let ckpt_dir = tempfile::tempdir().unwrap();
    write_checkpoint(ckpt_dir.path());
    let store_dir = tempfile::tempdir().unwrap();
    let state = AppState::new(
        Store::open(store_dir.path()).unwrap(),
        CheckpointSource::new(ckpt_dir.path(), eval_set()),
    );
    Fixture {
        store: state.store.clone(),
        app: router(state),
        store_dir,
        _ckpt_dir: ckpt_dir,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Router, seed: u64) -> String {
    let (status, body) = call_json(
        app,
        "POST",
        "/sessions",
        Some(json!({"config_id": CONFIG, "participant": "p1", "seed": seed})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

async fn answer(app: &Router, id: &str, index: usize, photo_ref: &str) -> (StatusCode, Value) {
    call_json(
        app,
        "POST",
        &format!("/sessions/{id}/games/{index}/answer"),
        Some(json!({"photo_ref": photo_ref})),
    )
    .await
}

fn refs(game: &Value) -> Vec<String> {
    game["photos"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["photo_ref"].as_str().unwrap().to_string())
        .collect()
}

fn stored(store: &Store, id: &str) -> Session {
    store.session(id).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_hold_thirty_seeded_games_of_ten_photos() {
    let f = fixture();
    let a = create(&f.app, 5).await;
    let b = create(&f.app, 5).await;
    let c = create(&f.app, 6).await;
    let (sa, sb, sc) = (stored(&f.store, &a), stored(&f.store, &b), stored(&f.store, &c));
    assert_ne!(a, b);
    assert_eq!(sa.games.len(), SESSION_GAMES);
    assert_eq!(sa.games, sb.games);
    assert_ne!(sa.games, sc.games);
    for g in &sa.games {
        assert_eq!(g.photos.len(), HUMAN_K + 1);
        assert_eq!(g.photos.iter().filter(|p| p.image_id == g.target_id).count(), 1);
    }
    let targets: std::collections::HashSet<u32> = sa.games.iter().map(|g| g.target_id).collect();
    assert_eq!(targets.len(), SESSION_GAMES);

    let (status, body) = call_json(&f.app, "POST", "/sessions", Some(json!({"config_id": "nope", "participant": "p"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["kind"], "unknown_config");

    let (status, configs) = call_json(&f.app, "GET", "/configs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(configs, json!([CONFIG]));
}

#[tokio::test(flavor = "multi_thread")]
async fn games_are_served_in_order_with_a_stable_display_order() {
    let f = fixture();
    let id = create(&f.app, 1).await;
    let (status, g0) = call_json(&f.app, "GET", &format!("/sessions/{id}/games/0"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(g0["total"], SESSION_GAMES);
    assert_eq!(refs(&g0).len(), 10);
    let (_, again) = call_json(&f.app, "GET", &format!("/sessions/{id}/games/0"), None).await;
    assert_eq!(g0, again);

    let (status, body) = call_json(&f.app, "GET", &format!("/sessions/{id}/games/1"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["kind"], "out_of_order");
    let (status, _) = call_json(&f.app, "GET", &format!("/sessions/{id}/games/30"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&f.app, "GET", "/sessions/missing/games/0", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, png) = call(&f.app, "GET", g0["sketch_url"].as_str().unwrap(), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    let (status, _) = call(&f.app, "GET", "/images/../../etc/passwd.png", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.app, "GET", &format!("/images/{}.png", "a".repeat(64)), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // Display positions of the target are not fixed across games.
    let s = stored(&f.store, &id);
    let positions: std::collections::HashSet<usize> = s
        .games
        .iter()
        .map(|g| g.photos.iter().position(|p| p.image_id == g.target_id).unwrap())
        .collect();
    assert!(positions.len() > 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn answers_are_validated_and_summaries_wait_for_completion() {
    let f = fixture();
    let id = create(&f.app, 2).await;
    let s = stored(&f.store, &id);
    let (_, g0) = call_json(&f.app, "GET", &format!("/sessions/{id}/games/0"), None).await;
    let r0 = refs(&g0);

    let (status, body) = answer(&f.app, &id, 1, &r0[0]).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    let foreign = s.games.iter().flat_map(|g| &g.photos).find(|p| !r0.contains(&p.photo_ref)).unwrap();
    let (status, body) = answer(&f.app, &id, 0, &foreign.photo_ref).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["kind"], "foreign_photo");

    let (status, ack) = answer(&f.app, &id, 0, &r0[3]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["cursor"], 1);
    assert_eq!(ack["duplicate"], false);
    let (status, body) = answer(&f.app, &id, 0, &r0[4]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["kind"], "already_answered");
    let (status, dup) = answer(&f.app, &id, 0, &r0[3]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(dup["duplicate"], true);
    assert_eq!(f.store.answers(&id).unwrap().len(), 1);

    let (status, body) = call_json(&f.app, "GET", &format!("/sessions/{id}/summary"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["kind"], "incomplete");
    let (_, st) = call_json(&f.app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(st["cursor"], 1);
    assert_eq!(st["complete"], false);
}

#[tokio::test(flavor = "multi_thread")]
async fn nothing_served_before_completion_identifies_the_target() {
    let f = fixture();
    let id = create(&f.app, 3).await;
    let s = stored(&f.store, &id);
    let mut payloads = Vec::new();
    for i in 0..SESSION_GAMES {
        let (_, bytes) = call(&f.app, "GET", &format!("/sessions/{id}/games/{i}"), None).await;
        let g: Value = serde_json::from_slice(&bytes).unwrap();
        payloads.push(String::from_utf8(bytes).unwrap());
        let (_, ack) = call(&f.app, "POST", &format!("/sessions/{id}/games/{i}/answer"), Some(json!({"photo_ref": refs(&g)[0]}))).await;
        payloads.push(String::from_utf8(ack).unwrap());
    }
    for p in &payloads {
        for key in ["target", "image_id", "class", "correct", "label"] {
            assert!(!p.contains(key), "{key} leaked in {p}");
        }
    }
    // The served order is the stored order, so the served position carries no
    // more information than the seeded shuffle.
    let (_, g0) = call_json(&f.app, "GET", &format!("/sessions/{id}/games/0"), None).await;
    assert_eq!(refs(&g0), s.games[0].photos.iter().map(|p| p.photo_ref.clone()).collect::<Vec<_>>());
}

#[tokio::test(flavor = "multi_thread")]
async fn summary_counts_instance_and_class_hits() {
    let f = fixture();
    let id = create(&f.app, 4).await;
    let s = stored(&f.store, &id);
    for (i, g) in s.games.iter().enumerate() {
        let pick = if i % 3 == 0 {
            g.photos.iter().find(|p| p.image_id == g.target_id).unwrap()
        } else {
            g.photos.iter().find(|p| p.image_id != g.target_id).unwrap()
        };
        let (status, _) = answer(&f.app, &id, i, &pick.photo_ref).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, body) = call_json(&f.app, "GET", &format!("/sessions/{id}/summary"), None).await;
    assert_eq!(status, StatusCode::OK);
    let summary: SessionSummary = serde_json::from_value(body).unwrap();
    assert_eq!(summary.correct, 10);
    assert_eq!(summary.comm_rate, 10.0 / 30.0);
    assert!(summary.class_comm_rate >= summary.comm_rate);
    assert_eq!(summary.log.len(), 30);
    assert_eq!(summary, f.store.replay_summary(&id).unwrap());

    let (_, agg) = call_json(&f.app, "GET", &format!("/configs/{CONFIG}/aggregate"), None).await;
    assert_eq!(agg["participants"], 1);
    assert_eq!(agg["mean_comm_rate"], 10.0 / 30.0);
    assert_eq!(agg["std_comm_rate"], 0.0);
}

#[tokio::test(flavor = "multi_thread")]
async fn a_crash_between_persist_and_ack_loses_nothing() {
    let f = fixture();
    let id = create(&f.app, 9).await;
    let s = stored(&f.store, &id);
    let mut chosen = Vec::new();
    for (i, g) in s.games.iter().enumerate() {
        let pick = g.photos[i % g.photos.len()].photo_ref.clone();
        if i % 7 == 3 {
            f.store.inject_crash_after_persist();
            let (status, _) = answer(&f.app, &id, i, &pick).await;
            assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
            // The client never saw an ack and retries.
            let (status, ack) = answer(&f.app, &id, i, &pick).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(ack["duplicate"], true);
            assert_eq!(ack["cursor"], i + 1);
        } else {
            let (status, _) = answer(&f.app, &id, i, &pick).await;
            assert_eq!(status, StatusCode::OK);
        }
        chosen.push(pick);
    }
    let answers = f.store.answers(&id).unwrap();
    assert_eq!(answers.iter().map(|a| a.photo_ref.clone()).collect::<Vec<_>>(), chosen);

    let (_, body) = call_json(&f.app, "GET", &format!("/sessions/{id}/summary"), None).await;
    let served: SessionSummary = serde_json::from_value(body).unwrap();

    // A fresh process over the same directory, with the compacted summary gone,
    // rebuilds the same summary from the event log.
    let session_dir = f.store_dir.path().join("sessions").join(&id);
    std::fs::remove_file(session_dir.join("summary.json")).unwrap();
    let reopened = Store::open(f.store_dir.path()).unwrap();
    assert_eq!(reopened.summary(&id).unwrap(), served);
    assert_eq!(reopened.replay_summary(&id).unwrap(), served);
}
