use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use cfaudit_core::reader::{assign_reads, AssignMode, ReaderStore, SessionInfo};
use cfaudit_reader_server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Output ids deliberately carry everything a reader must never see.
fn output_id(i: usize) -> String {
    let prompts = ["cardiomegaly", "pleural_effusion", "edema"];
    format!("src-scan{i:03}__prompt-{}__seed{}", prompts[i % 3], 9000 + i)
}

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    sessions: Vec<SessionInfo>,
    ids: Vec<String>,
}

fn fixture(n: usize, readers: usize, admin_token: Option<&str>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<String> = (0..n).map(output_id).collect();
    let mut images = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        let path = dir.path().join(format!("{id}.png"));
        image::GrayImage::from_pixel(4, 4, image::Luma([i as u8])).save(&path).unwrap();
        images.insert(id.clone(), path.to_string_lossy().into_owned());
    }
    let reader_ids: Vec<String> = (1..=readers).map(|r| format!("reader{r}")).collect();
    let assigned = assign_reads(&ids, &reader_ids, n / readers, 3, AssignMode::Disjoint).unwrap();
    let store = ReaderStore::open(&dir.path().join("store")).unwrap();
    let sessions = store.install(&assigned, &images).unwrap();
    let app = router(AppState {
        store: Arc::new(store),
        admin_token: admin_token.map(String::from),
    });
    Fixture {
        _dir: dir,
        app,
        sessions,
        ids,
    }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, ctype)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn assert_blind(body: &[u8], ids: &[String]) {
    let text = String::from_utf8_lossy(body);
    for id in ids {
        assert!(!text.contains(id.as_str()), "payload leaks {id}: {text}");
    }
    for leak in ["src-scan", "prompt", "seed"] {
        assert!(!text.contains(leak), "payload leaks {leak:?}: {text}");
    }
}

#[tokio::test]
async fn ten_scan_session_end_to_end() {
    let f = fixture(10, 1, None);
    let sid = &f.sessions[0].session_id;
    let mut seen = vec![];
    loop {
        let (status, body, _) = call(&f.app, get(&format!("/session/{sid}/next"))).await;
        if status == StatusCode::NO_CONTENT {
            break;
        }
        assert_eq!(status, StatusCode::OK);
        assert_blind(&body, &f.ids);
        let next: Value = serde_json::from_slice(&body).unwrap();
        let display_id = next["display_id"].as_u64().unwrap();
        assert_eq!(next["finding_names"].as_array().unwrap().len(), 8);

        let url = next["image_url"].as_str().unwrap();
        assert_blind(url.as_bytes(), &f.ids);
        let (status, img, ctype) = call(&f.app, get(url)).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(ctype.as_deref(), Some("image/png"));
        assert!(img.starts_with(b"\x89PNG"));

        let (status, body, _) = call(
            &f.app,
            post(
                &format!("/session/{sid}/read"),
                json!({"display_id": display_id, "labels": {"cardiomegaly": 1, "edema": 2}, "notes": ""}),
            ),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        assert_blind(&body, &f.ids);
        let ack: Value = serde_json::from_slice(&body).unwrap();
        seen.push(display_id);
        assert_eq!(ack["progress"]["completed"].as_u64().unwrap() as usize, seen.len());
    }
    seen.sort();
    assert_eq!(seen, (1..=10).collect::<Vec<u64>>());

    let (status, body, _) = call(&f.app, get(&format!("/session/{sid}/progress"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!({"completed": 10, "total": 10}));

    let (status, body, ctype) = call(&f.app, get(&format!("/session/{sid}/export.csv"))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.unwrap().starts_with("text/csv"));
    assert_blind(&body, &f.ids);
    let text = String::from_utf8(body).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("display_id,"));

    // admin export is unblinded and joins reads back to output ids
    let (status, body, _) = call(&f.app, get("/admin/export.csv")).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(f.ids.iter().all(|id| text.contains(id.as_str())));
}

#[tokio::test]
async fn double_submit_conflicts_until_revision() {
    let f = fixture(4, 1, None);
    let sid = &f.sessions[0].session_id;
    let uri = format!("/session/{sid}/read");
    let body = json!({"display_id": 2, "labels": {"mass": 1}});
    assert_eq!(call(&f.app, post(&uri, body.clone())).await.0, StatusCode::OK);
    let (status, err, _) = call(&f.app, post(&uri, body.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_blind(&err, &f.ids);

    let (status, ack, _) = call(&f.app, post(&uri, json!({"display_id": 2, "labels": {"mass": 0}, "revision": true}))).await;
    assert_eq!(status, StatusCode::OK);
    let ack: Value = serde_json::from_slice(&ack).unwrap();
    assert_eq!(ack["revision"], 1);
    assert_eq!(ack["progress"]["completed"], 1);
}

#[tokio::test]
async fn bad_requests_map_to_status_codes() {
    let f = fixture(4, 1, None);
    let sid = &f.sessions[0].session_id;
    let uri = format!("/session/{sid}/read");
    let cases = [
        (json!({"display_id": 1, "labels": {"fracture": 1}}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"display_id": 1, "labels": {"edema": 3}}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"display_id": 99}), StatusCode::NOT_FOUND),
    ];
    for (body, want) in cases {
        let (status, err, _) = call(&f.app, post(&uri, body.clone())).await;
        assert_eq!(status, want, "{body}");
        assert_blind(&err, &f.ids);
    }
    assert_eq!(call(&f.app, get("/session/nope/next")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&f.app, get(&format!("/session/{sid}/image/99"))).await.0, StatusCode::NOT_FOUND);
    // malformed JSON is rejected by the extractor before reaching the store
    let raw = Request::post(&uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from("{"))
        .unwrap();
    assert!(call(&f.app, raw).await.0.is_client_error());
}

#[tokio::test]
async fn sessions_are_isolated() {
    let f = fixture(8, 2, None);
    let (a, b) = (&f.sessions[0].session_id, &f.sessions[1].session_id);
    assert_ne!(a, b);
    let read = json!({"display_id": 1, "labels": {}});
    assert_eq!(call(&f.app, post(&format!("/session/{a}/read"), read.clone())).await.0, StatusCode::OK);
    // display id 1 in the other session is a different scan and still unread
    assert_eq!(call(&f.app, post(&format!("/session/{b}/read"), read)).await.0, StatusCode::OK);
    let (_, body, _) = call(&f.app, get(&format!("/session/{b}/progress"))).await;
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!({"completed": 1, "total": 4}));
}

#[tokio::test]
async fn admin_routes_require_token_when_configured() {
    let f = fixture(4, 1, Some("s3cret"));
    for uri in ["/admin/export.csv", "/admin/adjudication", "/admin/sessions"] {
        assert_eq!(call(&f.app, get(uri)).await.0, StatusCode::UNAUTHORIZED, "{uri}");
        let req = Request::get(uri)
            .header(header::AUTHORIZATION, "Bearer wrong")
            .body(Body::empty())
            .unwrap();
        assert_eq!(call(&f.app, req).await.0, StatusCode::UNAUTHORIZED, "{uri}");
        let req = Request::get(uri)
            .header(header::AUTHORIZATION, "Bearer s3cret")
            .body(Body::empty())
            .unwrap();
        assert_eq!(call(&f.app, req).await.0, StatusCode::OK, "{uri}");
    }
    // reader routes never need it
    let sid = &f.sessions[0].session_id;
    assert_eq!(call(&f.app, get(&format!("/session/{sid}/progress"))).await.0, StatusCode::OK);
}

#[tokio::test]
async fn noted_reads_flow_through_adjudication() {
    let f = fixture(4, 1, None);
    let sid = &f.sessions[0].session_id;
    let uri = format!("/session/{sid}/read");
    call(&f.app, post(&uri, json!({"display_id": 1, "notes": "looks artificial, smudged"}))).await;
    call(&f.app, post(&uri, json!({"display_id": 2, "notes": ""}))).await;

    let (status, body, _) = call(&f.app, get("/admin/adjudication")).await;
    assert_eq!(status, StatusCode::OK);
    let queue: Vec<Value> = serde_json::from_slice(&body).unwrap();
    assert_eq!(queue.len(), 1);
    let item = &queue[0];
    assert_eq!(item["notes"], "looks artificial, smudged");
    let kinds: Vec<&str> = item["highlights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["suggests"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["artificial", "artificial"]);

    let decision = json!({
        "reader_id": item["reader_id"],
        "output_id": item["output_id"],
        "artificial": true,
        "extra_anomaly": false,
    });
    let (status, _, _) = call(&f.app, post("/admin/adjudication", decision.clone())).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (_, body, _) = call(&f.app, get("/admin/adjudication")).await;
    assert_eq!(serde_json::from_slice::<Vec<Value>>(&body).unwrap().len(), 0);

    let (_, body, _) = call(&f.app, get("/admin/export.csv")).await;
    let text = String::from_utf8(body).unwrap();
    let row = text.lines().find(|l| l.contains(item["output_id"].as_str().unwrap())).unwrap();
    assert!(row.ends_with(",1,0"), "{row}");

    let unknown = json!({"reader_id": "reader1", "output_id": "missing", "artificial": false, "extra_anomaly": false});
    assert_eq!(call(&f.app, post("/admin/adjudication", unknown)).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_submissions_all_land() {
    let f = fixture(40, 1, None);
    let sid = f.sessions[0].session_id.clone();
    let mut handles = vec![];
    for d in 1..=40u32 {
        let app = f.app.clone();
        let uri = format!("/session/{sid}/read");
        handles.push(tokio::spawn(async move {
            call(&app, post(&uri, json!({"display_id": d, "labels": {"nodule": 1}}))).await.0
        }));
    }
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::OK);
    }
    let (_, body, _) = call(&f.app, get(&format!("/session/{sid}/progress"))).await;
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!({"completed": 40, "total": 40}));
}
