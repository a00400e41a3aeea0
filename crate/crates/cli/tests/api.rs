use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use osar_cli::server::{router, AppState, RunState, RunStatus, UploadResponse};
use osar_core::image_io::{save_image, Image, ImageFormat, RoiSet};
use osar_core::pipeline::{PipelineConfig, RunRecord};
use osar_core::synthetic::PhantomSpec;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Api {
    app: Router,
    _dir: tempfile::TempDir,
}

impl Api {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let state = AppState::new(dir.path().to_path_buf(), PipelineConfig::desk(), 1);
        Api {
            app: router(state),
            _dir: dir,
        }
    }

    async fn send(&self, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .body(Body::from(body))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (
            status,
            to_bytes(resp.into_body(), usize::MAX)
                .await
                .unwrap()
                .to_vec(),
        )
    }

    async fn json(&self, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
        let bytes = if body.is_null() {
            Vec::new()
        } else {
            body.to_string().into_bytes()
        };
        let (status, out) = self.send(method, uri, bytes).await;
        (status, serde_json::from_slice(&out).unwrap_or(Value::Null))
    }

    async fn upload_phantom(&self) -> UploadResponse {
        let phantom = PhantomSpec::default().build();
        let scaled = Image::from_fn(256, 256, |x, y| phantom.noisy.get(x, y) * 255.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        save_image(&scaled, &path, ImageFormat::Png).unwrap();
        let (status, body) = self
            .send(
                "POST",
                "/api/images?format=png",
                std::fs::read(path).unwrap(),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED);
        serde_json::from_slice(&body).unwrap()
    }
}

fn phantom_rois() -> Value {
    serde_json::to_value(PhantomSpec::default().build().rois).unwrap()
}

fn tiny_overrides() -> Value {
    json!({"pair_count": 300, "augment_per_class": 60, "idsn_max_epochs": 6,
           "max_epochs": 1, "batch_size": 100})
}

#[tokio::test]
async fn upload_preview_and_roi_round_trip() {
    let api = Api::new();
    let img = api.upload_phantom().await;
    assert_eq!((img.width, img.height), (256, 256));

    let (status, png) = api
        .send(
            "GET",
            &format!("/api/images/{}/pixels?scale=2", img.image_id),
            vec![],
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");

    let uri = format!("/api/images/{}/rois", img.image_id);
    let (status, empty) = api.json("GET", &uri, Value::Null).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(empty["rois"], json!([]));

    let (status, _) = api.json("PUT", &uri, phantom_rois()).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (_, back) = api.json("GET", &uri, Value::Null).await;
    let back: RoiSet = serde_json::from_value(back).unwrap();
    assert_eq!(back, PhantomSpec::default().build().rois);
}

#[tokio::test]
async fn validation_and_unknown_ids() {
    let api = Api::new();
    let img = api.upload_phantom().await;
    let uri = format!("/api/images/{}/rois", img.image_id);

    let mut wrong = phantom_rois();
    wrong["patch_size"] = json!(16);
    assert_eq!(
        api.json("PUT", &uri, wrong).await.0,
        StatusCode::BAD_REQUEST
    );
    let outside = json!({"patch_size": 32, "rois": [{"x": 240, "y": 0, "label": "A"}]});
    assert_eq!(
        api.json("PUT", &uri, outside).await.0,
        StatusCode::BAD_REQUEST
    );

    let runs = format!("/api/images/{}/runs", img.image_id);
    assert_eq!(
        api.json("POST", &runs, Value::Null).await.0,
        StatusCode::BAD_REQUEST
    );
    api.json("PUT", &uri, phantom_rois()).await;
    let bad = json!({"no_such_field": 1});
    assert_eq!(
        api.json("POST", &runs, bad).await.0,
        StatusCode::BAD_REQUEST
    );

    assert_eq!(
        api.send("POST", "/api/images?format=tiff", vec![1, 2])
            .await
            .0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        api.send("POST", "/api/images?format=png", vec![1, 2])
            .await
            .0,
        StatusCode::BAD_REQUEST
    );
    for uri in [
        "/api/images/nope/pixels",
        "/api/images/nope/rois",
        "/api/runs/nope",
        "/api/runs/nope/output.png",
        "/api/runs/nope/attention/1.png",
    ] {
        assert_eq!(
            api.send("GET", uri, vec![]).await.0,
            StatusCode::NOT_FOUND,
            "{uri}"
        );
    }
    assert_eq!(
        api.json("PUT", "/api/images/nope/rois", phantom_rois())
            .await
            .0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        api.json("POST", "/api/images/nope/runs", Value::Null)
            .await
            .0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_lifecycle_with_conflict() {
    let api = Api::new();
    let img = api.upload_phantom().await;
    api.json(
        "PUT",
        &format!("/api/images/{}/rois", img.image_id),
        phantom_rois(),
    )
    .await;

    let runs = format!("/api/images/{}/runs", img.image_id);
    let (status, created) = api.json("POST", &runs, tiny_overrides()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let run_id = created["run_id"].as_str().unwrap().to_string();
    assert_eq!(
        api.json("POST", &runs, tiny_overrides()).await.0,
        StatusCode::CONFLICT
    );
    assert_eq!(
        api.send("GET", &format!("/api/runs/{run_id}/output.png"), vec![])
            .await
            .0,
        StatusCode::CONFLICT
    );

    let mut seen = Vec::new();
    let state: RunState = loop {
        let (status, body) = api
            .json("GET", &format!("/api/runs/{run_id}"), Value::Null)
            .await;
        assert_eq!(status, StatusCode::OK);
        let state: RunState = serde_json::from_value(body).unwrap();
        if seen.last() != Some(&state.status) {
            seen.push(state.status);
        }
        if matches!(state.status, RunStatus::Done | RunStatus::Error) {
            break state;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    };
    assert_eq!(state.status, RunStatus::Done, "{:?}", state.error);
    let order = [RunStatus::Queued, RunStatus::Running, RunStatus::Done];
    let ranks: Vec<usize> = seen
        .iter()
        .map(|s| order.iter().position(|o| o == s).unwrap())
        .collect();
    assert!(ranks.windows(2).all(|w| w[0] < w[1]), "{seen:?}");
    assert_eq!(state.stage.as_deref(), Some("metrics"));

    let (status, record) = api
        .send("GET", &format!("/api/runs/{run_id}/record"), vec![])
        .await;
    assert_eq!(status, StatusCode::OK);
    let record: RunRecord = serde_json::from_slice(&record).unwrap();
    assert_eq!(state.metrics, record.metrics);
    assert_eq!(state.loss_history, record.aarn.loss_history);
    assert_eq!(record.metrics.len(), 4);

    for uri in ["output.png", "attention/1.png", "attention/2.png"] {
        let (status, png) = api
            .send("GET", &format!("/api/runs/{run_id}/{uri}"), vec![])
            .await;
        assert_eq!(status, StatusCode::OK, "{uri}");
        assert_eq!(&png[1..4], b"PNG");
    }
    assert_eq!(
        api.send(
            "GET",
            &format!("/api/runs/{run_id}/attention/3.png"),
            vec![]
        )
        .await
        .0,
        StatusCode::NOT_FOUND
    );
    // the image is free again once its run finished
    let (status, _) = api.json("POST", &runs, tiny_overrides()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
}
