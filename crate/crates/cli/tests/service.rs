use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine as _;
use histosynth_cli::service::{router, AppState, InterpolationRequest, LatentSource, Model, SynthesisRequest};
use histosynth_cli::service::MULTIPART_BOUNDARY;
use histosynth_core::data_model::{denormalize, LabelMap, LATENT_DIM};
use histosynth_core::latent::seed_latent;
use histosynth_core::toy::{toy_dataset, toy_palette};
use histosynth_core::training::{GanConfig, GanState};
use http_body_util::BodyExt;
use tower::ServiceExt;

fn tiny_model(id: &str, seed: u64) -> Model {
    let mut cfg = GanConfig::new(16, 3);
    cfg.generator.base_channels = 8;
    cfg.generator.schedule = vec![8, 4];
    cfg.generator.spade_hidden = 4;
    cfg.discriminator.channels = vec![4, 8];
    cfg.train.seed = seed;
    let s = GanState::new(cfg, Some(toy_palette())).unwrap();
    Model::new(id, s.generator, s.palette).unwrap()
}

fn state() -> Arc<AppState> {
    Arc::new(AppState::new(vec![tiny_model("alpha", 1), tiny_model("beta", 2)], 32 * 32, 8, 0).unwrap())
}

fn labels() -> LabelMap {
    toy_dataset(1, 16, 6)[0].label.clone()
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn synth_req(m: &LabelMap) -> SynthesisRequest {
    SynthesisRequest {
        model: Some("alpha".into()),
        labels_png: b64(&m.to_png_bytes()),
        ..Default::default()
    }
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<String>) -> (StatusCode, String, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b)).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, bytes)
}

async fn post<T: serde::Serialize>(state: &Arc<AppState>, uri: &str, body: &T) -> (StatusCode, String, Vec<u8>) {
    call(state, "POST", uri, Some(serde_json::to_string(body).unwrap())).await
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

/// Split a multipart/mixed body into part payloads using each part's
/// Content-Length.
fn parts(body: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut rest = body;
    let open = format!("--{MULTIPART_BOUNDARY}\r\n");
    let close = format!("--{MULTIPART_BOUNDARY}--\r\n");
    while rest.starts_with(open.as_bytes()) {
        let head_end = rest.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
        let head = std::str::from_utf8(&rest[open.len()..head_end]).unwrap();
        let len: usize = head
            .lines()
            .find_map(|l| l.strip_prefix("Content-Length: "))
            .unwrap()
            .parse()
            .unwrap();
        let start = head_end + 4;
        out.push(rest[start..start + len].to_vec());
        assert_eq!(&rest[start + len..start + len + 2], b"\r\n");
        rest = &rest[start + len + 2..];
    }
    assert_eq!(rest, close.as_bytes());
    out
}

#[tokio::test]
async fn health_and_models() {
    let s = state();
    let (status, _, body) = call(&s, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["status"], "ok");
    let (status, _, body) = call(&s, "GET", "/models", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    let models = v["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    assert_eq!(models[0]["id"], "alpha");
    assert_eq!(models[0]["resolution"], 16);
    assert_eq!(models[0]["num_classes"], 3);
    let palette: histosynth_core::data_model::ClassPalette =
        serde_json::from_value(models[0]["palette"].clone()).unwrap();
    assert_eq!(palette, toy_palette());
}

#[tokio::test]
async fn synthesize_is_deterministic_and_matches_direct_generation() {
    let s = state();
    let m = labels();
    let mut req = synth_req(&m);
    req.seed = Some(42);
    let (status, ctype, a) = post(&s, "/synthesize", &req).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
    assert_eq!(ctype, "image/png");
    let (_, _, b) = post(&s, "/synthesize", &req).await;
    assert_eq!(a, b);

    let direct = tiny_model("alpha", 1).generator.generate(&m, &seed_latent(42)).unwrap();
    assert_eq!(a, denormalize(&direct).to_png_bytes());

    req.model = Some("beta".into());
    let (_, _, c) = post(&s, "/synthesize", &req).await;
    assert_ne!(a, c);

    // no latent given: the default seed
    let (_, _, d) = post(&s, "/synthesize", &synth_req(&m)).await;
    let mut zero = synth_req(&m);
    zero.seed = Some(0);
    assert_eq!(d, post(&s, "/synthesize", &zero).await.2);

    // explicit latent equal to a seeded one
    let mut explicit = synth_req(&m);
    explicit.latent = Some(seed_latent(42).as_slice().to_vec());
    assert_eq!(post(&s, "/synthesize", &explicit).await.2, a);
}

#[tokio::test]
async fn invalid_requests() {
    let s = state();
    let m = labels();

    let mut bad = m.values().to_vec();
    bad[5 * 16 + 9] = 3;
    let bad_map = LabelMap::new(16, 16, 4, bad).unwrap();
    let (status, _, body) = post(&s, "/synthesize", &synth_req(&bad_map)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v = json(&body);
    assert_eq!(v["index"]["x"], 9);
    assert_eq!(v["index"]["y"], 5);
    assert_eq!(v["index"]["value"], 3);

    let big = LabelMap::filled(64, 64, 3, 0).unwrap();
    assert_eq!(post(&s, "/synthesize", &synth_req(&big)).await.0, StatusCode::PAYLOAD_TOO_LARGE);

    let small = LabelMap::filled(8, 8, 3, 0).unwrap();
    assert_eq!(post(&s, "/synthesize", &synth_req(&small)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let mut unknown = synth_req(&m);
    unknown.model = Some("gamma".into());
    assert_eq!(post(&s, "/synthesize", &unknown).await.0, StatusCode::NOT_FOUND);

    let mut both = synth_req(&m);
    both.seed = Some(1);
    both.latent = Some(vec![0.0; LATENT_DIM]);
    assert_eq!(post(&s, "/synthesize", &both).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let mut short = synth_req(&m);
    short.latent = Some(vec![0.0; 3]);
    assert_eq!(post(&s, "/synthesize", &short).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let mut lonely_t = synth_req(&m);
    lonely_t.t = Some(0.5);
    assert_eq!(post(&s, "/synthesize", &lonely_t).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let mut out_of_range = synth_req(&m);
    out_of_range.latents = Some([vec![0.0; LATENT_DIM], vec![1.0; LATENT_DIM]]);
    out_of_range.t = Some(1.5);
    assert_eq!(post(&s, "/synthesize", &out_of_range).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let mut garbage = synth_req(&m);
    garbage.labels_png = "not base64!".into();
    assert_eq!(post(&s, "/synthesize", &garbage).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    garbage.labels_png = b64(b"not a png");
    assert_eq!(post(&s, "/synthesize", &garbage).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let req = InterpolationRequest {
        model: None,
        labels_png: b64(&m.to_png_bytes()),
        from: LatentSource { seed: Some(1), latent: None },
        to: LatentSource { seed: Some(2), latent: None },
        steps: 1,
    };
    assert_eq!(post(&s, "/interpolate", &req).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn interpolation_frames_match_synthesis() {
    let s = state();
    let m = labels();
    let z1 = seed_latent(3).as_slice().to_vec();
    let z2 = seed_latent(4).as_slice().to_vec();
    let req = InterpolationRequest {
        model: Some("alpha".into()),
        labels_png: b64(&m.to_png_bytes()),
        from: LatentSource { seed: None, latent: Some(z1.clone()) },
        to: LatentSource { seed: Some(4), latent: None },
        steps: 3,
    };
    let (status, ctype, body) = post(&s, "/interpolate", &req).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(ctype, format!("multipart/mixed; boundary={MULTIPART_BOUNDARY}"));
    let frames = parts(&body);
    assert_eq!(frames.len(), 3);

    let mut first = synth_req(&m);
    first.latent = Some(z1.clone());
    assert_eq!(frames[0], post(&s, "/synthesize", &first).await.2);
    let mut last = synth_req(&m);
    last.seed = Some(4);
    assert_eq!(frames[2], post(&s, "/synthesize", &last).await.2);
    let mut mid = synth_req(&m);
    mid.latents = Some([z1, z2]);
    mid.t = Some(0.5);
    assert_eq!(frames[1], post(&s, "/synthesize", &mid).await.2);
}

#[tokio::test]
async fn requests_never_touch_parameters() {
    let s = state();
    let before = s.digests();
    let m = labels();
    for seed in 0..3 {
        let mut req = synth_req(&m);
        req.seed = Some(seed);
        post(&s, "/synthesize", &req).await;
    }
    let req = InterpolationRequest {
        model: Some("beta".into()),
        labels_png: b64(&m.to_png_bytes()),
        from: LatentSource { seed: Some(1), latent: None },
        to: LatentSource { seed: Some(2), latent: None },
        steps: 4,
    };
    post(&s, "/interpolate", &req).await;
    assert_eq!(before, s.digests());
}

#[test]
fn state_rejects_bad_config() {
    assert!(AppState::new(vec![], 100, 8, 0).is_err());
    assert!(AppState::new(vec![tiny_model("a", 1)], 0, 8, 0).is_err());
    assert!(AppState::new(vec![tiny_model("a", 1), tiny_model("a", 2)], 100, 8, 0).is_err());
}

#[test]
fn checkpoint_directory_loading() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = GanConfig::new(16, 3);
    cfg.generator.base_channels = 8;
    cfg.generator.schedule = vec![8, 4];
    cfg.generator.spade_hidden = 4;
    cfg.discriminator.channels = vec![4, 8];
    GanState::new(cfg, None).unwrap().save(&dir.path().join("m1.ckpt")).unwrap();
    std::fs::write(dir.path().join("junk.ckpt"), b"nope").unwrap();
    let models = histosynth_cli::service::load_models(dir.path()).unwrap();
    assert_eq!(models.len(), 1);
    assert_eq!(models[0].id, "m1");
    assert_eq!(models[0].palette.len(), 3);
}
