//! The HTTP contract against a small stub-backbone checkpoint.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use tagforge_core::checkpoint::save_checkpoint;
use tagforge_core::corpus::Post;
use tagforge_core::encoder::{BackboneAssets, Registry};
use tagforge_core::model::{Component, ModelConfig, TagModel};
use tagforge_core::vocab::{build_vocab, TagCounts};
use tagforge_service::{request_post, serve_with_shutdown, ServiceConfig, SuggestRequest, SuggestResponse, Tagger};
use tokio::sync::oneshot;

fn tagger(dir: &Path) -> Tagger {
    let counts: TagCounts = ["python", "java", "rust", "sql", "css", "bash", "go"]
        .iter()
        .enumerate()
        .map(|(i, t)| (t.to_string(), 100 - i as u64))
        .collect();
    let vocab = build_vocab(&counts, 1).unwrap();
    let spec = Registry::builtin(Path::new("/none")).resolve("stub").unwrap();
    let assets = BackboneAssets::resolve(&spec).unwrap();
    let cfg = ModelConfig::new(Component::ALL.to_vec(), "stub", vocab.len(), 16);
    let model = TagModel::initialize(cfg, &assets, 1, DType::F32, &Device::Cpu).unwrap();
    let var = model.store().get("head.out.weight").unwrap();
    let w: Vec<f32> = (0..vocab.len() * 48)
        .map(|i| ((i * 37 % 17) as f32 - 8.0) * 0.3)
        .collect();
    var.set(&Tensor::from_vec(w, (vocab.len(), 48), &Device::Cpu).unwrap())
        .unwrap();
    let path = dir.join("ckpt");
    save_checkpoint(&model, &vocab, &path, None).unwrap();
    Tagger::load(&path).unwrap()
}

fn request(k: usize) -> SuggestRequest {
    SuggestRequest {
        title: "Sorting a list".into(),
        body: "<p>How?</p><pre><code>sorted(xs)</code></pre>".into(),
        k,
    }
}

#[test]
fn body_paths() {
    let html = request_post("t", "<p>a &amp; b</p><pre><code>x &lt; 1</code></pre>");
    assert_eq!((html.description.as_str(), html.code.as_str()), ("a & b", "x < 1"));
    let plain = request_post(" t ", "just   <b>text</b>\n here");
    assert_eq!(plain.description, "just <b>text</b> here");
    assert_eq!(plain.code, "");
    assert_eq!(plain.title, "t");
}

#[test]
fn predictions_are_ranked_and_prefix_stable() {
    let dir = tempfile::tempdir().unwrap();
    let t = tagger(dir.path());
    let five = t.predict(&request(5)).unwrap();
    assert_eq!(five.tags.len(), 5);
    for w in five.tags.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    assert!(five.tags.iter().all(|s| s.score > 0.0 && s.score < 1.0));
    for k in 1..5 {
        let shorter = t.predict(&request(k)).unwrap();
        assert_eq!(shorter.tags[..], five.tags[..k]);
    }
    assert!(t.predict(&request(0)).is_err());
    assert!(t.predict(&request(6)).is_err());
    assert!(t
        .predict(&SuggestRequest {
            title: "  ".into(),
            ..request(5)
        })
        .is_err());

    let code_only = SuggestRequest {
        title: "help".into(),
        body: "<pre><code>import numpy as np</code></pre>".into(),
        k: 5,
    };
    let post: Post = request_post(&code_only.title, &code_only.body);
    assert!(post.description.is_empty() && !post.code.is_empty());
    assert_eq!(t.predict(&code_only).unwrap().tags.len(), 5);
}

async fn start(t: Tagger, config: ServiceConfig) -> (SocketAddr, oneshot::Sender<()>, tokio::task::JoinHandle<()>) {
    let (tx, rx) = oneshot::channel::<()>();
    let (addr_tx, addr_rx) = oneshot::channel();
    let handle = tokio::spawn(async move {
        serve_with_shutdown(
            Arc::new(t),
            "127.0.0.1:0".parse().unwrap(),
            &config,
            |a| {
                let _ = addr_tx.send(a);
            },
            async {
                let _ = rx.await;
            },
        )
        .await
        .unwrap();
    });
    (addr_rx.await.unwrap(), tx, handle)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn http_contract() {
    let dir = tempfile::tempdir().unwrap();
    let t = tagger(dir.path());
    let digest = t.digest().to_string();
    let (addr, stop, handle) = start(t, ServiceConfig::default()).await;
    let base = format!("http://{addr}");
    let client = reqwest::Client::new();

    let health: serde_json::Value = client
        .get(format!("{base}/healthz"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["model_digest"], digest.as_str());

    let resp = client
        .post(format!("{base}/v1/suggest"))
        .json(&request(3))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let body: SuggestResponse = resp.json().await.unwrap();
    assert_eq!(body.tags.len(), 3);
    assert_eq!(body.model_digest, digest);

    let bad_k = client
        .post(format!("{base}/v1/suggest"))
        .json(&request(9))
        .send()
        .await
        .unwrap();
    assert_eq!(bad_k.status(), 422);
    let no_title = client
        .post(format!("{base}/v1/suggest"))
        .json(&serde_json::json!({"title": "", "body": "x"}))
        .send()
        .await
        .unwrap();
    assert_eq!(no_title.status(), 422);
    let garbage = client
        .post(format!("{base}/v1/suggest"))
        .header("content-type", "application/json")
        .body("{\"title\": 3}")
        .send()
        .await
        .unwrap();
    assert_eq!(garbage.status(), 422);

    let mut tasks = Vec::new();
    for _ in 0..16 {
        let client = client.clone();
        let url = format!("{base}/v1/suggest");
        tasks.push(tokio::spawn(async move {
            let r: SuggestResponse = client
                .post(url)
                .json(&request(5))
                .send()
                .await
                .unwrap()
                .json()
                .await
                .unwrap();
            r.tags
        }));
    }
    let mut lists = Vec::new();
    for t in tasks {
        lists.push(t.await.unwrap());
    }
    assert!(lists.windows(2).all(|w| w[0] == w[1]));

    stop.send(()).unwrap();
    handle.await.unwrap();
}

#[tokio::test]
async fn overload_is_503() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        max_in_flight: 0,
        ..ServiceConfig::default()
    };
    let (addr, stop, handle) = start(tagger(dir.path()), config).await;
    let resp = reqwest::Client::new()
        .post(format!("http://{addr}/v1/suggest"))
        .json(&request(5))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 503);
    stop.send(()).unwrap();
    handle.await.unwrap();
}
