//! Annotation service: serves blinded rating tasks and appends ratings to a JSONL file.
//!
//! Every (sample, model) output gets its own blind id, so ids never reveal a model across tasks.
//! Model ids only live in the blind map file, which is never served.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::pipeline::edited_image_path;
use super::{require, HarnessError, RunConfig};
use crate::alignment::{load_ratings, BlindMap, RatingRecord};
use crate::judge::mime_for;
use crate::model::{load_manifest, sha256_hex, BenchmarkSample};

/// Deterministic blind id for one output: 12 hex chars, independent of the model id's spelling.
pub fn blind_id(seed: u64, sample_id: &str, model_id: &str) -> String {
    let h = sha256_hex(format!("blind\0{seed}\0{sample_id}\0{model_id}").as_bytes());
    format!("b{}", &h[..12])
}

#[derive(Debug, Clone)]
struct Task {
    id: String,
    instruction: String,
    source: PathBuf,
    /// Blind ids in canonical (model id) order.
    outputs: Vec<String>,
}

#[derive(Debug)]
pub struct AnnotationState {
    tasks: Vec<Task>,
    task_index: HashMap<String, usize>,
    /// Blind id → edited image path.
    output_files: HashMap<String, PathBuf>,
    blind_map: BlindMap,
    seed: u64,
    ratings_path: PathBuf,
    ratings_file: Mutex<File>,
    /// (annotator, task id) → blind ids rated so far.
    rated: Mutex<HashMap<(String, String), HashSet<String>>>,
    assets_dir: Option<PathBuf>,
}

/// One edited output available for annotation.
#[derive(Debug, Clone)]
pub struct OutputFile {
    pub sample_id: String,
    pub model_id: String,
    pub path: PathBuf,
}

impl AnnotationState {
    pub fn new(
        samples: &[BenchmarkSample],
        outputs: &[OutputFile],
        seed: u64,
        ratings_path: &Path,
        assets_dir: Option<PathBuf>,
    ) -> Result<Self, HarnessError> {
        let mut by_sample: BTreeMap<&str, Vec<&OutputFile>> = BTreeMap::new();
        for o in outputs {
            by_sample.entry(&o.sample_id).or_default().push(o);
        }
        let mut tasks = Vec::new();
        let mut output_files = HashMap::new();
        let mut blind_map = BlindMap::new();
        for s in samples {
            let Some(outs) = by_sample.get_mut(s.id.as_str()) else { continue };
            outs.sort_by(|a, b| a.model_id.cmp(&b.model_id));
            let mut ids = Vec::new();
            for o in outs.iter() {
                let b = blind_id(seed, &s.id, &o.model_id);
                if blind_map.insert(b.clone(), o.model_id.clone()).is_some() {
                    return Err(HarnessError::Input(format!("duplicate output for sample {} model {}", s.id, o.model_id)));
                }
                output_files.insert(b.clone(), o.path.clone());
                ids.push(b);
            }
            tasks.push(Task { id: s.id.clone(), instruction: s.instruction.clone(), source: s.source_image.path.clone(), outputs: ids });
        }
        let task_index = tasks.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();

        let mut rated: HashMap<(String, String), HashSet<String>> = HashMap::new();
        if ratings_path.exists() {
            for r in load_ratings(ratings_path)? {
                if output_files.contains_key(&r.blind_id) {
                    rated.entry((r.annotator_id, r.sample_id)).or_default().insert(r.blind_id);
                } else {
                    log::warn!("ignoring stored rating for unknown output {}", r.blind_id);
                }
            }
        }
        if let Some(parent) = ratings_path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        let ratings_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(ratings_path)
            .map_err(|e| HarnessError::io(ratings_path, e))?;
        Ok(Self {
            tasks,
            task_index,
            output_files,
            blind_map,
            seed,
            ratings_path: ratings_path.to_path_buf(),
            ratings_file: Mutex::new(ratings_file),
            rated: Mutex::new(rated),
            assets_dir,
        })
    }

    /// Builds the state from a run config and writes the blind map next to the ratings.
    pub fn from_config(cfg: &RunConfig) -> Result<Self, HarnessError> {
        require(&cfg.bench_manifest, "bench_manifest")?;
        let samples = load_manifest(&cfg.bench_manifest)?;
        let mut outputs = Vec::new();
        for model in cfg.model_ids()? {
            for s in &samples {
                if let Some(path) = edited_image_path(&cfg.outputs_root, &model, &s.id) {
                    outputs.push(OutputFile { sample_id: s.id.clone(), model_id: model.clone(), path });
                }
            }
        }
        let state = Self::new(&samples, &outputs, cfg.seed, &cfg.ratings_path(), cfg.annotation.assets_dir.clone())?;
        let text = serde_json::to_string_pretty(&state.blind_map).expect("serializable") + "\n";
        crate::jsonl::write_atomic(&cfg.blind_map_path(), text.as_bytes())?;
        Ok(state)
    }

    pub fn blind_map(&self) -> &BlindMap {
        &self.blind_map
    }

    pub fn ratings_path(&self) -> &Path {
        &self.ratings_path
    }

    fn shuffled_outputs(&self, task: &Task, annotator: &str) -> Vec<String> {
        let digest = sha256_hex(format!("order\0{}\0{annotator}\0{}", self.seed, task.id).as_bytes());
        let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        let mut order = task.outputs.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    fn is_done(&self, rated: &HashMap<(String, String), HashSet<String>>, annotator: &str, task: &Task) -> bool {
        rated
            .get(&(annotator.to_string(), task.id.clone()))
            .is_some_and(|set| task.outputs.iter().all(|b| set.contains(b)))
    }
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

#[derive(Debug, Serialize)]
struct OutputView {
    blind_id: String,
    url: String,
}

#[derive(Debug, Serialize)]
struct TaskView<'a> {
    task_id: &'a str,
    instruction: &'a str,
    source_url: String,
    outputs: Vec<OutputView>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingPayload {
    annotator: String,
    task_id: String,
    blind_id: String,
    rating: serde_json::Value,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[allow(clippy::result_large_err)]
fn annotator(q: &AnnotatorQuery) -> Result<&str, Response> {
    match q.annotator.as_deref().map(str::trim) {
        Some(a) if !a.is_empty() => Ok(a),
        _ => Err(error(StatusCode::BAD_REQUEST, "missing annotator parameter")),
    }
}

async fn next_task(State(state): State<Arc<AnnotationState>>, Query(q): Query<AnnotatorQuery>) -> Response {
    let who = match annotator(&q) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let rated = state.rated.lock().unwrap_or_else(|e| e.into_inner());
    let Some(task) = state.tasks.iter().find(|t| !state.is_done(&rated, who, t)) else {
        return StatusCode::NO_CONTENT.into_response();
    };
    let outputs = state
        .shuffled_outputs(task, who)
        .into_iter()
        .map(|b| OutputView { url: format!("/assets/output/{b}"), blind_id: b })
        .collect();
    Json(TaskView {
        task_id: &task.id,
        instruction: &task.instruction,
        source_url: format!("/assets/source/{}", task.id),
        outputs,
    })
    .into_response()
}

async fn post_rating(State(state): State<Arc<AnnotationState>>, body: Bytes) -> Response {
    let payload: RatingPayload = match serde_json::from_slice(&body) {
        Ok(p) => p,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed rating payload: {e}")),
    };
    if payload.annotator.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "annotator must be nonempty");
    }
    let Some(rating) = payload.rating.as_i64() else {
        return error(StatusCode::BAD_REQUEST, "rating must be an integer from 0 to 5");
    };
    let Some(&idx) = state.task_index.get(&payload.task_id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown task {}", payload.task_id));
    };
    if !state.tasks[idx].outputs.contains(&payload.blind_id) {
        return error(StatusCode::NOT_FOUND, format!("task {} has no output {}", payload.task_id, payload.blind_id));
    }
    let record = match RatingRecord::new(payload.annotator.trim(), &payload.task_id, &payload.blind_id, rating, Utc::now()) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let line = serde_json::to_string(&record).expect("serializable") + "\n";
    // hold the rated lock across the append so file order matches acceptance order
    let mut rated = state.rated.lock().unwrap_or_else(|e| e.into_inner());
    {
        let mut f = state.ratings_file.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = f.write_all(line.as_bytes()).and_then(|_| f.flush()) {
            log::error!("ratings append failed: {e}");
            return error(StatusCode::INTERNAL_SERVER_ERROR, "could not store rating");
        }
    }
    rated.entry((record.annotator_id, record.sample_id)).or_default().insert(record.blind_id);
    Json(json!({ "accepted": true })).into_response()
}

async fn progress(State(state): State<Arc<AnnotationState>>, Query(q): Query<AnnotatorQuery>) -> Response {
    let who = match annotator(&q) {
        Ok(a) => a,
        Err(r) => return r,
    };
    let rated = state.rated.lock().unwrap_or_else(|e| e.into_inner());
    let done = state.tasks.iter().filter(|t| state.is_done(&rated, who, t)).count();
    Json(json!({ "done": done, "total": state.tasks.len() })).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("html" | "htm") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png" | "jpg" | "jpeg" | "webp" | "gif") => mime_for(path),
        _ => "application/octet-stream",
    }
}

async fn send_file(path: &Path) -> Response {
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(path))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not found"),
    }
}

async fn source_image(State(state): State<Arc<AnnotationState>>, UrlPath(task_id): UrlPath<String>) -> Response {
    match state.task_index.get(&task_id) {
        Some(&i) => send_file(&state.tasks[i].source).await,
        None => error(StatusCode::NOT_FOUND, format!("unknown task {task_id}")),
    }
}

async fn output_image(State(state): State<Arc<AnnotationState>>, UrlPath(blind): UrlPath<String>) -> Response {
    match state.output_files.get(&blind) {
        Some(p) => send_file(p).await,
        None => error(StatusCode::NOT_FOUND, format!("unknown output {blind}")),
    }
}

async fn static_asset(State(state): State<Arc<AnnotationState>>, UrlPath(rel): UrlPath<String>) -> Response {
    let Some(root) = &state.assets_dir else {
        return error(StatusCode::NOT_FOUND, "no UI bundle configured");
    };
    let rel = Path::new(&rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return error(StatusCode::BAD_REQUEST, "invalid asset path");
    }
    send_file(&root.join(rel)).await
}

pub fn router(state: Arc<AnnotationState>) -> Router {
    Router::new()
        .route("/", get(|| async { Redirect::temporary("/assets/index.html") }))
        .route("/api/tasks/next", get(next_task))
        .route("/api/ratings", post(post_rating))
        .route("/api/progress", get(progress))
        .route("/assets/source/{task_id}", get(source_image))
        .route("/assets/output/{blind_id}", get(output_image))
        .route("/assets/{*path}", get(static_asset))
        .with_state(state)
}

pub async fn serve(state: AnnotationState, bind: &str) -> Result<(), HarnessError> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| HarnessError::Input(format!("cannot bind {bind}: {e}")))?;
    log::info!("annotation service on http://{}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    axum::serve(listener, router(Arc::new(state)))
        .await
        .map_err(|e| HarnessError::Input(format!("server error: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::normalize_ratings;
    use crate::model::{Dimension, ImageRef};
    use serde_json::Value;

    const MODELS: [&str; 2] = ["flux-dev", "seedream"];

    struct Fixture {
        _dir: tempfile::TempDir,
        base: String,
        client: reqwest::Client,
        state_ratings: PathBuf,
        blind_map: BlindMap,
    }

    async fn start(assets: bool) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = Vec::new();
        let mut outputs = Vec::new();
        for i in 0..3 {
            let id = format!("s{i}");
            let src = dir.path().join(format!("{id}.png"));
            std::fs::write(&src, format!("source {i}")).unwrap();
            samples.push(BenchmarkSample {
                id: id.clone(),
                source_image: ImageRef::from_path(&src).unwrap(),
                instruction: format!("Make object {i} glow."),
                dimension: Dimension::ALL[i],
            });
            for m in MODELS {
                let p = dir.path().join(format!("{m}-{id}.png"));
                std::fs::write(&p, format!("{m} output {i}")).unwrap();
                outputs.push(OutputFile { sample_id: id.clone(), model_id: m.into(), path: p });
            }
        }
        let assets_dir = dir.path().join("ui");
        std::fs::create_dir_all(&assets_dir).unwrap();
        std::fs::write(assets_dir.join("index.html"), "<html>ui</html>").unwrap();
        let ratings = dir.path().join("ratings.jsonl");
        let state = AnnotationState::new(&samples, &outputs, 42, &ratings, assets.then_some(assets_dir)).unwrap();
        let blind_map = state.blind_map().clone();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, router(Arc::new(state))).await.unwrap() });
        Fixture { _dir: dir, base: format!("http://{addr}"), client: reqwest::Client::new(), state_ratings: ratings, blind_map }
    }

    impl Fixture {
        async fn get(&self, path: &str) -> (u16, String) {
            let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
            (r.status().as_u16(), r.text().await.unwrap())
        }

        async fn post(&self, body: Value) -> (u16, String) {
            let r = self.client.post(format!("{}/api/ratings", self.base)).json(&body).send().await.unwrap();
            (r.status().as_u16(), r.text().await.unwrap())
        }
    }

    fn assert_blind(bodies: &[String]) {
        for body in bodies {
            for m in MODELS {
                assert!(!body.contains(m), "response leaks model id {m}: {body}");
            }
        }
    }

    #[tokio::test]
    async fn full_annotation_loop_is_blind_and_normalizes() {
        let fx = start(true).await;
        let mut bodies = Vec::new();
        let mut given = Vec::new();
        for annotator in ["ann-1", "ann-2"] {
            loop {
                let (status, body) = fx.get(&format!("/api/tasks/next?annotator={annotator}")).await;
                bodies.push(body.clone());
                if status == 204 {
                    break;
                }
                assert_eq!(status, 200);
                let task: Value = serde_json::from_str(&body).unwrap();
                let outputs = task["outputs"].as_array().unwrap();
                assert_eq!(outputs.len(), 2);
                let (s, b) = fx.get(task["source_url"].as_str().unwrap()).await;
                assert_eq!(s, 200);
                assert!(b.starts_with("source"));
                for (k, o) in outputs.iter().enumerate() {
                    let blind = o["blind_id"].as_str().unwrap();
                    let (s, _) = fx.get(o["url"].as_str().unwrap()).await;
                    assert_eq!(s, 200);
                    let rating = (k as i64 * 3 + annotator.len() as i64) % 6;
                    let (s, body) = fx
                        .post(json!({"annotator": annotator, "task_id": task["task_id"], "blind_id": blind, "rating": rating}))
                        .await;
                    assert_eq!(s, 200, "{body}");
                    bodies.push(body);
                    given.push((fx.blind_map[blind].clone(), rating));
                }
            }
            let (s, body) = fx.get(&format!("/api/progress?annotator={annotator}")).await;
            assert_eq!(s, 200);
            assert_eq!(serde_json::from_str::<Value>(&body).unwrap(), json!({"done": 3, "total": 3}));
            bodies.push(body);
        }
        assert_blind(&bodies);

        let records = load_ratings(&fx.state_ratings).unwrap();
        assert_eq!(records.len(), 12);
        let human = normalize_ratings(&records, &fx.blind_map).unwrap();
        for m in MODELS {
            let rs: Vec<i64> = given.iter().filter(|(mm, _)| mm == m).map(|(_, r)| *r).collect();
            let expected = crate::Percent::new(num_rational::BigRational::new(
                (rs.iter().sum::<i64>() * 20).into(),
                (rs.len() as i64).into(),
            ));
            assert_eq!(human.table[m], expected);
        }
    }

    #[tokio::test]
    async fn validation_and_overwrite() {
        let fx = start(false).await;
        let (_, body) = fx.get("/api/tasks/next?annotator=a").await;
        let task: Value = serde_json::from_str(&body).unwrap();
        let tid = task["task_id"].as_str().unwrap().to_string();
        let blind = task["outputs"][0]["blind_id"].as_str().unwrap().to_string();
        let other = task["outputs"][1]["blind_id"].as_str().unwrap().to_string();

        let ok = |r: i64| json!({"annotator": "a", "task_id": tid, "blind_id": blind, "rating": r});
        assert_eq!(fx.post(json!({"annotator": "a", "task_id": tid, "blind_id": blind, "rating": 7})).await.0, 400);
        assert_eq!(fx.post(json!({"annotator": "a", "task_id": tid, "blind_id": blind, "rating": -1})).await.0, 400);
        assert_eq!(fx.post(json!({"annotator": "a", "task_id": tid, "blind_id": blind, "rating": 2.5})).await.0, 400);
        assert_eq!(fx.post(json!({"annotator": "a", "task_id": tid})).await.0, 400);
        assert_eq!(fx.post(json!({"annotator": "", "task_id": tid, "blind_id": blind, "rating": 1})).await.0, 400);
        assert_eq!(fx.post(json!({"annotator": "a", "task_id": "nope", "blind_id": blind, "rating": 1})).await.0, 404);
        assert_eq!(fx.post(json!({"annotator": "a", "task_id": tid, "blind_id": "bffff", "rating": 1})).await.0, 404);
        assert_eq!(fx.get("/api/tasks/next").await.0, 400);
        assert_eq!(fx.get("/assets/source/nope").await.0, 404);
        assert_eq!(fx.get("/assets/index.html").await.0, 404);

        assert_eq!(fx.post(ok(4)).await.0, 200);
        assert_eq!(fx.post(json!({"annotator": "a", "task_id": tid, "blind_id": other, "rating": 1})).await.0, 200);
        let (_, p1) = fx.get("/api/progress?annotator=a").await;
        assert_eq!(fx.post(ok(2)).await.0, 200);
        let (_, p2) = fx.get("/api/progress?annotator=a").await;
        assert_eq!(p1, p2);
        assert_eq!(serde_json::from_str::<Value>(&p2).unwrap()["done"], 1);

        let records = load_ratings(&fx.state_ratings).unwrap();
        assert_eq!(records.len(), 3);
        let human = normalize_ratings(&records, &fx.blind_map).unwrap();
        let model = &fx.blind_map[&blind];
        assert_eq!(human.table[model].report(), "40.00");
    }

    #[tokio::test]
    async fn static_assets_and_traversal() {
        let fx = start(true).await;
        let (s, body) = fx.get("/assets/index.html").await;
        assert_eq!((s, body.as_str()), (200, "<html>ui</html>"));
        assert_ne!(fx.get("/assets/..%2Fratings.jsonl").await.0, 200);
    }

    #[test]
    fn shuffle_is_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("s.png");
        std::fs::write(&src, b"x").unwrap();
        let sample = BenchmarkSample {
            id: "s".into(),
            source_image: ImageRef::from_path(&src).unwrap(),
            instruction: "i".into(),
            dimension: Dimension::ALL[0],
        };
        let outputs: Vec<OutputFile> = (0..6)
            .map(|i| OutputFile { sample_id: "s".into(), model_id: format!("m{i}"), path: src.clone() })
            .collect();
        let a = AnnotationState::new(std::slice::from_ref(&sample), &outputs, 1, &dir.path().join("r1.jsonl"), None).unwrap();
        let b = AnnotationState::new(std::slice::from_ref(&sample), &outputs, 1, &dir.path().join("r2.jsonl"), None).unwrap();
        let c = AnnotationState::new(std::slice::from_ref(&sample), &outputs, 2, &dir.path().join("r3.jsonl"), None).unwrap();
        let order = |s: &AnnotationState, who: &str| -> Vec<String> {
            s.shuffled_outputs(&s.tasks[0], who).iter().map(|x| s.blind_map[x].clone()).collect()
        };
        assert_eq!(order(&a, "x"), order(&b, "x"));
        let orders: HashSet<Vec<String>> = ["x", "y", "z", "w"].iter().map(|w| order(&a, w)).chain([order(&c, "x")]).collect();
        assert!(orders.len() > 1, "shuffle never varies");
    }
}
