//! External-model client interfaces, deterministic stubs and HTTP backends.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use glyphdit_core::image::RgbImage;
use glyphdit_core::layout::{BBox, LayoutLlm, LayoutQuery};
use glyphdit_core::metrics::{BenchCase, OcrClient, OcrLine};
use glyphdit_core::rng;
use glyphdit_model::encoders::{MllmClient, MllmRequest, MllmResponse};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: String,
    pub client: String,
    pub millis: f64,
    pub ok: bool,
}

/// Records every external call made by a pipeline run.
#[derive(Debug, Default)]
pub struct CallLog {
    calls: Mutex<Vec<CallRecord>>,
}

impl CallLog {
    pub fn call<T, E: Into<Error>>(
        &self,
        stage: &str,
        client: &str,
        f: impl FnOnce() -> std::result::Result<T, E>,
    ) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.into().at(stage));
        self.calls.lock().expect("call log").push(CallRecord {
            stage: stage.to_string(),
            client: client.to_string(),
            millis: start.elapsed().as_secs_f64() * 1e3,
            ok: out.is_ok(),
        });
        out
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("call log").clone()
    }
}

/// Fills a region of an image with plausible background.
pub trait Inpainter: Send + Sync {
    fn name(&self) -> &str;
    fn inpaint(&self, image: &RgbImage, region: &BBox) -> Result<RgbImage>;
}

/// Per-channel median of a `ring`-pixel border around the region, used as a
/// flat fill. Pixels outside the region are untouched.
#[derive(Debug, Clone)]
pub struct MedianInpainter {
    pub ring: i64,
}

impl Default for MedianInpainter {
    fn default() -> Self {
        Self { ring: 2 }
    }
}

fn median(v: &mut [f32]) -> f32 {
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median colour of the ring around `region` (the whole image if the ring is empty).
pub fn border_median(image: &RgbImage, region: &BBox, ring: i64) -> [f32; 3] {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut ch: [Vec<f32>; 3] = Default::default();
    let (l, t) = ((region.left - ring).max(0), (region.top - ring).max(0));
    let (r, b) = ((region.right + ring).min(w), (region.bottom + ring).min(h));
    for y in t..b {
        for x in l..r {
            let inside = x >= region.left && x < region.right && y >= region.top && y < region.bottom;
            if !inside {
                let p = image.pixel(x as usize, y as usize);
                for c in 0..3 {
                    ch[c].push(p[c]);
                }
            }
        }
    }
    if ch[0].is_empty() {
        for p in image.data().chunks_exact(3) {
            for c in 0..3 {
                ch[c].push(p[c]);
            }
        }
    }
    [median(&mut ch[0]), median(&mut ch[1]), median(&mut ch[2])]
}

impl Inpainter for MedianInpainter {
    fn name(&self) -> &str {
        "median-fill"
    }

    fn inpaint(&self, image: &RgbImage, region: &BBox) -> Result<RgbImage> {
        if !region.within(image.width() as i64, image.height() as i64) {
            return Err(crate::error::config("inpaint region outside image"));
        }
        let fill = border_median(image, region, self.ring.max(1));
        let mut out = image.clone();
        for y in region.top..region.bottom {
            for x in region.left..region.right {
                out.set_pixel(x as usize, y as usize, fill);
            }
        }
        Ok(out)
    }
}

/// Text-to-image backend producing design backgrounds.
pub trait TextToImage: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, prompt: &str, width: usize, height: usize, seed: u64) -> Result<RgbImage>;
}

/// Seeded two-colour diagonal gradient; colours depend on prompt and seed.
#[derive(Debug, Clone, Default)]
pub struct GradientT2i;

impl TextToImage for GradientT2i {
    fn name(&self) -> &str {
        "gradient"
    }

    fn generate(&self, prompt: &str, width: usize, height: usize, seed: u64) -> Result<RgbImage> {
        if width == 0 || height == 0 {
            return Err(crate::error::config("image size must be positive"));
        }
        let mut r = rng::derived(seed, rng::hash_bytes(prompt.as_bytes()));
        let a: [f32; 3] = [r.random(), r.random(), r.random()];
        let b: [f32; 3] = [r.random(), r.random(), r.random()];
        let mut img = RgbImage::new(width, height);
        let span = (width + height).saturating_sub(2).max(1) as f32;
        for y in 0..height {
            for x in 0..width {
                let u = (x + y) as f32 / span;
                img.set_pixel(x, y, [0, 1, 2].map(|c| a[c] * (1.0 - u) + b[c] * u));
            }
        }
        Ok(img)
    }
}

/// Counting gate bounding concurrent in-flight requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().expect("gate");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate");
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub url: String,
    pub timeout_ms: u64,
    /// Total tries including the first.
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            timeout_ms: 30_000,
            max_attempts: 3,
            backoff_ms: 200,
            max_in_flight: 4,
        }
    }
}

/// Failure of a JSON-over-HTTP call.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportFailure {
    pub reason: String,
    pub attempts: u32,
    pub retryable: bool,
}

/// Blocking JSON POST client with per-call timeout, bounded retries on
/// connection errors and 5xx answers, and a concurrency limit.
pub struct HttpJson {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl HttpJson {
    pub fn new(cfg: HttpConfig) -> Result<Self> {
        if cfg.url.is_empty() || cfg.max_attempts == 0 {
            return Err(crate::error::config("http client needs a url and max_attempts >= 1"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| crate::error::config(e.to_string()))?;
        Ok(Self {
            gate: Gate::new(cfg.max_in_flight),
            cfg,
            client,
        })
    }

    pub fn post(&self, body: &Value) -> std::result::Result<Value, TransportFailure> {
        let _slot = self.gate.enter();
        let mut last = String::new();
        for attempt in 1..=self.cfg.max_attempts {
            let res = self.client.post(&self.cfg.url).json(body).send();
            let retryable = match res {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<Value>().map_err(|e| TransportFailure {
                        reason: format!("bad response body: {e}"),
                        attempts: attempt,
                        retryable: false,
                    });
                }
                Ok(resp) => {
                    let status = resp.status();
                    last = format!("HTTP {status}");
                    status.is_server_error() || status.as_u16() == 429
                }
                Err(e) => {
                    last = e.to_string();
                    e.is_timeout() || e.is_connect() || e.is_request()
                }
            };
            if !retryable {
                return Err(TransportFailure {
                    reason: last,
                    attempts: attempt,
                    retryable: false,
                });
            }
            if attempt < self.cfg.max_attempts {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms * u64::from(attempt)));
            }
        }
        Err(TransportFailure {
            reason: last,
            attempts: self.cfg.max_attempts,
            retryable: true,
        })
    }
}

fn image_json(img: &RgbImage) -> Value {
    json!({ "width": img.width(), "height": img.height(), "pixels": img.data() })
}

/// Multi-modal model behind an HTTP endpoint.
///
/// Request: `{"prompt": str, "image": {"width", "height", "pixels": [f32; w*h*3]}}`.
/// Response: `{"hidden_states": [{"rows", "cols", "data"}, ...]}`, first to last layer.
pub struct RemoteMllm {
    pub http: HttpJson,
    pub dim: usize,
}

impl MllmClient for RemoteMllm {
    fn name(&self) -> &str {
        "remote-mllm"
    }

    fn hidden_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, request: &MllmRequest) -> glyphdit_model::Result<MllmResponse> {
        let body = json!({ "prompt": request.prompt, "image": image_json(&request.image) });
        let v = self.http.post(&body).map_err(|f| glyphdit_model::Error::Transport {
            reason: f.reason,
            attempts: f.attempts,
            retryable: f.retryable,
        })?;
        let resp: MllmResponse = serde_json::from_value(v)?;
        if let Some(bad) = resp.hidden_states.iter().find(|h| h.cols != self.dim) {
            return Err(glyphdit_model::Error::InvalidArgument(format!(
                "server returned width {}, expected {}",
                bad.cols, self.dim
            )));
        }
        Ok(resp)
    }
}

/// Layout language model behind an HTTP endpoint.
///
/// Request: `{"prompt": str, "frame": [w, h]}`; response: `{"text": str}`.
pub struct RemoteLayoutLlm {
    pub http: HttpJson,
}

impl LayoutLlm for RemoteLayoutLlm {
    fn complete(&self, query: &LayoutQuery<'_>) -> glyphdit_core::Result<String> {
        let body = json!({ "prompt": query.prompt, "frame": [query.frame.0, query.frame.1] });
        let v = self.http.post(&body).map_err(|f| {
            glyphdit_core::Error::Client(format!("{} after {} attempt(s)", f.reason, f.attempts))
        })?;
        v.get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| glyphdit_core::Error::Client("response lacks a text field".into()))
    }
}

/// Text recognizer behind an HTTP endpoint.
///
/// Request: `{"case": str, "image": {...}}`; response: `{"lines": [{"text", "bbox"}, ...]}`.
pub struct RemoteOcr {
    pub http: HttpJson,
}

impl OcrClient for RemoteOcr {
    fn name(&self) -> &str {
        "remote-ocr"
    }

    fn recognize(&self, image: &RgbImage, case: &BenchCase) -> glyphdit_core::Result<Vec<OcrLine>> {
        let body = json!({ "case": case.id, "image": image_json(image) });
        let v = self.http.post(&body).map_err(|f| {
            glyphdit_core::Error::Client(format!("{} after {} attempt(s)", f.reason, f.attempts))
        })?;
        let lines = v
            .get("lines")
            .cloned()
            .ok_or_else(|| glyphdit_core::Error::Client("response lacks a lines field".into()))?;
        Ok(serde_json::from_value(lines)?)
    }
}
