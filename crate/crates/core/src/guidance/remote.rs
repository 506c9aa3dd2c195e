use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{normalize_depth, Conditioning, GuidanceError, ScoreModel};
use crate::image::Image;

/// Largest magnitude sent on the wire.
pub const WIRE_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub request_id: String,
    /// Base64 of row-major little-endian `f32`s.
    pub image: String,
    /// `[H, W, C]`.
    pub shape: [usize; 3],
    pub t: f64,
    pub prompt: String,
    pub uncond: bool,
    /// Base64 `H x W` depth in `[0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub request_id: String,
    pub epsilon: String,
    pub shape: [usize; 3],
}

pub fn encode_f32(values: impl IntoIterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect();
    STANDARD.encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>, GuidanceError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| GuidanceError::Malformed(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(GuidanceError::Malformed(format!(
            "{} bytes is not a whole number of f32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Extra attempts after the first for transient failures.
    pub retries: usize,
    /// First backoff delay; doubled after every retry.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub accepts_depth: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8765/predict".into(),
            timeout_ms: 30_000,
            retries: 3,
            backoff_ms: 200,
            max_in_flight: 2,
            accepts_depth: true,
        }
    }
}

/// Counting gate bounding concurrent requests.
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

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().expect("gate poisoned");
            while *free == 0 {
                free = self.cv.wait(free).expect("gate poisoned");
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().expect("gate poisoned") += 1;
        self.cv.notify_one();
        out
    }
}

enum Attempt {
    Done(Result<Image, GuidanceError>),
    Transient(GuidanceError),
}

/// Score model served over HTTP.
pub struct RemoteGuidanceClient {
    config: RemoteConfig,
    http: reqwest::blocking::Client,
    next_id: AtomicU64,
    retries: AtomicUsize,
    gate: Gate,
}

impl RemoteGuidanceClient {
    pub fn new(config: RemoteConfig) -> Result<Self, GuidanceError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GuidanceError::Transport {
                message: e.to_string(),
                attempts: 0,
            })?;
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            http,
            next_id: AtomicU64::new(1),
            retries: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// Retries performed over the client's lifetime.
    pub fn retry_count(&self) -> usize {
        self.retries.load(Ordering::Relaxed)
    }

    fn request(
        &self,
        noisy: &Image,
        t: f64,
        cond: &Conditioning,
        depth: Option<&Image>,
    ) -> Result<WireRequest, GuidanceError> {
        let depth = match depth {
            None => None,
            Some(d) => {
                if d.width != noisy.width || d.height != noisy.height || d.channels != 1 {
                    return Err(GuidanceError::Shape {
                        expected: [noisy.height, noisy.width, 1],
                        got: d.shape(),
                    });
                }
                Some(encode_f32(normalize_depth(d).data))
            }
        };
        Ok(WireRequest {
            request_id: format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed)),
            image: encode_f32(noisy.data.iter().map(|v| v.clamp(-WIRE_CLAMP, WIRE_CLAMP))),
            shape: noisy.shape(),
            t,
            prompt: cond.text(),
            uncond: cond.uncond,
            depth,
        })
    }

    fn attempt(&self, body: &WireRequest, attempts: usize) -> Attempt {
        let sent = self.gate.run(|| {
            self.http
                .post(&self.config.endpoint)
                .json(body)
                .send()
                .and_then(|r| {
                    let status = r.status();
                    r.text().map(|text| (status, text))
                })
        });
        let (status, text) = match sent {
            Ok(ok) => ok,
            Err(e) if e.is_timeout() => return Attempt::Transient(GuidanceError::Timeout { attempts }),
            Err(e) => {
                return Attempt::Transient(GuidanceError::Transport {
                    message: e.to_string(),
                    attempts,
                })
            }
        };
        if status.is_server_error() || status.as_u16() == 429 {
            return Attempt::Transient(GuidanceError::Status {
                status: status.as_u16(),
                attempts,
            });
        }
        if !status.is_success() {
            return Attempt::Done(Err(GuidanceError::Status {
                status: status.as_u16(),
                attempts,
            }));
        }
        Attempt::Done(parse_response(&text, body))
    }
}

fn parse_response(text: &str, req: &WireRequest) -> Result<Image, GuidanceError> {
    let resp: WireResponse =
        serde_json::from_str(text).map_err(|e| GuidanceError::Malformed(e.to_string()))?;
    if resp.request_id != req.request_id {
        return Err(GuidanceError::Malformed(format!(
            "response id `{}` does not match request `{}`",
            resp.request_id, req.request_id
        )));
    }
    if resp.shape != req.shape {
        return Err(GuidanceError::Shape {
            expected: req.shape,
            got: resp.shape,
        });
    }
    let eps = decode_f32(&resp.epsilon)?;
    let [h, w, c] = resp.shape;
    if eps.len() != h * w * c {
        return Err(GuidanceError::Malformed(format!(
            "epsilon has {} values for shape {:?}",
            eps.len(),
            resp.shape
        )));
    }
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(GuidanceError::Malformed("non-finite epsilon".into()));
    }
    Image::new(w, h, c, eps.into_iter().map(f64::from).collect())
        .map_err(|e| GuidanceError::Malformed(e.to_string()))
}

impl ScoreModel for RemoteGuidanceClient {
    fn accepts_depth(&self) -> bool {
        self.config.accepts_depth
    }

    fn predict_noise(
        &self,
        noisy: &Image,
        t: f64,
        cond: &Conditioning,
        depth: Option<&Image>,
    ) -> Result<Image, GuidanceError> {
        if depth.is_some() && !self.config.accepts_depth {
            return Err(GuidanceError::DepthUnsupported);
        }
        let body = self.request(noisy, t, cond, depth)?;
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        for attempt in 1..=self.config.retries + 1 {
            match self.attempt(&body, attempt) {
                Attempt::Done(result) => return result,
                Attempt::Transient(err) if attempt > self.config.retries => return Err(err),
                Attempt::Transient(err) => {
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(
                        request = %body.request_id,
                        attempt,
                        error = %err,
                        "guidance request failed, retrying"
                    );
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
        unreachable!("the final attempt always returns")
    }

    /// Issues the conditional and unconditional requests concurrently.
    fn predict_pair(
        &self,
        noisy: &Image,
        t: f64,
        cond: &Conditioning,
        depth: Option<&Image>,
    ) -> Result<(Image, Image), GuidanceError> {
        let uncond = cond.unconditional();
        std::thread::scope(|s| {
            let u = s.spawn(|| self.predict_noise(noisy, t, &uncond, depth));
            let c = self.predict_noise(noisy, t, cond, depth);
            let u = u.join().expect("guidance worker panicked");
            Ok((c?, u?))
        })
    }
}
