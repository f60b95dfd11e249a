//! Client for a diffusion prior served over TCP.
//!
//! Every message is a frame: a little-endian `u32` header length, a UTF-8 JSON
//! header, then a raw little-endian `f32` payload whose size follows from the
//! header. A header carries either `"tensors": [{"name", "shape"}, ...]` (the
//! payload is those tensors back to back) or a single `"shape"`; shapes are
//! `[height, width, channels]` in row-major HWC order.
//!
//! | request op         | request tensors                          | response                              |
//! |--------------------|------------------------------------------|---------------------------------------|
//! | `handshake`        | none                                     | `schedule_length`, `alphas_cumprod`, `latent` |
//! | `predict_noise`    | `x_t` then each present image condition  | `shape` + predicted noise            |
//! | `encode`           | `image`                                  | `shape` + latent                      |
//! | `encode_backward`  | `image`, `latent_grad`                   | `shape` + image gradient              |
//!
//! `predict_noise` headers also carry `t`, `text`, `relative_pose` and the list of
//! `conditioning` keys present. Responses have `"status": "ok"` or
//! `"status": "error"` with a `message`. `encode` ops are only used when the
//! handshake declares `"codec": "remote"`; with `"pool"` the client average-pools
//! by `downsample` itself.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ConditionBundle, DiffusionPrior, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;

const MAX_HEADER_BYTES: u32 = 64 << 20;
const MAX_PAYLOAD_VALUES: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// `host:port`.
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Extra attempts after a transport failure.
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "127.0.0.1:7860".into(),
            timeout_ms: 30_000,
            retries: 2,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    #[default]
    Pool,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGeometry {
    pub channels: usize,
    pub downsample: usize,
    #[serde(default)]
    pub codec: Codec,
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: Value,
    pub payload: Vec<f32>,
}

fn protocol(msg: impl Into<String>) -> Error {
    Error::GuidanceUnavailable(msg.into())
}

fn shape_of(v: &Value) -> Result<[usize; 3]> {
    let arr = v.as_array().filter(|a| a.len() == 3).ok_or_else(|| protocol("shape must be [h, w, c]"))?;
    let mut s = [0usize; 3];
    for (o, x) in s.iter_mut().zip(arr) {
        *o = x.as_u64().ok_or_else(|| protocol("shape entries must be integers"))? as usize;
    }
    Ok(s)
}

fn volume(s: [usize; 3]) -> Result<usize> {
    s.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_PAYLOAD_VALUES)
        .ok_or_else(|| protocol("tensor too large"))
}

/// Number of `f32` values that follow a header.
pub fn payload_len(header: &Value) -> Result<usize> {
    if let Some(ts) = header.get("tensors") {
        let ts = ts.as_array().ok_or_else(|| protocol("tensors must be a list"))?;
        let mut n = 0usize;
        for t in ts {
            n += volume(shape_of(t.get("shape").ok_or_else(|| protocol("tensor without shape"))?)?)?;
        }
        return if n <= MAX_PAYLOAD_VALUES { Ok(n) } else { Err(protocol("payload too large")) };
    }
    match header.get("shape") {
        Some(s) => volume(shape_of(s)?),
        None => Ok(0),
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> std::io::Result<()> {
    let head = serde_json::to_vec(&frame.header)?;
    w.write_u32::<LittleEndian>(head.len() as u32)?;
    w.write_all(&head)?;
    for v in &frame.payload {
        w.write_f32::<LittleEndian>(*v)?;
    }
    w.flush()
}

/// Reads one frame. Transport failures come back as `Err(Ok(io))`, malformed
/// frames as `Err(Err(protocol))`.
pub fn read_frame(r: &mut impl Read) -> std::result::Result<Frame, std::result::Result<std::io::Error, Error>> {
    let len = r.read_u32::<LittleEndian>().map_err(Ok)?;
    if len > MAX_HEADER_BYTES {
        return Err(Err(protocol("header too large")));
    }
    let mut head = vec![0u8; len as usize];
    r.read_exact(&mut head).map_err(Ok)?;
    let header: Value = serde_json::from_slice(&head).map_err(|e| Err(protocol(format!("bad header: {e}"))))?;
    let n = payload_len(&header).map_err(Err)?;
    let mut payload = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut payload).map_err(Ok)?;
    Ok(Frame { header, payload })
}

/// `[h, w, c]` header entry and `f32` values of an image.
pub fn tensor(name: &str, img: &Image) -> (Value, Vec<f32>) {
    (
        json!({"name": name, "shape": [img.height(), img.width(), img.channels()]}),
        img.data().iter().map(|&v| v as f32).collect(),
    )
}

pub fn image_from_payload(shape: [usize; 3], data: &[f32]) -> Result<Image> {
    let [h, w, c] = shape;
    Image::from_vec(w, h, c, data.iter().map(|&v| v as f64).collect())
}

struct Slots {
    used: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap_or_else(|e| e.into_inner()) -= 1;
        self.0.freed.notify_one();
    }
}

/// Remote prior with pooled connections and at most `max_in_flight` concurrent requests.
pub struct RemotePrior {
    config: RemoteConfig,
    schedule: NoiseSchedule,
    latent: LatentGeometry,
    idle: Mutex<Vec<TcpStream>>,
    slots: Slots,
}

impl std::fmt::Debug for RemotePrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePrior")
            .field("endpoint", &self.config.endpoint)
            .field("latent", &self.latent)
            .finish()
    }
}

#[derive(Deserialize)]
struct Handshake {
    schedule_length: usize,
    alphas_cumprod: Vec<f64>,
    latent: LatentGeometry,
}

impl RemotePrior {
    /// Connects and performs the handshake.
    pub fn connect(config: RemoteConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::invalid("max_in_flight must be at least 1"));
        }
        let mut prior = Self {
            slots: Slots {
                used: Mutex::new(0),
                freed: Condvar::new(),
                cap: config.max_in_flight,
            },
            config,
            schedule: NoiseSchedule::default(),
            latent: LatentGeometry {
                channels: 3,
                downsample: 1,
                codec: Codec::Pool,
            },
            idle: Mutex::new(Vec::new()),
        };
        let reply = prior.request(json!({"op": "handshake"}), Vec::new())?;
        let hs: Handshake =
            serde_json::from_value(reply.header).map_err(|e| protocol(format!("bad handshake: {e}")))?;
        if hs.alphas_cumprod.len() != hs.schedule_length {
            return Err(protocol("handshake schedule length disagrees with its table"));
        }
        if hs.latent.channels == 0 || hs.latent.downsample == 0 {
            return Err(protocol("handshake latent geometry must be positive"));
        }
        prior.schedule = NoiseSchedule::from_alphas_cumprod(hs.alphas_cumprod)?;
        prior.latent = hs.latent;
        Ok(prior)
    }

    pub fn latent_geometry(&self) -> LatentGeometry {
        self.latent
    }

    fn open(&self) -> std::io::Result<TcpStream> {
        let timeout = Duration::from_millis(self.config.timeout_ms.max(1));
        let addr = self
            .config
            .endpoint
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "endpoint did not resolve"))?;
        let s = TcpStream::connect_timeout(&addr, timeout)?;
        s.set_read_timeout(Some(timeout))?;
        s.set_write_timeout(Some(timeout))?;
        s.set_nodelay(true)?;
        Ok(s)
    }

    fn exchange(&self, stream: &TcpStream, frame: &Frame) -> std::result::Result<Frame, std::result::Result<std::io::Error, Error>> {
        write_frame(&mut BufWriter::new(stream), frame).map_err(Ok)?;
        read_frame(&mut BufReader::new(stream))
    }

    /// Sends one request, retrying transport failures on fresh connections.
    pub fn request(&self, header: Value, payload: Vec<f32>) -> Result<Frame> {
        let _slot = self.slots.acquire();
        let frame = Frame { header, payload };
        let mut last = String::new();
        for _ in 0..=self.config.retries {
            let pooled = self.idle.lock().unwrap_or_else(|e| e.into_inner()).pop();
            let stream = match pooled.map_or_else(|| self.open(), Ok) {
                Ok(s) => s,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            match self.exchange(&stream, &frame) {
                Ok(reply) => {
                    self.idle.lock().unwrap_or_else(|e| e.into_inner()).push(stream);
                    return match reply.header.get("status").and_then(Value::as_str) {
                        Some("ok") => Ok(reply),
                        Some("error") => Err(protocol(format!(
                            "prior at {} reported: {}",
                            self.config.endpoint,
                            reply.header.get("message").and_then(Value::as_str).unwrap_or("unspecified error")
                        ))),
                        _ => Err(protocol("response without a valid status")),
                    };
                }
                Err(Ok(io)) => last = io.to_string(),
                Err(Err(e)) => return Err(e),
            }
        }
        Err(protocol(format!("prior at {} unreachable: {last}", self.config.endpoint)))
    }

    fn tensor_request(&self, mut header: Value, tensors: &[(&str, &Image)]) -> Result<Image> {
        let mut metas = Vec::new();
        let mut payload = Vec::new();
        for (name, img) in tensors {
            let (m, d) = tensor(name, img);
            metas.push(m);
            payload.extend(d);
        }
        header["tensors"] = Value::Array(metas);
        let reply = self.request(header, payload)?;
        let shape = shape_of(reply.header.get("shape").ok_or_else(|| protocol("response without shape"))?)?;
        image_from_payload(shape, &reply.payload)
    }

    fn pooled_size(&self, image: &Image) -> Result<(usize, usize)> {
        let k = self.latent.downsample;
        if !image.width().is_multiple_of(k) || !image.height().is_multiple_of(k) {
            return Err(Error::invalid(format!(
                "image size {}x{} is not divisible by the latent downsample {k}",
                image.width(),
                image.height()
            )));
        }
        Ok((image.width() / k, image.height() / k))
    }
}

impl DiffusionPrior for RemotePrior {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode(&self, image: &Image) -> Result<Image> {
        if self.latent.codec == Codec::Remote {
            return self.tensor_request(json!({"op": "encode"}), &[("image", image)]);
        }
        let (w, h) = self.pooled_size(image)?;
        let k = self.latent.downsample;
        let norm = (k * k) as f64;
        Ok(Image::from_fn(w, h, self.latent.channels, |x, y, c| {
            if c >= image.channels() {
                return 0.0;
            }
            let mut s = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    s += image.get(x * k + dx, y * k + dy, c);
                }
            }
            s / norm
        }))
    }

    fn encode_backward(&self, image: &Image, latent_grad: &Image) -> Result<Image> {
        if self.latent.codec == Codec::Remote {
            return self.tensor_request(
                json!({"op": "encode_backward"}),
                &[("image", image), ("latent_grad", latent_grad)],
            );
        }
        let (w, h) = self.pooled_size(image)?;
        if latent_grad.shape() != (w, h, self.latent.channels) {
            return Err(Error::invalid("latent gradient does not match the latent geometry"));
        }
        let k = self.latent.downsample;
        let norm = (k * k) as f64;
        Ok(Image::from_fn(image.width(), image.height(), image.channels(), |x, y, c| {
            if c < self.latent.channels {
                latent_grad.get(x / k, y / k, c) / norm
            } else {
                0.0
            }
        }))
    }

    fn predict_noise(&self, x_t: &Image, t: usize, cond: &ConditionBundle) -> Result<Image> {
        let header = json!({
            "op": "predict_noise",
            "t": t,
            "text": cond.text,
            "relative_pose": cond.relative_pose.map(|p| [p.azimuth_deg, p.elevation_deg, p.radius]),
            "conditioning": cond.keys(),
        });
        let down: Vec<String> = cond
            .control
            .as_ref()
            .map(|c| (0..c.down.len()).map(|i| format!("control_down_{i}")).collect())
            .unwrap_or_default();
        let mut tensors: Vec<(&str, &Image)> = vec![("x_t", x_t)];
        let optional = [
            ("reference_image", cond.reference_image.as_ref()),
            ("depth", cond.depth.as_ref()),
            ("bbox_mask", cond.bbox_mask.as_ref()),
            ("masked_image_latents", cond.masked_image_latents.as_ref()),
        ];
        tensors.extend(optional.into_iter().filter_map(|(n, i)| i.map(|i| (n, i))));
        if let Some(c) = &cond.control {
            tensors.push(("control_mid", &c.mid));
            tensors.extend(down.iter().map(String::as_str).zip(c.down.iter()));
        }
        self.tensor_request(header, &tensors)
    }
}

/// Control provider for remote priors that compute depth control server-side.
#[derive(Debug, Clone, Copy, Default)]
pub struct ServerSideControl;

impl super::ControlProvider for ServerSideControl {
    fn residuals(
        &self,
        _x_t: &Image,
        _t: usize,
        _cond: &ConditionBundle,
        _depth: &Image,
    ) -> Result<Option<super::ControlResiduals>> {
        Ok(None)
    }
}
