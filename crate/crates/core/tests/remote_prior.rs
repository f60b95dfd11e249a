//! Remote prior client against an in-process mock server.

use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use splatedit::guidance::remote::{image_from_payload, read_frame, tensor, write_frame, Frame, RemoteConfig, RemotePrior};
use splatedit::guidance::{
    di_sds_grad, neutralize_masked, sds_grad, ConditionBundle, DiSdsInputs, DiffusionPrior, SdsConfig,
};
use splatedit::guidance::remote::ServerSideControl;
use splatedit::{Error, Image};

#[derive(Default)]
struct Stats {
    active: AtomicUsize,
    peak: AtomicUsize,
    requests: AtomicUsize,
}

struct Mock {
    channels: usize,
    downsample: usize,
    codec: &'static str,
    delay: Duration,
    seen: std::sync::Mutex<Vec<Value>>,
    stats: Stats,
    /// Number of upcoming requests answered by closing the connection.
    drops: AtomicUsize,
}

fn shape(v: &Value) -> [usize; 3] {
    let a = v.as_array().unwrap();
    [0, 1, 2].map(|i| a[i].as_u64().unwrap() as usize)
}

fn ok_tensor(img: &Image) -> Frame {
    let (meta, payload) = tensor("out", img);
    Frame {
        header: json!({"status": "ok", "shape": meta["shape"]}),
        payload,
    }
}

fn respond(mock: &Mock, req: Frame) -> Frame {
    let header = &req.header;
    match header["op"].as_str().unwrap() {
        "handshake" => Frame {
            header: json!({
                "status": "ok",
                "schedule_length": 4,
                "alphas_cumprod": [0.99, 0.9, 0.5, 0.1],
                "latent": {"channels": mock.channels, "downsample": mock.downsample, "codec": mock.codec},
            }),
            payload: vec![],
        },
        "predict_noise" => {
            let active = mock.stats.active.fetch_add(1, Ordering::SeqCst) + 1;
            mock.stats.peak.fetch_max(active, Ordering::SeqCst);
            mock.stats.requests.fetch_add(1, Ordering::SeqCst);
            thread::sleep(mock.delay);
            mock.seen.lock().unwrap().push(header.clone());
            mock.stats.active.fetch_sub(1, Ordering::SeqCst);
            if header["text"] == json!("fail") {
                return Frame {
                    header: json!({"status": "error", "message": "out of memory"}),
                    payload: vec![],
                };
            }
            // Noise estimate: half of the noised latent channels.
            let ts = header["tensors"].as_array().unwrap();
            let [h, w, c] = shape(&ts[0]["shape"]);
            let x = image_from_payload([h, w, c], &req.payload[..h * w * c]).unwrap();
            let out = Image::from_fn(w, h, mock.channels, |i, j, k| 0.5 * x.get(i, j, k));
            ok_tensor(&out)
        }
        "encode" => {
            let ts = header["tensors"].as_array().unwrap();
            let img = image_from_payload(shape(&ts[0]["shape"]), &req.payload).unwrap();
            ok_tensor(&img.map(|v| 2.0 * v))
        }
        "encode_backward" => {
            let ts = header["tensors"].as_array().unwrap();
            let s = shape(&ts[0]["shape"]);
            let n = s.iter().product::<usize>();
            let g = image_from_payload(shape(&ts[1]["shape"]), &req.payload[n..]).unwrap();
            ok_tensor(&g.map(|v| 2.0 * v))
        }
        op => Frame {
            header: json!({"status": "error", "message": format!("unknown op {op}")}),
            payload: vec![],
        },
    }
}

fn serve(listener: TcpListener, mock: Arc<Mock>) {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let mock = mock.clone();
            thread::spawn(move || handle(stream, &mock));
        }
    });
}

fn handle(stream: TcpStream, mock: &Mock) {
    let mut r = BufReader::new(&stream);
    while let Ok(req) = read_frame(&mut r) {
        if mock.drops.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |d| d.checked_sub(1)).is_ok() {
            return;
        }
        let reply = respond(mock, req);
        if write_frame(&mut BufWriter::new(&stream), &reply).is_err() {
            break;
        }
    }
}

fn start(channels: usize, downsample: usize, codec: &'static str, delay_ms: u64) -> (Arc<Mock>, RemoteConfig) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let mock = Arc::new(Mock {
        channels,
        downsample,
        codec,
        delay: Duration::from_millis(delay_ms),
        seen: Default::default(),
        stats: Default::default(),
        drops: AtomicUsize::new(0),
    });
    serve(listener, mock.clone());
    let cfg = RemoteConfig {
        endpoint: addr.to_string(),
        timeout_ms: 5_000,
        retries: 1,
        max_in_flight: 2,
    };
    (mock, cfg)
}

#[test]
fn handshake_sets_schedule_and_geometry() {
    let (_, cfg) = start(4, 2, "pool", 0);
    let prior = RemotePrior::connect(cfg).unwrap();
    assert_eq!(prior.schedule().alphas_cumprod(), &[0.99, 0.9, 0.5, 0.1]);
    let g = prior.latent_geometry();
    assert_eq!((g.channels, g.downsample), (4, 2));
}

#[test]
fn pooled_codec_and_gradient_shape() {
    let (mock, cfg) = start(4, 2, "pool", 0);
    let prior = RemotePrior::connect(cfg).unwrap();
    let img = Image::from_fn(4, 6, 3, |x, y, c| (x + y + c) as f64 * 0.1);
    let lat = prior.encode(&img).unwrap();
    assert_eq!(lat.shape(), (2, 3, 4));
    assert!((lat.get(0, 0, 1) - (0.1 + 0.2 + 0.2 + 0.3) / 4.0).abs() < 1e-12);
    assert_eq!(lat.get(1, 1, 3), 0.0);
    let cfg = SdsConfig {
        t_min: 0.25,
        t_max: 0.75,
        t_max_end: None,
        guidance_scale: 3.0,
        ..Default::default()
    };
    let g = sds_grad(&prior, &img, &ConditionBundle::text("a lamp"), &cfg).unwrap();
    assert_eq!(g.grad.shape(), img.shape());
    let seen = mock.seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0]["conditioning"], json!(["text"]));
    assert_eq!(seen[1]["conditioning"], json!([]));
    assert_eq!(seen[0]["t"], json!(g.t));
}

#[test]
fn remote_codec_round_trips_through_server() {
    let (_, cfg) = start(3, 1, "remote", 0);
    let prior = RemotePrior::connect(cfg).unwrap();
    let img = Image::filled(2, 2, 3, 0.25);
    assert_eq!(prior.encode(&img).unwrap().data(), &[0.5; 12]);
    assert_eq!(prior.encode_backward(&img, &img).unwrap().data(), &[0.5; 12]);
}

#[test]
fn di_sds_sends_all_conditions() {
    let (mock, cfg) = start(3, 1, "pool", 0);
    let prior = RemotePrior::connect(cfg).unwrap();
    let rendered = Image::filled(4, 4, 3, 0.4);
    let mask = Image::from_fn(4, 4, 1, |x, _, _| if x < 2 { 1.0 } else { 0.0 });
    let inputs = DiSdsInputs {
        background_image: neutralize_masked(&rendered, &mask).unwrap(),
        rendered,
        depth_raw: Some(Image::from_fn(4, 4, 1, |x, _, _| x as f64)),
        bbox_mask: Some(mask),
    };
    let cfg = SdsConfig {
        t_min: 0.25,
        t_max: 0.75,
        ..Default::default()
    };
    di_sds_grad(&prior, &ServerSideControl, &inputs, &ConditionBundle::text("a vase"), &cfg).unwrap();
    let seen = mock.seen.lock().unwrap();
    let names: Vec<_> = seen[0]["tensors"].as_array().unwrap().iter().map(|t| t["name"].clone()).collect();
    assert_eq!(names, vec![json!("x_t"), json!("depth"), json!("bbox_mask"), json!("masked_image_latents")]);
    assert_eq!(seen[0]["tensors"][0]["shape"], json!([4, 4, 7]));
}

#[test]
fn server_error_surfaces_as_guidance_error() {
    let (_, cfg) = start(3, 1, "pool", 0);
    let prior = RemotePrior::connect(cfg).unwrap();
    let r = prior.predict_noise(&Image::new(2, 2, 3), 1, &ConditionBundle::text("fail"));
    match r {
        Err(Error::GuidanceUnavailable(m)) => assert!(m.contains("out of memory")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn in_flight_requests_are_capped() {
    let (mock, cfg) = start(3, 1, "pool", 30);
    let prior = RemotePrior::connect(cfg).unwrap();
    thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| {
                prior.predict_noise(&Image::new(2, 2, 3), 1, &ConditionBundle::default()).unwrap();
            });
        }
    });
    assert_eq!(mock.stats.requests.load(Ordering::SeqCst), 8);
    let peak = mock.stats.peak.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak {peak}");
}

#[test]
fn dropped_connection_is_retried() {
    let (mock, cfg) = start(3, 1, "pool", 0);
    let prior = RemotePrior::connect(cfg).unwrap();
    mock.drops.store(1, Ordering::SeqCst);
    assert!(prior.predict_noise(&Image::new(2, 2, 3), 2, &ConditionBundle::default()).is_ok());
    assert_eq!(mock.drops.load(Ordering::SeqCst), 0);
    // More drops than retries exhausts the budget.
    mock.drops.store(2, Ordering::SeqCst);
    let r = prior.predict_noise(&Image::new(2, 2, 3), 2, &ConditionBundle::default());
    assert!(matches!(r, Err(Error::GuidanceUnavailable(_))));
}
