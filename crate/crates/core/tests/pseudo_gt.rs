//! Remote synthesizer against a local HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use splatforge::io::image_io::{decode_png, encode_png};
use splatforge::pseudo_gt::{
    synthesize, HttpTransport, RecordingTransport, RemoteDiffusionConfig, RemoteSynthesizer, ReplayTransport,
    SynthesizerRequest,
};
use splatforge::{Error, QuantImage};

enum Reply {
    /// Nearest-neighbour upscale of the request image, with a seed-dependent tint.
    Upscale,
    Status(u16),
}

fn read_request(stream: &mut TcpStream) -> Vec<u8> {
    let mut reader = BufReader::new(stream);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    body
}

fn answer(body: &[u8]) -> Vec<u8> {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    let src = decode_png(&B64.decode(v["image_b64"].as_str().unwrap()).unwrap()).unwrap();
    let a = v["scale"].as_u64().unwrap() as u32;
    let tint = (v["seed"].as_u64().unwrap() % 7) as u8;
    let mut up = QuantImage::filled(src.width * a, src.height * a, [0; 3]);
    for y in 0..up.height {
        for x in 0..up.width {
            up.set(x, y, src.get(x / a, y / a).map(|c| c.saturating_add(tint)));
        }
    }
    serde_json::to_vec(&serde_json::json!({"image_b64": B64.encode(encode_png(&up).unwrap())})).unwrap()
}

/// Serves requests until the test ends; returns the endpoint and a hit counter.
fn stub(reply: Reply) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let body = read_request(&mut stream);
            counter.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = match reply {
                Reply::Upscale => ("200 OK", answer(&body)),
                Reply::Status(code) => (if code == 500 { "500 Internal Server Error" } else { "404 Not Found" }, b"{}".to_vec()),
            };
            let head = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                payload.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&payload);
        }
    });
    (endpoint, hits)
}

fn cfg(endpoint: String) -> RemoteDiffusionConfig {
    RemoteDiffusionConfig {
        endpoint,
        timeout_secs: 10.0,
        max_retries: 1,
        retry_backoff_ms: 1,
        ..Default::default()
    }
}

fn source() -> QuantImage {
    let mut img = QuantImage::filled(5, 4, [0; 3]);
    for y in 0..4 {
        for x in 0..5 {
            img.set(x, y, [(40 * x) as u8, (50 * y) as u8, 90]);
        }
    }
    img
}

#[test]
fn record_then_replay_is_byte_identical() {
    let (endpoint, hits) = stub(Reply::Upscale);
    let dir = tempfile::tempdir().unwrap();
    let live = RemoteSynthesizer::with_transport(
        cfg(endpoint),
        RecordingTransport {
            inner: HttpTransport::new(std::time::Duration::from_secs(10)),
            dir: dir.path().to_path_buf(),
        },
    )
    .unwrap();
    let req = SynthesizerRequest::upscale(source(), 2, 22);
    let recorded = synthesize(&req, &live).unwrap();
    assert_eq!((recorded.width, recorded.height), (10, 8));
    assert_eq!(recorded.get(9, 7), [160 + 1, 150 + 1, 91]);
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    let fixtures: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(fixtures.len(), 1);
    let fixture = std::fs::read(&fixtures[0]).unwrap();

    let offline = RemoteSynthesizer::with_transport(
        cfg("http://unused.invalid".into()),
        ReplayTransport {
            dir: dir.path().to_path_buf(),
        },
    )
    .unwrap();
    let replayed = synthesize(&req, &offline).unwrap();
    assert_eq!(replayed, recorded);
    assert_eq!(encode_png(&replayed).unwrap(), fixture);
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    // a different seed has no fixture
    let other = SynthesizerRequest::upscale(source(), 2, 23);
    assert!(matches!(synthesize(&other, &offline), Err(Error::SynthesisUnavailable(_))));
}

#[test]
fn server_error_is_protocol() {
    let (endpoint, hits) = stub(Reply::Status(500));
    let s = RemoteSynthesizer::new(cfg(endpoint)).unwrap();
    let req = SynthesizerRequest::upscale(source(), 2, 1);
    assert!(matches!(synthesize(&req, &s), Err(Error::Protocol(_))));
    // 5xx is retried once before giving up
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn not_found_is_protocol_without_retry() {
    let (endpoint, hits) = stub(Reply::Status(404));
    let s = RemoteSynthesizer::new(cfg(endpoint)).unwrap();
    let req = SynthesizerRequest::regenerate(source(), 1);
    assert!(matches!(synthesize(&req, &s), Err(Error::Protocol(_))));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn closed_port_is_unavailable() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let s = RemoteSynthesizer::new(cfg(format!("http://127.0.0.1:{port}"))).unwrap();
    let req = SynthesizerRequest::upscale(source(), 2, 1);
    assert!(matches!(synthesize(&req, &s), Err(Error::SynthesisUnavailable(_))));
}
