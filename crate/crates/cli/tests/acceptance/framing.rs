//! Fuzzed frames: only typed errors, no panics, bounded buffers.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use lims_core::format::{decode_data_document, decode_ops_message, encode_ops_message, OpsMessage};
use lims_core::messaging::{
    frame_with_limit, read_frame, request, serve, Endpoint, FnHandler, FrameConfig, MessagingError,
};
use rand::distr::uniform::SampleRange;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::io::AsyncWriteExt;

const MAX: u32 = 256 * 1024;
/// Reads grow in 64 KiB steps; allow one step plus bookkeeping past the limit.
const SLACK: usize = 64 * 1024 + 4096;

fn kind(e: &MessagingError) -> &'static str {
    match e {
        MessagingError::EmptyPayload => "empty",
        MessagingError::Truncated { .. } => "truncated",
        MessagingError::Oversized { .. } => "oversized",
        MessagingError::Closed => "closed",
        MessagingError::Timeout => "timeout",
        MessagingError::ProtocolError(_) => "protocol",
        MessagingError::Format(_) => "format",
        other => panic!("untyped error from a frame read: {other:?}"),
    }
}

fn random_bytes(rng: &mut ChaCha8Rng, len: impl SampleRange<usize>) -> Vec<u8> {
    let mut v = vec![0u8; rng.random_range(len)];
    rng.fill_bytes(&mut v);
    v
}

fn ops_payload(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let msg = OpsMessage::ping(&format!("fuzz{}", rng.random_range(0..1000)), "host");
    encode_ops_message(&msg).unwrap()
}

/// One fuzz case: the bytes on the wire and the payloads a correct reader
/// must return before the first error.
fn case(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<Vec<u8>>) {
    match rng.random_range(0..8) {
        0 => {
            let p = random_bytes(rng, 1..=MAX as usize);
            (frame_with_limit(&p, MAX).unwrap(), vec![p])
        }
        1 => {
            let p = ops_payload(rng);
            (frame_with_limit(&p, MAX).unwrap(), vec![p])
        }
        2 => {
            let p = random_bytes(rng, 1..4096);
            let mut f = frame_with_limit(&p, MAX).unwrap();
            let cut = rng.random_range(0..f.len());
            f.truncate(cut);
            (f, vec![])
        }
        3 => {
            let declared = rng.random_range(MAX + 1..=u32::MAX);
            let mut f = declared.to_be_bytes().to_vec();
            f.extend(random_bytes(rng, 0..64));
            (f, vec![])
        }
        4 => {
            let mut f = 0u32.to_be_bytes().to_vec();
            f.extend(random_bytes(rng, 0..16));
            (f, vec![])
        }
        5 => (random_bytes(rng, 0..2 * MAX as usize), vec![]),
        6 => {
            let mut p = ops_payload(rng);
            for _ in 0..rng.random_range(1..8) {
                let i = rng.random_range(0..p.len());
                p[i] = rng.random();
            }
            (frame_with_limit(&p, MAX).unwrap(), vec![p])
        }
        _ => {
            let a = ops_payload(rng);
            let b = random_bytes(rng, 1..2048);
            let mut f = frame_with_limit(&a, MAX).unwrap();
            f.extend(frame_with_limit(&b, MAX).unwrap());
            let tail = random_bytes(rng, 0..6);
            f.extend(tail);
            (f, vec![a, b])
        }
    }
}

pub fn robustness() -> String {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let cfg = FrameConfig {
        max_frame_size: MAX,
        header_timeout: Duration::from_secs(1),
        body_timeout: Duration::from_secs(1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut errors: BTreeMap<&str, usize> = BTreeMap::new();
    let (mut frames_ok, mut decoded, mut rejected, mut worst) = (0usize, 0usize, 0usize, 0usize);

    for i in 0..10_000 {
        let (wire, expected) = case(&mut rng);
        let mut input: &[u8] = &wire;
        let mut got = Vec::new();
        let err = loop {
            let base = crate::reset_peak();
            let r = rt.block_on(read_frame(&mut input, &cfg));
            worst = worst.max(crate::peak() - base);
            match r {
                Ok(p) => got.push(p),
                Err(e) => break e,
            }
        };
        *errors.entry(kind(&err)).or_default() += 1;
        assert!(
            got.len() >= expected.len() && got[..expected.len()] == expected[..],
            "case {i}: valid frames not returned intact"
        );
        for p in &got {
            frames_ok += 1;
            // payload decoders must reject garbage with an error, never panic
            match (decode_ops_message(p), decode_data_document(p)) {
                (Err(_), Err(_)) => rejected += 1,
                _ => decoded += 1,
            }
        }
    }
    assert!(
        worst <= MAX as usize + SLACK,
        "a single read held {worst} bytes; limit {MAX} + {SLACK}"
    );

    // a live server survives garbage connections and still answers
    let survived = rt.block_on(async {
        let ack = |_m: OpsMessage| OpsMessage::ack("OK", "fine");
        let h = serve(&Endpoint::ephemeral("127.0.0.1"), Arc::new(FnHandler(ack)), cfg).await.unwrap();
        for _ in 0..200 {
            let (wire, _) = case(&mut rng);
            if let Ok(mut s) = tokio::net::TcpStream::connect(h.local_addr()).await {
                let _ = s.write_all(&wire).await;
                let _ = s.shutdown().await;
            }
        }
        let reply = request(&h.endpoint(), &OpsMessage::ping("probe", "host"), Duration::from_secs(5)).await;
        h.shutdown().await;
        reply.is_ok()
    });
    assert!(survived, "server stopped answering after garbage connections");

    let summary: Vec<String> = errors.iter().map(|(k, v)| format!("{k} {v}")).collect();
    format!(
        "10000 cases, 0 panics; {frames_ok} frames read ({decoded} decoded, {rejected} rejected by decoders); errors: {}; peak per read {} KiB (limit {} KiB); server alive after 200 garbage connections",
        summary.join(", "),
        worst / 1024,
        MAX / 1024
    )
}
