//! Wire-format criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowgate::model::MetadataFrame;
use flowgate::transport::wire::decode_body_at;
use flowgate::transport::{FrameKind, WireFrame};

use crate::{ensure, Outcome};

pub fn random_frame(rng: &mut impl Rng) -> WireFrame {
    let depth = rng.gen_range(0..=2);
    let frames = (0..depth)
        .map(|_| MetadataFrame::new(rng.gen(), rng.gen_range(1..=u64::MAX)).expect("positive arity"))
        .collect();
    let payload = (0..rng.gen_range(0..6))
        .map(|_| {
            let name: String = (0..rng.gen_range(0..12))
                .map(|_| rng.gen_range('a'..='z'))
                .collect();
            let value: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
            (name, value)
        })
        .collect();
    WireFrame {
        kind: FrameKind::ALL[rng.gen_range(0..FrameKind::ALL.len())],
        gate_id: rng.gen(),
        frames,
        feed_seq: rng.gen(),
        payload,
    }
}

/// Round trips of random frames and every truncation of each.
pub fn wire_format(frames: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truncations = 0;
    for i in 0..frames {
        let frame = random_frame(&mut rng);
        let bytes = frame.encode().map_err(|e| format!("frame {i}: {e}"))?;
        let back = WireFrame::decode(&bytes).map_err(|e| format!("frame {i}: {e}"))?;
        ensure!(back == frame, "frame {i} decoded to {back:?}, sent {frame:?}");
        ensure!(back.encode().ok().as_ref() == Some(&bytes), "frame {i} re-encodes differently");
        for cut in 0..bytes.len() {
            let whole = catch_unwind(AssertUnwindSafe(|| WireFrame::decode(&bytes[..cut])))
                .map_err(|_| format!("frame {i}: decode panicked at cut {cut}"))?;
            ensure!(whole.is_err(), "frame {i}: truncated to {cut} bytes still decoded");
            // Also cut inside the body, past a correct length field.
            if cut >= 4 {
                let body = catch_unwind(AssertUnwindSafe(|| decode_body_at(&bytes[4..cut], 4)))
                    .map_err(|_| format!("frame {i}: body decode panicked at cut {cut}"))?;
                ensure!(body.is_err(), "frame {i}: body truncated to {cut} bytes still decoded");
            }
            truncations += 1;
        }
    }
    Ok(format!("{frames} frames round-trip bit-exactly, {truncations} truncations all rejected"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_frames() {
        wire_format(20, 9).unwrap();
    }
}
