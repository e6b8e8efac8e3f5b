//! Binary portable graymap (P5).
//!
//! Layout: `P5`, whitespace, width, whitespace, height, whitespace, maxval, one
//! whitespace byte, then `width*height` samples row-major. Samples are one byte
//! when `maxval < 256`, otherwise two bytes big-endian. `#` starts a comment that
//! runs to the end of the line (header only).

use std::path::Path;

use super::PipelineError;
use crate::tensor::Tensor;

/// Parse P5 bytes into a `1×h×w` tensor scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor, PipelineError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PipelineError::Header("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        let start_ws = pos;
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        if pos == start_ws {
            return Err(PipelineError::Header(format!("expected whitespace before field {k}")));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| PipelineError::Header(format!("bad numeric field {k}: `{text}`")))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || !(1..=65535).contains(&maxval) {
        return Err(PipelineError::Header(format!("invalid dimensions {w}x{h} or maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PipelineError::Header("missing whitespace after maxval".into()));
    }
    pos += 1;
    let width = if maxval < 256 { 1 } else { 2 };
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(width)).ok_or_else(|| PipelineError::Header("image too large".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PipelineError::Truncated { expected, found: payload.len() });
    }
    let scale = maxval as f64;
    let data: Vec<f64> = if width == 1 {
        payload[..expected].iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    } else {
        payload[..expected].chunks_exact(2).map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0)).collect()
    };
    Ok(Tensor::from_vec(vec![1, h, w], data)?)
}

/// Encode a `1×h×w` (or `h×w`) image with values in `[0, 1]` at 8 or 16 bits.
pub fn encode_pgm(image: &Tensor, bits: u32) -> Result<Vec<u8>, PipelineError> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(PipelineError::Config(format!("expected 1 x h x w image, got {:?}", image.shape()))),
    };
    let maxval: u32 = match bits {
        8 => 255,
        16 => 65535,
        _ => return Err(PipelineError::Config(format!("bit depth must be 8 or 16, got {bits}"))),
    };
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if bits == 8 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn load_pgm(path: &Path) -> Result<Tensor, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn save_pgm(path: &Path, image: &Tensor, bits: u32) -> Result<(), PipelineError> {
    let bytes = encode_pgm(image, bits)?;
    std::fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::sample_rng;
    use rand::Rng;

    #[test]
    fn eight_bit_values() {
        let t = decode_pgm(b"P5\n2 2\n255\n\x00\xff\x80\x40").unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn comments_and_sixteen_bit() {
        let mut b = b"P5 # made by hand\n1 2\n# depth\n65535\n".to_vec();
        b.extend_from_slice(&[0xff, 0xff, 0x00, 0x01]);
        let t = decode_pgm(&b).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0 / 65535.0]);
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let mut rng = sample_rng(2, &[]);
        let img = Tensor::from_fn(&[1, 7, 5], |_| rng.gen_range(0.0..=1.0));
        let back = decode_pgm(&encode_pgm(&img, 16).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 65535.0);
        let back8 = decode_pgm(&encode_pgm(&img, 8).unwrap()).unwrap();
        assert!(back8.max_abs_diff(&img) <= 1.0 / 255.0);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode_pgm(b"P2\n2 2\n255\n1 2 3 4"), Err(PipelineError::Header(_))));
        assert!(matches!(decode_pgm(b"P5\n2 x\n255\n"), Err(PipelineError::Header(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n0\n\0\0\0\0"), Err(PipelineError::Header(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x00\x01"), Err(PipelineError::Truncated { expected: 4, found: 2 })));
        assert!(matches!(decode_pgm(b""), Err(PipelineError::Header(_))));
        assert!(matches!(decode_pgm(b"P5"), Err(PipelineError::Header(_))));
        assert!(matches!(decode_pgm(b"P5\n99999999999999999999999 2\n255\n"), Err(PipelineError::Header(_))));
    }
}
