//! Fixed-point payload fields: signed 32-bit, little-endian, 0.001 resolution.

/// Resolution of every scaled payload field (m/s, rad, rad/s).
pub const RESOLUTION: f64 = 0.001;

pub fn encode_fixed(value: f64) -> [u8; 4] {
    let scaled = (value / RESOLUTION).round();
    let clamped = scaled.clamp(i32::MIN as f64, i32::MAX as f64) as i32;
    clamped.to_le_bytes()
}

pub fn decode_fixed(bytes: &[u8]) -> Option<f64> {
    let raw: [u8; 4] = bytes.get(..4)?.try_into().ok()?;
    Some(i32::from_le_bytes(raw) as f64 * RESOLUTION)
}

/// `[index, fixed(value)]`, used by per-joint arm frames.
pub fn encode_indexed(index: u8, value: f64) -> [u8; 5] {
    let mut out = [0u8; 5];
    out[0] = index;
    out[1..].copy_from_slice(&encode_fixed(value));
    out
}

pub fn decode_indexed(bytes: &[u8]) -> Option<(u8, f64)> {
    let index = *bytes.first()?;
    Some((index, decode_fixed(&bytes[1..])?))
}
