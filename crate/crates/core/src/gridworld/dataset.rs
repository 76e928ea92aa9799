//! Binary dataset file.
//!
//! Header: `"DW0D"`, version `u32`, record count `u64`. Each record is
//! 3337 bytes: clip id `u32`, frame `u16`, command `u8`, pad `u8`, ego
//! (x, y, heading, speed) as `f32`, 3072 image bytes, 12 `f32` expert
//! waypoint coordinates, 4 x 6 x 2 `f32` agent positions and a `u8`
//! presence mask. All little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::dynamics::{Command, MAX_AGENTS};
use super::render::IMAGE_BYTES;
use super::{EgoState, Result, SceneRecord, Trajectory, WorldError, HORIZON};

pub const DATASET_MAGIC: &[u8; 4] = b"DW0D";
const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;
pub const RECORD_BYTES: usize = 4 + 2 + 1 + 1 + 16 + IMAGE_BYTES + 12 * 4 + MAX_AGENTS * HORIZON * 2 * 4 + 1;

fn f32s(out: &mut Vec<u8>, v: impl IntoIterator<Item = f64>) {
    for x in v {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn encode_record(r: &SceneRecord, out: &mut Vec<u8>) -> Result<()> {
    if r.image.len() != IMAGE_BYTES {
        return Err(WorldError::Format(format!("image has {} bytes", r.image.len())));
    }
    out.extend_from_slice(&r.clip_id.to_le_bytes());
    out.extend_from_slice(&r.frame.to_le_bytes());
    out.push(r.command as u8);
    out.push(0);
    f32s(out, [r.ego.x, r.ego.y, r.ego.heading, r.ego.speed]);
    out.extend_from_slice(&r.image);
    f32s(out, r.expert.flatten());
    for a in &r.agent_futures {
        f32s(out, a.iter().flatten().copied());
    }
    out.push(r.presence);
    Ok(())
}

pub fn encode_dataset(records: &[SceneRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_BYTES + records.len() * RECORD_BYTES);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        encode_record(r, &mut out)?;
    }
    Ok(out)
}

fn f32_at(b: &[u8], at: usize) -> f64 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap()) as f64
}

fn decode_record(b: &[u8]) -> Result<SceneRecord> {
    let clip_id = u32::from_le_bytes(b[0..4].try_into().unwrap());
    let frame = u16::from_le_bytes(b[4..6].try_into().unwrap());
    let command = Command::from_u8(b[6]).ok_or_else(|| WorldError::Format(format!("command byte {}", b[6])))?;
    if b[7] != 0 {
        return Err(WorldError::Format(format!("pad byte {}", b[7])));
    }
    let ego = EgoState {
        x: f32_at(b, 8),
        y: f32_at(b, 12),
        heading: f32_at(b, 16),
        speed: f32_at(b, 20),
    };
    let mut at = 24;
    let image = b[at..at + IMAGE_BYTES].to_vec();
    at += IMAGE_BYTES;
    let flat: Vec<f64> = (0..12).map(|i| f32_at(b, at + 4 * i)).collect();
    let expert = Trajectory::from_flat(&flat)?;
    at += 48;
    let mut agent_futures = [[[0.0; 2]; HORIZON]; MAX_AGENTS];
    for a in agent_futures.iter_mut() {
        for p in a.iter_mut() {
            *p = [f32_at(b, at), f32_at(b, at + 4)];
            at += 8;
        }
    }
    let presence = b[at];
    if presence >> MAX_AGENTS != 0 {
        return Err(WorldError::Format(format!("presence mask {presence:#x}")));
    }
    for (i, a) in agent_futures.iter().enumerate() {
        if presence & (1 << i) == 0 && a.iter().flatten().any(|&v| v != 0.0) {
            return Err(WorldError::Format(format!("absent agent {i} is not zero-filled")));
        }
    }
    Ok(SceneRecord {
        clip_id,
        frame,
        command,
        ego,
        image,
        expert,
        agent_futures,
        presence,
        fallback: false,
    })
}

fn header(bytes: &[u8]) -> Result<u64> {
    if bytes.len() < HEADER_BYTES {
        return Err(WorldError::Format("truncated header".into()));
    }
    if &bytes[0..4] != DATASET_MAGIC {
        return Err(WorldError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(WorldError::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expect = (count as u128) * RECORD_BYTES as u128 + HEADER_BYTES as u128;
    if expect != bytes.len() as u128 {
        return Err(WorldError::Format(format!(
            "{count} records need {expect} bytes, file has {}",
            bytes.len()
        )));
    }
    Ok(count)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SceneRecord>> {
    let count = header(bytes)? as usize;
    bytes[HEADER_BYTES..]
        .chunks(RECORD_BYTES)
        .take(count)
        .map(decode_record)
        .collect()
}

/// Counts reported by the format checker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub records: u64,
    pub clips: usize,
    pub commands: [u64; 4],
}

/// Structural validation: header, sizes, field ranges, finite values,
/// frames contiguous within each clip.
pub fn validate_dataset_bytes(bytes: &[u8]) -> Result<DatasetSummary> {
    let records = decode_dataset(bytes)?;
    let mut commands = [0u64; 4];
    let mut clips = 0;
    let mut prev: Option<(u32, u16)> = None;
    for (i, r) in records.iter().enumerate() {
        let ego = [r.ego.x, r.ego.y, r.ego.heading, r.ego.speed];
        if !ego.iter().all(|v| v.is_finite()) || r.ego.speed < 0.0 {
            return Err(WorldError::Format(format!("record {i}: bad ego state")));
        }
        if !r.expert.is_finite() || !r.expert.in_bounds(super::WORKSPACE_BOUND) {
            return Err(WorldError::Format(format!(
                "record {i}: expert trajectory out of bounds"
            )));
        }
        if !r.agent_futures.iter().flatten().flatten().all(|v| v.is_finite()) {
            return Err(WorldError::Format(format!("record {i}: non-finite agent future")));
        }
        match prev {
            Some((c, f)) if c == r.clip_id => {
                if r.frame != f + 1 {
                    return Err(WorldError::Format(format!("record {i}: frame {} follows {f}", r.frame)));
                }
            }
            _ => {
                if r.frame != 0 {
                    return Err(WorldError::Format(format!(
                        "record {i}: clip starts at frame {}",
                        r.frame
                    )));
                }
                clips += 1;
            }
        }
        prev = Some((r.clip_id, r.frame));
        commands[r.command as usize] += 1;
    }
    Ok(DatasetSummary {
        records: records.len() as u64,
        clips,
        commands,
    })
}

pub fn write_dataset(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let bytes = encode_dataset(records)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> SceneRecord {
        let mut agent_futures = [[[0.0; 2]; HORIZON]; MAX_AGENTS];
        agent_futures[1] = std::array::from_fn(|i| [10.0 + i as f64, -0.5]);
        SceneRecord {
            clip_id: 0x0001_0002,
            frame: 3,
            command: Command::Left,
            ego: EgoState {
                x: -12.5,
                y: 0.25,
                heading: 0.125,
                speed: 4.5,
            },
            image: (0..IMAGE_BYTES).map(|i| (i % 251) as u8).collect(),
            expert: Trajectory(std::array::from_fn(|i| [2.0 * i as f64, 0.5])),
            agent_futures,
            presence: 0b10,
            fallback: false,
        }
    }

    #[test]
    fn record_size_and_layout() {
        assert_eq!(RECORD_BYTES, 3337);
        let b = encode_dataset(&[record()]).unwrap();
        assert_eq!(b.len(), HEADER_BYTES + RECORD_BYTES);
        assert_eq!(&b[0..4], b"DW0D");
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 1);
        let r = &b[HEADER_BYTES..];
        assert_eq!(&r[0..4], &0x0001_0002u32.to_le_bytes());
        assert_eq!(&r[4..6], &3u16.to_le_bytes());
        assert_eq!(r[6], 1);
        assert_eq!(r[7], 0);
        assert_eq!(&r[8..12], &(-12.5f32).to_le_bytes());
        assert_eq!(r[24..24 + IMAGE_BYTES], record().image[..]);
        assert_eq!(r[RECORD_BYTES - 1], 0b10);
    }

    #[test]
    fn round_trip() {
        let mut r = record();
        r.frame = 0;
        let b = encode_dataset(&[r.clone()]).unwrap();
        assert_eq!(decode_dataset(&b).unwrap(), vec![r]);
        assert_eq!(validate_dataset_bytes(&b).unwrap().commands, [0, 1, 0, 0]);
    }

    #[test]
    fn rejects_corruption() {
        let b = encode_dataset(&[record()]).unwrap();
        assert!(decode_dataset(&b[..b.len() - 1]).is_err());
        let mut m = b.clone();
        m[HEADER_BYTES + 6] = 9;
        assert!(decode_dataset(&m).is_err());
        let mut m = b.clone();
        m[HEADER_BYTES + 7] = 1;
        assert!(decode_dataset(&m).is_err());
        let mut m = b;
        m[0] = b'X';
        assert!(decode_dataset(&m).is_err());
    }
}
