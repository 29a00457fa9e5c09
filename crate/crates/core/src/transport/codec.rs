//! Packet framing: `[0xA5, type, seq, len, payload.., crc_hi, crc_lo]`.
//!
//! The CRC is CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection,
//! no final xor) over every byte before it, transmitted big-endian.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{adc_max, Activation, MotorCommand, RawFrame, DEFAULT_STIMULUS_MS};

pub const MAGIC: u8 = 0xA5;
pub const MAX_PAYLOAD: usize = 250;
pub const HEADER_LEN: usize = 4;
pub const CRC_LEN: usize = 2;

const CRC_TABLE: [u16; 256] = {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
};

pub fn crc16_ccitt_false(bytes: &[u8]) -> u16 {
    bytes.iter().fold(0xFFFF, |crc, b| {
        (crc << 8) ^ CRC_TABLE[usize::from((crc >> 8) as u8 ^ b)]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum PacketType {
    SensorFrame = 0x01,
    MotorCommand = 0x02,
    Ack = 0x03,
    Config = 0x04,
}

impl TryFrom<u8> for PacketType {
    type Error = DecodeError;

    fn try_from(b: u8) -> Result<Self, DecodeError> {
        Ok(match b {
            0x01 => PacketType::SensorFrame,
            0x02 => PacketType::MotorCommand,
            0x03 => PacketType::Ack,
            0x04 => PacketType::Config,
            other => return Err(DecodeError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub ptype: PacketType,
    pub seq: u8,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize(usize),
    #[error("motor id {0} does not fit in one byte")]
    MotorId(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic byte {0:#04x}")]
    BadMagic(u8),
    #[error(
        "length mismatch: header declares {declared} payload bytes, frame carries {actual} bytes"
    )]
    LengthMismatch { declared: usize, actual: usize },
    #[error("crc mismatch: frame carries {received:#06x}, computed {computed:#06x}")]
    CrcFailure { received: u16, computed: u16 },
    #[error("unknown packet type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
}

impl Packet {
    pub fn new(ptype: PacketType, seq: u8, payload: Vec<u8>) -> Result<Self, EncodeError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(EncodeError::Oversize(payload.len()));
        }
        Ok(Packet {
            ptype,
            seq,
            payload,
        })
    }

    pub fn ack(seq: u8) -> Self {
        Packet {
            ptype: PacketType::Ack,
            seq,
            payload: Vec::new(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        encode_packet(self.ptype, self.seq, &self.payload)
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CRC_LEN
    }
}

pub fn encode_packet(ptype: PacketType, seq: u8, payload: &[u8]) -> Result<Vec<u8>, EncodeError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(EncodeError::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CRC_LEN);
    out.extend_from_slice(&[MAGIC, ptype as u8, seq, payload.len() as u8]);
    out.extend_from_slice(payload);
    let crc = crc16_ccitt_false(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Decodes exactly one frame. Checks run magic, length, CRC, then type, so
/// a corrupted type byte reports as a CRC failure.
pub fn decode_packet(bytes: &[u8]) -> Result<Packet, DecodeError> {
    let Some(&magic) = bytes.first() else {
        return Err(DecodeError::LengthMismatch {
            declared: 0,
            actual: 0,
        });
    };
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN + CRC_LEN {
        let declared = bytes.get(3).map_or(0, |b| usize::from(*b));
        return Err(DecodeError::LengthMismatch {
            declared,
            actual: bytes.len().saturating_sub(HEADER_LEN),
        });
    }
    let declared = usize::from(bytes[3]);
    let actual = bytes.len() - HEADER_LEN - CRC_LEN;
    if declared != actual || declared > MAX_PAYLOAD {
        return Err(DecodeError::LengthMismatch { declared, actual });
    }
    let body_end = HEADER_LEN + declared;
    let received = u16::from_be_bytes([bytes[body_end], bytes[body_end + 1]]);
    let computed = crc16_ccitt_false(&bytes[..body_end]);
    if received != computed {
        return Err(DecodeError::CrcFailure { received, computed });
    }
    Ok(Packet {
        ptype: PacketType::try_from(bytes[1])?,
        seq: bytes[2],
        payload: bytes[HEADER_LEN..body_end].to_vec(),
    })
}

/// Rescales ADC counts to one byte each, row-major.
pub fn sensor_frame_payload(raw: &RawFrame) -> Vec<u8> {
    let max = f64::from(raw.max_count());
    raw.counts
        .iter()
        .map(|c| (f64::from(*c) * 255.0 / max).round() as u8)
        .collect()
}

/// Expands 8-bit counts back to `adc_bits`. The error is at most half of one
/// 8-bit step, i.e. `max_count / 510` counts.
pub fn dequantize_sensor_frame(
    payload: &[u8],
    sensors: usize,
    adc_bits: u8,
    timestamp_ms: u64,
) -> Result<RawFrame, DecodeError> {
    if payload.len() != sensors {
        return Err(DecodeError::MalformedPayload(format!(
            "sensor frame has {} bytes, expected {sensors}",
            payload.len()
        )));
    }
    let max = f64::from(adc_max(adc_bits));
    Ok(RawFrame {
        counts: payload
            .iter()
            .map(|b| (f64::from(*b) * max / 255.0).round() as u16)
            .collect(),
        adc_bits,
        timestamp_ms,
    })
}

pub fn intensity_byte(intensity: f64) -> u8 {
    (intensity.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[count, (motor_id, intensity)..]` with intensity scaled to 0..=255.
pub fn motor_command_payload(cmd: &MotorCommand) -> Result<Vec<u8>, EncodeError> {
    let len = 1 + 2 * cmd.activations.len();
    if len > MAX_PAYLOAD {
        return Err(EncodeError::Oversize(len));
    }
    let mut out = Vec::with_capacity(len);
    out.push(cmd.activations.len() as u8);
    for a in &cmd.activations {
        let id = u8::try_from(a.motor).map_err(|_| EncodeError::MotorId(a.motor))?;
        out.push(id);
        out.push(intensity_byte(a.intensity));
    }
    Ok(out)
}

pub fn parse_motor_command(payload: &[u8]) -> Result<MotorCommand, DecodeError> {
    let (&count, rest) = payload
        .split_first()
        .ok_or_else(|| DecodeError::MalformedPayload("empty motor command".into()))?;
    if rest.len() != 2 * usize::from(count) {
        return Err(DecodeError::MalformedPayload(format!(
            "motor command declares {count} activations in {} bytes",
            rest.len()
        )));
    }
    let activations = rest
        .chunks_exact(2)
        .map(|pair| Activation {
            motor: usize::from(pair[0]),
            intensity: f64::from(pair[1]) / 255.0,
        })
        .collect();
    MotorCommand::new(activations, DEFAULT_STIMULUS_MS)
        .map_err(|e| DecodeError::MalformedPayload(e.to_string()))
}
