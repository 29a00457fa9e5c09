//! Packet codec and simulated wireless link between glove and patches.

mod channel;
mod codec;

pub use channel::{
    channel_send, link_stats, parse_trace_log, trace_to_log, Channel, ChannelConfig, Delivery,
    EventKind, LinkStats, SendOutcome, SequenceTracker, TraceEvent,
};
pub use codec::{
    crc16_ccitt_false, decode_packet, dequantize_sensor_frame, encode_packet, intensity_byte,
    motor_command_payload, parse_motor_command, sensor_frame_payload, DecodeError, EncodeError,
    Packet, PacketType, CRC_LEN, HEADER_LEN, MAGIC, MAX_PAYLOAD,
};
