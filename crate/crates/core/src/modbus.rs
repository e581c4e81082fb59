//! Modbus RTU framing for the Read Holding Registers function (0x03).
//!
//! Frames are byte-exact: big-endian register fields, CRC-16 appended
//! low byte first. Only function 0x03 is understood; every other function
//! code decodes to [`ModbusError::UnsupportedFunction`].

use std::time::Duration;

use thiserror::Error;

/// Read Holding Registers.
pub const READ_HOLDING_REGISTERS: u8 = 0x03;

/// Encoded length of a read request, CRC included.
pub const REQUEST_LEN: usize = 8;

/// Highest unicast slave address on an RTU bus.
pub const MAX_DEVICE_ADDRESS: u8 = 247;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModbusError {
    #[error("device address {0} outside 1..=247")]
    AddressOutOfRange(u8),
    #[error("register count must be at least 1")]
    ZeroRegisterCount,
    #[error("register count {0} does not fit a single response frame")]
    RegisterCountTooLarge(u16),
    #[error("crc mismatch: frame carries {received:#06x}, computed {computed:#06x}")]
    CrcMismatch { computed: u16, received: u16 },
    #[error("length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unsupported function code {0:#04x}")]
    UnsupportedFunction(u8),
    #[error("no response within {0:?}")]
    Timeout(Duration),
}

/// Standard Modbus CRC-16: initial value 0xFFFF, reflected polynomial 0xA001.
pub fn crc16(bytes: &[u8]) -> u16 {
    let mut crc = 0xFFFFu16;
    for &byte in bytes {
        crc ^= u16::from(byte);
        for _ in 0..8 {
            if crc & 1 != 0 {
                crc = (crc >> 1) ^ 0xA001;
            } else {
                crc >>= 1;
            }
        }
    }
    crc
}

fn push_crc(frame: &mut Vec<u8>) {
    let crc = crc16(frame);
    frame.extend_from_slice(&crc.to_le_bytes());
}

/// Checks the trailing two bytes of `frame` against the CRC of the rest.
pub fn verify_crc(frame: &[u8]) -> Result<(), ModbusError> {
    if frame.len() < 3 {
        return Err(ModbusError::LengthMismatch {
            expected: 3,
            actual: frame.len(),
        });
    }
    let (body, tail) = frame.split_at(frame.len() - 2);
    let received = u16::from_le_bytes([tail[0], tail[1]]);
    let computed = crc16(body);
    if received == computed {
        Ok(())
    } else {
        Err(ModbusError::CrcMismatch { computed, received })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadRequest {
    pub device_address: u8,
    pub start_register: u16,
    pub register_count: u16,
}

impl ReadRequest {
    pub fn new(
        device_address: u8,
        start_register: u16,
        register_count: u16,
    ) -> Result<Self, ModbusError> {
        let req = Self {
            device_address,
            start_register,
            register_count,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn function_code(&self) -> u8 {
        READ_HOLDING_REGISTERS
    }

    fn validate(&self) -> Result<(), ModbusError> {
        if self.device_address == 0 || self.device_address > MAX_DEVICE_ADDRESS {
            return Err(ModbusError::AddressOutOfRange(self.device_address));
        }
        if self.register_count == 0 {
            return Err(ModbusError::ZeroRegisterCount);
        }
        // byte_count is a single octet in the response
        if self.register_count > 127 {
            return Err(ModbusError::RegisterCountTooLarge(self.register_count));
        }
        Ok(())
    }
}

pub fn encode_read_request(req: &ReadRequest) -> Result<Vec<u8>, ModbusError> {
    req.validate()?;
    let mut frame = Vec::with_capacity(REQUEST_LEN);
    frame.push(req.device_address);
    frame.push(READ_HOLDING_REGISTERS);
    frame.extend_from_slice(&req.start_register.to_be_bytes());
    frame.extend_from_slice(&req.register_count.to_be_bytes());
    push_crc(&mut frame);
    Ok(frame)
}

pub fn decode_read_request(bytes: &[u8]) -> Result<ReadRequest, ModbusError> {
    if bytes.len() >= 2 && bytes[1] != READ_HOLDING_REGISTERS {
        verify_crc(bytes)?;
        return Err(ModbusError::UnsupportedFunction(bytes[1]));
    }
    if bytes.len() != REQUEST_LEN {
        return Err(ModbusError::LengthMismatch {
            expected: REQUEST_LEN,
            actual: bytes.len(),
        });
    }
    verify_crc(bytes)?;
    ReadRequest::new(
        bytes[0],
        u16::from_be_bytes([bytes[2], bytes[3]]),
        u16::from_be_bytes([bytes[4], bytes[5]]),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResponse {
    pub device_address: u8,
    pub function_code: u8,
    pub data_words: Vec<u16>,
}

impl ReadResponse {
    pub fn new(device_address: u8, data_words: Vec<u16>) -> Self {
        Self {
            device_address,
            function_code: READ_HOLDING_REGISTERS,
            data_words,
        }
    }

    pub fn byte_count(&self) -> usize {
        self.data_words.len() * 2
    }

    pub fn encoded_len(&self) -> usize {
        5 + self.byte_count()
    }
}

pub fn encode_response(resp: &ReadResponse) -> Result<Vec<u8>, ModbusError> {
    if resp.function_code != READ_HOLDING_REGISTERS {
        return Err(ModbusError::UnsupportedFunction(resp.function_code));
    }
    if resp.data_words.len() > 127 {
        return Err(ModbusError::RegisterCountTooLarge(resp.data_words.len() as u16));
    }
    let mut frame = Vec::with_capacity(resp.encoded_len());
    frame.push(resp.device_address);
    frame.push(resp.function_code);
    frame.push(resp.byte_count() as u8);
    for word in &resp.data_words {
        frame.extend_from_slice(&word.to_be_bytes());
    }
    push_crc(&mut frame);
    Ok(frame)
}

pub fn decode_response(bytes: &[u8]) -> Result<ReadResponse, ModbusError> {
    if bytes.len() < 5 {
        return Err(ModbusError::LengthMismatch {
            expected: 5,
            actual: bytes.len(),
        });
    }
    verify_crc(bytes)?;
    if bytes[1] != READ_HOLDING_REGISTERS {
        return Err(ModbusError::UnsupportedFunction(bytes[1]));
    }
    let byte_count = usize::from(bytes[2]);
    let expected = 5 + byte_count;
    if byte_count % 2 != 0 || bytes.len() != expected {
        return Err(ModbusError::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let data_words = bytes[3..3 + byte_count]
        .chunks_exact(2)
        .map(|pair| u16::from_be_bytes([pair[0], pair[1]]))
        .collect();
    Ok(ReadResponse {
        device_address: bytes[0],
        function_code: bytes[1],
        data_words,
    })
}

/// Silent-interval framing on the serial line.
///
/// Defaults follow the 4 / 2 byte-time figures; [`TimingContract::standard`]
/// gives the 3.5 / 1.5 figures of the Modbus reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingContract {
    pub baud: u32,
    /// Bits on the wire per character; 8N1 plus start bit is 10.
    pub bits_per_byte: u32,
    pub idle_byte_times: f64,
    pub max_gap_byte_times: f64,
}

impl Default for TimingContract {
    fn default() -> Self {
        Self {
            baud: 9600,
            bits_per_byte: 10,
            idle_byte_times: 4.0,
            max_gap_byte_times: 2.0,
        }
    }
}

impl TimingContract {
    pub fn standard(baud: u32) -> Self {
        Self {
            baud,
            idle_byte_times: 3.5,
            max_gap_byte_times: 1.5,
            ..Self::default()
        }
    }

    pub fn with_baud(baud: u32) -> Self {
        Self {
            baud,
            ..Self::default()
        }
    }

    fn byte_times(&self, count: f64) -> Duration {
        Duration::from_secs_f64(count * f64::from(self.bits_per_byte) / f64::from(self.baud))
    }

    pub fn byte_time(&self) -> Duration {
        self.byte_times(1.0)
    }

    pub fn pre_frame_idle(&self) -> Duration {
        self.byte_times(self.idle_byte_times)
    }

    pub fn max_interbyte_gap(&self) -> Duration {
        self.byte_times(self.max_gap_byte_times)
    }

    /// Idle time plus back-to-back transmission of `bytes` characters.
    pub fn frame_time(&self, bytes: usize) -> Duration {
        self.byte_times(self.idle_byte_times + bytes as f64)
    }

    /// Request out, response back, both framed.
    pub fn transaction_time(&self, request_bytes: usize, response_bytes: usize) -> Duration {
        self.frame_time(request_bytes) + self.frame_time(response_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // The printed request frame in the controller write-up shows C8 05; the
    // standard CRC of these six bytes is 0xC805, i.e. 05 C8 on the wire.
    #[test]
    fn battery_voltage_request_frame() {
        let req = ReadRequest::new(1, 0x0008, 1).unwrap();
        assert_eq!(
            encode_read_request(&req).unwrap(),
            [0x01, 0x03, 0x00, 0x08, 0x00, 0x01, 0x05, 0xC8]
        );
        assert_eq!(crc16(&[0x01, 0x03, 0x00, 0x08, 0x00, 0x01]), 0xC805);
        let transposed = [0x01, 0x03, 0x00, 0x08, 0x00, 0x01, 0xC8, 0x05];
        assert!(matches!(
            decode_read_request(&transposed),
            Err(ModbusError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn battery_response_vector() {
        let frame = [0x01, 0x03, 0x02, 0x10, 0x98, 0xB4, 0x2E];
        assert_eq!(crc16(&frame[..5]), 0x2EB4);
        let resp = decode_response(&frame).unwrap();
        assert_eq!(resp.device_address, 1);
        assert_eq!(resp.data_words, vec![0x1098]);
        assert_eq!(encode_response(&resp).unwrap(), frame);
    }

    #[test]
    fn broadcast_and_out_of_range_addresses_rejected() {
        assert_eq!(
            ReadRequest::new(0, 8, 1),
            Err(ModbusError::AddressOutOfRange(0))
        );
        assert_eq!(
            ReadRequest::new(248, 8, 1),
            Err(ModbusError::AddressOutOfRange(248))
        );
        let raw = ReadRequest {
            device_address: 0,
            start_register: 8,
            register_count: 1,
        };
        assert!(encode_read_request(&raw).is_err());
        assert_eq!(
            ReadRequest::new(1, 8, 0),
            Err(ModbusError::ZeroRegisterCount)
        );
    }

    #[test]
    fn every_single_bit_flip_fails_crc() {
        let frames: [&[u8]; 2] = [
            &[0x01, 0x03, 0x00, 0x08, 0x00, 0x01, 0x05, 0xC8],
            &[0x01, 0x03, 0x02, 0x10, 0x98, 0xB4, 0x2E],
        ];
        for frame in frames {
            for bit in 0..frame.len() * 8 {
                let mut corrupt = frame.to_vec();
                corrupt[bit / 8] ^= 1 << (bit % 8);
                assert!(
                    matches!(verify_crc(&corrupt), Err(ModbusError::CrcMismatch { .. })),
                    "bit {bit} flip accepted"
                );
            }
        }
    }

    #[test]
    fn flipped_data_bit_is_crc_mismatch() {
        let frame = [0x01, 0x03, 0x02, 0x10 ^ 0x04, 0x98, 0xB4, 0x2E];
        assert!(matches!(
            decode_response(&frame),
            Err(ModbusError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn byte_count_disagreement_is_length_mismatch() {
        let mut frame = vec![0x01, 0x03, 0x04, 0x10, 0x98];
        push_crc(&mut frame);
        assert!(matches!(
            decode_response(&frame),
            Err(ModbusError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn other_function_codes_unsupported() {
        let mut frame = vec![0x01, 0x04, 0x02, 0x10, 0x98];
        push_crc(&mut frame);
        assert_eq!(
            decode_response(&frame),
            Err(ModbusError::UnsupportedFunction(0x04))
        );
        let mut req = vec![0x01, 0x06, 0x00, 0x08, 0x00, 0x01];
        push_crc(&mut req);
        assert_eq!(
            decode_read_request(&req),
            Err(ModbusError::UnsupportedFunction(0x06))
        );
    }

    #[test]
    fn timing_at_9600_baud() {
        let t = TimingContract::default();
        let idle = t.pre_frame_idle().as_secs_f64();
        assert!((idle - 40.0 / 9600.0).abs() < 1e-8);
        assert!((idle * 1e3 - 4.1667).abs() < 1e-3);
        assert!((t.max_interbyte_gap().as_secs_f64() - 20.0 / 9600.0).abs() < 1e-8);
        let std = TimingContract::standard(9600);
        assert!((std.pre_frame_idle().as_secs_f64() - 35.0 / 9600.0).abs() < 1e-8);
    }

    #[test]
    fn timing_scales_inversely_with_baud() {
        let slow = TimingContract::with_baud(4800);
        let fast = TimingContract::with_baud(19200);
        let ratio = slow.pre_frame_idle().as_secs_f64() / fast.pre_frame_idle().as_secs_f64();
        assert!((ratio - 4.0).abs() < 1e-6);
        let ratio = slow.max_interbyte_gap().as_secs_f64() / fast.max_interbyte_gap().as_secs_f64();
        assert!((ratio - 4.0).abs() < 1e-6);
    }
}
