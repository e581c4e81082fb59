//! Holding-register layout of the charge controller and scaling of raw
//! register words into engineering units.

use std::collections::HashSet;
use std::str::FromStr;

use rust_decimal::Decimal;
use thiserror::Error;

use crate::modbus::{self, ModbusError, ReadRequest, TimingContract};
use crate::reading::{Field, Reading, Unit};
use crate::scalar::{Real, Scalar};
use crate::time::SimTime;

/// Battery voltage multiplier from the controller documentation.
pub const VOLTAGE_SCALAR: &str = "0.002950042724609375";
/// Multiplier used for the current registers.
pub const CURRENT_SCALAR: &str = "0.002034515380859375";
pub const ENERGY_SCALAR: &str = "1.0";

/// Default Modbus slave address of the controller.
pub const CONTROLLER_ADDRESS: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegisterError {
    #[error("duplicate register address {0:#06x}")]
    DuplicateAddress(u16),
    #[error("scalar for {0} must be positive")]
    NonPositiveScalar(Field),
    #[error("invalid register address `{0}`")]
    BadAddress(String),
    #[error("invalid scalar `{0}`")]
    BadScalar(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisterEntry {
    pub field: Field,
    pub address: u16,
    pub scalar: Decimal,
    pub unit: Unit,
}

impl RegisterEntry {
    pub fn new(field: Field, address: u16, scalar: Decimal) -> Self {
        Self {
            field,
            address,
            scalar,
            unit: field.unit(),
        }
    }
}

/// Exactly one entry per telemetry field; immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterMap {
    entries: [RegisterEntry; 5],
}

impl Default for RegisterMap {
    fn default() -> Self {
        let v = Decimal::from_str(VOLTAGE_SCALAR).unwrap();
        let a = Decimal::from_str(CURRENT_SCALAR).unwrap();
        let e = Decimal::from_str(ENERGY_SCALAR).unwrap();
        Self {
            entries: [
                RegisterEntry::new(Field::ArrayVoltage, 0x000A, v),
                RegisterEntry::new(Field::ArrayCurrent, 0x000B, a),
                RegisterEntry::new(Field::BatteryVoltage, 0x0008, v),
                RegisterEntry::new(Field::ChargeCurrent, 0x000C, a),
                RegisterEntry::new(Field::EnergyTotal, 0x001C, e),
            ],
        }
    }
}

impl RegisterMap {
    /// `entries` may come in any order but must cover each field once.
    pub fn new(entries: [RegisterEntry; 5]) -> Result<Self, RegisterError> {
        let mut ordered = RegisterMap::default().entries;
        let mut seen_fields = HashSet::new();
        let mut seen_addrs = HashSet::new();
        for entry in entries {
            if !seen_addrs.insert(entry.address) {
                return Err(RegisterError::DuplicateAddress(entry.address));
            }
            if entry.scalar <= Decimal::ZERO {
                return Err(RegisterError::NonPositiveScalar(entry.field));
            }
            seen_fields.insert(entry.field);
            ordered[entry.field.index()] = RegisterEntry::new(entry.field, entry.address, entry.scalar);
        }
        debug_assert_eq!(seen_fields.len(), 5);
        Ok(Self { entries: ordered })
    }

    /// Replaces one field's address and scalar, re-checking uniqueness.
    pub fn with_override(&self, field: Field, address: u16, scalar: Decimal) -> Result<Self, RegisterError> {
        let mut entries = self.entries;
        entries[field.index()] = RegisterEntry::new(field, address, scalar);
        Self::new(entries)
    }

    pub fn entry(&self, field: Field) -> &RegisterEntry {
        &self.entries[field.index()]
    }

    pub fn entries(&self) -> &[RegisterEntry; 5] {
        &self.entries
    }

    pub fn by_address(&self, address: u16) -> Option<&RegisterEntry> {
        self.entries.iter().find(|e| e.address == address)
    }
}

/// `0x001C`, `001c` or decimal `28`.
pub fn parse_address(text: &str) -> Result<u16, RegisterError> {
    let t = text.trim();
    let parsed = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u16::from_str_radix(hex, 16),
        None => t.parse(),
    };
    parsed.map_err(|_| RegisterError::BadAddress(text.to_string()))
}

pub fn parse_scalar(text: &str) -> Result<Decimal, RegisterError> {
    Decimal::from_str(text.trim()).map_err(|_| RegisterError::BadScalar(text.to_string()))
}

/// `raw × scalar`, at whatever precision `T` carries.
pub fn scale<T: Scalar>(entry: &RegisterEntry, raw: u16) -> T {
    T::from_decimal(entry.scalar) * T::from_u16(raw).expect("u16 fits every scalar type")
}

/// Inverse of [`scale`] as a controller would store it: nearest register
/// word, saturating at the 16-bit range.
pub fn to_raw<T: Real>(entry: &RegisterEntry, value: T) -> u16 {
    let words = (value / T::from_decimal(entry.scalar)).round();
    if !(words > T::zero()) {
        0
    } else if words >= T::lit(65535.0) {
        u16::MAX
    } else {
        words.to_u16().unwrap_or(u16::MAX)
    }
}

/// A serial endpoint that answers one request frame at a time.
pub trait SerialLink {
    /// `None` means the line stayed silent.
    fn transact(&mut self, request: &[u8]) -> Option<Vec<u8>>;

    fn timing(&self) -> TimingContract {
        TimingContract::default()
    }
}

/// Reads one field with a single-register request.
pub fn poll_field(
    link: &mut impl SerialLink,
    map: &RegisterMap,
    device_address: u8,
    field: Field,
) -> Result<Decimal, ModbusError> {
    let entry = map.entry(field);
    let request = modbus::encode_read_request(&ReadRequest::new(device_address, entry.address, 1)?)?;
    let timing = link.timing();
    let bytes = link
        .transact(&request)
        .ok_or_else(|| ModbusError::Timeout(timing.transaction_time(request.len(), 7)))?;
    let response = modbus::decode_response(&bytes)?;
    if response.device_address != device_address {
        return Err(ModbusError::Timeout(timing.transaction_time(request.len(), 7)));
    }
    match response.data_words.as_slice() {
        [word] => Ok(scale::<Decimal>(entry, *word)),
        other => Err(ModbusError::LengthMismatch {
            expected: 7,
            actual: 5 + other.len() * 2,
        }),
    }
}

/// Polls all five fields in transmission order.
pub fn poll_reading(
    link: &mut impl SerialLink,
    map: &RegisterMap,
    device_address: u8,
    taken_at: SimTime,
) -> Result<Reading, ModbusError> {
    let mut reading = Reading {
        taken_at,
        ..Reading::default()
    };
    for field in Field::ALL {
        reading.set(field, poll_field(link, map, device_address, field)?);
    }
    Ok(reading)
}
