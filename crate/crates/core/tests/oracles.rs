//! Independent re-derivations checked against the library.

use num_bigint::BigInt;
use proptest::prelude::*;
use rust_decimal::Decimal;

use solartone_core::dtmf;
use solartone_core::modbus::crc16;
use solartone_core::reading::{round_hundredths, Field};
use solartone_core::registers::{scale, RegisterMap, CURRENT_SCALAR, VOLTAGE_SCALAR};

/// CRC-16/MODBUS as polynomial division: reflect each input byte, divide
/// MSB-first by x^16 + x^15 + x^2 + 1 from an all-ones register, reflect
/// the remainder.
fn crc_by_division(bytes: &[u8]) -> u16 {
    let mut reg: u16 = 0xFFFF;
    for &b in bytes {
        reg ^= u16::from(b.reverse_bits()) << 8;
        for _ in 0..8 {
            reg = if reg & 0x8000 != 0 { (reg << 1) ^ 0x8005 } else { reg << 1 };
        }
    }
    reg.reverse_bits()
}

#[test]
fn crc_matches_division_on_known_frames() {
    for frame in [
        &[0x01, 0x03, 0x00, 0x08, 0x00, 0x01][..],
        &[0x01, 0x03, 0x02, 0x10, 0x98],
        &[0x01, 0x03, 0x00, 0x00, 0x00, 0x01],
        b"123456789",
    ] {
        assert_eq!(crc16(frame), crc_by_division(frame), "{frame:02X?}");
    }
    // published check value for CRC-16/MODBUS
    assert_eq!(crc_by_division(b"123456789"), 0x4B37);
    assert_eq!(crc_by_division(&[0x01, 0x03, 0x00, 0x00, 0x00, 0x01]), 0x0A84);
    assert_eq!(crc_by_division(&[0x01, 0x03, 0x02, 0x10, 0x98]), 0x2EB4);
}

proptest! {
    #[test]
    fn crc_matches_division(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(crc16(&bytes), crc_by_division(&bytes));
    }
}

/// `raw × scalar` exactly, as a numerator over 10^scale.
fn exact_product(raw: u16, scalar: &str) -> (BigInt, u32) {
    let (int, frac) = scalar.split_once('.').unwrap_or((scalar, ""));
    let digits: BigInt = format!("{int}{frac}").parse().unwrap();
    (digits * BigInt::from(raw), frac.len() as u32)
}

/// Half away from zero to hundredths, on the exact product.
fn exact_hundredths(raw: u16, scalar: &str) -> String {
    let (num, places) = exact_product(raw, scalar);
    let divisor = BigInt::from(10u32).pow(places - 2);
    let twice = (num * 2 + &divisor) / (divisor * 2);
    let text = format!("{twice:0>3}");
    let (i, f) = text.split_at(text.len() - 2);
    format!("{i}.{f}")
}

#[test]
fn full_scale_products_are_exact() {
    let map = RegisterMap::default();
    for (field, scalar) in [(Field::BatteryVoltage, VOLTAGE_SCALAR), (Field::ArrayCurrent, CURRENT_SCALAR)] {
        let (num, places) = exact_product(0xFFFF, scalar);
        let lib: Decimal = scale(map.entry(field), 0xFFFF);
        assert_eq!(lib.mantissa(), i128::try_from(num).unwrap());
        assert_eq!(lib.scale(), places);
    }
    assert_eq!(exact_hundredths(0x1098, VOLTAGE_SCALAR), "12.53");
}

proptest! {
    #[test]
    fn rounding_matches_exact_arithmetic(raw: u16) {
        let map = RegisterMap::default();
        for (field, scalar) in [(Field::BatteryVoltage, VOLTAGE_SCALAR), (Field::ArrayCurrent, CURRENT_SCALAR)] {
            let lib = round_hundredths(scale::<Decimal>(map.entry(field), raw));
            prop_assert_eq!(format!("{lib:.2}"), exact_hundredths(raw, scalar));
        }
    }
}

/// Tone count for `records` records of `digits`-digit fields: each record
/// contributes five fields and five separators, plus one leading `#`.
#[test]
fn budget_counts_by_hand() {
    for records in 1..=4 {
        for digits in 2..=6 {
            let expected = 1 + records * 5 * (digits + 1);
            assert_eq!(dtmf::transmission_tone_count(records, digits), expected);
            assert_eq!(dtmf::call_budget(records, digits, 2.0), expected as f64 / 2.0);
        }
    }
}
