use std::fmt;
use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};

use crate::time::SimTime;

/// Telemetry fields in transmission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    ArrayVoltage,
    ArrayCurrent,
    BatteryVoltage,
    ChargeCurrent,
    EnergyTotal,
}

impl Field {
    pub const ALL: [Field; 5] = [
        Field::ArrayVoltage,
        Field::ArrayCurrent,
        Field::BatteryVoltage,
        Field::ChargeCurrent,
        Field::EnergyTotal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::ArrayVoltage => "array_voltage",
            Field::ArrayCurrent => "array_current",
            Field::BatteryVoltage => "battery_voltage",
            Field::ChargeCurrent => "charge_current",
            Field::EnergyTotal => "energy_total",
        }
    }

    pub fn unit(self) -> Unit {
        match self {
            Field::ArrayVoltage | Field::BatteryVoltage => Unit::Volt,
            Field::ArrayCurrent | Field::ChargeCurrent => Unit::Ampere,
            Field::EnergyTotal => Unit::KilowattHour,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown field `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unit {
    Volt,
    Ampere,
    KilowattHour,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Volt => "V",
            Unit::Ampere => "A",
            Unit::KilowattHour => "kWh",
        })
    }
}

/// Largest value a wire field can carry (six digits).
pub fn field_cap() -> Decimal {
    Decimal::new(999_999, 2)
}

/// Half-away-from-zero rounding to hundredths.
pub fn round_hundredths(value: Decimal) -> Decimal {
    value.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)
}

/// One snapshot of the five telemetry values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Reading {
    pub array_voltage: Decimal,
    pub array_current: Decimal,
    pub battery_voltage: Decimal,
    pub charge_current: Decimal,
    pub energy_total: Decimal,
    pub taken_at: SimTime,
}

impl Reading {
    pub fn from_values(values: [Decimal; 5], taken_at: SimTime) -> Self {
        let [array_voltage, array_current, battery_voltage, charge_current, energy_total] = values;
        Self {
            array_voltage,
            array_current,
            battery_voltage,
            charge_current,
            energy_total,
            taken_at,
        }
    }

    pub fn values(&self) -> [Decimal; 5] {
        [
            self.array_voltage,
            self.array_current,
            self.battery_voltage,
            self.charge_current,
            self.energy_total,
        ]
    }

    pub fn get(&self, field: Field) -> Decimal {
        self.values()[field.index()]
    }

    pub fn set(&mut self, field: Field, value: Decimal) {
        let slot = match field {
            Field::ArrayVoltage => &mut self.array_voltage,
            Field::ArrayCurrent => &mut self.array_current,
            Field::BatteryVoltage => &mut self.battery_voltage,
            Field::ChargeCurrent => &mut self.charge_current,
            Field::EnergyTotal => &mut self.energy_total,
        };
        *slot = value;
    }

    /// Values as they will appear on the wire.
    pub fn rounded(&self) -> Reading {
        Reading::from_values(self.values().map(round_hundredths), self.taken_at)
    }

    /// Clamps every value into `[0, 9999.99]`; the flag reports whether
    /// anything had to move.
    pub fn clamped_to_wire(&self) -> (Reading, bool) {
        let cap = field_cap();
        let mut clamped = false;
        let values = self.values().map(|v| {
            let c = v.max(Decimal::ZERO).min(cap);
            clamped |= c != v;
            c
        });
        (Reading::from_values(values, self.taken_at), clamped)
    }

    /// `a,b,c,d,e` with two decimals each.
    pub fn to_csv(&self) -> String {
        self.values()
            .map(|v| format!("{:.2}", round_hundredths(v)))
            .join(",")
    }

    pub fn from_csv(line: &str) -> Result<Reading, String> {
        let parts: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(format!("expected 5 comma-separated values, got {}", parts.len()));
        }
        let mut values = [Decimal::ZERO; 5];
        for (slot, part) in values.iter_mut().zip(&parts) {
            *slot = Decimal::from_str(part).map_err(|e| format!("`{part}`: {e}"))?;
        }
        Ok(Reading::from_values(values, SimTime::ZERO))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_hundredths(d("0.005")), d("0.01"));
        assert_eq!(round_hundredths(d("0.015")), d("0.02"));
        assert_eq!(round_hundredths(d("12.5317")), d("12.53"));
        assert_eq!(round_hundredths(d("-0.005")), d("-0.01"));
    }

    #[test]
    fn csv_round_trip() {
        let r = Reading::from_csv("13.66, 6.17,13.76,0,0.00").unwrap();
        assert_eq!(r.array_voltage, d("13.66"));
        assert_eq!(r.to_csv(), "13.66,6.17,13.76,0.00,0.00");
        assert!(Reading::from_csv("1,2,3").is_err());
        assert!(Reading::from_csv("1,2,3,4,x").is_err());
    }

    #[test]
    fn clamping_reports_movement() {
        let r = Reading::from_values([d("-1"), d("1"), d("10000"), d("0"), d("0")], SimTime::ZERO);
        let (c, moved) = r.clamped_to_wire();
        assert!(moved);
        assert_eq!(c.array_voltage, Decimal::ZERO);
        assert_eq!(c.battery_voltage, d("9999.99"));
        assert!(!c.clamped_to_wire().1);
    }

    #[test]
    fn field_names_parse() {
        for f in Field::ALL {
            assert_eq!(f.name().parse::<Field>().unwrap(), f);
        }
        assert_eq!(Field::EnergyTotal.unit().to_string(), "kWh");
    }
}
