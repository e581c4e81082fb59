//! Solar array, PWM charge controller and lead-acid battery, plus the
//! controller's Modbus server.
//!
//! The battery is a coulomb counter with a linear open-circuit voltage
//! curve and one series resistance. Generic over `f32`/`f64`.

use crate::modbus::{self, ReadResponse, TimingContract};
use crate::reading::Field;
use crate::registers::{to_raw, RegisterMap, SerialLink, CONTROLLER_ADDRESS};
use crate::scalar::Real;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChargeStage {
    Bulk,
    Absorb,
    Float,
    Night,
}

impl ChargeStage {
    pub fn name(self) -> &'static str {
        match self {
            ChargeStage::Bulk => "bulk",
            ChargeStage::Absorb => "absorb",
            ChargeStage::Float => "float",
            ChargeStage::Night => "night",
        }
    }
}

/// A daily window in seconds after midnight; `end < start` wraps midnight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyWindow<F> {
    pub start_s: F,
    pub end_s: F,
}

impl<F: Real> DailyWindow<F> {
    pub fn new(start_s: F, end_s: F) -> Self {
        Self { start_s, end_s }
    }

    pub fn contains(&self, time_of_day: F) -> bool {
        if self.start_s <= self.end_s {
            time_of_day >= self.start_s && time_of_day < self.end_s
        } else {
            time_of_day >= self.start_s || time_of_day < self.end_s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadWindow<F> {
    pub window: DailyWindow<F>,
    pub watts: F,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moonlight<F> {
    pub window: DailyWindow<F>,
    pub amps: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig<F> {
    pub array_watts: F,
    /// Array voltage at its maximum power point; sets the rated current.
    pub array_mpp_voltage: F,
    pub array_open_circuit_voltage: F,
    /// Array terminal sits this far above the battery while the PWM switch
    /// is closed.
    pub pwm_drop: F,
    pub battery_capacity_ah: F,
    pub nominal_voltage: F,
    pub ocv_empty: F,
    pub ocv_full: F,
    pub internal_resistance: F,
    pub absorb_voltage: F,
    pub float_voltage: F,
    pub absorb_duration_s: F,
    pub initial_soc: F,
    /// Half-sine insolation between sunrise and sunset.
    pub daylight: DailyWindow<F>,
    /// Overcast multiplier on the insolation peak, 0..=1.
    pub weather: F,
    pub moonlight: Option<Moonlight<F>>,
    pub loads: Vec<LoadWindow<F>>,
}

impl<F: Real> Default for PlantConfig<F> {
    fn default() -> Self {
        let h = |hours: f64| F::lit(hours * 3600.0);
        Self {
            array_watts: F::lit(250.0),
            array_mpp_voltage: F::lit(17.0),
            array_open_circuit_voltage: F::lit(21.6),
            pwm_drop: F::lit(0.10),
            battery_capacity_ah: F::lit(96.0),
            nominal_voltage: F::lit(12.0),
            ocv_empty: F::lit(11.8),
            ocv_full: F::lit(12.7),
            internal_resistance: F::lit(0.012),
            absorb_voltage: F::lit(14.4),
            float_voltage: F::lit(13.7),
            absorb_duration_s: h(2.0),
            initial_soc: F::lit(0.6),
            daylight: DailyWindow::new(h(7.0), h(19.0)),
            weather: F::one(),
            moonlight: None,
            loads: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantConfigError {
    NonPositive(&'static str),
    OutOfRange(&'static str),
}

impl std::fmt::Display for PlantConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlantConfigError::NonPositive(name) => write!(f, "{name} must be positive"),
            PlantConfigError::OutOfRange(name) => write!(f, "{name} out of range"),
        }
    }
}

impl std::error::Error for PlantConfigError {}

impl<F: Real> PlantConfig<F> {
    pub fn validate(&self) -> Result<(), PlantConfigError> {
        use PlantConfigError::*;
        let positive = [
            ("array_watts", self.array_watts),
            ("array_mpp_voltage", self.array_mpp_voltage),
            ("battery_capacity", self.battery_capacity_ah),
            ("nominal_voltage", self.nominal_voltage),
        ];
        for (name, v) in positive {
            if !(v > F::zero()) {
                return Err(NonPositive(name));
            }
        }
        if self.internal_resistance < F::zero() {
            return Err(OutOfRange("internal_resistance"));
        }
        if !(self.ocv_full > self.ocv_empty) {
            return Err(OutOfRange("ocv_full"));
        }
        if !(F::zero()..=F::one()).contains(&self.initial_soc) {
            return Err(OutOfRange("initial_soc"));
        }
        if !(F::zero()..=F::one()).contains(&self.weather) {
            return Err(OutOfRange("weather"));
        }
        if self.loads.iter().any(|l| l.watts < F::zero()) {
            return Err(OutOfRange("load watts"));
        }
        Ok(())
    }

    pub fn open_circuit_voltage(&self, soc: F) -> F {
        self.ocv_empty + (self.ocv_full - self.ocv_empty) * soc
    }

    /// Fraction of peak sun at `time_of_day` seconds.
    pub fn insolation(&self, time_of_day: F) -> F {
        let DailyWindow { start_s, end_s } = self.daylight;
        if !(time_of_day > start_s && time_of_day < end_s) {
            return F::zero();
        }
        let phase = (time_of_day - start_s) / (end_s - start_s);
        (F::lit(std::f64::consts::PI) * phase).sin().max(F::zero()) * self.weather
    }

    pub fn rated_array_current(&self) -> F {
        self.array_watts / self.array_mpp_voltage
    }

    pub fn load_watts(&self, time_of_day: F) -> F {
        self.loads
            .iter()
            .filter(|l| l.window.contains(time_of_day))
            .fold(F::zero(), |acc, l| acc + l.watts)
    }

    fn available_current(&self, time_of_day: F) -> F {
        let sun = self.insolation(time_of_day) * self.rated_array_current();
        if sun > F::zero() {
            return sun;
        }
        match self.moonlight {
            Some(m) if m.window.contains(time_of_day) => m.amps,
            _ => F::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState<F> {
    /// Seconds since midnight of the first simulated day.
    pub clock_s: F,
    pub soc: F,
    pub battery_voltage: F,
    pub array_voltage: F,
    pub array_current: F,
    pub charge_current: F,
    pub load_watts: F,
    pub load_current: F,
    pub energy_total_kwh: F,
    pub stage: ChargeStage,
    pub absorb_elapsed_s: F,
}

impl<F: Real> PlantState<F> {
    /// Resting state at `clock_s`, before any step has run.
    pub fn initial(config: &PlantConfig<F>, clock_s: F) -> Self {
        let rest = PlantState {
            clock_s,
            soc: config.initial_soc,
            battery_voltage: config.open_circuit_voltage(config.initial_soc),
            array_voltage: F::zero(),
            array_current: F::zero(),
            charge_current: F::zero(),
            load_watts: F::zero(),
            load_current: F::zero(),
            energy_total_kwh: F::zero(),
            stage: ChargeStage::Night,
            absorb_elapsed_s: F::zero(),
        };
        // settle the instantaneous quantities without moving charge
        let mut settled = step(&rest, config, F::zero());
        settled.soc = rest.soc;
        settled
    }

    pub fn time_of_day(&self) -> F {
        self.clock_s % F::lit(SECONDS_PER_DAY)
    }

    pub fn value(&self, field: Field) -> F {
        match field {
            Field::ArrayVoltage => self.array_voltage,
            Field::ArrayCurrent => self.array_current,
            Field::BatteryVoltage => self.battery_voltage,
            Field::ChargeCurrent => self.charge_current,
            Field::EnergyTotal => self.energy_total_kwh,
        }
    }
}

/// State of charge after `net_amps` flows for `dt_s` seconds, clamped to
/// `[0, 1]`.
pub fn integrate_soc<F: Real>(soc: F, net_amps: F, capacity_ah: F, dt_s: F) -> F {
    let delta = net_amps * dt_s / F::lit(3600.0) / capacity_ah;
    (soc + delta).max(F::zero()).min(F::one())
}

/// Terminal voltage with charge current `charge` in and constant-power
/// load `watts` out: the positive root of
/// `V = ocv + (charge - watts / V) * r`.
fn terminal_voltage<F: Real>(ocv: F, charge: F, watts: F, r: F) -> F {
    let b = ocv + charge * r;
    if watts <= F::zero() || r <= F::zero() {
        return b;
    }
    let disc = b * b - F::lit(4.0) * watts * r;
    if disc <= F::zero() {
        b / F::lit(2.0)
    } else {
        (b + disc.sqrt()) / F::lit(2.0)
    }
}

/// Advances the plant by `dt_s` seconds. Currents are evaluated at the end
/// of the interval and held across it; `dt_s = 0` only refreshes them.
pub fn step<F: Real>(state: &PlantState<F>, config: &PlantConfig<F>, dt_s: F) -> PlantState<F> {
    let zero = F::zero();
    let clock_s = state.clock_s + dt_s;
    let tod = clock_s % F::lit(SECONDS_PER_DAY);
    let r = config.internal_resistance;
    let available = config.available_current(tod);
    // an empty bank with nothing charging it cannot carry the load
    let watts = if state.soc <= zero && available <= zero { zero } else { config.load_watts(tod) };
    let ocv = config.open_circuit_voltage(state.soc);

    let mut stage = state.stage;
    let mut absorb_elapsed_s = state.absorb_elapsed_s;
    if available <= zero {
        stage = ChargeStage::Night;
        absorb_elapsed_s = zero;
    } else if stage == ChargeStage::Night {
        stage = ChargeStage::Bulk;
    }

    // current that would push the terminal to the stage setpoint
    let regulated = |setpoint: F| -> F {
        if r <= zero {
            return F::infinity();
        }
        (setpoint - ocv) / r + if watts > zero { watts / setpoint } else { zero }
    };
    let mut charge = match stage {
        ChargeStage::Night => zero,
        ChargeStage::Bulk => available,
        ChargeStage::Absorb => available.min(regulated(config.absorb_voltage)),
        ChargeStage::Float => available.min(regulated(config.float_voltage)),
    };
    // a full battery only takes what the load draws
    if dt_s > zero {
        let est_load = if watts > zero { watts / ocv } else { zero };
        let headroom = (F::one() - state.soc) * config.battery_capacity_ah * F::lit(3600.0) / dt_s;
        charge = charge.min(headroom + est_load);
    } else if state.soc >= F::one() {
        charge = charge.min(if watts > zero { watts / ocv } else { zero });
    }
    charge = charge.max(zero);

    let v_during = terminal_voltage(ocv, charge, watts, r);
    let load_current = if watts > zero { watts / v_during } else { zero };
    let soc = integrate_soc(state.soc, charge - load_current, config.battery_capacity_ah, dt_s);

    let battery_voltage = terminal_voltage(config.open_circuit_voltage(soc), charge, watts, r);
    let load_current = if watts > zero { watts / battery_voltage } else { zero };

    match stage {
        ChargeStage::Bulk if battery_voltage >= config.absorb_voltage || soc >= F::one() => {
            stage = ChargeStage::Absorb;
            absorb_elapsed_s = zero;
        }
        ChargeStage::Absorb => {
            absorb_elapsed_s = absorb_elapsed_s + dt_s;
            if absorb_elapsed_s >= config.absorb_duration_s {
                stage = ChargeStage::Float;
            }
        }
        _ => {}
    }

    let (array_voltage, array_current) = if charge > zero {
        (battery_voltage + config.pwm_drop, charge)
    } else if config.insolation(tod) > zero {
        (config.array_open_circuit_voltage, zero)
    } else {
        (zero, zero)
    };
    let energy = array_voltage * array_current * dt_s / F::lit(3_600_000.0);

    PlantState {
        clock_s,
        soc,
        battery_voltage,
        array_voltage,
        array_current,
        charge_current: charge,
        load_watts: watts,
        load_current,
        energy_total_kwh: state.energy_total_kwh + energy,
        stage,
        absorb_elapsed_s,
    }
}

/// A plant with its configuration, stepped on a fixed grid.
#[derive(Debug, Clone)]
pub struct Plant<F> {
    pub config: PlantConfig<F>,
    pub state: PlantState<F>,
}

impl<F: Real> Plant<F> {
    pub fn new(config: PlantConfig<F>, start_clock_s: F) -> Self {
        let state = PlantState::initial(&config, start_clock_s);
        Self { config, state }
    }

    pub fn step(&mut self, dt_s: F) -> &PlantState<F> {
        self.state = step(&self.state, &self.config, dt_s);
        &self.state
    }
}

/// Answers a Read Holding Registers request from the register map.
///
/// Wrong-address and CRC-invalid requests get no reply, as on a shared bus.
/// Unmapped registers read as zero.
pub fn serve_modbus<F: Real>(
    state: &PlantState<F>,
    map: &RegisterMap,
    device_address: u8,
    request: &[u8],
) -> Option<Vec<u8>> {
    let req = modbus::decode_read_request(request).ok()?;
    if req.device_address != device_address {
        return None;
    }
    let words = (0..req.register_count)
        .map(|offset| {
            let address = req.start_register.wrapping_add(offset);
            map.by_address(address)
                .map_or(0, |entry| to_raw(entry, state.value(entry.field)))
        })
        .collect();
    modbus::encode_response(&ReadResponse::new(device_address, words)).ok()
}

/// The controller's serial port, bound to a plant snapshot.
pub struct ControllerPort<'a, F> {
    pub state: &'a PlantState<F>,
    pub map: &'a RegisterMap,
    pub address: u8,
    pub timing: TimingContract,
    pub online: bool,
}

impl<'a, F: Real> ControllerPort<'a, F> {
    pub fn new(state: &'a PlantState<F>, map: &'a RegisterMap) -> Self {
        Self {
            state,
            map,
            address: CONTROLLER_ADDRESS,
            timing: TimingContract::default(),
            online: true,
        }
    }
}

impl<F: Real> SerialLink for ControllerPort<'_, F> {
    fn transact(&mut self, request: &[u8]) -> Option<Vec<u8>> {
        if !self.online {
            return None;
        }
        serve_modbus(self.state, self.map, self.address, request)
    }

    fn timing(&self) -> TimingContract {
        self.timing
    }
}
