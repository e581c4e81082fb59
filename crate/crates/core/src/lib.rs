//! Solar telemetry over DTMF: a Modbus RTU charge controller, a phone-line
//! device agent relaying readings as tone frames, and a collector that
//! stores them, all driven by a deterministic discrete-event simulation.
//!
//! The plant and register scaling are generic over the scalar type; the
//! aliases below fix them to `f64`.

pub mod collector;
pub mod device;
pub mod dtmf;
pub mod keypad;
pub mod modbus;
pub mod plant;
pub mod reading;
pub mod registers;
pub mod report;
pub mod scalar;
pub mod scenario;
pub mod store;
pub mod telco;
pub mod time;

pub type Plant = plant::Plant<f64>;
pub type PlantConfig = plant::PlantConfig<f64>;
pub type PlantState = plant::PlantState<f64>;
