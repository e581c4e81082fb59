//! `solartone`: run scenarios, build charge-curve reports and exercise the
//! wire codecs from the shell.
//!
//! Exit codes: 0 success, 2 invalid input, 1 runtime failure.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDateTime;
use clap::{Parser, Subcommand};

use solartone_core::dtmf::{self, ToneSequence, ToneSymbol};
use solartone_core::modbus::crc16;
use solartone_core::reading::Reading;
use solartone_core::report::report;
use solartone_core::scenario::{run, Scenario, ScenarioError};
use solartone_core::store::{self, StoreError};
use solartone_core::time::parse_iso;

#[derive(Parser)]
#[command(name = "solartone", version, about = "Solar telemetry over DTMF: simulation, reports and codecs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write store.tsv, notifications.log, billing.tsv
    /// and events.log.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: run-<scenario name>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chart data (time, battery V, array A, kWh) and a summary for one device.
    Report {
        store: PathBuf,
        #[arg(long)]
        device: String,
        #[arg(long, value_parser = timestamp)]
        from: Option<NaiveDateTime>,
        #[arg(long, value_parser = timestamp)]
        to: Option<NaiveDateTime>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode 1-3 records, each `a,b,c,d,e`, oldest first, as one tone string.
    Encode {
        #[arg(required = true, num_args = 1..)]
        records: Vec<String>,
    },
    /// Decode a tone string to one CSV line per record. `?` marks a tone
    /// lost on the line; damaged fields print empty.
    Decode { tones: String },
    /// CRC-16 of hex bytes, printed in frame order (low byte first).
    Crc {
        #[arg(required = true, num_args = 1..)]
        bytes: Vec<String>,
    },
}

fn timestamp(s: &str) -> Result<NaiveDateTime, String> {
    parse_iso(s).map_err(|e| format!("`{s}` is not YYYY-MM-DDTHH:MM:SS: {e}"))
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

fn invalid(e: impl Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn simulate(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<String, Failure> {
    let mut scenario = Scenario::load(path).map_err(|e| match e {
        ScenarioError::Config(c) => Failure::Invalid(format!("{}: {c}", path.display())),
        other => runtime(other),
    })?;
    if let Some(seed) = seed {
        scenario = scenario.with_seed(seed);
    }
    let output = run(&scenario).map_err(runtime)?;
    let dir = out.unwrap_or_else(|| PathBuf::from(format!("run-{}", scenario.name)));
    output.write(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let stats = &output.collector_stats;
    Ok(format!(
        "scenario {} seed {}\nrecords stored {}, dropped {}, damaged fields {}\n\
         low-voltage notifications {}\ncollector billed minutes {}\nwrote {}\n",
        scenario.name,
        scenario.seed,
        stats.records_stored,
        stats.records_dropped,
        stats.damaged_fields,
        output.notifications.len(),
        output.billed_minutes(&output.collector_number),
        dir.display()
    ))
}

fn report_cmd(
    path: &Path,
    device: &str,
    from: Option<NaiveDateTime>,
    to: Option<NaiveDateTime>,
    out: Option<PathBuf>,
) -> Result<String, Failure> {
    let records = store::load(path).map_err(|e| match e {
        StoreError::Parse { .. } => Failure::Invalid(format!("{}: {e}", path.display())),
        StoreError::Io(_) => Failure::Runtime(format!("{}: {e}", path.display())),
    })?;
    let text = report(&records, device, from, to).map_err(runtime)?.to_text();
    match out {
        Some(file) => {
            fs::write(&file, text).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn encode(records: &[String]) -> Result<String, Failure> {
    let readings = records
        .iter()
        .map(|r| Reading::from_csv(r).map_err(|e| invalid(format!("record `{r}`: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let tones = dtmf::encode_transmission(&readings).map_err(invalid)?;
    Ok(format!("{tones}\n"))
}

fn decode(text: &str) -> Result<String, Failure> {
    let text = text.trim();
    if !text.contains('?') {
        let tones: ToneSequence = text.parse().map_err(invalid)?;
        let readings = dtmf::decode_transmission(&tones).map_err(invalid)?;
        return Ok(readings.iter().map(|r| r.to_csv() + "\n").collect());
    }
    let heard = text
        .chars()
        .map(|c| if c == '?' { Ok(None) } else { ToneSymbol::from_char(c).map(Some) })
        .collect::<Result<Vec<_>, _>>()
        .map_err(invalid)?;
    let s = dtmf::salvage(&heard);
    let mut out: String = s
        .records
        .iter()
        .map(|r| {
            let cols: Vec<String> = r.values.iter().map(|v| v.map_or(String::new(), |d| format!("{d:.2}"))).collect();
            cols.join(",") + "\n"
        })
        .collect();
    if s.dropped > 0 {
        out.push_str(&format!("# {} record(s) unrecoverable\n", s.dropped));
    }
    Ok(out)
}

fn crc(args: &[String]) -> Result<String, Failure> {
    let hex: String = args.concat().chars().filter(|c| !c.is_whitespace()).collect();
    let hex = hex.strip_prefix("0x").unwrap_or(&hex);
    if hex.is_empty() || hex.len() % 2 != 0 {
        return Err(invalid(format!("`{hex}` is not a whole number of hex bytes")));
    }
    let bytes = (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| invalid(format!("`{}` is not a hex byte", &hex[i..i + 2]))))
        .collect::<Result<Vec<u8>, _>>()?;
    let [lo, hi] = crc16(&bytes).to_le_bytes();
    Ok(format!("{lo:02X} {hi:02X}\n"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { scenario, seed, out } => simulate(&scenario, seed, out),
        Command::Report {
            store,
            device,
            from,
            to,
            out,
        } => report_cmd(&store, &device, from, to, out),
        Command::Encode { records } => encode(&records),
        Command::Decode { tones } => decode(&tones),
        Command::Crc { bytes } => crc(&bytes),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
