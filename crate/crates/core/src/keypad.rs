//! The handset's 4×3 key grid, driven by asserting one row node and one
//! column node at a time.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::dtmf::ToneSymbol;

/// Shortest hold that registers as a key press.
pub const DEBOUNCE: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Row {
    A,
    B,
    C,
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Column {
    One,
    Two,
    Three,
}

impl Row {
    pub const ALL: [Row; 4] = [Row::A, Row::B, Row::C, Row::D];
}

impl Column {
    pub const ALL: [Column; 3] = [Column::One, Column::Two, Column::Three];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Key {
    Tone(ToneSymbol),
    /// Accept / send.
    Start,
    /// Power and end-call.
    Power,
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Key::Tone(t) => write!(f, "{t}"),
            Key::Start => f.write_str("START"),
            Key::Power => f.write_str("POWER"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyEvent {
    pub key: Key,
    pub hold: Duration,
}

impl KeyEvent {
    pub fn new(key: Key, hold: Duration) -> Self {
        Self { key, hold }
    }

    pub fn registers(&self) -> bool {
        self.hold >= DEBOUNCE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeAssertion {
    pub row: Row,
    pub column: Column,
    pub hold: Duration,
}

impl NodeAssertion {
    pub fn new(row: Row, column: Column, hold: Duration) -> Self {
        Self { row, column, hold }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeypadError {
    #[error("ghost key: {rows} rows and {columns} columns asserted together")]
    GhostKeyFault { rows: usize, columns: usize },
    #[error("{0} has no grid position")]
    NotOnGrid(Key),
}

const GRID: [[char; 3]; 4] = [
    ['1', '2', '3'],
    ['4', '5', '6'],
    ['7', '8', '9'],
    ['*', '0', '#'],
];

pub fn resolve(assertion: NodeAssertion) -> KeyEvent {
    let c = GRID[assertion.row as usize][assertion.column as usize];
    let tone = ToneSymbol::from_char(c).expect("grid holds keypad tones");
    KeyEvent::new(Key::Tone(tone), assertion.hold)
}

/// Row and column to assert for a grid key.
pub fn locate(symbol: ToneSymbol) -> (Row, Column) {
    let c = symbol.as_char();
    for (r, row) in GRID.iter().enumerate() {
        if let Some(col) = row.iter().position(|&k| k == c) {
            return (Row::ALL[r], Column::ALL[col]);
        }
    }
    unreachable!("every tone symbol sits on the grid")
}

/// Accepts at most one asserted row and one asserted column.
pub fn validate_assertions(simultaneous: &[NodeAssertion]) -> Result<(), KeypadError> {
    let rows: BTreeSet<Row> = simultaneous.iter().map(|a| a.row).collect();
    let columns: BTreeSet<Column> = simultaneous.iter().map(|a| a.column).collect();
    if rows.len() > 1 || columns.len() > 1 {
        return Err(KeypadError::GhostKeyFault {
            rows: rows.len(),
            columns: columns.len(),
        });
    }
    Ok(())
}

/// Presses `symbol` through the grid: assert its nodes, check them, resolve.
pub fn press(symbol: ToneSymbol, hold: Duration) -> Result<KeyEvent, KeypadError> {
    let (row, column) = locate(symbol);
    let assertion = NodeAssertion::new(row, column, hold);
    validate_assertions(&[assertion])?;
    Ok(resolve(assertion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    const HOLD: Duration = Duration::from_millis(100);

    fn key(row: Row, column: Column) -> char {
        match resolve(NodeAssertion::new(row, column, HOLD)).key {
            Key::Tone(t) => t.as_char(),
            other => panic!("grid produced {other}"),
        }
    }

    #[test]
    fn grid_examples() {
        assert_eq!(key(Row::A, Column::One), '1');
        assert_eq!(key(Row::D, Column::Two), '0');
        assert_eq!(key(Row::C, Column::Three), '9');
        assert_eq!(key(Row::D, Column::One), '*');
        assert_eq!(key(Row::D, Column::Three), '#');
    }

    #[test]
    fn resolve_is_a_bijection() {
        let mut seen = HashSet::new();
        for row in Row::ALL {
            for column in Column::ALL {
                let c = key(row, column);
                assert!(seen.insert(c));
                let symbol = ToneSymbol::from_char(c).unwrap();
                assert_eq!(locate(symbol), (row, column));
            }
        }
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn assertion_validation() {
        let a1 = NodeAssertion::new(Row::A, Column::One, HOLD);
        let b1 = NodeAssertion::new(Row::B, Column::One, HOLD);
        let a2 = NodeAssertion::new(Row::A, Column::Two, HOLD);
        assert_eq!(validate_assertions(&[a1]), Ok(()));
        assert_eq!(validate_assertions(&[]), Ok(()));
        assert_eq!(
            validate_assertions(&[a1, b1]),
            Err(KeypadError::GhostKeyFault { rows: 2, columns: 1 })
        );
        assert!(validate_assertions(&[a1, a2]).is_err());
        assert_eq!(validate_assertions(&[a1, a1]), Ok(()));
    }

    #[test]
    fn debounce_floor() {
        assert!(KeyEvent::new(Key::Start, Duration::from_millis(50)).registers());
        assert!(!KeyEvent::new(Key::Start, Duration::from_millis(49)).registers());
    }

    #[test]
    fn press_goes_through_the_grid() {
        let e = press(ToneSymbol::Pound, HOLD).unwrap();
        assert_eq!(e.key, Key::Tone(ToneSymbol::Pound));
        assert_eq!(e.hold, HOLD);
    }
}
