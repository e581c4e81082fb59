//! Cellular network and handsets: power, dialing, ringing, buffered tone
//! delivery, tone-loss impairment and per-minute billing.
//!
//! The network holds no clock of its own. Every operation takes the
//! simulated instant it happens at, and anything that must happen later
//! (ring edges, timeouts, boot completion) is handed back for the caller to
//! schedule.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::time::Duration;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use thiserror::Error;

use crate::dtmf::{ToneSequence, ToneSymbol, DEFAULT_TONE_RATE};
use crate::keypad::{Key, KeyEvent};
use crate::time::SimTime;

pub const POWER_HOLD: Duration = Duration::from_secs(4);
pub const BOOT_TIME: Duration = Duration::from_secs(20);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TelcoError {
    #[error("{number}: key {key} ignored")]
    IgnoredKey { number: String, key: Key },
    #[error("{0} unreachable")]
    Unreachable(String),
    #[error("{0} is not on the network")]
    UnknownNumber(String),
    #[error("call {0} dropped with tones undelivered")]
    CallDropped(CallId),
    #[error("call {0} is not active")]
    NotActive(CallId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CallId(pub u64);

impl fmt::Display for CallId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Impairment {
    pub tone_drop_probability: f64,
    pub seed: u64,
}

impl Impairment {
    pub fn none() -> Self {
        Self {
            tone_drop_probability: 0.0,
            seed: 0,
        }
    }
}

/// The seeded loss process of one radio path.
#[derive(Debug, Clone)]
pub struct Channel {
    drop_probability: f64,
    rng: ChaCha8Rng,
}

impl Channel {
    pub fn new(impairment: Impairment) -> Self {
        Self {
            drop_probability: impairment.tone_drop_probability.clamp(0.0, 1.0),
            rng: ChaCha8Rng::seed_from_u64(impairment.seed),
        }
    }

    /// Whether the next tone survives.
    pub fn passes(&mut self) -> bool {
        // always draw, so the stream position doesn't depend on p
        let roll: f64 = self.rng.gen();
        roll >= self.drop_probability
    }
}

/// Tones `tones` sent from `start` at the sequence's rate, as the peer
/// hears them: arrival time and symbol of every tone that survived.
pub fn deliver_tones(tones: &ToneSequence, start: SimTime, channel: &mut Channel) -> Vec<(SimTime, ToneSymbol)> {
    let period = tone_period(tones.rate);
    tones
        .symbols
        .iter()
        .enumerate()
        .filter_map(|(i, &symbol)| {
            let at = start + period * i as u32;
            channel.passes().then_some((at, symbol))
        })
        .collect()
}

pub fn tone_period(rate: f64) -> Duration {
    Duration::from_secs_f64(1.0 / rate)
}

/// `⌈connected / 60 s⌉`, and at least one minute once answered.
pub fn billed_minutes(connected: Duration) -> u64 {
    let ms = connected.as_millis() as u64;
    ms.div_ceil(60_000).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelcoConfig {
    pub tone_rate: f64,
    pub ring_on: Duration,
    pub ring_off: Duration,
    pub ring_timeout: Duration,
    /// Interrupt edges a single ring burst produces on the ring line.
    pub edges_per_burst: u32,
    pub edge_spacing: Duration,
    pub tariff_per_minute: Decimal,
    pub impairment: Impairment,
}

impl Default for TelcoConfig {
    fn default() -> Self {
        Self {
            tone_rate: DEFAULT_TONE_RATE,
            ring_on: Duration::from_secs(2),
            ring_off: Duration::from_secs(4),
            ring_timeout: Duration::from_secs(30),
            edges_per_burst: 8,
            edge_spacing: Duration::from_millis(5),
            tariff_per_minute: Decimal::ZERO,
            impairment: Impairment::none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {
    Off,
    Booting { ready_at: SimTime },
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallState {
    Idle,
    Ringing,
    Dialing,
    InCall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedTone {
    pub symbol: ToneSymbol,
    pub emit_at: SimTime,
}

#[derive(Debug, Clone)]
pub struct Handset {
    pub number: String,
    power: Power,
    /// Simultaneous calls the line carries; 1 for a phone, more for a
    /// switchboard.
    pub lines: usize,
    calls: Vec<CallId>,
    dial_buffer: String,
    pub tone_buffer: VecDeque<QueuedTone>,
    last_emit: Option<SimTime>,
}

impl Handset {
    fn new(number: &str, lines: usize, powered: bool) -> Self {
        Self {
            number: number.to_string(),
            power: if powered { Power::On } else { Power::Off },
            lines: lines.max(1),
            calls: Vec::new(),
            dial_buffer: String::new(),
            tone_buffer: VecDeque::new(),
            last_emit: None,
        }
    }

    pub fn power(&self, at: SimTime) -> Power {
        match self.power {
            Power::Booting { ready_at } if at >= ready_at => Power::On,
            p => p,
        }
    }

    pub fn is_on(&self, at: SimTime) -> bool {
        self.power(at) == Power::On
    }

    pub fn active_calls(&self) -> &[CallId] {
        &self.calls
    }

    pub fn dialed_digits(&self) -> &str {
        &self.dial_buffer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndReason {
    HungUp,
    NoAnswer,
    /// The caller gave up while it was still ringing.
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Ringing,
    Connected,
    Ended(EndReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToneEvent {
    pub from_caller: bool,
    pub at: SimTime,
    pub symbol: ToneSymbol,
    pub heard: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallSession {
    pub id: CallId,
    pub caller: String,
    pub callee: String,
    pub placed_at: SimTime,
    pub answered_at: Option<SimTime>,
    pub ended_at: Option<SimTime>,
    pub state: SessionState,
    pub tones: Vec<ToneEvent>,
    /// Tones still buffered when the line went down.
    pub truncated: usize,
}

impl CallSession {
    pub fn connected(&self) -> Duration {
        match (self.answered_at, self.ended_at) {
            (Some(a), Some(e)) => e.since(a),
            _ => Duration::ZERO,
        }
    }

    pub fn billed_minutes(&self) -> u64 {
        if self.answered_at.is_some() {
            billed_minutes(self.connected())
        } else {
            0
        }
    }

    pub fn cost(&self, tariff_per_minute: Decimal) -> Decimal {
        tariff_per_minute * Decimal::from(self.billed_minutes())
    }

    /// Arrival time and symbol of every tone the callee sent that reached
    /// the caller, or vice versa.
    pub fn heard_by(&self, number: &str) -> Vec<(SimTime, ToneSymbol)> {
        let caller_listens = number == self.caller;
        self.tones
            .iter()
            .filter(|t| t.heard && t.from_caller != caller_listens)
            .map(|t| (t.at, t.symbol))
            .collect()
    }

    pub fn delivered_tones(&self, listener: &str, rate: f64) -> ToneSequence {
        ToneSequence::new(self.heard_by(listener).into_iter().map(|(_, s)| s).collect()).with_rate(rate)
    }

    pub fn is_active(&self) -> bool {
        !matches!(self.state, SessionState::Ended(_))
    }
}

/// Ring-line activity at the callee for one call, to be scheduled.
#[derive(Debug, Clone, PartialEq)]
pub struct RingPlan {
    pub call: CallId,
    pub callee: String,
    pub edges: Vec<SimTime>,
    pub timeout_at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KeyEffect {
    PoweringOn { ready_at: SimTime },
    PoweredOff,
    DigitDialed,
    Dialed(RingPlan),
    Answered(CallId),
    ToneQueued { call: CallId, emit_at: SimTime },
    HungUp { call: CallId },
}

/// Every handset and call, with the shared impairment process.
#[derive(Debug)]
pub struct Network {
    pub config: TelcoConfig,
    handsets: BTreeMap<String, Handset>,
    sessions: Vec<CallSession>,
    channel: Channel,
}

impl Network {
    pub fn new(config: TelcoConfig) -> Self {
        let channel = Channel::new(config.impairment);
        Self {
            config,
            handsets: BTreeMap::new(),
            sessions: Vec::new(),
            channel,
        }
    }

    pub fn add_handset(&mut self, number: &str, lines: usize, powered: bool) {
        self.handsets
            .insert(number.to_string(), Handset::new(number, lines, powered));
    }

    pub fn handset(&self, number: &str) -> Option<&Handset> {
        self.handsets.get(number)
    }

    pub fn session(&self, call: CallId) -> &CallSession {
        &self.sessions[call.0 as usize]
    }

    pub fn sessions(&self) -> &[CallSession] {
        &self.sessions
    }

    pub fn tone_period(&self) -> Duration {
        tone_period(self.config.tone_rate)
    }

    pub fn call_state(&self, number: &str) -> Option<CallState> {
        let handset = self.handsets.get(number)?;
        let mut state = CallState::Idle;
        for &id in &handset.calls {
            let s = self.session(id);
            let here = match s.state {
                SessionState::Connected => CallState::InCall,
                SessionState::Ringing if s.callee == number => CallState::Ringing,
                SessionState::Ringing => CallState::Dialing,
                SessionState::Ended(_) => continue,
            };
            if state == CallState::Idle || here == CallState::InCall {
                state = here;
            }
        }
        Some(state)
    }

    fn handset_mut(&mut self, number: &str) -> Result<&mut Handset, TelcoError> {
        self.handsets
            .get_mut(number)
            .ok_or_else(|| TelcoError::UnknownNumber(number.to_string()))
    }

    /// A key pressed at `at` and held for `event.hold`; its effect lands on
    /// release.
    pub fn press_key(&mut self, number: &str, event: KeyEvent, at: SimTime) -> Result<KeyEffect, TelcoError> {
        let release = at + event.hold;
        let ignored = || TelcoError::IgnoredKey {
            number: number.to_string(),
            key: event.key,
        };
        if !event.registers() {
            return Err(ignored());
        }
        let state = self.call_state(number).ok_or_else(|| TelcoError::UnknownNumber(number.to_string()))?;
        let (power, has_digits) = {
            let handset = self.handset_mut(number)?;
            (handset.power(at), !handset.dial_buffer.is_empty())
        };
        match (event.key, power, state) {
            (Key::Power, Power::Off, _) if event.hold >= POWER_HOLD => {
                let ready_at = release + BOOT_TIME;
                self.handset_mut(number)?.power = Power::Booting { ready_at };
                Ok(KeyEffect::PoweringOn { ready_at })
            }
            (Key::Power, Power::On, CallState::Idle) if event.hold >= POWER_HOLD => {
                let handset = self.handset_mut(number)?;
                handset.power = Power::Off;
                handset.dial_buffer.clear();
                Ok(KeyEffect::PoweredOff)
            }
            (Key::Power, Power::On, CallState::Idle) if has_digits => {
                self.handset_mut(number)?.dial_buffer.clear();
                Ok(KeyEffect::DigitDialed)
            }
            (Key::Power, Power::On, CallState::Idle) => Err(ignored()),
            (Key::Power, Power::On, _) => {
                let call = self.handsets[number].calls[0];
                self.hang_up(number, call, release)?;
                Ok(KeyEffect::HungUp { call })
            }
            (_, Power::Off | Power::Booting { .. }, _) => Err(ignored()),
            (Key::Start, Power::On, CallState::Ringing) => {
                let call = self.incoming_ringing(number).expect("ringing handset has a call");
                self.answer(call, release)?;
                Ok(KeyEffect::Answered(call))
            }
            (Key::Start, Power::On, CallState::Idle) if has_digits => {
                let callee = std::mem::take(&mut self.handset_mut(number)?.dial_buffer);
                self.dial(number, &callee, release).map(KeyEffect::Dialed)
            }
            (Key::Tone(symbol), Power::On, CallState::Idle) => {
                self.handset_mut(number)?.dial_buffer.push(symbol.as_char());
                Ok(KeyEffect::DigitDialed)
            }
            (Key::Tone(symbol), Power::On, CallState::InCall) => {
                let period = tone_period(self.config.tone_rate);
                let call = self.connected_call(number).expect("in-call handset has a call");
                let handset = self.handset_mut(number)?;
                let emit_at = match handset.last_emit {
                    Some(last) => release.max(last + period),
                    None => release,
                };
                handset.last_emit = Some(emit_at);
                handset.tone_buffer.push_back(QueuedTone { symbol, emit_at });
                Ok(KeyEffect::ToneQueued { call, emit_at })
            }
            _ => Err(ignored()),
        }
    }

    fn incoming_ringing(&self, number: &str) -> Option<CallId> {
        let handset = self.handsets.get(number)?;
        handset.calls.iter().copied().find(|&id| {
            let s = self.session(id);
            s.state == SessionState::Ringing && s.callee == number
        })
    }

    fn connected_call(&self, number: &str) -> Option<CallId> {
        let handset = self.handsets.get(number)?;
        handset
            .calls
            .iter()
            .copied()
            .find(|&id| self.session(id).state == SessionState::Connected)
    }

    fn reachable(&self, number: &str, at: SimTime) -> Result<(), TelcoError> {
        let handset = self
            .handsets
            .get(number)
            .ok_or_else(|| TelcoError::UnknownNumber(number.to_string()))?;
        if !handset.is_on(at) || handset.calls.len() >= handset.lines {
            return Err(TelcoError::Unreachable(number.to_string()));
        }
        Ok(())
    }

    /// Places a call. The caller must be on with a free line; the callee
    /// must be on with a free line, else `Unreachable`.
    pub fn dial(&mut self, caller: &str, callee: &str, at: SimTime) -> Result<RingPlan, TelcoError> {
        self.reachable(caller, at)?;
        self.reachable(callee, at)?;
        let id = CallId(self.sessions.len() as u64);
        self.sessions.push(CallSession {
            id,
            caller: caller.to_string(),
            callee: callee.to_string(),
            placed_at: at,
            answered_at: None,
            ended_at: None,
            state: SessionState::Ringing,
            tones: Vec::new(),
            truncated: 0,
        });
        for number in [caller, callee] {
            self.handset_mut(number)?.calls.push(id);
        }
        Ok(self.ring_plan(id, callee, at))
    }

    /// Alias for [`dial`](Self::dial) from the network's point of view: the
    /// callee's ring line starts oscillating.
    pub fn ring(&mut self, caller: &str, callee: &str, at: SimTime) -> Result<RingPlan, TelcoError> {
        self.dial(caller, callee, at)
    }

    fn ring_plan(&self, call: CallId, callee: &str, at: SimTime) -> RingPlan {
        let c = &self.config;
        let timeout_at = at + c.ring_timeout;
        let cycle = c.ring_on + c.ring_off;
        let mut edges = Vec::new();
        let mut burst = at;
        while burst < timeout_at {
            for k in 0..c.edges_per_burst {
                let edge = burst + c.edge_spacing * k;
                if edge < timeout_at && edge < burst + c.ring_on {
                    edges.push(edge);
                }
            }
            burst = burst + cycle;
        }
        RingPlan {
            call,
            callee: callee.to_string(),
            edges,
            timeout_at,
        }
    }

    pub fn answer(&mut self, call: CallId, at: SimTime) -> Result<(), TelcoError> {
        let session = &mut self.sessions[call.0 as usize];
        if session.state != SessionState::Ringing {
            return Err(TelcoError::NotActive(call));
        }
        session.state = SessionState::Connected;
        session.answered_at = Some(at);
        let (caller, callee) = (session.caller.clone(), session.callee.clone());
        for number in [caller, callee] {
            let h = self.handset_mut(&number)?;
            h.last_emit = None;
            h.tone_buffer.clear();
        }
        Ok(())
    }

    /// Ends a call still ringing at `at`. Returns whether it did.
    pub fn ring_timeout(&mut self, call: CallId, at: SimTime) -> bool {
        if self.session(call).state != SessionState::Ringing {
            return false;
        }
        self.end(call, at, EndReason::NoAnswer);
        true
    }

    /// Either party hangs up. Tones still sounding or buffered at `at`
    /// never arrive; if any were lost that way the call counts as dropped.
    pub fn hang_up(&mut self, number: &str, call: CallId, at: SimTime) -> Result<(), TelcoError> {
        let session = self.session(call);
        if !session.is_active() || (session.caller != number && session.callee != number) {
            return Err(TelcoError::NotActive(call));
        }
        let reason = match session.state {
            SessionState::Ringing => EndReason::Abandoned,
            _ => EndReason::HungUp,
        };
        let truncated = self.end(call, at, reason);
        if truncated > 0 {
            Err(TelcoError::CallDropped(call))
        } else {
            Ok(())
        }
    }

    fn end(&mut self, call: CallId, at: SimTime, reason: EndReason) -> usize {
        let period = tone_period(self.config.tone_rate);
        let (caller, callee) = {
            let s = self.session(call);
            (s.caller.clone(), s.callee.clone())
        };
        let mut truncated = 0;
        for number in [&caller, &callee] {
            let from_caller = *number == caller;
            let handset = self.handsets.get_mut(number.as_str()).expect("party exists");
            handset.calls.retain(|&c| c != call);
            let queued: Vec<QueuedTone> = handset.tone_buffer.drain(..).collect();
            handset.last_emit = None;
            for tone in queued {
                if tone.emit_at + period <= at {
                    let heard = self.channel.passes();
                    self.sessions[call.0 as usize].tones.push(ToneEvent {
                        from_caller,
                        at: tone.emit_at,
                        symbol: tone.symbol,
                        heard,
                    });
                } else {
                    truncated += 1;
                }
            }
        }
        let session = &mut self.sessions[call.0 as usize];
        session.tones.sort_by_key(|t| t.at);
        session.state = SessionState::Ended(reason);
        session.ended_at = Some(at);
        session.truncated = truncated;
        truncated
    }

    /// Minutes billed to calls placed by `originator`.
    pub fn billed_minutes_for(&self, originator: &str) -> u64 {
        self.sessions
            .iter()
            .filter(|s| s.caller == originator)
            .map(CallSession::billed_minutes)
            .sum()
    }
}
