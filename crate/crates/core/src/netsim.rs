//! Simulated robot↔edge link with UDP-like semantics.
//!
//! Every control slot (one state sample) gets an uplink and a downlink delay.
//! Constant and trace channels put the whole round trip on the downlink;
//! the blockage channel splits it into per-hop base delays with the outage
//! extra on the downlink. The delivery time of a reply therefore depends only
//! on the slot's round trip, which keeps trace replay exact.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid channel parameter: {0}")]
    InvalidParameter(String),
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Sampling period of generated traces.
pub const TRACE_PERIOD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SmartFactory,
    BurningBuilding,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::SmartFactory, Preset::BurningBuilding];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SmartFactory => "smart_factory",
            Preset::BurningBuilding => "burning_building",
        }
    }

    pub fn params(self, seed: u64) -> BlockageParams {
        let base = BlockageParams {
            edge_delay: 1e-3,
            airlink_delay: [1e-3, 2e-3],
            outage_rate: 0.0,
            outage_duration_mean: 0.0,
            outage_duration_sigma: 0.8,
            outage_duration_cap: 0.0,
            extra_delay_median: 0.0,
            extra_delay_sigma: 0.6,
            extra_delay_cap: 0.0,
            drop_prob_in_outage: 0.2,
            seed,
        };
        match self {
            Preset::SmartFactory => BlockageParams {
                outage_rate: 0.05,
                outage_duration_mean: 0.15,
                outage_duration_cap: 1.0,
                extra_delay_median: 0.12,
                extra_delay_cap: 0.389,
                ..base
            },
            Preset::BurningBuilding => BlockageParams {
                outage_rate: 0.5,
                outage_duration_mean: 0.03,
                outage_duration_cap: 0.2,
                extra_delay_median: 0.03,
                extra_delay_cap: 0.091,
                ..base
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| NetError::InvalidParameter(format!("unknown preset {s:?}")))
    }
}

/// Two-state clear/outage renewal process on top of per-hop base delays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockageParams {
    /// One-way base station to edge server delay.
    pub edge_delay: f64,
    /// Uniform range of the one-way air-link delay.
    pub airlink_delay: [f64; 2],
    /// Poisson outage arrival rate (1/s).
    pub outage_rate: f64,
    pub outage_duration_mean: f64,
    pub outage_duration_sigma: f64,
    pub outage_duration_cap: f64,
    /// Round-trip extra delay during an outage, drawn once per outage.
    pub extra_delay_median: f64,
    pub extra_delay_sigma: f64,
    pub extra_delay_cap: f64,
    pub drop_prob_in_outage: f64,
    pub seed: u64,
}

impl BlockageParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.edge_delay,
            self.airlink_delay[0],
            self.outage_rate,
            self.outage_duration_sigma,
            self.extra_delay_sigma,
        ];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || self.airlink_delay[1] < self.airlink_delay[0] {
            return Err(NetError::InvalidParameter("delays, rates and spreads must be finite and non-negative".into()));
        }
        if self.outage_rate > 0.0
            && !(self.outage_duration_mean > 0.0
                && self.outage_duration_cap > 0.0
                && self.extra_delay_median > 0.0
                && self.extra_delay_cap > 0.0)
        {
            return Err(NetError::InvalidParameter("outage distributions need positive location and cap".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob_in_outage) {
            return Err(NetError::InvalidParameter("drop probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-slot delays; a `None` downlink means the reply is lost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotDelay {
    pub uplink: f64,
    pub downlink: Option<f64>,
}

impl SlotDelay {
    pub fn round_trip(&self) -> Option<f64> {
        self.downlink.map(|d| d + self.uplink)
    }
}

/// Round-trip delay samples; `None` marks a dropped slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub times: Vec<f64>,
    pub delays: Vec<Option<f64>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a + TRACE_PERIOD,
            _ => 0.0,
        }
    }

    /// Sample holding at `t`, extended cyclically past the end. The flag is
    /// true when the cyclic extension was used.
    pub fn lookup(&self, t: f64) -> (Option<f64>, bool) {
        let t0 = self.times[0];
        let span = self.duration();
        let mut tt = t;
        let wrapped = t >= t0 + span;
        if wrapped {
            tt = t0 + (t - t0).rem_euclid(span);
        }
        let i = self.times.partition_point(|x| *x <= tt + 1e-12).saturating_sub(1);
        (self.delays[i], wrapped)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "delay_s"]).map_err(csv_io)?;
        for (t, d) in self.times.iter().zip(&self.delays) {
            let d = d.map_or_else(|| "inf".to_string(), |x| x.to_string());
            w.write_record([t.to_string(), d]).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(|e| NetError::Parse { line: 1, message: e.to_string() })?;
        if headers.iter().collect::<Vec<_>>() != ["t_s", "delay_s"] {
            return Err(NetError::Parse { line: 1, message: "expected header t_s,delay_s".into() });
        }
        let mut trace = Trace { times: Vec::new(), delays: Vec::new() };
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| NetError::Parse { line, message: e.to_string() })?;
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| NetError::Parse { line, message: format!("{s:?}: {e}") })
            };
            let t = parse(&rec[0])?;
            let d = parse(&rec[1])?;
            if !t.is_finite() || trace.times.last().is_some_and(|p| t <= *p) {
                return Err(NetError::Parse { line, message: "times must be finite and increasing".into() });
            }
            if d.is_nan() || d < 0.0 {
                return Err(NetError::Parse { line, message: "delay must be non-negative or inf".into() });
            }
            trace.times.push(t);
            trace.delays.push(d.is_finite().then_some(d));
        }
        if trace.is_empty() {
            return Err(NetError::EmptyTrace);
        }
        Ok(trace)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn csv_io(e: csv::Error) -> NetError {
    NetError::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelModel {
    /// Round trip of exactly `delay` seconds.
    Constant { delay: f64 },
    Trace(Trace),
    Blockage(BlockageParams),
}

impl ChannelModel {
    pub fn ideal() -> Self {
        ChannelModel::Constant { delay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outage {
    pub start: f64,
    pub end: f64,
    pub extra: f64,
}

/// Lazily generated outage timeline.
#[derive(Debug, Clone)]
struct OutageProcess {
    rng: ChaCha8Rng,
    params: BlockageParams,
    outages: Vec<Outage>,
    horizon: f64,
}

impl OutageProcess {
    fn new(params: BlockageParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(1);
        Self {
            rng,
            params,
            outages: Vec::new(),
            horizon: 0.0,
        }
    }

    fn extend_to(&mut self, t: f64) {
        let p = self.params;
        if p.outage_rate <= 0.0 {
            self.horizon = f64::INFINITY;
            return;
        }
        let gap = Exp::new(p.outage_rate).expect("validated rate");
        let dur_mu = p.outage_duration_mean.ln() - 0.5 * p.outage_duration_sigma.powi(2);
        let duration = LogNormal::new(dur_mu, p.outage_duration_sigma).expect("validated spread");
        let extra = LogNormal::new(p.extra_delay_median.ln(), p.extra_delay_sigma).expect("validated spread");
        while self.horizon <= t {
            let start = self.horizon + gap.sample(&mut self.rng);
            let d = duration.sample(&mut self.rng).min(p.outage_duration_cap);
            let e = extra.sample(&mut self.rng).min(p.extra_delay_cap);
            self.outages.push(Outage { start, end: start + d, extra: e });
            self.horizon = start + d;
        }
    }

    fn at(&mut self, t: f64) -> Option<Outage> {
        self.extend_to(t);
        let i = self.outages.partition_point(|o| o.start <= t);
        i.checked_sub(1).map(|i| self.outages[i]).filter(|o| t < o.end)
    }
}

/// Stateful sampler of per-slot delays.
#[derive(Debug, Clone)]
pub struct Channel {
    model: ChannelModel,
    outages: Option<OutageProcess>,
    /// Number of lookups that needed the cyclic trace extension.
    pub wrapped_lookups: usize,
}

impl Channel {
    pub fn new(model: ChannelModel) -> Result<Self> {
        let outages = match &model {
            ChannelModel::Constant { delay } if !(delay.is_finite() && *delay >= 0.0) => {
                return Err(NetError::InvalidParameter(format!("constant delay {delay}")));
            }
            ChannelModel::Trace(t) if t.is_empty() => return Err(NetError::EmptyTrace),
            ChannelModel::Blockage(p) => {
                p.validate()?;
                Some(OutageProcess::new(*p))
            }
            _ => None,
        };
        Ok(Self {
            model,
            outages,
            wrapped_lookups: 0,
        })
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    /// Delays for the slot whose state was sampled at `t`. Deterministic in
    /// `t` for a given model and seed.
    pub fn slot(&mut self, t: f64) -> SlotDelay {
        match &self.model {
            ChannelModel::Constant { delay } => SlotDelay { uplink: 0.0, downlink: Some(*delay) },
            ChannelModel::Trace(trace) => {
                let (d, wrapped) = trace.lookup(t);
                self.wrapped_lookups += wrapped as usize;
                SlotDelay { uplink: 0.0, downlink: d }
            }
            ChannelModel::Blockage(p) => {
                let p = *p;
                let slot = (t / TRACE_PERIOD).round() as i64 as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
                rng.set_stream(2);
                rng.set_word_pos(slot as u128 * 16);
                let mut hop = || p.edge_delay + rng.random_range(p.airlink_delay[0]..=p.airlink_delay[1]);
                let uplink = hop();
                let down_base = hop();
                let drop_draw: f64 = rng.random();
                let outage = self.outages.as_mut().expect("blockage process").at(t);
                let downlink = match outage {
                    Some(_) if drop_draw < p.drop_prob_in_outage => None,
                    Some(o) => Some(down_base + o.extra),
                    None => Some(down_base),
                };
                SlotDelay { uplink, downlink }
            }
        }
    }

    /// Outages overlapping `[0, t)`; empty for non-blockage models.
    pub fn outages_until(&mut self, t: f64) -> Vec<Outage> {
        match self.outages.as_mut() {
            Some(p) => {
                p.extend_to(t);
                p.outages.iter().copied().filter(|o| o.start < t).collect()
            }
            None => Vec::new(),
        }
    }
}

/// Per-cycle round-trip trace of a preset; the exported CSV replays exactly.
pub fn generate_trace(preset: Preset, duration: f64, seed: u64) -> Result<Trace> {
    generate_trace_from(ChannelModel::Blockage(preset.params(seed)), duration)
}

pub fn generate_trace_from(model: ChannelModel, duration: f64) -> Result<Trace> {
    if !(duration > 0.0) {
        return Err(NetError::InvalidParameter(format!("duration must be positive, got {duration}")));
    }
    let mut ch = Channel::new(model)?;
    let n = (duration / TRACE_PERIOD).round() as usize;
    let mut trace = Trace {
        times: Vec::with_capacity(n),
        delays: Vec::with_capacity(n),
    };
    for i in 0..n {
        let t = i as f64 * TRACE_PERIOD;
        trace.times.push(t);
        trace.delays.push(ch.slot(t).round_trip());
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

/// Bounds on serialized payloads per direction.
pub const MAX_UPLINK_BYTES: usize = 1024;
pub const MAX_DOWNLINK_BYTES: usize = 40 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Message<P> {
    pub direction: Direction,
    pub send_time: f64,
    /// Time of the state sample this message belongs to.
    pub state_timestamp: f64,
    pub payload_bytes: usize,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    At(f64),
    Dropped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub sent: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub oversized: usize,
}

impl LinkStats {
    pub fn in_flight(&self) -> usize {
        self.sent - self.delivered - self.dropped
    }
}

struct Pending<P> {
    time: f64,
    seq: u64,
    msg: Message<P>,
}

impl<P> PartialEq for Pending<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for Pending<P> {}

impl<P> PartialOrd for Pending<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Pending<P> {
    // Min-heap on (delivery time, send order).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// One direction of the link: a delivery-time ordered event queue.
pub struct Link<P> {
    direction: Direction,
    queue: BinaryHeap<Pending<P>>,
    seq: u64,
    last_send: f64,
    pub stats: LinkStats,
}

impl<P> Link<P> {
    pub fn new(direction: Direction) -> Self {
        Self {
            direction,
            queue: BinaryHeap::new(),
            seq: 0,
            last_send: f64::NEG_INFINITY,
            stats: LinkStats::default(),
        }
    }

    /// Schedules `payload` for the slot sampled at `state_timestamp`.
    pub fn send(&mut self, channel: &mut Channel, now: f64, state_timestamp: f64, payload_bytes: usize, payload: P) -> Delivery {
        debug_assert!(now >= self.last_send, "send clock must be monotone");
        self.last_send = now;
        self.stats.sent += 1;
        let limit = match self.direction {
            Direction::Uplink => MAX_UPLINK_BYTES,
            Direction::Downlink => MAX_DOWNLINK_BYTES,
        };
        if payload_bytes > limit {
            self.stats.oversized += 1;
        }
        let slot = channel.slot(state_timestamp);
        let delay = match self.direction {
            Direction::Uplink => Some(slot.uplink),
            // Replies land at state time + round trip regardless of how long
            // the edge side took to send them.
            Direction::Downlink => slot.round_trip().map(|rt| (state_timestamp + rt - now).max(0.0)),
        };
        match delay {
            None => {
                self.stats.dropped += 1;
                Delivery::Dropped
            }
            Some(d) => {
                let time = now + d;
                self.seq += 1;
                self.queue.push(Pending {
                    time,
                    seq: self.seq,
                    msg: Message {
                        direction: self.direction,
                        send_time: now,
                        state_timestamp,
                        payload_bytes,
                        payload,
                    },
                });
                Delivery::At(time)
            }
        }
    }

    /// Messages delivered at or before `now`, in delivery order.
    pub fn poll(&mut self, now: f64) -> Vec<Message<P>> {
        let mut out = Vec::new();
        while self.queue.peek().is_some_and(|p| p.time <= now + 1e-12) {
            let p = self.queue.pop().expect("peeked");
            self.stats.delivered += 1;
            out.push(p.msg);
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct InboxStats {
    pub accepted: usize,
    pub late: usize,
    pub superseded: usize,
}

/// Receiver-side buffer applying the freshness rule.
pub struct Inbox<P> {
    buffer: Vec<Message<P>>,
    pub stats: InboxStats,
}

impl<P> Default for Inbox<P> {
    fn default() -> Self {
        Self {
            buffer: Vec::new(),
            stats: InboxStats::default(),
        }
    }
}

impl<P> Inbox<P> {
    pub fn push(&mut self, msg: Message<P>) {
        self.buffer.push(msg);
    }

    pub fn extend(&mut self, msgs: impl IntoIterator<Item = Message<P>>) {
        self.buffer.extend(msgs);
    }

    /// Freshest buffered message with age below `deadline_age`; everything
    /// else is drained and counted as late or superseded.
    pub fn receive(&mut self, now: f64, deadline_age: f64) -> Option<Message<P>> {
        let mut best: Option<Message<P>> = None;
        for msg in self.buffer.drain(..) {
            if now - msg.state_timestamp >= deadline_age {
                self.stats.late += 1;
                continue;
            }
            match &best {
                Some(b) if b.state_timestamp >= msg.state_timestamp => self.stats.superseded += 1,
                Some(_) => {
                    self.stats.superseded += 1;
                    best = Some(msg);
                }
                None => best = Some(msg),
            }
        }
        if best.is_some() {
            self.stats.accepted += 1;
        }
        best
    }

    /// Drains everything regardless of age, ordered by state timestamp.
    pub fn drain_all(&mut self) -> Vec<Message<P>> {
        let mut v: Vec<_> = self.buffer.drain(..).collect();
        v.sort_by(|a, b| a.state_timestamp.total_cmp(&b.state_timestamp));
        v
    }
}
