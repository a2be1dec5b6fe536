//! Gateway-side reception arbitration: frequency separation, spreading
//! factor orthogonality, preamble-aware timing overlap, capture effect and
//! demodulator capacity.

use crate::radio::{preamble_time_s, sensitivity_dbm, symbol_time_s, Bandwidth, SpreadingFactor};

/// One in-flight uplink as seen by the gateway.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub node_id: u32,
    pub fcnt: u32,
    pub channel_freq_mhz: f64,
    pub sf: SpreadingFactor,
    pub bandwidth: Bandwidth,
    pub start_time_s: f64,
    pub airtime_s: f64,
    pub rssi_dbm: f64,
}

impl Transmission {
    pub fn end_time_s(&self) -> f64 {
        self.start_time_s + self.airtime_s
    }

    fn key(&self) -> (u32, u32) {
        (self.node_id, self.fcnt)
    }
}

/// Why a transmission was not demodulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossCause {
    /// RSSI at the gateway below the receiver sensitivity.
    UnderSensitivity,
    /// All demodulation paths were busy when the transmission started.
    DemodCapacity,
    /// Destroyed by a concurrent transmission.
    Collision,
}

/// Final reception verdict for one transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Received,
    Lost(LossCause),
}

impl Verdict {
    pub fn is_received(self) -> bool {
        self == Verdict::Received
    }
}

/// Outcome of the capture comparison between two clashing transmissions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureOutcome {
    ASurvives,
    BSurvives,
    BothLost,
}

/// Collision model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionParams {
    pub preamble_symbols: u32,
    /// Power difference in dB above which the stronger packet survives.
    pub capture_threshold_db: f64,
    /// Concurrent demodulation paths at the gateway; `None` is unlimited.
    pub demod_capacity: Option<usize>,
}

impl Default for CollisionParams {
    fn default() -> Self {
        CollisionParams {
            preamble_symbols: 8,
            capture_threshold_db: 6.0,
            demod_capacity: Some(8),
        }
    }
}

/// Frequency separation thresholds in kHz keyed by the narrower bandwidth
/// of the pair: two carriers clash when closer than the threshold.
pub fn frequency_clash(f1_mhz: f64, bw1: Bandwidth, f2_mhz: f64, bw2: Bandwidth) -> bool {
    let min_khz = bw1.khz().min(bw2.khz());
    let threshold_khz = match min_khz {
        500 => 120.0,
        250 => 60.0,
        _ => 30.0,
    };
    (f1_mhz - f2_mhz).abs() * 1e3 <= threshold_khz
}

/// Perfect inter-SF orthogonality: only equal spreading factors clash.
pub fn sf_clash(sf1: SpreadingFactor, sf2: SpreadingFactor) -> bool {
    sf1 == sf2
}

/// Whether `b` overlaps the critical section of `a`.
///
/// The critical section starts five preamble symbols before the end of
/// `a`'s preamble and runs to the end of `a`: an interferer that leaves
/// the air before the last five preamble symbols does not corrupt `a`.
pub fn timing_critical_overlap(a: &Transmission, b: &Transmission, preamble_symbols: u32) -> bool {
    let critical_start = a.start_time_s + preamble_time_s(a.sf, a.bandwidth, preamble_symbols)
        - 5.0 * symbol_time_s(a.sf, a.bandwidth);
    b.end_time_s() > critical_start && b.start_time_s < a.end_time_s()
}

/// Pairwise capture comparison at the given power threshold.
pub fn capture_verdict(rssi_a_dbm: f64, rssi_b_dbm: f64, threshold_db: f64) -> CaptureOutcome {
    if rssi_a_dbm - rssi_b_dbm >= threshold_db {
        CaptureOutcome::ASurvives
    } else if rssi_b_dbm - rssi_a_dbm >= threshold_db {
        CaptureOutcome::BSurvives
    } else {
        CaptureOutcome::BothLost
    }
}

fn below_sensitivity(tx: &Transmission) -> bool {
    tx.rssi_dbm < sensitivity_dbm(tx.sf, tx.bandwidth)
}

/// Whether interferer `b` destroys `a` (assuming both are on the air).
fn corrupts(a: &Transmission, b: &Transmission, params: &CollisionParams) -> bool {
    frequency_clash(a.channel_freq_mhz, a.bandwidth, b.channel_freq_mhz, b.bandwidth)
        && sf_clash(a.sf, b.sf)
        && timing_critical_overlap(a, b, params.preamble_symbols)
        && capture_verdict(a.rssi_dbm, b.rssi_dbm, params.capture_threshold_db)
            != CaptureOutcome::ASurvives
}

/// Incremental arbiter owned by the event loop.
///
/// `begin` must be called at each transmission start in time order and
/// `complete` at its end; the verdict for a transmission is final at its
/// end time. Simultaneous events must be fed ends-first.
#[derive(Debug)]
pub struct CollisionEngine {
    params: CollisionParams,
    active: Vec<ActiveTx>,
}

#[derive(Debug)]
struct ActiveTx {
    tx: Transmission,
    capacity_dropped: bool,
    /// Snapshot of every transmission whose interval overlapped this one.
    interferers: Vec<Transmission>,
}

impl CollisionEngine {
    pub fn new(params: CollisionParams) -> Self {
        CollisionEngine {
            params,
            active: Vec::new(),
        }
    }

    pub fn params(&self) -> &CollisionParams {
        &self.params
    }

    /// Number of transmissions currently on the air.
    pub fn in_flight(&self) -> usize {
        self.active.len()
    }

    fn demod_paths_in_use(&self) -> usize {
        self.active
            .iter()
            .filter(|a| !a.capacity_dropped && !below_sensitivity(&a.tx))
            .count()
    }

    /// Registers a transmission start.
    pub fn begin(&mut self, tx: Transmission) {
        let mut capacity_dropped = false;
        if !below_sensitivity(&tx) {
            if let Some(cap) = self.params.demod_capacity {
                if self.demod_paths_in_use() >= cap {
                    capacity_dropped = true;
                }
            }
        }
        let mut interferers = Vec::new();
        for other in &mut self.active {
            other.interferers.push(tx.clone());
            interferers.push(other.tx.clone());
        }
        self.active.push(ActiveTx {
            tx,
            capacity_dropped,
            interferers,
        });
    }

    /// Finalizes the transmission identified by (node_id, fcnt) and
    /// returns its verdict. Panics if it was never begun.
    pub fn complete(&mut self, node_id: u32, fcnt: u32) -> Verdict {
        let idx = self
            .active
            .iter()
            .position(|a| a.tx.key() == (node_id, fcnt))
            .expect("completing a transmission that is not in flight");
        let done = self.active.swap_remove(idx);
        self.verdict_for(&done)
    }

    fn verdict_for(&self, done: &ActiveTx) -> Verdict {
        if below_sensitivity(&done.tx) {
            return Verdict::Lost(LossCause::UnderSensitivity);
        }
        if done.capacity_dropped {
            return Verdict::Lost(LossCause::DemodCapacity);
        }
        if done
            .interferers
            .iter()
            .any(|b| corrupts(&done.tx, b, &self.params))
        {
            return Verdict::Lost(LossCause::Collision);
        }
        Verdict::Received
    }
}

/// Resolves the verdict of `completed` given every transmission whose
/// interval intersects it, by replaying the set through the engine in
/// start-time order.
pub fn resolve(
    completed: &Transmission,
    concurrent: &[Transmission],
    params: &CollisionParams,
) -> Verdict {
    let mut all: Vec<&Transmission> = concurrent.iter().collect();
    all.push(completed);
    resolve_set(&mut all.into_iter().cloned().collect::<Vec<_>>(), params)
        .into_iter()
        .find(|(key, _)| *key == completed.key())
        .map(|(_, v)| v)
        .expect("completed transmission present in replay")
}

/// Replays a whole set of transmissions and returns every verdict keyed by
/// (node_id, fcnt). Events are ordered by time with ends before starts at
/// equal timestamps and node id as the final tie-break.
pub fn resolve_set(
    transmissions: &mut [Transmission],
    params: &CollisionParams,
) -> Vec<((u32, u32), Verdict)> {
    #[derive(PartialEq)]
    enum Kind {
        End,
        Start,
    }
    let mut events: Vec<(f64, Kind, usize)> = Vec::with_capacity(transmissions.len() * 2);
    for (i, tx) in transmissions.iter().enumerate() {
        events.push((tx.start_time_s, Kind::Start, i));
        events.push((tx.end_time_s(), Kind::End, i));
    }
    events.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| match (&a.1, &b.1) {
                (Kind::End, Kind::Start) => std::cmp::Ordering::Less,
                (Kind::Start, Kind::End) => std::cmp::Ordering::Greater,
                _ => std::cmp::Ordering::Equal,
            })
            .then_with(|| transmissions[a.2].node_id.cmp(&transmissions[b.2].node_id))
    });

    let mut engine = CollisionEngine::new(*params);
    let mut verdicts = Vec::with_capacity(transmissions.len());
    for (_, kind, idx) in events {
        let tx = &transmissions[idx];
        match kind {
            Kind::Start => engine.begin(tx.clone()),
            Kind::End => verdicts.push((tx.key(), engine.complete(tx.node_id, tx.fcnt))),
        }
    }
    verdicts
}
