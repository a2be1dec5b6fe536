//! Network-server side: per-node delivery estimation, the rate/channel
//! control scheme, channel-load initialization and the baseline schemes.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand::RngCore;
use thiserror::Error;

use crate::mac::LinkAdrReq;
use crate::radio::{radio_to_dr, sensitivity_dbm, Bandwidth, SpreadingFactor};

#[derive(Debug, Error, PartialEq)]
pub enum SchemeError {
    #[error("node {0} has no assignment")]
    UnknownNode(u32),
    #[error("node {node}: FCnt {new} does not increase on {last}")]
    NonMonotoneFcnt { node: u32, last: u32, new: u32 },
    #[error("thresholds must satisfy 0 < MTS < PRI < 1, got MTS={mts} PRI={pri}")]
    InvalidThresholds { mts: f64, pri: f64 },
    #[error("estimation window size must be at least 2, got {0}")]
    WindowTooSmall(usize),
    #[error("channel count must be positive")]
    NoChannels,
    #[error("unknown scheme name '{0}'")]
    UnknownSchemeName(String),
}

/// One received, deduplicated uplink as stored by the server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UplinkRecord {
    pub node_id: u32,
    pub fcnt: u32,
    pub rssi_dbm: f64,
    pub snr_db: f64,
    pub sf: SpreadingFactor,
    pub channel_index: u8,
    pub time_s: f64,
}

/// Ring of the last W received uplinks of one node.
#[derive(Debug, Clone)]
pub struct EstimationWindow {
    capacity: usize,
    records: VecDeque<UplinkRecord>,
}

impl EstimationWindow {
    pub fn new(capacity: usize) -> Result<Self, SchemeError> {
        if capacity < 2 {
            return Err(SchemeError::WindowTooSmall(capacity));
        }
        Ok(EstimationWindow {
            capacity,
            records: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.records.len() == self.capacity
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    pub fn records(&self) -> impl Iterator<Item = &UplinkRecord> {
        self.records.iter()
    }

    /// Appends a record, evicting the oldest when full. FCnt must strictly
    /// increase.
    pub fn push(&mut self, record: UplinkRecord) -> Result<(), SchemeError> {
        if let Some(last) = self.records.back() {
            if record.fcnt <= last.fcnt {
                return Err(SchemeError::NonMonotoneFcnt {
                    node: record.node_id,
                    last: last.fcnt,
                    new: record.fcnt,
                });
            }
        }
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        Ok(())
    }
}

/// Short-term delivery ratio over a full estimation window.
///
/// Returns `None` while the window is under-filled. With W received
/// packets spanning FCnt values, `P = W / (fcnt_latest - fcnt_oldest + 1)`
/// so a lossless window yields exactly 1.
pub fn short_term_der(window: &EstimationWindow) -> Result<Option<f64>, SchemeError> {
    if !window.is_full() {
        return Ok(None);
    }
    let oldest = window.records.front().expect("full window");
    let latest = window.records.back().expect("full window");
    if latest.fcnt < oldest.fcnt + window.capacity as u32 - 1 {
        return Err(SchemeError::NonMonotoneFcnt {
            node: latest.node_id,
            last: oldest.fcnt,
            new: latest.fcnt,
        });
    }
    let transmitted = f64::from(latest.fcnt - oldest.fcnt) + 1.0;
    Ok(Some(window.capacity as f64 / transmitted))
}

/// Integer numerators of s/2^s for s = 7..=12 over the common
/// denominator 4096; their sum is 498.
const ALPHA_NUMERATORS: [u32; 6] = [224, 128, 72, 40, 22, 12];
const ALPHA_DENOMINATOR: f64 = 498.0;

/// Reference fraction of nodes for a spreading factor:
/// `(s / 2^s) / sum_{i=7..12}(i / 2^i)`. The six values sum to one.
pub fn alpha(sf: SpreadingFactor) -> f64 {
    f64::from(ALPHA_NUMERATORS[sf.table_index()]) / ALPHA_DENOMINATOR
}

/// Saturation threshold for a spreading factor given the total node count.
pub fn sqi(sf: SpreadingFactor, total_nodes: usize) -> f64 {
    alpha(sf) * total_nodes as f64
}

/// Decision thresholds for the rate/channel control scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrccConfig {
    /// Below this delivery ratio the spreading factor is raised.
    pub mts: f64,
    /// Above this delivery ratio a decrease is attempted.
    pub pri: f64,
    /// Estimation window size in received packets.
    pub window: usize,
}

impl Default for DrccConfig {
    fn default() -> Self {
        DrccConfig {
            mts: 0.40,
            pri: 0.80,
            window: 10,
        }
    }
}

impl DrccConfig {
    pub fn validate(&self) -> Result<(), SchemeError> {
        if !(self.mts > 0.0 && self.mts < self.pri && self.pri < 1.0) {
            return Err(SchemeError::InvalidThresholds {
                mts: self.mts,
                pri: self.pri,
            });
        }
        if self.window < 2 {
            return Err(SchemeError::WindowTooSmall(self.window));
        }
        Ok(())
    }
}

/// Global scheme state: per-SF and per-(SF, channel) node counts, node
/// assignments and per-node estimation windows.
#[derive(Debug, Clone)]
pub struct ServerState {
    num_channels: usize,
    total_nodes: usize,
    bandwidth: Bandwidth,
    config: DrccConfig,
    sf_group: [usize; 6],
    ch_ctrl: [Vec<usize>; 6],
    assignment: BTreeMap<u32, (SpreadingFactor, u8)>,
    windows: BTreeMap<u32, EstimationWindow>,
}

impl ServerState {
    pub fn new(
        num_channels: usize,
        total_nodes: usize,
        bandwidth: Bandwidth,
        config: DrccConfig,
    ) -> Result<Self, SchemeError> {
        if num_channels == 0 {
            return Err(SchemeError::NoChannels);
        }
        config.validate()?;
        Ok(ServerState {
            num_channels,
            total_nodes,
            bandwidth,
            config,
            sf_group: [0; 6],
            ch_ctrl: std::array::from_fn(|_| vec![0; num_channels]),
            assignment: BTreeMap::new(),
            windows: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &DrccConfig {
        &self.config
    }

    pub fn total_nodes(&self) -> usize {
        self.total_nodes
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn sf_group(&self, sf: SpreadingFactor) -> usize {
        self.sf_group[sf.table_index()]
    }

    pub fn ch_ctrl(&self, sf: SpreadingFactor, channel: u8) -> usize {
        self.ch_ctrl[sf.table_index()][usize::from(channel)]
    }

    pub fn assignment(&self, node_id: u32) -> Option<(SpreadingFactor, u8)> {
        self.assignment.get(&node_id).copied()
    }

    pub fn assignments(&self) -> impl Iterator<Item = (&u32, &(SpreadingFactor, u8))> {
        self.assignment.iter()
    }

    pub fn window(&self, node_id: u32) -> Option<&EstimationWindow> {
        self.windows.get(&node_id)
    }

    fn add_record(&mut self, node_id: u32, sf: SpreadingFactor, channel: u8) {
        self.sf_group[sf.table_index()] += 1;
        self.ch_ctrl[sf.table_index()][usize::from(channel)] += 1;
        self.assignment.insert(node_id, (sf, channel));
    }

    fn remove_record(&mut self, node_id: u32) -> Option<(SpreadingFactor, u8)> {
        let (sf, channel) = self.assignment.remove(&node_id)?;
        self.sf_group[sf.table_index()] -= 1;
        self.ch_ctrl[sf.table_index()][usize::from(channel)] -= 1;
        Some((sf, channel))
    }

    /// Splits every SF group evenly over the channels: contiguous blocks
    /// in channel index order, per-SF counts differing by at most one.
    pub fn initialize_channels(
        &mut self,
        nodes: &[(u32, SpreadingFactor)],
    ) -> Result<(), SchemeError> {
        if self.num_channels == 0 {
            return Err(SchemeError::NoChannels);
        }
        self.sf_group = [0; 6];
        self.ch_ctrl = std::array::from_fn(|_| vec![0; self.num_channels]);
        self.assignment.clear();

        for sf in SpreadingFactor::ALL {
            let group: Vec<u32> = nodes
                .iter()
                .filter(|(_, s)| *s == sf)
                .map(|(id, _)| *id)
                .collect();
            let quotient = group.len() / self.num_channels;
            let remainder = group.len() % self.num_channels;
            let mut cursor = 0usize;
            for channel in 0..self.num_channels {
                let block = quotient + usize::from(channel < remainder);
                for &node_id in &group[cursor..cursor + block] {
                    self.add_record(node_id, sf, channel as u8);
                }
                cursor += block;
            }
        }
        Ok(())
    }

    /// Moves a node (or admits a new one when `sf_before` is `None`) into
    /// the channel with the fewest nodes at `sf_after`; ties go to the
    /// lowest channel index.
    pub fn rebalance_on_change(
        &mut self,
        node_id: u32,
        sf_before: Option<SpreadingFactor>,
        sf_after: SpreadingFactor,
    ) -> Result<u8, SchemeError> {
        if sf_before.is_some() {
            if !self.assignment.contains_key(&node_id) {
                return Err(SchemeError::UnknownNode(node_id));
            }
            self.remove_record(node_id);
        }
        let loads = &self.ch_ctrl[sf_after.table_index()];
        let channel = loads
            .iter()
            .enumerate()
            .min_by_key(|&(i, load)| (*load, i))
            .map(|(i, _)| i as u8)
            .expect("channel plan is non-empty");
        self.add_record(node_id, sf_after, channel);
        Ok(channel)
    }

    /// Recomputes both count tables from the assignment map.
    pub fn recount(&self) -> ([usize; 6], [Vec<usize>; 6]) {
        let mut sf_group = [0usize; 6];
        let mut ch_ctrl: [Vec<usize>; 6] = std::array::from_fn(|_| vec![0; self.num_channels]);
        for (sf, channel) in self.assignment.values() {
            sf_group[sf.table_index()] += 1;
            ch_ctrl[sf.table_index()][usize::from(*channel)] += 1;
        }
        (sf_group, ch_ctrl)
    }

    /// Verifies incremental counts against a from-scratch recount.
    pub fn counts_consistent(&self) -> bool {
        let (sf_group, ch_ctrl) = self.recount();
        sf_group == self.sf_group && ch_ctrl == self.ch_ctrl
    }
}

/// One step of the delivery-driven spreading factor adjustment.
///
/// Below MTS the node moves one SF up when the target group has room;
/// above PRI it moves one SF down when the target group has room and the
/// latest RSSI clears the faster rate's sensitivity. Group room is judged
/// by a strict comparison against the real-valued saturation threshold.
pub fn drcc_data_rate_step(
    state: &ServerState,
    node_id: u32,
    delivery: f64,
    latest_rssi_dbm: f64,
) -> Result<Option<SpreadingFactor>, SchemeError> {
    let (sf, _) = state
        .assignment(node_id)
        .ok_or(SchemeError::UnknownNode(node_id))?;

    if delivery < state.config.mts {
        if let Some(up) = sf.step_up() {
            if (state.sf_group(up) as f64) < sqi(up, state.total_nodes) {
                return Ok(Some(up));
            }
        }
    } else if delivery > state.config.pri {
        if let Some(down) = sf.step_down() {
            if (state.sf_group(down) as f64) < sqi(down, state.total_nodes)
                && latest_rssi_dbm > sensitivity_dbm(down, state.bandwidth)
            {
                return Ok(Some(down));
            }
        }
    }
    Ok(None)
}

/// Parameters of the SNR-margin baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdrConfig {
    /// Packets considered per decision.
    pub history: usize,
    /// Installation margin subtracted from the link margin, in dB.
    pub device_margin_db: f64,
    /// Margin consumed per spreading factor step, in dB.
    pub step_db: f64,
    /// Demodulation SNR floor per spreading factor, SF7..SF12.
    pub required_snr_db: [f64; 6],
}

impl Default for AdrConfig {
    fn default() -> Self {
        AdrConfig {
            history: 20,
            device_margin_db: 10.0,
            step_db: 3.0,
            required_snr_db: [-7.5, -10.0, -12.5, -15.0, -17.5, -20.0],
        }
    }
}

/// SNR-margin step: with a full history, the margin above the current
/// rate's requirement is converted into whole SF decreases, clamped at
/// SF7. Power steps are out of scope, so a non-positive margin leaves the
/// rate unchanged.
pub fn basic_adr_step(
    history: &[UplinkRecord],
    current_sf: SpreadingFactor,
    config: &AdrConfig,
) -> Option<SpreadingFactor> {
    if history.len() < config.history {
        return None;
    }
    let max_snr = history
        .iter()
        .map(|r| r.snr_db)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin =
        max_snr - config.required_snr_db[current_sf.table_index()] - config.device_margin_db;
    let steps = (margin / config.step_db).floor();
    if steps <= 0.0 {
        return None;
    }
    let decrease = (steps as u8).min(current_sf.value() - 7);
    if decrease == 0 {
        return None;
    }
    Some(SpreadingFactor::new(current_sf.value() - decrease).expect("clamped to range"))
}

/// Proportional allocation: nodes ordered by RSSI descending receive SF7
/// blocks first, sized by the reference fractions, with the remainder at
/// SF12; infeasible assignments are bumped up to the lowest feasible SF.
pub fn fair_sf_allocation(
    nodes: &[(u32, f64)],
    bandwidth: Bandwidth,
) -> Vec<(u32, SpreadingFactor)> {
    let mut ordered: Vec<(u32, f64)> = nodes.to_vec();
    ordered.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let n = ordered.len();
    let mut block_sizes: Vec<usize> = SpreadingFactor::ALL[..5]
        .iter()
        .map(|&sf| (alpha(sf) * n as f64).floor() as usize)
        .collect();
    let assigned: usize = block_sizes.iter().sum();
    block_sizes.push(n - assigned);

    let mut out = Vec::with_capacity(n);
    let mut cursor = 0usize;
    for (sf, block) in SpreadingFactor::ALL.iter().zip(block_sizes) {
        for &(node_id, rssi) in &ordered[cursor..cursor + block] {
            out.push((node_id, lowest_feasible_at_or_above(*sf, rssi, bandwidth)));
        }
        cursor += block;
    }
    out
}

fn lowest_feasible_at_or_above(
    sf: SpreadingFactor,
    rssi_dbm: f64,
    bandwidth: Bandwidth,
) -> SpreadingFactor {
    let mut candidate = sf;
    while rssi_dbm <= sensitivity_dbm(candidate, bandwidth) {
        match candidate.step_up() {
            Some(up) => candidate = up,
            None => break,
        }
    }
    candidate
}

/// Initial spreading factor policy applied at simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialSfPolicy {
    /// Lowest SF whose sensitivity the deterministic link budget clears.
    FeasibilityMinimal,
    /// Every node starts at SF12.
    AllSf12,
    /// Uniformly random SF per node.
    Random,
}

impl InitialSfPolicy {
    pub fn pick(
        self,
        reference_rssi_dbm: f64,
        bandwidth: Bandwidth,
        rng: &mut dyn RngCore,
    ) -> SpreadingFactor {
        match self {
            InitialSfPolicy::FeasibilityMinimal => {
                for sf in SpreadingFactor::ALL {
                    if reference_rssi_dbm >= sensitivity_dbm(sf, bandwidth) {
                        return sf;
                    }
                }
                SpreadingFactor::MAX
            }
            InitialSfPolicy::AllSf12 => SpreadingFactor::MAX,
            InitialSfPolicy::Random => SpreadingFactor::ALL[rng.gen_range(0..6)],
        }
    }
}

impl std::str::FromStr for InitialSfPolicy {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "feasibility-minimal" => Ok(InitialSfPolicy::FeasibilityMinimal),
            "all-sf12" => Ok(InitialSfPolicy::AllSf12),
            "random" => Ok(InitialSfPolicy::Random),
            other => Err(SchemeError::UnknownSchemeName(other.to_string())),
        }
    }
}

/// Setup information the server has about one node.
#[derive(Debug, Clone, Copy)]
pub struct NodeInit {
    pub node_id: u32,
    /// RSSI at the gateway under the deterministic link budget.
    pub reference_rssi_dbm: f64,
    /// SF suggested by the scenario's initial-SF policy.
    pub policy_sf: SpreadingFactor,
}

/// A network-server parameter allocation scheme.
pub trait Scheme: Send {
    fn name(&self) -> &str;

    /// Assigns each node its initial (SF, channel) at setup.
    fn initialize(
        &mut self,
        nodes: &[NodeInit],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<(u32, SpreadingFactor, u8)>, SchemeError>;

    /// Processes one received, deduplicated uplink.
    fn on_uplink(&mut self, record: &UplinkRecord) -> Result<Option<LinkAdrReq>, SchemeError>;
}

/// Scheme selector, parsed from its external name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    Static(SpreadingFactor),
    BasicAdr,
    Fair,
    Drcc,
}

impl SchemeKind {
    pub fn name(&self) -> String {
        match self {
            SchemeKind::Static(sf) => format!("static-sf{}", sf.value()),
            SchemeKind::BasicAdr => "adr".to_string(),
            SchemeKind::Fair => "fadr".to_string(),
            SchemeKind::Drcc => "drcc".to_string(),
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adr" => Ok(SchemeKind::BasicAdr),
            "fadr" => Ok(SchemeKind::Fair),
            "drcc" => Ok(SchemeKind::Drcc),
            _ => {
                if let Some(sf) = s.strip_prefix("static-sf") {
                    let value: u8 = sf
                        .parse()
                        .map_err(|_| SchemeError::UnknownSchemeName(s.to_string()))?;
                    return SpreadingFactor::new(value)
                        .map(SchemeKind::Static)
                        .map_err(|_| SchemeError::UnknownSchemeName(s.to_string()));
                }
                Err(SchemeError::UnknownSchemeName(s.to_string()))
            }
        }
    }
}

/// Builds a ready-to-run scheme instance.
pub fn build_scheme(
    kind: SchemeKind,
    num_channels: usize,
    total_nodes: usize,
    bandwidth: Bandwidth,
    drcc: DrccConfig,
    adr: AdrConfig,
) -> Result<Box<dyn Scheme>, SchemeError> {
    match kind {
        SchemeKind::Static(sf) => Ok(Box::new(StaticScheme {
            sf,
            num_channels,
            name: kind.name(),
        })),
        SchemeKind::BasicAdr => Ok(Box::new(BasicAdrScheme {
            config: adr,
            num_channels,
            histories: BTreeMap::new(),
        })),
        SchemeKind::Fair => Ok(Box::new(FairScheme {
            bandwidth,
            num_channels,
        })),
        SchemeKind::Drcc => {
            let state = ServerState::new(num_channels, total_nodes, bandwidth, drcc)?;
            Ok(Box::new(DrccScheme { state }))
        }
    }
}

/// Fixed spreading factor, random channel, never any commands.
struct StaticScheme {
    sf: SpreadingFactor,
    num_channels: usize,
    name: String,
}

impl Scheme for StaticScheme {
    fn name(&self) -> &str {
        &self.name
    }

    fn initialize(
        &mut self,
        nodes: &[NodeInit],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<(u32, SpreadingFactor, u8)>, SchemeError> {
        Ok(nodes
            .iter()
            .map(|n| {
                (
                    n.node_id,
                    self.sf,
                    rng.gen_range(0..self.num_channels) as u8,
                )
            })
            .collect())
    }

    fn on_uplink(&mut self, _record: &UplinkRecord) -> Result<Option<LinkAdrReq>, SchemeError> {
        Ok(None)
    }
}

/// SNR-margin baseline over the last `history` packets.
struct BasicAdrScheme {
    config: AdrConfig,
    num_channels: usize,
    histories: BTreeMap<u32, VecDeque<UplinkRecord>>,
}

impl Scheme for BasicAdrScheme {
    fn name(&self) -> &str {
        "adr"
    }

    fn initialize(
        &mut self,
        nodes: &[NodeInit],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<(u32, SpreadingFactor, u8)>, SchemeError> {
        Ok(nodes
            .iter()
            .map(|n| {
                (
                    n.node_id,
                    n.policy_sf,
                    rng.gen_range(0..self.num_channels) as u8,
                )
            })
            .collect())
    }

    fn on_uplink(&mut self, record: &UplinkRecord) -> Result<Option<LinkAdrReq>, SchemeError> {
        let history = self.histories.entry(record.node_id).or_default();
        if history.len() == self.config.history {
            history.pop_front();
        }
        history.push_back(*record);

        let records: Vec<UplinkRecord> = history.iter().copied().collect();
        let Some(new_sf) = basic_adr_step(&records, record.sf, &self.config) else {
            return Ok(None);
        };
        if new_sf == record.sf {
            return Ok(None);
        }
        let dr = radio_to_dr(new_sf, Bandwidth::Khz125).expect("125 kHz rates always map");
        Ok(Some(LinkAdrReq {
            data_rate: dr.value(),
            tx_power: 0,
            ch_mask: (1u16 << self.num_channels) - 1,
            ch_mask_cntl: 0,
            nb_trans: 1,
        }))
    }
}

/// Proportional SF split at setup, no runtime control.
struct FairScheme {
    bandwidth: Bandwidth,
    num_channels: usize,
}

impl Scheme for FairScheme {
    fn name(&self) -> &str {
        "fadr"
    }

    fn initialize(
        &mut self,
        nodes: &[NodeInit],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<(u32, SpreadingFactor, u8)>, SchemeError> {
        let rssi: Vec<(u32, f64)> = nodes
            .iter()
            .map(|n| (n.node_id, n.reference_rssi_dbm))
            .collect();
        let by_sf: BTreeMap<u32, SpreadingFactor> = fair_sf_allocation(&rssi, self.bandwidth)
            .into_iter()
            .collect();
        Ok(nodes
            .iter()
            .map(|n| {
                (
                    n.node_id,
                    by_sf[&n.node_id],
                    rng.gen_range(0..self.num_channels) as u8,
                )
            })
            .collect())
    }

    fn on_uplink(&mut self, _record: &UplinkRecord) -> Result<Option<LinkAdrReq>, SchemeError> {
        Ok(None)
    }
}

/// Delivery-driven SF adjustment plus channel load balancing.
struct DrccScheme {
    state: ServerState,
}

impl Scheme for DrccScheme {
    fn name(&self) -> &str {
        "drcc"
    }

    fn initialize(
        &mut self,
        nodes: &[NodeInit],
        _rng: &mut dyn RngCore,
    ) -> Result<Vec<(u32, SpreadingFactor, u8)>, SchemeError> {
        let with_sf: Vec<(u32, SpreadingFactor)> =
            nodes.iter().map(|n| (n.node_id, n.policy_sf)).collect();
        self.state.initialize_channels(&with_sf)?;
        Ok(nodes
            .iter()
            .map(|n| {
                let (sf, channel) = self
                    .state
                    .assignment(n.node_id)
                    .expect("assigned during initialization");
                (n.node_id, sf, channel)
            })
            .collect())
    }

    fn on_uplink(&mut self, record: &UplinkRecord) -> Result<Option<LinkAdrReq>, SchemeError> {
        let window_size = self.state.config.window;
        let window = self
            .state
            .windows
            .entry(record.node_id)
            .or_insert_with(|| EstimationWindow::new(window_size).expect("validated config"));
        window.push(*record)?;
        let Some(delivery) = short_term_der(window)? else {
            return Ok(None);
        };

        let Some(new_sf) =
            drcc_data_rate_step(&self.state, record.node_id, delivery, record.rssi_dbm)?
        else {
            return Ok(None);
        };

        let (old_sf, _) = self
            .state
            .assignment(record.node_id)
            .ok_or(SchemeError::UnknownNode(record.node_id))?;
        let channel = self
            .state
            .rebalance_on_change(record.node_id, Some(old_sf), new_sf)?;
        // Observations made at the old rate do not describe the new one.
        if let Some(window) = self.state.windows.get_mut(&record.node_id) {
            window.clear();
        }

        let dr = radio_to_dr(new_sf, self.state.bandwidth).expect("125 kHz rates always map");
        Ok(Some(LinkAdrReq {
            data_rate: dr.value(),
            tx_power: 0,
            ch_mask: 1u16 << channel,
            ch_mask_cntl: 0,
            nb_trans: 1,
        }))
    }
}
