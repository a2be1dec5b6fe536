//! PHY parameter types, the time-on-air calculator, the receiver
//! sensitivity table and the EU868 data-rate index mappings.

use thiserror::Error;

/// Errors produced by radio parameter handling.
#[derive(Debug, Error, PartialEq)]
pub enum RadioError {
    #[error("spreading factor {0} outside 7..=12")]
    SpreadingFactorOutOfRange(u8),
    #[error("unsupported bandwidth {0} kHz")]
    UnsupportedBandwidth(u32),
    #[error("payload length must be at least 1 byte")]
    EmptyPayload,
    #[error("low data rate optimization required for SF{sf} at {bandwidth_khz} kHz")]
    LowDataRateOptimizeRequired { sf: u8, bandwidth_khz: u32 },
    #[error("data rate index {0} is FSK and not supported")]
    FskDataRate(u8),
    #[error("data rate index {0} outside 0..=7")]
    DataRateOutOfRange(u8),
    #[error("no data rate index maps to SF{sf} at {bandwidth_khz} kHz")]
    NoDataRateForRadio { sf: u8, bandwidth_khz: u32 },
    #[error("channel plan must contain strictly increasing frequencies")]
    NonIncreasingChannelPlan,
    #[error("channel plan must contain at least one frequency")]
    EmptyChannelPlan,
    #[error("channel index {index} outside plan of {channels} channels")]
    ChannelIndexOutOfRange { index: u8, channels: usize },
    #[error("tx power {0} dBm exceeds 16 dBm max EIRP")]
    TxPowerTooHigh(f64),
}

/// Spreading factor, restricted to the LoRa range 7..=12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpreadingFactor(u8);

impl SpreadingFactor {
    pub const MIN: SpreadingFactor = SpreadingFactor(7);
    pub const MAX: SpreadingFactor = SpreadingFactor(12);

    /// All spreading factors in ascending order.
    pub const ALL: [SpreadingFactor; 6] = [
        SpreadingFactor(7),
        SpreadingFactor(8),
        SpreadingFactor(9),
        SpreadingFactor(10),
        SpreadingFactor(11),
        SpreadingFactor(12),
    ];

    pub fn new(value: u8) -> Result<Self, RadioError> {
        if (7..=12).contains(&value) {
            Ok(SpreadingFactor(value))
        } else {
            Err(RadioError::SpreadingFactorOutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Next higher spreading factor, or `None` at SF12.
    pub fn step_up(self) -> Option<Self> {
        if self.0 < 12 {
            Some(SpreadingFactor(self.0 + 1))
        } else {
            None
        }
    }

    /// Next lower spreading factor, or `None` at SF7.
    pub fn step_down(self) -> Option<Self> {
        if self.0 > 7 {
            Some(SpreadingFactor(self.0 - 1))
        } else {
            None
        }
    }

    /// Index into tables ordered SF7..SF12.
    pub fn table_index(self) -> usize {
        (self.0 - 7) as usize
    }
}

impl std::fmt::Display for SpreadingFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SF{}", self.0)
    }
}

/// Channel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bandwidth {
    Khz125,
    Khz250,
    Khz500,
}

impl Bandwidth {
    pub fn from_khz(khz: u32) -> Result<Self, RadioError> {
        match khz {
            125 => Ok(Bandwidth::Khz125),
            250 => Ok(Bandwidth::Khz250),
            500 => Ok(Bandwidth::Khz500),
            other => Err(RadioError::UnsupportedBandwidth(other)),
        }
    }

    pub fn khz(self) -> u32 {
        match self {
            Bandwidth::Khz125 => 125,
            Bandwidth::Khz250 => 250,
            Bandwidth::Khz500 => 500,
        }
    }

    pub fn hz(self) -> f64 {
        f64::from(self.khz()) * 1e3
    }
}

/// Coding rate 4/5 .. 4/8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodingRate {
    Cr4_5,
    Cr4_6,
    Cr4_7,
    Cr4_8,
}

impl CodingRate {
    /// Denominator of the 4/x ratio (5..=8).
    pub fn denominator(self) -> u32 {
        match self {
            CodingRate::Cr4_5 => 5,
            CodingRate::Cr4_6 => 6,
            CodingRate::Cr4_7 => 7,
            CodingRate::Cr4_8 => 8,
        }
    }
}

/// The PHY tuple carried by every transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioParams {
    pub sf: SpreadingFactor,
    pub bandwidth: Bandwidth,
    pub coding_rate: CodingRate,
    pub tx_power_dbm: f64,
    pub channel_index: u8,
}

impl RadioParams {
    /// Checks the max-EIRP bound and that the channel index fits the plan.
    pub fn validate(&self, plan: &ChannelPlan) -> Result<(), RadioError> {
        if self.tx_power_dbm > 16.0 {
            return Err(RadioError::TxPowerTooHigh(self.tx_power_dbm));
        }
        if usize::from(self.channel_index) >= plan.len() {
            return Err(RadioError::ChannelIndexOutOfRange {
                index: self.channel_index,
                channels: plan.len(),
            });
        }
        Ok(())
    }
}

/// Ordered list of channel centre frequencies in MHz.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlan {
    frequencies_mhz: Vec<f64>,
}

impl ChannelPlan {
    /// The eight-channel EU868 plan used throughout the experiments.
    pub const EU868_FREQUENCIES_MHZ: [f64; 8] = [
        868.1, 868.3, 868.5, 868.7, 868.9, 869.1, 869.3, 869.5,
    ];

    pub fn new(frequencies_mhz: Vec<f64>) -> Result<Self, RadioError> {
        if frequencies_mhz.is_empty() {
            return Err(RadioError::EmptyChannelPlan);
        }
        if frequencies_mhz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(RadioError::NonIncreasingChannelPlan);
        }
        Ok(ChannelPlan { frequencies_mhz })
    }

    /// The first `channels` frequencies of the EU868 plan.
    pub fn eu868(channels: usize) -> Result<Self, RadioError> {
        if channels == 0 || channels > Self::EU868_FREQUENCIES_MHZ.len() {
            return Err(RadioError::EmptyChannelPlan);
        }
        ChannelPlan::new(Self::EU868_FREQUENCIES_MHZ[..channels].to_vec())
    }

    pub fn len(&self) -> usize {
        self.frequencies_mhz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies_mhz.is_empty()
    }

    pub fn frequency_mhz(&self, index: u8) -> Result<f64, RadioError> {
        self.frequencies_mhz
            .get(usize::from(index))
            .copied()
            .ok_or(RadioError::ChannelIndexOutOfRange {
                index,
                channels: self.len(),
            })
    }
}

impl Default for ChannelPlan {
    fn default() -> Self {
        ChannelPlan::new(Self::EU868_FREQUENCIES_MHZ.to_vec()).expect("static plan is valid")
    }
}

/// EU868 data-rate index. 0..=5 map to (SF12..SF7, 125 kHz),
/// 6 maps to (SF7, 250 kHz) and 7 is FSK, which is unsupported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataRateIndex(u8);

impl DataRateIndex {
    pub fn new(value: u8) -> Result<Self, RadioError> {
        match value {
            0..=6 => Ok(DataRateIndex(value)),
            7 => Err(RadioError::FskDataRate(value)),
            other => Err(RadioError::DataRateOutOfRange(other)),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

/// Maps a data-rate index to its (spreading factor, bandwidth) pair.
pub fn dr_to_radio(dr: DataRateIndex) -> (SpreadingFactor, Bandwidth) {
    match dr.value() {
        0..=5 => (
            SpreadingFactor(12 - dr.value()),
            Bandwidth::Khz125,
        ),
        6 => (SpreadingFactor(7), Bandwidth::Khz250),
        _ => unreachable!("DataRateIndex is validated on construction"),
    }
}

/// Maps a (spreading factor, bandwidth) pair back to its data-rate index.
pub fn radio_to_dr(sf: SpreadingFactor, bandwidth: Bandwidth) -> Result<DataRateIndex, RadioError> {
    match bandwidth {
        Bandwidth::Khz125 => Ok(DataRateIndex(12 - sf.value())),
        Bandwidth::Khz250 if sf.value() == 7 => Ok(DataRateIndex(6)),
        _ => Err(RadioError::NoDataRateForRadio {
            sf: sf.value(),
            bandwidth_khz: bandwidth.khz(),
        }),
    }
}

/// Receiver sensitivity in dBm per (spreading factor, bandwidth).
///
/// Rows SF7..SF12, columns 125/250/500 kHz.
const SENSITIVITY_DBM: [[f64; 3]; 6] = [
    [-123.0, -120.0, -116.0],
    [-126.0, -123.0, -119.0],
    [-129.0, -125.0, -122.0],
    [-132.0, -128.0, -125.0],
    [-133.0, -130.0, -128.0],
    [-136.0, -133.0, -130.0],
];

/// Receiver sensitivity in dBm for the given spreading factor and bandwidth.
pub fn sensitivity_dbm(sf: SpreadingFactor, bandwidth: Bandwidth) -> f64 {
    let col = match bandwidth {
        Bandwidth::Khz125 => 0,
        Bandwidth::Khz250 => 1,
        Bandwidth::Khz500 => 2,
    };
    SENSITIVITY_DBM[sf.table_index()][col]
}

/// Duration of one chirp symbol in seconds.
pub fn symbol_time_s(sf: SpreadingFactor, bandwidth: Bandwidth) -> f64 {
    f64::from(1u32 << sf.value()) / bandwidth.hz()
}

/// Preamble duration in seconds: (preamble symbols + 4.25) symbol times.
pub fn preamble_time_s(sf: SpreadingFactor, bandwidth: Bandwidth, preamble_symbols: u32) -> f64 {
    (f64::from(preamble_symbols) + 4.25) * symbol_time_s(sf, bandwidth)
}

/// Whether low data rate optimization is mandatory for this configuration.
pub fn low_dr_optimize_required(sf: SpreadingFactor, bandwidth: Bandwidth) -> bool {
    bandwidth == Bandwidth::Khz125 && sf.value() >= 11
}

/// Time on air of one uplink in seconds.
///
/// Standard LoRa timing: `T_sym = 2^SF / BW`, preamble
/// `(n_pre + 4.25) * T_sym`, payload symbols
/// `8 + max(ceil((8*PL - 4*SF + 28 + 16 - 20*IH) / (4*(SF - 2*DE))) * CR_den, 0)`
/// with the CRC term always included and `IH = 1` for implicit headers.
pub fn airtime(
    params: RadioParams,
    payload_len: usize,
    preamble_symbols: u32,
    explicit_header: bool,
    low_dr_optimize: bool,
) -> Result<f64, RadioError> {
    if payload_len == 0 {
        return Err(RadioError::EmptyPayload);
    }
    if low_dr_optimize_required(params.sf, params.bandwidth) && !low_dr_optimize {
        return Err(RadioError::LowDataRateOptimizeRequired {
            sf: params.sf.value(),
            bandwidth_khz: params.bandwidth.khz(),
        });
    }

    let sf = i64::from(params.sf.value());
    let de = i64::from(low_dr_optimize);
    let ih = i64::from(!explicit_header);
    let numerator = 8 * payload_len as i64 - 4 * sf + 28 + 16 - 20 * ih;
    let denominator = 4 * (sf - 2 * de);
    let ceil_div = if numerator > 0 {
        (numerator + denominator - 1) / denominator
    } else {
        0
    };
    let payload_symbols =
        8 + (ceil_div * i64::from(params.coding_rate.denominator())).max(0);

    let t_sym = symbol_time_s(params.sf, params.bandwidth);
    let t_preamble = preamble_time_s(params.sf, params.bandwidth, preamble_symbols);
    Ok(t_preamble + payload_symbols as f64 * t_sym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(sf: u8, bw: u32) -> RadioParams {
        RadioParams {
            sf: SpreadingFactor::new(sf).unwrap(),
            bandwidth: Bandwidth::from_khz(bw).unwrap(),
            coding_rate: CodingRate::Cr4_5,
            tx_power_dbm: 14.0,
            channel_index: 0,
        }
    }

    #[test]
    fn airtime_matches_hand_evaluated_values() {
        // SF7/125 kHz, 20 B: n_payload = 43 symbols, T_sym = 1.024 ms.
        let t = airtime(params(7, 125), 20, 8, true, false).unwrap();
        assert_abs_diff_eq!(t, 0.056_576, epsilon = 1e-9);

        // SF12/125 kHz with LowDR: n_payload = 28 symbols, T_sym = 32.768 ms.
        let t = airtime(params(12, 125), 20, 8, true, true).unwrap();
        assert_abs_diff_eq!(t, 1.318_912, epsilon = 1e-9);
    }

    #[test]
    fn airtime_rejects_empty_payload() {
        assert_eq!(
            airtime(params(7, 125), 0, 8, true, false),
            Err(RadioError::EmptyPayload)
        );
    }

    #[test]
    fn airtime_requires_low_dr_flag_for_sf11_sf12_at_125() {
        for sf in [11, 12] {
            let err = airtime(params(sf, 125), 20, 8, true, false).unwrap_err();
            assert!(matches!(err, RadioError::LowDataRateOptimizeRequired { .. }));
        }
        // 250 kHz does not require the flag.
        assert!(airtime(params(12, 250), 20, 8, true, false).is_ok());
    }

    #[test]
    fn airtime_is_strictly_increasing_in_sf() {
        let mut last = 0.0;
        for sf in SpreadingFactor::ALL {
            let low_dr = low_dr_optimize_required(sf, Bandwidth::Khz125);
            let t = airtime(params(sf.value(), 125), 20, 8, true, low_dr).unwrap();
            assert!(t > last, "airtime not increasing at {sf}");
            last = t;
        }
    }

    #[test]
    fn airtime_is_strictly_increasing_in_payload() {
        let mut last = 0.0;
        for payload in 1..=64 {
            let t = airtime(params(9, 125), payload, 8, true, false).unwrap();
            assert!(t >= last);
            last = t;
        }
        let short = airtime(params(9, 125), 10, 8, true, false).unwrap();
        let long = airtime(params(9, 125), 60, 8, true, false).unwrap();
        assert!(long > short);
    }

    #[test]
    fn halving_bandwidth_doubles_airtime() {
        let t250 = airtime(params(9, 250), 20, 8, true, false).unwrap();
        let t125 = airtime(params(9, 125), 20, 8, true, false).unwrap();
        assert_abs_diff_eq!(t125, 2.0 * t250, epsilon = 1e-12);
    }

    #[test]
    fn sensitivity_matches_table() {
        let sf = |v| SpreadingFactor::new(v).unwrap();
        assert_eq!(sensitivity_dbm(sf(7), Bandwidth::Khz125), -123.0);
        assert_eq!(sensitivity_dbm(sf(12), Bandwidth::Khz125), -136.0);
        assert_eq!(sensitivity_dbm(sf(9), Bandwidth::Khz250), -125.0);
    }

    #[test]
    fn sensitivity_is_monotone() {
        for bw in [Bandwidth::Khz125, Bandwidth::Khz250, Bandwidth::Khz500] {
            let mut last = f64::INFINITY;
            for sf in SpreadingFactor::ALL {
                let s = sensitivity_dbm(sf, bw);
                assert!(s < last, "sensitivity not decreasing in SF at {} kHz", bw.khz());
                last = s;
            }
        }
        for sf in SpreadingFactor::ALL {
            let s125 = sensitivity_dbm(sf, Bandwidth::Khz125);
            let s250 = sensitivity_dbm(sf, Bandwidth::Khz250);
            let s500 = sensitivity_dbm(sf, Bandwidth::Khz500);
            assert!(s125 < s250 && s250 < s500);
        }
    }

    #[test]
    fn dr_mapping_round_trips() {
        assert_eq!(
            dr_to_radio(DataRateIndex::new(5).unwrap()),
            (SpreadingFactor::new(7).unwrap(), Bandwidth::Khz125)
        );
        assert_eq!(
            radio_to_dr(SpreadingFactor::new(12).unwrap(), Bandwidth::Khz125)
                .unwrap()
                .value(),
            0
        );
        for dr in 0..=6u8 {
            let idx = DataRateIndex::new(dr).unwrap();
            let (sf, bw) = dr_to_radio(idx);
            assert_eq!(radio_to_dr(sf, bw).unwrap(), idx);
        }
    }

    #[test]
    fn dr7_is_rejected() {
        assert_eq!(DataRateIndex::new(7), Err(RadioError::FskDataRate(7)));
    }

    #[test]
    fn channel_plan_validates() {
        assert_eq!(ChannelPlan::default().len(), 8);
        assert_abs_diff_eq!(ChannelPlan::default().frequency_mhz(0).unwrap(), 868.1);
        assert!(ChannelPlan::new(vec![]).is_err());
        assert!(ChannelPlan::new(vec![868.3, 868.1]).is_err());
        assert_eq!(ChannelPlan::eu868(3).unwrap().len(), 3);
    }

    #[test]
    fn radio_params_validate_bounds() {
        let plan = ChannelPlan::default();
        let mut p = params(7, 125);
        assert!(p.validate(&plan).is_ok());
        p.tx_power_dbm = 17.0;
        assert!(matches!(p.validate(&plan), Err(RadioError::TxPowerTooHigh(_))));
        p.tx_power_dbm = 14.0;
        p.channel_index = 8;
        assert!(matches!(
            p.validate(&plan),
            Err(RadioError::ChannelIndexOutOfRange { .. })
        ));
    }
}
