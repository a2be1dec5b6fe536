//! Log-distance path loss, link budget arithmetic, SNR synthesis and
//! analytic maximum range.

use thiserror::Error;

use crate::radio::{sensitivity_dbm, Bandwidth, SpreadingFactor};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("reference distance must be positive, got {0} m")]
    NonPositiveReferenceDistance(f64),
    #[error("shadowing sigma must be non-negative, got {0} dB")]
    NegativeSigma(f64),
}

/// Parameters of the log-distance path loss model
/// `L(d) = lpl0 + 10*gamma*log10(d/d0) + X_sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLossParams {
    /// Reference distance in meters.
    pub d0_m: f64,
    /// Mean path loss at the reference distance in dB.
    pub lpl0_db: f64,
    /// Path loss exponent.
    pub gamma: f64,
    /// Shadowing standard deviation in dB.
    pub sigma_db: f64,
}

impl PathLossParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.d0_m <= 0.0 {
            return Err(ChannelError::NonPositiveReferenceDistance(self.d0_m));
        }
        if self.sigma_db < 0.0 {
            return Err(ChannelError::NegativeSigma(self.sigma_db));
        }
        Ok(())
    }
}

impl Default for PathLossParams {
    /// Dense-deployment calibration: 127.41 dB at 40 m, exponent 2.08,
    /// no shadowing.
    fn default() -> Self {
        PathLossParams {
            d0_m: 40.0,
            lpl0_db: 127.41,
            gamma: 2.08,
            sigma_db: 0.0,
        }
    }
}

/// Planar node position in meters; the gateway sits at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x_m: f64,
    pub y_m: f64,
}

impl Position {
    pub const ORIGIN: Position = Position { x_m: 0.0, y_m: 0.0 };

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x_m - other.x_m).hypot(self.y_m - other.y_m)
    }

    /// Distance to the gateway at the origin.
    pub fn range_m(&self) -> f64 {
        self.x_m.hypot(self.y_m)
    }
}

/// Path loss in dB at `distance_m`. The shadowing draw is supplied by the
/// caller (0 when sigma = 0) so the function stays deterministic.
pub fn path_loss_db(
    params: &PathLossParams,
    distance_m: f64,
    shadowing_db: f64,
) -> Result<f64, ChannelError> {
    params.validate()?;
    if distance_m <= 0.0 {
        return Err(ChannelError::NonPositiveDistance(distance_m));
    }
    Ok(params.lpl0_db + 10.0 * params.gamma * (distance_m / params.d0_m).log10() + shadowing_db)
}

/// Link budget: RSSI at the receiver in dBm.
pub fn received_power_dbm(tx_power_dbm: f64, antenna_gains_db: f64, loss_db: f64) -> f64 {
    tx_power_dbm + antenna_gains_db - loss_db
}

/// Thermal noise floor in dBm for the given bandwidth and noise figure.
pub fn noise_floor_dbm(bandwidth: Bandwidth, noise_figure_db: f64) -> f64 {
    -174.0 + 10.0 * bandwidth.hz().log10() + noise_figure_db
}

/// SNR in dB synthesized from RSSI against the thermal noise floor.
pub fn snr_estimate_db(rssi_dbm: f64, bandwidth: Bandwidth, noise_figure_db: f64) -> f64 {
    rssi_dbm - noise_floor_dbm(bandwidth, noise_figure_db)
}

/// Analytic maximum range for a deterministic (sigma = 0) channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeEstimate {
    pub meters: f64,
    /// Set when the link budget at the reference distance is already
    /// negative, i.e. the returned distance is below `d0`.
    pub below_reference: bool,
}

/// Inverts the path loss model against the sensitivity table:
/// `d = d0 * 10^((tx_power - sensitivity - lpl0) / (10*gamma))`.
pub fn max_range(
    sf: SpreadingFactor,
    bandwidth: Bandwidth,
    tx_power_dbm: f64,
    params: &PathLossParams,
) -> Result<RangeEstimate, ChannelError> {
    params.validate()?;
    let margin_db = tx_power_dbm - sensitivity_dbm(sf, bandwidth) - params.lpl0_db;
    let meters = params.d0_m * 10f64.powf(margin_db / (10.0 * params.gamma));
    Ok(RangeEstimate {
        meters,
        below_reference: meters < params.d0_m,
    })
}
