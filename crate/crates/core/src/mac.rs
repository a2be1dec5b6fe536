//! Bit-exact LinkADRReq / LinkADRAns handling and command application to
//! node radio state.
//!
//! Wire format (5 bytes): CID 0x03, DataRate_TXPower byte (data rate in
//! the high nibble), ChMask as two little-endian bytes, Redundancy byte
//! (RFU bit 7, ChMaskCntl bits 6..4, NbTrans bits 3..0).

use thiserror::Error;

use crate::radio::{dr_to_radio, DataRateIndex, RadioParams};

/// Command identifier prefixing every encoded LinkADRReq.
pub const LINK_ADR_REQ_CID: u8 = 0x03;
/// Encoded length including the CID byte.
pub const LINK_ADR_REQ_LEN: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum MacError {
    #[error("field {field} value {value} exceeds its {bits}-bit width")]
    FieldOverflow {
        field: &'static str,
        value: u16,
        bits: u8,
    },
    #[error("channel mask must not be empty when ChMaskCntl is 0")]
    EmptyChannelMask,
    #[error("expected {LINK_ADR_REQ_LEN} bytes, got {0}")]
    WrongLength(usize),
    #[error("expected CID {LINK_ADR_REQ_CID:#04x}, got {0:#04x}")]
    WrongCid(u8),
    #[error("reserved bit set in redundancy byte")]
    ReservedBitSet,
}

/// Server-to-node data-rate / channel-mask request.
///
/// Fields are raw wire values; semantic validation happens when the
/// command is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkAdrReq {
    /// 4-bit data-rate index.
    pub data_rate: u8,
    /// 4-bit TX power index, carried opaquely.
    pub tx_power: u8,
    /// Bit i enables channel i.
    pub ch_mask: u16,
    /// 3-bit mask-control field; only 0 (mask applies to channels 0..15)
    /// is supported.
    pub ch_mask_cntl: u8,
    /// 4-bit transmission count; 0 means keep the current value.
    pub nb_trans: u8,
}

impl LinkAdrReq {
    /// Channel indices enabled by the mask, ascending.
    pub fn enabled_channels(&self) -> impl Iterator<Item = u8> + '_ {
        (0u8..16).filter(|i| self.ch_mask & (1 << i) != 0)
    }
}

/// Node acknowledgment; the command took effect only if all three flags
/// are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkAdrAns {
    pub power_ack: bool,
    pub data_rate_ack: bool,
    pub channel_mask_ack: bool,
}

impl LinkAdrAns {
    pub fn accepted(&self) -> bool {
        self.power_ack && self.data_rate_ack && self.channel_mask_ack
    }
}

fn check_width(field: &'static str, value: u16, bits: u8) -> Result<(), MacError> {
    if value >> bits != 0 {
        Err(MacError::FieldOverflow { field, value, bits })
    } else {
        Ok(())
    }
}

/// Encodes a request to its 5-byte wire form.
pub fn encode_link_adr_req(req: &LinkAdrReq) -> Result<[u8; LINK_ADR_REQ_LEN], MacError> {
    check_width("data_rate", u16::from(req.data_rate), 4)?;
    check_width("tx_power", u16::from(req.tx_power), 4)?;
    check_width("ch_mask_cntl", u16::from(req.ch_mask_cntl), 3)?;
    check_width("nb_trans", u16::from(req.nb_trans), 4)?;
    if req.ch_mask_cntl == 0 && req.ch_mask == 0 {
        return Err(MacError::EmptyChannelMask);
    }
    let mask = req.ch_mask.to_le_bytes();
    Ok([
        LINK_ADR_REQ_CID,
        (req.data_rate << 4) | req.tx_power,
        mask[0],
        mask[1],
        (req.ch_mask_cntl << 4) | req.nb_trans,
    ])
}

/// Decodes a 5-byte wire form back into a request; strict inverse of
/// [`encode_link_adr_req`].
pub fn decode_link_adr_req(bytes: &[u8]) -> Result<LinkAdrReq, MacError> {
    if bytes.len() != LINK_ADR_REQ_LEN {
        return Err(MacError::WrongLength(bytes.len()));
    }
    if bytes[0] != LINK_ADR_REQ_CID {
        return Err(MacError::WrongCid(bytes[0]));
    }
    if bytes[4] & 0x80 != 0 {
        return Err(MacError::ReservedBitSet);
    }
    let req = LinkAdrReq {
        data_rate: bytes[1] >> 4,
        tx_power: bytes[1] & 0x0F,
        ch_mask: u16::from_le_bytes([bytes[2], bytes[3]]),
        ch_mask_cntl: (bytes[4] >> 4) & 0x07,
        nb_trans: bytes[4] & 0x0F,
    };
    if req.ch_mask_cntl == 0 && req.ch_mask == 0 {
        return Err(MacError::EmptyChannelMask);
    }
    Ok(req)
}

/// Highest TX power index accepted by the node (six levels, 0..=5).
pub const MAX_TX_POWER_INDEX: u8 = 5;

/// Applies a request to the radio state of a node with `num_channels`
/// usable channels. Returns the acknowledgment; on any rejection the
/// radio is left untouched. The TX power index is acknowledged but never
/// alters the simulated power.
pub fn apply_link_adr(radio: &mut RadioParams, num_channels: usize, req: &LinkAdrReq) -> LinkAdrAns {
    let new_radio = DataRateIndex::new(req.data_rate).ok().map(dr_to_radio);

    let power_ack = req.tx_power <= MAX_TX_POWER_INDEX;

    let mask_in_range = req.enabled_channels().all(|ch| usize::from(ch) < num_channels);
    let channel_mask_ack = req.ch_mask_cntl == 0 && req.ch_mask != 0 && mask_in_range;

    let ans = LinkAdrAns {
        power_ack,
        data_rate_ack: new_radio.is_some(),
        channel_mask_ack,
    };
    if !ans.accepted() {
        return ans;
    }

    let (sf, bandwidth) = new_radio.expect("checked above");
    radio.sf = sf;
    radio.bandwidth = bandwidth;
    if req.ch_mask & (1 << radio.channel_index) == 0 {
        radio.channel_index = req
            .enabled_channels()
            .next()
            .expect("mask is non-empty");
    }
    ans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radio::{Bandwidth, CodingRate, SpreadingFactor};

    fn radio(sf: u8, channel: u8) -> RadioParams {
        RadioParams {
            sf: SpreadingFactor::new(sf).unwrap(),
            bandwidth: Bandwidth::Khz125,
            coding_rate: CodingRate::Cr4_5,
            tx_power_dbm: 14.0,
            channel_index: channel,
        }
    }

    #[test]
    fn golden_vectors() {
        let req = LinkAdrReq {
            data_rate: 5,
            tx_power: 0,
            ch_mask: 0x00FF,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        assert_eq!(encode_link_adr_req(&req).unwrap(), [0x03, 0x50, 0xFF, 0x00, 0x01]);

        let req = LinkAdrReq {
            data_rate: 0,
            tx_power: 0,
            ch_mask: 0x0001,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        assert_eq!(encode_link_adr_req(&req).unwrap(), [0x03, 0x00, 0x01, 0x00, 0x01]);
    }

    #[test]
    fn decode_inverts_golden_vector() {
        let req = decode_link_adr_req(&[0x03, 0x50, 0xFF, 0x00, 0x01]).unwrap();
        assert_eq!(
            req,
            LinkAdrReq {
                data_rate: 5,
                tx_power: 0,
                ch_mask: 0x00FF,
                ch_mask_cntl: 0,
                nb_trans: 1,
            }
        );
    }

    #[test]
    fn empty_mask_with_cntl_zero_is_rejected() {
        let req = LinkAdrReq {
            data_rate: 0,
            tx_power: 0,
            ch_mask: 0,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        assert_eq!(encode_link_adr_req(&req), Err(MacError::EmptyChannelMask));
    }

    #[test]
    fn field_overflow_is_rejected() {
        let req = LinkAdrReq {
            data_rate: 16,
            tx_power: 0,
            ch_mask: 1,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        assert!(matches!(
            encode_link_adr_req(&req),
            Err(MacError::FieldOverflow { field: "data_rate", .. })
        ));
    }

    #[test]
    fn decode_rejects_bad_frames() {
        assert_eq!(decode_link_adr_req(&[0x03, 0, 1, 0]), Err(MacError::WrongLength(4)));
        assert_eq!(
            decode_link_adr_req(&[0x04, 0, 1, 0, 1]),
            Err(MacError::WrongCid(0x04))
        );
        assert_eq!(
            decode_link_adr_req(&[0x03, 0, 1, 0, 0x81]),
            Err(MacError::ReservedBitSet)
        );
        assert_eq!(
            decode_link_adr_req(&[0x03, 0, 0, 0, 0x01]),
            Err(MacError::EmptyChannelMask)
        );
    }

    #[test]
    fn apply_moves_node_to_requested_rate_and_channel() {
        let mut r = radio(9, 0);
        let req = LinkAdrReq {
            data_rate: 5,
            tx_power: 0,
            ch_mask: 1 << 2,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        let ans = apply_link_adr(&mut r, 8, &req);
        assert!(ans.accepted());
        assert_eq!(r.sf.value(), 7);
        assert_eq!(r.bandwidth, Bandwidth::Khz125);
        assert_eq!(r.channel_index, 2);
    }

    #[test]
    fn apply_keeps_current_channel_when_still_enabled() {
        let mut r = radio(9, 3);
        let req = LinkAdrReq {
            data_rate: 4,
            tx_power: 0,
            ch_mask: 0x00FF,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        let ans = apply_link_adr(&mut r, 8, &req);
        assert!(ans.accepted());
        assert_eq!(r.sf.value(), 8);
        assert_eq!(r.channel_index, 3);
    }

    #[test]
    fn apply_rejects_fsk_data_rate_without_state_change() {
        let mut r = radio(9, 0);
        let before = r;
        let req = LinkAdrReq {
            data_rate: 7,
            tx_power: 0,
            ch_mask: 1,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        let ans = apply_link_adr(&mut r, 8, &req);
        assert!(!ans.data_rate_ack);
        assert!(ans.channel_mask_ack && ans.power_ack);
        assert_eq!(r, before);
    }

    #[test]
    fn apply_rejects_empty_mask_without_state_change() {
        let mut r = radio(9, 0);
        let before = r;
        let req = LinkAdrReq {
            data_rate: 5,
            tx_power: 0,
            ch_mask: 0,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        let ans = apply_link_adr(&mut r, 8, &req);
        assert!(!ans.channel_mask_ack);
        assert_eq!(r, before);
    }

    #[test]
    fn apply_rejects_mask_bits_beyond_plan() {
        let mut r = radio(9, 0);
        let before = r;
        let req = LinkAdrReq {
            data_rate: 5,
            tx_power: 0,
            ch_mask: 1 << 9,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        let ans = apply_link_adr(&mut r, 8, &req);
        assert!(!ans.channel_mask_ack);
        assert_eq!(r, before);
    }

    #[test]
    fn apply_rejects_unsupported_mask_cntl() {
        let mut r = radio(9, 0);
        let before = r;
        let req = LinkAdrReq {
            data_rate: 5,
            tx_power: 0,
            ch_mask: 1,
            ch_mask_cntl: 6,
            nb_trans: 1,
        };
        let ans = apply_link_adr(&mut r, 8, &req);
        assert!(!ans.channel_mask_ack);
        assert_eq!(r, before);
    }

    #[test]
    fn apply_rejects_out_of_range_power_index() {
        let mut r = radio(9, 0);
        let before = r;
        let req = LinkAdrReq {
            data_rate: 5,
            tx_power: 9,
            ch_mask: 1,
            ch_mask_cntl: 0,
            nb_trans: 1,
        };
        let ans = apply_link_adr(&mut r, 8, &req);
        assert!(!ans.power_ack);
        assert_eq!(r, before);
    }
}
