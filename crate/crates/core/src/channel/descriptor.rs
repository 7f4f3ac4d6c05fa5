// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

use std::net::IpAddr;

use super::{Error, Result};
use crate::crypto::{AeadAlgorithm, HashAlgorithm};
use crate::wire::{Announce, ChannelId, MAX_SECRET_LEN, MIN_SECRET_LEN};

/// Source-specific multicast group ranges: 232.0.0.0/8 and ff3x::/32.
pub fn is_ssm_group(ip: &IpAddr) -> bool {
    match ip {
        IpAddr::V4(a) => a.octets()[0] == 232,
        IpAddr::V6(a) => {
            let o = a.octets();
            o[0] == 0xff && o[1] & 0xf0 == 0x30 && o[2] == 0 && o[3] == 0
        }
    }
}

/// A validated, immutable channel announcement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelDescriptor {
    pub announce: Announce,
    pub aead: AeadAlgorithm,
    pub hash: HashAlgorithm,
}

impl ChannelDescriptor {
    /// Validates address pairing and parameter ranges. Algorithm support is
    /// checked here as well; a client that does not support an algorithm
    /// declines the channel rather than storing it.
    pub fn new(announce: Announce) -> Result<Self> {
        if announce.source_ip.is_ipv4() != announce.group_ip.is_ipv4() {
            return Err(Error::InvalidDescriptor("address family mismatch"));
        }
        if !is_ssm_group(&announce.group_ip) {
            return Err(Error::InvalidDescriptor("group is not an SSM address"));
        }
        if announce.max_rate_kbps == 0 {
            return Err(Error::InvalidDescriptor("zero rate"));
        }
        if !(MIN_SECRET_LEN..=MAX_SECRET_LEN).contains(&announce.header_secret.len()) {
            return Err(Error::InvalidDescriptor("header secret length"));
        }
        let aead = AeadAlgorithm::from_id(announce.aead_id)
            .map_err(|_| Error::InvalidDescriptor("unsupported aead"))?;
        let hash = HashAlgorithm::from_id(announce.hash_id)
            .map_err(|_| Error::InvalidDescriptor("unsupported hash"))?;
        Ok(ChannelDescriptor {
            announce,
            aead,
            hash,
        })
    }

    pub fn channel_id(&self) -> &ChannelId {
        &self.announce.channel_id
    }

    pub fn max_rate_kbps(&self) -> u64 {
        self.announce.max_rate_kbps
    }

    pub fn is_ipv6(&self) -> bool {
        self.announce.group_ip.is_ipv6()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{AeadId, HashId};

    fn announce(group: &str) -> Announce {
        let group_ip: IpAddr = group.parse().unwrap();
        Announce {
            channel_id: ChannelId::new(&[1, 2]).unwrap(),
            source_ip: if group_ip.is_ipv4() {
                "10.0.0.1".parse().unwrap()
            } else {
                "2001:db8::1".parse().unwrap()
            },
            group_ip,
            udp_port: 4433,
            aead_id: AeadId(0x1301),
            hash_id: HashId(4),
            header_secret: vec![0; 32],
            max_rate_kbps: 1000,
        }
    }

    #[test]
    fn ssm_ranges() {
        assert!(ChannelDescriptor::new(announce("232.1.2.3")).is_ok());
        assert!(ChannelDescriptor::new(announce("ff3e::8000:1")).is_ok());
        assert!(ChannelDescriptor::new(announce("239.1.2.3")).is_err());
        assert!(ChannelDescriptor::new(announce("ff0e::1")).is_err());
    }

    #[test]
    fn family_mismatch() {
        let mut a = announce("232.1.2.3");
        a.source_ip = "2001:db8::1".parse().unwrap();
        assert_eq!(
            ChannelDescriptor::new(a),
            Err(Error::InvalidDescriptor("address family mismatch"))
        );
    }

    #[test]
    fn zero_rate() {
        let mut a = announce("232.1.2.3");
        a.max_rate_kbps = 0;
        assert!(ChannelDescriptor::new(a).is_err());
    }
}
