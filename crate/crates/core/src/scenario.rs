// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! Scenario files: TOML documents describing topology, clients, channels,
//! workload and attackers. See `docs/scenario.md` for the schema.

use std::net::IpAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::FlowPolicy;
use crate::crypto::{AeadAlgorithm, HashAlgorithm};
use crate::netsim::{AttackKind, LinkConfig};
use crate::server::{PublisherConfig, RotationPolicy, ServerConfig};
use crate::wire::{ChannelId, ClientLimits};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("field `{field}`: {msg}")]
    Field { field: String, msg: String },
    #[error("unknown bundled scenario {0:?}")]
    Unknown(String),
}

fn field(field: impl Into<String>, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Field {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: u64,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub server: ServerSection,
    pub channels: Vec<ChannelSection>,
    #[serde(default)]
    pub client_groups: Vec<ClientGroup>,
    #[serde(default)]
    pub streams: Vec<StreamSection>,
    #[serde(default)]
    pub attackers: Vec<AttackerSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default)]
    pub uplink: LinkConfig,
    #[serde(default = "default_membership_latency")]
    pub membership_latency_ms: u64,
}

fn default_membership_latency() -> u64 {
    10
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            uplink: LinkConfig {
                delay_ms: 1.0,
                ..LinkConfig::default()
            },
            membership_latency_ms: default_membership_latency(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub multicast: bool,
    pub join_timeout_ms: u64,
    pub reorder_threshold: u64,
    pub multicast_retx_fraction: f64,
    pub heavy_loss_fraction: f64,
    pub heavy_loss_window_ms: u64,
    pub heavy_loss_min_packets: usize,
    pub rotation_interval: u64,
    pub unicast_only_every: u64,
    pub integrity_lead: u64,
    pub segment_packets: usize,
    pub max_datagram_size: usize,
}

impl Default for ServerSection {
    fn default() -> Self {
        let s = ServerConfig::default();
        let p = PublisherConfig::default();
        ServerSection {
            multicast: s.multicast,
            join_timeout_ms: s.join_timeout.as_millis() as u64,
            reorder_threshold: s.reorder_threshold,
            multicast_retx_fraction: s.multicast_retx_fraction,
            heavy_loss_fraction: s.heavy_loss_fraction,
            heavy_loss_window_ms: s.heavy_loss_window.as_millis() as u64,
            heavy_loss_min_packets: s.heavy_loss_min_packets,
            rotation_interval: p.rotation.interval,
            unicast_only_every: p.rotation.unicast_only_every,
            integrity_lead: p.integrity_lead,
            segment_packets: p.segment_packets,
            max_datagram_size: p.max_datagram_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    /// Hex channel identifier.
    pub id: String,
    #[serde(default)]
    pub program: Option<String>,
    pub source: IpAddr,
    pub group: IpAddr,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_aead")]
    pub aead: String,
    #[serde(default = "default_hash")]
    pub hash: String,
    pub rate_kbps: u64,
    /// Hex header protection secret; derived from the seed when absent.
    #[serde(default)]
    pub header_secret: Option<String>,
}

fn default_port() -> u16 {
    4433
}

fn default_aead() -> String {
    "aes128gcm".into()
}

fn default_hash() -> String {
    "sha256".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    #[serde(default = "yes")]
    pub ipv4: bool,
    #[serde(default)]
    pub ipv6: bool,
    #[serde(default = "default_hashes")]
    pub hashes: Vec<String>,
    #[serde(default = "default_aeads")]
    pub aeads: Vec<String>,
    pub max_rate_kbps: u64,
    #[serde(default = "default_announced")]
    pub max_channels_announced: u64,
    #[serde(default = "default_joined")]
    pub max_channels_joined: u64,
}

fn yes() -> bool {
    true
}

fn default_hashes() -> Vec<String> {
    vec!["sha256".into()]
}

fn default_aeads() -> Vec<String> {
    vec![
        "aes128gcm".into(),
        "aes256gcm".into(),
        "chacha20poly1305".into(),
    ]
}

fn default_announced() -> u64 {
    16
}

fn default_joined() -> u64 {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsUpdate {
    pub at_ms: u64,
    pub max_rate_kbps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientGroup {
    #[serde(default = "one")]
    pub count: usize,
    /// Whether the clients offer the multicast extension.
    #[serde(default = "yes")]
    pub multicast: bool,
    /// Whether their network delivers multicast traffic.
    #[serde(default = "yes")]
    pub multicast_capable: bool,
    #[serde(default)]
    pub link: LinkConfig,
    pub limits: LimitsSection,
    #[serde(default = "default_flow_policy")]
    pub flow_policy: FlowPolicy,
    #[serde(default)]
    pub initial_max_data: Option<u64>,
    #[serde(default = "default_bundling")]
    pub ack_bundling_ms: u64,
    #[serde(default = "default_spurious")]
    pub spurious_per_sec: usize,
    #[serde(default)]
    pub disconnect_at_ms: Option<u64>,
    #[serde(default)]
    pub limit_updates: Vec<LimitsUpdate>,
}

fn one() -> usize {
    1
}

fn default_flow_policy() -> FlowPolicy {
    FlowPolicy::Extend
}

fn default_bundling() -> u64 {
    25
}

fn default_spurious() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub channel: String,
    pub at_ms: u64,
    pub bytes: u64,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default)]
    pub every_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerSection {
    /// Channel whose source, group and identifier are spoofed.
    pub channel: String,
    pub rate_per_sec: f64,
    pub kinds: Vec<AttackKind>,
    #[serde(default)]
    pub start_ms: u64,
    #[serde(default)]
    pub stop_ms: Option<u64>,
}

pub fn parse_hash(name: &str) -> Option<HashAlgorithm> {
    match name {
        "sha1" => Some(HashAlgorithm::Sha1),
        "sha256" => Some(HashAlgorithm::Sha256),
        "sha384" => Some(HashAlgorithm::Sha384),
        _ => None,
    }
}

pub fn parse_aead(name: &str) -> Option<AeadAlgorithm> {
    match name {
        "aes128gcm" => Some(AeadAlgorithm::Aes128Gcm),
        "aes256gcm" => Some(AeadAlgorithm::Aes256Gcm),
        "chacha20poly1305" => Some(AeadAlgorithm::ChaCha20Poly1305),
        _ => None,
    }
}

pub fn parse_channel_id(s: &str) -> Option<ChannelId> {
    ChannelId::new(&hex::decode(s).ok()?).ok()
}

impl LimitsSection {
    pub fn to_limits(&self, at: &str) -> Result<ClientLimits, ScenarioError> {
        let hashes = self
            .hashes
            .iter()
            .map(|h| parse_hash(h).map(|a| a.id()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| field(format!("{at}.hashes"), "unknown hash algorithm"))?;
        let aeads = self
            .aeads
            .iter()
            .map(|h| parse_aead(h).map(|a| a.id()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| field(format!("{at}.aeads"), "unknown aead"))?;
        let l = ClientLimits {
            allow_ipv4: self.ipv4,
            allow_ipv6: self.ipv6,
            supported_hash_ids: hashes,
            supported_aead_ids: aeads,
            max_aggregate_rate_kbps: self.max_rate_kbps,
            max_channels_announced: self.max_channels_announced,
            max_channels_joined: self.max_channels_joined,
        };
        l.validate().map_err(|m| field(at, m))?;
        Ok(l)
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn client_count(&self) -> usize {
        self.client_groups.iter().map(|g| g.count).sum()
    }

    pub fn duration(&self) -> Duration {
        Duration::from_millis(self.duration_ms)
    }

    pub fn channel_index(&self, id: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.id == id)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.duration_ms == 0 {
            return Err(field("duration_ms", "must be positive"));
        }
        if self.channels.is_empty() {
            return Err(field("channels", "at least one channel is required"));
        }
        for (i, c) in self.channels.iter().enumerate() {
            let at = format!("channels[{i}]");
            parse_channel_id(&c.id)
                .ok_or_else(|| field(format!("{at}.id"), "not a hex identifier of 1..=20 bytes"))?;
            if self.channels[..i].iter().any(|o| o.id == c.id) {
                return Err(field(format!("{at}.id"), "duplicate channel"));
            }
            parse_aead(&c.aead).ok_or_else(|| field(format!("{at}.aead"), "unknown aead"))?;
            parse_hash(&c.hash)
                .ok_or_else(|| field(format!("{at}.hash"), "unknown hash algorithm"))?;
            if !crate::channel::is_ssm_group(&c.group) {
                return Err(field(
                    format!("{at}.group"),
                    "not a source-specific multicast group",
                ));
            }
            if c.source.is_ipv4() != c.group.is_ipv4() {
                return Err(field(
                    format!("{at}.source"),
                    "address family differs from group",
                ));
            }
            if c.rate_kbps == 0 {
                return Err(field(format!("{at}.rate_kbps"), "must be positive"));
            }
            if let Some(h) = &c.header_secret {
                let b =
                    hex::decode(h).map_err(|_| field(format!("{at}.header_secret"), "not hex"))?;
                if !(16..=64).contains(&b.len()) {
                    return Err(field(
                        format!("{at}.header_secret"),
                        "must be 16..=64 bytes",
                    ));
                }
            }
        }
        for (i, g) in self.client_groups.iter().enumerate() {
            let at = format!("client_groups[{i}]");
            g.limits.to_limits(&format!("{at}.limits"))?;
            check_link(&g.link, &format!("{at}.link"))?;
        }
        check_link(&self.network.uplink, "network.uplink")?;
        for (i, s) in self.streams.iter().enumerate() {
            if self.channel_index(&s.channel).is_none() {
                return Err(field(format!("streams[{i}].channel"), "unknown channel"));
            }
        }
        for (i, a) in self.attackers.iter().enumerate() {
            if self.channel_index(&a.channel).is_none() {
                return Err(field(format!("attackers[{i}].channel"), "unknown channel"));
            }
            if a.rate_per_sec < 0.0 || a.kinds.is_empty() {
                return Err(field(
                    format!("attackers[{i}]"),
                    "needs a rate and at least one kind",
                ));
            }
        }
        let s = &self.server;
        RotationPolicy {
            interval: s.rotation_interval,
            unicast_only_every: s.unicast_only_every,
        }
        .validate()
        .map_err(|m| field("server.rotation_interval", m))?;
        if !(0.0..=1.0).contains(&s.multicast_retx_fraction) {
            return Err(field("server.multicast_retx_fraction", "outside [0, 1]"));
        }
        if s.integrity_lead == 0 || s.segment_packets == 0 {
            return Err(field(
                "server.integrity_lead",
                "lead and segment size must be positive",
            ));
        }
        if !(256..=1500).contains(&s.max_datagram_size) {
            return Err(field(
                "server.max_datagram_size",
                "must be within 256..=1500",
            ));
        }
        Ok(())
    }
}

fn check_link(l: &LinkConfig, at: &str) -> Result<(), ScenarioError> {
    if !(0.0..=1.0).contains(&l.loss) {
        return Err(field(format!("{at}.loss"), "outside [0, 1]"));
    }
    if l.delay_ms < 0.0 || l.jitter_ms < 0.0 {
        return Err(field(format!("{at}.delay_ms"), "negative delay"));
    }
    Ok(())
}

/// Scenarios shipped with the crate, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    (
        "stream_100_clients",
        include_str!("../../../scenarios/stream_100_clients.toml"),
    ),
    (
        "no_multicast_network",
        include_str!("../../../scenarios/no_multicast_network.toml"),
    ),
    (
        "attacker_flood",
        include_str!("../../../scenarios/attacker_flood.toml"),
    ),
    (
        "lossy_10_clients",
        include_str!("../../../scenarios/lossy_10_clients.toml"),
    ),
    (
        "budget_steering",
        include_str!("../../../scenarios/budget_steering.toml"),
    ),
    (
        "key_rotation",
        include_str!("../../../scenarios/key_rotation.toml"),
    ),
    (
        "mixed_fallback",
        include_str!("../../../scenarios/mixed_fallback.toml"),
    ),
];

pub fn bundled(name: &str) -> Result<Scenario, ScenarioError> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ScenarioError::Unknown(name.into()))?;
    Scenario::parse(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, _) in BUNDLED {
            let s = bundled(name).unwrap();
            assert_eq!(&s.name, name);
        }
    }

    #[test]
    fn unknown_field_names_line() {
        let e = Scenario::parse("name = \"x\"\nduration_ms = 1\nbogus = 3\nchannels = []\n")
            .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn bad_group_is_rejected() {
        let text = r#"
name = "x"
duration_ms = 10
[[channels]]
id = "aa"
source = "10.0.0.1"
group = "239.1.1.1"
rate_kbps = 10
"#;
        let e = Scenario::parse(text).unwrap_err();
        assert!(e.to_string().contains("channels[0].group"), "{e}");
    }
}
