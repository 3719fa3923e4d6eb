//! The traffic feature taxonomy.
//!
//! Features are laid out in a fixed order:
//!
//! 1. volume: `{in, out} x {pkt, byt, flow}` (6)
//! 2. protocol: `{in, out} x {icmp, tcp, udp, other} x {pkt, byt, flow}` (24)
//! 3. port category: `{in, out} x {0, 53, 80, 123, 443, well-known, registered, private} x {pkt, byt, flow}` (48)
//! 4. TCP flag value: `out x flow x {0, 16, 24, 2, 17, 18, 4, 25}` (8)
//!
//! Within each block the direction varies slowest and the measure fastest.
//! Incoming traffic is keyed by destination port, outgoing traffic by source port.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::flow::FlowRecord;

pub const FULL_FEATURE_COUNT: usize = 86;
pub const LIGHT_FEATURE_COUNT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::In, Direction::Out];

    fn as_str(self) -> &'static str {
        match self {
            Direction::In => "in",
            Direction::Out => "out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measure {
    Packets,
    Bytes,
    Flows,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Packets, Measure::Bytes, Measure::Flows];

    fn as_str(self) -> &'static str {
        match self {
            Measure::Packets => "pkt",
            Measure::Bytes => "byt",
            Measure::Flows => "flow",
        }
    }

    /// Contribution of one record to this measure.
    pub fn of(self, record: &FlowRecord) -> f64 {
        match self {
            Measure::Packets => record.packets as f64,
            Measure::Bytes => record.bytes as f64,
            Measure::Flows => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    Icmp,
    Tcp,
    Udp,
    Other,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Icmp, Protocol::Tcp, Protocol::Udp, Protocol::Other];

    pub fn from_code(code: u8) -> Self {
        match code {
            1 => Protocol::Icmp,
            6 => Protocol::Tcp,
            17 => Protocol::Udp,
            _ => Protocol::Other,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Protocol::Icmp => "icmp",
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
            Protocol::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PortCategory {
    Zero,
    Dns,
    Http,
    Ntp,
    Https,
    WellKnown,
    Registered,
    Private,
}

impl PortCategory {
    pub const ALL: [PortCategory; 8] = [
        PortCategory::Zero,
        PortCategory::Dns,
        PortCategory::Http,
        PortCategory::Ntp,
        PortCategory::Https,
        PortCategory::WellKnown,
        PortCategory::Registered,
        PortCategory::Private,
    ];

    fn as_str(self) -> &'static str {
        match self {
            PortCategory::Zero => "0",
            PortCategory::Dns => "53",
            PortCategory::Http => "80",
            PortCategory::Ntp => "123",
            PortCategory::Https => "443",
            PortCategory::WellKnown => "well_known",
            PortCategory::Registered => "registered",
            PortCategory::Private => "private",
        }
    }
}

/// Maps a transport port to its category. Named ports take precedence over the range buckets.
pub fn port_category(port: u16) -> PortCategory {
    match port {
        0 => PortCategory::Zero,
        53 => PortCategory::Dns,
        80 => PortCategory::Http,
        123 => PortCategory::Ntp,
        443 => PortCategory::Https,
        1..=1023 => PortCategory::WellKnown,
        1024..=49151 => PortCategory::Registered,
        _ => PortCategory::Private,
    }
}

/// The eight tracked TCP flag combinations, bits ordered URG ACK PSH RST SYN FIN from bit 5 down.
pub const TCP_FLAG_VALUES: [u8; 8] = [0, 16, 24, 2, 17, 18, 4, 25];

/// Returns the flag value when it is one of the tracked combinations.
pub fn flag_category(tcp_flags: u8) -> Option<u8> {
    TCP_FLAG_VALUES.contains(&tcp_flags).then_some(tcp_flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Selector {
    Volume,
    Protocol(Protocol),
    Port(PortCategory),
    TcpFlag(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub direction: Direction,
    pub measure: Measure,
    pub selector: Selector,
}

impl FeatureDescriptor {
    /// Whether a record seen in `direction` relative to a monitored node feeds this feature.
    pub fn matches(&self, direction: Direction, record: &FlowRecord) -> bool {
        if self.direction != direction {
            return false;
        }
        match self.selector {
            Selector::Volume => true,
            Selector::Protocol(p) => Protocol::from_code(record.protocol) == p,
            Selector::Port(cat) => {
                let port = match direction {
                    Direction::In => record.dst_port,
                    Direction::Out => record.src_port,
                };
                port_category(port) == cat
            }
            Selector::TcpFlag(v) => {
                Protocol::from_code(record.protocol) == Protocol::Tcp
                    && flag_category(record.tcp_flags) == Some(v)
            }
        }
    }
}

impl fmt::Display for FeatureDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = self.direction.as_str();
        let m = self.measure.as_str();
        match self.selector {
            Selector::Volume => write!(f, "{dir}_{m}_volume"),
            Selector::Protocol(p) => write!(f, "{dir}_{m}_proto_{}", p.as_str()),
            Selector::Port(c) => write!(f, "{dir}_{m}_port_{}", c.as_str()),
            Selector::TcpFlag(v) => write!(f, "{dir}_{m}_flag_{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaVariant {
    /// All 86 features.
    #[serde(rename = "full-86")]
    Full,
    /// Volume features only.
    #[serde(rename = "light-6")]
    Light,
}

#[derive(Debug, Clone)]
pub struct FeatureSchema {
    variant: SchemaVariant,
    descriptors: Vec<FeatureDescriptor>,
    index: HashMap<FeatureDescriptor, usize>,
}

impl FeatureSchema {
    pub fn new(variant: SchemaVariant) -> Self {
        let mut descriptors = Vec::with_capacity(FULL_FEATURE_COUNT);
        let mut push = |direction, selector| {
            for measure in Measure::ALL {
                descriptors.push(FeatureDescriptor {
                    direction,
                    measure,
                    selector,
                });
            }
        };
        for dir in Direction::ALL {
            push(dir, Selector::Volume);
        }
        if variant == SchemaVariant::Full {
            for dir in Direction::ALL {
                for p in Protocol::ALL {
                    push(dir, Selector::Protocol(p));
                }
            }
            for dir in Direction::ALL {
                for c in PortCategory::ALL {
                    push(dir, Selector::Port(c));
                }
            }
            for v in TCP_FLAG_VALUES {
                descriptors.push(FeatureDescriptor {
                    direction: Direction::Out,
                    measure: Measure::Flows,
                    selector: Selector::TcpFlag(v),
                });
            }
        }
        let index = descriptors.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        Self {
            variant,
            descriptors,
            index,
        }
    }

    pub fn full() -> Self {
        Self::new(SchemaVariant::Full)
    }

    pub fn light() -> Self {
        Self::new(SchemaVariant::Light)
    }

    pub fn variant(&self) -> SchemaVariant {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &[FeatureDescriptor] {
        &self.descriptors
    }

    pub fn index_of(&self, d: &FeatureDescriptor) -> Option<usize> {
        self.index.get(d).copied()
    }

    pub fn names(&self) -> Vec<String> {
        self.descriptors.iter().map(|d| d.to_string()).collect()
    }

    /// Stable identifier of the ordered descriptor list. Artifacts carry it so stages can
    /// refuse to mix schemas.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for name in self.names() {
            h.update(name.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Calls `f(feature_index, value)` for every feature the record feeds when seen in
    /// `direction`.
    pub fn for_each_match(
        &self,
        direction: Direction,
        record: &FlowRecord,
        mut f: impl FnMut(usize, f64),
    ) {
        let port = match direction {
            Direction::In => record.dst_port,
            Direction::Out => record.src_port,
        };
        let protocol = Protocol::from_code(record.protocol);
        let mut selectors = [
            Some(Selector::Volume),
            Some(Selector::Protocol(protocol)),
            Some(Selector::Port(port_category(port))),
            None,
        ];
        if protocol == Protocol::Tcp {
            selectors[3] = flag_category(record.tcp_flags).map(Selector::TcpFlag);
        }
        for selector in selectors.into_iter().flatten() {
            for measure in Measure::ALL {
                let d = FeatureDescriptor {
                    direction,
                    measure,
                    selector,
                };
                if let Some(&i) = self.index.get(&d) {
                    f(i, measure.of(record));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    fn rec(protocol: u8, src_port: u16, dst_port: u16, flags: u8) -> FlowRecord {
        FlowRecord {
            timestamp_s: 0,
            src_ip: Ipv4Addr::new(10, 0, 0, 1),
            dst_ip: Ipv4Addr::new(10, 0, 0, 2),
            src_port,
            dst_port,
            protocol,
            tcp_flags: flags,
            packets: 3,
            bytes: 300,
        }
    }

    #[test]
    fn block_sizes() {
        let s = FeatureSchema::full();
        assert_eq!(s.len(), 86);
        let count = |pred: fn(&Selector) -> bool| {
            s.descriptors().iter().filter(|d| pred(&d.selector)).count()
        };
        assert_eq!(count(|s| matches!(s, Selector::Volume)), 6);
        assert_eq!(count(|s| matches!(s, Selector::Protocol(_))), 24);
        assert_eq!(count(|s| matches!(s, Selector::Port(_))), 48);
        assert_eq!(count(|s| matches!(s, Selector::TcpFlag(_))), 8);
        assert_eq!(FeatureSchema::light().len(), 6);
        assert_ne!(FeatureSchema::full().hash(), FeatureSchema::light().hash());
    }

    #[test]
    fn names_are_unique() {
        let names = FeatureSchema::full().names();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names[0], "in_pkt_volume");
        assert_eq!(names[85], "out_flow_flag_25");
    }

    #[test]
    fn port_categories() {
        assert_eq!(port_category(53), PortCategory::Dns);
        assert_eq!(port_category(443), PortCategory::Https);
        assert_eq!(port_category(22), PortCategory::WellKnown);
        assert_eq!(port_category(1023), PortCategory::WellKnown);
        assert_eq!(port_category(1024), PortCategory::Registered);
        assert_eq!(port_category(49151), PortCategory::Registered);
        assert_eq!(port_category(49152), PortCategory::Private);
        assert_eq!(port_category(65535), PortCategory::Private);
        assert_eq!(port_category(0), PortCategory::Zero);
    }

    #[test]
    fn flag_categories() {
        assert_eq!(flag_category(16), Some(16));
        assert_eq!(flag_category(0), Some(0));
        assert_eq!(flag_category(3), None);
        assert_eq!(flag_category(25), Some(25));
    }

    #[test]
    fn fast_matching_agrees_with_descriptor_scan() {
        let s = FeatureSchema::full();
        let records = [
            rec(17, 53, 40000, 0),
            rec(6, 443, 51000, 18),
            rec(6, 80, 22, 3),
            rec(1, 0, 0, 0),
            rec(47, 1500, 123, 16),
        ];
        for r in &records {
            for dir in Direction::ALL {
                let mut fast = vec![0.0; s.len()];
                s.for_each_match(dir, r, |i, v| fast[i] += v);
                let slow: Vec<f64> = s
                    .descriptors()
                    .iter()
                    .map(|d| if d.matches(dir, r) { d.measure.of(r) } else { 0.0 })
                    .collect();
                assert_eq!(fast, slow, "{r:?} {dir:?}");
            }
        }
    }

    #[test]
    fn non_tcp_never_touches_flags() {
        let s = FeatureSchema::full();
        let r = rec(17, 53, 40000, 16);
        s.for_each_match(Direction::Out, &r, |i, _| {
            assert!(!matches!(s.descriptors()[i].selector, Selector::TcpFlag(_)));
        });
    }
}
