//! Deterministic synthetic NetFlow with diurnal background traffic and injected attacks.

use std::io::Write;
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::detect::{AttackLabel, AttackType};
use crate::error::{Error, Result};
use crate::flow::{FlowRecord, NodeRegistry, FLOW_CSV_HEADER};

/// 2023-11-20 00:00:00 UTC, a Monday.
pub const DEFAULT_START_S: u64 = 1_700_438_400;

/// Attacks placed at random on random nodes inside a minute range (relative to the start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackGroup {
    pub count: usize,
    pub start_minute: u64,
    pub end_minute: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub nodes: usize,
    pub customers: usize,
    pub minutes: u64,
    pub start_s: u64,
    /// Median inbound flows per minute across nodes.
    pub rate_median: f64,
    /// Log-scale spread of per-node base rates.
    pub rate_sigma: f64,
    pub diurnal_amplitude: f64,
    /// Log-scale spread of per-minute rate jitter; 0 leaves pure Poisson counts.
    pub noise: f64,
    /// Outbound flow rate relative to inbound.
    pub outbound_ratio: f64,
    /// Floor on each node's share of DNS, NTP and plain UDP background flows.
    pub min_service_share: f64,
    /// Explicit attacks, minutes relative to the start.
    pub attacks: Vec<AttackLabel>,
    pub attack_groups: Vec<AttackGroup>,
    /// Attack minutes carry this many times the usual matching traffic.
    pub magnitude: f64,
    pub duration_min: u64,
    pub duration_max: u64,
    /// Relative weights of DNS, UDP and NTP attacks.
    pub type_mix: [f64; 3],
    /// Clean minutes required around every attack on the same node.
    pub attack_gap: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 20,
            customers: 5,
            minutes: 10_080,
            start_s: DEFAULT_START_S,
            rate_median: 8.0,
            rate_sigma: 0.5,
            diurnal_amplitude: 0.5,
            noise: 0.1,
            outbound_ratio: 0.6,
            min_service_share: 0.05,
            attacks: Vec::new(),
            attack_groups: Vec::new(),
            magnitude: 10.0,
            duration_min: 10,
            duration_max: 60,
            type_mix: [1.0, 1.0, 1.0],
            attack_gap: 120,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.nodes == 0 || self.customers == 0 || self.customers > self.nodes {
            return fail("need at least one node and 1..=nodes customers");
        }
        if self.nodes > 65_000 {
            return fail("at most 65000 nodes");
        }
        if self.minutes == 0 || !self.start_s.is_multiple_of(60) {
            return fail("span must be non-empty and start on a minute boundary");
        }
        if !(self.rate_median > 0.0) || !(self.rate_sigma >= 0.0) || !(self.noise >= 0.0) {
            return fail("rates and spreads must be non-negative");
        }
        if !(0.0..1.0).contains(&self.diurnal_amplitude) {
            return fail("diurnal amplitude must lie in [0, 1)");
        }
        if !(self.outbound_ratio >= 0.0) || !(0.0..0.25).contains(&self.min_service_share) {
            return fail("outbound ratio must be >= 0 and service share in [0, 0.25)");
        }
        if !(self.magnitude > 1.0) {
            return fail("attack magnitude must exceed 1");
        }
        if self.duration_min == 0 || self.duration_max < self.duration_min {
            return fail("attack durations must satisfy 1 <= min <= max");
        }
        if self.type_mix.iter().any(|w| !(*w >= 0.0)) || self.type_mix.iter().sum::<f64>() <= 0.0 {
            return fail("attack type weights must be non-negative and not all zero");
        }
        Ok(())
    }

    pub fn start_minute(&self) -> u64 {
        self.start_s / 60
    }
}

/// Background services. Inbound flows target the service port; outbound flows answer from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Service {
    Https,
    Http,
    Dns,
    Ntp,
    Udp,
    TcpOther,
    Icmp,
}

const SERVICES: [Service; 7] = [
    Service::Https,
    Service::Http,
    Service::Dns,
    Service::Ntp,
    Service::Udp,
    Service::TcpOther,
    Service::Icmp,
];

fn matching_service(t: AttackType) -> Service {
    match t {
        AttackType::Dns => Service::Dns,
        AttackType::Ntp => Service::Ntp,
        AttackType::Udp => Service::Udp,
    }
}

/// Common TCP flag values and their weights; the last entry matches no flag feature.
const TCP_FLAGS: [(u8, f64); 9] = [
    (24, 0.40),
    (16, 0.30),
    (2, 0.10),
    (17, 0.07),
    (18, 0.05),
    (4, 0.03),
    (25, 0.02),
    (0, 0.01),
    (3, 0.02),
];

#[derive(Debug, Clone)]
struct NodeProfile {
    ip: Ipv4Addr,
    rate: f64,
    phase: f64,
    shares: [f64; 7],
}

/// One generated attack with the extra traffic it added per minute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    /// Absolute epoch minutes.
    pub label: AttackLabel,
    pub flows: Vec<u64>,
    pub packets: Vec<u64>,
    pub bytes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub attacks: Vec<AttackRecord>,
    /// Inbound flows per node per minute, attacks included.
    pub inbound_flows: Vec<Vec<u32>>,
    /// Expected background inbound flows per node per minute.
    pub expected_inbound: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn labels(&self) -> Vec<AttackLabel> {
        self.attacks.iter().map(|a| a.label).collect()
    }
}

pub fn node_ip(i: usize) -> Ipv4Addr {
    Ipv4Addr::new(10, 0, (i / 250) as u8, (i % 250 + 1) as u8)
}

fn remote_ip(rng: &mut impl Rng) -> Ipv4Addr {
    // 100.64.0.0/10
    let host: u32 = rng.gen_range(0..(1 << 22));
    Ipv4Addr::from((100u32 << 24) | (64 << 16) | host)
}

fn poisson(mean: f64, rng: &mut impl Rng) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    }
}

fn pick_weighted<T: Copy>(items: &[(T, f64)], rng: &mut impl Rng) -> T {
    let total: f64 = items.iter().map(|i| i.1).sum();
    let mut x = rng.gen::<f64>() * total;
    for &(v, w) in items {
        if x < w {
            return v;
        }
        x -= w;
    }
    // Rounding can leave `x` just past the end.
    items.iter().rev().find(|i| i.1 > 0.0).unwrap_or(&items[items.len() - 1]).0
}

fn profiles(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<NodeProfile> {
    let rates = LogNormal::new(config.rate_median.ln(), config.rate_sigma.max(1e-12)).expect("valid");
    (0..config.nodes)
        .map(|i| {
            let rate = if config.rate_sigma == 0.0 {
                config.rate_median
            } else {
                rates.sample(rng)
            };
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut raw: [f64; 7] = [0.0; 7];
            for w in raw.iter_mut() {
                *w = rng.gen_range(0.2..1.0);
            }
            let sum: f64 = raw.iter().sum();
            let floor = config.min_service_share;
            // Floors for DNS, NTP and UDP; the rest shares what is left.
            let mut shares = [0.0; 7];
            for (k, s) in SERVICES.iter().enumerate() {
                shares[k] = raw[k] / sum * (1.0 - 3.0 * floor);
                if matches!(s, Service::Dns | Service::Ntp | Service::Udp) {
                    shares[k] += floor;
                }
            }
            NodeProfile {
                ip: node_ip(i),
                rate,
                phase,
                shares,
            }
        })
        .collect()
}

fn customers(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..config.nodes)
        .map(|i| if i < config.customers { i } else { rng.gen_range(0..config.customers) })
        .collect()
}

fn diurnal(config: &SynthConfig, p: &NodeProfile, abs_minute: u64) -> f64 {
    let day = (abs_minute % 1440) as f64 / 1440.0;
    p.rate * (1.0 + config.diurnal_amplitude * (std::f64::consts::TAU * day + p.phase).sin())
}

fn place_attacks(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<AttackLabel>> {
    let mut placed: Vec<AttackLabel> = Vec::new();
    let gap = config.attack_gap;
    let clashes = |placed: &[AttackLabel], l: &AttackLabel| {
        placed.iter().any(|o| {
            o.node == l.node && o.start_minute < l.end_minute + gap && l.start_minute < o.end_minute + gap
        })
    };
    for l in &config.attacks {
        if l.node >= config.nodes || l.end_minute > config.minutes || l.start_minute >= l.end_minute {
            return Err(Error::InvalidConfig(format!("attack {l:?} outside the generated span")));
        }
        if clashes(&placed, l) {
            return Err(Error::InvalidConfig(format!("attack {l:?} overlaps another attack")));
        }
        placed.push(*l);
    }
    let types: Vec<(AttackType, f64)> = AttackType::ALL.iter().copied().zip(config.type_mix).collect();
    for g in &config.attack_groups {
        if g.end_minute > config.minutes || g.start_minute + config.duration_max > g.end_minute {
            return Err(Error::InvalidConfig(format!(
                "attack group {g:?} cannot hold a {}-minute attack",
                config.duration_max
            )));
        }
        for _ in 0..g.count {
            let mut ok = false;
            for _ in 0..10_000 {
                let duration = rng.gen_range(config.duration_min..=config.duration_max);
                let start = rng.gen_range(g.start_minute..=g.end_minute - duration);
                let l = AttackLabel {
                    node: rng.gen_range(0..config.nodes),
                    start_minute: start,
                    end_minute: start + duration,
                    attack_type: pick_weighted(&types, rng),
                };
                if !clashes(&placed, &l) {
                    placed.push(l);
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "cannot place {} non-overlapping attacks in {g:?}",
                    g.count
                )));
            }
        }
    }
    placed.sort_by_key(|l| (l.start_minute, l.node));
    Ok(placed)
}

fn background_flow(
    service: Service,
    inbound: bool,
    node: Ipv4Addr,
    ts: u64,
    rng: &mut impl Rng,
) -> FlowRecord {
    let remote = remote_ip(rng);
    let ephemeral = rng.gen_range(49152..=65535u16);
    let (protocol, port) = match service {
        Service::Https => (6, 443),
        Service::Http => (6, 80),
        Service::Dns => (17, 53),
        Service::Ntp => (17, 123),
        Service::Udp => (17, rng.gen_range(1024..=65535u16)),
        Service::TcpOther => (6, rng.gen_range(1024..=49151u16)),
        Service::Icmp => (1, 0),
    };
    let packets = rng.gen_range(1..=10u64);
    let bpp = match service {
        Service::Dns | Service::Ntp => rng.gen_range(64..=512u64),
        Service::Icmp => rng.gen_range(64..=128u64),
        _ => rng.gen_range(64..=1500u64),
    };
    let flags = if protocol == 6 { pick_weighted(&TCP_FLAGS, rng) } else { 0 };
    let (src_ip, dst_ip, src_port, dst_port) = match (inbound, protocol) {
        (_, 1) => {
            if inbound {
                (remote, node, 0, 0)
            } else {
                (node, remote, 0, 0)
            }
        }
        (true, _) => (remote, node, ephemeral, port),
        (false, _) => (node, remote, port, ephemeral),
    };
    FlowRecord {
        timestamp_s: ts,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        protocol,
        tcp_flags: flags,
        packets,
        bytes: packets * bpp,
    }
}

fn attack_flow(kind: AttackType, node: Ipv4Addr, ts: u64, rng: &mut impl Rng) -> FlowRecord {
    let packets = rng.gen_range(1..=10u64);
    let (src_port, dst_port, bpp) = match kind {
        // Amplified responses: large packets from the reflected service.
        AttackType::Dns => (53, 53, rng.gen_range(1000..=1500u64)),
        AttackType::Ntp => (123, 123, rng.gen_range(440..=500u64)),
        AttackType::Udp => (
            rng.gen_range(1024..=65535u16),
            rng.gen_range(49152..=65535u16),
            rng.gen_range(64..=1500u64),
        ),
    };
    FlowRecord {
        timestamp_s: ts,
        src_ip: remote_ip(rng),
        dst_ip: node,
        src_port,
        dst_port,
        protocol: 17,
        tcp_flags: 0,
        packets,
        bytes: packets * bpp,
    }
}

/// Everything about a generated dataset except the flows themselves.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub registry: NodeRegistry,
    pub truth: GroundTruth,
}

/// Generates the dataset and hands every flow record, in timestamp order, to `sink`.
pub fn generate_with(
    config: &SynthConfig,
    mut sink: impl FnMut(&FlowRecord) -> Result<()>,
) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let profiles = profiles(config, &mut rng);
    let customers = customers(config, &mut rng);
    let relative = place_attacks(config, &mut rng)?;
    let registry = NodeRegistry::new(profiles.iter().map(|p| p.ip).zip(customers).collect())?;
    let base = config.start_minute();
    let minutes = config.minutes as usize;

    // Independent stream per node so a node's traffic does not depend on the others.
    let mut node_rngs: Vec<ChaCha8Rng> = (0..config.nodes)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(i as u64 + 1);
            r
        })
        .collect();
    let mut attacks: Vec<AttackRecord> = relative
        .iter()
        .map(|l| AttackRecord {
            label: AttackLabel {
                start_minute: base + l.start_minute,
                end_minute: base + l.end_minute,
                ..*l
            },
            flows: vec![0; l.duration() as usize],
            packets: vec![0; l.duration() as usize],
            bytes: vec![0; l.duration() as usize],
        })
        .collect();
    let mut active: Vec<Option<usize>> = vec![None; config.nodes];
    let mut next_attack = 0;
    let mut inbound = vec![vec![0u32; minutes]; config.nodes];
    let mut expected = vec![vec![0f64; minutes]; config.nodes];
    let jitter = LogNormal::new(-0.5 * config.noise * config.noise, config.noise.max(1e-12)).expect("valid");

    let mut batch: Vec<FlowRecord> = Vec::new();
    for m in 0..minutes {
        let abs = base + m as u64;
        while next_attack < attacks.len() && attacks[next_attack].label.start_minute == abs {
            active[attacks[next_attack].label.node] = Some(next_attack);
            next_attack += 1;
        }
        batch.clear();
        for (v, p) in profiles.iter().enumerate() {
            let rng = &mut node_rngs[v];
            let mean = diurnal(config, p, abs);
            expected[v][m] = mean;
            let level = if config.noise > 0.0 { mean * jitter.sample(rng) } else { mean };
            let n_in = poisson(level, rng);
            let n_out = poisson(level * config.outbound_ratio, rng);
            for (n, dir_in) in [(n_in, true), (n_out, false)] {
                let weights: Vec<(Service, f64)> = SERVICES.iter().copied().zip(p.shares).collect();
                for _ in 0..n {
                    let ts = abs * 60 + rng.gen_range(0..60);
                    let s = pick_weighted(&weights, rng);
                    batch.push(background_flow(s, dir_in, p.ip, ts, rng));
                }
            }
            inbound[v][m] = n_in as u32;
            if let Some(a) = active[v] {
                let rec = &mut attacks[a];
                if abs >= rec.label.end_minute {
                    active[v] = None;
                } else {
                    let kind = rec.label.attack_type;
                    let k = SERVICES.iter().position(|s| *s == matching_service(kind)).expect("listed");
                    let usual = level * p.shares[k];
                    let extra = (config.magnitude - 1.0) * usual.max(1.0);
                    let n = poisson(extra, rng);
                    let i = (abs - rec.label.start_minute) as usize;
                    for _ in 0..n {
                        let ts = abs * 60 + rng.gen_range(0..60);
                        let f = attack_flow(kind, p.ip, ts, rng);
                        rec.flows[i] += 1;
                        rec.packets[i] += f.packets;
                        rec.bytes[i] += f.bytes;
                        batch.push(f);
                    }
                    inbound[v][m] += n as u32;
                }
            }
        }
        batch.sort_by_key(|f| f.timestamp_s);
        for f in &batch {
            sink(f)?;
        }
    }
    Ok(SynthOutput {
        registry,
        truth: GroundTruth {
            attacks,
            inbound_flows: inbound,
            expected_inbound: expected,
        },
    })
}

/// In-memory generation; suitable for small spans.
pub fn generate(config: &SynthConfig) -> Result<(Vec<FlowRecord>, SynthOutput)> {
    let mut flows = Vec::new();
    let out = generate_with(config, |f| {
        flows.push(*f);
        Ok(())
    })?;
    Ok((flows, out))
}

/// Writes the flow CSV to `out` and returns the registry and ground truth.
pub fn write_csv(config: &SynthConfig, out: &mut impl Write) -> Result<SynthOutput> {
    writeln!(out, "{}", FLOW_CSV_HEADER.join(","))?;
    generate_with(config, |f| {
        writeln!(out, "{}", f.to_csv_row())?;
        Ok(())
    })
}
