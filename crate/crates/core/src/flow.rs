//! Flow record ingestion: CSV parsing, node registry, and per-minute accumulation.

use std::collections::HashMap;
use std::io::Read;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Direction, FeatureSchema};
use crate::tensor::RawTensor;

pub const FLOW_CSV_HEADER: [&str; 9] = [
    "timestamp",
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "protocol",
    "tcp_flags",
    "packets",
    "bytes",
];

pub const REGISTRY_CSV_HEADER: [&str; 3] = ["ip", "node_id", "customer_id"];

/// One sampled flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub timestamp_s: u64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    /// IP protocol number; anything other than 1/6/17 counts as "other".
    pub protocol: u8,
    pub tcp_flags: u8,
    pub packets: u64,
    pub bytes: u64,
}

impl FlowRecord {
    pub fn minute(&self) -> u64 {
        self.timestamp_s / 60
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.timestamp_s,
            self.src_ip,
            self.dst_ip,
            self.src_port,
            self.dst_port,
            self.protocol,
            self.tcp_flags,
            self.packets,
            self.bytes
        )
    }
}

pub(crate) fn check_header(header: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::parse(
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

pub(crate) fn field(row: &csv::StringRecord, i: usize, line: u64) -> Result<&str> {
    row.get(i)
        .map(str::trim)
        .ok_or_else(|| Error::parse(line, format!("missing column {i}")))
}

pub(crate) fn num<T: std::str::FromStr>(row: &csv::StringRecord, i: usize, name: &str, line: u64) -> Result<T> {
    let raw = field(row, i, line)?;
    raw.parse()
        .map_err(|_| Error::parse(line, format!("invalid {name} `{raw}`")))
}

fn ipv4(row: &csv::StringRecord, i: usize, name: &str, line: u64) -> Result<Ipv4Addr> {
    let raw = field(row, i, line)?;
    if raw.contains(':') {
        return Err(Error::parse(line, format!("{name} `{raw}` is IPv6; only IPv4 is supported")));
    }
    raw.parse()
        .map_err(|_| Error::parse(line, format!("invalid {name} `{raw}`")))
}

fn parse_flow_row(row: &csv::StringRecord, line: u64) -> Result<FlowRecord> {
    if row.len() != FLOW_CSV_HEADER.len() {
        return Err(Error::parse(
            line,
            format!("expected {} columns, found {}", FLOW_CSV_HEADER.len(), row.len()),
        ));
    }
    let record = FlowRecord {
        timestamp_s: num(row, 0, "timestamp", line)?,
        src_ip: ipv4(row, 1, "src_ip", line)?,
        dst_ip: ipv4(row, 2, "dst_ip", line)?,
        src_port: num(row, 3, "src_port", line)?,
        dst_port: num(row, 4, "dst_port", line)?,
        protocol: num(row, 5, "protocol", line)?,
        tcp_flags: num(row, 6, "tcp_flags", line)?,
        packets: num(row, 7, "packets", line)?,
        bytes: num(row, 8, "bytes", line)?,
    };
    if record.packets == 0 {
        return Err(Error::parse(line, "packets must be at least 1"));
    }
    if record.bytes < record.packets {
        return Err(Error::parse(
            line,
            format!("bytes ({}) < packets ({})", record.bytes, record.packets),
        ));
    }
    Ok(record)
}

/// Streaming reader over a flow CSV. Yields records in file order; the first malformed row
/// yields an error carrying its line number.
pub struct FlowReader<R: Read> {
    inner: csv::Reader<R>,
    row: csv::StringRecord,
}

impl<R: Read> FlowReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut inner = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let header = inner
            .headers()
            .map_err(|e| Error::parse(1, e.to_string()))?
            .clone();
        check_header(&header, &FLOW_CSV_HEADER)?;
        Ok(Self {
            inner,
            row: csv::StringRecord::new(),
        })
    }
}

impl<R: Read> Iterator for FlowReader<R> {
    type Item = Result<FlowRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.inner.read_record(&mut self.row) {
            Ok(false) => None,
            Ok(true) => {
                let line = self.row.position().map_or(0, |p| p.line());
                Some(parse_flow_row(&self.row, line))
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                Some(Err(Error::parse(line, e.to_string())))
            }
        }
    }
}

pub fn parse_flow_csv(reader: impl Read) -> Result<Vec<FlowRecord>> {
    FlowReader::new(reader)?.collect()
}

/// Monitored nodes and their owning customers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeRegistry {
    ips: Vec<Ipv4Addr>,
    customers: Vec<usize>,
    customer_count: usize,
    by_ip: HashMap<Ipv4Addr, usize>,
}

impl NodeRegistry {
    /// `entries[i]` is `(ip, customer)` of node `i`.
    pub fn new(entries: Vec<(Ipv4Addr, usize)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("node registry is empty"));
        }
        let mut by_ip = HashMap::with_capacity(entries.len());
        for (i, (ip, _)) in entries.iter().enumerate() {
            if by_ip.insert(*ip, i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate node ip {ip}")));
            }
        }
        let customers: Vec<usize> = entries.iter().map(|e| e.1).collect();
        let customer_count = customers.iter().max().map_or(0, |m| m + 1);
        if customer_count > customers.len() {
            return Err(Error::InvalidConfig(format!(
                "customer ids must be dense; {} nodes cannot cover {customer_count} customers",
                customers.len()
            )));
        }
        let mut seen = vec![false; customer_count];
        for &c in &customers {
            seen[c] = true;
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidConfig(format!(
                "customer ids must be dense; customer {gap} has no nodes"
            )));
        }
        Ok(Self {
            ips: entries.iter().map(|e| e.0).collect(),
            customers,
            customer_count,
            by_ip,
        })
    }

    pub fn parse_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?.clone();
        check_header(&header, &REGISTRY_CSV_HEADER)?;
        let mut rows: Vec<(usize, Ipv4Addr, usize)> = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| {
                Error::parse(e.position().map_or(0, |p| p.line()), e.to_string())
            })?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != 3 {
                return Err(Error::parse(line, format!("expected 3 columns, found {}", row.len())));
            }
            let ip = ipv4(&row, 0, "ip", line)?;
            let node: usize = num(&row, 1, "node_id", line)?;
            let customer: usize = num(&row, 2, "customer_id", line)?;
            rows.push((node, ip, customer));
        }
        rows.sort_by_key(|r| r.0);
        for (i, r) in rows.iter().enumerate() {
            if r.0 != i {
                return Err(Error::InvalidConfig(format!(
                    "node ids must be dense 0..{}; found {} at position {i}",
                    rows.len(),
                    r.0
                )));
            }
        }
        Self::new(rows.into_iter().map(|r| (r.1, r.2)).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = REGISTRY_CSV_HEADER.join(",");
        out.push('\n');
        for (i, ip) in self.ips.iter().enumerate() {
            out.push_str(&format!("{ip},{i},{}\n", self.customers[i]));
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.ips.len()
    }

    pub fn customer_count(&self) -> usize {
        self.customer_count
    }

    pub fn node_of(&self, ip: &Ipv4Addr) -> Option<usize> {
        self.by_ip.get(ip).copied()
    }

    pub fn customer_of(&self, node: usize) -> usize {
        self.customers[node]
    }

    pub fn ip_of(&self, node: usize) -> Ipv4Addr {
        self.ips[node]
    }

    pub fn customers(&self) -> &[usize] {
        &self.customers
    }
}

/// Half-open range of absolute epoch minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinuteSpan {
    pub start_minute: u64,
    pub end_minute: u64,
}

impl MinuteSpan {
    pub fn new(start_minute: u64, end_minute: u64) -> Result<Self> {
        if end_minute <= start_minute {
            return Err(Error::InvalidConfig(format!(
                "empty minute span [{start_minute}, {end_minute})"
            )));
        }
        Ok(Self {
            start_minute,
            end_minute,
        })
    }

    pub fn len(&self) -> usize {
        (self.end_minute - self.start_minute) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, minute: u64) -> bool {
        (self.start_minute..self.end_minute).contains(&minute)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulateStats {
    pub used: u64,
    pub skipped: u64,
}

/// Incremental per-node per-minute feature accumulation. Partial accumulators over disjoint
/// record shards merge by addition.
pub struct Accumulator<'a> {
    registry: &'a NodeRegistry,
    schema: &'a FeatureSchema,
    span: MinuteSpan,
    tensor: RawTensor,
    stats: AccumulateStats,
}

impl<'a> Accumulator<'a> {
    pub fn new(registry: &'a NodeRegistry, schema: &'a FeatureSchema, span: MinuteSpan) -> Self {
        let tensor = RawTensor::zeros(
            registry.node_count(),
            span.len(),
            schema.len(),
            span.start_minute,
            schema.hash(),
        );
        Self {
            registry,
            schema,
            span,
            tensor,
            stats: AccumulateStats::default(),
        }
    }

    pub fn add(&mut self, record: &FlowRecord) {
        let minute = record.minute();
        if !self.span.contains(minute) {
            self.stats.skipped += 1;
            return;
        }
        let t = (minute - self.span.start_minute) as usize;
        let dst = self.registry.node_of(&record.dst_ip);
        let src = self.registry.node_of(&record.src_ip);
        if dst.is_none() && src.is_none() {
            self.stats.skipped += 1;
            return;
        }
        self.stats.used += 1;
        for (node, dir) in [(dst, Direction::In), (src, Direction::Out)] {
            if let Some(v) = node {
                let row = self.tensor.row_mut(v, t);
                self.schema.for_each_match(dir, record, |f, x| row[f] += x);
            }
        }
    }

    pub fn merge(&mut self, other: Accumulator<'_>) -> Result<()> {
        if other.span != self.span || other.tensor.data.len() != self.tensor.data.len() {
            return Err(Error::Shape("cannot merge accumulators over different spans".into()));
        }
        for (a, b) in self.tensor.data.iter_mut().zip(&other.tensor.data) {
            *a += b;
        }
        self.stats.used += other.stats.used;
        self.stats.skipped += other.stats.skipped;
        Ok(())
    }

    pub fn finish(self) -> (RawTensor, AccumulateStats) {
        (self.tensor, self.stats)
    }
}

/// Aggregates records into a `(node, minute, feature)` tensor over `span`.
///
/// A record contributes as incoming traffic to the node matching its destination and as
/// outgoing traffic to the node matching its source; a flow between two monitored nodes
/// counts for both. Records outside the span or touching no monitored node are skipped.
pub fn accumulate<'r>(
    records: impl IntoIterator<Item = &'r FlowRecord>,
    registry: &NodeRegistry,
    schema: &FeatureSchema,
    span: MinuteSpan,
) -> (RawTensor, AccumulateStats) {
    let mut acc = Accumulator::new(registry, schema, span);
    for r in records {
        acc.add(r);
    }
    acc.finish()
}
