use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{check_header, field, num};

pub const LABEL_CSV_HEADER: [&str; 4] = ["node_id", "start_minute", "end_minute", "attack_type"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttackType {
    Dns,
    Udp,
    Ntp,
}

impl AttackType {
    pub const ALL: [AttackType; 3] = [AttackType::Dns, AttackType::Udp, AttackType::Ntp];
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackType::Dns => "DNS",
            AttackType::Udp => "UDP",
            AttackType::Ntp => "NTP",
        })
    }
}

impl FromStr for AttackType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "DNS" => Ok(AttackType::Dns),
            "UDP" => Ok(AttackType::Udp),
            "NTP" => Ok(AttackType::Ntp),
            other => Err(format!("unknown attack type `{other}`")),
        }
    }
}

/// One attack on one node over absolute epoch minutes `[start_minute, end_minute)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttackLabel {
    pub node: usize,
    pub start_minute: u64,
    pub end_minute: u64,
    pub attack_type: AttackType,
}

impl AttackLabel {
    pub fn duration(&self) -> u64 {
        self.end_minute - self.start_minute
    }

    pub fn contains(&self, minute: u64) -> bool {
        (self.start_minute..self.end_minute).contains(&minute)
    }
}

pub fn parse_labels_csv(reader: impl Read) -> Result<Vec<AttackLabel>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?.clone();
    check_header(&header, &LABEL_CSV_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::parse(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != LABEL_CSV_HEADER.len() {
            return Err(Error::parse(line, format!("expected 4 columns, found {}", row.len())));
        }
        let label = AttackLabel {
            node: num(&row, 0, "node_id", line)?,
            start_minute: num(&row, 1, "start_minute", line)?,
            end_minute: num(&row, 2, "end_minute", line)?,
            attack_type: field(&row, 3, line)?
                .parse()
                .map_err(|e: String| Error::parse(line, e))?,
        };
        if label.end_minute <= label.start_minute {
            return Err(Error::parse(line, "end_minute must exceed start_minute"));
        }
        out.push(label);
    }
    Ok(out)
}

pub fn labels_to_csv(labels: &[AttackLabel]) -> String {
    let mut out = LABEL_CSV_HEADER.join(",");
    out.push('\n');
    for l in labels {
        out.push_str(&format!(
            "{},{},{},{}\n",
            l.node, l.start_minute, l.end_minute, l.attack_type
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let labels = vec![
            AttackLabel { node: 3, start_minute: 100, end_minute: 130, attack_type: AttackType::Ntp },
            AttackLabel { node: 0, start_minute: 5, end_minute: 6, attack_type: AttackType::Dns },
        ];
        assert_eq!(parse_labels_csv(labels_to_csv(&labels).as_bytes()).unwrap(), labels);
    }

    #[test]
    fn rejects_bad_rows() {
        let bad = "node_id,start_minute,end_minute,attack_type\n1,10,20,DNS\n1,30,30,UDP\n";
        match parse_labels_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_labels_csv("node_id,start_minute,end_minute,attack_type\n1,1,2,SYN\n".as_bytes()).is_err());
        assert!(parse_labels_csv("node,start,end,type\n".as_bytes()).is_err());
        assert!(parse_labels_csv("node_id,start_minute,end_minute,attack_type\n".as_bytes()).unwrap().is_empty());
    }
}
