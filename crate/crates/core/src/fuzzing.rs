//! Entry points shared by the fuzz targets and the seed-corpus replay test. Each accepts
//! arbitrary bytes and must return without panicking.

use crate::detect::parse_labels_csv;
use crate::discretize::Discretizer;
use crate::flow::{parse_flow_csv, NodeRegistry};
use crate::model::ModelCheckpoint;
use crate::tensor::{RawTensor, TensorHeader, TokenTensor};

/// Splits `[u32 LE header length][JSON header][payload]`.
fn split_sidecar(data: &[u8]) -> Option<(TensorHeader, &[u8])> {
    let len = u32::from_le_bytes(data.get(..4)?.try_into().ok()?) as usize;
    let header = data.get(4..4usize.checked_add(len)?)?;
    let header = serde_json::from_slice(header).ok()?;
    Some((header, &data[4 + len..]))
}

pub fn flow_csv(data: &[u8]) {
    let _ = parse_flow_csv(data);
}

pub fn registry_csv(data: &[u8]) {
    if let Ok(r) = NodeRegistry::parse_csv(data) {
        let again = NodeRegistry::parse_csv(r.to_csv().as_bytes()).expect("registry round trip");
        assert_eq!(again.node_count(), r.node_count());
    }
}

pub fn labels_csv(data: &[u8]) {
    if let Ok(labels) = parse_labels_csv(data) {
        let csv = crate::detect::labels_to_csv(&labels);
        assert_eq!(parse_labels_csv(csv.as_bytes()).expect("labels round trip"), labels);
    }
}

pub fn raw_tensor(data: &[u8]) {
    if let Some((h, payload)) = split_sidecar(data) {
        let _ = RawTensor::decode_raw(&h, payload);
    }
}

pub fn token_tensor(data: &[u8]) {
    if let Some((h, payload)) = split_sidecar(data) {
        let _ = TokenTensor::decode(&h, payload);
    }
}

pub fn discretizer_json(data: &[u8]) {
    if let Ok(d) = Discretizer::from_json(data) {
        let bytes = d.to_json().expect("discretizer encodes");
        Discretizer::from_json(&bytes).expect("discretizer round trip");
    }
}

pub fn checkpoint(data: &[u8]) {
    if let Ok(ck) = ModelCheckpoint::decode(data) {
        let _ = ck.encode();
    }
}

/// `(corpus directory name, entry point)` for every target.
pub const TARGETS: [(&str, fn(&[u8])); 7] = [
    ("flow_csv", flow_csv),
    ("registry_csv", registry_csv),
    ("labels_csv", labels_csv),
    ("raw_tensor", raw_tensor),
    ("token_tensor", token_tensor),
    ("discretizer_json", discretizer_json),
    ("checkpoint", checkpoint),
];

/// Sidecar bytes in the layout [`raw_tensor`] and [`token_tensor`] expect.
pub fn encode_sidecar(header: &TensorHeader, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header encodes");
    let mut out = (json.len() as u32).to_le_bytes().to_vec();
    out.extend(json);
    out.extend(payload);
    out
}
