//! Replays the checked-in fuzz seed corpus through the fuzz entry points.

use std::fs;
use std::path::PathBuf;

use trafficlm::detect::{labels_to_csv, AttackLabel, AttackType};
use trafficlm::discretize::fit_all;
use trafficlm::fuzzing::{encode_sidecar, TARGETS};
use trafficlm::model::{Model, ModelCheckpoint, ModelConfig, VocabularyMap};
use trafficlm::schema::FeatureSchema;
use trafficlm::synth::{generate, SynthConfig};
use trafficlm::tensor::RawTensor;

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus")
}

#[test]
fn seed_corpus_replays_cleanly() {
    let mut replayed = 0;
    for (name, entry) in TARGETS {
        let dir = corpus().join(name);
        let mut files: Vec<_> = fs::read_dir(&dir)
            .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        assert!(!files.is_empty(), "no seeds for {name}");
        for f in files {
            entry(&fs::read(&f).unwrap());
            replayed += 1;
        }
    }
    assert!(replayed >= TARGETS.len());
}

/// Rewrites the seed corpus: `cargo test --test fuzz_seeds -- --ignored`.
#[test]
#[ignore]
fn regenerate_seed_corpus() {
    let cfg = SynthConfig {
        nodes: 2,
        customers: 1,
        minutes: 30,
        attacks: vec![AttackLabel {
            node: 1,
            start_minute: 10,
            end_minute: 15,
            attack_type: AttackType::Dns,
        }],
        ..SynthConfig::default()
    };
    let (flows, out) = generate(&cfg).unwrap();
    let mut flow_csv = String::from("timestamp,src_ip,dst_ip,src_port,dst_port,protocol,tcp_flags,packets,bytes\n");
    for f in flows.iter().take(20) {
        flow_csv.push_str(&f.to_csv_row());
        flow_csv.push('\n');
    }
    let schema = FeatureSchema::light();
    let span = trafficlm::flow::MinuteSpan::new(cfg.start_minute(), cfg.start_minute() + 30).unwrap();
    let (raw, _): (RawTensor, _) = trafficlm::flow::accumulate(&flows, &out.registry, &schema, span);
    let disc = fit_all(&raw, 4).unwrap();
    let tokens = trafficlm::discretize::transform(&raw, &disc).unwrap();
    let model_cfg = ModelConfig {
        layers: 1,
        heads: 1,
        d_model: 4,
        d_ff: 4,
        max_len: 4,
        n_features: 6,
        n_bins: 4,
        n_nodes: 2,
        n_customers: 1,
        dropout: 0.0,
    };
    let ck = ModelCheckpoint {
        model: Model::new(model_cfg, 1).unwrap(),
        schema_hash: schema.hash(),
        config_digest: "seed".into(),
        vocab: VocabularyMap {
            node_ips: vec!["10.0.0.1".into(), "10.0.0.2".into()],
            node_customers: vec![0, 0],
        },
        training: Default::default(),
    };
    let seeds: Vec<(&str, &str, Vec<u8>)> = vec![
        ("flow_csv", "synthetic", flow_csv.into_bytes()),
        ("flow_csv", "bad_ip", b"timestamp,src_ip,dst_ip,src_port,dst_port,protocol,tcp_flags,packets,bytes\n1,1.2.3,4.5.6.7,1,2,6,2,1,40\n".to_vec()),
        ("registry_csv", "synthetic", out.registry.to_csv().into_bytes()),
        ("registry_csv", "duplicate", b"ip,node_id,customer_id\n10.0.0.1,0,0\n10.0.0.1,1,1\n".to_vec()),
        ("labels_csv", "synthetic", labels_to_csv(&out.truth.labels()).into_bytes()),
        ("labels_csv", "inverted", b"node_id,start_minute,end_minute,attack_type\n0,20,10,DNS\n".to_vec()),
        ("raw_tensor", "light", encode_sidecar(&raw.header(), &raw.payload())),
        ("token_tensor", "light", encode_sidecar(&tokens.header(), &tokens.tokens.payload())),
        ("discretizer_json", "light", disc.to_json().unwrap()),
        ("checkpoint", "tiny", ck.encode().unwrap()),
    ];
    for (target, name, bytes) in seeds {
        let dir = corpus().join(target);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(name), bytes).unwrap();
    }
}
