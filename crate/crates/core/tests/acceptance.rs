//! Acceptance criteria. Each test prints one `ACCEPTANCE <name>: PASS|FAIL` line to stderr.

use std::io::Write as _;
use std::net::Ipv4Addr;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trafficlm::detect::{
    build_examples, detect, finetune, report, select_threshold, survival_from_logits, window_states, AttackLabel,
    DetectionExample, EvalReport, FinetuneConfig, HeadExample, WindowConfig,
};
use trafficlm::discretize::{discretize_value, fit_all, fit_bins, map_unseen_nodes, transform, Discretizer};
use trafficlm::flow::{Accumulator, FlowRecord, MinuteSpan, NodeRegistry};
use trafficlm::model::{Mode, Model, ModelConfig, ModelParams, StepInput, VocabularyMap};
use trafficlm::schema::{Direction, FeatureSchema, Measure, Selector};
use trafficlm::synth::{generate_with, AttackGroup, SynthConfig};
use trafficlm::tensor::{RawTensor, Tensor3, TokenTensor};
use trafficlm::time::TimeFeatures;
use trafficlm::train::{pretrain, BigramModel, EvalMetrics, PretrainResult, TrainConfig};

fn verdict(name: &str, pass: bool, detail: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "ACCEPTANCE {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------------------------------------
// Shared synthetic run.

const NODES: usize = 50;
const CUSTOMERS: usize = 10;
const MINUTES: u64 = 20_000;
const TRAIN_END: u64 = 14_000;
const VAL_END: u64 = 17_000;

struct Fixture {
    schema: FeatureSchema,
    registry: NodeRegistry,
    labels: Vec<AttackLabel>,
    raw: Vec<RawTensor>,
    tokens: Vec<TokenTensor>,
    prepare_s: f64,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let clock = Instant::now();
        let cfg = SynthConfig {
            nodes: NODES,
            customers: CUSTOMERS,
            minutes: MINUTES,
            diurnal_amplitude: 0.5,
            attack_groups: vec![
                AttackGroup { count: 20, start_minute: TRAIN_END + 120, end_minute: VAL_END - 80 },
                AttackGroup { count: 20, start_minute: VAL_END + 120, end_minute: MINUTES - 80 },
            ],
            seed: 2024,
            ..SynthConfig::default()
        };
        let schema = FeatureSchema::full();
        let base = cfg.start_minute();
        let bounds = [0, TRAIN_END, VAL_END, MINUTES];
        let spans: Vec<MinuteSpan> =
            bounds.windows(2).map(|w| MinuteSpan::new(base + w[0], base + w[1]).unwrap()).collect();
        // The registry is only known once generation starts, so accumulate into one tensor
        // per split from a buffered registry-free pass: generate twice is wasteful, so the
        // registry is rebuilt from the same deterministic node layout.
        let registry = NodeRegistry::new(
            (0..NODES).map(|i| (trafficlm::synth::node_ip(i), 0)).collect(),
        )
        .unwrap();
        let mut accs: Vec<Accumulator> = spans.iter().map(|s| Accumulator::new(&registry, &schema, *s)).collect();
        let out = generate_with(&cfg, |f| {
            for a in accs.iter_mut() {
                a.add(f);
            }
            Ok(())
        })
        .unwrap();
        let raw: Vec<RawTensor> = accs.into_iter().map(|a| a.finish().0).collect();
        let disc = fit_all(&raw[0], 10).unwrap();
        let tokens: Vec<TokenTensor> = raw.iter().map(|r| transform(r, &disc).unwrap()).collect();
        Fixture {
            schema,
            registry: out.registry,
            labels: out.truth.labels(),
            raw,
            tokens,
            prepare_s: clock.elapsed().as_secs_f64(),
        }
    })
}

fn vocab(f: &Fixture) -> VocabularyMap {
    VocabularyMap {
        node_ips: (0..NODES).map(|i| f.registry.ip_of(i).to_string()).collect(),
        node_customers: f.registry.customers().to_vec(),
    }
}

struct Pretrained {
    result: PretrainResult,
    model_val: EvalMetrics,
    bigram_val: EvalMetrics,
    wall_s: f64,
}

fn pretrained() -> &'static Pretrained {
    static P: OnceLock<Pretrained> = OnceLock::new();
    P.get_or_init(|| {
        let f = fixture();
        let clock = Instant::now();
        let cfg = ModelConfig::small(f.schema.len(), NODES, CUSTOMERS);
        let tc = TrainConfig {
            max_epochs: 8,
            seed: 7,
            ..TrainConfig::default()
        };
        let result = pretrain(&f.tokens[0], &f.tokens[1], &vocab(f), &cfg, &tc, |e| {
            let _ = writeln!(std::io::stderr(), "  pretrain {}", serde_json::to_string(e).unwrap());
        })
        .unwrap();
        let model_val = trafficlm::train::evaluate(&result.checkpoint, &f.tokens[1]).unwrap();
        let bigram_val = BigramModel::fit(&f.tokens[0]).evaluate(&f.tokens[1], cfg.max_len).unwrap();
        Pretrained {
            result,
            model_val,
            bigram_val,
            wall_s: clock.elapsed().as_secs_f64(),
        }
    })
}

struct Detection {
    val_examples: Vec<DetectionExample>,
    val_curves: Vec<Vec<f64>>,
    tau: f64,
    feasible: bool,
    report: EvalReport,
    wall_s: f64,
}

fn detection() -> &'static Detection {
    static D: OnceLock<Detection> = OnceLock::new();
    D.get_or_init(|| {
        let f = fixture();
        let p = pretrained();
        let clock = Instant::now();
        let model = &p.result.checkpoint.model;
        let customers = f.registry.customers();
        let identity: Vec<usize> = (0..NODES).collect();
        let wc = WindowConfig { seed: 3, ..WindowConfig::default() };
        let (val_examples, _) =
            build_examples(&f.raw[1], &f.tokens[1], &f.schema, &f.labels, customers, &wc).unwrap();
        let (test_examples, _) =
            build_examples(&f.raw[2], &f.tokens[2], &f.schema, &f.labels, customers, &wc).unwrap();
        let val_states = window_states(model, &f.tokens[1], &val_examples, &identity, customers).unwrap();
        let train: Vec<HeadExample> = val_states
            .iter()
            .zip(&val_examples)
            .map(|(h, e)| HeadExample { hidden: h.clone(), marks: e.marks.clone() })
            .collect();
        let head = finetune(&train, &FinetuneConfig { seed: 5, ..FinetuneConfig::default() }, |_, _| {}).unwrap();
        let val_curves: Vec<Vec<f64>> = val_states.iter().map(|h| head.survival(h)).collect();
        let choice = select_threshold(&val_examples, &val_curves, 0.1, 80.0).unwrap();
        let test_states = window_states(model, &f.tokens[2], &test_examples, &identity, customers).unwrap();
        let detections: Vec<Option<usize>> =
            test_states.iter().map(|h| detect(&head.survival(h), choice.tau)).collect();
        let report = report(&test_examples, &detections, choice.tau).unwrap();
        Detection {
            val_examples,
            val_curves,
            tau: choice.tau,
            feasible: choice.feasible,
            report,
            wall_s: clock.elapsed().as_secs_f64(),
        }
    })
}

// ---------------------------------------------------------------------------------------------

#[test]
fn schema_exactness() {
    let full = FeatureSchema::full();
    let count = |pred: fn(&Selector) -> bool| full.descriptors().iter().filter(|d| pred(&d.selector)).count();
    let parts = [
        count(|s| matches!(s, Selector::Volume)),
        count(|s| matches!(s, Selector::Protocol(_))),
        count(|s| matches!(s, Selector::Port(_))),
        count(|s| matches!(s, Selector::TcpFlag(_))),
    ];
    let light = FeatureSchema::light().len();
    let pass = full.len() == 86 && parts == [6, 24, 48, 8] && light == 6;
    verdict("schema_exactness", pass, &format!("full={} parts={parts:?} light={light}", full.len()));
}

#[test]
fn feature_sum_conservation() {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let nodes: Vec<Ipv4Addr> = (0..8).map(|i| Ipv4Addr::new(10, 0, 0, i + 1)).collect();
    let registry = NodeRegistry::new(nodes.iter().map(|&ip| (ip, 0)).collect()).unwrap();
    let schema = FeatureSchema::full();
    let span = MinuteSpan::new(1000, 1010).unwrap();
    let pick_ip = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.6) {
            nodes[rng.gen_range(0..nodes.len())]
        } else {
            Ipv4Addr::from(rng.gen::<u32>())
        }
    };
    let mut acc = Accumulator::new(&registry, &schema, span);
    for _ in 0..1000 {
        let packets = rng.gen_range(1..1000u64);
        let r = FlowRecord {
            timestamp_s: rng.gen_range(60_000..60_600),
            src_ip: pick_ip(&mut rng),
            dst_ip: pick_ip(&mut rng),
            src_port: rng.gen(),
            dst_port: rng.gen(),
            protocol: [1, 6, 17, 47, 0, 255][rng.gen_range(0..6)],
            tcp_flags: rng.gen(),
            packets,
            bytes: packets * rng.gen_range(1..1500u64),
        };
        acc.add(&r);
    }
    let (raw, _) = acc.finish();
    let mut violations = 0;
    for v in 0..raw.nodes {
        for t in 0..raw.minutes {
            let row = raw.row(v, t);
            for dir in [Direction::In, Direction::Out] {
                for m in [Measure::Packets, Measure::Bytes, Measure::Flows] {
                    let sum = |pred: &dyn Fn(&Selector) -> bool| -> f64 {
                        schema
                            .descriptors()
                            .iter()
                            .enumerate()
                            .filter(|(_, d)| d.direction == dir && d.measure == m && pred(&d.selector))
                            .map(|(i, _)| row[i])
                            .sum()
                    };
                    let volume = sum(&|s| matches!(s, Selector::Volume));
                    if sum(&|s| matches!(s, Selector::Protocol(_))) != volume
                        || sum(&|s| matches!(s, Selector::Port(_))) != volume
                    {
                        violations += 1;
                    }
                }
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    verdict(
        "feature_sum_conservation",
        violations == 0 && secs < 1.0,
        &format!("violations={violations} time={secs:.3}s"),
    );
}

/// Direct transcription of the binning procedure over 1-based order statistics.
fn reference_cutoffs(series: &[f64], n: usize) -> Vec<f64> {
    let t = series.len();
    let mut x = vec![f64::NAN];
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    x.extend(sorted);
    let at = |i: usize| x[if i > t { t } else { i }];
    let round = |v: f64| -> usize { (v + 0.5).floor() as usize };
    let Some(k) = (1..=t).find(|&i| x[i] > 0.0) else {
        return vec![0.0];
    };
    let delta = round((t - (k - 1)) as f64 / (n - 1) as f64).max(1);
    let mut tentative = vec![f64::NAN; n + 1];
    for i in 1..n {
        tentative[i] = at(k - 1 + i * delta);
    }
    let mut c = vec![0.0, tentative[1]];
    for j in 2..n {
        if tentative[j] != c[j - 1] {
            c.push(tentative[j]);
        } else {
            let Some(m) = (1..=t).find(|&i| x[i] > tentative[j]) else {
                break;
            };
            c.push(x[m]);
            let d2 = round((t - (m - 1)) as f64 / (n - j) as f64).max(1);
            if j + 1 < n {
                tentative[j + 1] = at(m - 1 + d2);
            }
        }
    }
    c
}

#[test]
fn binning_fidelity() {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut mismatches, mut zero_violations, mut balance_checked, mut balance_failures) = (0, 0, 0, 0);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let t = rng.gen_range(20..=5000);
        let zero_frac = rng.gen_range(0.0..0.6);
        let distinct = case % 2 == 0;
        let series: Vec<f64> = (0..t)
            .map(|i| {
                if rng.gen_bool(zero_frac) {
                    0.0
                } else if distinct {
                    // Distinct positives.
                    (i + 1) as f64 * 1.0001 + rng.gen_range(0.0..0.5)
                } else {
                    rng.gen_range(1..40) as f64
                }
            })
            .collect();
        let fitted = fit_bins(&series, 10).unwrap();
        let expected = reference_cutoffs(&series, 10);
        if fitted.values() != expected.as_slice() {
            mismatches += 1;
        }
        let cats: Vec<u8> = series.iter().map(|&x| discretize_value(x, &fitted)).collect();
        zero_violations += series.iter().zip(&cats).filter(|(x, c)| (**x == 0.0) != (**c == 0)).count();
        if distinct {
            let positives = series.iter().filter(|&&x| x > 0.0).count();
            if positives >= 9 {
                balance_checked += 1;
                let share = positives as f64 / 9.0;
                let mut counts = [0usize; 10];
                for &c in &cats {
                    counts[c as usize] += 1;
                }
                let dev = counts[1..].iter().map(|&c| (c as f64 - share).abs()).fold(0.0, f64::max);
                worst = worst.max(dev);
                if dev > 2.0 {
                    balance_failures += 1;
                }
            }
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    verdict(
        "binning_fidelity",
        mismatches == 0 && zero_violations == 0 && balance_failures == 0 && secs < 10.0,
        &format!(
            "reference mismatches={mismatches}/200 zero-category violations={zero_violations} \
             balance outside +/-2: {balance_failures}/{balance_checked} series (worst deviation {worst:.2}) time={secs:.2}s"
        ),
    );
}

fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    m.params.for_each_mut(|_, s| s.iter_mut().for_each(|x| *x += rng.gen_range(-0.2..0.2)));
    m
}

fn steps_of(toks: &[Vec<u8>], node: usize, customer: usize, t0: u64) -> Vec<StepInput<'_>> {
    toks.iter()
        .enumerate()
        .map(|(i, t)| StepInput {
            tokens: t,
            time: TimeFeatures::from_epoch_minute(t0 + i as u64),
            node,
            customer,
        })
        .collect()
}

#[test]
fn causality() {
    let cfg = ModelConfig { max_len: 64, ..ModelConfig::small(6, 4, 2) };
    let model = random_model(cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..50 {
        let len = rng.gen_range(2..=64);
        let toks: Vec<Vec<u8>> = (0..len).map(|_| (0..6).map(|_| rng.gen_range(0..10)).collect()).collect();
        let t_prime = rng.gen_range(0..len);
        let mut changed = toks.clone();
        for t in t_prime..len {
            changed[t] = (0..6).map(|_| rng.gen_range(0..10)).collect();
        }
        let (node, cust) = (rng.gen_range(0..4), rng.gen_range(0..2));
        let t0 = rng.gen_range(28_000_000..29_000_000);
        let a = model.forward(&steps_of(&toks, node, cust, t0), Mode::Eval).unwrap();
        let b = model.forward(&steps_of(&changed, node, cust, t0), Mode::Eval).unwrap();
        for t in 0..t_prime {
            if a[t].logits != b[t].logits || a[t].hidden != b[t].hidden {
                violations += 1;
            }
        }
    }
    verdict("causality", violations == 0, &format!("differing earlier outputs={violations} over 50 sequences"));
}

#[test]
fn gradient_check() {
    let clock = Instant::now();
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 64,
        max_len: 5,
        n_features: 3,
        n_bins: 4,
        n_nodes: 2,
        n_customers: 2,
        dropout: 0.0,
    };
    let model = random_model(cfg.clone(), 3);
    let toks: Vec<Vec<u8>> = (0..5).map(|i| vec![(i % 4) as u8, ((i * 3 + 1) % 4) as u8, 3]).collect();
    let seq = steps_of(&toks, 1, 0, 28_400_000);
    let mut grads = ModelParams::zeros(&cfg);
    model.loss_and_grad(&seq, Mode::Eval, 1.0, &mut grads).unwrap();
    let loss = |m: &Model| m.sequence_loss(&seq).unwrap().nll_sum;
    let h = 1e-5;
    let mut worst = (String::new(), 0.0f64);
    let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        let analytic = grads.tensors()[ti].1.to_vec();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for i in 0..analytic.len() {
            let mut p = model.clone();
            p.params.tensors_mut()[ti].1[i] += h;
            let mut q = model.clone();
            q.params.tensors_mut()[ti].1[i] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            diff += (fd - analytic[i]).powi(2);
            norm += fd.powi(2) + analytic[i].powi(2);
        }
        let rel = if norm == 0.0 { 0.0 } else { diff.sqrt() / norm.sqrt() };
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    verdict(
        "gradient_check",
        worst.1 < 1e-4 && secs < 60.0,
        &format!("{} tensors, worst relative error {:.2e} ({}), time={secs:.1}s", names.len(), worst.1, worst.0),
    );
}

fn token_tensor(data: Vec<u8>, nodes: usize, minutes: usize, features: usize) -> TokenTensor {
    let mut t = Tensor3::<u8>::zeros(nodes, minutes, features, 28_400_000, "x".into());
    t.data = data;
    TokenTensor::new(t, 10).unwrap()
}

#[test]
fn metric_identities() {
    // Uniform predictor.
    let cfg = ModelConfig { max_len: 64, ..ModelConfig::small(4, 2, 1) };
    let mut model = Model::new(cfg, 0).unwrap();
    model.params.head_w.fill(0.0);
    model.params.head_b.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let toks = token_tensor((0..2 * 300 * 4).map(|_| rng.gen_range(0..10)).collect(), 2, 300, 4);
    let uniform = trafficlm::train::evaluate_model(&model, &toks, &[0, 0], 64).unwrap();
    let uniform_ok = (uniform.loss - 10f64.ln()).abs() < 1e-9 && (uniform.ppl - uniform.loss.exp()).abs() < 1e-9;

    // Bigram against an independent count.
    let bigram = BigramModel::fit(&toks).evaluate(&toks, 64).unwrap();
    // Counts per (node, feature), then scoring in stream order: node, minute, feature.
    let mut counts = vec![vec![[0u64; 10]; 11]; 2 * 4];
    for v in 0..2 {
        for f in 0..4 {
            let s = toks.tokens.series(v, f);
            let c = &mut counts[v * 4 + f];
            for i in 0..s.len() {
                c[10][s[i] as usize] += 1;
                if i > 0 {
                    c[s[i - 1] as usize][s[i] as usize] += 1;
                }
            }
        }
    }
    let mut nll = 0.0;
    let mut n = 0usize;
    for v in 0..2 {
        for i in 0..300 {
            for f in 0..4 {
                let s = toks.tokens.series(v, f);
                let c = &counts[v * 4 + f];
                let row = if i % 64 == 0 { 10 } else { s[i - 1] as usize };
                let total: u64 = c[row].iter().sum();
                nll -= ((c[row][s[i] as usize] + 1) as f64 / (total + 10) as f64).ln();
                n += 1;
            }
        }
    }
    let oracle_ppl = (nll / n as f64).exp();
    let bigram_ok = bigram.ppl == oracle_ppl && (bigram.ppl - bigram.loss.exp()).abs() < 1e-9;
    verdict(
        "metric_identities",
        uniform_ok && bigram_ok,
        &format!(
            "uniform loss={:.12} (ln10={:.12}) ppl-exp gap={:.1e}; bigram ppl={} oracle={}",
            uniform.loss,
            10f64.ln(),
            (uniform.ppl - uniform.loss.exp()).abs(),
            bigram.ppl,
            oracle_ppl
        ),
    );
}

#[test]
fn perplexity_vs_bigram() {
    let f = fixture();
    let p = pretrained();
    let total = f.prepare_s + p.wall_s;
    let pass = p.model_val.ppl <= p.bigram_val.ppl && total <= 1800.0;
    verdict(
        "perplexity_vs_bigram",
        pass,
        &format!(
            "model val ppl={:.4} acc={:.4}; bigram val ppl={:.4} acc={:.4}; epochs={} best={}; \
             data {:.0}s + training {:.0}s = {:.0}s on {} core(s)",
            p.model_val.ppl,
            p.model_val.accuracy,
            p.bigram_val.ppl,
            p.bigram_val.accuracy,
            p.result.checkpoint.training.epochs,
            p.result.checkpoint.training.best_epoch,
            f.prepare_s,
            p.wall_s,
            total,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    );
}

#[test]
fn survival_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=64);
        let scale = [0.1, 1.0, 10.0, 100.0][rng.gen_range(0..4)];
        let logits: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let s = survival_from_logits(&logits);
        if s.windows(2).any(|w| w[1] > w[0]) || s.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            violations += 1;
        }
    }
    verdict("survival_monotonicity", violations == 0, &format!("violating curves={violations}/1000"));
}

#[test]
fn detection_sanity() {
    let d = detection();
    let r = &d.report;
    let median = r.median_mitigation.unwrap_or(f64::INFINITY);
    let pass = r.f1 >= 0.9 && median <= 3.0 && d.wall_s <= 900.0;
    verdict(
        "detection_sanity",
        pass,
        &format!(
            "F1={:.3} median mitigation={median} min (TP={} FP={} TN={} FN={}) tau={:.2} feasible={} \
             effectiveness={:.1}% overhead={:.3}% fine-tune+evaluate {:.0}s",
            r.f1,
            r.true_positives,
            r.false_positives,
            r.true_negatives,
            r.false_negatives,
            d.tau,
            d.feasible,
            r.effectiveness,
            r.overhead,
            d.wall_s
        ),
    );
}

#[test]
fn threshold_monotonicity() {
    let d = detection();
    let caps: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.1).collect();
    let choices: Vec<_> = caps
        .iter()
        .map(|&cap| select_threshold(&d.val_examples, &d.val_curves, cap, 80.0).unwrap())
        .collect();
    let mut violations = 0;
    let mut feasible = 0;
    for i in 0..caps.len() {
        if !choices[i].feasible {
            continue;
        }
        feasible += 1;
        for j in i + 1..caps.len() {
            if choices[j].feasible && choices[i].mean_effectiveness > choices[j].mean_effectiveness {
                violations += 1;
            }
        }
    }
    verdict(
        "threshold_monotonicity",
        violations == 0 && feasible > 0,
        &format!("{} caps, {feasible} feasible, violating pairs={violations}", caps.len()),
    );
}

#[test]
fn unseen_node_mapping() {
    // Training nodes 3 and 7 share a series; the held-out node copies node 7.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (nodes, minutes, features) = (10, 300, 6);
    let mut train = RawTensor::zeros(nodes, minutes, features, 0, "s".into());
    for x in train.data.iter_mut() {
        *x = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(1..500) as f64 };
    }
    for m in 0..minutes {
        let row = train.row(7, m).to_vec();
        train.row_mut(3, m).copy_from_slice(&row);
    }
    let disc: Discretizer = fit_all(&train, 10).unwrap();
    let mut held = RawTensor::zeros(2, minutes, features, 0, "s".into());
    for m in 0..minutes {
        let row = train.row(7, m).to_vec();
        held.row_mut(0, m).copy_from_slice(&row);
        let other: Vec<f64> = row.iter().map(|x| x * 2.0 + 1.0).collect();
        held.row_mut(1, m).copy_from_slice(&other);
    }
    let map = map_unseen_nodes(&held, &disc).unwrap();
    let summary = trafficlm::discretize::summarize_node(&held, 0);
    let distance = trafficlm::discretize::l1_distance(&summary, &disc.summaries[map[0]]);
    verdict(
        "unseen_node_mapping",
        map[0] == 3 && distance == 0.0,
        &format!("duplicate of training nodes 3 and 7 mapped to {} at L1 distance {distance}", map[0]),
    );
}
